use std::collections::BTreeSet;
use std::path::Path;

use exonode::dataset::load_dataset;
use exonode::pipeline::{run_pipeline, run_pipeline_on, ConfounderReport, PipelineConfig, SCREENING_EMPTY};
use exonode::synthetic::{self, generate_fig2_scm, write_dataset, Mechanism};

fn config(data: &Path, out: &Path, seed: u64) -> PipelineConfig {
    PipelineConfig {
        dataset_dir: data.to_path_buf(),
        output_dir: out.to_path_buf(),
        in_network: synthetic::IN_NETWORK_LABEL.into(),
        candidate_networks: vec![synthetic::EXTERNAL_LABEL.into()],
        seed,
        ..PipelineConfig::default()
    }
}

fn names(set: &BTreeSet<String>) -> Vec<&str> {
    set.iter().map(String::as_str).collect()
}

#[test]
fn fixture_from_disk_recovers_both_confounders() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("out"));
    let (ds, spec) = generate_fig2_scm(12, 250, Mechanism::LinearGaussian, 7).unwrap();
    write_dataset(&ds, &data).unwrap();

    let report = run_pipeline(&config(&data, &out, 3)).unwrap();
    assert_eq!(names(&report.selected), ["s2", "s4"]);
    assert!(report.candidates.contains("s2") && report.candidates.contains("s4"));

    let truth = spec.skeleton_among(&synthetic::in_network());
    let after: BTreeSet<_> = report
        .skeleton_after
        .iter()
        .filter(|(a, b)| a.starts_with('z') && b.starts_with('z'))
        .cloned()
        .collect();
    assert_eq!(after, truth);
    assert!(report.skeleton_before.iter().any(|e| !truth.contains(e)));

    for file in [
        "report.json",
        "candidates.csv",
        "screening.csv",
        "cci.csv",
        "stability.csv",
        "training_log.csv",
        "skeleton_before.txt",
        "skeleton_after.txt",
    ] {
        assert!(out.join(file).is_file(), "{file} missing");
    }
    let text = std::fs::read_to_string(out.join("report.json")).unwrap();
    assert_eq!(ConfounderReport::from_json(&text).unwrap(), report);
    let cci = std::fs::read_to_string(out.join("cci.csv")).unwrap();
    assert!(cci.starts_with("candidate,latent,cci\n"));
}

#[test]
fn same_config_same_report() {
    let (ds, _) = generate_fig2_scm(8, 150, Mechanism::LinearGaussian, 1).unwrap();
    let cfg = PipelineConfig {
        nfivae: exonode::nfivae::NfIvaeConfig {
            epochs: 5,
            ..Default::default()
        },
        ..config(Path::new("unused"), Path::new("unused"), 9)
    };
    let mut a = run_pipeline_on(&ds, &cfg).unwrap();
    let mut b = run_pipeline_on(
        &ds,
        &PipelineConfig {
            workers: 2,
            ..cfg.clone()
        },
    )
    .unwrap();
    for r in [&mut a, &mut b] {
        r.execution.timings.clear();
        r.execution.workers = 0;
    }
    assert_eq!(a, b);
    assert_eq!(a.provenance.config_hash, cfg.hash());
}

#[test]
fn only_noise_candidates_leave_the_skeleton_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let (ds, _) = generate_fig2_scm(10, 200, Mechanism::LinearGaussian, 2).unwrap();
    let mut keep = synthetic::in_network();
    keep.push(synthetic::ISOLATED.to_string());
    write_dataset(&ds.restrict(&keep).unwrap(), &data).unwrap();

    let cfg = config(&data, &tmp.path().join("out"), 0);
    let report = run_pipeline_on(&load_dataset(&data).unwrap(), &cfg).unwrap();
    assert!(report.candidates.is_empty());
    assert!(report.selected.is_empty());
    assert!(report.notes.iter().any(|n| n == SCREENING_EMPTY));
    assert!(report.training.is_none());
    assert_eq!(report.skeleton_after, report.skeleton_before);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let err = run_pipeline(&config(&tmp.path().join("nope"), &tmp.path().join("out"), 0)).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
