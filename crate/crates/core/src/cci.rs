//! Matching inferred latents to candidate signals.
//!
//! A candidate's CCI is the largest absolute Pearson correlation between its
//! pooled signal and any latent dimension. Candidates whose CCI exceeds a
//! threshold are declared confounders. Because the latents depend on the
//! network initialisation, [`stability_runs`] repeats training under many
//! seeds and records how often each node lands in the top-k.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SubjectDataset;
use crate::error::{Error, Result};
use crate::kernelstats::SampleVector;
use crate::linalg::{pearson, std_dev};
use crate::nfivae::{infer_latents, train_nfivae, LatentEstimate, NfIvaeConfig};
use crate::screening::CandidateSet;

/// Default CCI threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Default ranking depth for the stability protocol.
pub const DEFAULT_TOP_K: usize = 5;
/// A stability report is invalid if more than this fraction of runs fail.
pub const MAX_FAILED_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Matching {
    /// Each candidate takes its best latent; latents may be shared.
    #[default]
    PerCandidate,
    /// Candidates and latents are paired one-to-one, maximising the total
    /// |r|. Unpaired candidates get CCI 0. Diagnostic only.
    OneToOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CciEntry {
    /// Matched latent dimension (`None` only for unpaired candidates under
    /// one-to-one matching).
    pub latent: Option<usize>,
    pub cci: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CciTable {
    pub entries: BTreeMap<String, CciEntry>,
}

impl CciTable {
    pub fn get(&self, node: &str) -> Option<f64> {
        self.entries.get(node).map(|e| e.cci)
    }

    /// Nodes sorted by CCI, highest first; ties broken by name.
    pub fn ranking(&self) -> Vec<String> {
        let mut v: Vec<(&String, f64)> = self.entries.iter().map(|(k, e)| (k, e.cci)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v.into_iter().map(|(k, _)| k.clone()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["candidate", "latent", "cci"])?;
        for (node, e) in &self.entries {
            let latent = e.latent.map(|l| l.to_string()).unwrap_or_default();
            w.write_record([node.as_str(), latent.as_str(), &e.cci.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// |Pearson r| between every candidate and every latent dimension.
fn correlation_matrix(
    latents: &LatentEstimate,
    candidates: &BTreeMap<String, SampleVector>,
) -> Result<Vec<(String, Vec<f64>)>> {
    let columns: Vec<Vec<f64>> = (0..latents.latent_dim()).map(|k| latents.column(k)).collect();
    let mut out = Vec::new();
    for (name, signal) in candidates {
        if signal.len() != latents.n_rows() {
            return Err(Error::LengthMismatch(latents.n_rows(), signal.len()));
        }
        if std_dev(signal.values()) == 0.0 {
            return Err(Error::DegenerateSignal(name.clone()));
        }
        let r = columns.iter().map(|c| pearson(c, signal.values()).abs()).collect();
        out.push((name.clone(), r));
    }
    Ok(out)
}

/// CCI of every candidate (pooled over subjects and time).
pub fn compute_cci(latents: &LatentEstimate, candidates: &BTreeMap<String, SampleVector>) -> Result<CciTable> {
    compute_cci_with(latents, candidates, Matching::PerCandidate)
}

pub fn compute_cci_with(
    latents: &LatentEstimate,
    candidates: &BTreeMap<String, SampleVector>,
    matching: Matching,
) -> Result<CciTable> {
    let corr = correlation_matrix(latents, candidates)?;
    let entries = match matching {
        Matching::PerCandidate => corr
            .into_iter()
            .map(|(name, r)| {
                let best = r
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(&a.0)))
                    .map(|(k, &v)| (k, v));
                let entry = match best {
                    Some((k, v)) => CciEntry {
                        latent: Some(k),
                        cci: v,
                    },
                    None => CciEntry { latent: None, cci: 0.0 },
                };
                (name, entry)
            })
            .collect(),
        Matching::OneToOne => one_to_one(&corr, latents.latent_dim())?,
    };
    Ok(CciTable { entries })
}

/// Exact maximum-weight matching by dynamic programming over subsets of
/// latent dimensions (latent counts are small).
fn one_to_one(corr: &[(String, Vec<f64>)], d: usize) -> Result<BTreeMap<String, CciEntry>> {
    if d > 16 {
        return Err(Error::InvalidArgument(
            "one-to-one matching supports at most 16 latents".into(),
        ));
    }
    let n = corr.len();
    let states = 1usize << d;
    // best[i][mask]: best total over candidates i.. with `mask` latents taken.
    let mut best = vec![vec![0.0_f64; states]; n + 1];
    for i in (0..n).rev() {
        for mask in 0..states {
            let mut v = best[i + 1][mask];
            for k in 0..d {
                if mask & (1 << k) == 0 {
                    v = v.max(corr[i].1[k] + best[i + 1][mask | (1 << k)]);
                }
            }
            best[i][mask] = v;
        }
    }
    let mut out = BTreeMap::new();
    let mut mask = 0usize;
    for (i, (name, r)) in corr.iter().enumerate() {
        let mut entry = CciEntry { latent: None, cci: 0.0 };
        if best[i][mask] != best[i + 1][mask] {
            for k in 0..d {
                if mask & (1 << k) == 0 && r[k] + best[i + 1][mask | (1 << k)] == best[i][mask] {
                    entry = CciEntry {
                        latent: Some(k),
                        cci: r[k],
                    };
                    mask |= 1 << k;
                    break;
                }
            }
        }
        out.insert(name.clone(), entry);
    }
    Ok(out)
}

/// Candidates whose CCI is strictly above `threshold`.
pub fn select_confounders(candidates: &CandidateSet, table: &CciTable, threshold: f64) -> BTreeSet<String> {
    candidates
        .names()
        .into_iter()
        .filter(|s| table.get(s).is_some_and(|c| c > threshold))
        .collect()
}

/// Top-k membership frequencies over repeated NF-iVAE runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub frequencies: BTreeMap<String, f64>,
    pub k: usize,
    /// Runs that completed.
    pub n_runs: usize,
    pub n_failed: usize,
    pub seeds: Vec<u64>,
    /// Top-k set of every completed run, in seed order.
    pub top_k: Vec<Vec<String>>,
}

impl StabilityReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["node", "frequency", "k", "n_runs"])?;
        for (node, f) in &self.frequencies {
            w.write_record([
                node.as_str(),
                &f.to_string(),
                &self.k.to_string(),
                &self.n_runs.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `node,frequency` rows sorted by frequency (highest first), ready for a
    /// bar chart of top-k inclusion.
    pub fn write_plot_data(&self, path: &Path) -> Result<()> {
        let mut rows: Vec<(&String, f64)> = self.frequencies.iter().map(|(k, &v)| (k, v)).collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["node", "frequency"])?;
        for (node, f) in rows {
            w.write_record([node.as_str(), &f.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One stability run: train with `seed`, infer latents, rank `signals`.
pub fn single_run(
    z: &SubjectDataset,
    signals: &BTreeMap<String, SampleVector>,
    cfg: &NfIvaeConfig,
    seed: u64,
) -> Result<CciTable> {
    let cfg = NfIvaeConfig { seed, ..cfg.clone() };
    let (model, _) = train_nfivae(z, &cfg)?;
    let latents = infer_latents(&model, z)?;
    compute_cci(&latents, signals)
}

/// Train once per seed (in parallel), rank every node in `signals` by CCI
/// and record top-k membership frequencies.
pub fn stability_runs(
    z: &SubjectDataset,
    signals: &BTreeMap<String, SampleVector>,
    cfg: &NfIvaeConfig,
    seeds: &[u64],
    k: usize,
) -> Result<StabilityReport> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument("stability analysis needs ≥ 2 runs".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be ≥ 1".into()));
    }
    let results: Vec<Result<CciTable>> = seeds.par_iter().map(|&s| single_run(z, signals, cfg, s)).collect();
    let mut top_k = Vec::new();
    let mut failed = 0;
    for (seed, r) in seeds.iter().zip(results) {
        match r {
            Ok(table) => top_k.push(table.ranking().into_iter().take(k).collect::<Vec<_>>()),
            Err(e) => {
                log::warn!("stability run with seed {seed} failed: {e}");
                failed += 1;
            }
        }
    }
    if failed as f64 > MAX_FAILED_FRACTION * seeds.len() as f64 {
        return Err(Error::StabilityFailed {
            failed,
            total: seeds.len(),
        });
    }
    let completed = top_k.len();
    let frequencies = signals
        .keys()
        .map(|node| {
            let hits = top_k.iter().filter(|t| t.contains(node)).count();
            (node.clone(), hits as f64 / completed as f64)
        })
        .collect();
    Ok(StabilityReport {
        frequencies,
        k,
        n_runs: completed,
        n_failed: failed,
        seeds: seeds.to_vec(),
        top_k,
    })
}

/// The stability protocol driven by a pipeline configuration: run `i` uses
/// seed `stability_base + i` (see [`crate::pipeline::StageSeeds`]) and
/// every node of the candidate pool is ranked. The latent dimension is taken
/// from `cfg.nfivae` as given.
pub fn stability_analysis(cfg: &crate::pipeline::PipelineConfig, n_runs: usize, k: usize) -> Result<StabilityReport> {
    let ds = crate::dataset::load_dataset(&cfg.dataset_dir)?;
    let z_nodes = cfg.in_network_nodes(&ds)?;
    let pool = cfg.candidate_pool(&ds)?;
    let z = ds.restrict(&z_nodes)?;
    let signals = pooled_signals(&ds, &pool)?;
    let base = cfg.seeds().stability_base;
    let seeds: Vec<u64> = (0..n_runs as u64).map(|i| base.wrapping_add(i)).collect();
    stability_runs(&z, &signals, &cfg.nfivae, &seeds, k)
}

/// Pooled (subject-stacked) signals for the named nodes.
pub fn pooled_signals(ds: &SubjectDataset, nodes: &[String]) -> Result<BTreeMap<String, SampleVector>> {
    nodes
        .iter()
        .map(|n| Ok((n.clone(), SampleVector::new(ds.pooled(n)?)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn latents_from(cols: &[Vec<f64>]) -> LatentEstimate {
        let n = cols[0].len();
        let values = DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r]);
        LatentEstimate {
            values,
            subjects: vec![0; n],
        }
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::seed::rng(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn signals(pairs: &[(&str, Vec<f64>)]) -> BTreeMap<String, SampleVector> {
        pairs
            .iter()
            .map(|(n, v)| (n.to_string(), SampleVector::new(v.clone()).unwrap()))
            .collect()
    }

    #[test]
    fn exact_and_negated_latents_score_one() {
        let (a, b) = (noise(200, 1), noise(200, 2));
        let lat = latents_from(&[a.clone(), b.clone()]);
        let neg: Vec<f64> = b.iter().map(|v| -v).collect();
        let t = compute_cci(&lat, &signals(&[("x", a), ("y", neg)])).unwrap();
        assert!((t.get("x").unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(t.entries["x"].latent, Some(0));
        assert!((t.get("y").unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(t.entries["y"].latent, Some(1));
    }

    #[test]
    fn independent_noise_has_small_cci() {
        let mut small = 0;
        for rep in 0..100 {
            let lat = latents_from(&[noise(10_000, 3 * rep), noise(10_000, 3 * rep + 1)]);
            let t = compute_cci(&lat, &signals(&[("x", noise(10_000, 3 * rep + 2))])).unwrap();
            if t.get("x").unwrap() < 0.05 {
                small += 1;
            }
        }
        assert!(small >= 95, "{small}/100");
    }

    #[test]
    fn degenerate_and_mismatched_signals_are_rejected() {
        let lat = latents_from(&[noise(10, 1)]);
        let flat = signals(&[("c", vec![2.0; 10])]);
        assert!(matches!(compute_cci(&lat, &flat), Err(Error::DegenerateSignal(_))));
        let short = signals(&[("c", noise(9, 2))]);
        assert!(matches!(compute_cci(&lat, &short), Err(Error::LengthMismatch(10, 9))));
    }

    #[test]
    fn one_to_one_prevents_sharing() {
        let a = noise(500, 1);
        let b = noise(500, 2);
        let near_a: Vec<f64> = a.iter().zip(noise(500, 3)).map(|(x, e)| x + 0.3 * e).collect();
        let lat = latents_from(&[a.clone(), b.clone()]);
        let sig = signals(&[("p", a.clone()), ("q", near_a), ("r", noise(500, 4))]);
        let free = compute_cci(&lat, &sig).unwrap();
        assert_eq!(free.entries["p"].latent, Some(0));
        assert_eq!(free.entries["q"].latent, Some(0));
        let paired = compute_cci_with(&lat, &sig, Matching::OneToOne).unwrap();
        let used: Vec<usize> = paired.entries.values().filter_map(|e| e.latent).collect();
        assert_eq!(used.len(), 2);
        assert_ne!(used[0], used[1]);
        assert_eq!(paired.entries["p"].latent, Some(0));
    }

    fn candidate_set(names: &[&str]) -> CandidateSet {
        CandidateSet {
            candidates: names.iter().map(|n| (n.to_string(), Vec::new())).collect(),
        }
    }

    #[test]
    fn selection_boundaries() {
        let s = candidate_set(&["a", "b", "c"]);
        let mut table = CciTable::default();
        for (n, v) in [("a", 0.9), ("b", 0.5), ("c", 0.1), ("d", 0.99)] {
            table.entries.insert(
                n.into(),
                CciEntry {
                    latent: Some(0),
                    cci: v,
                },
            );
        }
        assert!(select_confounders(&s, &table, 1.0).is_empty());
        assert_eq!(select_confounders(&s, &table, 0.0).len(), 3);
        let picked: Vec<_> = select_confounders(&s, &table, 0.5).into_iter().collect();
        assert_eq!(picked, vec!["a".to_string()]);
    }

    #[test]
    fn ranking_breaks_ties_by_name() {
        let mut table = CciTable::default();
        for (n, v) in [("b", 0.5), ("a", 0.5), ("c", 0.7)] {
            table.entries.insert(
                n.into(),
                CciEntry {
                    latent: Some(0),
                    cci: v,
                },
            );
        }
        assert_eq!(table.ranking(), vec!["c", "a", "b"]);
    }

    fn tiny_fixture() -> (SubjectDataset, BTreeMap<String, SampleVector>, NfIvaeConfig) {
        use crate::synthetic::{external, generate_fig2_scm, in_network, Mechanism};
        let (ds, _) = generate_fig2_scm(6, 60, Mechanism::LinearGaussian, 4).unwrap();
        let z = ds.restrict(&in_network()).unwrap();
        let signals = pooled_signals(&ds, &external()).unwrap();
        let cfg = NfIvaeConfig {
            epochs: 3,
            batch_size: 64,
            encoder_widths: vec![8],
            decoder_widths: vec![8],
            tnn_widths: vec![4],
            ..NfIvaeConfig::default()
        };
        (z, signals, cfg)
    }

    #[test]
    fn duplicated_seeds_give_binary_frequencies() {
        let (z, signals, cfg) = tiny_fixture();
        let rep = stability_runs(&z, &signals, &cfg, &[11, 11], 2).unwrap();
        assert_eq!(rep.n_runs, 2);
        assert_eq!(rep.top_k[0], rep.top_k[1]);
        assert!(rep.frequencies.values().all(|&f| f == 0.0 || f == 1.0));
        assert_eq!(rep.frequencies.values().filter(|&&f| f == 1.0).count(), 2);
    }

    #[test]
    fn full_depth_ranking_includes_everyone() {
        let (z, signals, cfg) = tiny_fixture();
        let rep = stability_runs(&z, &signals, &cfg, &[1, 2, 3], signals.len()).unwrap();
        assert!(rep.frequencies.values().all(|&f| f == 1.0));
        assert!(stability_runs(&z, &signals, &cfg, &[1], 2).is_err());
    }

    proptest! {
        #[test]
        fn cci_is_affine_invariant(seed in 0u64..1000, slope in prop_oneof![-5.0..-0.1, 0.1..5.0f64], shift in -10.0..10.0f64) {
            let lat = latents_from(&[noise(50, seed), noise(50, seed + 1)]);
            let x = noise(50, seed + 2);
            let moved: Vec<f64> = x.iter().map(|v| slope * v + shift).collect();
            let a = compute_cci(&lat, &signals(&[("x", x)])).unwrap();
            let b = compute_cci(&lat, &signals(&[("x", moved)])).unwrap();
            prop_assert!((a.get("x").unwrap() - b.get("x").unwrap()).abs() < 1e-9);
        }

        #[test]
        fn cci_bounds_every_dimension(seed in 0u64..1000, d in 1usize..4) {
            let cols: Vec<Vec<f64>> = (0..d as u64).map(|k| noise(40, seed * 10 + k)).collect();
            let x = noise(40, seed * 10 + 9);
            let t = compute_cci(&latents_from(&cols), &signals(&[("x", x.clone())])).unwrap();
            let cci = t.get("x").unwrap();
            prop_assert!((0.0..=1.0).contains(&cci));
            for c in &cols {
                prop_assert!(cci >= pearson(c, &x).abs());
            }
        }

        #[test]
        fn ranking_ignores_monotone_rescaling(vals in proptest::collection::vec(0.0..1.0f64, 1..8), k in 1usize..8) {
            let mut t = CciTable::default();
            let mut scaled = CciTable::default();
            for (i, v) in vals.iter().enumerate() {
                t.entries.insert(format!("n{i}"), CciEntry { latent: Some(0), cci: *v });
                scaled.entries.insert(format!("n{i}"), CciEntry { latent: Some(0), cci: v.powi(3) * 0.5 });
            }
            let top = |t: &CciTable| t.ranking().into_iter().take(k).collect::<BTreeSet<_>>();
            prop_assert_eq!(top(&t), top(&scaled));
        }
    }
}
