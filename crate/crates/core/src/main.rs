#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use exonode::cci;
use exonode::dataset::{load_dataset, SubjectDataset};
use exonode::kernelstats::NullMethod;
use exonode::nfivae::{infer_latents, save_checkpoint, train_nfivae};
use exonode::pipeline::{self, run_pipeline, with_workers, PipelineConfig};
use exonode::synthetic::{generate_fig2_scm, write_dataset, Mechanism};
use exonode::{Error, Result};

/// Find external nodes that must join a studied network for causal
/// sufficiency.
#[derive(Parser)]
#[command(name = "exonode", version)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Master seed (for `synth`: the dataset seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Log progress to stderr (repeat for more detail).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring configuration fields.
#[derive(Args)]
struct Overrides {
    /// Dataset directory (labels.csv + sub_<id>.csv).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    in_network: Option<String>,
    /// Comma-separated candidate networks.
    #[arg(long, global = true, value_delimiter = ',')]
    candidate_networks: Option<Vec<String>>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    cci_threshold: Option<f64>,
    /// spectral-montecarlo, gamma or permutation.
    #[arg(long, global = true)]
    null_method: Option<NullMethod>,
    #[arg(long, global = true)]
    n_null_draws: Option<usize>,
    #[arg(long, global = true)]
    pc_alpha: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Stability runs.
    #[arg(long, global = true)]
    n_runs: Option<usize>,
    /// Stability ranking depth.
    #[arg(long, global = true)]
    top_k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: screening, NF-iVAE, CCI selection, skeletons.
    Run {
        /// Also run the multi-seed stability analysis.
        #[arg(long)]
        stability: bool,
    },
    /// Screening only.
    Screen,
    /// Train the NF-iVAE on the in-network nodes and write latents.
    Train {
        #[arg(long, default_value_t = 2)]
        latent_dim: usize,
    },
    /// Multi-seed top-k CCI stability analysis.
    Stability {
        #[arg(long, default_value_t = 2)]
        latent_dim: usize,
    },
    /// Write the synthetic two-confounder fixture dataset.
    Synth {
        #[arg(long, default_value_t = 40)]
        subjects: usize,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = MechanismArg::Linear)]
        mechanism: MechanismArg,
    },
    /// PC skeleton over the in-network nodes, optionally with extra nodes.
    Skeleton {
        /// Comma-separated nodes to add to the in-network set.
        #[arg(long, value_delimiter = ',')]
        with: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Linear,
    Mlp,
}

fn build_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_toml_file(path)?,
        None => PipelineConfig::default(),
    };
    let o = &cli.overrides;
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.workers {
        cfg.workers = v;
    }
    if let Some(v) = &cli.output {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = &o.data {
        cfg.dataset_dir = v.clone();
    }
    if let Some(v) = &o.in_network {
        cfg.in_network = v.clone();
    }
    if let Some(v) = &o.candidate_networks {
        cfg.candidate_networks = v.clone();
    }
    if let Some(v) = o.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = o.cci_threshold {
        cfg.cci_threshold = v;
    }
    if let Some(v) = o.null_method {
        cfg.null_method = v;
    }
    if let Some(v) = o.n_null_draws {
        cfg.n_null_draws = v;
    }
    if let Some(v) = o.pc_alpha {
        cfg.pc_alpha = v;
    }
    if let Some(v) = o.epochs {
        cfg.nfivae.epochs = v;
    }
    if let Some(v) = o.n_runs {
        cfg.stability.n_runs = v;
    }
    if let Some(v) = o.top_k {
        cfg.stability.k = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_output(cfg: &PipelineConfig) -> Result<&Path> {
    let out = cfg.output_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(out)
}

fn load(cfg: &PipelineConfig) -> Result<SubjectDataset> {
    load_dataset(&cfg.dataset_dir)
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = build_config(&cli)?;
    match cli.command {
        Command::Run { stability } => {
            cfg.stability.enabled |= stability;
            let report = run_pipeline(&cfg)?;
            println!("candidates: {}", report.candidates.names().join(","));
            println!(
                "selected: {}",
                report.selected.iter().cloned().collect::<Vec<_>>().join(",")
            );
            for note in &report.notes {
                println!("note: {note}");
            }
            println!("report: {}", cfg.output_dir.join("report.json").display());
        }
        Command::Screen => {
            let ds = load(&cfg)?;
            let out = prepare_output(&cfg)?;
            let outcome = with_workers(cfg.workers, || pipeline::screen(&ds, &cfg))??;
            outcome.candidates.write_csv(&out.join("candidates.csv"))?;
            println!("candidates: {}", outcome.candidates.names().join(","));
        }
        Command::Train { latent_dim } => {
            let ds = load(&cfg)?;
            let out = prepare_output(&cfg)?;
            let z = ds.restrict(&cfg.in_network_nodes(&ds)?)?;
            let ncfg = cfg.effective_nfivae(latent_dim);
            let (model, log) = train_nfivae(&z, &ncfg)?;
            save_checkpoint(&model, &out.join("model.json"))?;
            log.write_csv(&out.join("training_log.csv"))?;
            infer_latents(&model, &z)?.write_csv(&out.join("latents.csv"))?;
            if let Some(last) = log.epochs.last() {
                println!("final loss {:.4} after {} epochs", last.total, log.epochs.len());
            }
        }
        Command::Stability { latent_dim } => {
            let out = prepare_output(&cfg)?.to_path_buf();
            cfg.nfivae.latent_dim = latent_dim;
            let rep = with_workers(cfg.workers, || {
                cci::stability_analysis(&cfg, cfg.stability.n_runs, cfg.stability.k)
            })??;
            rep.write_csv(&out.join("stability.csv"))?;
            rep.write_plot_data(&out.join("stability_plot.csv"))?;
            for (node, f) in &rep.frequencies {
                println!("{node}\t{f:.3}");
            }
        }
        Command::Synth {
            subjects,
            samples,
            mechanism,
        } => {
            let mech = match mechanism {
                MechanismArg::Linear => Mechanism::LinearGaussian,
                MechanismArg::Mlp => Mechanism::MlpNonlinear,
            };
            let out = prepare_output(&cfg)?;
            let (ds, _) = generate_fig2_scm(subjects, samples, mech, cli.seed.unwrap_or(0))?;
            let files = write_dataset(&ds, out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Skeleton { with } => {
            let ds = load(&cfg)?;
            let out = prepare_output(&cfg)?;
            let mut nodes = cfg.in_network_nodes(&ds)?;
            nodes.extend(with);
            let skel = with_workers(cfg.workers, || pipeline::skeleton_over(&ds, &nodes, &cfg))??;
            skel.write(&out.join("skeleton.txt"))?;
            print!("{}", skel.to_edge_list());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
