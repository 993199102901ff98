use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::{info, warn};

use dsat::harness::ablation::{mean_nme, run_ablation, Variant};
use dsat::harness::checkpoint;
use dsat::harness::config::TrainConfig;
use dsat::harness::dataset::{read_dataset, write_dataset};
use dsat::harness::diagnostics::{grad_check_config, model_grad_check};
use dsat::harness::evaluate::{evaluate, EvalReport};
use dsat::harness::model::build_model;
use dsat::harness::synth::{generate_set, Mix, SyntheticSample};
use dsat::harness::train::train;
use dsat::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dsat",
    version,
    about = "Gated hourglass landmark detector on synthetic faces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic face dataset into a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Difficulty proportions, e.g. `neutral:0.4,occluded:0.2,rotated:0.2,blurred:0.2`.
        #[arg(
            long,
            default_value = "neutral:0.4,occluded:0.2,rotated:0.2,blurred:0.2"
        )]
        mix: Mix,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Train a model and write a checkpoint plus its loss curve.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint manifest path; values go to `<stem>.bin` next to it.
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; overrides `data_dir` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Config overrides as `key=value`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report JSON; per-sample gate ratios go to `<stem>.gates.csv`.
        #[arg(long)]
        report: PathBuf,
    },
    /// Aggregate gate activation ratios of an evaluation report per cluster.
    GateStats {
        #[arg(long)]
        report: PathBuf,
        /// CSV output; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare model gradients against central differences.
    GradCheck {
        /// Model config; the smallest supported model when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
    },
    /// Train and evaluate model variants over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "shn,shn+dsa,shn+dss,dsat"
        )]
        variants: Vec<Variant>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// JSON file for the per-run results.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn training_samples(cfg: &TrainConfig) -> Result<Vec<SyntheticSample>> {
    match &cfg.data_dir {
        Some(dir) => {
            let samples = read_dataset(Path::new(dir))?;
            if samples
                .first()
                .is_some_and(|s| s.image_size() != cfg.image_size)
            {
                return Err(Error::Config(format!(
                    "dataset images are {}px, config expects {}px",
                    samples[0].image_size(),
                    cfg.image_size
                )));
            }
            Ok(samples)
        }
        None => generate_set(cfg.seed, cfg.train_samples, &Mix::default(), cfg.image_size),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            count,
            mix,
            seed,
            image_size,
        } => {
            let samples = generate_set(seed, count, &mix, image_size)?;
            write_dataset(&out, &samples)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Train {
            config,
            out,
            data,
            overrides,
        } => {
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            if let Some(d) = data {
                cfg.data_dir = Some(d.display().to_string());
            }
            let samples = training_samples(&cfg)?;
            let (mut store, model) = build_model(&cfg)?;
            info!(
                "training {} parameters on {} samples for {} iterations",
                store.trainable_scalars(),
                samples.len(),
                cfg.iterations
            );
            let start = Instant::now();
            let mut curve = String::from("iteration,loss\n");
            let outcome = train(&cfg, &model, &mut store, &samples, |it, loss| {
                curve.push_str(&format!("{it},{loss}\n"));
                if it % 50 == 0 {
                    info!("iteration {it}: loss {loss:.6}");
                }
            });
            write(&sibling(&out, ".loss.csv"), &curve)?;
            match outcome {
                Ok(o) => {
                    if o.clamped > 0 {
                        warn!("{} landmarks were clamped onto the heatmap", o.clamped);
                    }
                    checkpoint::save(&out, &cfg, &store)?;
                    println!(
                        "final loss {:.6} after {:.1}s; checkpoint {}",
                        o.losses.last().copied().unwrap_or(f64::NAN),
                        start.elapsed().as_secs_f64(),
                        out.display()
                    );
                }
                Err(e @ Error::Diverged { .. }) => {
                    let path = sibling(&out, ".last_good.json");
                    checkpoint::save(&path, &cfg, &store)?;
                    eprintln!("last good checkpoint written to {}", path.display());
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            report,
        } => {
            let (cfg, mut store, model) = checkpoint::load(&ckpt)?;
            let samples = read_dataset(&data)?;
            let r = evaluate(&cfg, &model, &mut store, &samples)?;
            write(&report, &r.to_json()?)?;
            write(&sibling(&report, ".gates.csv"), &r.gates_csv(cfg.channels))?;
            println!(
                "NME {:.3}%  FR {:.3} over {} samples",
                r.overall.nme, r.overall.failure_rate, r.overall.count
            );
            for c in &r.clusters {
                println!(
                    "  {:<9} NME {:.3}%  FR {:.3}  n={}",
                    c.label, c.nme, c.failure_rate, c.count
                );
            }
        }
        Command::GateStats { report, out } => {
            let r = EvalReport::read(&report)?;
            let csv = r.gates.to_csv();
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::GradCheck { config, tol, eps } => {
            let cfg = match config {
                Some(p) => load_config(Some(&p), &[])?,
                None => grad_check_config(),
            };
            let start = Instant::now();
            let (count, report) = model_grad_check(&cfg, eps, tol)?;
            println!(
                "checked {} entries of {count} parameters in {:.1}s; max relative error {:.3e}",
                report.checked,
                start.elapsed().as_secs_f64(),
                report.max_rel_error
            );
            if let Some(w) = &report.worst {
                println!(
                    "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
                    w.name, w.index, w.analytic, w.numeric
                );
            }
            if !report.passed() {
                return Err(Error::Contract(format!(
                    "{} entries exceed tolerance {tol}",
                    report.flagged.len()
                )));
            }
        }
        Command::Ablate {
            config,
            variants,
            seeds,
            overrides,
            out,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let results = run_ablation(&cfg, &variants, &seeds, |r| {
                println!(
                    "{:<8} seed {}  NME {:.3}%  FR {:.3}  final loss {:.5}",
                    r.variant.name(),
                    r.seed,
                    r.nme,
                    r.failure_rate,
                    r.final_loss
                );
            })?;
            for (v, nme) in mean_nme(&results, &variants) {
                println!("mean {:<8} NME {nme:.3}%", v.name());
            }
            if let Some(p) = out {
                write(&p, &(serde_json::to_string_pretty(&results)? + "\n"))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
