//! `molflow` command-line front end: training, sampling, reconstruction,
//! latent optimization, hierarchical resampling and self-checks.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use molflow_core::conformance;
use molflow_core::generation::{
    check_temperature, reconstruct, resample_hierarchy, sample, substructure_stats, write_text,
};
use molflow_core::model::{Config, FlowModel};
use molflow_core::molgraph::{canonical_smiles, read_dataset, MolGraph};
use molflow_core::optimize::{fit_surrogate, lso, lso_tsv, scorer, LsoOptions};
use molflow_core::training::{load_run, train, Checkpoint, TrainOptions, Trainer, CHECKPOINT_NAME};
use molflow_core::Error;

const LSO_STEPS: usize = 10;

#[derive(Parser)]
#[command(name = "molflow", version, about = "Hierarchical normalizing flows for molecular graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for every random draw of the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write `model.json`, `model.bin` and `train_log.tsv`.
    Train {
        /// JSON config overriding a preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// One SMILES per line.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed of the config when given.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Draw molecules and write `samples.tsv`.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0.7)]
        temperature: f64,
        /// Training molecules, used for novelty.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Encode and decode a dataset and report the exact-match fraction.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a property surrogate on `--data` and run gradient ascent from the
    /// first `--n` molecules; writes `optimized.tsv`.
    Optimize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "carbon_count")]
        scorer: String,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Surrogate training epochs.
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        /// Minimum Tanimoto similarity to the start molecule.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Redraw the coarsest levels of the first molecule of `--data`; writes
    /// `resample_grid.tsv`.
    Resample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Samples per level.
        #[arg(long, default_value_t = 5)]
        n: usize,
        /// Only report levels below this count.
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long, default_value = "0.7")]
        temperature: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Count connected k-atom substructures in model samples.
    Stats {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 0.7)]
        temperature: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients on a micro-model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check invertibility and log-determinants of every layer.
    Conformance {
        /// Comma-separated layer names or `all`.
        #[arg(long, default_value = "all", value_delimiter = ',')]
        layers: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::BadNoiseScale(_)
            | Error::BadTemperature(_)
            | Error::UnknownScorer(_)
            | Error::Invalid(_)
            | Error::Manifest(_)
            | Error::Mol(_) => Failure::Validation(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    match path {
        None => Ok(Config::zinc_like()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| invalid(format!("--config {}: {e}", p.display())))?;
            Config::from_json(&text).map_err(|e| invalid(format!("--config {}: {e}", p.display())))
        }
    }
}

fn load_model(dir: &Path) -> Result<FlowModel, Failure> {
    if !dir.join(format!("{CHECKPOINT_NAME}.json")).exists() {
        return Err(invalid(format!("--ckpt {}: no {CHECKPOINT_NAME}.json in directory", dir.display())));
    }
    Ok(load_run(dir).map_err(|e| Failure::Runtime(format!("--ckpt {}: {e}", dir.display())))?.model)
}

fn load_data(path: &Path, model_config: &Config) -> Result<Vec<MolGraph>, Failure> {
    read_dataset(path, &model_config.elements).map_err(|e| invalid(format!("--data {}: {e}", path.display())))
}

fn announce(config: &Config, seed: u64) {
    println!("config {}", config.to_json());
    println!("seed {seed}");
}

fn check_threads(threads: usize) -> CliResult {
    if threads == 0 {
        return Err(invalid("--threads must be at least 1"));
    }
    Ok(())
}

fn write_out(dir: &Path, name: &str, text: &str) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("--out {}: {e}", dir.display())))?;
    let path = dir.join(name);
    write_text(&path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn canonical_set(graphs: &[MolGraph]) -> HashSet<String> {
    graphs.iter().filter_map(|g| canonical_smiles(g).ok()).collect()
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train { config, data, out, seed, threads } => {
            check_threads(threads)?;
            let resume = out.join(format!("{CHECKPOINT_NAME}.json")).exists();
            let mut trainer = if resume {
                if config.is_some() || seed.is_some() {
                    return Err(invalid(format!("--out {} holds a checkpoint; resuming ignores --config and --seed", out.display())));
                }
                Trainer::from_checkpoint(Checkpoint::load(&out.join(CHECKPOINT_NAME))?)
            } else {
                let mut cfg = load_config(config.as_deref())?;
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                Trainer::new(FlowModel::new(cfg)?)
            };
            let cfg = trainer.model.config.clone();
            announce(&cfg, cfg.seed);
            let graphs = load_data(&data, &cfg)?;
            if resume {
                println!("resuming at epoch {}", trainer.epoch);
            }
            for s in train(&mut trainer, &graphs, &TrainOptions { threads, out_dir: Some(out.clone()) })? {
                println!("epoch {}\tstep {}\tnll {:.6}\t{:.1}s", s.epoch, s.step, s.nll, s.seconds);
            }
            println!("checkpoint {}", out.join(CHECKPOINT_NAME).display());
        }
        Command::Sample { ckpt, n, temperature, data, out, common } => {
            check_threads(common.threads)?;
            check_temperature(temperature)?;
            let model = load_model(&ckpt)?;
            announce(&model.config, common.seed);
            let train_set = match &data {
                Some(p) => canonical_set(&load_data(p, &model.config)?),
                None => HashSet::new(),
            };
            let r = sample(&model, n, temperature, common.seed, common.threads, &train_set)?;
            write_out(&out, "samples.tsv", &r.to_tsv(&model.config.elements))?;
            let m = &r.metrics;
            println!("validity\t{:.4}", m.validity);
            println!("validity_wo_correction\t{:.4}", m.validity_wo_correction);
            println!("validity_w_filter\t{:.4}", m.validity_w_filter);
            println!("uniqueness\t{:.4}", m.uniqueness);
            if data.is_some() {
                println!("novelty\t{:.4}", m.novelty);
            }
        }
        Command::Reconstruct { ckpt, data, common } => {
            check_threads(common.threads)?;
            let model = load_model(&ckpt)?;
            announce(&model.config, common.seed);
            let graphs = load_data(&data, &model.config)?;
            let r = reconstruct(&model, &graphs, common.seed, common.threads)?;
            println!("reconstructed {}/{} ({:.4})", r.ok, r.total, r.fraction());
        }
        Command::Optimize { ckpt, data, scorer: name, n, alpha, epochs, delta, out, common } => {
            check_threads(common.threads)?;
            let sc = scorer(&name)?;
            if let Some(d) = delta {
                if !(0.0..=1.0).contains(&d) {
                    return Err(invalid(format!("--delta {d} must lie in [0, 1]")));
                }
            }
            let model = load_model(&ckpt)?;
            announce(&model.config, common.seed);
            let graphs = load_data(&data, &model.config)?;
            if n == 0 || n > graphs.len() {
                return Err(invalid(format!("--n {n} must lie in 1..={}", graphs.len())));
            }
            let fit = fit_surrogate(&model, &graphs, sc, epochs, common.seed, common.threads)?;
            println!("surrogate mse {:.6} -> {:.6}", fit.mse[0], fit.mse[fit.mse.len() - 1]);
            let opts = LsoOptions { alpha, steps: LSO_STEPS, delta, seed: common.seed, threads: common.threads };
            let res = lso(&model, &fit.surrogate, &graphs[..n], sc, &opts)?;
            write_out(&out, "optimized.tsv", &lso_tsv(&res))?;
            let mean = res.iter().map(|r| r.improvement()).sum::<f64>() / res.len() as f64;
            println!("mean improvement {mean:.6}");
            println!("success {}/{}", res.iter().filter(|r| r.success).count(), res.len());
        }
        Command::Resample { ckpt, data, n, levels, temperature, out, common } => {
            check_threads(common.threads)?;
            check_temperature(temperature)?;
            let model = load_model(&ckpt)?;
            announce(&model.config, common.seed);
            let graphs = load_data(&data, &model.config)?;
            let g = graphs.first().ok_or_else(|| invalid(format!("--data {}: no molecules", data.display())))?;
            let mut grid = resample_hierarchy(&model, g, n, temperature, common.seed, common.threads)?;
            if let Some(limit) = levels {
                grid.rows.retain(|r| r.level.is_none_or(|l| l < limit));
            }
            write_out(&out, "resample_grid.tsv", &grid.to_tsv())?;
        }
        Command::Stats { ckpt, n, k, temperature, common } => {
            check_threads(common.threads)?;
            check_temperature(temperature)?;
            if k == 0 {
                return Err(invalid("--k must be at least 1"));
            }
            let model = load_model(&ckpt)?;
            announce(&model.config, common.seed);
            let r = sample(&model, n, temperature, common.seed, common.threads, &HashSet::new())?;
            println!("substructure\tcount");
            for (s, c) in substructure_stats(&r.corrected, k) {
                println!("{s}\t{c}");
            }
        }
        Command::Gradcheck { seed } => {
            announce(&conformance::micro_config(), seed);
            let r = conformance::gradient_check(seed)?;
            println!("parameters {}\tmax_rel_err {:.3e}\tpass {}", r.params, r.max_rel, r.pass);
            if !r.pass {
                return Err(Failure::Runtime(format!("gradient error {:.3e} exceeds {}", r.max_rel, conformance::GRADIENT_TOL)));
            }
        }
        Command::Conformance { layers, seed } => {
            println!("seed {seed}");
            let rows = conformance::run(&layers, seed)?;
            print!("{}", conformance::table(&rows));
            let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.layer.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure::Runtime(format!("layers out of tolerance: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
