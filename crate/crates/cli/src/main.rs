use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nfmm_core::datagen::dataset::META;
use nfmm_core::io::{dataset_fingerprint, read_checkpoint, read_dataset, write_atomic, write_checkpoint, write_dataset};
use nfmm_core::train::{evaluate, history_csv, metrics_csv, train_with};
use nfmm_core::verify::{run_checks, VerifyOptions};
use nfmm_core::{build_dataset, Dataset, Error, GenerateConfig, MetricReport, ModelConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "nfmm", version, about = "Neural fast multipole method for Helmholtz scattering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and validation datasets from a TOML config.
    Generate {
        config: PathBuf,
        /// Overrides the config's `output` directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a model; writes best.ckpt, last.ckpt and history.csv.
    Train {
        /// Training config (TOML); defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-sample metrics of a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in correctness checks.
    Verify {
        /// Drop one interaction-list entry first (the partition check must fail).
        #[arg(long)]
        corrupt_tables: bool,
    },
    /// Print a model config and its parameter count.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0} check(s) failed")]
    Checks(usize),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Checks(_) => 1,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Incompatible(_) | Error::Capacity { .. } => 2,
                Error::Io(_) | Error::Format(_) => 3,
                _ => 1,
            },
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Core(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))))
}

fn generate(config: &Path, output: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = GenerateConfig::from_toml(&read_text(config)?)?;
    let dir = output
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let (train, val) = build_dataset(&cfg)?;
    write_dataset(&dir.join("train.nfmm"), &train)?;
    write_dataset(&dir.join("val.nfmm"), &val)?;
    let k = META.iter().position(|m| *m == "residual").expect("residual slot");
    let res: Vec<f64> = train.records.iter().chain(&val.records).map(|r| r.meta[k] as f64).collect();
    let max = res.iter().copied().fold(0.0, f64::max);
    let mean = res.iter().sum::<f64>() / res.len().max(1) as f64;
    println!(
        "wrote {} train and {} validation samples at {}x{} to {}",
        train.len(),
        val.len(),
        train.resolution(),
        train.resolution(),
        dir.display()
    );
    println!("relative residual: mean {mean:.3e}, max {max:.3e}");
    Ok(())
}

/// Reads the training config, filling model channel counts from the
/// dataset when the file leaves them out.
fn train_config(path: Option<&Path>, ds: &Dataset, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let text = match path {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let model = table
        .entry("model")
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    if let toml::Value::Table(m) = model {
        m.entry("in_channels")
            .or_insert_with(|| (ds.header.input_planes.len() as i64).into());
        m.entry("out_channels")
            .or_insert_with(|| (ds.header.target_planes.len() as i64).into());
    }
    let mut cfg = TrainConfig::from_toml(&table.to_string())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn echo_model(m: &ModelConfig) {
    println!(
        "model: hidden_width={} latent={} tree_depth={} operator_depth={} model_layers={} rope={:?}",
        m.hidden_width, m.latent, m.tree_depth, m.operator_depth, m.model_layers, m.rope
    );
    println!("parameters: {}", m.param_count());
}

fn train(config: Option<&Path>, train: &Path, val: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let train_ds = read_dataset(train)?;
    let val_ds = val.map(read_dataset).transpose()?;
    let cfg = train_config(config, &train_ds, seed)?;
    println!(
        "batch_size={} lr={:e}->{:e} weight_decay={:e} epochs={} seed={} loss={:?}",
        cfg.batch_size, cfg.max_lr, cfg.min_lr, cfg.weight_decay, cfg.epochs, cfg.seed, cfg.loss
    );
    echo_model(&cfg.model);
    fs::create_dir_all(out)?;
    let outcome = train_with(&cfg, &train_ds, val_ds.as_ref(), dataset_fingerprint(&train_ds), |row| {
        match row.val {
            Some(v) => println!(
                "step {:>7}  lr {:.3e}  loss {:.4e}  val E2rel {:.4e}  H1rel {:.4e}",
                row.step, row.lr, row.train_loss, v.rel_l2, v.rel_h1
            ),
            None => println!("step {:>7}  lr {:.3e}  loss {:.4e}", row.step, row.lr, row.train_loss),
        }
        ControlFlow::Continue(())
    })?;
    write_checkpoint(&out.join("best.ckpt"), &outcome.best)?;
    write_checkpoint(&out.join("last.ckpt"), &outcome.last)?;
    write_atomic(&out.join("history.csv"), history_csv(&outcome.history).as_bytes())?;
    println!("best checkpoint from epoch {} (metric {:.4e})", outcome.best.epoch, outcome.best.metric);
    Ok(())
}

fn evaluate_cmd(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let ck = read_checkpoint(checkpoint)?;
    let ds = read_dataset(data)?;
    let reports = evaluate(&ck, &ds)?;
    let csv = metrics_csv(&reports);
    match out {
        Some(p) => write_atomic(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    let m = MetricReport::mean(&reports);
    let summary = format!(
        "{:>8} {:>12} {:>12} {:>12} {:>12}\n{:>8} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
        "samples", "E1rel", "E2rel", "Linf", "H1rel", reports.len(), m.rel_l1, m.rel_l2, m.l_inf, m.rel_h1
    );
    if out.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(())
}

fn verify(corrupt_tables: bool) -> Result<(), CliError> {
    let results = run_checks(VerifyOptions { corrupt_tables });
    let mut failed = 0;
    for r in &results {
        println!(
            "{}  {:<20} {:>9.1} ms  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.elapsed.as_secs_f64() * 1e3,
            r.detail
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(CliError::Checks(failed));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn params(config: Option<&Path>) -> Result<(), CliError> {
    let cfg = match config {
        Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    println!(
        "batch_size={} max_lr={:e} min_lr={:e} weight_decay={:e}",
        cfg.batch_size, cfg.max_lr, cfg.min_lr, cfg.weight_decay
    );
    echo_model(&cfg.model);
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { config, output } => generate(&config, output),
        Command::Train {
            config,
            train: t,
            val,
            out,
            seed,
        } => train(config.as_deref(), &t, val.as_deref(), &out, seed),
        Command::Evaluate { checkpoint, data, out } => evaluate_cmd(&checkpoint, &data, out.as_deref()),
        Command::Verify { corrupt_tables } => verify(corrupt_tables),
        Command::Params { config } => params(config.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
