//! `pcsa`: synthesize data, train, evaluate, translate, run ablations and
//! verify the numerical core.
//!
//! Exit codes: 0 ok, 1 selfcheck failure, 2 configuration or input error,
//! 3 I/O error, 4 numeric abort, 5 fingerprint mismatch, 6 partial ablation
//! failure.

mod ablation;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pcsa_core::config::RunConfig;
use pcsa_core::data::{build_dataset, read_volume, write_volume, Dataset, Split, VolumePair, TARGET_MODALITY};
use pcsa_core::losses::{fmt_metric, MetricReport};
use pcsa_core::selfcheck;
use pcsa_core::tensor::fault;
use pcsa_core::trainer::{Checkpoint, Trainer, Translator, CONFIG_FILE, FINAL_CHECKPOINT};
use pcsa_core::Error;

use ablation::AblationPlan;

#[derive(Parser)]
#[command(name = "pcsa", version, about = "Cross-modal volume translation with a pyramid-convolution attention GAN")]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML); defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset described by the [data] section.
    SynthData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train on a dataset directory.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override `train.steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate a single source volume file.
    Infer {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score every variant of a plan (`architecture`, `losses`,
    /// `attention`, or a plan file).
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        plan: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient checks, metric oracles and shape sweep.
    Selfcheck {
        /// Skip the slower oracle and shape checks.
        #[arg(long)]
        quick: bool,
        #[arg(long, hide = true)]
        inject_conv_fault: bool,
    },
}

/// An error with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::AlreadyExists(_) | Error::Csv(_) | Error::TomlSer(_) => 3,
            Error::NonFiniteLoss { .. } => 4,
            Error::FingerprintMismatch { .. } => 5,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(arg: &ConfigArg) -> Result<RunConfig, Error> {
    match &arg.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, cfg.to_toml()?).map_err(io_err(&path))
}

fn load_trainer(checkpoint: &Path, config: &ConfigArg) -> Result<Trainer, Error> {
    let ckpt = Checkpoint::load(checkpoint)?;
    match &config.config {
        Some(p) => Trainer::from_checkpoint(&ckpt, Some(&RunConfig::load(p)?)),
        None => Trainer::from_checkpoint(&ckpt, None),
    }
}

/// Validation pairs, or none when the dataset has no validation split.
fn optional_split(ds: &Dataset, split: Split) -> Result<Vec<VolumePair>, Error> {
    match ds.load_split(split) {
        Err(Error::MissingSplit(_)) => Ok(Vec::new()),
        other => other,
    }
}

fn summary_line(r: &MetricReport) -> String {
    format!(
        "MAE {:.4}±{:.4}  PSNR {}±{}  SSIM {:.4}±{:.4}  (n={})",
        r.mean.mae,
        r.std.mae,
        fmt_psnr(r.mean.psnr_db),
        fmt_psnr(r.std.psnr_db),
        r.mean.ssim,
        r.std.ssim,
        r.len()
    )
}

fn fmt_psnr(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2}")
    } else {
        fmt_metric(v)
    }
}

fn synth_data(config: &ConfigArg, out: &Path, force: bool) -> CmdResult {
    let cfg = load_config(config)?;
    let manifest = cfg.data.manifest();
    let [train, val, test] = build_dataset(&manifest, out, force)?;
    echo_config(out, &cfg)?;
    println!("generated {train} train / {val} val / {test} test pairs");
    for split in Split::ALL {
        let seeds = manifest.seeds(split);
        match (seeds.first(), seeds.last()) {
            (Some(a), Some(b)) => println!("  {}: seeds {a}..={b}", split.name()),
            _ => println!("  {}: none", split.name()),
        }
    }
    Ok(())
}

fn train(config: &ConfigArg, data: &Path, out: &Path, steps: Option<u64>, resume: Option<&Path>) -> CmdResult {
    let mut cfg = load_config(config)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let ds = Dataset::open(data)?;
    let train_pairs = ds.load_split(Split::Train)?;
    let val_pairs = optional_split(&ds, Split::Val)?;
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(&Checkpoint::load(p)?, Some(&cfg))?,
        None => Trainer::new(&cfg)?,
    };
    trainer.fit(&train_pairs, &val_pairs, out)?;
    match trainer.history.last() {
        Some(r) => println!(
            "trained {} steps; last losses: d {:.4} adv {:.4} l1 {:.4} structural {:.4}",
            trainer.step, r.loss_d, r.loss_adv_g, r.loss_l1, r.loss_msssim
        ),
        None => println!("trained 0 steps"),
    }
    println!("checkpoint: {}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn eval(config: &ConfigArg, checkpoint: &Path, data: &Path, out: &Path) -> CmdResult {
    let trainer = load_trainer(checkpoint, config)?;
    let ds = Dataset::open(data)?;
    let pairs = ds.load_split(Split::Test)?;
    let report = trainer.evaluate(&pairs)?;
    echo_config(out, &trainer.config)?;
    report.save_csv(&out.join("report.csv"))?;
    println!("{}", summary_line(&report));
    Ok(())
}

fn infer(config: &ConfigArg, checkpoint: &Path, input: &Path, out: &Path) -> CmdResult {
    let trainer = load_trainer(checkpoint, config)?;
    let (volume, header) = read_volume(input)?;
    let generated = trainer.translate(&volume)?;
    write_volume(out, &generated, TARGET_MODALITY, header.seed)?;
    println!("wrote {} ({})", out.display(), generated.shape());
    Ok(())
}

fn ablate(config: &ConfigArg, plan: &str, data: &Path, out: &Path) -> CmdResult {
    let base = load_config(config)?;
    let plan = AblationPlan::resolve(plan, &base)?;
    let ds = Dataset::open(data)?;
    let train_pairs = ds.load_split(Split::Train)?;
    let val_pairs = optional_split(&ds, Split::Val)?;
    let test_pairs = ds.load_split(Split::Test)?;
    echo_config(out, &base)?;

    let mut table = String::from("variant,label,ssim_mean,ssim_std,psnr_mean,psnr_std,mae_mean,mae_std,status\n");
    let mut failed = Vec::new();
    for v in &plan.variant {
        let cfg = v.apply(&base);
        let dir = out.join(&v.name);
        let result = (|| -> Result<MetricReport, Error> {
            let mut t = Trainer::new(&cfg)?;
            t.fit(&train_pairs, &val_pairs, &dir)?;
            let report = t.evaluate(&test_pairs)?;
            report.save_csv(&dir.join("report.csv"))?;
            Ok(report)
        })();
        let label = v.label().replace(',', " ");
        match result {
            Ok(r) => {
                println!("{:<16} {}", v.name, summary_line(&r));
                let cells = [r.mean.ssim, r.std.ssim, r.mean.psnr_db, r.std.psnr_db, r.mean.mae, r.std.mae].map(fmt_metric);
                writeln!(table, "{},{label},{},ok", v.name, cells.join(",")).expect("string write");
            }
            Err(e) => {
                eprintln!("variant {} failed: {e}", v.name);
                writeln!(table, "{},{label},,,,,,,failed", v.name).expect("string write");
                failed.push(v.name.clone());
            }
        }
    }
    let path = out.join("ablation.csv");
    std::fs::write(&path, table).map_err(io_err(&path)).map_err(Failure::from)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: 6, message: format!("{} variant(s) failed: {}", failed.len(), failed.join(", ")) })
    }
}

fn run_selfcheck(quick: bool, inject_conv_fault: bool) -> CmdResult {
    fault::set_conv_backward_fault(inject_conv_fault);
    let results = if quick { selfcheck::gradient_suite() } else { selfcheck::run_all() };
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    println!("{} checks, {} failed", results.len(), failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: 1, message: format!("failed checks: {}", failed.join(", ")) })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::SynthData { config, out, force } => synth_data(config, out, *force),
        Command::Train { config, data, out, steps, resume } => train(config, data, out, *steps, resume.as_deref()),
        Command::Eval { config, checkpoint, data, out } => eval(config, checkpoint, data, out),
        Command::Infer { config, checkpoint, input, out } => infer(config, checkpoint, input, out),
        Command::Ablate { config, plan, data, out } => ablate(config, plan, data, out),
        Command::Selfcheck { quick, inject_conv_fault } => run_selfcheck(*quick, *inject_conv_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
