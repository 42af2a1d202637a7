//! `advconform` command-line driver.
//!
//! Every subcommand reads the same TOML config (`--config`, defaults when
//! absent); `--seed`, `--alpha` and `--beta` override it and `--out` names
//! the output directory. Exit codes: 0 success, 1 config or input error,
//! 2 sweep finished with failed jobs, 3 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advconform::conformal::{calibrate, evaluate};
use advconform::dataio::{write_csv, write_idx, LabeledDataset, SplitIndices};
use advconform::sweep::{
    check_band, prepare_run, read_records_csv, run_sweep, run_theory_check, summarize, write_failures_csv,
    write_records_csv, write_summary_json, DataSpec, SweepConfig,
};
use advconform::train::{accuracy, train_observed, write_log_csv};
use advconform::{AttackSpec, CalibrationResult, Classifier, Epsilon, Error, Norm, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "advconform", version, about = "Split conformal prediction under adversarial attacks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides `sweep.master_seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Miscoverage level (overrides `conformal.alpha`).
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Tolerance band half-width (overrides `conformal.beta`).
    #[arg(long, global = true)]
    beta: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DataFormat {
    Csv,
    Idx,
}

/// Which run of the configured seed list a single-model command uses.
#[derive(Debug, Args)]
struct RunArgs {
    /// Run seed; defaults to the first entry of `sweep.seeds`.
    #[arg(long)]
    run: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured Gaussian mixture to disk.
    GenData {
        #[arg(long, value_enum, default_value = "csv")]
        format: DataFormat,
    },
    /// Train one model on the training split.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Training attack strength, e.g. 8/255.
        #[arg(long, default_value = "0")]
        eps_train: Epsilon,
        /// Attack norm; defaults to `sweep.norm`.
        #[arg(long)]
        norm: Option<Norm>,
    },
    /// Calibrate a trained model on the attacked calibration split.
    Calibrate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "0")]
        eps_cal: Epsilon,
        #[arg(long)]
        norm: Option<Norm>,
    },
    /// Coverage and set size on the attacked test split.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long, default_value = "0")]
        eps_test: Epsilon,
        #[arg(long)]
        norm: Option<Norm>,
    },
    /// Run the configured grid and write records.csv and summary.json.
    Sweep {
        /// Print the effective config as TOML and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Compare coverage and set-size bounds with one trained model.
    CheckTheory,
    /// Report in-band test strengths from a sweep's records.
    CheckBand {
        /// Records CSV; defaults to `<out>/records.csv`.
        #[arg(long)]
        records: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> Result<SweepConfig> {
    let mut cfg = match &g.config {
        Some(path) => SweepConfig::from_path(path)?,
        None => SweepConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.sweep.master_seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.output.dir = out.clone();
    }
    if let Some(alpha) = g.alpha {
        cfg.conformal.alpha = alpha;
    }
    if let Some(beta) = g.beta {
        cfg.conformal.beta = beta;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &SweepConfig) -> Result<&Path> {
    let dir = cfg.output.dir.as_path();
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

struct Run {
    seed: u64,
    ds: LabeledDataset,
    split: SplitIndices,
    init: Classifier,
}

fn prepare(cfg: &SweepConfig, run: &RunArgs) -> Result<Run> {
    let ds = cfg.data.load()?;
    let seed = run.run.unwrap_or(cfg.sweep.seeds[0]);
    let (seed, split, init) = prepare_run(cfg, &ds, seed)?;
    Ok(Run { seed, ds, split, init })
}

fn attack(cfg: &SweepConfig, norm: Option<Norm>, eps: Epsilon) -> AttackSpec {
    let mut a = cfg.sweep.attack(eps);
    if let Some(n) = norm {
        a.norm = n;
    }
    a
}

fn gen_data(cfg: &SweepConfig, format: DataFormat) -> Result<ExitCode> {
    if !matches!(cfg.data, DataSpec::Mixture { .. }) {
        return Err(Error::Config("gen-data needs `data.source = \"mixture\"`".into()));
    }
    let ds = cfg.data.load()?;
    let dir = out_dir(cfg)?;
    match format {
        DataFormat::Csv => {
            let path = dir.join("data.csv");
            write_csv(&ds, &path)?;
            println!("wrote {} samples to {}", ds.len(), path.display());
        }
        DataFormat::Idx => {
            let (images, labels) = (dir.join("images.idx"), dir.join("labels.idx"));
            write_idx(&ds, &images, &labels)?;
            println!(
                "wrote {} samples to {} and {} (features clamped to [0, 1] and quantized to bytes)",
                ds.len(),
                images.display(),
                labels.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(cfg: &SweepConfig, run: &RunArgs, eps_train: Epsilon, norm: Option<Norm>) -> Result<ExitCode> {
    let r = prepare(cfg, run)?;
    let spec = attack(cfg, norm, eps_train);
    let (model, stats) = train_observed(&r.init, &r.ds, &r.split.train, &cfg.train.config(spec, r.seed), |_| {})?;
    let dir = out_dir(cfg)?;
    model.save(&dir.join("model.txt"))?;
    write_log_csv(&stats, &dir.join("train_log.csv"))?;
    let test_acc = accuracy(&model, &r.ds, &r.split.test, &AttackSpec::none())?;
    let last = stats.last().expect("at least one epoch");
    println!("final_loss: {}", last.loss);
    println!("train_acc: {}", last.clean_acc);
    println!("test_acc: {test_acc}");
    println!("model: {}", dir.join("model.txt").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_calibrate(cfg: &SweepConfig, run: &RunArgs, model: &Path, eps_cal: Epsilon, norm: Option<Norm>) -> Result<ExitCode> {
    let r = prepare(cfg, run)?;
    let model = Classifier::load(model)?;
    let spec = attack(cfg, norm, eps_cal);
    let cal = calibrate(&model, &r.ds, &r.split.cal, cfg.conformal.alpha, cfg.conformal.score, &spec, r.seed)?;
    let path = out_dir(cfg)?.join("calibration.toml");
    cal.save(&path)?;
    println!("q_hat: {}", cal.q_hat);
    println!("eps_cal: {}", cal.eps_cal);
    println!("calibration: {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(
    cfg: &SweepConfig,
    run: &RunArgs,
    model: &Path,
    calibration: &Path,
    eps_test: Epsilon,
    norm: Option<Norm>,
) -> Result<ExitCode> {
    let r = prepare(cfg, run)?;
    let model = Classifier::load(model)?;
    let cal = CalibrationResult::load(calibration)?;
    let spec = attack(cfg, norm, eps_test);
    let ev = evaluate(&model, &r.ds, &r.split.test, &cal, &spec, r.seed)?;
    let adv_acc = accuracy(&model, &r.ds, &r.split.test, &spec)?;
    println!("coverage: {}", ev.coverage);
    println!("mean_set_size: {}", ev.mean_set_size);
    println!("adv_acc: {adv_acc}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(cfg: &SweepConfig, print_config: bool) -> Result<ExitCode> {
    if print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(ExitCode::SUCCESS);
    }
    let out = run_sweep(cfg)?;
    let dir = out_dir(cfg)?;
    write_records_csv(&out.records, &dir.join("records.csv"))?;
    write_summary_json(&summarize(cfg, &out.records, &out.failures), &dir.join("summary.json"))?;
    println!("records: {}", out.records.len());
    println!("failures: {}", out.failures.len());
    println!("output: {}", dir.display());
    if out.failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    write_failures_csv(&out.failures, &dir.join("failures.csv"))?;
    for f in &out.failures {
        eprintln!("failed: eps_train {} seed {}: {}", f.eps_train, f.seed, f.error);
    }
    Ok(ExitCode::from(2))
}

fn cmd_check_theory(cfg: &SweepConfig) -> Result<ExitCode> {
    let report = run_theory_check(cfg)?;
    print!("{}", report.to_text());
    write_json(&out_dir(cfg)?.join("theory.json"), &report)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_check_band(cfg: &SweepConfig, records: Option<&Path>) -> Result<ExitCode> {
    let path = records.map_or_else(|| cfg.output.dir.join("records.csv"), Path::to_path_buf);
    let records = read_records_csv(&path)?;
    let bands = check_band(&records, cfg.conformal.alpha, cfg.conformal.beta);
    for b in &bands {
        let run = b.longest_run.map_or_else(
            || "none".to_string(),
            |r| format!("[{}, {}] ({} points)", r.eps_lo, r.eps_hi, r.points),
        );
        println!(
            "eps_train {} eps_cal {}: in-band run {run}, contiguous {}",
            b.eps_train, b.eps_cal, b.contiguous
        );
    }
    write_json(&out_dir(cfg)?.join("band.json"), &bands)?;
    Ok(ExitCode::SUCCESS)
}

fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Io { .. } => ExitCode::from(3),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = load_config(&cli.global).and_then(|cfg| match &cli.command {
        Command::GenData { format } => gen_data(&cfg, *format),
        Command::Train { run, eps_train, norm } => cmd_train(&cfg, run, *eps_train, *norm),
        Command::Calibrate { run, model, eps_cal, norm } => cmd_calibrate(&cfg, run, model, *eps_cal, *norm),
        Command::Evaluate {
            run,
            model,
            calibration,
            eps_test,
            norm,
        } => cmd_evaluate(&cfg, run, model, calibration, *eps_test, *norm),
        Command::Sweep { print_config } => cmd_sweep(&cfg, *print_config),
        Command::CheckTheory => cmd_check_theory(&cfg),
        Command::CheckBand { records } => cmd_check_band(&cfg, records.as_deref()),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
