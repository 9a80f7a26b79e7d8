//! `dpft`: calibrate noise, prepare feature caches, train and sweep DP heads.
//!
//! Exit codes: 0 success, 1 I/O, 2 usage or validation, 3 numeric failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpft_core::accountant::privacy_report;
use dpft_core::data::{export_csv, gen_synthetic, import_csv, read_cache, write_cache, CsvOptions, SyntheticSpec};
use dpft_core::trainer::{run_sweep, write_run_summary, Trainer};
use dpft_core::{default_orders, evaluate, Error, FeatureDataset, LinearHead, PrivacySpec, SweepGrid, TrainConfig};

#[derive(Parser)]
#[command(name = "dpft", version, about = "Differentially private finetuning of linear heads")]
struct Cli {
    /// Base random seed (used by gen-synth, train and sweep).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate the noise multiplier for a target (epsilon, delta) and print the report as JSON.
    Calibrate {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        sampling_rate: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = 1.0)]
        clip_norm: f64,
    },
    /// Report the privacy of a fixed noise multiplier as JSON.
    Report {
        #[arg(long)]
        noise_multiplier: f64,
        #[arg(long)]
        sampling_rate: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        clip_norm: f64,
    },
    /// Generate a synthetic Gaussian-mixture feature cache.
    GenSynth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        noise_std: f64,
        /// Output cache file.
        #[arg(long)]
        out: PathBuf,
        /// Also export the dataset as CSV (label in the last column).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Convert a CSV file into a feature cache.
    Import {
        #[arg(long)]
        csv: PathBuf,
        /// Zero-based index of the label column.
        #[arg(long)]
        label_column: usize,
        /// The first line is a header.
        #[arg(long)]
        header: bool,
        /// Number of classes; inferred from the largest label when omitted.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one head.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Record wall-clock time in the metrics (output is then not reproducible).
        #[arg(long)]
        record_time: bool,
    },
    /// Run a cross-product hyperparameter grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Grid file with one `key = v1, v2, ...` line per axis and optional `repeats = N`.
        #[arg(long)]
        grid: PathBuf,
        /// Parallel runs; defaults to the number of cores.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the top-1 accuracy of a saved head.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Head JSON written by `train`.
        #[arg(long)]
        head: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Training feature cache.
    #[arg(long)]
    data: PathBuf,
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override `key=value`; applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Evaluation cache; the training data is used when omitted.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => 1,
            Error::NonFinite { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn load_config(run: &RunArgs, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut config = TrainConfig::default();
    if let Some(path) = &run.config {
        let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        config.apply_kv(&text)?;
    }
    for o in &run.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Failure {
            code: 2,
            message: format!("--set expects KEY=VALUE, got '{o}'"),
        })?;
        config.set(k.trim(), v)?;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn prepare(run: &RunArgs, seed: Option<u64>) -> CliResult<(TrainConfig, FeatureDataset, Option<FeatureDataset>)> {
    let config = load_config(run, seed)?;
    let data = read_cache(&run.data)?;
    let eval = run.eval_data.as_ref().map(read_cache).transpose()?;
    fs::create_dir_all(&run.out_dir).map_err(|e| io_failure(&run.out_dir, e))?;
    let mut echo = format!("# data = {}\n", run.data.display());
    if let Some(p) = &run.eval_data {
        echo.push_str(&format!("# eval_data = {}\n", p.display()));
    }
    echo.push_str(&config.to_kv_string());
    eprint!("{echo}");
    write_file(&run.out_dir.join("config.resolved"), echo.as_bytes())?;
    Ok((config, data, eval))
}

fn metrics_jsonl<'a>(rows: impl IntoIterator<Item = &'a dpft_core::MetricsRow>) -> String {
    rows.into_iter().map(|r| r.to_json_line() + "\n").collect()
}

fn cmd_train(run: &RunArgs, seed: Option<u64>, record_time: bool) -> CliResult<()> {
    let (config, data, eval) = prepare(run, seed)?;
    let mut trainer = Trainer::new(&config).record_wall_time(record_time);
    if let Some(e) = &eval {
        trainer = trainer.eval_on(e);
    }
    let metrics_path = run.out_dir.join("metrics.jsonl");
    let outcome = match trainer.run(&data) {
        Ok(o) => o,
        Err(Error::NonFinite {
            message,
            row,
            completed,
        }) => {
            let text = metrics_jsonl(completed.iter().chain(std::iter::once(row.as_ref())));
            write_file(&metrics_path, text.as_bytes())?;
            return Err(Failure {
                code: 3,
                message: format!("aborted at step {}: {message}", row.step),
            });
        }
        Err(e) => return Err(e.into()),
    };
    write_file(&metrics_path, metrics_jsonl(&outcome.metrics).as_bytes())?;
    let mut summary = Vec::new();
    write_run_summary(&mut summary, &outcome, config.seed)?;
    write_file(&run.out_dir.join("summary.csv"), &summary)?;
    let head = serde_json::to_string(&outcome.head).expect("head serializes");
    write_file(&run.out_dir.join("head.json"), head.as_bytes())?;
    let report_path = run.out_dir.join("privacy_report.json");
    match &outcome.report {
        Some(r) => write_file(&report_path, (r.to_json() + "\n").as_bytes())?,
        None => {
            if report_path.exists() {
                fs::remove_file(&report_path).map_err(|e| io_failure(&report_path, e))?;
            }
        }
    }
    match &outcome.report {
        Some(r) => log::info!(
            "{} steps, final accuracy {:.4}, sigma {:.4}, epsilon {:.4} at delta {}",
            outcome.steps,
            outcome.final_accuracy,
            outcome.sigma,
            r.epsilon,
            r.delta
        ),
        None => log::info!(
            "{} steps, final accuracy {:.4}, no privacy guarantee",
            outcome.steps,
            outcome.final_accuracy
        ),
    }
    Ok(())
}

fn cmd_sweep(run: &RunArgs, seed: Option<u64>, grid_path: &Path, workers: Option<usize>) -> CliResult<()> {
    let text = fs::read_to_string(grid_path).map_err(|e| io_failure(grid_path, e))?;
    let grid = SweepGrid::parse(&text)?;
    let (config, data, eval) = prepare(run, seed)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(Failure {
                code: 2,
                message: "--workers must be at least 1".into(),
            });
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| Failure {
        code: 2,
        message: e.to_string(),
    })?;
    log::info!("{} runs over {} cells", grid.run_count(), grid.cell_count());
    let results = pool.install(|| run_sweep(&grid, &config, &data, eval.as_ref()));
    let mut runs = Vec::new();
    results.write_runs_csv(&mut runs)?;
    write_file(&run.out_dir.join("runs.csv"), &runs)?;
    let mut cells = Vec::new();
    results.write_cells_csv(&mut cells)?;
    write_file(&run.out_dir.join("cells.csv"), &cells)?;
    for row in results.rows.iter().filter(|r| r.error.is_some()) {
        log::warn!("run {} failed: {}", row.run_id, row.error.as_deref().unwrap_or(""));
    }
    if results.failures() == results.rows.len() {
        return Err(Failure {
            code: 3,
            message: "every sweep run failed".into(),
        });
    }
    Ok(())
}

/// Writes to stdout; a closed pipe is not an error.
fn print_stdout(text: &str) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(io_failure(Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

fn print_report(spec: &PrivacySpec) -> CliResult<()> {
    print_stdout(&privacy_report(spec)?.to_json())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Calibrate {
            epsilon,
            delta,
            sampling_rate,
            steps,
            clip_norm,
        } => {
            let spec =
                PrivacySpec::new(epsilon, delta, clip_norm, sampling_rate, steps)?.calibrated(&default_orders())?;
            print_report(&spec)
        }
        Command::Report {
            noise_multiplier,
            sampling_rate,
            steps,
            delta,
            clip_norm,
        } => {
            if !(noise_multiplier > 0.0) {
                return Err(Failure {
                    code: 2,
                    message: format!("noise multiplier {noise_multiplier} must be positive"),
                });
            }
            let spec = PrivacySpec::new(f64::INFINITY, delta, clip_norm, sampling_rate, steps)?
                .with_noise_multiplier(noise_multiplier);
            print_report(&spec)
        }
        Command::GenSynth {
            n,
            d,
            k,
            separation,
            noise_std,
            out,
            csv,
        } => {
            let ds = gen_synthetic(&SyntheticSpec {
                n,
                dim: d,
                classes: k,
                separation,
                noise_std,
                seed: cli.seed.unwrap_or(0),
            })?;
            write_cache(&ds, &out)?;
            if let Some(path) = csv {
                export_csv(&ds, &path, false)?;
            }
            log::info!("wrote {n} examples (d = {d}, k = {k}) to {}", out.display());
            Ok(())
        }
        Command::Import {
            csv,
            label_column,
            header,
            classes,
            out,
        } => {
            let ds = import_csv(
                &csv,
                &CsvOptions {
                    label_column,
                    has_header: header,
                    classes,
                },
            )?;
            write_cache(&ds, &out)?;
            log::info!(
                "imported {} examples (d = {}, k = {}) to {}",
                ds.len(),
                ds.dim(),
                ds.classes(),
                out.display()
            );
            Ok(())
        }
        Command::Train { run, record_time } => cmd_train(&run, cli.seed, record_time),
        Command::Sweep { run, grid, workers } => cmd_sweep(&run, cli.seed, &grid, workers),
        Command::Eval { data, head } => {
            let ds = read_cache(&data)?;
            let text = fs::read_to_string(&head).map_err(|e| io_failure(&head, e))?;
            let parsed: LinearHead = serde_json::from_str(&text).map_err(|e| Failure {
                code: 2,
                message: format!("{}: {e}", head.display()),
            })?;
            let h = LinearHead::new(
                parsed.classes(),
                parsed.dim(),
                parsed.weights().to_vec(),
                parsed.bias().to_vec(),
            )?;
            print_stdout(&evaluate(&h, &ds)?.to_string())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
