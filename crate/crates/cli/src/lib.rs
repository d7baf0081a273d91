//! Argument handling and the four workflows behind the `depthkit` binary.
//!
//! Exit codes: 0 when every requested check passes, 1 when a check fails,
//! 2 on usage, configuration or input errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use depthkit::certify::{check_case, run_invariants, select_cases, Fixture, GradOptions};
use depthkit::io::{load_config, read_tensor};
use depthkit::metrics::{Align, DepthMetrics, DEFAULT_CAP};
use depthkit::train::{compare_variants, evaluate_frames, overfit_with, variant_axes, write_compare_csv, TrainConfig};
use depthkit::{Error, Tensor};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable selecting a negative-control fixture, e.g.
/// `perturb-grad:ada_rm` or `broken-fold`.
pub const FIXTURE_ENV: &str = "DEPTHKIT_FIXTURE";

#[derive(Debug, Parser)]
#[command(
    name = "depthkit",
    version,
    about = "Depth decoder certification and desk-scale training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlignArg {
    Median,
    Mean,
    Fuse,
    Ada,
}

impl From<AlignArg> for Align {
    fn from(a: AlignArg) -> Self {
        match a {
            AlignArg::Median => Align::Median,
            AlignArg::Mean => Align::Mean,
            AlignArg::Fuse => Align::Fuse,
            AlignArg::Ada => Align::Ada,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare analytic and finite-difference gradients of every op and module.
    Gradcheck {
        /// First of the three seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict to one case or one area.
        #[arg(long)]
        variant: Option<String>,
        /// Directory for `gradcheck.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the property suites of every area.
    Invariants {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for `invariants.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on synthetic frames and write reports and a checkpoint.
    Overfit {
        /// JSON training config; defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "overfit_out")]
        out: PathBuf,
        /// `axis/name` from the comparison table, or `all` to train
        /// every entry and write `compare.csv`.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Score a predicted depth file against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: f64,
        #[arg(long, value_enum, default_value_t = AlignArg::Median)]
        align: AlignArg,
        /// CSV output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure of a workflow, mapped onto an exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Parses `args` (program name first) and runs the chosen workflow.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
            let text = e.render().to_string();
            let _ = if code == EXIT_PASS {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let fixture = match std::env::var(FIXTURE_ENV) {
        Ok(s) if !s.is_empty() => match s.parse::<Fixture>() {
            Ok(f) => Some(f),
            Err(e) => {
                let _ = writeln!(err, "error: {e}");
                return EXIT_USAGE;
            }
        },
        _ => None,
    };
    let result = match cli.command {
        Command::Gradcheck {
            seed,
            variant,
            out: dir,
        } => gradcheck(seed, variant.as_deref(), dir.as_deref(), fixture, out),
        Command::Invariants { seed, out: dir } => invariants(seed, dir.as_deref(), fixture.as_ref(), out),
        Command::Overfit {
            config,
            seed,
            out: dir,
            variant,
        } => overfit(config.as_deref(), seed, &dir, variant.as_deref(), out),
        Command::Eval {
            pred,
            gt,
            cap,
            align,
            out: path,
        } => eval(&pred, &gt, cap, align.into(), path.as_deref(), out),
    };
    match result {
        Ok(()) => EXIT_PASS,
        Err(Failure::Check) => EXIT_FAIL,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
    }
}

fn ensure_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn gradcheck(
    seed: u64,
    filter: Option<&str>,
    dir: Option<&Path>,
    fixture: Option<Fixture>,
    out: &mut dyn Write,
) -> Outcome {
    let cases = select_cases(filter)?;
    let opts = GradOptions {
        fixture,
        ..GradOptions::with_base_seed(seed)
    };
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for case in &cases {
        let r = check_case(case, &opts)?;
        writeln!(out, "{r}")?;
        if !r.passed() {
            failed.push(r.name);
        }
        rows.push(r);
    }
    writeln!(
        out,
        "{} of {} cases within 1e-4 in {:.1}s",
        rows.len() - failed.len(),
        rows.len(),
        start.elapsed().as_secs_f64()
    )?;
    if let Some(dir) = dir {
        ensure_dir(dir)?;
        let mut text = String::from("case,area,worst_rel_error,coords,seeds,passed\n");
        for r in &rows {
            text += &format!(
                "{},{},{},{},{},{}\n",
                r.name,
                r.area,
                r.worst,
                r.coords,
                r.seeds,
                r.passed()
            );
        }
        fs::write(dir.join("gradcheck.csv"), text)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        writeln!(out, "failed: {}", failed.join(", "))?;
        Err(Failure::Check)
    }
}

fn invariants(seed: u64, dir: Option<&Path>, fixture: Option<&Fixture>, out: &mut dyn Write) -> Outcome {
    let reports = run_invariants(seed, fixture);
    for r in &reports {
        writeln!(out, "{r}")?;
    }
    let failed: Vec<_> = reports.iter().filter(|r| r.outcome.is_err()).map(|r| r.name).collect();
    writeln!(
        out,
        "{} of {} suites passed",
        reports.len() - failed.len(),
        reports.len()
    )?;
    if let Some(dir) = dir {
        ensure_dir(dir)?;
        let mut text = String::from("suite,area,passed\n");
        for r in &reports {
            text += &format!("{},{},{}\n", r.name, r.area, r.outcome.is_ok());
        }
        fs::write(dir.join("invariants.csv"), text)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        writeln!(out, "failed: {}", failed.join(", "))?;
        Err(Failure::Check)
    }
}

fn overfit(
    config: Option<&Path>,
    seed: Option<u64>,
    dir: &Path,
    variant: Option<&str>,
    out: &mut dyn Write,
) -> Outcome {
    let mut cfg: TrainConfig = match config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    match variant {
        Some("all") => {
            let rows = compare_variants(&cfg, cfg.scene.seed.wrapping_add(10_000), cfg.frames)?;
            ensure_dir(dir)?;
            write_compare_csv(&rows, dir.join("compare.csv"))?;
            for r in &rows {
                writeln!(
                    out,
                    "{:<8} {:<18} params {:>8}  train loss {:.4}  held-out abs_rel {:.4}",
                    r.axis, r.variant, r.params, r.train_loss, r.held_out.abs_rel
                )?;
            }
            return Ok(());
        }
        Some(name) => {
            let (_, _, v) = variant_axes()
                .into_iter()
                .find(|(a, n, _)| format!("{a}/{n}") == name)
                .ok_or_else(|| {
                    let known: Vec<_> = variant_axes().iter().map(|(a, n, _)| format!("{a}/{n}")).collect();
                    Failure::Usage(format!("unknown variant `{name}`; known: all, {}", known.join(", ")))
                })?;
            cfg.net.variants = v;
        }
        None => {}
    }
    let start = Instant::now();
    let report = overfit_with(cfg, dir)?;
    let last = report.last();
    writeln!(
        out,
        "steps {}  final loss {:.5}  ({:.0}s)",
        last.step,
        last.loss,
        start.elapsed().as_secs_f64()
    )?;
    for (a, m) in &last.metrics {
        writeln!(
            out,
            "{:<7} abs_rel {:.4}  rmse {:.4}  delta1 {:.4}",
            a.name(),
            m.abs_rel,
            m.rmse,
            m.delta1
        )?;
    }
    writeln!(out, "reports written to {}", dir.display())?;
    Ok(())
}

/// Depth maps as `[frames, pixels]`: rank-4 inputs keep their leading
/// axis, anything else is one frame.
fn frames(t: Tensor<f64>) -> Result<Tensor<f64>, Failure> {
    let n = if t.rank() == 4 { t.shape()[0] } else { 1 };
    let per = t.numel() / n;
    Ok(t.reshape(&[n, per])?)
}

fn eval(pred: &Path, gt: &Path, cap: f64, align: Align, path: Option<&Path>, out: &mut dyn Write) -> Outcome {
    if !(cap > 0.0) {
        return Err(Failure::Usage(format!("--cap must be positive, got {cap}")));
    }
    let p = read_tensor(pred)?.cast::<f64>();
    let g = read_tensor(gt)?.cast::<f64>();
    if p.shape() != g.shape() {
        return Err(Failure::Usage(format!(
            "prediction shape {:?} differs from ground truth {:?}",
            p.shape(),
            g.shape()
        )));
    }
    let m = evaluate_frames(&frames(p)?, &frames(g)?, cap, align)?;
    let mut text = format!("align,{}\n{}", DepthMetrics::FIELDS.join(","), align.name());
    for v in m.values() {
        text += &format!(",{v}");
    }
    text.push('\n');
    match path {
        Some(p) => {
            fs::write(p, &text)?;
            writeln!(out, "{} abs_rel {:.6}", align.name(), m.abs_rel)?;
        }
        None => write!(out, "{text}")?,
    }
    Ok(())
}
