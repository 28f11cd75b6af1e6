//! The `calflow` command line.
//!
//! Every command prints one JSON document on stdout and writes bulk data
//! (PNGs, CSVs, checkpoints) only to the paths it is given. Exit codes: 0 ok,
//! 1 usage, 2 I/O, 3 numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::dataset::{load_manifest, load_pairs};
use crate::error::{Error, Result};
use crate::flow::{load_checkpoint, save_checkpoint, ConditionalFlow, FlowConfig};
use crate::histogram::{soft_hist, HistogramGrid, KernelConfig};
use crate::image::{load_png, save_png, Image};
use crate::losses::{per_channel_w1, LossConfig, LossReport};
use crate::metrics::{MetricReport, Psnr};
use crate::optim::gradcheck::{run_suite, Module};
use crate::optim::{optimize_pixels_cal, save_curve_csv, train_flow, write_trajectory_csv, PixelDescentConfig, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const CHANNEL_NAMES: [&str; 3] = ["r", "g", "b"];

#[derive(Debug, Parser)]
#[command(name = "calflow", version, about = "Color alignment loss and a toy conditional flow")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, env = "CALFLOW_SEED", default_value_t = 0)]
    seed: u64,
    /// Print resolved settings and progress on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-channel soft histograms of a PNG, one CSV per channel.
    Hist {
        #[arg(long)]
        image: PathBuf,
        /// Output directory (defaults to the image's directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        hist: HistArgs,
    },
    /// Color alignment loss between two PNGs.
    Cal {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = crate::losses::DEFAULT_LAMBDA, allow_hyphen_values = true)]
        lambda: f64,
        #[command(flatten)]
        hist: HistArgs,
    },
    /// Gradient descent on CAL over the pixels of an image.
    Optimize {
        #[arg(long)]
        init: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1e-2, allow_hyphen_values = true)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
        /// W1 trajectory CSV (defaults to `<out stem>.w1.csv`).
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Accept every step, even ones that raise W1.
        #[arg(long)]
        no_line_search: bool,
        #[command(flatten)]
        hist: HistArgs,
    },
    /// Train the conditional flow on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV (defaults to `<out stem>.curve.csv`).
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long, default_value_t = crate::losses::DEFAULT_LAMBDA, allow_hyphen_values = true)]
        lambda: f64,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4, allow_hyphen_values = true)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        patch: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        log_every: usize,
        /// Number of flow steps.
        #[arg(long, default_value_t = 4)]
        flow_steps: usize,
        /// Continue from an existing checkpoint instead of a fresh flow.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Restore a low-light PNG with a trained checkpoint.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Latent temperature; 0 gives the deterministic restoration.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        tau: f64,
    },
    /// PSNR and SSIM over a manifest, restored with `--ckpt` or taken as is.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Finite-difference checks of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: Module,
    },
}

#[derive(Debug, Args)]
struct HistArgs {
    #[arg(long, default_value_t = 64)]
    bins: usize,
    /// Histogram range as `lower,upper`.
    #[arg(long, default_value = "0,1", value_parser = parse_range, allow_hyphen_values = true)]
    range: (f64, f64),
    /// Kernel sharpness, or `auto` for `(1 / step)^2`.
    #[arg(long, default_value = "auto", value_parser = parse_delta, allow_hyphen_values = true)]
    delta: Delta,
}

#[derive(Debug, Clone, Copy)]
enum Delta {
    Auto,
    Value(f64),
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected `lower,upper`")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("lower bound: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("upper bound: {e}"))?;
    Ok((lo, hi))
}

fn parse_delta(s: &str) -> std::result::Result<Delta, String> {
    if s == "auto" {
        return Ok(Delta::Auto);
    }
    s.parse().map(Delta::Value).map_err(|e| format!("expected `auto` or a number: {e}"))
}

/// An error plus the exit code it maps to.
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. }
            | Error::PngDecode { .. }
            | Error::PngEncode { .. }
            | Error::UnsupportedBitDepth { .. }
            | Error::UnsupportedColorType { .. }
            | Error::ManifestEntry { .. }
            | Error::ManifestFormat { .. }
            | Error::Checkpoint { .. } => EXIT_IO,
            Error::NonFinite(_) | Error::NotNormalized(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(flag: &str, message: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: format!("--{flag}: {message}"),
    }
}

type CmdResult = std::result::Result<Value, Failure>;

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(value) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&value).expect("json"));
            EXIT_OK
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn execute(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Hist { image, out_dir, hist } => cmd_hist(cli, image, out_dir.as_deref(), hist),
        Command::Cal { a, b, lambda, hist } => cmd_cal(cli, a, b, *lambda, hist),
        Command::Optimize {
            init,
            reference,
            steps,
            lr,
            out,
            trajectory,
            no_line_search,
            hist,
        } => {
            let cfg = PixelDescentConfig {
                steps: *steps,
                lr: *lr,
                monotone: !no_line_search,
                loss: loss_config(cli, hist, 0.0)?,
            };
            cmd_optimize(init, reference, out, trajectory.as_deref(), &cfg)
        }
        Command::Train {
            manifest,
            out,
            curve,
            lambda,
            steps,
            lr,
            patch,
            batch,
            log_every,
            flow_steps,
            resume,
        } => {
            let cfg = TrainConfig {
                patch_size: *patch,
                batch_size: *batch,
                max_steps: *steps,
                lambda: *lambda,
                seed: cli.seed,
                log_every: *log_every,
                lr: *lr,
            };
            cmd_train(cli, manifest, out, curve.as_deref(), *flow_steps, resume.as_deref(), &cfg)
        }
        Command::Enhance { ckpt, input, out, tau } => cmd_enhance(cli, ckpt, input, out, *tau),
        Command::Eval { manifest, ckpt } => cmd_eval(manifest, ckpt.as_deref()),
        Command::Gradcheck { module } => cmd_gradcheck(cli, *module),
    }
}

fn loss_config(cli: &Cli, hist: &HistArgs, lambda: f64) -> std::result::Result<LossConfig, Failure> {
    let (lo, hi) = hist.range;
    let grid = HistogramGrid::new(lo, hi, hist.bins).map_err(|e| usage("range/--bins", e))?;
    let kernel = match hist.delta {
        Delta::Auto => KernelConfig::auto(&grid),
        Delta::Value(d) => KernelConfig::new(d).map_err(|e| usage("delta", e))?,
    };
    if cli.verbose {
        eprintln!(
            "histogram: {} bins on [{lo}, {hi}], step {}, delta {}",
            grid.bins(),
            grid.step(),
            kernel.delta()
        );
    }
    let cfg = LossConfig {
        lambda,
        grid,
        kernel,
        ..LossConfig::default()
    };
    cfg.validate().map_err(|e| usage("lambda", e))?;
    Ok(cfg)
}

/// Refuses to write `out` over any of `inputs`.
fn check_output(flag: &str, out: &Path, inputs: &[&Path]) -> std::result::Result<(), Failure> {
    let resolve = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let target = resolve(out);
    for input in inputs {
        if resolve(input) == target {
            return Err(usage(flag, format!("{} is also an input", out.display())));
        }
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_hist(cli: &Cli, image: &Path, out_dir: Option<&Path>, hist: &HistArgs) -> CmdResult {
    let cfg = loss_config(cli, hist, 0.0)?;
    let img = load_png(image)?;
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => image.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut files = Vec::new();
    let mut sums = Vec::new();
    for (c, name) in CHANNEL_NAMES.iter().enumerate().take(img.channels()) {
        let h = soft_hist(img.channel(c), &cfg.grid, &cfg.kernel)?;
        let path = dir.join(format!("{stem}.hist_{name}.csv"));
        check_output("out-dir", &path, &[image])?;
        h.save_csv(&path)?;
        sums.push(h.mass().iter().sum::<f64>());
        files.push(path.display().to_string());
    }
    Ok(json!({
        "bins": cfg.grid.bins(),
        "range": [cfg.grid.lower(), cfg.grid.upper()],
        "delta": cfg.kernel.delta(),
        "files": files,
        "mass_sums": sums,
    }))
}

fn cmd_cal(cli: &Cli, a: &Path, b: &Path, lambda: f64, hist: &HistArgs) -> CmdResult {
    let cfg = loss_config(cli, hist, lambda)?;
    let restored = load_png(a)?;
    let reference = load_png(b)?;
    let w1 = per_channel_w1(&restored, &reference, &cfg)?;
    let cal = w1.iter().sum::<f64>();
    Ok(LossReport::cal_only(cal, lambda, w1).to_json())
}

fn cmd_optimize(init: &Path, reference: &Path, out: &Path, trajectory: Option<&Path>, cfg: &PixelDescentConfig) -> CmdResult {
    let traj_path = trajectory.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, ".w1.csv"));
    check_output("out", out, &[init, reference])?;
    check_output("trajectory", &traj_path, &[init, reference, out])?;
    let start = load_png(init)?;
    let target = load_png(reference)?;
    let result = optimize_pixels_cal(&start, &target, cfg).map_err(|e| match e {
        Error::InvalidArgument { name, message } => usage(name, message),
        other => other.into(),
    })?;
    save_png(&result.image, out)?;
    write_trajectory_csv(&result.trajectory, &traj_path)?;
    Ok(json!({
        "out": out.display().to_string(),
        "trajectory": traj_path.display().to_string(),
        "steps": cfg.steps,
        "initial_w1": result.trajectory.first(),
        "final_w1": result.trajectory.last(),
        "rejected_steps": result.rejected_steps,
    }))
}

fn cmd_train(
    cli: &Cli,
    manifest: &Path,
    out: &Path,
    curve: Option<&Path>,
    flow_steps: usize,
    resume: Option<&Path>,
    cfg: &TrainConfig,
) -> CmdResult {
    cfg.validate().map_err(|e| match e {
        Error::InvalidArgument { name, message } => usage(&name.replace('_', "-"), message),
        other => other.into(),
    })?;
    let curve_path = curve.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, ".curve.csv"));
    let m = load_manifest(manifest)?;
    let mut inputs: Vec<&Path> = vec![manifest];
    inputs.extend(resume);
    for e in &m.entries {
        inputs.push(&e.low);
        inputs.push(&e.reference);
    }
    check_output("out", out, &inputs)?;
    check_output("curve", &curve_path, &inputs)?;
    if m.is_empty() {
        return Err(usage("manifest", "no entries to train on"));
    }
    let pairs = load_pairs(&m)?;
    let mut flow = match resume {
        Some(p) => load_checkpoint(p)?,
        None => {
            let config = FlowConfig::with_steps(flow_steps);
            config.validate().map_err(|e| usage("flow-steps", e))?;
            ConditionalFlow::new(config, &mut ChaCha8Rng::seed_from_u64(cli.seed))?
        }
    };
    if cli.verbose {
        eprintln!(
            "training {} parameters on {} pairs: {} steps, batch {}, patch {}, lambda {}, seed {}",
            flow.param_count(),
            pairs.len(),
            cfg.max_steps,
            cfg.batch_size,
            cfg.patch_size,
            cfg.lambda,
            cfg.seed
        );
    }
    let points = train_flow(&pairs, &mut flow, cfg)?;
    save_checkpoint(&flow, out)?;
    save_curve_csv(&points, &curve_path)?;
    if cli.verbose {
        for p in &points {
            eprintln!("step {:>6}  total {:.6}", p.step, p.report.total().unwrap_or(f64::NAN));
        }
    }
    Ok(json!({
        "checkpoint": out.display().to_string(),
        "curve": curve_path.display().to_string(),
        "steps": cfg.max_steps,
        "final": points.last().map(|p| p.report.to_json()),
    }))
}

fn cmd_enhance(cli: &Cli, ckpt: &Path, input: &Path, out: &Path, tau: f64) -> CmdResult {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(usage("tau", format!("must be finite and >= 0, got {tau}")));
    }
    check_output("out", out, &[ckpt, input])?;
    let flow = load_checkpoint(ckpt)?;
    let low = load_png(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let restored = flow.enhance(&low, tau, &mut rng)?;
    save_png(&restored, out)?;
    Ok(json!({ "out": out.display().to_string(), "tau": tau }))
}

fn mean_json(reports: &[MetricReport]) -> Value {
    if reports.is_empty() {
        return json!({ "psnr": null, "ssim": null });
    }
    let n = reports.len() as f64;
    let psnr = if reports.iter().any(|r| r.psnr == Psnr::Infinite) {
        Psnr::Infinite
    } else {
        Psnr::Finite(reports.iter().filter_map(|r| r.psnr.value()).sum::<f64>() / n)
    };
    let ssim = reports.iter().map(|r| r.ssim).sum::<f64>() / n;
    MetricReport { psnr, ssim }.to_json()
}

fn cmd_eval(manifest: &Path, ckpt: Option<&Path>) -> CmdResult {
    let m = load_manifest(manifest)?;
    let flow = ckpt.map(load_checkpoint).transpose()?;
    let reports: Vec<MetricReport> = m
        .entries
        .par_iter()
        .map(|e| {
            let low = load_png(&e.low)?;
            let reference = load_png(&e.reference)?;
            let restored: Image = match &flow {
                Some(f) => f.enhance_mode(&low)?,
                None => low,
            };
            MetricReport::compute(&restored, &reference)
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<Value> = m
        .entries
        .iter()
        .zip(&reports)
        .map(|(e, r)| {
            let mut v = r.to_json();
            v["low"] = json!(e.low.display().to_string());
            v["ref"] = json!(e.reference.display().to_string());
            v
        })
        .collect();
    Ok(json!({
        "restored_with": ckpt.map(|p| p.display().to_string()),
        "pairs": pairs,
        "mean": mean_json(&reports),
    }))
}

fn cmd_gradcheck(cli: &Cli, module: Module) -> CmdResult {
    let probes = run_suite(module, cli.seed)?;
    let results: Vec<Value> = probes.iter().map(|p| p.to_json()).collect();
    if cli.verbose {
        for p in &probes {
            eprintln!("{:<34} {:.3e} (< {:e})", p.name, p.report.max_rel_error, p.tolerance);
        }
    }
    if let Some(bad) = probes.iter().find(|p| !p.passed()) {
        println!("{}", serde_json::to_string_pretty(&json!({ "probes": results })).expect("json"));
        return Err(Failure {
            code: EXIT_NUMERIC,
            message: format!(
                "{}: max relative error {:e} exceeds {:e}",
                bad.name, bad.report.max_rel_error, bad.tolerance
            ),
        });
    }
    Ok(json!({ "probes": results }))
}
