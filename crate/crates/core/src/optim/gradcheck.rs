//! Central-difference gradient checking, and the fixed probes run by the
//! `gradcheck` command and the acceptance suite.
//!
//! Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-12)` for the
//! analytic value `a` and the numeric value `n`; a report keeps the maximum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::flow::{ConditionalFlow, FlowConfig};
use crate::histogram::{soft_hist, soft_hist_backward, HistogramGrid, KernelConfig};
use crate::image::Image;
use crate::losses::{cal_kink_signature, cal_loss, cal_value, LossConfig};

pub const DEFAULT_EPS: f64 = 1e-6;
const REL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares `analytic` with central differences of `f` around `x`.
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    grad_check_filtered(f, x, analytic, eps, |_, _| true)
}

/// Like [`grad_check`], but only scores coordinates for which
/// `keep(x + eps e_i, x - eps e_i)` holds. Used to stay off kinks.
pub fn grad_check_filtered<F, K>(mut f: F, x: &[f64], analytic: &[f64], eps: f64, mut keep: K) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
    K: FnMut(&[f64], &[f64]) -> bool,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid("eps", format!("step must be positive, got {eps}")));
    }
    if x.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs but {} analytic gradient entries",
            x.len(),
            analytic.len()
        )));
    }
    if let Some(i) = analytic.iter().position(|a| !a.is_finite()) {
        return Err(Error::NonFinite(format!("analytic gradient at coordinate {i}")));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = probe.clone();
        probe[i] = x[i] - eps;
        let lo = probe.clone();
        probe[i] = x[i];
        if !keep(&hi, &lo) {
            report.skipped += 1;
            continue;
        }
        let (fh, fl) = (f(&hi)?, f(&lo)?);
        if !(fh.is_finite() && fl.is_finite()) {
            return Err(Error::NonFinite(format!("function value near coordinate {i}")));
        }
        let numeric = (fh - fl) / (2.0 * eps);
        let rel = relative_error(analytic[i], numeric);
        report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
        if report.worst_index.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Which gradients the suite probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    All,
    Hist,
    Cal,
    Flow,
}

impl std::str::FromStr for Module {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Module::All),
            "hist" => Ok(Module::Hist),
            "cal" => Ok(Module::Cal),
            "flow" => Ok(Module::Flow),
            other => Err(format!("unknown module `{other}` (expected all, hist, cal or flow)")),
        }
    }
}

/// One probe of the suite with its pass threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl ProbeResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }

    pub fn to_json(&self) -> Value {
        json!({
            "name": self.name,
            "max_rel_error": self.report.max_rel_error,
            "max_abs_error": self.report.max_abs_error,
            "checked": self.report.checked,
            "skipped": self.report.skipped,
            "tolerance": self.tolerance,
            "passed": self.passed(),
        })
    }
}

fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// `<upstream, soft_hist(plane)>` for one random 8-pixel plane and a random
/// upstream vector.
pub fn probe_soft_hist(grid: &HistogramGrid, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = KernelConfig::auto(grid);
    let plane = random_vec(&mut rng, 8);
    let upstream = random_vec(&mut rng, grid.bins());
    let analytic = soft_hist_backward(&plane, grid, &kernel, &upstream)?;
    let f = |p: &[f64]| -> Result<f64> {
        let h = soft_hist(p, grid, &kernel)?;
        Ok(h.mass().iter().zip(&upstream).map(|(m, u)| m * u).sum())
    };
    grad_check(f, &plane, &analytic, DEFAULT_EPS)
}

/// CAL with respect to the restored pixels of a random 8x8 pair, skipping
/// coordinates whose probes change the sign pattern of the CDF differences.
pub fn probe_cal(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LossConfig::default();
    let a = Image::from_fn(3, 8, 8, |_, _, _| rng.random::<f64>());
    let b = Image::from_fn(3, 8, 8, |_, _, _| rng.random::<f64>());
    let analytic = cal_loss(&a, &b, &cfg)?.grad;
    let base = cal_kink_signature(&a, &b, &cfg)?;
    let as_image = |v: &[f64]| Image::from_vec(3, 8, 8, v.to_vec());
    let f = |v: &[f64]| cal_value(&as_image(v)?, &b, &cfg);
    let keep = |hi: &[f64], lo: &[f64]| {
        [hi, lo].iter().all(|v| {
            as_image(v)
                .and_then(|img| cal_kink_signature(&img, &b, &cfg))
                .is_ok_and(|s| s == base)
        })
    };
    grad_check_filtered(f, a.data(), analytic.data(), DEFAULT_EPS, keep)
}

/// Architecture of the tiny flow used for parameter-gradient checks: one
/// step, two-channel hidden layers.
pub fn tiny_flow_config() -> FlowConfig {
    FlowConfig {
        steps: 1,
        encoder_width: 2,
        cond_channels: 2,
        coupling_width: 2,
        ..FlowConfig::default()
    }
}

/// A tiny flow with the coupling output at unit gain and actnorm fitted to
/// random 4x4 pairs, so every parameter visibly moves the NLL.
pub fn tiny_flow(seed: u64) -> Result<ConditionalFlow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flow = ConditionalFlow::new(tiny_flow_config(), &mut rng)?;
    for v in flow
        .block_mut("step0.coupling.conv2.weight")
        .expect("tiny flow has one step")
    {
        *v *= 10.0;
    }
    let batch: Vec<(Image, Image)> = (0..4)
        .map(|_| {
            (
                Image::from_fn(3, 4, 4, |_, _, _| rng.random::<f64>()),
                Image::from_fn(3, 4, 4, |_, _, _| rng.random::<f64>()),
            )
        })
        .collect();
    flow.init_actnorm(&batch)?;
    Ok(flow)
}

/// NLL with respect to every parameter of [`tiny_flow`] on a random 4x4 pair.
pub fn probe_flow_nll(seed: u64) -> Result<GradCheckReport> {
    let flow = tiny_flow(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let y = Image::from_fn(3, 4, 4, |_, _, _| rng.random::<f64>());
    let x = Image::from_fn(3, 4, 4, |_, _, _| rng.random::<f64>());
    let (_, analytic) = flow.nll_grad(&y, &x)?;
    let mut probe = flow.clone();
    let f = |p: &[f64]| -> Result<f64> {
        probe.params_mut().copy_from_slice(p);
        probe.nll(&y, &x)
    };
    grad_check(f, flow.params(), &analytic, DEFAULT_EPS)
}

/// Runs the probes for `module` with the given seed.
pub fn run_suite(module: Module, seed: u64) -> Result<Vec<ProbeResult>> {
    let mut out = Vec::new();
    if matches!(module, Module::All | Module::Hist) {
        out.push(ProbeResult {
            name: "soft_hist pixels",
            report: probe_soft_hist(&HistogramGrid::unit_64(), seed)?,
            tolerance: 1e-6,
        });
    }
    if matches!(module, Module::All | Module::Cal) {
        out.push(ProbeResult {
            name: "cal_loss pixels (off kinks)",
            report: probe_cal(seed)?,
            tolerance: 1e-5,
        });
    }
    if matches!(module, Module::All | Module::Flow) {
        out.push(ProbeResult {
            name: "flow nll parameters (tiny flow)",
            report: probe_flow_nll(seed)?,
            tolerance: 1e-3,
        });
    }
    Ok(out)
}
