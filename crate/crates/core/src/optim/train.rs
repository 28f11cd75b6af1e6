use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{sample_patches_with, Pair};
use crate::error::{Error, Result};
use crate::flow::{ConditionalFlow, SQUEEZE_FACTOR};
use crate::image::Image;
use crate::losses::{cal_loss, LossConfig, LossReport, DEFAULT_LAMBDA};
use crate::optim::{adam_step, OptimizerState};

/// Width of the uniform dequantization noise added to 8-bit targets.
pub const DEQUANTIZATION: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Record a curve point every this many steps (and at the end).
    pub log_every: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 64,
            batch_size: 8,
            max_steps: 1000,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            log_every: 10,
            lr: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(SQUEEZE_FACTOR) {
            return Err(Error::invalid(
                "patch_size",
                format!("must be a positive multiple of {SQUEEZE_FACTOR}, got {}", self.patch_size),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("must be positive, got {}", self.lr)));
        }
        LossConfig::with_lambda(self.lambda).map(|_| ())
    }
}

/// Batch-mean losses recorded before the update of `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub report: LossReport,
}

struct SampleOutcome {
    nll: f64,
    cal: f64,
    w1: [f64; 3],
    grads: Vec<f64>,
}

/// Draws a batch and adds `U[0, 1/255)` to every target pixel; all
/// randomness comes from `rng`, in a fixed order.
fn draw_batch(pairs: &[Pair], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Pair>> {
    let mut batch = sample_patches_with(pairs, cfg.patch_size, cfg.batch_size, rng)?;
    for p in &mut batch {
        for v in p.reference.data_mut() {
            *v += rng.random_range(0.0..DEQUANTIZATION);
        }
    }
    Ok(batch)
}

/// Mean `nll + lambda * cal` over the batch, with its gradient. Samples are
/// evaluated in parallel and summed in batch order.
fn batch_objective(flow: &ConditionalFlow, batch: &[Pair], loss: &LossConfig) -> Result<(LossReport, Vec<f64>)> {
    let outcomes: Vec<SampleOutcome> = batch
        .par_iter()
        .map(|pair| {
            let mut grads = vec![0.0; flow.param_count()];
            let mut w1 = [0.0; 3];
            let cal_fn = |restored: &Image| {
                let c = cal_loss(restored, &pair.reference, loss)?;
                w1 = c.per_channel_w1;
                Ok((c.value, c.grad))
            };
            let (nll, cal) = flow.accumulate_joint_grad(&pair.reference, &pair.low, loss.lambda, &mut grads, cal_fn)?;
            Ok(SampleOutcome { nll, cal, w1, grads })
        })
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut grads = vec![0.0; flow.param_count()];
    let (mut nll, mut cal, mut w1) = (0.0, 0.0, [0.0; 3]);
    for o in &outcomes {
        nll += o.nll;
        cal += o.cal;
        for c in 0..3 {
            w1[c] += o.w1[c];
        }
        grads.iter_mut().zip(&o.grads).for_each(|(g, s)| *g += s);
    }
    grads.iter_mut().for_each(|g| *g /= n);
    let report = LossReport::new(nll / n, cal / n, loss.lambda, w1.map(|w| w / n));
    Ok((report, grads))
}

/// Trains `flow` on `nll + lambda * cal` with Adam and returns the loss
/// curve. Actnorm is fitted on the first batch if the flow is fresh. A single
/// RNG seeded from `cfg.seed` drives patch sampling and dequantization, so
/// equal inputs give bitwise-equal curves and parameters.
pub fn train_flow(pairs: &[Pair], flow: &mut ConditionalFlow, cfg: &TrainConfig) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let loss = LossConfig::with_lambda(cfg.lambda)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if !flow.is_initialized() {
        let batch = draw_batch(pairs, cfg, &mut rng)?;
        let init: Vec<(Image, Image)> = batch.into_iter().map(|p| (p.reference, p.low)).collect();
        flow.init_actnorm(&init)?;
    }
    if cfg.max_steps == 0 {
        return Ok(Vec::new());
    }
    let mut opt = OptimizerState::adam(cfg.lr, flow.param_count());
    let blocks = flow.blocks().to_vec();
    let mut curve = Vec::new();
    for step in 0..=cfg.max_steps {
        let batch = draw_batch(pairs, cfg, &mut rng)?;
        let (report, grads) = batch_objective(flow, &batch, &loss)?;
        let total = report.total().unwrap_or(f64::NAN);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {step} (nll {:?}, cal {})",
                report.nll, report.cal
            )));
        }
        if step % cfg.log_every == 0 || step == cfg.max_steps {
            curve.push(CurvePoint { step, report });
        }
        // The extra pass at max_steps only measures the final parameters.
        if step < cfg.max_steps {
            adam_step(flow.params_mut(), &grads, &mut opt, &blocks)?;
        }
    }
    Ok(curve)
}

/// `step,nll,cal,total` rows with round-trip float formatting.
pub fn write_curve_csv(curve: &[CurvePoint], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,nll,cal,total")?;
    for p in curve {
        let nll = p.report.nll.unwrap_or(f64::NAN);
        let total = p.report.total().unwrap_or(f64::NAN);
        writeln!(out, "{},{:e},{:e},{:e}", p.step, nll, p.report.cal, total)?;
    }
    Ok(())
}

pub fn save_curve_csv(curve: &[CurvePoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_curve_csv(curve, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
