//! Color alignment loss and the joint objective.

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::flow::ConditionalFlow;
use crate::histogram::{soft_hist, soft_hist_backward, HistogramGrid, KernelConfig};
use crate::image::Image;
use crate::transport::w1_cdf;

/// Weight on the color alignment term used for training by default.
pub const DEFAULT_LAMBDA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChannelReduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub grid: HistogramGrid,
    pub kernel: KernelConfig,
    pub reduction: ChannelReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        let grid = HistogramGrid::unit_64();
        let kernel = KernelConfig::auto(&grid);
        LossConfig {
            lambda: DEFAULT_LAMBDA,
            grid,
            kernel,
            reduction: ChannelReduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn with_lambda(lambda: f64) -> Result<Self> {
        let cfg = LossConfig {
            lambda,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda", format!("must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    fn reduce_weight(&self, channels: usize) -> f64 {
        match self.reduction {
            ChannelReduction::Sum => 1.0,
            ChannelReduction::Mean => 1.0 / channels as f64,
        }
    }
}

/// Value and pixel gradient of the color alignment loss.
#[derive(Debug, Clone)]
pub struct CalLoss {
    pub value: f64,
    pub per_channel_w1: [f64; 3],
    /// Gradient with respect to the restored image; the reference is data.
    pub grad: Image,
}

fn check_rgb_pair(restored: &Image, reference: &Image) -> Result<()> {
    restored.check_same_shape(reference, "restored vs reference")?;
    if restored.channels() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "color alignment needs 3 channels, got {}",
            restored.channels()
        )));
    }
    Ok(())
}

/// Per-channel W1 between soft histograms, without gradients.
pub fn per_channel_w1(restored: &Image, reference: &Image, cfg: &LossConfig) -> Result<[f64; 3]> {
    check_rgb_pair(restored, reference)?;
    let mut out = [0.0; 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let a = soft_hist(restored.channel(c), &cfg.grid, &cfg.kernel)?;
        let b = soft_hist(reference.channel(c), &cfg.grid, &cfg.kernel)?;
        *slot = w1_cdf(&a, &b)?.distance;
    }
    Ok(out)
}

pub fn cal_value(restored: &Image, reference: &Image, cfg: &LossConfig) -> Result<f64> {
    let w = per_channel_w1(restored, reference, cfg)?;
    Ok(cfg.reduce_weight(3) * w.iter().sum::<f64>())
}

pub fn cal_loss(restored: &Image, reference: &Image, cfg: &LossConfig) -> Result<CalLoss> {
    check_rgb_pair(restored, reference)?;
    let weight = cfg.reduce_weight(3);
    let mut per_channel_w1 = [0.0; 3];
    let mut grad = Image::zeros(3, restored.height(), restored.width());
    for c in 0..3 {
        let plane = restored.channel(c);
        let a = soft_hist(plane, &cfg.grid, &cfg.kernel)?;
        let b = soft_hist(reference.channel(c), &cfg.grid, &cfg.kernel)?;
        let w = w1_cdf(&a, &b)?;
        per_channel_w1[c] = w.distance;
        let upstream: Vec<f64> = w.grad_first.iter().map(|g| g * weight).collect();
        let g = soft_hist_backward(plane, &cfg.grid, &cfg.kernel, &upstream)?;
        grad.channel_mut(c).copy_from_slice(&g);
    }
    Ok(CalLoss {
        value: weight * per_channel_w1.iter().sum::<f64>(),
        per_channel_w1,
        grad,
    })
}

/// Sign pattern of `F_restored - F_reference` for every channel and node.
///
/// W1 is piecewise linear in the CDFs; two inputs with the same signature lie
/// on the same linear piece. Used to keep finite differences off the kinks.
pub fn cal_kink_signature(restored: &Image, reference: &Image, cfg: &LossConfig) -> Result<Vec<i8>> {
    use crate::histogram::cdf;
    check_rgb_pair(restored, reference)?;
    let mut sig = Vec::with_capacity(3 * cfg.grid.bins());
    for c in 0..3 {
        let fa = cdf(&soft_hist(restored.channel(c), &cfg.grid, &cfg.kernel)?)?;
        let fb = cdf(&soft_hist(reference.channel(c), &cfg.grid, &cfg.kernel)?)?;
        let last = fa.len() - 1;
        sig.extend(fa[..last].iter().zip(&fb).map(|(x, y)| {
            let d = x - y;
            (d > 0.0) as i8 - (d < 0.0) as i8
        }));
    }
    Ok(sig)
}

/// The joint objective `nll + lambda * cal`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    /// Negative log-likelihood in nats per image; absent for CAL-only reports.
    pub nll: Option<f64>,
    pub cal: f64,
    pub lambda: f64,
    pub per_channel_w1: [f64; 3],
}

impl LossReport {
    pub fn new(nll: f64, cal: f64, lambda: f64, per_channel_w1: [f64; 3]) -> Self {
        LossReport {
            nll: Some(nll),
            cal,
            lambda,
            per_channel_w1,
        }
    }

    pub fn cal_only(cal: f64, lambda: f64, per_channel_w1: [f64; 3]) -> Self {
        LossReport {
            nll: None,
            cal,
            lambda,
            per_channel_w1,
        }
    }

    pub fn total(&self) -> Option<f64> {
        self.nll.map(|n| n + self.lambda * self.cal)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "nll": self.nll,
            "cal": self.cal,
            "total": self.total(),
            "lambda": self.lambda,
            "w1_r": self.per_channel_w1[0],
            "w1_g": self.per_channel_w1[1],
            "w1_b": self.per_channel_w1[2],
        })
    }
}

/// Evaluates the joint objective on one pair: NLL of the reference given the
/// low-light input, plus CAL between the zero-temperature restoration and
/// the reference.
pub fn total_loss(low: &Image, reference: &Image, flow: &ConditionalFlow, cfg: &LossConfig) -> Result<LossReport> {
    cfg.validate()?;
    let nll = flow.nll(reference, low)?;
    let restored = flow.enhance_mode(low)?;
    let per_channel = per_channel_w1(&restored, reference, cfg)?;
    let cal = cfg.reduce_weight(3) * per_channel.iter().sum::<f64>();
    Ok(LossReport::new(nll, cal, cfg.lambda, per_channel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
        Image::from_fn(3, h, w, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn identical_images_have_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random_image(&mut rng, 8, 8);
        let out = cal_loss(&img, &img, &LossConfig::default()).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn swapped_channels_are_penalized() {
        let img = Image::from_fn(3, 8, 8, |c, y, x| match c {
            0 => 0.9 - 0.01 * (y + x) as f64,
            1 => 0.5,
            _ => 0.1 + 0.01 * x as f64,
        });
        let mut swapped = img.clone();
        swapped.channel_mut(0).copy_from_slice(img.channel(2));
        swapped.channel_mut(2).copy_from_slice(img.channel(0));
        assert!(cal_loss(&swapped, &img, &LossConfig::default()).unwrap().value > 0.0);
    }

    #[test]
    fn shape_checks() {
        let cfg = LossConfig::default();
        assert!(cal_loss(&Image::zeros(3, 4, 4), &Image::zeros(3, 4, 5), &cfg).is_err());
        assert!(cal_loss(&Image::zeros(1, 4, 4), &Image::zeros(1, 4, 4), &cfg).is_err());
        assert!(LossConfig::with_lambda(-1.0).is_err());
    }

    #[test]
    fn symmetric_and_shuffle_invariant() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = LossConfig::default();
        let a = random_image(&mut rng, 8, 8);
        let b = random_image(&mut rng, 8, 8);
        let ab = cal_value(&a, &b, &cfg).unwrap();
        assert!((ab - cal_value(&b, &a, &cfg).unwrap()).abs() < 1e-15);

        let mut sa = a.clone();
        let mut sb = b.clone();
        for c in 0..3 {
            sa.channel_mut(c).shuffle(&mut rng);
            sb.channel_mut(c).shuffle(&mut rng);
        }
        assert_eq!(cal_value(&sa, &sb, &cfg).unwrap(), ab);
    }

    #[test]
    fn mean_reduction_divides_by_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_image(&mut rng, 6, 6);
        let b = random_image(&mut rng, 6, 6);
        let sum = LossConfig::default();
        let mean = LossConfig {
            reduction: ChannelReduction::Mean,
            ..LossConfig::default()
        };
        let s = cal_loss(&a, &b, &sum).unwrap();
        let m = cal_loss(&a, &b, &mean).unwrap();
        assert!((s.value / 3.0 - m.value).abs() < 1e-15);
        for (gs, gm) in s.grad.data().iter().zip(m.grad.data()) {
            assert!((gs / 3.0 - gm).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_matches_central_differences_off_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = LossConfig::default();
        let eps = 1e-6;
        let a = random_image(&mut rng, 8, 8);
        let b = random_image(&mut rng, 8, 8);
        let analytic = cal_loss(&a, &b, &cfg).unwrap().grad;
        let base_sig = cal_kink_signature(&a, &b, &cfg).unwrap();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for i in 0..a.len() {
            let mut hi = a.clone();
            let mut lo = a.clone();
            hi.data_mut()[i] += eps;
            lo.data_mut()[i] -= eps;
            if cal_kink_signature(&hi, &b, &cfg).unwrap() != base_sig
                || cal_kink_signature(&lo, &b, &cfg).unwrap() != base_sig
            {
                continue;
            }
            let fd = (cal_value(&hi, &b, &cfg).unwrap() - cal_value(&lo, &b, &cfg).unwrap()) / (2.0 * eps);
            let an = analytic.data()[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-12));
            checked += 1;
        }
        assert!(checked > 150, "only {checked} coordinates off the kinks");
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn report_consistency_and_json_keys() {
        let r = LossReport::new(12.5, 0.3, 0.01, [0.1, 0.1, 0.1]);
        assert_eq!(r.total(), Some(12.5 + 0.01 * 0.3));
        let j = r.to_json();
        for key in ["nll", "cal", "total", "lambda", "w1_r", "w1_g", "w1_b"] {
            assert!(j.get(key).is_some(), "missing {key}");
        }
        let only = LossReport::cal_only(0.2, 0.01, [0.0; 3]).to_json();
        assert!(only["nll"].is_null());
    }
}
