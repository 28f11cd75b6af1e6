use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{cal_loss, per_channel_w1, LossConfig};
use crate::optim::OptimizerState;

/// Backtracking halves the step at most this many times before giving up on
/// an iteration.
pub const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct PixelDescentConfig {
    pub steps: usize,
    pub lr: f64,
    /// Reject any step that would raise the summed W1 after backtracking.
    pub monotone: bool,
    pub loss: LossConfig,
}

impl Default for PixelDescentConfig {
    fn default() -> Self {
        PixelDescentConfig {
            steps: 500,
            lr: 1e-2,
            monotone: true,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelDescent {
    pub image: Image,
    /// Summed per-channel W1 before the first step and after every step,
    /// so `steps + 1` entries.
    pub trajectory: Vec<f64>,
    /// Steps that found no acceptable decrease and left the image as is.
    pub rejected_steps: usize,
}

fn summed_w1(img: &Image, reference: &Image, cfg: &LossConfig) -> Result<f64> {
    let w = per_channel_w1(img, reference, cfg)?.iter().sum::<f64>();
    if !w.is_finite() {
        return Err(Error::NonFinite("summed W1".into()));
    }
    Ok(w)
}

/// Minimizes CAL over the pixels of a copy of `init` with Adam. Pixels are
/// not clamped; the histogram kernel handles values outside the grid. In
/// monotone mode a step that increases
/// the summed W1 is halved until it does not, up to [`MAX_HALVINGS`] times,
/// and dropped if it still does.
pub fn optimize_pixels_cal(init: &Image, reference: &Image, cfg: &PixelDescentConfig) -> Result<PixelDescent> {
    cfg.loss.validate()?;
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::invalid("lr", format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let mut image = init.clone();
    let mut current = summed_w1(&image, reference, &cfg.loss)?;
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    trajectory.push(current);
    let mut opt = OptimizerState::adam(cfg.lr, image.len());
    let mut rejected_steps = 0;
    for _ in 0..cfg.steps {
        let loss = cal_loss(&image, reference, &cfg.loss)?;
        if !loss.value.is_finite() {
            return Err(Error::NonFinite("CAL value".into()));
        }
        let update = opt.direction(loss.grad.data(), &[])?;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let mut candidate = image.clone();
            for (v, u) in candidate.data_mut().iter_mut().zip(&update) {
                *v -= scale * u;
            }
            let w = summed_w1(&candidate, reference, &cfg.loss)?;
            if !cfg.monotone || w <= current {
                accepted = Some((candidate, w));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((candidate, w)) => {
                image = candidate;
                current = w;
            }
            None => rejected_steps += 1,
        }
        trajectory.push(current);
    }
    Ok(PixelDescent {
        image,
        trajectory,
        rejected_steps,
    })
}

/// `step,w1` rows.
pub fn write_trajectory_csv(trajectory: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("step,w1\n");
    for (k, w) in trajectory.iter().enumerate() {
        text.push_str(&format!("{k},{w:e}\n"));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn red_shifted(reference: &Image) -> Image {
        let mut init = reference.clone();
        for v in init.channel_mut(0) {
            *v = (*v + 0.2).min(1.0);
        }
        init
    }

    #[test]
    fn identical_images_stay_put() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reference = synthetic_scene(12, 12, &mut rng);
        let cfg = PixelDescentConfig {
            steps: 5,
            ..Default::default()
        };
        let out = optimize_pixels_cal(&reference, &reference, &cfg).unwrap();
        assert_eq!(out.image, reference);
        assert!(out.trajectory.iter().all(|&w| w == 0.0));
        assert_eq!(out.trajectory.len(), 6);
    }

    #[test]
    fn monotone_descent_on_red_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reference = synthetic_scene(16, 16, &mut rng);
        let init = red_shifted(&reference);
        let cfg = PixelDescentConfig {
            steps: 60,
            ..Default::default()
        };
        let out = optimize_pixels_cal(&init, &reference, &cfg).unwrap();
        assert!(out.trajectory.iter().all(|w| w.is_finite()));
        assert!(out.trajectory.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.trajectory[60] < 0.5 * out.trajectory[0]);
        assert_eq!(init, red_shifted(&reference));
    }

    #[test]
    fn bad_arguments() {
        let a = Image::zeros(3, 4, 4);
        let cfg = PixelDescentConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(optimize_pixels_cal(&a, &a, &cfg).is_err());
        assert!(optimize_pixels_cal(&a, &Image::zeros(3, 4, 5), &PixelDescentConfig::default()).is_err());
    }
}
