//! Full-reference quality metrics: PSNR and SSIM.
//!
//! Both metrics clamp their inputs to `[0, 1]` and use a peak value of 1.
//! SSIM uses the usual 11x11 Gaussian window (sigma 1.5), `K1 = 0.01`,
//! `K2 = 0.03`, valid-region filtering, and averages the per-channel means.

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// PSNR in dB, or `Infinite` when the images are identical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn value(&self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(*v),
            Psnr::Infinite => None,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            Psnr::Finite(v) => json!(v),
            Psnr::Infinite => json!("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: Psnr,
    pub ssim: f64,
}

impl MetricReport {
    pub fn compute(a: &Image, b: &Image) -> Result<Self> {
        Ok(MetricReport {
            psnr: psnr(a, b)?,
            ssim: ssim(a, b)?,
        })
    }

    pub fn to_json(&self) -> Value {
        json!({ "psnr": self.psnr.to_json(), "ssim": self.ssim })
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "metric inputs")?;
    if a.is_empty() {
        return Err(Error::Empty("image"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0);
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10 * log10(1 / MSE)` over all channels and pixels.
pub fn psnr(a: &Image, b: &Image) -> Result<Psnr> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(10.0 * (1.0 / m).log10())
    })
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable valid-region Gaussian filter of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let e_aa = filter_valid(&aa, h, w, taps);
    let e_bb = filter_valid(&bb, h, w, taps);
    let e_ab = filter_valid(&ab, h, w, taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2))
        })
        .sum();
    total / n as f64
}

/// Mean SSIM, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "metric inputs")?;
    let (channels, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let (a, b) = (a.clamped(), b.clamped());
    let taps = gaussian_taps();
    let total: f64 = (0..channels)
        .map(|c| ssim_plane(a.channel(c), b.channel(c), h, w, &taps))
        .sum();
    Ok(total / channels as f64)
}
