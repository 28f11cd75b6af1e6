//! One-dimensional Wasserstein distances between soft histograms.
//!
//! Three routes are provided:
//! - [`w1_cdf`]: the closed form `W1 = step * sum_r |F1(t_r) - F2(t_r)|`, with
//!   a gradient on the first histogram's masses;
//! - [`wp_quantile`]: `W_p` as the `L_p` distance between inverse CDFs,
//!   sampled at midpoint quantiles;
//! - [`ot_oracle`]: exact transport by greedy mass splitting over sorted
//!   bins, which is optimal on the line for convex costs.

use crate::error::{Error, Result};
use crate::histogram::{cdf, SoftHistogram};

#[derive(Debug, Clone, PartialEq)]
pub struct TransportResult {
    pub distance: f64,
    /// `d distance / d mass` of the first histogram.
    pub grad_first: Vec<f64>,
}

fn check_pair(h1: &SoftHistogram, h2: &SoftHistogram) -> Result<()> {
    if h1.grid() != h2.grid() {
        return Err(Error::GridMismatch);
    }
    h1.require_normalized()?;
    h2.require_normalized()
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// W1 through the CDF identity.
///
/// `mass_j` enters every `F(t_k)` with `k >= j`, so the gradient is the
/// suffix sum of `sign(F1 - F2)` scaled by the step; `sign(0) = 0`.
pub fn w1_cdf(h1: &SoftHistogram, h2: &SoftHistogram) -> Result<TransportResult> {
    check_pair(h1, h2)?;
    let step = h1.grid().step();
    let f1 = cdf(h1)?;
    let f2 = cdf(h2)?;
    let bins = f1.len();
    let diff: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a - b).collect();
    let distance = step * diff.iter().map(|d| d.abs()).sum::<f64>();

    // Both CDFs end at exactly 1 on the simplex, so the last difference is
    // rounding noise; its sign is treated as 0.
    let mut grad_first = vec![0.0; bins];
    let mut suffix = 0.0;
    for k in (0..bins).rev() {
        if k + 1 < bins {
            suffix += sign(diff[k]);
        }
        grad_first[k] = step * suffix;
    }
    Ok(TransportResult {
        distance,
        grad_first,
    })
}

/// Smallest node `t_r` with `F(t_r) >= alpha`.
fn inverse_cdf(f: &[f64], nodes: &[f64], alpha: f64) -> f64 {
    let idx = f.partition_point(|&v| v < alpha);
    nodes[idx.min(nodes.len() - 1)]
}

/// `W_p` as `(mean_q |F1^-1(a_q) - F2^-1(a_q)|^p)^(1/p)` with `a_q = (q - 0.5) / Q`.
pub fn wp_quantile(h1: &SoftHistogram, h2: &SoftHistogram, p: f64, samples: usize) -> Result<f64> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::invalid("p", format!("exponent must be >= 1, got {p}")));
    }
    if samples < 1 {
        return Err(Error::invalid("samples", "need at least one quantile sample"));
    }
    check_pair(h1, h2)?;
    let nodes = h1.grid().nodes();
    let f1 = cdf(h1)?;
    let f2 = cdf(h2)?;
    let q = samples as f64;
    let total: f64 = (1..=samples)
        .map(|i| {
            let alpha = (i as f64 - 0.5) / q;
            (inverse_cdf(&f1, nodes, alpha) - inverse_cdf(&f2, nodes, alpha))
                .abs()
                .powf(p)
        })
        .sum();
    Ok((total / q).powf(1.0 / p))
}

/// Exact optimal transport cost to the power `1/p` by two-pointer mass
/// splitting. No gradient.
pub fn ot_oracle(h1: &SoftHistogram, h2: &SoftHistogram, p: f64) -> Result<f64> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::invalid("p", format!("exponent must be >= 1, got {p}")));
    }
    check_pair(h1, h2)?;
    let nodes = h1.grid().nodes();
    let (a, b) = (h1.mass(), h2.mass());
    let (mut i, mut j) = (0usize, 0usize);
    let (mut left_a, mut left_b) = (a[0], b[0]);
    let mut cost = 0.0;
    let n = nodes.len();
    while i < n && j < n {
        let moved = left_a.min(left_b);
        cost += moved * (nodes[i] - nodes[j]).abs().powf(p);
        left_a -= moved;
        left_b -= moved;
        // Advance whichever side ran out.
        if left_a <= left_b {
            i += 1;
            if i < n {
                left_a = a[i];
            }
        } else {
            j += 1;
            if j < n {
                left_b = b[j];
            }
        }
    }
    Ok(cost.powf(1.0 / p))
}
