//! Differentiable per-channel histograms.
//!
//! Each pixel `p` contributes a Cauchy kernel `1 / (1 + delta * (p - t_r)^2)`
//! to every bin node `t_r`. The per-node sums are then divided by their total
//! so the histogram is a probability vector. Because the kernel is smooth and
//! never zero, every bin mass is strictly positive and differentiable in the
//! pixel values; [`soft_hist_backward`] gives the analytic pixel gradient.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Tolerance on `sum(mass) == 1` for a histogram to count as normalized.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// `R` uniformly spaced nodes spanning `[a, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramGrid {
    lower: f64,
    upper: f64,
    nodes: Vec<f64>,
    step: f64,
}

impl HistogramGrid {
    pub fn new(lower: f64, upper: f64, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 bins, got {bins}")));
        }
        if !(lower.is_finite() && upper.is_finite()) || upper <= lower {
            return Err(Error::InvalidGrid(format!(
                "range [{lower}, {upper}] is empty or not finite"
            )));
        }
        let step = (upper - lower) / (bins - 1) as f64;
        let mut nodes: Vec<f64> = (0..bins).map(|r| lower + r as f64 * step).collect();
        // Pin the last node to the bound exactly.
        nodes[bins - 1] = upper;
        Ok(HistogramGrid {
            lower,
            upper,
            nodes,
            step,
        })
    }

    /// The 64-bin `[0, 1]` grid used for 8-bit-range images.
    pub fn unit_64() -> Self {
        Self::new(0.0, 1.0, 64).expect("static grid is valid")
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn bins(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Node spacing `(b - a) / (R - 1)`.
    pub fn step(&self) -> f64 {
        self.step
    }
}

/// Sharpness `delta` of the Cauchy kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    delta: f64,
}

impl KernelConfig {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::invalid("delta", format!("must be positive and finite, got {delta}")));
        }
        Ok(KernelConfig { delta })
    }

    /// `delta = (1 / step)^2`: the kernel drops to one half one node
    /// spacing away. For 64 bins on `[0, 1]` this is 3969.
    ///
    /// A pixel's total kernel weight depends on where it sits between two
    /// nodes. At this width the node-to-midpoint ratio is
    /// `coth(pi) / tanh(pi) ~ 1.0075`; at half the width it is about 1.19,
    /// which makes pixel-space descent stall between nodes.
    pub fn auto(grid: &HistogramGrid) -> Self {
        let k = 1.0 / grid.step();
        KernelConfig { delta: k * k }
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    #[inline]
    fn value(&self, d: f64) -> f64 {
        1.0 / (1.0 + self.delta * d * d)
    }

    #[inline]
    fn derivative(&self, d: f64) -> f64 {
        let q = 1.0 + self.delta * d * d;
        -2.0 * self.delta * d / (q * q)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftHistogram {
    grid: HistogramGrid,
    mass: Vec<f64>,
    normalized: bool,
}

impl SoftHistogram {
    /// Wraps an explicit mass vector. The `normalized` flag is set when the
    /// masses sum to one within [`NORMALIZATION_TOL`].
    pub fn from_mass(grid: HistogramGrid, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != grid.bins() {
            return Err(Error::ShapeMismatch(format!(
                "{} masses for a {}-bin grid",
                mass.len(),
                grid.bins()
            )));
        }
        if let Some(m) = mass.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
            return Err(Error::invalid("mass", format!("entries must be finite and nonnegative, found {m}")));
        }
        let total: f64 = mass.iter().sum();
        let normalized = (total - 1.0).abs() <= NORMALIZATION_TOL;
        Ok(SoftHistogram {
            grid,
            mass,
            normalized,
        })
    }

    /// Divides by the total mass.
    pub fn normalize(mut self) -> Result<Self> {
        let total: f64 = self.mass.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("mass", "cannot normalize a zero histogram"));
        }
        self.mass.iter_mut().for_each(|m| *m /= total);
        self.normalized = true;
        Ok(self)
    }

    pub fn grid(&self) -> &HistogramGrid {
        &self.grid
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub(crate) fn require_normalized(&self) -> Result<()> {
        if self.normalized {
            Ok(())
        } else {
            Err(Error::NotNormalized(self.mass.iter().sum()))
        }
    }

    /// Writes `node,mass` rows with 9 significant digits.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "node,mass")?;
        for (t, m) in self.grid.nodes().iter().zip(&self.mass) {
            writeln!(out, "{},{}", sig9(*t), sig9(*m))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Formats with 9 significant digits in scientific notation.
fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Unnormalized per-node kernel sums for one channel.
///
/// Pixels are accumulated in sorted order so the result does not depend on
/// pixel order at all, not even in the last bit.
fn kernel_sums(plane: &[f64], grid: &HistogramGrid, kernel: &KernelConfig) -> Vec<f64> {
    let mut sorted = plane.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    grid.nodes()
        .iter()
        .map(|&t| sorted.iter().map(|&p| kernel.value(p - t)).sum())
        .collect()
}

/// Normalized soft histogram of one pixel plane.
pub fn soft_hist(plane: &[f64], grid: &HistogramGrid, kernel: &KernelConfig) -> Result<SoftHistogram> {
    if plane.is_empty() {
        return Err(Error::Empty("pixel plane"));
    }
    if let Some(p) = plane.iter().find(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("pixel plane (value {p})")));
    }
    let sums = kernel_sums(plane, grid, kernel);
    let total: f64 = sums.iter().sum();
    Ok(SoftHistogram {
        grid: grid.clone(),
        mass: sums.into_iter().map(|s| s / total).collect(),
        normalized: true,
    })
}

/// Cumulative sums `F_k = sum_{r <= k} mass_r` of a normalized histogram.
pub fn cdf(h: &SoftHistogram) -> Result<Vec<f64>> {
    h.require_normalized()?;
    Ok(h.mass
        .iter()
        .scan(0.0, |acc, m| {
            *acc += m;
            Some(*acc)
        })
        .collect())
}

/// Pulls a gradient on the normalized masses back to the pixels.
///
/// With `m_r = s_r / Z`, `dm_r/dp = (k'_r(p) - m_r * sum_s k'_s(p)) / Z`, so
/// the pixel gradient is `sum_r k'_r(p) * (u_r - <u, m>) / Z`. A constant
/// upstream vector therefore produces a zero gradient.
pub fn soft_hist_backward(
    plane: &[f64],
    grid: &HistogramGrid,
    kernel: &KernelConfig,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    if plane.is_empty() {
        return Err(Error::Empty("pixel plane"));
    }
    if upstream.len() != grid.bins() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient has {} entries for a {}-bin grid",
            upstream.len(),
            grid.bins()
        )));
    }
    let sums = kernel_sums(plane, grid, kernel);
    let total: f64 = sums.iter().sum();
    let mean_upstream: f64 = upstream.iter().zip(&sums).map(|(u, s)| u * s / total).sum();
    let centered: Vec<f64> = upstream.iter().map(|u| (u - mean_upstream) / total).collect();
    let nodes = grid.nodes();
    Ok(plane
        .iter()
        .map(|&p| {
            nodes
                .iter()
                .zip(&centered)
                .map(|(&t, &c)| kernel.derivative(p - t) * c)
                .sum()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn unit_grid_64() {
        let g = HistogramGrid::new(0.0, 1.0, 64).unwrap();
        assert_eq!(g.bins(), 64);
        assert!((g.step() - 1.0 / 63.0).abs() < 1e-15);
        assert_eq!(g.nodes()[0], 0.0);
        assert_eq!(g.nodes()[63], 1.0);
        for w in g.nodes().windows(2) {
            assert!(w[1] > w[0]);
            assert!((w[1] - w[0] - g.step()).abs() < 1e-14);
        }
        assert!((KernelConfig::auto(&g).delta() - 3969.0).abs() < 1e-8);
    }

    #[test]
    fn two_node_and_degenerate_grids() {
        let g = HistogramGrid::new(0.0, 1.0, 2).unwrap();
        assert_eq!(g.nodes(), &[0.0, 1.0]);
        assert_eq!(g.step(), 1.0);
        assert!(HistogramGrid::new(0.0, 1.0, 1).is_err());
        assert!(HistogramGrid::new(1.0, 1.0, 8).is_err());
        assert!(HistogramGrid::new(1.0, 0.0, 8).is_err());
        assert!(KernelConfig::new(0.0).is_err());
        assert!(KernelConfig::new(-1.0).is_err());
    }

    #[test]
    fn single_pixel_hand_value() {
        let g = HistogramGrid::new(0.0, 1.0, 2).unwrap();
        let k = KernelConfig::new(4.0).unwrap();
        // Each node sees 1 / (1 + 4 * 0.25) = 0.5.
        assert_eq!(kernel_sums(&[0.5], &g, &k), vec![0.5, 0.5]);
        let h = soft_hist(&[0.5], &g, &k).unwrap();
        assert_eq!(h.mass(), &[0.5, 0.5]);
        assert!(h.is_normalized());
    }

    #[test]
    fn empty_plane_is_rejected() {
        let g = HistogramGrid::unit_64();
        let k = KernelConfig::auto(&g);
        assert!(matches!(soft_hist(&[], &g, &k), Err(Error::Empty(_))));
        assert!(soft_hist_backward(&[], &g, &k, &[0.0; 64]).is_err());
        assert!(matches!(
            soft_hist_backward(&[0.1], &g, &k, &[0.0; 3]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn cdf_cases() {
        let g = HistogramGrid::new(0.0, 1.0, 2).unwrap();
        let h = SoftHistogram::from_mass(g, vec![0.5, 0.5]).unwrap();
        assert_eq!(cdf(&h).unwrap(), vec![0.5, 1.0]);

        let g = HistogramGrid::new(0.0, 1.0, 5).unwrap();
        let mut point = vec![0.0; 5];
        point[0] = 1.0;
        let h = SoftHistogram::from_mass(g.clone(), point).unwrap();
        assert_eq!(cdf(&h).unwrap(), vec![1.0; 5]);

        let raw = SoftHistogram::from_mass(g, vec![1.0; 5]).unwrap();
        assert!(!raw.is_normalized());
        assert!(matches!(cdf(&raw), Err(Error::NotNormalized(_))));
        assert!(cdf(&raw.normalize().unwrap()).is_ok());
    }

    #[test]
    fn cdf_matches_quadratic_prefix_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = HistogramGrid::unit_64();
        for _ in 0..50 {
            let h = SoftHistogram::from_mass(g.clone(), random_plane(&mut rng, 64))
                .unwrap()
                .normalize()
                .unwrap();
            let f = cdf(&h).unwrap();
            for k in 0..64 {
                let naive: f64 = (0..=k).map(|r| h.mass()[r]).sum();
                assert!((f[k] - naive).abs() < 1e-14);
            }
            assert!((f[63] - 1.0).abs() < 1e-9);
            assert!(f.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn backward_null_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = HistogramGrid::unit_64();
        let k = KernelConfig::auto(&g);
        let plane = random_plane(&mut rng, 16);
        let zero = soft_hist_backward(&plane, &g, &k, &[0.0; 64]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let constant = soft_hist_backward(&plane, &g, &k, &[2.5; 64]).unwrap();
        assert!(constant.iter().all(|&v| v.abs() < 1e-12), "{constant:?}");
    }

    /// Central differences of `<upstream, soft_hist(plane)>` per pixel.
    fn central_differences(plane: &[f64], upstream: &[f64], g: &HistogramGrid, k: &KernelConfig) -> Vec<f64> {
        let eps = 1e-6;
        let loss = |p: &[f64]| -> f64 {
            let h = soft_hist(p, g, k).unwrap();
            h.mass().iter().zip(upstream).map(|(m, u)| m * u).sum()
        };
        (0..plane.len())
            .map(|i| {
                let mut hi = plane.to_vec();
                let mut lo = plane.to_vec();
                hi[i] += eps;
                lo[i] -= eps;
                (loss(&hi) - loss(&lo)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn backward_matches_central_differences() {
        // About one coordinate in a thousand cancels to |g| < 1e-2, where the
        // eps^2 truncation term (a few 1e-9) alone exceeds 1e-6 relative.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = HistogramGrid::unit_64();
        let k = KernelConfig::auto(&g);
        for _ in 0..100 {
            let plane = random_plane(&mut rng, 8);
            let upstream = random_plane(&mut rng, 64);
            let analytic = soft_hist_backward(&plane, &g, &k, &upstream).unwrap();
            let numeric = central_differences(&plane, &upstream, &g, &k);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() <= 1e-6 * a.abs().max(n.abs()) + 1e-8, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn total_weight_ripple_matches_closed_form() {
        // Far from the ends the grid looks infinite, where the total weight
        // of one pixel is (pi/c) coth(pi/c) on a node and (pi/c) tanh(pi/c)
        // midway, for delta = (c / step)^2.
        // The Cauchy tail past +-2000 nodes is about 1e-3 / c^2.
        let g = HistogramGrid::new(0.0, 1.0, 4001).unwrap();
        let mid = g.nodes()[2000];
        for c in [1.0f64, 2.0] {
            let k = KernelConfig::new((c / g.step()).powi(2)).unwrap();
            let on = kernel_sums(&[mid], &g, &k).iter().sum::<f64>();
            let off = kernel_sums(&[mid + 0.5 * g.step()], &g, &k).iter().sum::<f64>();
            let a = std::f64::consts::PI / c;
            assert!((on - a / a.tanh()).abs() < 2e-3, "{on}");
            assert!((off - a * a.tanh()).abs() < 2e-3, "{off}");
        }
    }

    #[test]
    fn csv_dump_shape() {
        let g = HistogramGrid::unit_64();
        let k = KernelConfig::auto(&g);
        let h = soft_hist(&[0.2, 0.4, 0.9], &g, &k).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "node,mass");
        assert_eq!(lines.len(), 65);
        let total: f64 = lines[1..]
            .iter()
            .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn positive_and_normalized(plane in prop::collection::vec(-0.5f64..1.5, 1..40)) {
            let g = HistogramGrid::unit_64();
            let h = soft_hist(&plane, &g, &KernelConfig::auto(&g)).unwrap();
            prop_assert!(h.mass().iter().all(|&m| m > 0.0));
            prop_assert!((h.mass().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn permutation_and_replication_invariance(
            plane in prop::collection::vec(0.0f64..1.0, 2..40), seed in any::<u64>()
        ) {
            use rand::seq::SliceRandom;
            let g = HistogramGrid::unit_64();
            let k = KernelConfig::auto(&g);
            let base = soft_hist(&plane, &g, &k).unwrap();

            let mut shuffled = plane.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(soft_hist(&shuffled, &g, &k).unwrap(), base.clone());

            let mut doubled = plane.clone();
            doubled.extend_from_slice(&plane);
            let rep = soft_hist(&doubled, &g, &k).unwrap();
            for (a, b) in base.mass().iter().zip(rep.mass()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
