//! Same-padded, stride-1 2D convolution over planar images, with backward.

use crate::image::Image;

/// Weights live in the flow's flat parameter vector: `weight[o][i][ky][kx]`
/// at `weight_offset`, then `bias[o]` at `bias_offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl Conv2d {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    #[inline]
    fn weight_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        self.weight_offset + ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    /// For a tap offset `d` in `[-pad, pad]`, the output range `[lo, hi)` that
    /// reads an in-bounds input at `pos + d`.
    #[inline]
    fn valid_range(len: usize, d: isize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (len as isize - d.max(0)).max(0) as usize;
        (lo.min(hi), hi)
    }

    pub fn forward(&self, params: &[f64], input: &Image) -> Image {
        debug_assert_eq!(input.channels(), self.in_channels);
        let (h, w) = (input.height(), input.width());
        let pad = (self.kernel / 2) as isize;
        let mut out = Image::zeros(self.out_channels, h, w);
        for o in 0..self.out_channels {
            let dst = out.channel_mut(o);
            dst.fill(params[self.bias_offset + o]);
            for i in 0..self.in_channels {
                let src = input.channel(i);
                for ky in 0..self.kernel {
                    let dy = ky as isize - pad;
                    let (y0, y1) = Self::valid_range(h, dy);
                    for kx in 0..self.kernel {
                        let dx = kx as isize - pad;
                        let (x0, x1) = Self::valid_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = params[self.weight_index(o, i, ky, kx)];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let s = &src[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                            let d = &mut dst[y * w + x0..y * w + x1];
                            for (dv, sv) in d.iter_mut().zip(s) {
                                *dv += wv * sv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grads` and, if requested,
    /// returns the gradient with respect to `input`.
    pub fn backward(
        &self,
        params: &[f64],
        input: &Image,
        grad_out: &Image,
        grads: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Image> {
        let (h, w) = (input.height(), input.width());
        let pad = (self.kernel / 2) as isize;
        let mut grad_in = want_input_grad.then(|| Image::zeros(self.in_channels, h, w));
        for o in 0..self.out_channels {
            let g = grad_out.channel(o);
            grads[self.bias_offset + o] += g.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let src = input.channel(i);
                for ky in 0..self.kernel {
                    let dy = ky as isize - pad;
                    let (y0, y1) = Self::valid_range(h, dy);
                    for kx in 0..self.kernel {
                        let dx = kx as isize - pad;
                        let (x0, x1) = Self::valid_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let widx = self.weight_index(o, i, ky, kx);
                        let wv = params[widx];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let soff = sy * w + (x0 as isize + dx) as usize;
                            let gr = &g[y * w + x0..y * w + x1];
                            acc += gr.iter().zip(&src[soff..soff + (x1 - x0)]).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(gi) = grad_in.as_mut() {
                                let d = &mut gi.channel_mut(i)[soff..soff + (x1 - x0)];
                                for (dv, gv) in d.iter_mut().zip(gr) {
                                    *dv += wv * gv;
                                }
                            }
                        }
                        grads[widx] += acc;
                    }
                }
            }
        }
        grad_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct definition with explicit bounds checks.
    fn naive(conv: &Conv2d, params: &[f64], input: &Image) -> Image {
        let (h, w) = (input.height(), input.width());
        let pad = (conv.kernel / 2) as isize;
        Image::from_fn(conv.out_channels, h, w, |o, y, x| {
            let mut acc = params[conv.bias_offset + o];
            for i in 0..conv.in_channels {
                for ky in 0..conv.kernel {
                    for kx in 0..conv.kernel {
                        let sy = y as isize + ky as isize - pad;
                        let sx = x as isize + kx as isize - pad;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            acc += params[conv.weight_index(o, i, ky, kx)] * input.get(i, sy as usize, sx as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn setup(rng: &mut impl Rng, h: usize, w: usize) -> (Conv2d, Vec<f64>, Image) {
        let conv = Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            weight_offset: 1,
            bias_offset: 1 + 54,
        };
        let params: Vec<f64> = (0..1 + 54 + 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let input = Image::from_fn(2, h, w, |_, _, _| rng.random_range(-1.0..1.0));
        (conv, params, input)
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (h, w) in [(1, 1), (2, 3), (5, 4), (1, 6)] {
            let (conv, params, input) = setup(&mut rng, h, w);
            let fast = conv.forward(&params, &input);
            let slow = naive(&conv, &params, &input);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        // <grad_out, conv(x)> is linear in x and in the weights; compare the
        // backward pass with central differences on that scalar.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (conv, params, input) = setup(&mut rng, 3, 4);
        let g = Image::from_fn(3, 3, 4, |_, _, _| rng.random_range(-1.0..1.0));
        let scalar = |p: &[f64], x: &Image| -> f64 {
            conv.forward(p, x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let mut grads = vec![0.0; params.len()];
        let gin = conv.backward(&params, &input, &g, &mut grads, true).unwrap();
        let eps = 1e-6;
        for k in 0..params.len() {
            let mut hi = params.clone();
            let mut lo = params.clone();
            hi[k] += eps;
            lo[k] -= eps;
            let fd = (scalar(&hi, &input) - scalar(&lo, &input)) / (2.0 * eps);
            assert!((fd - grads[k]).abs() < 1e-8, "param {k}: {fd} vs {}", grads[k]);
        }
        for k in 0..input.len() {
            let mut hi = input.clone();
            let mut lo = input.clone();
            hi.data_mut()[k] += eps;
            lo.data_mut()[k] -= eps;
            let fd = (scalar(&params, &hi) - scalar(&params, &lo)) / (2.0 * eps);
            assert!((fd - gin.data()[k]).abs() < 1e-8);
        }
    }
}
