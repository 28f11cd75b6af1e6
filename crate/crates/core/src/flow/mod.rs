//! A small conditional normalizing flow.
//!
//! The target image `y` is squeezed 2x2 (3 -> 12 channels) and pushed through
//! `N` steps, each `actnorm -> channel reversal -> conditional affine
//! coupling`. The coupling scale and shift for the transformed half come from
//! a two-layer conv subnet fed with the untouched half and a per-step feature
//! map computed from the (squeezed) low-light input `x` by a shared encoder.
//!
//! Every layer is invertible in closed form and has an exact log-determinant,
//! so `-log p(y | x) = sum(z^2 / 2 + log(2 pi) / 2) - log|det dz/dy|`.
//!
//! All parameters live in one flat `Vec<f64>` addressed by named blocks; the
//! analytic gradients of the NLL (forward path) and of any loss on the
//! restored image (inverse path) are returned in the same layout.

mod checkpoint;
mod conv;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use conv::Conv2d;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

/// Spatial-to-channel factor of the initial squeeze.
pub const SQUEEZE_FACTOR: usize = 2;
/// Lower bound on the activation standard deviation during actnorm init.
pub const ACTNORM_STD_FLOOR: f64 = 1e-6;
const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Channels of the input image (3 for RGB).
    pub image_channels: usize,
    /// Number of flow steps `N`.
    pub steps: usize,
    /// Width of the conditioning encoder.
    pub encoder_width: usize,
    /// Channels of each per-step conditioning head.
    pub cond_channels: usize,
    /// Width of the coupling subnet.
    pub coupling_width: usize,
    /// Convolution kernel size (odd).
    pub kernel: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            image_channels: 3,
            steps: 4,
            encoder_width: 16,
            cond_channels: 8,
            coupling_width: 16,
            kernel: 3,
        }
    }
}

impl FlowConfig {
    pub fn with_steps(steps: usize) -> Self {
        FlowConfig {
            steps,
            ..Default::default()
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.image_channels * SQUEEZE_FACTOR * SQUEEZE_FACTOR
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || !self.latent_channels().is_multiple_of(2) {
            return Err(Error::invalid("image_channels", "squeezed channel count must be even and nonzero"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid("kernel", "kernel size must be odd"));
        }
        if self.encoder_width == 0 || self.coupling_width == 0 || self.cond_channels == 0 {
            return Err(Error::invalid("width", "layer widths must be nonzero"));
        }
        Ok(())
    }
}

/// A named contiguous slice of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl ParamBlock {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Default)]
struct Layout {
    blocks: Vec<ParamBlock>,
    cursor: usize,
}

impl Layout {
    fn alloc(&mut self, name: String, len: usize) -> usize {
        let offset = self.cursor;
        self.blocks.push(ParamBlock { name, offset, len });
        self.cursor += len;
        offset
    }
}

#[derive(Debug, Clone, Copy)]
struct ActNorm {
    shift: usize,
    log_scale: usize,
    channels: usize,
}

#[derive(Debug, Clone, Copy)]
struct Step {
    head: Conv2d,
    actnorm: ActNorm,
    coupling_in: Conv2d,
    coupling_out: Conv2d,
}

/// Identifies one invertible layer for per-layer inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerId {
    ActNorm(usize),
    Reverse(usize),
    Coupling(usize),
}

/// Encoder outputs for one conditioning image: one feature map per step.
#[derive(Debug, Clone)]
pub struct Conditioning {
    features: Vec<Image>,
    trace: EncoderTrace,
}

impl Conditioning {
    pub fn features(&self) -> &[Image] {
        &self.features
    }
}

#[derive(Debug, Clone)]
struct EncoderTrace {
    input: Image,
    activations: Vec<Image>,
}

#[derive(Debug, Clone)]
pub struct LatentOutput {
    /// Latent tensor, `(4C, H/2, W/2)`.
    pub z: Image,
    /// `log|det dz/dy|` in nats.
    pub log_det: f64,
    /// Contribution of every layer, in application order.
    pub layer_log_dets: Vec<(LayerId, f64)>,
}

#[derive(Debug, Clone)]
pub struct ConditionalFlow {
    config: FlowConfig,
    encoder: Vec<Conv2d>,
    steps: Vec<Step>,
    blocks: Vec<ParamBlock>,
    params: Vec<f64>,
    initialized: bool,
}

/// Evaluated coupling subnet for one input half.
struct CouplingEval {
    input: Image,
    hidden: Image,
    log_scale: Image,
    scale: Image,
    shift: Image,
}

struct ForwardStepTrace {
    actnorm_in: Image,
    coupling_in: Image,
    coupling: CouplingEval,
}

struct InverseStepTrace {
    actnorm_out: Image,
    coupling_out: Image,
    coupling: CouplingEval,
}

impl ConditionalFlow {
    /// Builds a flow with random weights drawn from `rng`. Actnorm layers
    /// start as the identity and must be initialized from data (or marked
    /// initialized) before use, unless the flow has no steps.
    pub fn new(config: FlowConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut layout = Layout::default();
        let conv = |layout: &mut Layout, name: &str, in_channels: usize, out_channels: usize| {
            let weight_offset = layout.alloc(
                format!("{name}.weight"),
                out_channels * in_channels * config.kernel * config.kernel,
            );
            let bias_offset = layout.alloc(format!("{name}.bias"), out_channels);
            Conv2d {
                in_channels,
                out_channels,
                kernel: config.kernel,
                weight_offset,
                bias_offset,
            }
        };

        let latent = config.latent_channels();
        let half = latent / 2;
        let width = config.encoder_width;
        let encoder = vec![
            conv(&mut layout, "encoder.conv1", latent, width),
            conv(&mut layout, "encoder.conv2", width, width),
            conv(&mut layout, "encoder.conv3", width, width),
        ];
        let mut steps = Vec::with_capacity(config.steps);
        for n in 0..config.steps {
            let head = conv(&mut layout, &format!("step{n}.cond_head"), width, config.cond_channels);
            let shift = layout.alloc(format!("step{n}.actnorm.shift"), latent);
            let log_scale = layout.alloc(format!("step{n}.actnorm.log_scale"), latent);
            let coupling_in = conv(
                &mut layout,
                &format!("step{n}.coupling.conv1"),
                half + config.cond_channels,
                config.coupling_width,
            );
            let coupling_out = conv(
                &mut layout,
                &format!("step{n}.coupling.conv2"),
                config.coupling_width,
                latent,
            );
            steps.push(Step {
                head,
                actnorm: ActNorm {
                    shift,
                    log_scale,
                    channels: latent,
                },
                coupling_in,
                coupling_out,
            });
        }
        let Layout { blocks, cursor } = layout;
        let mut params = vec![0.0; cursor];
        let mut init_conv = |c: &Conv2d, gain: f64, params: &mut [f64]| {
            let std = gain / (c.fan_in() as f64).sqrt();
            for p in &mut params[c.weight_offset..c.weight_offset + c.weight_len()] {
                let e: f64 = StandardNormal.sample(rng);
                *p = std * e;
            }
        };
        for c in &encoder {
            init_conv(c, 1.0, &mut params);
        }
        for s in &steps {
            init_conv(&s.head, 1.0, &mut params);
            init_conv(&s.coupling_in, 1.0, &mut params);
            // Small output weights start every coupling close to the identity.
            init_conv(&s.coupling_out, 0.1, &mut params);
        }

        Ok(ConditionalFlow {
            config,
            encoder,
            steps,
            blocks,
            params,
            initialized: config.steps == 0,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.params[b.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.blocks.iter().find(|b| b.name == name)?.range();
        Some(&mut self.params[range])
    }

    /// Replaces the whole parameter vector.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a flow with {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Declares the actnorm parameters valid without data-dependent
    /// initialization (e.g. after setting them by hand).
    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    fn check_ready(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(Error::NotInitialized)
        }
    }

    fn check_image(&self, img: &Image, what: &str) -> Result<()> {
        if img.channels() != self.config.image_channels {
            return Err(Error::ShapeMismatch(format!(
                "{what} has {} channels, flow expects {}",
                img.channels(),
                self.config.image_channels
            )));
        }
        if img.height() == 0
            || img.width() == 0
            || !img.height().is_multiple_of(SQUEEZE_FACTOR)
            || !img.width().is_multiple_of(SQUEEZE_FACTOR)
        {
            return Err(Error::ShapeMismatch(format!(
                "{what} is {}x{}; both sides must be positive multiples of {SQUEEZE_FACTOR}",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z: &Image, cond: &Conditioning) -> Result<()> {
        let expect = (
            self.config.latent_channels(),
            cond.trace.input.height(),
            cond.trace.input.width(),
        );
        if z.shape() != expect {
            return Err(Error::ShapeMismatch(format!(
                "latent is {:?}, expected {expect:?}",
                z.shape()
            )));
        }
        Ok(())
    }

    // ----- encoder -----

    /// Runs the conditioning encoder on a low-light image.
    pub fn condition(&self, x: &Image) -> Result<Conditioning> {
        self.check_image(x, "condition")?;
        let input = squeeze(x)?;
        let mut activations = Vec::with_capacity(self.encoder.len());
        let mut h = input.clone();
        for c in &self.encoder {
            h = c.forward(&self.params, &h).map(f64::tanh);
            activations.push(h.clone());
        }
        let trunk = activations.last().expect("encoder has layers");
        let features = self
            .steps
            .iter()
            .map(|s| s.head.forward(&self.params, trunk))
            .collect();
        Ok(Conditioning {
            features,
            trace: EncoderTrace { input, activations },
        })
    }

    fn encoder_backward(&self, cond: &Conditioning, feature_grads: &[Image], grads: &mut [f64]) {
        let acts = &cond.trace.activations;
        let trunk = acts.last().expect("encoder has layers");
        let mut g = Image::zeros(trunk.channels(), trunk.height(), trunk.width());
        for (s, fg) in self.steps.iter().zip(feature_grads) {
            let gi = s.head.backward(&self.params, trunk, fg, grads, true).expect("input grad");
            g.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
        }
        for (k, c) in self.encoder.iter().enumerate().rev() {
            // Through tanh: d tanh = 1 - tanh^2.
            g.data_mut()
                .iter_mut()
                .zip(acts[k].data())
                .for_each(|(gv, a)| *gv *= 1.0 - a * a);
            let input = if k == 0 { &cond.trace.input } else { &acts[k - 1] };
            match c.backward(&self.params, input, &g, grads, k > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
    }

    // ----- per-layer pieces -----

    fn actnorm_forward(&self, a: &ActNorm, h: &Image) -> (Image, f64) {
        let mut out = h.clone();
        let mut log_det = 0.0;
        for c in 0..a.channels {
            let (shift, ls) = (self.params[a.shift + c], self.params[a.log_scale + c]);
            let s = ls.exp();
            out.channel_mut(c).iter_mut().for_each(|v| *v = (*v + shift) * s);
            log_det += ls;
        }
        (out, log_det * h.plane_len() as f64)
    }

    fn actnorm_inverse(&self, a: &ActNorm, h: &Image) -> Image {
        let mut out = h.clone();
        for c in 0..a.channels {
            let (shift, ls) = (self.params[a.shift + c], self.params[a.log_scale + c]);
            let inv = (-ls).exp();
            out.channel_mut(c).iter_mut().for_each(|v| *v = *v * inv - shift);
        }
        out
    }

    fn coupling_eval(&self, step: &Step, passive: &Image, feature: &Image) -> CouplingEval {
        let input = passive.concat_channels(feature);
        let hidden = step.coupling_in.forward(&self.params, &input).map(f64::tanh);
        let raw = step.coupling_out.forward(&self.params, &hidden);
        let half = raw.channels() / 2;
        // Bounded log-scale: 2 tanh(raw / 2) lies in (-2, 2).
        let log_scale = raw.slice_channels(0, half).map(|r| 2.0 * (0.5 * r).tanh());
        let scale = log_scale.map(f64::exp);
        let shift = raw.slice_channels(half, half);
        CouplingEval {
            input,
            hidden,
            log_scale,
            scale,
            shift,
        }
    }

    /// Backpropagates gradients on the coupling's log-scale and shift into the
    /// subnet. Returns gradients for the passive half and the feature map.
    fn coupling_eval_backward(
        &self,
        step: &Step,
        eval: &CouplingEval,
        grad_log_scale: &Image,
        grad_shift: &Image,
        grads: &mut [f64],
    ) -> (Image, Image) {
        let mut grad_raw_scale = grad_log_scale.clone();
        grad_raw_scale
            .data_mut()
            .iter_mut()
            .zip(eval.log_scale.data())
            .for_each(|(g, ls)| *g *= 1.0 - 0.25 * ls * ls);
        let grad_raw = grad_raw_scale.concat_channels(grad_shift);
        let mut grad_hidden = step
            .coupling_out
            .backward(&self.params, &eval.hidden, &grad_raw, grads, true)
            .expect("input grad");
        grad_hidden
            .data_mut()
            .iter_mut()
            .zip(eval.hidden.data())
            .for_each(|(g, a)| *g *= 1.0 - a * a);
        let grad_input = step
            .coupling_in
            .backward(&self.params, &eval.input, &grad_hidden, grads, true)
            .expect("input grad");
        let half = self.config.latent_channels() / 2;
        (
            grad_input.slice_channels(0, half),
            grad_input.slice_channels(half, self.config.cond_channels),
        )
    }

    fn split(&self, h: &Image) -> (Image, Image) {
        let half = h.channels() / 2;
        (h.slice_channels(0, half), h.slice_channels(half, half))
    }

    fn coupling_forward(&self, step: &Step, h: &Image, feature: &Image) -> (Image, f64, CouplingEval) {
        let (passive, active) = self.split(h);
        let eval = self.coupling_eval(step, &passive, feature);
        let mut out_active = active;
        out_active
            .data_mut()
            .iter_mut()
            .zip(eval.scale.data().iter().zip(eval.shift.data()))
            .for_each(|(v, (s, t))| *v = *v * s + t);
        let log_det = eval.log_scale.data().iter().sum();
        (passive.concat_channels(&out_active), log_det, eval)
    }

    fn coupling_inverse(&self, step: &Step, h: &Image, feature: &Image) -> (Image, CouplingEval) {
        let (passive, active) = self.split(h);
        let eval = self.coupling_eval(step, &passive, feature);
        let mut out_active = active;
        out_active
            .data_mut()
            .iter_mut()
            .zip(eval.scale.data().iter().zip(eval.shift.data()))
            .for_each(|(v, (s, t))| *v = (*v - t) / s);
        (passive.concat_channels(&out_active), eval)
    }

    /// Applies one layer to a squeezed tensor; returns output and log-det.
    pub fn apply_layer(&self, layer: LayerId, h: &Image, cond: &Conditioning) -> Result<(Image, f64)> {
        let n = match layer {
            LayerId::ActNorm(n) | LayerId::Reverse(n) | LayerId::Coupling(n) => n,
        };
        let step = self
            .steps
            .get(n)
            .ok_or_else(|| Error::invalid("layer", format!("flow has {} steps, asked for {n}", self.steps.len())))?;
        if h.channels() != self.config.latent_channels() {
            return Err(Error::ShapeMismatch(format!("layer input has {} channels", h.channels())));
        }
        Ok(match layer {
            LayerId::ActNorm(_) => self.actnorm_forward(&step.actnorm, h),
            LayerId::Reverse(_) => (reverse_channels(h), 0.0),
            LayerId::Coupling(_) => {
                let (out, ld, _) = self.coupling_forward(step, h, &cond.features[n]);
                (out, ld)
            }
        })
    }

    // ----- forward (y -> z) -----

    fn forward_traced(&self, ys: Image, cond: &Conditioning) -> (LatentOutput, Vec<ForwardStepTrace>) {
        let mut h = ys;
        let mut traces = Vec::with_capacity(self.steps.len());
        let mut layer_log_dets = Vec::with_capacity(3 * self.steps.len());
        for (n, step) in self.steps.iter().enumerate() {
            let (a, ld_a) = self.actnorm_forward(&step.actnorm, &h);
            let r = reverse_channels(&a);
            let (out, ld_c, eval) = self.coupling_forward(step, &r, &cond.features[n]);
            layer_log_dets.push((LayerId::ActNorm(n), ld_a));
            layer_log_dets.push((LayerId::Reverse(n), 0.0));
            layer_log_dets.push((LayerId::Coupling(n), ld_c));
            traces.push(ForwardStepTrace {
                actnorm_in: h,
                coupling_in: r,
                coupling: eval,
            });
            h = out;
        }
        let log_det = layer_log_dets.iter().map(|(_, v)| v).sum();
        (
            LatentOutput {
                z: h,
                log_det,
                layer_log_dets,
            },
            traces,
        )
    }

    /// `z = flow(y; x)` with the accumulated log-determinant.
    pub fn forward(&self, y: &Image, x: &Image) -> Result<LatentOutput> {
        self.check_ready()?;
        self.check_image(y, "target")?;
        y.check_same_shape(x, "target vs condition")?;
        let cond = self.condition(x)?;
        Ok(self.forward_traced(squeeze(y)?, &cond).0)
    }

    /// Same as [`ConditionalFlow::forward`] with precomputed conditioning.
    pub fn forward_with(&self, y: &Image, cond: &Conditioning) -> Result<LatentOutput> {
        self.check_ready()?;
        self.check_image(y, "target")?;
        let ys = squeeze(y)?;
        self.check_latent(&ys, cond)?;
        Ok(self.forward_traced(ys, cond).0)
    }

    /// Negative log-likelihood of `y` given `x`, in nats per image.
    pub fn nll(&self, y: &Image, x: &Image) -> Result<f64> {
        let out = self.forward(y, x)?;
        Ok(gaussian_nll(&out.z) - out.log_det)
    }

    /// NLL and its gradient with respect to every parameter.
    pub fn nll_grad(&self, y: &Image, x: &Image) -> Result<(f64, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let nll = self.accumulate_nll_grad(y, x, 1.0, &mut grads)?;
        Ok((nll, grads))
    }

    fn nll_backward(
        &self,
        latent: &LatentOutput,
        traces: &[ForwardStepTrace],
        weight: f64,
        grads: &mut [f64],
        feature_grads: &mut [Image],
    ) {
        // d/dz of sum(z^2 / 2) is z; every log-det enters with sign -1.
        let mut g = latent.z.map(|v| weight * v);
        let ld_coef = -weight;
        for (n, (step, tr)) in self.steps.iter().zip(traces).enumerate().rev() {
            // coupling: active' = active * s + t, passive unchanged
            let half = g.channels() / 2;
            let g_passive = g.slice_channels(0, half);
            let g_active = g.slice_channels(half, half);
            let (_, active) = self.split(&tr.coupling_in);
            let ev = &tr.coupling;
            let mut g_active_in = g_active.clone();
            let mut g_log_scale = g_active.clone();
            for i in 0..g_active.len() {
                let (gv, s, a) = (g_active.data()[i], ev.scale.data()[i], active.data()[i]);
                g_active_in.data_mut()[i] = gv * s;
                g_log_scale.data_mut()[i] = gv * a * s + ld_coef;
            }
            let (g_passive_extra, g_feature) = self.coupling_eval_backward(step, ev, &g_log_scale, &g_active, grads);
            add_assign(&mut feature_grads[n], &g_feature);
            let mut g_passive_in = g_passive;
            add_assign(&mut g_passive_in, &g_passive_extra);
            let g_coupling_in = g_passive_in.concat_channels(&g_active_in);

            // reversal
            let g_actnorm_out = reverse_channels(&g_coupling_in);

            // actnorm: out = (in + shift) * exp(ls)
            let a = &step.actnorm;
            let plane = tr.actnorm_in.plane_len() as f64;
            let mut g_in = g_actnorm_out;
            for c in 0..a.channels {
                let (shift, ls) = (self.params[a.shift + c], self.params[a.log_scale + c]);
                let s = ls.exp();
                let mut g_shift = 0.0;
                let mut g_ls = 0.0;
                for (gv, x) in g_in.channel_mut(c).iter_mut().zip(tr.actnorm_in.channel(c)) {
                    let go = *gv;
                    g_shift += go * s;
                    g_ls += go * (x + shift) * s;
                    *gv = go * s;
                }
                grads[a.shift + c] += g_shift;
                grads[a.log_scale + c] += g_ls + ld_coef * plane;
            }
            g = g_in;
        }
    }

    fn zero_feature_grads(&self, cond: &Conditioning) -> Vec<Image> {
        cond.features
            .iter()
            .map(|f| Image::zeros(f.channels(), f.height(), f.width()))
            .collect()
    }

    /// Adds `weight * d nll / d params` into `grads` and returns the NLL.
    pub fn accumulate_nll_grad(&self, y: &Image, x: &Image, weight: f64, grads: &mut [f64]) -> Result<f64> {
        self.check_ready()?;
        self.check_image(y, "target")?;
        y.check_same_shape(x, "target vs condition")?;
        self.check_grads(grads)?;
        let cond = self.condition(x)?;
        let mut feature_grads = self.zero_feature_grads(&cond);
        let nll = self.nll_into(y, &cond, weight, grads, &mut feature_grads)?;
        self.encoder_backward(&cond, &feature_grads, grads);
        Ok(nll)
    }

    fn nll_into(
        &self,
        y: &Image,
        cond: &Conditioning,
        weight: f64,
        grads: &mut [f64],
        feature_grads: &mut [Image],
    ) -> Result<f64> {
        let (latent, traces) = self.forward_traced(squeeze(y)?, cond);
        let nll = gaussian_nll(&latent.z) - latent.log_det;
        self.nll_backward(&latent, &traces, weight, grads, feature_grads);
        Ok(nll)
    }

    fn check_grads(&self, grads: &[f64]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient buffer has {} entries for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        Ok(())
    }

    // ----- inverse (z -> y) -----

    fn inverse_traced(&self, z: &Image, cond: &Conditioning) -> (Image, Vec<InverseStepTrace>) {
        let mut h = z.clone();
        let mut traces: Vec<InverseStepTrace> = Vec::with_capacity(self.steps.len());
        for (n, step) in self.steps.iter().enumerate().rev() {
            let (c_in, eval) = self.coupling_inverse(step, &h, &cond.features[n]);
            let a_out = reverse_channels(&c_in);
            let a_in = self.actnorm_inverse(&step.actnorm, &a_out);
            traces.push(InverseStepTrace {
                actnorm_out: a_out,
                coupling_out: h,
                coupling: eval,
            });
            h = a_in;
        }
        traces.reverse();
        (h, traces)
    }

    /// `y = flow^-1(z; x)`.
    pub fn inverse(&self, z: &Image, x: &Image) -> Result<Image> {
        self.check_ready()?;
        let cond = self.condition(x)?;
        self.inverse_with(z, &cond)
    }

    pub fn inverse_with(&self, z: &Image, cond: &Conditioning) -> Result<Image> {
        self.check_ready()?;
        self.check_latent(z, cond)?;
        unsqueeze(&self.inverse_traced(z, cond).0)
    }

    /// Backpropagates `grad_y` (on the unsqueezed inverse output) to the
    /// parameters along the inverse path.
    fn inverse_backward(
        &self,
        traces: &[InverseStepTrace],
        grad_ys: Image,
        grads: &mut [f64],
        feature_grads: &mut [Image],
    ) {
        let mut g = grad_ys;
        for (n, (step, tr)) in self.steps.iter().zip(traces).enumerate() {
            // actnorm inverse: in = out * exp(-ls) - shift
            let a = &step.actnorm;
            let mut g_out = g;
            for c in 0..a.channels {
                let ls = self.params[a.log_scale + c];
                let inv = (-ls).exp();
                let mut g_shift = 0.0;
                let mut g_ls = 0.0;
                for (gv, o) in g_out.channel_mut(c).iter_mut().zip(tr.actnorm_out.channel(c)) {
                    let gi = *gv;
                    g_shift -= gi;
                    g_ls -= gi * o * inv;
                    *gv = gi * inv;
                }
                grads[a.shift + c] += g_shift;
                grads[a.log_scale + c] += g_ls;
            }

            let g_c_in = reverse_channels(&g_out);

            // coupling inverse: active_in = (active_out - t) / s
            let half = g_c_in.channels() / 2;
            let g_passive = g_c_in.slice_channels(0, half);
            let g_active_in = g_c_in.slice_channels(half, half);
            let (_, active_out) = self.split(&tr.coupling_out);
            let ev = &tr.coupling;
            let mut g_active_out = g_active_in.clone();
            let mut g_shift = g_active_in.clone();
            let mut g_log_scale = g_active_in.clone();
            for i in 0..g_active_in.len() {
                let gi = g_active_in.data()[i];
                let s = ev.scale.data()[i];
                let active_in = (active_out.data()[i] - ev.shift.data()[i]) / s;
                g_active_out.data_mut()[i] = gi / s;
                g_shift.data_mut()[i] = -gi / s;
                g_log_scale.data_mut()[i] = -gi * active_in;
            }
            let (g_passive_extra, g_feature) = self.coupling_eval_backward(step, ev, &g_log_scale, &g_shift, grads);
            add_assign(&mut feature_grads[n], &g_feature);
            let mut g_passive_out = g_passive;
            add_assign(&mut g_passive_out, &g_passive_extra);
            g = g_passive_out.concat_channels(&g_active_out);
        }
    }

    /// Adds `weight * dL/dparams` for a loss `L` on the inverse output
    /// `inverse(z; x)`; `loss` maps the output image to `(value, dL/dy)`.
    pub fn accumulate_inverse_grad<F>(
        &self,
        z: &Image,
        x: &Image,
        weight: f64,
        grads: &mut [f64],
        loss: F,
    ) -> Result<f64>
    where
        F: FnOnce(&Image) -> Result<(f64, Image)>,
    {
        self.check_ready()?;
        self.check_grads(grads)?;
        let cond = self.condition(x)?;
        let mut feature_grads = self.zero_feature_grads(&cond);
        let value = self.inverse_into(z, &cond, weight, grads, &mut feature_grads, loss)?;
        self.encoder_backward(&cond, &feature_grads, grads);
        Ok(value)
    }

    fn inverse_into<F>(
        &self,
        z: &Image,
        cond: &Conditioning,
        weight: f64,
        grads: &mut [f64],
        feature_grads: &mut [Image],
        loss: F,
    ) -> Result<f64>
    where
        F: FnOnce(&Image) -> Result<(f64, Image)>,
    {
        self.check_latent(z, cond)?;
        let (ys, traces) = self.inverse_traced(z, cond);
        let y = unsqueeze(&ys)?;
        let (value, grad_y) = loss(&y)?;
        y.check_same_shape(&grad_y, "loss gradient")?;
        let grad_ys = squeeze(&grad_y.map(|g| weight * g))?;
        self.inverse_backward(&traces, grad_ys, grads, feature_grads);
        Ok(value)
    }

    /// Joint gradient for one training pair: `nll(y | x)` on the forward
    /// path plus `weight_inverse * L(inverse(0; x))` on the inverse path,
    /// sharing one encoder pass. Returns `(nll, L)`.
    pub fn accumulate_joint_grad<F>(
        &self,
        y: &Image,
        x: &Image,
        weight_inverse: f64,
        grads: &mut [f64],
        loss: F,
    ) -> Result<(f64, f64)>
    where
        F: FnOnce(&Image) -> Result<(f64, Image)>,
    {
        self.check_ready()?;
        self.check_image(y, "target")?;
        y.check_same_shape(x, "target vs condition")?;
        self.check_grads(grads)?;
        let cond = self.condition(x)?;
        let mut feature_grads = self.zero_feature_grads(&cond);
        let nll = self.nll_into(y, &cond, 1.0, grads, &mut feature_grads)?;
        let z = self.zero_latent(&cond);
        let value = self.inverse_into(&z, &cond, weight_inverse, grads, &mut feature_grads, loss)?;
        self.encoder_backward(&cond, &feature_grads, grads);
        Ok((nll, value))
    }

    fn zero_latent(&self, cond: &Conditioning) -> Image {
        Image::zeros(
            self.config.latent_channels(),
            cond.trace.input.height(),
            cond.trace.input.width(),
        )
    }

    /// Restores `x` by inverting the latent `tau * eps`, `eps ~ N(0, I)`.
    /// `tau = 0` gives the deterministic mode and draws nothing from `rng`.
    pub fn enhance(&self, x: &Image, tau: f64, rng: &mut impl Rng) -> Result<Image> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::invalid("tau", format!("temperature must be finite and >= 0, got {tau}")));
        }
        self.check_ready()?;
        let cond = self.condition(x)?;
        let mut z = self.zero_latent(&cond);
        if tau > 0.0 {
            for v in z.data_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v = tau * e;
            }
        }
        self.inverse_with(&z, &cond)
    }

    /// Zero-temperature restoration.
    pub fn enhance_mode(&self, x: &Image) -> Result<Image> {
        self.check_ready()?;
        let cond = self.condition(x)?;
        let z = self.zero_latent(&cond);
        self.inverse_with(&z, &cond)
    }

    /// Data-dependent actnorm initialization.
    ///
    /// Layers are initialized in order: each one sees the batch propagated
    /// through the already-initialized layers before it, and gets
    /// `shift = -mean`, `log_scale = -ln(max(std, 1e-6))` per channel.
    pub fn init_actnorm(&mut self, batch: &[(Image, Image)]) -> Result<()> {
        if self.initialized && !self.steps.is_empty() {
            return Err(Error::AlreadyInitialized);
        }
        if batch.is_empty() {
            return Err(Error::Empty("actnorm initialization batch"));
        }
        let mut states = Vec::with_capacity(batch.len());
        for (y, x) in batch {
            self.check_image(y, "target")?;
            y.check_same_shape(x, "target vs condition")?;
            states.push((squeeze(y)?, self.condition(x)?));
        }
        for n in 0..self.steps.len() {
            let step = self.steps[n];
            let a = step.actnorm;
            for c in 0..a.channels {
                let count: usize = states.iter().map(|(h, _)| h.plane_len()).sum();
                let mean = states.iter().map(|(h, _)| h.channel(c).iter().sum::<f64>()).sum::<f64>() / count as f64;
                let var = states
                    .iter()
                    .map(|(h, _)| h.channel(c).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                    .sum::<f64>()
                    / count as f64;
                let std = var.sqrt().max(ACTNORM_STD_FLOOR);
                self.params[a.shift + c] = -mean;
                self.params[a.log_scale + c] = -std.ln();
            }
            for (h, cond) in states.iter_mut() {
                let (an, _) = self.actnorm_forward(&a, h);
                let r = reverse_channels(&an);
                let (out, _, _) = self.coupling_forward(&step, &r, &cond.features[n]);
                *h = out;
            }
        }
        self.initialized = true;
        Ok(())
    }
}

fn add_assign(dst: &mut Image, src: &Image) {
    dst.data_mut().iter_mut().zip(src.data()).for_each(|(a, b)| *a += b);
}

/// `sum(z^2 / 2) + D * log(2 pi) / 2`: negative log-density of a standard normal.
pub fn gaussian_nll(z: &Image) -> f64 {
    z.data().iter().map(|v| 0.5 * v * v).sum::<f64>() + HALF_LOG_TWO_PI * z.len() as f64
}

/// `(C, H, W) -> (4C, H/2, W/2)`; channel `4c + 2dy + dx` holds pixel
/// `(2i + dy, 2j + dx)` of channel `c`.
pub fn squeeze(img: &Image) -> Result<Image> {
    let (c, h, w) = img.shape();
    let f = SQUEEZE_FACTOR;
    if h % f != 0 || w % f != 0 {
        return Err(Error::ShapeMismatch(format!("{h}x{w} is not divisible by {f}")));
    }
    let (oh, ow) = (h / f, w / f);
    let mut out = Image::zeros(c * f * f, oh, ow);
    for ch in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                let oc = ch * f * f + dy * f + dx;
                for i in 0..oh {
                    for j in 0..ow {
                        out.set(oc, i, j, img.get(ch, i * f + dy, j * f + dx));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`squeeze`].
pub fn unsqueeze(img: &Image) -> Result<Image> {
    let (c, h, w) = img.shape();
    let f = SQUEEZE_FACTOR;
    if c % (f * f) != 0 {
        return Err(Error::ShapeMismatch(format!("{c} channels cannot be unsqueezed")));
    }
    let oc = c / (f * f);
    let mut out = Image::zeros(oc, h * f, w * f);
    for ch in 0..oc {
        for dy in 0..f {
            for dx in 0..f {
                let ic = ch * f * f + dy * f + dx;
                for i in 0..h {
                    for j in 0..w {
                        out.set(ch, i * f + dy, j * f + dx, img.get(ic, i, j));
                    }
                }
            }
        }
    }
    Ok(out)
}

fn reverse_channels(img: &Image) -> Image {
    let c = img.channels();
    let n = img.plane_len();
    let mut out = Image::zeros(c, img.height(), img.width());
    for k in 0..c {
        out.data_mut()[k * n..(k + 1) * n].copy_from_slice(img.channel(c - 1 - k));
    }
    out
}

#[cfg(test)]
mod tests;
