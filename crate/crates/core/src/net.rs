//! Small fully-convolutional per-pixel classifier with exact reverse-mode
//! gradients, plus Adam (optionally rectified) and the warm-up/cosine
//! learning-rate schedule.
//!
//! Layout: activations are channel-major (`[channel][row][col]`); the
//! network output is a pixel-major [`ProbMap`]. Every hidden layer is a
//! zero-padded `k × k` convolution followed by ReLU; the last layer feeds
//! a per-pixel softmax.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, Image, ProbMap, RngState};

/// Logits are clamped to `±LOGIT_CLAMP` before the softmax so every
/// probability stays strictly inside `(0, 1)`.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite values in {tensor}")]
    NumericalFailure { tensor: String },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Fixed small architecture: `1 → hidden[0] → … → classes` channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub kernel: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: vec![8, 16],
            classes: 2,
            kernel: 3,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.classes < 2 {
            return Err(NetError::InvalidArgument("need at least 2 classes".into()));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(NetError::InvalidArgument(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        if self.hidden.contains(&0) {
            return Err(NetError::InvalidArgument("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// `(in, out)` channels of each conv layer.
    pub fn layer_channels(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![1];
        widths.extend(&self.hidden);
        widths.push(self.classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Network weights θ: per conv layer a `[out, in, k, k]` kernel and an
/// `[out]` bias, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    arch: ArchConfig,
    tensors: Vec<ParamTensor>,
}

impl NetworkParams {
    pub fn zeros(arch: &ArchConfig) -> Result<Self, NetError> {
        arch.validate()?;
        let k = arch.kernel;
        let mut tensors = Vec::new();
        for (i, (cin, cout)) in arch.layer_channels().into_iter().enumerate() {
            tensors.push(ParamTensor {
                name: format!("conv{i}.weight"),
                shape: vec![cout, cin, k, k],
                data: vec![0.0; cout * cin * k * k],
            });
            tensors.push(ParamTensor {
                name: format!("conv{i}.bias"),
                shape: vec![cout],
                data: vec![0.0; cout],
            });
        }
        Ok(NetworkParams {
            arch: arch.clone(),
            tensors,
        })
    }

    /// Glorot-uniform kernels, zero biases.
    pub fn init(arch: &ArchConfig, rng: &mut RngState) -> Result<Self, NetError> {
        let mut params = Self::zeros(arch)?;
        let k2 = arch.kernel * arch.kernel;
        for (layer, (cin, cout)) in arch.layer_channels().into_iter().enumerate() {
            let bound = (6.0 / ((cin + cout) * k2) as f64).sqrt();
            for v in &mut params.tensors[2 * layer].data {
                *v = rng.gen_range(-bound, bound);
            }
        }
        Ok(params)
    }

    /// Rebuilds parameters from named tensors, checking them against `arch`.
    pub fn from_tensors(arch: &ArchConfig, tensors: Vec<ParamTensor>) -> Result<Self, NetError> {
        let reference = Self::zeros(arch)?;
        if reference.tensors.len() != tensors.len() {
            return Err(NetError::InvalidArgument(format!(
                "expected {} tensors, got {}",
                reference.tensors.len(),
                tensors.len()
            )));
        }
        for (want, got) in reference.tensors.iter().zip(&tensors) {
            if want.name != got.name || want.shape != got.shape || got.data.len() != want.data.len() {
                return Err(NetError::InvalidArgument(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
            if got.data.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NumericalFailure {
                    tensor: got.name.clone(),
                });
            }
        }
        Ok(NetworkParams {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn same_layout(&self, other: &NetworkParams) -> bool {
        self.arch == other.arch
    }

    /// Deterministic forward pass keeping every intermediate needed by
    /// [`NetworkParams::backward`].
    pub fn forward(&self, x: &Image) -> Result<ForwardPass, NetError> {
        if !x.is_finite() {
            return Err(NetError::NumericalFailure {
                tensor: "input".into(),
            });
        }
        let (h, w) = x.shape();
        let plane = h * w;
        let k = self.arch.kernel;
        let layers = self.arch.layer_channels();
        let mut layer_inputs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
        let mut pre_acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
        let mut current = x.as_slice().to_vec();
        for (li, &(cin, cout)) in layers.iter().enumerate() {
            let weight = &self.tensors[2 * li].data;
            let bias = &self.tensors[2 * li + 1].data;
            let out = conv_forward(&current, cin, cout, h, w, k, weight, bias);
            let last = li + 1 == layers.len();
            let next = if last {
                Vec::new()
            } else {
                out.iter().map(|&v| v.max(0.0)).collect()
            };
            layer_inputs.push(std::mem::replace(&mut current, next));
            pre_acts.push(out);
        }
        let logits = pre_acts.last().expect("at least one layer");
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NumericalFailure {
                tensor: "logits".into(),
            });
        }
        let classes = self.arch.classes;
        let mut probs = vec![0.0; plane * classes];
        for i in 0..plane {
            let z = |c: usize| logits[c * plane + i].clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            let max = (0..classes).map(z).fold(f64::NEG_INFINITY, f64::max);
            let row = &mut probs[i * classes..(i + 1) * classes];
            let mut total = 0.0;
            for (c, slot) in row.iter_mut().enumerate() {
                *slot = (z(c) - max).exp();
                total += *slot;
            }
            for slot in row.iter_mut() {
                *slot /= total;
            }
        }
        Ok(ForwardPass {
            height: h,
            width: w,
            layer_inputs,
            pre_acts,
            probs: ProbMap::new_unchecked(h, w, classes, probs)?,
        })
    }

    /// Output distribution only.
    pub fn predict(&self, x: &Image) -> Result<ProbMap, NetError> {
        Ok(self.forward(x)?.probs)
    }

    /// Reverse-mode gradients of a scalar loss whose derivative with respect
    /// to the output probabilities is `d_prob` (pixel-major, like the
    /// [`ProbMap`]). Optionally also returns the gradient with respect to the
    /// input image.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_prob: &[f64],
        want_input_grad: bool,
    ) -> Result<Gradients, NetError> {
        let (h, w) = (pass.height, pass.width);
        let plane = h * w;
        let classes = self.arch.classes;
        if d_prob.len() != plane * classes {
            return Err(NetError::InvalidArgument(format!(
                "output adjoint has {} values, expected {}",
                d_prob.len(),
                plane * classes
            )));
        }
        let logits = pass.pre_acts.last().expect("at least one layer");
        let probs = pass.probs.as_slice();
        let mut d_out = vec![0.0; plane * classes];
        for i in 0..plane {
            let p = &probs[i * classes..(i + 1) * classes];
            let a = &d_prob[i * classes..(i + 1) * classes];
            let s: f64 = p.iter().zip(a).map(|(p, a)| p * a).sum();
            for c in 0..classes {
                let z = logits[c * plane + i];
                if z.abs() <= LOGIT_CLAMP {
                    d_out[c * plane + i] = p[c] * (a[c] - s);
                }
            }
        }

        let k = self.arch.kernel;
        let layers = self.arch.layer_channels();
        let mut grads = GradientSet::zeros_like(self);
        let mut input_grad = None;
        for li in (0..layers.len()).rev() {
            let (cin, cout) = layers[li];
            let weight = &self.tensors[2 * li].data;
            let input = &pass.layer_inputs[li];
            let (dw, db) = grads.pair_mut(li);
            conv_backward_params(input, &d_out, cin, cout, h, w, k, dw, db);
            if li == 0 && !want_input_grad {
                break;
            }
            let mut d_in = conv_backward_input(&d_out, weight, cin, cout, h, w, k);
            if li == 0 {
                input_grad = Some(Image::from_vec(h, w, d_in)?);
                break;
            }
            for (g, &z) in d_in.iter_mut().zip(&pass.pre_acts[li - 1]) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
            d_out = d_in;
        }
        for (t, g) in self.tensors.iter().zip(&grads.grads) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NumericalFailure {
                    tensor: t.name.clone(),
                });
            }
        }
        if let Some(g) = &input_grad {
            if !g.is_finite() {
                return Err(NetError::NumericalFailure {
                    tensor: "input".into(),
                });
            }
        }
        Ok(Gradients {
            params: grads,
            input: input_grad,
        })
    }
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    height: usize,
    width: usize,
    layer_inputs: Vec<Vec<f64>>,
    pre_acts: Vec<Vec<f64>>,
    pub probs: ProbMap,
}

impl ForwardPass {
    pub fn into_probs(self) -> ProbMap {
        self.probs
    }

    /// Which hidden units are active (`z > 0`). Two passes with equal
    /// patterns lie on the same smooth piece of the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let hidden = &self.pre_acts[..self.pre_acts.len() - 1];
        hidden.iter().flatten().map(|&z| z > 0.0).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: GradientSet,
    pub input: Option<Image>,
}

/// One gradient buffer per parameter tensor, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    grads: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        GradientSet {
            grads: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.grads
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.grads
    }

    fn pair_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let (a, b) = self.grads.split_at_mut(2 * layer + 1);
        (&mut a[2 * layer], &mut b[0])
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        assert_eq!(self.grads.len(), other.grads.len(), "gradient layout mismatch");
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.grads.iter_mut().flatten() {
            *v *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flatten().copied().collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let plane = h * w;
    let half = k / 2;
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for i in 0..cin {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let (r0, r1) = valid_range(ky, half, h);
                for kx in 0..k {
                    let wv = weight[((o * cin + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (c0, c1) = valid_range(kx, half, w);
                    for r in r0..r1 {
                        let src_r = r + ky - half;
                        let dst = &mut out_plane[r * w + c0..r * w + c1];
                        let src = &in_plane[src_r * w + c0 + kx - half..src_r * w + c1 + kx - half];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_params(
    input: &[f64],
    d_out: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) {
    let plane = h * w;
    let half = k / 2;
    for o in 0..cout {
        let g_plane = &d_out[o * plane..(o + 1) * plane];
        d_bias[o] += g_plane.iter().sum::<f64>();
        for i in 0..cin {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let (r0, r1) = valid_range(ky, half, h);
                for kx in 0..k {
                    let (c0, c1) = valid_range(kx, half, w);
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        let src_r = r + ky - half;
                        let g = &g_plane[r * w + c0..r * w + c1];
                        let s = &in_plane[src_r * w + c0 + kx - half..src_r * w + c1 + kx - half];
                        acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    d_weight[((o * cin + i) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

fn conv_backward_input(
    d_out: &[f64],
    weight: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<f64> {
    let plane = h * w;
    let half = k / 2;
    let mut d_in = vec![0.0; cin * plane];
    for o in 0..cout {
        let g_plane = &d_out[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let dst_plane = &mut d_in[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let (r0, r1) = valid_range(ky, half, h);
                for kx in 0..k {
                    let wv = weight[((o * cin + i) * k + ky) * k + kx];
                    let (c0, c1) = valid_range(kx, half, w);
                    for r in r0..r1 {
                        let src_r = r + ky - half;
                        let g = &g_plane[r * w + c0..r * w + c1];
                        let d = &mut dst_plane[src_r * w + c0 + kx - half..src_r * w + c1 + kx - half];
                        for (dv, gv) in d.iter_mut().zip(g) {
                            *dv += wv * gv;
                        }
                    }
                }
            }
        }
    }
    d_in
}

/// Output positions `[lo, hi)` whose tap at kernel offset `t` stays inside
/// a dimension of length `n`.
fn valid_range(t: usize, half: usize, n: usize) -> (usize, usize) {
    let lo = half.saturating_sub(t);
    let hi = (n + half).saturating_sub(t).min(n);
    (lo, hi.max(lo))
}

/// Linear warm-up from 0 to `peak`, then cosine decay to `floor` at `total`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            peak: lr,
            floor: lr,
            warmup_steps: 0,
            total_steps: 1,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return self.floor;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.floor + (self.peak - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Variance rectification (RAdam).
    pub rectified: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            rectified: false,
        }
    }
}

/// Adam moments plus the learning-rate schedule.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: u64,
    pub config: AdamConfig,
    pub schedule: LrSchedule,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &NetworkParams, config: AdamConfig, schedule: LrSchedule) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        OptimizerState {
            step: 0,
            config,
            schedule,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update at the scheduled learning rate for the
    /// incremented step count. Returns the learning rate used.
    pub fn apply(&mut self, params: &mut NetworkParams, grads: &GradientSet) -> Result<f64, NetError> {
        if grads.grads.len() != params.tensors.len()
            || grads
                .grads
                .iter()
                .zip(&params.tensors)
                .any(|(g, t)| g.len() != t.data.len())
            || self.m.len() != params.tensors.len()
        {
            return Err(NetError::InvalidArgument(
                "gradient / optimizer state shape mismatch".into(),
            ));
        }
        self.step += 1;
        let t = self.step as f64;
        let lr = self.schedule.lr_at(self.step);
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            rectified,
        } = self.config;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        let rect = if rectified {
            let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
            let rho_t = rho_inf - 2.0 * t * beta2.powf(t) / bc2;
            (rho_t > 4.0).then(|| {
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
            })
        } else {
            Some(1.0)
        };
        for ((tensor, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(&grads.grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..g.len() {
                let gj = g[j] + weight_decay * tensor.data[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                tensor.data[j] -= match rect {
                    Some(r) => lr * r * m_hat / ((v[j] / bc2).sqrt() + eps),
                    // Early RAdam steps fall back to momentum SGD.
                    None => lr * m_hat,
                };
            }
        }
        Ok(lr)
    }
}
