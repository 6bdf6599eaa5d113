//! Two-head encoder/decoder with hand-written backward pass, Adam and the
//! EMA teacher update.
//!
//! Topology for base width `W` and `C` input channels:
//!
//! ```text
//! enc1  conv3x3 C->W  relu            (h,   w)
//!       avgpool 2x2                    (h/2, w/2)
//! enc2  conv3x3 W->2W relu             (h/2, w/2)
//!       avgpool 2x2                    (h/4, w/4)
//! dec1  upsample, conv3x3 2W->W relu   (h/2, w/2)
//! dec2  upsample + enc1 skip, conv3x3 W->W relu  (h, w)
//! np    conv1x1 W->2, softmax
//! hv    conv1x1 W->2, tanh
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            width: 8,
        }
    }
}

impl ModelConfig {
    fn layer_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (c, w) = (self.in_channels, self.width);
        vec![
            ("enc1.weight", vec![w, c, 3, 3]),
            ("enc1.bias", vec![w]),
            ("enc2.weight", vec![2 * w, w, 3, 3]),
            ("enc2.bias", vec![2 * w]),
            ("dec1.weight", vec![w, 2 * w, 3, 3]),
            ("dec1.bias", vec![w]),
            ("dec2.weight", vec![w, w, 3, 3]),
            ("dec2.bias", vec![w]),
            ("np.weight", vec![2, w]),
            ("np.bias", vec![2]),
            ("hv.weight", vec![2, w]),
            ("hv.bias", vec![2]),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.width == 0 {
            return Err(Error::InvalidParam(format!("empty model config {self:?}")));
        }
        Ok(())
    }
}

// Slot indices into ModelParams::tensors, in `layer_shapes` order.
const ENC1_W: usize = 0;
const ENC1_B: usize = 1;
const ENC2_W: usize = 2;
const ENC2_B: usize = 3;
const DEC1_W: usize = 4;
const DEC1_B: usize = 5;
const DEC2_W: usize = 6;
const DEC2_B: usize = 7;
const NP_W: usize = 8;
const NP_B: usize = 9;
const HV_W: usize = 10;
const HV_B: usize = 11;

/// Ordered named weight tensors. Gradients and optimizer moments share this
/// type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        Ok(Self {
            config,
            names: shapes.iter().map(|(n, _)| n.to_string()).collect(),
            tensors: shapes.iter().map(|(_, d)| Tensor::zeros(d)).collect(),
        })
    }

    /// He-normal kernels for the ReLU layers, LeCun-normal for the 1x1
    /// output heads (they feed softmax/tanh), zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in p.names.iter().zip(p.tensors.iter_mut()) {
            if name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = t.dims()[1..].iter().product();
            let gain = if name == "np.weight" || name == "hv.weight" { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt())
                .map_err(|e| Error::InvalidParam(e.to_string()))?;
            for v in t.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.dims())).collect(),
        }
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn check_compatible(&self, other: &ModelParams) -> Result<()> {
        if self.names != other.names
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.dims() != b.dims())
        {
            return Err(Error::Shape("parameter sets have different shapes".into()));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ModelParams) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    input: Vec<f64>,
    a1: Vec<f64>,
    p1: Vec<f64>,
    a2: Vec<f64>,
    u1: Vec<f64>,
    a3: Vec<f64>,
    u2: Vec<f64>,
    a4: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[2, h, w]`, softmax over the channel axis.
    pub np_probs: Tensor,
    /// `[2, h, w]` in `[-1, 1]`.
    pub hv: Tensor,
    pub cache: Option<ForwardCache>,
}

impl ForwardOutput {
    /// Consistency feature stack `[np0, np1, hv_h, hv_v]`.
    pub fn features(&self) -> Tensor {
        let mut data = self.np_probs.data().to_vec();
        data.extend_from_slice(self.hv.data());
        let (h, w) = self.hv.plane_dims();
        Tensor::new(vec![4, h, w], data).expect("feature stack dims")
    }

    /// Foreground probability plane.
    pub fn boundary_map(&self) -> Tensor {
        self.np_probs.channel(1).expect("np has two channels")
    }

    pub fn drop_cache(mut self) -> Self {
        self.cache = None;
        self
    }
}

fn conv3x3(input: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let cout = bias.len();
    let hw = h * w;
    let mut out = vec![0.0; cout * hw];
    for o in 0..cout {
        let plane = &mut out[o * hw..(o + 1) * hw];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let src = &input[i * hw..(i + 1) * hw];
            for dr in 0..3 {
                for dc in 0..3 {
                    let k = weight[((o * cin + i) * 3 + dr) * 3 + dc];
                    if k == 0.0 {
                        continue;
                    }
                    let c0 = usize::from(dc == 0);
                    let c1 = if dc == 2 { w - 1 } else { w };
                    for r in 0..h {
                        let rr = r as isize + dr as isize - 1;
                        if rr < 0 || rr >= h as isize {
                            continue;
                        }
                        let rr = rr as usize;
                        let dst = &mut plane[r * w + c0..r * w + c1];
                        let s = &src[rr * w + c0 + dc - 1..rr * w + c1 + dc - 1];
                        for (d, x) in dst.iter_mut().zip(s) {
                            *d += k * x;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates kernel and bias gradients, and the input gradient when
/// `grad_in` is given.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let cout = grad_b.len();
    let hw = h * w;
    for o in 0..cout {
        let g = &grad_out[o * hw..(o + 1) * hw];
        grad_b[o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = &input[i * hw..(i + 1) * hw];
            for dr in 0..3 {
                for dc in 0..3 {
                    let widx = ((o * cin + i) * 3 + dr) * 3 + dc;
                    let k = weight[widx];
                    let c0 = usize::from(dc == 0);
                    let c1 = if dc == 2 { w - 1 } else { w };
                    let mut acc = 0.0;
                    for r in 0..h {
                        let rr = r as isize + dr as isize - 1;
                        if rr < 0 || rr >= h as isize {
                            continue;
                        }
                        let rr = rr as usize;
                        let gs = &g[r * w + c0..r * w + c1];
                        let lo = rr * w + c0 + dc - 1;
                        let s = &src[lo..lo + gs.len()];
                        acc += gs.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let dst = &mut gi[i * hw + lo..i * hw + lo + gs.len()];
                            for (d, x) in dst.iter_mut().zip(gs) {
                                *d += k * x;
                            }
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
}

fn conv1x1(input: &[f64], cin: usize, hw: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let cout = bias.len();
    let mut out = vec![0.0; cout * hw];
    for o in 0..cout {
        let plane = &mut out[o * hw..(o + 1) * hw];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let k = weight[o * cin + i];
            for (d, x) in plane.iter_mut().zip(&input[i * hw..(i + 1) * hw]) {
                *d += k * x;
            }
        }
    }
    out
}

fn conv1x1_backward(
    input: &[f64],
    cin: usize,
    hw: usize,
    weight: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    grad_in: &mut [f64],
) {
    for o in 0..grad_b.len() {
        let g = &grad_out[o * hw..(o + 1) * hw];
        grad_b[o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = &input[i * hw..(i + 1) * hw];
            grad_w[o * cin + i] += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
            let k = weight[o * cin + i];
            for (d, x) in grad_in[i * hw..(i + 1) * hw].iter_mut().zip(g) {
                *d += k * x;
            }
        }
    }
}

fn relu_inplace(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Zeroes gradient entries where the (post-activation) value is not positive.
fn relu_backward(grad: &mut [f64], activ: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activ) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn avg_pool(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for k in 0..c {
        for r in 0..ho {
            for q in 0..wo {
                let b = k * h * w + 2 * r * w + 2 * q;
                out[(k * ho + r) * wo + q] =
                    0.25 * (input[b] + input[b + 1] + input[b + w] + input[b + w + 1]);
            }
        }
    }
    out
}

fn avg_pool_backward(grad_out: &[f64], c: usize, h: usize, w: usize, grad_in: &mut [f64]) {
    let (ho, wo) = (h / 2, w / 2);
    for k in 0..c {
        for r in 0..ho {
            for q in 0..wo {
                let g = 0.25 * grad_out[(k * ho + r) * wo + q];
                let b = k * h * w + 2 * r * w + 2 * q;
                grad_in[b] += g;
                grad_in[b + 1] += g;
                grad_in[b + w] += g;
                grad_in[b + w + 1] += g;
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling from `(h, w)` to `(2h, 2w)`.
fn upsample(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * ho * wo];
    for k in 0..c {
        for r in 0..ho {
            for q in 0..wo {
                out[(k * ho + r) * wo + q] = input[(k * h + r / 2) * w + q / 2];
            }
        }
    }
    out
}

/// Adjoint of `upsample`: sums each 2x2 block. `(h, w)` is the coarse size.
fn upsample_backward(grad_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h * w];
    for k in 0..c {
        for r in 0..ho {
            for q in 0..wo {
                out[(k * h + r / 2) * w + q / 2] += grad_out[(k * ho + r) * wo + q];
            }
        }
    }
    out
}

fn check_input(params: &ModelParams, image: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = image.plane_dims();
    if image.channels() != params.config.in_channels {
        return Err(Error::Shape(format!(
            "model expects {} input channels, got {}",
            params.config.in_channels,
            image.channels()
        )));
    }
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::IndivisibleInput { height: h, width: w });
    }
    Ok((h, w))
}

/// Forward pass keeping the activation cache.
pub fn forward(params: &ModelParams, image: &Tensor) -> Result<ForwardOutput> {
    run_forward(params, image, true)
}

/// Forward pass without a cache, for the teacher and evaluation.
pub fn predict(params: &ModelParams, image: &Tensor) -> Result<ForwardOutput> {
    run_forward(params, image, false)
}

fn run_forward(params: &ModelParams, image: &Tensor, keep: bool) -> Result<ForwardOutput> {
    let (h, w) = check_input(params, image)?;
    let cfg = params.config;
    let (wd, cin) = (cfg.width, cfg.in_channels);
    let t = &params.tensors;
    let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);

    let mut a1 = conv3x3(image.data(), cin, h, w, t[ENC1_W].data(), t[ENC1_B].data());
    relu_inplace(&mut a1);
    let p1 = avg_pool(&a1, wd, h, w);
    let mut a2 = conv3x3(&p1, wd, h2, w2, t[ENC2_W].data(), t[ENC2_B].data());
    relu_inplace(&mut a2);
    let p2 = avg_pool(&a2, 2 * wd, h2, w2);
    let u1 = upsample(&p2, 2 * wd, h4, w4);
    let mut a3 = conv3x3(&u1, 2 * wd, h2, w2, t[DEC1_W].data(), t[DEC1_B].data());
    relu_inplace(&mut a3);
    let mut u2 = upsample(&a3, wd, h2, w2);
    for (u, a) in u2.iter_mut().zip(&a1) {
        *u += a;
    }
    let mut a4 = conv3x3(&u2, wd, h, w, t[DEC2_W].data(), t[DEC2_B].data());
    relu_inplace(&mut a4);

    let hw = h * w;
    let logits = conv1x1(&a4, wd, hw, t[NP_W].data(), t[NP_B].data());
    let mut np = vec![0.0; 2 * hw];
    for i in 0..hw {
        let (l0, l1) = (logits[i], logits[hw + i]);
        let m = l0.max(l1);
        let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
        let z = e0 + e1;
        np[i] = e0 / z;
        np[hw + i] = e1 / z;
    }
    let mut hv = conv1x1(&a4, wd, hw, t[HV_W].data(), t[HV_B].data());
    hv.iter_mut().for_each(|v| *v = v.tanh());

    let cache = keep.then(|| ForwardCache {
        input: image.data().to_vec(),
        a1,
        p1,
        a2,
        u1,
        a3,
        u2,
        a4,
    });
    Ok(ForwardOutput {
        np_probs: Tensor::new(vec![2, h, w], np)?,
        hv: Tensor::new(vec![2, h, w], hv)?,
        cache,
    })
}

/// Reverse-mode gradients of a scalar loss given its gradients with respect
/// to the NP probabilities and the HV map.
pub fn backward(
    params: &ModelParams,
    output: &ForwardOutput,
    grad_np: &Tensor,
    grad_hv: &Tensor,
) -> Result<ModelParams> {
    let cache = output.cache.as_ref().ok_or(Error::MissingCache)?;
    grad_np.same_dims(&output.np_probs)?;
    grad_hv.same_dims(&output.hv)?;
    let cfg = params.config;
    let (wd, cin) = (cfg.width, cfg.in_channels);
    let (h, w) = output.hv.plane_dims();
    let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
    let hw = h * w;
    let t = &params.tensors;
    let mut grads = params.zeros_like();
    let g = &mut grads.tensors;

    let p = output.np_probs.data();
    let gp = grad_np.data();
    let mut g_logits = vec![0.0; 2 * hw];
    for i in 0..hw {
        let dot = p[i] * gp[i] + p[hw + i] * gp[hw + i];
        g_logits[i] = p[i] * (gp[i] - dot);
        g_logits[hw + i] = p[hw + i] * (gp[hw + i] - dot);
    }
    let g_hv_pre: Vec<f64> = grad_hv
        .data()
        .iter()
        .zip(output.hv.data())
        .map(|(g, y)| g * (1.0 - y * y))
        .collect();

    let mut g_a4 = vec![0.0; wd * hw];
    {
        let (gw, rest) = g.split_at_mut(NP_B);
        conv1x1_backward(&cache.a4, wd, hw, t[NP_W].data(), &g_logits, gw[NP_W].data_mut(), rest[0].data_mut(), &mut g_a4);
    }
    {
        let (gw, rest) = g.split_at_mut(HV_B);
        conv1x1_backward(&cache.a4, wd, hw, t[HV_W].data(), &g_hv_pre, gw[HV_W].data_mut(), rest[0].data_mut(), &mut g_a4);
    }
    relu_backward(&mut g_a4, &cache.a4);

    let mut g_u2 = vec![0.0; wd * hw];
    {
        let (gw, rest) = g.split_at_mut(DEC2_B);
        conv3x3_backward(&cache.u2, wd, h, w, t[DEC2_W].data(), &g_a4, gw[DEC2_W].data_mut(), rest[0].data_mut(), Some(&mut g_u2));
    }
    let mut g_a1 = g_u2.clone();
    let mut g_a3 = upsample_backward(&g_u2, wd, h2, w2);
    relu_backward(&mut g_a3, &cache.a3);

    let mut g_u1 = vec![0.0; 2 * wd * h2 * w2];
    {
        let (gw, rest) = g.split_at_mut(DEC1_B);
        conv3x3_backward(&cache.u1, 2 * wd, h2, w2, t[DEC1_W].data(), &g_a3, gw[DEC1_W].data_mut(), rest[0].data_mut(), Some(&mut g_u1));
    }
    let g_p2 = upsample_backward(&g_u1, 2 * wd, h4, w4);
    let mut g_a2 = vec![0.0; 2 * wd * h2 * w2];
    avg_pool_backward(&g_p2, 2 * wd, h2, w2, &mut g_a2);
    relu_backward(&mut g_a2, &cache.a2);

    let mut g_p1 = vec![0.0; wd * h2 * w2];
    {
        let (gw, rest) = g.split_at_mut(ENC2_B);
        conv3x3_backward(&cache.p1, wd, h2, w2, t[ENC2_W].data(), &g_a2, gw[ENC2_W].data_mut(), rest[0].data_mut(), Some(&mut g_p1));
    }
    avg_pool_backward(&g_p1, wd, h, w, &mut g_a1);
    relu_backward(&mut g_a1, &cache.a1);
    {
        let (gw, rest) = g.split_at_mut(ENC1_B);
        conv3x3_backward(&cache.input, cin, h, w, t[ENC1_W].data(), &g_a1, gw[ENC1_W].data_mut(), rest[0].data_mut(), None);
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    lr: f64,
    cfg: &AdamConfig,
    state: &mut AdamState,
) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&state.m)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(state.m.tensors.iter_mut())
        .zip(state.v.tensors.iter_mut())
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub alpha: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { alpha: 0.95 }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::InvalidParam(format!("ema alpha {} not in [0, 1)", self.alpha)));
        }
        Ok(())
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, cfg: &EmaConfig) -> Result<()> {
    teacher.check_compatible(student)?;
    let a = cfg.alpha;
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (x, &y) in t.data_mut().iter_mut().zip(s.data()) {
            *x = a * *x + (1.0 - a) * y;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    adam_step: u64,
    tensors: Vec<ManifestEntry>,
}

const GROUPS: [&str; 4] = ["student", "teacher", "adam_m", "adam_v"];

impl Checkpoint {
    pub fn new(student: ModelParams) -> Self {
        Self {
            teacher: student.clone(),
            adam: AdamState::new(&student),
            student,
        }
    }

    fn groups(&self) -> [&ModelParams; 4] {
        [&self.student, &self.teacher, &self.adam.m, &self.adam.v]
    }

    /// Writes `manifest.json` and one IRCR-T file per group and tensor.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            model: self.student.config,
            adam_step: self.adam.step,
            tensors: self
                .student
                .names
                .iter()
                .zip(&self.student.tensors)
                .map(|(n, t)| ManifestEntry {
                    name: n.clone(),
                    dims: t.dims().to_vec(),
                })
                .collect(),
        };
        for (group, params) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in params.names.iter().zip(&params.tensors) {
                t.save(dir.join(format!("{group}.{name}.ircr")))?;
            }
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let template = ModelParams::zeros(manifest.model)?;
        let expected: Vec<(&str, &[usize])> = template
            .names
            .iter()
            .map(String::as_str)
            .zip(template.tensors.iter().map(Tensor::dims))
            .collect();
        let listed: Vec<(&str, &[usize])> = manifest
            .tensors
            .iter()
            .map(|e| (e.name.as_str(), e.dims.as_slice()))
            .collect();
        if expected != listed {
            return Err(Error::Format {
                path,
                reason: "tensor list does not match the model config".into(),
            });
        }
        let mut groups = Vec::with_capacity(4);
        for group in GROUPS {
            let mut p = template.clone();
            for (name, slot) in template.names.iter().zip(p.tensors.iter_mut()) {
                let file = dir.join(format!("{group}.{name}.ircr"));
                let t = Tensor::load(&file)?;
                if t.dims() != slot.dims() {
                    return Err(Error::Format {
                        path: file,
                        reason: format!("expected dims {:?}, got {:?}", slot.dims(), t.dims()),
                    });
                }
                *slot = t;
            }
            groups.push(p);
        }
        let v = groups.pop().unwrap();
        let m = groups.pop().unwrap();
        let teacher = groups.pop().unwrap();
        let student = groups.pop().unwrap();
        Ok(Self {
            student,
            teacher,
            adam: AdamState {
                m,
                v,
                step: manifest.adam_step,
            },
        })
    }
}
