//! Differentiable building blocks with hand-written backward passes, Adam,
//! finite-difference gradient checking, and a small sequential network
//! runtime that strings the blocks together.
//!
//! Activations are `T x D` matrices (one row per frame). Parameters are
//! dynamic-rank tensors so embeddings, linear weights, conv kernels and
//! mixing logits share one storage type.

use ndarray::linalg::general_mat_mul;
use ndarray::{
    s, Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, ArrayViewMut2,
    ArrayViewMut3, Ix1, Ix2, Ix3, IxDyn,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub adam_m: ArrayD<f64>,
    pub adam_v: ArrayD<f64>,
    /// Frozen parameters receive no updates and report zero gradient.
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let zeros = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
            frozen: false,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    fn view2(&self) -> ArrayView2<'_, f64> {
        self.value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("rank-2 parameter")
    }

    fn view1(&self) -> ArrayView1<'_, f64> {
        self.value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("rank-1 parameter")
    }

    fn view3(&self) -> ArrayView3<'_, f64> {
        self.value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("rank-3 parameter")
    }
}

fn as2(a: &mut ArrayD<f64>) -> ArrayViewMut2<'_, f64> {
    a.view_mut()
        .into_dimensionality::<Ix2>()
        .expect("rank-2 gradient")
}

fn as1(a: &mut ArrayD<f64>) -> ArrayViewMut1<'_, f64> {
    a.view_mut()
        .into_dimensionality::<Ix1>()
        .expect("rank-1 gradient")
}

fn as3(a: &mut ArrayD<f64>) -> ArrayViewMut3<'_, f64> {
    a.view_mut()
        .into_dimensionality::<Ix3>()
        .expect("rank-3 gradient")
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

pub fn embedding_forward(ids: &[usize], table: ArrayView2<f64>) -> Result<Array2<f64>> {
    let vocab = table.nrows();
    let mut out = Array2::zeros((ids.len(), table.ncols()));
    for (t, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        out.row_mut(t).assign(&table.row(id));
    }
    Ok(out)
}

/// Accumulates `grad_out` rows into the table rows they were read from.
pub fn embedding_backward(
    ids: &[usize],
    grad_out: ArrayView2<f64>,
    mut grad_table: ArrayViewMut2<f64>,
) {
    for (t, &id) in ids.iter().enumerate() {
        let mut row = grad_table.row_mut(id);
        row += &grad_out.row(t);
    }
}

/// `y = x W + b`.
pub fn linear_forward(
    x: ArrayView2<f64>,
    weight: ArrayView2<f64>,
    bias: ArrayView1<f64>,
) -> Result<Array2<f64>> {
    if x.ncols() != weight.nrows() || weight.ncols() != bias.len() {
        return Err(Error::Shape(format!(
            "linear: x {:?}, W {:?}, b {}",
            x.dim(),
            weight.dim(),
            bias.len()
        )));
    }
    let mut y = Array2::zeros((x.nrows(), weight.ncols()));
    y += &bias;
    general_mat_mul(1.0, &x, &weight, 1.0, &mut y);
    Ok(y)
}

/// Returns `dx`; accumulates `dW` and `db`.
pub fn linear_backward(
    x: ArrayView2<f64>,
    weight: ArrayView2<f64>,
    grad_out: ArrayView2<f64>,
    mut grad_weight: ArrayViewMut2<f64>,
    mut grad_bias: ArrayViewMut1<f64>,
) -> Array2<f64> {
    general_mat_mul(1.0, &x.t(), &grad_out, 1.0, &mut grad_weight);
    grad_bias += &grad_out.sum_axis(ndarray::Axis(0));
    grad_out.dot(&weight.t())
}

pub fn leaky_relu(x: ArrayView2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| if v >= 0.0 { v } else { slope * v })
}

/// Subgradient at exactly zero is taken from the positive branch.
pub fn leaky_relu_backward(
    x: ArrayView2<f64>,
    grad_out: ArrayView2<f64>,
    slope: f64,
) -> Array2<f64> {
    let mut dx = grad_out.to_owned();
    dx.zip_mut_with(&x, |g, &v| {
        if v < 0.0 {
            *g *= slope
        }
    });
    dx
}

/// Row range `[lo, hi)` of output frames that read input frame `t + offset`
/// inside `[0, len)`.
fn tap_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset.max(0)).max(0) as usize;
    (lo.min(len), hi.max(lo.min(len)))
}

fn tap_offset(k: usize, width: usize, dilation: usize) -> isize {
    (k as isize - (width / 2) as isize) * dilation as isize
}

/// Non-causal dilated convolution with same-length zero padding.
/// `kernel` is `width x D_in x D_out` with odd `width`.
pub fn dilated_conv1d_forward(
    x: ArrayView2<f64>,
    kernel: ArrayView3<f64>,
    dilation: usize,
) -> Result<Array2<f64>> {
    let (width, d_in, d_out) = kernel.dim();
    if width % 2 == 0 || dilation == 0 {
        return Err(Error::Shape(format!(
            "conv needs odd width and positive dilation, got {width} and {dilation}"
        )));
    }
    if x.ncols() != d_in {
        return Err(Error::Shape(format!(
            "conv input dim {} vs kernel {d_in}",
            x.ncols()
        )));
    }
    let t_len = x.nrows();
    let mut y = Array2::zeros((t_len, d_out));
    for k in 0..width {
        let off = tap_offset(k, width, dilation);
        let (lo, hi) = tap_range(t_len, off);
        if lo >= hi {
            continue;
        }
        let src = x.slice(s![
            (lo as isize + off) as usize..(hi as isize + off) as usize,
            ..
        ]);
        let mut dst = y.slice_mut(s![lo..hi, ..]);
        general_mat_mul(1.0, &src, &kernel.slice(s![k, .., ..]), 1.0, &mut dst);
    }
    Ok(y)
}

/// Returns `dx`; accumulates the kernel gradient.
pub fn dilated_conv1d_backward(
    x: ArrayView2<f64>,
    kernel: ArrayView3<f64>,
    dilation: usize,
    grad_out: ArrayView2<f64>,
    mut grad_kernel: ArrayViewMut3<f64>,
) -> Array2<f64> {
    let width = kernel.dim().0;
    let t_len = x.nrows();
    let mut dx = Array2::zeros(x.raw_dim());
    for k in 0..width {
        let off = tap_offset(k, width, dilation);
        let (lo, hi) = tap_range(t_len, off);
        if lo >= hi {
            continue;
        }
        let src_rows = (lo as isize + off) as usize..(hi as isize + off) as usize;
        let g = grad_out.slice(s![lo..hi, ..]);
        let src = x.slice(s![src_rows.clone(), ..]);
        let mut gk = grad_kernel.slice_mut(s![k, .., ..]);
        general_mat_mul(1.0, &src.t(), &g, 1.0, &mut gk);
        let mut dsrc = dx.slice_mut(s![src_rows, ..]);
        general_mat_mul(1.0, &g, &kernel.slice(s![k, .., ..]).t(), 1.0, &mut dsrc);
    }
    dx
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.mapv(|v| (v - max).exp());
    let z = e.sum();
    e / z
}

/// Convex combination of equally shaped layers with `softmax(mix_logits)` weights.
pub fn weighted_sum_forward(
    layers: &[Array2<f64>],
    mix_logits: ArrayView1<f64>,
) -> Result<Array2<f64>> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Shape("weighted sum needs at least one layer".into()))?;
    if mix_logits.len() != layers.len() {
        return Err(Error::Shape(format!(
            "{} mix logits for {} layers",
            mix_logits.len(),
            layers.len()
        )));
    }
    if let Some(l) = layers.iter().find(|l| l.dim() != first.dim()) {
        return Err(Error::Shape(format!(
            "layer {:?} vs {:?}",
            l.dim(),
            first.dim()
        )));
    }
    let w = softmax(mix_logits);
    let mut out = Array2::zeros(first.raw_dim());
    for (layer, &wi) in layers.iter().zip(w.iter()) {
        out.scaled_add(wi, layer);
    }
    Ok(out)
}

/// Returns per-layer gradients; accumulates the mix-logit gradient.
pub fn weighted_sum_backward(
    layers: &[Array2<f64>],
    mix_logits: ArrayView1<f64>,
    grad_out: ArrayView2<f64>,
    mut grad_logits: ArrayViewMut1<f64>,
) -> Vec<Array2<f64>> {
    let w = softmax(mix_logits);
    let dots: Vec<f64> = layers.iter().map(|l| (l * &grad_out).sum()).collect();
    let avg: f64 = w.iter().zip(&dots).map(|(wi, d)| wi * d).sum();
    for (i, g) in grad_logits.iter_mut().enumerate() {
        *g += w[i] * (dots[i] - avg);
    }
    w.iter().map(|&wi| grad_out.mapv(|g| g * wi)).collect()
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

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

/// One bias-corrected Adam update (`step` counts from 1). Gradients of all
/// parameters are zeroed afterwards; frozen ones are not touched otherwise.
pub fn adam_step(params: &mut [Parameter], lr: f64, config: AdamConfig, step: u64) {
    let step = step.max(1) as i32;
    let bc1 = 1.0 - config.beta1.powi(step);
    let bc2 = 1.0 - config.beta2.powi(step);
    for p in params.iter_mut() {
        if !p.frozen {
            ndarray::Zip::from(&mut p.value)
                .and(&mut p.adam_m)
                .and(&mut p.adam_v)
                .and(&p.grad)
                .for_each(|w, m, v, &g| {
                    *m = config.beta1 * *m + (1.0 - config.beta1) * g;
                    *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= lr * m_hat / (v_hat.sqrt() + config.eps);
                });
        }
        p.grad.fill(0.0);
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates_checked: usize,
    /// Coordinates whose every finite-difference step straddled a kink.
    pub kinks_skipped: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients with central differences on up to
/// `max_coords` randomly chosen trainable coordinates. `loss_fn` returns the
/// loss and per-parameter gradients for the current parameter values.
pub fn grad_check<F>(
    params: &mut [Parameter],
    loss_fn: F,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Parameter]) -> Result<(f64, Vec<ArrayD<f64>>)>,
{
    grad_check_piecewise(params, loss_fn, |_| Ok(Vec::new()), eps, max_coords, seed)
}

/// Smaller steps tried when a central difference straddles a kink.
const KINK_RETRIES: usize = 3;

/// [`grad_check`] for piecewise-smooth losses. `pattern_fn` reports which
/// branch every kink (e.g. each LeakyReLU input) is on; a central difference
/// whose endpoints disagree with the base point straddles a kink and is
/// retried with a 10x smaller step. Coordinates that still straddle one
/// after the retries are counted in `kinks_skipped` instead of compared.
pub fn grad_check_piecewise<F, P>(
    params: &mut [Parameter],
    mut loss_fn: F,
    mut pattern_fn: P,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Parameter]) -> Result<(f64, Vec<ArrayD<f64>>)>,
    P: FnMut(&[Parameter]) -> Result<Vec<bool>>,
{
    let (_, analytic) = loss_fn(params)?;
    let base_pattern = pattern_fn(params)?;
    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.frozen)
        .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates for a uniform subset.
    let n = coords.len().min(max_coords);
    for i in 0..n {
        let j = rng.gen_range(i..coords.len());
        coords.swap(i, j);
    }
    coords.truncate(n);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates_checked: 0,
        kinks_skipped: 0,
        worst: None,
    };
    let set = |params: &mut [Parameter], pi: usize, flat: usize, v: f64| {
        params[pi].value.as_slice_mut().expect("contiguous")[flat] = v;
    };
    for (pi, flat) in coords {
        let original = params[pi].value.as_slice().expect("contiguous")[flat];
        let mut numeric = None;
        let mut step = eps;
        for _ in 0..=KINK_RETRIES {
            set(params, pi, flat, original + step);
            let plus = loss_fn(params)?.0;
            let smooth_plus = pattern_fn(params)? == base_pattern;
            set(params, pi, flat, original - step);
            let minus = loss_fn(params)?.0;
            let smooth_minus = pattern_fn(params)? == base_pattern;
            set(params, pi, flat, original);
            if smooth_plus && smooth_minus {
                numeric = Some((plus - minus) / (2.0 * step));
                break;
            }
            step /= 10.0;
        }
        let Some(numeric) = numeric else {
            report.kinks_skipped += 1;
            continue;
        };
        let a = analytic[pi].as_slice().expect("contiguous")[flat];
        let rel = relative_error(a, numeric);
        report.coordinates_checked += 1;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((params[pi].name.clone(), flat, a, numeric));
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Sequential network
// ---------------------------------------------------------------------------

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Embedding {
        table: ParamId,
    },
    WeightedSum {
        mix_logits: ParamId,
    },
    Linear {
        weight: ParamId,
        bias: ParamId,
    },
    LeakyRelu {
        slope: f64,
    },
    /// `y = x + leaky_relu(conv(x))`
    ResidualConv {
        kernel: ParamId,
        dilation: usize,
        slope: f64,
    },
}

#[derive(Debug, Clone, Copy)]
pub enum NetInput<'a> {
    Tokens(&'a [usize]),
    Frames(ArrayView2<'a, f64>),
    Stack(&'a [Array2<f64>]),
}

/// What each layer needs to run its backward pass.
#[derive(Debug)]
pub enum Cache {
    Tokens(Vec<usize>),
    Stack(Vec<Array2<f64>>),
    Input(Array2<f64>),
    Conv {
        input: Array2<f64>,
        pre: Array2<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub params: Vec<Parameter>,
}

impl Network {
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    pub fn zero_grads(&self) -> Vec<ArrayD<f64>> {
        self.params
            .iter()
            .map(|p| ArrayD::zeros(p.value.raw_dim()))
            .collect()
    }

    pub fn forward(&self, input: NetInput) -> Result<Array2<f64>> {
        self.forward_with(&self.params, input, false)
            .map(|(y, _)| y)
    }

    pub fn forward_tape(&self, input: NetInput) -> Result<(Array2<f64>, Vec<Cache>)> {
        self.forward_with(&self.params, input, true)
    }

    /// Forward pass against an explicit parameter set (used by gradient checks).
    pub fn forward_with(
        &self,
        params: &[Parameter],
        input: NetInput,
        keep: bool,
    ) -> Result<(Array2<f64>, Vec<Cache>)> {
        let mut tape = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let mut layers = self.layers.iter();
        let first = layers
            .next()
            .ok_or_else(|| Error::Shape("network has no layers".into()))?;
        let mut h = match (first, input) {
            (Layer::Embedding { table }, NetInput::Tokens(ids)) => {
                let out = embedding_forward(ids, params[*table].view2())?;
                if keep {
                    tape.push(Cache::Tokens(ids.to_vec()));
                }
                out
            }
            (Layer::WeightedSum { mix_logits }, NetInput::Stack(stack)) => {
                let out = weighted_sum_forward(stack, params[*mix_logits].view1())?;
                if keep {
                    tape.push(Cache::Stack(stack.to_vec()));
                }
                out
            }
            (Layer::Embedding { .. } | Layer::WeightedSum { .. }, _) => {
                return Err(Error::Shape(
                    "input kind does not match the network's first layer".into(),
                ))
            }
            (layer, NetInput::Frames(x)) => {
                self.apply(params, layer, x.to_owned(), &mut tape, keep)?
            }
            _ => {
                return Err(Error::Shape(
                    "token or stack input needs an embedding or mixing layer".into(),
                ))
            }
        };
        for layer in layers {
            h = self.apply(params, layer, h, &mut tape, keep)?;
        }
        Ok((h, tape))
    }

    fn apply(
        &self,
        params: &[Parameter],
        layer: &Layer,
        x: Array2<f64>,
        tape: &mut Vec<Cache>,
        keep: bool,
    ) -> Result<Array2<f64>> {
        let y = match layer {
            Layer::Linear { weight, bias } => {
                let y = linear_forward(x.view(), params[*weight].view2(), params[*bias].view1())?;
                if keep {
                    tape.push(Cache::Input(x));
                }
                y
            }
            Layer::LeakyRelu { slope } => {
                let y = leaky_relu(x.view(), *slope);
                if keep {
                    tape.push(Cache::Input(x));
                }
                y
            }
            Layer::ResidualConv {
                kernel,
                dilation,
                slope,
            } => {
                let pre = dilated_conv1d_forward(x.view(), params[*kernel].view3(), *dilation)?;
                let mut y = leaky_relu(pre.view(), *slope);
                y += &x;
                if keep {
                    tape.push(Cache::Conv { input: x, pre });
                }
                y
            }
            Layer::Embedding { .. } | Layer::WeightedSum { .. } => {
                return Err(Error::Shape(
                    "embedding and mixing layers must come first".into(),
                ))
            }
        };
        Ok(y)
    }

    /// Branch of every LeakyReLU input (`true` for `x >= 0`, the side whose
    /// slope the backward pass uses at 0), in forward order.
    pub fn kink_pattern(&self, params: &[Parameter], input: NetInput) -> Result<Vec<bool>> {
        let (_, tape) = self.forward_with(params, input, true)?;
        let mut pattern = Vec::new();
        for (layer, cache) in self.layers.iter().zip(&tape) {
            match (layer, cache) {
                (Layer::LeakyRelu { .. }, Cache::Input(x))
                | (Layer::ResidualConv { .. }, Cache::Conv { pre: x, .. }) => {
                    pattern.extend(x.iter().map(|&v| v >= 0.0));
                }
                _ => {}
            }
        }
        Ok(pattern)
    }

    /// Backpropagates `grad_out` through a recorded tape, returning fresh
    /// per-parameter gradients.
    pub fn backward(&self, tape: Vec<Cache>, grad_out: Array2<f64>) -> Result<Vec<ArrayD<f64>>> {
        self.backward_with(&self.params, tape, grad_out)
    }

    pub fn backward_with(
        &self,
        params: &[Parameter],
        tape: Vec<Cache>,
        grad_out: Array2<f64>,
    ) -> Result<Vec<ArrayD<f64>>> {
        if tape.len() != self.layers.len() {
            return Err(Error::Shape("tape does not match network".into()));
        }
        let mut grads = self.zero_grads();
        let mut g = grad_out;
        for (layer, cache) in self.layers.iter().zip(tape).rev() {
            g = match (layer, cache) {
                (Layer::Embedding { table }, Cache::Tokens(ids)) => {
                    embedding_backward(&ids, g.view(), as2(&mut grads[*table]));
                    Array2::zeros((0, 0))
                }
                (Layer::WeightedSum { mix_logits }, Cache::Stack(stack)) => {
                    weighted_sum_backward(
                        &stack,
                        params[*mix_logits].view1(),
                        g.view(),
                        as1(&mut grads[*mix_logits]),
                    );
                    Array2::zeros((0, 0))
                }
                (Layer::Linear { weight, bias }, Cache::Input(x)) => {
                    let (gw, gb) = two_mut(&mut grads, *weight, *bias);
                    linear_backward(
                        x.view(),
                        params[*weight].view2(),
                        g.view(),
                        as2(gw),
                        as1(gb),
                    )
                }
                (Layer::LeakyRelu { slope }, Cache::Input(x)) => {
                    leaky_relu_backward(x.view(), g.view(), *slope)
                }
                (
                    Layer::ResidualConv {
                        kernel,
                        dilation,
                        slope,
                    },
                    Cache::Conv { input, pre },
                ) => {
                    let g_pre = leaky_relu_backward(pre.view(), g.view(), *slope);
                    let mut dx = dilated_conv1d_backward(
                        input.view(),
                        params[*kernel].view3(),
                        *dilation,
                        g_pre.view(),
                        as3(&mut grads[*kernel]),
                    );
                    dx += &g;
                    dx
                }
                _ => return Err(Error::Shape("tape entry does not match layer".into())),
            };
        }
        for (grad, p) in grads.iter_mut().zip(params) {
            if p.frozen {
                grad.fill(0.0);
            }
        }
        Ok(grads)
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

/// Appends layers with seeded initialization:
/// weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases and mixing
/// logits, embeddings `N(0, 1/sqrt(E))`.
pub struct NetworkBuilder {
    rng: ChaCha8Rng,
    net: Network,
}

impl NetworkBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            net: Network {
                layers: Vec::new(),
                params: Vec::new(),
            },
        }
    }

    fn add_param(&mut self, name: String, value: ArrayD<f64>) -> ParamId {
        self.net.params.push(Parameter::new(name, value));
        self.net.params.len() - 1
    }

    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..bound))
    }

    pub fn embedding(mut self, name: &str, vocab: usize, dim: usize) -> Self {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let rng = &mut self.rng;
        let value = ArrayD::from_shape_simple_fn(IxDyn(&[vocab, dim]), || rng.sample(normal));
        let table = self.add_param(format!("{name}.table"), value);
        self.net.layers.push(Layer::Embedding { table });
        self
    }

    pub fn weighted_sum(mut self, name: &str, n_layers: usize) -> Self {
        let mix_logits = self.add_param(
            format!("{name}.mix_logits"),
            ArrayD::zeros(IxDyn(&[n_layers])),
        );
        self.net.layers.push(Layer::WeightedSum { mix_logits });
        self
    }

    pub fn linear(mut self, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = self.uniform(&[d_in, d_out], d_in);
        let weight = self.add_param(format!("{name}.weight"), w);
        let bias = self.add_param(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[d_out])));
        self.net.layers.push(Layer::Linear { weight, bias });
        self
    }

    pub fn leaky_relu(mut self) -> Self {
        self.net
            .layers
            .push(Layer::LeakyRelu { slope: LEAKY_SLOPE });
        self
    }

    pub fn residual_conv(mut self, name: &str, width: usize, dim: usize, dilation: usize) -> Self {
        let k = self.uniform(&[width, dim, dim], width * dim);
        let kernel = self.add_param(format!("{name}.kernel"), k);
        self.net.layers.push(Layer::ResidualConv {
            kernel,
            dilation,
            slope: LEAKY_SLOPE,
        });
        self
    }

    pub fn build(self) -> Network {
        self.net
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn rand2(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Loss `sum(y * probe)` so dL/dy = probe.
    fn probe_loss(y: &Array2<f64>, probe: &Array2<f64>) -> f64 {
        (y * probe).sum()
    }

    #[test]
    fn embedding_examples() {
        let table = Array2::<f64>::eye(4);
        let out = embedding_forward(&[2], table.view()).unwrap();
        assert_eq!(out, array![[0.0, 0.0, 1.0, 0.0]]);
        assert!(matches!(
            embedding_forward(&[4], table.view()),
            Err(Error::TokenOutOfRange { id: 4, vocab: 4 })
        ));
        let ids = [1, 3, 1, 1];
        let mut g = Array2::zeros((4, 4));
        embedding_backward(&ids, Array2::ones((4, 4)).view(), g.view_mut());
        assert_eq!(g.row(1).to_vec(), vec![3.0; 4]);
        assert_eq!(g.row(3).to_vec(), vec![1.0; 4]);
        assert_eq!(g.row(0).sum(), 0.0);
    }

    #[test]
    fn linear_examples() {
        let x = rand2(5, 3, 1);
        let eye = Array2::eye(3);
        let y = linear_forward(x.view(), eye.view(), Array1::zeros(3).view()).unwrap();
        assert_eq!(y, x);
        let b = array![0.5, -1.0];
        let y = linear_forward(
            Array2::zeros((4, 3)).view(),
            rand2(3, 2, 2).view(),
            b.view(),
        )
        .unwrap();
        for row in y.outer_iter() {
            assert_eq!(row, b);
        }
        assert!(linear_forward(x.view(), rand2(2, 2, 3).view(), b.view()).is_err());
    }

    #[test]
    fn leaky_relu_values() {
        let y = leaky_relu(array![[1.0, -1.0, 0.0]].view(), LEAKY_SLOPE);
        assert_eq!(y, array![[1.0, -0.01, 0.0]]);
        let g = leaky_relu_backward(
            array![[1.0, -1.0, 0.0]].view(),
            Array2::ones((1, 3)).view(),
            LEAKY_SLOPE,
        );
        assert_eq!(g, array![[1.0, 0.01, 1.0]]);
    }

    fn brute_conv(x: &Array2<f64>, kernel: &Array3<f64>, dilation: usize) -> Array2<f64> {
        let (width, d_in, d_out) = kernel.dim();
        let t_len = x.nrows() as isize;
        let mut y = Array2::zeros((x.nrows(), d_out));
        for t in 0..t_len {
            for k in 0..width {
                let src = t + (k as isize - (width / 2) as isize) * dilation as isize;
                if src < 0 || src >= t_len {
                    continue;
                }
                for i in 0..d_in {
                    for o in 0..d_out {
                        y[[t as usize, o]] += x[[src as usize, i]] * kernel[[k, i, o]];
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_identity_and_brute_force() {
        let x = rand2(9, 4, 4);
        let mut eye = Array3::zeros((1, 4, 4));
        eye.slice_mut(s![0, .., ..]).assign(&Array2::eye(4));
        assert_eq!(dilated_conv1d_forward(x.view(), eye.view(), 1).unwrap(), x);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (t_len, width, dilation) in [
            (9, 3, 1),
            (9, 3, 4),
            (5, 5, 2),
            (2, 3, 8),
            (0, 3, 1),
            (12, 3, 2),
        ] {
            let x = rand2(t_len, 3, rng.gen());
            let kernel = Array3::from_shape_fn((width, 3, 2), |_| rng.gen_range(-1.0..1.0));
            let fast = dilated_conv1d_forward(x.view(), kernel.view(), dilation).unwrap();
            let slow = brute_conv(&x, &kernel, dilation);
            assert!((&fast - &slow).iter().all(|d| d.abs() <= 1e-9));
        }
        assert!(dilated_conv1d_forward(x.view(), Array3::zeros((2, 4, 4)).view(), 1).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = rand2(11, 3, 5);
        let kernel = Array3::from_shape_fn((3, 3, 2), |(a, b, c)| {
            ((a * 7 + b * 3 + c) as f64 * 0.37).sin()
        });
        let probe = rand2(11, 2, 6);
        let mut gk = Array3::zeros((3, 3, 2));
        let dx = dilated_conv1d_backward(x.view(), kernel.view(), 2, probe.view(), gk.view_mut());
        let eps = 1e-4;
        let f = |x: &Array2<f64>, k: &Array3<f64>| {
            probe_loss(
                &dilated_conv1d_forward(x.view(), k.view(), 2).unwrap(),
                &probe,
            )
        };
        for idx in [(0, 0), (4, 1), (10, 2), (6, 0)] {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[idx] += eps;
            m[idx] -= eps;
            let num = (f(&p, &kernel) - f(&m, &kernel)) / (2.0 * eps);
            assert!(relative_error(dx[idx], num) <= 1e-3);
        }
        for idx in [(0, 0, 0), (1, 2, 1), (2, 1, 0)] {
            let (mut p, mut m) = (kernel.clone(), kernel.clone());
            p[idx] += eps;
            m[idx] -= eps;
            let num = (f(&x, &p) - f(&x, &m)) / (2.0 * eps);
            assert!(relative_error(gk[idx], num) <= 1e-3);
        }
    }

    #[test]
    fn weighted_sum_examples() {
        let layers = vec![rand2(4, 3, 1), rand2(4, 3, 2), rand2(4, 3, 3)];
        let peaked = array![0.0, 50.0, 0.0];
        let out = weighted_sum_forward(&layers, peaked.view()).unwrap();
        assert!((&out - &layers[1]).iter().all(|d| d.abs() < 1e-9));
        let flat = Array1::zeros(3);
        let out = weighted_sum_forward(&layers, flat.view()).unwrap();
        let mean = (&layers[0] + &layers[1] + &layers[2]) / 3.0;
        assert!((&out - &mean).iter().all(|d| d.abs() < 1e-12));
        let w = softmax(array![0.3, -2.0, 4.0].view());
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert!(weighted_sum_forward(&[], flat.view()).is_err());
    }

    #[test]
    fn weighted_sum_logit_gradient() {
        let layers = vec![rand2(5, 2, 1), rand2(5, 2, 2), rand2(5, 2, 3)];
        let logits = array![0.2, -0.7, 1.1];
        let probe = rand2(5, 2, 9);
        let mut g = Array1::zeros(3);
        weighted_sum_backward(&layers, logits.view(), probe.view(), g.view_mut());
        let eps = 1e-4;
        for i in 0..3 {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p[i] += eps;
            m[i] -= eps;
            let num = (probe_loss(&weighted_sum_forward(&layers, p.view()).unwrap(), &probe)
                - probe_loss(&weighted_sum_forward(&layers, m.view()).unwrap(), &probe))
                / (2.0 * eps);
            assert!(relative_error(g[i], num) <= 1e-3);
        }
    }

    fn scalar_param(v: f64) -> Parameter {
        Parameter::new("w", ArrayD::from_elem(IxDyn(&[1]), v))
    }

    fn leaky_loss(p: &[Parameter]) -> Result<(f64, Vec<ArrayD<f64>>)> {
        let w = p[0].value[[0]];
        let slope = if w >= 0.0 { 1.0 } else { 0.01 };
        Ok((slope * w, vec![ArrayD::from_elem(IxDyn(&[1]), slope)]))
    }

    fn leaky_pattern(p: &[Parameter]) -> Result<Vec<bool>> {
        Ok(vec![p[0].value[[0]] >= 0.0])
    }

    #[test]
    fn piecewise_grad_check_steps_around_kinks() {
        // 2e-6 from the kink: the 1e-5 step straddles it, 1e-6 does not.
        let mut near = vec![scalar_param(2e-6)];
        let plain = grad_check(&mut near, leaky_loss, 1e-5, 1, 0).unwrap();
        assert!(plain.max_rel_error > 0.3);
        let aware = grad_check_piecewise(&mut near, leaky_loss, leaky_pattern, 1e-5, 1, 0).unwrap();
        assert!(aware.max_rel_error < 1e-9);
        assert_eq!((aware.coordinates_checked, aware.kinks_skipped), (1, 0));
        assert_eq!(near[0].value[[0]], 2e-6);

        // Exactly on the kink every step straddles it.
        let mut on = vec![scalar_param(0.0)];
        let aware = grad_check_piecewise(&mut on, leaky_loss, leaky_pattern, 1e-5, 1, 0).unwrap();
        assert_eq!((aware.coordinates_checked, aware.kinks_skipped), (0, 1));
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![scalar_param(0.7)];
        adam_step(&mut p, 0.1, AdamConfig::default(), 1);
        assert_eq!(p[0].value[[0]], 0.7);

        let mut p = vec![scalar_param(1.0), scalar_param(1.0)];
        p.iter_mut().for_each(|q| q.grad.fill(1.0));
        adam_step(&mut p, 0.1, AdamConfig::default(), 1);
        assert!((p[0].value[[0]] - 0.9).abs() < 1e-6);
        assert_eq!(p[0].value, p[1].value);
        assert_eq!(p[0].grad[[0]], 0.0);

        let mut frozen = vec![scalar_param(2.0)];
        frozen[0].frozen = true;
        frozen[0].grad.fill(3.0);
        adam_step(&mut frozen, 0.1, AdamConfig::default(), 1);
        assert_eq!(frozen[0].value[[0]], 2.0);
        assert_eq!(frozen[0].adam_m[[0]], 0.0);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut p = vec![scalar_param(0.123456789)];
        for step in 1..10 {
            p[0].grad.fill(step as f64 * 0.3);
            adam_step(&mut p, 0.0, AdamConfig::default(), step);
        }
        assert_eq!(p[0].value[[0]].to_bits(), 0.123456789f64.to_bits());
    }

    fn tiny_net() -> Network {
        NetworkBuilder::new(3)
            .linear("in", 3, 6)
            .leaky_relu()
            .residual_conv("conv", 3, 6, 2)
            .linear("head", 6, 4)
            .build()
    }

    #[test]
    fn network_grad_check() {
        let mut net = tiny_net();
        let x = rand2(10, 3, 7);
        let probe = rand2(10, 4, 8);
        let template = net.clone();
        let report = grad_check(
            &mut net.params,
            |params| {
                let (y, tape) = template.forward_with(params, NetInput::Frames(x.view()), true)?;
                let grads = template.backward_with(params, tape, probe.clone())?;
                Ok((probe_loss(&y, &probe), grads))
            },
            1e-4,
            200,
            1,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-3, "{report:?}");
        assert!(report.coordinates_checked > 0);
    }

    #[test]
    fn frozen_parameters_report_zero_gradient() {
        let mut net = tiny_net();
        for p in net.params.iter_mut().take(2) {
            p.frozen = true;
        }
        let x = rand2(6, 3, 1);
        let (_, tape) = net.forward_tape(NetInput::Frames(x.view())).unwrap();
        let grads = net.backward(tape, Array2::ones((6, 4))).unwrap();
        assert!(grads[0].iter().all(|&g| g == 0.0));
        assert!(grads[1].iter().all(|&g| g == 0.0));
        assert!(grads[2].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn builder_is_seeded() {
        assert_eq!(tiny_net(), tiny_net());
        assert_eq!(
            tiny_net().num_parameters(),
            3 * 6 + 6 + 3 * 6 * 6 + 6 * 4 + 4
        );
    }
}
