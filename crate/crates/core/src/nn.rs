//! The patch subnet: seven 3x3 conv+ReLU layers of 64 filters, one linear
//! reducer per filter map, tanh, a linear head and a sigmoid.
//!
//! Activations are kept channel-major (`[channels, batch * h * w]`) so each
//! convolution is a single im2col GEMM over the whole patch batch. The
//! public entry points take and return the conventional `[batch, c, h, w]`
//! layout.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::optim::bce_loss;
use crate::tensor::{dot_unchecked, normal_sample, uniform_sample, Real, RngState, Tensor};

pub const FILTERS: usize = 64;
pub const CONV_LAYERS: usize = 7;
const TAPS: usize = 9;

/// Patch geometry the subnet was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl PatchDims {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid(
                "patch dims",
                alloc::format!("{height}x{width} has a zero side"),
            ));
        }
        if channels == 0 {
            return Err(invalid("channels", "must be at least 1"));
        }
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    pub fn square(side: usize, channels: usize) -> Result<Self> {
        Self::new(side, side, channels)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn patch_len(&self) -> usize {
        self.area() * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    /// `[64, in_channels, 3, 3]`
    pub weights: Tensor<T>,
    /// `[64]`
    pub bias: Tensor<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(in_channels: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[FILTERS, in_channels, 3, 3]),
            bias: Tensor::zeros(&[FILTERS]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// One dot-product linear model per filter map.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducerBank<T> {
    /// `[64, h * w]`
    pub weights: Tensor<T>,
    /// `[64]`
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayer<T> {
    /// `[64]`
    pub weights: Tensor<T>,
    /// `[1]`
    pub bias: Tensor<T>,
}

/// Every learnable weight of the subnet. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetParams<T> {
    pub dims: PatchDims,
    pub conv: Vec<ConvLayer<T>>,
    pub reducer: ReducerBank<T>,
    pub head: HeadLayer<T>,
}

impl<T: Real> SubnetParams<T> {
    pub fn zeros(dims: PatchDims) -> Self {
        let conv = (0..CONV_LAYERS)
            .map(|i| ConvLayer::zeros(if i == 0 { dims.channels } else { FILTERS }))
            .collect();
        Self {
            dims,
            conv,
            reducer: ReducerBank {
                weights: Tensor::zeros(&[FILTERS, dims.area()]),
                bias: Tensor::zeros(&[FILTERS]),
            },
            head: HeadLayer {
                weights: Tensor::zeros(&[FILTERS]),
                bias: Tensor::zeros(&[1]),
            },
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.dims)
    }

    /// Ordered parameter shapes: each conv layer's weights then bias, then
    /// reducer weights and bias, then head weights and bias.
    pub fn manifest(dims: PatchDims) -> Vec<Vec<usize>> {
        let mut shapes = Vec::with_capacity(2 * CONV_LAYERS + 4);
        for i in 0..CONV_LAYERS {
            let cin = if i == 0 { dims.channels } else { FILTERS };
            shapes.push(vec![FILTERS, cin, 3, 3]);
            shapes.push(vec![FILTERS]);
        }
        shapes.push(vec![FILTERS, dims.area()]);
        shapes.push(vec![FILTERS]);
        shapes.push(vec![FILTERS]);
        shapes.push(vec![1]);
        shapes
    }

    pub fn parameter_count(dims: PatchDims) -> usize {
        Self::manifest(dims).iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::with_capacity(2 * CONV_LAYERS + 4);
        for layer in &self.conv {
            out.push(&layer.weights);
            out.push(&layer.bias);
        }
        out.extend([
            &self.reducer.weights,
            &self.reducer.bias,
            &self.head.weights,
            &self.head.bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::with_capacity(2 * CONV_LAYERS + 4);
        for layer in &mut self.conv {
            out.push(&mut layer.weights);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.reducer.weights);
        out.push(&mut self.reducer.bias);
        out.push(&mut self.head.weights);
        out.push(&mut self.head.bias);
        out
    }

    /// Rebuilds parameters from tensors in manifest order, checking every shape.
    pub fn from_tensors(dims: PatchDims, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let manifest = Self::manifest(dims);
        if tensors.len() != manifest.len() {
            return Err(Error::LengthMismatch {
                left: manifest.len(),
                right: tensors.len(),
            });
        }
        for (t, s) in tensors.iter().zip(&manifest) {
            if t.shape() != s.as_slice() {
                return Err(Error::ShapeMismatch {
                    left: s.clone(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let conv = (0..CONV_LAYERS)
            .map(|_| ConvLayer {
                weights: next(),
                bias: next(),
            })
            .collect();
        let reducer = ReducerBank {
            weights: next(),
            bias: next(),
        };
        let head = HeadLayer {
            weights: next(),
            bias: next(),
        };
        Ok(Self {
            dims,
            conv,
            reducer,
            head,
        })
    }

    pub fn cast<U: Real>(&self) -> SubnetParams<U> {
        let tensors = self.tensors().into_iter().map(Tensor::cast).collect();
        SubnetParams::from_tensors(self.dims, tensors).expect("same manifest")
    }

    pub fn fill(&mut self, value: T) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[inline]
pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Logistic function, kept strictly inside `(0, 1)` even where the float type
/// would saturate.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    let s = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let hi = one - T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(hi)
}

pub fn activation<T: Real>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    match kind {
        Activation::Relu => x.map(relu),
        Activation::Tanh => x.map(|v| v.tanh()),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// `[batch, c, hw]` -> `[c, batch * hw]`
fn to_channel_major<T: Real>(data: &[T], batch: usize, channels: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &data[(b * channels + c) * hw..][..hw];
            out[c * batch * hw + b * hw..][..hw].copy_from_slice(src);
        }
    }
    out
}

fn from_channel_major<T: Real>(data: &[T], batch: usize, channels: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for c in 0..channels {
        for b in 0..batch {
            let src = &data[c * batch * hw + b * hw..][..hw];
            out[(b * channels + c) * hw..][..hw].copy_from_slice(src);
        }
    }
    out
}

/// Spatial geometry of a channel-major activation batch.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    height: usize,
    width: usize,
}

impl Geometry {
    fn hw(&self) -> usize {
        self.height * self.width
    }

    fn columns(&self) -> usize {
        self.batch * self.hw()
    }
}

/// Source column range `[lo, hi)` of output columns whose tap at offset
/// `k - 1` stays inside `0..len`.
#[inline]
fn valid_span(len: usize, k: usize) -> (usize, usize) {
    // out x reads x + k - 1
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { len.saturating_sub(1) } else { len };
    (lo.min(len), hi)
}

/// Zero-padded 3x3 im2col: `[cin, batch*hw]` -> `[cin*9, batch*hw]`.
fn im2col<T: Real>(x: &[T], cin: usize, g: Geometry, cols: &mut Vec<T>) {
    let n = g.columns();
    let hw = g.hw();
    cols.clear();
    cols.resize(cin * TAPS * n, T::zero());
    for c in 0..cin {
        let plane = &x[c * n..][..n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * TAPS) + ky * 3 + kx) * n..][..n];
                let (x_lo, x_hi) = valid_span(g.width, kx);
                let (y_lo, y_hi) = valid_span(g.height, ky);
                for b in 0..g.batch {
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        let dst = b * hw + y * g.width;
                        let src = b * hw + sy * g.width;
                        for xx in x_lo..x_hi {
                            row[dst + xx] = plane[src + xx + kx - 1];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `[cin*9, batch*hw]` into `[cin, batch*hw]`.
fn col2im<T: Real>(cols: &[T], cin: usize, g: Geometry, dx: &mut [T]) {
    let n = g.columns();
    let hw = g.hw();
    dx.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..cin {
        let plane = &mut dx[c * n..][..n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * TAPS) + ky * 3 + kx) * n..][..n];
                let (x_lo, x_hi) = valid_span(g.width, kx);
                let (y_lo, y_hi) = valid_span(g.height, ky);
                for b in 0..g.batch {
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        let dst = b * hw + y * g.width;
                        let src = b * hw + sy * g.width;
                        for xx in x_lo..x_hi {
                            plane[src + xx + kx - 1] = plane[src + xx + kx - 1] + row[dst + xx];
                        }
                    }
                }
            }
        }
    }
}

/// Channel-major convolution: returns pre-activation `[64, batch*hw]`.
fn conv_cm<T: Real>(layer: &ConvLayer<T>, x: &[T], g: Geometry, cols: &mut Vec<T>) -> Vec<T> {
    let cin = layer.in_channels();
    let n = g.columns();
    let k = cin * TAPS;
    im2col(x, cin, g, cols);
    let mut out = vec![T::zero(); FILTERS * n];
    T::gemm(
        FILTERS,
        k,
        n,
        T::one(),
        (layer.weights.data(), k as isize, 1),
        (cols, n as isize, 1),
        T::zero(),
        (&mut out, n as isize, 1),
    );
    for (f, row) in out.chunks_exact_mut(n).enumerate() {
        let beta = layer.bias.data()[f];
        row.iter_mut().for_each(|v| *v = *v + beta);
    }
    out
}

fn check_batch<T: Real>(dims: PatchDims, x: &Tensor<T>) -> Result<usize> {
    let shape = x.shape();
    let expected = [dims.channels, dims.height, dims.width];
    if shape.len() != 4 || shape[1..] != expected {
        let mut want = vec![shape.first().copied().unwrap_or(1)];
        want.extend_from_slice(&expected);
        return Err(Error::ShapeMismatch {
            left: want,
            right: shape.to_vec(),
        });
    }
    Ok(shape[0])
}

/// Zero-padded 3x3 cross-correlation plus bias, `[b, cin, h, w] -> [b, 64, h, w]`.
pub fn conv2d_forward<T: Real>(layer: &ConvLayer<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(invalid("conv input", alloc::format!("expected rank 4, got {shape:?}")));
    }
    let (batch, cin, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if cin != layer.in_channels() {
        return Err(Error::ChannelMismatch {
            expected: layer.in_channels(),
            found: cin,
        });
    }
    let g = Geometry {
        batch,
        height: h,
        width: w,
    };
    let x = to_channel_major(input.data(), batch, cin, h * w);
    let mut cols = Vec::new();
    let out = conv_cm(layer, &x, g, &mut cols);
    Tensor::new(
        vec![batch, FILTERS, h, w],
        from_channel_major(&out, batch, FILTERS, h * w),
    )
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    batch: usize,
    /// Layer inputs: the patch batch, then the output of each conv+ReLU.
    acts: Vec<Vec<T>>,
    /// `[batch, 64]` tanh outputs.
    hidden: Vec<T>,
    probs: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// ReLU on/off pattern of every conv layer, for detecting kink crossings.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.acts[1..]
            .iter()
            .flat_map(|a| a.iter().map(|&v| v > T::zero()))
            .collect()
    }
}

fn head_and_reduce<T: Real>(
    params: &SubnetParams<T>,
    last: &[T],
    batch: usize,
    hidden: &mut Vec<T>,
    probs: &mut Vec<T>,
) {
    let hw = params.dims.area();
    let n = batch * hw;
    hidden.clear();
    hidden.resize(batch * FILTERS, T::zero());
    let rw = params.reducer.weights.data();
    let rb = params.reducer.bias.data();
    for f in 0..FILTERS {
        let w = &rw[f * hw..][..hw];
        let plane = &last[f * n..][..n];
        for b in 0..batch {
            let r = dot_unchecked(w, &plane[b * hw..][..hw]) + rb[f];
            hidden[b * FILTERS + f] = r.tanh();
        }
    }
    let hwts = params.head.weights.data();
    let hb = params.head.bias.data()[0];
    probs.clear();
    probs.extend(
        hidden
            .chunks_exact(FILTERS)
            .map(|t| sigmoid(dot_unchecked(hwts, t) + hb)),
    );
}

/// Forward pass keeping every intermediate needed by [`backward`].
pub fn forward_cached<T: Real>(params: &SubnetParams<T>, patches: &Tensor<T>) -> Result<ForwardCache<T>> {
    let batch = check_batch(params.dims, patches)?;
    let dims = params.dims;
    let g = Geometry {
        batch,
        height: dims.height,
        width: dims.width,
    };
    let mut acts = Vec::with_capacity(CONV_LAYERS + 1);
    acts.push(to_channel_major(patches.data(), batch, dims.channels, dims.area()));
    let mut cols = Vec::new();
    for layer in &params.conv {
        let mut z = conv_cm(layer, acts.last().expect("input pushed"), g, &mut cols);
        z.iter_mut().for_each(|v| *v = relu(*v));
        acts.push(z);
    }
    let mut hidden = Vec::new();
    let mut probs = Vec::new();
    head_and_reduce(params, &acts[CONV_LAYERS], batch, &mut hidden, &mut probs);
    Ok(ForwardCache {
        batch,
        acts,
        hidden,
        probs,
    })
}

/// Per-patch class-1 probabilities for a `[l, c, m', n']` batch.
pub fn subnet_forward<T: Real>(params: &SubnetParams<T>, patches: &Tensor<T>) -> Result<Tensor<T>> {
    let batch = check_batch(params.dims, patches)?;
    let dims = params.dims;
    let g = Geometry {
        batch,
        height: dims.height,
        width: dims.width,
    };
    let mut act = to_channel_major(patches.data(), batch, dims.channels, dims.area());
    let mut cols = Vec::new();
    for layer in &params.conv {
        act = conv_cm(layer, &act, g, &mut cols);
        act.iter_mut().for_each(|v| *v = relu(*v));
    }
    let mut hidden = Vec::new();
    let mut probs = Vec::new();
    head_and_reduce(params, &act, batch, &mut hidden, &mut probs);
    Tensor::new(vec![batch], probs)
}

/// Reverse-mode pass. `upstream[j]` is dLoss/dq_j; parameter gradients are
/// *added* into `grads`. Returns dLoss/dpatches (`[l, c, m', n']`) when
/// `want_input` is set.
pub fn backward<T: Real>(
    params: &SubnetParams<T>,
    cache: &ForwardCache<T>,
    upstream: &[T],
    grads: &mut SubnetParams<T>,
    want_input: bool,
) -> Result<Option<Tensor<T>>> {
    let batch = cache.batch;
    if upstream.len() != batch {
        return Err(Error::LengthMismatch {
            left: batch,
            right: upstream.len(),
        });
    }
    if grads.dims != params.dims {
        return Err(invalid("gradient container", "patch dims differ from parameters"));
    }
    let dims = params.dims;
    let hw = dims.area();
    let n = batch * hw;
    let g = Geometry {
        batch,
        height: dims.height,
        width: dims.width,
    };

    // sigmoid and head
    let dlogit: Vec<T> = upstream
        .iter()
        .zip(&cache.probs)
        .map(|(&u, &q)| u * q * (T::one() - q))
        .collect();
    let hwts = params.head.weights.data();
    let mut dreduced = vec![T::zero(); batch * FILTERS];
    {
        let gh = grads.head.weights.data_mut();
        for b in 0..batch {
            let t = &cache.hidden[b * FILTERS..][..FILTERS];
            for f in 0..FILTERS {
                gh[f] = gh[f] + dlogit[b] * t[f];
                // through tanh
                dreduced[b * FILTERS + f] = dlogit[b] * hwts[f] * (T::one() - t[f] * t[f]);
            }
        }
        let gb = grads.head.bias.data_mut();
        gb[0] = gb[0] + dlogit.iter().copied().sum::<T>();
    }

    // reducer
    let last = &cache.acts[CONV_LAYERS];
    let rw = params.reducer.weights.data();
    let mut dact = vec![T::zero(); FILTERS * n];
    {
        let grw = grads.reducer.weights.data_mut();
        let grb = grads.reducer.bias.data_mut();
        for f in 0..FILTERS {
            let w = &rw[f * hw..][..hw];
            let gw = &mut grw[f * hw..][..hw];
            for b in 0..batch {
                let d = dreduced[b * FILTERS + f];
                grb[f] = grb[f] + d;
                let a = &last[f * n + b * hw..][..hw];
                let da = &mut dact[f * n + b * hw..][..hw];
                for p in 0..hw {
                    gw[p] = gw[p] + d * a[p];
                    da[p] = d * w[p];
                }
            }
        }
    }

    // conv stack
    let mut cols = Vec::new();
    let mut dcols: Vec<T> = Vec::new();
    let mut dinput = None;
    for li in (0..CONV_LAYERS).rev() {
        let layer = &params.conv[li];
        let cin = layer.in_channels();
        let k = cin * TAPS;
        let out = &cache.acts[li + 1];
        // through ReLU; subgradient 0 at 0
        for (d, &a) in dact.iter_mut().zip(out) {
            if a <= T::zero() {
                *d = T::zero();
            }
        }
        let gl = &mut grads.conv[li];
        for (f, row) in dact.chunks_exact(n).enumerate() {
            let gb = gl.bias.data_mut();
            gb[f] = gb[f] + row.iter().copied().sum::<T>();
        }
        im2col(&cache.acts[li], cin, g, &mut cols);
        // dW += dZ [64, n] x cols^T [n, k]
        T::gemm(
            FILTERS,
            n,
            k,
            T::one(),
            (&dact, n as isize, 1),
            (&cols, 1, n as isize),
            T::one(),
            (gl.weights.data_mut(), k as isize, 1),
        );
        if li == 0 && !want_input {
            break;
        }
        // dcols = W^T [k, 64] x dZ [64, n]
        dcols.clear();
        dcols.resize(k * n, T::zero());
        T::gemm(
            k,
            FILTERS,
            n,
            T::one(),
            (layer.weights.data(), 1, k as isize),
            (&dact, n as isize, 1),
            T::zero(),
            (&mut dcols, n as isize, 1),
        );
        let mut dprev = vec![T::zero(); cin * n];
        col2im(&dcols, cin, g, &mut dprev);
        if li == 0 {
            let data = from_channel_major(&dprev, batch, cin, hw);
            dinput = Some(Tensor::new(vec![batch, cin, dims.height, dims.width], data)?);
        } else {
            dact = dprev;
        }
    }
    Ok(dinput)
}

/// Gradients of `sum_j upstream[j] * q_j` with respect to all parameters and
/// the input patches.
#[derive(Debug, Clone)]
pub struct SubnetGrads<T> {
    pub params: SubnetParams<T>,
    pub input: Tensor<T>,
}

pub fn subnet_backward<T: Real>(
    params: &SubnetParams<T>,
    patches: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<SubnetGrads<T>> {
    let cache = forward_cached(params, patches)?;
    if upstream.shape() != [cache.batch] {
        return Err(Error::ShapeMismatch {
            left: vec![cache.batch],
            right: upstream.shape().to_vec(),
        });
    }
    let mut grads = SubnetParams::zeros_like(params);
    let input = backward(params, &cache, upstream.data(), &mut grads, true)?.expect("input gradient requested");
    Ok(SubnetGrads { params: grads, input })
}

/// Kaiming-normal conv weights (std `sqrt(2 / (in_channels * 9))`), uniform
/// `±1/sqrt(fan_in)` reducer and head weights, all biases zero.
pub fn kaiming_init<T: Real>(rng: &mut RngState, dims: PatchDims) -> SubnetParams<T> {
    let mut params = SubnetParams::zeros(dims);
    for layer in &mut params.conv {
        let fan_in = (layer.in_channels() * TAPS) as f64;
        let std = libm_sqrt(2.0 / fan_in);
        layer.weights = normal_sample(rng, 0.0, std, &[FILTERS, layer.in_channels(), 3, 3]).expect("positive std");
    }
    let r = 1.0 / libm_sqrt(dims.area() as f64);
    params.reducer.weights = uniform_sample(rng, -r, r, &[FILTERS, dims.area()]).expect("nonempty range");
    let h = 1.0 / libm_sqrt(FILTERS as f64);
    params.head.weights = uniform_sample(rng, -h, h, &[FILTERS]).expect("nonempty range");
    params
}

#[inline]
fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub probes: usize,
    /// Probes redrawn because a perturbation flipped some ReLU.
    pub resampled: usize,
    /// `(tensor index in manifest order, flat element index)` of the worst probe.
    pub worst: Option<(usize, usize)>,
}

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    #[default]
    Central,
    /// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`, fourth order.
    FivePoint,
}

impl Stencil {
    fn taps(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::Central => &[(1.0, 0.5), (-1.0, -0.5)],
            Stencil::FivePoint => &[
                (-2.0, 1.0 / 12.0),
                (-1.0, -8.0 / 12.0),
                (1.0, 8.0 / 12.0),
                (2.0, -1.0 / 12.0),
            ],
        }
    }
}

/// Settings for [`grad_check_with`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub epsilon: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
    pub stencil: Stencil,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            floor: 1e-6,
            stencil: Stencil::Central,
        }
    }
}

fn patch_loss(params: &SubnetParams<f64>, patches: &Tensor<f64>, label: u8) -> Result<(f64, ForwardCache<f64>)> {
    let cache = forward_cached(params, patches)?;
    let p = cache.probs.iter().sum::<f64>() / cache.batch as f64;
    Ok((bce_loss(p, label)?.0, cache))
}

/// Finite-difference check on a random two-patch image with a random label.
pub fn grad_check(params: &SubnetParams<f64>, rng: &mut RngState, n_probes: usize) -> Result<GradCheckReport> {
    let dims = params.dims;
    let patches = uniform_sample(rng, 0.0, 1.0, &[2, dims.channels, dims.height, dims.width])?;
    let label = (rng.next_u64() & 1) as u8;
    grad_check_with(params, &patches, label, rng, n_probes, GradCheckOptions::default())
}

/// Compares analytic gradients of `bce(mean_j q_j, label)` against central
/// differences on `n_probes` randomly chosen parameters. The tensor is drawn
/// uniformly first, then the element, so small tensors (biases, head) are
/// probed as often as the large conv kernels.
pub fn grad_check_with(
    params: &SubnetParams<f64>,
    patches: &Tensor<f64>,
    label: u8,
    rng: &mut RngState,
    n_probes: usize,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, cache) = patch_loss(params, patches, label)?;
    let l = cache.batch as f64;
    let p = cache.probs.iter().sum::<f64>() / l;
    let (_, dldp) = bce_loss(p, label)?;
    let upstream = vec![dldp / l; cache.batch];
    let mut grads = SubnetParams::zeros_like(params);
    backward(params, &cache, &upstream, &mut grads, false)?;
    let base_pattern = cache.relu_pattern();

    let analytic = grads
        .tensors()
        .into_iter()
        .map(|t| t.data().to_vec())
        .collect::<Vec<_>>();
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        probes: 0,
        resampled: 0,
        worst: None,
    };
    let max_draws = n_probes.saturating_mul(20).max(1);
    let mut draws = 0;
    while report.probes < n_probes && draws < max_draws {
        draws += 1;
        let ti = rng.below(analytic.len());
        let ei = rng.below(analytic[ti].len());
        let orig = probe.tensors()[ti].data()[ei];

        let mut numeric = 0.0;
        let mut kinked = false;
        for &(offset, weight) in opts.stencil.taps() {
            probe.tensors_mut()[ti].data_mut()[ei] = orig + offset * opts.epsilon;
            let (loss, c) = patch_loss(&probe, patches, label)?;
            kinked |= c.relu_pattern() != base_pattern;
            numeric += weight * loss;
        }
        probe.tensors_mut()[ti].data_mut()[ei] = orig;
        if kinked {
            report.resampled += 1;
            continue;
        }
        let numeric = numeric / opts.epsilon;
        let a = analytic[ti][ei];
        let denom = a.abs().max(numeric.abs()).max(opts.floor);
        let err = (a - numeric).abs() / denom;
        report.probes += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((ti, ei));
        }
    }
    if report.probes < n_probes {
        return Err(invalid(
            "grad check",
            alloc::format!("only {} of {n_probes} probes avoided ReLU kinks", report.probes),
        ));
    }
    Ok(report)
}
