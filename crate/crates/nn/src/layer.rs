//! Layer kinds with forward and exact reverse-mode backward passes.
//!
//! All layers take a batch as the leading dimension: dense layers use `[N, features]`,
//! convolutions use `[N, C, H, W]`. Convolutions are lowered to a single GEMM over the
//! whole batch via im2col.

use rand::Rng;

use crate::error::{NnError, Result};
use crate::tensor::{Real, Tensor};

/// Geometry of a (transposed) 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Extra rows/columns appended to a transposed convolution's output. Must be `< stride`.
    /// Ignored by ordinary convolutions.
    pub output_padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding: 0,
        }
    }

    fn validate(&self, transposed: bool) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 {
            return Err(NnError::Spec(format!("{self:?}: channels and kernel must be positive")));
        }
        if self.stride == 0 {
            return Err(NnError::Spec(format!("{self:?}: stride must be >= 1")));
        }
        if transposed && self.output_padding >= self.stride {
            return Err(NnError::Spec(format!("{self:?}: output_padding must be smaller than stride")));
        }
        Ok(())
    }

    /// Spatial output size of the forward convolution.
    pub fn conv_out(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Spatial output size of the transposed convolution.
    pub fn transposed_out(&self, size: usize) -> Option<usize> {
        let full = (size - 1) * self.stride + self.kernel + self.output_padding;
        full.checked_sub(2 * self.padding).filter(|&v| v > 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// `y = x Wᵀ + b`, weight `[outputs, inputs]`.
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Weight `[out_channels, in_channels, k, k]`.
    Conv(ConvSpec),
    /// Weight `[in_channels, out_channels, k, k]`: the adjoint of a `Conv` with the
    /// channel roles swapped, so an encoder kernel can be reused as-is.
    ConvTranspose(ConvSpec),
    Relu,
    Sigmoid,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv(_) => "conv",
            LayerSpec::ConvTranspose(_) => "conv-transpose",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                if *inputs == 0 || *outputs == 0 {
                    return Err(NnError::Spec(format!("{self:?}: widths must be positive")));
                }
                Ok(())
            }
            LayerSpec::Conv(c) => c.validate(false),
            LayerSpec::ConvTranspose(c) => c.validate(true),
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(()),
        }
    }

    /// Shapes of `[weight, bias]`, or nothing for parameter-free layers.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerSpec::Conv(c) => vec![vec![c.out_channels, c.in_channels, c.kernel, c.kernel], vec![c.out_channels]],
            LayerSpec::ConvTranspose(c) => vec![vec![c.in_channels, c.out_channels, c.kernel, c.kernel], vec![c.out_channels]],
            LayerSpec::Relu | LayerSpec::Sigmoid => Vec::new(),
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv(c) | LayerSpec::ConvTranspose(c) => c.in_channels * c.kernel * c.kernel,
            LayerSpec::Relu | LayerSpec::Sigmoid => 1,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| NnError::ShapeMismatch {
            context: format!("{} layer {self:?}", self.name()),
            expected,
            actual: input.to_vec(),
        };
        match *self {
            LayerSpec::Dense { inputs, outputs } => match input {
                [n, w] if *w == inputs => Ok(vec![*n, outputs]),
                [n, ..] => Err(mismatch(vec![*n, inputs])),
                [] => Err(mismatch(vec![1, inputs])),
            },
            LayerSpec::Conv(c) => match input {
                [n, ch, h, w] if *ch == c.in_channels => {
                    let ho = c.conv_out(*h).ok_or_else(|| mismatch(vec![*n, c.in_channels, c.kernel, c.kernel]))?;
                    let wo = c.conv_out(*w).ok_or_else(|| mismatch(vec![*n, c.in_channels, c.kernel, c.kernel]))?;
                    Ok(vec![*n, c.out_channels, ho, wo])
                }
                [n, _, h, w] => Err(mismatch(vec![*n, c.in_channels, *h, *w])),
                _ => Err(mismatch(vec![1, c.in_channels, 0, 0])),
            },
            LayerSpec::ConvTranspose(c) => match input {
                [n, ch, h, w] if *ch == c.in_channels => {
                    let ho = c.transposed_out(*h).ok_or_else(|| mismatch(vec![*n, c.in_channels, *h, *w]))?;
                    let wo = c.transposed_out(*w).ok_or_else(|| mismatch(vec![*n, c.in_channels, *h, *w]))?;
                    Ok(vec![*n, c.out_channels, ho, wo])
                }
                [n, _, h, w] => Err(mismatch(vec![*n, c.in_channels, *h, *w])),
                _ => Err(mismatch(vec![1, c.in_channels, 0, 0])),
            },
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
        }
    }
}

/// A layer spec together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T = f32> {
    spec: LayerSpec,
    params: Vec<Tensor<T>>,
}

impl<T: Real> Layer<T> {
    /// He-uniform weights, zero biases.
    pub fn init(spec: LayerSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let bound = (6.0 / spec.fan_in() as f64).sqrt();
        let params = spec
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                if i == 0 {
                    Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-bound..bound)))
                } else {
                    Tensor::zeros(&shape)
                }
            })
            .collect();
        Ok(Layer { spec, params })
    }

    pub fn with_params(spec: LayerSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(NnError::Spec(format!(
                "{} layer takes {} parameter tensors, got {}",
                spec.name(),
                shapes.len(),
                params.len()
            )));
        }
        for (shape, p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(NnError::ShapeMismatch {
                    context: format!("{} layer parameter", spec.name()),
                    expected: shape.clone(),
                    actual: p.shape().to_vec(),
                });
            }
        }
        Ok(Layer { spec, params })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        Layer {
            spec: self.spec,
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        match self.spec {
            LayerSpec::Dense { .. } => dense_forward(&self.spec, &self.params[0], &self.params[1], input),
            LayerSpec::Conv(c) => conv_forward(&c, &self.params[0], &self.params[1], input),
            LayerSpec::ConvTranspose(c) => conv_transpose_forward(&c, &self.params[0], &self.params[1], input),
            LayerSpec::Relu => Ok(relu(input)),
            LayerSpec::Sigmoid => Ok(sigmoid(input)),
        }
    }

    /// Returns the gradient w.r.t. the input and one gradient per parameter tensor.
    pub fn backward(&self, input: &Tensor<T>, upstream: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let out_shape = self.spec.output_shape(input.shape())?;
        if upstream.shape() != out_shape.as_slice() {
            return Err(NnError::ShapeMismatch {
                context: format!("{} layer upstream gradient", self.spec.name()),
                expected: out_shape,
                actual: upstream.shape().to_vec(),
            });
        }
        match self.spec {
            LayerSpec::Dense { .. } => {
                let (dx, dw, db) = dense_backward(&self.params[0], input, upstream)?;
                Ok((dx, vec![dw, db]))
            }
            LayerSpec::Conv(c) => {
                let (dx, dw, db) = conv_backward(&c, &self.params[0], input, upstream)?;
                Ok((dx, vec![dw, db]))
            }
            LayerSpec::ConvTranspose(c) => {
                let (dx, dw, db) = conv_transpose_backward(&c, &self.params[0], input, upstream)?;
                Ok((dx, vec![dw, db]))
            }
            LayerSpec::Relu => Ok((relu_backward(input, upstream), Vec::new())),
            LayerSpec::Sigmoid => Ok((sigmoid_backward(input, upstream), Vec::new())),
        }
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward<T: Real>(x: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Real>(x: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| {
            let s = sigmoid_scalar(v);
            g * s * (T::one() - s)
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn check_input<T: Real>(spec: &LayerSpec, input: &Tensor<T>) -> Result<Vec<usize>> {
    spec.output_shape(input.shape())
}

pub fn dense_forward<T: Real>(spec: &LayerSpec, weight: &Tensor<T>, bias: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let out_shape = check_input(spec, x)?;
    let (n, inputs) = (x.shape()[0], x.shape()[1]);
    let outputs = out_shape[1];
    let mut y = Vec::with_capacity(n * outputs);
    for _ in 0..n {
        y.extend_from_slice(bias.data());
    }
    T::gemm(
        n,
        inputs,
        outputs,
        T::one(),
        x.data(),
        inputs as isize,
        1,
        weight.data(),
        1,
        inputs as isize,
        T::one(),
        &mut y,
        outputs as isize,
        1,
    );
    Ok(Tensor::from_parts(out_shape, y))
}

pub fn dense_backward<T: Real>(weight: &Tensor<T>, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (outputs, inputs) = (weight.shape()[0], weight.shape()[1]);
    let n = x.shape()[0];
    let mut dx = vec![T::zero(); n * inputs];
    T::gemm(
        n,
        outputs,
        inputs,
        T::one(),
        dy.data(),
        outputs as isize,
        1,
        weight.data(),
        inputs as isize,
        1,
        T::zero(),
        &mut dx,
        inputs as isize,
        1,
    );
    let mut dw = vec![T::zero(); outputs * inputs];
    T::gemm(
        outputs,
        n,
        inputs,
        T::one(),
        dy.data(),
        1,
        outputs as isize,
        x.data(),
        inputs as isize,
        1,
        T::zero(),
        &mut dw,
        inputs as isize,
        1,
    );
    let mut db = vec![T::zero(); outputs];
    for row in dy.data().chunks(outputs) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok((
        Tensor::from_parts(vec![n, inputs], dx),
        Tensor::from_parts(vec![outputs, inputs], dw),
        Tensor::from_parts(vec![outputs], db),
    ))
}

/// Patch layout shared by convolution and its transpose.
///
/// Describes a forward convolution from `channels x h x w` to `ho x wo` positions.
struct Patches {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl Patches {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `lo..hi` whose input column `ox*s + kj - p` lies inside the image.
    fn valid_columns(&self, kj: usize) -> (usize, usize) {
        let lo = self.p.saturating_sub(kj).div_ceil(self.s);
        let hi = if self.w + self.p > kj {
            ((self.w - 1 + self.p - kj) / self.s + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// `[C*k*k, N*ho*wo]` column matrix of a batch stored as `[N, C, h, w]`.
    fn im2col<T: Real>(&self, x: &[T], n: usize) -> Vec<T> {
        let l = self.positions();
        let cols_w = n * l;
        let mut cols = vec![T::zero(); self.rows() * cols_w];
        let plane = self.h * self.w;
        for c in 0..self.channels {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (c * self.k + ki) * self.k + kj;
                    let (lo, hi) = self.valid_columns(kj);
                    if lo == hi {
                        continue;
                    }
                    let dst_row = &mut cols[r * cols_w..(r + 1) * cols_w];
                    for b in 0..n {
                        let src = &x[(b * self.channels + c) * plane..(b * self.channels + c + 1) * plane];
                        for oy in 0..self.ho {
                            let iy = (oy * self.s + ki) as isize - self.p as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * self.w..(iy as usize + 1) * self.w];
                            let dst = &mut dst_row[b * l + oy * self.wo..b * l + (oy + 1) * self.wo];
                            for (d, ix) in dst[lo..hi].iter_mut().zip((lo * self.s + kj - self.p..).step_by(self.s)) {
                                *d = src_row[ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds a column matrix back into a `[N, C, h, w]` batch.
    fn col2im<T: Real>(&self, cols: &[T], n: usize) -> Vec<T> {
        let l = self.positions();
        let cols_w = n * l;
        let plane = self.h * self.w;
        let mut x = vec![T::zero(); n * self.channels * plane];
        for c in 0..self.channels {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (c * self.k + ki) * self.k + kj;
                    let (lo, hi) = self.valid_columns(kj);
                    if lo == hi {
                        continue;
                    }
                    let src_row = &cols[r * cols_w..(r + 1) * cols_w];
                    for b in 0..n {
                        let dst = &mut x[(b * self.channels + c) * plane..(b * self.channels + c + 1) * plane];
                        for oy in 0..self.ho {
                            let iy = (oy * self.s + ki) as isize - self.p as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let dst_row = &mut dst[iy as usize * self.w..(iy as usize + 1) * self.w];
                            let src = &src_row[b * l + oy * self.wo..b * l + (oy + 1) * self.wo];
                            for (&v, ix) in src[lo..hi].iter().zip((lo * self.s + kj - self.p..).step_by(self.s)) {
                                dst_row[ix] += v;
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// `[N, C, L]` batch to `[C, N*L]` matrix.
fn batch_to_matrix<T: Real>(x: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * l + b * l..ch * n * l + (b + 1) * l].copy_from_slice(&x[(b * c + ch) * l..(b * c + ch + 1) * l]);
        }
    }
    out
}

/// `[C, N*L]` matrix to `[N, C, L]` batch.
fn matrix_to_batch<T: Real>(m: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for ch in 0..c {
        for b in 0..n {
            out[(b * c + ch) * l..(b * c + ch + 1) * l].copy_from_slice(&m[ch * n * l + b * l..ch * n * l + (b + 1) * l]);
        }
    }
    out
}

fn add_channel_bias<T: Real>(y: &mut [T], bias: &[T], n: usize, l: usize) {
    let c = bias.len();
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate() {
            for v in &mut y[(b * c + ch) * l..(b * c + ch + 1) * l] {
                *v += bv;
            }
        }
    }
}

fn channel_sums<T: Real>(dy: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            *acc += dy[(b * c + ch) * l..(b * c + ch + 1) * l].iter().copied().sum::<T>();
        }
    }
    db
}

pub fn conv_forward<T: Real>(c: &ConvSpec, weight: &Tensor<T>, bias: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let out_shape = check_input(&LayerSpec::Conv(*c), x)?;
    let n = x.shape()[0];
    let pt = Patches {
        channels: c.in_channels,
        h: x.shape()[2],
        w: x.shape()[3],
        k: c.kernel,
        s: c.stride,
        p: c.padding,
        ho: out_shape[2],
        wo: out_shape[3],
    };
    let cols = pt.im2col(x.data(), n);
    let nl = n * pt.positions();
    let rows = pt.rows();
    let mut out = vec![T::zero(); c.out_channels * nl];
    T::gemm(
        c.out_channels,
        rows,
        nl,
        T::one(),
        weight.data(),
        rows as isize,
        1,
        &cols,
        nl as isize,
        1,
        T::zero(),
        &mut out,
        nl as isize,
        1,
    );
    let mut y = matrix_to_batch(&out, n, c.out_channels, pt.positions());
    add_channel_bias(&mut y, bias.data(), n, pt.positions());
    Ok(Tensor::from_parts(out_shape, y))
}

pub fn conv_backward<T: Real>(c: &ConvSpec, weight: &Tensor<T>, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let n = x.shape()[0];
    let pt = Patches {
        channels: c.in_channels,
        h: x.shape()[2],
        w: x.shape()[3],
        k: c.kernel,
        s: c.stride,
        p: c.padding,
        ho: dy.shape()[2],
        wo: dy.shape()[3],
    };
    let l = pt.positions();
    let nl = n * l;
    let rows = pt.rows();
    let oc = c.out_channels;
    let cols = pt.im2col(x.data(), n);
    let dy_m = batch_to_matrix(dy.data(), n, oc, l);

    let mut dw = vec![T::zero(); oc * rows];
    T::gemm(
        oc,
        nl,
        rows,
        T::one(),
        &dy_m,
        nl as isize,
        1,
        &cols,
        1,
        nl as isize,
        T::zero(),
        &mut dw,
        rows as isize,
        1,
    );
    let mut dcols = vec![T::zero(); rows * nl];
    T::gemm(
        rows,
        oc,
        nl,
        T::one(),
        weight.data(),
        1,
        rows as isize,
        &dy_m,
        nl as isize,
        1,
        T::zero(),
        &mut dcols,
        nl as isize,
        1,
    );
    let dx = pt.col2im(&dcols, n);
    let db = channel_sums(dy.data(), n, oc, l);
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(weight.shape().to_vec(), dw),
        Tensor::from_parts(vec![oc], db),
    ))
}

fn transposed_patches(c: &ConvSpec, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Patches {
    // The transposed layer's output is the input space of the equivalent forward conv.
    Patches {
        channels: c.out_channels,
        h: out_h,
        w: out_w,
        k: c.kernel,
        s: c.stride,
        p: c.padding,
        ho: in_h,
        wo: in_w,
    }
}

pub fn conv_transpose_forward<T: Real>(c: &ConvSpec, weight: &Tensor<T>, bias: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let out_shape = check_input(&LayerSpec::ConvTranspose(*c), x)?;
    let n = x.shape()[0];
    let pt = transposed_patches(c, x.shape()[2], x.shape()[3], out_shape[2], out_shape[3]);
    let l = pt.positions();
    let nl = n * l;
    let rows = pt.rows();
    let x_m = batch_to_matrix(x.data(), n, c.in_channels, l);
    let mut cols = vec![T::zero(); rows * nl];
    T::gemm(
        rows,
        c.in_channels,
        nl,
        T::one(),
        weight.data(),
        1,
        rows as isize,
        &x_m,
        nl as isize,
        1,
        T::zero(),
        &mut cols,
        nl as isize,
        1,
    );
    let mut y = pt.col2im(&cols, n);
    add_channel_bias(&mut y, bias.data(), n, out_shape[2] * out_shape[3]);
    Ok(Tensor::from_parts(out_shape, y))
}

pub fn conv_transpose_backward<T: Real>(c: &ConvSpec, weight: &Tensor<T>, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let n = x.shape()[0];
    let pt = transposed_patches(c, x.shape()[2], x.shape()[3], dy.shape()[2], dy.shape()[3]);
    let l = pt.positions();
    let nl = n * l;
    let rows = pt.rows();
    let ic = c.in_channels;
    let dcols = pt.im2col(dy.data(), n);
    let x_m = batch_to_matrix(x.data(), n, ic, l);

    let mut dx_m = vec![T::zero(); ic * nl];
    T::gemm(
        ic,
        rows,
        nl,
        T::one(),
        weight.data(),
        rows as isize,
        1,
        &dcols,
        nl as isize,
        1,
        T::zero(),
        &mut dx_m,
        nl as isize,
        1,
    );
    let mut dw = vec![T::zero(); ic * rows];
    T::gemm(
        ic,
        nl,
        rows,
        T::one(),
        &x_m,
        nl as isize,
        1,
        &dcols,
        1,
        nl as isize,
        T::zero(),
        &mut dw,
        rows as isize,
        1,
    );
    let db = channel_sums(dy.data(), n, c.out_channels, dy.shape()[2] * dy.shape()[3]);
    Ok((
        Tensor::from_parts(x.shape().to_vec(), matrix_to_batch(&dx_m, n, ic, l)),
        Tensor::from_parts(weight.shape().to_vec(), dw),
        Tensor::from_parts(vec![c.out_channels], db),
    ))
}
