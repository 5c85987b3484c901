//! A small feed-forward network with exact backpropagation.
//!
//! Only what a pixels-to-buttons policy needs: unpadded convolutions, dense
//! layers, ReLU and flatten, with one softmax head per action variable.
//! Convolutions go through im2col and a GEMM kernel. The network is generic
//! over [`Real`] so training can run in `f32` while gradient checks run in
//! `f64` on the same code path.

mod adam;
mod checkpoint;
mod gradcheck;

use std::fmt;
use std::ops::Range;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Action, ActionSpace};
use crate::rng::Rng64;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{CheckpointError, LayerEntry, ModelCheckpoint, CHECKPOINT_VERSION};
pub use gradcheck::{
    grad_check, gradcheck_suite, GradCheckConfig, GradCheckReport, LayerReport, SuiteEntry,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("layer {layer} ({spec}): input {input} is too small")]
    InputTooSmall {
        layer: usize,
        spec: String,
        input: Shape,
    },
    #[error("layer {layer} ({spec}) cannot take input {input}")]
    BadLayerInput {
        layer: usize,
        spec: String,
        input: Shape,
    },
    #[error("architecture must end in a dense layer with {expected} units (sum of head sizes), got {actual}")]
    HeadWidth { expected: usize, actual: usize },
    #[error("architecture needs at least one head")]
    NoHeads,
    #[error("input holds {actual} values, expected {expected} for batch {batch}")]
    InputShape {
        expected: usize,
        actual: usize,
        batch: usize,
    },
    #[error("got {actual} labels for a batch of {batch}")]
    LabelCount { batch: usize, actual: usize },
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("parameter vector holds {actual} values, architecture needs {expected}")]
    ParamCount { expected: usize, actual: usize },
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("optimizer state sized for {state} parameters, got {params}")]
    StateShape { state: usize, params: usize },
}

/// Scalar type the network runs in.
pub trait Real: Float + Default + Send + Sync + fmt::Debug + fmt::Display + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C = alpha·A·B + beta·C with A (m×k), B (k×n), C (m×n) given by
    /// row/column strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
struct Mat<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> Mat<'a, T> {
    fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// c (row-major m×n) = a·b + beta·c.
fn gemm<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "output too small");
    a.check();
    b.check();
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every index touched is bounds-checked by `check` above and the
    // output length assertion; the slices do not alias (c is &mut).
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flat(usize),
}

impl Shape {
    pub fn size(&self) -> usize {
        match *self {
            Shape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
            Shape::Flat(n) => n,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Image {
                channels,
                height,
                width,
            } => write!(f, "{channels}x{height}x{width}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Unpadded square convolution.
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Dense {
        units: usize,
    },
    Relu,
    Flatten,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
            } => write!(f, "conv({out_channels}, {kernel}x{kernel}, stride {stride})"),
            LayerSpec::Dense { units } => write!(f, "dense({units})"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

/// Floor((input − kernel) / stride) + 1, or `None` when the kernel does not
/// fit.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || input < kernel {
        None
    } else {
        Some((input - kernel) / stride + 1)
    }
}

/// Layer list plus input shape and head sizes: everything needed to rebuild
/// a model apart from its weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// (channels, height, width)
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// One softmax group per action variable, in variable order.
    pub heads: Vec<usize>,
}

fn head_sizes(space: &ActionSpace) -> Vec<usize> {
    space.cardinalities().into_iter().map(|c| c as usize).collect()
}

impl Architecture {
    /// conv(32, 8×8, s4) → relu → conv(64, 4×4, s2) → relu →
    /// conv(64, 3×3, s1) → relu → flatten → dense(512) → relu → dense(Σ d_i).
    pub fn nature_cnn(input: [usize; 3], space: &ActionSpace) -> Self {
        Self {
            input,
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 32,
                    kernel: 8,
                    stride: 4,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    out_channels: 64,
                    kernel: 4,
                    stride: 2,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    out_channels: 64,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 512 },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    units: space.total_outputs(),
                },
            ],
            heads: head_sizes(space),
        }
    }

    /// Two-conv stack for low-resolution inputs (21×21 and up):
    /// conv(16, 3×3, s1) → relu → conv(32, 3×3, s2) → relu → flatten →
    /// dense(128) → relu → dense(Σ d_i).
    pub fn compact_cnn(input: [usize; 3], space: &ActionSpace) -> Self {
        Self {
            input,
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 128 },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    units: space.total_outputs(),
                },
            ],
            heads: head_sizes(space),
        }
    }

    pub fn input_shape(&self) -> Shape {
        Shape::Image {
            channels: self.input[0],
            height: self.input[1],
            width: self.input[2],
        }
    }

    pub fn output_width(&self) -> usize {
        self.heads.iter().sum()
    }

    /// Infers every layer's shapes and parameter ranges.
    pub fn resolve(&self) -> Result<Vec<ResolvedLayer>, NnError> {
        if self.heads.is_empty() || self.heads.iter().any(|&h| h == 0) {
            return Err(NnError::NoHeads);
        }
        let mut shape = self.input_shape();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let bad = |input| NnError::BadLayerInput {
                layer: i,
                spec: spec.to_string(),
                input,
            };
            let (output, wlen, blen) = match (*spec, shape) {
                (
                    LayerSpec::Conv2d {
                        out_channels,
                        kernel,
                        stride,
                    },
                    Shape::Image {
                        channels,
                        height,
                        width,
                    },
                ) => {
                    let too_small = || NnError::InputTooSmall {
                        layer: i,
                        spec: spec.to_string(),
                        input: shape,
                    };
                    let oh = conv_output_dim(height, kernel, stride).ok_or_else(too_small)?;
                    let ow = conv_output_dim(width, kernel, stride).ok_or_else(too_small)?;
                    if out_channels == 0 {
                        return Err(bad(shape));
                    }
                    (
                        Shape::Image {
                            channels: out_channels,
                            height: oh,
                            width: ow,
                        },
                        out_channels * channels * kernel * kernel,
                        out_channels,
                    )
                }
                (LayerSpec::Dense { units }, Shape::Flat(n)) if units > 0 => {
                    (Shape::Flat(units), units * n, units)
                }
                (LayerSpec::Relu, s) => (s, 0, 0),
                (LayerSpec::Flatten, s) => (Shape::Flat(s.size()), 0, 0),
                (_, s) => return Err(bad(s)),
            };
            out.push(ResolvedLayer {
                spec: *spec,
                input: shape,
                output,
                weights: offset..offset + wlen,
                bias: offset + wlen..offset + wlen + blen,
            });
            offset += wlen + blen;
            shape = output;
        }
        let expected = self.output_width();
        match self.layers.last() {
            Some(LayerSpec::Dense { units }) if *units == expected => Ok(out),
            Some(LayerSpec::Dense { units }) => Err(NnError::HeadWidth {
                expected,
                actual: *units,
            }),
            _ => Err(NnError::HeadWidth {
                expected,
                actual: shape.size(),
            }),
        }
    }

    pub fn param_count(&self) -> Result<usize, NnError> {
        Ok(self.resolve()?.last().map_or(0, |l| l.bias.end))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedLayer {
    pub spec: LayerSpec,
    pub input: Shape,
    pub output: Shape,
    /// Range of this layer's weights in the flat parameter vector.
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

impl ResolvedLayer {
    pub fn has_params(&self) -> bool {
        !self.weights.is_empty()
    }

    /// Fan-in used for initialisation.
    fn fan_in(&self) -> usize {
        match (self.spec, self.input) {
            (LayerSpec::Conv2d { kernel, .. }, Shape::Image { channels, .. }) => {
                channels * kernel * kernel
            }
            (LayerSpec::Dense { .. }, Shape::Flat(n)) => n,
            _ => 0,
        }
    }
}

/// Names like `conv1`, `dense2` for the parameterised layers.
pub fn layer_names(layers: &[ResolvedLayer]) -> Vec<String> {
    let (mut conv, mut dense) = (0, 0);
    layers
        .iter()
        .map(|l| match l.spec {
            LayerSpec::Conv2d { .. } => {
                conv += 1;
                format!("conv{conv}")
            }
            LayerSpec::Dense { .. } => {
                dense += 1;
                format!("dense{dense}")
            }
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Flatten => "flatten".into(),
        })
        .collect()
}

/// Layer stack with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    arch: Architecture,
    layers: Vec<ResolvedLayer>,
    params: Vec<T>,
}

/// The training-precision policy network p(a|s).
pub type PolicyModel = Model<f32>;

/// Builds the Nature-DQN stack for `input` = (3, H, W) with fan-in
/// initialisation from `seed`.
pub fn build_nature_cnn(
    input: [usize; 3],
    space: &ActionSpace,
    seed: u64,
) -> Result<PolicyModel, NnError> {
    Model::init(Architecture::nature_cnn(input, space), seed)
}

impl<T: Real> Model<T> {
    pub fn zeros(arch: Architecture) -> Result<Self, NnError> {
        let layers = arch.resolve()?;
        let n = layers.last().map_or(0, |l| l.bias.end);
        Ok(Self {
            arch,
            layers,
            params: vec![T::zero(); n],
        })
    }

    /// Weights uniform in ±sqrt(1/fan_in); biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, NnError> {
        let mut m = Self::zeros(arch)?;
        let mut rng = Rng64::new(seed);
        for l in &m.layers {
            if !l.has_params() {
                continue;
            }
            let bound = (1.0 / l.fan_in() as f64).sqrt();
            for w in &mut m.params[l.weights.clone()] {
                *w = T::from_f64(rng.uniform(-bound, bound));
            }
        }
        Ok(m)
    }

    pub fn from_params(arch: Architecture, params: Vec<T>) -> Result<Self, NnError> {
        let mut m = Self::zeros(arch)?;
        if params.len() != m.params.len() {
            return Err(NnError::ParamCount {
                expected: m.params.len(),
                actual: params.len(),
            });
        }
        m.params = params;
        Ok(m)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|&p| U::from_f64(p.as_f64())).collect(),
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[ResolvedLayer] {
        &self.layers
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn heads(&self) -> &[usize] {
        &self.arch.heads
    }

    pub fn input_size(&self) -> usize {
        self.arch.input_shape().size()
    }

    pub fn output_width(&self) -> usize {
        self.arch.output_width()
    }

    /// Runs the network on `batch` inputs laid out (B, C, H, W).
    pub fn forward(&self, input: &[T], batch: usize) -> Result<Activations<T>, NnError> {
        let expected = self.input_size() * batch;
        if input.len() != expected {
            return Err(NnError::InputShape {
                expected,
                actual: input.len(),
                batch,
            });
        }
        let mut outputs: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        let mut cols: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let x: &[T] = if i == 0 { input } else { &outputs[i - 1] };
            let (y, c) = self.layer_forward(l, x, batch);
            outputs.push(y);
            cols.push(c);
        }
        Ok(Activations {
            batch,
            input: input.to_vec(),
            outputs,
            cols,
        })
    }

    fn layer_forward(&self, l: &ResolvedLayer, x: &[T], batch: usize) -> (Vec<T>, Vec<T>) {
        let p = &self.params;
        match (l.spec, l.input, l.output) {
            (
                LayerSpec::Conv2d { kernel, stride, .. },
                Shape::Image {
                    channels,
                    height,
                    width,
                },
                Shape::Image {
                    channels: oc,
                    height: oh,
                    width: ow,
                },
            ) => {
                let ckk = channels * kernel * kernel;
                let pos = oh * ow;
                let in_size = channels * height * width;
                let mut cols = vec![T::zero(); batch * ckk * pos];
                let mut y = vec![T::zero(); batch * oc * pos];
                let w = Mat::row_major(&p[l.weights.clone()], oc, ckk);
                let bias = &p[l.bias.clone()];
                for b in 0..batch {
                    let col = &mut cols[b * ckk * pos..(b + 1) * ckk * pos];
                    im2col(
                        &x[b * in_size..(b + 1) * in_size],
                        (channels, height, width),
                        kernel,
                        stride,
                        (oh, ow),
                        col,
                    );
                    let yb = &mut y[b * oc * pos..(b + 1) * oc * pos];
                    gemm(w, Mat::row_major(col, ckk, pos), T::zero(), yb);
                    for (o, row) in yb.chunks_exact_mut(pos).enumerate() {
                        let bo = bias[o];
                        row.iter_mut().for_each(|v| *v = *v + bo);
                    }
                }
                (y, cols)
            }
            (LayerSpec::Dense { units }, Shape::Flat(n), _) => {
                let mut y = vec![T::zero(); batch * units];
                let w = Mat::row_major(&p[l.weights.clone()], units, n);
                gemm(Mat::row_major(x, batch, n), w.t(), T::zero(), &mut y);
                let bias = &p[l.bias.clone()];
                for row in y.chunks_exact_mut(units) {
                    row.iter_mut().zip(bias).for_each(|(v, &b)| *v = *v + b);
                }
                (y, Vec::new())
            }
            (LayerSpec::Relu, _, _) => (
                x.iter()
                    .map(|&v| if v > T::zero() { v } else { T::zero() })
                    .collect(),
                Vec::new(),
            ),
            (LayerSpec::Flatten, _, _) => (x.to_vec(), Vec::new()),
            _ => unreachable!("shapes were validated by resolve"),
        }
    }

    /// Gradient of the loss with respect to every parameter, given the
    /// gradient with respect to the logits.
    pub fn backward(&self, acts: &Activations<T>, dlogits: &[T]) -> Vec<T> {
        let batch = acts.batch;
        let mut grad = vec![T::zero(); self.params.len()];
        let mut dy = dlogits.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let x: &[T] = if i == 0 { &acts.input } else { &acts.outputs[i - 1] };
            let need_dx = i > 0;
            dy = self.layer_backward(l, x, &acts.cols[i], &dy, batch, &mut grad, need_dx);
        }
        grad
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        l: &ResolvedLayer,
        x: &[T],
        cols: &[T],
        dy: &[T],
        batch: usize,
        grad: &mut [T],
        need_dx: bool,
    ) -> Vec<T> {
        let p = &self.params;
        match (l.spec, l.input, l.output) {
            (
                LayerSpec::Conv2d { kernel, stride, .. },
                Shape::Image {
                    channels,
                    height,
                    width,
                },
                Shape::Image {
                    channels: oc,
                    height: oh,
                    width: ow,
                },
            ) => {
                let ckk = channels * kernel * kernel;
                let pos = oh * ow;
                let in_size = channels * height * width;
                let w = Mat::row_major(&p[l.weights.clone()], oc, ckk);
                let mut dx = if need_dx {
                    vec![T::zero(); batch * in_size]
                } else {
                    Vec::new()
                };
                let mut dcol = vec![T::zero(); ckk * pos];
                let (gw, gb) = grad[l.weights.start..l.bias.end].split_at_mut(l.weights.len());
                for b in 0..batch {
                    let dyb = Mat::row_major(&dy[b * oc * pos..(b + 1) * oc * pos], oc, pos);
                    let col = Mat::row_major(&cols[b * ckk * pos..(b + 1) * ckk * pos], ckk, pos);
                    gemm(dyb, col.t(), T::one(), gw);
                    for (o, row) in dyb.data.chunks_exact(pos).enumerate() {
                        gb[o] = row.iter().fold(gb[o], |acc, &v| acc + v);
                    }
                    if need_dx {
                        gemm(w.t(), dyb, T::zero(), &mut dcol);
                        col2im(
                            &dcol,
                            (channels, height, width),
                            kernel,
                            stride,
                            (oh, ow),
                            &mut dx[b * in_size..(b + 1) * in_size],
                        );
                    }
                }
                dx
            }
            (LayerSpec::Dense { units }, Shape::Flat(n), _) => {
                let w = Mat::row_major(&p[l.weights.clone()], units, n);
                let dym = Mat::row_major(dy, batch, units);
                let (gw, gb) = grad[l.weights.start..l.bias.end].split_at_mut(l.weights.len());
                gemm(dym.t(), Mat::row_major(x, batch, n), T::zero(), gw);
                for row in dy.chunks_exact(units) {
                    gb.iter_mut().zip(row).for_each(|(g, &v)| *g = *g + v);
                }
                if need_dx {
                    let mut dx = vec![T::zero(); batch * n];
                    gemm(dym, w, T::zero(), &mut dx);
                    dx
                } else {
                    Vec::new()
                }
            }
            (LayerSpec::Relu, _, _) => x
                .iter()
                .zip(dy)
                .map(|(&xi, &g)| if xi > T::zero() { g } else { T::zero() })
                .collect(),
            (LayerSpec::Flatten, _, _) => dy.to_vec(),
            _ => unreachable!("shapes were validated by resolve"),
        }
    }

    fn check_labels(&self, actions: &[Action], batch: usize) -> Result<(), NnError> {
        if actions.len() != batch {
            return Err(NnError::LabelCount {
                batch,
                actual: actions.len(),
            });
        }
        let heads = self.heads();
        for a in actions {
            if a.indices.len() != heads.len()
                || a.indices.iter().zip(heads).any(|(&i, &h)| i as usize >= h)
            {
                return Err(NnError::InvalidLabel(format!(
                    "{:?} for heads {:?}",
                    a.indices, heads
                )));
            }
        }
        Ok(())
    }

    /// ½·λ·‖w‖² over conv and dense weights (biases excluded).
    pub fn l2_penalty(&self, l2: f64) -> f64 {
        if l2 == 0.0 {
            return 0.0;
        }
        let sq: f64 = self
            .layers
            .iter()
            .flat_map(|l| self.params[l.weights.clone()].iter())
            .map(|&w| w.as_f64() * w.as_f64())
            .sum();
        0.5 * l2 * sq
    }

    /// Mean over the batch of the summed per-head cross-entropy, plus the L2
    /// penalty. Runs only the forward pass.
    pub fn loss(&self, input: &[T], batch: usize, actions: &[Action], l2: f64) -> Result<f64, NnError> {
        self.check_labels(actions, batch)?;
        let acts = self.forward(input, batch)?;
        let (data, _) = cross_entropy::<T>(acts.logits(), self.heads(), actions, false);
        Ok(data + self.l2_penalty(l2))
    }

    /// Loss as in [`Model::loss`] and its exact gradient.
    pub fn loss_and_grad(
        &self,
        input: &[T],
        batch: usize,
        actions: &[Action],
        l2: f64,
    ) -> Result<LossGrad<T>, NnError> {
        self.check_labels(actions, batch)?;
        let acts = self.forward(input, batch)?;
        let (data_loss, dlogits) = cross_entropy::<T>(acts.logits(), self.heads(), actions, true);
        let mut grad = self.backward(&acts, &dlogits);
        let l2_loss = self.l2_penalty(l2);
        if l2 != 0.0 {
            let lam = T::from_f64(l2);
            for l in &self.layers {
                for i in l.weights.clone() {
                    grad[i] = grad[i] + lam * self.params[i];
                }
            }
        }
        Ok(LossGrad {
            loss: data_loss + l2_loss,
            data_loss,
            l2_loss,
            grad,
        })
    }
}

/// Mean over rows of Σ_heads −log softmax(head)[label], and (optionally) its
/// gradient with respect to the logits.
fn cross_entropy<T: Real>(
    logits: &[T],
    heads: &[usize],
    actions: &[Action],
    want_grad: bool,
) -> (f64, Vec<T>) {
    let width: usize = heads.iter().sum();
    let batch = actions.len();
    let inv_b = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = if want_grad {
        vec![T::zero(); logits.len()]
    } else {
        Vec::new()
    };
    for (b, action) in actions.iter().enumerate() {
        let row = &logits[b * width..(b + 1) * width];
        let mut start = 0;
        for (h, &size) in heads.iter().enumerate() {
            let group = &row[start..start + size];
            let label = action.indices[h] as usize;
            let max = group
                .iter()
                .map(|v| v.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = group.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let log_z = max + sum.ln();
            loss += log_z - group[label].as_f64();
            if want_grad {
                let g = &mut grad[b * width + start..b * width + start + size];
                for (j, gj) in g.iter_mut().enumerate() {
                    let p = (group[j].as_f64() - log_z).exp();
                    let onehot = if j == label { 1.0 } else { 0.0 };
                    *gj = T::from_f64((p - onehot) * inv_b);
                }
            }
            start += size;
        }
    }
    (loss * inv_b, grad)
}

/// Softmax of each head's logits (computed in f64).
pub fn head_probabilities<T: Real>(logits_row: &[T], heads: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(heads.len());
    let mut start = 0;
    for &size in heads {
        let group: Vec<f64> = logits_row[start..start + size]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let max = group.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = group.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.push(exps.into_iter().map(|e| e / z).collect());
        start += size;
    }
    out
}

#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub loss: f64,
    pub data_loss: f64,
    pub l2_loss: f64,
    pub grad: Vec<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Activations<T> {
    batch: usize,
    input: Vec<T>,
    outputs: Vec<Vec<T>>,
    /// im2col buffers of the convolution layers (empty elsewhere).
    cols: Vec<Vec<T>>,
}

impl<T: Real> Activations<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// (B × Σ d_i) logits, row-major.
    pub fn logits(&self) -> &[T] {
        self.outputs.last().map_or(&[], Vec::as_slice)
    }

    pub fn logits_row(&self, b: usize) -> &[T] {
        let w = self.logits().len() / self.batch;
        &self.logits()[b * w..(b + 1) * w]
    }

    /// Output of layer `i`.
    pub fn layer_output(&self, i: usize) -> &[T] {
        &self.outputs[i]
    }

    /// Sign (−1, 0, +1) of every value entering a ReLU, in layer order.
    pub fn relu_signs(&self, layers: &[ResolvedLayer]) -> Vec<i8> {
        let mut out = Vec::new();
        for (i, l) in layers.iter().enumerate() {
            if l.spec == LayerSpec::Relu {
                let x: &[T] = if i == 0 { &self.input } else { &self.outputs[i - 1] };
                out.extend(x.iter().map(|&v| {
                    if v > T::zero() {
                        1
                    } else if v < T::zero() {
                        -1
                    } else {
                        0
                    }
                }));
            }
        }
        out
    }
}

fn im2col<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    s: usize,
    (oh, ow): (usize, usize),
    out: &mut [T],
) {
    let pos = oh * ow;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut out[row * pos..(row + 1) * pos];
                for oy in 0..oh {
                    let src = &x[ch * h * w + (oy * s + ky) * w..];
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, v) in d.iter_mut().enumerate() {
                        *v = src[ox * s + kx];
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    s: usize,
    (oh, ow): (usize, usize),
    out: &mut [T],
) {
    let pos = oh * ow;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * pos..(row + 1) * pos];
                for oy in 0..oh {
                    let base = ch * h * w + (oy * s + ky) * w + kx;
                    for ox in 0..ow {
                        let i = base + ox * s;
                        out[i] = out[i] + src[oy * ow + ox];
                    }
                }
            }
        }
    }
}
