//! Small feed-forward classifiers over flat parameter vectors.
//!
//! The whole simulator treats model parameters as one flat `Vec<f64>` so that
//! client deltas, control variates and momentum buffers are plain vector
//! arithmetic. The layout is fixed: for each layer, the weight matrix
//! (`d_in x d_out`, row-major) followed by the bias (`d_out`). [`forward`]
//! ends in a max-shifted softmax; [`backprop`] takes the loss gradient with
//! respect to the output *probabilities* and applies the softmax Jacobian
//! internally, so objective code never has to reason about logits.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::config(
                "activation",
                format!("expected `tanh` or `relu`, got `{other}`"),
            )),
        }
    }
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative as a function of the pre-activation value.
    fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Architecture description: layer widths plus the hidden activation.
///
/// `dims = [input, hidden..., classes]`. The final layer is always linear
/// followed by softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    dims: Vec<usize>,
    activation: Activation,
}

impl ModelSpec {
    pub fn new(dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output dims, got {:?}",
                dims
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "all layer dims must be positive, got {:?}",
                dims
            )));
        }
        let classes = *dims.last().unwrap();
        if classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "softmax output needs >= 2 classes, got {classes}"
            )));
        }
        Ok(ModelSpec { dims, activation })
    }

    /// Convenience constructor: `input -> hidden... -> classes`.
    pub fn mlp(
        input: usize,
        hidden: &[usize],
        classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(classes);
        ModelSpec::new(dims, activation)
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// `(d_in, d_out)` per layer, in order.
    pub fn layer_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.dims.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().map(|(i, o)| i * o + o).sum()
    }
}

/// Flat parameter/gradient/buffer vector.
///
/// Entries are finite by construction ([`ParamVector::from_vec`] checks);
/// arithmetic helpers panic on length mismatch since that is always a
/// programming error, not an input error.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(ParamVector(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn fill_zero(&mut self) {
        self.0.fill(0.0);
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &ParamVector) {
        assert_eq!(self.len(), other.len(), "add_scaled length mismatch");
        for (x, y) in self.0.iter_mut().zip(&other.0) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for x in &mut self.0 {
            *x *= a;
        }
    }

    pub fn add(&self, other: &ParamVector) -> ParamVector {
        let mut out = self.clone();
        out.add_scaled(1.0, other);
        out
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        let mut out = self.clone();
        out.add_scaled(-1.0, other);
        out
    }

    pub fn scaled(&self, a: f64) -> ParamVector {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot length mismatch");
        self.0.iter().zip(&other.0).map(|(x, y)| x * y).sum()
    }

    /// Squared Euclidean norm.
    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Row-stochastic matrix: each row is a distribution over classes.
///
/// Invariant: entries nonnegative, every row sums to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Array2<f64>);

impl ProbMatrix {
    const ROW_SUM_TOL: f64 = 1e-9;

    pub fn new(rows: Array2<f64>) -> Result<Self> {
        for (r, row) in rows.outer_iter().enumerate() {
            let mut sum = 0.0;
            for &v in row {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::NonFinite(format!(
                        "probability row {r} has invalid entry {v}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > Self::ROW_SUM_TOL {
                return Err(Error::NonFinite(format!(
                    "probability row {r} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(ProbMatrix(rows))
    }

    /// Trusted constructor for rows already normalized by the caller
    /// (softmax output, simplex projection).
    pub(crate) fn from_normalized(rows: Array2<f64>) -> Self {
        debug_assert!(rows.outer_iter().all(|row| {
            let s: f64 = row.sum();
            (s - 1.0).abs() <= 1e-6 && row.iter().all(|&v| v >= -1e-12)
        }));
        ProbMatrix(rows)
    }

    pub fn uniform(rows: usize, classes: usize) -> Self {
        ProbMatrix(Array2::from_elem((rows, classes), 1.0 / classes as f64))
    }

    /// One-hot encode integer labels.
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        let mut m = Array2::zeros((labels.len(), classes));
        for (r, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::DimMismatch {
                    context: "one_hot label",
                    expected: classes,
                    got: y,
                });
            }
            m[(r, y)] = 1.0;
        }
        Ok(ProbMatrix(m))
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    /// Row-wise argmax; ties break to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.0
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                let mut best_v = row[0];
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > best_v {
                        best = j;
                        best_v = v;
                    }
                }
                best
            })
            .collect()
    }
}

/// Weight view plus bias slice for one layer of the flat vector.
fn layer_views<'a>(spec: &ModelSpec, flat: &'a [f64]) -> Vec<(ArrayView2<'a, f64>, &'a [f64])> {
    let mut out = Vec::with_capacity(spec.n_layers());
    let mut off = 0;
    for (d_in, d_out) in spec.layer_shapes() {
        let w = ArrayView2::from_shape((d_in, d_out), &flat[off..off + d_in * d_out])
            .expect("layer shape matches slice");
        off += d_in * d_out;
        let b = &flat[off..off + d_out];
        off += d_out;
        out.push((w, b));
    }
    out
}

fn check_forward_args(spec: &ModelSpec, params: &ParamVector, inputs: &Array2<f64>) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::DimMismatch {
            context: "parameter vector",
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    if inputs.ncols() != spec.input_dim() {
        return Err(Error::DimMismatch {
            context: "input features",
            expected: spec.input_dim(),
            got: inputs.ncols(),
        });
    }
    Ok(())
}

/// Max-shifted softmax over rows, in place.
fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.outer_iter_mut() {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    z
}

struct ForwardTrace {
    /// Pre-activations per layer.
    pre: Vec<Array2<f64>>,
    /// Post-activations per hidden layer (aligned with `pre`; the last
    /// entry is the softmax output).
    post: Vec<Array2<f64>>,
}

fn forward_trace(spec: &ModelSpec, params: &ParamVector, inputs: &Array2<f64>) -> ForwardTrace {
    let layers = layer_views(spec, params.as_slice());
    let n = layers.len();
    let mut pre = Vec::with_capacity(n);
    let mut post = Vec::with_capacity(n);
    let mut a = inputs.clone();
    for (l, (w, b)) in layers.iter().enumerate() {
        let mut z = a.dot(w);
        for mut row in z.outer_iter_mut() {
            for (v, bias) in row.iter_mut().zip(*b) {
                *v += bias;
            }
        }
        pre.push(z.clone());
        if l + 1 == n {
            post.push(softmax_rows(z));
        } else {
            z.mapv_inplace(|v| spec.activation.apply(v));
            post.push(z);
        }
        a = post[l].clone();
    }
    ForwardTrace { pre, post }
}

/// Runs the network on a batch (`rows x input_dim`) and returns per-row class
/// probabilities.
pub fn forward(spec: &ModelSpec, params: &ParamVector, inputs: &Array2<f64>) -> Result<ProbMatrix> {
    check_forward_args(spec, params, inputs)?;
    let trace = forward_trace(spec, params, inputs);
    let probs = trace.post.into_iter().last().expect("at least one layer");
    if probs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forward pass output".into()));
    }
    Ok(ProbMatrix::from_normalized(probs))
}

/// Gradient of `sum_rows <output_grad_row, probs_row>` with respect to the
/// flat parameters.
///
/// `output_grad` is the loss gradient with respect to the softmax
/// *probabilities* (same shape as the forward output); the softmax Jacobian
/// is applied here. Any per-batch scaling (e.g. `1/|B|`) must already be
/// baked into `output_grad`.
pub fn backprop(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &Array2<f64>,
    output_grad: &Array2<f64>,
) -> Result<ParamVector> {
    check_forward_args(spec, params, inputs)?;
    if output_grad.nrows() != inputs.nrows() || output_grad.ncols() != spec.n_classes() {
        return Err(Error::DimMismatch {
            context: "output gradient",
            expected: inputs.nrows() * spec.n_classes(),
            got: output_grad.nrows() * output_grad.ncols(),
        });
    }

    let trace = forward_trace(spec, params, inputs);
    let layers = layer_views(spec, params.as_slice());
    let n = layers.len();

    // Softmax Jacobian: dZ_ij = p_ij * (G_ij - sum_c G_ic p_ic).
    let probs = &trace.post[n - 1];
    let mut dz = Array2::zeros(probs.raw_dim());
    for ((mut dz_row, p_row), g_row) in dz
        .outer_iter_mut()
        .zip(probs.outer_iter())
        .zip(output_grad.outer_iter())
    {
        let s: f64 = g_row.iter().zip(p_row.iter()).map(|(g, p)| g * p).sum();
        for ((d, &p), &g) in dz_row.iter_mut().zip(p_row.iter()).zip(g_row.iter()) {
            *d = p * (g - s);
        }
    }

    let mut grad = vec![0.0; spec.param_count()];
    // Walk layers backwards, writing dW/db into the flat layout.
    let mut offsets = Vec::with_capacity(n);
    {
        let mut off = 0;
        for (d_in, d_out) in spec.layer_shapes() {
            offsets.push(off);
            off += d_in * d_out + d_out;
        }
    }
    for l in (0..n).rev() {
        let a_prev = if l == 0 { inputs } else { &trace.post[l - 1] };
        let dw = a_prev.t().dot(&dz);
        let db = dz.sum_axis(Axis(0));
        let (d_in, d_out) = (dw.nrows(), dw.ncols());
        let off = offsets[l];
        grad[off..off + d_in * d_out].copy_from_slice(dw.as_slice().expect("row-major"));
        grad[off + d_in * d_out..off + d_in * d_out + d_out]
            .copy_from_slice(db.as_slice().expect("contiguous"));
        if l > 0 {
            let mut da = dz.dot(&layers[l].0.t());
            for (mut da_row, z_row) in da.outer_iter_mut().zip(trace.pre[l - 1].outer_iter()) {
                for (d, &z) in da_row.iter_mut().zip(z_row.iter()) {
                    *d *= spec.activation.slope(z);
                }
            }
            dz = da;
        }
    }
    ParamVector::from_vec(grad)
}

/// Central-difference gradient of an arbitrary scalar function of the
/// parameters. O(2 * n_params) evaluations — test/diagnostic use only.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamVector, step: f64) -> Result<ParamVector>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut grad = vec![0.0; params.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + step;
        let up = f(&probe)?;
        probe.as_mut_slice()[i] = orig - step;
        let down = f(&probe)?;
        probe.as_mut_slice()[i] = orig;
        *g = (up - down) / (2.0 * step);
    }
    ParamVector::from_vec(grad)
}

/// Seeded uniform init: every parameter of layer `l` (weights and bias) is
/// drawn from `[-a, a]` with `a = sqrt(6 / (d_in + d_out))`, in layout order.
pub fn init_params<R: Rng>(spec: &ModelSpec, rng: &mut R) -> ParamVector {
    let mut values = Vec::with_capacity(spec.param_count());
    for (d_in, d_out) in spec.layer_shapes() {
        let a = (6.0 / (d_in + d_out) as f64).sqrt();
        for _ in 0..d_in * d_out + d_out {
            values.push(rng.random::<f64>() * 2.0 * a - a);
        }
    }
    ParamVector(values)
}
