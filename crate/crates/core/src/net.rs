//! Multilayer-perceptron velocity model `v(xi, y, t)` with explicit reverse-mode
//! gradients of the flow-matching regression loss.
//!
//! Parameters live in one flat `f64` array. For each linear layer, in order,
//! the weight matrix is stored row-major as `(out, in)` followed by its bias of
//! length `out`. The input of the first layer is `[xi | y | time_features(t)]`.

use std::f64::consts::PI;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Number of Fourier time features appended to every input row.
pub const TIME_FEATURES: usize = 4;

/// `[t - 0.5, cos(2πt), sin(2πt), -cos(4πt)]`.
pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    [
        t - 0.5,
        (2.0 * PI * t).cos(),
        (2.0 * PI * t).sin(),
        -(4.0 * PI * t).cos(),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Swish,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Swish => x * sigmoid(x),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Swish => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Swish),
            _ => None,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "swish" => Ok(Activation::Swish),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Swish => "swish",
        })
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Architecture of the velocity network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Dimension `d` of the inferred variable (and of the output).
    pub state_dim: usize,
    /// Dimension `D` of the measurement.
    pub cond_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
}

/// One weight or bias block inside the flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    inp: usize,
    out: usize,
    w_off: usize,
    b_off: usize,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::InvalidArgument(format!(
                "network dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.cond_dim + TIME_FEATURES
    }

    pub fn output_dim(&self) -> usize {
        self.state_dim
    }

    fn shapes(&self) -> Vec<LayerShape> {
        let mut dims = vec![self.input_dim()];
        dims.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        dims.push(self.output_dim());
        let mut off = 0;
        dims.windows(2)
            .map(|w| {
                let s = LayerShape {
                    inp: w[0],
                    out: w[1],
                    w_off: off,
                    b_off: off + w[0] * w[1],
                };
                off += w[0] * w[1] + w[1];
                s
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|s| s.inp * s.out + s.out).sum()
    }

    /// Ordered description of the flat parameter array.
    pub fn layout(&self) -> Vec<Segment> {
        self.shapes()
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                [
                    Segment {
                        name: format!("layer{i}.weight"),
                        offset: s.w_off,
                        rows: s.out,
                        cols: s.inp,
                    },
                    Segment {
                        name: format!("layer{i}.bias"),
                        offset: s.b_off,
                        rows: s.out,
                        cols: 1,
                    },
                ]
            })
            .collect()
    }

    /// Kaiming-uniform weights scaled by fan-in, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterArray {
        let mut values = vec![0.0; self.param_count()];
        for s in self.shapes() {
            let bound = (6.0 / s.inp as f64).sqrt();
            for w in &mut values[s.w_off..s.b_off] {
                *w = rng.random_range(-bound..bound);
            }
        }
        ParameterArray { values }
    }
}

/// Flat parameter vector of an [`MlpConfig`] network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterArray {
    pub values: Vec<f64>,
}

impl ParameterArray {
    pub fn zeros(cfg: &MlpConfig) -> Self {
        Self {
            values: vec![0.0; cfg.param_count()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::InvalidArgument(format!(
                "parameter byte length {} is not a multiple of 8",
                bytes.len()
            )));
        }
        Ok(Self {
            values: bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        })
    }
}

/// Minibatch for the flow-matching loss: source `z`, target `x`, measurement `y`, time `t`.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub z: Array2<f64>,
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub t: Array1<f64>,
}

impl FlowBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn validate(&self, cfg: &MlpConfig) -> Result<()> {
        let b = self.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        check_dim(b, self.z.nrows(), "batch rows of z")?;
        check_dim(b, self.x.nrows(), "batch rows of x")?;
        check_dim(b, self.y.nrows(), "batch rows of y")?;
        check_dim(cfg.state_dim, self.z.ncols(), "source dimension")?;
        check_dim(cfg.state_dim, self.x.ncols(), "target dimension")?;
        check_dim(cfg.cond_dim, self.y.ncols(), "measurement dimension")?;
        let finite = self.z.iter().all(|v| v.is_finite())
            && self.x.iter().all(|v| v.is_finite())
            && self.y.iter().all(|v| v.is_finite())
            && self.t.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("non-finite entry in training batch".into()));
        }
        Ok(())
    }

    /// Network inputs `[I_t(z, x) | y | features(t)]` and regression targets `x - z`.
    fn inputs_and_targets(&self, cfg: &MlpConfig) -> (Array2<f64>, Array2<f64>) {
        let (b, d) = (self.len(), cfg.state_dim);
        let mut input = Array2::zeros((b, cfg.input_dim()));
        let mut target = Array2::zeros((b, d));
        for r in 0..b {
            let t = self.t[r];
            let mut row = input.row_mut(r);
            for j in 0..d {
                let (z, x) = (self.z[[r, j]], self.x[[r, j]]);
                row[j] = (1.0 - t) * z + t * x;
                target[[r, j]] = x - z;
            }
            for j in 0..cfg.cond_dim {
                row[d + j] = self.y[[r, j]];
            }
            for (j, f) in time_features(t).into_iter().enumerate() {
                row[d + cfg.cond_dim + j] = f;
            }
        }
        (input, target)
    }
}

/// Stateless evaluator for a fixed architecture; parameters are passed per call.
#[derive(Debug, Clone)]
pub struct Mlp {
    cfg: MlpConfig,
    shapes: Vec<LayerShape>,
}

/// Reusable buffers for single-row evaluation.
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Mlp {
    pub fn new(cfg: MlpConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            shapes: cfg.shapes(),
            cfg,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        check_dim(self.cfg.param_count(), params.len(), "parameter count")
    }

    fn weight<'p>(&self, params: &'p [f64], s: &LayerShape) -> ArrayView2<'p, f64> {
        ArrayView2::from_shape((s.out, s.inp), &params[s.w_off..s.b_off]).expect("layout")
    }

    /// Evaluates the network on one state. Allocation-free once `scratch` has grown.
    pub fn forward_one(
        &self,
        params: &[f64],
        xi: &[f64],
        y: &[f64],
        t: f64,
        scratch: &mut Scratch,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_params(params)?;
        check_dim(self.cfg.state_dim, xi.len(), "state")?;
        check_dim(self.cfg.cond_dim, y.len(), "measurement")?;
        check_dim(self.cfg.state_dim, out.len(), "output")?;
        let Scratch { a, b } = scratch;
        a.clear();
        a.extend_from_slice(xi);
        a.extend_from_slice(y);
        a.extend_from_slice(&time_features(t));
        let last = self.shapes.len() - 1;
        for (l, s) in self.shapes.iter().enumerate() {
            b.clear();
            b.resize(s.out, 0.0);
            let w = &params[s.w_off..s.b_off];
            let bias = &params[s.b_off..s.b_off + s.out];
            for (o, (row, bi)) in b.iter_mut().zip(w.chunks_exact(s.inp).zip(bias)) {
                let mut acc = *bi;
                for (wi, ai) in row.iter().zip(a.iter()) {
                    acc += wi * ai;
                }
                *o = if l == last {
                    acc
                } else {
                    self.cfg.activation.apply(acc)
                };
            }
            std::mem::swap(a, b);
        }
        out.copy_from_slice(a);
        Ok(())
    }

    /// Evaluates the network on assembled input rows.
    pub fn forward_batch(&self, params: &[f64], input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_params(params)?;
        check_dim(self.cfg.input_dim(), input.ncols(), "input width")?;
        let (mut acts, _) = self.forward_cached(params, input.to_owned(), false);
        Ok(acts.pop().expect("output layer"))
    }

    /// Returns the activations of every layer (input first, output last) and,
    /// when requested, the hidden pre-activations.
    fn forward_cached(
        &self,
        params: &[f64],
        input: Array2<f64>,
        keep_pre: bool,
    ) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let rows = input.nrows();
        let last = self.shapes.len() - 1;
        let mut acts = vec![input];
        let mut pre = Vec::new();
        for (l, s) in self.shapes.iter().enumerate() {
            let bias = &params[s.b_off..s.b_off + s.out];
            let mut z = Array2::from_shape_fn((rows, s.out), |(_, j)| bias[j]);
            general_mat_mul(
                1.0,
                acts.last().expect("layer input"),
                &self.weight(params, s).t(),
                1.0,
                &mut z,
            );
            if l == last {
                acts.push(z);
            } else {
                let act = self.cfg.activation;
                let a = z.mapv(|v| act.apply(v));
                if keep_pre {
                    pre.push(z);
                }
                acts.push(a);
            }
        }
        (acts, pre)
    }

    /// Monte-Carlo flow-matching loss `mean_b |v(I_t, y, t) - (x - z)|^2`.
    pub fn loss(&self, params: &[f64], batch: &FlowBatch) -> Result<f64> {
        self.check_params(params)?;
        batch.validate(&self.cfg)?;
        let (input, target) = batch.inputs_and_targets(&self.cfg);
        let (mut acts, _) = self.forward_cached(params, input, false);
        let out = acts.pop().expect("output");
        let loss = (&out - &target).mapv(|v| v * v).sum() / batch.len() as f64;
        finite_loss(loss)
    }

    /// Loss and its exact gradient with respect to every parameter.
    pub fn loss_and_grad(&self, params: &[f64], batch: &FlowBatch) -> Result<(f64, Vec<f64>)> {
        self.check_params(params)?;
        batch.validate(&self.cfg)?;
        let b = batch.len() as f64;
        let (input, target) = batch.inputs_and_targets(&self.cfg);
        let (acts, pre) = self.forward_cached(params, input, true);
        let out = acts.last().expect("output");
        let mut delta = out - &target;
        let loss = finite_loss(delta.mapv(|v| v * v).sum() / b)?;
        delta.mapv_inplace(|v| 2.0 * v / b);

        let mut grad = vec![0.0; params.len()];
        for l in (0..self.shapes.len()).rev() {
            let s = self.shapes[l];
            {
                let (gw, gb) = grad[s.w_off..s.b_off + s.out].split_at_mut(s.inp * s.out);
                let mut gw = ArrayViewMut2::from_shape((s.out, s.inp), gw).expect("layout");
                general_mat_mul(1.0, &delta.t(), &acts[l], 0.0, &mut gw);
                for (g, v) in gb.iter_mut().zip(delta.sum_axis(Axis(0))) {
                    *g = v;
                }
            }
            if l > 0 {
                let mut da = delta.dot(&self.weight(params, &s));
                let act = self.cfg.activation;
                da.zip_mut_with(&pre[l - 1], |g, &z| *g *= act.derivative(z));
                delta = da;
            }
        }
        Ok((loss, grad))
    }
}

fn finite_loss(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("non-finite loss {loss}")))
    }
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(params: &mut [f64], opt: &mut OptimState, grad: &[f64]) -> Result<()> {
    check_dim(params.len(), grad.len(), "gradient length")?;
    check_dim(params.len(), opt.m.len(), "optimizer moments")?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    opt.step += 1;
    let (b1, b2) = (opt.beta1, opt.beta2);
    let c1 = 1.0 - b1.powi(opt.step as i32);
    let c2 = 1.0 - b2.powi(opt.step as i32);
    for (((p, m), v), g) in params
        .iter_mut()
        .zip(opt.m.iter_mut())
        .zip(opt.v.iter_mut())
        .zip(grad)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= opt.lr * (*m / c1) / ((*v / c2).sqrt() + opt.eps);
    }
    Ok(())
}

/// Exponential moving average of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: Vec<f64>,
    pub decay: f64,
}

impl EmaState {
    pub fn new(params: &[f64], decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "EMA decay {decay} outside (0, 1)"
            )));
        }
        Ok(Self {
            shadow: params.to_vec(),
            decay,
        })
    }

    pub fn update(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.shadow.len(), params.len(), "EMA length")?;
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + (1.0 - d) * p;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(act: Activation) -> MlpConfig {
        MlpConfig {
            state_dim: 2,
            cond_dim: 1,
            hidden_width: 5,
            hidden_layers: 2,
            activation: act,
        }
    }

    #[test]
    fn time_feature_values() {
        let close = |a: [f64; 4], b: [f64; 4]| {
            for (x, y) in a.iter().zip(b) {
                assert_abs_diff_eq!(*x, y, epsilon = 1e-15);
            }
        };
        close(time_features(0.0), [-0.5, 1.0, 0.0, -1.0]);
        close(time_features(0.25), [-0.25, 0.0, 1.0, 1.0]);
        close(time_features(0.5), [0.0, -1.0, 0.0, -1.0]);
    }

    #[test]
    fn activations_match_definitions() {
        for i in -40..=40 {
            let x = i as f64 * 0.25;
            assert_eq!(Activation::Relu.apply(x), x.max(0.0));
            let swish = x / (1.0 + (-x).exp());
            assert_abs_diff_eq!(Activation::Swish.apply(x), swish, epsilon = 1e-14);
        }
    }

    #[test]
    fn layout_is_contiguous() {
        let cfg = small(Activation::Relu);
        let layout = cfg.layout();
        let mut off = 0;
        for seg in &layout {
            assert_eq!(seg.offset, off);
            off += seg.rows * seg.cols;
        }
        assert_eq!(off, cfg.param_count());
        // 7 -> 5 -> 5 -> 2
        assert_eq!(cfg.param_count(), 7 * 5 + 5 + 5 * 5 + 5 + 5 * 2 + 2);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let cfg = small(Activation::Swish);
        let mlp = Mlp::new(cfg).unwrap();
        let p = ParameterArray::zeros(&cfg);
        let mut out = [1.0; 2];
        mlp.forward_one(
            &p.values,
            &[0.3, -2.0],
            &[4.0],
            0.7,
            &mut Scratch::default(),
            &mut out,
        )
        .unwrap();
        assert_eq!(out, [0.0, 0.0]);
    }

    /// Weights that pass `xi` through positive ReLU units unchanged.
    fn selector(cfg: &MlpConfig) -> ParameterArray {
        let mut p = ParameterArray::zeros(cfg);
        for seg in cfg.layout().iter().filter(|s| s.name.ends_with("weight")) {
            for k in 0..cfg.state_dim {
                p.values[seg.offset + k * seg.cols + k] = 1.0;
            }
        }
        p
    }

    #[test]
    fn selector_weights_return_state() {
        let cfg = MlpConfig {
            state_dim: 2,
            cond_dim: 1,
            hidden_width: 2,
            hidden_layers: 1,
            activation: Activation::Relu,
        };
        let mlp = Mlp::new(cfg).unwrap();
        let p = selector(&cfg);
        let mut out = [0.0; 2];
        mlp.forward_one(
            &p.values,
            &[0.25, 1.5],
            &[-3.0],
            0.4,
            &mut Scratch::default(),
            &mut out,
        )
        .unwrap();
        assert_eq!(out, [0.25, 1.5]);
    }

    #[test]
    fn exact_fit_has_zero_loss_and_output_grad() {
        // With z = 0 and t = 1 the input state equals x, and the target x - z = x.
        let cfg = MlpConfig {
            state_dim: 1,
            cond_dim: 1,
            hidden_width: 1,
            hidden_layers: 1,
            activation: Activation::Relu,
        };
        let mlp = Mlp::new(cfg).unwrap();
        let p = selector(&cfg);
        let batch = FlowBatch {
            z: Array2::zeros((1, 1)),
            x: Array2::from_elem((1, 1), 0.8),
            y: Array2::from_elem((1, 1), 0.1),
            t: Array1::from_elem(1, 1.0),
        };
        let (loss, grad) = mlp.loss_and_grad(&p.values, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn batch_and_single_forward_agree() {
        let cfg = small(Activation::Swish);
        let mlp = Mlp::new(cfg).unwrap();
        let p = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let mut input = Array2::zeros((1, cfg.input_dim()));
        let row = [0.1, -0.4, 0.9];
        for (j, v) in row.iter().chain(time_features(0.3).iter()).enumerate() {
            input[[0, j]] = *v;
        }
        let batch_out = mlp.forward_batch(&p.values, input.view()).unwrap();
        let mut out = [0.0; 2];
        mlp.forward_one(
            &p.values,
            &row[..2],
            &row[2..],
            0.3,
            &mut Scratch::default(),
            &mut out,
        )
        .unwrap();
        assert_abs_diff_eq!(batch_out[[0, 0]], out[0], epsilon = 1e-13);
        assert_abs_diff_eq!(batch_out[[0, 1]], out[1], epsilon = 1e-13);
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let cfg = small(Activation::Relu);
        let mlp = Mlp::new(cfg).unwrap();
        let p = ParameterArray::zeros(&cfg);
        let mut out = [0.0; 2];
        assert!(mlp
            .forward_one(
                &p.values,
                &[0.0],
                &[0.0],
                0.0,
                &mut Scratch::default(),
                &mut out
            )
            .is_err());
        let mut batch = FlowBatch {
            z: Array2::zeros((2, 2)),
            x: Array2::zeros((2, 2)),
            y: Array2::zeros((2, 1)),
            t: Array1::zeros(2),
        };
        batch.x[[1, 0]] = f64::NAN;
        assert!(matches!(
            mlp.loss(&p.values, &batch),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut p = vec![0.0];
        let mut opt = OptimState::new(1, 0.001);
        adam_step(&mut p, &mut opt, &[2.0]).unwrap();
        assert_abs_diff_eq!(p[0], -0.001, epsilon = 1e-10);
        assert_eq!(opt.step, 1);

        let mut q = vec![0.5, -1.0];
        let mut opt = OptimState::new(2, 0.01);
        adam_step(&mut q, &mut opt, &[0.0, 0.0]).unwrap();
        assert_eq!(q, vec![0.5, -1.0]);
        assert_eq!(opt.step, 1);
        assert!(adam_step(&mut q, &mut opt, &[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn ema_examples() {
        let mut ema = EmaState::new(&[0.0], 0.9).unwrap();
        ema.update(&[1.0]).unwrap();
        assert_abs_diff_eq!(ema.shadow[0], 0.1, epsilon = 1e-15);
        for _ in 0..200 {
            ema.update(&[1.0]).unwrap();
        }
        assert!((ema.shadow[0] - 1.0).abs() < 1e-9);

        let mut fixed = EmaState::new(&[0.7, -2.0], 0.9999).unwrap();
        fixed.update(&[0.7, -2.0]).unwrap();
        assert_eq!(fixed.shadow, vec![0.7, -2.0]);
        assert!(EmaState::new(&[0.0], 1.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn parameter_bytes_round_trip(values in proptest::collection::vec(proptest::num::f64::ANY, 0..64)) {
            let p = ParameterArray { values };
            let back = ParameterArray::from_le_bytes(&p.to_le_bytes()).unwrap();
            proptest::prop_assert_eq!(
                p.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                back.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
