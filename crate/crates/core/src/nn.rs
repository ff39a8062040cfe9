//! Feed-forward networks over flat parameter vectors, with hand-written
//! reverse-mode gradients, Adam and parameter EMA.
//!
//! Every trainable model owns one contiguous `Vec<f64>`; layers are views
//! into it described by an [`MlpLayout`]. Optimizer state, EMA shadows and
//! checkpoints therefore all work on plain slices of identical length.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::field::VelocityField;
use crate::scheduler::Scheduler;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Mish,
    Relu,
    Tanh,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Mish => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Mish),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Mish => {
                if x > 20.0 {
                    return x;
                }
                let (tsp, _) = mish_parts(x);
                x * tsp
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Mish => {
                if x > 20.0 {
                    return 1.0;
                }
                let (tsp, sig) = mish_parts(x);
                tsp + x * (1.0 - tsp * tsp) * sig
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let th = x.tanh();
                1.0 - th * th
            }
        }
    }
}

/// `(tanh(softplus(x)), sigmoid(x))` from a single exponential:
/// with `e = exp(x)`, `tanh(ln(1 + e)) = (e^2 + 2e) / (e^2 + 2e + 2)`.
#[inline]
fn mish_parts(x: f64) -> (f64, f64) {
    let e = x.exp();
    let n = e * (e + 2.0);
    (n / (n + 2.0), e / (1.0 + e))
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Mish => "mish",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mish" => Ok(Activation::Mish),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// A dense stack `dims[0] -> dims[1] -> ... -> dims[L]` stored at `offset`
/// inside a flat parameter vector. Each layer is a row-major `out x in`
/// weight followed by an `out` bias. Hidden layers are activated; the last
/// layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayout {
    dims: Vec<usize>,
    activation: Activation,
    offset: usize,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    /// Input of every layer (for hidden layers: post-activation, post-dropout).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
    /// Inverted-dropout multipliers per hidden layer.
    masks: Vec<Option<Array2<f64>>>,
    pub output: Array2<f64>,
}

impl MlpLayout {
    pub fn new(dims: Vec<usize>, activation: Activation, offset: usize) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        Self { dims, activation, offset }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn layer_offset(&self, layer: usize) -> usize {
        let mut off = self.offset;
        for l in 0..layer {
            off += self.dims[l + 1] * self.dims[l] + self.dims[l + 1];
        }
        off
    }

    pub fn param_count(&self) -> usize {
        self.layer_offset(self.n_layers()) - self.offset
    }

    pub fn end(&self) -> usize {
        self.offset + self.param_count()
    }

    fn weight<'a>(&self, params: &'a [f64], layer: usize) -> ArrayView2<'a, f64> {
        let (i, o) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.layer_offset(layer);
        ArrayView2::from_shape((o, i), &params[off..off + o * i]).expect("layout")
    }

    fn bias<'a>(&self, params: &'a [f64], layer: usize) -> ArrayView1<'a, f64> {
        let (i, o) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.layer_offset(layer) + o * i;
        ArrayView1::from(&params[off..off + o])
    }

    fn grad_views<'a>(&self, grads: &'a mut [f64], layer: usize) -> (ArrayViewMut2<'a, f64>, ArrayViewMut1<'a, f64>) {
        let (i, o) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.layer_offset(layer);
        let (w, rest) = grads[off..off + o * i + o].split_at_mut(o * i);
        (ArrayViewMut2::from_shape((o, i), w).expect("layout"), ArrayViewMut1::from(rest))
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        for l in 0..self.n_layers() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let bound = 1.0 / (i.max(1) as f64).sqrt();
            let off = self.layer_offset(l);
            for p in &mut params[off..off + o * i + o] {
                *p = rng.random_range(-bound..bound);
            }
        }
    }

    /// Sets the last layer to zero so the network starts as the zero map.
    pub fn zero_output_layer(&self, params: &mut [f64]) {
        let l = self.n_layers() - 1;
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let off = self.layer_offset(l);
        params[off..off + o * i + o].iter_mut().for_each(|p| *p = 0.0);
    }

    /// Forward pass without keeping intermediates.
    pub fn forward(&self, params: &[f64], input: ArrayView2<f64>) -> Array2<f64> {
        let mut h = input.to_owned();
        for l in 0..self.n_layers() {
            let mut pre = h.dot(&self.weight(params, l).t());
            pre += &self.bias(params, l);
            if l + 1 < self.n_layers() {
                let act = self.activation;
                pre.mapv_inplace(|v| act.apply(v));
            }
            h = pre;
        }
        h
    }

    /// Forward pass recording what [`MlpLayout::backward`] needs. `dropout`
    /// applies inverted dropout with the given rate after each hidden layer.
    pub fn forward_trace<R: Rng + ?Sized>(
        &self,
        params: &[f64],
        input: ArrayView2<f64>,
        mut dropout: Option<(f64, &mut R)>,
    ) -> MlpTrace {
        let n_layers = self.n_layers();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pres = Vec::with_capacity(n_layers - 1);
        let mut masks = Vec::with_capacity(n_layers - 1);
        let mut h = input.to_owned();
        for l in 0..n_layers {
            let mut pre = h.dot(&self.weight(params, l).t());
            pre += &self.bias(params, l);
            inputs.push(h);
            if l + 1 == n_layers {
                h = pre;
                break;
            }
            let act = self.activation;
            let mut out = pre.mapv(|v| act.apply(v));
            let mask = match dropout.as_mut() {
                Some((rate, rng)) if *rate > 0.0 => {
                    let keep = 1.0 - *rate;
                    let m = Array2::from_shape_fn(out.raw_dim(), |_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    out *= &m;
                    Some(m)
                }
                _ => None,
            };
            pres.push(pre);
            masks.push(mask);
            h = out;
        }
        MlpTrace { inputs, pre: pres, masks, output: h }
    }

    /// Accumulates parameter gradients into `grads` (full flat vector) and
    /// returns the gradient with respect to the input.
    pub fn backward(&self, params: &[f64], trace: &MlpTrace, grad_out: ArrayView2<f64>, grads: &mut [f64]) -> Array2<f64> {
        let mut delta = grad_out.to_owned();
        for l in (0..self.n_layers()).rev() {
            {
                let (mut gw, mut gb) = self.grad_views(grads, l);
                gw += &delta.t().dot(&trace.inputs[l]);
                gb += &delta.sum_axis(Axis(0));
            }
            let mut dx = delta.dot(&self.weight(params, l));
            if l > 0 {
                if let Some(mask) = &trace.masks[l - 1] {
                    dx *= mask;
                }
                let act = self.activation;
                ndarray::Zip::from(&mut dx)
                    .and(&trace.pre[l - 1])
                    .for_each(|d, &p| *d *= act.derivative(p));
            }
            delta = dx;
        }
        delta
    }
}

/// Number of sinusoidal frequencies used to featurize time.
pub const TIME_FREQUENCIES: usize = 32;
const TIME_MAX_FREQUENCY: f64 = 64.0;

fn time_frequencies() -> &'static [f64; TIME_FREQUENCIES] {
    static FREQS: std::sync::OnceLock<[f64; TIME_FREQUENCIES]> = std::sync::OnceLock::new();
    FREQS.get_or_init(|| {
        std::array::from_fn(|j| TIME_MAX_FREQUENCY.powf(j as f64 / (TIME_FREQUENCIES - 1) as f64))
    })
}

/// `[sin(w_j t), cos(w_j t)]` with `w_j` geometrically spaced in `[1, 64]`.
pub fn time_features(ts: &[f64]) -> Array2<f64> {
    let f = TIME_FREQUENCIES;
    let freqs = time_frequencies();
    let mut out = Array2::zeros((ts.len(), 2 * f));
    for (r, &t) in ts.iter().enumerate() {
        let mut row = out.row_mut(r);
        let row = row.as_slice_mut().unwrap();
        for (j, w) in freqs.iter().enumerate() {
            let (s, c) = (w * t).sin_cos();
            row[j] = s;
            row[f + j] = c;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Data dimension `d`.
    pub dim: usize,
    /// Condition dimension `k`.
    pub cond_dim: usize,
    /// Hidden layer widths of the trunk.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
    /// Planning horizon `H` for window models, 0 otherwise. Metadata only.
    pub horizon: usize,
    pub scheduler: Scheduler,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.time_embed_dim == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "model needs positive dim, time_embed_dim and widths (got d={}, te={}, widths={:?})",
                self.dim, self.time_embed_dim, self.widths
            )));
        }
        Ok(())
    }
}

/// The trainable velocity field `u_theta(t, x, y)`.
///
/// Time is featurized sinusoidally and projected by a two-layer map; the
/// trunk sees `[x, time embedding, y]`, so its first layer carries the
/// condition embedding. A null condition substitutes the learned
/// `null_token` for `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityModel {
    config: ModelConfig,
    params: Vec<f64>,
    time_mlp: MlpLayout,
    trunk: MlpLayout,
    null_offset: usize,
}

/// Per-row conditioning for a training batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchCond<'a> {
    pub values: ArrayView2<'a, f64>,
    /// Rows routed through the null token.
    pub null: &'a [bool],
}

struct ModelTrace {
    time: MlpTrace,
    trunk: MlpTrace,
    null_rows: Vec<bool>,
}

impl VelocityModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        let mut params = std::mem::take(&mut model.params);
        model.time_mlp.init(&mut params, rng);
        model.trunk.init(&mut params, rng);
        for p in &mut params[model.null_offset..] {
            *p = StandardNormal.sample(rng);
        }
        model.params = params;
        Ok(model)
    }

    /// All parameters zero; used when loading checkpoints.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let te = config.time_embed_dim;
        let time_mlp = MlpLayout::new(vec![2 * TIME_FREQUENCIES, te, te], config.activation, 0);
        let mut dims = vec![config.dim + te + config.cond_dim];
        dims.extend(&config.widths);
        dims.push(config.dim);
        let trunk = MlpLayout::new(dims, config.activation, time_mlp.end());
        let null_offset = trunk.end();
        let params = vec![0.0; null_offset + config.cond_dim];
        Ok(Self { config, params, time_mlp, trunk, null_offset })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_len("model parameters", self.params.len(), params.len())?;
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn null_token(&self) -> &[f64] {
        &self.params[self.null_offset..]
    }

    pub fn zero_output_layer(&mut self) {
        self.trunk.zero_output_layer(&mut self.params);
    }

    fn check_inputs(&self, ts: &[f64], x: &ArrayView2<f64>, cond: Option<&ArrayView2<f64>>) -> Result<()> {
        let n = x.nrows();
        check_len("time batch", n, ts.len())?;
        check_len("model input dim", self.config.dim, x.ncols())?;
        if let Some(c) = cond {
            check_len("condition rows", n, c.nrows())?;
            check_len("condition dim", self.config.cond_dim, c.ncols())?;
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite condition".into()));
            }
        }
        if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain { t: *t });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite model input".into()));
        }
        Ok(())
    }

    fn trunk_input(&self, temb: &Array2<f64>, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>, null_rows: &[bool]) -> Array2<f64> {
        let (n, d, te, k) = (x.nrows(), self.config.dim, self.config.time_embed_dim, self.config.cond_dim);
        let mut input = Array2::zeros((n, d + te + k));
        input.slice_mut(s![.., ..d]).assign(&x);
        input.slice_mut(s![.., d..d + te]).assign(temb);
        if k > 0 {
            let null = ArrayView1::from(self.null_token());
            for r in 0..n {
                let mut dst = input.slice_mut(s![r, d + te..]);
                match cond {
                    Some(c) if !null_rows[r] => dst.assign(&c.row(r)),
                    _ => dst.assign(&null),
                }
            }
        }
        input
    }

    fn run(&self, ts: &[f64], x: ArrayView2<f64>, cond: Option<BatchCond>) -> Result<ModelTrace> {
        self.check_inputs(ts, &x, cond.as_ref().map(|c| &c.values))?;
        let null_rows: Vec<bool> = match cond {
            Some(c) => {
                check_len("null mask", x.nrows(), c.null.len())?;
                c.null.to_vec()
            }
            None => vec![true; x.nrows()],
        };
        let feats = time_features(ts);
        let time = self.time_mlp.forward_trace::<rand::rngs::ThreadRng>(&self.params, feats.view(), None);
        let input = self.trunk_input(&time.output, x, cond.map(|c| c.values), &null_rows);
        let trunk = self.trunk.forward_trace::<rand::rngs::ThreadRng>(&self.params, input.view(), None);
        Ok(ModelTrace { time, trunk, null_rows })
    }

    /// Batched forward pass with per-row times. `cond = None` routes every
    /// row through the null token.
    pub fn forward_batch(&self, ts: &[f64], x: ArrayView2<f64>, cond: Option<BatchCond>) -> Result<Array2<f64>> {
        self.check_inputs(ts, &x, cond.as_ref().map(|c| &c.values))?;
        let null_rows: Vec<bool> = match cond {
            Some(c) => c.null.to_vec(),
            None => vec![true; x.nrows()],
        };
        let feats = time_features(ts);
        let temb = self.time_mlp.forward(&self.params, feats.view());
        let input = self.trunk_input(&temb, x, cond.map(|c| c.values), &null_rows);
        let out = self.trunk.forward(&self.params, input.view());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite model output".into()));
        }
        Ok(out)
    }

    /// Single-point forward pass; `y = None` is the null condition.
    pub fn forward(&self, t: f64, x: &[f64], y: Option<&[f64]>) -> Result<Vec<f64>> {
        let xb = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        let yb = match y {
            Some(y) => Some(ArrayView2::from_shape((1, y.len()), y).map_err(|e| Error::Shape(e.to_string()))?),
            None => None,
        };
        let cond = yb.map(|values| BatchCond { values, null: &[false] });
        Ok(self.forward_batch(&[t], xb, cond)?.into_raw_vec_and_offset().0)
    }

    /// Mean over rows of `||u(t_i, x_i, y_i) - target_i||^2` and its exact
    /// gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        ts: &[f64],
        x: ArrayView2<f64>,
        cond: Option<BatchCond>,
        target: ArrayView2<f64>,
    ) -> Result<(f64, Vec<f64>)> {
        if target.dim() != x.dim() {
            return Err(Error::Shape(format!("target {:?} vs input {:?}", target.dim(), x.dim())));
        }
        let trace = self.run(ts, x, cond)?;
        let n = x.nrows().max(1) as f64;
        let diff = &trace.trunk.output - &target;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
        let grad_out = diff * (2.0 / n);

        let mut grads = vec![0.0; self.params.len()];
        let d_input = self.trunk.backward(&self.params, &trace.trunk, grad_out.view(), &mut grads);
        let (d, te, k) = (self.config.dim, self.config.time_embed_dim, self.config.cond_dim);
        let d_temb = d_input.slice(s![.., d..d + te]);
        self.time_mlp.backward(&self.params, &trace.time, d_temb, &mut grads);
        if k > 0 {
            let d_y = d_input.slice(s![.., d + te..]);
            let null_grad = &mut grads[self.null_offset..];
            for (r, &is_null) in trace.null_rows.iter().enumerate() {
                if is_null {
                    for (g, v) in null_grad.iter_mut().zip(d_y.row(r)) {
                        *g += v;
                    }
                }
            }
        }
        Ok((loss, grads))
    }
}

impl VelocityField for VelocityModel {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    fn velocity(&self, t: f64, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        let ts = vec![t; x.nrows()];
        let mask = vec![false; x.nrows()];
        let cond = cond.map(|values| BatchCond { values, null: &mask });
        self.forward_batch(&ts, x, cond)
    }
}

/// Plain regression MLP (used for the inverse dynamics model).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layout: MlpLayout,
    params: Vec<f64>,
    pub dropout: f64,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(dims: Vec<usize>, activation: Activation, dropout: f64, rng: &mut R) -> Self {
        let mut mlp = Self::zeroed(dims, activation, dropout);
        let mut params = std::mem::take(&mut mlp.params);
        mlp.layout.init(&mut params, rng);
        mlp.params = params;
        mlp
    }

    pub fn zeroed(dims: Vec<usize>, activation: Activation, dropout: f64) -> Self {
        let layout = MlpLayout::new(dims, activation, 0);
        let params = vec![0.0; layout.param_count()];
        Self { layout, params, dropout }
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len("mlp input dim", self.layout.dims()[0], x.ncols())?;
        Ok(self.layout.forward(&self.params, x))
    }

    /// Mean squared error (summed over outputs, averaged over rows) with
    /// dropout active when `rng` is given.
    pub fn loss_and_grad<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        target: ArrayView2<f64>,
        rng: Option<&mut R>,
    ) -> Result<(f64, Vec<f64>)> {
        check_len("mlp input dim", self.layout.dims()[0], x.ncols())?;
        check_len("mlp target dim", *self.layout.dims().last().unwrap(), target.ncols())?;
        let dropout = rng.map(|r| (self.dropout, r));
        let trace = self.layout.forward_trace(&self.params, x, dropout);
        let n = x.nrows().max(1) as f64;
        let diff = &trace.output - &target;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
        let mut grads = vec![0.0; self.params.len()];
        self.layout.backward(&self.params, &trace, (diff * (2.0 / n)).view(), &mut grads);
        Ok((loss, grads))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub const DEFAULT_LR: f64 = 1e-4;

    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len("adam parameters", self.m.len(), params.len())?;
        check_len("adam gradients", self.m.len(), grads.len())?;
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Exponential moving average of parameters, `shadow <- decay * shadow + (1 - decay) * theta`,
/// applied every `update_every` optimizer steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub update_every: u64,
    pub shadow: Vec<f64>,
}

impl Ema {
    pub const DEFAULT_DECAY: f64 = 0.995;
    pub const DEFAULT_EVERY: u64 = 10;

    pub fn new(params: &[f64], decay: f64, update_every: u64) -> Self {
        Self { decay, update_every: update_every.max(1), shadow: params.to_vec() }
    }

    pub fn update(&mut self, params: &[f64]) -> Result<()> {
        check_len("ema parameters", self.shadow.len(), params.len())?;
        let beta = self.decay;
        for (s, &p) in self.shadow.iter_mut().zip(params) {
            *s = beta * *s + (1.0 - beta) * p;
        }
        Ok(())
    }

    /// Updates when `step` is a multiple of `update_every`.
    pub fn observe(&mut self, step: u64, params: &[f64]) -> Result<bool> {
        if step % self.update_every == 0 {
            self.update(params)?;
            return Ok(true);
        }
        Ok(false)
    }
}
