//! Feed-forward networks with hand-written reverse-mode gradients.
//!
//! Besides the usual forward/backward pair, an [`Mlp`] can propagate a
//! tangent direction alongside its input (forward-mode JVP) and then
//! backpropagate through *both* the primal and tangent outputs. That second
//! path is what the latent ODE losses need: their regression targets are
//! directional derivatives of the encoder, so the parameter gradient has to
//! flow through a derivative.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, h: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => h.clone(),
            Activation::Relu => h.mapv(|v| v.max(0.0)),
            Activation::Tanh => h.mapv(f64::tanh),
        }
    }

    /// σ'(h), using the cached activation `a = σ(h)` where convenient.
    fn derivative(self, h: &Array2<f64>, a: &Array2<f64>) -> Option<Array2<f64>> {
        match self {
            Activation::Identity => None,
            Activation::Relu => Some(h.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })),
            Activation::Tanh => Some(a.mapv(|v| 1.0 - v * v)),
        }
    }

    /// σ''(h); `None` where it vanishes almost everywhere.
    fn second_derivative(self, a: &Array2<f64>) -> Option<Array2<f64>> {
        match self {
            Activation::Identity | Activation::Relu => None,
            Activation::Tanh => Some(a.mapv(|v| -2.0 * v * (1.0 - v * v))),
        }
    }
}

/// Affine map `y = x · W + b` with `W` stored as `[in × out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weight = Array2::from_shape_fn((input, output), |_| dist.sample(rng));
        let bias = Array1::from_shape_fn(output, |_| dist.sample(rng));
        Linear { weight, bias }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// Inverted dropout applied after every hidden activation.
pub struct Dropout<'a, R: Rng + ?Sized> {
    pub rate: f64,
    pub rng: &'a mut R,
}

/// Intermediate values of a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().expect("non-empty network")
    }
}

/// Forward pass carrying a tangent direction, consumed by
/// [`Mlp::backward_dual`].
#[derive(Debug, Clone)]
pub struct DualTrace {
    inputs: Vec<Array2<f64>>,
    tangents: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    pre_tangent: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    out_tangent: Array2<f64>,
}

impl DualTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().expect("non-empty network")
    }

    pub fn output_tangent(&self) -> &Array2<f64> {
        &self.out_tangent
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Linear>,
    hidden: Activation,
    output: Activation,
}

impl Mlp {
    /// Builds a network through the given layer sizes (`sizes[0]` is the
    /// input width, the last entry the output width).
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Mlp {
            layers,
            hidden,
            output,
        }
    }

    pub fn from_layers(layers: Vec<Linear>, hidden: Activation, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("an MLP needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Shape(format!("layer {i} bias length mismatch")));
            }
        }
        Ok(Mlp {
            layers,
            hidden,
            output,
        })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Linear::output_dim).unwrap_or(0)
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} input columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Inference-only forward pass.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut cur = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            cur = self.activation(l).apply(&layer.apply(&cur.view()));
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: ArrayView2<f64>) -> Result<Trace> {
        self.forward_trace_inner::<rand_chacha::ChaCha8Rng>(x, None)
    }

    pub fn forward_trace_dropout<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        dropout: Dropout<'_, R>,
    ) -> Result<Trace> {
        self.forward_trace_inner(x, Some(dropout))
    }

    fn forward_trace_inner<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        mut dropout: Option<Dropout<'_, R>>,
    ) -> Result<Trace> {
        self.check_input(&x)?;
        let n = self.layers.len();
        let mut trace = Trace {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
        };
        let mut cur = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.apply(&cur.view());
            let a = self.activation(l).apply(&h);
            let mask = match dropout.as_mut() {
                Some(d) if l + 1 < n && d.rate > 0.0 => {
                    let keep = 1.0 - d.rate;
                    let scale = 1.0 / keep;
                    Some(a.mapv(|_| if d.rng.random::<f64>() < keep { scale } else { 0.0 }))
                }
                _ => None,
            };
            let next = match &mask {
                Some(m) => &a * m,
                None => a.clone(),
            };
            trace.inputs.push(std::mem::replace(&mut cur, next));
            trace.pre.push(h);
            trace.post.push(a);
            trace.masks.push(mask);
        }
        Ok(trace)
    }

    /// Backpropagates `grad_out` (gradient of the loss w.r.t. the network
    /// output) through `trace`. Parameter gradients are accumulated into
    /// `grads` when given; the gradient w.r.t. the input is returned.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_out: ArrayView2<f64>,
        mut grads: Option<&mut MlpGrads>,
    ) -> Array2<f64> {
        let mut g = grad_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            if let Some(mask) = &trace.masks[l] {
                g *= mask;
            }
            if let Some(d) = self.activation(l).derivative(&trace.pre[l], &trace.post[l]) {
                g *= &d;
            }
            if let Some(grads) = grads.as_deref_mut() {
                grads.weights[l] += &trace.inputs[l].t().dot(&g);
                grads.biases[l] += &g.sum_axis(Axis(0));
            }
            g = g.dot(&self.layers[l].weight.t());
        }
        g
    }

    /// Forward pass propagating the tangent `dx` (a JVP of the network at
    /// `x` along `dx`, row by row).
    pub fn forward_dual(&self, x: ArrayView2<f64>, dx: ArrayView2<f64>) -> Result<DualTrace> {
        self.check_input(&x)?;
        if dx.dim() != x.dim() {
            return Err(Error::Shape(format!(
                "tangent shape {:?} differs from input shape {:?}",
                dx.dim(),
                x.dim()
            )));
        }
        let n = self.layers.len();
        let mut trace = DualTrace {
            inputs: Vec::with_capacity(n),
            tangents: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            pre_tangent: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
            out_tangent: Array2::zeros((0, 0)),
        };
        let mut cur = x.to_owned();
        let mut dcur = dx.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let act = self.activation(l);
            let h = layer.apply(&cur.view());
            let dh = dcur.dot(&layer.weight);
            let a = act.apply(&h);
            let da = match act.derivative(&h, &a) {
                Some(d) => &dh * &d,
                None => dh.clone(),
            };
            trace.inputs.push(std::mem::replace(&mut cur, a.clone()));
            trace.tangents.push(std::mem::replace(&mut dcur, da));
            trace.pre.push(h);
            trace.pre_tangent.push(dh);
            trace.post.push(a);
        }
        trace.out_tangent = dcur;
        Ok(trace)
    }

    /// Backpropagates through a dual pass. `grad_out` and `grad_tangent`
    /// are the loss gradients w.r.t. the primal output and its tangent.
    /// Returns the gradients w.r.t. the input and the input tangent.
    pub fn backward_dual(
        &self,
        trace: &DualTrace,
        grad_out: ArrayView2<f64>,
        grad_tangent: ArrayView2<f64>,
        mut grads: Option<&mut MlpGrads>,
    ) -> (Array2<f64>, Array2<f64>) {
        let mut g = grad_out.to_owned();
        let mut gd = grad_tangent.to_owned();
        for l in (0..self.layers.len()).rev() {
            let act = self.activation(l);
            let (pre, post) = (&trace.pre[l], &trace.post[l]);
            // a = σ(h), da = σ'(h)·dh
            let (gh, gdh) = match act.derivative(pre, post) {
                None => (g, gd),
                Some(d1) => {
                    let mut gh = &g * &d1;
                    if let Some(d2) = act.second_derivative(post) {
                        Zip::from(&mut gh)
                            .and(&gd)
                            .and(&d2)
                            .and(&trace.pre_tangent[l])
                            .for_each(|gh, &gd, &d2, &dh| *gh += gd * d2 * dh);
                    }
                    (gh, &gd * &d1)
                }
            };
            if let Some(grads) = grads.as_deref_mut() {
                grads.weights[l] += &trace.inputs[l].t().dot(&gh);
                grads.weights[l] += &trace.tangents[l].t().dot(&gdh);
                grads.biases[l] += &gh.sum_axis(Axis(0));
            }
            let wt = self.layers[l].weight.t();
            g = gh.dot(&wt);
            gd = gdh.dot(&wt);
        }
        (g, gd)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = it.next().expect("length checked");
            }
            for b in l.bias.iter_mut() {
                *b = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn l1_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().chain(l.bias.iter()).map(|v| v.abs()).sum::<f64>())
            .sum()
    }

    /// Adds `scale · sign(θ)` to `grads` (subgradient of `scale · ‖θ‖₁`).
    pub fn add_l1_subgradient(&self, scale: f64, grads: &mut MlpGrads) {
        for (l, layer) in self.layers.iter().enumerate() {
            Zip::from(&mut grads.weights[l])
                .and(&layer.weight)
                .for_each(|g, &w| *g += scale * sign(w));
            Zip::from(&mut grads.biases[l])
                .and(&layer.bias)
                .for_each(|g, &b| *g += scale * sign(b));
        }
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim())
    }

    /// Polyak averaging: `self ← (1 − rho)·self + rho·online`.
    pub fn soft_update_from(&mut self, online: &Mlp, rho: f64) -> Result<()> {
        if !self.same_shape(online) {
            return Err(Error::Shape(
                "soft update between networks of different shapes".into(),
            ));
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            Zip::from(&mut t.weight)
                .and(&o.weight)
                .for_each(|t, &o| *t = (1.0 - rho) * *t + rho * o);
            Zip::from(&mut t.bias)
                .and(&o.bias)
                .for_each(|t, &o| *t = (1.0 - rho) * *t + rho * o);
        }
        Ok(())
    }

    pub fn feed_params(&self, hasher: &mut Sha256) {
        for l in &self.layers {
            for v in l.weight.iter().chain(l.bias.iter()) {
                hasher.update(v.to_le_bytes());
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient buffers shaped like an [`Mlp`]'s parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weight.dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.bias.dim())).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        self.weights.iter_mut().for_each(|w| w.fill(0.0));
        self.biases.iter_mut().for_each(|b| b.fill(0.0));
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: MlpGrads,
    v: MlpGrads,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: MlpGrads::zeros_like(net),
            v: MlpGrads::zeros_like(net),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &MlpGrads) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.lr;
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (l, layer) in net.layers.iter_mut().enumerate() {
            Zip::from(&mut layer.weight)
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .and(&grads.weights[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .and(&grads.biases[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
    }
}

/// Horizontal concatenation of two row-aligned blocks.
pub fn hstack(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts must agree")
}

/// Appends a constant column, used for the state decoder's indicator input.
pub fn with_indicator(z: ArrayView2<f64>, value: f64) -> Array2<f64> {
    let col = Array2::from_elem((z.nrows(), 1), value);
    hstack(z, col.view())
}

/// Per-row squared Euclidean norm.
pub fn row_sq_norm(x: ArrayView2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| r.dot(&r))
}

pub fn mean(v: ArrayView1<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.sum() / v.len() as f64
    }
}

/// Left `cols` columns of `x`.
pub fn left(x: &Array2<f64>, cols: usize) -> ArrayView2<'_, f64> {
    x.slice(s![.., ..cols])
}

/// Columns of `x` from `cols` onwards.
pub fn right(x: &Array2<f64>, cols: usize) -> ArrayView2<'_, f64> {
    x.slice(s![.., cols..])
}
