//! Dense feed-forward network with exact reverse-mode gradients and Adam.
//!
//! Layers compute `post = activation(pre)`, `pre = input · Wᵀ + b`, with weights
//! stored row-major as `(out, in)`. A [`ForwardTrace`] keeps every layer's
//! pre- and post-activation so [`NetworkParams::backward`] can replay the chain
//! rule. Gradients may be injected at any depth of the trace and are summed,
//! which is how one backward pass serves a loss on the scalar output and a
//! second loss on the penultimate embedding at the same time.
//!
//! Depth `0` is the input batch, depth `l` is the activation after layer `l`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::distr::{Distribution, Uniform};

use crate::rng;
use crate::{Error, Result};

/// Negative-side slope of the hidden leaky-ReLU units.
pub const LEAKY_SLOPE: f64 = 0.01;

/// 91 inputs, two hidden layers of 32 and 16 units, one logistic output.
pub const DEFAULT_TOPOLOGY: [usize; 4] = [91, 32, 16, 1];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Logistic,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Logistic => logistic(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Logistic => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// Shape `(out, in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_width(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_width(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Dense>,
}

/// Glorot-uniform weights, zero biases, leaky-ReLU hidden layers and a
/// logistic output layer.
pub fn init_params(seed: u64, topology: &[usize]) -> Result<NetworkParams> {
    if topology.len() < 2 {
        return Err(Error::Config(format!(
            "topology needs at least an input and an output width, got {topology:?}"
        )));
    }
    if topology.contains(&0) {
        return Err(Error::Config(format!(
            "topology widths must be positive, got {topology:?}"
        )));
    }
    let mut rng = rng::stream(seed, &[rng::tag("init_params")]);
    let n_layers = topology.len() - 1;
    let layers = topology
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(&mut rng));
            let activation = if l + 1 == n_layers {
                Activation::Logistic
            } else {
                Activation::LeakyRelu { slope: LEAKY_SLOPE }
            };
            Dense {
                weight,
                bias: Array1::zeros(fan_out),
                activation,
            }
        })
        .collect();
    Ok(NetworkParams { layers })
}

/// Cached activations of one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input, `activations[l]` the output of layer `l`.
    pub activations: Vec<Array2<f64>>,
    /// `pre[l - 1]` is the pre-activation of layer `l`.
    pub pre: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.pre.len()
    }

    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("trace has an input")
    }

    /// Activation feeding the final layer (the embedding tap).
    pub fn penultimate(&self) -> &Array2<f64> {
        &self.activations[self.depth() - 1]
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }
}

/// Upstream gradients keyed by trace depth; contributions at the same depth add.
#[derive(Debug, Clone, Default)]
pub struct TapGrads {
    taps: Vec<(usize, Array2<f64>)>,
}

impl TapGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn at(mut self, depth: usize, grad: Array2<f64>) -> Self {
        self.add(depth, grad);
        self
    }

    pub fn add(&mut self, depth: usize, grad: Array2<f64>) {
        if let Some((_, g)) = self.taps.iter_mut().find(|(d, _)| *d == depth) {
            *g += &grad;
        } else {
            self.taps.push((depth, grad));
        }
    }

    fn get(&self, depth: usize) -> Option<&Array2<f64>> {
        self.taps.iter().find(|(d, _)| *d == depth).map(|(_, g)| g)
    }
}

/// `∂loss/∂params`, shape-congruent with [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl GradientSet {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        GradientSet {
            layers: params
                .layers
                .iter()
                .map(|l| {
                    (
                        Array2::zeros(l.weight.raw_dim()),
                        Array1::zeros(l.bias.len()),
                    )
                })
                .collect(),
        }
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.scaled_add(scale, ow);
            b.scaled_add(scale, ob);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.iter().collect()
    }

    pub fn is_congruent(&self, params: &NetworkParams) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|((w, b), l)| w.dim() == l.weight.dim() && b.len() == l.bias.len())
    }
}

impl NetworkParams {
    pub fn input_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_width)
    }

    /// Width of the activation feeding the last layer.
    pub fn embedding_width(&self) -> usize {
        self.layers.last().map_or(0, Dense::in_width)
    }

    pub fn topology(&self) -> Vec<usize> {
        std::iter::once(self.input_width())
            .chain(self.layers.iter().map(Dense::out_width))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters in layer order: weights row-major, then biases.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
        if batch.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.input_width()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(batch.to_owned());
        for layer in &self.layers {
            let input = activations.last().expect("non-empty");
            let z = input.dot(&layer.weight.t()) + &layer.bias;
            let act = layer.activation;
            let y = z.mapv(|v| act.apply(v));
            pre.push(z);
            activations.push(y);
        }
        Ok(ForwardTrace { activations, pre })
    }

    pub fn backward(&self, trace: &ForwardTrace, upstream: &TapGrads) -> Result<GradientSet> {
        let depth = self.layers.len();
        if trace.depth() != depth
            || self
                .layers
                .iter()
                .zip(&trace.pre)
                .any(|(l, z)| z.ncols() != l.out_width())
        {
            return Err(Error::Shape(
                "trace was not produced by these parameters".into(),
            ));
        }
        let n = trace.batch_size();
        for (d, g) in &upstream.taps {
            if *d > depth {
                return Err(Error::Shape(format!(
                    "tap depth {d} exceeds network depth {depth}"
                )));
            }
            if g.dim() != trace.activations[*d].dim() {
                return Err(Error::Shape(format!(
                    "gradient at depth {d} has shape {:?}, activation has {:?}",
                    g.dim(),
                    trace.activations[*d].dim()
                )));
            }
        }

        let mut grads = GradientSet::zeros_like(self);
        let mut d_act = upstream
            .get(depth)
            .cloned()
            .unwrap_or_else(|| Array2::zeros((n, self.output_width())));
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            let act = layer.activation;
            let mut d_pre = d_act;
            Zip::from(&mut d_pre)
                .and(&trace.pre[l])
                .and(&trace.activations[l + 1])
                .for_each(|g, &z, &y| *g *= act.derivative(z, y));
            let (gw, gb) = &mut grads.layers[l];
            *gw = d_pre.t().dot(&trace.activations[l]);
            *gb = d_pre.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            d_act = d_pre.dot(&layer.weight);
            if let Some(extra) = upstream.get(l) {
                d_act += extra;
            }
        }
        Ok(grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: GradientSet,
    pub v: GradientSet,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// lr = 0.001, β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(params: &NetworkParams) -> Self {
        Self::with_lr(params, 1e-3)
    }

    pub fn with_lr(params: &NetworkParams, lr: f64) -> Self {
        AdamState {
            m: GradientSet::zeros_like(params),
            v: GradientSet::zeros_like(params),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &GradientSet,
    state: &mut AdamState,
) -> Result<()> {
    if !grads.is_congruent(params) || !state.m.is_congruent(params) {
        return Err(Error::Shape(
            "gradient / optimizer state not congruent with params".into(),
        ));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (l, layer) in params.layers.iter_mut().enumerate() {
        let (gw, gb) = &grads.layers[l];
        let (mw, mb) = &mut state.m.layers[l];
        let (vw, vb) = &mut state.v.layers[l];
        Zip::from(&mut layer.weight)
            .and(gw)
            .and(mw)
            .and(vw)
            .for_each(update);
        Zip::from(&mut layer.bias)
            .and(gb)
            .and(mb)
            .and(vb)
            .for_each(update);
    }
    if !params.is_finite() {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok(())
}
