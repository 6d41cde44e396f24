//! Small dense network engine: multilayer perceptron, reverse-mode
//! gradients, Adam with coupled L2 weight decay, and the two losses the
//! training loops use.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, numeric_err, shape_err, Error, Result};
use crate::linalg::DenseMatrix;
use crate::scalar::Real;

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }
}

/// One affine layer `act(W x + b)`; `weights` is `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weights: DenseMatrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Real> Layer<T> {
    pub fn new(weights: DenseMatrix<T>, bias: Vec<T>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(shape_err!("bias length {} does not match {} output rows", bias.len(), weights.rows()));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(numeric_err!("non-finite bias"));
        }
        Ok(Self { weights, bias, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Multilayer perceptron parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", try_from = "MlpRepr<T>", into = "MlpRepr<T>")]
pub struct Mlp<T> {
    layers: Vec<Layer<T>>,
}

impl<T: Real> Mlp<T> {
    /// Validates that adjacent layer dimensions chain.
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(domain_err!("network needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[1].input_dim() != pair[0].output_dim() {
                return Err(shape_err!(
                    "layer {} expects {} inputs but layer {} produces {}",
                    k + 1,
                    pair[1].input_dim(),
                    k,
                    pair[0].output_dim()
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.rows() * l.weights.cols() + l.bias.len()).sum()
    }

    /// Mutable parameter groups in a fixed order: weights then bias, layer by layer.
    pub fn param_groups_mut(&mut self) -> Vec<&mut [T]> {
        let mut groups = Vec::with_capacity(2 * self.layers.len());
        for layer in &mut self.layers {
            groups.push(layer.weights.as_mut_slice());
            groups.push(layer.bias.as_mut_slice());
        }
        groups
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        let mut cache = self.forward_cached(input)?;
        Ok(cache.activations.pop().expect("at least one layer"))
    }

    /// Forward pass that keeps every layer's output for a later backward pass.
    pub fn forward_cached(&self, input: &[T]) -> Result<ForwardCache<T>> {
        if input.len() != self.input_dim() {
            return Err(shape_err!("network expects input of length {}, got {}", self.input_dim(), input.len()));
        }
        let mut activations: Vec<Vec<T>> = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for layer in &self.layers {
            let x = activations.last().expect("seeded with input");
            let out: Vec<T> = (0..layer.output_dim())
                .map(|r| {
                    let z = layer.weights.row(r).iter().zip(x).map(|(&w, &v)| w * v).sum::<T>() + layer.bias[r];
                    layer.activation.apply(z)
                })
                .collect();
            activations.push(out);
        }
        Ok(ForwardCache { activations })
    }

    /// Gradient of `upstream · output` with respect to every parameter.
    pub fn backward(&self, input: &[T], upstream: &[T]) -> Result<GradientBundle<T>> {
        let cache = self.forward_cached(input)?;
        let mut grads = GradientBundle::zeros_like(self);
        self.backward_accumulate(&cache, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Adds the parameter gradient of `upstream · output` into `grads` and
    /// returns the gradient with respect to the input.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache<T>,
        upstream: &[T],
        grads: &mut GradientBundle<T>,
    ) -> Result<Vec<T>> {
        if upstream.len() != self.output_dim() {
            return Err(shape_err!("upstream length {} does not match output {}", upstream.len(), self.output_dim()));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(shape_err!("gradient bundle has {} layers, network {}", grads.layers.len(), self.layers.len()));
        }
        let mut delta: Vec<T> = upstream.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let out = &cache.activations[k + 1];
            let inp = &cache.activations[k];
            for (d, &y) in delta.iter_mut().zip(out) {
                *d *= layer.activation.derivative_from_output(y);
            }
            let g = &mut grads.layers[k];
            let cols = layer.input_dim();
            let gw = g.weights.as_mut_slice();
            for (r, &d) in delta.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                g.bias[r] += d;
                for (gwv, &x) in gw[r * cols..(r + 1) * cols].iter_mut().zip(inp) {
                    *gwv += d * x;
                }
            }
            let mut next = vec![T::zero(); cols];
            for (r, &d) in delta.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                for (n, &w) in next.iter_mut().zip(layer.weights.row(r)) {
                    *n += d * w;
                }
            }
            delta = next;
        }
        Ok(delta)
    }
}

/// Per-layer outputs recorded by [`Mlp::forward_cached`]; entry 0 is the input.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub activations: Vec<Vec<T>>,
}

impl<T> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        self.activations.last().expect("non-empty cache")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient<T> {
    pub weights: DenseMatrix<T>,
    pub bias: Vec<T>,
}

/// Partial derivatives shaped like an [`Mlp`], plus an optional auxiliary
/// trainable vector (the micro enrichment samples in the PU model).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle<T> {
    pub layers: Vec<LayerGradient<T>>,
    pub aux: Vec<T>,
}

impl<T: Real> GradientBundle<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Self::zeros_with_aux(net, 0)
    }

    pub fn zeros_with_aux(net: &Mlp<T>, aux_len: usize) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| LayerGradient {
                weights: DenseMatrix::zeros(l.weights.rows(), l.weights.cols()),
                bias: vec![T::zero(); l.bias.len()],
            })
            .collect();
        Self { layers, aux: vec![T::zero(); aux_len] }
    }

    /// Groups in the same order as [`Mlp::param_groups_mut`], followed by `aux` when non-empty.
    pub fn groups(&self) -> Vec<&[T]> {
        let mut groups: Vec<&[T]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            groups.push(l.weights.as_slice());
            groups.push(&l.bias);
        }
        if !self.aux.is_empty() {
            groups.push(&self.aux);
        }
        groups
    }

    pub fn is_zero(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|&v| v == T::zero()))
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, s: T) {
        for l in &mut self.layers {
            l.weights.as_mut_slice().iter_mut().for_each(|v| *v *= s);
            l.bias.iter_mut().for_each(|v| *v *= s);
        }
        self.aux.iter_mut().for_each(|v| *v *= s);
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AdamConfig<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub weight_decay: T,
}

impl<T: Real> Default for AdamConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::lit(1e-3),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-8),
            weight_decay: T::lit(1e-4),
        }
    }
}

/// Moment estimates for a flat parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig<T>,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig<T>, num_params: usize) -> Self {
        Self {
            config,
            first_moment: vec![T::zero(); num_params],
            second_moment: vec![T::zero(); num_params],
            step_count: 0,
        }
    }

    /// One bias-corrected Adam update. The weight-decay term is added to
    /// the gradient before the moment update (coupled L2).
    ///
    /// `params` and `grads` are matched group by group. Nothing is modified
    /// if any gradient entry is non-finite.
    pub fn step(&mut self, mut params: Vec<&mut [T]>, grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err!("{} parameter groups but {} gradient groups", params.len(), grads.len()));
        }
        let mut total = 0;
        for (gi, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(shape_err!("group {gi}: {} parameters but {} gradients", p.len(), g.len()));
            }
            if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in parameter group {gi} at index {k}")));
            }
            total += p.len();
        }
        if total != self.first_moment.len() {
            return Err(shape_err!("optimizer tracks {} parameters, got {}", self.first_moment.len(), total));
        }

        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let bc1 = T::one() - c.beta1.powi(t);
        let bc2 = T::one() - c.beta2.powi(t);
        let mut k = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (theta, &grad) in p.iter_mut().zip(g.iter()) {
                let gd = grad + c.weight_decay * *theta;
                let m = &mut self.first_moment[k];
                let v = &mut self.second_moment[k];
                *m = c.beta1 * *m + (T::one() - c.beta1) * gd;
                *v = c.beta2 * *v + (T::one() - c.beta2) * gd * gd;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                k += 1;
            }
        }
        Ok(())
    }
}

/// Adam update of a network's parameters from a gradient bundle.
pub fn adam_step<T: Real>(net: &mut Mlp<T>, grads: &GradientBundle<T>, state: &mut AdamState<T>) -> Result<()> {
    if !grads.aux.is_empty() {
        return Err(shape_err!("gradient bundle carries an auxiliary vector the network does not own"));
    }
    state.step(net.param_groups_mut(), &grads.groups())
}

/// Adam update of a bare parameter vector.
pub fn adam_step_vec<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState<T>) -> Result<()> {
    state.step(vec![params], &[grads])
}

/// `‖prediction − target‖₂ / ‖target‖₂ × 100`.
pub fn relative_loss<T: Real>(prediction: &[T], target: &[T]) -> Result<T> {
    if prediction.len() != target.len() {
        return Err(shape_err!("prediction length {} vs target length {}", prediction.len(), target.len()));
    }
    let tn = l2_norm(target);
    if tn == T::zero() {
        return Err(domain_err!("relative loss undefined for a zero-norm target"));
    }
    let diff = prediction.iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>().sqrt();
    Ok(diff / tn * T::lit(100.0))
}

pub fn mse<T: Real>(prediction: &[T], target: &[T]) -> Result<T> {
    if prediction.len() != target.len() {
        return Err(shape_err!("prediction length {} vs target length {}", prediction.len(), target.len()));
    }
    if target.is_empty() {
        return Err(domain_err!("mean squared error of empty vectors"));
    }
    let s: T = prediction.iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum();
    Ok(s / T::count(target.len()))
}

pub(crate) fn l2_norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Seeded network with weights uniform in `±√(6/fan_in)` and zero biases.
///
/// `layer_dims` lists the input width followed by each layer's width, so
/// `[1, 64, 32, 1]` with three activations builds three layers.
pub fn init_mlp<T: Real>(layer_dims: &[usize], activations: &[Activation], seed: u64) -> Result<Mlp<T>> {
    if layer_dims.len() < 2 {
        return Err(domain_err!("need an input width and at least one layer width"));
    }
    if activations.len() != layer_dims.len() - 1 {
        return Err(domain_err!(
            "{} layers but {} activations",
            layer_dims.len() - 1,
            activations.len()
        ));
    }
    if layer_dims.contains(&0) {
        return Err(domain_err!("zero layer width in {layer_dims:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_dims
        .windows(2)
        .zip(activations)
        .map(|(dims, &act)| {
            let (fan_in, fan_out) = (dims[0], dims[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
            Layer::new(DenseMatrix::new(fan_out, fan_in, data)?, vec![T::zero(); fan_out], act)
        })
        .collect::<Result<Vec<_>>>()?;
    Mlp::new(layers)
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct LayerRepr<T> {
    rows: usize,
    cols: usize,
    weights: Vec<T>,
    bias: Vec<T>,
    activation: Activation,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct MlpRepr<T> {
    layers: Vec<LayerRepr<T>>,
    version: u32,
}

impl<T: Real> TryFrom<MlpRepr<T>> for Mlp<T> {
    type Error = Error;

    fn try_from(repr: MlpRepr<T>) -> Result<Self> {
        if repr.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported network format version {}", repr.version)));
        }
        let layers = repr
            .layers
            .into_iter()
            .map(|l| Layer::new(DenseMatrix::new(l.rows, l.cols, l.weights)?, l.bias, l.activation))
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }
}

impl<T: Real> From<Mlp<T>> for MlpRepr<T> {
    fn from(net: Mlp<T>) -> Self {
        let layers = net
            .layers
            .into_iter()
            .map(|l| LayerRepr {
                rows: l.weights.rows(),
                cols: l.weights.cols(),
                weights: l.weights.into_vec(),
                bias: l.bias,
                activation: l.activation,
            })
            .collect();
        MlpRepr { layers, version: FORMAT_VERSION }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, b: f64, act: Activation) -> Mlp<f64> {
        Mlp::new(vec![Layer::new(DenseMatrix::new(1, 1, vec![w]).unwrap(), vec![b], act).unwrap()]).unwrap()
    }

    #[test]
    fn forward_affine_zero_and_relu() {
        assert_eq!(single(2.0, 1.0, Activation::Identity).forward(&[3.0]).unwrap(), vec![7.0]);
        assert_eq!(single(1.0, -5.0, Activation::Relu).forward(&[3.0]).unwrap(), vec![0.0]);
        let mut net = init_mlp::<f64>(&[2, 5, 3], &[Activation::Tanh, Activation::Identity], 1).unwrap();
        for g in net.param_groups_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(net.forward(&[0.3, -4.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        assert!(matches!(single(1.0, 0.0, Activation::Identity).forward(&[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_linear_and_zero_upstream() {
        let net = single(2.0, 1.0, Activation::Identity);
        let g = net.backward(&[3.0], &[1.0]).unwrap();
        assert_eq!(g.layers[0].weights[(0, 0)], 3.0);
        assert_eq!(g.layers[0].bias[0], 1.0);

        let net = init_mlp::<f64>(&[1, 8, 1], &[Activation::Tanh, Activation::Identity], 4).unwrap();
        assert!(net.backward(&[0.2], &[0.0]).unwrap().is_zero());
        assert!(net.backward(&[0.2], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn init_shapes_and_determinism() {
        let acts = [Activation::Relu, Activation::Relu, Activation::Identity];
        let a = init_mlp::<f64>(&[1, 64, 32, 1], &acts, 9).unwrap();
        let b = init_mlp::<f64>(&[1, 64, 32, 1], &acts, 9).unwrap();
        assert_eq!(a, b);
        let shapes: Vec<_> = a.layers().iter().map(|l| l.weights.shape()).collect();
        assert_eq!(shapes, vec![(64, 1), (32, 64), (1, 32)]);
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        assert!(init_mlp::<f64>(&[1, 0, 1], &acts[..2], 0).is_err());
        assert!(init_mlp::<f64>(&[1, 4, 1], &acts, 0).is_err());
    }

    #[test]
    fn losses() {
        let t = [1.0, -2.0, 0.5];
        assert_eq!(relative_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(relative_loss(&[0.0; 3], &t).unwrap(), 100.0);
        let twice: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
        assert!((relative_loss(&twice, &t).unwrap() - 100.0).abs() < 1e-12);
        assert!(matches!(relative_loss(&[1.0], &[0.0]), Err(Error::Domain(_))));

        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        assert_eq!(mse(&[3.0], &[1.0]).unwrap(), 4.0);
        assert!(matches!(mse::<f64>(&[], &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn adam_first_step_is_sign_step() {
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        for &g in &[0.37, -2.5, 1e-3] {
            let mut p = [1.0f64];
            let mut st = AdamState::new(cfg, 1);
            adam_step_vec(&mut p, &[g], &mut st).unwrap();
            let expected = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            assert!(((p[0] - 1.0) - expected).abs() <= 1e-6 * expected.abs());
            assert_eq!(st.step_count, 1);
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut p = [0.5f64, -1.0];
        let mut st = AdamState::new(cfg, 2);
        adam_step_vec(&mut p, &[0.0, 0.0], &mut st).unwrap();
        adam_step_vec(&mut p, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(p, [0.5, -1.0]);
        assert_eq!(st.first_moment, vec![0.0, 0.0]);
        assert_eq!(st.second_moment, vec![0.0, 0.0]);
        assert_eq!(st.step_count, 2);
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut p = [0.0f64];
        let mut st = AdamState::new(cfg, 1);
        let mut prev = p[0];
        for _ in 0..10 {
            adam_step_vec(&mut p, &[0.8], &mut st).unwrap();
            assert!(p[0] < prev);
            prev = p[0];
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = [1.0f64, 2.0];
        let mut st = AdamState::new(AdamConfig::default(), 2);
        let err = adam_step_vec(&mut p, &[0.1, f64::INFINITY], &mut st).unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn json_layout() {
        let net = single(2.0, 1.0, Activation::Tanh);
        let v: serde_json::Value = serde_json::to_value(&net).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"layers":[{"rows":1,"cols":1,"weights":[2.0],"bias":[1.0],"activation":"tanh"}],"version":1})
        );
        let back: Mlp<f64> = serde_json::from_value(v).unwrap();
        assert_eq!(back, net);
        let bad = serde_json::json!({"layers":[{"rows":2,"cols":1,"weights":[2.0],"bias":[1.0],"activation":"tanh"}],"version":1});
        assert!(serde_json::from_value::<Mlp<f64>>(bad).is_err());
    }
}
