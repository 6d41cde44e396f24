//! Partition-of-unity multiscale model.
//!
//! ```text
//! f(x) = Σ_modes Σ_i F_i^m · N_i(x) · G^m(x − x_i)
//! ```
//!
//! `F_i^m` is the output of a per-mode macro network at the (normalized)
//! macro node `x_i`, `N_i` is the hat function of node `i`, and `G^m` is a
//! shared micro profile sampled on `[−h, h]` and interpolated linearly.
//! Modes are trained one at a time with the earlier ones frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{TrajectoryDataset, VectorField};
use crate::error::{domain_err, shape_err, Error, Result};
use crate::mesh::MultiscaleMesh;
use crate::nn::{self, Activation, AdamConfig, AdamState, ForwardCache, GradientBundle, Mlp};
use crate::scalar::Real;

const FORMAT_VERSION: u32 = 1;

/// Widths of the macro network: scalar input, two ReLU hidden layers, scalar output.
pub const MACRO_NET_DIMS: [usize; 4] = [1, 64, 32, 1];
pub const MACRO_NET_ACTIVATIONS: [Activation; 3] = [Activation::Relu, Activation::Relu, Activation::Identity];

/// Trainable micro profile on a uniform grid over `[−h, h]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", try_from = "Vec<T>", into = "Vec<T>")]
pub struct MicroVector<T> {
    samples: Vec<T>,
}

impl<T: Real> MicroVector<T> {
    /// Requires an odd length of at least three so that `δ = 0` is a sample.
    pub fn new(samples: Vec<T>) -> Result<Self> {
        if samples.len() < 3 || samples.len() % 2 == 0 {
            return Err(domain_err!("micro vector length must be odd and at least 3, got {}", samples.len()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite micro sample".into()));
        }
        Ok(Self { samples })
    }

    pub fn ones(len: usize) -> Result<Self> {
        Self::new(vec![T::one(); len])
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [T] {
        &mut self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample coordinates `δ_j` over `[−h, h]`.
    pub fn coordinates(&self, h: T) -> Vec<T> {
        let last = T::count(self.samples.len() - 1);
        (0..self.samples.len()).map(|j| -h + T::lit(2.0) * h * T::count(j) / last).collect()
    }

    /// Interpolation stencil `(j, w)` with value `(1 − w)·s[j] + w·s[j + 1]`,
    /// or `None` when `|δ| > h`.
    #[inline]
    pub fn stencil(&self, delta: T, h: T) -> Option<(usize, T)> {
        if delta.abs() > h {
            return None;
        }
        let last = self.samples.len() - 1;
        let pos = (delta + h) / (T::lit(2.0) * h) * T::count(last);
        let j = pos.floor().to_usize().unwrap_or(0).min(last - 1);
        Some((j, pos - T::count(j)))
    }

    /// `G(δ)`: linear interpolation of the samples, zero outside `[−h, h]`.
    #[inline]
    pub fn eval(&self, delta: T, h: T) -> T {
        match self.stencil(delta, h) {
            Some((j, w)) => self.samples[j] * (T::one() - w) + self.samples[j + 1] * w,
            None => T::zero(),
        }
    }
}

impl<T: Real> TryFrom<Vec<T>> for MicroVector<T> {
    type Error = Error;

    fn try_from(v: Vec<T>) -> Result<Self> {
        Self::new(v)
    }
}

impl<T> From<MicroVector<T>> for Vec<T> {
    fn from(m: MicroVector<T>) -> Self {
        m.samples
    }
}

/// One enrichment mode: macro network plus shared micro profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PuMode<T> {
    pub macro_net: Mlp<T>,
    pub micro: MicroVector<T>,
}

/// Affine input map `u = a·x + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AffineNorm<T> {
    pub a: T,
    pub b: T,
}

impl<T: Real> AffineNorm<T> {
    /// Maps `[start, end]` onto `[−1, 1]`.
    pub fn to_symmetric_unit(start: T, end: T) -> Self {
        let a = T::lit(2.0) / (end - start);
        Self { a, b: -T::one() - a * start }
    }

    /// Maps `[start, end]` onto `[0, 1]`.
    pub fn to_unit(start: T, end: T) -> Self {
        let a = T::one() / (end - start);
        Self { a, b: -a * start }
    }

    #[inline]
    pub fn apply(&self, x: T) -> T {
        self.a * x + self.b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", try_from = "PuModelRepr<T>", into = "PuModelRepr<T>")]
pub struct PuModel<T> {
    mesh: MultiscaleMesh<T>,
    modes: Vec<PuMode<T>>,
    norm: AffineNorm<T>,
}

/// Training hyperparameters shared by the PU trainer and the sparse completion trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", default)]
pub struct TrainConfig<T> {
    pub epochs: usize,
    pub learning_rate: T,
    pub weight_decay: T,
    pub mse_threshold: T,
    pub max_modes: usize,
    pub seed: u64,
    /// Mini-batch size; `0` means full batch.
    pub batch_size: usize,
    /// Micro vector length; `None` means `2n + 1`.
    pub micro_len: Option<usize>,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: T::lit(1e-3),
            weight_decay: T::lit(1e-4),
            mse_threshold: T::lit(1e-2),
            max_modes: 5,
            seed: 0,
            batch_size: 64,
            micro_len: None,
        }
    }
}

impl<T: Real> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(domain_err!("epochs must be positive"));
        }
        if !(self.learning_rate > T::zero()) || self.weight_decay < T::zero() {
            return Err(domain_err!("learning rate must be positive and weight decay nonnegative"));
        }
        if !(self.mse_threshold > T::zero()) {
            return Err(domain_err!("mse threshold must be positive"));
        }
        if self.max_modes == 0 {
            return Err(domain_err!("max_modes must be at least 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig<T> {
        AdamConfig { learning_rate: self.learning_rate, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

/// Relative training loss (percent) recorded before the first epoch and after each epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct TrainHistory<T> {
    pub loss: Vec<T>,
}

impl<T: Real> TrainHistory<T> {
    pub fn initial(&self) -> Option<T> {
        self.loss.first().copied()
    }

    pub fn last(&self) -> Option<T> {
        self.loss.last().copied()
    }
}

/// Precomputed geometry of one sample: its element, hat weights and micro stencils.
#[derive(Clone, Copy, Debug)]
struct SampleGeometry<T> {
    element: usize,
    hats: [T; 2],
    stencils: [Option<(usize, T)>; 2],
}

impl<T: Real> PuModel<T> {
    /// Empty model (zero modes) on `mesh`, with inputs normalized to `[−1, 1]`.
    pub fn new(mesh: MultiscaleMesh<T>) -> Self {
        let norm = AffineNorm::to_symmetric_unit(mesh.start(), mesh.end());
        Self { mesh, modes: Vec::new(), norm }
    }

    pub fn with_modes(mesh: MultiscaleMesh<T>, modes: Vec<PuMode<T>>) -> Result<Self> {
        let mut model = Self::new(mesh);
        for mode in modes {
            model.push_mode(mode)?;
        }
        Ok(model)
    }

    pub fn mesh(&self) -> &MultiscaleMesh<T> {
        &self.mesh
    }

    pub fn modes(&self) -> &[PuMode<T>] {
        &self.modes
    }

    pub fn modes_mut(&mut self) -> &mut [PuMode<T>] {
        &mut self.modes
    }

    pub fn norm(&self) -> AffineNorm<T> {
        self.norm
    }

    pub fn push_mode(&mut self, mode: PuMode<T>) -> Result<()> {
        if mode.macro_net.input_dim() != 1 || mode.macro_net.output_dim() != 1 {
            return Err(shape_err!(
                "macro network must map 1 -> 1, got {} -> {}",
                mode.macro_net.input_dim(),
                mode.macro_net.output_dim()
            ));
        }
        self.modes.push(mode);
        Ok(())
    }

    /// Model made of a single mode of this one.
    pub fn single_mode(&self, k: usize) -> Result<Self> {
        let mode = self.modes.get(k).ok_or_else(|| domain_err!("mode {k} out of range"))?;
        Ok(Self { mesh: self.mesh.clone(), modes: vec![mode.clone()], norm: self.norm })
    }

    /// Model made of the first `k` modes.
    pub fn truncated(&self, k: usize) -> Self {
        Self { mesh: self.mesh.clone(), modes: self.modes[..k.min(self.modes.len())].to_vec(), norm: self.norm }
    }

    /// `F_i` of mode `k`.
    pub fn macro_coeff(&self, k: usize, i: usize) -> Result<T> {
        let mode = self.modes.get(k).ok_or_else(|| domain_err!("mode {k} out of range"))?;
        if i > self.mesh.macro_count() {
            return Err(domain_err!("macro node index {i} out of range 0..={}", self.mesh.macro_count()));
        }
        Ok(mode.macro_net.forward(&[self.norm.apply(self.mesh.macro_nodes()[i])])?[0])
    }

    /// All `F_i` of mode `k`, one per macro node.
    pub fn macro_coefficients(&self, k: usize) -> Result<Vec<T>> {
        let mode = self.modes.get(k).ok_or_else(|| domain_err!("mode {k} out of range"))?;
        self.mesh
            .macro_nodes()
            .iter()
            .map(|&x| Ok(mode.macro_net.forward(&[self.norm.apply(x)])?[0]))
            .collect()
    }

    fn geometry(&self, micro: &MicroVector<T>, x: T) -> Result<SampleGeometry<T>> {
        let loc = self.mesh.locate(x)?;
        let nodes = self.mesh.macro_nodes();
        let h = self.mesh.element_size();
        let e = loc.element;
        let stencil = |delta: T| micro.stencil(delta, h);
        Ok(SampleGeometry {
            element: e,
            hats: [T::one() - loc.local, loc.local],
            stencils: [stencil(x - nodes[e]), stencil(x - nodes[e + 1])],
        })
    }

    /// Evaluates `f(x)`.
    pub fn eval(&self, x: T) -> Result<T> {
        let loc = self.mesh.locate(x)?;
        let nodes = self.mesh.macro_nodes();
        let h = self.mesh.element_size();
        let mut total = T::zero();
        for mode in &self.modes {
            let mut contribution = T::zero();
            for (i, hat) in loc.support() {
                let f_i = mode.macro_net.forward(&[self.norm.apply(nodes[i])])?[0];
                contribution += f_i * hat * mode.micro.eval(x - nodes[i], h);
            }
            total += contribution;
        }
        Ok(total)
    }

    /// Evaluates `f` at many points, computing each mode's coefficients once.
    pub fn eval_many(&self, xs: &[T]) -> Result<Vec<T>> {
        let coeffs = (0..self.modes.len()).map(|k| self.macro_coefficients(k)).collect::<Result<Vec<_>>>()?;
        let nodes = self.mesh.macro_nodes();
        let h = self.mesh.element_size();
        xs.iter()
            .map(|&x| {
                let loc = self.mesh.locate(x)?;
                let mut total = T::zero();
                for (mode, f) in self.modes.iter().zip(&coeffs) {
                    let mut contribution = T::zero();
                    for (i, hat) in loc.support() {
                        contribution += f[i] * hat * mode.micro.eval(x - nodes[i], h);
                    }
                    total += contribution;
                }
                Ok(total)
            })
            .collect()
    }

    /// Relative loss (percent) of the whole model on `(xs, ys)` and its
    /// gradient with respect to mode `k`'s network (in `layers`) and micro
    /// samples (in `aux`).
    pub fn loss_gradient(&self, k: usize, xs: &[T], ys: &[T]) -> Result<(T, GradientBundle<T>)> {
        check_samples(&self.mesh, xs, ys)?;
        if k >= self.modes.len() {
            return Err(domain_err!("mode {k} out of range"));
        }
        let others: Vec<usize> = (0..self.modes.len()).filter(|&j| j != k).collect();
        let base = self.partial_eval(&others, xs)?;
        let mode = &self.modes[k];
        let geo = xs.iter().map(|&x| self.geometry(&mode.micro, x)).collect::<Result<Vec<_>>>()?;
        let idx: Vec<usize> = (0..xs.len()).collect();
        let mut grads = GradientBundle::zeros_with_aux(&mode.macro_net, mode.micro.len());
        let loss = batch_loss_gradient(mode, &self.node_inputs(), &geo, &base, ys, &idx, &mut grads)?
            .ok_or_else(|| domain_err!("relative loss undefined for a zero-norm target"))?;
        Ok((loss, grads))
    }

    fn node_inputs(&self) -> Vec<T> {
        self.mesh.macro_nodes().iter().map(|&x| self.norm.apply(x)).collect()
    }

    fn partial_eval(&self, modes: &[usize], xs: &[T]) -> Result<Vec<T>> {
        let sub = Self {
            mesh: self.mesh.clone(),
            modes: modes.iter().map(|&j| self.modes[j].clone()).collect(),
            norm: self.norm,
        };
        sub.eval_many(xs)
    }
}

fn check_samples<T: Real>(mesh: &MultiscaleMesh<T>, xs: &[T], ys: &[T]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(shape_err!("{} inputs but {} targets", xs.len(), ys.len()));
    }
    if xs.is_empty() {
        return Err(domain_err!("no training samples"));
    }
    if let Some(&x) = xs.iter().find(|&&x| !mesh.contains(x)) {
        return Err(domain_err!("sample x = {x} outside mesh domain [{}, {}]", mesh.start(), mesh.end()));
    }
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::Numeric("non-finite training target".into()));
    }
    Ok(())
}

/// Relative loss over the samples listed in `idx` and its gradient with
/// respect to `mode`, accumulated into `grads`. Returns `None` when the
/// selected targets have zero norm.
fn batch_loss_gradient<T: Real>(
    mode: &PuMode<T>,
    node_inputs: &[T],
    geo: &[SampleGeometry<T>],
    base: &[T],
    ys: &[T],
    idx: &[usize],
    grads: &mut GradientBundle<T>,
) -> Result<Option<T>> {
    let caches: Vec<ForwardCache<T>> =
        node_inputs.iter().map(|&u| mode.macro_net.forward_cached(&[u])).collect::<Result<_>>()?;
    let coeffs: Vec<T> = caches.iter().map(|c| c.output()[0]).collect();
    let micro = mode.micro.samples();
    let g_at = |s: Option<(usize, T)>| match s {
        Some((j, w)) => micro[j] * (T::one() - w) + micro[j + 1] * w,
        None => T::zero(),
    };

    let mut residual = Vec::with_capacity(idx.len());
    let mut target_sq = T::zero();
    for &s in idx {
        let g = &geo[s];
        let e = g.element;
        let pred = base[s] + (coeffs[e] * g.hats[0] * g_at(g.stencils[0]) + coeffs[e + 1] * g.hats[1] * g_at(g.stencils[1]));
        residual.push(pred - ys[s]);
        target_sq += ys[s] * ys[s];
    }
    let target_norm = target_sq.sqrt();
    if target_norm == T::zero() {
        return Ok(None);
    }
    let res_norm = nn::l2_norm(&residual);
    let hundred = T::lit(100.0);
    let loss = hundred * res_norm / target_norm;
    if res_norm == T::zero() {
        return Ok(Some(loss));
    }

    let scale = hundred / (res_norm * target_norm);
    let mut d_coeff = vec![T::zero(); coeffs.len()];
    for (&s, &r) in idx.iter().zip(&residual) {
        let g = &geo[s];
        let d_pred = scale * r;
        for side in 0..2 {
            let node = g.element + side;
            let hat = g.hats[side];
            if let Some((j, w)) = g.stencils[side] {
                let gval = micro[j] * (T::one() - w) + micro[j + 1] * w;
                d_coeff[node] += d_pred * hat * gval;
                let dg = d_pred * coeffs[node] * hat;
                grads.aux[j] += dg * (T::one() - w);
                grads.aux[j + 1] += dg * w;
            }
        }
    }
    for (cache, &d) in caches.iter().zip(&d_coeff) {
        if d != T::zero() {
            mode.macro_net.backward_accumulate(cache, &[d], grads)?;
        }
    }
    Ok(Some(loss))
}

pub(crate) fn mode_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1)
}

/// Appends one freshly initialized mode (micro ≡ 1) and trains it with the
/// earlier modes frozen, minimizing the relative loss of the composed model.
pub fn train_mode<T: Real>(
    model: &PuModel<T>,
    xs: &[T],
    ys: &[T],
    config: &TrainConfig<T>,
) -> Result<(PuModel<T>, TrainHistory<T>)> {
    config.validate()?;
    check_samples(model.mesh(), xs, ys)?;
    if nn::l2_norm(ys) == T::zero() {
        return Err(domain_err!("training targets have zero norm"));
    }

    let k = model.modes.len();
    let seed = mode_seed(config.seed, k);
    let micro_len = config.micro_len.unwrap_or(2 * model.mesh.micro_per_element() + 1);
    let net = nn::init_mlp::<T>(&MACRO_NET_DIMS, &MACRO_NET_ACTIVATIONS, seed)?;
    let mut mode = PuMode { macro_net: net, micro: MicroVector::ones(micro_len)? };

    let base = model.eval_many(xs)?;
    let geo = xs.iter().map(|&x| model.geometry(&mode.micro, x)).collect::<Result<Vec<_>>>()?;
    let node_inputs = model.node_inputs();

    let mut adam = AdamState::new(config.adam(), mode.macro_net.num_params() + micro_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let batch = if config.batch_size == 0 { xs.len() } else { config.batch_size.min(xs.len()) };

    let full_loss = |mode: &PuMode<T>| -> Result<T> {
        let caches: Vec<T> =
            node_inputs.iter().map(|&u| Ok(mode.macro_net.forward(&[u])?[0])).collect::<Result<_>>()?;
        let preds: Vec<T> = geo
            .iter()
            .zip(&base)
            .map(|(g, &b)| {
                let e = g.element;
                b + (caches[e] * g.hats[0] * eval_stencil(&mode.micro, g.stencils[0])
                    + caches[e + 1] * g.hats[1] * eval_stencil(&mode.micro, g.stencils[1]))
            })
            .collect();
        nn::relative_loss(&preds, ys)
    };

    let mut history = TrainHistory { loss: vec![full_loss(&mode)?] };
    for _ in 0..config.epochs {
        if batch < xs.len() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let mut grads = GradientBundle::zeros_with_aux(&mode.macro_net, micro_len);
            let loss = batch_loss_gradient(&mode, &node_inputs, &geo, &base, ys, chunk, &mut grads)?;
            match loss {
                Some(l) if !l.is_finite() => return Err(Error::Numeric("training loss became non-finite".into())),
                Some(_) => {}
                None => continue,
            }
            let mut params = mode.macro_net.param_groups_mut();
            params.push(mode.micro.samples_mut());
            adam.step(params, &grads.groups())?;
        }
        let l = full_loss(&mode)?;
        if !l.is_finite() {
            return Err(Error::Numeric("training loss became non-finite".into()));
        }
        history.loss.push(l);
    }

    let mut out = model.clone();
    out.modes.push(mode);
    Ok((out, history))
}

#[inline]
fn eval_stencil<T: Real>(micro: &MicroVector<T>, s: Option<(usize, T)>) -> T {
    match s {
        Some((j, w)) => micro.samples()[j] * (T::one() - w) + micro.samples()[j + 1] * w,
        None => T::zero(),
    }
}

/// Outcome of [`adaptive_fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AdaptiveFit<T> {
    pub model: PuModel<T>,
    /// Validation MSE after each accepted mode.
    pub validation_mse: Vec<T>,
    pub histories: Vec<TrainHistory<T>>,
    /// Whether the final validation MSE is below the threshold.
    pub converged: bool,
    /// Validation MSE of a trained mode that was discarded because it made the fit worse.
    pub rejected_mse: Option<T>,
}

/// Adds modes one at a time until the validation MSE drops below
/// `config.mse_threshold` or `config.max_modes` is reached. A mode that
/// increases the validation MSE is discarded and the search stops.
pub fn adaptive_fit<T: Real>(
    train: (&[T], &[T]),
    validation: (&[T], &[T]),
    mesh: &MultiscaleMesh<T>,
    config: &TrainConfig<T>,
) -> Result<AdaptiveFit<T>> {
    config.validate()?;
    let (vx, vy) = validation;
    check_samples(mesh, vx, vy)?;
    let mut model = PuModel::new(mesh.clone());
    let mut validation_mse: Vec<T> = Vec::new();
    let mut histories = Vec::new();
    let mut rejected_mse = None;
    while model.modes.len() < config.max_modes {
        let (candidate, history) = train_mode(&model, train.0, train.1, config)?;
        let err = nn::mse(&candidate.eval_many(vx)?, vy)?;
        if !err.is_finite() {
            return Err(Error::Numeric("validation error became non-finite".into()));
        }
        if validation_mse.last().is_some_and(|&prev| err > prev) {
            rejected_mse = Some(err);
            break;
        }
        model = candidate;
        validation_mse.push(err);
        histories.push(history);
        if err < config.mse_threshold {
            break;
        }
    }
    let converged = validation_mse.last().is_some_and(|&e| e < config.mse_threshold);
    Ok(AdaptiveFit { model, validation_mse, histories, converged, rejected_mse })
}

/// Pair of 1D models for a 2-state system: `a` predicts `ẋ₁` from `x₀`,
/// `b` predicts `ẋ₀` from `x₁`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct CoupledPuModel<T> {
    pub a: PuModel<T>,
    pub b: PuModel<T>,
}

impl<T: Real> CoupledPuModel<T> {
    /// `(ẋ₀, ẋ₁)` at `state`; fails outside either mesh.
    pub fn predict(&self, state: &[T]) -> Result<Vec<T>> {
        if state.len() != 2 {
            return Err(shape_err!("coupled model expects a 2-state, got {}", state.len()));
        }
        Ok(vec![self.b.eval(state[1])?, self.a.eval(state[0])?])
    }

    /// Mean squared error over both derivative components of the given samples.
    pub fn mse(&self, dataset: &TrajectoryDataset<T>, indices: &[usize]) -> Result<T> {
        let (x0, d1) = dataset.column_pair(indices, 0, 1);
        let (x1, d0) = dataset.column_pair(indices, 1, 0);
        let ea = nn::mse(&self.a.eval_many(&x0)?, &d1)?;
        let eb = nn::mse(&self.b.eval_many(&x1)?, &d0)?;
        Ok((ea + eb) / T::lit(2.0))
    }
}

/// Outcome of [`fit_coupled`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct CoupledFit<T> {
    pub a: AdaptiveFit<T>,
    pub b: AdaptiveFit<T>,
}

impl<T: Real> CoupledFit<T> {
    pub fn model(&self) -> CoupledPuModel<T> {
        CoupledPuModel { a: self.a.model.clone(), b: self.b.model.clone() }
    }
}

/// Splits a 2-state dataset into two 1D problems and fits each with
/// [`adaptive_fit`], validating on the test split. `mesh_a` spans `x₀`,
/// `mesh_b` spans `x₁`.
pub fn fit_coupled<T: Real>(
    dataset: &TrajectoryDataset<T>,
    mesh_a: &MultiscaleMesh<T>,
    mesh_b: &MultiscaleMesh<T>,
    config: &TrainConfig<T>,
) -> Result<CoupledFit<T>> {
    if dataset.state_dim() != 2 {
        return Err(shape_err!("coupled fit needs a 2-state dataset, got dimension {}", dataset.state_dim()));
    }
    let (train, test) = (dataset.train_indices(), dataset.test_indices());
    let (ax, ay) = dataset.column_pair(train, 0, 1);
    let (avx, avy) = dataset.column_pair(test, 0, 1);
    let a = adaptive_fit((&ax, &ay), (&avx, &avy), mesh_a, config)?;
    let (bx, by) = dataset.column_pair(train, 1, 0);
    let (bvx, bvy) = dataset.column_pair(test, 1, 0);
    let b_config = TrainConfig { seed: config.seed.wrapping_add(1), ..config.clone() };
    let b = adaptive_fit((&bx, &by), (&bvx, &bvy), mesh_b, &b_config)?;
    Ok(CoupledFit { a, b })
}

fn clamp_to<T: Real>(mesh: &MultiscaleMesh<T>, x: T, clamped: &mut bool) -> T {
    if x < mesh.start() {
        *clamped = true;
        mesh.start()
    } else if x > mesh.end() {
        *clamped = true;
        mesh.end()
    } else {
        x
    }
}

/// A 1D model used as `ẋ = f(x)`; queries outside the mesh are clamped to its ends.
#[derive(Debug)]
pub struct PuField<'a, T> {
    model: &'a PuModel<T>,
    clamped: bool,
}

impl<'a, T: Real> PuField<'a, T> {
    pub fn new(model: &'a PuModel<T>) -> Self {
        Self { model, clamped: false }
    }
}

impl<T: Real> VectorField<T> for PuField<'_, T> {
    fn eval(&mut self, state: &[T]) -> Result<Vec<T>> {
        if state.len() != 1 {
            return Err(shape_err!("1D model evaluated on a {}-state", state.len()));
        }
        let x = clamp_to(self.model.mesh(), state[0], &mut self.clamped);
        Ok(vec![self.model.eval(x)?])
    }

    fn clamped(&self) -> bool {
        self.clamped
    }
}

/// A coupled model used as a 2-state vector field, clamping like [`PuField`].
#[derive(Debug)]
pub struct CoupledPuField<'a, T> {
    model: &'a CoupledPuModel<T>,
    clamped: bool,
}

impl<'a, T: Real> CoupledPuField<'a, T> {
    pub fn new(model: &'a CoupledPuModel<T>) -> Self {
        Self { model, clamped: false }
    }
}

impl<T: Real> VectorField<T> for CoupledPuField<'_, T> {
    fn eval(&mut self, state: &[T]) -> Result<Vec<T>> {
        if state.len() != 2 {
            return Err(shape_err!("coupled model evaluated on a {}-state", state.len()));
        }
        let x0 = clamp_to(self.model.a.mesh(), state[0], &mut self.clamped);
        let x1 = clamp_to(self.model.b.mesh(), state[1], &mut self.clamped);
        self.model.predict(&[x0, x1])
    }

    fn clamped(&self) -> bool {
        self.clamped
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct PuModelRepr<T> {
    mesh: MultiscaleMesh<T>,
    modes: Vec<PuMode<T>>,
    norm: AffineNorm<T>,
    version: u32,
}

impl<T: Real> TryFrom<PuModelRepr<T>> for PuModel<T> {
    type Error = Error;

    fn try_from(r: PuModelRepr<T>) -> Result<Self> {
        if r.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported PU model format version {}", r.version)));
        }
        if !(r.norm.a.is_finite() && r.norm.b.is_finite()) || r.norm.a == T::zero() {
            return Err(Error::Format("degenerate input normalization".into()));
        }
        let mut model = PuModel::with_modes(r.mesh, r.modes)?;
        model.norm = r.norm;
        Ok(model)
    }
}

impl<T: Real> From<PuModel<T>> for PuModelRepr<T> {
    fn from(m: PuModel<T>) -> Self {
        PuModelRepr { mesh: m.mesh, modes: m.modes, norm: m.norm, version: FORMAT_VERSION }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;
    use crate::nn::Layer;

    /// 1 → 1 identity-activation network that outputs the constant `c`.
    pub(crate) fn constant_net(c: f64) -> Mlp<f64> {
        Mlp::new(vec![Layer::new(DenseMatrix::new(1, 1, vec![0.0]).unwrap(), vec![c], Activation::Identity).unwrap()])
            .unwrap()
    }

    /// Network with `F(u) = slope·u + c`.
    fn affine_net(slope: f64, c: f64) -> Mlp<f64> {
        Mlp::new(vec![Layer::new(DenseMatrix::new(1, 1, vec![slope]).unwrap(), vec![c], Activation::Identity).unwrap()])
            .unwrap()
    }

    #[test]
    fn micro_eval_cases() {
        let mv = MicroVector::new(vec![1.0, 4.0, 2.0, 0.0, 5.0]).unwrap();
        assert_eq!(mv.eval(0.0, 2.0), 2.0);
        assert_eq!(mv.eval(2.0 + 1e-12, 2.0), 0.0);
        assert_eq!(mv.eval(-2.5, 2.0), 0.0);
        assert_eq!(mv.eval(-2.0, 2.0), 1.0);
        assert_eq!(mv.eval(2.0, 2.0), 5.0);
        assert!((mv.eval(0.5, 2.0) - 1.0f64).abs() < 1e-15);
        let ones = MicroVector::<f64>::ones(7).unwrap();
        for d in [-0.3, -0.1, 0.0, 0.05, 0.3] {
            assert_eq!(ones.eval(d, 0.3), 1.0);
        }
        assert!(MicroVector::new(vec![1.0, 2.0]).is_err());
        assert!(MicroVector::new(vec![1.0; 4]).is_err());
    }

    #[test]
    fn empty_model_evaluates_to_zero() {
        let model = PuModel::new(MultiscaleMesh::new(0.0, 1.0, 3, 4).unwrap());
        assert_eq!(model.eval(0.4).unwrap(), 0.0);
        assert!(model.eval(1.5).is_err());
    }

    #[test]
    fn constant_mode_reproduces_constant() {
        let mesh = MultiscaleMesh::new(-2.0, 2.0, 4, 5).unwrap();
        let mode = PuMode { macro_net: constant_net(3.5), micro: MicroVector::ones(11).unwrap() };
        let model = PuModel::with_modes(mesh, vec![mode]).unwrap();
        for x in [-2.0, -1.3, 0.0, 0.77, 2.0] {
            assert!((model.eval(x).unwrap() - 3.5).abs() < 1e-12);
        }
        for i in 0..=4 {
            assert_eq!(model.macro_coeff(0, i).unwrap(), 3.5);
        }
        assert!(model.macro_coeff(0, 5).is_err());
        assert!(model.macro_coeff(1, 0).is_err());
    }

    #[test]
    fn zero_net_gives_zero_coefficients() {
        let mesh = MultiscaleMesh::new(0.0, 1.0, 3, 2).unwrap();
        let mode = PuMode { macro_net: constant_net(0.0), micro: MicroVector::ones(5).unwrap() };
        let model = PuModel::with_modes(mesh, vec![mode]).unwrap();
        assert_eq!(model.macro_coefficients(0).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn neutral_micro_matches_hat_interpolation() {
        let mesh = MultiscaleMesh::new(0.0, 3.0, 3, 4).unwrap();
        let mode = PuMode { macro_net: affine_net(1.7, -0.2), micro: MicroVector::ones(9).unwrap() };
        let model = PuModel::with_modes(mesh.clone(), vec![mode]).unwrap();
        let f = model.macro_coefficients(0).unwrap();
        for k in 0..=60 {
            let x = 3.0 * k as f64 / 60.0;
            // interpolate directly from the node table
            let pos = x.min(3.0 - 1e-15).floor() as usize;
            let t = x - pos as f64;
            let expected = f[pos] * (1.0 - t) + f[pos + 1] * t;
            assert!((model.eval(x).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_many_agrees_with_eval() {
        let mesh = MultiscaleMesh::new(0.0, 1.0, 2, 3).unwrap();
        let net = nn::init_mlp(&MACRO_NET_DIMS, &MACRO_NET_ACTIVATIONS, 3).unwrap();
        let micro = MicroVector::new((0..7).map(|j| 1.0 + 0.1 * j as f64).collect()).unwrap();
        let model = PuModel::with_modes(mesh, vec![PuMode { macro_net: net, micro }]).unwrap();
        let xs = [0.0, 0.1, 0.5, 0.93, 1.0];
        let many = model.eval_many(&xs).unwrap();
        for (x, v) in xs.iter().zip(many) {
            assert_eq!(model.eval(*x).unwrap(), v);
        }
    }

    #[test]
    fn train_mode_rejects_degenerate_data() {
        let model = PuModel::new(MultiscaleMesh::new(0.0, 1.0, 2, 3).unwrap());
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        assert!(matches!(train_mode(&model, &[0.1, 0.2], &[0.0, 0.0], &cfg), Err(Error::Domain(_))));
        assert!(train_mode(&model, &[], &[], &cfg).is_err());
        assert!(train_mode(&model, &[0.1, 2.0], &[1.0, 1.0], &cfg).is_err());
    }

    #[test]
    fn json_layout() {
        let mesh = MultiscaleMesh::new(0.0, 1.0, 1, 2).unwrap();
        let mode = PuMode { macro_net: constant_net(1.0), micro: MicroVector::ones(5).unwrap() };
        let model = PuModel::with_modes(mesh, vec![mode]).unwrap();
        let v = serde_json::to_value(&model).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["norm"], serde_json::json!({"a": 2.0, "b": -1.0}));
        assert_eq!(v["modes"][0]["micro"], serde_json::json!([1.0, 1.0, 1.0, 1.0, 1.0]));
        assert_eq!(v["mesh"]["m"], 1);
        let back: PuModel<f64> = serde_json::from_value(v).unwrap();
        assert_eq!(back, model);
    }
}
