//! Sparse completion of a folded matrix by stages of neural factor pairs.
//!
//! Each stage approximates the current residual on the observed entries by
//! `⟨row_net(x_i), col_net(x_j)⟩`; the model predicts the sum of its
//! stages at every `(i, j)`, including entries that were never observed.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::linalg::DenseMatrix;
use crate::nn::{self, Activation, AdamState, ForwardCache, GradientBundle, Mlp};
use crate::pu::{AffineNorm, TrainConfig, TrainHistory};
use crate::scalar::Real;

const FORMAT_VERSION: u32 = 1;

/// Hidden widths of each factor network.
pub const FACTOR_HIDDEN: [usize; 3] = [64, 64, 64];
pub const FACTOR_ACTIVATION: Activation = Activation::Tanh;

/// Default training budget of one stage.
pub fn default_stage_config<T: Real>() -> TrainConfig<T> {
    TrainConfig { epochs: 2000, batch_size: 0, ..TrainConfig::default() }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Observation<T> {
    pub i: usize,
    pub j: usize,
    pub value: T,
}

/// Observed entries of an `n_rows × n_cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet<T> {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<Observation<T>>,
}

impl<T: Real> ObservationSet<T> {
    /// Rejects out-of-range indices, duplicates and non-finite values.
    pub fn new(n_rows: usize, n_cols: usize, entries: Vec<Observation<T>>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for o in &entries {
            if o.i >= n_rows || o.j >= n_cols {
                return Err(domain_err!("entry ({}, {}) outside {n_rows}x{n_cols}", o.i, o.j));
            }
            if !seen.insert((o.i, o.j)) {
                return Err(domain_err!("duplicate entry ({}, {})", o.i, o.j));
            }
            if !o.value.is_finite() {
                return Err(Error::Numeric(format!("non-finite value at ({}, {})", o.i, o.j)));
            }
        }
        Ok(Self { n_rows, n_cols, entries })
    }

    /// Every entry of `matrix`.
    pub fn full(matrix: &DenseMatrix<T>) -> Self {
        let entries = (0..matrix.rows())
            .flat_map(|i| (0..matrix.cols()).map(move |j| (i, j)))
            .map(|(i, j)| Observation { i, j, value: matrix[(i, j)] })
            .collect();
        Self { n_rows: matrix.rows(), n_cols: matrix.cols(), entries }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn entries(&self) -> &[Observation<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn observed_fraction(&self) -> f64 {
        self.entries.len() as f64 / (self.n_rows * self.n_cols) as f64
    }

    pub fn values(&self) -> Vec<T> {
        self.entries.iter().map(|o| o.value).collect()
    }

    /// Same support with values replaced by `f(i, j, value)`.
    pub fn map_values(&self, mut f: impl FnMut(usize, usize, T) -> T) -> Self {
        let entries = self.entries.iter().map(|o| Observation { i: o.i, j: o.j, value: f(o.i, o.j, o.value) }).collect();
        Self { n_rows: self.n_rows, n_cols: self.n_cols, entries }
    }
}

/// Splits the entries of `matrix` into observed and hidden sets, hiding a
/// `hidden_fraction` of them uniformly at random. Both sets list entries in
/// row-major order.
pub fn mask<T: Real>(
    matrix: &DenseMatrix<T>,
    hidden_fraction: f64,
    seed: u64,
) -> Result<(ObservationSet<T>, ObservationSet<T>)> {
    if !(hidden_fraction > 0.0 && hidden_fraction < 1.0) {
        return Err(domain_err!("hidden fraction must lie in (0, 1), got {hidden_fraction}"));
    }
    let total = matrix.rows() * matrix.cols();
    let n_hidden = (hidden_fraction * total as f64).round() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut hidden_flags = vec![false; total];
    for &k in &order[..n_hidden] {
        hidden_flags[k] = true;
    }
    let (mut observed, mut hidden) = (Vec::new(), Vec::new());
    for (k, &is_hidden) in hidden_flags.iter().enumerate() {
        let (i, j) = (k / matrix.cols(), k % matrix.cols());
        let o = Observation { i, j, value: matrix[(i, j)] };
        if is_hidden {
            hidden.push(o);
        } else {
            observed.push(o);
        }
    }
    let mk = |entries| ObservationSet { n_rows: matrix.rows(), n_cols: matrix.cols(), entries };
    Ok((mk(observed), mk(hidden)))
}

/// One rank-`r` stage: `⟨row_net(x_i), col_net(x_j)⟩`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FactorStage<T> {
    pub row_net: Mlp<T>,
    pub col_net: Mlp<T>,
    pub r: usize,
}

/// Row and column coordinate encodings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct IndexNorm<T> {
    pub row: AffineNorm<T>,
    pub col: AffineNorm<T>,
}

impl<T: Real> IndexNorm<T> {
    /// Row index `i ↦ i/(n_rows − 1)` (element-local position in `[0, 1]`),
    /// column index `j ↦ (j + ½)/n_cols` (macro cell center in `[0, 1]`).
    pub fn for_shape(n_rows: usize, n_cols: usize) -> Self {
        let row_a = if n_rows > 1 { T::one() / T::count(n_rows - 1) } else { T::zero() };
        let col_a = T::one() / T::count(n_cols.max(1));
        Self {
            row: AffineNorm { a: row_a, b: T::zero() },
            col: AffineNorm { a: col_a, b: col_a / T::lit(2.0) },
        }
    }

    pub fn row_coord(&self, i: usize) -> T {
        self.row.apply(T::count(i))
    }

    pub fn col_coord(&self, j: usize) -> T {
        self.col.apply(T::count(j))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", try_from = "ShosvdRepr<T>", into = "ShosvdRepr<T>")]
pub struct ShosvdModel<T> {
    n_rows: usize,
    n_cols: usize,
    stages: Vec<FactorStage<T>>,
    norm: IndexNorm<T>,
}

impl<T: Real> ShosvdModel<T> {
    /// Model with no stages (predicts zero everywhere).
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        Self { n_rows, n_cols, stages: Vec::new(), norm: IndexNorm::for_shape(n_rows, n_cols) }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn stages(&self) -> &[FactorStage<T>] {
        &self.stages
    }

    pub fn norm(&self) -> IndexNorm<T> {
        self.norm
    }

    pub fn push_stage(&mut self, stage: FactorStage<T>) -> Result<()> {
        for (name, net) in [("row", &stage.row_net), ("column", &stage.col_net)] {
            if net.input_dim() != 1 || net.output_dim() != stage.r || stage.r == 0 {
                return Err(shape_err!(
                    "{name} network must map 1 -> {} (r ≥ 1), got {} -> {}",
                    stage.r,
                    net.input_dim(),
                    net.output_dim()
                ));
            }
        }
        self.stages.push(stage);
        Ok(())
    }

    /// Model consisting of stage `k` alone.
    pub fn single_stage(&self, k: usize) -> Result<Self> {
        let stage = self.stages.get(k).ok_or_else(|| domain_err!("stage {k} out of range"))?;
        Ok(Self { stages: vec![stage.clone()], ..Self::new(self.n_rows, self.n_cols) })
    }

    /// First `k` stages.
    pub fn truncated(&self, k: usize) -> Self {
        Self { stages: self.stages[..k.min(self.stages.len())].to_vec(), ..self.clone() }
    }

    pub fn predict(&self, i: usize, j: usize) -> Result<T> {
        if i >= self.n_rows || j >= self.n_cols {
            return Err(domain_err!("index ({i}, {j}) outside {}x{}", self.n_rows, self.n_cols));
        }
        let (xi, xj) = (self.norm.row_coord(i), self.norm.col_coord(j));
        let mut total = T::zero();
        for s in &self.stages {
            let u = s.row_net.forward(&[xi])?;
            let v = s.col_net.forward(&[xj])?;
            total += dot(&u, &v);
        }
        Ok(total)
    }

    /// Predictions at every entry.
    pub fn predict_matrix(&self) -> Result<DenseMatrix<T>> {
        let mut out = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for s in &self.stages {
            let u = self.row_factors(s)?;
            let v = self.col_factors(s)?;
            for (i, ui) in u.iter().enumerate() {
                for (j, vj) in v.iter().enumerate() {
                    out[(i, j)] += dot(ui, vj);
                }
            }
        }
        Ok(out)
    }

    /// Row-network outputs at every row index.
    pub fn row_factors(&self, s: &FactorStage<T>) -> Result<Vec<Vec<T>>> {
        (0..self.n_rows).map(|i| s.row_net.forward(&[self.norm.row_coord(i)])).collect()
    }

    /// Column-network outputs at every column index.
    pub fn col_factors(&self, s: &FactorStage<T>) -> Result<Vec<Vec<T>>> {
        (0..self.n_cols).map(|j| s.col_net.forward(&[self.norm.col_coord(j)])).collect()
    }

    fn predict_at(&self, obs: &ObservationSet<T>) -> Result<Vec<T>> {
        let full = self.predict_matrix()?;
        Ok(obs.entries().iter().map(|o| full[(o.i, o.j)]).collect())
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn check_compatible<T: Real>(model: &ShosvdModel<T>, obs: &ObservationSet<T>) -> Result<()> {
    if (model.n_rows, model.n_cols) != (obs.n_rows, obs.n_cols) {
        return Err(shape_err!(
            "model is {}x{} but observations are {}x{}",
            model.n_rows,
            model.n_cols,
            obs.n_rows,
            obs.n_cols
        ));
    }
    Ok(())
}

/// Observed value minus the model's prediction, on the same support.
pub fn residual<T: Real>(observations: &ObservationSet<T>, model: &ShosvdModel<T>) -> Result<ObservationSet<T>> {
    check_compatible(model, observations)?;
    if model.stages.is_empty() {
        return Ok(observations.clone());
    }
    let pred = model.predict_at(observations)?;
    let mut k = 0;
    Ok(observations.map_values(|_, _, v| {
        let r = v - pred[k];
        k += 1;
        r
    }))
}

/// Mean squared error over `obs` and its gradient with respect to both
/// factor networks of `stage` (row network first, then column network).
pub fn stage_loss_gradient<T: Real>(
    stage: &FactorStage<T>,
    norm: &IndexNorm<T>,
    obs: &ObservationSet<T>,
) -> Result<(T, GradientBundle<T>, GradientBundle<T>)> {
    if obs.is_empty() {
        return Err(domain_err!("no observations"));
    }
    let row_cache: Vec<ForwardCache<T>> =
        (0..obs.n_rows).map(|i| stage.row_net.forward_cached(&[norm.row_coord(i)])).collect::<Result<_>>()?;
    let col_cache: Vec<ForwardCache<T>> =
        (0..obs.n_cols).map(|j| stage.col_net.forward_cached(&[norm.col_coord(j)])).collect::<Result<_>>()?;

    let r = stage.r;
    let mut d_row = vec![vec![T::zero(); r]; obs.n_rows];
    let mut d_col = vec![vec![T::zero(); r]; obs.n_cols];
    let n = T::count(obs.len());
    let mut loss = T::zero();
    for o in obs.entries() {
        let u = row_cache[o.i].output();
        let v = col_cache[o.j].output();
        let diff = dot(u, v) - o.value;
        loss += diff * diff;
        let g = T::lit(2.0) * diff / n;
        for k in 0..r {
            d_row[o.i][k] += g * v[k];
            d_col[o.j][k] += g * u[k];
        }
    }
    loss /= n;

    let mut row_grads = GradientBundle::zeros_like(&stage.row_net);
    for (cache, d) in row_cache.iter().zip(&d_row) {
        if d.iter().any(|&x| x != T::zero()) {
            stage.row_net.backward_accumulate(cache, d, &mut row_grads)?;
        }
    }
    let mut col_grads = GradientBundle::zeros_like(&stage.col_net);
    for (cache, d) in col_cache.iter().zip(&d_col) {
        if d.iter().any(|&x| x != T::zero()) {
            stage.col_net.backward_accumulate(cache, d, &mut col_grads)?;
        }
    }
    Ok((loss, row_grads, col_grads))
}

fn factor_net<T: Real>(r: usize, seed: u64) -> Result<Mlp<T>> {
    let dims = [1, FACTOR_HIDDEN[0], FACTOR_HIDDEN[1], FACTOR_HIDDEN[2], r];
    let acts = [FACTOR_ACTIVATION, FACTOR_ACTIVATION, FACTOR_ACTIVATION, Activation::Identity];
    nn::init_mlp(&dims, &acts, seed)
}

/// Trains one factor pair on the observed entries by full-batch Adam on
/// the mean squared error. Returns the stage and its loss history (MSE
/// before the first epoch and after every epoch).
pub fn train_stage<T: Real>(
    observations: &ObservationSet<T>,
    config: &TrainConfig<T>,
    latent_dim: usize,
) -> Result<(FactorStage<T>, TrainHistory<T>)> {
    if config.epochs == 0 || !(config.learning_rate > T::zero()) {
        return Err(domain_err!("stage training needs positive epochs and learning rate"));
    }
    if observations.is_empty() {
        return Err(domain_err!("no observations to train on"));
    }
    if latent_dim == 0 {
        return Err(domain_err!("latent dimension must be at least 1"));
    }
    let norm = IndexNorm::for_shape(observations.n_rows, observations.n_cols);
    let mut stage = FactorStage {
        row_net: factor_net(latent_dim, config.seed.wrapping_mul(2).wrapping_add(1))?,
        col_net: factor_net(latent_dim, config.seed.wrapping_mul(2).wrapping_add(2))?,
        r: latent_dim,
    };
    let n_params = stage.row_net.num_params() + stage.col_net.num_params();
    let mut adam = AdamState::new(config.adam(), n_params);
    let mut history = TrainHistory::default();
    for _ in 0..config.epochs {
        let (loss, row_g, col_g) = stage_loss_gradient(&stage, &norm, observations)?;
        if !loss.is_finite() {
            return Err(Error::Numeric("stage training loss became non-finite".into()));
        }
        history.loss.push(loss);
        let mut params = stage.row_net.param_groups_mut();
        params.extend(stage.col_net.param_groups_mut());
        let mut grads = row_g.groups();
        grads.extend(col_g.groups());
        adam.step(params, &grads)?;
    }
    let (loss, _, _) = stage_loss_gradient(&stage, &norm, observations)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("stage training loss became non-finite".into()));
    }
    history.loss.push(loss);
    Ok((stage, history))
}

/// Result of [`fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct ShosvdFit<T> {
    pub model: ShosvdModel<T>,
    pub histories: Vec<TrainHistory<T>>,
    /// MSE over the observed entries after each stage.
    pub observed_mse: Vec<T>,
}

/// Trains `stages` factor pairs, each on the residual left by the previous ones.
pub fn fit<T: Real>(
    observations: &ObservationSet<T>,
    stages: usize,
    config: &TrainConfig<T>,
    latent_dim: usize,
) -> Result<ShosvdFit<T>> {
    if stages == 0 {
        return Err(domain_err!("need at least one stage"));
    }
    let mut model = ShosvdModel::new(observations.n_rows, observations.n_cols);
    let mut histories = Vec::with_capacity(stages);
    let mut observed_mse = Vec::with_capacity(stages);
    let mut target = observations.clone();
    for k in 0..stages {
        let cfg = TrainConfig { seed: crate::pu::mode_seed(config.seed, k), ..config.clone() };
        let (stage, history) = train_stage(&target, &cfg, latent_dim)?;
        model.push_stage(stage)?;
        histories.push(history);
        target = residual(observations, &model)?;
        let err = target.entries().iter().map(|o| o.value * o.value).sum::<T>() / T::count(target.len());
        observed_mse.push(err);
    }
    Ok(ShosvdFit { model, histories, observed_mse })
}

/// Errors of a completed matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionMetrics {
    /// MSE over the hidden entries only.
    pub hidden_mse: f64,
    /// MSE over every entry of the matrix.
    pub full_mse: f64,
}

pub fn evaluate_completion<T: Real>(
    model: &ShosvdModel<T>,
    hidden: &ObservationSet<T>,
    truth: &DenseMatrix<T>,
) -> Result<CompletionMetrics> {
    check_compatible(model, hidden)?;
    if truth.shape() != (model.n_rows, model.n_cols) {
        return Err(shape_err!("truth is {:?} but model is {}x{}", truth.shape(), model.n_rows, model.n_cols));
    }
    let pred = model.predict_matrix()?;
    let full_mse = nn::mse(pred.as_slice(), truth.as_slice())?;
    let hp: Vec<T> = hidden.entries().iter().map(|o| pred[(o.i, o.j)]).collect();
    let ht: Vec<T> = hidden.entries().iter().map(|o| truth[(o.i, o.j)]).collect();
    let hidden_mse = nn::mse(&hp, &ht)?;
    Ok(CompletionMetrics { hidden_mse: hidden_mse.to_f64_lossy(), full_mse: full_mse.to_f64_lossy() })
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct ShosvdRepr<T> {
    n_rows: usize,
    n_cols: usize,
    stages: Vec<FactorStage<T>>,
    norm: IndexNorm<T>,
    version: u32,
}

impl<T: Real> TryFrom<ShosvdRepr<T>> for ShosvdModel<T> {
    type Error = Error;

    fn try_from(r: ShosvdRepr<T>) -> Result<Self> {
        if r.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported completion model format version {}", r.version)));
        }
        let mut model = ShosvdModel::new(r.n_rows, r.n_cols);
        model.norm = r.norm;
        for s in r.stages {
            model.push_stage(s)?;
        }
        Ok(model)
    }
}

impl<T: Real> From<ShosvdModel<T>> for ShosvdRepr<T> {
    fn from(m: ShosvdModel<T>) -> Self {
        ShosvdRepr { n_rows: m.n_rows, n_cols: m.n_cols, stages: m.stages, norm: m.norm, version: FORMAT_VERSION }
    }
}
