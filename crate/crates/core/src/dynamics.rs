//! Benchmark systems, fixed-step RK4 integration, dataset generation and
//! rollout comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, numeric_err, shape_err, Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    /// `f(x) = sin(8x) + 5·exp(−0.2x) + 1`
    SinExp,
    /// `f(x) = A·(sin(x/3) + cos(2x/3) + exp(−x²) + const)/c − k·x`
    TwoFreq,
    /// `ẋ₀ = x₁, ẋ₁ = x₀ − x₀³`
    Duffing,
    /// `ẋ₀ = x₁, ẋ₁ = −sin(x₀)`
    Pendulum,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] = [SystemKind::SinExp, SystemKind::TwoFreq, SystemKind::Duffing, SystemKind::Pendulum];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::SinExp => "sin_exp",
            SystemKind::TwoFreq => "two_freq",
            SystemKind::Duffing => "duffing",
            SystemKind::Pendulum => "pendulum",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            SystemKind::SinExp | SystemKind::TwoFreq => 1,
            SystemKind::Duffing | SystemKind::Pendulum => 2,
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| domain_err!("unknown system '{s}' (expected sin_exp, two_freq, duffing or pendulum)"))
    }
}

/// Names of the `two_freq` parameters.
pub const TWO_FREQ_PARAMS: [&str; 4] = ["A", "c", "k", "const"];

/// A benchmark system with its parameters and state domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SystemSpec<T> {
    pub kind: SystemKind,
    pub parameters: BTreeMap<String, T>,
    /// One closed interval per state component.
    pub domain: Vec<(T, T)>,
}

impl<T: Real> SystemSpec<T> {
    /// System with its default parameters and domain.
    pub fn new(kind: SystemKind) -> Self {
        let lit = T::lit;
        let pi = T::lit(std::f64::consts::PI);
        let (parameters, domain) = match kind {
            SystemKind::SinExp => (BTreeMap::new(), vec![(lit(0.0), lit(10.0))]),
            SystemKind::TwoFreq => (
                [("A", 5.0), ("c", 3.0), ("k", 0.05), ("const", 1.0)]
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), lit(v)))
                    .collect(),
                vec![(lit(0.0), lit(10.0))],
            ),
            SystemKind::Duffing => (BTreeMap::new(), vec![(lit(-2.0), lit(2.0)); 2]),
            SystemKind::Pendulum => (BTreeMap::new(), vec![(-pi, pi), (lit(-2.0), lit(2.0))]),
        };
        Self { kind, parameters, domain }
    }

    /// `two_freq` with explicit `A`, `c`, `k`, `const`.
    pub fn two_freq(a: T, c: T, k: T, constant: T) -> Result<Self> {
        if c == T::zero() {
            return Err(domain_err!("two_freq parameter c must be nonzero"));
        }
        let mut spec = Self::new(SystemKind::TwoFreq);
        for (name, v) in TWO_FREQ_PARAMS.iter().zip([a, c, k, constant]) {
            spec.parameters.insert(name.to_string(), v);
        }
        Ok(spec)
    }

    pub fn state_dim(&self) -> usize {
        self.kind.state_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain.len() != self.state_dim() {
            return Err(shape_err!("{} needs {} domain intervals, got {}", self.kind, self.state_dim(), self.domain.len()));
        }
        if self.domain.iter().any(|&(lo, hi)| !(lo < hi)) {
            return Err(domain_err!("empty domain interval"));
        }
        if self.kind == SystemKind::TwoFreq {
            for name in TWO_FREQ_PARAMS {
                if !self.parameters.contains_key(name) {
                    return Err(domain_err!("two_freq is missing parameter '{name}'"));
                }
            }
            if self.parameters["c"] == T::zero() {
                return Err(domain_err!("two_freq parameter c must be nonzero"));
            }
        }
        Ok(())
    }

    fn param(&self, name: &str) -> Result<T> {
        self.parameters.get(name).copied().ok_or_else(|| domain_err!("missing parameter '{name}'"))
    }

    /// Exact right-hand side.
    pub fn rhs(&self, state: &[T]) -> Result<Vec<T>> {
        if state.len() != self.state_dim() {
            return Err(shape_err!("{} has state dimension {}, got {}", self.kind, self.state_dim(), state.len()));
        }
        let lit = T::lit;
        Ok(match self.kind {
            SystemKind::SinExp => {
                let x = state[0];
                vec![(lit(8.0) * x).sin() + lit(5.0) * (lit(-0.2) * x).exp() + T::one()]
            }
            SystemKind::TwoFreq => {
                let x = state[0];
                let (a, c, k, cst) = (self.param("A")?, self.param("c")?, self.param("k")?, self.param("const")?);
                let inner = (x / lit(3.0)).sin() + (lit(2.0) * x / lit(3.0)).cos() + (-x * x).exp() + cst;
                vec![a * (inner / c) - k * x]
            }
            SystemKind::Duffing => vec![state[1], state[0] - state[0].powi(3)],
            SystemKind::Pendulum => vec![state[1], -state[0].sin()],
        })
    }

    pub fn contains(&self, state: &[T]) -> bool {
        state.len() == self.domain.len() && state.iter().zip(&self.domain).all(|(&x, &(lo, hi))| x >= lo && x <= hi)
    }

    /// Initial-condition box used by default when generating data. For the
    /// 2-state systems it is chosen so that trajectories stay in the domain.
    pub fn default_ic_ranges(&self) -> Vec<(T, T)> {
        let lit = T::lit;
        match self.kind {
            SystemKind::SinExp | SystemKind::TwoFreq => self.domain.clone(),
            SystemKind::Duffing => vec![(lit(-1.5), lit(1.5)); 2],
            SystemKind::Pendulum => vec![(lit(-2.0), lit(2.0)), (lit(-1.0), lit(1.0))],
        }
    }

    /// Default PU mesh `(m, n)`; 2-state systems use it for both 1D fits,
    /// each spanning the domain of its input component.
    pub fn default_pu_mesh(&self) -> (usize, usize) {
        match self.kind {
            SystemKind::SinExp => (1, 100),
            SystemKind::TwoFreq => (4, 25),
            SystemKind::Duffing | SystemKind::Pendulum => (2, 50),
        }
    }
}

/// Uniformly sampled trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<Vec<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &[T] {
        self.states.last().expect("trajectory has at least the initial state")
    }
}

/// Right-hand side evaluated during integration.
pub trait VectorField<T> {
    fn eval(&mut self, state: &[T]) -> Result<Vec<T>>;

    /// Whether any evaluation so far had to clamp its input to a model domain.
    fn clamped(&self) -> bool {
        false
    }
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F>(pub F);

impl<T, F: FnMut(&[T]) -> Result<Vec<T>>> VectorField<T> for FnField<F> {
    fn eval(&mut self, state: &[T]) -> Result<Vec<T>> {
        (self.0)(state)
    }
}

impl<T: Real> VectorField<T> for SystemSpec<T> {
    fn eval(&mut self, state: &[T]) -> Result<Vec<T>> {
        self.rhs(state)
    }
}

impl<T: Real> VectorField<T> for &SystemSpec<T> {
    fn eval(&mut self, state: &[T]) -> Result<Vec<T>> {
        self.rhs(state)
    }
}

/// Classical four-stage Runge–Kutta step.
pub fn rk4_step<T: Real>(f: &mut dyn VectorField<T>, state: &[T], dt: T) -> Result<Vec<T>> {
    if !(dt > T::zero()) {
        return Err(domain_err!("time step must be positive, got {dt}"));
    }
    let half = dt / T::lit(2.0);
    let checked = |v: Vec<T>| -> Result<Vec<T>> {
        if v.len() != state.len() {
            return Err(shape_err!("vector field returned {} components for a {}-state", v.len(), state.len()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(numeric_err!("non-finite derivative during Runge-Kutta step"));
        }
        Ok(v)
    };
    let axpy = |a: T, k: &[T]| -> Vec<T> { state.iter().zip(k).map(|(&s, &d)| s + a * d).collect() };
    let k1 = checked(f.eval(state)?)?;
    let k2 = checked(f.eval(&axpy(half, &k1))?)?;
    let k3 = checked(f.eval(&axpy(half, &k2))?)?;
    let k4 = checked(f.eval(&axpy(dt, &k3))?)?;
    let sixth = dt / T::lit(6.0);
    let two = T::lit(2.0);
    let next: Vec<T> = (0..state.len())
        .map(|i| state[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]))
        .collect();
    if next.iter().any(|x| !x.is_finite()) {
        return Err(numeric_err!("Runge-Kutta step produced a non-finite state"));
    }
    Ok(next)
}

/// `steps` RK4 steps from `x0`; the trajectory holds `steps + 1` states.
pub fn integrate<T: Real>(f: &mut dyn VectorField<T>, x0: &[T], dt: T, steps: usize) -> Result<Trajectory<T>> {
    integrate_while(f, x0, dt, steps, |_| true)
}

/// Like [`integrate`], but stops before recording the first state rejected by `keep`.
pub fn integrate_while<T: Real>(
    f: &mut dyn VectorField<T>,
    x0: &[T],
    dt: T,
    steps: usize,
    mut keep: impl FnMut(&[T]) -> bool,
) -> Result<Trajectory<T>> {
    if steps == 0 {
        return Err(domain_err!("need at least one integration step"));
    }
    let mut times = vec![T::zero()];
    let mut states = vec![x0.to_vec()];
    for s in 1..=steps {
        let next = rk4_step(f, states.last().expect("non-empty"), dt)?;
        if !keep(&next) {
            break;
        }
        times.push(dt * T::count(s));
        states.push(next);
    }
    Ok(Trajectory { times, states })
}

/// One `(state, derivative)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Sample<T> {
    pub state: Vec<T>,
    pub derivative: Vec<T>,
}

/// Samples with a train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset<T> {
    state_dim: usize,
    samples: Vec<Sample<T>>,
    train: Vec<usize>,
    test: Vec<usize>,
}

/// Fraction of samples assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

pub fn train_count(n: usize) -> usize {
    (TRAIN_FRACTION * n as f64).round() as usize
}

impl<T: Real> TrajectoryDataset<T> {
    /// Samples in the given order; the first `round(0.8·N)` form the training split.
    pub fn from_ordered(state_dim: usize, samples: Vec<Sample<T>>) -> Result<Self> {
        if samples.iter().any(|s| s.state.len() != state_dim || s.derivative.len() != state_dim) {
            return Err(shape_err!("sample dimension differs from {state_dim}"));
        }
        let n_train = train_count(samples.len());
        Ok(Self { state_dim, train: (0..n_train).collect(), test: (n_train..samples.len()).collect(), samples })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test
    }

    /// `(inputs, targets)` of the 1D problem "derivative component `out` as a
    /// function of state component `input`" over the given indices.
    pub fn column_pair(&self, indices: &[usize], input: usize, out: usize) -> (Vec<T>, Vec<T>) {
        indices.iter().map(|&k| (self.samples[k].state[input], self.samples[k].derivative[out])).unzip()
    }
}

/// Settings of [`generate_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DatasetConfig<T> {
    pub n_trajectories: usize,
    pub steps: usize,
    pub dt: T,
    /// `None` uses [`SystemSpec::default_ic_ranges`].
    pub ic_ranges: Option<Vec<(T, T)>>,
    pub seed: u64,
}

impl<T: Real> Default for DatasetConfig<T> {
    fn default() -> Self {
        Self { n_trajectories: 100, steps: 100, dt: T::lit(0.01), ic_ranges: None, seed: 0 }
    }
}

/// Integrates seeded random initial conditions and records
/// `(state, rhs(state))` at every state that lies in the system domain,
/// then shuffles and splits 80/20.
///
/// Trajectory `k` draws its initial condition from a stream seeded with
/// `seed + k`. A trajectory is cut at the first state that leaves the domain.
pub fn generate_dataset<T: Real>(spec: &SystemSpec<T>, config: &DatasetConfig<T>) -> Result<TrajectoryDataset<T>> {
    spec.validate()?;
    if config.n_trajectories == 0 || config.steps == 0 {
        return Err(domain_err!("need a positive number of trajectories and steps"));
    }
    let ranges = config.ic_ranges.clone().unwrap_or_else(|| spec.default_ic_ranges());
    if ranges.len() != spec.state_dim() {
        return Err(shape_err!("{} initial-condition ranges for a {}-state system", ranges.len(), spec.state_dim()));
    }
    for (&(lo, hi), &(dlo, dhi)) in ranges.iter().zip(&spec.domain) {
        if !(lo <= hi) || lo < dlo || hi > dhi {
            return Err(domain_err!("initial-condition range [{lo}, {hi}] not inside domain [{dlo}, {dhi}]"));
        }
    }

    let mut samples = Vec::with_capacity(config.n_trajectories * (config.steps + 1));
    for k in 0..config.n_trajectories {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(k as u64));
        let x0: Vec<T> = ranges
            .iter()
            .map(|&(lo, hi)| {
                let u: f64 = rng.gen();
                lo + (hi - lo) * T::lit(u)
            })
            .collect();
        let mut field = spec;
        let traj = integrate_while(&mut field, &x0, config.dt, config.steps, |s| spec.contains(s))?;
        for state in traj.states {
            let derivative = spec.rhs(&state)?;
            samples.push(Sample { state, derivative });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xda7a_5e7);
    samples.shuffle(&mut rng);
    TrajectoryDataset::from_ordered(spec.state_dim(), samples)
}

/// Learned and reference trajectories from the same initial condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct RolloutComparison<T> {
    pub learned: Trajectory<T>,
    pub truth: Trajectory<T>,
    /// Euclidean state error at each recorded time.
    pub pointwise_error: Vec<T>,
    /// `sqrt(Σ‖x_learned − x_true‖²) / sqrt(Σ‖x_true‖²)` over the horizon.
    pub relative_l2: T,
    /// Set when the learned field clamped some query to its domain.
    pub clamped: bool,
}

pub fn rollout_compare<T: Real>(
    learned: &mut dyn VectorField<T>,
    spec: &SystemSpec<T>,
    x0: &[T],
    dt: T,
    steps: usize,
) -> Result<RolloutComparison<T>> {
    if !spec.contains(x0) {
        return Err(domain_err!("initial condition {x0:?} outside the system domain"));
    }
    let mut truth_field = spec;
    let truth = integrate(&mut truth_field, x0, dt, steps)?;
    let learned_traj = integrate(learned, x0, dt, steps)?;
    let mut num = T::zero();
    let mut den = T::zero();
    let pointwise_error = learned_traj
        .states
        .iter()
        .zip(&truth.states)
        .map(|(a, b)| {
            let e2: T = a.iter().zip(b).map(|(&p, &q)| (p - q) * (p - q)).sum();
            num += e2;
            den += b.iter().map(|&q| q * q).sum::<T>();
            e2.sqrt()
        })
        .collect();
    let relative_l2 = if den > T::zero() {
        (num / den).sqrt()
    } else if num == T::zero() {
        T::zero()
    } else {
        T::infinity()
    };
    Ok(RolloutComparison { learned: learned_traj, truth, pointwise_error, relative_l2, clamped: learned.clamped() })
}
