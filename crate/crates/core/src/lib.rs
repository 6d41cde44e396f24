//! Multiscale learning of the forcing function `f` of `ẋ = f(x)` from data.
//!
//! Three methods share a 1D [`mesh::MultiscaleMesh`] of `m` macro elements
//! with `n` fine nodes each:
//!
//! * [`pu`]: partition-of-unity enrichment, `f(x) = Σ_modes Σ_i F_i N_i(x) G(x − x_i)`,
//!   with macro coefficients from small neural nets and a learned micro profile.
//! * [`svdscale`]: fold the fine samples into an `n × m` matrix and truncate its SVD.
//! * [`shosvd`]: complete a sparsely observed folded matrix with stages of
//!   neural rank factors.
//!
//! [`dynamics`] supplies the benchmark systems, RK4 and rollout checks.
//! Everything is generic over [`Real`] (`f32`/`f64`); the aliases below fix `f64`.

pub mod dynamics;
pub mod error;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod nn;
pub mod pu;
pub mod scalar;
pub mod shosvd;
pub mod svdscale;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Matrix = linalg::DenseMatrix<f64>;
pub type Mesh = mesh::MultiscaleMesh<f64>;
pub type Network = nn::Mlp<f64>;
pub type PuModel = pu::PuModel<f64>;
pub type CoupledPuModel = pu::CoupledPuModel<f64>;
pub type TrainConfig = pu::TrainConfig<f64>;
pub type Svd = svdscale::SvdDecomposition<f64>;
pub type ShosvdModel = shosvd::ShosvdModel<f64>;
pub type SystemSpec = dynamics::SystemSpec<f64>;
pub type Dataset = dynamics::TrajectoryDataset<f64>;
pub type Trajectory = dynamics::Trajectory<f64>;
