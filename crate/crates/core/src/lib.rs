//! Training and evaluation engine for prototypical contrastive graph
//! collaborative filtering.
//!
//! The pipeline is: [`data`] ingests and splits interactions and builds the
//! normalized bipartite adjacency, [`propagation`] runs the linear
//! light-graph-convolution backbone and its adjoint, [`prototypes`] and
//! [`objectives`] supply every loss term together with closed-form
//! gradients, [`optim`] applies Adam over the whole parameter set one batch
//! at a time, and [`eval`] scores full-catalog rankings.
//!
//! All numerical kernels are generic over [`Real`] so training runs in `f32`
//! while gradient verification runs the identical code in `f64`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod objectives;
pub mod optim;
pub mod propagation;
pub mod prototypes;
pub mod real;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
