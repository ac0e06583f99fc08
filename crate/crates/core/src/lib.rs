//! Transporting average treatment effects from several trials to a target
//! population, with sensitivity analysis for omitted effect modifiers.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix the scalar to `f64`.

pub mod bootstrap;
pub mod data;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod oracle;
pub mod rng;
pub mod scalar;
pub mod sensitivity;
pub mod simulation;
pub mod special;
pub mod testing;
pub mod weights;

pub use data::{load_csv, read_csv, PooledDataset, Schema, UnitRecord, Variable};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use weights::{estimate_weights, WeightConfig, WeightSet};

pub type Dataset = PooledDataset<f64>;
pub type Weights = WeightSet<f64>;
