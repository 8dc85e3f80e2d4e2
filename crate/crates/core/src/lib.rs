//! Numerical laboratory for the mollified stochastic heat and KPZ equations in
//! dimension three and higher.

pub mod config;
pub mod error;
pub mod lattice;
pub mod mollifier;
pub mod noise;
pub mod parallel;
pub mod polymer;
pub mod quad;
pub mod rng;
pub mod stats;
pub mod tiling;

pub use config::{ExperimentConfig, LatticeParams};
pub use error::{Error, ErrorClass, Result};
pub use mollifier::{heat_kernel, heat_solve, phi_eval, v_eval, CovarianceKernel, HeatState, MollifierSpec};
pub use noise::{NoiseField, NoiseSource, NoiseTransform, TestFunction, TransformMode, TransformedNoise};
pub use lattice::{InitialCondition, LatticeSetup, SheGrid, SlabOrder, Snapshot};
pub use tiling::{DyadicTiling, LowerBound, PathKernelLowerBound, TilingSampler};
