//! Estimators and checks built on the polymer, lattice and tiling modules.

pub mod fit;
pub mod summary;
pub mod covariance;
pub mod theorem;
pub mod tails;
