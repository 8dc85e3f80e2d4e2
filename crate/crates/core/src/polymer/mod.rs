//! Feynman-Kac Monte Carlo for the directed polymer partition function.

pub mod action;
pub mod khasminskii;
pub mod overlap;
pub mod partition;
pub mod path;

pub use action::{continuum_compensator, discrete_compensator, field_action, path_action, FieldAction};
pub use khasminskii::{green_occupation, khasminskii_bound, KhasminskiiBound};
pub use overlap::{overlap_functional, overlap_integral, OverlapEstimate, OverlapSampler};
pub use partition::{partition_function, PartitionEstimate, PathLaw, PolymerSampler, RunSnapshot};
pub use path::{sample_bridge, sample_path, BridgeEnd, BrownianPath};
