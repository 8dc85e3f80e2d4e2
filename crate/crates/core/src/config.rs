//! Physical and numerical parameters shared by the estimators.

use crate::error::{Error, Result};
use crate::noise::{is_dyadic, NoiseField};
use crate::rng;
use serde::{Deserialize, Serialize};

/// One violated constraint, named so that a user can find the offending key.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub constraint: &'static str,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.constraint, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub beta: f64,
    pub eps: f64,
    pub horizon: f64,
    /// Path and noise time step δ.
    pub dt: f64,
    /// Noise cell side a.
    pub dx: f64,
    pub samples: usize,
    pub seed: u64,
    pub workers: usize,
    pub lattice: LatticeParams,
}

/// Mesh of the lattice solver, in the same units as the mollification scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeParams {
    /// Site spacing, also the side of the lattice noise cells.
    pub spacing: f64,
    /// Side of the periodic box.
    pub box_side: f64,
    /// Solver step, also the duration of the lattice noise slabs.
    pub dt: f64,
}

impl Default for LatticeParams {
    fn default() -> Self {
        Self { spacing: 0.25, box_side: 6.0, dt: 1.0 / 128.0 }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { dim: 3, beta: 0.2, eps: 1.0, horizon: 20.0, dt: 0.05, dx: 0.25, samples: 10_000, seed: 1, workers: 1, lattice: LatticeParams::default() }
    }
}

/// `x / unit` when it is an integer up to rounding.
pub fn integer_multiple(x: f64, unit: f64) -> Option<u64> {
    let r = x / unit;
    let n = r.round();
    (n >= 0.0 && (r - n).abs() <= 1e-9 * r.abs().max(1.0)).then_some(n as u64)
}

impl ExperimentConfig {
    /// All violated constraints at once.
    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut push = |constraint, detail: String| v.push(Violation { constraint, detail });
        if self.dim < 3 {
            push("dimension", format!("dim = {} but d >= 3 is required", self.dim));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            push("disorder", format!("beta = {} must be finite and >= 0", self.beta));
        }
        if !is_dyadic(self.eps) {
            push("dyadic-alignment", format!("eps = {} is not 2^-m", self.eps));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            push("time-step", format!("dt = {} must be positive", self.dt));
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            push("cell-side", format!("dx = {} must be positive", self.dx));
        }
        if !(self.horizon > 0.0) {
            push("horizon", format!("horizon = {} must be positive", self.horizon));
        } else if self.dt > 0.0 && integer_multiple(self.horizon, self.dt).is_none() {
            push("horizon-divisibility", format!("horizon = {} is not a multiple of dt = {}", self.horizon, self.dt));
        }
        let l = &self.lattice;
        if !(l.spacing > 0.0 && l.dt > 0.0 && l.box_side > 0.0) {
            push("lattice-mesh", format!("lattice spacing, dt and box_side must be positive, got {}, {}, {}", l.spacing, l.dt, l.box_side));
        } else {
            let bound = l.spacing * l.spacing / (2.0 * self.dim.max(1) as f64);
            if l.dt > bound * (1.0 + 1e-12) {
                push("lattice-stability", format!("lattice dt = {} exceeds spacing^2/(2d) = {bound}", l.dt));
            }
            match integer_multiple(l.box_side, l.spacing) {
                Some(n) if n % 2 == 0 && n > 0 => {}
                _ => push("lattice-box", format!("box_side = {} is not an even multiple of spacing = {}", l.box_side, l.spacing)),
            }
            match integer_multiple(self.eps, l.spacing) {
                Some(m) if m >= 2 => {}
                _ => push("lattice-stencil", format!("eps = {} is not a multiple (>= 2) of the lattice spacing {}", self.eps, l.spacing)),
            }
            if self.eps > l.box_side / 2.0 {
                push("lattice-stencil", format!("mollifier width eps = {} exceeds half the box {}", self.eps, l.box_side));
            }
        }
        if self.samples < 2 {
            push("samples", format!("samples = {} but at least 2 are needed", self.samples));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfiguration(v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")))
        }
    }

    /// Number of time slabs in the horizon.
    pub fn steps(&self) -> usize {
        integer_multiple(self.horizon, self.dt).unwrap_or(0) as usize
    }

    /// Noise field for replica `index`.
    pub fn noise(&self, index: u64) -> Result<NoiseField> {
        NoiseField::new(rng::derive_seed(self.seed, rng::tag::NOISE, index), self.dt, self.dx, self.dim)
    }

    /// Path-stream seed for replica `index`.
    pub fn path_seed(&self, index: u64) -> u64 {
        rng::derive_seed(self.seed, rng::tag::PATH, index)
    }
}
