use crate::config::ExperimentConfig;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// Endpoint constraint of a bridge.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BridgeEnd {
    pub end: Vec<f64>,
    pub horizon: f64,
}

/// A Brownian motion (variance `t` per coordinate) sampled at `0, δ, …, Kδ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrownianPath {
    dim: usize,
    dt: f64,
    positions: Vec<f64>,
    bridge: Option<BridgeEnd>,
}

impl BrownianPath {
    pub fn sample<R: Rng + ?Sized>(dim: usize, dt: f64, steps: usize, start: &[f64], rng: &mut R) -> Self {
        let mut positions = Vec::with_capacity((steps + 1) * dim);
        positions.extend_from_slice(start);
        let sd = dt.sqrt();
        for k in 0..steps {
            for i in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                let prev = positions[k * dim + i];
                positions.push(prev + sd * z);
            }
        }
        Self { dim, dt, positions, bridge: None }
    }

    /// `W_s = x + B_s − (s/T)(B_T − (y − x))` on the grid; the endpoint is set exactly.
    pub fn sample_bridge<R: Rng + ?Sized>(
        dim: usize,
        dt: f64,
        steps: usize,
        start: &[f64],
        end: &[f64],
        rng: &mut R,
    ) -> Self {
        let zero = vec![0.0; dim];
        let free = Self::sample(dim, dt, steps, &zero, rng);
        let last = &free.positions[steps * dim..];
        let horizon = steps as f64 * dt;
        let mut positions = Vec::with_capacity(free.positions.len());
        for k in 0..=steps {
            let frac = k as f64 / steps as f64;
            for i in 0..dim {
                let b = free.positions[k * dim + i];
                positions.push(start[i] + b - frac * (last[i] - (end[i] - start[i])));
            }
        }
        positions[steps * dim..].copy_from_slice(end);
        Self { dim, dt, positions, bridge: Some(BridgeEnd { end: end.to_vec(), horizon }) }
    }

    /// Path built from explicit positions (row per grid time).
    pub fn from_positions(dim: usize, dt: f64, positions: Vec<f64>) -> Self {
        assert!(positions.len() % dim == 0 && positions.len() >= dim, "positions must hold whole points");
        Self { dim, dt, positions, bridge: None }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.positions.len() / self.dim - 1
    }

    pub fn horizon(&self) -> f64 {
        self.steps() as f64 * self.dt
    }

    #[inline]
    pub fn position(&self, k: usize) -> &[f64] {
        &self.positions[k * self.dim..(k + 1) * self.dim]
    }

    pub fn start(&self) -> &[f64] {
        self.position(0)
    }

    pub fn end(&self) -> &[f64] {
        self.position(self.steps())
    }

    pub fn bridge(&self) -> Option<&BridgeEnd> {
        self.bridge.as_ref()
    }

    /// Linear interpolation between grid times; `s` is clamped to the horizon.
    pub fn interpolate(&self, s: f64, out: &mut [f64]) {
        let u = (s / self.dt).clamp(0.0, self.steps() as f64);
        let k = (u.floor() as usize).min(self.steps().saturating_sub(1));
        let f = u - k as f64;
        let (a, b) = (self.position(k), self.position((k + 1).min(self.steps())));
        for i in 0..self.dim {
            out[i] = a[i] + f * (b[i] - a[i]);
        }
    }
}

pub fn sample_path<R: Rng + ?Sized>(config: &ExperimentConfig, start: &[f64], rng: &mut R) -> BrownianPath {
    BrownianPath::sample(config.dim, config.dt, config.steps(), start, rng)
}

/// Bridge over `horizon` (rounded to the grid).
pub fn sample_bridge<R: Rng + ?Sized>(
    config: &ExperimentConfig,
    start: &[f64],
    end: &[f64],
    horizon: f64,
    rng: &mut R,
) -> BrownianPath {
    let steps = (horizon / config.dt).round() as usize;
    BrownianPath::sample_bridge(config.dim, config.dt, steps, start, end, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sample_stream;
    use crate::stats::summary::mean_se;

    #[test]
    fn one_step_path() {
        let cfg = ExperimentConfig { horizon: 2.0, dt: 2.0, ..Default::default() };
        let ends: Vec<f64> = (0..10_000)
            .map(|i| sample_path(&cfg, &[0.0; 3], &mut sample_stream(3, 1, i)).end()[1])
            .collect();
        let sq: Vec<f64> = ends.iter().map(|v| v * v).collect();
        let (v, se) = mean_se(&sq);
        assert!((v - 2.0).abs() < 3.0 * se);
    }

    #[test]
    fn endpoint_moments() {
        let cfg = ExperimentConfig { horizon: 5.0, dt: 0.05, ..Default::default() };
        let start = [1.0, -2.0, 0.5];
        let ends: Vec<Vec<f64>> = (0..10_000)
            .map(|i| sample_path(&cfg, &start, &mut sample_stream(4, 1, i)).end().to_vec())
            .collect();
        for c in 0..3 {
            let xs: Vec<f64> = ends.iter().map(|e| e[c]).collect();
            let (m, se) = mean_se(&xs);
            assert!((m - start[c]).abs() < 3.0 * se);
            let sq: Vec<f64> = xs.iter().map(|v| (v - start[c]).powi(2)).collect();
            let (v, se) = mean_se(&sq);
            assert!((v - 5.0).abs() < 3.0 * se, "var {v} ± {se}");
        }
    }

    #[test]
    fn bridge_moments() {
        let cfg = ExperimentConfig { dt: 0.05, ..Default::default() };
        let (x, y) = ([0.0, 1.0, 0.0], [2.0, -1.0, 0.5]);
        let paths: Vec<BrownianPath> =
            (0..10_000).map(|i| sample_bridge(&cfg, &x, &y, 4.0, &mut sample_stream(5, 1, i))).collect();
        for p in paths.iter().take(50) {
            assert_eq!(p.end(), &y);
        }
        let mid: Vec<f64> = paths.iter().map(|p| p.position(40)[0]).collect();
        let (m, se) = mean_se(&mid);
        assert!((m - 1.0).abs() < 3.0 * se);
        // Var at s = 1 over T = 4: s(T − s)/T = 0.75.
        let q: Vec<f64> = paths.iter().map(|p| (p.position(20)[2] - 0.125).powi(2)).collect();
        let (v, se) = mean_se(&q);
        assert!((v - 0.75).abs() < 3.0 * se, "{v} ± {se}");
    }

    #[test]
    fn interpolation_hits_grid_points() {
        let p = BrownianPath::from_positions(1, 0.5, vec![0.0, 1.0, 3.0]);
        let mut out = [0.0];
        p.interpolate(0.75, &mut out);
        assert_eq!(out[0], 2.0);
        p.interpolate(1.0, &mut out);
        assert_eq!(out[0], 3.0);
    }
}
