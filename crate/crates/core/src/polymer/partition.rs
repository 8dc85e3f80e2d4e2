use super::action::path_action;
use super::path::BrownianPath;
use crate::config::{integer_multiple, ExperimentConfig};
use crate::error::{Error, Result};
use crate::mollifier::MollifierSpec;
use crate::noise::NoiseSource;
use crate::parallel::try_par_map;
use crate::rng;
use serde::Serialize;
use std::sync::Arc;

/// Largest log-weight whose exponential is a finite double.
const MAX_LOG_WEIGHT: f64 = 709.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum PathLaw {
    Free,
    /// Bridge pinned at `end` at the horizon.
    Bridge { end: Vec<f64> },
}

/// Everything needed to reproduce an estimate given the noise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSnapshot {
    pub dim: usize,
    pub beta: f64,
    pub dt: f64,
    pub dx: f64,
    pub horizon: f64,
    pub samples: usize,
    pub path_seed: u64,
    pub start: Vec<f64>,
    pub first_slab: i64,
    pub law: PathLaw,
}

/// Monte Carlo estimate of the normalized partition function.
#[derive(Debug, Clone, Serialize)]
pub struct PartitionEstimate {
    pub z: f64,
    pub log_z: f64,
    pub se: f64,
    pub samples: usize,
    /// Mean of `w_i w_j` over distinct pairs: unbiased for the second moment
    /// of the exact (path-averaged) partition function.
    pub offdiag_second_moment: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_weights: Option<Vec<f64>>,
    pub setup: RunSnapshot,
}

impl PartitionEstimate {
    /// Reduces per-sample log-weights with the log-sum-exp pattern.
    pub fn from_log_weights(log_weights: Vec<f64>, setup: RunSnapshot, retain: bool) -> Result<Self> {
        let m = log_weights.len();
        if m < 2 {
            return Err(Error::InvalidArgument("at least two samples are needed".into()));
        }
        for (index, &lw) in log_weights.iter().enumerate() {
            if !lw.is_finite() || lw > MAX_LOG_WEIGHT {
                return Err(Error::NumericOverflow { index, log_weight: lw });
            }
        }
        let top = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut s1, mut s2) = (0.0, 0.0);
        for &lw in &log_weights {
            let e = (lw - top).exp();
            s1 += e;
            s2 += e * e;
        }
        let mf = m as f64;
        let log_z = top + s1.ln() - mf.ln();
        if log_z > MAX_LOG_WEIGHT {
            return Err(Error::NumericOverflow { index: m, log_weight: log_z });
        }
        let z = log_z.exp();
        // Σ(w/Ẑ − 1)² in scaled form.
        let scale = mf / s1;
        let dev: f64 = log_weights.iter().map(|&lw| ((lw - top).exp() * scale - 1.0).powi(2)).sum();
        let se = z * (dev / (mf * (mf - 1.0))).sqrt();
        let offdiag = (2.0 * top).exp() * (s1 * s1 - s2).max(0.0) / (mf * (mf - 1.0));
        Ok(Self {
            z,
            log_z,
            se,
            samples: m,
            offdiag_second_moment: offdiag,
            log_weights: retain.then_some(log_weights),
            setup,
        })
    }

    /// Empirical quantiles of the retained log-weights.
    pub fn log_weight_quantiles(&self, probs: &[f64]) -> Option<Vec<f64>> {
        let mut lw = self.log_weights.clone()?;
        lw.sort_by(f64::total_cmp);
        Some(
            probs
                .iter()
                .map(|&p| lw[((p.clamp(0.0, 1.0) * (lw.len() - 1) as f64).round()) as usize])
                .collect(),
        )
    }
}

/// Plain i.i.d. path sampler for the Feynman-Kac expectation.
#[derive(Debug, Clone)]
pub struct PolymerSampler {
    phi: Arc<MollifierSpec>,
    pub beta: f64,
    pub samples: usize,
    pub path_seed: u64,
    pub workers: usize,
    pub retain_log_weights: bool,
    pub first_slab: i64,
    pub law: PathLaw,
}

impl PolymerSampler {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            phi: Arc::new(MollifierSpec::new(config.dim)?),
            beta: config.beta,
            samples: config.samples,
            path_seed: config.path_seed(0),
            workers: config.workers,
            retain_log_weights: false,
            first_slab: 0,
            law: PathLaw::Free,
        })
    }

    pub fn with_path_seed(mut self, seed: u64) -> Self {
        self.path_seed = seed;
        self
    }

    pub fn with_samples(mut self, samples: usize) -> Self {
        self.samples = samples;
        self
    }

    pub fn with_bridge(mut self, end: Vec<f64>) -> Self {
        self.law = PathLaw::Bridge { end };
        self
    }

    pub fn with_first_slab(mut self, slab: i64) -> Self {
        self.first_slab = slab;
        self
    }

    pub fn retaining(mut self, retain: bool) -> Self {
        self.retain_log_weights = retain;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn mollifier(&self) -> &MollifierSpec {
        &self.phi
    }

    /// Path of sample `index`.
    pub fn path(&self, index: usize, dt: f64, steps: usize, start: &[f64]) -> BrownianPath {
        let mut stream = rng::sample_stream(self.path_seed, rng::tag::PATH, index as u64);
        match &self.law {
            PathLaw::Free => BrownianPath::sample(start.len(), dt, steps, start, &mut stream),
            PathLaw::Bridge { end } => BrownianPath::sample_bridge(start.len(), dt, steps, start, end, &mut stream),
        }
    }

    fn steps<S: NoiseSource + ?Sized>(&self, source: &S, start: &[f64], horizon: f64) -> Result<usize> {
        if start.len() != source.dim() {
            return Err(Error::InvalidArgument(format!(
                "start has {} coordinates, noise has dimension {}",
                start.len(),
                source.dim()
            )));
        }
        if let PathLaw::Bridge { end } = &self.law {
            if end.len() != source.dim() {
                return Err(Error::InvalidArgument("bridge endpoint has the wrong dimension".into()));
            }
        }
        match integer_multiple(horizon, source.dt()) {
            Some(n) if n > 0 => Ok(n as usize),
            _ => Err(Error::InvalidConfiguration(format!(
                "horizon {horizon} is not a positive multiple of the slab duration {}",
                source.dt()
            ))),
        }
    }

    /// Per-sample `G_i − c_i`.
    pub fn log_weights<S: NoiseSource + ?Sized>(&self, source: &S, start: &[f64], horizon: f64) -> Result<Vec<f64>> {
        let steps = self.steps(source, start, horizon)?;
        if self.beta == 0.0 {
            return Ok(vec![0.0; self.samples]);
        }
        try_par_map(self.workers, self.samples, |i| {
            let path = self.path(i, source.dt(), steps, start);
            Ok(path_action(&path, source, &self.phi, self.beta, self.first_slab)?.log_weight())
        })
    }

    pub fn estimate<S: NoiseSource + ?Sized>(&self, source: &S, start: &[f64], horizon: f64) -> Result<PartitionEstimate> {
        if self.samples < 2 {
            return Err(Error::InvalidArgument("at least two samples are needed".into()));
        }
        let lw = self.log_weights(source, start, horizon)?;
        let setup = RunSnapshot {
            dim: source.dim(),
            beta: self.beta,
            dt: source.dt(),
            dx: source.dx(),
            horizon,
            samples: self.samples,
            path_seed: self.path_seed,
            start: start.to_vec(),
            first_slab: self.first_slab,
            law: self.law.clone(),
        };
        PartitionEstimate::from_log_weights(lw, setup, self.retain_log_weights)
    }
}

pub fn partition_function<S: NoiseSource + ?Sized>(
    config: &ExperimentConfig,
    source: &S,
    start: &[f64],
    horizon: f64,
) -> Result<PartitionEstimate> {
    PolymerSampler::new(config)?.estimate(source, start, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseField;

    fn setup() -> RunSnapshot {
        RunSnapshot {
            dim: 3,
            beta: 0.2,
            dt: 0.05,
            dx: 0.25,
            horizon: 1.0,
            samples: 3,
            path_seed: 0,
            start: vec![0.0; 3],
            first_slab: 0,
            law: PathLaw::Free,
        }
    }

    #[test]
    fn log_sum_exp_reduction() {
        let lw = vec![0.1f64, -0.3, 0.7];
        let e = PartitionEstimate::from_log_weights(lw.clone(), setup(), true).unwrap();
        let w: Vec<f64> = lw.iter().map(|v| v.exp()).collect();
        let mean = w.iter().sum::<f64>() / 3.0;
        assert!((e.z - mean).abs() < 1e-15);
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
        assert!((e.se - (var / 3.0).sqrt()).abs() < 1e-15);
        let off = (w[0] * w[1] + w[0] * w[2] + w[1] * w[2]) / 3.0;
        assert!((e.offdiag_second_moment - off).abs() < 1e-14);
        assert_eq!(e.log_weight_quantiles(&[0.0, 1.0]).unwrap(), vec![-0.3, 0.7]);
    }

    #[test]
    fn large_weights_stay_finite() {
        let e = PartitionEstimate::from_log_weights(vec![700.0, 690.0], setup(), false).unwrap();
        assert!((e.log_z - (700.0 + (1.0 + (-10f64).exp()).ln() - 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn overflow_names_the_sample() {
        let r = PartitionEstimate::from_log_weights(vec![0.0, 800.0, 1.0], setup(), false);
        assert!(matches!(r, Err(Error::NumericOverflow { index: 1, .. })));
        let r = PartitionEstimate::from_log_weights(vec![0.0, f64::NAN], setup(), false);
        assert!(matches!(r, Err(Error::NumericOverflow { index: 1, .. })));
    }

    #[test]
    fn zero_coupling_is_exact() {
        let cfg = ExperimentConfig { beta: 0.0, samples: 50, ..Default::default() };
        let f = cfg.noise(0).unwrap();
        let e = partition_function(&cfg, &f, &[0.0; 3], 20.0).unwrap();
        assert_eq!(e.z, 1.0);
        assert_eq!(e.se, 0.0);
        assert_eq!(e.log_z, 0.0);
    }

    #[test]
    fn horizon_must_fit_the_grid() {
        let cfg = ExperimentConfig { samples: 4, ..Default::default() };
        let f = NoiseField::new(1, 0.05, 0.25, 3).unwrap();
        assert!(matches!(partition_function(&cfg, &f, &[0.0; 3], 1.01), Err(Error::InvalidConfiguration(_))));
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        let cfg = ExperimentConfig { samples: 64, horizon: 2.0, ..Default::default() };
        let f = cfg.noise(0).unwrap();
        let a = PolymerSampler::new(&cfg).unwrap().with_workers(1).estimate(&f, &[0.0; 3], 2.0).unwrap();
        let b = PolymerSampler::new(&cfg).unwrap().with_workers(3).estimate(&f, &[0.0; 3], 2.0).unwrap();
        assert_eq!(a.z.to_bits(), b.z.to_bits());
        assert_eq!(a.se.to_bits(), b.se.to_bits());
    }
}
