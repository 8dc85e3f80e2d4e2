//! Lower tails and negative moments of the partition function.

use super::fit::{weighted_line_fit, LineFit};
use super::summary::{mean_se, wilson_interval};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::lattice::{InitialCondition, LatticeSetup, SheGrid, SlabOrder};
use crate::parallel::try_par_map;
use crate::polymer::PolymerSampler;
use crate::rng;
use serde::Serialize;

/// Fewest exceedances for a threshold to enter the envelope fit.
pub const MIN_EXCEEDANCES: usize = 10;

/// `log P ≈ log C − θ²/ĉ` fitted on the resolvable thresholds.
#[derive(Debug, Clone, Serialize)]
pub struct EnvelopeFit {
    /// `+∞` when the fitted slope is not negative.
    pub c_hat: f64,
    pub log_prefactor: f64,
    pub line: LineFit,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailRecord {
    pub horizon: f64,
    pub samples: usize,
    pub source: String,
    pub theta: Vec<f64>,
    /// Empirical `P[log Z ≤ −θ]`.
    pub probability: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub exceedances: Vec<usize>,
    pub envelope: Option<EnvelopeFit>,
    /// `E[Z^{−1}]`, `E[Z^{−2}]` with block standard errors.
    pub inverse_moment: (f64, f64),
    pub inverse_square_moment: (f64, f64),
}

impl TailRecord {
    pub fn monotone(&self) -> bool {
        self.probability.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Tail curve, envelope fit and negative moments of a sample of `log Z`.
///
/// Samples come in consecutive blocks of `block` correlated values (one
/// block per independent run); standard errors of the moments use block
/// means. Wilson intervals treat every sample as independent.
pub fn tail_record(log_z: &[f64], theta: &[f64], horizon: f64, block: usize, source: &str) -> Result<TailRecord> {
    let n = log_z.len();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let block = block.max(1);
    if n % block != 0 {
        return Err(Error::InvalidArgument(format!("{n} samples do not split into blocks of {block}")));
    }
    let mut sorted = log_z.to_vec();
    sorted.sort_by(f64::total_cmp);
    let exceedances: Vec<usize> = theta.iter().map(|&t| sorted.partition_point(|&v| v <= -t)).collect();
    let probability: Vec<f64> = exceedances.iter().map(|&k| k as f64 / n as f64).collect();
    let (lower, upper): (Vec<f64>, Vec<f64>) = exceedances.iter().map(|&k| wilson_interval(k, n, 1.96)).unzip();

    let (mut x, mut y, mut s) = (vec![], vec![], vec![]);
    for (i, &k) in exceedances.iter().enumerate() {
        if k >= MIN_EXCEEDANCES {
            let p = probability[i];
            x.push(theta[i] * theta[i]);
            y.push(p.ln());
            s.push(((1.0 - p) / k as f64).sqrt().max(1e-12));
        } else if k > 0 {
            log::info!("threshold {} has {k} exceedances; dropped from the envelope fit", theta[i]);
        }
    }
    let envelope = if x.len() >= 2 {
        let line = weighted_line_fit(&x, &y, &s)?;
        let c_hat = if line.slope < 0.0 { -1.0 / line.slope } else { f64::INFINITY };
        Some(EnvelopeFit { c_hat, log_prefactor: line.intercept, line })
    } else {
        None
    };

    let block_moment = |p: f64| {
        let means: Vec<f64> = log_z.chunks(block).map(|c| c.iter().map(|v| (-p * v).exp()).sum::<f64>() / c.len() as f64).collect();
        if means.len() >= 2 {
            mean_se(&means)
        } else {
            (means[0], f64::NAN)
        }
    };
    Ok(TailRecord {
        horizon,
        samples: n,
        source: source.to_string(),
        theta: theta.to_vec(),
        probability,
        lower,
        upper,
        exceedances,
        envelope,
        inverse_moment: block_moment(1.0),
        inverse_square_moment: block_moment(2.0),
    })
}

/// Where the realizations of `log Z` come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TailSource {
    /// Flat-start lattice runs; every `stride`-th site per axis of each run is
    /// one (correlated) realization of the exact partition function.
    Lattice { runs: usize, stride: usize },
    /// Independent noise fields, each with an `inner`-path Monte Carlo estimate.
    Polymer { realizations: usize, inner: usize },
}

impl TailSource {
    pub fn label(&self) -> String {
        match self {
            Self::Lattice { runs, stride } => format!("lattice(runs={runs},stride={stride})"),
            Self::Polymer { realizations, inner } => format!("polymer(n={realizations},inner={inner})"),
        }
    }
}

/// Samples of `log Z` at each horizon (increasing), plus the block size.
pub fn log_partition_samples(config: &ExperimentConfig, horizons: &[f64], source: TailSource) -> Result<(Vec<Vec<f64>>, usize)> {
    if horizons.is_empty() || horizons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("horizons must be increasing".into()));
    }
    match source {
        TailSource::Lattice { runs, stride } => {
            let setup = LatticeSetup::from_config(config);
            let n = setup.sites_per_axis()?;
            let stride = stride.max(1);
            let d = config.dim;
            let picked: Vec<usize> = (0..n.pow(d as u32))
                .filter(|&s| {
                    let mut q = s;
                    (0..d).all(|_| {
                        let ok = (q % n) % stride == 0;
                        q /= n;
                        ok
                    })
                })
                .collect();
            let per_run = try_par_map(config.workers, runs, |r| {
                let seed = rng::derive_seed(config.seed, rng::tag::REPLICA, r as u64);
                let field = setup.field(seed)?;
                let mut g = SheGrid::new(&setup, &InitialCondition::Flat, 0.0, SlabOrder::Forward)?;
                horizons
                    .iter()
                    .map(|&t| {
                        g.run_to(t, &field)?;
                        Ok(picked.iter().map(|&s| g.values()[s].ln()).collect::<Vec<f64>>())
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let out = (0..horizons.len()).map(|h| per_run.iter().flat_map(|r| r[h].iter().copied()).collect()).collect();
            Ok((out, picked.len()))
        }
        TailSource::Polymer { realizations, inner } => {
            let sampler = PolymerSampler::new(config)?.with_workers(1).with_samples(inner);
            let origin = vec![0.0; config.dim];
            let rows = try_par_map(config.workers, realizations, |b| {
                let field = config.noise(b as u64)?;
                let s = sampler.clone().with_path_seed(rng::derive_seed(config.seed, rng::tag::BATCH, b as u64));
                horizons.iter().map(|&t| Ok(s.estimate(&field, &origin, t)?.log_z)).collect::<Result<Vec<f64>>>()
            })?;
            Ok(((0..horizons.len()).map(|h| rows.iter().map(|r| r[h]).collect()).collect(), 1))
        }
    }
}

pub fn tail_study(config: &ExperimentConfig, horizons: &[f64], theta: &[f64], source: TailSource) -> Result<Vec<TailRecord>> {
    let (samples, block) = log_partition_samples(config, horizons, source)?;
    horizons.iter().zip(&samples).map(|(&t, s)| tail_record(s, theta, t, block, &source.label())).collect()
}
