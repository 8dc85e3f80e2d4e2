//! Two estimators of the covariance of the partition function at two points,
//! the power-law decay fit, the σ² integral and the martingale plateau.

use super::fit::{weighted_line_fit, LineFit};
use super::summary::mean_se;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::polymer::{OverlapEstimate, OverlapSampler, PartitionEstimate, PolymerSampler};
use crate::quad::{legendre, sphere_area};
use crate::parallel::try_par_map;
use crate::rng;
use serde::Serialize;

/// Covariance of `Ẑ(0)` and `Ẑ(x)` from both sides.
#[derive(Debug, Clone, Serialize)]
pub struct CovarianceRecord {
    pub separation: Vec<f64>,
    pub pair: f64,
    pub pair_se: f64,
    pub overlap: f64,
    pub overlap_se: f64,
    pub horizon: f64,
    pub beta: f64,
}

impl CovarianceRecord {
    pub fn distance(&self) -> f64 {
        self.separation.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Pair-side estimate at one separation.
#[derive(Debug, Clone, Serialize)]
pub struct PairCovariance {
    pub separation: Vec<f64>,
    pub value: f64,
    pub se: f64,
    pub batches: usize,
}

/// Pair side for several separations on shared noise.
///
/// Every batch draws one noise field, `2M` paths from the origin and `M`
/// independent paths from each nonzero separation. Path sets are
/// independent given the noise and `E[Ẑ] = 1` exactly, so
/// `(Ẑ(0) − 1)(Ẑ(x) − 1)` is unbiased for the covariance of the exact
/// partition functions; at `x = 0` the off-diagonal mean of `(w_i − 1)(w_j − 1)`
/// over the origin paths plays the same role. Neither carries the `1/M`
/// path noise of a plain sample variance.
pub fn covariance_pair_many(
    config: &ExperimentConfig,
    separations: &[Vec<f64>],
    horizon: f64,
    batches: usize,
) -> Result<Vec<PairCovariance>> {
    if batches < 2 {
        return Err(Error::InvalidArgument("at least two batches are needed".into()));
    }
    if separations.iter().any(|x| x.len() != config.dim) {
        return Err(Error::InvalidArgument("separation has the wrong dimension".into()));
    }
    let sampler = PolymerSampler::new(config)?.with_workers(1);
    let origin = vec![0.0; config.dim];
    let rows = try_par_map(config.workers, batches, |b| {
        let field = config.noise(b as u64)?;
        let seed = |slot: u64| rng::derive_seed(config.seed, rng::tag::BATCH, (b as u64) << 16 | slot);
        let centre = sampler.clone().with_path_seed(seed(0)).with_samples(2 * config.samples).estimate(&field, &origin, horizon)?;
        separations
            .iter()
            .enumerate()
            .map(|(i, x)| {
                if x.iter().all(|&v| v == 0.0) {
                    Ok(centred_offdiag(&centre))
                } else {
                    let zx = sampler.clone().with_path_seed(seed(1 + i as u64)).estimate(&field, x, horizon)?.z;
                    Ok((centre.z - 1.0) * (zx - 1.0))
                }
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(separations
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let col: Vec<f64> = rows.iter().map(|r| r[i]).collect();
            let (value, se) = mean_se(&col);
            PairCovariance { separation: x.clone(), value, se, batches }
        })
        .collect())
}

/// `(1/M(M−1)) Σ_{i≠j} (w_i − 1)(w_j − 1)`, from the uncentred pair mean.
fn centred_offdiag(e: &PartitionEstimate) -> f64 {
    e.offdiag_second_moment - 2.0 * e.z + 1.0
}

pub fn covariance_pair(config: &ExperimentConfig, x: &[f64], horizon: f64, batches: usize) -> Result<PairCovariance> {
    Ok(covariance_pair_many(config, &[x.to_vec()], horizon, batches)?.remove(0))
}

/// Variance of the exact partition function at the origin.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceEstimate {
    pub value: f64,
    pub se: f64,
    pub batches: usize,
    pub samples: usize,
}

/// `Var 𝒵_T(0)` from the centred off-diagonal pair mean of one path set per
/// noise field. Its conditional mean is `(𝒵_T − 1)²`, so it is unbiased and,
/// unlike `Σ_{i≠j} w_i w_j − 1`, does not carry the noise of `2(𝒵_T − 1)`.
pub fn variance_at_origin(config: &ExperimentConfig, horizon: f64, batches: usize) -> Result<VarianceEstimate> {
    if batches < 2 {
        return Err(Error::InvalidArgument("at least two batches are needed".into()));
    }
    let sampler = PolymerSampler::new(config)?.with_workers(1);
    let origin = vec![0.0; config.dim];
    let values = try_par_map(config.workers, batches, |b| {
        let field = config.noise(b as u64)?;
        let seed = rng::derive_seed(config.seed, rng::tag::BATCH, (b as u64) << 16);
        let e = sampler.clone().with_path_seed(seed).estimate(&field, &origin, horizon)?;
        Ok::<_, Error>(centred_offdiag(&e))
    })?;
    let (value, se) = mean_se(&values);
    Ok(VarianceEstimate { value, se, batches, samples: config.samples })
}

/// Overlap side: `E_{x/√2}[exp(β² ∫₀^T V(√2 W_s) ds)] − 1`.
pub fn covariance_overlap(config: &ExperimentConfig, x: &[f64], horizon: f64, samples: usize) -> Result<OverlapEstimate> {
    if x.len() != config.dim {
        return Err(Error::InvalidArgument("separation has the wrong dimension".into()));
    }
    let start: Vec<f64> = x.iter().map(|v| v / std::f64::consts::SQRT_2).collect();
    OverlapSampler::new(config)?.with_samples(samples).single(&start, horizon)
}

/// Both estimators at each separation.
pub fn covariance_records(
    config: &ExperimentConfig,
    separations: &[Vec<f64>],
    horizon: f64,
    batches: usize,
    overlap_samples: usize,
) -> Result<Vec<CovarianceRecord>> {
    let pairs = covariance_pair_many(config, separations, horizon, batches)?;
    pairs
        .into_iter()
        .map(|p| {
            let o = covariance_overlap(config, &p.separation, horizon, overlap_samples)?;
            let (overlap, overlap_se) = o.excess();
            Ok(CovarianceRecord {
                separation: p.separation,
                pair: p.value,
                pair_se: p.se,
                overlap,
                overlap_se,
                horizon,
                beta: config.beta,
            })
        })
        .collect()
}

/// Log-log fit of covariance against distance.
#[derive(Debug, Clone, Serialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub exponent_se: f64,
    pub ci: (f64, f64),
    pub line: LineFit,
    /// Distances dropped because the value was not positive.
    pub excluded: Vec<f64>,
}

/// Weighted least squares of `log value` on `log distance`, with
/// `σ_log = se / value`. Nonpositive values are dropped with a warning.
pub fn powerlaw_fit(distance: &[f64], value: &[f64], se: &[f64]) -> Result<PowerLawFit> {
    if distance.len() != value.len() || distance.len() != se.len() {
        return Err(Error::InvalidArgument("fit inputs differ in length".into()));
    }
    let (mut x, mut y, mut s, mut excluded) = (vec![], vec![], vec![], vec![]);
    for i in 0..distance.len() {
        if value[i] > 0.0 && distance[i] > 0.0 {
            x.push(distance[i].ln());
            y.push(value[i].ln());
            // Exact data: any common positive sigma gives the same slope.
            s.push(if se[i] > 0.0 { se[i] / value[i] } else { 1.0 });
        } else {
            log::warn!("covariance {} at distance {} is not positive; dropped from the fit", value[i], distance[i]);
            excluded.push(distance[i]);
        }
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(format!("only {} positive points to fit", x.len())));
    }
    let line = weighted_line_fit(&x, &y, &s)?;
    Ok(PowerLawFit { exponent: line.slope, exponent_se: line.slope_se, ci: line.slope_ci(), line, excluded })
}

/// Fit over the records whose distance lies in `[lo, hi]`, overlap side.
pub fn powerlaw_fit_records(records: &[CovarianceRecord], lo: f64, hi: f64) -> Result<PowerLawFit> {
    let kept: Vec<&CovarianceRecord> = records.iter().filter(|r| (lo..=hi).contains(&r.distance())).collect();
    if kept.len() < 4 {
        return Err(Error::InvalidArgument(format!("{} separations in [{lo}, {hi}], at least 4 needed", kept.len())));
    }
    let d: Vec<f64> = kept.iter().map(|r| r.distance()).collect();
    let v: Vec<f64> = kept.iter().map(|r| r.overlap).collect();
    let s: Vec<f64> = kept.iter().map(|r| r.overlap_se).collect();
    powerlaw_fit(&d, &v, &s)
}

/// `V(√2 y) E_y[exp(β² ∫₀^T V(√2 W))]` at one point, with the Monte Carlo SE.
pub fn sigma2_integrand(config: &ExperimentConfig, y: &[f64], horizon: f64, samples: usize) -> Result<(f64, f64)> {
    let sampler = OverlapSampler::new(config)?.with_samples(samples);
    let v = sampler.kernel().eval_r2(2.0 * y.iter().map(|a| a * a).sum::<f64>());
    if v == 0.0 {
        return Ok((0.0, 0.0));
    }
    let e = sampler.single(y, horizon)?;
    Ok((v * e.exp_moment, v * e.exp_moment_se))
}

/// `∫ dy V(√2 y) E_y[…]` without the dimensional constant, at two horizons.
#[derive(Debug, Clone, Serialize)]
pub struct Sigma2Estimate {
    pub beta: f64,
    pub horizon: f64,
    pub value: f64,
    pub se: f64,
    /// Same integral at twice the horizon.
    pub value_long: f64,
    pub se_long: f64,
    /// The long-horizon value exceeds the short one by more than 3 combined SE.
    pub diverging: bool,
}

/// Radial Gauss-Legendre nodes on `[0, 1/√2]` (the support of `V(√2 ·)`),
/// Monte Carlo for the exponential moment at each node.
pub fn sigma2_relative(config: &ExperimentConfig, horizon: f64, samples: usize, nodes: usize) -> Result<Sigma2Estimate> {
    let d = config.dim;
    let rule = legendre(nodes, 0.0, std::f64::consts::FRAC_1_SQRT_2);
    let area = sphere_area(d);
    let at = |t: f64, salt: u64| -> Result<(f64, f64)> {
        let (mut value, mut var) = (0.0, 0.0);
        for (i, &(r, w)) in rule.iter().enumerate() {
            let mut y = vec![0.0; d];
            y[0] = r;
            let c = ExperimentConfig { seed: rng::derive_seed(config.seed, rng::tag::POINT, salt << 16 | i as u64), ..config.clone() };
            let (v, se) = sigma2_integrand(&c, &y, t, samples)?;
            let jac = area * w * r.powi(d as i32 - 1);
            value += jac * v;
            var += (jac * se).powi(2);
        }
        Ok((value, var.sqrt()))
    };
    let (value, se) = at(horizon, 0)?;
    let (value_long, se_long) = at(2.0 * horizon, 1)?;
    Ok(Sigma2Estimate {
        beta: config.beta,
        horizon,
        value,
        se,
        value_long,
        se_long,
        diverging: value_long - value > 3.0 * se.hypot(se_long),
    })
}

/// One row of the martingale plateau table.
#[derive(Debug, Clone, Serialize)]
pub struct PlateauRow {
    pub from: f64,
    pub to: f64,
    /// `E[(𝒵_to − 𝒵_from)²]`.
    pub increment: f64,
    pub increment_se: f64,
    /// `E[𝒵_to²]`.
    pub second_moment: f64,
    pub second_moment_se: f64,
}

/// Increments of the partition function along a horizon grid.
///
/// Within a batch every horizon reuses the same noise and the same paths (a
/// longer path extends a shorter one), so `Ẑ_T` is a martingale in `T`.
/// Squares are estimated by off-diagonal pair means, which remove the
/// diagonal path-noise term.
pub fn martingale_plateau(config: &ExperimentConfig, horizons: &[f64], batches: usize) -> Result<Vec<PlateauRow>> {
    if horizons.len() < 2 || horizons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("horizon grid must be increasing with at least two points".into()));
    }
    if batches < 2 {
        return Err(Error::InvalidArgument("at least two batches are needed".into()));
    }
    let sampler = PolymerSampler::new(config)?.with_workers(1);
    let origin = vec![0.0; config.dim];
    let m = config.samples as f64;
    let offdiag = |x: &[f64]| {
        let s: f64 = x.iter().sum();
        let s2: f64 = x.iter().map(|v| v * v).sum();
        (s * s - s2) / (m * (m - 1.0))
    };
    let rows = try_par_map(config.workers, batches, |b| {
        let field = config.noise(b as u64)?;
        let s = sampler.clone().with_path_seed(rng::derive_seed(config.seed, rng::tag::BATCH, b as u64));
        let weights = horizons
            .iter()
            .map(|&t| Ok(s.log_weights(&field, &origin, t)?.into_iter().map(f64::exp).collect::<Vec<f64>>()))
            .collect::<Result<Vec<_>>>()?;
        Ok::<_, Error>(
            weights
                .windows(2)
                .map(|w| {
                    let diff: Vec<f64> = w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect();
                    (offdiag(&diff), offdiag(&w[1]))
                })
                .collect::<Vec<_>>(),
        )
    })?;
    Ok(horizons
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (inc, sec): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| r[i]).unzip();
            let (increment, increment_se) = mean_se(&inc);
            let (second_moment, second_moment_se) = mean_se(&sec);
            PlateauRow { from: w[0], to: w[1], increment, increment_se, second_moment, second_moment_se }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mollifier::CovarianceKernel;
    use approx::assert_relative_eq;

    fn cfg(beta: f64) -> ExperimentConfig {
        ExperimentConfig { beta, samples: 64, ..Default::default() }
    }

    #[test]
    fn zero_coupling_vanishes() {
        let c = cfg(0.0);
        let sep = vec![vec![0.0; 3], vec![1.0, 0.0, 0.0]];
        for p in covariance_pair_many(&c, &sep, 2.0, 4).unwrap() {
            assert_eq!((p.value, p.se), (0.0, 0.0));
        }
        assert_eq!(covariance_overlap(&c, &[1.0, 0.0, 0.0], 2.0, 16).unwrap().excess(), (0.0, 0.0));
        let v = variance_at_origin(&c, 2.0, 3).unwrap();
        assert_eq!((v.value, v.se), (0.0, 0.0));
        for r in martingale_plateau(&c, &[1.0, 2.0, 4.0], 3).unwrap() {
            assert_eq!((r.increment, r.second_moment), (0.0, 1.0));
        }
    }

    #[test]
    fn distant_points_are_uncorrelated() {
        // Paths from 0 and from 3e₁ cannot share noise cells within a short horizon.
        let c = ExperimentConfig { samples: 32, ..cfg(0.2) };
        let p = covariance_pair(&c, &[3.0, 0.0, 0.0], 0.5, 40).unwrap();
        assert!(p.value.abs() <= 3.0 * p.se, "{p:?}");
        assert_eq!(covariance_overlap(&c, &[3.0, 0.0, 0.0], 0.5, 64).unwrap().excess().0, 0.0);
    }

    #[test]
    fn planted_exponent_is_recovered() {
        let d: Vec<f64> = vec![1.0, 1.5, 2.0, 3.0, 4.0];
        let v: Vec<f64> = d.iter().map(|x| 0.7 / x).collect();
        let f = powerlaw_fit(&d, &v, &vec![0.0; 5]).unwrap();
        assert_relative_eq!(f.exponent, -1.0, epsilon = 1e-12);
        let v4: Vec<f64> = d.iter().map(|x| 0.3 * x.powi(-2)).collect();
        let se: Vec<f64> = v4.iter().map(|x| 0.1 * x).collect();
        assert_relative_eq!(powerlaw_fit(&d, &v4, &se).unwrap().exponent, -2.0, epsilon = 1e-12);
        let mut bad = v.clone();
        bad[4] = -1e-4;
        let f = powerlaw_fit(&d, &bad, &vec![0.01; 5]).unwrap();
        assert_eq!(f.excluded, vec![4.0]);
    }

    #[test]
    fn sigma2_at_zero_coupling_is_the_kernel_mass() {
        // ∫V(√2y)dy = 2^{−d/2} ∫V and ∫V = (∫φ)² = 1.
        let e = sigma2_relative(&ExperimentConfig { beta: 0.0, samples: 2, ..Default::default() }, 1.0, 2, 24).unwrap();
        assert_relative_eq!(e.value, 2f64.powf(-1.5), max_relative = 1e-4);
        assert_eq!(e.se, 0.0);
        assert!(!e.diverging);
        let k = CovarianceKernel::shared(3).unwrap();
        assert_eq!(sigma2_integrand(&cfg(0.2), &[0.8, 0.0, 0.0], 1.0, 8).unwrap(), (0.0, 0.0));
        assert!(k.eval_r2(2.0 * 0.64) == 0.0);
    }

    #[test]
    fn sigma2_increases_with_coupling() {
        let vals: Vec<f64> = [0.1, 0.2, 0.3]
            .iter()
            .map(|&b| sigma2_relative(&ExperimentConfig { beta: b, samples: 400, ..Default::default() }, 5.0, 400, 6).unwrap().value)
            .collect();
        assert!(vals[0] < vals[1] && vals[1] < vals[2], "{vals:?}");
    }
}
