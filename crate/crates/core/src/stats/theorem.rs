//! Finite-ε surrogates for the convergence of `h_ε(t, x)` to the stationary
//! height, the bridge representation of the narrow wedge, and the
//! factorization of long bridges into two endpoint-local pieces.

use super::summary::{mean_se, variance_se};
use crate::config::{integer_multiple, ExperimentConfig};
use crate::error::{Error, Result};
use crate::lattice::{InitialCondition, LatticeSetup, SheGrid, SlabOrder, WRAP_TOLERANCE};
use crate::mollifier::{heat_kernel, heat_solve, CovarianceKernel, HeatState, Profile};
use crate::noise::{NoiseField, NoiseTransform, TransformedNoise};
use crate::parallel::try_par_map;
use crate::polymer::{BrownianPath, PolymerSampler};
use crate::rng;
use serde::Serialize;

/// Initial condition of the gap study.
#[derive(Clone)]
pub enum GapVariant {
    Flat,
    /// `u₀ = exp(h₀)`.
    General(Profile),
    /// Narrow wedge at `x₀`.
    Droplet(Vec<f64>),
}

impl GapVariant {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Flat => "flat",
            Self::General(_) => "general",
            Self::Droplet(_) => "droplet",
        }
    }
}

impl std::fmt::Debug for GapVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Flat => write!(f, "Flat"),
            Self::General(_) => write!(f, "General(..)"),
            Self::Droplet(x0) => write!(f, "Droplet({x0:?})"),
        }
    }
}

/// Where and how the gap is measured.
#[derive(Debug, Clone)]
pub struct GapPlan {
    pub t: f64,
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
    pub seeds: usize,
    /// Rescaled run time of the stationary proxy; defaults to `4t/ε_min²`.
    pub proxy_horizon: Option<f64>,
    /// Physical box side for non-flat starts; the flat runs use the
    /// configured rescaled box.
    pub physical_box: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GapRow {
    pub eps: f64,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
    /// Noise-free term subtracted from every sample (0 for a flat start).
    pub reference: f64,
    pub proxy_horizon: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GapRecord {
    pub variant: &'static str,
    pub t: f64,
    pub x: Vec<f64>,
    pub rows: Vec<GapRow>,
}

impl GapRecord {
    /// Strictly decreasing point estimates of the variance along the ε list.
    pub fn variance_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].variance < w[0].variance)
    }
}

/// Rescaled box covering `physical` at scale `eps`, rounded up to an even
/// number of sites.
fn covering_box(physical: f64, eps: f64, spacing: f64) -> f64 {
    let sites = (physical / eps / spacing).ceil() as u64;
    (sites + sites % 2) as f64 * spacing
}

/// Gap between `h_ε(t, x)` and the stationary height read off the same noise,
/// for each ε, from lattice runs.
///
/// The lattice mesh of `config` is in rescaled units (ε = 1) and is rescaled
/// with each ε. The stationary height near `(t, x)` is proxied by the log of
/// a flat-start solution begun at `t − ε² T_max`; for the droplet the
/// height seen from `(0, x₀)` forward in time is the log of the backward
/// equation run from a flat terminal value at `ε² T_max` down to 0.
pub fn theorem1_gap(config: &ExperimentConfig, variant: &GapVariant, plan: &GapPlan) -> Result<GapRecord> {
    let d = config.dim;
    if plan.x.len() != d {
        return Err(Error::InvalidArgument("observation point has the wrong dimension".into()));
    }
    if plan.eps.is_empty() || plan.seeds < 2 {
        return Err(Error::InvalidArgument("need at least one scale and two seeds".into()));
    }
    let eps_min = plan.eps.iter().cloned().fold(f64::INFINITY, f64::min);
    let proxy = plan.proxy_horizon.unwrap_or(4.0 * plan.t / (eps_min * eps_min));
    if proxy < 4.0 * plan.t / (eps_min * eps_min) * (1.0 - 1e-12) {
        return Err(Error::InvalidConfiguration(format!(
            "proxy horizon {proxy} is below 4t/eps_min^2 = {}",
            4.0 * plan.t / (eps_min * eps_min)
        )));
    }
    let l = &config.lattice;
    let unit = LatticeSetup { dim: d, spacing: l.spacing, box_side: l.box_side, dt: l.dt, eps: 1.0, beta: config.beta };
    let physical_box = plan.physical_box.unwrap_or(12.0 * plan.t.sqrt());

    let reference = match variant {
        GapVariant::Flat => 0.0,
        GapVariant::General(h0) => heat_solve(&HeatState::from_log(d, h0.clone()), plan.t, &plan.x)?.ln(),
        GapVariant::Droplet(x0) => {
            let r: Vec<f64> = plan.x.iter().zip(x0).map(|(a, b)| a - b).collect();
            heat_kernel(plan.t, &r)?.ln()
        }
    };

    let mut rows = Vec::with_capacity(plan.eps.len());
    for &eps in &plan.eps {
        let flat = unit.rescaled(eps);
        let wide = LatticeSetup { box_side: covering_box(physical_box, eps, unit.spacing), ..unit.clone() }.rescaled(eps);
        let pre = eps * eps * proxy;
        let samples = try_par_map(config.workers, plan.seeds, |r| {
            let seed = rng::derive_seed(config.seed, rng::tag::REPLICA, r as u64);
            // The flat and wide meshes share cells, indexed by physical
            // position, so one seed gives both the same noise.
            let log_at = |setup: &LatticeSetup, init: &InitialCondition, from: f64, to: f64, order: SlabOrder, at: &[f64]| {
                let mut g = SheGrid::new(setup, init, from, order)?;
                g.run_to(to, &setup.field(seed)?)?;
                if matches!(init, InitialCondition::Droplet(_)) && g.boundary_mass_fraction() > WRAP_TOLERANCE {
                    return Err(Error::WrapContamination(format!(
                        "droplet mass fraction {:.3e} on the box edge at eps = {eps}",
                        g.boundary_mass_fraction()
                    )));
                }
                let v = g.value_at(at)?;
                if v > 0.0 {
                    Ok(v.ln())
                } else {
                    Err(Error::PositivityLoss { site: g.site_index(at)?, step: g.steps_taken(), value: v })
                }
            };
            let stationary = if config.beta == 0.0 {
                0.0
            } else {
                log_at(&flat, &InitialCondition::Flat, plan.t - pre, plan.t, SlabOrder::Forward, &plan.x)?
            };
            let gap = match variant {
                GapVariant::Flat => log_at(&flat, &InitialCondition::Flat, 0.0, plan.t, SlabOrder::Forward, &plan.x)? - stationary,
                GapVariant::General(h0) => {
                    log_at(&wide, &InitialCondition::General(h0.clone()), 0.0, plan.t, SlabOrder::Forward, &plan.x)? - stationary - reference
                }
                GapVariant::Droplet(x0) => {
                    let h = log_at(&wide, &InitialCondition::Droplet(x0.clone()), 0.0, plan.t, SlabOrder::Forward, &plan.x)?;
                    let from_start = if config.beta == 0.0 {
                        0.0
                    } else {
                        log_at(&flat, &InitialCondition::Flat, pre, 0.0, SlabOrder::Reversed, x0)?
                    };
                    h - reference - stationary - from_start
                }
            };
            Ok::<_, Error>(gap)
        })?;
        let (mean, m_se) = mean_se(&samples);
        let (variance, v_se) = variance_se(&samples);
        rows.push(GapRow { eps, mean, mean_se: m_se, variance, variance_se: v_se, reference, proxy_horizon: proxy, seeds: plan.seeds });
    }
    Ok(GapRecord { variant: variant.tag(), t: plan.t, x: plan.x.clone(), rows })
}

/// `E[u_ε(t, x)]` for a narrow wedge at `x₀` through the bridge representation.
#[derive(Debug, Clone, Serialize)]
pub struct NarrowWedge {
    pub t: f64,
    pub x: Vec<f64>,
    pub x0: Vec<f64>,
    /// `ρ(t, x − x₀)`.
    pub kernel: f64,
    /// Mean of the bridge partition factor over noise batches; exactly 1 in expectation.
    pub factor: f64,
    pub factor_se: f64,
    pub mean: f64,
    pub mean_se: f64,
    pub batches: usize,
}

/// Per batch: a noise field, read through the diffusive reversal about
/// `(t, x)`, and `M` bridges from `x/ε` to `x₀/ε` over `t/ε²`.
pub fn narrow_wedge_mean(config: &ExperimentConfig, t: f64, x: &[f64], x0: &[f64], batches: usize) -> Result<NarrowWedge> {
    let d = config.dim;
    if x.len() != d || x0.len() != d {
        return Err(Error::InvalidArgument("points have the wrong dimension".into()));
    }
    if batches < 2 {
        return Err(Error::InvalidArgument("at least two batches are needed".into()));
    }
    let eps = config.eps;
    let sep: Vec<f64> = x.iter().zip(x0).map(|(a, b)| a - b).collect();
    let kernel = heat_kernel(t, &sep)?;
    let horizon = t / (eps * eps);
    // The view reads base point (t − ε²s, x + εy): start at y = 0, end where
    // the base sees x₀ at time 0.
    let start = vec![0.0; d];
    let end: Vec<f64> = sep.iter().map(|v| -v / eps).collect();
    let sampler = PolymerSampler::new(config)?.with_workers(1).with_bridge(end);
    let factors = try_par_map(config.workers, batches, |b| {
        let base = NoiseField::new(rng::derive_seed(config.seed, rng::tag::NOISE, b as u64), config.dt * eps * eps, config.dx * eps, d)?;
        let tr = NoiseTransform::reversal(eps, t, x.to_vec());
        let view = TransformedNoise::new(&base, &tr, config.dt, config.dx)?;
        let seed = rng::derive_seed(config.seed, rng::tag::PATH, b as u64);
        Ok::<_, Error>(sampler.clone().with_path_seed(seed).estimate(&view, &start, horizon)?.z)
    })?;
    let (factor, factor_se) = mean_se(&factors);
    Ok(NarrowWedge {
        t,
        x: x.to_vec(),
        x0: x0.to_vec(),
        kernel,
        factor,
        factor_se,
        mean: kernel * factor,
        mean_se: kernel * factor_se,
        batches,
    })
}

/// Bridge partition function against the product of two endpoint-local ones.
#[derive(Debug, Clone, Serialize)]
pub struct SplitRow {
    pub horizon: f64,
    pub window: f64,
    pub bridge_mean: f64,
    pub product_mean: f64,
    /// `E|Ẑ_bridge − Ẑ_start Ẑ_end|` over noise batches.
    pub l1_gap: f64,
    pub l1_gap_se: f64,
    /// Mean of `∫_m^{T−m} V(√2 W)` over standard bridges from 0 to 0.
    pub middle_occupation: f64,
    pub middle_occupation_se: f64,
    pub batches: usize,
}

/// `E^{T,X}_{0,0}[Φ_T]` against `E₀[Φ_m] · E₀[Φ_m(ξ^{(1,T,X)})]` on common noise.
pub fn decorrelation_split(config: &ExperimentConfig, horizon: f64, window: f64, end: &[f64], batches: usize) -> Result<SplitRow> {
    let d = config.dim;
    if end.len() != d {
        return Err(Error::InvalidArgument("endpoint has the wrong dimension".into()));
    }
    if !(window > 0.0 && window <= horizon / 4.0 * (1.0 + 1e-12)) {
        return Err(Error::InvalidArgument(format!("window {window} must lie in (0, T/4] for T = {horizon}")));
    }
    if batches < 2 {
        return Err(Error::InvalidArgument("at least two batches are needed".into()));
    }
    let origin = vec![0.0; d];
    let sampler = PolymerSampler::new(config)?.with_workers(1);
    let rows = try_par_map(config.workers, batches, |b| {
        let field = config.noise(b as u64)?;
        let seed = |slot: u64| rng::derive_seed(config.seed, rng::tag::BATCH, (b as u64) << 8 | slot);
        let bridge = sampler.clone().with_bridge(end.to_vec()).with_path_seed(seed(0)).estimate(&field, &origin, horizon)?.z;
        let near_start = sampler.clone().with_path_seed(seed(1)).estimate(&field, &origin, window)?.z;
        let view = TransformedNoise::natural(&field, &NoiseTransform::reversal(1.0, horizon, end.to_vec()))?;
        let near_end = sampler.clone().with_path_seed(seed(2)).estimate(&view, &origin, window)?.z;
        Ok::<_, Error>((bridge, near_start * near_end))
    })?;
    let (bridge, product): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    let gaps: Vec<f64> = bridge.iter().zip(&product).map(|(a, b)| (a - b).abs()).collect();
    let (l1_gap, l1_gap_se) = mean_se(&gaps);

    let kernel = CovarianceKernel::shared(d)?;
    let steps = integer_multiple(horizon, config.dt).filter(|&n| n > 0).ok_or_else(|| {
        Error::InvalidConfiguration(format!("horizon {horizon} is not a multiple of dt = {}", config.dt))
    })? as usize;
    let (lo, hi) = ((window / config.dt).round() as usize, steps - (window / config.dt).round() as usize);
    let occupation = crate::parallel::par_map(config.workers, config.samples, |i| {
        let mut stream = rng::sample_stream(config.seed, rng::tag::POINT, i as u64);
        let w = BrownianPath::sample_bridge(d, config.dt, steps, &origin, &origin, &mut stream);
        (lo..hi).map(|k| kernel.eval_r2(2.0 * w.position(k).iter().map(|v| v * v).sum::<f64>())).sum::<f64>() * config.dt
    });
    let (middle_occupation, middle_occupation_se) = mean_se(&occupation);
    Ok(SplitRow {
        horizon,
        window,
        bridge_mean: mean_se(&bridge).0,
        product_mean: mean_se(&product).0,
        l1_gap,
        l1_gap_se,
        middle_occupation,
        middle_occupation_se,
        batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LatticeParams;
    use std::sync::Arc;

    fn cfg(beta: f64) -> ExperimentConfig {
        ExperimentConfig {
            beta,
            samples: 32,
            lattice: LatticeParams { spacing: 0.25, box_side: 4.0, dt: 1.0 / 128.0 },
            ..Default::default()
        }
    }

    fn plan(eps: Vec<f64>) -> GapPlan {
        GapPlan { t: 1.0 / 16.0, x: vec![0.0; 3], eps, seeds: 4, proxy_horizon: None, physical_box: None }
    }

    #[test]
    fn zero_coupling_gaps_vanish() {
        let r = theorem1_gap(&cfg(0.0), &GapVariant::Flat, &plan(vec![1.0, 0.5])).unwrap();
        assert!(r.rows.iter().all(|row| row.mean == 0.0 && row.variance == 0.0));
        // A slowly varying profile: only the lattice heat-flow error remains.
        let h0: Profile = Arc::new(|y: &[f64]| 0.3 * (-y.iter().map(|v| v * v).sum::<f64>() / 8.0).exp());
        let p = GapPlan { physical_box: Some(16.0), ..plan(vec![1.0]) };
        let r = theorem1_gap(&cfg(0.0), &GapVariant::General(h0), &p).unwrap();
        assert!(r.rows[0].mean.abs() < 1e-3, "{:?}", r.rows);
        assert_eq!(r.rows[0].variance, 0.0);
    }

    #[test]
    fn droplet_without_noise_is_the_kernel_error() {
        let c = ExperimentConfig { lattice: LatticeParams { spacing: 0.125, box_side: 10.0, dt: 1.0 / 512.0 }, ..cfg(0.0) };
        let p = GapPlan { t: 1.0, physical_box: Some(10.0), seeds: 2, ..plan(vec![1.0]) };
        let r = theorem1_gap(&c, &GapVariant::Droplet(vec![0.0; 3]), &p).unwrap();
        assert!(r.rows[0].mean.abs() < 1e-2, "{:?}", r.rows);
        assert!(r.rows[0].reference < 0.0);
    }

    #[test]
    fn flat_gap_is_small_and_noisy() {
        let r = theorem1_gap(&cfg(0.2), &GapVariant::Flat, &plan(vec![1.0, 0.5])).unwrap();
        for row in &r.rows {
            assert!(row.variance > 0.0 && row.variance < 0.05, "{row:?}");
        }
    }

    #[test]
    fn short_proxy_rejected() {
        let p = GapPlan { proxy_horizon: Some(0.1), ..plan(vec![1.0]) };
        assert!(matches!(theorem1_gap(&cfg(0.2), &GapVariant::Flat, &p), Err(Error::InvalidConfiguration(_))));
    }

    #[test]
    fn wedge_factor_is_exact_without_noise() {
        let w = narrow_wedge_mean(&cfg(0.0), 1.0, &[0.0; 3], &[0.0; 3], 3).unwrap();
        assert_eq!((w.factor, w.factor_se), (1.0, 0.0));
        assert_eq!(w.mean, (2.0 * std::f64::consts::PI).powf(-1.5));
        let w = narrow_wedge_mean(&cfg(0.2), 1.0, &[0.5, 0.0, 0.0], &[0.0; 3], 30).unwrap();
        assert!((w.factor - 1.0).abs() < 3.0 * w.factor_se + 1e-12, "{w:?}");
    }

    #[test]
    fn split_without_noise() {
        let s = decorrelation_split(&cfg(0.0), 4.0, 1.0, &[0.0; 3], 3).unwrap();
        assert_eq!((s.bridge_mean, s.product_mean, s.l1_gap), (1.0, 1.0, 0.0));
        assert!(s.middle_occupation > 0.0);
        assert!(decorrelation_split(&cfg(0.0), 4.0, 2.0, &[0.0; 3], 3).is_err());
    }
}
