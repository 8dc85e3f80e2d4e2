//! One function per subcommand; each returns its rows.

use crate::failure::Failure;
use crate::table::{Cell, Table};
use clap::{Args, ValueEnum};
use kpz_core::lattice::{self, InitialCondition, LatticeSetup};
use kpz_core::mollifier::Profile;
use kpz_core::noise::{besov_scaling_check, parabolic_bump, parabolic_bump_norm_sq};
use kpz_core::polymer::PolymerSampler;
use kpz_core::stats::covariance::{covariance_overlap, covariance_records, martingale_plateau, powerlaw_fit};
use kpz_core::stats::summary::mean_se;
use kpz_core::stats::tails::{tail_study, TailSource};
use kpz_core::stats::theorem::{decorrelation_split, narrow_wedge_mean, theorem1_gap, GapPlan, GapVariant};
use kpz_core::tiling::{LowerBound, TilingSampler};
use kpz_core::{rng, ExperimentConfig};
use std::sync::Arc;

/// Rows plus anything that makes the run fail after its outputs are written.
pub struct Outcome {
    pub table: Table,
    pub violation: Option<String>,
    /// Extra files: (file name, contents).
    pub attachments: Vec<(String, Vec<u8>)>,
}

impl From<Table> for Outcome {
    fn from(table: Table) -> Self {
        Self { table, violation: None, attachments: vec![] }
    }
}

fn point(config: &ExperimentConfig, p: &Option<Vec<f64>>, what: &str) -> Result<Vec<f64>, Failure> {
    match p {
        None => Ok(vec![0.0; config.dim]),
        Some(v) if v.len() == config.dim => Ok(v.clone()),
        Some(v) => Err(Failure::config(format!("{what} has {} coordinates but dim = {}", v.len(), config.dim))),
    }
}

fn along_axis(config: &ExperimentConfig, r: f64) -> Vec<f64> {
    let mut x = vec![0.0; config.dim];
    x[0] = r;
    x
}

fn coords(x: &[f64]) -> String {
    x.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

#[derive(Args, Debug)]
pub struct PartitionArgs {
    /// Starting point (comma separated); the origin by default.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x: Option<Vec<f64>>,
    /// Independent noise fields.
    #[arg(long, default_value_t = 1)]
    pub replicas: usize,
}

/// Columns: replica, x, horizon, z, log_z, se, samples, offdiag_second_moment.
pub fn partition(config: &ExperimentConfig, a: &PartitionArgs) -> Result<Outcome, Failure> {
    let x = point(config, &a.x, "--x")?;
    let mut t = Table::new(&["replica", "x", "horizon", "z", "log_z", "se", "samples", "offdiag_second_moment"]);
    for r in 0..a.replicas.max(1) {
        let sampler = PolymerSampler::new(config)?.with_path_seed(config.path_seed(r as u64));
        let e = sampler.estimate(&config.noise(r as u64)?, &x, config.horizon)?;
        t.push(vec![r.into(), coords(&x).into(), config.horizon.into(), e.z.into(), e.log_z.into(), e.se.into(), e.samples.into(), e.offdiag_second_moment.into()]);
    }
    Ok(t.into())
}

#[derive(Args, Debug)]
pub struct CovarianceArgs {
    /// Distances along the first axis.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    pub separations: Vec<f64>,
    /// Noise batches of the pair estimator.
    #[arg(long, default_value_t = 50)]
    pub batches: usize,
    /// Path pairs of the overlap estimator.
    #[arg(long, default_value_t = 20_000)]
    pub overlap_samples: usize,
}

/// Columns: estimator (pair|overlap), distance, value, se, horizon.
pub fn covariance(config: &ExperimentConfig, a: &CovarianceArgs) -> Result<Outcome, Failure> {
    let seps: Vec<Vec<f64>> = a.separations.iter().map(|&r| along_axis(config, r)).collect();
    let recs = covariance_records(config, &seps, config.horizon, a.batches, a.overlap_samples)?;
    let mut t = Table::new(&["estimator", "distance", "value", "se", "horizon"]);
    for r in &recs {
        t.push(vec!["pair".into(), r.distance().into(), r.pair.into(), r.pair_se.into(), r.horizon.into()]);
        t.push(vec!["overlap".into(), r.distance().into(), r.overlap.into(), r.overlap_se.into(), r.horizon.into()]);
    }
    Ok(t.into())
}

#[derive(Args, Debug)]
pub struct PowerlawArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,1.5,2,3,4")]
    pub distances: Vec<f64>,
    /// Path pairs per distance.
    #[arg(long, default_value_t = 20_000)]
    pub samples: usize,
}

/// Overlap covariance against distance with the weighted log-log fit.
///
/// Columns: distance, value, se, fitted, exponent, exponent_se.
pub fn powerlaw(config: &ExperimentConfig, a: &PowerlawArgs) -> Result<Outcome, Failure> {
    let mut v = vec![];
    let mut s = vec![];
    for &r in &a.distances {
        let (val, se) = covariance_overlap(config, &along_axis(config, r), config.horizon, a.samples)?.excess();
        v.push(val);
        s.push(se);
    }
    let fit = powerlaw_fit(&a.distances, &v, &s)?;
    let mut t = Table::new(&["distance", "value", "se", "fitted", "exponent", "exponent_se"]);
    for i in 0..v.len() {
        let fitted = (fit.line.intercept + fit.exponent * a.distances[i].ln()).exp();
        t.push(vec![a.distances[i].into(), v[i].into(), s[i].into(), fitted.into(), fit.exponent.into(), fit.exponent_se.into()]);
    }
    Ok(t.into())
}

#[derive(Args, Debug)]
pub struct PlateauArgs {
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,40")]
    pub horizons: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    pub batches: usize,
}

/// Columns: from, to, increment, increment_se, second_moment, second_moment_se.
pub fn plateau(config: &ExperimentConfig, a: &PlateauArgs) -> Result<Outcome, Failure> {
    let rows = martingale_plateau(config, &a.horizons, a.batches)?;
    let mut t = Table::new(&["from", "to", "increment", "increment_se", "second_moment", "second_moment_se"]);
    for r in rows {
        t.push(vec![r.from.into(), r.to.into(), r.increment.into(), r.increment_se.into(), r.second_moment.into(), r.second_moment_se.into()]);
    }
    Ok(t.into())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BoundMethod {
    Exact,
    Margin,
}

#[derive(Args, Debug)]
pub struct TilingArgs {
    /// Finest tiling level.
    #[arg(long, default_value_t = 3)]
    pub n_base: u32,
    #[arg(long, value_enum, default_value = "exact")]
    pub method: BoundMethod,
    /// Path pairs per level for the L² gap.
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
    /// Noise replicas for the mean of the discretized partition function.
    #[arg(long, default_value_t = 50)]
    pub replicas: usize,
    /// Paths and points per path of the pointwise sandwich check.
    #[arg(long, default_value_t = 20)]
    pub sandwich_paths: usize,
    #[arg(long, default_value_t = 200)]
    pub sandwich_points: usize,
}

/// Columns: level, gap, gap_se, z_mean, z_se, sandwich_checked, sandwich_violations.
///
/// Any sandwich violation is an invariant failure.
pub fn tiling(config: &ExperimentConfig, a: &TilingArgs) -> Result<Outcome, Failure> {
    let method = match a.method {
        BoundMethod::Exact => LowerBound::Exact,
        BoundMethod::Margin => LowerBound::SampledMargin { subsample: 8 },
    };
    let s = TilingSampler::new(config, a.n_base)?.with_method(method);
    let sandwich = s.sandwich(config.horizon, a.sandwich_paths, a.sandwich_points)?;
    let levels: Vec<u32> = (0..=a.n_base).collect();
    let gaps = s.l2_gap(&levels, config.horizon, a.pairs)?;
    let mut t = Table::new(&["level", "gap", "gap_se", "z_mean", "z_se", "sandwich_checked", "sandwich_violations"]);
    for g in gaps {
        let z = (0..a.replicas.max(2) as u64)
            .map(|b| {
                let c = ExperimentConfig { seed: rng::derive_seed(config.seed, rng::tag::REPLICA, b), ..config.clone() };
                Ok(TilingSampler::new(&c, a.n_base)?.with_method(method).estimate(&config.noise(b)?, g.level, config.horizon)?.z)
            })
            .collect::<Result<Vec<f64>, kpz_core::Error>>()?;
        let (m, se) = mean_se(&z);
        t.push(vec![g.level.into(), g.gap.into(), g.se.into(), m.into(), se.into(), sandwich.checked.into(), sandwich.violations.into()]);
    }
    let violation = (sandwich.violations > 0).then(|| format!("{} of {} sandwich checks violated", sandwich.violations, sandwich.checked));
    Ok(Outcome { table: t, violation, attachments: vec![] })
}

#[derive(Args, Debug)]
pub struct SheArgs {
    /// Physical time t.
    #[arg(long, default_value_t = 1.0)]
    pub time: f64,
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    /// Noise batches on the polymer side.
    #[arg(long, default_value_t = 100)]
    pub batches: usize,
    /// Also write the flat-start field of run 0 to `she_field.csv`.
    #[arg(long)]
    pub snapshot: bool,
}

/// Columns: side (lattice|polymer), mean, mean_se, variance, variance_se, replicas.
pub fn she(config: &ExperimentConfig, a: &SheArgs) -> Result<Outcome, Failure> {
    let x = vec![0.0; config.dim];
    let c = lattice::she_vs_polymer(config, a.time, &x, a.runs, a.batches)?;
    let mut t = Table::new(&["side", "mean", "mean_se", "variance", "variance_se", "replicas"]);
    for (side, s) in [("lattice", &c.lattice), ("polymer", &c.polymer)] {
        t.push(vec![side.into(), s.mean.into(), s.mean_se.into(), s.variance.into(), s.variance_se.into(), s.replicas.into()]);
    }
    let mut attachments = vec![];
    if a.snapshot {
        let setup = LatticeSetup::from_config(config);
        let seed = rng::derive_seed(config.seed, rng::tag::REPLICA, 0);
        let snap = lattice::run_to(&setup, &InitialCondition::Flat, a.time, seed)?;
        let mut buf = vec![];
        snap.write_csv(&mut buf, &[("beta", config.beta.to_string()), ("eps", config.eps.to_string())])?;
        attachments.push(("she_field.csv".to_string(), buf));
    }
    Ok(Outcome { table: t, violation: None, attachments })
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Variant {
    Flat,
    /// Start from h₀(y) = ln(1 + e^{−|y|²/2}).
    General,
    /// Start from a point mass at --x0.
    Droplet,
}

#[derive(Args, Debug)]
pub struct Theorem1Args {
    #[arg(long, value_enum, default_value = "flat")]
    pub variant: Variant,
    #[arg(long, default_value_t = 0.0625)]
    pub t: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "1,0.5,0.25")]
    pub eps: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub seeds: usize,
    /// Rescaled run time of the stationary proxy.
    #[arg(long)]
    pub proxy_horizon: Option<f64>,
    /// Physical box side for non-flat starts.
    #[arg(long = "box")]
    pub physical_box: Option<f64>,
}

pub fn bump_profile() -> Profile {
    Arc::new(|y: &[f64]| (1.0 + (-0.5 * y.iter().map(|v| v * v).sum::<f64>()).exp()).ln())
}

/// Columns: variant, eps, mean, mean_se, variance, variance_se, reference, proxy_horizon, seeds.
pub fn theorem1(config: &ExperimentConfig, a: &Theorem1Args) -> Result<Outcome, Failure> {
    let variant = match a.variant {
        Variant::Flat => GapVariant::Flat,
        Variant::General => GapVariant::General(bump_profile()),
        Variant::Droplet => GapVariant::Droplet(point(config, &a.x0, "--x0")?),
    };
    let plan = GapPlan {
        t: a.t,
        x: point(config, &a.x, "--x")?,
        eps: a.eps.clone(),
        seeds: a.seeds,
        proxy_horizon: a.proxy_horizon,
        physical_box: a.physical_box,
    };
    let rec = theorem1_gap(config, &variant, &plan)?;
    let mut t = Table::new(&["variant", "eps", "mean", "mean_se", "variance", "variance_se", "reference", "proxy_horizon", "seeds"]);
    for r in rec.rows {
        t.push(vec![
            rec.variant.into(),
            r.eps.into(),
            r.mean.into(),
            r.mean_se.into(),
            r.variance.into(),
            r.variance_se.into(),
            r.reference.into(),
            r.proxy_horizon.into(),
            r.seeds.into(),
        ]);
    }
    Ok(t.into())
}

#[derive(Args, Debug)]
pub struct WedgeArgs {
    #[arg(long, default_value_t = 1.0)]
    pub t: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100)]
    pub batches: usize,
}

/// Columns: t, x, x0, kernel, factor, factor_se, mean, mean_se, batches.
pub fn narrow_wedge(config: &ExperimentConfig, a: &WedgeArgs) -> Result<Outcome, Failure> {
    let x = point(config, &a.x, "--x")?;
    let x0 = point(config, &a.x0, "--x0")?;
    let w = narrow_wedge_mean(config, a.t, &x, &x0, a.batches)?;
    let mut t = Table::new(&["t", "x", "x0", "kernel", "factor", "factor_se", "mean", "mean_se", "batches"]);
    t.push(vec![w.t.into(), coords(&w.x).into(), coords(&w.x0).into(), w.kernel.into(), w.factor.into(), w.factor_se.into(), w.mean.into(), w.mean_se.into(), w.batches.into()]);
    Ok(t.into())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Source {
    Lattice,
    Polymer,
}

#[derive(Args, Debug)]
pub struct TailsArgs {
    #[arg(long, value_delimiter = ',', default_value = "20,40")]
    pub horizons: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.15,0.2,0.25,0.3")]
    pub theta: Vec<f64>,
    #[arg(long, value_enum, default_value = "lattice")]
    pub source: Source,
    /// Lattice runs, or polymer noise realizations.
    #[arg(long, default_value_t = 4)]
    pub runs: usize,
    /// Lattice site stride, or polymer paths per realization.
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
}

/// Columns: horizon, theta, probability, lower, upper, exceedances, c_hat,
/// inverse_moment, inverse_moment_se, inverse_square_moment, inverse_square_moment_se.
pub fn tails(config: &ExperimentConfig, a: &TailsArgs) -> Result<Outcome, Failure> {
    let source = match a.source {
        Source::Lattice => TailSource::Lattice { runs: a.runs, stride: a.stride },
        Source::Polymer => TailSource::Polymer { realizations: a.runs, inner: a.stride },
    };
    let recs = tail_study(config, &a.horizons, &a.theta, source)?;
    let mut t = Table::new(&[
        "horizon",
        "theta",
        "probability",
        "lower",
        "upper",
        "exceedances",
        "c_hat",
        "inverse_moment",
        "inverse_moment_se",
        "inverse_square_moment",
        "inverse_square_moment_se",
    ]);
    for r in &recs {
        let c_hat = r.envelope.as_ref().map_or(f64::NAN, |e| e.c_hat);
        for i in 0..r.theta.len() {
            t.push(vec![
                r.horizon.into(),
                r.theta[i].into(),
                r.probability[i].into(),
                r.lower[i].into(),
                r.upper[i].into(),
                r.exceedances[i].into(),
                c_hat.into(),
                r.inverse_moment.0.into(),
                r.inverse_moment.1.into(),
                r.inverse_square_moment.0.into(),
                r.inverse_square_moment.1.into(),
            ]);
        }
    }
    let violation = recs.iter().find(|r| !r.monotone()).map(|r| format!("tail curve at T = {} is not monotone", r.horizon));
    Ok(Outcome { table: t, violation, attachments: vec![] })
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    /// Length of each end window.
    #[arg(long, default_value_t = 2.0)]
    pub window: f64,
    /// Bridge endpoint.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub end: Option<Vec<f64>>,
    #[arg(long, default_value_t = 50)]
    pub batches: usize,
}

/// Columns: horizon, window, bridge_mean, product_mean, l1_gap, l1_gap_se,
/// middle_occupation, middle_occupation_se.
pub fn split(config: &ExperimentConfig, a: &SplitArgs) -> Result<Outcome, Failure> {
    let end = point(config, &a.end, "--end")?;
    let r = decorrelation_split(config, config.horizon, a.window, &end, a.batches)?;
    let mut t = Table::new(&["horizon", "window", "bridge_mean", "product_mean", "l1_gap", "l1_gap_se", "middle_occupation", "middle_occupation_se"]);
    t.push(vec![
        r.horizon.into(),
        r.window.into(),
        r.bridge_mean.into(),
        r.product_mean.into(),
        r.l1_gap.into(),
        r.l1_gap_se.into(),
        r.middle_occupation.into(),
        r.middle_occupation_se.into(),
    ]);
    Ok(t.into())
}

#[derive(Args, Debug)]
pub struct NoiseCheckArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,0.5,0.25")]
    pub lambdas: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    pub seeds: usize,
}

/// Columns: lambda, variance, se, discrete_target, continuum_target, slope, slope_se.
pub fn noise_check(config: &ExperimentConfig, a: &NoiseCheckArgs) -> Result<Outcome, Failure> {
    let d = config.dim;
    let field = config.noise(0)?;
    let r = besov_scaling_check(&field, &parabolic_bump(d), parabolic_bump_norm_sq(d), &a.lambdas, a.seeds, config.workers)?;
    let mut t = Table::new(&["lambda", "variance", "se", "discrete_target", "continuum_target", "slope", "slope_se"]);
    for row in &r.rows {
        t.push(vec![
            row.lambda.into(),
            row.variance.into(),
            row.se.into(),
            row.discrete_target.into(),
            row.continuum_target.into(),
            r.fit.slope.into(),
            r.fit.slope_se.into(),
        ]);
    }
    Ok(t.into())
}

/// Columns: constraint, detail. Empty when the configuration is valid.
pub fn violations(config: &ExperimentConfig) -> Table {
    let mut t = Table::new(&["constraint", "detail"]);
    for v in config.violations() {
        t.push(vec![Cell::from(v.constraint), Cell::from(v.detail)]);
    }
    t
}
