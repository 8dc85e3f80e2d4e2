//! Dyadic space-time tiling and the inf-over-cube discretization of the path kernel.
//!
//! A level-`n` cube has side `2^{−n}` in time and in every space direction;
//! the tiling covers `[0, 2ⁿ] × [−2ⁿ, 2ⁿ]^d` and is addressed by index only.

use crate::config::{integer_multiple, ExperimentConfig};
use crate::error::{Error, Result};
use crate::mollifier::MollifierSpec;
use crate::noise::NoiseSource;
use crate::parallel::try_par_map;
use crate::polymer::{BrownianPath, PartitionEstimate, PathLaw, RunSnapshot};
use crate::rng;
use crate::stats::summary::mean_se;
use rand::Rng;
use serde::Serialize;
use std::collections::HashMap;
use std::sync::Arc;

/// Largest supported space dimension (cube indices are stored inline).
pub const MAX_DIM: usize = 7;
/// Finest supported level.
pub const MAX_LEVEL: u32 = 14;

/// Index of one cube; unused space slots stay zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Cube {
    pub time: i32,
    pub space: [i32; MAX_DIM],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DyadicTiling {
    dim: usize,
    level: u32,
}

impl DyadicTiling {
    pub fn new(dim: usize, level: u32) -> Result<Self> {
        if !(3..=MAX_DIM).contains(&dim) {
            return Err(Error::InvalidDimension(dim));
        }
        if level > MAX_LEVEL {
            return Err(Error::InvalidLevel { level, base: MAX_LEVEL });
        }
        Ok(Self { dim, level })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn side(&self) -> f64 {
        0.5f64.powi(self.level as i32)
    }

    pub fn volume(&self) -> f64 {
        self.side().powi(self.dim as i32 + 1)
    }

    /// `2ⁿ`, the time length and half the space width of the domain.
    pub fn extent(&self) -> f64 {
        2f64.powi(self.level as i32)
    }

    /// Cubes per unit of extent along an axis: `4ⁿ` cubes span `[0, 2ⁿ]`.
    fn span(&self) -> i32 {
        1 << (2 * self.level)
    }

    pub fn cube_of(&self, s: f64, y: &[f64]) -> Cube {
        let h = self.side();
        let mut space = [0; MAX_DIM];
        for (c, &yi) in space.iter_mut().zip(y) {
            *c = (yi / h).floor() as i32;
        }
        Cube { time: (s / h).floor() as i32, space }
    }

    pub fn in_domain(&self, c: &Cube) -> bool {
        let span = self.span();
        (0..span).contains(&c.time) && c.space[..self.dim].iter().all(|&x| (-span..span).contains(&x))
    }

    /// Time interval and space box of a cube.
    pub fn bounds(&self, c: &Cube) -> (f64, f64, Vec<f64>, Vec<f64>) {
        let h = self.side();
        let lo: Vec<f64> = c.space[..self.dim].iter().map(|&x| x as f64 * h).collect();
        let hi = lo.iter().map(|v| v + h).collect();
        (c.time as f64 * h, (c.time + 1) as f64 * h, lo, hi)
    }

    pub fn center(&self, c: &Cube) -> (f64, Vec<f64>) {
        let h = self.side();
        ((c.time as f64 + 0.5) * h, c.space[..self.dim].iter().map(|&x| (x as f64 + 0.5) * h).collect())
    }

    /// The `2^{d+1}` cubes of the next level inside `c`.
    pub fn children(&self, c: &Cube) -> Vec<Cube> {
        let d = self.dim;
        (0..1usize << (d + 1))
            .map(|bits| {
                let mut child = Cube { time: 2 * c.time + (bits & 1) as i32, space: [0; MAX_DIM] };
                for i in 0..d {
                    child.space[i] = 2 * c.space[i] + ((bits >> (i + 1)) & 1) as i32;
                }
                child
            })
            .collect()
    }

    /// Cube of the previous level containing `c`.
    pub fn parent(c: &Cube) -> Cube {
        let mut space = c.space;
        space.iter_mut().for_each(|x| *x >>= 1);
        Cube { time: c.time >> 1, space }
    }
}

/// `φ(W_s − y)` on the linearly interpolated path.
pub fn phi_w(path: &BrownianPath, phi: &MollifierSpec, s: f64, y: &[f64]) -> f64 {
    let mut w = vec![0.0; path.dim()];
    path.interpolate(s, &mut w);
    phi.eval_r2(w.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// How base-level cube values are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LowerBound {
    /// Exact infimum for the piecewise linear path. `φ` is radially
    /// decreasing, so the infimum is `φ` of the largest distance from the path
    /// to a corner of the space box; along a linear segment that squared
    /// distance is convex, so its maximum is at a grid time.
    Exact,
    /// Minimum over samples at the cube center minus a Lipschitz margin that
    /// covers the half-diagonal and the path increments between samples.
    /// `subsample` samples are taken per path step.
    SampledMargin { subsample: u32 },
}

/// Per-path lower bounds of `φ(W_s − y)` over cubes at every level up to `n_base`.
#[derive(Debug, Clone)]
pub struct PathKernelLowerBound {
    dim: usize,
    n_base: u32,
    method: LowerBound,
    /// Nonzero values only, one map per level.
    levels: Vec<HashMap<Cube, f64>>,
}

impl PathKernelLowerBound {
    pub fn build(path: &BrownianPath, phi: &MollifierSpec, n_base: u32, method: LowerBound) -> Result<Self> {
        let d = path.dim();
        let tiling = DyadicTiling::new(d, n_base)?;
        let h = tiling.side();
        let per_cube = match integer_multiple(h, path.dt()) {
            Some(m) if m >= 1 => m as usize,
            _ => {
                return Err(Error::InvalidConfiguration(format!(
                    "path step {} does not divide the cube side {h}",
                    path.dt()
                )))
            }
        };
        let mut base = HashMap::new();
        let (mut lo_idx, mut hi_idx) = (vec![0i64; d], vec![0i64; d]);
        'window: for i in 0..path.steps() / per_cube {
            let (k0, k1) = (i * per_cube, (i + 1) * per_cube);
            // A cube can only be positive if it lies within ½ of every path point.
            for ax in 0..d {
                let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
                for k in k0..=k1 {
                    let v = path.position(k)[ax];
                    mn = mn.min(v);
                    mx = mx.max(v);
                }
                lo_idx[ax] = ((mx - 0.5) / h).ceil() as i64;
                hi_idx[ax] = ((mn + 0.5) / h).floor() as i64 - 1;
                if lo_idx[ax] > hi_idx[ax] {
                    continue 'window;
                }
            }
            for corner in odometer(&lo_idx, &hi_idx) {
                let mut cube = Cube { time: i as i32, space: [0; MAX_DIM] };
                for ax in 0..d {
                    cube.space[ax] = corner[ax] as i32;
                }
                if !tiling.in_domain(&cube) {
                    continue;
                }
                let v = match method {
                    LowerBound::Exact => exact_inf(path, phi, &tiling, &cube, k0, k1),
                    LowerBound::SampledMargin { subsample } => sampled_bound(path, phi, &tiling, &cube, subsample.max(1)),
                };
                if v > 0.0 {
                    base.insert(cube, v);
                }
            }
        }
        let mut levels = vec![HashMap::new(); n_base as usize + 1];
        levels[n_base as usize] = base;
        let full = 1u32 << (d + 1);
        for n in (0..n_base).rev() {
            let coarse = DyadicTiling::new(d, n)?;
            let mut acc: HashMap<Cube, (u32, f64)> = HashMap::new();
            for (c, &v) in &levels[n as usize + 1] {
                let e = acc.entry(DyadicTiling::parent(c)).or_insert((0, f64::INFINITY));
                e.0 += 1;
                e.1 = e.1.min(v);
            }
            levels[n as usize] =
                acc.into_iter().filter(|(c, (count, _))| *count == full && coarse.in_domain(c)).map(|(c, (_, v))| (c, v)).collect();
        }
        Ok(Self { dim: d, n_base, method, levels })
    }

    pub fn n_base(&self) -> u32 {
        self.n_base
    }

    pub fn method(&self) -> LowerBound {
        self.method
    }

    fn level_map(&self, level: u32) -> Result<&HashMap<Cube, f64>> {
        self.levels.get(level as usize).ok_or(Error::InvalidLevel { level, base: self.n_base })
    }

    pub fn value(&self, level: u32, cube: &Cube) -> Result<f64> {
        Ok(self.level_map(level)?.get(cube).copied().unwrap_or(0.0))
    }

    /// `φ_W^{(n)}(s, y)`.
    pub fn value_at(&self, level: u32, s: f64, y: &[f64]) -> Result<f64> {
        let tiling = DyadicTiling::new(self.dim, level)?;
        self.value(level, &tiling.cube_of(s, y))
    }

    /// Cubes with a nonzero value at `level`.
    pub fn support(&self, level: u32) -> Result<impl Iterator<Item = (&Cube, &f64)>> {
        Ok(self.level_map(level)?.iter())
    }

    pub fn support_size(&self, level: u32) -> Result<usize> {
        Ok(self.level_map(level)?.len())
    }
}

/// All integer points of the box `lo..=hi`, last axis fastest.
fn odometer<'a>(lo: &'a [i64], hi: &'a [i64]) -> impl Iterator<Item = Vec<i64>> + 'a {
    let mut next = (lo.iter().zip(hi).all(|(a, b)| a <= b)).then(|| lo.to_vec());
    std::iter::from_fn(move || {
        let current = next.take()?;
        let mut step = current.clone();
        for ax in (0..step.len()).rev() {
            step[ax] += 1;
            if step[ax] <= hi[ax] {
                next = Some(step);
                break;
            }
            step[ax] = lo[ax];
        }
        Some(current)
    })
}

fn exact_inf(path: &BrownianPath, phi: &MollifierSpec, tiling: &DyadicTiling, cube: &Cube, k0: usize, k1: usize) -> f64 {
    let h = tiling.side();
    let mut far = 0.0f64;
    for k in k0..=k1 {
        let w = path.position(k);
        let mut r2 = 0.0;
        for (ax, &wi) in w.iter().enumerate() {
            let lo = cube.space[ax] as f64 * h;
            let m = (wi - lo).abs().max((wi - lo - h).abs());
            r2 += m * m;
        }
        far = far.max(r2);
        if far >= 0.25 {
            return 0.0;
        }
    }
    phi.eval_r2(far)
}

fn sampled_bound(path: &BrownianPath, phi: &MollifierSpec, tiling: &DyadicTiling, cube: &Cube, subsample: u32) -> f64 {
    let d = path.dim();
    let (s0, s1, _, _) = tiling.bounds(cube);
    let (_, centre) = tiling.center(cube);
    let count = ((s1 - s0) / path.dt()).round() as usize * subsample as usize;
    let mut w = vec![0.0; d];
    let mut prev = vec![0.0; d];
    let (mut low, mut step) = (f64::INFINITY, 0.0f64);
    for m in 0..=count {
        path.interpolate(s0 + (s1 - s0) * m as f64 / count as f64, &mut w);
        low = low.min(phi.eval_r2(w.iter().zip(&centre).map(|(a, b)| (a - b) * (a - b)).sum()));
        if m > 0 {
            step = step.max(w.iter().zip(&prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        }
        prev.copy_from_slice(&w);
    }
    let half_diagonal = 0.5 * tiling.side() * (d as f64).sqrt();
    (low - phi.lipschitz() * (half_diagonal + step)).max(0.0)
}

/// The noise pairing of `φ_W^{(n)}` written two ways.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairingForms {
    /// `2^{−(d+1)n/2} Σ_R φ^{(n)}(R) ξ_n(R)` with unit-variance cube Gaussians.
    pub by_cubes: f64,
    /// `Σ_cells δ a^d φ^{(n)}(cell) ξ(cell)`, summed slab by slab.
    pub by_cells: f64,
    /// `½ Σ_R φ^{(n)}(R)² |R|`, the exact conditional log-moment at unit β.
    pub half_norm_sq: f64,
}

/// One level of the L² gap between the partition function and its discretization.
#[derive(Debug, Clone, Serialize)]
pub struct GapEstimate {
    pub level: u32,
    pub gap: f64,
    pub se: f64,
    /// Means of the three paired-path exponentials; the middle one symmetrized.
    pub full: f64,
    pub cross: f64,
    pub discrete: f64,
    pub pairs: usize,
}

/// Outcome of the pointwise check `0 ≤ φ^{(n)} ≤ φ^{(n+1)} ≤ φ_W`.
#[derive(Debug, Clone, Serialize)]
pub struct SandwichReport {
    pub checked: usize,
    pub violations: usize,
    /// Fraction of checks where the finer value was positive.
    pub nonzero_fraction: f64,
}

/// Monte Carlo over paths for the tiled discretization.
#[derive(Debug, Clone)]
pub struct TilingSampler {
    phi: Arc<MollifierSpec>,
    pub dim: usize,
    pub beta: f64,
    pub dt: f64,
    pub dx: f64,
    pub samples: usize,
    pub path_seed: u64,
    pub point_seed: u64,
    pub workers: usize,
    pub n_base: u32,
    pub method: LowerBound,
}

impl TilingSampler {
    /// Noise cells `(δ, a)` must nest in the base cubes.
    pub fn new(config: &ExperimentConfig, n_base: u32) -> Result<Self> {
        config.validate()?;
        let h = DyadicTiling::new(config.dim, n_base)?.side();
        for (what, v) in [("dt", config.dt), ("dx", config.dx)] {
            if !matches!(integer_multiple(h, v), Some(m) if m >= 1) {
                return Err(Error::InvalidConfiguration(format!(
                    "{what} = {v} does not divide the level-{n_base} cube side {h}"
                )));
            }
        }
        Ok(Self {
            phi: Arc::new(MollifierSpec::new(config.dim)?),
            dim: config.dim,
            beta: config.beta,
            dt: config.dt,
            dx: config.dx,
            samples: config.samples,
            path_seed: config.path_seed(0),
            point_seed: rng::derive_seed(config.seed, rng::tag::POINT, 0),
            workers: config.workers,
            n_base,
            method: LowerBound::Exact,
        })
    }

    pub fn with_method(mut self, method: LowerBound) -> Self {
        self.method = method;
        self
    }

    pub fn with_samples(mut self, samples: usize) -> Self {
        self.samples = samples;
        self
    }

    pub fn mollifier(&self) -> &MollifierSpec {
        &self.phi
    }

    fn steps(&self, horizon: f64) -> Result<usize> {
        match integer_multiple(horizon, self.dt) {
            Some(n) if n > 0 => Ok(n as usize),
            _ => Err(Error::InvalidConfiguration(format!("horizon {horizon} is not a multiple of dt = {}", self.dt))),
        }
    }

    /// Path `index`, started at the origin.
    pub fn path(&self, index: u64, horizon: f64) -> Result<BrownianPath> {
        let mut stream = rng::sample_stream(self.path_seed, rng::tag::PATH, index);
        Ok(BrownianPath::sample(self.dim, self.dt, self.steps(horizon)?, &vec![0.0; self.dim], &mut stream))
    }

    pub fn bound(&self, path: &BrownianPath) -> Result<PathKernelLowerBound> {
        PathKernelLowerBound::build(path, &self.phi, self.n_base, self.method)
    }

    fn check_level(&self, level: u32) -> Result<DyadicTiling> {
        if level > self.n_base {
            return Err(Error::InvalidLevel { level, base: self.n_base });
        }
        DyadicTiling::new(self.dim, level)
    }

    /// Noise pairing of the level-`level` kernel at unit β.
    pub fn pairing<S: NoiseSource + ?Sized>(&self, bound: &PathKernelLowerBound, field: &S, level: u32) -> Result<PairingForms> {
        let tiling = self.check_level(level)?;
        if field.dim() != self.dim || !close(field.dt(), self.dt) || !close(field.dx(), self.dx) {
            return Err(Error::InvalidConfiguration("noise cells differ from the sampler's cells".into()));
        }
        let d = self.dim;
        let h = tiling.side();
        let (kt, kx) = ((h / self.dt).round() as i64, (h / self.dx).round() as i64);
        let vol = self.dt * self.dx.powi(d as i32);
        let rows = (kx as usize).pow(d as u32 - 1);
        let mut heads = Vec::with_capacity(rows * (d - 1));
        let mut buf = vec![0.0; rows * kx as usize];
        let lens = vec![kx as u32; rows];
        let mut cubes: Vec<(&Cube, &f64)> = bound.support(level)?.collect();
        cubes.sort_by_key(|(c, _)| (c.time, c.space));

        // Cube form: one unit Gaussian per cube.
        let (mut by_cubes, mut half_norm_sq) = (0.0, 0.0);
        // Cell form: accumulate per slab across cubes.
        let mut slab_sums: std::collections::BTreeMap<i64, f64> = std::collections::BTreeMap::new();
        for (c, &v) in cubes {
            heads.clear();
            let mut starts = Vec::with_capacity(rows);
            let mut idx = vec![0i64; d - 1];
            for _ in 0..rows {
                for ax in 0..d - 1 {
                    heads.push(c.space[ax] as i64 * kx + idx[ax]);
                }
                starts.push(c.space[d - 1] as i64 * kx);
                for ax in (0..d - 1).rev() {
                    idx[ax] += 1;
                    if idx[ax] < kx {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
            let mut xi_cube = 0.0;
            for k in c.time as i64 * kt..(c.time as i64 + 1) * kt {
                field.fill_rows(k, &heads, &starts, &lens, &mut buf);
                let s: f64 = buf.iter().sum();
                xi_cube += vol * s;
                *slab_sums.entry(k).or_insert(0.0) += v * vol * s;
            }
            let xi_unit = xi_cube / tiling.volume().sqrt();
            by_cubes += v * xi_unit;
            half_norm_sq += 0.5 * v * v * tiling.volume();
        }
        by_cubes *= tiling.volume().sqrt();
        let by_cells = slab_sums.values().sum();
        Ok(PairingForms { by_cubes, by_cells, half_norm_sq })
    }

    pub fn log_weights<S: NoiseSource + ?Sized>(&self, field: &S, level: u32, horizon: f64) -> Result<Vec<f64>> {
        self.check_level(level)?;
        let beta = self.beta;
        try_par_map(self.workers, self.samples, |i| {
            if beta == 0.0 {
                return Ok(0.0);
            }
            let path = self.path(i as u64, horizon)?;
            let bound = self.bound(&path)?;
            let p = self.pairing(&bound, field, level)?;
            Ok(beta * p.by_cubes - beta * beta * p.half_norm_sq)
        })
    }

    pub fn estimate<S: NoiseSource + ?Sized>(&self, field: &S, level: u32, horizon: f64) -> Result<PartitionEstimate> {
        let lw = self.log_weights(field, level, horizon)?;
        let setup = RunSnapshot {
            dim: self.dim,
            beta: self.beta,
            dt: self.dt,
            dx: self.dx,
            horizon,
            samples: self.samples,
            path_seed: self.path_seed,
            start: vec![0.0; self.dim],
            first_slab: 0,
            law: PathLaw::Free,
        };
        PartitionEstimate::from_log_weights(lw, setup, false)
    }

    /// L² gap at each level from `pairs` independent path pairs, reused
    /// across levels.
    ///
    /// Inner products are cell sums `δ a^d Σ f g`, matching the pairing of the
    /// estimators, and the exponent is `β²⟨f, g⟩`: the covariance of two
    /// pairings against the same noise.
    pub fn l2_gap(&self, levels: &[u32], horizon: f64, pairs: usize) -> Result<Vec<GapEstimate>> {
        for &n in levels {
            self.check_level(n)?;
        }
        let b2 = self.beta * self.beta;
        let rows = try_par_map(self.workers, pairs, |p| {
            let (w1, w2) = (self.path(2 * p as u64, horizon)?, self.path(2 * p as u64 + 1, horizon)?);
            let (g1, g2) = (self.bound(&w1)?, self.bound(&w2)?);
            let ip = self.inner_products(&w1, &w2, &g1, &g2, levels)?;
            Ok::<_, Error>(
                ip.iter()
                    .map(|&(a, x1, x2, c)| {
                        let (ea, ec) = ((b2 * a).exp(), (b2 * c).exp());
                        let cross = 0.5 * ((b2 * x1).exp() + (b2 * x2).exp());
                        [ea - 2.0 * cross + ec, ea, cross, ec]
                    })
                    .collect::<Vec<_>>(),
            )
        })?;
        Ok(levels
            .iter()
            .enumerate()
            .map(|(l, &level)| {
                let col = |c: usize| rows.iter().map(|r| r[l][c]).collect::<Vec<f64>>();
                let (gap, se) = mean_se(&col(0));
                GapEstimate {
                    level,
                    gap,
                    se,
                    full: mean_se(&col(1)).0,
                    cross: mean_se(&col(2)).0,
                    discrete: mean_se(&col(3)).0,
                    pairs,
                }
            })
            .collect())
    }

    /// `(⟨f1,f2⟩, ⟨g1,f2⟩, ⟨f1,g2⟩, ⟨g1,g2⟩)` per level, `g` the level kernels.
    fn inner_products(
        &self,
        w1: &BrownianPath,
        w2: &BrownianPath,
        g1: &PathKernelLowerBound,
        g2: &PathKernelLowerBound,
        levels: &[u32],
    ) -> Result<Vec<(f64, f64, f64, f64)>> {
        let d = self.dim;
        let a = self.dx;
        let tilings: Vec<DyadicTiling> = levels.iter().map(|&n| DyadicTiling::new(d, n)).collect::<Result<_>>()?;
        let mut out = vec![(0.0, 0.0, 0.0, 0.0); levels.len()];
        let mut full = 0.0;
        let (mut lo, mut hi, mut j, mut y) = (vec![0i64; d], vec![0i64; d], vec![0i64; d], vec![0.0; d]);
        for k in 0..w1.steps() {
            let (p1, p2) = (w1.position(k), w2.position(k));
            if p1.iter().zip(p2).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() >= 1.0 {
                continue;
            }
            for ax in 0..d {
                lo[ax] = ((p1[ax] - 0.5) / a - 0.5).ceil() as i64;
                hi[ax] = ((p1[ax] + 0.5) / a - 0.5).floor() as i64;
            }
            j.copy_from_slice(&lo);
            'cells: loop {
                for ax in 0..d {
                    y[ax] = (j[ax] as f64 + 0.5) * a;
                }
                let f1 = self.phi.eval_r2(p1.iter().zip(&y).map(|(u, v)| (u - v) * (u - v)).sum());
                let f2 = if f1 > 0.0 { self.phi.eval_r2(p2.iter().zip(&y).map(|(u, v)| (u - v) * (u - v)).sum()) } else { 0.0 };
                if f2 > 0.0 {
                    full += f1 * f2;
                    let s = k as f64 * self.dt;
                    for (l, (&n, t)) in levels.iter().zip(&tilings).enumerate() {
                        // The slab's left time and the cell center lie in one closed cube.
                        let c = t.cube_of(s, &y);
                        let (v1, v2) = (g1.value(n, &c)?, g2.value(n, &c)?);
                        out[l].1 += v1 * f2;
                        out[l].2 += f1 * v2;
                        out[l].3 += v1 * v2;
                    }
                }
                for ax in (0..d).rev() {
                    j[ax] += 1;
                    if j[ax] <= hi[ax] {
                        continue 'cells;
                    }
                    j[ax] = lo[ax];
                }
                break;
            }
        }
        let vol = self.dt * a.powi(d as i32);
        Ok(out.into_iter().map(|(_, x1, x2, c)| (vol * full, vol * x1, vol * x2, vol * c)).collect())
    }

    /// Checks the sandwich at `points_per_path` random points near each of
    /// `paths` paths, at every level below the base.
    pub fn sandwich(&self, horizon: f64, paths: usize, points_per_path: usize) -> Result<SandwichReport> {
        let d = self.dim;
        let rows = try_par_map(self.workers, paths, |p| {
            let path = self.path(p as u64, horizon)?;
            let bound = self.bound(&path)?;
            let h = DyadicTiling::new(d, self.n_base)?.side();
            let span = (path.horizon() / h).floor() * h;
            let mut stream = rng::sample_stream(self.point_seed, rng::tag::POINT, p as u64);
            let (mut checked, mut bad, mut nonzero) = (0usize, 0usize, 0usize);
            let mut w = vec![0.0; d];
            let mut y = vec![0.0; d];
            for _ in 0..points_per_path {
                let s = stream.random::<f64>() * span;
                path.interpolate(s, &mut w);
                loop {
                    for ax in 0..d {
                        y[ax] = stream.random::<f64>() - 0.5;
                    }
                    if y.iter().map(|v| v * v).sum::<f64>() < 0.25 {
                        break;
                    }
                }
                y.iter_mut().zip(&w).for_each(|(yi, wi)| *yi += wi);
                let top = phi_w(&path, &self.phi, s, &y);
                let mut prev = 0.0;
                for n in 0..=self.n_base {
                    let v = bound.value_at(n, s, &y)?;
                    checked += 1;
                    if !(v >= prev && v <= top) {
                        bad += 1;
                    }
                    if v > 0.0 {
                        nonzero += 1;
                    }
                    prev = v;
                }
            }
            Ok::<_, Error>((checked, bad, nonzero))
        })?;
        let checked = rows.iter().map(|r| r.0).sum();
        let nonzero: usize = rows.iter().map(|r| r.2).sum();
        Ok(SandwichReport {
            checked,
            violations: rows.iter().map(|r| r.1).sum(),
            nonzero_fraction: nonzero as f64 / checked as f64,
        })
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// Monte Carlo estimate of the level-`level` discretized partition function.
pub fn discrete_partition<S: NoiseSource + ?Sized>(
    config: &ExperimentConfig,
    field: &S,
    level: u32,
    horizon: f64,
) -> Result<PartitionEstimate> {
    TilingSampler::new(config, level)?.estimate(field, level, horizon)
}

/// L² gap at one level.
pub fn l2_gap(config: &ExperimentConfig, level: u32, horizon: f64, pairs: usize) -> Result<GapEstimate> {
    let mut v = TilingSampler::new(config, level)?.l2_gap(&[level], horizon, pairs)?;
    Ok(v.remove(0))
}
