//! Discrete space-time white noise on a cell grid.
//!
//! Cell `(k, j)` covers `[kδ, (k+1)δ) × Π[j_i a, (j_i+1) a)`; its value is the
//! cell average of the noise, a centered Gaussian of variance `1/(δ a^d)`.

use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::rng;
use crate::stats::fit::{weighted_line_fit, LineFit};
use serde::Serialize;

/// Read access to a cell-averaged noise.
pub trait NoiseSource: Sync {
    fn dim(&self) -> usize;
    /// Cell duration.
    fn dt(&self) -> f64;
    /// Cell side.
    fn dx(&self) -> f64;
    fn cell(&self, k: i64, j: &[i64]) -> f64;

    /// Values of several cells of one time slab; `js` holds `dim()` indices per cell.
    fn fill_slab(&self, k: i64, js: &[i64], out: &mut [f64]) {
        let d = self.dim();
        for (o, j) in out.iter_mut().zip(js.chunks_exact(d)) {
            *o = self.cell(k, j);
        }
    }

    /// Values of cells grouped in rows: row `r` has leading coordinates
    /// `heads[r*(d-1)..]` and last coordinate running over `starts[r]..starts[r]+lens[r]`.
    fn fill_rows(&self, k: i64, heads: &[i64], starts: &[i64], lens: &[u32], out: &mut [f64]) {
        let d = self.dim();
        let mut js = Vec::with_capacity(out.len() * d);
        for (r, (&s, &n)) in starts.iter().zip(lens).enumerate() {
            for last in s..s + n as i64 {
                js.extend_from_slice(&heads[r * (d - 1)..(r + 1) * (d - 1)]);
                js.push(last);
            }
        }
        self.fill_slab(k, &js, out);
    }

    fn cell_volume(&self) -> f64 {
        self.dt() * self.dx().powi(self.dim() as i32)
    }
}

/// Seed-addressed white noise; nothing is stored.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseField {
    seed: u64,
    dt: f64,
    dx: f64,
    dim: usize,
    #[serde(skip)]
    amplitude: f64,
}

impl NoiseField {
    pub fn new(seed: u64, dt: f64, dx: f64, dim: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite() && dx > 0.0 && dx.is_finite()) {
            return Err(Error::InvalidArgument(format!("cell sizes must be positive, got dt={dt}, dx={dx}")));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("noise dimension must be positive".into()));
        }
        let amplitude = 1.0 / (dt * dx.powi(dim as i32)).sqrt();
        Ok(Self { seed, dt, dx, dim, amplitude })
    }

    /// Same grid, different seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Standard normal behind cell `(k, j)`.
    #[inline]
    pub fn unit_cell(&self, k: i64, j: &[i64]) -> f64 {
        rng::normal_from_hash(rng::cell_hash(rng::slab_key(self.seed, k), j))
    }

    /// Per-slab handle that avoids rehashing the slab key.
    #[inline]
    pub fn slab(&self, k: i64) -> Slab {
        Slab { key: rng::slab_key(self.seed, k), amplitude: self.amplitude }
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Slab {
    key: u64,
    amplitude: f64,
}

impl Slab {
    #[inline(always)]
    pub fn cell(&self, j: &[i64]) -> f64 {
        self.amplitude * rng::normal_from_hash(rng::cell_hash(self.key, j))
    }
}

impl NoiseSource for NoiseField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn dx(&self) -> f64 {
        self.dx
    }
    #[inline]
    fn cell(&self, k: i64, j: &[i64]) -> f64 {
        self.slab(k).cell(j)
    }
    fn fill_slab(&self, k: i64, js: &[i64], out: &mut [f64]) {
        let slab = self.slab(k);
        for (o, j) in out.iter_mut().zip(js.chunks_exact(self.dim)) {
            *o = slab.cell(j);
        }
    }

    fn fill_rows(&self, k: i64, heads: &[i64], starts: &[i64], lens: &[u32], out: &mut [f64]) {
        let key = rng::slab_key(self.seed, k);
        let h = self.dim - 1;
        let mut at = 0;
        for (r, (&s, &n)) in starts.iter().zip(lens).enumerate() {
            let prefix = heads[r * h..(r + 1) * h].iter().fold(key, |acc, &ji| rng::absorb(acc, ji));
            let n = n as usize;
            for (i, o) in out[at..at + n].iter_mut().enumerate() {
                *o = self.amplitude * rng::normal_from_hash(rng::finish(prefix, s + i as i64));
            }
            at += n;
        }
    }
}

pub fn sample_cell(field: &NoiseField, k: i64, j: &[i64]) -> f64 {
    field.cell(k, j)
}

/// How the transformed noise reads the base noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TransformMode {
    /// View time runs backwards from the anchor: base point `(t − ε²s, x + εy)`.
    DiffusiveReversal,
    /// View time runs forwards: base point `(t + ε²s, x + εy)`.
    AnchoredScaling,
}

/// Diffusive rescaling about an anchor, with amplitude `ε^{(d+2)/2}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseTransform {
    pub eps: f64,
    pub time_anchor: f64,
    pub space_anchor: Vec<f64>,
    pub mode: TransformMode,
}

impl NoiseTransform {
    pub fn reversal(eps: f64, time_anchor: f64, space_anchor: Vec<f64>) -> Self {
        Self { eps, time_anchor, space_anchor, mode: TransformMode::DiffusiveReversal }
    }

    pub fn anchored(eps: f64, space_anchor: Vec<f64>) -> Self {
        Self { eps, time_anchor: 0.0, space_anchor, mode: TransformMode::AnchoredScaling }
    }

    /// Map a view point to the base point it reads.
    pub fn base_point(&self, s: f64, y: &[f64]) -> (f64, Vec<f64>) {
        let e2 = self.eps * self.eps;
        let t = match self.mode {
            TransformMode::DiffusiveReversal => self.time_anchor - e2 * s,
            TransformMode::AnchoredScaling => self.time_anchor + e2 * s,
        };
        let x = y.iter().zip(&self.space_anchor).map(|(yi, xi)| xi + self.eps * yi).collect();
        (t, x)
    }

    pub fn amplitude(&self, dim: usize) -> f64 {
        self.eps.powf((dim as f64 + 2.0) / 2.0)
    }
}

fn integral_ratio(num: f64, den: f64, what: &str) -> Result<i64> {
    let r = num / den;
    let n = r.round();
    if (r - n).abs() > 1e-9 * r.abs().max(1.0) {
        return Err(Error::InvalidConfiguration(format!("{what}: {num} is not an integer multiple of {den}")));
    }
    Ok(n as i64)
}

/// Whether `eps` is `2^{-m}` for some integer `m ≥ 0`.
pub fn is_dyadic(eps: f64) -> bool {
    if !(eps > 0.0 && eps <= 1.0) {
        return false;
    }
    let m = -eps.log2();
    (m - m.round()).abs() < 1e-12
}

/// A base noise read through a transform, on a view grid of cells `(dt, dx)`.
///
/// Each view cell is the preimage of a block of `r_t × r_x^d` base cells; its
/// value is the amplitude times the block mean, which keeps the cell-average
/// normalization exact.
#[derive(Debug, Clone)]
pub struct TransformedNoise<'a, S: NoiseSource> {
    base: &'a S,
    transform: NoiseTransform,
    dt: f64,
    dx: f64,
    time_ratio: i64,
    space_ratio: i64,
    time_origin: i64,
    space_origin: Vec<i64>,
    scale: f64,
}

impl<'a, S: NoiseSource> TransformedNoise<'a, S> {
    /// View cells are exact preimages of single base cells.
    pub fn natural(base: &'a S, transform: &NoiseTransform) -> Result<Self> {
        let e = transform.eps;
        Self::new(base, transform, base.dt() / (e * e), base.dx() / e)
    }

    pub fn new(base: &'a S, transform: &NoiseTransform, dt: f64, dx: f64) -> Result<Self> {
        let d = base.dim();
        let e = transform.eps;
        if !is_dyadic(e) {
            return Err(Error::InvalidConfiguration(format!("scale ε = {e} is not of the form 2^-m")));
        }
        if transform.space_anchor.len() != d {
            return Err(Error::InvalidConfiguration(format!(
                "space anchor has {} coordinates, noise has dimension {d}",
                transform.space_anchor.len()
            )));
        }
        let time_ratio = integral_ratio(dt * e * e, base.dt(), "view cell duration")?;
        let space_ratio = integral_ratio(dx * e, base.dx(), "view cell side")?;
        if time_ratio < 1 || space_ratio < 1 {
            return Err(Error::InvalidConfiguration("view cells finer than the base cells".into()));
        }
        let time_origin = integral_ratio(transform.time_anchor, base.dt(), "time anchor")?;
        let space_origin = transform
            .space_anchor
            .iter()
            .map(|&x| integral_ratio(x, base.dx(), "space anchor"))
            .collect::<Result<Vec<_>>>()?;
        let block = (time_ratio * space_ratio.pow(d as u32)) as f64;
        Ok(Self {
            base,
            transform: transform.clone(),
            dt,
            dx,
            time_ratio,
            space_ratio,
            time_origin,
            space_origin,
            scale: transform.amplitude(d) / block,
        })
    }

    pub fn transform(&self) -> &NoiseTransform {
        &self.transform
    }

    /// Base slab indices read by view slab `k`.
    fn base_slabs(&self, k: i64) -> std::ops::Range<i64> {
        match self.transform.mode {
            TransformMode::DiffusiveReversal => {
                let hi = self.time_origin - k * self.time_ratio;
                hi - self.time_ratio..hi
            }
            TransformMode::AnchoredScaling => {
                let lo = self.time_origin + k * self.time_ratio;
                lo..lo + self.time_ratio
            }
        }
    }

    fn block_len(&self) -> usize {
        (self.space_ratio as usize).pow(self.base.dim() as u32)
    }

    /// Appends the base spatial indices of the block under view index `j`.
    fn push_block(&self, j: &[i64], out: &mut Vec<i64>) {
        let d = j.len();
        let r = self.space_ratio;
        let corner: Vec<i64> = (0..d).map(|i| self.space_origin[i] + j[i] * r).collect();
        let mut offset = vec![0i64; d];
        for _ in 0..self.block_len() {
            for i in 0..d {
                out.push(corner[i] + offset[i]);
            }
            for o in offset.iter_mut() {
                *o += 1;
                if *o < r {
                    break;
                }
                *o = 0;
            }
        }
    }
}

impl<S: NoiseSource> NoiseSource for TransformedNoise<'_, S> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn dx(&self) -> f64 {
        self.dx
    }

    fn cell(&self, k: i64, j: &[i64]) -> f64 {
        let mut out = [0.0];
        self.fill_slab(k, j, &mut out);
        out[0]
    }

    fn fill_slab(&self, k: i64, js: &[i64], out: &mut [f64]) {
        let d = self.dim();
        let block = self.block_len();
        let mut base_js = Vec::with_capacity(js.len() * block);
        for j in js.chunks_exact(d) {
            self.push_block(j, &mut base_js);
        }
        let mut vals = vec![0.0; base_js.len() / d];
        out.iter_mut().for_each(|o| *o = 0.0);
        for kb in self.base_slabs(k) {
            self.base.fill_slab(kb, &base_js, &mut vals);
            for (o, chunk) in out.iter_mut().zip(vals.chunks_exact(block)) {
                *o += chunk.iter().sum::<f64>();
            }
        }
        out.iter_mut().for_each(|o| *o *= self.scale);
    }
}

/// Axis-aligned box `[t0, t1] × Π[lo_i, hi_i]` containing a support.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportBox {
    pub time: (f64, f64),
    pub space: Vec<(f64, f64)>,
}

type TestFn<'a> = Box<dyn Fn(f64, &[f64]) -> f64 + Send + Sync + 'a>;

/// A space-time test function, optionally with a bounded support box.
pub struct TestFunction<'a> {
    support: Option<SupportBox>,
    f: TestFn<'a>,
}

impl std::fmt::Debug for TestFunction<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TestFunction {{ support: {:?} }}", self.support)
    }
}

impl<'a> TestFunction<'a> {
    pub fn new(support: SupportBox, f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'a) -> Self {
        Self { support: Some(support), f: Box::new(f) }
    }

    /// A function without a declared support; pairing rejects it.
    pub fn unbounded(f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'a) -> Self {
        Self { support: None, f: Box::new(f) }
    }

    pub fn support(&self) -> Option<&SupportBox> {
        self.support.as_ref()
    }

    pub fn eval(&self, s: f64, y: &[f64]) -> f64 {
        (self.f)(s, y)
    }

    /// Sum of the two functions over the union of their supports.
    pub fn plus(self, other: TestFunction<'a>) -> Self {
        let support = match (&self.support, &other.support) {
            (Some(a), Some(b)) => Some(SupportBox {
                time: (a.time.0.min(b.time.0), a.time.1.max(b.time.1)),
                space: a.space.iter().zip(&b.space).map(|(p, q)| (p.0.min(q.0), p.1.max(q.1))).collect(),
            }),
            _ => None,
        };
        let (a, b) = (self.masked(), other.masked());
        Self { support, f: Box::new(move |s, y| a(s, y) + b(s, y)) }
    }

    /// The function, zero outside its support box.
    fn masked(self) -> TestFn<'a> {
        match self.support {
            None => self.f,
            Some(b) => {
                let f = self.f;
                Box::new(move |s, y| {
                    let inside = s >= b.time.0
                        && s <= b.time.1
                        && y.iter().zip(&b.space).all(|(v, r)| *v >= r.0 && *v <= r.1);
                    if inside {
                        f(s, y)
                    } else {
                        0.0
                    }
                })
            }
        }
    }

    /// The function `(s, y) ↦ f(−s, y)`.
    pub fn time_reflected(self) -> Self {
        let support = self.support.map(|b| SupportBox { time: (-b.time.1, -b.time.0), space: b.space });
        let f = self.f;
        Self { support, f: Box::new(move |s, y| f(-s, y)) }
    }

    /// Cell-center values times cell volume on the grid `(dt, dx)`.
    pub fn discretize(&self, dim: usize, dt: f64, dx: f64) -> Result<DiscreteTestFunction> {
        let b = self
            .support
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("test function has no bounded support".into()))?;
        if b.space.len() != dim {
            return Err(Error::InvalidInput(format!(
                "support box has {} spatial axes, noise has {dim}",
                b.space.len()
            )));
        }
        let all_finite = b.time.0.is_finite()
            && b.time.1.is_finite()
            && b.space.iter().all(|r| r.0.is_finite() && r.1.is_finite());
        if !all_finite {
            return Err(Error::InvalidInput("test function support is infinite".into()));
        }
        // Cells whose centers fall inside the closed box.
        let range = |lo: f64, hi: f64, h: f64| ((lo / h - 0.5).ceil() as i64, (hi / h - 0.5).floor() as i64);
        let (k0, k1) = range(b.time.0, b.time.1, dt);
        let spans: Vec<(i64, i64)> = b.space.iter().map(|&(lo, hi)| range(lo, hi, dx)).collect();
        let count = spans.iter().map(|&(a, c)| (c - a + 1).max(0) as f64).product::<f64>() * (k1 - k0 + 1).max(0) as f64;
        if count > 5e8 {
            return Err(Error::InvalidInput(format!("test function support covers {count:.3e} cells")));
        }
        let vol = dt * dx.powi(dim as i32);
        let mut slabs = Vec::new();
        let mut y = vec![0.0; dim];
        for k in k0..=k1 {
            let s = (k as f64 + 0.5) * dt;
            let mut js = Vec::new();
            let mut ws = Vec::new();
            let mut j: Vec<i64> = spans.iter().map(|r| r.0).collect();
            if spans.iter().any(|r| r.1 < r.0) {
                break;
            }
            'cells: loop {
                for i in 0..dim {
                    y[i] = (j[i] as f64 + 0.5) * dx;
                }
                let v = (self.f)(s, &y);
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!("test function is {v} at ({s}, {y:?})")));
                }
                if v != 0.0 {
                    js.extend_from_slice(&j);
                    ws.push(vol * v);
                }
                for i in 0..dim {
                    j[i] += 1;
                    if j[i] <= spans[i].1 {
                        continue 'cells;
                    }
                    j[i] = spans[i].0;
                }
                break;
            }
            if !ws.is_empty() {
                slabs.push(SlabWeights { k, js, ws });
            }
        }
        Ok(DiscreteTestFunction { dim, dt, dx, slabs })
    }
}

#[derive(Debug, Clone)]
struct SlabWeights {
    k: i64,
    js: Vec<i64>,
    ws: Vec<f64>,
}

/// A test function frozen onto a cell grid: nonzero cells and their weights.
#[derive(Debug, Clone)]
pub struct DiscreteTestFunction {
    dim: usize,
    dt: f64,
    dx: f64,
    slabs: Vec<SlabWeights>,
}

impl DiscreteTestFunction {
    pub fn cells(&self) -> usize {
        self.slabs.iter().map(|s| s.ws.len()).sum()
    }

    /// Σ w² / (cell volume): the exact variance of the pairing.
    pub fn norm_sq(&self) -> f64 {
        let vol = self.dt * self.dx.powi(self.dim as i32);
        self.slabs.iter().flat_map(|s| s.ws.iter()).map(|w| w * w).sum::<f64>() / vol
    }

    pub fn pair<S: NoiseSource + ?Sized>(&self, source: &S) -> Result<f64> {
        if source.dim() != self.dim
            || (source.dt() - self.dt).abs() > 1e-12 * self.dt
            || (source.dx() - self.dx).abs() > 1e-12 * self.dx
        {
            return Err(Error::InvalidConfiguration("test function was discretized on a different grid".into()));
        }
        let mut vals = Vec::new();
        let mut total = 0.0;
        for slab in &self.slabs {
            vals.resize(slab.ws.len(), 0.0);
            source.fill_slab(slab.k, &slab.js, &mut vals);
            total += slab.ws.iter().zip(&vals).map(|(w, v)| w * v).sum::<f64>();
        }
        Ok(total)
    }
}

/// Midpoint-rule pairing `Σ δ a^d f(center) ξ(cell)`.
pub fn pair<S: NoiseSource + ?Sized>(source: &S, f: &TestFunction) -> Result<f64> {
    f.discretize(source.dim(), source.dt(), source.dx())?.pair(source)
}

/// Pairing against the transformed noise on its natural view grid.
pub fn transform_pair(field: &NoiseField, transform: &NoiseTransform, f: &TestFunction) -> Result<f64> {
    pair(&TransformedNoise::natural(field, transform)?, f)
}

fn bump1(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - u * u)).exp()
    }
}

/// Smooth test function on `(0,1) × B(0,1)`: `b(2τ−1)·b(|x|)` with `b(u) = exp(−1/(1−u²))`.
pub fn parabolic_bump(dim: usize) -> TestFunction<'static> {
    TestFunction::new(
        SupportBox { time: (0.0, 1.0), space: vec![(-1.0, 1.0); dim] },
        |s, y| bump1(2.0 * s - 1.0) * bump1(y.iter().map(|v| v * v).sum::<f64>().sqrt()),
    )
}

/// ∫∫ of the square of [`parabolic_bump`].
pub fn parabolic_bump_norm_sq(dim: usize) -> f64 {
    let time = crate::quad::integrate(|s| bump1(2.0 * s - 1.0).powi(2), 0.0, 1.0, 16, 24);
    let space = crate::quad::sphere_area(dim)
        * crate::quad::integrate(|r| r.powi(dim as i32 - 1) * bump1(r).powi(2), 0.0, 1.0, 16, 24);
    time * space
}

/// One row of the rescaling check.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScalingRow {
    pub lambda: f64,
    pub variance: f64,
    pub se: f64,
    /// Exact variance of the discretized pairing.
    pub discrete_target: f64,
    /// `λ^{-(d+2)} ‖ψ‖²`.
    pub continuum_target: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub fit: LineFit,
    pub seeds: usize,
}

/// Monte Carlo variance of `⟨ξ, λ^{-(d+2)} ψ(−s/λ², y/λ)⟩` over independent
/// seeds, for each λ, with the log-log slope.
pub fn besov_scaling_check(
    field: &NoiseField,
    psi: &TestFunction,
    psi_norm_sq: f64,
    lambdas: &[f64],
    seeds: usize,
    workers: usize,
) -> Result<ScalingReport> {
    let d = field.dim();
    let support = psi
        .support()
        .ok_or_else(|| Error::InvalidInput("test function has no bounded support".into()))?
        .clone();
    if seeds < 2 {
        return Err(Error::InvalidArgument("need at least two seeds".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let limit = (4.0 * field.dx()).max((4.0 * field.dt()).sqrt());
        if !(lambda >= limit) {
            return Err(Error::InvalidScale { scale: lambda, limit });
        }
        let l2 = lambda * lambda;
        let amp = lambda.powi(-(d as i32 + 2));
        let scaled = TestFunction::new(
            SupportBox {
                time: (-l2 * support.time.1, -l2 * support.time.0),
                space: support.space.iter().map(|&(a, b)| (lambda * a, lambda * b)).collect(),
            },
            |s, y| {
                let z: Vec<f64> = y.iter().map(|v| v / lambda).collect();
                amp * psi.eval(-s / l2, &z)
            },
        );
        let disc = scaled.discretize(d, field.dt(), field.dx())?;
        let squares = par_map(workers, seeds, |r| {
            let f = field.reseeded(rng::derive_seed(field.seed(), rng::tag::REPLICA, r as u64));
            disc.pair(&f).map(|p| p * p)
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        let (variance, se) = crate::stats::summary::mean_se(&squares);
        rows.push(ScalingRow {
            lambda,
            variance,
            se,
            discrete_target: disc.norm_sq(),
            continuum_target: amp * amp * l2 * lambda.powi(d as i32) * psi_norm_sq,
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.lambda.ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.variance.ln()).collect();
    let s: Vec<f64> = rows.iter().map(|r| r.se / r.variance).collect();
    let fit = weighted_line_fit(&x, &y, &s)?;
    Ok(ScalingReport { rows, fit, seeds })
}
