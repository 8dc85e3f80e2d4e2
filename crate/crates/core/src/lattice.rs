//! Explicit Itô integration of the mollified stochastic heat equation on a
//! periodic lattice, and its Hopf-Cole transform.
//!
//! Site `m ∈ [−n/2, n/2)^d` sits at `m·a`. The lattice noise cell of site `m`
//! is centered on it, so the mollified noise at a site is a centered stencil
//! applied to the cell values of one time slab.

use crate::config::{integer_multiple, ExperimentConfig};
use crate::error::{Error, Result};
use crate::mollifier::{MollifierSpec, Profile};
use crate::noise::{NoiseField, NoiseSource, NoiseTransform, TransformedNoise};
use crate::parallel::try_par_map;
use crate::polymer::PolymerSampler;
use crate::rng;
use crate::stats::summary::mean_se;
use serde::Serialize;
use std::io::{Read, Write};

/// Largest mass fraction a droplet may leave in the outermost site layer.
pub const WRAP_TOLERANCE: f64 = 1e-4;

/// Parameters of one discretized equation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatticeSetup {
    pub dim: usize,
    pub spacing: f64,
    pub box_side: f64,
    pub dt: f64,
    pub eps: f64,
    pub beta: f64,
}

impl LatticeSetup {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        let l = &config.lattice;
        Self { dim: config.dim, spacing: l.spacing, box_side: l.box_side, dt: l.dt, eps: config.eps, beta: config.beta }
    }

    /// The same equation seen at mollification scale `eps`: lengths scale by
    /// `eps`, times by `eps²`, so every scale costs the same number of sites
    /// and steps per unit of rescaled time.
    pub fn rescaled(&self, eps: f64) -> Self {
        let f = eps / self.eps;
        Self { spacing: self.spacing * f, box_side: self.box_side * f, dt: self.dt * f * f, eps, ..self.clone() }
    }

    /// Sites per axis, after checking the mesh.
    pub fn sites_per_axis(&self) -> Result<usize> {
        if self.dim < 3 {
            return Err(Error::InvalidDimension(self.dim));
        }
        if !(self.spacing > 0.0 && self.dt > 0.0 && self.box_side > 0.0 && self.eps > 0.0) {
            return Err(Error::InvalidConfiguration(format!("lattice mesh must be positive: {self:?}")));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfiguration(format!("beta = {} must be finite and >= 0", self.beta)));
        }
        let n = match integer_multiple(self.box_side, self.spacing) {
            Some(n) if n > 0 && n % 2 == 0 => n as usize,
            _ => {
                return Err(Error::InvalidConfiguration(format!(
                    "box side {} is not an even multiple of the spacing {}",
                    self.box_side, self.spacing
                )))
            }
        };
        if !matches!(integer_multiple(self.eps, self.spacing), Some(m) if m >= 2) {
            return Err(Error::InvalidConfiguration(format!(
                "mollifier width {} is not a multiple (>= 2) of the spacing {}",
                self.eps, self.spacing
            )));
        }
        if self.eps > self.box_side / 2.0 {
            return Err(Error::InvalidConfiguration(format!(
                "stencil of width {} is wider than half the box {}",
                self.eps, self.box_side
            )));
        }
        let bound = self.spacing * self.spacing / (2.0 * self.dim as f64);
        if self.dt > bound * (1.0 + 1e-12) {
            return Err(Error::InvalidConfiguration(format!("dt = {} exceeds the stability bound {bound}", self.dt)));
        }
        Ok(n)
    }

    /// Noise prefactor `β ε^{(d−2)/2}`.
    pub fn coupling(&self) -> f64 {
        self.beta * self.eps.powf((self.dim as f64 - 2.0) / 2.0)
    }

    /// Itô correction `β² V(0) ε^{−2} / 2` of the KPZ form, for a given `V(0)`.
    pub fn renormalization(&self, v_origin: f64) -> f64 {
        self.beta * self.beta * v_origin / (2.0 * self.eps * self.eps)
    }

    /// Lattice noise of replica `seed`: cells of side `spacing`, slabs of length `dt`.
    pub fn field(&self, seed: u64) -> Result<NoiseField> {
        NoiseField::new(seed, self.dt, self.spacing, self.dim)
    }
}

/// Sampled mollifier on integer site offsets, normalized to unit mass.
#[derive(Debug, Clone, Serialize)]
pub struct Stencil {
    pub dim: usize,
    pub radius: usize,
    /// `dim` offsets per entry.
    pub offsets: Vec<i64>,
    pub weights: Vec<f64>,
    /// `Σ a^d φ_ε(o a)` before normalization.
    pub raw_sum: f64,
}

impl Stencil {
    pub fn new(phi: &MollifierSpec, eps: f64, spacing: f64) -> Self {
        let d = phi.dim();
        let reach = 0.5 * eps / spacing;
        let radius = (reach.ceil() as usize).saturating_sub(1);
        let r = radius as i64;
        let cell = (spacing / eps).powi(d as i32);
        let (mut offsets, mut weights) = (Vec::new(), Vec::new());
        let mut o = vec![-r; d];
        loop {
            let r2: f64 = o.iter().map(|&v| (v as f64 * spacing / eps).powi(2)).sum();
            let w = cell * phi.eval_r2(r2);
            if w > 0.0 {
                offsets.extend_from_slice(&o);
                weights.push(w);
            }
            let mut i = d;
            loop {
                if i == 0 {
                    let raw_sum: f64 = weights.iter().sum();
                    weights.iter_mut().for_each(|w| *w /= raw_sum);
                    return Self { dim: d, radius, offsets, weights, raw_sum };
                }
                i -= 1;
                o[i] += 1;
                if o[i] <= r {
                    break;
                }
                o[i] = -r;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn offset(&self, e: usize) -> &[i64] {
        &self.offsets[e * self.dim..(e + 1) * self.dim]
    }
}

/// Deterministic start of the solver.
#[derive(Clone)]
pub enum InitialCondition {
    Flat,
    /// `u = exp(h0)`.
    General(Profile),
    /// Unit mass on the site at this point.
    Droplet(Vec<f64>),
}

impl std::fmt::Debug for InitialCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Flat => write!(f, "Flat"),
            Self::General(_) => write!(f, "General(..)"),
            Self::Droplet(x) => write!(f, "Droplet({x:?})"),
        }
    }
}

impl InitialCondition {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Flat => "flat",
            Self::General(_) => "general",
            Self::Droplet(_) => "droplet",
        }
    }
}

/// Direction in which slabs are consumed.
///
/// `Reversed` integrates the backward equation from a terminal condition,
/// which is the forward-in-time polymer from a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SlabOrder {
    Forward,
    Reversed,
}

/// Solver state on the periodic box.
#[derive(Debug, Clone)]
pub struct SheGrid {
    setup: LatticeSetup,
    n: usize,
    stencil: Stencil,
    coupling: f64,
    order: SlabOrder,
    /// Time in units of `dt`.
    clock: i64,
    steps_taken: u64,
    u: Vec<f64>,
    next: Vec<f64>,
    // Per-row layout and scratch for the noise convolution.
    heads: Vec<i64>,
    starts: Vec<i64>,
    lens: Vec<u32>,
    padded_rows: Vec<usize>,
    pad_sources: Vec<usize>,
    deltas: Vec<isize>,
    neighbours: Vec<(usize, usize)>,
    raw: Vec<f64>,
    padded: Vec<f64>,
    eta: Vec<f64>,
}

impl SheGrid {
    pub fn new(setup: &LatticeSetup, initial: &InitialCondition, start_time: f64, order: SlabOrder) -> Result<Self> {
        let n = setup.sites_per_axis()?;
        let d = setup.dim;
        let clock = time_to_clock(start_time, setup.dt)?;
        let phi = MollifierSpec::new(d)?;
        let stencil = Stencil::new(&phi, setup.eps, setup.spacing);
        let r = stencil.radius;
        let np = n + 2 * r;
        let rows = n.pow(d as u32 - 1);
        let half = (n / 2) as i64;

        let (mut heads, mut padded_rows, mut neighbours) = (Vec::new(), Vec::new(), Vec::new());
        for row in 0..rows {
            let q = unflatten(row, n, d - 1);
            heads.extend(q.iter().map(|&v| v as i64 - half));
            padded_rows.push(q.iter().fold(0, |acc, &v| acc * np + v + r) * np + r);
            for i in 0..d - 1 {
                let mut up = q.clone();
                let mut down = q.clone();
                up[i] = (q[i] + 1) % n;
                down[i] = (q[i] + n - 1) % n;
                neighbours.push((flatten(&up, n), flatten(&down, n)));
            }
        }
        let pad_sources = (0..np.pow(d as u32 - 1))
            .map(|prow| unflatten(prow, np, d - 1).iter().fold(0, |acc, &v| acc * n + (v + n - r) % n))
            .collect();
        let deltas = (0..stencil.len())
            .map(|e| stencil.offset(e).iter().fold(0isize, |acc, &o| acc * np as isize + o as isize))
            .collect();

        let mut grid = Self {
            setup: setup.clone(),
            n,
            coupling: setup.coupling(),
            stencil,
            order,
            clock,
            steps_taken: 0,
            u: vec![1.0; n.pow(d as u32)],
            next: vec![0.0; n.pow(d as u32)],
            heads,
            starts: vec![-half; rows],
            lens: vec![n as u32; rows],
            padded_rows,
            pad_sources,
            deltas,
            neighbours,
            raw: vec![0.0; n.pow(d as u32)],
            padded: vec![0.0; np.pow(d as u32)],
            eta: vec![0.0; n.pow(d as u32)],
        };
        grid.initialize(initial)?;
        Ok(grid)
    }

    fn initialize(&mut self, initial: &InitialCondition) -> Result<()> {
        match initial {
            InitialCondition::Flat => self.u.iter_mut().for_each(|v| *v = 1.0),
            InitialCondition::General(h0) => {
                for s in 0..self.u.len() {
                    let v = h0(&self.position(s)).exp();
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(Error::InvalidInput(format!("exp(h0) = {v} at site {s} is not a positive finite number")));
                    }
                    self.u[s] = v;
                }
            }
            InitialCondition::Droplet(x0) => {
                let s = self.site_index(x0)?;
                self.u.iter_mut().for_each(|v| *v = 0.0);
                self.u[s] = self.setup.spacing.powi(-(self.setup.dim as i32));
            }
        }
        Ok(())
    }

    pub fn setup(&self) -> &LatticeSetup {
        &self.setup
    }

    pub fn stencil(&self) -> &Stencil {
        &self.stencil
    }

    pub fn sites_per_axis(&self) -> usize {
        self.n
    }

    pub fn time(&self) -> f64 {
        self.clock as f64 * self.setup.dt
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    pub fn values(&self) -> &[f64] {
        &self.u
    }

    /// Coordinates of site `s`.
    pub fn position(&self, s: usize) -> Vec<f64> {
        let half = (self.n / 2) as f64;
        unflatten(s, self.n, self.setup.dim).iter().map(|&q| (q as f64 - half) * self.setup.spacing).collect()
    }

    /// Flat index of the site at `x`; `x` must be a lattice point in the box.
    pub fn site_index(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.setup.dim {
            return Err(Error::InvalidArgument(format!("point has {} coordinates, lattice has {}", x.len(), self.setup.dim)));
        }
        let half = (self.n / 2) as i64;
        let mut q = Vec::with_capacity(x.len());
        for &xi in x {
            let m = (xi / self.setup.spacing).round();
            if ((xi / self.setup.spacing) - m).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("coordinate {xi} is not a lattice point")));
            }
            let m = m as i64;
            if m < -half || m >= half {
                return Err(Error::InvalidArgument(format!("coordinate {xi} lies outside the box")));
            }
            q.push((m + half) as usize);
        }
        Ok(flatten(&q, self.n))
    }

    pub fn value_at(&self, x: &[f64]) -> Result<f64> {
        Ok(self.u[self.site_index(x)?])
    }

    /// `Σ a^d u`.
    pub fn mass(&self) -> f64 {
        self.setup.spacing.powi(self.setup.dim as i32) * self.u.iter().sum::<f64>()
    }

    /// Fraction of the mass on sites with some coordinate at the box edge.
    pub fn boundary_mass_fraction(&self) -> f64 {
        let (n, d) = (self.n, self.setup.dim);
        let edge: f64 = (0..self.u.len())
            .filter(|&s| unflatten(s, n, d).iter().any(|&q| q == 0 || q == n - 1))
            .map(|s| self.u[s])
            .sum();
        edge / self.u.iter().sum::<f64>()
    }

    /// `h = log u`; fails on a nonpositive site.
    pub fn hopf_cole(&self) -> Result<Vec<f64>> {
        hopf_cole(&self.u, self.steps_taken)
    }

    /// Mollified noise of slab `k` at every site, in units of `1/dt`.
    fn mollified_slab<S: NoiseSource + ?Sized>(&mut self, field: &S, k: i64) {
        let (n, r) = (self.n, self.stencil.radius);
        field.fill_rows(k, &self.heads, &self.starts, &self.lens, &mut self.raw);
        // Periodic padding, row by row.
        let np = n + 2 * r;
        for (prow, &src_row) in self.pad_sources.iter().enumerate() {
            let src = &self.raw[src_row * n..(src_row + 1) * n];
            let dst = &mut self.padded[prow * np..(prow + 1) * np];
            dst[..r].copy_from_slice(&src[n - r..]);
            dst[r..r + n].copy_from_slice(src);
            dst[r + n..].copy_from_slice(&src[..r]);
        }
        self.eta.iter_mut().for_each(|v| *v = 0.0);
        for (&w, &delta) in self.stencil.weights.iter().zip(&self.deltas) {
            for (row, &base) in self.padded_rows.iter().enumerate() {
                let at = (base as isize + delta) as usize;
                let src = &self.padded[at..at + n];
                for (e, &x) in self.eta[row * n..(row + 1) * n].iter_mut().zip(src) {
                    *e += w * x;
                }
            }
        }
    }

    /// One explicit Euler–Maruyama step with left-point noise.
    ///
    /// On positivity loss the state is left unchanged.
    pub fn step<S: NoiseSource + ?Sized>(&mut self, field: &S) -> Result<()> {
        let (n, d) = (self.n, self.setup.dim);
        let dt = self.setup.dt;
        if field.dim() != d || !same(field.dt(), dt) || !same(field.dx(), self.setup.spacing) {
            return Err(Error::InvalidConfiguration(format!(
                "noise cells ({}, {}) do not match the lattice slab ({dt}, {})",
                field.dt(),
                field.dx(),
                self.setup.spacing
            )));
        }
        let slab = match self.order {
            SlabOrder::Forward => self.clock,
            SlabOrder::Reversed => self.clock - 1,
        };
        let noisy = self.coupling != 0.0;
        if noisy {
            self.mollified_slab(field, slab);
        }
        let diffusion = 0.5 * dt / (self.setup.spacing * self.setup.spacing);
        let kick = self.coupling * dt;
        let centre = 2.0 * d as f64;
        for row in 0..self.padded_rows.len() {
            let lo = row * n;
            let cur = &self.u[lo..lo + n];
            let out = &mut self.next[lo..lo + n];
            for m in 0..n {
                let left = cur[if m == 0 { n - 1 } else { m - 1 }];
                let right = cur[if m + 1 == n { 0 } else { m + 1 }];
                out[m] = left + right - centre * cur[m];
            }
            for i in 0..d - 1 {
                let (up, down) = self.neighbours[row * (d - 1) + i];
                let (up, down) = (&self.u[up * n..(up + 1) * n], &self.u[down * n..(down + 1) * n]);
                for m in 0..n {
                    out[m] += up[m] + down[m];
                }
            }
            if noisy {
                let eta = &self.eta[lo..lo + n];
                for m in 0..n {
                    out[m] = cur[m] + diffusion * out[m] + kick * cur[m] * eta[m];
                }
            } else {
                for m in 0..n {
                    out[m] = cur[m] + diffusion * out[m];
                }
            }
        }
        if noisy {
            if let Some(site) = self.next.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::PositivityLoss { site, step: self.steps_taken, value: self.next[site] });
            }
        }
        std::mem::swap(&mut self.u, &mut self.next);
        self.steps_taken += 1;
        self.clock += match self.order {
            SlabOrder::Forward => 1,
            SlabOrder::Reversed => -1,
        };
        Ok(())
    }

    /// Steps until the clock reads `t` (later for forward, earlier for reversed order).
    pub fn run_to<S: NoiseSource + ?Sized>(&mut self, t: f64, field: &S) -> Result<()> {
        let target = time_to_clock(t, self.setup.dt)?;
        let remaining = match self.order {
            SlabOrder::Forward => target - self.clock,
            SlabOrder::Reversed => self.clock - target,
        };
        if remaining < 0 {
            return Err(Error::InvalidArgument(format!("time {t} lies behind the solver clock {}", self.time())));
        }
        for _ in 0..remaining {
            self.step(field)?;
        }
        Ok(())
    }

    pub fn snapshot(&self, seed: u64) -> Snapshot {
        Snapshot {
            dim: self.setup.dim,
            sites_per_axis: self.n,
            spacing: self.setup.spacing,
            time: self.time(),
            seed,
            boundary_mass: self.boundary_mass_fraction(),
            u: self.u.clone(),
        }
    }
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

fn time_to_clock(t: f64, dt: f64) -> Result<i64> {
    let r = t / dt;
    let k = r.round();
    if !t.is_finite() || (r - k).abs() > 1e-9 * r.abs().max(1.0) {
        return Err(Error::InvalidArgument(format!("time {t} is not a multiple of dt = {dt}")));
    }
    Ok(k as i64)
}

fn flatten(q: &[usize], n: usize) -> usize {
    q.iter().fold(0, |acc, &v| acc * n + v)
}

fn unflatten(mut s: usize, n: usize, len: usize) -> Vec<usize> {
    let mut q = vec![0; len];
    for v in q.iter_mut().rev() {
        *v = s % n;
        s /= n;
    }
    q
}

/// Pointwise logarithm of a positive field.
pub fn hopf_cole(u: &[f64], step: u64) -> Result<Vec<f64>> {
    u.iter()
        .enumerate()
        .map(|(site, &v)| if v > 0.0 { Ok(v.ln()) } else { Err(Error::PositivityLoss { site, step, value: v }) })
        .collect()
}

/// Solver output at one time, with what is needed to trace it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub dim: usize,
    pub sites_per_axis: usize,
    pub spacing: f64,
    pub time: f64,
    pub seed: u64,
    pub boundary_mass: f64,
    pub u: Vec<f64>,
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"KPZS";

impl Snapshot {
    pub fn h(&self) -> Result<Vec<f64>> {
        hopf_cole(&self.u, 0)
    }

    /// CSV rows `site,x1..xd,u,h` under `# key=value` header lines.
    pub fn write_csv<W: Write>(&self, mut w: W, header: &[(&str, String)]) -> Result<()> {
        for (k, v) in header {
            writeln!(w, "# {k}={v}")?;
        }
        writeln!(w, "# time={}\n# seed={}\n# spacing={}", self.time, self.seed, self.spacing)?;
        let coords: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
        writeln!(w, "site,{},u,h", coords.join(","))?;
        let half = (self.sites_per_axis / 2) as f64;
        for (s, &u) in self.u.iter().enumerate() {
            let q = unflatten(s, self.sites_per_axis, self.dim);
            let x: Vec<String> = q.iter().map(|&v| format!("{}", (v as f64 - half) * self.spacing)).collect();
            writeln!(w, "{s},{},{u:e},{:e}", x.join(","), u.ln())?;
        }
        Ok(())
    }

    /// Little-endian binary: magic, dim, sites per axis, spacing, time, seed, boundary mass, values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.sites_per_axis as u64).to_le_bytes())?;
        for v in [self.spacing, self.time] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.boundary_mass.to_le_bytes())?;
        for v in &self.u {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::InvalidInput("not a lattice snapshot".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        let mut next8 = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut b8)?;
            Ok(b8)
        };
        let sites_per_axis = u64::from_le_bytes(next8(&mut r)?) as usize;
        let spacing = f64::from_le_bytes(next8(&mut r)?);
        let time = f64::from_le_bytes(next8(&mut r)?);
        let seed = u64::from_le_bytes(next8(&mut r)?);
        let boundary_mass = f64::from_le_bytes(next8(&mut r)?);
        let count = sites_per_axis
            .checked_pow(dim as u32)
            .ok_or_else(|| Error::InvalidInput("snapshot size overflows".into()))?;
        let mut u = Vec::with_capacity(count);
        for _ in 0..count {
            u.push(f64::from_le_bytes(next8(&mut r)?));
        }
        Ok(Self { dim, sites_per_axis, spacing, time, seed, boundary_mass, u })
    }
}

/// Runs from time 0 to `t` with the lattice noise of `seed`.
///
/// A droplet whose mass reaches the box edge is reported as wrap contamination.
pub fn run_to(setup: &LatticeSetup, initial: &InitialCondition, t: f64, seed: u64) -> Result<Snapshot> {
    let mut grid = SheGrid::new(setup, initial, 0.0, SlabOrder::Forward)?;
    let field = setup.field(seed)?;
    grid.run_to(t, &field)?;
    let snap = grid.snapshot(seed);
    if matches!(initial, InitialCondition::Droplet(_)) && snap.boundary_mass > WRAP_TOLERANCE {
        return Err(Error::WrapContamination(format!(
            "mass fraction {:.3e} on the box edge exceeds {WRAP_TOLERANCE:e}",
            snap.boundary_mass
        )));
    }
    Ok(snap)
}

/// One side of the lattice-versus-polymer comparison.
#[derive(Debug, Clone, Serialize)]
pub struct LawSummary {
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub replicas: usize,
}

/// Law of `u_ε(t, x)` from the lattice against the law of the polymer partition
/// function on the rescaled, time-reversed noise.
#[derive(Debug, Clone, Serialize)]
pub struct SheComparison {
    pub time: f64,
    pub point: Vec<f64>,
    pub lattice: LawSummary,
    pub polymer: LawSummary,
    /// `(lattice − polymer) / combined SE` for the variances.
    pub variance_z: f64,
}

/// Distributional comparison at a flat start.
///
/// Lattice side: every site of a run has the law of `u_ε(t, x)`, so each run
/// contributes its site averages of `u` and `(u − 1)²` (the mean is exactly 1).
/// Polymer side: per noise replica, two independent path sets give `Ẑ¹, Ẑ²` and
/// `(Ẑ¹ − 1)(Ẑ² − 1)` is unbiased for the variance of the exact partition function.
pub fn she_vs_polymer(
    config: &ExperimentConfig,
    t: f64,
    x: &[f64],
    lattice_runs: usize,
    polymer_batches: usize,
) -> Result<SheComparison> {
    config.validate()?;
    let setup = LatticeSetup::from_config(config);
    let workers = config.workers;
    let runs = try_par_map(workers, lattice_runs, |r| {
        let seed = rng::derive_seed(config.seed, rng::tag::REPLICA, r as u64);
        let mut grid = SheGrid::new(&setup, &InitialCondition::Flat, 0.0, SlabOrder::Forward)?;
        grid.run_to(t, &setup.field(seed)?)?;
        let u = grid.values();
        let k = u.len() as f64;
        Ok::<_, Error>((u.iter().sum::<f64>() / k, u.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / k))
    })?;
    let lattice = summarize(runs);

    let eps = config.eps;
    let horizon = t / (eps * eps);
    let start: Vec<f64> = x.iter().map(|v| v / eps).collect();
    let half = config.samples;
    let sampler = PolymerSampler::new(config)?.with_workers(1);
    let batches = try_par_map(workers, polymer_batches, |b| {
        let base = NoiseField::new(
            rng::derive_seed(config.seed, rng::tag::NOISE, b as u64),
            config.dt * eps * eps,
            config.dx * eps,
            config.dim,
        )?;
        let tr = NoiseTransform::reversal(eps, t, vec![0.0; config.dim]);
        let view = TransformedNoise::new(&base, &tr, config.dt, config.dx)?;
        let mut z = [0.0; 2];
        for (side, zs) in z.iter_mut().enumerate() {
            let seed = rng::derive_seed(config.seed, rng::tag::PATH, (2 * b + side) as u64);
            *zs = sampler.clone().with_path_seed(seed).with_samples(half).estimate(&view, &start, horizon)?.z;
        }
        Ok::<_, Error>((0.5 * (z[0] + z[1]), (z[0] - 1.0) * (z[1] - 1.0)))
    })?;
    let polymer = summarize(batches);
    let variance_z = (lattice.variance - polymer.variance) / lattice.variance_se.hypot(polymer.variance_se);
    Ok(SheComparison { time: t, point: x.to_vec(), lattice, polymer, variance_z })
}

fn summarize(rows: Vec<(f64, f64)>) -> LawSummary {
    let (m, v): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    let (mean, m_se) = mean_se(&m);
    let (variance, variance_se) = mean_se(&v);
    LawSummary { mean, mean_se: m_se, variance, variance_se, replicas: m.len() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mollifier::{heat_kernel, heat_solve, CovarianceKernel, HeatState};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn setup(beta: f64) -> LatticeSetup {
        LatticeSetup { dim: 3, spacing: 0.25, box_side: 4.0, dt: 1.0 / 128.0, eps: 1.0, beta }
    }

    #[test]
    fn stencil_is_normalized_and_symmetric() {
        let phi = MollifierSpec::new(3).unwrap();
        for &a in &[0.25, 0.125] {
            let s = Stencil::new(&phi, 1.0, a);
            assert_relative_eq!(s.weights.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
            for e in 0..s.len() {
                let o = s.offset(e);
                let r2: f64 = o.iter().map(|&v| (v as f64 * a).powi(2)).sum();
                assert!(r2 < 0.25);
                let mirror: Vec<i64> = o.iter().map(|v| -v).collect();
                let m = (0..s.len()).find(|&f| s.offset(f) == mirror.as_slice()).unwrap();
                assert_eq!(s.weights[e], s.weights[m]);
            }
        }
        let s = Stencil::new(&phi, 1.0, 0.25);
        assert_eq!((s.radius, s.len()), (1, 27));
        // The raw Riemann sum approaches 1 under refinement, not monotonically.
        let errs: Vec<f64> = [0.25, 0.125, 0.0625, 0.03125].iter().map(|&a| (Stencil::new(&phi, 1.0, a).raw_sum - 1.0).abs()).collect();
        assert!(errs[0] < 0.06 && errs[1] < 1e-3 && errs[2] < 1e-3 && errs[3] < 1e-5, "{errs:?}");
    }

    #[test]
    fn mesh_checks() {
        assert!(setup(0.2).sites_per_axis().is_ok());
        let bad = LatticeSetup { dt: 1.0 / 16.0, ..setup(0.2) };
        assert!(matches!(bad.sites_per_axis(), Err(Error::InvalidConfiguration(_))));
        let wide = LatticeSetup { box_side: 1.5, ..setup(0.2) };
        assert!(matches!(wide.sites_per_axis(), Err(Error::InvalidConfiguration(_))));
        let r = setup(0.2).rescaled(0.5);
        assert_eq!((r.spacing, r.box_side, r.dt), (0.125, 2.0, 1.0 / 512.0));
        assert_eq!(r.sites_per_axis().unwrap(), 16);
    }

    #[test]
    fn zero_coupling_conserves_mass() {
        let s = setup(0.0);
        let bump: Profile = Arc::new(|y: &[f64]| (-y.iter().map(|v| v * v).sum::<f64>()).exp());
        let mut g = SheGrid::new(&s, &InitialCondition::General(bump), 0.0, SlabOrder::Forward).unwrap();
        let m0 = g.mass();
        g.run_to(0.5, &s.field(1).unwrap()).unwrap();
        assert_relative_eq!(g.mass(), m0, max_relative = 1e-13);
        let flat = run_to(&s, &InitialCondition::Flat, 0.25, 3).unwrap();
        assert!(flat.u.iter().all(|&v| v == 1.0));
        assert!(flat.h().unwrap().iter().all(|&h| h == 0.0));
    }

    #[test]
    fn droplet_has_unit_mass() {
        let s = setup(0.0);
        let mut g = SheGrid::new(&s, &InitialCondition::Droplet(vec![0.25, 0.0, -0.5]), 0.0, SlabOrder::Forward).unwrap();
        assert_relative_eq!(g.mass(), 1.0, max_relative = 1e-15);
        g.run_to(0.125, &s.field(1).unwrap()).unwrap();
        assert_relative_eq!(g.mass(), 1.0, max_relative = 1e-13);
        assert!(SheGrid::new(&s, &InitialCondition::Droplet(vec![0.1, 0.0, 0.0]), 0.0, SlabOrder::Forward).is_err());
        assert!(SheGrid::new(&s, &InitialCondition::Droplet(vec![2.0, 0.0, 0.0]), 0.0, SlabOrder::Forward).is_err());
    }

    #[test]
    fn droplet_matches_heat_kernel() {
        // At a/√t = 1/8 the lattice kernel is within a percent of the Gaussian.
        let s = LatticeSetup { spacing: 0.125, box_side: 10.0, dt: 1.0 / 512.0, ..setup(0.0) };
        let snap = run_to(&s, &InitialCondition::Droplet(vec![0.0; 3]), 1.0, 0).unwrap();
        assert!(snap.boundary_mass < WRAP_TOLERANCE);
        let g = SheGrid::new(&s, &InitialCondition::Flat, 0.0, SlabOrder::Forward).unwrap();
        for x in [[0.0, 0.0, 0.0], [0.5, 0.25, 0.0], [1.0, -1.0, 0.5]] {
            let got = snap.u[g.site_index(&x).unwrap()];
            let want = heat_kernel(1.0, &x).unwrap();
            assert!((got / want - 1.0).abs() < 1e-2, "{x:?}: {got} vs {want}");
        }
    }

    #[test]
    fn small_box_flags_wrap() {
        let s = LatticeSetup { box_side: 2.0, ..setup(0.0) };
        assert!(matches!(run_to(&s, &InitialCondition::Droplet(vec![0.0; 3]), 1.0, 0), Err(Error::WrapContamination(_))));
    }

    #[test]
    fn zero_coupling_matches_heat_solver() {
        let s = LatticeSetup { spacing: 0.125, box_side: 8.0, dt: 1.0 / 512.0, ..setup(0.0) };
        let h0: Profile = Arc::new(|y: &[f64]| (1.0 + (-0.5 * y.iter().map(|v| v * v).sum::<f64>()).exp()).ln());
        let snap = run_to(&s, &InitialCondition::General(h0.clone()), 0.5, 0).unwrap();
        let g = SheGrid::new(&s, &InitialCondition::Flat, 0.0, SlabOrder::Forward).unwrap();
        let heat = HeatState::from_log(3, h0);
        for x in [[0.0, 0.0, 0.0], [0.5, -0.25, 1.0]] {
            let got = snap.u[g.site_index(&x).unwrap()];
            assert_relative_eq!(got, heat_solve(&heat, 0.5, &x).unwrap(), max_relative = 1e-3);
        }
    }

    #[test]
    fn one_step_mean_is_the_heat_step() {
        // Averaging the one-step map over many slabs leaves the heat step.
        let s = setup(0.2);
        let bump: Profile = Arc::new(|y: &[f64]| -y.iter().map(|v| v * v).sum::<f64>());
        let mut quiet = SheGrid::new(&LatticeSetup { beta: 0.0, ..s.clone() }, &InitialCondition::General(bump.clone()), 0.0, SlabOrder::Forward).unwrap();
        quiet.step(&s.field(0).unwrap()).unwrap();
        let g0 = SheGrid::new(&s, &InitialCondition::General(bump), 0.0, SlabOrder::Forward).unwrap();
        let field = s.field(7).unwrap();
        let site = g0.site_index(&[0.0; 3]).unwrap();
        let reps = 4000;
        let mut vals = Vec::with_capacity(reps);
        for k in 0..reps {
            let mut g = g0.clone();
            g.clock = k as i64;
            g.step(&field).unwrap();
            vals.push(g.values()[site]);
        }
        let (m, se) = mean_se(&vals);
        assert!((m - quiet.values()[site]).abs() < 3.0 * se, "{m} ± {se} vs {}", quiet.values()[site]);
    }

    #[test]
    fn mollified_noise_covariance() {
        let s = setup(0.2);
        let mut g = SheGrid::new(&s, &InitialCondition::Flat, 0.0, SlabOrder::Forward).unwrap();
        let field = s.field(11).unwrap();
        let v = CovarianceKernel::shared(3).unwrap();
        let (a, b, far) = (g.site_index(&[0.0; 3]).unwrap(), g.site_index(&[0.25, 0.0, 0.0]).unwrap(), g.site_index(&[1.5, 0.0, 0.0]).unwrap());
        let (mut same, mut near, mut apart) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..1000 {
            g.mollified_slab(&field, k);
            let e = &g.eta;
            same.push(e[a] * e[a] * s.dt);
            near.push(e[a] * e[b] * s.dt);
            apart.push(e[a] * e[far] * s.dt);
        }
        // Exact lattice covariance: Σ_o w_o w_{o+δ} / a^d.
        let st = g.stencil();
        let lattice_cov = |shift: [i64; 3]| {
            let mut c = 0.0;
            for e in 0..st.len() {
                for f in 0..st.len() {
                    let (oe, of) = (st.offset(e), st.offset(f));
                    if (0..3).all(|i| of[i] == oe[i] + shift[i]) {
                        c += st.weights[e] * st.weights[f];
                    }
                }
            }
            c / s.spacing.powi(3)
        };
        let (m, se) = mean_se(&same);
        assert!((m - lattice_cov([0, 0, 0])).abs() < 3.0 * se);
        // The lattice value sits near the continuum V(0).
        assert!((lattice_cov([0, 0, 0]) / v.at_origin() - 1.0).abs() < 0.3);
        let (m, se) = mean_se(&near);
        assert!((m - lattice_cov([1, 0, 0])).abs() < 3.0 * se);
        let (m, se) = mean_se(&apart);
        assert!(m.abs() < 3.0 * se);
    }

    #[test]
    fn flat_mean_is_one() {
        let s = setup(0.2);
        let vals: Vec<f64> = (0..200)
            .map(|seed| {
                let mut g = SheGrid::new(&s, &InitialCondition::Flat, 0.0, SlabOrder::Forward).unwrap();
                g.run_to(0.25, &s.field(seed).unwrap()).unwrap();
                g.value_at(&[0.0; 3]).unwrap()
            })
            .collect();
        let (m, se) = mean_se(&vals);
        assert!((m - 1.0).abs() < 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn deterministic_and_order_aware() {
        let s = setup(0.2);
        let f = s.field(5).unwrap();
        let run = |order, start, end| {
            let mut g = SheGrid::new(&s, &InitialCondition::Flat, start, order).unwrap();
            g.run_to(end, &f).unwrap();
            g.values().to_vec()
        };
        assert_eq!(run(SlabOrder::Forward, 0.0, 0.25), run(SlabOrder::Forward, 0.0, 0.25));
        assert_ne!(run(SlabOrder::Forward, 0.0, 0.25), run(SlabOrder::Reversed, 0.25, 0.0));
        let mut g = SheGrid::new(&s, &InitialCondition::Flat, 0.0, SlabOrder::Reversed).unwrap();
        assert!(g.run_to(0.25, &f).is_err());
    }

    #[test]
    fn positivity_loss_aborts() {
        let s = LatticeSetup { beta: 40.0, ..setup(0.0) };
        let mut g = SheGrid::new(&s, &InitialCondition::Flat, 0.0, SlabOrder::Forward).unwrap();
        let f = s.field(1).unwrap();
        let before = g.values().to_vec();
        let err = g.step(&f).unwrap_err();
        assert!(matches!(err, Error::PositivityLoss { step: 0, .. }));
        assert_eq!(g.values(), before.as_slice());
    }

    #[test]
    fn snapshot_round_trip() {
        let s = setup(0.2);
        let snap = run_to(&s, &InitialCondition::Flat, 1.0 / 16.0, 9).unwrap();
        let mut buf = Vec::new();
        snap.write_binary(&mut buf).unwrap();
        assert_eq!(Snapshot::read_binary(buf.as_slice()).unwrap(), snap);
        let mut csv = Vec::new();
        snap.write_csv(&mut csv, &[("config", "abc".into())]).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("# config=abc\n"));
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + snap.u.len());
    }

    #[test]
    fn comparison_at_zero_coupling() {
        let cfg = ExperimentConfig { beta: 0.0, samples: 4, horizon: 1.0, ..Default::default() };
        let c = she_vs_polymer(&cfg, 0.25, &[0.0; 3], 2, 2).unwrap();
        assert_eq!((c.lattice.mean, c.polymer.mean, c.lattice.variance, c.polymer.variance), (1.0, 1.0, 0.0, 0.0));
    }
}
