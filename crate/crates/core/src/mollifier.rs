//! The bump mollifier, its self-convolution, and the heat semigroup.

use crate::error::{Error, Result};
use crate::quad;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

/// Identifier of the radial profile, used to key on-disk tables.
pub const PROFILE_ID: &str = "bump:exp(-1/(1-4r^2))";

/// Default radial step of the covariance table.
pub const DEFAULT_STEP: f64 = 1e-3;

#[inline(always)]
fn bump(r2: f64) -> f64 {
    let s = 1.0 - 4.0 * r2;
    if s <= 0.0 {
        0.0
    } else {
        (-1.0 / s).exp()
    }
}

/// Normalized bump supported in the ball of radius 1/2.
#[derive(Debug, Clone)]
pub struct MollifierSpec {
    dim: usize,
    c_norm: f64,
    lipschitz: f64,
    // φ against r² on [0, 1/4], for inner loops.
    square_table: Vec<f64>,
}

const SQUARE_TABLE_LEN: usize = 1 << 15;

impl MollifierSpec {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 3 {
            return Err(Error::InvalidDimension(dim));
        }
        let radial = quad::integrate(|r| r.powi(dim as i32 - 1) * bump(r * r), 0.0, 0.5, 16, 24);
        let c_norm = 1.0 / (quad::sphere_area(dim) * radial);
        // Slope of the profile peaks well inside the support; scan it densely.
        let n = 200_000;
        let lipschitz = (0..n)
            .map(|i| {
                let r = 0.5 * i as f64 / n as f64;
                let s = 1.0 - 4.0 * r * r;
                if s <= 0.0 {
                    0.0
                } else {
                    c_norm * bump(r * r) * 8.0 * r / (s * s)
                }
            })
            .fold(0.0, f64::max);
        let square_table = (0..=SQUARE_TABLE_LEN)
            .map(|i| c_norm * bump(0.25 * i as f64 / SQUARE_TABLE_LEN as f64))
            .collect();
        Ok(Self { dim, c_norm, lipschitz: lipschitz * (1.0 + 1e-6), square_table })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn c_norm(&self) -> f64 {
        self.c_norm
    }

    /// Upper bound on |∇φ|.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn peak(&self) -> f64 {
        self.c_norm * (-1.0f64).exp()
    }

    #[inline(always)]
    pub fn radial(&self, r: f64) -> f64 {
        self.c_norm * bump(r * r)
    }

    /// φ evaluated from the squared radius.
    #[inline(always)]
    pub fn eval_r2(&self, r2: f64) -> f64 {
        self.c_norm * bump(r2)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_r2(x.iter().map(|v| v * v).sum())
    }

    /// φ from the squared radius by linear interpolation in r²; absolute error
    /// below 1e-7. Used where the same values feed both an action and its
    /// compensator, so exactness of the compensator is unaffected.
    #[inline(always)]
    pub fn eval_r2_tabulated(&self, r2: f64) -> f64 {
        let u = r2 * (4.0 * SQUARE_TABLE_LEN as f64);
        let i = u as usize;
        if i >= SQUARE_TABLE_LEN {
            return 0.0;
        }
        let f = u - i as f64;
        let t = &self.square_table;
        t[i] + f * (t[i + 1] - t[i])
    }

    /// ∫φ² by one-dimensional radial quadrature.
    pub fn square_integral(&self) -> f64 {
        let d = self.dim as i32;
        quad::sphere_area(self.dim)
            * quad::integrate(|r| r.powi(d - 1) * self.radial(r).powi(2), 0.0, 0.5, 16, 24)
    }
}

pub fn phi_eval(spec: &MollifierSpec, x: &[f64]) -> f64 {
    spec.eval(x)
}

/// Radial table of V = φ⋆φ on [0, 1].
#[derive(Debug, Clone)]
pub struct CovarianceKernel {
    dim: usize,
    step: f64,
    inv_step: f64,
    table: Vec<f64>,
    lipschitz: f64,
}

fn convolve_radial(spec: &MollifierSpec, r: f64, nodes: usize) -> f64 {
    // Axis along the separation; the transverse part is a (d-1)-dim radial integral.
    let d = spec.dim;
    let transverse_area = quad::sphere_area(d - 1);
    let lo = r - 0.5;
    if lo >= 0.5 {
        return 0.0;
    }
    quad::legendre(nodes, lo, 0.5)
        .iter()
        .map(|&(y1, w1)| {
            let a2 = y1 * y1;
            let b2 = (y1 - r) * (y1 - r);
            let rho2_max = 0.25 - a2.max(b2);
            if rho2_max <= 0.0 {
                return 0.0;
            }
            let inner: f64 = quad::legendre(nodes, 0.0, rho2_max.sqrt())
                .iter()
                .map(|&(rho, w2)| {
                    let p2 = rho * rho;
                    w2 * rho.powi(d as i32 - 2) * spec.eval_r2(a2 + p2) * spec.eval_r2(b2 + p2)
                })
                .sum();
            w1 * transverse_area * inner
        })
        .sum()
}

impl CovarianceKernel {
    pub fn build(spec: &MollifierSpec) -> Self {
        Self::with_step(spec, DEFAULT_STEP)
    }

    pub fn with_step(spec: &MollifierSpec, step: f64) -> Self {
        let n = (1.0 / step).round() as usize;
        let table: Vec<f64> = (0..=n)
            .map(|i| if i == n { 0.0 } else { convolve_radial(spec, i as f64 * step, 64) })
            .collect();
        Self::from_table(spec.dim, step, table)
    }

    fn from_table(dim: usize, step: f64, table: Vec<f64>) -> Self {
        let lipschitz = table
            .windows(2)
            .map(|w| (w[1] - w[0]).abs() / step)
            .fold(0.0, f64::max);
        Self { dim, step, inv_step: 1.0 / step, table, lipschitz }
    }

    /// Process-wide kernel for a dimension at the default step.
    pub fn shared(dim: usize) -> Result<Arc<CovarianceKernel>> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<CovarianceKernel>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(k) = cache.lock().expect("kernel cache poisoned").get(&dim) {
            return Ok(k.clone());
        }
        let kernel = Arc::new(Self::build(&MollifierSpec::new(dim)?));
        cache
            .lock()
            .expect("kernel cache poisoned")
            .entry(dim)
            .or_insert(kernel.clone());
        Ok(kernel)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn at_origin(&self) -> f64 {
        self.table[0]
    }

    /// Lipschitz constant of the interpolated table.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    #[inline(always)]
    pub fn eval_r(&self, r: f64) -> f64 {
        let u = r * self.inv_step;
        let i = u as usize;
        if i + 1 >= self.table.len() {
            return 0.0;
        }
        let f = u - i as f64;
        self.table[i] + f * (self.table[i + 1] - self.table[i])
    }

    #[inline(always)]
    pub fn eval_r2(&self, r2: f64) -> f64 {
        if r2 >= 1.0 {
            0.0
        } else {
            self.eval_r(r2.sqrt())
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_r2(x.iter().map(|v| v * v).sum())
    }

    /// Binary cache: magic, dimension, step, profile id, values (little endian).
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + 8 * self.table.len());
        buf.extend_from_slice(b"KPZV");
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&(PROFILE_ID.len() as u32).to_le_bytes());
        buf.extend_from_slice(PROFILE_ID.as_bytes());
        buf.extend_from_slice(&(self.table.len() as u64).to_le_bytes());
        for v in &self.table {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    /// Reads a cache file; `None` when it belongs to a different key.
    pub fn read_cache(path: &Path, dim: usize, step: f64) -> Result<Option<Self>> {
        let mut raw = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut raw)?;
        let bad = || Error::InvalidInput(format!("malformed kernel cache {}", path.display()));
        let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
            let s = raw.get(*at..*at + n).ok_or_else(bad)?;
            *at += n;
            Ok(s)
        };
        let mut at = 0;
        if take(&mut at, 4)? != b"KPZV" {
            return Err(bad());
        }
        let d = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let s = f64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
        let id_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let id = take(&mut at, id_len)?;
        if d != dim || s != step || id != PROFILE_ID.as_bytes() {
            return Ok(None);
        }
        let n = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            table.push(f64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()));
        }
        Ok(Some(Self::from_table(d, s, table)))
    }

    /// Loads the table from `dir` if a matching cache exists, otherwise builds and stores it.
    pub fn load_or_build(dir: &Path, spec: &MollifierSpec, step: f64) -> Result<Self> {
        let path = dir.join(format!("kernel-d{}-{:e}.bin", spec.dim, step));
        if path.exists() {
            if let Some(k) = Self::read_cache(&path, spec.dim, step)? {
                return Ok(k);
            }
        }
        let k = Self::with_step(spec, step);
        std::fs::create_dir_all(dir)?;
        k.write_cache(&path)?;
        Ok(k)
    }
}

pub fn v_eval(kernel: &CovarianceKernel, x: &[f64]) -> f64 {
    kernel.eval(x)
}

/// Gaussian heat kernel with variance `t` per coordinate.
pub fn heat_kernel(t: f64, x: &[f64]) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("heat kernel needs t > 0, got {t}")));
    }
    let d = x.len() as f64;
    let r2: f64 = x.iter().map(|v| v * v).sum();
    Ok((2.0 * std::f64::consts::PI * t).powf(-d / 2.0) * (-r2 / (2.0 * t)).exp())
}

pub type Profile = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Initial profile of the noiseless heat flow, observed at `time`.
#[derive(Clone)]
pub struct HeatState {
    dim: usize,
    u0: Profile,
    time: f64,
}

impl std::fmt::Debug for HeatState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "HeatState {{ dim: {}, time: {} }}", self.dim, self.time)
    }
}

impl HeatState {
    pub fn new(dim: usize, u0: Profile) -> Self {
        Self { dim, u0, time: 0.0 }
    }

    /// Profile `exp(h0)` for a log-initial condition.
    pub fn from_log(dim: usize, h0: Profile) -> Self {
        Self::new(dim, Arc::new(move |y: &[f64]| h0(y).exp()))
    }

    pub fn advanced(&self, dt: f64) -> Self {
        Self { time: self.time + dt, ..self.clone() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn initial(&self, y: &[f64]) -> f64 {
        (self.u0)(y)
    }
}

fn hermite_product(state: &HeatState, t: f64, x: &[f64], n: usize) -> Result<f64> {
    let d = state.dim;
    let rule = quad::hermite(n);
    let scale = (2.0 * t).sqrt();
    let mut idx = vec![0usize; d];
    let mut y = vec![0.0; d];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for i in 0..d {
            let (z, wi) = rule[idx[i]];
            y[i] = x[i] + scale * z;
            w *= wi;
        }
        let v = (state.u0)(&y);
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidInput(format!(
                "initial profile is {v} at {y:?}; it must be finite and nonnegative"
            )));
        }
        total += w * v;
        let mut i = 0;
        loop {
            if i == d {
                return Ok(total * std::f64::consts::PI.powf(-(d as f64) / 2.0));
            }
            idx[i] += 1;
            if idx[i] < n {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
}

/// ū(s + t, x) = ∫ρ(s + t, x − y)u₀(y)dy with s the state's time, by Gauss-Hermite
/// rules of doubling order until two successive orders agree.
pub fn heat_solve(state: &HeatState, t: f64, x: &[f64]) -> Result<f64> {
    if x.len() != state.dim {
        return Err(Error::InvalidArgument(format!(
            "point has {} coordinates, state has dimension {}",
            x.len(),
            state.dim
        )));
    }
    let total_t = state.time + t;
    if !(total_t > 0.0) {
        return Err(Error::InvalidArgument(format!("heat_solve needs t > 0, got {total_t}")));
    }
    let budget = 4_000_000f64;
    let mut n = 8usize;
    let mut prev = hermite_product(state, total_t, x, n)?;
    loop {
        let next_n = n * 2;
        if (next_n as f64).powi(state.dim as i32) > budget {
            return Err(Error::InvalidInput(format!(
                "heat quadrature did not settle (last value {prev}); initial profile unbounded or unresolved"
            )));
        }
        let cur = hermite_product(state, total_t, x, next_n)?;
        if (cur - prev).abs() <= 1e-9 * cur.abs().max(1e-300) {
            return Ok(cur);
        }
        prev = cur;
        n = next_n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Independent high-precision quadrature of the d = 3 bump and its convolution.
    const C_NORM_D3: f64 = 18.136933916866612;
    const V0_D3: f64 = 3.9516037456533361;
    const V_D3: [(f64, f64); 5] = [
        (0.1, 3.65077232999),
        (0.25, 2.49296570984),
        (0.5, 0.613706338499),
        (0.75, 0.0149082672795),
        (0.9, 2.51709839294e-6),
    ];

    fn spec() -> MollifierSpec {
        MollifierSpec::new(3).unwrap()
    }

    #[test]
    fn rejects_low_dimension() {
        assert!(matches!(MollifierSpec::new(2), Err(Error::InvalidDimension(2))));
    }

    #[test]
    fn normalization_constant() {
        assert_relative_eq!(spec().c_norm(), C_NORM_D3, max_relative = 1e-9);
    }

    #[test]
    fn support_and_symmetry() {
        let s = spec();
        assert_eq!(s.eval(&[0.6, 0.0, 0.0]), 0.0);
        assert_eq!(s.eval(&[0.5, 0.0, 0.0]), 0.0);
        assert_eq!(s.eval(&[0.2, -0.1, 0.05]), s.eval(&[-0.2, 0.1, -0.05]));
        assert_relative_eq!(s.eval(&[0.0; 3]), s.peak());
        assert!(s.eval(&[0.3, 0.1, 0.0]) <= s.peak());
    }

    #[test]
    fn integrates_to_one_on_cartesian_grid() {
        let s = spec();
        let nodes = quad::legendre(80, -0.5, 0.5);
        let mut total = 0.0;
        for &(x, wx) in &nodes {
            for &(y, wy) in &nodes {
                for &(z, wz) in &nodes {
                    total += wx * wy * wz * s.eval(&[x, y, z]);
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "∫φ = {total}");
    }

    #[test]
    fn tabulated_profile_is_accurate() {
        let s = spec();
        let worst = (0..100_000)
            .map(|i| {
                let r2 = 0.2500001 * i as f64 / 100_000.0;
                (s.eval_r2(r2) - s.eval_r2_tabulated(r2)).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst < 1e-7, "{worst}");
        assert_eq!(s.eval_r2_tabulated(0.3), 0.0);
    }

    #[test]
    fn lipschitz_constant() {
        assert!((spec().lipschitz() - 28.962).abs() < 5e-3);
    }

    #[test]
    fn kernel_matches_frozen_values() {
        let k = CovarianceKernel::shared(3).unwrap();
        assert_relative_eq!(k.at_origin(), V0_D3, max_relative = 1e-7);
        for &(r, v) in &V_D3 {
            let got = k.eval(&[0.0, r, 0.0]);
            assert!((got - v).abs() < 1e-6 * V0_D3, "V({r}) = {got}, expected {v}");
        }
    }

    #[test]
    fn kernel_origin_is_square_integral() {
        let s = spec();
        let k = CovarianceKernel::shared(3).unwrap();
        assert_relative_eq!(k.at_origin(), s.square_integral(), max_relative = 1e-8);
    }

    #[test]
    fn kernel_support_and_bounds() {
        let k = CovarianceKernel::shared(3).unwrap();
        assert_eq!(k.eval(&[1.2, 0.0, 0.0]), 0.0);
        assert_eq!(k.eval(&[0.0, 0.0, 1.0]), 0.0);
        assert!(k.table().iter().all(|&v| (0.0..=k.at_origin()).contains(&v)));
        assert_eq!(k.eval(&[0.3, 0.2, 0.1]), k.eval(&[-0.3, -0.2, -0.1]));
    }

    #[test]
    fn kernel_integrates_to_one() {
        let k = CovarianceKernel::shared(3).unwrap();
        let total = 4.0 * std::f64::consts::PI * quad::integrate(|r| r * r * k.eval_r(r), 0.0, 1.0, 200, 8);
        assert!((total - 1.0).abs() < 1e-5, "∫V = {total}");
    }

    #[test]
    fn kernel_lipschitz_bounds_increments() {
        let k = CovarianceKernel::shared(3).unwrap();
        for i in 0..500 {
            let a = i as f64 / 500.0;
            let b = a + 0.0037;
            assert!((k.eval_r(a) - k.eval_r(b)).abs() <= k.lipschitz() * 0.0037 + 1e-15);
        }
    }

    #[test]
    fn kernel_cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let built = CovarianceKernel::load_or_build(dir.path(), &s, 0.01).unwrap();
        let loaded = CovarianceKernel::load_or_build(dir.path(), &s, 0.01).unwrap();
        assert_eq!(built.table(), loaded.table());
        let path = dir.path().join("kernel-d3-1e-2.bin");
        assert!(CovarianceKernel::read_cache(&path, 4, 0.01).unwrap().is_none());
    }

    #[test]
    fn heat_kernel_values() {
        assert_relative_eq!(
            heat_kernel(1.0, &[0.0; 3]).unwrap(),
            (2.0 * std::f64::consts::PI).powf(-1.5),
            max_relative = 1e-15
        );
        assert!(heat_kernel(0.0, &[0.0; 3]).is_err());
        assert!(heat_kernel(-1.0, &[0.0; 3]).is_err());
    }

    #[test]
    fn heat_kernel_normalized() {
        let nodes = quad::legendre(60, -8.0, 8.0);
        let one_d: f64 = nodes.iter().map(|&(x, w)| w * heat_kernel(0.7, &[x]).unwrap()).sum();
        assert!((one_d.powi(3) - 1.0).abs() < 1e-6);
        let mut total = 0.0;
        for &(x, wx) in &nodes {
            for &(y, wy) in &nodes {
                for &(z, wz) in &nodes {
                    total += wx * wy * wz * heat_kernel(0.7, &[x, y, z]).unwrap();
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn heat_kernel_semigroup_by_convolution() {
        let (s, t) = (0.3, 0.5);
        let x = [0.4, -0.2, 0.1];
        let nodes = quad::legendre(48, -6.0, 6.0);
        let mut conv = 0.0;
        for &(a, wa) in &nodes {
            for &(b, wb) in &nodes {
                for &(c, wc) in &nodes {
                    let y = [a, b, c];
                    let d = [x[0] - a, x[1] - b, x[2] - c];
                    conv += wa * wb * wc * heat_kernel(s, &y).unwrap() * heat_kernel(t, &d).unwrap();
                }
            }
        }
        assert!((conv - heat_kernel(s + t, &x).unwrap()).abs() < 1e-5);
    }

    #[test]
    fn heat_solve_constant_is_invariant() {
        let st = HeatState::new(3, Arc::new(|_: &[f64]| 1.0));
        for &t in &[0.01, 1.0, 30.0] {
            assert_relative_eq!(heat_solve(&st, t, &[0.3, 1.0, -2.0]).unwrap(), 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn heat_solve_semigroup() {
        let st = HeatState::new(3, Arc::new(|y: &[f64]| heat_kernel(0.5, y).unwrap()));
        let x = [0.2, 0.0, -0.4];
        let got = heat_solve(&st, 0.5, &x).unwrap();
        assert_relative_eq!(got, heat_kernel(1.0, &x).unwrap(), max_relative = 1e-6);
    }

    #[test]
    fn heat_solve_gaussian_bump() {
        // exp(-|y|^2) at t = 1, x = 0 is 3^{-3/2}.
        let st = HeatState::new(3, Arc::new(|y: &[f64]| (-y.iter().map(|v| v * v).sum::<f64>()).exp()));
        assert_relative_eq!(heat_solve(&st, 1.0, &[0.0; 3]).unwrap(), 0.19245008972987526, max_relative = 1e-8);
        let later = st.advanced(0.5);
        assert_relative_eq!(
            heat_solve(&later, 0.5, &[0.0; 3]).unwrap(),
            heat_solve(&st, 1.0, &[0.0; 3]).unwrap(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn heat_solve_is_monotone() {
        let small = HeatState::new(3, Arc::new(|y: &[f64]| 1.0 + (-y[0] * y[0]).exp()));
        let large = HeatState::new(3, Arc::new(|y: &[f64]| 1.5 + (-y[0] * y[0]).exp()));
        let x = [0.1, 0.2, 0.3];
        assert!(heat_solve(&small, 0.7, &x).unwrap() < heat_solve(&large, 0.7, &x).unwrap());
    }

    #[test]
    fn heat_solve_rejects_unbounded_profile() {
        let st = HeatState::new(3, Arc::new(|y: &[f64]| (y.iter().map(|v| v * v).sum::<f64>()).exp()));
        assert!(matches!(heat_solve(&st, 1.0, &[0.0; 3]), Err(Error::InvalidInput(_))));
        let st = HeatState::new(3, Arc::new(|y: &[f64]| if y[0] > 1.0 { f64::INFINITY } else { 1.0 }));
        assert!(matches!(heat_solve(&st, 1.0, &[0.0; 3]), Err(Error::InvalidInput(_))));
    }
}
