use super::path::BrownianPath;
use crate::error::{Error, Result};
use crate::mollifier::MollifierSpec;
use crate::noise::NoiseSource;
use serde::Serialize;

/// Noise action of one path and its exact conditional log-moment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FieldAction {
    pub action: f64,
    pub compensator: f64,
}

impl FieldAction {
    pub fn log_weight(&self) -> f64 {
        self.action - self.compensator
    }
}

/// Cells with centers strictly inside the support of `φ(w − ·)`, grouped in
/// rows that share all but the last coordinate.
#[derive(Debug, Default)]
pub(crate) struct NearCells {
    pub heads: Vec<i64>,
    pub starts: Vec<i64>,
    pub lens: Vec<u32>,
    pub phis: Vec<f64>,
    lo: Vec<i64>,
    len: Vec<usize>,
    d2: Vec<f64>,
    idx: Vec<usize>,
}

#[inline(always)]
fn floor_i(x: f64) -> i64 {
    let i = x as i64;
    if (i as f64) > x {
        i - 1
    } else {
        i
    }
}

#[inline(always)]
fn ceil_i(x: f64) -> i64 {
    let i = x as i64;
    if (i as f64) < x {
        i + 1
    } else {
        i
    }
}

impl NearCells {
    fn clear(&mut self) {
        self.heads.clear();
        self.starts.clear();
        self.lens.clear();
        self.phis.clear();
    }

    /// Pushes the run of last-axis cells inside the ball, given the squared
    /// distance `head` already spent on the leading axes.
    #[inline(always)]
    fn push_run(&mut self, head: f64, wl: f64, dx: f64, phi: &MollifierSpec) -> bool {
        let room = 0.25 - head;
        if room <= 0.0 {
            return false;
        }
        let half = room.sqrt();
        let mut lo = ceil_i((wl - half) / dx - 0.5);
        let mut hi = floor_i((wl + half) / dx - 0.5);
        // Guard the strict inequality against rounding at the edges.
        let r2 = |j: i64| {
            let y = (j as f64 + 0.5) * dx - wl;
            head + y * y
        };
        while lo <= hi && r2(lo) >= 0.25 {
            lo += 1;
        }
        while hi >= lo && r2(hi) >= 0.25 {
            hi -= 1;
        }
        if lo > hi {
            return false;
        }
        self.starts.push(lo);
        self.lens.push((hi - lo + 1) as u32);
        for jl in lo..=hi {
            self.phis.push(phi.eval_r2_tabulated(r2(jl)));
        }
        true
    }

    fn collect3(&mut self, w: &[f64], dx: f64, phi: &MollifierSpec) {
        self.clear();
        let (lo0, hi0) = (ceil_i((w[0] - 0.5) / dx - 0.5), floor_i((w[0] + 0.5) / dx - 0.5));
        let (lo1, hi1) = (ceil_i((w[1] - 0.5) / dx - 0.5), floor_i((w[1] + 0.5) / dx - 0.5));
        for a in lo0..=hi0 {
            let ya = (a as f64 + 0.5) * dx - w[0];
            let ha = ya * ya;
            for b in lo1..=hi1 {
                let yb = (b as f64 + 0.5) * dx - w[1];
                if self.push_run(ha + yb * yb, w[2], dx, phi) {
                    self.heads.push(a);
                    self.heads.push(b);
                }
            }
        }
    }

    pub fn collect(&mut self, w: &[f64], dx: f64, phi: &MollifierSpec) {
        let d = w.len();
        if d == 3 {
            return self.collect3(w, dx, phi);
        }
        self.clear();
        self.lo.clear();
        self.len.clear();
        self.d2.clear();
        let span_max = (1.0 / dx).ceil() as usize + 2;
        // Leading axes: tabulate squared offsets; the last axis is solved directly.
        for &wi in &w[..d - 1] {
            let lo = ((wi - 0.5) / dx - 0.5).ceil() as i64;
            let hi = ((wi + 0.5) / dx - 0.5).floor() as i64;
            let n = (hi - lo + 1).max(0) as usize;
            self.lo.push(lo);
            self.len.push(n);
            for m in 0..span_max {
                let y = (lo + m as i64) as f64 * dx + 0.5 * dx;
                self.d2.push((y - wi) * (y - wi));
            }
        }
        if self.len.contains(&0) {
            return;
        }
        let wl = w[d - 1];
        self.idx.clear();
        self.idx.resize(d - 1, 0);
        'outer: loop {
            let mut head = 0.0;
            for i in 0..d - 1 {
                head += self.d2[i * span_max + self.idx[i]];
            }
            if self.push_run(head, wl, dx, phi) {
                for i in 0..d - 1 {
                    self.heads.push(self.lo[i] + self.idx[i] as i64);
                }
            }
            for i in (0..d - 1).rev() {
                self.idx[i] += 1;
                if self.idx[i] < self.len[i] {
                    continue 'outer;
                }
                self.idx[i] = 0;
            }
            break;
        }
    }

    #[cfg(test)]
    pub fn count(&self) -> usize {
        self.phis.len()
    }

    /// Cell indices in enumeration order.
    #[cfg(test)]
    pub fn cells(&self, d: usize) -> Vec<i64> {
        let mut js = Vec::with_capacity(self.phis.len() * d);
        for (r, (&s, &n)) in self.starts.iter().zip(&self.lens).enumerate() {
            for last in s..s + n as i64 {
                js.extend_from_slice(&self.heads[r * (d - 1)..(r + 1) * (d - 1)]);
                js.push(last);
            }
        }
        js
    }
}

fn check_grid<S: NoiseSource + ?Sized>(path: &BrownianPath, source: &S) -> Result<()> {
    if path.dim() != source.dim() {
        return Err(Error::InvalidConfiguration(format!(
            "path dimension {} differs from noise dimension {}",
            path.dim(),
            source.dim()
        )));
    }
    if (path.dt() - source.dt()).abs() > 1e-12 * source.dt() {
        return Err(Error::InvalidConfiguration(format!(
            "path step {} differs from noise slab duration {}",
            path.dt(),
            source.dt()
        )));
    }
    Ok(())
}

/// Action `β Σ_k δ Σ_j a^d φ(W_{kδ} − y_j) ξ(first_slab + k, j)` and
/// compensator `(β²/2) Σ_k δ Σ_j a^d φ(W_{kδ} − y_j)²`, in one pass.
pub fn path_action<S: NoiseSource + ?Sized>(
    path: &BrownianPath,
    source: &S,
    phi: &MollifierSpec,
    beta: f64,
    first_slab: i64,
) -> Result<FieldAction> {
    check_grid(path, source)?;
    if beta == 0.0 {
        return Ok(FieldAction::default());
    }
    let dx = source.dx();
    let vol = source.cell_volume();
    let mut near = NearCells::default();
    let mut vals = Vec::new();
    let (mut g, mut q) = (0.0, 0.0);
    for k in 0..path.steps() {
        near.collect(path.position(k), dx, phi);
        vals.resize(near.phis.len(), 0.0);
        source.fill_rows(first_slab + k as i64, &near.heads, &near.starts, &near.lens, &mut vals);
        g += near.phis.iter().zip(&vals).map(|(p, v)| p * v).sum::<f64>();
        q += near.phis.iter().map(|p| p * p).sum::<f64>();
    }
    Ok(FieldAction { action: beta * vol * g, compensator: 0.5 * beta * beta * vol * q })
}

pub fn field_action<S: NoiseSource + ?Sized>(
    path: &BrownianPath,
    source: &S,
    phi: &MollifierSpec,
    beta: f64,
) -> Result<f64> {
    Ok(path_action(path, source, phi, beta, 0)?.action)
}

/// Half the conditional variance of the action on cells of side `dx`.
pub fn discrete_compensator(path: &BrownianPath, dx: f64, phi: &MollifierSpec, beta: f64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    let vol = path.dt() * dx.powi(path.dim() as i32);
    let mut near = NearCells::default();
    let mut q = 0.0;
    for k in 0..path.steps() {
        near.collect(path.position(k), dx, phi);
        q += near.phis.iter().map(|p| p * p).sum::<f64>();
    }
    0.5 * beta * beta * vol * q
}

/// The continuum compensator `β² T V(0) / 2`.
pub fn continuum_compensator(beta: f64, horizon: f64, v0: f64) -> f64 {
    0.5 * beta * beta * horizon * v0
}
