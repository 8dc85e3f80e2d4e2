//! Thin wrappers over fixed Gauss rules.

use gauss_quad::{GaussHermite, GaussLegendre};
use std::num::NonZeroUsize;

fn order(n: usize) -> NonZeroUsize {
    NonZeroUsize::new(n.max(2)).expect("order is at least 2")
}

/// Gauss-Legendre nodes and weights mapped to `[a, b]`.
pub fn legendre(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let rule = GaussLegendre::new(order(n));
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    rule.as_node_weight_pairs()
        .iter()
        .map(|&(x, w)| (mid + half * x, half * w))
        .collect()
}

/// Gauss-Hermite nodes and weights for the weight `exp(-x^2)`.
pub fn hermite(n: usize) -> Vec<(f64, f64)> {
    GaussHermite::new(order(n))
        .as_node_weight_pairs()
        .to_vec()
}

/// Composite Gauss-Legendre integral of `f` over `[a, b]` split into `panels`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize, n: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let base = legendre(n, 0.0, h);
    (0..panels)
        .map(|p| {
            let x0 = a + p as f64 * h;
            base.iter().map(|&(x, w)| w * f(x0 + x)).sum::<f64>()
        })
        .sum()
}

/// Surface area of the unit sphere in `R^d`.
pub fn sphere_area(d: usize) -> f64 {
    let half = d as f64 / 2.0;
    2.0 * std::f64::consts::PI.powf(half) / statrs::function::gamma::gamma(half)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials() {
        let v: f64 = legendre(5, 1.0, 3.0).iter().map(|&(x, w)| w * x.powi(7)).sum();
        assert!((v - (3f64.powi(8) - 1.0) / 8.0).abs() < 1e-9);
    }

    #[test]
    fn hermite_second_moment() {
        let v: f64 = hermite(10).iter().map(|&(x, w)| w * x * x).sum();
        assert!((v - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sphere_areas() {
        assert!((sphere_area(2) - 2.0 * std::f64::consts::PI).abs() < 1e-12);
        assert!((sphere_area(3) - 4.0 * std::f64::consts::PI).abs() < 1e-12);
    }
}
