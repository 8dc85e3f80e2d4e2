use crate::error::{Error, Result};
use crate::mollifier::CovarianceKernel;
use crate::quad;
use serde::Serialize;

/// Green-function lower bound on the L² disorder threshold.
#[derive(Debug, Clone, Serialize)]
pub struct KhasminskiiBound {
    pub beta_k: f64,
    /// `E_0 ∫₀^∞ V(√2 W_s) ds`.
    pub occupation_at_origin: f64,
    /// `(|x|, E_x ∫₀^∞ V(√2 W_s) ds)` on a radial grid.
    pub profile: Vec<(f64, f64)>,
    pub argmax_radius: f64,
}

/// Newtonian constant of `½Δ`: `G(z) = Γ(d/2 − 1) / (2π^{d/2}) |z|^{2−d}`.
pub fn green_constant(dim: usize) -> f64 {
    let h = dim as f64 / 2.0;
    statrs::function::gamma::gamma(h - 1.0) / (2.0 * std::f64::consts::PI.powf(h))
}

/// `E_x ∫₀^∞ V(√2 W_s) ds` at `|x| = r`, using the shell theorem for the
/// radial integrand.
pub fn green_occupation(kernel: &CovarianceKernel, r: f64) -> Result<f64> {
    let d = kernel.dim();
    if d < 3 {
        return Err(Error::InvalidDimension(d));
    }
    let reach = std::f64::consts::FRAC_1_SQRT_2;
    let expo = 2 - d as i32;
    let integrand = |rho: f64| rho.powi(d as i32 - 1) * kernel.eval_r(std::f64::consts::SQRT_2 * rho) * r.max(rho).powi(expo);
    let total = if r > 0.0 && r < reach {
        quad::integrate(integrand, 0.0, r, 400, 6) + quad::integrate(integrand, r, reach, 400, 6)
    } else {
        quad::integrate(integrand, 0.0, reach, 800, 6)
    };
    Ok(green_constant(d) * quad::sphere_area(d) * total)
}

pub fn khasminskii_bound(kernel: &CovarianceKernel) -> Result<KhasminskiiBound> {
    let profile = (0..=40)
        .map(|i| {
            let r = 0.05 * i as f64;
            green_occupation(kernel, r).map(|g| (r, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let (argmax_radius, occupation) = profile.iter().cloned().fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    Ok(KhasminskiiBound {
        beta_k: occupation.powf(-0.5),
        occupation_at_origin: profile[0].1,
        profile,
        argmax_radius,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent radial quadrature of the convolution against 1/(2π max(|x|,|y|)).
    const FROZEN: [(f64, f64); 4] = [(0.0, 0.25720356075655826), (0.5, 0.112484471), (1.0, 0.0562697698), (2.0, 0.0281348849)];
    const BETA_K: f64 = 1.971793867797106;

    #[test]
    fn three_dimensional_constant() {
        assert!((green_constant(3) - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-15);
    }

    // Linear interpolation of the 1e-3 radial table limits agreement to ~1e-6.
    #[test]
    fn occupation_matches_frozen_values() {
        let k = CovarianceKernel::shared(3).unwrap();
        for &(r, g) in &FROZEN {
            let got = green_occupation(&k, r).unwrap();
            assert!((got / g - 1.0).abs() < 5e-6, "r={r}: {got} vs {g}");
        }
    }

    #[test]
    fn bound_is_positive_and_peaks_at_origin() {
        let k = CovarianceKernel::shared(3).unwrap();
        let b = khasminskii_bound(&k).unwrap();
        assert_eq!(b.argmax_radius, 0.0);
        assert!(b.beta_k > 0.0);
        assert!((b.beta_k / BETA_K - 1.0).abs() < 5e-6);
        assert!(b.profile.windows(2).all(|w| w[1].1 < w[0].1));
    }
}
