//! Covariance of the fitted parameters and the planar confidence region
//! around the fitted ellipse.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    jacobian_kappa, jacobian_pi, jacobian_xi_of_eta, AlgebraicEllipse, EtaVector, GeometricEllipse, Matrix5, Matrix6,
    Vector6,
};
use crate::optimize::FitResult;
use crate::par;
use crate::special::gamma_p;

/// Condition number above which the Hessian is inverted by pseudo-inverse.
pub const MAX_CONDITION: f64 = 1e12;

/// Default side length of the confidence-region raster.
pub const DEFAULT_RESOLUTION: usize = 512;

/// Inverse (or pseudo-inverse) of a Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    pub matrix: Matrix6,
    /// Set when the Hessian was not safely invertible and a pseudo-inverse was used.
    pub pseudo_inverse: bool,
    pub condition: f64,
}

fn symmetrise<const D: usize>(m: &nalgebra::SMatrix<f64, D, D>) -> nalgebra::SMatrix<f64, D, D> {
    (m + m.transpose()) * 0.5
}

/// Inverts a symmetric Hessian, falling back to a pseudo-inverse over its
/// positive eigenvalues when it is indefinite or badly conditioned.
pub fn covariance_from_hessian(hessian: &Matrix6) -> Result<Covariance> {
    if hessian.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularHessian);
    }
    let h = symmetrise(hessian);
    let eig = SymmetricEigen::new(h);
    let top = eig.eigenvalues.amax();
    let bottom = eig.eigenvalues.min();
    if top == 0.0 {
        return Err(Error::SingularHessian);
    }
    let condition = if bottom > 0.0 { top / bottom } else { f64::INFINITY };
    if condition <= MAX_CONDITION {
        if let Some(chol) = h.cholesky() {
            return Ok(Covariance {
                matrix: symmetrise(&chol.inverse()),
                pseudo_inverse: false,
                condition,
            });
        }
    }
    let tol = top / MAX_CONDITION;
    let mut inv = Matrix6::zeros();
    let mut rank = 0;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > tol {
            let v = eig.eigenvectors.column(k);
            inv += v * v.transpose() / lambda;
            rank += 1;
        }
    }
    if rank == 0 {
        return Err(Error::SingularHessian);
    }
    Ok(Covariance {
        matrix: symmetrise(&inv),
        pseudo_inverse: true,
        condition,
    })
}

/// `J Λ_η Jᵀ` with the Jacobian of the square-root reparameterisation.
pub fn propagate_to_xi(cov_eta: &Matrix6, eta_hat: &EtaVector) -> Matrix5 {
    let j = jacobian_xi_of_eta(eta_hat);
    symmetrise(&(j * cov_eta * j.transpose()))
}

/// Unit-norm algebraic parameters of `xi_hat` and their covariance.
pub fn propagate_to_theta(cov_xi: &Matrix5, xi_hat: &GeometricEllipse) -> Result<(AlgebraicEllipse, Matrix6)> {
    let theta = xi_hat.to_algebraic();
    let jk = jacobian_kappa(xi_hat);
    let jp = jacobian_pi(&theta.as_vector())?;
    let j = jp * jk;
    Ok((theta.normalized(), symmetrise(&(j * cov_xi * j.transpose()))))
}

/// Covariances of a fit in all three parameterisations.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    pub cov_eta: Matrix6,
    pub cov_xi: Matrix5,
    pub cov_theta: Matrix6,
    pub theta_hat: AlgebraicEllipse,
    pub pseudo_inverse: bool,
    pub condition: f64,
}

impl CovarianceReport {
    pub fn from_fit(fit: &FitResult) -> Result<Self> {
        let cov = covariance_from_hessian(&fit.hessian)?;
        let cov_xi = propagate_to_xi(&cov.matrix, &fit.eta_hat);
        let (theta_hat, cov_theta) = propagate_to_theta(&cov_xi, &fit.xi_hat)?;
        Ok(Self {
            cov_eta: cov.matrix,
            cov_xi,
            cov_theta,
            theta_hat,
            pseudo_inverse: cov.pseudo_inverse,
            condition: cov.condition,
        })
    }

    /// Standard deviations of `[A, B, H, K, τ]`.
    pub fn xi_std(&self) -> [f64; 5] {
        std::array::from_fn(|i| self.cov_xi[(i, i)].max(0.0).sqrt())
    }
}

fn carrier(x: f64, y: f64) -> Vector6 {
    Vector6::new(x * x, x * y, y * y, x, y, 1.0)
}

/// `(θᵀu)² / (uᵀΛu)` at the point `(x, y)`; `+∞` when the denominator is not positive.
pub fn zbar(x: f64, y: f64, theta: &Vector6, cov_theta: &Matrix6) -> f64 {
    let u = carrier(x, y);
    let num = theta.dot(&u).powi(2);
    if num == 0.0 {
        return 0.0;
    }
    let den = (u.transpose() * cov_theta * u)[(0, 0)];
    if den > 0.0 {
        num / den
    } else {
        f64::INFINITY
    }
}

/// Cumulative distribution function of χ² with `df` degrees of freedom.
pub fn chi2_cdf(df: u32, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_p(0.5 * df as f64, 0.5 * x)
    }
}

fn chi2_pdf(df: u32, x: f64) -> f64 {
    let k = 0.5 * df as f64;
    ((k - 1.0) * x.ln() - 0.5 * x - k * std::f64::consts::LN_2 - crate::special::ln_gamma(k)).exp()
}

/// Value exceeded with probability `alpha` by a χ² variable with `df` degrees of freedom.
pub fn chi2_quantile(df: u32, alpha: f64) -> Result<f64> {
    if df == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("chi2_quantile needs df >= 1 and alpha in (0, 1)"));
    }
    // work on whichever tail is smaller to keep relative precision
    let upper = alpha < 0.5;
    let residual = |x: f64| {
        if upper {
            crate::special::gamma_q(0.5 * df as f64, 0.5 * x) - alpha
        } else {
            chi2_cdf(df, x) - (1.0 - alpha)
        }
    };
    let sign = if upper { -1.0 } else { 1.0 };
    let (mut lo, mut hi) = (0.0, df as f64 + 1.0);
    while sign * residual(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let r = residual(x);
        if r == 0.0 {
            break;
        }
        if sign * r < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let pdf = chi2_pdf(df, x);
        let newton = x - r / (sign * pdf);
        let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - x).abs() <= 1e-15 * x.abs() {
            x = next;
            break;
        }
        x = next;
    }
    Ok(x)
}

/// Boolean mask of the confidence region over the unit box and the `z̄` field it thresholds.
///
/// Raster cell `(m, n)` sits at `x = n/(R-1)`, `y = (R-1-m)/(R-1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRegionRaster {
    pub resolution: usize,
    pub alpha: f64,
    pub threshold: f64,
    pub mask: Vec<bool>,
    pub zbar: Vec<f64>,
}

impl ConfidenceRegionRaster {
    pub fn covered_fraction(&self) -> f64 {
        self.mask.iter().filter(|m| **m).count() as f64 / self.mask.len() as f64
    }
}

pub fn confidence_region(
    theta_hat: &AlgebraicEllipse,
    cov_theta: &Matrix6,
    alpha: f64,
    resolution: usize,
) -> Result<ConfidenceRegionRaster> {
    if resolution < 2 {
        return Err(Error::invalid("raster resolution must be at least 2"));
    }
    let threshold = chi2_quantile(5, alpha)?;
    let theta = theta_hat.as_vector();
    let step = 1.0 / (resolution - 1) as f64;
    let zbar = par::map_range(resolution * resolution, |i| {
        let (m, n) = (i / resolution, i % resolution);
        zbar(n as f64 * step, (resolution - 1 - m) as f64 * step, &theta, cov_theta)
    });
    let mask = zbar.iter().map(|z| *z <= threshold).collect();
    Ok(ConfidenceRegionRaster {
        resolution,
        alpha,
        threshold,
        mask,
        zbar,
    })
}

/// Largest `z̄` over `samples` points spread uniformly in curve parameter on `locus`.
pub fn max_zbar_on_locus(locus: &GeometricEllipse, theta: &Vector6, cov_theta: &Matrix6, samples: usize) -> f64 {
    (0..samples)
        .map(|k| {
            let alpha = std::f64::consts::TAU * k as f64 / samples as f64;
            let (x, y) = locus.point_at(alpha);
            zbar(x, y, theta, cov_theta)
        })
        .fold(0.0, f64::max)
}

/// Whether every sampled point of `locus` lies inside the region `z̄ ≤ threshold`.
pub fn locus_covered(locus: &GeometricEllipse, theta: &Vector6, cov_theta: &Matrix6, threshold: f64) -> bool {
    max_zbar_on_locus(locus, theta, cov_theta, 720) <= threshold
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_simple_hessians() {
        let c = covariance_from_hessian(&Matrix6::identity()).unwrap();
        assert!((c.matrix - Matrix6::identity()).amax() < 1e-15);
        assert!(!c.pseudo_inverse);
        let mut h = Matrix6::identity();
        h[(0, 0)] = 4.0;
        let c = covariance_from_hessian(&h).unwrap();
        assert!((c.matrix[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn singular_hessians() {
        assert!(matches!(covariance_from_hessian(&Matrix6::zeros()), Err(Error::SingularHessian)));
        let mut h = Matrix6::identity();
        h[(5, 5)] = 0.0;
        let c = covariance_from_hessian(&h).unwrap();
        assert!(c.pseudo_inverse);
        assert_eq!(c.matrix[(5, 5)], 0.0);
        assert!((c.matrix[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_covariance_propagates_to_zero() {
        let xi = GeometricEllipse::new(0.25, 0.05, 0.5, 0.5, 0.785).unwrap();
        let eta = EtaVector::from_geometric(&xi, 0.05, 1e-4);
        let cov_xi = propagate_to_xi(&Matrix6::zeros(), &eta);
        assert_eq!(cov_xi, Matrix5::zeros());
        let (theta, cov_theta) = propagate_to_theta(&cov_xi, &xi).unwrap();
        assert_eq!(cov_theta, Matrix6::zeros());
        assert!((theta.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn theta_direction_is_annihilated() {
        let xi = GeometricEllipse::new(0.3, 0.1, 0.4, 0.6, 1.0).unwrap();
        let cov_xi = Matrix5::from_diagonal(&nalgebra::SVector::<f64, 5>::new(1e-4, 2e-4, 1e-5, 3e-5, 1e-3));
        let (theta, cov) = propagate_to_theta(&cov_xi, &xi).unwrap();
        let t = theta.as_vector();
        assert!((t.transpose() * cov * t)[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn zbar_on_locus_and_scaling() {
        let xi = GeometricEllipse::new(0.3, 0.1, 0.4, 0.6, 1.0).unwrap();
        let theta = xi.to_algebraic().normalized().as_vector();
        let cov = Matrix6::identity() * 1e-6;
        let (x, y) = xi.point_at(0.7);
        assert!(zbar(x, y, &theta, &cov) < 1e-12);
        let z1 = zbar(0.9, 0.1, &theta, &cov);
        let z2 = zbar(0.9, 0.1, &theta, &(cov * 4.0));
        assert!((z1 / 4.0 - z2).abs() < 1e-9 * z1);
        assert!(z1 > 11.07);
        assert_eq!(zbar(0.9, 0.1, &theta, &Matrix6::zeros()), f64::INFINITY);
    }

    #[test]
    fn chi2_quantiles() {
        let q = chi2_quantile(5, 0.05).unwrap();
        assert!((q - 11.0705).abs() < 1e-4, "{q}");
        let q = chi2_quantile(1, 0.3173).unwrap();
        assert!((q - 1.0).abs() < 1e-3, "{q}");
        for (df, alpha) in [(1, 0.5), (2, 0.01), (5, 0.95), (10, 1e-6)] {
            let q = chi2_quantile(df, alpha).unwrap();
            assert!((chi2_cdf(df, q) - (1.0 - alpha)).abs() < 1e-10);
        }
        assert!(chi2_quantile(5, 0.0).is_err());
    }

    #[test]
    fn region_shrinks_with_covariance() {
        let xi = GeometricEllipse::new(0.3, 0.1, 0.5, 0.5, 0.3).unwrap();
        let theta = xi.to_algebraic().normalized();
        let big = confidence_region(&theta, &(Matrix6::identity() * 1e-4), 0.05, 64).unwrap();
        let small = confidence_region(&theta, &(Matrix6::identity() * 1e-6), 0.05, 64).unwrap();
        assert!(small.covered_fraction() < big.covered_fraction());
        for (s, b) in small.mask.iter().zip(&big.mask) {
            assert!(!s || *b);
        }
    }
}
