//! Ellipse representations and the maps between them.
//!
//! An ellipse is described either geometrically by its semi-axes, centre and
//! orientation, or algebraically by the six coefficients of the conic
//! `a x² + b xy + c y² + d x + e y + f = 0`. The optimiser works on a
//! square-root reparameterisation ([`EtaVector`]) that keeps the semi-axes
//! and the blur width non-negative.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Vector6 = SVector<f64, 6>;
pub type Matrix6 = SMatrix<f64, 6, 6>;
pub type Matrix5 = SMatrix<f64, 5, 5>;
pub type Matrix5x6 = SMatrix<f64, 5, 6>;
pub type Matrix6x5 = SMatrix<f64, 6, 5>;

/// Relative threshold on `(a-c)² + b²` below which a conic is treated as a circle.
pub const CIRCLE_TOLERANCE: f64 = 1e-12;

/// Reduces an angle into `[0, π)`.
pub fn canonical_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(PI);
    if r >= PI {
        0.0
    } else {
        r
    }
}

/// Distance between two orientations, treating angles that differ by π as equal.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// Geometric ellipse parameters: semi-axes, centre and orientation of the major axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricEllipse {
    pub semi_major: f64,
    pub semi_minor: f64,
    pub center_x: f64,
    pub center_y: f64,
    /// Angle between the major axis and the positive x axis, in `[0, π)`.
    pub angle: f64,
}

impl GeometricEllipse {
    /// Builds a canonical ellipse. If the axes are given in the wrong order they
    /// are swapped and the orientation is rotated by a right angle.
    pub fn new(semi_major: f64, semi_minor: f64, center_x: f64, center_y: f64, angle: f64) -> Result<Self> {
        let values = [semi_major, semi_minor, center_x, center_y, angle];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteParameters);
        }
        if semi_major <= 0.0 || semi_minor <= 0.0 {
            return Err(Error::invalid("semi-axes must be positive"));
        }
        let (major, minor, angle) = if semi_minor > semi_major {
            (semi_minor, semi_major, angle + FRAC_PI_2)
        } else {
            (semi_major, semi_minor, angle)
        };
        Ok(Self {
            semi_major: major,
            semi_minor: minor,
            center_x,
            center_y,
            angle: canonical_angle(angle),
        })
    }

    pub fn from_array(p: [f64; 5]) -> Result<Self> {
        Self::new(p[0], p[1], p[2], p[3], p[4])
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.semi_major, self.semi_minor, self.center_x, self.center_y, self.angle]
    }

    /// Point on the ellipse at curve parameter `alpha`.
    pub fn point_at(&self, alpha: f64) -> (f64, f64) {
        let (sa, ca) = alpha.sin_cos();
        let (st, ct) = self.angle.sin_cos();
        (
            self.center_x + self.semi_major * ca * ct - self.semi_minor * sa * st,
            self.center_y + self.semi_major * ca * st + self.semi_minor * sa * ct,
        )
    }

    pub fn area(&self) -> f64 {
        PI * self.semi_major * self.semi_minor
    }

    pub fn eccentricity(&self) -> f64 {
        (1.0 - (self.semi_minor / self.semi_major).powi(2)).max(0.0).sqrt()
    }

    /// Algebraic coefficients of the same ellipse.
    pub fn to_algebraic(&self) -> AlgebraicEllipse {
        AlgebraicEllipse { coeffs: conic_coefficients(self.to_array()) }
    }
}

/// Conic coefficients `[a, b, c, d, e, f]` of the ellipse with raw geometric
/// parameters `[A, B, H, K, τ]`. No canonicalisation is applied.
pub fn conic_coefficients(p: [f64; 5]) -> [f64; 6] {
    let [major, minor, h, k, angle] = p;
    let (s, c) = angle.sin_cos();
    let ia2 = 1.0 / (major * major);
    let ib2 = 1.0 / (minor * minor);
    let u = h * c + k * s;
    let v = k * c - h * s;
    [
        c * c * ia2 + s * s * ib2,
        (ia2 - ib2) * (2.0 * angle).sin(),
        c * c * ib2 + s * s * ia2,
        2.0 * s * v * ib2 - 2.0 * c * u * ia2,
        -2.0 * c * v * ib2 - 2.0 * s * u * ia2,
        u * u * ia2 + v * v * ib2 - 1.0,
    ]
}

/// Homogeneous conic coefficients of an ellipse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgebraicEllipse {
    coeffs: [f64; 6],
}

impl AlgebraicEllipse {
    /// Wraps coefficients, rejecting anything that is not an ellipse-type conic.
    pub fn new(coeffs: [f64; 6]) -> Result<Self> {
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteParameters);
        }
        if coeffs.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroVector);
        }
        let [a, b, c, ..] = coeffs;
        if b * b - 4.0 * a * c >= 0.0 {
            return Err(Error::DegenerateConic);
        }
        Ok(Self { coeffs })
    }

    pub fn coeffs(&self) -> [f64; 6] {
        self.coeffs
    }

    pub fn as_vector(&self) -> Vector6 {
        Vector6::from(self.coeffs)
    }

    pub fn norm(&self) -> f64 {
        self.as_vector().norm()
    }

    /// Unit-norm representative of the same conic.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self { coeffs: self.coeffs.map(|v| v / n) }
    }

    /// Same conic with its sign chosen so that the interior evaluates negative.
    pub fn with_negative_interior(&self) -> Self {
        if self.coeffs[0] + self.coeffs[2] < 0.0 {
            Self { coeffs: self.coeffs.map(|v| -v) }
        } else {
            *self
        }
    }

    /// Value of the conic polynomial at `(x, y)`.
    pub fn evaluate(&self, x: f64, y: f64) -> f64 {
        let [a, b, c, d, e, f] = self.coeffs;
        a * x * x + b * x * y + c * y * y + d * x + e * y + f
    }

    pub fn discriminant(&self) -> f64 {
        let [a, b, c, ..] = self.coeffs;
        b * b - 4.0 * a * c
    }

    /// Converts to geometric parameters.
    ///
    /// Circles (vanishing `(a-c)² + b²` relative to `(a+c)²`) get orientation 0.
    pub fn to_geometric(&self) -> Result<GeometricEllipse> {
        let [a, b, c, d, e, f] = self.coeffs;
        let delta = b * b - 4.0 * a * c;
        if delta.is_nan() || delta >= 0.0 {
            return Err(Error::DegenerateConic);
        }
        let spread2 = b * b + (a - c) * (a - c);
        let root = spread2.sqrt();
        // λ₊λ₋ = -Δ/4; take the small-magnitude root from the product.
        let (lambda_plus, lambda_minus) = if a + c >= 0.0 {
            let minus = 0.5 * (a + c + root);
            (-delta / (4.0 * minus), minus)
        } else {
            let plus = 0.5 * (a + c - root);
            (plus, -delta / (4.0 * plus))
        };
        let psi = b * d * e - a * e * e - b * b * f + c * (4.0 * a * f - d * d);
        let vp2 = psi / (lambda_plus * delta);
        let vm2 = psi / (lambda_minus * delta);
        if !(vp2 > 0.0 && vm2 > 0.0 && vp2.is_finite() && vm2.is_finite()) {
            return Err(Error::DegenerateConic);
        }
        let vp = vp2.sqrt();
        let vm = vm2.sqrt();
        let center_x = (2.0 * c * d - b * e) / delta;
        let center_y = (2.0 * a * e - b * d) / delta;

        if spread2 < CIRCLE_TOLERANCE * (a + c) * (a + c) {
            let r = (vp * vm).sqrt();
            return GeometricEllipse::new(r, r, center_x, center_y, 0.0);
        }

        let angle = orientation(a, b, c, vp >= vm);
        GeometricEllipse::new(vp.max(vm), vp.min(vm), center_x, center_y, angle)
    }
}

/// Orientation table over the signs of `b`, `a - c` and the order of the axis lengths.
///
/// The half-angle term uses the branch `arccot x = atan(1/x)` with values in
/// `(-π/2, π/2)`; the table's offsets are written for that branch.
fn orientation(a: f64, b: f64, c: f64, plus_is_major: bool) -> f64 {
    use std::cmp::Ordering::*;
    let half = || 0.5 * (b / (a - c)).atan();
    let ac = a.partial_cmp(&c).unwrap_or(Equal);
    let bs = b.partial_cmp(&0.0).unwrap_or(Equal);
    let angle = match (plus_is_major, bs, ac) {
        (true, Less, Less) => half(),
        (true, Less, Equal) => FRAC_PI_4,
        (true, Less, Greater) => half() + FRAC_PI_2,
        (true, Equal, Less) => 0.0,
        (true, Equal, _) => FRAC_PI_2,
        (true, Greater, Less) => half() + PI,
        (true, Greater, Equal) => 3.0 * FRAC_PI_4,
        (true, Greater, Greater) => half() + FRAC_PI_2,
        (false, Less, Less) => half() + FRAC_PI_2,
        (false, Less, Equal) => 3.0 * FRAC_PI_4,
        (false, Less, Greater) => half() + PI,
        (false, Equal, Less) => FRAC_PI_2,
        (false, Equal, _) => 0.0,
        (false, Greater, Less) => half() + FRAC_PI_2,
        (false, Greater, Equal) => FRAC_PI_4,
        (false, Greater, Greater) => half(),
    };
    canonical_angle(angle)
}

/// Optimisation variables: square roots of the semi-axes and of the blur
/// width, plus the centre and orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaVector {
    pub sqrt_semi_major: f64,
    pub sqrt_semi_minor: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub angle: f64,
    pub sqrt_sigma: f64,
}

impl EtaVector {
    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            sqrt_semi_major: v[0],
            sqrt_semi_minor: v[1],
            center_x: v[2],
            center_y: v[3],
            angle: v[4],
            sqrt_sigma: v[5],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.sqrt_semi_major,
            self.sqrt_semi_minor,
            self.center_x,
            self.center_y,
            self.angle,
            self.sqrt_sigma,
        ]
    }

    /// Encodes an ellipse and blur width. `sigma_floor` is the constant added
    /// back when decoding, so the blur is reproduced exactly when it exceeds the floor.
    pub fn from_geometric(xi: &GeometricEllipse, sigma_psf: f64, sigma_floor: f64) -> Self {
        Self {
            sqrt_semi_major: xi.semi_major.sqrt(),
            sqrt_semi_minor: xi.semi_minor.sqrt(),
            center_x: xi.center_x,
            center_y: xi.center_y,
            angle: xi.angle,
            sqrt_sigma: (sigma_psf - sigma_floor).max(0.0).sqrt(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Raw geometric parameters obtained by squaring, without canonicalisation.
    pub fn geometric_params(&self) -> [f64; 5] {
        [
            self.sqrt_semi_major * self.sqrt_semi_major,
            self.sqrt_semi_minor * self.sqrt_semi_minor,
            self.center_x,
            self.center_y,
            self.angle,
        ]
    }

    pub fn sigma_psf(&self, sigma_floor: f64) -> f64 {
        self.sqrt_sigma * self.sqrt_sigma + sigma_floor
    }

    /// Equivalent vector with non-negative roots, the major axis first and
    /// the orientation in `[0, π)`. The encoded ellipse and blur are unchanged.
    pub fn canonical(&self) -> Self {
        let mut out = Self {
            sqrt_semi_major: self.sqrt_semi_major.abs(),
            sqrt_semi_minor: self.sqrt_semi_minor.abs(),
            sqrt_sigma: self.sqrt_sigma.abs(),
            ..*self
        };
        if out.sqrt_semi_minor > out.sqrt_semi_major {
            std::mem::swap(&mut out.sqrt_semi_major, &mut out.sqrt_semi_minor);
            out.angle += FRAC_PI_2;
        }
        out.angle = canonical_angle(out.angle);
        out
    }
}

/// Jacobian of the map from optimisation variables to geometric parameters.
pub fn jacobian_xi_of_eta(eta: &EtaVector) -> Matrix5x6 {
    let mut j = Matrix5x6::zeros();
    j[(0, 0)] = 2.0 * eta.sqrt_semi_major;
    j[(1, 1)] = 2.0 * eta.sqrt_semi_minor;
    j[(2, 2)] = 1.0;
    j[(3, 3)] = 1.0;
    j[(4, 4)] = 1.0;
    j
}

/// Jacobian of [`conic_coefficients`] with respect to `[A, B, H, K, τ]`.
pub fn jacobian_kappa(xi: &GeometricEllipse) -> Matrix6x5 {
    jacobian_kappa_raw(xi.to_array())
}

/// Same as [`jacobian_kappa`] for raw, possibly non-canonical parameters.
pub fn jacobian_kappa_raw(p: [f64; 5]) -> Matrix6x5 {
    let [major, minor, h, k, angle] = p;
    let (s, c) = angle.sin_cos();
    let (s2, c2) = (2.0 * angle).sin_cos();
    let a2 = major * major;
    let b2 = minor * minor;
    let a3 = a2 * major;
    let b3 = b2 * minor;
    let ia2 = 1.0 / a2;
    let ib2 = 1.0 / b2;
    let u = h * c + k * s;
    let v = k * c - h * s;
    let axis_gap = (major - minor) * (major + minor) / (a2 * b2);

    #[rustfmt::skip]
    let rows = [
        [-2.0 * c * c / a3, -2.0 * s * s / b3, 0.0, 0.0, (ib2 - ia2) * s2],
        [-2.0 * s2 / a3, 2.0 * s2 / b3, 0.0, 0.0, 2.0 * (ia2 - ib2) * c2],
        [-2.0 * s * s / a3, -2.0 * c * c / b3, 0.0, 0.0, (ia2 - ib2) * s2],
        [
            4.0 * c * u / a3,
            -4.0 * s * v / b3,
            -2.0 * c * c * ia2 - 2.0 * s * s * ib2,
            (ib2 - ia2) * s2,
            2.0 * axis_gap * (k * c2 - h * s2),
        ],
        [
            4.0 * s * u / a3,
            4.0 * c * v / b3,
            (ib2 - ia2) * s2,
            -2.0 * c * c * ib2 - 2.0 * s * s * ia2,
            2.0 * axis_gap * (h * c2 + k * s2),
        ],
        [
            -2.0 * u * u / a3,
            -2.0 * v * v / b3,
            2.0 * u * c * ia2 - 2.0 * v * s * ib2,
            2.0 * s * u * ia2 + 2.0 * c * v * ib2,
            -2.0 * axis_gap * v * u,
        ],
    ];
    Matrix6x5::from_fn(|i, j| rows[i][j])
}

/// Jacobian of the normalisation `θ ↦ θ / ‖θ‖`.
pub fn jacobian_pi(theta: &Vector6) -> Result<Matrix6> {
    let n2 = theta.norm_squared();
    if n2 == 0.0 || !n2.is_finite() {
        return Err(Error::ZeroVector);
    }
    let n = n2.sqrt();
    Ok((Matrix6::identity() - theta * theta.transpose() / n2) / n)
}
