//! Distribution of quantised photon counts `N = X + U`, with `X ~ Poisson(λ)`
//! and `U` discrete uniform on `{-b, …, b}`, and the image negative
//! log-likelihood built from it.

use crate::error::{Error, Result};
use crate::forward::{expected_from_params, PhotonImage};
use crate::geometry::EtaVector;
use crate::par;
use crate::special::{gamma_p, gamma_q, ln_factorial_table, poisson_pmf};

/// Lower bound applied to every Poisson rate before taking logarithms.
pub const RATE_FLOOR: f64 = 1e-10;

/// `max(z) + ln Σ exp(z - max(z))`.
pub fn log_sum_exp(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(lse(z))
}

fn lse(z: &[f64]) -> f64 {
    let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top.is_infinite() {
        return top;
    }
    top + z.iter().map(|v| (v - top).exp()).sum::<f64>().ln()
}

/// Poisson rate and uniform half-width of one pixel's count distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantisedPoissonModel {
    lambda: f64,
    half_width: u32,
}

impl QuantisedPoissonModel {
    pub fn new(lambda: f64, half_width: u32) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::invalid(format!("Poisson rate must be positive, got {lambda}")));
        }
        Ok(Self { lambda, half_width })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn half_width(&self) -> u32 {
        self.half_width
    }

    /// `Pr(N = n)` from regularised incomplete gamma functions.
    ///
    /// For `n > b` the window `[n-b, n+b]` of Poisson probabilities is a
    /// difference of two cumulative sums. Above the rate the difference is
    /// taken between lower tails so that it does not cancel.
    pub fn pmf(&self, n: i64) -> f64 {
        let b = self.half_width as i64;
        let lambda = self.lambda;
        let width = (2 * b + 1) as f64;
        if n < -b {
            return 0.0;
        }
        let hi = (n + b + 1) as f64;
        if n <= b {
            return gamma_q(hi, lambda) / width;
        }
        let lo = (n - b) as f64;
        let diff = if lo > lambda {
            gamma_p(lo, lambda) - gamma_p(hi, lambda)
        } else {
            gamma_q(hi, lambda) - gamma_q(lo, lambda)
        };
        diff.max(0.0) / width
    }

    /// `Pr(N = n)` as the explicit average of Poisson probabilities over the window.
    pub fn pmf_direct(&self, n: i64) -> f64 {
        let b = self.half_width as i64;
        if n < -b {
            return 0.0;
        }
        let first = (n - b).max(0) as u64;
        let last = (n + b) as u64;
        let sum: f64 = (first..=last).map(|k| poisson_pmf(k, self.lambda)).sum();
        sum / (2 * b + 1) as f64
    }

    /// `ln Pr(N = n)` through log-sum-exp over the window; `-∞` for `n < -b`.
    pub fn log_pmf(&self, n: i64) -> f64 {
        let b = self.half_width as i64;
        if n < -b {
            return f64::NEG_INFINITY;
        }
        let ln_lambda = self.lambda.ln();
        let terms: Vec<f64> = ((n - b).max(0)..=n + b)
            .map(|k| -self.lambda + k as f64 * ln_lambda - crate::special::ln_gamma(k as f64 + 1.0))
            .collect();
        lse(&terms) - ((2 * b + 1) as f64).ln()
    }
}

/// Negative log-likelihood of an observed image as a function of the
/// optimisation variables.
#[derive(Debug, Clone)]
pub struct Likelihood<'a> {
    image: &'a PhotonImage,
    c_background: f64,
    sigma_floor: f64,
    ln_fact: Vec<f64>,
}

impl<'a> Likelihood<'a> {
    pub fn new(image: &'a PhotonImage, c_background: f64, sigma_floor: f64) -> Self {
        let top = image.counts.iter().copied().max().unwrap_or(0) as usize;
        let ln_fact = ln_factorial_table(top + image.half_width as usize + 2);
        Self {
            image,
            c_background,
            sigma_floor,
            ln_fact,
        }
    }

    pub fn image(&self) -> &PhotonImage {
        self.image
    }

    pub fn c_background(&self) -> f64 {
        self.c_background
    }

    pub fn sigma_floor(&self) -> f64 {
        self.sigma_floor
    }

    /// `ln Pr(N = n)` with the rate already floored.
    fn pixel_log_pmf(&self, lambda: f64, n: u32) -> f64 {
        let b = self.image.half_width as usize;
        let n = n as usize;
        let ln_lambda = lambda.ln();
        let first = n.saturating_sub(b);
        let mut top = f64::NEG_INFINITY;
        // two passes over at most 2b+1 terms; avoids allocating per pixel
        for k in first..=n + b {
            let t = k as f64 * ln_lambda - self.ln_fact[k];
            top = top.max(t);
        }
        let mut acc = 0.0;
        for k in first..=n + b {
            acc += (k as f64 * ln_lambda - self.ln_fact[k] - top).exp();
        }
        -lambda + top + acc.ln() - ((2 * b + 1) as f64).ln()
    }

    /// Negative log-likelihood for a given per-pixel rate image `C·prf`.
    pub fn from_rates(&self, rates: &[f64]) -> f64 {
        let terms = par::map_range(rates.len(), |i| {
            self.pixel_log_pmf(rates[i].max(RATE_FLOOR), self.image.counts[i])
        });
        -terms.iter().sum::<f64>()
    }

    /// Expected photon counts `C·prf` for the given parameters.
    pub fn rates(&self, eta: &EtaVector) -> Vec<f64> {
        let prf = expected_from_params(
            eta.geometric_params(),
            eta.sigma_psf(self.sigma_floor),
            self.c_background,
            self.image.grid,
        );
        let c = self.image.conversion as f64;
        prf.values.into_iter().map(|v| c * v).collect()
    }

    pub fn evaluate(&self, eta: &EtaVector) -> Result<f64> {
        if !eta.is_finite() {
            return Err(Error::NonFiniteParameters);
        }
        Ok(self.from_rates(&self.rates(eta)))
    }
}

/// One-shot negative log-likelihood of `observed` at `eta`.
pub fn negative_log_likelihood(
    eta: &EtaVector,
    observed: &PhotonImage,
    c_background: f64,
    sigma_floor: f64,
) -> Result<f64> {
    Likelihood::new(observed, c_background, sigma_floor).evaluate(eta)
}
