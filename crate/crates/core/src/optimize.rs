//! Maximum-likelihood fitting by BFGS with finite-difference derivatives.

use nalgebra::SVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::PhotonImage;
use crate::geometry::{GeometricEllipse, Matrix6, EtaVector};
use crate::par;
use crate::pmf::Likelihood;

type Vector6 = SVector<f64, 6>;

/// Where the initial estimate of a fit comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedSource {
    DefPoints,
    User,
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Relative central-difference step for gradients.
    pub gradient_step: f64,
    /// Relative central-difference step for the Hessian.
    pub hessian_step: f64,
    /// Stop when one accepted step lowers the objective by less than this fraction.
    pub convergence_tol: f64,
    /// Additive floor on the blur width.
    pub epsilon_sigma: f64,
    pub seed_source: SeedSource,
    /// Total number of starts; values above 1 add jittered copies of the seed.
    pub starts: usize,
    pub jitter_seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_step: 1e-5,
            hessian_step: 1e-4,
            convergence_tol: 1e-9,
            epsilon_sigma: 1e-4,
            seed_source: SeedSource::DefPoints,
            starts: 1,
            jitter_seed: 0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.gradient_step,
            self.hessian_step,
            self.convergence_tol,
            self.epsilon_sigma,
        ];
        if self.max_iterations == 0 || self.starts == 0 || positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("fit options must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub eta_hat: EtaVector,
    pub xi_hat: GeometricEllipse,
    pub sigma_psf_hat: f64,
    pub nll: f64,
    pub initial_nll: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Hessian of the objective with respect to `eta_hat`.
    pub hessian: Matrix6,
}

/// Outcome of a bare BFGS run.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: [f64; 6],
    pub value: f64,
    pub initial_value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn steps(x: &[f64; 6], rel: f64) -> [f64; 6] {
    x.map(|v| rel * v.abs().max(1.0))
}

fn probe<F>(f: &F, points: &[[f64; 6]]) -> Result<Vec<f64>>
where
    F: Fn(&[f64; 6]) -> f64 + Sync,
{
    let values = par::map_slice(points, |p| f(p));
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteProbe { index });
    }
    Ok(values)
}

/// Central-difference gradient with per-coordinate step `step·max(1, |xᵢ|)`.
pub fn numeric_gradient<F>(f: &F, x: &[f64; 6], step: f64) -> Result<[f64; 6]>
where
    F: Fn(&[f64; 6]) -> f64 + Sync,
{
    let h = steps(x, step);
    let mut points = Vec::with_capacity(12);
    for i in 0..6 {
        for sign in [1.0, -1.0] {
            let mut p = *x;
            p[i] += sign * h[i];
            points.push(p);
        }
    }
    let v = probe(f, &points)?;
    Ok(std::array::from_fn(|i| (v[2 * i] - v[2 * i + 1]) / (2.0 * h[i])))
}

/// Second-order central-difference Hessian, symmetrised.
pub fn numeric_hessian<F>(f: &F, x: &[f64; 6], step: f64) -> Result<Matrix6>
where
    F: Fn(&[f64; 6]) -> f64 + Sync,
{
    let h = steps(x, step);
    let shifted = |moves: &[(usize, f64)]| {
        let mut p = *x;
        for &(i, s) in moves {
            p[i] += s * h[i];
        }
        p
    };
    let mut points = vec![*x];
    for i in 0..6 {
        points.push(shifted(&[(i, 1.0)]));
        points.push(shifted(&[(i, -1.0)]));
    }
    let mut pairs = Vec::new();
    for i in 0..6 {
        for j in i + 1..6 {
            pairs.push((i, j));
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                points.push(shifted(&[(i, si), (j, sj)]));
            }
        }
    }
    let v = probe(f, &points)?;
    let mut hess = Matrix6::zeros();
    for i in 0..6 {
        hess[(i, i)] = (v[1 + 2 * i] - 2.0 * v[0] + v[2 + 2 * i]) / (h[i] * h[i]);
    }
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let o = 13 + 4 * k;
        let d = (v[o] - v[o + 1] - v[o + 2] + v[o + 3]) / (4.0 * h[i] * h[j]);
        hess[(i, j)] = d;
        hess[(j, i)] = d;
    }
    Ok((hess + hess.transpose()) * 0.5)
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_HALVINGS: usize = 50;
const FIRST_STEP: f64 = 0.01;

fn line_search<F>(f: &F, x: &Vector6, fx: f64, g: &Vector6, p: &Vector6) -> Option<(Vector6, f64)>
where
    F: Fn(&[f64; 6]) -> f64 + Sync,
{
    let slope = g.dot(p);
    let mut t = 1.0;
    for _ in 0..MAX_HALVINGS {
        let xn = x + p * t;
        let fnew = f(&xn.into());
        if fnew.is_finite() && fnew <= fx + ARMIJO_C1 * t * slope {
            return Some((xn, fnew));
        }
        t *= 0.5;
    }
    None
}

fn scaled_steepest(g: &Vector6) -> Vector6 {
    let m = g.amax();
    if m == 0.0 {
        Vector6::zeros()
    } else {
        -g * (FIRST_STEP / m)
    }
}

/// Minimises `f` by BFGS with an Armijo backtracking line search.
///
/// The first step follows the steepest descent direction scaled to an
/// infinity norm of 0.01; the inverse Hessian approximation is then
/// initialised from the first curvature pair.
pub fn minimize_bfgs<F>(f: &F, x0: [f64; 6], opts: &FitOptions) -> Result<Minimum>
where
    F: Fn(&[f64; 6]) -> f64 + Sync,
{
    let mut x = Vector6::from(x0);
    let mut fx = f(&x0);
    if !fx.is_finite() {
        return Err(Error::NonFiniteProbe { index: 0 });
    }
    let initial_value = fx;
    let mut g = Vector6::from(numeric_gradient(f, &x0, opts.gradient_step)?);
    let mut hinv: Option<Matrix6> = None;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        if g.amax() == 0.0 {
            converged = true;
            break;
        }
        let mut p = match &hinv {
            Some(h) => -(h * g),
            None => scaled_steepest(&g),
        };
        if g.dot(&p) >= 0.0 {
            hinv = None;
            p = scaled_steepest(&g);
        }
        let accepted = match line_search(f, &x, fx, &g, &p) {
            Some(step) => Some(step),
            None if hinv.is_some() => {
                // quasi-Newton direction failed: restart from steepest descent
                hinv = None;
                line_search(f, &x, fx, &g, &scaled_steepest(&g))
            }
            None => None,
        };
        let Some((xn, fnew)) = accepted else {
            // no decrease resolvable at this precision
            converged = true;
            break;
        };
        iterations += 1;
        let gn = match numeric_gradient(f, &xn.into(), opts.gradient_step) {
            Ok(v) => Vector6::from(v),
            Err(_) => {
                x = xn;
                fx = fnew;
                break;
            }
        };
        let s = xn - x;
        let y = gn - g;
        let decrease = (fx - fnew) / fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        g = gn;
        if decrease < opts.convergence_tol {
            converged = true;
            break;
        }
        let ys = y.dot(&s);
        if ys > f64::EPSILON * s.norm() * y.norm() {
            let h = hinv.unwrap_or_else(|| Matrix6::identity() * (ys / y.dot(&y)));
            let rho = 1.0 / ys;
            let left = Matrix6::identity() - s * y.transpose() * rho;
            hinv = Some(left * h * left.transpose() + s * s.transpose() * rho);
        }
    }
    Ok(Minimum {
        x: x.into(),
        value: fx,
        initial_value,
        iterations,
        converged,
    })
}

/// Fits ellipse and blur width to `observed` starting from `init`.
///
/// A run that stops at the iteration limit is returned with `converged = false`.
pub fn fit(observed: &PhotonImage, c_background: f64, init: &EtaVector, opts: &FitOptions) -> Result<FitResult> {
    opts.validate()?;
    if !init.is_finite() {
        return Err(Error::NonFiniteParameters);
    }
    if init.sqrt_semi_major == 0.0 || init.sqrt_semi_minor == 0.0 {
        return Err(Error::DegenerateSeed);
    }
    let lik = Likelihood::new(observed, c_background, opts.epsilon_sigma);
    let objective = |x: &[f64; 6]| {
        let eta = EtaVector::from_array(*x);
        lik.from_rates(&lik.rates(&eta))
    };
    let min = if opts.starts > 1 {
        multi_start(&objective, init, opts)?
    } else {
        minimize_bfgs(&objective, init.to_array(), opts)?
    };
    let eta_hat = EtaVector::from_array(min.x).canonical();
    let xi_hat = GeometricEllipse::from_array(eta_hat.geometric_params()).map_err(|_| Error::DegenerateConic)?;
    let hessian = numeric_hessian(&objective, &eta_hat.to_array(), opts.hessian_step)?;
    Ok(FitResult {
        eta_hat,
        xi_hat,
        sigma_psf_hat: eta_hat.sigma_psf(opts.epsilon_sigma),
        nll: objective(&eta_hat.to_array()),
        initial_nll: min.initial_value,
        iterations: min.iterations,
        converged: min.converged,
        hessian,
    })
}

/// Jittered copies of a starting point; the first entry is the point itself.
pub fn jittered_starts(init: &EtaVector, count: usize, seed: u64) -> Vec<[f64; 6]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = init.to_array();
    let scale = [0.05 * base[0].abs(), 0.05 * base[1].abs(), 0.01, 0.01, 0.1, 0.05 * base[5].abs()];
    let mut out = vec![base];
    for _ in 1..count {
        out.push(std::array::from_fn(|i| base[i] + scale[i] * rng.random_range(-1.0..=1.0)));
    }
    out
}

fn multi_start<F>(f: &F, init: &EtaVector, opts: &FitOptions) -> Result<Minimum>
where
    F: Fn(&[f64; 6]) -> f64 + Sync,
{
    let starts = jittered_starts(init, opts.starts, opts.jitter_seed);
    let runs = par::map_slice(&starts, |x0| minimize_bfgs(f, *x0, opts));
    let mut best: Option<Minimum> = None;
    for run in runs.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| run.value < b.value) {
            best = Some(run);
        }
    }
    let mut best = best.ok_or(Error::NonFiniteProbe { index: 0 })?;
    best.initial_value = f(&init.to_array());
    Ok(best)
}
