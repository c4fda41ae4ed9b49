//! Seeded synthetic experiments: for every condition and trial, synthesise an
//! image, run both direct fits and the ML fit seeded from the point-based
//! fit, and report one row per method.

use std::io::Write;
use std::time::Instant;

use crate::baseline::{algebraic_error, def_gradient, def_points, extract_edges, DEFAULT_THRESHOLD};
use crate::config::{Condition, ExperimentSpec};
use crate::error::Result;
use crate::forward::{synthesize, ForwardConfig, Synthesis};
use crate::geometry::{AlgebraicEllipse, EtaVector, GeometricEllipse};
use crate::optimize::{fit, FitOptions, FitResult, SeedSource};
use crate::par;
use crate::uncertainty::CovarianceReport;

pub const CSV_HEADER: &str = "condition,trial,method,A,B,H,K,tau,algebraic_error,nll,converged,runtime_ms,status";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Ml,
    DefPoints,
    DefGradient,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ml => "ml",
            Method::DefPoints => "def-points",
            Method::DefGradient => "def-gradient",
        }
    }
}

/// SplitMix64 finaliser.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Image seed of one trial: `mix(mix(mix(master) ^ condition) ^ trial)`.
pub fn trial_seed(master: u64, condition: usize, trial: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ condition as u64) ^ trial as u64)
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub condition: String,
    pub trial: usize,
    pub method: Method,
    pub estimate: Option<GeometricEllipse>,
    pub algebraic_error: Option<f64>,
    pub nll: Option<f64>,
    pub converged: Option<bool>,
    pub runtime_ms: f64,
    /// `ok`, `not-converged`, or `error: <reason>`.
    pub status: String,
}

impl TrialRow {
    fn failed(condition: &str, trial: usize, method: Method, runtime_ms: f64, reason: impl std::fmt::Display) -> Self {
        Self {
            condition: condition.to_string(),
            trial,
            method,
            estimate: None,
            algebraic_error: None,
            nll: None,
            converged: None,
            runtime_ms,
            status: format!("error: {reason}"),
        }
    }

    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let est = self
            .estimate
            .map(|e| e.to_array().map(|v| v.to_string()).join(","))
            .unwrap_or_else(|| ",,,,".to_string());
        format!(
            "{},{},{},{},{},{},{},{:.3},{}",
            self.condition,
            self.trial,
            self.method.as_str(),
            est,
            opt(self.algebraic_error),
            opt(self.nll),
            self.converged.map(|c| c.to_string()).unwrap_or_default(),
            self.runtime_ms,
            self.status
        )
    }
}

/// Fit settings shared by every trial of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSettings {
    pub edge_threshold: f64,
    /// Initial blur width; `None` uses one pixel pitch.
    pub initial_sigma: Option<f64>,
    pub fit: FitOptions,
}

impl TrialSettings {
    pub fn from_spec(spec: &ExperimentSpec) -> Self {
        Self {
            edge_threshold: spec.edge_threshold.unwrap_or(DEFAULT_THRESHOLD),
            initial_sigma: spec.initial_sigma,
            fit: FitOptions {
                starts: spec.starts.unwrap_or(1),
                seed_source: SeedSource::DefPoints,
                ..FitOptions::default()
            },
        }
    }
}

impl Default for TrialSettings {
    fn default() -> Self {
        Self {
            edge_threshold: DEFAULT_THRESHOLD,
            initial_sigma: None,
            fit: FitOptions::default(),
        }
    }
}

/// Everything produced by one trial, including the ML covariance.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub synthesis: Synthesis,
    pub rows: Vec<TrialRow>,
    pub ml: Option<FitResult>,
    pub covariance: Option<CovarianceReport>,
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn direct_row(condition: &Condition, trial: usize, method: Method, truth: &AlgebraicEllipse, start: Instant, result: Result<AlgebraicEllipse>) -> (TrialRow, Option<GeometricEllipse>) {
    let ms = elapsed_ms(start);
    let fitted = result.and_then(|theta| Ok((theta, theta.to_geometric()?)));
    match fitted {
        Ok((theta, geo)) => (
            TrialRow {
                condition: condition.label.clone(),
                trial,
                method,
                estimate: Some(geo),
                algebraic_error: algebraic_error(&theta.as_vector(), &truth.as_vector()).ok(),
                nll: None,
                converged: None,
                runtime_ms: ms,
                status: "ok".into(),
            },
            Some(geo),
        ),
        Err(e) => (TrialRow::failed(&condition.label, trial, method, ms, e), None),
    }
}

/// Runs one trial of `condition` with an explicit image seed.
pub fn run_trial(condition: &Condition, trial: usize, seed: u64, settings: &TrialSettings) -> Result<TrialOutcome> {
    let synthesis = synthesize(&ForwardConfig {
        xi: condition.xi,
        grid: condition.grid,
        sigma_psf: condition.sigma_psf,
        c_background: condition.c_background,
        conversion: condition.conversion,
        half_width: condition.half_width,
        seed,
    })?;
    let image = &synthesis.image;
    let truth = condition.xi.to_algebraic();

    let start = Instant::now();
    let points = extract_edges(image, settings.edge_threshold).and_then(|edges| def_points(&edges));
    let (points_row, seed_xi) = direct_row(condition, trial, Method::DefPoints, &truth, start, points);

    let start = Instant::now();
    let gradient = def_gradient(image, settings.edge_threshold);
    let (gradient_row, _) = direct_row(condition, trial, Method::DefGradient, &truth, start, gradient);

    let start = Instant::now();
    let (ml_row, ml, covariance) = match seed_xi {
        None => (
            TrialRow::failed(&condition.label, trial, Method::Ml, 0.0, "no seed from def-points"),
            None,
            None,
        ),
        Some(xi0) => {
            let sigma0 = settings.initial_sigma.unwrap_or(condition.grid.pixel_width());
            let init = EtaVector::from_geometric(&xi0, sigma0, settings.fit.epsilon_sigma);
            match fit(image, condition.c_background, &init, &settings.fit) {
                Ok(r) => {
                    let ms = elapsed_ms(start);
                    let err = algebraic_error(&r.xi_hat.to_algebraic().as_vector(), &truth.as_vector()).ok();
                    let row = TrialRow {
                        condition: condition.label.clone(),
                        trial,
                        method: Method::Ml,
                        estimate: Some(r.xi_hat),
                        algebraic_error: err,
                        nll: Some(r.nll),
                        converged: Some(r.converged),
                        runtime_ms: ms,
                        status: if r.converged { "ok".into() } else { "not-converged".into() },
                    };
                    let cov = CovarianceReport::from_fit(&r).ok();
                    (row, Some(r), cov)
                }
                Err(e) => (TrialRow::failed(&condition.label, trial, Method::Ml, elapsed_ms(start), e), None, None),
            }
        }
    };
    Ok(TrialOutcome {
        synthesis,
        rows: vec![ml_row, points_row, gradient_row],
        ml,
        covariance,
    })
}

/// Runs every trial of `condition`, concurrently, returning outcomes in trial order.
pub fn run_condition(condition: &Condition, trials: usize, master_seed: u64, settings: &TrialSettings) -> Vec<Result<TrialOutcome>> {
    par::map_range(trials, |t| {
        run_trial(condition, t, trial_seed(master_seed, condition.index, t), settings)
    })
}

/// Runs a whole experiment on `workers` threads. `sink` receives the rows of
/// each condition, ordered by trial and method, as soon as it completes.
pub fn run_experiment<F>(spec: &ExperimentSpec, workers: Option<usize>, mut sink: F) -> Result<Vec<TrialRow>>
where
    F: FnMut(&[TrialRow]) -> Result<()> + Send,
{
    let conditions = spec.conditions()?;
    let settings = TrialSettings::from_spec(spec);
    par::with_workers(workers, || {
        let mut all = Vec::new();
        for condition in &conditions {
            let mut rows = Vec::with_capacity(3 * spec.trials);
            for (t, outcome) in run_condition(condition, spec.trials, spec.master_seed, &settings).into_iter().enumerate() {
                match outcome {
                    Ok(o) => rows.extend(o.rows),
                    Err(e) => {
                        for m in [Method::Ml, Method::DefPoints, Method::DefGradient] {
                            rows.push(TrialRow::failed(&condition.label, t, m, 0.0, &e));
                        }
                    }
                }
            }
            rows.sort_by_key(|r| (r.trial, r.method));
            sink(&rows)?;
            all.extend(rows);
        }
        Ok(all)
    })
}

pub fn write_csv<W: Write>(out: &mut W, rows: &[TrialRow], header: bool) -> Result<()> {
    if header {
        writeln!(out, "{CSV_HEADER}")?;
    }
    for r in rows {
        writeln!(out, "{}", r.to_csv_line())?;
    }
    Ok(())
}

/// CSV text with the `runtime_ms` column removed, for reproducibility checks.
pub fn strip_runtime_column(csv: &str) -> String {
    let idx = CSV_HEADER.split(',').position(|c| c == "runtime_ms").unwrap_or(usize::MAX);
    csv.lines()
        .map(|line| {
            line.split(',')
                .enumerate()
                .filter(|(i, _)| *i != idx)
                .map(|(_, v)| v)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Median of the finite values; `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
