//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ellipse_ml::clip::{ellipse_rect_area, AlignedRect};
use ellipse_ml::config::{ExperimentKind, ExperimentSpec};
use ellipse_ml::experiment::{
    run_condition, run_experiment, strip_runtime_column, trial_seed, write_csv, median, Method, TrialOutcome,
    TrialSettings,
};
use ellipse_ml::forward::{expected_image, snr, PixelGrid};
use ellipse_ml::geometry::{
    conic_coefficients, jacobian_kappa, jacobian_pi, jacobian_xi_of_eta, GeometricEllipse, Vector6,
};
use ellipse_ml::pmf::QuantisedPoissonModel;
use ellipse_ml::special::{ln_gamma, poisson_pmf};
use ellipse_ml::uncertainty::{chi2_quantile, locus_covered};
use ellipse_ml::{par, EtaVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn pmf_correctness() -> Verdict {
    let start = Instant::now();
    let mut worst_sum = 0.0f64;
    let mut worst_rel = 0.0f64;
    let mut poisson_exact = true;
    for lambda in [0.5, 5.0, 50.0, 500.0] {
        for b in [0u32, 1, 4, 16] {
            let m = QuantisedPoissonModel::new(lambda, b).unwrap();
            let bi = b as i64;
            let top = (lambda + 15.0 * lambda.sqrt() + 40.0) as i64 + bi;
            let mut total = 0.0;
            for n in -bi..=top {
                let p = m.pmf(n);
                let d = m.pmf_direct(n);
                total += p;
                if d > 0.0 {
                    worst_rel = worst_rel.max((p - d).abs() / d);
                }
                if b == 0 {
                    let k = n as u64;
                    let log_direct = -lambda + n as f64 * lambda.ln() - ln_gamma(n as f64 + 1.0);
                    poisson_exact &= d == poisson_pmf(k, lambda) && m.log_pmf(n) == log_direct;
                }
            }
            worst_sum = worst_sum.max((1.0 - total).max(0.0));
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_sum <= 1e-9 && worst_rel <= 1e-12 && poisson_exact && elapsed < Duration::from_secs(1);
    verdict(
        pass,
        format!(
            "max mass deficit {worst_sum:.2e}, max relative gap {worst_rel:.2e}, b=0 exact {poisson_exact}, {elapsed:.2?}"
        ),
    )
}

fn monte_carlo_area(rect: &AlignedRect, a: f64, b: f64, side: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (x0, y0) = (rect.cx - rect.width / 2.0, rect.cy - rect.height / 2.0);
    let (dx, dy) = (rect.width / side as f64, rect.height / side as f64);
    let (ia2, ib2) = (1.0 / (a * a), 1.0 / (b * b));
    let mut inside = 0u64;
    for i in 0..side {
        for j in 0..side {
            let x = x0 + (i as f64 + rng.random::<f64>()) * dx;
            let y = y0 + (j as f64 + rng.random::<f64>()) * dy;
            inside += (x * x * ia2 + y * y * ib2 <= 1.0) as u64;
        }
    }
    rect.area() * inside as f64 / (side * side) as f64
}

fn intersection_area_oracle() -> Verdict {
    let start = Instant::now();
    let configs: Vec<(AlignedRect, f64, f64)> = {
        let mut rng = ChaCha8Rng::seed_from_u64(0xa4ea);
        (0..1000)
            .map(|_| {
                let a = rng.random_range(0.05..0.8);
                let b = rng.random_range(0.05..0.8);
                let w = rng.random_range(0.02..1.0);
                let h = rng.random_range(0.02..1.0);
                let cx = rng.random_range(-1.0..1.0);
                let cy = rng.random_range(-1.0..1.0);
                (AlignedRect::new(cx, cy, w, h), a, b)
            })
            .collect()
    };
    // 1000 x 1000 jittered stratified samples per configuration
    let errors = par::map_range(configs.len(), |i| {
        let (rect, a, b) = configs[i];
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        (ellipse_rect_area(&rect, a, b) - monte_carlo_area(&rect, a, b, 1000, &mut rng)).abs()
    });
    let worst = errors.iter().copied().fold(0.0, f64::max);

    let mut containment = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let a = rng.random_range(0.05..1.0);
        let b = rng.random_range(0.05..1.0);
        let outer = AlignedRect::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 2.0 * a + 0.3, 2.0 * b + 0.3);
        containment = containment.max((ellipse_rect_area(&outer, a, b) - PI * a * b).abs());
        // a rectangle inside the inscribed axis box
        let (s, t) = (a / 2f64.sqrt(), b / 2f64.sqrt());
        let w = rng.random_range(0.01..s);
        let h = rng.random_range(0.01..t);
        let inner = AlignedRect::new(rng.random_range(-(s - w / 2.0)..(s - w / 2.0)), rng.random_range(-(t - h / 2.0)..(t - h / 2.0)), w, h);
        containment = containment.max((ellipse_rect_area(&inner, a, b) - w * h).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst < 3e-3 && containment <= 1e-12 && elapsed < Duration::from_secs(60);
    verdict(pass, format!("max |error| {worst:.2e} over 1000 configs, containment {containment:.1e}, {elapsed:.2?}"))
}

fn rel_frobenius<const R: usize, const C: usize>(analytic: [[f64; C]; R], numeric: [[f64; C]; R]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 0..R {
        for c in 0..C {
            num += (analytic[r][c] - numeric[r][c]).powi(2);
            den += analytic[r][c].powi(2);
        }
    }
    (num / den).sqrt()
}

fn random_ellipse(rng: &mut ChaCha8Rng) -> GeometricEllipse {
    let a = rng.random_range(0.01..1.0);
    let ratio = rng.random_range(0.05..0.99);
    GeometricEllipse::new(a, a * ratio, rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0), rng.random_range(0.0..PI)).unwrap()
}

fn jacobian_suite() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1ac0);
    let (mut kappa, mut xi_eta, mut pi) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let xi = random_ellipse(&mut rng);
        let p = xi.to_array();
        let j = jacobian_kappa(&xi);
        let mut fd = [[0.0; 5]; 6];
        for c in 0..5 {
            let h = 1e-6 * p[c].abs().max(1e-2);
            let (mut up, mut dn) = (p, p);
            up[c] += h;
            dn[c] -= h;
            let (u, d) = (conic_coefficients(up), conic_coefficients(dn));
            for r in 0..6 {
                fd[r][c] = (u[r] - d[r]) / (2.0 * h);
            }
        }
        kappa = kappa.max(rel_frobenius(std::array::from_fn(|r| std::array::from_fn(|c| j[(r, c)])), fd));

        let v: [f64; 6] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let eta = EtaVector::from_array(v);
        let j = jacobian_xi_of_eta(&eta);
        let mut fd = [[0.0; 6]; 5];
        for c in 0..6 {
            let h = 1e-6;
            let (mut up, mut dn) = (v, v);
            up[c] += h;
            dn[c] -= h;
            let (u, d) = (EtaVector::from_array(up).geometric_params(), EtaVector::from_array(dn).geometric_params());
            for r in 0..5 {
                fd[r][c] = (u[r] - d[r]) / (2.0 * h);
            }
        }
        xi_eta = xi_eta.max(rel_frobenius(std::array::from_fn(|r| std::array::from_fn(|c| j[(r, c)])), fd));

        let theta = Vector6::from_fn(|_, _| rng.random_range(-5.0..5.0));
        let j = jacobian_pi(&theta).unwrap();
        let mut fd = [[0.0; 6]; 6];
        for c in 0..6 {
            let h = 1e-6 * theta.norm();
            let (mut up, mut dn) = (theta, theta);
            up[c] += h;
            dn[c] -= h;
            let diff = (up / up.norm() - dn / dn.norm()) / (2.0 * h);
            for r in 0..6 {
                fd[r][c] = diff[r];
            }
        }
        pi = pi.max(rel_frobenius(std::array::from_fn(|r| std::array::from_fn(|c| j[(r, c)])), fd));
    }
    let elapsed = start.elapsed();
    let pass = kappa < 1e-5 && xi_eta < 1e-5 && pi < 1e-5 && elapsed < Duration::from_secs(5);
    verdict(pass, format!("kappa {kappa:.1e}, xi(eta) {xi_eta:.1e}, pi {pi:.1e}, {elapsed:.2?}"))
}

fn round_trip() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7007);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let xi = random_ellipse(&mut rng);
        let back = xi.to_algebraic().to_geometric().unwrap();
        for k in 0..4 {
            worst = worst.max((back.to_array()[k] - xi.to_array()[k]).abs());
        }
        let d = (back.angle - xi.angle).rem_euclid(PI);
        worst = worst.max(d.min(PI - d));
    }
    let elapsed = start.elapsed();
    verdict(worst <= 1e-9 && elapsed < Duration::from_secs(1), format!("max component error {worst:.1e}, {elapsed:.2?}"))
}

fn chi2_threshold() -> Verdict {
    let q = chi2_quantile(5, 0.05).unwrap();
    verdict((q - 11.07).abs() <= 0.01, format!("chi2(5, 0.05) = {q:.4}"))
}

fn snr_reproduction() -> Verdict {
    let xi = GeometricEllipse::new(0.25, 0.05, 0.5, 0.5, 0.785).unwrap();
    let prf = expected_image(&xi, 0.05, 0.0, PixelGrid::square(32).unwrap());
    let want = [3.2, 4.6, 6.5, 9.1, 12.9];
    let got: Vec<f64> = [16, 32, 64, 128, 256].iter().map(|&c| snr(c, &prf)).collect();
    let pass = got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 0.2);
    let shown: Vec<String> = got.iter().map(|v| format!("{v:.3}")).collect();
    verdict(pass, format!("SNR {}", shown.join(", ")))
}

fn spec_for(kind: ExperimentKind, sweep: f64, seed: u64) -> ExperimentSpec {
    ExperimentSpec {
        sweep: Some(vec![sweep]),
        master_seed: seed,
        ..ExperimentSpec::preset(kind)
    }
}

struct Batch {
    outcomes: Vec<TrialOutcome>,
    elapsed: Duration,
}

fn run_batch(spec: &ExperimentSpec, workers: usize) -> Batch {
    let condition = spec.conditions().unwrap().remove(0);
    let settings = TrialSettings::from_spec(spec);
    let start = Instant::now();
    let outcomes = par::with_workers(Some(workers), || run_condition(&condition, spec.trials, spec.master_seed, &settings));
    Batch {
        outcomes: outcomes.into_iter().map(|o| o.expect("synthesis succeeds")).collect(),
        elapsed: start.elapsed(),
    }
}

fn row_error(o: &TrialOutcome, method: Method) -> f64 {
    o.rows
        .iter()
        .find(|r| r.method == method)
        .and_then(|r| r.algebraic_error)
        .unwrap_or(f64::INFINITY)
}

fn center_error(o: &TrialOutcome, truth: &GeometricEllipse) -> f64 {
    o.ml
        .as_ref()
        .map(|r| (r.xi_hat.center_x - truth.center_x).hypot(r.xi_hat.center_y - truth.center_y))
        .unwrap_or(f64::INFINITY)
}

fn recovery(batch: &Batch, single: &Batch, truth: &GeometricEllipse) -> Verdict {
    let ml: Vec<f64> = batch.outcomes.iter().map(|o| row_error(o, Method::Ml)).collect();
    let dp: Vec<f64> = batch.outcomes.iter().map(|o| row_error(o, Method::DefPoints)).collect();
    let centre: Vec<f64> = batch.outcomes.iter().map(|o| center_error(o, truth)).collect();
    let (ml_med, dp_med, c_med) = (median(&ml).unwrap(), median(&dp).unwrap(), median(&centre).unwrap());
    let failures = batch.outcomes.iter().filter(|o| o.ml.is_none()).count();
    let pass = ml_med < dp_med
        && c_med < 0.01
        && single.elapsed < Duration::from_secs(15 * 60)
        && batch.elapsed < Duration::from_secs(4 * 60);
    verdict(
        pass,
        format!(
            "median algebraic error ML {ml_med:.4} vs DEF-points {dp_med:.4}, median centre error {c_med:.5}, \
             {failures} ML failures, 1 worker {:.1?}, 4 workers {:.1?}",
            single.elapsed, batch.elapsed
        ),
    )
}

fn coverage(batch: &Batch, truth: &GeometricEllipse) -> Verdict {
    let threshold = chi2_quantile(5, 0.05).unwrap();
    let covered = batch
        .outcomes
        .iter()
        .filter(|o| {
            o.covariance
                .as_ref()
                .is_some_and(|c| locus_covered(truth, &c.theta_hat.as_vector(), &c.cov_theta, threshold))
        })
        .count();
    verdict(covered >= 85, format!("true locus inside the 95% region in {covered}/{} trials", batch.outcomes.len()))
}

fn quantisation_robustness() -> Verdict {
    let spec = spec_for(ExperimentKind::QuantisationSweep, 32.0, 0x0b32);
    let condition = &spec.conditions().unwrap()[0];
    assert_eq!(condition.conversion / (2 * condition.half_width), 2);
    let batch = run_batch(&spec, 4);
    let centre: Vec<f64> = batch.outcomes.iter().map(|o| center_error(o, &condition.xi)).collect();
    let med = median(&centre).unwrap();
    let failures = batch.outcomes.iter().filter(|o| o.ml.is_none()).count();
    verdict(
        med < 0.03,
        format!("binary images (G=2): median centre error {med:.5}, {failures} ML failures, {:.1?}", batch.elapsed),
    )
}

fn csv_of(spec: &ExperimentSpec, workers: usize) -> String {
    let mut out = Vec::new();
    let rows = run_experiment(spec, Some(workers), |_| Ok(())).unwrap();
    write_csv(&mut out, &rows, true).unwrap();
    strip_runtime_column(&String::from_utf8(out).unwrap())
}

fn determinism(c7_single: &Batch, c7_parallel: &Batch) -> Verdict {
    let spec = ExperimentSpec {
        trials: 8,
        master_seed: 99,
        ..ExperimentSpec::preset(ExperimentKind::SnrSweep)
    };
    let one = csv_of(&spec, 1);
    let four = csv_of(&spec, 4);
    let again = csv_of(&spec, 4);
    let same_rows = c7_single
        .outcomes
        .iter()
        .zip(&c7_parallel.outcomes)
        .all(|(a, b)| a.rows.iter().zip(&b.rows).all(|(x, y)| TrialRowKey::of(x) == TrialRowKey::of(y)));
    let isolated = {
        // a single trial rerun on its own reproduces its row
        let spec = spec_for(ExperimentKind::SnrSweep, 256.0, 0xc7);
        let condition = spec.conditions().unwrap().remove(0);
        let alone = ellipse_ml::experiment::run_trial(&condition, 3, trial_seed(spec.master_seed, 0, 3), &TrialSettings::from_spec(&spec)).unwrap();
        alone.rows.iter().zip(&c7_parallel.outcomes[3].rows).all(|(x, y)| TrialRowKey::of(x) == TrialRowKey::of(y))
    };
    let pass = one == four && four == again && same_rows && isolated;
    verdict(
        pass,
        format!(
            "{} CSV lines; 1 vs 4 workers identical {}, rerun identical {}, 100-trial batch identical {same_rows}, isolated trial {isolated}",
            one.lines().count(),
            one == four,
            four == again
        ),
    )
}

/// Row fields that must be reproducible (everything but the runtime).
#[derive(PartialEq)]
struct TrialRowKey(String);

impl TrialRowKey {
    fn of(r: &ellipse_ml::experiment::TrialRow) -> Self {
        let line = r.to_csv_line();
        TrialRowKey(strip_runtime_column(&line))
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |n: usize, name: &'static str, v: Verdict| {
        println!("criterion {n:>2} {}: {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };

    report(1, "pmf correctness", pmf_correctness());
    report(2, "intersection-area oracle", intersection_area_oracle());
    report(3, "jacobian suite", jacobian_suite());
    report(4, "round-trip conversions", round_trip());
    report(5, "chi-square threshold", chi2_threshold());
    report(6, "SNR reproduction", snr_reproduction());

    let spec = spec_for(ExperimentKind::SnrSweep, 256.0, 0xc7);
    let truth = spec.conditions().unwrap()[0].xi;
    let single = run_batch(&spec, 1);
    let parallel = run_batch(&spec, 4);
    report(7, "recovery at desk scale", recovery(&parallel, &single, &truth));
    report(8, "quantisation robustness", quantisation_robustness());
    report(9, "confidence-region coverage", coverage(&parallel, &truth));
    report(10, "determinism", determinism(&single, &parallel));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("parallel feature: {}", par::is_parallel());
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
