//! Text records written by `fit` and `baseline` and read back by `region`.

use ellipse_ml::uncertainty::CovarianceReport;
use ellipse_ml::GeometricEllipse;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Record {
    pub image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariance: Option<CovarianceSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region: Option<RegionSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSection {
    pub seed_from: String,
    pub converged: bool,
    pub iterations: usize,
    pub nll: f64,
    pub initial_nll: f64,
    pub sigma_psf: f64,
    pub ellipse: GeometricEllipse,
    pub initial: GeometricEllipse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceSection {
    pub condition: f64,
    pub pseudo_inverse: bool,
    /// Standard deviations of A, B, H, K, tau.
    pub xi_std: Vec<f64>,
    pub cov_xi: Vec<Vec<f64>>,
    /// Unit-norm conic coefficients a, b, c, d, e, f.
    pub theta: Vec<f64>,
    pub cov_theta: Vec<Vec<f64>>,
}

impl CovarianceSection {
    pub fn from_report(r: &CovarianceReport) -> Self {
        let rows5 = |m: &ellipse_ml::geometry::Matrix5| (0..5).map(|i| (0..5).map(|j| m[(i, j)]).collect()).collect();
        let rows6 = |m: &ellipse_ml::geometry::Matrix6| (0..6).map(|i| (0..6).map(|j| m[(i, j)]).collect()).collect();
        Self {
            condition: r.condition,
            pseudo_inverse: r.pseudo_inverse,
            xi_std: r.xi_std().to_vec(),
            cov_xi: rows5(&r.cov_xi),
            theta: r.theta_hat.coeffs().to_vec(),
            cov_theta: rows6(&r.cov_theta),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineSection {
    pub method: String,
    pub ellipse: GeometricEllipse,
    pub theta: Vec<f64>,
    pub edge_points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algebraic_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSection {
    pub ellipse: GeometricEllipse,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algebraic_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_zbar_on_locus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub locus_covered: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSection {
    pub path: String,
    pub alpha: f64,
    pub threshold: f64,
    pub resolution: usize,
    pub covered_fraction: f64,
}
