//! Configuration files for simulation and experiment runs.
//!
//! Both are TOML: flat `key = value` lines grouped under optional `[section]`
//! headers. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{validate_quantisation, ForwardConfig, PixelGrid};
use crate::geometry::GeometricEllipse;

/// The five geometric parameters as written in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipseSection {
    pub semi_major: f64,
    pub semi_minor: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub angle: f64,
}

impl EllipseSection {
    pub fn to_geometric(&self) -> Result<GeometricEllipse> {
        GeometricEllipse::new(self.semi_major, self.semi_minor, self.center_x, self.center_y, self.angle)
    }
}

impl From<GeometricEllipse> for EllipseSection {
    fn from(xi: GeometricEllipse) -> Self {
        Self {
            semi_major: xi.semi_major,
            semi_minor: xi.semi_minor,
            center_x: xi.center_x,
            center_y: xi.center_y,
            angle: xi.angle,
        }
    }
}

fn default_zero() -> f64 {
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSection {
    pub rows: usize,
    /// Defaults to `rows`.
    #[serde(default)]
    pub cols: Option<usize>,
    pub sigma_psf: f64,
    #[serde(default = "default_zero")]
    pub c_background: f64,
    pub conversion: u32,
    #[serde(default)]
    pub half_width: u32,
    #[serde(default)]
    pub seed: u64,
}

/// Input of the `simulate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub ellipse: EllipseSection,
    pub image: ImageSection,
}

impl SimulateConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_forward_config(&self) -> Result<ForwardConfig> {
        let img = &self.image;
        let cfg = ForwardConfig {
            xi: self.ellipse.to_geometric()?,
            grid: PixelGrid::new(img.rows, img.cols.unwrap_or(img.rows))?,
            sigma_psf: img.sigma_psf,
            c_background: img.c_background,
            conversion: img.conversion,
            half_width: img.half_width,
            seed: img.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Sweep over the conversion factor C.
    SnrSweep,
    /// Sweep over the quantisation half-width b.
    QuantisationSweep,
    /// Sweep over eccentricity at fixed area.
    EccentricitySweep,
    /// Sweep over the (square) grid size.
    GridSweep,
    /// A single condition taken entirely from the spec.
    Custom,
}

/// Description of an experiment. Every optional field falls back to the
/// preset of `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub truth: Option<EllipseSection>,
    #[serde(default)]
    pub grid: Option<usize>,
    #[serde(default)]
    pub sigma_psf: Option<f64>,
    #[serde(default)]
    pub c_background: Option<f64>,
    #[serde(default)]
    pub conversion: Option<u32>,
    #[serde(default)]
    pub half_width: Option<u32>,
    /// Values of the swept quantity: C, b, eccentricity or grid size.
    #[serde(default)]
    pub sweep: Option<Vec<f64>>,
    /// Initial blur width of every fit; defaults to one pixel pitch.
    #[serde(default)]
    pub initial_sigma: Option<f64>,
    #[serde(default)]
    pub edge_threshold: Option<f64>,
    /// Number of BFGS starts per fit.
    #[serde(default)]
    pub starts: Option<usize>,
}

fn default_trials() -> usize {
    100
}

/// Product `A·B` shared by every ellipse of the default eccentricity sweep.
pub const ECCENTRICITY_SWEEP_AXIS_PRODUCT: f64 = 0.0175;

/// One cell of an experiment: everything needed to synthesise and fit its trials.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub index: usize,
    pub label: String,
    pub xi: GeometricEllipse,
    pub grid: PixelGrid,
    pub sigma_psf: f64,
    pub c_background: f64,
    pub conversion: u32,
    pub half_width: u32,
}

struct Preset {
    truth: [f64; 5],
    grid: usize,
    sigma_psf: f64,
    conversion: u32,
    half_width: u32,
    sweep: &'static [f64],
}

fn preset(kind: ExperimentKind) -> Preset {
    const SLIM: [f64; 5] = [0.25, 0.05, 0.5, 0.5, 0.785];
    const ROUND: [f64; 5] = [0.35, 0.15, 0.5, 0.5, 0.0];
    match kind {
        ExperimentKind::SnrSweep => Preset {
            truth: SLIM,
            grid: 32,
            sigma_psf: 0.05,
            conversion: 256,
            half_width: 1,
            sweep: &[16.0, 32.0, 64.0, 128.0, 256.0],
        },
        ExperimentKind::QuantisationSweep => Preset {
            truth: ROUND,
            grid: 32,
            sigma_psf: 0.15,
            conversion: 128,
            half_width: 1,
            sweep: &[2.0, 4.0, 8.0, 16.0, 32.0],
        },
        ExperimentKind::EccentricitySweep => Preset {
            truth: SLIM,
            grid: 32,
            sigma_psf: 0.05,
            conversion: 32,
            half_width: 1,
            sweep: &[0.99, 0.97, 0.93, 0.87, 0.78],
        },
        ExperimentKind::GridSweep => Preset {
            truth: ROUND,
            grid: 32,
            sigma_psf: 0.15,
            conversion: 32,
            half_width: 1,
            sweep: &[8.0, 16.0, 32.0, 64.0, 128.0],
        },
        ExperimentKind::Custom => Preset {
            truth: SLIM,
            grid: 32,
            sigma_psf: 0.05,
            conversion: 256,
            half_width: 1,
            sweep: &[],
        },
    }
}

/// Semi-axes with eccentricity `e` and product `A·B = product`.
pub fn axes_for_eccentricity(e: f64, product: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&e) {
        return Err(Error::invalid(format!("eccentricity must lie in [0, 1), got {e}")));
    }
    let ratio = (1.0 - e * e).sqrt();
    let a = (product / ratio).sqrt();
    Ok((a, a * ratio))
}

fn as_u32(v: f64, what: &str) -> Result<u32> {
    if v.fract() != 0.0 || v < 1.0 || v > u32::MAX as f64 {
        return Err(Error::invalid(format!("{what} must be a positive integer, got {v}")));
    }
    Ok(v as u32)
}

impl ExperimentSpec {
    pub fn preset(kind: ExperimentKind) -> Self {
        Self {
            kind,
            trials: default_trials(),
            master_seed: 0,
            truth: None,
            grid: None,
            sigma_psf: None,
            c_background: None,
            conversion: None,
            half_width: None,
            sweep: None,
            initial_sigma: None,
            edge_threshold: None,
            starts: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn sweep_values(&self) -> Vec<f64> {
        self.sweep.clone().unwrap_or_else(|| preset(self.kind).sweep.to_vec())
    }

    /// Expands the spec into its conditions, in sweep order.
    pub fn conditions(&self) -> Result<Vec<Condition>> {
        if self.trials == 0 {
            return Err(Error::invalid("trials must be at least 1"));
        }
        let p = preset(self.kind);
        let truth = match &self.truth {
            Some(t) => t.to_geometric()?,
            None => GeometricEllipse::from_array(p.truth)?,
        };
        let base = Condition {
            index: 0,
            label: String::new(),
            xi: truth,
            grid: PixelGrid::square(self.grid.unwrap_or(p.grid))?,
            sigma_psf: self.sigma_psf.unwrap_or(p.sigma_psf),
            c_background: self.c_background.unwrap_or(0.0),
            conversion: self.conversion.unwrap_or(p.conversion),
            half_width: self.half_width.unwrap_or(p.half_width),
        };
        let values = self.sweep_values();
        let mut out = Vec::new();
        if self.kind == ExperimentKind::Custom {
            out.push(Condition {
                label: "custom".into(),
                ..base.clone()
            });
        } else if values.is_empty() {
            return Err(Error::invalid("sweep list must not be empty"));
        }
        for (index, &v) in values.iter().enumerate() {
            let mut c = Condition { index, ..base.clone() };
            match self.kind {
                ExperimentKind::SnrSweep => {
                    c.conversion = as_u32(v, "C")?;
                    c.label = format!("C={}", c.conversion);
                }
                ExperimentKind::QuantisationSweep => {
                    c.half_width = as_u32(v, "b")?;
                    c.label = format!("b={}", c.half_width);
                }
                ExperimentKind::EccentricitySweep => {
                    let product = match &self.truth {
                        Some(_) => truth.semi_major * truth.semi_minor,
                        None => ECCENTRICITY_SWEEP_AXIS_PRODUCT,
                    };
                    let (a, b) = axes_for_eccentricity(v, product)?;
                    c.xi = GeometricEllipse::new(a, b, truth.center_x, truth.center_y, truth.angle)?;
                    c.label = format!("e={v}");
                }
                ExperimentKind::GridSweep => {
                    let n = as_u32(v, "grid size")? as usize;
                    c.grid = PixelGrid::square(n)?;
                    c.label = format!("grid={n}");
                }
                ExperimentKind::Custom => continue,
            }
            out.push(c);
        }
        for c in &out {
            validate_quantisation(c.conversion, c.half_width)?;
            if !(c.sigma_psf.is_finite() && c.sigma_psf > 0.0) {
                return Err(Error::invalid("sigma_psf must be positive"));
            }
            if !(0.0..1.0).contains(&c.c_background) {
                return Err(Error::invalid("c_background must lie in [0, 1)"));
            }
        }
        Ok(out)
    }
}
