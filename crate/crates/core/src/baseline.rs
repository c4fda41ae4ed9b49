//! Direct ellipse fits used as baselines: a constrained least-squares fit to
//! edge points and a dual-conic fit to tangent lines built from image
//! gradients.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::PhotonImage;
use crate::geometry::{AlgebraicEllipse, Vector6};

/// Default fraction of the largest gradient magnitude kept as edge.
pub const DEFAULT_THRESHOLD: f64 = 0.3;

const MIN_POINTS: usize = 6;

/// Edge pixel centres in unit-box coordinates with their gradient magnitudes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgePointSet {
    pub points: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
}

impl EdgePointSet {
    pub fn from_points(points: Vec<(f64, f64)>) -> Self {
        let weights = vec![1.0; points.len()];
        Self { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Image gradient at one interior pixel, in unit-box units per unit length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSample {
    pub row: usize,
    pub col: usize,
    pub x: f64,
    pub y: f64,
    pub gx: f64,
    pub gy: f64,
}

impl GradientSample {
    pub fn magnitude(&self) -> f64 {
        self.gx.hypot(self.gy)
    }
}

/// Sobel gradients of the count image at every interior pixel, row-major.
pub fn sobel_gradients(img: &PhotonImage) -> Result<Vec<GradientSample>> {
    let grid = img.grid;
    let (rows, cols) = (grid.rows(), grid.cols());
    if rows < 3 || cols < 3 {
        return Err(Error::invalid("edge extraction needs at least 3x3 pixels"));
    }
    let f = |m: usize, n: usize| img.get(m, n) as f64;
    let (dx, dy) = (grid.pixel_width(), grid.pixel_height());
    let mut out = Vec::with_capacity((rows - 2) * (cols - 2));
    for m in 1..rows - 1 {
        for n in 1..cols - 1 {
            let right = f(m - 1, n + 1) + 2.0 * f(m, n + 1) + f(m + 1, n + 1);
            let left = f(m - 1, n - 1) + 2.0 * f(m, n - 1) + f(m + 1, n - 1);
            let below = f(m + 1, n - 1) + 2.0 * f(m + 1, n) + f(m + 1, n + 1);
            let above = f(m - 1, n - 1) + 2.0 * f(m - 1, n) + f(m - 1, n + 1);
            out.push(GradientSample {
                row: m,
                col: n,
                x: grid.x(n),
                y: grid.y(m),
                gx: (right - left) / (8.0 * dx),
                // rows run downwards while y runs upwards
                gy: (above - below) / (8.0 * dy),
            });
        }
    }
    Ok(out)
}

/// Neighbour offsets `(Δrow, Δcol)` along the gradient, quantised to four directions.
fn gradient_neighbours(gx: f64, gy: f64) -> (isize, isize) {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        (0, 1)
    } else if angle < 67.5 {
        // up and to the right in the image plane
        (-1, 1)
    } else if angle < 112.5 {
        (-1, 0)
    } else {
        (-1, -1)
    }
}

/// Sobel edges thinned by non-maxima suppression along the gradient and kept
/// where the magnitude reaches `threshold_fraction` of the maximum.
pub fn extract_edges(img: &PhotonImage, threshold_fraction: f64) -> Result<EdgePointSet> {
    let samples = sobel_gradients(img)?;
    let cols = img.grid.cols();
    let inner_cols = cols - 2;
    let inner_rows = img.grid.rows() - 2;
    let mag: Vec<f64> = samples.iter().map(GradientSample::magnitude).collect();
    let peak = mag.iter().copied().fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::TooFewEdgePoints { found: 0 });
    }
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= inner_rows as isize || c >= inner_cols as isize {
            0.0
        } else {
            mag[r as usize * inner_cols + c as usize]
        }
    };
    let mut edges = EdgePointSet::default();
    for (i, s) in samples.iter().enumerate() {
        let m = mag[i];
        if m < threshold_fraction * peak || m == 0.0 {
            continue;
        }
        let (r, c) = ((s.row - 1) as isize, (s.col - 1) as isize);
        let (dr, dc) = gradient_neighbours(s.gx, s.gy);
        if m >= at(r + dr, c + dc) && m >= at(r - dr, c - dc) {
            edges.points.push((s.x, s.y));
            edges.weights.push(m);
        }
    }
    if edges.len() < MIN_POINTS {
        return Err(Error::TooFewEdgePoints { found: edges.len() });
    }
    Ok(edges)
}

/// Centroid shift and scale that bring points to zero mean and unit RMS radius.
fn normalisation(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let ms = points.iter().map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2)).sum::<f64>() / n;
    let s = (0.5 * ms).sqrt();
    (mx, my, if s > 0.0 { s } else { 1.0 })
}

fn conic_matrix(t: &[f64; 6]) -> Matrix3<f64> {
    Matrix3::new(
        t[0],
        0.5 * t[1],
        0.5 * t[3],
        0.5 * t[1],
        t[2],
        0.5 * t[4],
        0.5 * t[3],
        0.5 * t[4],
        t[5],
    )
}

fn coefficients(q: &Matrix3<f64>) -> [f64; 6] {
    [q[(0, 0)], 2.0 * q[(0, 1)], q[(1, 1)], 2.0 * q[(0, 2)], 2.0 * q[(1, 2)], q[(2, 2)]]
}

/// Maps a conic in normalised coordinates `(x - mx)/s` back to the original frame.
fn denormalise(q: &Matrix3<f64>, mx: f64, my: f64, s: f64) -> Matrix3<f64> {
    let t = Matrix3::new(1.0 / s, 0.0, -mx / s, 0.0, 1.0 / s, -my / s, 0.0, 0.0, 1.0);
    t.transpose() * q * t
}

/// Null vector of a 3×3 matrix that is singular up to rounding.
fn null_vector(m: &Matrix3<f64>) -> Vector3<f64> {
    let rows = [m.row(0).transpose(), m.row(1).transpose(), m.row(2).transpose()];
    [(0, 1), (0, 2), (1, 2)]
        .iter()
        .map(|&(i, j)| rows[i].cross(&rows[j]))
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .unwrap_or_else(Vector3::zeros)
}

/// Constrained least-squares ellipse through edge points.
///
/// Minimises the algebraic distance subject to `4ac - b² = 1`, solved through
/// the reduced 3×3 eigenproblem on centred and scaled coordinates.
pub fn def_points(points: &EdgePointSet) -> Result<AlgebraicEllipse> {
    let pts = &points.points;
    if pts.len() < MIN_POINTS {
        return Err(Error::TooFewEdgePoints { found: pts.len() });
    }
    if pts.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::NonFiniteParameters);
    }
    let (mx, my, s) = normalisation(pts);
    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for &(px, py) in pts {
        let (x, y) = ((px - mx) / s, (py - my) / s);
        let d1 = Vector3::new(x * x, x * y, y * y);
        let d2 = Vector3::new(x, y, 1.0);
        s1 += d1 * d1.transpose();
        s2 += d1 * d2.transpose();
        s3 += d2 * d2.transpose();
    }
    let s3_inv = s3.try_inverse().ok_or(Error::DegenerateData)?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // premultiply by the inverse of the constraint matrix
    let reduced = Matrix3::from_rows(&[m.row(2) * 0.5, -m.row(1), m.row(0) * 0.5]);
    if reduced.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateData);
    }
    let eigenvalues = reduced.complex_eigenvalues();
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for ev in eigenvalues.iter() {
        if ev.im.abs() > 1e-9 * ev.re.abs().max(1.0) {
            continue;
        }
        let v = null_vector(&(reduced - Matrix3::identity() * ev.re));
        if v.norm() == 0.0 {
            continue;
        }
        let cond = 4.0 * v[0] * v[2] - v[1] * v[1];
        if cond > 0.0 && best.as_ref().is_none_or(|(c, _)| cond / v.norm_squared() > *c) {
            best = Some((cond / v.norm_squared(), v));
        }
    }
    let (_, a1) = best.ok_or(Error::DegenerateData)?;
    let a2 = t * a1;
    let normalised = [a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]];
    let q = denormalise(&conic_matrix(&normalised), mx, my, s);
    AlgebraicEllipse::new(coefficients(&q)).map(|e| e.normalized()).map_err(|_| Error::DegenerateData)
}

/// Gradient-based direct fit: tangent lines through above-threshold pixels,
/// perpendicular to the gradient, fitted as a dual conic by weighted algebraic
/// least squares and inverted to a point conic.
pub fn def_gradient(img: &PhotonImage, threshold_fraction: f64) -> Result<AlgebraicEllipse> {
    let samples = sobel_gradients(img)?;
    let peak = samples.iter().map(GradientSample::magnitude).fold(0.0, f64::max);
    let kept: Vec<&GradientSample> = samples
        .iter()
        .filter(|s| {
            let m = s.magnitude();
            m > 0.0 && m >= threshold_fraction * peak
        })
        .collect();
    if peak == 0.0 || kept.len() < MIN_POINTS {
        return Err(Error::TooFewEdgePoints { found: kept.len() });
    }
    let pts: Vec<(f64, f64)> = kept.iter().map(|s| (s.x, s.y)).collect();
    let (mx, my, s) = normalisation(&pts);
    let k = kept.len();
    let mut design = DMatrix::<f64>::zeros(k, 5);
    let mut rhs = DVector::<f64>::zeros(k);
    for (i, g) in kept.iter().enumerate() {
        let mag = g.magnitude();
        let (nx, ny) = (g.gx / mag, g.gy / mag);
        let (x, y) = ((g.x - mx) / s, (g.y - my) / s);
        let l3 = -(nx * x + ny * y);
        let w = mag.sqrt();
        let row = [nx * nx, nx * ny, ny * ny, nx * l3, ny * l3];
        for (j, v) in row.iter().enumerate() {
            design[(i, j)] = w * v;
        }
        rhs[i] = -w * l3 * l3;
    }
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 || svd.singular_values.min() <= 1e-12 * smax {
        return Err(Error::DegenerateData);
    }
    let sol = svd.solve(&rhs, 0.0).map_err(|_| Error::DegenerateData)?;
    let dual = conic_matrix(&[sol[0], sol[1], sol[2], sol[3], sol[4], 1.0]);
    let point = adjugate(&dual);
    let q = denormalise(&point, mx, my, s);
    let conic = AlgebraicEllipse::new(coefficients(&q)).map_err(|_| Error::NotAnEllipse)?;
    conic.to_geometric().map_err(|_| Error::NotAnEllipse)?;
    Ok(conic.normalized())
}

/// Transpose of the cofactor matrix.
fn adjugate(m: &Matrix3<f64>) -> Matrix3<f64> {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)];
    Matrix3::new(
        c(1, 2, 1, 2),
        -c(0, 2, 1, 2),
        c(0, 1, 1, 2),
        -c(1, 2, 0, 2),
        c(0, 2, 0, 2),
        -c(0, 1, 0, 2),
        c(1, 2, 0, 1),
        -c(0, 2, 0, 1),
        c(0, 1, 0, 1),
    )
}

/// Norm of the part of unit-normalised `estimate` orthogonal to unit-normalised `truth`.
pub fn algebraic_error(estimate: &Vector6, truth: &Vector6) -> Result<f64> {
    let (ne, nt) = (estimate.norm(), truth.norm());
    if ne == 0.0 || nt == 0.0 {
        return Err(Error::ZeroVector);
    }
    let (e, t) = (estimate / ne, truth / nt);
    Ok((e - t * t.dot(&e)).norm().min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{averaged_ideal_image, PixelGrid};
    use crate::geometry::GeometricEllipse;

    fn ellipse_points(xi: &GeometricEllipse, n: usize) -> EdgePointSet {
        EdgePointSet::from_points(
            (0..n)
                .map(|k| xi.point_at(std::f64::consts::TAU * k as f64 / n as f64))
                .collect(),
        )
    }

    fn disc_image(size: usize, radius: f64) -> PhotonImage {
        let grid = PixelGrid::square(size).unwrap();
        let xi = GeometricEllipse::new(radius, radius, 0.5, 0.5, 0.0).unwrap();
        let cov = averaged_ideal_image(&xi, grid);
        let counts = cov.values.iter().map(|v| (v * 1000.0).round() as u32).collect();
        PhotonImage::new(grid, counts, 1000, 0).unwrap()
    }

    #[test]
    fn exact_points_are_recovered() {
        let xi = GeometricEllipse::new(2.0, 1.0, 0.0, 0.0, 0.0).unwrap();
        let fit = def_points(&ellipse_points(&xi, 20)).unwrap();
        let truth = Vector6::new(0.25, 0.0, 1.0, 0.0, 0.0, -1.0);
        assert!(algebraic_error(&fit.as_vector(), &truth).unwrap() < 1e-9);
    }

    #[test]
    fn rotated_offset_points_are_recovered() {
        let xi = GeometricEllipse::new(0.3, 0.1, 0.45, 0.55, 2.0).unwrap();
        let fit = def_points(&ellipse_points(&xi, 30)).unwrap();
        let err = algebraic_error(&fit.as_vector(), &xi.to_algebraic().as_vector()).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn too_few_points() {
        let set = EdgePointSet::from_points(vec![(0.0, 0.0); 5]);
        assert!(matches!(def_points(&set), Err(Error::TooFewEdgePoints { found: 5 })));
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let set = EdgePointSet::from_points((0..10).map(|i| (i as f64, 2.0 * i as f64)).collect());
        assert!(def_points(&set).is_err());
    }

    #[test]
    fn constant_image_has_no_edges() {
        let grid = PixelGrid::square(8).unwrap();
        let img = PhotonImage::new(grid, vec![5; 64], 16, 0).unwrap();
        assert!(matches!(extract_edges(&img, 0.3), Err(Error::TooFewEdgePoints { found: 0 })));
        assert!(matches!(def_gradient(&img, 0.3), Err(Error::TooFewEdgePoints { .. })));
    }

    #[test]
    fn disc_edges_are_near_the_circle() {
        let img = disc_image(128, 0.3);
        let edges = extract_edges(&img, 0.3).unwrap();
        let pitch = img.grid.pixel_width();
        for &(x, y) in &edges.points {
            let d = ((x - 0.5).hypot(y - 0.5) - 0.3).abs();
            assert!(d < 1.5 * pitch, "{x} {y} {d}");
        }
    }

    #[test]
    fn gradient_fit_on_disc() {
        let img = disc_image(128, 0.3);
        let fit = def_gradient(&img, 0.3).unwrap();
        let geo = fit.to_geometric().unwrap();
        let pitch = img.grid.pixel_width();
        assert!((geo.center_x - 0.5).hypot(geo.center_y - 0.5) < pitch);
        let [a, b, c, ..] = fit.coeffs();
        assert!((a - c).abs() < 0.05 * (a + c).abs());
        assert!(b.abs() < 0.05 * (a + c).abs());
    }

    #[test]
    fn algebraic_error_cases() {
        let t = Vector6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0);
        assert!(algebraic_error(&t, &t).unwrap() < 1e-15);
        assert!(algebraic_error(&(-t * 3.0), &t).unwrap() < 1e-15);
        let e1 = Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let e2 = Vector6::new(0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        assert!((algebraic_error(&e1, &e2).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(algebraic_error(&Vector6::zeros(), &t), Err(Error::ZeroVector)));
    }
}
