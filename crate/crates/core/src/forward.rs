//! Synthetic image formation: exact pixel averaging of the elliptic region,
//! Gaussian blur, Poisson photon noise and quantisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::{ellipse_rect_area, AlignedRect};
use crate::error::{Error, Result};
use crate::geometry::GeometricEllipse;
use crate::par;

/// Rectangular grid of pixel centres spanning the unit box.
///
/// Pixel `(m, n)` (zero-based row and column) has centre
/// `x = n/(N-1)`, `y = (M-1-m)/(M-1)`, so row 0 is the top of the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelGrid {
    rows: usize,
    cols: usize,
}

impl PixelGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::invalid(format!(
                "grid must be at least 2x2, got {rows}x{cols}"
            )));
        }
        Ok(Self { rows, cols })
    }

    pub fn square(size: usize) -> Result<Self> {
        Self::new(size, size)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pixel_width(&self) -> f64 {
        1.0 / (self.cols - 1) as f64
    }

    pub fn pixel_height(&self) -> f64 {
        1.0 / (self.rows - 1) as f64
    }

    pub fn x(&self, col: usize) -> f64 {
        col as f64 / (self.cols - 1) as f64
    }

    pub fn y(&self, row: usize) -> f64 {
        (self.rows - 1 - row) as f64 / (self.rows - 1) as f64
    }

    /// Centre of the pixel at row-major `index`.
    pub fn center(&self, index: usize) -> (f64, f64) {
        (self.x(index % self.cols), self.y(index / self.cols))
    }
}

/// Real-valued image on a pixel grid, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    pub grid: PixelGrid,
    pub values: Vec<f64>,
}

impl RealImage {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.cols() + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Photon counts on a pixel grid with the acquisition constants needed to
/// interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonImage {
    pub grid: PixelGrid,
    pub counts: Vec<u32>,
    /// Conversion factor C: expected photons at full-scale intensity.
    pub conversion: u32,
    /// Quantisation half-width b; zero means unquantised counts.
    pub half_width: u32,
}

impl PhotonImage {
    pub fn new(grid: PixelGrid, counts: Vec<u32>, conversion: u32, half_width: u32) -> Result<Self> {
        if counts.len() != grid.len() {
            return Err(Error::invalid(format!(
                "expected {} pixels, got {}",
                grid.len(),
                counts.len()
            )));
        }
        if conversion == 0 {
            return Err(Error::invalid("conversion factor C must be positive"));
        }
        Ok(Self {
            grid,
            counts,
            conversion,
            half_width,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.counts[row * self.grid.cols() + col]
    }

    /// Number of grey levels `C/(2b)`, or `None` for unquantised images.
    pub fn grey_levels(&self) -> Option<u32> {
        grey_levels(self.conversion, self.half_width)
    }
}

/// `G = C/(2b)` when `b > 0`.
pub fn grey_levels(conversion: u32, half_width: u32) -> Option<u32> {
    (half_width > 0).then(|| conversion / (2 * half_width))
}

/// Everything needed to synthesise one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardConfig {
    pub xi: GeometricEllipse,
    pub grid: PixelGrid,
    pub sigma_psf: f64,
    pub c_background: f64,
    pub conversion: u32,
    pub half_width: u32,
    pub seed: u64,
}

impl ForwardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_psf.is_finite() && self.sigma_psf >= 0.0) {
            return Err(Error::invalid("sigma_psf must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.c_background) {
            return Err(Error::invalid("c_background must lie in [0, 1)"));
        }
        validate_quantisation(self.conversion, self.half_width)
    }
}

/// Checks `C > 0` and, when quantising, that `C` and `b` are powers of two with `2b ≤ C`.
pub fn validate_quantisation(conversion: u32, half_width: u32) -> Result<()> {
    if conversion == 0 {
        return Err(Error::invalid("C must be positive"));
    }
    if half_width > 0 {
        if !conversion.is_power_of_two() || !half_width.is_power_of_two() {
            return Err(Error::invalid("C and b must be powers of two when b > 0"));
        }
        if 2 * half_width as u64 > conversion as u64 {
            return Err(Error::invalid("2b must not exceed C"));
        }
    }
    Ok(())
}

/// Fraction of each pixel covered by the ellipse.
///
/// Pixel centres are rotated into the ellipse frame and the pixel rectangle is
/// kept axis-aligned there.
pub fn averaged_ideal_image(xi: &GeometricEllipse, grid: PixelGrid) -> RealImage {
    coverage_from_params(xi.to_array(), grid)
}

/// [`averaged_ideal_image`] for raw parameters `[A, B, H, K, τ]`, where the
/// axes may come in either order. A zero axis gives an empty image.
pub fn coverage_from_params(p: [f64; 5], grid: PixelGrid) -> RealImage {
    let [a, b, h0, k0, tau] = p;
    let (a, b) = (a.abs(), b.abs());
    if a == 0.0 || b == 0.0 {
        return RealImage { grid, values: vec![0.0; grid.len()] };
    }
    let (st, ct) = tau.sin_cos();
    let (w, h) = (grid.pixel_width(), grid.pixel_height());
    let pixel_area = w * h;
    // pixels whose circumcircle misses the bounding circle are skipped
    let reach = a.max(b) + 0.5 * (w * w + h * h).sqrt();
    let values = par::map_range(grid.len(), |i| {
        let (x, y) = grid.center(i);
        let (dx, dy) = (x - h0, y - k0);
        let xr = dx * ct + dy * st;
        let yr = -dx * st + dy * ct;
        if xr * xr + yr * yr > reach * reach {
            return 0.0;
        }
        (ellipse_rect_area(&AlignedRect::new(xr, yr, w, h), a, b) / pixel_area).clamp(0.0, 1.0)
    });
    RealImage { grid, values }
}

fn normalised_kernel(coords: &[f64], sigma: f64) -> Vec<Vec<f64>> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    coords
        .iter()
        .map(|&c0| {
            let mut row: Vec<f64> = coords.iter().map(|&c| (-(c - c0).powi(2) * inv).exp()).collect();
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
            row
        })
        .collect()
}

/// Gaussian blur over the whole grid with per-pixel normalisation, then the
/// background mix `c + (1-c)·blurred`.
///
/// The kernel and its normaliser both factor into row and column parts, so
/// the double sum over all pixels is evaluated as two one-dimensional passes.
pub fn apply_psf(img: &RealImage, sigma_psf: f64, c_background: f64) -> RealImage {
    let grid = img.grid;
    let (rows, cols) = (grid.rows(), grid.cols());
    let mix = |v: f64| (c_background + (1.0 - c_background) * v).clamp(c_background, 1.0);
    if sigma_psf <= 0.0 {
        return RealImage {
            grid,
            values: img.values.iter().map(|&v| mix(v)).collect(),
        };
    }
    let xs: Vec<f64> = (0..cols).map(|n| grid.x(n)).collect();
    let ys: Vec<f64> = (0..rows).map(|m| grid.y(m)).collect();
    let kx = normalised_kernel(&xs, sigma_psf);
    let ky = normalised_kernel(&ys, sigma_psf);

    // horizontal pass: tmp[t][n] = Σ_s f[t][s]·kx[n][s]
    let tmp: Vec<f64> = par::map_range(rows * cols, |i| {
        let (t, n) = (i / cols, i % cols);
        let src = &img.values[t * cols..(t + 1) * cols];
        src.iter().zip(&kx[n]).map(|(f, k)| f * k).sum()
    });
    let values = par::map_range(rows * cols, |i| {
        let (m, n) = (i / cols, i % cols);
        let v: f64 = ky[m].iter().enumerate().map(|(t, k)| k * tmp[t * cols + n]).sum();
        mix(v)
    });
    RealImage { grid, values }
}

/// Reference implementation of [`apply_psf`] as the full double sum.
pub fn apply_psf_direct(img: &RealImage, sigma_psf: f64, c_background: f64) -> RealImage {
    let grid = img.grid;
    let inv = 1.0 / (2.0 * sigma_psf * sigma_psf);
    let values = (0..grid.len())
        .map(|i| {
            let (xn, ym) = grid.center(i);
            let mut num = 0.0;
            let mut z = 0.0;
            for (j, f) in img.values.iter().enumerate() {
                let (xs, yt) = grid.center(j);
                let g = (-((xs - xn).powi(2) + (yt - ym).powi(2)) * inv).exp();
                num += f * g;
                z += g;
            }
            c_background + (1.0 - c_background) * num / z
        })
        .collect();
    RealImage { grid, values }
}

/// Noise-free pixel response: pixel averaging followed by blur and background.
pub fn expected_image(xi: &GeometricEllipse, sigma_psf: f64, c_background: f64, grid: PixelGrid) -> RealImage {
    expected_from_params(xi.to_array(), sigma_psf, c_background, grid)
}

/// [`expected_image`] for raw parameters `[A, B, H, K, τ]`.
pub fn expected_from_params(p: [f64; 5], sigma_psf: f64, c_background: f64, grid: PixelGrid) -> RealImage {
    apply_psf(&coverage_from_params(p, grid), sigma_psf, c_background)
}

/// Draws a Poisson variate by multiplying uniforms, accumulated in log space.
pub fn sample_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    let mut k = 0u64;
    let mut p = 0.0;
    loop {
        k += 1;
        // uniform on (0, 1]
        let u: f64 = 1.0 - rng.random::<f64>();
        p += u.ln();
        if p < -lambda {
            return k - 1;
        }
    }
}

/// Maps a photon count to the centre value of its quantisation bin.
///
/// With `b = 0` the count is returned unchanged. Otherwise bins have width
/// `2b`, the top bin `G = C/(2b)` absorbs every larger count, and bin `q`
/// maps to `2bq - b`.
pub fn quantise(count: u64, conversion: u32, half_width: u32) -> u64 {
    if half_width == 0 {
        return count;
    }
    let width = 2 * half_width as u64;
    let top = (conversion / (2 * half_width)) as u64;
    let bin = (count / width + 1).min(top);
    width * bin - half_width as u64
}

/// `√(C·max prf)`.
pub fn snr(conversion: u32, expected: &RealImage) -> f64 {
    (conversion as f64 * expected.max()).sqrt()
}

/// Per-pixel random stream: the pixel's row-major index selects the stream.
pub fn pixel_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Result of [`synthesize`].
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub image: PhotonImage,
    pub expected: RealImage,
    pub snr: f64,
}

/// Runs the full image-formation chain.
pub fn synthesize(config: &ForwardConfig) -> Result<Synthesis> {
    config.validate()?;
    let expected = expected_image(&config.xi, config.sigma_psf, config.c_background, config.grid);
    let c = config.conversion as f64;
    let counts = par::map_range(config.grid.len(), |i| {
        let mut rng = pixel_rng(config.seed, i);
        let raw = sample_poisson(c * expected.values[i], &mut rng);
        quantise(raw, config.conversion, config.half_width)
    });
    let counts = counts
        .into_iter()
        .map(|v| u32::try_from(v).map_err(|_| Error::invalid("photon count overflows u32")))
        .collect::<Result<Vec<_>>>()?;
    let snr = snr(config.conversion, &expected);
    let image = PhotonImage::new(config.grid, counts, config.conversion, config.half_width)?;
    Ok(Synthesis { image, expected, snr })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ellipse(a: f64, b: f64, h: f64, k: f64, t: f64) -> GeometricEllipse {
        GeometricEllipse::new(a, b, h, k, t).unwrap()
    }

    #[test]
    fn grid_convention() {
        let g = PixelGrid::new(3, 5).unwrap();
        assert_eq!(g.x(0), 0.0);
        assert_eq!(g.x(4), 1.0);
        assert_eq!(g.y(0), 1.0);
        assert_eq!(g.y(2), 0.0);
        assert_eq!(g.pixel_width(), 0.25);
        assert_eq!(g.pixel_height(), 0.5);
        assert!(PixelGrid::new(1, 5).is_err());
    }

    #[test]
    fn full_and_empty_coverage() {
        let g = PixelGrid::square(16).unwrap();
        let full = averaged_ideal_image(&ellipse(10.0, 10.0, 0.5, 0.5, 0.0), g);
        assert!(full.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let none = averaged_ideal_image(&ellipse(0.1, 0.05, 5.0, 5.0, 0.3), g);
        assert!(none.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn area_is_conserved() {
        let g = PixelGrid::square(128).unwrap();
        let pixel = g.pixel_width() * g.pixel_height();
        let xi = ellipse(0.25, 0.05, 0.5, 0.5, 0.0);
        let total: f64 = averaged_ideal_image(&xi, g).values.iter().sum::<f64>() * pixel;
        assert!((total / xi.area() - 1.0).abs() < 1e-3, "{total}");
        // rotated pixels no longer tile the plane exactly
        let xi = ellipse(0.25, 0.05, 0.5, 0.5, 0.785);
        let total: f64 = averaged_ideal_image(&xi, g).values.iter().sum::<f64>() * pixel;
        assert!((total / xi.area() - 1.0).abs() < 5e-3, "{total}");
    }

    #[test]
    fn psf_constant_images() {
        let g = PixelGrid::square(9).unwrap();
        let ones = RealImage { grid: g, values: vec![1.0; 81] };
        let zeros = RealImage { grid: g, values: vec![0.0; 81] };
        for v in apply_psf(&ones, 0.2, 0.3).values {
            assert!((v - 1.0).abs() < 1e-14);
        }
        for v in apply_psf(&zeros, 0.2, 0.3).values {
            assert!((v - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn separable_blur_matches_double_sum() {
        let g = PixelGrid::new(12, 9).unwrap();
        let base = averaged_ideal_image(&ellipse(0.3, 0.2, 0.4, 0.6, 0.5), g);
        for sigma in [0.02, 0.1, 0.5] {
            let fast = apply_psf(&base, sigma, 0.15);
            let slow = apply_psf_direct(&base, sigma, 0.15);
            for (a, b) in fast.values.iter().zip(&slow.values) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn tiny_blur_is_identity() {
        let g = PixelGrid::square(16).unwrap();
        let base = averaged_ideal_image(&ellipse(0.3, 0.2, 0.4, 0.6, 0.5), g);
        let out = apply_psf(&base, 1e-6, 0.0);
        for (a, b) in out.values.iter().zip(&base.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn quantisation_examples() {
        assert_eq!(quantise(17, 256, 0), 17);
        assert_eq!(quantise(0, 256, 4), 4);
        assert_eq!(quantise(300, 256, 4), 252);
        assert_eq!(quantise(248, 256, 4), 252);
        assert_eq!(quantise(247, 256, 4), 244);
        // bin centres are fixed points
        for k in 0..300 {
            let q = quantise(k, 256, 4);
            assert_eq!(quantise(q, 256, 4), q);
        }
    }

    #[test]
    fn poisson_zero_rate() {
        let mut rng = pixel_rng(1, 0);
        for _ in 0..100 {
            assert_eq!(sample_poisson(0.0, &mut rng), 0);
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let cfg = ForwardConfig {
            xi: ellipse(0.25, 0.05, 0.5, 0.5, 0.785),
            grid: PixelGrid::square(32).unwrap(),
            sigma_psf: 0.05,
            c_background: 0.0,
            conversion: 256,
            half_width: 1,
            seed: 42,
        };
        let a = synthesize(&cfg).unwrap();
        let b = synthesize(&cfg).unwrap();
        assert_eq!(a.image, b.image);
        let c = synthesize(&ForwardConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.image.counts, c.image.counts);
    }

    #[test]
    fn invalid_quantisation_is_rejected() {
        assert!(validate_quantisation(100, 4).is_err());
        assert!(validate_quantisation(256, 3).is_err());
        assert!(validate_quantisation(4, 4).is_err());
        assert!(validate_quantisation(100, 0).is_ok());
    }
}
