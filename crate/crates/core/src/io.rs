//! PGM images, CSV exports and metadata sidecars.
//!
//! Images are written as 16-bit PGM (maxval 65535). Acquisition metadata is
//! recorded twice: as `# key=value` comment lines in the PGM header and in a
//! TOML sidecar next to the image.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::EdgePointSet;
use crate::error::{Error, Result};
use crate::forward::{grey_levels, PhotonImage, PixelGrid, RealImage};
use crate::geometry::GeometricEllipse;
use crate::uncertainty::ConfidenceRegionRaster;

pub const PGM_MAXVAL: u32 = 65535;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PgmFormat {
    /// `P2`, plain text.
    Ascii,
    /// `P5`, binary.
    Binary,
}

/// Grey-level raster as stored in a PGM file.
#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub pixels: Vec<u32>,
    pub comments: Vec<String>,
}

impl Pgm {
    /// `key=value` pairs found in the comments.
    pub fn comment_fields(&self) -> BTreeMap<String, String> {
        self.comments
            .iter()
            .filter_map(|c| {
                let (k, v) = c.split_once('=')?;
                Some((k.trim().to_string(), v.trim().to_string()))
            })
            .collect()
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    comments: Vec<String>,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                let start = self.pos + 1;
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                self.comments
                    .push(String::from_utf8_lossy(&self.bytes[start..self.pos]).trim().to_string());
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() && self.bytes[self.pos] != b'#' {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse("unexpected end of PGM data".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Parse("non-ASCII PGM header".into()))
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        let t = self.token()?;
        t.parse().map_err(|_| Error::Parse(format!("invalid PGM {what}: {t:?}")))
    }
}

/// Parses a P2 or P5 PGM image.
pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    let mut h = Header {
        bytes,
        pos: 0,
        comments: Vec::new(),
    };
    let magic = h.token()?.to_string();
    if magic != "P2" && magic != "P5" {
        return Err(Error::Parse(format!("not a PGM file (magic {magic:?})")));
    }
    let width = h.number("width")? as usize;
    let height = h.number("height")? as usize;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > PGM_MAXVAL {
        return Err(Error::Parse("PGM dimensions or maxval out of range".into()));
    }
    let n = width * height;
    let pixels = if magic == "P2" {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(h.number("sample")?);
        }
        v
    } else {
        // exactly one whitespace byte separates the header from the raster
        if h.pos >= bytes.len() {
            return Err(Error::Parse("truncated PGM raster".into()));
        }
        let data = &bytes[h.pos + 1..];
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        if data.len() < need {
            return Err(Error::Parse(format!("PGM raster has {} bytes, expected {need}", data.len())));
        }
        if wide {
            data[..need]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
                .collect()
        } else {
            data[..need].iter().map(|&b| b as u32).collect()
        }
    };
    if let Some(v) = pixels.iter().find(|&&v| v > maxval) {
        return Err(Error::Parse(format!("PGM sample {v} exceeds maxval {maxval}")));
    }
    Ok(Pgm {
        width,
        height,
        maxval,
        pixels,
        comments: h.comments,
    })
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pgm(&bytes)
}

/// Serialises a PGM image. Samples must not exceed `maxval`.
pub fn encode_pgm(pgm: &Pgm, format: PgmFormat) -> Result<Vec<u8>> {
    if pgm.pixels.len() != pgm.width * pgm.height {
        return Err(Error::invalid("PGM pixel count does not match dimensions"));
    }
    if let Some(v) = pgm.pixels.iter().find(|&&v| v > pgm.maxval) {
        return Err(Error::invalid(format!("sample {v} exceeds PGM maxval {}", pgm.maxval)));
    }
    let mut out = Vec::new();
    let magic = match format {
        PgmFormat::Ascii => "P2",
        PgmFormat::Binary => "P5",
    };
    writeln!(out, "{magic}")?;
    for c in &pgm.comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "{} {}", pgm.width, pgm.height)?;
    writeln!(out, "{}", pgm.maxval)?;
    match format {
        PgmFormat::Ascii => {
            for row in pgm.pixels.chunks(pgm.width) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
        PgmFormat::Binary if pgm.maxval > 255 => {
            for &v in &pgm.pixels {
                out.extend_from_slice(&(v as u16).to_be_bytes());
            }
        }
        PgmFormat::Binary => out.extend(pgm.pixels.iter().map(|&v| v as u8)),
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, pgm: &Pgm, format: PgmFormat) -> Result<()> {
    fs::write(path, encode_pgm(pgm, format)?)?;
    Ok(())
}

/// Acquisition and ground-truth metadata of an image. Every field is optional
/// so that partial records from different sources can be merged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageMetadata {
    #[serde(rename = "C", skip_serializing_if = "Option::is_none")]
    pub conversion: Option<u32>,
    #[serde(rename = "b", skip_serializing_if = "Option::is_none")]
    pub half_width: Option<u32>,
    #[serde(rename = "G", skip_serializing_if = "Option::is_none")]
    pub grey_levels: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cols: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_psf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_background: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<GeometricEllipse>,
}

impl ImageMetadata {
    /// Fills every unset field from `other`.
    pub fn or(self, other: ImageMetadata) -> ImageMetadata {
        ImageMetadata {
            conversion: self.conversion.or(other.conversion),
            half_width: self.half_width.or(other.half_width),
            grey_levels: self.grey_levels.or(other.grey_levels),
            seed: self.seed.or(other.seed),
            rows: self.rows.or(other.rows),
            cols: self.cols.or(other.cols),
            snr: self.snr.or(other.snr),
            sigma_psf: self.sigma_psf.or(other.sigma_psf),
            c_background: self.c_background.or(other.c_background),
            truth: self.truth.or(other.truth),
        }
    }

    /// PGM comment lines for the fields the header records.
    pub fn to_comments(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(c) = self.conversion {
            out.push(format!("C={c}"));
        }
        if let Some(b) = self.half_width {
            out.push(format!("b={b}"));
        }
        if let Some(g) = self.grey_levels {
            out.push(format!("G={g}"));
        }
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        if let (Some(r), Some(c)) = (self.rows, self.cols) {
            out.push(format!("grid={r}x{c}"));
        }
        if let Some(s) = self.snr {
            out.push(format!("snr={s:.4}"));
        }
        out
    }

    /// Reads the fields recorded by [`to_comments`](Self::to_comments). Unknown keys are ignored.
    pub fn from_comments(fields: &BTreeMap<String, String>) -> Result<ImageMetadata> {
        fn parse<T: std::str::FromStr>(fields: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
            fields
                .get(key)
                .map(|v| v.parse::<T>().map_err(|_| Error::Parse(format!("invalid value for {key}: {v:?}"))))
                .transpose()
        }
        let (rows, cols) = match fields.get("grid") {
            Some(g) => {
                let (r, c) = g
                    .split_once('x')
                    .ok_or_else(|| Error::Parse(format!("invalid grid {g:?}")))?;
                let r = r.trim().parse().map_err(|_| Error::Parse(format!("invalid grid {g:?}")))?;
                let c = c.trim().parse().map_err(|_| Error::Parse(format!("invalid grid {g:?}")))?;
                (Some(r), Some(c))
            }
            None => (None, None),
        };
        Ok(ImageMetadata {
            conversion: parse(fields, "C")?,
            half_width: parse(fields, "b")?,
            grey_levels: parse(fields, "G")?,
            seed: parse(fields, "seed")?,
            rows,
            cols,
            snr: parse(fields, "snr")?,
            sigma_psf: None,
            c_background: None,
            truth: None,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<ImageMetadata> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Sidecar path for an image: `scene.pgm` → `scene.meta.toml`.
pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("meta.toml")
}

pub fn write_sidecar(image: &Path, meta: &ImageMetadata) -> Result<()> {
    fs::write(sidecar_path(image), meta.to_toml()?)?;
    Ok(())
}

/// Reads the sidecar of `image` if it exists.
pub fn read_sidecar(image: &Path) -> Result<Option<ImageMetadata>> {
    let path = sidecar_path(image);
    if !path.exists() {
        return Ok(None);
    }
    ImageMetadata::from_toml(&fs::read_to_string(path)?).map(Some)
}

/// PGM raster of a photon image with its metadata in the header.
pub fn photon_image_to_pgm(img: &PhotonImage, meta: &ImageMetadata) -> Result<Pgm> {
    if let Some(v) = img.counts.iter().find(|&&v| v > PGM_MAXVAL) {
        return Err(Error::invalid(format!("count {v} does not fit a 16-bit PGM")));
    }
    Ok(Pgm {
        width: img.grid.cols(),
        height: img.grid.rows(),
        maxval: PGM_MAXVAL,
        pixels: img.counts.clone(),
        comments: meta.to_comments(),
    })
}

/// Photon image from PGM samples. `gain` multiplies every sample; `C` and `b`
/// come from the caller.
pub fn pgm_to_photon_image(pgm: &Pgm, conversion: u32, half_width: u32, gain: u32) -> Result<PhotonImage> {
    let grid = PixelGrid::new(pgm.height, pgm.width)?;
    let counts = pgm
        .pixels
        .iter()
        .map(|&v| v.checked_mul(gain).ok_or_else(|| Error::invalid("photon gain overflows counts")))
        .collect::<Result<Vec<_>>>()?;
    PhotonImage::new(grid, counts, conversion, half_width)
}

/// Metadata describing a synthetic image.
pub fn synthetic_metadata(img: &PhotonImage, seed: u64, snr: f64) -> ImageMetadata {
    ImageMetadata {
        conversion: Some(img.conversion),
        half_width: Some(img.half_width),
        grey_levels: grey_levels(img.conversion, img.half_width),
        seed: Some(seed),
        rows: Some(img.grid.rows()),
        cols: Some(img.grid.cols()),
        snr: Some(snr),
        ..ImageMetadata::default()
    }
}

/// Boolean mask as an 8-bit PGM with values 0 and 255.
pub fn mask_to_pgm(mask: &[bool], width: usize, height: usize) -> Pgm {
    Pgm {
        width,
        height,
        maxval: 255,
        pixels: mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
        comments: Vec::new(),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Writes a row-major matrix as CSV, one image row per line.
pub fn write_matrix_csv<W: Write>(out: &mut W, values: &[f64], cols: usize) -> Result<()> {
    for row in values.chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn write_real_image_csv(path: &Path, img: &RealImage) -> Result<()> {
    let mut w = create(path)?;
    write_matrix_csv(&mut w, &img.values, img.grid.cols())?;
    w.flush()?;
    Ok(())
}

/// `z̄` field of a confidence region, one raster row per line.
pub fn write_zbar_csv(path: &Path, region: &ConfidenceRegionRaster) -> Result<()> {
    let mut w = create(path)?;
    write_matrix_csv(&mut w, &region.zbar, region.resolution)?;
    w.flush()?;
    Ok(())
}

pub fn write_edges_csv<W: Write>(out: &mut W, edges: &EdgePointSet) -> Result<()> {
    writeln!(out, "x,y,weight")?;
    for (p, w) in edges.points.iter().zip(&edges.weights) {
        writeln!(out, "{},{},{}", p.0, p.1, w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Pgm {
        Pgm {
            width: 3,
            height: 2,
            maxval: PGM_MAXVAL,
            pixels: vec![0, 1, 300, 65535, 42, 7],
            comments: vec!["C=256".into(), "b=4".into()],
        }
    }

    #[test]
    fn round_trip_both_formats() {
        for format in [PgmFormat::Ascii, PgmFormat::Binary] {
            let bytes = encode_pgm(&sample(), format).unwrap();
            let back = parse_pgm(&bytes).unwrap();
            assert_eq!(back, sample());
        }
    }

    #[test]
    fn eight_bit_binary() {
        let pgm = Pgm {
            maxval: 255,
            pixels: vec![0, 255, 3, 4, 5, 6],
            ..sample()
        };
        let back = parse_pgm(&encode_pgm(&pgm, PgmFormat::Binary).unwrap()).unwrap();
        assert_eq!(back.pixels, pgm.pixels);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_pgm(b"P6\n1 1\n255\n\0").is_err());
        assert!(parse_pgm(b"P2\n2 2\n255\n1 2 3").is_err());
        assert!(parse_pgm(b"P2\n1 1\n10\n11").is_err());
        let too_big = Pgm { maxval: 10, ..sample() };
        assert!(encode_pgm(&too_big, PgmFormat::Ascii).is_err());
    }

    #[test]
    fn comments_between_header_tokens() {
        let pgm = parse_pgm(b"P2\n# C=16\n2 # b=0\n1\n# seed=3\n9\n4 5\n").unwrap();
        let meta = ImageMetadata::from_comments(&pgm.comment_fields()).unwrap();
        assert_eq!(meta.conversion, Some(16));
        assert_eq!(meta.half_width, Some(0));
        assert_eq!(meta.seed, Some(3));
        assert_eq!(pgm.pixels, vec![4, 5]);
    }

    #[test]
    fn metadata_comment_round_trip() {
        let meta = ImageMetadata {
            conversion: Some(256),
            half_width: Some(1),
            grey_levels: Some(128),
            seed: Some(9),
            rows: Some(32),
            cols: Some(30),
            snr: Some(12.9283),
            ..ImageMetadata::default()
        };
        let fields: BTreeMap<String, String> = meta
            .to_comments()
            .iter()
            .map(|c| {
                let (k, v) = c.split_once('=').unwrap();
                (k.to_string(), v.to_string())
            })
            .collect();
        assert_eq!(ImageMetadata::from_comments(&fields).unwrap(), meta);
    }

    #[test]
    fn unquantised_header_has_no_grey_levels() {
        let grid = PixelGrid::square(4).unwrap();
        let img = PhotonImage::new(grid, vec![1; 16], 64, 0).unwrap();
        let comments = synthetic_metadata(&img, 1, 8.0).to_comments();
        assert!(comments.iter().all(|c| !c.starts_with("G=")));
        assert!(comments.contains(&"b=0".to_string()));
    }

    #[test]
    fn metadata_toml_round_trip_and_merge() {
        let a = ImageMetadata {
            conversion: Some(32),
            truth: Some(GeometricEllipse::new(0.3, 0.1, 0.5, 0.5, 0.2).unwrap()),
            ..ImageMetadata::default()
        };
        let text = a.to_toml().unwrap();
        assert_eq!(ImageMetadata::from_toml(&text).unwrap(), a);
        let b = ImageMetadata {
            conversion: Some(64),
            half_width: Some(2),
            ..ImageMetadata::default()
        };
        let merged = a.clone().or(b);
        assert_eq!(merged.conversion, Some(32));
        assert_eq!(merged.half_width, Some(2));
        assert!(ImageMetadata::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn oversized_counts_are_rejected() {
        let grid = PixelGrid::square(2).unwrap();
        let img = PhotonImage::new(grid, vec![70_000, 0, 0, 0], 1 << 20, 0).unwrap();
        assert!(photon_image_to_pgm(&img, &ImageMetadata::default()).is_err());
    }
}
