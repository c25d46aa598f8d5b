//! Gray images and their normalized 256-bin histograms.

use std::fmt::Write as _;

use thiserror::Error;

use crate::pgm::{self, PgmError};

/// Number of gray levels.
pub const LEVELS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum HistogramError {
    #[error("image has no pixels")]
    EmptyImage,
    #[error("pixel buffer holds {got} values, expected {width}x{height}")]
    DimensionMismatch {
        width: usize,
        height: usize,
        got: usize,
    },
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error("histogram CSV line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("histogram bins are invalid: {0}")]
    Invalid(String),
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, HistogramError> {
        if width.checked_mul(height) != Some(pixels.len()) {
            return Err(HistogramError::DimensionMismatch {
                width,
                height,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Decodes a PGM (P2 or P5) byte buffer.
pub fn load_grayscale_image(bytes: &[u8]) -> Result<GrayImage, HistogramError> {
    Ok(pgm::decode(bytes)?)
}

/// Normalized gray-level distribution: `bins[g]` is the fraction of pixels at level `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    bins: [f64; LEVELS],
    total_pixels: u64,
}

impl Histogram {
    /// Builds a histogram from raw counts.
    pub fn from_counts(counts: &[u64; LEVELS]) -> Result<Self, HistogramError> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(HistogramError::EmptyImage);
        }
        let mut bins = [0.0; LEVELS];
        for (b, &c) in bins.iter_mut().zip(counts) {
            *b = c as f64 / total as f64;
        }
        Ok(Self {
            bins,
            total_pixels: total,
        })
    }

    /// Wraps already-normalized frequencies. `total_pixels` is informational.
    pub fn from_frequencies(
        bins: [f64; LEVELS],
        total_pixels: u64,
    ) -> Result<Self, HistogramError> {
        if bins.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(HistogramError::Invalid(
                "bins must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = bins.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(HistogramError::Invalid(format!("bins sum to {sum}, not 1")));
        }
        if total_pixels == 0 {
            return Err(HistogramError::EmptyImage);
        }
        Ok(Self { bins, total_pixels })
    }

    pub fn bins(&self) -> &[f64; LEVELS] {
        &self.bins
    }

    pub fn total_pixels(&self) -> u64 {
        self.total_pixels
    }

    /// Number of bins with non-zero frequency.
    pub fn support(&self) -> usize {
        self.bins.iter().filter(|b| **b > 0.0).count()
    }

    /// `gray_level,frequency` lines, 256 rows, no header.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(LEVELS * 24);
        for (g, f) in self.bins.iter().enumerate() {
            let _ = writeln!(s, "{g},{f:e}");
        }
        s
    }

    /// Parses the CSV form written by [`Histogram::to_csv`]. An optional
    /// `gray_level,frequency` header line is accepted. Frequencies are
    /// renormalized, so raw counts are accepted too.
    pub fn from_csv(text: &str) -> Result<Self, HistogramError> {
        let mut bins = [0.0; LEVELS];
        let mut seen = [false; LEVELS];
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim();
            if line.is_empty() || (idx == 0 && line.starts_with("gray_level")) {
                continue;
            }
            let csv_err = |reason: String| HistogramError::Csv {
                line: line_no,
                reason,
            };
            let (g, f) = line
                .split_once(',')
                .ok_or_else(|| csv_err("expected two comma-separated fields".into()))?;
            let g: usize = g
                .trim()
                .parse()
                .map_err(|e| csv_err(format!("gray level: {e}")))?;
            let f: f64 = f
                .trim()
                .parse()
                .map_err(|e| csv_err(format!("frequency: {e}")))?;
            if g >= LEVELS {
                return Err(csv_err(format!("gray level {g} out of range")));
            }
            if !f.is_finite() || f < 0.0 {
                return Err(csv_err(format!("frequency {f} must be finite and >= 0")));
            }
            if seen[g] {
                return Err(csv_err(format!("duplicate gray level {g}")));
            }
            seen[g] = true;
            bins[g] = f;
        }
        let sum: f64 = bins.iter().sum();
        if sum <= 0.0 {
            return Err(HistogramError::EmptyImage);
        }
        for b in bins.iter_mut() {
            *b /= sum;
        }
        Ok(Self {
            bins,
            total_pixels: sum.round().max(1.0) as u64,
        })
    }
}

/// Counts pixels per level and normalizes by the pixel count.
pub fn build_histogram(image: &GrayImage) -> Result<Histogram, HistogramError> {
    if image.is_empty() {
        return Err(HistogramError::EmptyImage);
    }
    Histogram::from_counts(&pixel_counts(image))
}

pub fn pixel_counts(image: &GrayImage) -> [u64; LEVELS] {
    let mut counts = [0u64; LEVELS];
    for &p in image.pixels() {
        counts[p as usize] += 1;
    }
    counts
}
