//! Synthetic histograms drawn from a known mixture, for parameter-recovery checks.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abc::{stream_rng, Stream};
use crate::histogram::{Histogram, LEVELS};
use crate::mixture::{MixtureError, MixtureModel};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("truth weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("pixel count must be positive")]
    NoPixels,
    #[error("truth density is zero on every gray level")]
    ZeroDensity,
    #[error(transparent)]
    Model(#[from] MixtureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Noise {
    /// Discretized density, renormalized over 0..=255.
    Exact,
    /// `pixel_count` independent draws from the exact distribution.
    Multinomial { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub truth: MixtureModel,
    pub pixel_count: u64,
    pub noise: Noise,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.truth.validate()?;
        let s = self.truth.sum_weights();
        if (s - 1.0).abs() > 1e-9 {
            return Err(SynthError::WeightSum(s));
        }
        if self.pixel_count == 0 {
            return Err(SynthError::NoPixels);
        }
        Ok(())
    }
}

fn exact_bins(truth: &MixtureModel) -> Result<[f64; LEVELS], SynthError> {
    let mut bins = [0.0; LEVELS];
    for (g, b) in bins.iter_mut().enumerate() {
        *b = truth.density(g as f64);
    }
    let total: f64 = bins.iter().sum();
    if !(total > 0.0) {
        return Err(SynthError::ZeroDensity);
    }
    for b in bins.iter_mut() {
        *b /= total;
    }
    Ok(bins)
}

pub fn synth_histogram(spec: &SynthSpec) -> Result<Histogram, SynthError> {
    spec.validate()?;
    let bins = exact_bins(&spec.truth)?;
    match spec.noise {
        Noise::Exact => Ok(Histogram::from_frequencies(bins, spec.pixel_count)
            .expect("renormalized bins are a distribution")),
        Noise::Multinomial { seed } => {
            let counts = sample_levels(&bins, spec.pixel_count, seed);
            Ok(Histogram::from_counts(&counts).expect("pixel_count > 0"))
        }
    }
}

/// Draws `n` gray levels from `bins` by inverse-CDF lookup.
fn sample_levels(bins: &[f64; LEVELS], n: u64, seed: u64) -> [u64; LEVELS] {
    let mut cdf = [0.0; LEVELS];
    let mut acc = 0.0;
    for (c, b) in cdf.iter_mut().zip(bins) {
        acc += b;
        *c = acc;
    }
    let mut rng = stream_rng(seed, Stream::Synthesis);
    let mut counts = [0u64; LEVELS];
    for _ in 0..n {
        let u = rng.gen::<f64>() * acc;
        let g = cdf.partition_point(|&c| c <= u).min(LEVELS - 1);
        counts[g] += 1;
    }
    counts
}

/// Draws per-pixel gray levels together with the generating class of each
/// pixel. Values are rounded and clamped to 0..=255.
pub fn sample_labeled_pixels(truth: &MixtureModel, n: usize, seed: u64) -> (Vec<u8>, Vec<usize>) {
    let mut rng = stream_rng(seed, Stream::Sampling);
    let total = truth.sum_weights();
    let mut pixels = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut class = truth.k() - 1;
        for (i, c) in truth.classes.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                class = i;
                break;
            }
        }
        let c = truth.classes[class];
        // Box-Muller
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        let v = (c.mean + c.stddev * z).round().clamp(0.0, 255.0);
        pixels.push(v as u8);
        labels.push(class);
    }
    (pixels, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{GaussianClass, ObjectiveSpec};

    fn three_class() -> MixtureModel {
        MixtureModel::new(vec![
            GaussianClass::new(0.3, 60.0, 12.0),
            GaussianClass::new(0.3, 120.0, 15.0),
            GaussianClass::new(0.4, 190.0, 10.0),
        ])
    }

    fn exact(truth: MixtureModel) -> Histogram {
        synth_histogram(&SynthSpec {
            truth,
            pixel_count: 1_000_000,
            noise: Noise::Exact,
        })
        .unwrap()
    }

    #[test]
    fn unimodal_peak() {
        let h = exact(MixtureModel::new(vec![GaussianClass::new(1.0, 128.0, 20.0)]));
        let argmax = (0..LEVELS).max_by(|&a, &b| h.bins()[a].total_cmp(&h.bins()[b])).unwrap();
        assert_eq!(argmax, 128);
        assert!((h.bins().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truth_objective_near_zero() {
        let truth = three_class();
        let spec = ObjectiveSpec::new(exact(truth.clone()), 3, 1.0).unwrap();
        let j = spec.evaluate(&truth).unwrap();
        assert!(j < 1e-6, "{j}");
    }

    #[test]
    fn multinomial_close_to_exact() {
        let truth = three_class();
        let h_exact = exact(truth.clone());
        let spec = SynthSpec {
            truth,
            pixel_count: 1_000_000,
            noise: Noise::Multinomial { seed: 11 },
        };
        let h = synth_histogram(&spec).unwrap();
        assert_eq!(h, synth_histogram(&spec).unwrap());
        assert!((h.bins().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // 6 binomial standard errors at the largest bin
        let n = 1e6;
        for (a, b) in h.bins().iter().zip(h_exact.bins()) {
            let bound = 6.0 * (b * (1.0 - b) / n).sqrt();
            assert!((a - b).abs() <= bound.max(1e-6));
            assert!((a - b).abs() < 5e-3);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = SynthSpec {
            truth: MixtureModel::new(vec![GaussianClass::new(0.5, 128.0, 20.0)]),
            pixel_count: 10,
            noise: Noise::Exact,
        };
        assert!(matches!(synth_histogram(&spec), Err(SynthError::WeightSum(_))));
        spec.truth.classes[0].weight = 1.0;
        spec.pixel_count = 0;
        assert_eq!(synth_histogram(&spec), Err(SynthError::NoPixels));
        spec.pixel_count = 10;
        spec.truth.classes[0].mean = 1e6;
        assert_eq!(synth_histogram(&spec), Err(SynthError::ZeroDensity));
    }
}
