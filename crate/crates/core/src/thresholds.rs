//! Minimum-error thresholds between adjacent mixture classes, and pixel labeling.
//!
//! For classes `h` and `h+1` (ordered by mean) the misclassification error at a
//! cut `T` is
//!
//! ```text
//! E(T) = P[h+1] * Phi((T - mu[h+1]) / s[h+1]) + P[h] * (1 - Phi((T - mu[h]) / s[h]))
//! ```
//!
//! and `dE/dT = 0` reduces to `A T^2 + B T + C = 0` with
//!
//! ```text
//! A = s[h]^2 - s[h+1]^2
//! B = 2 (mu[h] s[h+1]^2 - mu[h+1] s[h]^2)
//! C = (s[h] mu[h+1])^2 - (s[h+1] mu[h])^2 + 2 (s[h] s[h+1])^2 ln(s[h+1] P[h] / (s[h] P[h+1]))
//! ```

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::histogram::{GrayImage, HistogramError};
use crate::mixture::{GaussianClass, MixtureModel};

#[derive(Debug, Error, PartialEq)]
pub enum ThresholdError {
    #[error("class weight and stddev must be positive (got P = {weight}, sigma = {stddev})")]
    InvalidClass { weight: f64, stddev: f64 },
    #[error("class means must be strictly increasing ({lower} >= {upper})")]
    Unordered { lower: f64, upper: f64 },
    #[error("no real root (discriminant {discriminant})")]
    NoRealRoot { discriminant: f64 },
    #[error("no root inside ({lower}, {upper}); candidate roots {roots:?}")]
    NoFeasibleRoot {
        lower: f64,
        upper: f64,
        roots: Vec<f64>,
    },
    #[error("thresholding needs at least 2 classes, model has {0}")]
    TooFewClasses(usize),
    #[error("classes {pair} and {next}: {source}", next = pair + 1)]
    Pair {
        pair: usize,
        #[source]
        source: Box<ThresholdError>,
    },
    #[error("cuts must be strictly increasing")]
    UnorderedCuts,
}

/// Coefficients `(A, B, C)` of the stationarity quadratic.
pub fn quadratic_coefficients(lower: &GaussianClass, upper: &GaussianClass) -> (f64, f64, f64) {
    let (s0, s1) = (lower.stddev, upper.stddev);
    let (m0, m1) = (lower.mean, upper.mean);
    let (v0, v1) = (s0 * s0, s1 * s1);
    let a = v0 - v1;
    let b = 2.0 * (m0 * v1 - m1 * v0);
    let c = (s0 * m1).powi(2) - (s1 * m0).powi(2)
        + 2.0 * v0 * v1 * ((s1 * lower.weight) / (s0 * upper.weight)).ln();
    (a, b, c)
}

/// `|A T^2 + B T + C|` scaled by `|A| T^2 + |B| |T| + |C|`, the magnitude of
/// the terms being summed. Independent of the overall scale of the coefficients.
pub fn relative_residual(coeffs: (f64, f64, f64), t: f64) -> f64 {
    let (a, b, c) = coeffs;
    let value = (a * t + b) * t + c;
    let scale = a.abs() * t * t + b.abs() * t.abs() + c.abs();
    if scale == 0.0 {
        0.0
    } else {
        value.abs() / scale
    }
}

fn check_class(c: &GaussianClass) -> Result<(), ThresholdError> {
    if c.weight > 0.0 && c.stddev > 0.0 && c.weight.is_finite() && c.stddev.is_finite() {
        Ok(())
    } else {
        Err(ThresholdError::InvalidClass {
            weight: c.weight,
            stddev: c.stddev,
        })
    }
}

/// Standard normal CDF via `erfc`, accurate in both tails.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Weighted probability of putting pixels of either class on the wrong side of `t`.
pub fn classification_error(t: f64, lower: &GaussianClass, upper: &GaussianClass) -> f64 {
    // mass of the upper class below t, and of the lower class above t
    let e1 = normal_cdf((t - upper.mean) / upper.stddev);
    let e2 = normal_cdf(-(t - lower.mean) / lower.stddev);
    upper.weight * e1 + lower.weight * e2
}

/// Cut between two adjacent classes minimizing [`classification_error`]:
/// the root of the stationarity quadratic inside `(lower.mean, upper.mean)`.
pub fn optimal_threshold(lower: &GaussianClass, upper: &GaussianClass) -> Result<f64, ThresholdError> {
    check_class(lower)?;
    check_class(upper)?;
    if !(lower.mean < upper.mean) {
        return Err(ThresholdError::Unordered {
            lower: lower.mean,
            upper: upper.mean,
        });
    }
    let (a, b, c) = quadratic_coefficients(lower, upper);
    let (v0, v1) = (lower.stddev.powi(2), upper.stddev.powi(2));

    let roots: Vec<f64> = if a.abs() < 1e-12 * v0.max(v1) {
        // equal variances: B T + C = 0
        vec![-c / b]
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return Err(ThresholdError::NoRealRoot { discriminant: disc });
        }
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        let mut r = vec![q / a];
        if q != 0.0 {
            r.push(c / q);
        }
        r
    };

    let inside = |t: &f64| *t > lower.mean && *t < upper.mean;
    let mut feasible: Vec<f64> = roots.iter().copied().filter(inside).collect();
    match feasible.len() {
        0 => Err(ThresholdError::NoFeasibleRoot {
            lower: lower.mean,
            upper: upper.mean,
            roots,
        }),
        1 => Ok(feasible[0]),
        _ => {
            feasible.sort_by(|x, y| {
                classification_error(*x, lower, upper)
                    .total_cmp(&classification_error(*y, lower, upper))
            });
            log::info!(
                "both roots {:?} lie in ({}, {}); keeping the lower-error root {}",
                roots,
                lower.mean,
                upper.mean,
                feasible[0]
            );
            Ok(feasible[0])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub cuts: Vec<f64>,
    pub errors: Vec<f64>,
}

/// Cuts between every adjacent pair of a model sorted by mean.
pub fn compute_thresholds(model: &MixtureModel) -> Result<ThresholdSet, ThresholdError> {
    if model.k() < 2 {
        return Err(ThresholdError::TooFewClasses(model.k()));
    }
    let mut set = ThresholdSet {
        cuts: Vec::with_capacity(model.k() - 1),
        errors: Vec::with_capacity(model.k() - 1),
    };
    for (pair, w) in model.classes.windows(2).enumerate() {
        let t = optimal_threshold(&w[0], &w[1]).map_err(|e| ThresholdError::Pair {
            pair,
            source: Box::new(e),
        })?;
        set.cuts.push(t);
        set.errors.push(classification_error(t, &w[0], &w[1]));
    }
    // each cut lies between its own pair of means, so ordering follows
    debug_assert!(set.cuts.windows(2).all(|w| w[0] < w[1]));
    Ok(set)
}

/// Per-pixel class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<usize>,
}

impl LabelImage {
    /// Gray image with label `i` drawn as `round(mean_i)`.
    pub fn render(&self, model: &MixtureModel) -> Result<GrayImage, HistogramError> {
        let levels: Vec<u8> = model
            .classes
            .iter()
            .map(|c| c.mean.round().clamp(0.0, 255.0) as u8)
            .collect();
        let pixels = self
            .labels
            .iter()
            .map(|&l| levels[l.min(levels.len() - 1)])
            .collect();
        GrayImage::new(self.width, self.height, pixels)
    }

    /// Gray image whose values are the label indices themselves.
    pub fn raw(&self) -> Result<GrayImage, HistogramError> {
        let pixels = self.labels.iter().map(|&l| l.min(255) as u8).collect();
        GrayImage::new(self.width, self.height, pixels)
    }
}

/// Label of a pixel value: the number of cuts at or below it.
pub fn label_of(value: f64, cuts: &[f64]) -> usize {
    cuts.partition_point(|&c| c <= value)
}

pub fn segment(image: &GrayImage, cuts: &ThresholdSet) -> Result<LabelImage, ThresholdError> {
    if cuts.cuts.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(ThresholdError::UnorderedCuts);
    }
    // lookup table per gray level
    let table: Vec<usize> = (0..256).map(|g| label_of(g as f64, &cuts.cuts)).collect();
    Ok(LabelImage {
        width: image.width(),
        height: image.height(),
        labels: image.pixels().iter().map(|&p| table[p as usize]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn class(p: f64, m: f64, s: f64) -> GaussianClass {
        GaussianClass::new(p, m, s)
    }

    /// Minimizer of E over (lo, hi): scan at 1e-2, then at 1e-4 around the coarse minimum.
    fn grid_minimizer(lower: &GaussianClass, upper: &GaussianClass) -> f64 {
        let e = |t: f64| classification_error(t, lower, upper);
        let (lo, hi) = (lower.mean, upper.mean);
        let argmin = |start: f64, end: f64, step: f64| {
            let n = ((end - start) / step).floor() as usize;
            (0..=n)
                .map(|i| start + i as f64 * step)
                .filter(|t| *t > lo && *t < hi)
                .min_by(|a, b| e(*a).total_cmp(&e(*b)))
                .unwrap()
        };
        let coarse = argmin(lo, hi, 1e-2);
        argmin(coarse - 2e-2, coarse + 2e-2, 1e-4)
    }

    #[test]
    fn symmetric_pair_midpoint() {
        let t = optimal_threshold(&class(0.5, 50.0, 10.0), &class(0.5, 100.0, 10.0)).unwrap();
        assert!((t - 75.0).abs() < 1e-12);
    }

    #[test]
    fn unequal_spread_matches_grid() {
        let (a, b) = (class(0.5, 50.0, 10.0), class(0.5, 100.0, 20.0));
        let t = optimal_threshold(&a, &b).unwrap();
        let g = grid_minimizer(&a, &b);
        assert!((t - g).abs() < 1e-3, "{t} vs {g}");
    }

    #[test]
    fn cut_moves_toward_rare_class() {
        let (a, b) = (class(0.9, 50.0, 10.0), class(0.1, 100.0, 10.0));
        let t = optimal_threshold(&a, &b).unwrap();
        assert!(t > 75.0);
        assert!((t - grid_minimizer(&a, &b)).abs() < 1e-3);
    }

    #[test]
    fn error_values() {
        let (a, b) = (class(0.5, 50.0, 10.0), class(0.5, 100.0, 10.0));
        let e = classification_error(75.0, &a, &b);
        // Phi(-2.5)
        assert!((e - 6.209_665_325_776_132e-3).abs() < 1e-15);
        assert!((classification_error(-1e6, &a, &b) - 0.5).abs() < 1e-15);
        assert!((classification_error(1e6, &a, &b) - 0.5).abs() < 1e-15);
        let (c, d) = (class(0.3, 50.0, 10.0), class(0.7, 100.0, 10.0));
        assert_eq!(classification_error(f64::NEG_INFINITY, &c, &d), 0.3);
        assert_eq!(classification_error(f64::INFINITY, &c, &d), 0.7);
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(
            optimal_threshold(&class(0.0, 10.0, 1.0), &class(0.5, 20.0, 1.0)),
            Err(ThresholdError::InvalidClass { .. })
        ));
        assert!(matches!(
            optimal_threshold(&class(0.5, 30.0, 1.0), &class(0.5, 20.0, 1.0)),
            Err(ThresholdError::Unordered { .. })
        ));
        // a dominant wide class swallows a tiny narrow neighbour: no interior minimum
        let err = optimal_threshold(&class(0.999, 100.0, 40.0), &class(0.001, 105.0, 2.0)).unwrap_err();
        assert!(
            matches!(err, ThresholdError::NoRealRoot { .. } | ThresholdError::NoFeasibleRoot { .. }),
            "{err:?}"
        );
    }

    #[test]
    fn table_model_cuts() {
        let model = MixtureModel::new(vec![
            class(0.307, 32.01, 25.30),
            class(0.201, 82.30, 9.80),
            class(0.249, 127.00, 17.71),
            class(0.555, 166.10, 17.21),
        ]);
        let set = compute_thresholds(&model).unwrap();
        assert_eq!(set.cuts.len(), 3);
        for (i, w) in model.classes.windows(2).enumerate() {
            let t = set.cuts[i];
            assert!(t > w[0].mean && t < w[1].mean);
            assert!((t - grid_minimizer(&w[0], &w[1])).abs() < 1e-3);
            assert_eq!(set.errors[i], classification_error(t, &w[0], &w[1]));
        }
    }

    #[test]
    fn compute_errors() {
        let one = MixtureModel::new(vec![class(1.0, 10.0, 1.0)]);
        assert_eq!(compute_thresholds(&one), Err(ThresholdError::TooFewClasses(1)));
        let bad = MixtureModel::new(vec![
            class(0.5, 10.0, 1.0),
            class(0.25, 50.0, 2.0),
            class(0.25, 40.0, 2.0),
        ]);
        assert!(matches!(
            compute_thresholds(&bad),
            Err(ThresholdError::Pair { pair: 1, .. })
        ));
        let set = compute_thresholds(&MixtureModel::new(vec![
            class(0.5, 50.0, 10.0),
            class(0.5, 100.0, 10.0),
        ]))
        .unwrap();
        assert!((set.cuts[0] - 75.0).abs() < 1e-12);
        assert_eq!(
            serde_json::to_value(&set).unwrap().as_object().unwrap().keys().collect::<Vec<_>>(),
            vec!["cuts", "errors"]
        );
    }

    #[test]
    fn labeling_convention() {
        let set = |cuts: Vec<f64>| ThresholdSet {
            errors: vec![0.0; cuts.len()],
            cuts,
        };
        let img = GrayImage::new(2, 1, vec![50, 150]).unwrap();
        assert_eq!(segment(&img, &set(vec![100.0])).unwrap().labels, vec![0, 1]);
        let img = GrayImage::new(1, 1, vec![100]).unwrap();
        assert_eq!(segment(&img, &set(vec![100.0])).unwrap().labels, vec![1]);
        let img = GrayImage::new(5, 1, vec![10, 60, 119, 120, 255]).unwrap();
        assert_eq!(
            segment(&img, &set(vec![60.0, 120.0])).unwrap().labels,
            vec![0, 1, 1, 2, 2]
        );
        assert_eq!(
            segment(&img, &set(vec![120.0, 60.0])),
            Err(ThresholdError::UnorderedCuts)
        );
    }

    #[test]
    fn render_uses_rounded_means() {
        let model = MixtureModel::new(vec![class(0.5, 20.4, 3.0), class(0.5, 200.6, 3.0)]);
        let labels = LabelImage {
            width: 3,
            height: 1,
            labels: vec![0, 1, 1],
        };
        assert_eq!(labels.render(&model).unwrap().pixels(), &[20, 201, 201]);
        assert_eq!(labels.raw().unwrap().pixels(), &[0, 1, 1]);
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    fn arb_pair() -> impl Strategy<Value = (GaussianClass, GaussianClass)> {
        (0.05..0.95f64, 0.0..200.0f64, 2.0..40.0f64, 0.05..0.95f64, 20.0..120.0f64, 2.0..40.0f64)
            .prop_map(|(p0, m0, s0, p1, gap, s1)| (class(p0, m0, s0), class(p1, m0 + gap, s1)))
    }

    proptest! {
        #[test]
        fn error_matches_integration((a, b) in arb_pair(), t in 0.0..255.0f64) {
            let e1 = if t > b.mean - 12.0 * b.stddev {
                simpson(|x| b.pdf(x), b.mean - 12.0 * b.stddev, t, 4000)
            } else { 0.0 };
            let e2 = if t < a.mean + 12.0 * a.stddev {
                simpson(|x| a.pdf(x), t, a.mean + 12.0 * a.stddev, 4000)
            } else { 0.0 };
            let brute = b.weight * e1 + a.weight * e2;
            prop_assert!((classification_error(t, &a, &b) - brute).abs() < 1e-8);
        }

        #[test]
        fn threshold_is_local_min((a, b) in arb_pair()) {
            if let Ok(t) = optimal_threshold(&a, &b) {
                let coeffs = quadratic_coefficients(&a, &b);
                prop_assert!(relative_residual(coeffs, t) < 1e-9);
                let e = classification_error(t, &a, &b);
                prop_assert!(e <= classification_error(t - 1e-3, &a, &b));
                prop_assert!(e <= classification_error(t + 1e-3, &a, &b));
            }
        }

        #[test]
        fn labels_conserve_counts(pixels in proptest::collection::vec(any::<u8>(), 1..500), c0 in 0.0..128.0f64, c1 in 128.0..255.0f64) {
            let img = GrayImage::new(pixels.len(), 1, pixels.clone()).unwrap();
            let set = ThresholdSet { cuts: vec![c0, c1], errors: vec![0.0, 0.0] };
            let labels = segment(&img, &set).unwrap().labels;
            let mut counts = [0usize; 3];
            for l in &labels { counts[*l] += 1; }
            let expect = [
                pixels.iter().filter(|&&p| (p as f64) < c0).count(),
                pixels.iter().filter(|&&p| (p as f64) >= c0 && (p as f64) < c1).count(),
                pixels.iter().filter(|&&p| (p as f64) >= c1).count(),
            ];
            prop_assert_eq!(counts, expect);
        }
    }
}
