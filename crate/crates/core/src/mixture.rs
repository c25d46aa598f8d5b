//! Gaussian mixture over gray levels, the histogram-fit objective, and the
//! flat parameter encoding used by the optimizer.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::histogram::{Histogram, LEVELS};

#[derive(Debug, Error, PartialEq)]
pub enum MixtureError {
    #[error("candidate length {len} is not 3*K for K = {k}")]
    BadLength { len: usize, k: usize },
    #[error("model has {got} classes, objective expects {expected}")]
    ClassCount { expected: usize, got: usize },
    #[error("class {index}: {reason}")]
    InvalidClass { index: usize, reason: String },
    #[error("model has no classes")]
    Empty,
}

/// One mixture component: prior weight `P`, mean `mu`, standard deviation `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianClass {
    pub weight: f64,
    pub mean: f64,
    pub stddev: f64,
}

impl GaussianClass {
    pub fn new(weight: f64, mean: f64, stddev: f64) -> Self {
        Self {
            weight,
            mean,
            stddev,
        }
    }

    /// Unweighted normal density at `x`.
    pub fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.stddev;
        (-0.5 * z * z).exp() / ((2.0 * PI).sqrt() * self.stddev)
    }

    /// `P * pdf(x)`.
    pub fn weighted_pdf(&self, x: f64) -> f64 {
        self.weight * self.pdf(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub classes: Vec<GaussianClass>,
}

impl MixtureModel {
    pub fn new(classes: Vec<GaussianClass>) -> Self {
        Self { classes }
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn sum_weights(&self) -> f64 {
        self.classes.iter().map(|c| c.weight).sum()
    }

    /// Checks K >= 1, sigma > 0 and 0 <= P <= 1 on every class.
    pub fn validate(&self) -> Result<(), MixtureError> {
        if self.classes.is_empty() {
            return Err(MixtureError::Empty);
        }
        for (index, c) in self.classes.iter().enumerate() {
            let bad = |reason: &str| {
                Err(MixtureError::InvalidClass {
                    index,
                    reason: reason.to_string(),
                })
            };
            if !(c.stddev.is_finite() && c.stddev > 0.0) {
                return bad("stddev must be positive and finite");
            }
            if !(0.0..=1.0).contains(&c.weight) {
                return bad("weight must lie in [0, 1]");
            }
            if !c.mean.is_finite() {
                return bad("mean must be finite");
            }
        }
        Ok(())
    }

    /// Mixture density at gray level `x`. Underflow far from every mean gives 0.
    pub fn density(&self, x: f64) -> f64 {
        self.classes.iter().map(|c| c.weighted_pdf(x)).sum()
    }

    /// Flat encoding `[P1, s1, m1, P2, s2, m2, ...]`.
    pub fn encode(&self) -> Vec<f64> {
        self.classes
            .iter()
            .flat_map(|c| [c.weight, c.stddev, c.mean])
            .collect()
    }

    /// Inverse of [`MixtureModel::encode`].
    pub fn decode(vector: &[f64], k: usize) -> Result<Self, MixtureError> {
        if k == 0 || vector.len() != 3 * k {
            return Err(MixtureError::BadLength {
                len: vector.len(),
                k,
            });
        }
        Ok(Self {
            classes: vector
                .chunks_exact(3)
                .map(|t| GaussianClass {
                    weight: t[0],
                    stddev: t[1],
                    mean: t[2],
                })
                .collect(),
        })
    }

    /// Reorders classes by ascending mean; exact ties fall back to stddev, then weight.
    pub fn sorted(&self) -> Self {
        let mut classes = self.classes.clone();
        classes.sort_by(|a, b| {
            a.mean
                .total_cmp(&b.mean)
                .then_with(|| a.stddev.total_cmp(&b.stddev))
                .then_with(|| a.weight.total_cmp(&b.weight))
        });
        Self { classes }
    }

    pub fn is_sorted(&self) -> bool {
        self.classes
            .windows(2)
            .all(|w| w[0].mean.partial_cmp(&w[1].mean) == Some(Ordering::Less))
    }
}

pub fn mixture_density(model: &MixtureModel, x: f64) -> f64 {
    model.density(x)
}

pub fn decode_candidate(vector: &[f64], k: usize) -> Result<MixtureModel, MixtureError> {
    MixtureModel::decode(vector, k)
}

pub fn encode_candidate(model: &MixtureModel) -> Vec<f64> {
    model.encode()
}

pub fn sort_classes(model: &MixtureModel) -> MixtureModel {
    model.sorted()
}

/// Histogram-fit objective: mean squared error between the mixture density and
/// the histogram at the 256 gray levels, plus `omega * |sum P - 1|`.
#[derive(Debug, Clone)]
pub struct ObjectiveSpec {
    histogram: Histogram,
    k: usize,
    omega: f64,
}

impl ObjectiveSpec {
    pub fn new(histogram: Histogram, k: usize, omega: f64) -> Result<Self, MixtureError> {
        if k == 0 {
            return Err(MixtureError::Empty);
        }
        if !(omega.is_finite() && omega >= 0.0) {
            return Err(MixtureError::InvalidClass {
                index: 0,
                reason: format!("penalty weight {omega} must be finite and >= 0"),
            });
        }
        Ok(Self {
            histogram,
            k,
            omega,
        })
    }

    pub fn histogram(&self) -> &Histogram {
        &self.histogram
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Number of evaluation points.
    pub fn n(&self) -> usize {
        LEVELS
    }

    pub fn evaluate(&self, model: &MixtureModel) -> Result<f64, MixtureError> {
        if model.k() != self.k {
            return Err(MixtureError::ClassCount {
                expected: self.k,
                got: model.k(),
            });
        }
        Ok(self.evaluate_unchecked(&model.classes))
    }

    /// Objective on a flat candidate vector; the optimizer's hot path.
    pub fn evaluate_vector(&self, vector: &[f64]) -> Result<f64, MixtureError> {
        if vector.len() != 3 * self.k {
            return Err(MixtureError::BadLength {
                len: vector.len(),
                k: self.k,
            });
        }
        let classes: Vec<GaussianClass> = vector
            .chunks_exact(3)
            .map(|t| GaussianClass::new(t[0], t[2], t[1]))
            .collect();
        Ok(self.evaluate_unchecked(&classes))
    }

    fn evaluate_unchecked(&self, classes: &[GaussianClass]) -> f64 {
        let sse: f64 = self
            .histogram
            .bins()
            .iter()
            .enumerate()
            .map(|(g, h)| {
                let x = g as f64;
                let p: f64 = classes.iter().map(|c| c.weighted_pdf(x)).sum();
                (p - h) * (p - h)
            })
            .sum();
        let sum_p: f64 = classes.iter().map(|c| c.weight).sum();
        sse / LEVELS as f64 + self.omega * (sum_p - 1.0).abs()
    }
}

pub fn objective_j(model: &MixtureModel, spec: &ObjectiveSpec) -> Result<f64, MixtureError> {
    spec.evaluate(model)
}

/// JSON form of a fitted model. `objective` and `sum_weights` are optional on
/// input so hand-written init files only need the classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub classes: Vec<GaussianClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sum_weights: Option<f64>,
}

impl ModelReport {
    /// Sorts the model and attaches its objective value and weight sum.
    pub fn new(model: &MixtureModel, objective: f64) -> Self {
        let sorted = model.sorted();
        Self {
            sum_weights: Some(sorted.sum_weights()),
            classes: sorted.classes,
            objective: Some(objective),
        }
    }

    pub fn model(&self) -> MixtureModel {
        MixtureModel::new(self.classes.clone())
    }
}
