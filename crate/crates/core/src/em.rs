//! Expectation-maximization fit of a 1-D Gaussian mixture to a histogram,
//! each gray level weighted by its frequency.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::histogram::{Histogram, LEVELS};
use crate::mixture::{GaussianClass, MixtureError, MixtureModel};

#[derive(Debug, Error, PartialEq)]
pub enum EmError {
    #[error("{k} classes requested but the histogram has only {support} non-empty bins")]
    TooManyClasses { k: usize, support: usize },
    #[error("initial model has {got} classes, expected {expected}")]
    ClassCount { expected: usize, got: usize },
    #[error("degenerate initialization: {0}")]
    Degenerate(String),
    #[error("invalid EM configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] MixtureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop once the log-likelihood changes by less than this.
    pub tolerance: f64,
    /// Lower bound applied to every standard deviation, in gray levels.
    pub variance_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            tolerance: 1e-8,
            variance_floor: 0.5,
        }
    }
}

impl EmConfig {
    fn validate(&self) -> Result<(), EmError> {
        if self.max_iterations == 0 {
            return Err(EmError::Config("max_iterations must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(EmError::Config("tolerance must be positive".into()));
        }
        if !(self.variance_floor > 0.0) {
            return Err(EmError::Config("variance_floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub model: MixtureModel,
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Log-likelihood of the initial model followed by one entry per iteration.
    pub history: Vec<f64>,
}

fn ln_pdf(c: &GaussianClass, x: f64) -> f64 {
    let z = (x - c.mean) / c.stddev;
    -0.5 * z * z - c.stddev.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// `sum_g h(g) ln p(g)` over the non-empty bins.
pub fn log_likelihood(histogram: &Histogram, model: &MixtureModel) -> f64 {
    histogram
        .bins()
        .iter()
        .enumerate()
        .filter(|(_, h)| **h > 0.0)
        .map(|(g, h)| h * log_mixture(model, g as f64))
        .sum()
}

fn log_mixture(model: &MixtureModel, x: f64) -> f64 {
    let terms: Vec<f64> = model
        .classes
        .iter()
        .map(|c| c.weight.ln() + ln_pdf(c, x))
        .collect();
    log_sum_exp(&terms)
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// One E+M step. Responsibilities are computed in log space so far tails do
/// not underflow to an all-zero row.
fn step(histogram: &Histogram, model: &MixtureModel, floor: f64) -> Result<MixtureModel, EmError> {
    let k = model.k();
    let mut mass = vec![0.0; k];
    let mut first = vec![0.0; k];
    let mut logs = vec![0.0; k];
    let mut resp = vec![[0.0; LEVELS]; k];
    for (g, &h) in histogram.bins().iter().enumerate() {
        if h == 0.0 {
            continue;
        }
        let x = g as f64;
        for (l, c) in logs.iter_mut().zip(&model.classes) {
            *l = c.weight.ln() + ln_pdf(c, x);
        }
        let total = log_sum_exp(&logs);
        if total == f64::NEG_INFINITY {
            return Err(EmError::Degenerate(format!(
                "every class has zero responsibility at gray level {g}"
            )));
        }
        for i in 0..k {
            let r = (logs[i] - total).exp();
            resp[i][g] = r;
            mass[i] += h * r;
            first[i] += h * r * x;
        }
    }
    let total_mass: f64 = mass.iter().sum();
    let mut classes = Vec::with_capacity(k);
    for i in 0..k {
        if !(mass[i] > 0.0) {
            return Err(EmError::Degenerate(format!("class {i} receives no responsibility")));
        }
        let mean = first[i] / mass[i];
        let var: f64 = histogram
            .bins()
            .iter()
            .enumerate()
            .filter(|(_, h)| **h > 0.0)
            .map(|(g, h)| h * resp[i][g] * (g as f64 - mean).powi(2))
            .sum::<f64>()
            / mass[i];
        classes.push(GaussianClass::new(
            mass[i] / total_mass,
            mean,
            var.sqrt().max(floor),
        ));
    }
    Ok(MixtureModel::new(classes))
}

/// Runs EM from `init` until the log-likelihood settles or the iteration cap is hit.
pub fn em_fit(
    histogram: &Histogram,
    k: usize,
    init: &MixtureModel,
    config: &EmConfig,
) -> Result<EmFit, EmError> {
    config.validate()?;
    if init.k() != k {
        return Err(EmError::ClassCount {
            expected: k,
            got: init.k(),
        });
    }
    init.validate()?;
    let support = histogram.support();
    if k > support {
        return Err(EmError::TooManyClasses { k, support });
    }
    let mut model = init.clone();
    let mut ll = log_likelihood(histogram, &model);
    let mut history = vec![ll];
    let mut iterations = 0;
    while iterations < config.max_iterations {
        model = step(histogram, &model, config.variance_floor)?;
        iterations += 1;
        let next = log_likelihood(histogram, &model);
        history.push(next);
        let delta = (next - ll).abs();
        ll = next;
        if delta < config.tolerance {
            break;
        }
    }
    Ok(EmFit {
        model,
        iterations,
        log_likelihood: ll,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_histogram, Noise, SynthSpec};

    fn truth() -> MixtureModel {
        MixtureModel::new(vec![
            GaussianClass::new(0.3, 50.0, 8.0),
            GaussianClass::new(0.4, 120.0, 12.0),
            GaussianClass::new(0.3, 190.0, 10.0),
        ])
    }

    fn histogram(noise: Noise) -> Histogram {
        synth_histogram(&SynthSpec {
            truth: truth(),
            pixel_count: 200_000,
            noise,
        })
        .unwrap()
    }

    #[test]
    fn single_class_closed_form() {
        let h = histogram(Noise::Multinomial { seed: 5 });
        let mean: f64 = h.bins().iter().enumerate().map(|(g, p)| g as f64 * p).sum();
        let var: f64 = h
            .bins()
            .iter()
            .enumerate()
            .map(|(g, p)| p * (g as f64 - mean).powi(2))
            .sum();
        let init = MixtureModel::new(vec![GaussianClass::new(0.7, 10.0, 3.0)]);
        let cfg = EmConfig {
            max_iterations: 1,
            ..EmConfig::default()
        };
        let fit = em_fit(&h, 1, &init, &cfg).unwrap();
        let c = fit.model.classes[0];
        assert_eq!(fit.iterations, 1);
        assert!((c.weight - 1.0).abs() < 1e-15);
        assert!((c.mean - mean).abs() < 1e-10);
        assert!((c.stddev.powi(2) - var).abs() < 1e-10 * var);
    }

    #[test]
    fn recovers_means_from_near_init() {
        let h = histogram(Noise::Exact);
        let init = MixtureModel::new(vec![
            GaussianClass::new(0.33, 55.0, 10.0),
            GaussianClass::new(0.34, 115.0, 10.0),
            GaussianClass::new(0.33, 185.0, 10.0),
        ]);
        let fit = em_fit(&h, 3, &init, &EmConfig::default()).unwrap();
        for (got, want) in fit.model.sorted().classes.iter().zip(&truth().classes) {
            assert!((got.mean - want.mean).abs() <= 1.0, "{got:?} vs {want:?}");
        }
        assert!((fit.model.sum_weights() - 1.0).abs() < 1e-12);
        assert!(fit.history.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn floor_and_errors() {
        // two spikes, three classes requested
        let mut counts = [0u64; LEVELS];
        counts[10] = 5;
        counts[200] = 5;
        let h = Histogram::from_counts(&counts).unwrap();
        let init = truth();
        assert_eq!(
            em_fit(&h, 3, &init, &EmConfig::default()),
            Err(EmError::TooManyClasses { k: 3, support: 2 })
        );
        let two = MixtureModel::new(vec![
            GaussianClass::new(0.5, 20.0, 5.0),
            GaussianClass::new(0.5, 180.0, 5.0),
        ]);
        let fit = em_fit(&h, 2, &two, &EmConfig::default()).unwrap();
        assert!(fit.model.classes.iter().all(|c| c.stddev >= 0.5));
        assert!(matches!(
            em_fit(&h, 3, &two, &EmConfig::default()),
            Err(EmError::ClassCount { .. })
        ));
        // one class starved of responsibility everywhere
        let starved = MixtureModel::new(vec![
            GaussianClass::new(1.0, 100.0, 50.0),
            GaussianClass::new(0.0, 100.0, 50.0),
        ]);
        assert!(matches!(
            em_fit(&h, 2, &starved, &EmConfig::default()),
            Err(EmError::Degenerate(_))
        ));
    }
}
