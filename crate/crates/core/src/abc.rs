//! Artificial Bee Colony minimizer over a bounded box.
//!
//! Each cycle runs three phases over the food sources (candidate solutions):
//!
//! 1. employed: every source proposes a neighbour that differs in one random
//!    coordinate, `v_j = x_j + phi * (x_j - x_kj)` with `k != i` and
//!    `phi ~ U[-1, 1]`, and keeps it only if the objective improves;
//! 2. onlooker: as many onlookers as sources pick a source by fitness
//!    roulette (`fit = 1/(1+J)` for `J >= 0`, `1+|J|` otherwise) and apply the
//!    same neighbour step;
//! 3. scout: any source whose trial counter reached `limit` is abandoned and
//!    redrawn uniformly inside the bounds.
//!
//! The colony of `population` bees is split evenly into employed and onlooker
//! bees, so there are `population / 2` food sources.
//!
//! Randomness comes from a ChaCha8 generator seeded with `seed`. Independent
//! consumers use separate ChaCha streams of the same seed (see [`Stream`]), so
//! results are reproducible across platforms.

use std::error::Error as StdError;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

type BoxError = Box<dyn StdError + Send + Sync + 'static>;

#[derive(Debug, Error)]
pub enum AbcError {
    #[error("invalid bounds in dimension {dim}: low {low} must be < high {high}")]
    Bounds { dim: usize, low: f64, high: f64 },
    #[error("bounds have no dimensions")]
    EmptyBounds,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension index {index} out of range for D = {dim}")]
    DimensionIndex { index: usize, dim: usize },
    #[error("fitness list is empty")]
    EmptyFitness,
    #[error("fitness {value} at index {index} is not positive")]
    NonPositiveFitness { index: usize, value: f64 },
    #[error("objective failed in cycle {iteration} ({phase} phase)")]
    Objective {
        iteration: usize,
        phase: Phase,
        #[source]
        source: BoxError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    Employed,
    Onlooker,
    Scout,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Employed => "employed",
            Phase::Onlooker => "onlooker",
            Phase::Scout => "scout",
        })
    }
}

/// Objective returned a non-finite value.
#[derive(Debug, Error)]
#[error("objective returned non-finite value {0}")]
pub struct NonFiniteObjective(pub f64);

/// Named ChaCha streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Colony = 0,
    Synthesis = 1,
    Sampling = 2,
}

/// Generator for `seed` on the given stream.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Source of uniform draws in `[0, 1]`; lets tests drive initialization with fixed values.
pub trait UnitDraw {
    fn next_unit(&mut self) -> f64;
}

impl<R: Rng> UnitDraw for R {
    fn next_unit(&mut self) -> f64 {
        self.gen::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    low: Vec<f64>,
    high: Vec<f64>,
}

impl Bounds {
    pub fn new(pairs: &[(f64, f64)]) -> Result<Self, AbcError> {
        if pairs.is_empty() {
            return Err(AbcError::EmptyBounds);
        }
        for (dim, &(low, high)) in pairs.iter().enumerate() {
            if !(low.is_finite() && high.is_finite() && low < high) {
                return Err(AbcError::Bounds { dim, low, high });
            }
        }
        Ok(Self {
            low: pairs.iter().map(|p| p.0).collect(),
            high: pairs.iter().map(|p| p.1).collect(),
        })
    }

    /// The same interval in every one of `dim` dimensions.
    pub fn uniform(dim: usize, low: f64, high: f64) -> Result<Self, AbcError> {
        Self::new(&vec![(low, high); dim])
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    pub fn clamp(&self, j: usize, value: f64) -> f64 {
        value.clamp(self.low[j], self.high[j])
    }

    pub fn contains(&self, position: &[f64]) -> bool {
        position.len() == self.dim()
            && position
                .iter()
                .enumerate()
                .all(|(j, &x)| x >= self.low[j] && x <= self.high[j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbcConfig {
    /// Colony size: employed plus onlooker bees. Must be even and >= 4.
    pub population: usize,
    /// Number of full cycles.
    pub iterations: usize,
    /// Non-improving trials before a source is abandoned.
    pub limit: usize,
    pub seed: u64,
}

impl Default for AbcConfig {
    fn default() -> Self {
        Self {
            population: 20,
            iterations: 200,
            limit: 100,
            seed: 0,
        }
    }
}

impl AbcConfig {
    pub fn validate(&self) -> Result<(), AbcError> {
        if self.population < 4 || !self.population.is_multiple_of(2) {
            return Err(AbcError::Config(format!(
                "population {} must be even and at least 4",
                self.population
            )));
        }
        if self.iterations == 0 {
            return Err(AbcError::Config("iterations must be positive".into()));
        }
        if self.limit == 0 {
            return Err(AbcError::Config("limit must be positive".into()));
        }
        Ok(())
    }

    /// Number of food sources (= employed bees = onlooker bees).
    pub fn food_sources(&self) -> usize {
        self.population / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoodSource {
    pub position: Vec<f64>,
    pub objective: f64,
    pub fitness: f64,
    pub trials: usize,
}

impl FoodSource {
    pub fn new(position: Vec<f64>, objective: f64) -> Self {
        Self {
            position,
            objective,
            fitness: fitness_of(objective),
            trials: 0,
        }
    }
}

/// Per-cycle record of the best objective so far, its position, and how many
/// sources were abandoned to scouts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    pub best_objective: Vec<f64>,
    pub best_position: Vec<Vec<f64>>,
    pub scout_count: Vec<usize>,
}

impl RunTrace {
    /// `iteration,best_J,scout_count` with a header line; iterations count from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,best_J,scout_count\n");
        for (i, (j, s)) in self
            .best_objective
            .iter()
            .zip(&self.scout_count)
            .enumerate()
        {
            out.push_str(&format!("{},{:e},{}\n", i + 1, j, s));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.best_objective.len()
    }

    pub fn is_empty(&self) -> bool {
        self.best_objective.is_empty()
    }
}

/// Maps an objective value to a strictly positive fitness, larger is better.
pub fn fitness_of(objective: f64) -> f64 {
    if objective >= 0.0 {
        1.0 / (1.0 + objective)
    } else {
        1.0 + objective.abs()
    }
}

/// Roulette probabilities proportional to fitness.
pub fn selection_probs(fitnesses: &[f64]) -> Result<Vec<f64>, AbcError> {
    if fitnesses.is_empty() {
        return Err(AbcError::EmptyFitness);
    }
    if let Some((index, &value)) = fitnesses
        .iter()
        .enumerate()
        .find(|(_, f)| !(**f > 0.0 && f.is_finite()))
    {
        return Err(AbcError::NonPositiveFitness { index, value });
    }
    let total: f64 = fitnesses.iter().sum();
    Ok(fitnesses.iter().map(|f| f / total).collect())
}

/// Neighbour of `position_i` that moves coordinate `j` relative to
/// `position_k` by factor `phi`, clamped into the bounds.
pub fn perturb(
    position_i: &[f64],
    position_k: &[f64],
    j: usize,
    phi: f64,
    bounds: &Bounds,
) -> Result<Vec<f64>, AbcError> {
    let dim = bounds.dim();
    if j >= dim || position_i.len() != dim || position_k.len() != dim {
        return Err(AbcError::DimensionIndex { index: j, dim });
    }
    let mut candidate = position_i.to_vec();
    let x = position_i[j];
    candidate[j] = bounds.clamp(j, x + phi * (x - position_k[j]));
    Ok(candidate)
}

/// Uniform point inside the bounds, one draw per dimension in order.
pub fn random_position<D: UnitDraw + ?Sized>(bounds: &Bounds, rng: &mut D) -> Vec<f64> {
    (0..bounds.dim())
        .map(|j| {
            let (lo, hi) = (bounds.low[j], bounds.high[j]);
            // keep the result inside [lo, hi] under rounding
            (lo + rng.next_unit() * (hi - lo)).clamp(lo, hi)
        })
        .collect()
}

fn evaluate<F, E>(objective: &F, x: &[f64], iteration: usize, phase: Phase) -> Result<f64, AbcError>
where
    F: Fn(&[f64]) -> Result<f64, E>,
    E: Into<BoxError>,
{
    let wrap = |source: BoxError| AbcError::Objective {
        iteration,
        phase,
        source,
    };
    let value = objective(x).map_err(|e| wrap(e.into()))?;
    if value.is_nan() {
        return Err(wrap(Box::new(NonFiniteObjective(value))));
    }
    Ok(value)
}

/// Draws `config.food_sources()` uniform sources and evaluates them.
pub fn init_population<F, E, D>(
    objective: &F,
    bounds: &Bounds,
    config: &AbcConfig,
    rng: &mut D,
) -> Result<Vec<FoodSource>, AbcError>
where
    F: Fn(&[f64]) -> Result<f64, E>,
    E: Into<BoxError>,
    D: UnitDraw + ?Sized,
{
    config.validate()?;
    (0..config.food_sources())
        .map(|_| {
            let position = random_position(bounds, rng);
            let value = evaluate(objective, &position, 0, Phase::Init)?;
            Ok(FoodSource::new(position, value))
        })
        .collect()
}

/// Result of one bee operation on a source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Improved,
    Rejected,
}

/// Record of one bee operation, kept when the colony's op log is enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct BeeOp {
    pub phase: Phase,
    pub source: usize,
    pub outcome: Outcome,
    pub objective_before: f64,
    pub objective_after: f64,
    pub trials_before: usize,
    pub trials_after: usize,
}

/// Colony state; [`run_abc`] drives it cycle by cycle. Exposed so callers can
/// step phases individually.
pub struct Colony<'a, F, R> {
    objective: F,
    bounds: &'a Bounds,
    config: AbcConfig,
    rng: R,
    sources: Vec<FoodSource>,
    best: FoodSource,
    iteration: usize,
    op_log: Option<Vec<BeeOp>>,
}

impl<'a, F, E, R> Colony<'a, F, R>
where
    F: Fn(&[f64]) -> Result<f64, E>,
    E: Into<BoxError>,
    R: Rng,
{
    pub fn new(objective: F, bounds: &'a Bounds, config: AbcConfig, mut rng: R) -> Result<Self, AbcError> {
        config.validate()?;
        let sources = init_population(&objective, bounds, &config, &mut rng)?;
        let best = sources
            .iter()
            .min_by(|a, b| a.objective.total_cmp(&b.objective))
            .expect("at least two sources")
            .clone();
        Ok(Self {
            objective,
            bounds,
            config,
            rng,
            sources,
            best,
            iteration: 0,
            op_log: None,
        })
    }

    /// Starts recording every bee operation; see [`Colony::take_op_log`].
    pub fn record_ops(&mut self) {
        self.op_log.get_or_insert_with(Vec::new);
    }

    pub fn take_op_log(&mut self) -> Vec<BeeOp> {
        self.op_log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn sources(&self) -> &[FoodSource] {
        &self.sources
    }

    pub fn best(&self) -> &FoodSource {
        &self.best
    }

    /// One neighbour step plus greedy selection on source `i`.
    pub fn bee_operation(&mut self, i: usize, phase: Phase) -> Result<Outcome, AbcError> {
        let n = self.sources.len();
        let dim = self.bounds.dim();
        let j = self.rng.gen_range(0..dim);
        let mut k = self.rng.gen_range(0..n - 1);
        if k >= i {
            k += 1;
        }
        let phi = self.rng.gen_range(-1.0..=1.0);
        let candidate = perturb(
            &self.sources[i].position,
            &self.sources[k].position,
            j,
            phi,
            self.bounds,
        )?;
        let value = evaluate(&self.objective, &candidate, self.iteration + 1, phase)?;
        let source = &mut self.sources[i];
        let (objective_before, trials_before) = (source.objective, source.trials);
        // fitness is strictly decreasing in J, so comparing J is the same
        // test without the precision loss of 1/(1+J) near J = 0
        let outcome = if value < source.objective {
            *source = FoodSource::new(candidate, value);
            if value < self.best.objective {
                self.best = source.clone();
            }
            Outcome::Improved
        } else {
            source.trials += 1;
            Outcome::Rejected
        };
        if let Some(log) = self.op_log.as_mut() {
            let source = &self.sources[i];
            log.push(BeeOp {
                phase,
                source: i,
                outcome,
                objective_before,
                objective_after: source.objective,
                trials_before,
                trials_after: source.trials,
            });
        }
        Ok(outcome)
    }

    pub fn employed_phase(&mut self) -> Result<(), AbcError> {
        for i in 0..self.sources.len() {
            self.bee_operation(i, Phase::Employed)?;
        }
        Ok(())
    }

    pub fn onlooker_phase(&mut self) -> Result<(), AbcError> {
        let fitnesses: Vec<f64> = self.sources.iter().map(|s| s.fitness).collect();
        let probs = selection_probs(&fitnesses)?;
        for _ in 0..self.config.food_sources() {
            let i = roulette(&probs, self.rng.gen::<f64>());
            self.bee_operation(i, Phase::Onlooker)?;
        }
        Ok(())
    }

    /// Redraws every source whose trials reached `limit`; returns how many.
    pub fn scout_phase(&mut self) -> Result<usize, AbcError> {
        let mut scouts = 0;
        for i in 0..self.sources.len() {
            if self.sources[i].trials >= self.config.limit {
                let position = random_position(self.bounds, &mut self.rng);
                let value = evaluate(&self.objective, &position, self.iteration + 1, Phase::Scout)?;
                self.sources[i] = FoodSource::new(position, value);
                if value < self.best.objective {
                    self.best = self.sources[i].clone();
                }
                scouts += 1;
            }
        }
        Ok(scouts)
    }

    /// Full cycle; returns the scout count.
    pub fn cycle(&mut self) -> Result<usize, AbcError> {
        self.employed_phase()?;
        self.onlooker_phase()?;
        let scouts = self.scout_phase()?;
        self.iteration += 1;
        Ok(scouts)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }
}

/// Index chosen by cumulative probability for a uniform draw `u` in `[0, 1)`.
fn roulette(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Minimizes `objective` over `bounds`. The returned source is the best ever
/// evaluated, which scouting never discards.
pub fn run_abc<F, E>(
    objective: F,
    bounds: &Bounds,
    config: &AbcConfig,
) -> Result<(FoodSource, RunTrace), AbcError>
where
    F: Fn(&[f64]) -> Result<f64, E>,
    E: Into<BoxError>,
{
    let rng = stream_rng(config.seed, Stream::Colony);
    let mut colony = Colony::new(objective, bounds, *config, rng)?;
    let mut trace = RunTrace::default();
    for _ in 0..config.iterations {
        let scouts = colony.cycle()?;
        trace.best_objective.push(colony.best.objective);
        trace.best_position.push(colony.best.position.clone());
        trace.scout_count.push(scouts);
    }
    log::debug!(
        "abc finished: {} cycles, best J = {:e}",
        config.iterations,
        colony.best.objective
    );
    Ok((colony.best, trace))
}
