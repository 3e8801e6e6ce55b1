//! EXPLORE: maximum-likelihood fitting of Σ from comparability labels under
//! the scaled-logistic response model
//!
//! ```text
//! P(y = 1 | x) = F*(xᵀΣx),   F*(t) = (2 − ε) / (1 + eᵗ)
//! ```
//!
//! where `x = φ_a − φ_b` and `y = 1` marks a comparable pair. With `ε = 0`
//! this is the factor-2 logistic model; `ε > 0` makes it strongly
//! identifiable. The log-likelihood is concave in Σ, and is maximized by
//! minibatch stochastic gradient ascent projected onto the PSD cone.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::metric::{FairMetric, MetricMethod};

/// One human judgement: are items `a` and `b` comparable?
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub a: usize,
    pub b: usize,
    pub comparable: bool,
}

impl Triplet {
    pub fn new(a: usize, b: usize, comparable: bool) -> Self {
        Triplet { a, b, comparable }
    }

    /// The label as a number in `{0, 1}`.
    pub fn y(&self) -> f64 {
        if self.comparable {
            1.0
        } else {
            0.0
        }
    }

    pub fn swapped(&self) -> Self {
        Triplet::new(self.b, self.a, self.comparable)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ComparisonTriplets {
    triplets: Vec<Triplet>,
}

impl ComparisonTriplets {
    /// Validates indices against a table of `n_items` rows.
    pub fn new(triplets: Vec<Triplet>, n_items: usize) -> Result<Self> {
        for (i, t) in triplets.iter().enumerate() {
            if t.a >= n_items || t.b >= n_items {
                return Err(Error::invalid(format!(
                    "triplet {i} references item {} but the table has {n_items} rows",
                    t.a.max(t.b)
                )));
            }
            if t.a == t.b {
                return Err(Error::invalid(format!("triplet {i} compares item {} with itself", t.a)));
            }
        }
        Ok(ComparisonTriplets { triplets })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn get(&self, i: usize) -> Triplet {
        self.triplets[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Triplet> {
        self.triplets.iter()
    }

    pub fn as_slice(&self) -> &[Triplet] {
        &self.triplets
    }

    /// Number of (comparable, incomparable) labels.
    pub fn label_counts(&self) -> (usize, usize) {
        let pos = self.triplets.iter().filter(|t| t.comparable).count();
        (pos, self.len() - pos)
    }

    pub fn swapped(&self) -> Self {
        ComparisonTriplets {
            triplets: self.triplets.iter().map(Triplet::swapped).collect(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        ComparisonTriplets {
            triplets: indices.iter().map(|&i| self.triplets[i]).collect(),
        }
    }
}

/// Pair differences `xᵢ = φ_a − φ_b` and labels, laid out for repeated passes.
#[derive(Debug, Clone)]
pub(crate) struct PairDiffs {
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl PairDiffs {
    pub fn new(table: &EmbeddingTable, data: &ComparisonTriplets) -> Result<Self> {
        let dim = table.dim();
        let mut x = Vec::with_capacity(data.len() * dim);
        let mut y = Vec::with_capacity(data.len());
        for t in data.iter() {
            if t.a >= table.len() || t.b >= table.len() {
                return Err(Error::invalid(format!(
                    "triplet references item {} but the table has {} rows",
                    t.a.max(t.b),
                    table.len()
                )));
            }
            let (ra, rb) = (table.row(t.a), table.row(t.b));
            x.extend(ra.iter().zip(rb).map(|(p, q)| p - q));
            y.push(t.y());
        }
        Ok(PairDiffs { dim, x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn diff(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn quad(&self, sigma: &Matrix, i: usize) -> f64 {
        linalg::quad_form(sigma, self.diff(i))
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon must lie in [0, 1), got {epsilon}")));
    }
    Ok(())
}

/// `F*(t) = (2 − ε) / (1 + eᵗ)`: probability that a pair at squared
/// distance `t` is judged comparable.
pub fn scaled_link(t: f64, epsilon: f64) -> Result<f64> {
    if t.is_nan() {
        return Err(Error::NonFinite("link argument"));
    }
    check_epsilon(epsilon)?;
    Ok((2.0 - epsilon) * logistic(-t))
}

fn log_link(t: f64, epsilon: f64) -> f64 {
    (2.0 - epsilon).ln() - softplus(t)
}

// log(1 − F*(t)) = log(eᵗ − 1 + ε) − log(1 + eᵗ); None where the argument is ≤ 0.
fn log_one_minus_link(t: f64, epsilon: f64) -> Option<f64> {
    let log_num = if t > 30.0 {
        t + (-(1.0 - epsilon) * (-t).exp()).ln_1p()
    } else {
        let num = t.exp_m1() + epsilon;
        if num <= 0.0 {
            return None;
        }
        num.ln()
    };
    Some(log_num - softplus(t))
}

// d/dt of the per-sample log-likelihood.
fn dlog_lik_dt(t: f64, y: f64, epsilon: f64) -> Option<f64> {
    let s = logistic(t);
    let neg = if y > 0.0 { -y * s } else { 0.0 };
    if y < 1.0 {
        let denom = t.exp_m1() + epsilon;
        if denom <= 0.0 {
            return None;
        }
        Some(neg + (1.0 - y) * (2.0 - epsilon) * s / denom)
    } else {
        Some(neg)
    }
}

fn sample_log_lik(t: f64, y: f64, epsilon: f64) -> Option<f64> {
    let mut v = 0.0;
    if y > 0.0 {
        v += y * log_link(t, epsilon);
    }
    if y < 1.0 {
        v += (1.0 - y) * log_one_minus_link(t, epsilon)?;
    }
    Some(v)
}

fn log_arg_error(i: usize, t: f64) -> Error {
    Error::invalid(format!(
        "log of a nonpositive argument at triplet {i} (quadratic form {t:e}); use epsilon > 0 or a PSD metric"
    ))
}

pub(crate) fn log_lik_diffs(sigma: &Matrix, diffs: &PairDiffs, epsilon: f64) -> Result<f64> {
    if diffs.len() == 0 {
        return Err(Error::invalid("log-likelihood of an empty data set"));
    }
    let mut total = 0.0;
    for i in 0..diffs.len() {
        let t = diffs.quad(sigma, i);
        total += sample_log_lik(t, diffs.y[i], epsilon).ok_or_else(|| log_arg_error(i, t))?;
    }
    Ok(total / diffs.len() as f64)
}

pub(crate) fn grad_diffs(
    sigma: &Matrix,
    diffs: &PairDiffs,
    batch: impl ExactSizeIterator<Item = usize>,
    epsilon: f64,
) -> Result<Matrix> {
    let d = diffs.dim;
    let mut g = Matrix::zeros(d, d);
    let n = batch.len();
    if n == 0 {
        return Ok(g);
    }
    for i in batch {
        let t = diffs.quad(sigma, i);
        let w = dlog_lik_dt(t, diffs.y[i], epsilon).ok_or_else(|| log_arg_error(i, t))?;
        linalg::add_scaled_outer(&mut g, w, diffs.diff(i));
    }
    Ok(linalg::symmetrize(&(g / n as f64)))
}

/// Average log-likelihood `(1/n) Σ [yᵢ log F*(tᵢ) + (1−yᵢ) log(1 − F*(tᵢ))]`
/// with `tᵢ = xᵢᵀΣxᵢ`.
pub fn log_likelihood(
    metric: &FairMetric,
    embeddings: &EmbeddingTable,
    data: &ComparisonTriplets,
    epsilon: f64,
) -> Result<f64> {
    check_epsilon(epsilon)?;
    check_dims(metric, embeddings)?;
    log_lik_diffs(metric.matrix(), &PairDiffs::new(embeddings, data)?, epsilon)
}

/// Gradient of [`log_likelihood`] with respect to Σ. An empty batch gives
/// the zero matrix.
pub fn grad_log_likelihood(
    metric: &FairMetric,
    embeddings: &EmbeddingTable,
    batch: &ComparisonTriplets,
    epsilon: f64,
) -> Result<Matrix> {
    check_epsilon(epsilon)?;
    check_dims(metric, embeddings)?;
    let diffs = PairDiffs::new(embeddings, batch)?;
    grad_diffs(metric.matrix(), &diffs, 0..diffs.len(), epsilon)
}

pub(crate) fn check_dims(metric: &FairMetric, embeddings: &EmbeddingTable) -> Result<()> {
    if metric.dim() != embeddings.dim() {
        return Err(Error::DimensionMismatch {
            expected: embeddings.dim(),
            found: metric.dim(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// `I / median(‖xᵢ‖²)`, so initial quadratic forms are of order one.
    IdentityScaled,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreConfig {
    pub epsilon: f64,
    pub step0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub init: Init,
    /// Optional cap on the largest eigenvalue of every iterate.
    pub lambda_max: Option<f64>,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            epsilon: 0.01,
            step0: 0.1,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            init: Init::IdentityScaled,
            lambda_max: None,
        }
    }
}

impl ExploreConfig {
    pub fn validate(&self) -> Result<()> {
        check_epsilon(self.epsilon)?;
        if !(self.step0 > 0.0 && self.step0.is_finite()) {
            return Err(Error::invalid(format!("step0 must be positive, got {}", self.step0)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if let Some(cap) = self.lambda_max {
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(Error::invalid(format!("lambda_max must be positive, got {cap}")));
            }
        }
        Ok(())
    }
}

/// Training-log record, written as one JSON line per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loglik: f64,
    pub grad_norm: f64,
    /// Smallest eigenvalue over all iterates of the epoch.
    pub min_eig: f64,
}

#[derive(Debug, Clone)]
pub struct ExploreFit {
    pub metric: FairMetric,
    pub log: Vec<EpochRecord>,
}

pub(crate) fn initial_sigma(init: Init, diffs: &PairDiffs) -> Matrix {
    let d = diffs.dim;
    match init {
        Init::Zero => Matrix::zeros(d, d),
        Init::IdentityScaled => {
            let mut sq: Vec<f64> = (0..diffs.len())
                .map(|i| diffs.diff(i).iter().map(|v| v * v).sum())
                .collect();
            sq.sort_by(f64::total_cmp);
            let median = if sq.is_empty() {
                0.0
            } else if sq.len() % 2 == 1 {
                sq[sq.len() / 2]
            } else {
                0.5 * (sq[sq.len() / 2 - 1] + sq[sq.len() / 2])
            };
            if median > 0.0 && median.is_finite() {
                Matrix::identity(d, d) / median
            } else {
                Matrix::identity(d, d)
            }
        }
    }
}

pub(crate) fn warn_on_labels(data: &ComparisonTriplets) {
    let (pos, neg) = data.label_counts();
    if pos == 0 || neg == 0 {
        warn!("training data has {pos} comparable and {neg} incomparable pairs; the fit is poorly identified");
    }
}

/// Projected minibatch SGD on the log-likelihood with step
/// `η_t = step0 / √(1 + t)`, `t` counting minibatches. Shuffling is seeded,
/// so a fixed config reproduces the fit bit for bit.
pub fn explore_fit(
    embeddings: &EmbeddingTable,
    data: &ComparisonTriplets,
    config: &ExploreConfig,
) -> Result<ExploreFit> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no triplets to fit"));
    }
    warn_on_labels(data);
    let diffs = PairDiffs::new(embeddings, data)?;
    let eps = config.epsilon;

    let mut sigma = initial_sigma(config.init, &diffs);
    if let Some(cap) = config.lambda_max {
        sigma = linalg::proj_psd_capped(&sigma, cap)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    let mut step = 0usize;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut min_eig = f64::INFINITY;
        for batch in order.chunks(config.batch_size) {
            let g = grad_diffs(&sigma, &diffs, batch.iter().copied(), eps)?;
            let eta = config.step0 / ((1 + step) as f64).sqrt();
            step += 1;
            let candidate = &sigma + g * eta;
            if !candidate.iter().all(|v| v.is_finite()) {
                return Err(diverged(epoch));
            }
            let (next, lo, _) = linalg::proj_psd_with_spectrum(&candidate, config.lambda_max)?;
            sigma = next;
            min_eig = min_eig.min(lo);
        }
        let loglik = log_lik_diffs(&sigma, &diffs, eps)?;
        if !loglik.is_finite() {
            return Err(diverged(epoch));
        }
        let grad_norm = grad_diffs(&sigma, &diffs, 0..diffs.len(), eps)?.norm();
        log.push(EpochRecord {
            epoch,
            loglik,
            grad_norm,
            min_eig,
        });
    }

    Ok(ExploreFit {
        metric: FairMetric::new(sigma, MetricMethod::Explore, None)?,
        log,
    })
}

fn diverged(epoch: usize) -> Error {
    Error::Diverged(format!(
        "log-likelihood became non-finite in epoch {epoch}; try a smaller step0"
    ))
}
