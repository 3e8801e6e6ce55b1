//! Metric estimation as a monotone variational inequality.
//!
//! Labels follow `P(y=1 | x) = p(xᵀΣ₀x)` for a known nonincreasing link `p`
//! (`p(t) = F₀(−t)`). The score
//!
//! ```text
//! Mₙ(Σ) = (1/n) Σᵢ (yᵢ − p(⟨Dᵢ,Σ⟩)) Dᵢ,    Dᵢ = xᵢxᵢᵀ
//! ```
//!
//! is monotone on the PSD cone, and Σ̂ solves `⟨Mₙ(Σ̂), Σ − Σ̂⟩ ≥ 0` for all PSD
//! Σ. Mₙ plays the role of the operator `G` in the projected updates
//! `x ← P_C(x − ηG)`; it is the negative log-likelihood gradient when the
//! link is logistic.
//!
//! The solvers themselves ([`solve_vi`], [`projected_step`],
//! [`extragradient_step`]) are generic over the operator so they can be
//! checked on toy problems.

use std::fmt;
use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::explore::{self, check_dims, initial_sigma, warn_on_labels, ComparisonTriplets, Init, PairDiffs};
use crate::linalg::{self, Matrix};
use crate::metric::{FairMetric, MetricMethod};

/// Grid size for the monotonicity check on construction.
const LINK_GRID: usize = 1000;
/// Right end of the check grid for links defined on all of `[0, ∞)`.
const LINK_GRID_MAX: f64 = 50.0;

/// Piecewise-linear `p(t)` through user-supplied knots, constant beyond the
/// first and last knot.
#[derive(Debug, Clone, PartialEq)]
pub struct TableLink {
    t: Vec<f64>,
    p: Vec<f64>,
}

impl TableLink {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("a link table needs at least two points"));
        }
        for w in points.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::invalid(format!(
                    "link table abscissae must increase strictly ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        for &(t, p) in &points {
            if !t.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("bad link table point ({t}, {p})")));
            }
        }
        let (t, p) = points.into_iter().unzip();
        Ok(TableLink { t, p })
    }

    /// One `t p` pair per line, comma or whitespace separated; `#` starts a
    /// comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut points = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            if fields.len() != 2 {
                return Err(parse_err(format!("expected `t p`, found {} fields", fields.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(format!("`{s}`: {e}")));
            points.push((num(fields[0])?, num(fields[1])?));
        }
        Self::new(points)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn eval(&self, t: f64) -> f64 {
        let (ts, ps) = (&self.t, &self.p);
        if t <= ts[0] {
            return ps[0];
        }
        let last = ts.len() - 1;
        if t >= ts[last] {
            return ps[last];
        }
        let j = ts.partition_point(|&x| x <= t);
        let (t0, t1, p0, p1) = (ts[j - 1], ts[j], ps[j - 1], ps[j]);
        p0 + (p1 - p0) * (t - t0) / (t1 - t0)
    }

    fn t_max(&self) -> f64 {
        *self.t.last().expect("nonempty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinkFunction {
    /// `p(t) = σ(−t)`.
    Logistic,
    /// `p(t) = (2−ε)σ(−t)`, the EXPLORE model.
    ScaledLogistic(f64),
    /// `p(t) = Φ(−t)`.
    Probit,
    Table(TableLink),
}

impl LinkFunction {
    /// Validates the link: probabilities in `[0, 1]` and nonincreasing on a
    /// 1000-point grid over `t ≥ 0`.
    pub fn new(link: LinkFunction) -> Result<Self> {
        if let LinkFunction::ScaledLogistic(eps) = link {
            explore::scaled_link(0.0, eps)?;
        }
        let t_max = match &link {
            LinkFunction::Table(tab) => tab.t_max().max(0.0) * 1.01 + 1.0,
            _ => LINK_GRID_MAX,
        };
        let mut prev = f64::INFINITY;
        for i in 0..=LINK_GRID {
            let t = t_max * i as f64 / LINK_GRID as f64;
            let p = link.prob(t);
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("link gives probability {p} at t = {t}")));
            }
            if p > prev + 1e-12 {
                return Err(Error::invalid(format!("link is not nonincreasing near t = {t}")));
            }
            prev = p;
        }
        Ok(link)
    }

    /// `logistic`, `scaled:<eps>`, `probit` or `table:<path>`.
    pub fn parse(spec: &str) -> Result<Self> {
        let link = match spec.split_once(':') {
            None if spec == "logistic" => LinkFunction::Logistic,
            None if spec == "probit" => LinkFunction::Probit,
            Some(("scaled", eps)) => LinkFunction::ScaledLogistic(
                eps.parse().map_err(|_| Error::invalid(format!("bad epsilon in link `{spec}`")))?,
            ),
            Some(("table", path)) => LinkFunction::Table(TableLink::load(Path::new(path))?),
            _ => {
                return Err(Error::invalid(format!(
                    "unknown link `{spec}` (expected logistic, scaled:<eps>, probit or table:<path>)"
                )))
            }
        };
        Self::new(link)
    }

    /// `P(y = 1)` for a pair at squared metric distance `t`.
    pub fn prob(&self, t: f64) -> f64 {
        match self {
            LinkFunction::Logistic => logistic(-t),
            LinkFunction::ScaledLogistic(eps) => ((2.0 - eps) * logistic(-t)).min(1.0),
            LinkFunction::Probit => 0.5 * erfc(t / std::f64::consts::SQRT_2),
            LinkFunction::Table(tab) => tab.eval(t),
        }
    }
}

impl fmt::Display for LinkFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinkFunction::Logistic => write!(f, "logistic"),
            LinkFunction::ScaledLogistic(eps) => write!(f, "scaled:{eps}"),
            LinkFunction::Probit => write!(f, "probit"),
            LinkFunction::Table(tab) => write!(f, "table({} points)", tab.t.len()),
        }
    }
}

fn logistic(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn score_diffs(sigma: &Matrix, diffs: &PairDiffs, batch: impl Iterator<Item = usize>, link: &LinkFunction) -> Result<Matrix> {
    let d = diffs.dim;
    let mut acc = Matrix::zeros(d, d);
    let mut n = 0usize;
    for i in batch {
        let t = diffs.quad(sigma, i);
        linalg::add_scaled_outer(&mut acc, diffs.y[i] - link.prob(t), diffs.diff(i));
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("score needs a nonempty batch"));
    }
    acc /= n as f64;
    Ok(linalg::symmetrize(&acc))
}

/// `Mₙ(Σ)` over `batch`.
pub fn score(
    metric: &FairMetric,
    embeddings: &EmbeddingTable,
    batch: &ComparisonTriplets,
    link: &LinkFunction,
) -> Result<Matrix> {
    check_dims(metric, embeddings)?;
    let diffs = PairDiffs::new(embeddings, batch)?;
    score_diffs(metric.matrix(), &diffs, 0..diffs.len(), link)
}

fn check_step(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("step size must be positive, got {eta}")))
    }
}

/// `project(x − η·g)`, failing on non-finite candidates.
pub fn projected_step(x: &Matrix, g: &Matrix, eta: f64, project: impl Fn(&Matrix) -> Result<Matrix>) -> Result<Matrix> {
    check_step(eta)?;
    let candidate = x - g * eta;
    if !candidate.iter().all(|v| v.is_finite()) {
        return Err(Error::Diverged("projected update is not finite".into()));
    }
    project(&candidate)
}

/// One extra-gradient step: look ahead with `g1(x)`, then move from `x`
/// along `g2` evaluated at the look-ahead point.
pub fn extragradient_step(
    x: &Matrix,
    eta: f64,
    g1: impl FnOnce(&Matrix) -> Result<Matrix>,
    g2: impl FnOnce(&Matrix) -> Result<Matrix>,
    project: impl Fn(&Matrix) -> Result<Matrix>,
) -> Result<Matrix> {
    let half = projected_step(x, &g1(x)?, eta, &project)?;
    projected_step(x, &g2(&half)?, eta, project)
}

fn psd_or_error(m: &Matrix) -> Result<FairMetric> {
    FairMetric::new(m.clone(), MetricMethod::Viml, None)
}

/// Stochastic projected gradient step on the PSD cone.
pub fn sg_step(
    sigma: &FairMetric,
    embeddings: &EmbeddingTable,
    batch: &ComparisonTriplets,
    link: &LinkFunction,
    eta: f64,
) -> Result<FairMetric> {
    let m = score(sigma, embeddings, batch, link)?;
    psd_or_error(&projected_step(sigma.matrix(), &m, eta, linalg::proj_psd)?)
}

/// Stochastic extra-gradient step; `batch1` drives the look-ahead and
/// `batch2` the update.
pub fn seg_step(
    sigma: &FairMetric,
    embeddings: &EmbeddingTable,
    batch1: &ComparisonTriplets,
    batch2: &ComparisonTriplets,
    link: &LinkFunction,
    eta: f64,
) -> Result<FairMetric> {
    check_dims(sigma, embeddings)?;
    let (d1, d2) = (PairDiffs::new(embeddings, batch1)?, PairDiffs::new(embeddings, batch2)?);
    let next = extragradient_step(
        sigma.matrix(),
        eta,
        |x| score_diffs(x, &d1, 0..d1.len(), link),
        |x| score_diffs(x, &d2, 0..d2.len(), link),
        linalg::proj_psd,
    )?;
    psd_or_error(&next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViMethod {
    Sg,
    Seg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant(f64),
    /// `η_t = η₀/√t`, `t = 1, 2, …`.
    InvSqrt(f64),
}

impl StepSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Constant(eta) => eta,
            StepSchedule::InvSqrt(eta0) => eta0 / (t.max(1) as f64).sqrt(),
        }
    }

    fn base(&self) -> f64 {
        match *self {
            StepSchedule::Constant(eta) | StepSchedule::InvSqrt(eta) => eta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    None,
    /// Step-weighted mean `Σηₛxₛ / Σηₛ`; the plain mean for constant steps.
    Uniform,
    /// `x̄_t = (1−β)x_t + βx̄_{t−1}`, `x̄₁ = x₁`.
    Geometric(f64),
}

impl Averaging {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Averaging::Geometric(b) if !(b > 0.0 && b < 1.0) => {
                Err(Error::invalid(format!("geometric averaging needs β in (0, 1), got {b}")))
            }
            _ => Ok(()),
        }
    }
}

/// Online iterate average.
#[derive(Debug, Clone)]
pub struct RunningAverage {
    scheme: Averaging,
    mean: Option<Matrix>,
    weight: f64,
}

impl RunningAverage {
    pub fn new(scheme: Averaging) -> Self {
        RunningAverage {
            scheme,
            mean: None,
            weight: 0.0,
        }
    }

    pub fn push(&mut self, x: &Matrix, eta: f64) {
        let Some(mean) = self.mean.as_mut() else {
            self.mean = Some(x.clone());
            self.weight = eta;
            return;
        };
        match self.scheme {
            Averaging::None => mean.copy_from(x),
            Averaging::Uniform => {
                self.weight += eta;
                let a = eta / self.weight;
                *mean *= 1.0 - a;
                *mean += x * a;
            }
            Averaging::Geometric(beta) => {
                *mean *= beta;
                *mean += x * (1.0 - beta);
            }
        }
    }

    pub fn current(&self) -> Option<&Matrix> {
        self.mean.as_ref()
    }
}

/// Average of `history` with equal step weights, symmetrized and projected
/// onto the PSD cone.
pub fn averaged_iterate(history: &[Matrix], averaging: Averaging) -> Result<FairMetric> {
    averaging.validate()?;
    if history.is_empty() {
        return Err(Error::invalid("cannot average an empty history"));
    }
    let mut avg = RunningAverage::new(averaging);
    for x in history {
        avg.push(x, 1.0);
    }
    let mean = avg.current().expect("nonempty history");
    let psd = linalg::proj_psd(&linalg::symmetrize(mean))?;
    FairMetric::new(psd, MetricMethod::Viml, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViOptions {
    pub method: ViMethod,
    pub step: StepSchedule,
    pub averaging: Averaging,
    pub iterations: usize,
}

impl ViOptions {
    pub fn validate(&self) -> Result<()> {
        check_step(self.step.base())?;
        self.averaging.validate()
    }
}

/// Runs `iterations` SG or SEG steps from `x0` and returns the averaged
/// iterate (the last one when averaging is off). `oracle` returns a fresh
/// stochastic estimate of `G` at each call; SEG calls it twice per step.
/// `observe(t, x_t, x̄_t)` sees every iterate.
pub fn solve_vi(
    x0: &Matrix,
    opts: &ViOptions,
    mut oracle: impl FnMut(&Matrix) -> Result<Matrix>,
    project: impl Fn(&Matrix) -> Result<Matrix>,
    mut observe: impl FnMut(usize, &Matrix, &Matrix) -> Result<()>,
) -> Result<Matrix> {
    opts.validate()?;
    let mut x = x0.clone();
    let mut avg = RunningAverage::new(opts.averaging);
    for t in 1..=opts.iterations {
        let eta = opts.step.at(t);
        x = match opts.method {
            ViMethod::Sg => {
                let g = oracle(&x)?;
                projected_step(&x, &g, eta, &project)?
            }
            ViMethod::Seg => {
                let g = oracle(&x)?;
                let half = projected_step(&x, &g, eta, &project)?;
                let g_half = oracle(&half)?;
                projected_step(&x, &g_half, eta, &project)?
            }
        };
        avg.push(&x, eta);
        observe(t, &x, avg.current().expect("pushed"))?;
    }
    Ok(avg.current().cloned().unwrap_or(x))
}

/// Fixed-point residual `‖x − P(x − ηG(x))‖_F / η` of a generic VI.
pub fn residual_of(x: &Matrix, g: &Matrix, eta: f64, project: impl Fn(&Matrix) -> Result<Matrix>) -> Result<f64> {
    let next = projected_step(x, g, eta, project)?;
    Ok((x - next).norm() / eta)
}

/// `‖Σ − proj_psd(Σ − ηMₙ(Σ))‖_F / η`; zero exactly at solutions of the
/// empirical VI.
pub fn residual(
    metric: &FairMetric,
    embeddings: &EmbeddingTable,
    data: &ComparisonTriplets,
    link: &LinkFunction,
    eta: f64,
) -> Result<f64> {
    let m = score(metric, embeddings, data, link)?;
    residual_of(metric.matrix(), &m, eta, linalg::proj_psd)
}

/// Monte Carlo lower bound on the restricted merit
/// `sup { ⟨G(y), x − y⟩ : y ∈ C, ‖y − center‖ ≤ radius }`, clamped at zero.
/// Points are drawn uniformly from the ball in the symmetric matrices and
/// projected onto `C`, which keeps them inside the ball when the center is
/// feasible.
pub fn restricted_merit_mc_with(
    x: &Matrix,
    center: &Matrix,
    radius: f64,
    samples: usize,
    rng: &mut impl Rng,
    mut g: impl FnMut(&Matrix) -> Result<Matrix>,
    project: impl Fn(&Matrix) -> Result<Matrix>,
) -> Result<f64> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid(format!("merit radius must be positive, got {radius}")));
    }
    if samples == 0 {
        return Err(Error::invalid("merit needs at least one sample"));
    }
    let (r, c) = center.shape();
    // Free coordinates: the upper triangle for square (symmetric) points.
    let free = if r == c { r * (r + 1) / 2 } else { r * c };
    let mut best = 0.0f64;
    for _ in 0..samples {
        let mut dir = Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal));
        if r == c {
            dir = linalg::symmetrize(&dir);
        }
        let norm = dir.norm();
        if norm == 0.0 {
            continue;
        }
        let scale = radius * rng.random::<f64>().powf(1.0 / free as f64) / norm;
        let y = project(&(center + dir * scale))?;
        best = best.max(linalg::frob_inner(&g(&y)?, &(x - &y)));
    }
    Ok(best)
}

/// Restricted merit of `metric` for the empirical score, over the PSD ball of
/// `radius` around `center`.
#[allow(clippy::too_many_arguments)]
pub fn restricted_merit_mc(
    metric: &FairMetric,
    embeddings: &EmbeddingTable,
    data: &ComparisonTriplets,
    link: &LinkFunction,
    center: &Matrix,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    check_dims(metric, embeddings)?;
    if center.shape() != metric.matrix().shape() {
        return Err(Error::DimensionMismatch {
            expected: metric.dim(),
            found: center.nrows(),
        });
    }
    let diffs = PairDiffs::new(embeddings, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    restricted_merit_mc_with(
        metric.matrix(),
        center,
        radius,
        samples,
        &mut rng,
        |y| score_diffs(y, &diffs, 0..diffs.len(), link),
        linalg::proj_psd,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VISolverConfig {
    pub method: ViMethod,
    pub step: StepSchedule,
    pub averaging: Averaging,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Radius of the merit ball around the initial iterate.
    pub radius: f64,
    pub merit_samples: usize,
    /// Number of diagnostic checkpoints over the run.
    pub checkpoints: usize,
    pub init: Init,
}

impl Default for VISolverConfig {
    fn default() -> Self {
        VISolverConfig {
            method: ViMethod::Seg,
            step: StepSchedule::Constant(0.1),
            averaging: Averaging::Uniform,
            iterations: 5000,
            batch_size: 64,
            seed: 0,
            radius: 10.0,
            merit_samples: 32,
            checkpoints: 10,
            init: Init::IdentityScaled,
        }
    }
}

impl VISolverConfig {
    pub fn options(&self) -> ViOptions {
        ViOptions {
            method: self.method,
            step: self.step,
            averaging: self.averaging,
            iterations: self.iterations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.options().validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid(format!("radius must be positive, got {}", self.radius)));
        }
        if self.merit_samples == 0 {
            return Err(Error::invalid("merit_samples must be positive"));
        }
        Ok(())
    }
}

/// One JSON line of the diagnostic log, evaluated at the reported iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub iter: usize,
    pub residual: f64,
    pub merit_mc: f64,
    pub min_eig: f64,
}

#[derive(Debug, Clone)]
pub struct VimlFit {
    pub metric: FairMetric,
    pub diagnostics: Vec<Diagnostic>,
}

/// Minibatches drawn without replacement, reshuffling after each pass.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchStream {
            order,
            pos: 0,
            size: size.min(n),
            rng,
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let batch = &self.order[self.pos..self.pos + self.size];
        self.pos += self.size;
        batch
    }
}

pub fn viml_fit(
    embeddings: &EmbeddingTable,
    data: &ComparisonTriplets,
    link: &LinkFunction,
    config: &VISolverConfig,
) -> Result<VimlFit> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no triplets to fit"));
    }
    warn_on_labels(data);
    let diffs = PairDiffs::new(embeddings, data)?;
    let x0 = initial_sigma(config.init, &diffs);
    let mut stream = BatchStream::new(diffs.len(), config.batch_size, config.seed);
    let mut merit_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let every = (config.iterations / config.checkpoints.max(1)).max(1);
    let eta_ref = config.step.base();
    let mut diagnostics = Vec::new();

    let mut diagnose = |iter: usize, x: &Matrix| -> Result<()> {
        let x = linalg::proj_psd(&linalg::symmetrize(x))?;
        let full = |y: &Matrix| score_diffs(y, &diffs, 0..diffs.len(), link);
        let residual = residual_of(&x, &full(&x)?, eta_ref, linalg::proj_psd)?;
        let merit_mc = restricted_merit_mc_with(
            &x,
            &x0,
            config.radius,
            config.merit_samples,
            &mut merit_rng,
            full,
            linalg::proj_psd,
        )?;
        let rec = Diagnostic {
            iter,
            residual,
            merit_mc,
            min_eig: linalg::min_eigenvalue(&x)?,
        };
        debug!("viml checkpoint {rec:?}");
        diagnostics.push(rec);
        Ok(())
    };

    let result = if config.iterations == 0 {
        x0.clone()
    } else {
        let oracle = |x: &Matrix| {
            let batch = stream.next_batch();
            score_diffs(x, &diffs, batch.iter().copied(), link)
        };
        let observe = |t: usize, _x: &Matrix, avg: &Matrix| {
            if avg.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!("iterate became non-finite at step {t}")));
            }
            if config.checkpoints > 0 && (t.is_multiple_of(every) || t == config.iterations) {
                diagnose(t, avg)?;
            }
            Ok(())
        };
        solve_vi(&x0, &config.options(), oracle, linalg::proj_psd, observe)?
    };
    if config.iterations == 0 && config.checkpoints > 0 {
        diagnose(0, &x0)?;
    }
    if let Some(last) = diagnostics.last() {
        if last.residual > 1.0 / eta_ref {
            warn!("final residual {} is large; the solver may not have converged", last.residual);
        }
    }
    let psd = linalg::proj_psd(&linalg::symmetrize(&result))?;
    Ok(VimlFit {
        metric: FairMetric::new(psd, MetricMethod::Viml, None)?,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explore::Triplet;
    use crate::synth;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn scalar(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    fn one_dim_table(xs: &[f64]) -> EmbeddingTable {
        // Row 0 is the origin so every pair (i, 0) has difference xᵢ.
        let mut data = vec![0.0];
        data.extend_from_slice(xs);
        let vocab = (0..data.len()).map(|i| format!("w{i}")).collect();
        EmbeddingTable::new(vocab, data, 1).unwrap()
    }

    #[test]
    fn links_are_validated() {
        for link in [LinkFunction::Logistic, LinkFunction::ScaledLogistic(0.1), LinkFunction::Probit] {
            LinkFunction::new(link).unwrap();
        }
        assert!(LinkFunction::new(LinkFunction::ScaledLogistic(1.5)).is_err());
        let rising = TableLink::new(vec![(0.0, 0.2), (1.0, 0.8)]).unwrap();
        assert!(LinkFunction::new(LinkFunction::Table(rising)).is_err());
        assert!(TableLink::new(vec![(0.0, 0.2)]).is_err());
        assert!(TableLink::new(vec![(1.0, 0.2), (0.0, 0.1)]).is_err());
        assert!(LinkFunction::parse("cauchit").is_err());
        assert_eq!(LinkFunction::parse("scaled:0.1").unwrap(), LinkFunction::ScaledLogistic(0.1));
    }

    #[test]
    fn link_values() {
        assert_abs_diff_eq!(LinkFunction::Logistic.prob(0.0), 0.5);
        assert_abs_diff_eq!(LinkFunction::Probit.prob(0.0), 0.5);
        assert_abs_diff_eq!(LinkFunction::Probit.prob(1.0), 0.158_655_253_931_457_05, epsilon = 1e-10);
        assert_abs_diff_eq!(LinkFunction::ScaledLogistic(0.01).prob(0.0), 0.995);
    }

    #[test]
    fn table_parsing_and_interpolation() {
        let text = "# t p\n0, 0.9\n1 0.5\n\n3\t0.1 # tail\n";
        let tab = TableLink::parse(text, Path::new("link.txt")).unwrap();
        assert_abs_diff_eq!(tab.eval(-1.0), 0.9);
        assert_abs_diff_eq!(tab.eval(0.5), 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(tab.eval(2.0), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(tab.eval(10.0), 0.1);
        LinkFunction::new(LinkFunction::Table(tab)).unwrap();
        let err = TableLink::parse("0 0.5\n1 x\n", Path::new("bad.txt")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn score_examples() {
        // Labels equal to the link probability are impossible with binary y,
        // but y = p holds at t where p ∈ {0, 1}: a step link at zero.
        let table = one_dim_table(&[2.0]);
        let step = TableLink::new(vec![(0.0, 0.0), (1.0, 0.0)]).unwrap();
        let link = LinkFunction::new(LinkFunction::Table(step)).unwrap();
        let data = ComparisonTriplets::new(vec![Triplet::new(1, 0, true)], 2).unwrap();
        let m = score(&FairMetric::identity(1), &table, &data, &link).unwrap();
        assert_abs_diff_eq!(m[(0, 0)], 4.0);

        let none = ComparisonTriplets::new(vec![Triplet::new(1, 0, false)], 2).unwrap();
        let m = score(&FairMetric::identity(1), &table, &none, &link).unwrap();
        assert_eq!(m[(0, 0)], 0.0);

        let empty = ComparisonTriplets::new(vec![], 2).unwrap();
        assert!(score(&FairMetric::identity(1), &table, &empty, &link).is_err());
    }

    #[test]
    fn score_matches_direct_sum() {
        let (table, pairs) = synth::gen_isotropic_pairs(3, 50, 1.0, 2).unwrap();
        let sigma0 = FairMetric::identity(3);
        let data = synth::gen_binary_response_with(&table, &pairs, &sigma0, |t| (-t).exp() * 0.9, 3).unwrap();
        let metric = FairMetric::new(Matrix::from_diagonal_element(3, 3, 0.7), MetricMethod::External, None).unwrap();
        let link = LinkFunction::Probit;
        let m = score(&metric, &table, &data, &link).unwrap();
        let mut direct = Matrix::zeros(3, 3);
        for t in data.iter() {
            let x = nalgebra::DVector::from_fn(3, |k, _| table.row(t.a)[k] - table.row(t.b)[k]);
            let q = (x.transpose() * metric.matrix() * &x)[(0, 0)];
            direct += &x * x.transpose() * (t.y() - link.prob(q));
        }
        direct /= data.len() as f64;
        assert!((m - direct).norm() <= 1e-12);
    }

    #[test]
    fn scalar_steps() {
        let id = |m: &Matrix| Ok(m.clone());
        assert_eq!(projected_step(&scalar(1.0), &scalar(0.0), 1.0, id).unwrap(), scalar(1.0));
        let psd = linalg::proj_psd;
        assert_abs_diff_eq!(projected_step(&scalar(1.0), &scalar(0.5), 1.0, psd).unwrap()[(0, 0)], 0.5);
        assert_eq!(projected_step(&scalar(0.2), &scalar(1.0), 1.0, psd).unwrap()[(0, 0)], 0.0);
        assert!(projected_step(&scalar(1.0), &scalar(1.0), 0.0, psd).is_err());
        assert!(matches!(
            projected_step(&scalar(1.0), &scalar(f64::INFINITY), 1.0, psd),
            Err(Error::Diverged(_))
        ));
    }

    fn rotation(x: &Matrix) -> Result<Matrix> {
        Ok(Matrix::from_column_slice(2, 1, &[x[(1, 0)], -x[(0, 0)]]))
    }

    #[test]
    fn extragradient_on_rotation_by_hand() {
        // Look-ahead (1, 0) − ½(0, −1) = (1, 0.5); update (1, 0) − ½(0.5, −1).
        let x = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let next = extragradient_step(&x, 0.5, rotation, rotation, |m| Ok(m.clone())).unwrap();
        assert_eq!(next.as_slice(), &[0.75, 0.5]);
    }

    #[test]
    fn seg_with_same_batch_is_deterministic_extragradient() {
        let (table, pairs) = synth::gen_isotropic_pairs(2, 40, 1.0, 5).unwrap();
        let data = synth::gen_binary_response(&table, &pairs, &FairMetric::identity(2), 0.1, 6).unwrap();
        let link = LinkFunction::Logistic;
        let sigma = FairMetric::identity(2);
        let got = seg_step(&sigma, &table, &data, &data, &link, 0.3).unwrap();

        let m0 = score(&sigma, &table, &data, &link).unwrap();
        let half = linalg::proj_psd(&(sigma.matrix() - m0 * 0.3)).unwrap();
        let half = FairMetric::new(half, MetricMethod::External, None).unwrap();
        let m1 = score(&half, &table, &data, &link).unwrap();
        let reference = linalg::proj_psd(&(sigma.matrix() - m1 * 0.3)).unwrap();
        assert_eq!(got.matrix(), &reference);
    }

    #[test]
    fn averaging_examples() {
        let two = [Matrix::identity(2, 2), Matrix::identity(2, 2) * 3.0];
        let avg = averaged_iterate(&two, Averaging::Uniform).unwrap();
        assert!((avg.matrix() - Matrix::identity(2, 2) * 2.0).norm() < 1e-15);

        let same = vec![Matrix::identity(2, 2) * 0.4; 5];
        for scheme in [Averaging::None, Averaging::Uniform, Averaging::Geometric(0.3)] {
            assert!((averaged_iterate(&same, scheme).unwrap().matrix() - &same[0]).norm() < 1e-15);
        }

        let seq = [scalar(0.0), scalar(2.0), scalar(4.0)];
        let geo = averaged_iterate(&seq, Averaging::Geometric(0.5)).unwrap();
        assert_abs_diff_eq!(geo.matrix()[(0, 0)], 2.5);
        assert_eq!(averaged_iterate(&seq, Averaging::None).unwrap().matrix()[(0, 0)], 4.0);

        assert!(averaged_iterate(&[], Averaging::Uniform).is_err());
        assert!(averaged_iterate(&seq, Averaging::Geometric(1.0)).is_err());
    }

    #[test]
    fn step_weighted_uniform_average() {
        let mut avg = RunningAverage::new(Averaging::Uniform);
        avg.push(&scalar(1.0), 1.0);
        avg.push(&scalar(4.0), 2.0);
        assert_abs_diff_eq!(avg.current().unwrap()[(0, 0)], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn residual_examples() {
        let id = |m: &Matrix| Ok(m.clone());
        for eta in [0.01, 1.0, 5.0] {
            let r = residual_of(&scalar(2.0), &scalar(0.3), eta, linalg::proj_psd).unwrap();
            assert_abs_diff_eq!(r, 0.3, epsilon = 1e-12);
        }
        assert_eq!(residual_of(&scalar(0.0), &scalar(0.0), 1.0, id).unwrap(), 0.0);
        // On the boundary, an outward score is not a violation.
        assert_eq!(residual_of(&scalar(0.0), &scalar(0.5), 1.0, linalg::proj_psd).unwrap(), 0.0);
    }

    /// Scalar VI on `[0, ∞)` with `G(y) = y − 1`, solved by `y = 1`.
    fn shifted(y: &Matrix) -> Result<Matrix> {
        Ok(y.map(|v| v - 1.0))
    }

    fn grid_merit(x: f64, center: f64, radius: f64) -> f64 {
        let (lo, hi) = ((center - radius).max(0.0), center + radius);
        (0..=100_000)
            .map(|i| lo + (hi - lo) * i as f64 / 100_000.0)
            .map(|y| (y - 1.0) * (x - y))
            .fold(0.0, f64::max)
    }

    #[test]
    fn merit_matches_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let at_root =
            restricted_merit_mc_with(&scalar(1.0), &scalar(0.5), 2.0, 1000, &mut rng, shifted, linalg::proj_psd)
                .unwrap();
        assert!(at_root <= 1e-6, "{at_root}");

        let far = restricted_merit_mc_with(&scalar(4.0), &scalar(0.5), 2.0, 1000, &mut rng, shifted, linalg::proj_psd)
            .unwrap();
        let oracle = grid_merit(4.0, 0.5, 2.0);
        assert!(oracle > 0.0);
        assert!((far - oracle).abs() <= 0.1 * oracle, "{far} vs {oracle}");

        let tiny = restricted_merit_mc_with(&scalar(1.0), &scalar(0.5), 1e-3, 10, &mut rng, shifted, linalg::proj_psd)
            .unwrap();
        assert!(tiny >= 0.0);
    }

    #[test]
    fn merit_on_empirical_scalar_problem() {
        // Two labelled pairs whose score has a closed-form root in d = 1.
        let table = one_dim_table(&[1.0, 1.0]);
        let data = ComparisonTriplets::new(vec![Triplet::new(1, 0, true), Triplet::new(2, 0, false)], 3).unwrap();
        // Mₙ(s) = ½(1 − 2σ(−s)), root at s = 0 (boundary): σ(0) = ½.
        let root = FairMetric::new(scalar(0.0), MetricMethod::External, None).unwrap();
        let link = LinkFunction::Logistic;
        assert!(residual(&root, &table, &data, &link, 1.0).unwrap() <= 1e-12);
        let merit = restricted_merit_mc(&root, &table, &data, &link, &scalar(0.0), 3.0, 500, 4).unwrap();
        assert!(merit <= 1e-6);
        let away = FairMetric::new(scalar(2.0), MetricMethod::External, None).unwrap();
        assert!(restricted_merit_mc(&away, &table, &data, &link, &scalar(0.0), 3.0, 500, 4).unwrap() > 0.0);
    }

    #[test]
    fn deterministic_rotation_sg_spirals_out_and_seg_in() {
        let x0 = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let run = |method| {
            let opts = ViOptions {
                method,
                step: StepSchedule::Constant(0.1),
                averaging: Averaging::None,
                iterations: 1000,
            };
            solve_vi(&x0, &opts, rotation, |m| Ok(m.clone()), |_, _, _| Ok(())).unwrap()
        };
        assert!(run(ViMethod::Sg).norm() > 1.0);
        assert!(run(ViMethod::Seg).norm() < 0.01);
    }

    #[test]
    fn zero_iterations_return_initializer() {
        let (table, pairs) = synth::gen_isotropic_pairs(2, 30, 1.0, 1).unwrap();
        let data = synth::gen_binary_response(&table, &pairs, &FairMetric::identity(2), 0.1, 2).unwrap();
        let cfg = VISolverConfig {
            iterations: 0,
            init: Init::Zero,
            ..Default::default()
        };
        let fit = viml_fit(&table, &data, &LinkFunction::Logistic, &cfg).unwrap();
        assert_eq!(fit.metric.matrix(), &Matrix::zeros(2, 2));
        assert_eq!(fit.diagnostics.len(), 1);
    }

    #[test]
    fn fit_is_reproducible() {
        let (table, pairs) = synth::gen_isotropic_pairs(2, 300, 1.0, 1).unwrap();
        let data = synth::gen_binary_response(&table, &pairs, &FairMetric::identity(2), 0.1, 2).unwrap();
        let cfg = VISolverConfig {
            iterations: 200,
            batch_size: 16,
            ..Default::default()
        };
        let a = viml_fit(&table, &data, &LinkFunction::Logistic, &cfg).unwrap();
        let b = viml_fit(&table, &data, &LinkFunction::Logistic, &cfg).unwrap();
        assert_eq!(a.metric, b.metric);
        assert_eq!(a.diagnostics, b.diagnostics);
        assert_eq!(a.diagnostics.len(), 10);
    }

    fn random_psd(seed: u64, d: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose() * rng.random_range(0.0..2.0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn score_is_monotone(s1 in any::<u64>(), s2 in any::<u64>()) {
            thread_local! {
                static DATA: (EmbeddingTable, ComparisonTriplets) = {
                    let (t, p) = synth::gen_isotropic_pairs(3, 200, 1.0, 11).unwrap();
                    let d = synth::gen_binary_response(&t, &p, &FairMetric::identity(3), 0.1, 12).unwrap();
                    (t, d)
                };
            }
            DATA.with(|(table, data)| {
                for link in [LinkFunction::Logistic, LinkFunction::Probit, LinkFunction::ScaledLogistic(0.2)] {
                    let a = FairMetric::new(random_psd(s1, 3), MetricMethod::External, None).unwrap();
                    let b = FairMetric::new(random_psd(s2, 3), MetricMethod::External, None).unwrap();
                    let ma = score(&a, table, data, &link).unwrap();
                    let mb = score(&b, table, data, &link).unwrap();
                    let inner = linalg::frob_inner(&(ma - mb), &(a.matrix() - b.matrix()));
                    prop_assert!(inner >= -1e-10, "{inner}");
                }
                Ok(())
            })?;
        }
    }
}
