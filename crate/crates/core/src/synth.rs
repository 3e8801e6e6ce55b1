//! Planted-model data generators and the matching theoretical error bounds.
//!
//! Comparable pairs differ by `zᵢ = A*μᵢ + B*νᵢ + wᵢ` and group members are
//! `φᵢ = m + A*μᵢ + B*νᵢ + εᵢ`, with isotropic latent factors and
//! `wᵢ, εᵢ ~ N(0, σ²I)`. `ran(A*)` is the sensitive subspace FACE should
//! recover; [`theoretical_bound`] gives the high-probability error envelope.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::Serialize;

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::explore::{scaled_link, ComparisonTriplets, Triplet};
use crate::face::SensitiveSubspace;
use crate::linalg::{self, Matrix, Vector};
use crate::metric::FairMetric;

/// Distribution of the latent factors `μ`, `ν`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Latent {
    #[default]
    Gaussian,
    /// Bounded ±1 factors.
    Rademacher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorModelSpec {
    a_star: Matrix,
    b_star: Matrix,
    sigma: f64,
    mean: Vector,
    pub latent: Latent,
}

impl FactorModelSpec {
    /// `b_star` may have zero columns. Violating the dominance assumption
    /// `λ_min(A*A*ᵀ) > ‖B*B*ᵀ + σ²I‖_op` only warns.
    pub fn new(a_star: Matrix, b_star: Matrix, sigma: f64, mean: Vector) -> Result<Self> {
        let d = a_star.nrows();
        if d == 0 || a_star.ncols() == 0 {
            return Err(Error::invalid("A* must be a nonempty d × k matrix"));
        }
        if a_star.ncols() >= d {
            return Err(Error::invalid(format!("k = {} must be below d = {d}", a_star.ncols())));
        }
        if b_star.nrows() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: b_star.nrows(),
            });
        }
        if mean.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: mean.len(),
            });
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("noise level must be ≥ 0, got {sigma}")));
        }
        linalg::ensure_finite(&a_star, "A*")?;
        linalg::ensure_finite(&b_star, "B*")?;
        let spec = FactorModelSpec {
            a_star,
            b_star,
            sigma,
            mean,
            latent: Latent::Gaussian,
        };
        let (lam, noise) = (spec.lambda_min_sensitive()?, spec.noise_norm()?);
        if lam <= noise {
            warn!("dominance assumption violated: λ_min(A*A*ᵀ) = {lam} ≤ ‖B*B*ᵀ + σ²I‖ = {noise}");
        }
        Ok(spec)
    }

    /// Random planted model: `A*` has `k` orthonormal columns scaled so that
    /// `A*A*ᵀ` has all nonzero eigenvalues equal to `lambda_min`; `B*` has `l`
    /// orthonormal columns in the orthogonal complement of `ran(A*)` scaled
    /// so that `‖B*B*ᵀ‖_op = relevant_norm`. The mean is zero.
    pub fn planted(
        d: usize,
        k: usize,
        l: usize,
        lambda_min: f64,
        relevant_norm: f64,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 || k + l > d {
            return Err(Error::invalid(format!("need 0 < k and k + l ≤ d (k={k}, l={l}, d={d})")));
        }
        if !(lambda_min > 0.0) || relevant_norm < 0.0 {
            return Err(Error::invalid("factor scales must be nonnegative (λ_min positive)"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Matrix::from_fn(d, k + l, |_, _| rng.sample(StandardNormal));
        let q = g.qr().q();
        let a_star = q.columns(0, k) * lambda_min.sqrt();
        let b_star = q.columns(k, l) * relevant_norm.sqrt();
        Self::new(a_star, b_star, sigma, Vector::zeros(d))
    }

    pub fn with_mean(mut self, mean: Vector) -> Result<Self> {
        if mean.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: mean.len(),
            });
        }
        self.mean = mean;
        Ok(self)
    }

    pub fn with_latent(mut self, latent: Latent) -> Self {
        self.latent = latent;
        self
    }

    pub fn dim(&self) -> usize {
        self.a_star.nrows()
    }

    pub fn k(&self) -> usize {
        self.a_star.ncols()
    }

    pub fn l(&self) -> usize {
        self.b_star.ncols()
    }

    pub fn a_star(&self) -> &Matrix {
        &self.a_star
    }

    pub fn b_star(&self) -> &Matrix {
        &self.b_star
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    /// Smallest nonzero eigenvalue of `A*A*ᵀ`.
    pub fn lambda_min_sensitive(&self) -> Result<f64> {
        let gram = self.a_star.transpose() * &self.a_star;
        Ok(linalg::sym_eigen(&gram)?.min_eigenvalue())
    }

    /// `‖B*B*ᵀ‖_op`.
    pub fn relevant_norm(&self) -> Result<f64> {
        if self.l() == 0 {
            return Ok(0.0);
        }
        let gram = self.b_star.transpose() * &self.b_star;
        Ok(linalg::sym_eigen(&gram)?.max_eigenvalue().max(0.0))
    }

    /// `‖B*B*ᵀ + σ²I‖_op`.
    pub fn noise_norm(&self) -> Result<f64> {
        Ok(self.relevant_norm()? + self.sigma * self.sigma)
    }

    /// `A*A*ᵀ + B*B*ᵀ + σ²I`, the covariance of the pair differences.
    pub fn population_covariance(&self) -> Matrix {
        let d = self.dim();
        &self.a_star * self.a_star.transpose()
            + &self.b_star * self.b_star.transpose()
            + Matrix::identity(d, d) * (self.sigma * self.sigma)
    }

    /// `Ã*`, an orthonormal basis of `ran(A*)`.
    pub fn sensitive_subspace(&self) -> Result<SensitiveSubspace> {
        SensitiveSubspace::spanned_by(&self.a_star)
    }

    /// The ideal FACE metric `I − Ã*Ã*ᵀ`.
    pub fn truth_metric(&self) -> Result<FairMetric> {
        self.sensitive_subspace()?.complement_metric()
    }
}

fn draw_latent(rng: &mut ChaCha8Rng, latent: Latent) -> f64 {
    match latent {
        Latent::Gaussian => rng.sample(StandardNormal),
        Latent::Rademacher => {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        }
    }
}

fn factor_rows(spec: &FactorModelSpec, n: usize, seed: u64, offset: &Vector) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    let (d, k, l) = (spec.dim(), spec.k(), spec.l());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Matrix::zeros(n, d);
    let mut mu = Vector::zeros(k);
    let mut nu = Vector::zeros(l);
    for i in 0..n {
        mu.iter_mut().for_each(|v| *v = draw_latent(&mut rng, spec.latent));
        nu.iter_mut().for_each(|v| *v = draw_latent(&mut rng, spec.latent));
        let mut row = &spec.a_star * &mu + &spec.b_star * &nu + offset;
        for v in row.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += spec.sigma * e;
        }
        out.set_row(i, &row.transpose());
    }
    Ok(out)
}

/// `n` pair differences `zᵢ = A*μᵢ + B*νᵢ + wᵢ`, tokens `z0, z1, …`.
pub fn gen_pair_differences(spec: &FactorModelSpec, n: usize, seed: u64) -> Result<EmbeddingTable> {
    let rows = factor_rows(spec, n, seed, &Vector::zeros(spec.dim()))?;
    EmbeddingTable::with_generated_vocab("z", &rows)
}

/// `n` members of one comparable group, `φᵢ = m + A*μᵢ + B*νᵢ + εᵢ`, tokens
/// `g0, g1, …`. Uses the same draws as [`gen_pair_differences`] for a given
/// seed.
pub fn gen_group(spec: &FactorModelSpec, n: usize, seed: u64) -> Result<EmbeddingTable> {
    let rows = factor_rows(spec, n, seed, &spec.mean)?;
    EmbeddingTable::with_generated_vocab("g", &rows)
}

/// Turns difference vectors into an embedding table of `2n` rows and `n`
/// pairs with `φ_a − φ_b = zᵢ`: each pair shares a random N(0, I) anchor.
pub fn pairs_from_differences(
    differences: &EmbeddingTable,
    seed: u64,
) -> Result<(EmbeddingTable, Vec<(usize, usize)>)> {
    let (n, d) = (differences.len(), differences.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vocab = Vec::with_capacity(2 * n);
    let mut data = Vec::with_capacity(2 * n * d);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let anchor: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        data.extend(anchor.iter().zip(differences.row(i)).map(|(a, z)| a + z));
        data.extend(anchor);
        vocab.push(format!("a{i}"));
        vocab.push(format!("b{i}"));
        pairs.push((2 * i, 2 * i + 1));
    }
    Ok((EmbeddingTable::new(vocab, data, d)?, pairs))
}

/// `2n` i.i.d. rows from `N(0, scale²/2 · I)` paired up, so differences are
/// `N(0, scale² I)`. Tokens are `a{i}` / `b{i}`.
pub fn gen_isotropic_pairs(
    d: usize,
    n: usize,
    scale: f64,
    seed: u64,
) -> Result<(EmbeddingTable, Vec<(usize, usize)>)> {
    if n == 0 || d == 0 {
        return Err(Error::invalid("need n ≥ 1 pairs of positive dimension"));
    }
    let s = scale / std::f64::consts::SQRT_2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Matrix::from_fn(2 * n, d, |_, _| s * rng.sample::<f64, _>(StandardNormal));
    let vocab = (0..n).flat_map(|i| [format!("a{i}"), format!("b{i}")]).collect();
    let pairs = (0..n).map(|i| (2 * i, 2 * i + 1)).collect();
    Ok((EmbeddingTable::from_matrix(vocab, &m)?, pairs))
}

/// Labels each pair with `y ~ Ber(prob(xᵀΣ₀x))`, `x = φ_a − φ_b`.
pub fn gen_binary_response_with(
    table: &EmbeddingTable,
    pairs: &[(usize, usize)],
    sigma0: &FairMetric,
    prob: impl Fn(f64) -> f64,
    seed: u64,
) -> Result<ComparisonTriplets> {
    if sigma0.dim() != table.dim() {
        return Err(Error::DimensionMismatch {
            expected: table.dim(),
            found: sigma0.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        if a.max(b) >= table.len() {
            return Err(Error::invalid(format!("pair ({a}, {b}) is out of range")));
        }
        let t = sigma0.distance(table.row(a), table.row(b))?;
        let p = prob(t);
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("link produced probability {p} at t = {t}")));
        }
        let y = Bernoulli::new(p).expect("probability checked above").sample(&mut rng);
        triplets.push(Triplet::new(a, b, y));
    }
    ComparisonTriplets::new(triplets, table.len())
}

/// Labels from the scaled-logistic model `P(y=1) = (2−ε)σ(−xᵀΣ₀x)`.
pub fn gen_binary_response(
    table: &EmbeddingTable,
    pairs: &[(usize, usize)],
    sigma0: &FairMetric,
    epsilon: f64,
    seed: u64,
) -> Result<ComparisonTriplets> {
    scaled_link(0.0, epsilon)?;
    gen_binary_response_with(
        table,
        pairs,
        sigma0,
        |t| scaled_link(t.max(0.0), epsilon).expect("epsilon validated"),
        seed,
    )
}

/// Quantities in the high-probability bound on the FACE subspace error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundQuantities {
    /// Bias from heterogeneity: `(λ_min(A*A*ᵀ)/‖B*B*ᵀ + σ²I‖ − 1)⁻¹`.
    pub b: f64,
    /// Eigengap `λ_min(A*A*ᵀ) − ‖B*B*ᵀ‖`.
    pub gamma_tilde: f64,
    /// `(C√d + t)/√n`.
    pub delta: f64,
    /// `b + (δ∨δ²)/(γ̃ − (δ∨δ²))` (pairwise data).
    pub total: f64,
    /// `total + t/n` (one centered group).
    pub total_groupwise: f64,
    pub n: usize,
    pub t: f64,
    pub c: f64,
}

/// Bound with the unquantified absolute constant set to `C = 1`.
pub fn theoretical_bound(spec: &FactorModelSpec, n: usize, t: f64) -> Result<BoundQuantities> {
    theoretical_bound_with_constant(spec, n, t, 1.0)
}

pub fn theoretical_bound_with_constant(
    spec: &FactorModelSpec,
    n: usize,
    t: f64,
    c: f64,
) -> Result<BoundQuantities> {
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    if !(t >= 0.0) || !(c > 0.0) {
        return Err(Error::invalid("need t ≥ 0 and C > 0"));
    }
    let lam = spec.lambda_min_sensitive()?;
    let noise = spec.noise_norm()?;
    if lam <= noise {
        return Err(Error::invalid(format!(
            "dominance assumption fails (λ_min = {lam}, noise norm = {noise}); the bound does not apply"
        )));
    }
    // Zero noise is the limit of a vanishing bias.
    let b = if noise == 0.0 { 0.0 } else { 1.0 / (lam / noise - 1.0) };
    let gamma_tilde = lam - spec.relevant_norm()?;

    let nf = n as f64;
    let root_d = (spec.dim() as f64).sqrt();
    let cap = (nf.sqrt() * gamma_tilde - c * root_d).min((nf * gamma_tilde).sqrt() - c * root_d);
    if t >= cap {
        return Err(Error::invalid(format!("t = {t} is not below the admissible cap {cap}")));
    }
    let delta = (c * root_d + t) / nf.sqrt();
    let dd = delta.max(delta * delta);
    if gamma_tilde <= dd {
        return Err(Error::invalid("estimation term exceeds eigengap"));
    }
    let total = b + dd / (gamma_tilde - dd);
    Ok(BoundQuantities {
        b,
        gamma_tilde,
        delta,
        total,
        total_groupwise: total + t / nf,
        n,
        t,
        c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spec_25_to_1(seed: u64) -> FactorModelSpec {
        FactorModelSpec::planted(20, 3, 4, 25.0, 0.5, 0.5f64.sqrt(), seed).unwrap()
    }

    #[test]
    fn planted_spec_has_requested_spectrum() {
        let spec = spec_25_to_1(1);
        assert_abs_diff_eq!(spec.lambda_min_sensitive().unwrap(), 25.0, epsilon = 1e-10);
        assert_abs_diff_eq!(spec.relevant_norm().unwrap(), 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(spec.noise_norm().unwrap(), 1.0, epsilon = 1e-10);
        assert!((spec.a_star().transpose() * spec.b_star()).norm() < 1e-10);
    }

    #[test]
    fn noiseless_rows_lie_in_sensitive_subspace() {
        let spec = FactorModelSpec::planted(10, 2, 0, 4.0, 0.0, 0.0, 3).unwrap();
        let z = gen_pair_differences(&spec, 50, 9).unwrap();
        let complement = spec.truth_metric().unwrap();
        for row in z.rows() {
            let r = linalg::Vector::from_column_slice(row);
            assert!((complement.matrix() * r).norm() <= 1e-10);
        }
    }

    #[test]
    fn rejects_zero_rows() {
        let spec = spec_25_to_1(0);
        assert!(gen_pair_differences(&spec, 0, 1).is_err());
        assert!(gen_group(&spec, 0, 1).is_err());
    }

    #[test]
    fn zero_mean_group_matches_differences() {
        let spec = spec_25_to_1(2);
        let z = gen_pair_differences(&spec, 30, 5).unwrap();
        let g = gen_group(&spec, 30, 5).unwrap();
        assert_eq!(z.to_matrix(), g.to_matrix());
    }

    #[test]
    fn noiseless_group_lies_in_affine_subspace() {
        let m = Vector::from_fn(6, |i, _| i as f64 - 2.0);
        let spec = FactorModelSpec::planted(6, 2, 0, 9.0, 0.0, 0.0, 4).unwrap().with_mean(m.clone()).unwrap();
        let g = gen_group(&spec, 40, 1).unwrap();
        let complement = spec.truth_metric().unwrap();
        for row in g.rows() {
            let r = linalg::Vector::from_column_slice(row) - &m;
            assert!((complement.matrix() * r).norm() <= 1e-10);
        }
    }

    #[test]
    fn seeds_are_deterministic() {
        let spec = spec_25_to_1(5);
        assert_eq!(gen_pair_differences(&spec, 100, 42).unwrap(), gen_pair_differences(&spec, 100, 42).unwrap());
        assert_ne!(gen_pair_differences(&spec, 100, 42).unwrap(), gen_pair_differences(&spec, 100, 43).unwrap());
        let rad = spec.clone().with_latent(Latent::Rademacher);
        assert_eq!(gen_group(&rad, 10, 1).unwrap(), gen_group(&rad, 10, 1).unwrap());
    }

    #[test]
    fn bound_examples() {
        let noiseless = FactorModelSpec::planted(10, 2, 0, 25.0, 0.0, 0.0, 1).unwrap();
        let q = theoretical_bound(&noiseless, 1000, 1.0).unwrap();
        assert_eq!(q.b, 0.0);

        let spec = spec_25_to_1(1);
        let q = theoretical_bound(&spec, 5000, 3.0).unwrap();
        assert_abs_diff_eq!(q.b, 1.0 / 24.0, epsilon = 1e-10);
        assert_abs_diff_eq!(q.gamma_tilde, 24.5, epsilon = 1e-10);
        let delta = (20f64.sqrt() + 3.0) / 5000f64.sqrt();
        assert_abs_diff_eq!(q.delta, delta, epsilon = 1e-12);
        assert_abs_diff_eq!(q.total, 1.0 / 24.0 + delta / (24.5 - delta), epsilon = 1e-10);
        assert_abs_diff_eq!(q.total_groupwise, q.total + 3.0 / 5000.0, epsilon = 1e-15);
    }

    #[test]
    fn bound_refuses_vacuous_settings() {
        let spec = spec_25_to_1(1);
        // t beyond the admissible cap.
        assert!(theoretical_bound(&spec, 10, 100.0).is_err());
        // Dominance violated.
        let weak = FactorModelSpec::planted(10, 2, 2, 1.0, 2.0, 0.0, 1).unwrap();
        assert!(theoretical_bound(&weak, 1000, 1.0).is_err());
        // Estimation term larger than the gap (small n, tiny gap).
        let tight = FactorModelSpec::planted(50, 2, 2, 1.0, 0.5, 0.1, 1).unwrap();
        assert!(theoretical_bound(&tight, 60, 0.0).is_err());
    }

    #[test]
    fn constant_response_probability_at_zero_metric() {
        let (t, pairs) = gen_isotropic_pairs(3, 10_000, 1.0, 1).unwrap();
        let zero = FairMetric::new(Matrix::zeros(3, 3), crate::MetricMethod::External, None).unwrap();
        let data = gen_binary_response(&t, &pairs, &zero, 0.1, 2).unwrap();
        let (pos, _) = data.label_counts();
        let mean = pos as f64 / data.len() as f64;
        assert!((mean - 0.95).abs() <= 0.02, "{mean}");
    }

    #[test]
    fn far_pairs_are_incomparable() {
        let (t, pairs) = gen_isotropic_pairs(2, 500, 1.0, 1).unwrap();
        let huge = FairMetric::new(Matrix::identity(2, 2) * 1e6, crate::MetricMethod::External, None).unwrap();
        let data = gen_binary_response(&t, &pairs, &huge, 0.1, 2).unwrap();
        // Only pairs with xᵀx ≲ 4e-5 could plausibly be labelled comparable.
        assert!(data.label_counts().0 <= 1);
    }
}
