//! FACE: factor analysis of comparable embeddings.
//!
//! Within a group of comparable samples, variation is attributed to the
//! sensitive factors. Centering each group and taking the top-`k`
//! eigenvectors of the pooled second-moment matrix
//!
//! ```text
//! C = Σ_g Φ_gᵀ H_g Φ_g,   H_g = I − (1/|I_g|) 1 1ᵀ
//! ```
//!
//! estimates the sensitive subspace `Q`; the fair metric is `I − QQᵀ`. This
//! is the truncated-SVD solution of the stacked centered matrix, computed from
//! the `d × d` side.

use std::thread;

use log::warn;

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::metric::{FairMetric, MetricMethod};

/// Groups of mutually comparable rows of an embedding table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ComparableGroups {
    groups: Vec<Vec<usize>>,
}

impl ComparableGroups {
    /// Validates indices against a table with `n_items` rows. Singleton and
    /// empty groups carry no within-group variation and are dropped with a
    /// warning.
    pub fn new(groups: Vec<Vec<usize>>, n_items: usize) -> Result<Self> {
        let mut kept = Vec::with_capacity(groups.len());
        let mut dropped = 0usize;
        for (g, members) in groups.into_iter().enumerate() {
            let mut seen = std::collections::HashSet::with_capacity(members.len());
            for &i in &members {
                if i >= n_items {
                    return Err(Error::invalid(format!(
                        "group {g} references item {i} but the table has {n_items} rows"
                    )));
                }
                if !seen.insert(i) {
                    return Err(Error::invalid(format!("group {g} lists item {i} twice")));
                }
            }
            if members.len() < 2 {
                dropped += 1;
            } else {
                kept.push(members);
            }
        }
        if dropped > 0 {
            warn!("skipping {dropped} group(s) with fewer than two members");
        }
        Ok(ComparableGroups { groups: kept })
    }

    /// All `n` rows as one group.
    pub fn single(n: usize) -> Result<Self> {
        Self::new(vec![(0..n).collect()], n)
    }

    /// Each pair as a two-element group.
    pub fn from_pairs(pairs: &[(usize, usize)], n_items: usize) -> Result<Self> {
        Self::new(pairs.iter().map(|&(a, b)| vec![a, b]).collect(), n_items)
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

/// Orthonormal basis `Q` (`d × k`) of an estimated sensitive subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitiveSubspace {
    basis: Matrix,
}

impl SensitiveSubspace {
    pub fn new(basis: Matrix) -> Result<Self> {
        let k = basis.ncols();
        if k == 0 || basis.nrows() == 0 {
            return Err(Error::invalid("a sensitive subspace needs at least one direction"));
        }
        linalg::ensure_finite(&basis, "subspace basis")?;
        let gram_err = (basis.transpose() * &basis - Matrix::identity(k, k)).norm();
        if gram_err > 1e-8 {
            return Err(Error::invalid(format!(
                "basis columns are not orthonormal (‖QᵀQ − I‖_F = {gram_err:e})"
            )));
        }
        Ok(SensitiveSubspace { basis })
    }

    /// Orthonormalizes the columns of `span` first.
    pub fn spanned_by(span: &Matrix) -> Result<Self> {
        if span.ncols() > span.nrows() {
            return Err(Error::invalid("more spanning vectors than dimensions"));
        }
        let q = span.clone().qr().q();
        Self::new(q.columns(0, span.ncols()).into_owned())
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn k(&self) -> usize {
        self.basis.ncols()
    }

    /// `QQᵀ`.
    pub fn projector(&self) -> Matrix {
        linalg::symmetrize(&(&self.basis * self.basis.transpose()))
    }

    /// The fair metric `I − QQᵀ`.
    pub fn complement_metric(&self) -> Result<FairMetric> {
        let d = self.dim();
        FairMetric::new(
            Matrix::identity(d, d) - self.projector(),
            MetricMethod::Face,
            Some(self.k()),
        )
    }
}

/// `H = I_m − (1/m) 1 1ᵀ`.
pub fn centering_matrix(m: usize) -> Result<Matrix> {
    if m == 0 {
        return Err(Error::invalid("centering matrix needs m ≥ 1"));
    }
    let inv = 1.0 / m as f64;
    Ok(Matrix::from_fn(m, m, |i, j| if i == j { 1.0 - inv } else { -inv }))
}

/// `‖Q̂Q̂ᵀ − QQᵀ‖_op`, the sine of the largest principal angle.
pub fn subspace_error(estimated: &SensitiveSubspace, truth: &SensitiveSubspace) -> Result<f64> {
    if estimated.dim() != truth.dim() {
        return Err(Error::DimensionMismatch {
            expected: truth.dim(),
            found: estimated.dim(),
        });
    }
    if estimated.k() != truth.k() {
        return Err(Error::DimensionMismatch {
            expected: truth.k(),
            found: estimated.k(),
        });
    }
    linalg::op_norm(&(estimated.projector() - truth.projector()))
}

/// Fit options beyond the subspace dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaceOptions {
    /// Number of row partitions accumulated independently and then summed
    /// in a fixed order. Results are bit-stable for a fixed count.
    pub partitions: usize,
}

impl Default for FaceOptions {
    fn default() -> Self {
        FaceOptions { partitions: 1 }
    }
}

fn check_k(k: usize, d: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k >= d {
        return Err(Error::invalid(format!("k = {k} must be smaller than the dimension d = {d}")));
    }
    Ok(())
}

// Sums per-partition matrices built by `accumulate(lo, hi)` over `0..n`.
fn partitioned_sum<F>(n: usize, d: usize, partitions: usize, accumulate: F) -> Matrix
where
    F: Fn(usize, usize) -> Matrix + Sync,
{
    let parts = partitions.clamp(1, n.max(1));
    if parts == 1 {
        return accumulate(0, n);
    }
    let bounds: Vec<(usize, usize)> = (0..parts).map(|p| (p * n / parts, (p + 1) * n / parts)).collect();
    let partials: Vec<Matrix> = thread::scope(|s| {
        let handles: Vec<_> = bounds
            .iter()
            .map(|&(lo, hi)| {
                let acc = &accumulate;
                s.spawn(move || acc(lo, hi))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("accumulator thread panicked")).collect()
    });
    // Pairwise tree reduction in partition order.
    let mut level = partials;
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|c| if c.len() == 2 { &c[0] + &c[1] } else { c[0].clone() })
            .collect();
    }
    level.pop().unwrap_or_else(|| Matrix::zeros(d, d))
}

/// Pooled within-group second-moment matrix `Σ_g Φ_gᵀ H_g Φ_g`.
pub fn pooled_group_moment(
    embeddings: &EmbeddingTable,
    groups: &ComparableGroups,
    options: FaceOptions,
) -> Matrix {
    let d = embeddings.dim();
    let gs = groups.groups();
    partitioned_sum(gs.len(), d, options.partitions, |lo, hi| {
        let mut acc = Matrix::zeros(d, d);
        let mut centered = vec![0.0; d];
        for members in &gs[lo..hi] {
            let mut mean = vec![0.0; d];
            for &i in members {
                for (m, v) in mean.iter_mut().zip(embeddings.row(i)) {
                    *m += v;
                }
            }
            let inv = 1.0 / members.len() as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
            for &i in members {
                for ((c, v), m) in centered.iter_mut().zip(embeddings.row(i)).zip(&mean) {
                    *c = v - m;
                }
                linalg::add_scaled_outer(&mut acc, 1.0, &centered);
            }
        }
        acc
    })
}

/// `Σᵢ zᵢzᵢᵀ` with `zᵢ = φ_a − φ_b`; no centering is needed for differences.
pub fn pooled_pair_moment(
    embeddings: &EmbeddingTable,
    pairs: &[(usize, usize)],
    options: FaceOptions,
) -> Matrix {
    let d = embeddings.dim();
    partitioned_sum(pairs.len(), d, options.partitions, |lo, hi| {
        let mut acc = Matrix::zeros(d, d);
        let mut z = vec![0.0; d];
        for &(a, b) in &pairs[lo..hi] {
            for ((zi, p), q) in z.iter_mut().zip(embeddings.row(a)).zip(embeddings.row(b)) {
                *zi = p - q;
            }
            linalg::add_scaled_outer(&mut acc, 1.0, &z);
        }
        acc
    })
}

fn subspace_from_moment(moment: &Matrix, k: usize) -> Result<(FairMetric, SensitiveSubspace)> {
    let eig = linalg::sym_eigen(moment)?;
    if eig.max_eigenvalue() <= 0.0 {
        return Err(Error::Degenerate("no within-group variation".into()));
    }
    let subspace = SensitiveSubspace::new(eig.top_eigenvectors(k))?;
    let metric = subspace.complement_metric()?;
    Ok((metric, subspace))
}

/// Estimates a `k`-dimensional sensitive subspace from groups of comparable
/// samples and returns `(I − QQᵀ, Q)`.
pub fn face_fit(
    embeddings: &EmbeddingTable,
    groups: &ComparableGroups,
    k: usize,
) -> Result<(FairMetric, SensitiveSubspace)> {
    face_fit_with(embeddings, groups, k, FaceOptions::default())
}

pub fn face_fit_with(
    embeddings: &EmbeddingTable,
    groups: &ComparableGroups,
    k: usize,
    options: FaceOptions,
) -> Result<(FairMetric, SensitiveSubspace)> {
    check_k(k, embeddings.dim())?;
    if groups.is_empty() {
        return Err(Error::Degenerate("no within-group variation: every group is a singleton".into()));
    }
    if let Some(bad) = groups.groups().iter().flatten().find(|&&i| i >= embeddings.len()) {
        return Err(Error::invalid(format!("group member {bad} is out of range")));
    }
    if groups.total_rows() < k {
        return Err(Error::invalid(format!(
            "{} centered rows cannot determine a {k}-dimensional subspace",
            groups.total_rows()
        )));
    }
    subspace_from_moment(&pooled_group_moment(embeddings, groups, options), k)
}

/// Pairwise route: top-`k` eigenvectors of `Σ zᵢzᵢᵀ`, `zᵢ = φ_a − φ_b`.
pub fn face_fit_pairs(
    embeddings: &EmbeddingTable,
    pairs: &[(usize, usize)],
    k: usize,
) -> Result<(FairMetric, SensitiveSubspace)> {
    face_fit_pairs_with(embeddings, pairs, k, FaceOptions::default())
}

pub fn face_fit_pairs_with(
    embeddings: &EmbeddingTable,
    pairs: &[(usize, usize)],
    k: usize,
    options: FaceOptions,
) -> Result<(FairMetric, SensitiveSubspace)> {
    check_k(k, embeddings.dim())?;
    if pairs.is_empty() {
        return Err(Error::invalid("no comparable pairs"));
    }
    if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a.max(b) >= embeddings.len()) {
        return Err(Error::invalid(format!("pair ({a}, {b}) is out of range")));
    }
    if pairs.len() < k {
        return Err(Error::invalid(format!(
            "{} pairs cannot determine a {k}-dimensional subspace",
            pairs.len()
        )));
    }
    subspace_from_moment(&pooled_pair_moment(embeddings, pairs, options), k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_table(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingTable {
        let m = Matrix::from_fn(n, d, |_, _| rng.sample(StandardNormal));
        EmbeddingTable::with_generated_vocab("w", &m).unwrap()
    }

    fn random_groups(rng: &mut ChaCha8Rng, n: usize, count: usize) -> ComparableGroups {
        let mut groups = Vec::new();
        let mut next = 0;
        for _ in 0..count {
            let size = rng.random_range(2..6).min(n - next);
            groups.push((next..next + size).collect());
            next += size;
        }
        ComparableGroups::new(groups, n).unwrap()
    }

    // Stacks H_g Φ_g and takes right singular vectors.
    fn stacked_svd_subspace(t: &EmbeddingTable, groups: &ComparableGroups, k: usize) -> Matrix {
        let d = t.dim();
        let mut rows: Vec<f64> = Vec::new();
        for g in groups.groups() {
            let phi = Matrix::from_fn(g.len(), d, |r, c| t.row(g[r])[c]);
            let centered = centering_matrix(g.len()).unwrap() * phi;
            for r in 0..g.len() {
                rows.extend(centered.row(r).iter());
            }
        }
        let stacked = Matrix::from_row_slice(rows.len() / d, d, &rows);
        let svd = stacked.svd(false, true);
        let vt = svd.v_t.unwrap();
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut q = Matrix::zeros(d, k);
        for (j, &i) in order.iter().take(k).enumerate() {
            q.set_column(j, &vt.row(i).transpose());
        }
        q
    }

    #[test]
    fn centering_examples() {
        assert_eq!(centering_matrix(2).unwrap(), Matrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]));
        assert_eq!(centering_matrix(1).unwrap(), Matrix::from_element(1, 1, 0.0));
        let h = centering_matrix(3).unwrap();
        assert!((&h * Matrix::from_element(3, 1, 1.0)).norm() < 1e-15);
        assert!((&h * &h - &h).norm() < 1e-15);
        assert_eq!(h, h.transpose());
        assert!(centering_matrix(0).is_err());
    }

    #[test]
    fn variation_along_one_axis() {
        let rows: Vec<f64> = [[0.0, 2.0, 3.0], [1.5, 2.0, 3.0], [-4.0, 2.0, 3.0], [0.3, 2.0, 3.0]].concat();
        let t = EmbeddingTable::new((0..4).map(|i| format!("w{i}")).collect(), rows, 3).unwrap();
        let groups = ComparableGroups::single(4).unwrap();
        let (metric, q) = face_fit(&t, &groups, 1).unwrap();
        let expected = Matrix::from_diagonal(&linalg::Vector::from_vec(vec![0.0, 1.0, 1.0]));
        assert_abs_diff_eq!(*metric.matrix(), expected, epsilon = 1e-8);
        assert_eq!(q.k(), 1);
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_table(&mut rng, 6, 3);
        let groups = ComparableGroups::single(6).unwrap();
        assert!(face_fit(&t, &groups, 3).is_err());
        assert!(face_fit(&t, &groups, 0).is_err());

        let singletons = ComparableGroups::new(vec![vec![0], vec![1], vec![]], 6).unwrap();
        let err = face_fit(&t, &singletons, 1).unwrap_err();
        assert!(err.to_string().contains("no within-group variation"), "{err}");

        assert!(ComparableGroups::new(vec![vec![0, 9]], 6).is_err());
        assert!(ComparableGroups::new(vec![vec![1, 1]], 6).is_err());
        assert!(face_fit_pairs(&t, &[], 1).is_err());
    }

    #[test]
    fn constant_groups_are_degenerate() {
        let t = EmbeddingTable::new(vec!["a".into(), "b".into()], vec![1.0, 2.0, 1.0, 2.0], 2).unwrap();
        let err = face_fit(&t, &ComparableGroups::single(2).unwrap(), 1).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn output_is_a_projector_annihilating_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_table(&mut rng, 60, 7);
        let groups = random_groups(&mut rng, 60, 15);
        let (metric, q) = face_fit(&t, &groups, 3).unwrap();
        let s = metric.matrix();
        assert!((s - s.transpose()).norm() <= 1e-8);
        assert!((s * s - s).norm() <= 1e-8);
        assert!((s * q.basis()).norm() <= 1e-8);
        assert_eq!(metric.method(), MetricMethod::Face);
        assert_eq!(metric.rank_hint(), Some(3));
    }

    #[test]
    fn pooled_route_matches_stacked_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 2, 4] {
            let t = random_table(&mut rng, 40, 6);
            let groups = random_groups(&mut rng, 40, 10);
            let (_, q) = face_fit(&t, &groups, k).unwrap();
            let oracle = SensitiveSubspace::new(stacked_svd_subspace(&t, &groups, k)).unwrap();
            assert!(subspace_error(&q, &oracle).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn pairs_match_two_element_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_table(&mut rng, 50, 5);
        let pairs: Vec<(usize, usize)> = (0..25).map(|i| (2 * i, 2 * i + 1)).collect();
        let (_, qp) = face_fit_pairs(&t, &pairs, 2).unwrap();
        let (_, qg) = face_fit(&t, &ComparableGroups::from_pairs(&pairs, 50).unwrap(), 2).unwrap();
        assert!(subspace_error(&qp, &qg).unwrap() <= 1e-8);
    }

    #[test]
    fn pairs_sharing_one_direction() {
        let v = [0.6, 0.0, -0.8];
        let mut rows = Vec::new();
        for (i, c) in [1.0, -2.0, 0.5, 3.0].iter().enumerate() {
            let base = [i as f64, 1.0, -(i as f64)];
            rows.extend(base);
            rows.extend(base.iter().zip(&v).map(|(b, vi)| b + c * vi));
        }
        let t = EmbeddingTable::new((0..8).map(|i| format!("w{i}")).collect(), rows, 3).unwrap();
        let pairs: Vec<_> = (0..4).map(|i| (2 * i, 2 * i + 1)).collect();
        let (_, q) = face_fit_pairs(&t, &pairs, 1).unwrap();
        let truth = SensitiveSubspace::spanned_by(&Matrix::from_column_slice(3, 1, &v)).unwrap();
        assert!(subspace_error(&q, &truth).unwrap() <= 1e-10);
    }

    #[test]
    fn subspace_error_examples() {
        let e1 = SensitiveSubspace::new(Matrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let e2 = SensitiveSubspace::new(Matrix::from_column_slice(2, 1, &[0.0, 1.0])).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let diag = SensitiveSubspace::new(Matrix::from_column_slice(2, 1, &[h, h])).unwrap();
        assert_abs_diff_eq!(subspace_error(&e1, &e1).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(subspace_error(&e1, &e2).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(subspace_error(&e1, &diag).unwrap(), (std::f64::consts::PI / 4.0).sin(), epsilon = 1e-12);

        let three = SensitiveSubspace::new(Matrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0])).unwrap();
        assert!(subspace_error(&e1, &three).is_err());
        assert!(SensitiveSubspace::new(Matrix::from_column_slice(2, 1, &[1.0, 1.0])).is_err());
    }

    #[test]
    fn rotation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 6;
        let m = Matrix::from_fn(80, d, |_, _| rng.sample(StandardNormal));
        let t = EmbeddingTable::with_generated_vocab("w", &m).unwrap();
        let groups = random_groups(&mut rng, 80, 20);
        let r = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
        let rotated = EmbeddingTable::with_generated_vocab("w", &(&m * r.transpose())).unwrap();
        let (s, _) = face_fit(&t, &groups, 2).unwrap();
        let (s_rot, _) = face_fit(&rotated, &groups, 2).unwrap();
        let expected = &r * s.matrix() * r.transpose();
        assert!((s_rot.matrix() - expected).norm() <= 1e-6);
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = Matrix::from_fn(30, 4, |_, _| rng.sample(StandardNormal));
        let groups = random_groups(&mut rng, 30, 8);
        let (_, q) = face_fit(&EmbeddingTable::with_generated_vocab("w", &m).unwrap(), &groups, 2).unwrap();
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let scaled = EmbeddingTable::with_generated_vocab("w", &(&m * c)).unwrap();
            let (_, qc) = face_fit(&scaled, &groups, 2).unwrap();
            assert!((q.projector() - qc.projector()).norm() <= 1e-8, "c = {c}");
        }
    }

    #[test]
    fn partitioned_accumulation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_table(&mut rng, 200, 5);
        let groups = random_groups(&mut rng, 200, 50);
        let one = pooled_group_moment(&t, &groups, FaceOptions { partitions: 1 });
        let four_a = pooled_group_moment(&t, &groups, FaceOptions { partitions: 4 });
        let four_b = pooled_group_moment(&t, &groups, FaceOptions { partitions: 4 });
        assert_eq!(four_a, four_b);
        assert!((one - four_a).norm() <= 1e-10);
    }
}
