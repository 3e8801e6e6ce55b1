//! Word-embedding association tests under a fair metric.
//!
//! Cosine similarity uses the metric inner product `⟨x, y⟩ = xᵀΣy`. The test
//! statistic is `|s(X,A,B) − s(Y,A,B)|` and the two-sided p-value is the
//! fraction of equal-size partitions of `X ∪ Y` whose statistic is strictly
//! larger than the observed one.

use std::collections::HashSet;
use std::fmt::Write as _;

use log::warn;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::linalg;
use crate::metric::FairMetric;

/// Norms at or below this are treated as annihilated by the metric.
const MIN_NORM: f64 = 1e-12;

pub const DEFAULT_MAX_PARTITIONS: u64 = 50_000;

/// `xᵀΣy / (√(xᵀΣx) √(yᵀΣy))`.
pub fn metric_cosine(x: &[f64], y: &[f64], metric: &FairMetric) -> Result<f64> {
    let s = metric.matrix();
    if x.len() != metric.dim() || y.len() != metric.dim() {
        return Err(Error::DimensionMismatch {
            expected: metric.dim(),
            found: if x.len() != metric.dim() { x.len() } else { y.len() },
        });
    }
    let nx = linalg::quad_form(s, x).max(0.0).sqrt();
    let ny = linalg::quad_form(s, y).max(0.0).sqrt();
    if nx <= MIN_NORM || ny <= MIN_NORM {
        return Err(Error::Degenerate("vector annihilated by metric".into()));
    }
    Ok(linalg::bilinear_form(s, x, y) / (nx * ny))
}

fn mean(values: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v?;
        n += 1;
    }
    Ok(sum / n as f64)
}

/// `s(x, A, B)`: mean cosine to `A` minus mean cosine to `B`.
pub fn word_association(x: &[f64], a: &[&[f64]], b: &[&[f64]], metric: &FairMetric) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("attribute sets must be nonempty"));
    }
    let ma = mean(a.iter().map(|v| metric_cosine(x, v, metric)))?;
    let mb = mean(b.iter().map(|v| metric_cosine(x, v, metric)))?;
    Ok(ma - mb)
}

pub fn set_association(xs: &[&[f64]], a: &[&[f64]], b: &[&[f64]], metric: &FairMetric) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::invalid("target set must be nonempty"));
    }
    mean(xs.iter().map(|x| word_association(x, a, b, metric)))
}

/// `|s(X,A,B) − s(Y,A,B)|`.
pub fn test_statistic(
    xs: &[&[f64]],
    ys: &[&[f64]],
    a: &[&[f64]],
    b: &[&[f64]],
    metric: &FairMetric,
) -> Result<f64> {
    Ok((set_association(xs, a, b, metric)? - set_association(ys, a, b, metric)?).abs())
}

/// Statistic of the split that puts `chosen` (sorted) on the X side. Both
/// sides are summed in index order, so the observed split and its mirror
/// give bit-identical values.
fn split_statistic(assoc: &[f64], chosen: &[usize]) -> f64 {
    let m = chosen.len();
    let (mut sx, mut sy) = (0.0, 0.0);
    let mut next = chosen.iter().peekable();
    for (i, &s) in assoc.iter().enumerate() {
        if next.peek() == Some(&&i) {
            sx += s;
            next.next();
        } else {
            sy += s;
        }
    }
    (sx / m as f64 - sy / (assoc.len() - m) as f64).abs()
}

/// `C(n, k)`, saturating at `u64::MAX`.
pub fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k.min(n));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Advances `c` to the next `k`-combination of `0..n` in lexicographic
/// order; false after the last one.
fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationOptions {
    pub max_partitions: u64,
    pub seed: u64,
    /// Work chunks, each on its own thread. Counts are summed in chunk order,
    /// and sampled partitions depend on the chunk count, not on scheduling.
    pub threads: usize,
    /// Count ties at half weight.
    pub midp: bool,
}

impl Default for PermutationOptions {
    fn default() -> Self {
        PermutationOptions {
            max_partitions: DEFAULT_MAX_PARTITIONS,
            seed: 0,
            threads: 1,
            midp: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub p_value: f64,
    /// Number of partitions strictly above the observed statistic.
    pub exceed: u64,
    pub ties: u64,
    pub evaluated: u64,
    pub exact: bool,
}

#[derive(Default, Clone, Copy)]
struct Tally {
    exceed: u64,
    ties: u64,
    evaluated: u64,
}

impl Tally {
    fn add(&mut self, stat: f64, observed: f64) {
        self.evaluated += 1;
        if stat > observed {
            self.exceed += 1;
        } else if stat == observed {
            self.ties += 1;
        }
    }
}

/// Two-sided permutation p-value from per-word associations, X words first.
///
/// Every size-`m` subset of the `2m` words is taken as `X_σ`, so exact mode
/// evaluates `C(2m, m)` partitions; each unordered split appears twice with
/// the same statistic, which leaves the p-value unchanged. Beyond
/// `max_partitions`, that many subsets are drawn uniformly with replacement.
pub fn permutation_p_value(assoc_x: &[f64], assoc_y: &[f64], opts: &PermutationOptions) -> Result<PermutationResult> {
    let m = assoc_x.len();
    if m == 0 || assoc_y.len() != m {
        return Err(Error::invalid(format!(
            "target sets must be nonempty and of equal size (got {} and {})",
            m,
            assoc_y.len()
        )));
    }
    if opts.max_partitions == 0 {
        return Err(Error::invalid("max_partitions must be at least 1"));
    }
    let assoc: Vec<f64> = assoc_x.iter().chain(assoc_y).copied().collect();
    let n = 2 * m;
    let observed = split_statistic(&assoc, &(0..m).collect::<Vec<_>>());
    let total = binomial(n as u64, m as u64);
    let exact = total <= opts.max_partitions;
    let chunks = opts.threads.max(1);

    let run_chunk = |c: usize| -> Tally {
        let mut tally = Tally::default();
        if exact {
            let mut comb: Vec<usize> = (0..m).collect();
            let mut idx = 0usize;
            loop {
                if idx % chunks == c {
                    tally.add(split_statistic(&assoc, &comb), observed);
                }
                idx += 1;
                if !next_combination(&mut comb, n) {
                    break;
                }
            }
        } else {
            let base = opts.max_partitions / chunks as u64;
            let extra = (opts.max_partitions % chunks as u64 > c as u64) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(c as u64);
            for _ in 0..base + extra {
                let mut comb = index::sample(&mut rng, n, m).into_vec();
                comb.sort_unstable();
                tally.add(split_statistic(&assoc, &comb), observed);
            }
        }
        tally
    };

    let tallies: Vec<Tally> = if chunks == 1 {
        vec![run_chunk(0)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..chunks).map(|c| s.spawn(move || run_chunk(c))).collect();
            handles.into_iter().map(|h| h.join().expect("permutation worker panicked")).collect()
        })
    };
    let sum = tallies.iter().fold(Tally::default(), |acc, t| Tally {
        exceed: acc.exceed + t.exceed,
        ties: acc.ties + t.ties,
        evaluated: acc.evaluated + t.evaluated,
    });
    let hits = sum.exceed as f64 + if opts.midp { 0.5 * sum.ties as f64 } else { 0.0 };
    Ok(PermutationResult {
        p_value: hits / sum.evaluated as f64,
        exceed: sum.exceed,
        ties: sum.ties,
        evaluated: sum.evaluated,
        exact,
    })
}

/// `|mean(X) − mean(Y)|` divided by the population standard deviation of all
/// associations in `X ∪ Y`.
pub fn effect_size(assoc_x: &[f64], assoc_y: &[f64]) -> Result<f64> {
    if assoc_x.is_empty() || assoc_y.is_empty() {
        return Err(Error::invalid("effect size needs nonempty target sets"));
    }
    let all: Vec<f64> = assoc_x.iter().chain(assoc_y).copied().collect();
    let n = all.len() as f64;
    let mu = all.iter().sum::<f64>() / n;
    let sd = (all.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) {
        return Err(Error::Degenerate("degenerate association spread".into()));
    }
    let mx = assoc_x.iter().sum::<f64>() / assoc_x.len() as f64;
    let my = assoc_y.iter().sum::<f64>() / assoc_y.len() as f64;
    Ok((mx - my).abs() / sd)
}

/// Token lists of one test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatSpec {
    pub name: String,
    pub targets_x: Vec<String>,
    pub targets_y: Vec<String>,
    pub attributes_a: Vec<String>,
    pub attributes_b: Vec<String>,
}

/// A [`WeatSpec`] resolved against an embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedWeat {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

impl WeatSpec {
    /// Drops unknown targets pairwise (position `i` of X and Y go together)
    /// and unknown attributes individually, with warnings.
    pub fn resolve(&self, table: &EmbeddingTable) -> Result<ResolvedWeat> {
        if self.targets_x.len() != self.targets_y.len() {
            return Err(Error::invalid(format!(
                "target lists differ in size ({} vs {})",
                self.targets_x.len(),
                self.targets_y.len()
            )));
        }
        let xs: HashSet<&str> = self.targets_x.iter().map(String::as_str).collect();
        if let Some(w) = self.targets_y.iter().find(|w| xs.contains(w.as_str())) {
            return Err(Error::invalid(format!("`{w}` appears in both target sets")));
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (wx, wy) in self.targets_x.iter().zip(&self.targets_y) {
            match (table.index_of(wx), table.index_of(wy)) {
                (Some(i), Some(j)) => {
                    x.push(i);
                    y.push(j);
                }
                _ => warn!("{}: dropping target pair ({wx}, {wy}) with an unknown token", self.name),
            }
        }
        if x.is_empty() {
            return Err(Error::invalid(format!("{}: no target pair resolves", self.name)));
        }
        let attrs = |words: &[String], label: &str| -> Result<Vec<usize>> {
            let r = table.resolve_tokens(words);
            if !r.missing.is_empty() {
                warn!("{}: dropping unknown {label} attributes {:?}", self.name, r.missing);
            }
            if r.indices.is_empty() {
                return Err(Error::invalid(format!("{}: attribute set {label} is empty", self.name)));
            }
            Ok(r.indices)
        };
        Ok(ResolvedWeat {
            x,
            y,
            a: attrs(&self.attributes_a, "A")?,
            b: attrs(&self.attributes_b, "B")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatReport {
    pub test_name: String,
    pub statistic: f64,
    pub p_value: f64,
    pub effect_size: f64,
    pub exact: bool,
    pub partitions: u64,
}

/// Per-word associations of the resolved targets, X then Y.
pub fn target_associations(
    table: &EmbeddingTable,
    r: &ResolvedWeat,
    metric: &FairMetric,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if metric.dim() != table.dim() {
        return Err(Error::DimensionMismatch {
            expected: table.dim(),
            found: metric.dim(),
        });
    }
    let rows = |ix: &[usize]| ix.iter().map(|&i| table.row(i)).collect::<Vec<_>>();
    let (a, b) = (rows(&r.a), rows(&r.b));
    let assoc = |ix: &[usize]| -> Result<Vec<f64>> {
        ix.iter().map(|&i| word_association(table.row(i), &a, &b, metric)).collect()
    };
    Ok((assoc(&r.x)?, assoc(&r.y)?))
}

pub fn run_weat(
    table: &EmbeddingTable,
    spec: &WeatSpec,
    metric: &FairMetric,
    opts: &PermutationOptions,
) -> Result<WeatReport> {
    let resolved = spec.resolve(table)?;
    let (ax, ay) = target_associations(table, &resolved, metric)?;
    let perm = permutation_p_value(&ax, &ay, opts)?;
    let m = ax.len() as f64;
    let statistic = (ax.iter().sum::<f64>() / m - ay.iter().sum::<f64>() / m).abs();
    Ok(WeatReport {
        test_name: spec.name.clone(),
        statistic,
        p_value: perm.p_value,
        effect_size: effect_size(&ax, &ay)?,
        exact: perm.exact,
        partitions: perm.evaluated,
    })
}

/// Aligned text table with `P` and `d` columns.
pub fn format_table(reports: &[WeatReport]) -> String {
    let width = reports.iter().map(|r| r.test_name.len()).max().unwrap_or(0).max(4);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>10}  {:>8}  {:>8}", "test", "P", "d", "s");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>10.2e}  {:>8.2}  {:>8.4}",
            r.test_name, r.p_value, r.effect_size, r.statistic
        );
    }
    out
}
