//! The generalized Mahalanobis fair metric `d(x₁, x₂) = (x₁−x₂)ᵀ Σ (x₁−x₂)`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector, PSD_TOL};

const ROUNDING: f64 = 64.0 * f64::EPSILON;

/// Which estimator (if any) produced a metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricMethod {
    Face,
    Explore,
    Viml,
    Identity,
    External,
}

impl MetricMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricMethod::Face => "face",
            MetricMethod::Explore => "explore",
            MetricMethod::Viml => "viml",
            MetricMethod::Identity => "identity",
            MetricMethod::External => "external",
        }
    }
}

/// A symmetric PSD matrix Σ together with where it came from.
///
/// Construction symmetrizes the input and clamps eigenvalues that are
/// negative only by rounding (within `PSD_TOL · max(λ_max, 1)`). A `Face`
/// metric must additionally be an orthogonal projector of trace `d − k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FairMetric {
    matrix: Matrix,
    method: MetricMethod,
    rank_hint: Option<usize>,
}

impl FairMetric {
    pub fn new(matrix: Matrix, method: MetricMethod, rank_hint: Option<usize>) -> Result<Self> {
        let d = linalg::ensure_square(&matrix)?;
        if d == 0 {
            return Err(Error::invalid("metric dimension must be positive"));
        }
        linalg::ensure_finite(&matrix, "metric matrix")?;
        let mut matrix = linalg::symmetrize(&matrix);

        let eig = linalg::sym_eigen(&matrix)?;
        let floor = -PSD_TOL * eig.max_eigenvalue().max(1.0);
        if eig.min_eigenvalue() < floor {
            return Err(Error::invalid(format!(
                "metric matrix is not PSD (smallest eigenvalue {:e})",
                eig.min_eigenvalue()
            )));
        }
        // Negativity at rounding level is left alone so reloading a saved
        // metric reproduces it bit for bit.
        if eig.min_eigenvalue() < -ROUNDING * eig.max_eigenvalue().max(1.0) {
            matrix = eig.reconstruct_with(|l| l.max(0.0));
        }

        if method == MetricMethod::Face {
            let k = rank_hint
                .ok_or_else(|| Error::invalid("a face metric needs the number of projected-out directions"))?;
            if k > d {
                return Err(Error::invalid(format!("rank hint {k} exceeds dimension {d}")));
            }
            let idem = (&matrix * &matrix - &matrix).norm();
            if idem > 1e-8 {
                return Err(Error::invalid(format!(
                    "face metric is not a projector (‖Σ²−Σ‖_F = {idem:e})"
                )));
            }
            let trace = matrix.trace();
            if (trace - (d - k) as f64).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "face metric trace {trace} does not equal d − k = {}",
                    d - k
                )));
            }
        }

        Ok(FairMetric {
            matrix,
            method,
            rank_hint,
        })
    }

    pub fn identity(d: usize) -> Self {
        FairMetric {
            matrix: Matrix::identity(d, d),
            method: MetricMethod::Identity,
            rank_hint: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    pub fn method(&self) -> MetricMethod {
        self.method
    }

    pub fn rank_hint(&self) -> Option<usize> {
        self.rank_hint
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: len,
            });
        }
        Ok(())
    }

    /// Squared form `(x₁−x₂)ᵀ Σ (x₁−x₂)`; no square root is taken.
    pub fn distance(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        self.check_len(x1.len())?;
        self.check_len(x2.len())?;
        let diff: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| a - b).collect();
        Ok(linalg::quad_form(&self.matrix, &diff))
    }

    /// Inner product `xᵀ Σ y` induced by the metric.
    pub fn inner(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_len(x.len())?;
        self.check_len(y.len())?;
        Ok(linalg::bilinear_form(&self.matrix, x, y))
    }

    /// `Σ ← (I − P_v) Σ (I − P_v)` with `P_v` the orthogonal projector onto `v`.
    pub fn project_out_direction(&self, v: &[f64]) -> Result<FairMetric> {
        self.check_len(v.len())?;
        let v = Vector::from_column_slice(v);
        let norm = v.norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite("direction"));
        }
        if norm == 0.0 {
            return Err(Error::invalid("cannot project out the zero vector"));
        }
        let u = v / norm;
        let d = self.dim();
        let complement = Matrix::identity(d, d) - &u * u.transpose();
        let projected = linalg::symmetrize(&(&complement * &self.matrix * &complement));

        let idem = (&projected * &projected - &projected).norm();
        let (method, rank_hint) = if idem <= 1e-8 {
            let removed = d as f64 - projected.trace();
            (MetricMethod::Face, Some(removed.round().max(0.0) as usize))
        } else if matches!(self.method, MetricMethod::Face | MetricMethod::Identity) {
            (MetricMethod::External, None)
        } else {
            (self.method, self.rank_hint)
        };
        FairMetric::new(projected, method, rank_hint)
    }

    /// Row-major text form: `d`, then `d` lines of `d` floats each.
    pub fn to_text(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        writeln!(out, "{d}").unwrap();
        for i in 0..d {
            let row: Vec<String> = (0..d).map(|j| format!("{:?}", self.matrix[(i, j)])).collect();
            writeln!(out, "{}", row.join(" ")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Matrix> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty metric file".into()))?;
        let d: usize = header
            .trim()
            .parse()
            .map_err(|_| parse_err(1, format!("expected dimension, found {:?}", header.trim())))?;
        if d == 0 {
            return Err(parse_err(1, "dimension must be positive".into()));
        }
        let mut data = Vec::with_capacity(d * d);
        for row in 0..d {
            let (idx, line) = lines
                .next()
                .ok_or_else(|| parse_err(row + 2, format!("expected {d} rows, found {row}")))?;
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| parse_err(idx + 1, format!("not a number: {tok:?}")))?;
                data.push(v);
            }
            if data.len() - before != d {
                return Err(parse_err(
                    idx + 1,
                    format!("expected {d} values, found {}", data.len() - before),
                ));
            }
        }
        if let Some((idx, _)) = lines.next() {
            return Err(parse_err(idx + 1, "trailing content after matrix".into()));
        }
        Ok(Matrix::from_row_slice(d, d, &data))
    }

    /// Writes the matrix file and its `<file>.meta.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))?;
        let meta = MetricMeta {
            method: self.method,
            k: self.rank_hint,
            dim: self.dim(),
        };
        let sidecar = sidecar_path(path);
        let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        fs::write(&sidecar, json + "\n").map_err(|e| Error::io(sidecar, e))
    }

    /// Reads a metric file; without a sidecar the method is `External`.
    pub fn load(path: &Path) -> Result<FairMetric> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let matrix = Self::from_text(&text, path)?;
        let sidecar = sidecar_path(path);
        let (method, k) = match fs::read_to_string(&sidecar) {
            Ok(json) => {
                let meta: MetricMeta = serde_json::from_str(&json).map_err(|e| Error::Parse {
                    path: sidecar.clone(),
                    line: e.line(),
                    message: e.to_string(),
                })?;
                if meta.dim != matrix.nrows() {
                    return Err(Error::DimensionMismatch {
                        expected: matrix.nrows(),
                        found: meta.dim,
                    });
                }
                (meta.method, meta.k)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => (MetricMethod::External, None),
            Err(e) => return Err(Error::io(sidecar, e)),
        };
        FairMetric::new(matrix, method, k)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricMeta {
    method: MetricMethod,
    k: Option<usize>,
    dim: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}
