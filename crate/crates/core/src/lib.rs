//! Learning and auditing individually-fair Mahalanobis metrics.
//!
//! A fair metric `d(x₁, x₂) = (x₁−x₂)ᵀ Σ (x₁−x₂)` says which inputs should be
//! treated alike. This crate estimates Σ three ways:
//!
//! * [`face`]: factor analysis of groups (or pairs) of comparable samples;
//!   Σ projects out the estimated sensitive subspace.
//! * [`explore`]: maximum likelihood under a scaled-logistic model of
//!   comparable/incomparable pair labels.
//! * [`viml`]: a monotone variational inequality that works for any
//!   nonincreasing link, solved by stochastic (extra-)gradient.
//!
//! [`weat`] audits any metric with word-embedding association tests, and
//! [`synth`] generates planted data plus the theoretical error bounds used to
//! check the estimators.

pub mod embeddings;
pub mod error;
pub mod explore;
pub mod face;
pub mod linalg;
pub mod metric;
pub mod synth;
pub mod viml;
pub mod weat;

pub use embeddings::EmbeddingTable;
pub use error::{Error, Result};
pub use metric::{FairMetric, MetricMethod};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Version of the on-disk metric format (text matrix plus JSON sidecar).
pub const METRIC_FORMAT_VERSION: u32 = 1;
