use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgGroup, Args, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::json;

use fairmetric::embeddings::{self, EmbeddingTable};
use fairmetric::explore::{explore_fit, ExploreConfig, Init};
use fairmetric::face::{face_fit_pairs_with, face_fit_with, ComparableGroups, FaceOptions};
use fairmetric::synth::{self, FactorModelSpec, Latent};
use fairmetric::viml::{viml_fit, Averaging, LinkFunction, StepSchedule, VISolverConfig, ViMethod};
use fairmetric::weat::{self, PermutationOptions, WeatSpec};
use fairmetric::linalg::Vector;
use fairmetric::FairMetric;

use crate::Global;

fn echo_config(command: &str, global: &Global, args: &impl Serialize) {
    let config = json!({ "command": command, "global": global, "args": args });
    info!("config {config}");
}

/// Writes `text` to `--output`, or stdout when no output was given.
fn emit(global: &Global, text: &str) -> Result<()> {
    match &global.output {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn required_output<'a>(global: &'a Global, what: &str) -> Result<&'a Path> {
    global
        .output
        .as_deref()
        .ok_or_else(|| anyhow!("--output is required: where to write the {what}"))
}

fn json_lines<T: Serialize>(records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

fn load_metric(path: Option<&Path>, dim: usize) -> Result<FairMetric> {
    match path {
        None => Ok(FairMetric::identity(dim)),
        Some(p) => {
            let m = FairMetric::load(p)?;
            if m.dim() != dim {
                return Err(fairmetric::Error::DimensionMismatch {
                    expected: dim,
                    found: m.dim(),
                }
                .into());
            }
            Ok(m)
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("comparisons").required(true).args(["groups", "pairs"])))]
pub struct FaceArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// One group of comparable tokens per line.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Headerless `a,b` CSV of comparable pairs.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Dimension of the sensitive subspace (no default).
    #[arg(long)]
    pub k: usize,
}

pub fn face(global: &Global, args: &FaceArgs) -> Result<()> {
    echo_config("face", global, args);
    let output = required_output(global, "metric")?;
    let table = EmbeddingTable::load(&args.embeddings)?;
    let options = FaceOptions {
        partitions: global.threads as usize,
    };
    let (metric, subspace) = match (&args.groups, &args.pairs) {
        (Some(g), None) => {
            let groups = ComparableGroups::new(embeddings::read_groups(g, &table)?, table.len())?;
            face_fit_with(&table, &groups, args.k, options)?
        }
        (None, Some(p)) => face_fit_pairs_with(&table, &embeddings::read_pairs(p, &table)?, args.k, options)?,
        _ => bail!("exactly one of --groups and --pairs is required"),
    };
    metric.save(output)?;
    let summary = json!({
        "output": output,
        "method": "face",
        "k": subspace.k(),
        "dim": subspace.dim(),
    });
    println!("{summary}");
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitArg {
    IdentityScaled,
    Zero,
}

impl From<InitArg> for Init {
    fn from(a: InitArg) -> Init {
        match a {
            InitArg::IdentityScaled => Init::IdentityScaled,
            InitArg::Zero => Init::Zero,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ExploreArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// CSV with header `a,b,y`.
    #[arg(long)]
    pub triplets: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.1)]
    pub step0: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, value_enum, default_value = "identity-scaled")]
    pub init: InitArg,
    /// Cap on the largest eigenvalue of every iterate.
    #[arg(long)]
    pub lambda_max: Option<f64>,
    /// JSON-lines training log, one record per epoch.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

pub fn explore(global: &Global, args: &ExploreArgs) -> Result<()> {
    echo_config("explore", global, args);
    let config = ExploreConfig {
        epsilon: args.epsilon,
        step0: args.step0,
        batch_size: args.batch,
        epochs: args.epochs,
        seed: global.seed,
        init: args.init.into(),
        lambda_max: args.lambda_max,
    };
    config.validate()?;
    let output = required_output(global, "metric")?;
    let table = EmbeddingTable::load(&args.embeddings)?;
    let data = embeddings::read_triplets(&args.triplets, &table)?;
    let fit = explore_fit(&table, &data, &config)?;
    fit.metric.save(output)?;
    match &args.log {
        Some(path) => fs::write(path, json_lines(&fit.log)).with_context(|| format!("writing {}", path.display()))?,
        None => fit.log.iter().for_each(|r| info!("{}", serde_json::to_string(r).expect("serializes"))),
    }
    let last = fit.log.last().expect("at least one epoch");
    println!("{}", json!({ "output": output, "method": "explore", "loglik": last.loglik }));
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Sg,
    Seg,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleArg {
    Constant,
    InvSqrt,
}

fn parse_averaging(s: &str) -> std::result::Result<Averaging, String> {
    let avg = match s.split_once(':') {
        None if s == "none" => Averaging::None,
        None if s == "uniform" => Averaging::Uniform,
        Some(("geometric", b)) => Averaging::Geometric(b.parse().map_err(|_| format!("bad beta `{b}`"))?),
        _ => return Err("expected none, uniform or geometric:<beta>".into()),
    };
    avg.validate().map_err(|e| e.to_string())?;
    Ok(avg)
}

#[derive(Debug, Args, Serialize)]
pub struct VimlArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub triplets: PathBuf,
    /// logistic, scaled:<eps>, probit or table:<path>.
    #[arg(long, default_value = "logistic")]
    pub link: String,
    #[arg(long, value_enum, default_value = "seg")]
    pub method: MethodArg,
    #[arg(long, default_value_t = 0.1)]
    pub step: f64,
    #[arg(long, value_enum, default_value = "constant")]
    pub schedule: ScheduleArg,
    /// none, uniform or geometric:<beta>.
    #[arg(long, default_value = "uniform", value_parser = parse_averaging)]
    #[serde(skip)]
    pub averaging: Averaging,
    #[arg(long, default_value_t = 5000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Radius of the restricted-merit ball around the initial iterate.
    #[arg(long, default_value_t = 10.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 32)]
    pub merit_samples: usize,
    #[arg(long, default_value_t = 10)]
    pub checkpoints: usize,
    #[arg(long, value_enum, default_value = "identity-scaled")]
    pub init: InitArg,
    /// JSON-lines diagnostics, one record per checkpoint.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

pub fn viml(global: &Global, args: &VimlArgs) -> Result<()> {
    let config = VISolverConfig {
        method: match args.method {
            MethodArg::Sg => ViMethod::Sg,
            MethodArg::Seg => ViMethod::Seg,
        },
        step: match args.schedule {
            ScheduleArg::Constant => StepSchedule::Constant(args.step),
            ScheduleArg::InvSqrt => StepSchedule::InvSqrt(args.step),
        },
        averaging: args.averaging,
        iterations: args.iterations,
        batch_size: args.batch,
        seed: global.seed,
        radius: args.radius,
        merit_samples: args.merit_samples,
        checkpoints: args.checkpoints,
        init: args.init.into(),
    };
    info!(
        "config {}",
        json!({ "command": "viml", "global": global, "args": args, "solver": config })
    );
    config.validate()?;
    let link = LinkFunction::parse(&args.link)?;
    let output = required_output(global, "metric")?;
    let table = EmbeddingTable::load(&args.embeddings)?;
    let data = embeddings::read_triplets(&args.triplets, &table)?;
    let fit = viml_fit(&table, &data, &link, &config)?;
    fit.metric.save(output)?;
    match &args.diagnostics {
        Some(path) => {
            fs::write(path, json_lines(&fit.diagnostics)).with_context(|| format!("writing {}", path.display()))?
        }
        None => fit.diagnostics.iter().for_each(|r| info!("{}", serde_json::to_string(r).expect("serializes"))),
    }
    let residual = fit.diagnostics.last().map(|d| d.residual);
    println!("{}", json!({ "output": output, "method": "viml", "residual": residual }));
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Table,
}

#[derive(Debug, Args, Serialize)]
pub struct WeatArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Word list of target set X.
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    /// Word list of attribute set A.
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Metric file; the identity (plain cosine) when omitted.
    #[arg(long)]
    pub metric: Option<PathBuf>,
    #[arg(long, default_value = "weat")]
    pub name: String,
    #[arg(long, default_value_t = weat::DEFAULT_MAX_PARTITIONS)]
    pub max_partitions: u64,
    /// Count ties at half weight.
    #[arg(long)]
    pub midp: bool,
    #[arg(long, value_enum, default_value = "json")]
    pub format: ReportFormat,
}

pub fn weat(global: &Global, args: &WeatArgs) -> Result<()> {
    echo_config("weat", global, args);
    let table = EmbeddingTable::load(&args.embeddings)?;
    let metric = load_metric(args.metric.as_deref(), table.dim())?;
    let spec = WeatSpec {
        name: args.name.clone(),
        targets_x: embeddings::read_word_list(&args.x)?,
        targets_y: embeddings::read_word_list(&args.y)?,
        attributes_a: embeddings::read_word_list(&args.a)?,
        attributes_b: embeddings::read_word_list(&args.b)?,
    };
    let opts = PermutationOptions {
        max_partitions: args.max_partitions,
        seed: global.seed,
        threads: global.threads as usize,
        midp: args.midp,
    };
    let report = weat::run_weat(&table, &spec, &metric, &opts)?;
    let text = match args.format {
        ReportFormat::Json => serde_json::to_string_pretty(&report)? + "\n",
        ReportFormat::Table => weat::format_table(std::slice::from_ref(&report)),
    };
    emit(global, &text)
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SimKind {
    /// Comparable pairs whose differences follow the factor model.
    Pairs,
    /// Groups of comparable samples, each around its own mean.
    Groups,
    /// Labelled pairs from a binary response model.
    Triplets,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentArg {
    Gaussian,
    Rademacher,
}

#[derive(Debug, Args, Serialize)]
pub struct PlantedArgs {
    #[arg(long, default_value_t = 10)]
    pub d: usize,
    /// Sensitive dimension.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Relevant dimension.
    #[arg(long, default_value_t = 2)]
    pub l: usize,
    #[arg(long, default_value_t = 25.0)]
    pub lambda_min: f64,
    /// `‖B*B*ᵀ‖_op`.
    #[arg(long, default_value_t = 0.5)]
    pub relevant_norm: f64,
    /// Noise standard deviation.
    #[arg(long, default_value_t = std::f64::consts::FRAC_1_SQRT_2)]
    pub sigma: f64,
}

impl PlantedArgs {
    fn spec(&self, seed: u64) -> fairmetric::Result<FactorModelSpec> {
        FactorModelSpec::planted(
            self.d,
            self.k,
            self.l,
            self.lambda_min,
            self.relevant_norm,
            self.sigma,
            seed,
        )
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub kind: SimKind,
    #[command(flatten)]
    pub planted: PlantedArgs,
    /// Pairs, triplets, or groups to generate.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub group_size: usize,
    /// Scale of the random group means.
    #[arg(long, default_value_t = 3.0)]
    pub mean_scale: f64,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub latent: LatentArg,
    /// Response link for `triplets`.
    #[arg(long, default_value = "scaled:0.1")]
    pub link: String,
    /// Σ₀ for `triplets`; the identity when omitted.
    #[arg(long)]
    pub sigma0: Option<PathBuf>,
    /// Standard deviation of the pair differences for `triplets`.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
}

pub fn simulate(global: &Global, args: &SimulateArgs) -> Result<()> {
    echo_config("simulate", global, args);
    let dir = required_output(global, "generated files (a directory)")?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let seed = global.seed;
    let emb_path = dir.join("embeddings.txt");
    let truth_path = dir.join("truth.metric");
    let latent = match args.latent {
        LatentArg::Gaussian => Latent::Gaussian,
        LatentArg::Rademacher => Latent::Rademacher,
    };
    let mut files = vec![emb_path.clone(), truth_path.clone()];
    match args.kind {
        SimKind::Pairs => {
            let spec = args.planted.spec(seed)?.with_latent(latent);
            let z = synth::gen_pair_differences(&spec, args.n, seed.wrapping_add(1))?;
            let (table, pairs) = synth::pairs_from_differences(&z, seed.wrapping_add(2))?;
            table.save(&emb_path)?;
            let pairs_path = dir.join("pairs.csv");
            embeddings::write_pairs(&pairs_path, &table, &pairs)?;
            spec.truth_metric()?.save(&truth_path)?;
            files.push(pairs_path);
        }
        SimKind::Groups => {
            if args.group_size < 2 {
                bail!("--group-size must be at least 2");
            }
            let spec = args.planted.spec(seed)?.with_latent(latent);
            let d = spec.dim();
            let mut vocab = Vec::new();
            let mut data = Vec::new();
            let mut groups = Vec::new();
            let means = synth::gen_isotropic_pairs(d, args.n, args.mean_scale * std::f64::consts::SQRT_2, seed.wrapping_add(3))?.0;
            for g in 0..args.n {
                let spec_g = spec.clone().with_mean(Vector::from_column_slice(means.row(2 * g)))?;
                let rows = synth::gen_group(&spec_g, args.group_size, seed.wrapping_add(100 + g as u64))?;
                let start = vocab.len();
                for i in 0..rows.len() {
                    vocab.push(format!("g{g}_{i}"));
                    data.extend_from_slice(rows.row(i));
                }
                groups.push((start..vocab.len()).collect::<Vec<_>>());
            }
            let table = EmbeddingTable::new(vocab, data, d)?;
            table.save(&emb_path)?;
            let groups_path = dir.join("groups.txt");
            embeddings::write_groups(&groups_path, &table, &groups)?;
            spec.truth_metric()?.save(&truth_path)?;
            files.push(groups_path);
        }
        SimKind::Triplets => {
            let d = args.planted.d;
            let sigma0 = load_metric(args.sigma0.as_deref(), d)?;
            let link = LinkFunction::parse(&args.link)?;
            let (table, pairs) = synth::gen_isotropic_pairs(d, args.n, args.scale, seed.wrapping_add(1))?;
            let data = synth::gen_binary_response_with(&table, &pairs, &sigma0, |t| link.prob(t), seed.wrapping_add(2))?;
            table.save(&emb_path)?;
            let trip_path = dir.join("triplets.csv");
            embeddings::write_triplets(&trip_path, &table, &data)?;
            sigma0.save(&truth_path)?;
            files.push(trip_path);
        }
    }
    println!("{}", json!({ "kind": args.kind, "files": files }));
    Ok(())
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("what").required(true).args(["a", "pairs"])))]
pub struct DistanceArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Metric file; the identity when omitted.
    #[arg(long)]
    pub metric: Option<PathBuf>,
    #[arg(long, requires = "b")]
    pub a: Option<String>,
    #[arg(long, requires = "a")]
    pub b: Option<String>,
    /// Headerless `a,b` CSV; one JSON line per pair is written.
    #[arg(long, conflicts_with = "a")]
    pub pairs: Option<PathBuf>,
}

pub fn distance(global: &Global, args: &DistanceArgs) -> Result<()> {
    echo_config("distance", global, args);
    let table = EmbeddingTable::load(&args.embeddings)?;
    let metric = load_metric(args.metric.as_deref(), table.dim())?;
    let lookup = |tok: &str| {
        table
            .index_of(tok)
            .ok_or_else(|| anyhow!(fairmetric::Error::InvalidInput(format!("unknown token `{tok}`"))))
    };
    let pairs: Vec<(usize, usize)> = match (&args.a, &args.b, &args.pairs) {
        (Some(a), Some(b), None) => vec![(lookup(a)?, lookup(b)?)],
        (None, None, Some(p)) => embeddings::read_pairs(p, &table)?,
        _ => bail!("give either --a and --b, or --pairs"),
    };
    let mut out = String::new();
    for (a, b) in pairs {
        let d = metric.distance(table.row(a), table.row(b))?;
        out += &json!({ "a": table.token(a), "b": table.token(b), "distance": d }).to_string();
        out.push('\n');
    }
    emit(global, &out)
}

#[derive(Debug, Args, Serialize)]
pub struct BoundsArgs {
    #[command(flatten)]
    pub planted: PlantedArgs,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 3.0)]
    pub t: f64,
    /// The unquantified absolute constant in δ.
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
}

pub fn bounds(global: &Global, args: &BoundsArgs) -> Result<()> {
    echo_config("bounds", global, args);
    let spec = args.planted.spec(global.seed)?;
    let q = synth::theoretical_bound_with_constant(&spec, args.n, args.t, args.c)?;
    emit(global, &(serde_json::to_string_pretty(&q)? + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averaging_flag() {
        assert_eq!(parse_averaging("none").unwrap(), Averaging::None);
        assert_eq!(parse_averaging("geometric:0.9").unwrap(), Averaging::Geometric(0.9));
        assert!(parse_averaging("geometric:1.5").is_err());
        assert!(parse_averaging("polyak").is_err());
    }
}
