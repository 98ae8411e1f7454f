use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use saerad::checkpoint;
use saerad::data::{generate_synthetic, planted_reports, ActivationDataset, GroundTruthDictionary, Manifest, SyntheticSpec};
use saerad::error::SaeError;
use saerad::grad::{grad_check as run_grad_check, random_check_instance, KINK_MARGIN};
use saerad::interp::{
    build_describe_prompt, describe_features, nn_baseline, report_prompt, ActivationIndex, Backend,
    DescribeOptions, DescriptionStore, FeatureRecord, HttpBackend, HttpConfig, MockBackend,
    NearestReport, PriorReport, ReportContext, DEFAULT_K,
};
use saerad::intervene::{counterfactual_token, cyclic_consistency, InterventionSpec};
use saerad::io::write_atomic;
use saerad::metrics::{evaluate, mmcs, EvalReport};
use saerad::optim::TrainConfig;
use saerad::sae::{SaeParams, SaeVariant};
use saerad::train::{TrainLogRecord, Trainer};

use crate::{GradCheckFailed, UsageError};

fn echo_config(command: &str, args: &impl Serialize) -> Result<()> {
    info!(command, config = %serde_json::to_string(args)?, "resolved configuration");
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, &item)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line)
            .map_err(|e| SaeError::Pipeline(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(item);
    }
    Ok(out)
}

fn load_dataset(path: &Path) -> Result<ActivationDataset> {
    ActivationDataset::load(path).with_context(|| format!("loading activations {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<SaeParams> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_prompt(dir: Option<&Path>, name: &str, prompt: &str) -> Result<()> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join(name), prompt.as_bytes())?;
    }
    Ok(())
}

fn rows_for_ids(data: &ActivationDataset, ids: &[u64]) -> Result<Vec<(u64, usize)>> {
    if ids.is_empty() {
        return Ok(data.ids.iter().copied().zip(0..).collect());
    }
    ids.iter()
        .map(|&id| {
            data.row_of(id)
                .map(|row| (id, row))
                .ok_or_else(|| SaeError::Pipeline(format!("example id {id} not in dataset")).into())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Deterministic offline backend that echoes its inputs.
    Mock,
    /// Chat-completion HTTP endpoint configured by --http-config.
    Http,
}

fn http_backend(config: Option<&Path>) -> Result<Box<dyn Backend>> {
    let path = config.ok_or_else(|| UsageError("--backend http needs --http-config".into()))?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: HttpConfig = serde_json::from_str(&text)
        .map_err(|e| SaeError::Config(format!("{}: {e}", path.display())))?;
    Ok(Box::new(HttpBackend::new(cfg)?))
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Activation dimension.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Number of ground-truth dictionary atoms.
    #[arg(long, default_value_t = 256)]
    pub m_true: usize,
    #[arg(long, default_value_t = 50_000)]
    pub rows: usize,
    /// Probability that each atom is active in an example.
    #[arg(long, default_value_t = 0.02)]
    pub p_active: f64,
    #[arg(long, default_value_t = 0.5)]
    pub mag_lo: f64,
    #[arg(long, default_value_t = 1.5)]
    pub mag_hi: f64,
    #[arg(long, default_value_t = 0.01)]
    pub noise_sigma: f64,
    #[arg(long, default_value = "activations.sact")]
    pub out: PathBuf,
    /// Skip rescaling rows to mean norm sqrt(n).
    #[arg(long)]
    pub raw: bool,
    /// Write a JSONL manifest of planted reports naming each example's atoms.
    #[arg(long)]
    pub manifest_out: Option<PathBuf>,
    /// Write the ground-truth dictionary (atoms as rows) as a SACT file.
    #[arg(long)]
    pub truth_out: Option<PathBuf>,
}

pub fn gen_data(args: GenDataArgs, seed: Option<u64>) -> Result<()> {
    let spec = SyntheticSpec {
        n: args.n,
        m_true: args.m_true,
        rows: args.rows,
        p_active: args.p_active,
        magnitude_range: (args.mag_lo, args.mag_hi),
        noise_sigma: args.noise_sigma,
        seed: seed.unwrap_or(0),
    };
    echo_config("gen-data", &(&args, &spec))?;
    let (raw, truth) = generate_synthetic(&spec)?;
    let data = if args.raw { raw } else { raw.normalized()? };
    data.save(&args.out)?;
    if let Some(path) = &args.manifest_out {
        planted_reports(&data.ids, &truth).save(path)?;
    }
    if let Some(path) = &args.truth_out {
        truth.dictionary_dataset().save(path)?;
    }
    print_json(&serde_json::json!({
        "out": args.out,
        "rows": data.len(),
        "n": data.dim(),
        "scale": data.scale,
        "mean_active_count": truth.mean_active_count(),
    }))
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// JSON file whose fields mirror TrainConfig.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSONL metric log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

pub fn train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut config: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| SaeError::Config(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    echo_config("train", &(&args, &config))?;
    let data = load_dataset(&args.data)?;

    let mut log = Vec::new();
    let mut log_err = None;
    let last_good = PathBuf::from(format!("{}.last-good", args.out.display()));
    let outcome = Trainer::new(config)
        .on_record(|r: &TrainLogRecord| {
            if let Err(e) = serde_json::to_writer(&mut log, r) {
                log_err.get_or_insert(e);
            }
            log.push(b'\n');
        })
        .last_good_checkpoint(&last_good)
        .run(&data);
    if let Some(path) = &args.log {
        write_atomic(path, &log)?;
    }
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let (params, report) = outcome?;
    checkpoint::save(&params, &args.out)?;
    print_json(&serde_json::json!({
        "checkpoint": args.out,
        "steps_run": report.steps_run,
        "final": report.records.last(),
        "max_decoder_norm_deviation": report.decoder_norm_deviation.iter().copied().fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v)))),
    }))
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Ground-truth dictionary from `gen-data --truth-out`; adds MMCS.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    report: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    mmcs: Option<f64>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    echo_config("eval", &args)?;
    let params = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let report = evaluate(&params, &data)?;
    let mmcs = match &args.truth {
        Some(path) => {
            let truth = GroundTruthDictionary::from_dictionary_dataset(&load_dataset(path)?);
            Some(mmcs(&params, &truth)?)
        }
        None => None,
    };
    let output = EvalOutput { report, mmcs };
    if let Some(path) = &args.out {
        let mut bytes = serde_json::to_vec_pretty(&output)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)?;
    }
    print_json(&output)
}

#[derive(Debug, Args, Serialize)]
pub struct GradCheckArgs {
    #[arg(long, default_value = "sae-rad")]
    pub variant: SaeVariant,
    #[arg(long, default_value_t = 6)]
    pub n: usize,
    #[arg(long, default_value_t = 12)]
    pub m: usize,
    #[arg(long, default_value_t = 3)]
    pub batch: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
}

pub fn grad_check(args: GradCheckArgs, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(0);
    echo_config("grad-check", &(&args, seed))?;
    let (params, batch) =
        random_check_instance(args.variant, args.n, args.m, args.batch, seed, KINK_MARGIN)?;
    let errors = run_grad_check(&params, batch.view(), args.lambda, args.step)?;
    let worst = errors.iter().map(|&(_, e)| e).fold(0.0, f64::max);
    let per_tensor: BTreeMap<&str, f64> = errors.into_iter().collect();
    print_json(&serde_json::json!({
        "variant": args.variant,
        "seed": seed,
        "max_relative_error": per_tensor,
        "worst": worst,
        "tolerance": args.tolerance,
        "pass": worst <= args.tolerance,
    }))?;
    if !(worst <= args.tolerance) {
        return Err(GradCheckFailed {
            worst,
            tolerance: args.tolerance,
        }
        .into());
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct TopKArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Comma-separated feature indices; all firing features when omitted.
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<usize>,
    /// JSONL of feature records.
    #[arg(long)]
    pub out: PathBuf,
}

fn collect_top_k(
    params: &SaeParams,
    data: &ActivationDataset,
    k: usize,
    features: &[usize],
) -> Result<Vec<FeatureRecord>> {
    let index = ActivationIndex::build(params, data)?;
    if features.is_empty() {
        let mut records = Vec::new();
        let mut silent = 0;
        for i in 0..index.num_features() {
            match index.top_k(i, k) {
                Ok(r) => records.push(r),
                Err(SaeError::EmptyFeature(_)) => silent += 1,
                Err(e) => return Err(e.into()),
            }
        }
        if silent > 0 {
            warn!(silent, "skipped features that never fire");
        }
        Ok(records)
    } else {
        features
            .iter()
            .map(|&i| index.top_k(i, k).map_err(Into::into))
            .collect()
    }
}

pub fn top_k(args: TopKArgs) -> Result<()> {
    echo_config("top-k", &args)?;
    let params = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let records = collect_top_k(&params, &data, args.k, &args.features)?;
    write_atomic(&args.out, &jsonl(&records)?)?;
    print_json(&serde_json::json!({ "out": args.out, "features": records.len() }))
}

#[derive(Debug, Args, Serialize)]
pub struct DescribeArgs {
    /// Checkpoint the features belong to; its digest keys the store.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL manifest of example reports.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Feature records from `top-k`; otherwise computed from --data.
    #[arg(long, conflicts_with = "data")]
    pub records: Option<PathBuf>,
    #[arg(long, required_unless_present = "records")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<usize>,
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
    #[arg(long)]
    pub http_config: Option<PathBuf>,
    /// Extra attempts per feature after a failed or unparsable reply.
    #[arg(long, default_value_t = 2)]
    pub retries: usize,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    /// Description store (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// Save each describer prompt as feature_<i>.txt here.
    #[arg(long)]
    pub prompts_dir: Option<PathBuf>,
}

pub fn describe(args: DescribeArgs) -> Result<()> {
    echo_config("describe", &args)?;
    let digest = checkpoint::digest(&args.checkpoint)?;
    let manifest = Manifest::load(&args.manifest)?;
    let records = match (&args.records, &args.data) {
        (Some(path), _) => {
            let mut records: Vec<FeatureRecord> = read_jsonl(path)?;
            if !args.features.is_empty() {
                records.retain(|r| args.features.contains(&r.index));
            }
            records
        }
        (None, Some(data)) => {
            let params = load_checkpoint(&args.checkpoint)?;
            collect_top_k(&params, &load_dataset(data)?, args.k, &args.features)?
        }
        (None, None) => bail!(UsageError("describe needs --records or --data".into())),
    };
    for r in &records {
        let prompt = build_describe_prompt(r, &manifest)?;
        write_prompt(args.prompts_dir.as_deref(), &format!("feature_{}.txt", r.index), &prompt)?;
    }

    let backend: Box<dyn Backend> = match args.backend {
        BackendKind::Mock => Box::new(MockBackend::echo_reports()),
        BackendKind::Http => http_backend(args.http_config.as_deref())?,
    };
    let options = DescribeOptions {
        retries: args.retries,
        max_in_flight: args.max_in_flight,
    };
    let results = describe_features(&records, backend.as_ref(), &manifest, options);
    let mut store = DescriptionStore::new(digest);
    let mut failed = Vec::new();
    for (record, result) in records.iter().zip(results) {
        match result {
            Ok(described) => store.insert(&described)?,
            Err(e) => {
                warn!(feature = record.index, error = %e, "describe failed");
                failed.push(record.index);
            }
        }
    }
    store.save(&args.out)?;
    print_json(&serde_json::json!({
        "out": args.out,
        "described": store.len(),
        "failed": failed,
    }))?;
    if !failed.is_empty() {
        bail!(SaeError::Pipeline(format!(
            "{} of {} features could not be described: {failed:?}",
            failed.len(),
            records.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PriorsLine {
    id: u64,
    priors: Vec<PriorReport>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Description store from `describe`.
    #[arg(long)]
    pub descriptions: PathBuf,
    /// Activations of the images to report on.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated example ids; all examples when omitted.
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<u64>,
    /// Activation threshold above which a feature counts as present.
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    /// Reason for the examination, shared by every example.
    #[arg(long)]
    pub indication: Option<String>,
    /// JSONL of {"id", "priors": [{"text", "age_minutes"}]}.
    #[arg(long)]
    pub priors: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
    #[arg(long)]
    pub http_config: Option<PathBuf>,
    /// JSONL of {"id", "report"}.
    #[arg(long)]
    pub out: PathBuf,
    /// Save each generator prompt as report_<id>.txt here.
    #[arg(long)]
    pub prompts_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct ReportLine<'a> {
    id: u64,
    report: &'a str,
}

pub fn report(args: ReportArgs) -> Result<()> {
    echo_config("report", &args)?;
    let params = load_checkpoint(&args.checkpoint)?;
    let digest = checkpoint::digest(&args.checkpoint)?;
    let descriptions = DescriptionStore::load(&args.descriptions, &digest)?.descriptions();
    let data = load_dataset(&args.data)?;
    let priors: HashMap<u64, Vec<PriorReport>> = match &args.priors {
        Some(path) => read_jsonl::<PriorsLine>(path)?
            .into_iter()
            .map(|l| (l.id, l.priors))
            .collect(),
        None => HashMap::new(),
    };
    let backend: Box<dyn Backend> = match args.backend {
        BackendKind::Mock => Box::new(MockBackend::echo_features()),
        BackendKind::Http => http_backend(args.http_config.as_deref())?,
    };

    let mut reports = Vec::new();
    for (id, row) in rows_for_ids(&data, &args.ids)? {
        let ctx = ReportContext {
            tau: args.tau,
            indication: args.indication.as_deref(),
            priors: priors.get(&id).map_or(&[], Vec::as_slice),
        };
        let prompt = report_prompt(data.data.row(row), &params, &descriptions, &ctx)?;
        write_prompt(args.prompts_dir.as_deref(), &format!("report_{id}.txt"), &prompt)?;
        let text = backend
            .send(&prompt)
            .map_err(|e| SaeError::Generator(format!("example {id}: {e}")))?;
        reports.push((id, text));
    }
    let lines = reports.iter().map(|(id, report)| ReportLine { id: *id, report });
    write_atomic(&args.out, &jsonl(lines)?)?;
    print_json(&serde_json::json!({ "out": args.out, "reports": reports.len() }))
}

#[derive(Debug, Args, Serialize)]
pub struct BaselineArgs {
    /// Training activations searched for the nearest neighbor.
    #[arg(long)]
    pub train: PathBuf,
    /// Reports of the training examples.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Query activations.
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<u64>,
    /// JSONL of {"query_id", "id", "distance", "report"}.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct BaselineLine {
    query_id: u64,
    #[serde(flatten)]
    nearest: NearestReport,
}

pub fn baseline(args: BaselineArgs) -> Result<()> {
    echo_config("baseline", &args)?;
    let train = load_dataset(&args.train)?;
    let manifest = Manifest::load(&args.manifest)?;
    let query = load_dataset(&args.query)?;
    let mut lines = Vec::new();
    for (id, row) in rows_for_ids(&query, &args.ids)? {
        lines.push(BaselineLine {
            query_id: id,
            nearest: nn_baseline(query.data.row(row), &train, &manifest)?,
        });
    }
    write_atomic(&args.out, &jsonl(&lines)?)?;
    print_json(&serde_json::json!({ "out": args.out, "queries": lines.len() }))
}

#[derive(Debug, Args, Serialize)]
pub struct InterveneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// SACT file of tokens to edit.
    #[arg(long)]
    pub token_file: PathBuf,
    #[arg(long)]
    pub feature: usize,
    /// New latent value of the feature.
    #[arg(long)]
    pub beta: f64,
    /// Add each token's reconstruction error back to its counterfactual.
    #[arg(long)]
    pub correct_delta: bool,
    /// Re-encode the corrected token in the cyclic-consistency check.
    #[arg(long)]
    pub reencode_corrected: bool,
    /// SACT file of counterfactual tokens.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct InterventionLine {
    id: u64,
    /// Norm of the change from the feature-off decoding.
    displacement_norm: f64,
    /// Max deviation of that change from `beta` times the decoder column.
    linearity_error: f64,
    cyclic_residual: f64,
}

pub fn intervene(args: InterveneArgs) -> Result<()> {
    echo_config("intervene", &args)?;
    let params = load_checkpoint(&args.checkpoint)?;
    let tokens = load_dataset(&args.token_file)?;
    let spec = InterventionSpec {
        feature: args.feature,
        beta: args.beta,
        apply_delta_correction: args.correct_delta,
    };
    let off = InterventionSpec { beta: 0.0, ..spec };
    let column = params.w_dec.column(args.feature.min(params.m().saturating_sub(1))).to_owned();

    let mut out = tokens.data.clone();
    let mut lines = Vec::with_capacity(tokens.len());
    for ((z, mut dst), &id) in tokens.data.outer_iter().zip(out.outer_iter_mut()).zip(&tokens.ids) {
        let on = counterfactual_token(&params, z, spec)?;
        let base = counterfactual_token(&params, z, off)?;
        let displacement = &on.z_tilde - &base.z_tilde;
        let linearity_error = (&displacement - &(&column * args.beta))
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        let cyclic = cyclic_consistency(&params, z, args.feature, args.beta, args.reencode_corrected)?;
        dst.assign(&on.emitted());
        lines.push(InterventionLine {
            id,
            displacement_norm: displacement.dot(&displacement).sqrt(),
            linearity_error,
            cyclic_residual: cyclic.residual,
        });
    }
    if out.iter().any(|v| !v.is_finite()) {
        bail!(SaeError::Numerics("counterfactual tokens".into()));
    }
    ActivationDataset::new(out, tokens.ids.clone(), tokens.scale)?.save(&args.out)?;
    let mut stdout = std::io::stdout().lock();
    for line in &lines {
        serde_json::to_writer(&mut stdout, line)?;
        writeln!(stdout)?;
    }
    Ok(())
}
