//! Feature labeling and report composition: top activating examples,
//! describer prompts, active-feature sets and a nearest-neighbor baseline.

mod backend;
mod prompts;
mod store;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::data::{ActivationDataset, Manifest};
use crate::error::{Result, SaeError};
use crate::metrics::sparse_codes;
use crate::sae::{sq_dist, SaeParams};

pub use backend::{Backend, HttpBackend, HttpConfig, MockBackend};
pub use prompts::{build_describe_prompt, build_report_prompt, format_age, PriorReport, MAX_PRIORS};
pub use store::{DescriptionStore, StoredDescription};

/// Number of top examples shown to the describer by default.
pub const DEFAULT_K: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub index: usize,
    /// `(example id, feature activation)`, strongest first.
    pub top_examples: Vec<(u64, f64)>,
    pub description: Option<String>,
    pub raw_describer_output: Option<String>,
}

/// Per-feature lists of firing examples, built from one encoding pass.
pub struct ActivationIndex {
    /// `feature → [(example id, feature activation)]`.
    by_feature: Vec<Vec<(u64, f64)>>,
}

impl ActivationIndex {
    pub fn build(params: &SaeParams, data: &ActivationDataset) -> Result<Self> {
        let codes = sparse_codes(params, data.data.view())?;
        let norms = params.decoder_norms();
        let weighted = params.variant.norm_weighted();
        let mut by_feature = vec![Vec::new(); params.m()];
        for (code, &id) in codes.iter().zip(&data.ids) {
            for &(i, h) in code {
                let a = if weighted { h * norms[i] } else { h };
                if a > 0.0 {
                    by_feature[i].push((id, a));
                }
            }
        }
        Ok(ActivationIndex { by_feature })
    }

    pub fn num_features(&self) -> usize {
        self.by_feature.len()
    }

    /// Number of examples on which feature `i` fires.
    pub fn fire_count(&self, i: usize) -> usize {
        self.by_feature.get(i).map_or(0, Vec::len)
    }

    /// The `k` strongest examples for feature `i`; ties go to the lower id.
    pub fn top_k(&self, i: usize, k: usize) -> Result<FeatureRecord> {
        if k == 0 {
            return Err(SaeError::Config("k must be at least 1".into()));
        }
        let list = self.by_feature.get(i).ok_or(SaeError::Index {
            index: i,
            len: self.by_feature.len(),
        })?;
        if list.is_empty() {
            return Err(SaeError::EmptyFeature(i));
        }
        let mut sorted = list.clone();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        sorted.truncate(k);
        Ok(FeatureRecord {
            index: i,
            top_examples: sorted,
            description: None,
            raw_describer_output: None,
        })
    }
}

/// The `k` highest-activating examples of feature `i`.
pub fn top_k(params: &SaeParams, data: &ActivationDataset, i: usize, k: usize) -> Result<FeatureRecord> {
    if i >= params.m() {
        return Err(SaeError::Index {
            index: i,
            len: params.m(),
        });
    }
    ActivationIndex::build(params, data)?.top_k(i, k)
}

/// Text after the last `*`, trimmed.
pub fn parse_description(raw: &str) -> Result<String> {
    let (_, tail) = raw
        .rsplit_once('*')
        .ok_or_else(|| SaeError::Parse("reply contains no '*' marker".into()))?;
    let tail = tail.trim();
    if tail.is_empty() {
        return Err(SaeError::Parse("nothing follows the final '*'".into()));
    }
    Ok(tail.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DescribeOptions {
    /// Extra attempts after a failed or unparsable reply.
    pub retries: usize,
    /// Maximum concurrent backend calls when describing many features.
    pub max_in_flight: usize,
}

impl Default for DescribeOptions {
    fn default() -> Self {
        DescribeOptions {
            retries: 2,
            max_in_flight: 4,
        }
    }
}

/// Ask `describer` for a label of `record`, retrying on backend or parse
/// failures.
pub fn describe_feature(
    record: &FeatureRecord,
    describer: &dyn Backend,
    manifest: &Manifest,
    retries: usize,
) -> Result<FeatureRecord> {
    let prompt = build_describe_prompt(record, manifest)?;
    let attempts = retries + 1;
    let mut last = String::new();
    for attempt in 1..=attempts {
        match describer.send(&prompt) {
            Ok(raw) => match parse_description(&raw) {
                Ok(description) => {
                    let mut out = record.clone();
                    out.description = Some(description);
                    out.raw_describer_output = Some(raw);
                    return Ok(out);
                }
                Err(e) => last = e.to_string(),
            },
            Err(e) => last = e.to_string(),
        }
        tracing::debug!(feature = record.index, attempt, error = %last, "describe attempt failed");
    }
    Err(SaeError::Describer { attempts, last })
}

/// Describe many features with at most `max_in_flight` concurrent calls.
/// Results line up with `records` regardless of completion order.
pub fn describe_features(
    records: &[FeatureRecord],
    describer: &dyn Backend,
    manifest: &Manifest,
    options: DescribeOptions,
) -> Vec<Result<FeatureRecord>> {
    let workers = options.max_in_flight.clamp(1, records.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<FeatureRecord>>>> =
        Mutex::new((0..records.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(record) = records.get(i) else { break };
                let result = describe_feature(record, describer, manifest, options.retries);
                slots.lock().expect("result slots")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every record processed"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveFeature {
    pub feature: usize,
    pub activation: f64,
    /// Activation relative to the strongest feature of the same example.
    pub importance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActiveFeatureSet {
    pub example_id: Option<u64>,
    /// Strongest first.
    pub entries: Vec<ActiveFeature>,
}

/// Features whose activation on `x` exceeds `tau`.
pub fn active_features(params: &SaeParams, x: ArrayView1<f64>, tau: f64) -> Result<ActiveFeatureSet> {
    if !(tau >= 0.0) {
        return Err(SaeError::Config(format!("tau must be >= 0, got {tau}")));
    }
    let h = params.encode(x)?.h;
    let mut entries = Vec::new();
    for i in 0..params.m() {
        let a = params.feature_activation(h.view(), i)?;
        if a > tau {
            entries.push(ActiveFeature {
                feature: i,
                activation: a,
                importance: 0.0,
            });
        }
    }
    entries.sort_by(|a, b| b.activation.total_cmp(&a.activation).then(a.feature.cmp(&b.feature)));
    if let Some(max) = entries.first().map(|e| e.activation) {
        for e in &mut entries {
            e.importance = e.activation / max;
        }
    }
    Ok(ActiveFeatureSet {
        example_id: None,
        entries,
    })
}

/// Inputs to report generation other than the image itself.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportContext<'a> {
    pub tau: f64,
    pub indication: Option<&'a str>,
    pub priors: &'a [PriorReport],
}

/// The generator prompt for `x`: its active features with descriptions.
pub fn report_prompt(
    x: ArrayView1<f64>,
    params: &SaeParams,
    descriptions: &HashMap<usize, String>,
    ctx: &ReportContext<'_>,
) -> Result<String> {
    let set = active_features(params, x, ctx.tau)?;
    build_report_prompt(&set, descriptions, ctx.indication, ctx.priors)
}

/// Compose a findings paragraph for `x`. The generator's reply is returned
/// verbatim.
pub fn generate_report(
    x: ArrayView1<f64>,
    params: &SaeParams,
    descriptions: &HashMap<usize, String>,
    generator: &dyn Backend,
    ctx: &ReportContext<'_>,
) -> Result<String> {
    let prompt = report_prompt(x, params, descriptions, ctx)?;
    generator
        .send(&prompt)
        .map_err(|e| SaeError::Generator(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearestReport {
    pub id: u64,
    pub distance: f64,
    pub report: String,
}

/// Report of the training example closest to `x` in Euclidean distance;
/// ties go to the lower id.
pub fn nn_baseline(x: ArrayView1<f64>, train: &ActivationDataset, manifest: &Manifest) -> Result<NearestReport> {
    if train.is_empty() {
        return Err(SaeError::DegenerateData("training set is empty".into()));
    }
    if x.len() != train.dim() {
        return Err(SaeError::dim("query", train.dim(), x.len()));
    }
    let mut best: Option<(f64, u64)> = None;
    for (row, &id) in train.data.outer_iter().zip(&train.ids) {
        let d = sq_dist(x, row);
        let better = match best {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && id < bid),
        };
        if better {
            best = Some((d, id));
        }
    }
    let (d, id) = best.expect("nonempty");
    if !d.is_finite() {
        return Err(SaeError::Numerics("nearest-neighbor distance".into()));
    }
    Ok(NearestReport {
        id,
        distance: d.sqrt(),
        report: manifest.report(id)?.to_string(),
    })
}
