//! Activation datasets, the SACT file format, normalization and the
//! synthetic superposition generator.
//!
//! SACT layout (little endian):
//!
//! ```text
//! "SACT" | u32 version=1 | u32 S | u32 n | f64 scale | S × u64 id | S·n × f32 (row-major)
//! ```

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::io::{write_atomic, ByteReader};

const SACT_MAGIC: &[u8; 4] = b"SACT";
const SACT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDataset {
    /// One example per row.
    pub data: Array2<f64>,
    /// Factor already applied to the raw activations (1.0 if unnormalized).
    pub scale: f64,
    pub ids: Vec<u64>,
}

impl ActivationDataset {
    pub fn new(data: Array2<f64>, ids: Vec<u64>, scale: f64) -> Result<Self> {
        if ids.len() != data.nrows() {
            return Err(SaeError::dim("ids", data.nrows(), ids.len()));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(SaeError::DegenerateData(format!("duplicate example id {dup}")));
        }
        Ok(ActivationDataset { data, scale, ids })
    }

    /// Dataset with ids `0..S` and unit scale.
    pub fn from_matrix(data: Array2<f64>) -> Self {
        let ids = (0..data.nrows() as u64).collect();
        ActivationDataset {
            data,
            scale: 1.0,
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&v| v == id)
    }

    pub fn mean_row_norm(&self) -> f64 {
        mean_row_norm(self.data.view())
    }

    /// Rescale so the mean row norm equals `√n`. The new factor is composed
    /// with any scale already recorded.
    pub fn normalized(mut self) -> Result<Self> {
        let factor = normalization_factor(self.data.view())?;
        self.data *= factor;
        self.scale *= factor;
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (s, n) = self.data.dim();
        let mut buf = Vec::with_capacity(24 + s * 8 + s * n * 4);
        buf.extend_from_slice(SACT_MAGIC);
        buf.extend_from_slice(&SACT_VERSION.to_le_bytes());
        buf.extend_from_slice(&to_u32(s, "row count")?.to_le_bytes());
        buf.extend_from_slice(&to_u32(n, "dimension")?.to_le_bytes());
        buf.extend_from_slice(&self.scale.to_le_bytes());
        for id in &self.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        for v in self.data.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != SACT_MAGIC {
            return Err(r.error_at(0, "bad magic, expected SACT"));
        }
        let version = r.u32()?;
        if version != SACT_VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let s = r.u32()? as usize;
        let n = r.u32()? as usize;
        let scale = r.f64()?;
        let ids_offset = r.offset();
        let remaining = bytes.len().saturating_sub(r.offset() as usize);
        let mut ids = Vec::with_capacity(s.min(remaining / 8));
        for _ in 0..s {
            ids.push(r.u64()?);
        }
        let mut values = Vec::with_capacity((s * n).min(remaining / 4));
        for _ in 0..s * n {
            values.push(r.f32()? as f64);
        }
        if !r.is_empty() {
            return Err(r.error_at(r.offset(), "trailing bytes after payload"));
        }
        let data = Array2::from_shape_vec((s, n), values).expect("shape checked by reader");
        ActivationDataset::new(data, ids, scale).map_err(|e| SaeError::Format {
            offset: ids_offset,
            msg: e.to_string(),
        })
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| SaeError::Config(format!("{what} {v} exceeds u32")))
}

fn mean_row_norm(data: ArrayView2<f64>) -> f64 {
    let s = data.nrows().max(1) as f64;
    data.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / s
}

fn normalization_factor(data: ArrayView2<f64>) -> Result<f64> {
    if data.nrows() == 0 {
        return Err(SaeError::DegenerateData("dataset has no rows".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(SaeError::DegenerateData("dataset contains non-finite values".into()));
    }
    let mean = mean_row_norm(data);
    if mean == 0.0 {
        return Err(SaeError::DegenerateData("all rows have zero norm".into()));
    }
    Ok((data.ncols() as f64).sqrt() / mean)
}

/// Scale a raw matrix so that the mean row L2 norm is `√n`.
pub fn normalize(data: Array2<f64>) -> Result<ActivationDataset> {
    ActivationDataset::from_matrix(data).normalized()
}

/// Parameters of the synthetic superposition corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub m_true: usize,
    pub rows: usize,
    pub p_active: f64,
    pub magnitude_range: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m_true == 0 || self.rows == 0 {
            return Err(SaeError::Config("n, m_true and rows must be positive".into()));
        }
        if !(self.p_active > 0.0 && self.p_active < 1.0) {
            return Err(SaeError::Config(format!(
                "p_active must be in (0, 1), got {}",
                self.p_active
            )));
        }
        let (lo, hi) = self.magnitude_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(SaeError::Config(format!(
                "magnitude_range must satisfy 0 <= lo <= hi, got ({lo}, {hi})"
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(SaeError::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Known dictionary and sparse codes behind a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthDictionary {
    /// `n × M_true`, unit columns.
    pub dictionary: Array2<f64>,
    /// Per row: `(feature, coefficient)` pairs with positive coefficients,
    /// sorted by feature index. Raw (unnormalized) units.
    pub coefficients: Vec<Vec<(usize, f64)>>,
}

impl GroundTruthDictionary {
    pub fn num_features(&self) -> usize {
        self.dictionary.ncols()
    }

    /// Mean nonzero coefficient, in raw units.
    pub fn mean_active_coefficient(&self) -> f64 {
        let (sum, count) = self
            .coefficients
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, c), &(_, v)| (s + v, c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    pub fn mean_active_count(&self) -> f64 {
        let total: usize = self.coefficients.iter().map(Vec::len).sum();
        total as f64 / self.coefficients.len().max(1) as f64
    }

    /// Dictionary columns as the rows of a dataset (used for persistence).
    pub fn dictionary_dataset(&self) -> ActivationDataset {
        ActivationDataset::from_matrix(self.dictionary.t().to_owned())
    }

    pub fn from_dictionary_dataset(ds: &ActivationDataset) -> Self {
        GroundTruthDictionary {
            dictionary: ds.data.t().to_owned(),
            coefficients: Vec::new(),
        }
    }
}

/// Draw a corpus `x = D a + ε` with i.i.d. unit-sphere dictionary columns,
/// Bernoulli(`p_active`) supports and uniform magnitudes. The returned
/// dataset is not normalized.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(ActivationDataset, GroundTruthDictionary)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, m) = (spec.n, spec.m_true);

    let mut dictionary = Array2::<f64>::zeros((n, m));
    for mut col in dictionary.columns_mut() {
        loop {
            for v in col.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = col.dot(&col).sqrt();
            if norm > 1e-12 {
                col /= norm;
                break;
            }
        }
    }

    let (lo, hi) = spec.magnitude_range;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| SaeError::Config(e.to_string()))?;
    let mut data = Array2::<f64>::zeros((spec.rows, n));
    let mut coefficients = Vec::with_capacity(spec.rows);
    for mut row in data.axis_iter_mut(Axis(0)) {
        let mut active = Vec::new();
        for j in 0..m {
            if rng.random_bool(spec.p_active) {
                let a = if hi > lo { rng.random_range(lo..hi) } else { lo };
                if a > 0.0 {
                    active.push((j, a));
                }
            }
        }
        for &(j, a) in &active {
            row.scaled_add(a, &dictionary.column(j));
        }
        if spec.noise_sigma > 0.0 {
            for v in row.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        coefficients.push(active);
    }

    Ok((
        ActivationDataset::from_matrix(data),
        GroundTruthDictionary {
            dictionary,
            coefficients,
        },
    ))
}

/// One line of a report manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub report: String,
}

/// Mapping from example id to its reference report text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    reports: std::collections::HashMap<u64, String>,
}

impl Manifest {
    pub fn from_entries(entries: impl IntoIterator<Item = ManifestEntry>) -> Self {
        Manifest {
            reports: entries.into_iter().map(|e| (e.id, e.report)).collect(),
        }
    }

    pub fn get(&self, id: u64) -> Option<&str> {
        self.reports.get(&id).map(String::as_str)
    }

    pub fn report(&self, id: u64) -> Result<&str> {
        self.get(id)
            .ok_or_else(|| SaeError::Manifest(format!("no report for example id {id}")))
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
                SaeError::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            entries.push(entry);
        }
        Ok(Manifest::from_entries(entries))
    }

    /// Writes entries sorted by id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ids: Vec<_> = self.reports.keys().copied().collect();
        ids.sort_unstable();
        let mut buf = Vec::new();
        for id in ids {
            let entry = ManifestEntry {
                id,
                report: self.reports[&id].clone(),
            };
            serde_json::to_writer(&mut buf, &entry)?;
            buf.write_all(b"\n")?;
        }
        write_atomic(path, &buf)
    }
}

/// Reference reports for a synthetic corpus: each names the ground-truth
/// features active in its example, strongest first.
pub fn planted_reports(ids: &[u64], truth: &GroundTruthDictionary) -> Manifest {
    let entries = ids.iter().zip(&truth.coefficients).map(|(&id, coefs)| {
        let mut sorted = coefs.clone();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let report = if sorted.is_empty() {
            "No planted findings.".to_string()
        } else {
            let names: Vec<String> = sorted.iter().map(|(j, _)| format!("finding-{j}")).collect();
            format!("Planted findings: {}.", names.join(", "))
        };
        ManifestEntry { id, report }
    });
    Manifest::from_entries(entries)
}

/// Column means of a dataset.
pub fn column_mean(data: ArrayView2<f64>) -> Array1<f64> {
    data.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(data.ncols()))
}
