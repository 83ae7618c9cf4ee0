//! Confusion counts, sensitivity/specificity/PPV/NPV/F1, and stratified
//! dataset splitting.

use std::fmt;
use std::io::Read;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Cough,
    NotCough,
}

impl Label {
    pub fn from_bool(is_cough: bool) -> Self {
        if is_cough {
            Label::Cough
        } else {
            Label::NotCough
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Cough => "cough",
            Label::NotCough => "not-cough",
        })
    }
}

impl FromStr for Label {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cough" | "1" | "true" | "positive" => Ok(Label::Cough),
            "not-cough" | "non-cough" | "unknown" | "0" | "false" | "negative" => Ok(Label::NotCough),
            other => Err(MetricsError::BadLabel(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("unrecognized label {0:?}")]
    BadLabel(String),
    #[error("class {0} has no samples")]
    EmptyClass(Label),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("manifest line {line}: {detail}")]
    Manifest { line: u64, detail: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Associative, commutative combination of two tallies.
    pub fn merge(self, other: Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }
}

pub fn accumulate(counts: ConfusionCounts, predicted: Label, actual: Label) -> ConfusionCounts {
    let mut c = counts;
    match (predicted, actual) {
        (Label::Cough, Label::Cough) => c.tp += 1,
        (Label::NotCough, Label::NotCough) => c.tn += 1,
        (Label::Cough, Label::NotCough) => c.fp += 1,
        (Label::NotCough, Label::Cough) => c.fn_ += 1,
    }
    c
}

/// Rates are `None` when their denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: ConfusionCounts,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(counts: ConfusionCounts) -> EvalReport {
    let ConfusionCounts { tp, tn, fp, fn_ } = counts;
    let sensitivity = ratio(tp, tp + fn_);
    let ppv = ratio(tp, tp + fp);
    let f1 = match (sensitivity, ppv) {
        (Some(se), Some(p)) if se + p > 0.0 => Some(2.0 * se * p / (se + p)),
        _ => None,
    };
    EvalReport {
        counts,
        sensitivity,
        specificity: ratio(tn, tn + fp),
        ppv,
        npv: ratio(tn, tn + fn_),
        f1,
    }
}

impl EvalReport {
    /// Two-column text table with rates in percent.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{:.2}%", 100.0 * x));
        let c = self.counts;
        format!(
            "TP {:>6}   FN {:>6}\nFP {:>6}   TN {:>6}\n\
             sensitivity  {}\nspecificity  {}\nPPV          {}\nNPV          {}\nF1           {}\n",
            c.tp,
            c.fn_,
            c.fp,
            c.tn,
            pct(self.sensitivity),
            pct(self.specificity),
            pct(self.ppv),
            pct(self.npv),
            pct(self.f1)
        )
    }
}

/// Indices into the input for each partition.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Whole-sample sizes for `n` items under `fractions`, by largest remainder.
/// Equal remainders go to the split with the larger fraction, then to the
/// earlier split.
pub fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * n as f64);
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let assigned: usize = sizes.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(fractions[b].total_cmp(&fractions[a])).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Shuffles each class with a seeded generator and cuts it into
/// train/validation/test by [`apportion`].
pub fn stratified_split(labels: &[Label], fractions: [f64; 3], seed: u64) -> Result<SplitAssignment, MetricsError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| f.is_nan() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(MetricsError::BadFractions(fractions));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitAssignment::default();
    for class in [Label::Cough, Label::NotCough] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            return Err(MetricsError::EmptyClass(class));
        }
        idx.shuffle(&mut rng);
        let [a, b, _] = apportion(idx.len(), fractions);
        out.train.extend_from_slice(&idx[..a]);
        out.validation.extend_from_slice(&idx[a..a + b]);
        out.test.extend_from_slice(&idx[a + b..]);
    }
    for part in [&mut out.train, &mut out.validation, &mut out.test] {
        part.sort_unstable();
    }
    Ok(out)
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.72, 0.08, 0.20];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
}

/// Reads `path,label` rows. A leading `path,label` header is optional.
pub fn read_manifest<R: Read>(reader: R) -> Result<Vec<ManifestEntry>, MetricsError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 1;
        let rec = rec.map_err(|e| MetricsError::Manifest { line, detail: e.to_string() })?;
        if rec.len() != 2 {
            return Err(MetricsError::Manifest { line, detail: format!("expected 2 fields, got {}", rec.len()) });
        }
        if i == 0 && rec[0].eq_ignore_ascii_case("path") && rec[1].eq_ignore_ascii_case("label") {
            continue;
        }
        let label = rec[1].parse().map_err(|e: MetricsError| MetricsError::Manifest { line, detail: e.to_string() })?;
        out.push(ManifestEntry { path: PathBuf::from(&rec[0]), label });
    }
    Ok(out)
}
