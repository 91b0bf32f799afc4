//! Evaluation of prediction sets and probability calibration.

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::conformal::PredictionSet;
use crate::dataset::{argmax, LogitsDataset};
use crate::error::{Error, Result};
use crate::maps::{apply_map_dataset_with, CalibrationMap, Precision, ProbMatrix};
use crate::score::{rank_row, RankedRow, ScoreSpec};

pub const DEFAULT_ECE_BINS: usize = 15;

/// Fraction of sets containing their label, and mean set size.
pub fn coverage_and_size(sets: &[PredictionSet], labels: &[u32]) -> Result<(f64, f64)> {
    if sets.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} prediction sets for {} labels",
            sets.len(),
            labels.len()
        )));
    }
    if sets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = sets.len() as f64;
    let covered = sets
        .iter()
        .zip(labels)
        .filter(|(s, &y)| s.contains(y as usize))
        .count();
    let total: usize = sets.iter().map(PredictionSet::len).sum();
    Ok((covered as f64 / n, total as f64 / n))
}

/// Equal-width top-1 confidence bins `((m-1)/M, m/M]`, zero going to the
/// first bin. Empty bins contribute nothing.
pub fn expected_calibration_error(probs: &ProbMatrix, labels: &[u32], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::Config("ECE needs at least one bin".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    for (row, &y) in probs.rows().zip(labels) {
        let top = argmax(row);
        let conf = row[top];
        let m = ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[m] += 1;
        conf_sum[m] += conf;
        if top == y as usize {
            hits[m] += 1;
        }
    }
    let n = labels.len() as f64;
    let mut ece = 0.0;
    for m in 0..bins {
        if count[m] == 0 {
            continue;
        }
        let c = count[m] as f64;
        ece += (c / n) * (hits[m] as f64 / c - conf_sum[m] / c).abs();
    }
    Ok(ece)
}

/// Inclusive range of 1-indexed true-label ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankBin {
    pub lo: usize,
    pub hi: usize,
}

impl RankBin {
    pub fn label(&self) -> String {
        if self.lo == self.hi {
            self.lo.to_string()
        } else {
            format!("{}-{}", self.lo, self.hi)
        }
    }

    fn contains(&self, rank: usize) -> bool {
        (self.lo..=self.hi).contains(&rank)
    }
}

impl std::str::FromStr for RankBin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Bins(format!("bad rank `{v}` in bin `{s}`")))
        };
        let (lo, hi) = match s.split_once('-') {
            Some((a, b)) => (parse(a)?, parse(b)?),
            None => {
                let v = parse(s)?;
                (v, v)
            }
        };
        if lo == 0 || hi < lo {
            return Err(Error::Bins(format!("bin `{s}` is empty or starts at 0")));
        }
        Ok(RankBin { lo, hi })
    }
}

/// Bins 1, 2-3, 4-6, 7-10, 11-100, 101-K, dropping bins past `K` and
/// clipping the last one to `K`.
pub fn default_rank_bins(num_classes: usize) -> Vec<RankBin> {
    [(1, 1), (2, 3), (4, 6), (7, 10), (11, 100), (101, usize::MAX)]
        .into_iter()
        .filter(|&(lo, _)| lo <= num_classes)
        .map(|(lo, hi)| RankBin {
            lo,
            hi: hi.min(num_classes),
        })
        .collect()
}

/// Parses `1,2-3,4-10` style bin lists.
pub fn parse_rank_bins(text: &str) -> Result<Vec<RankBin>> {
    text.split(',').map(str::parse).collect()
}

/// Bins must tile `[1, K]` exactly.
pub fn check_rank_bins(bins: &[RankBin], num_classes: usize) -> Result<()> {
    let mut sorted = bins.to_vec();
    sorted.sort_by_key(|b| b.lo);
    let mut next = 1;
    for b in &sorted {
        if b.lo < next {
            return Err(Error::Bins(format!("overlapping bins at {}", b.label())));
        }
        if b.lo > next {
            return Err(Error::Bins(format!("ranks {next}-{} not covered", b.lo - 1)));
        }
        next = b.hi + 1;
    }
    if next != num_classes + 1 {
        return Err(Error::Bins(format!(
            "bins cover ranks 1-{}, need 1-{num_classes}",
            next - 1
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankBinStat {
    #[serde(skip)]
    pub label: String,
    pub count: usize,
    /// `None` when no sample fell in the bin.
    pub mean_size: Option<f64>,
}

/// Per-bin statistics in bin order; serialized as a JSON object keyed by
/// bin label.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankBinStats(pub Vec<RankBinStat>);

impl Serialize for RankBinStats {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for stat in &self.0 {
            map.serialize_entry(&stat.label, stat)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for RankBinStats {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RankBinStats;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a map from rank-bin label to {count, mean_size}")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((label, mut stat)) = access.next_entry::<String, RankBinStat>()? {
                    stat.label = label;
                    out.push(stat);
                }
                Ok(RankBinStats(out))
            }
        }
        d.deserialize_map(V)
    }
}

impl RankBinStats {
    pub fn get(&self, label: &str) -> Option<&RankBinStat> {
        self.0.iter().find(|s| s.label == label)
    }
}

/// Count and mean set size of samples grouped by the rank of their true
/// label.
pub fn size_by_rank(
    sets: &[PredictionSet],
    ranked: &[RankedRow],
    labels: &[u32],
    bins: &[RankBin],
) -> Result<RankBinStats> {
    if ranked.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} ranked rows for {} labels",
            ranked.len(),
            labels.len()
        )));
    }
    let ranks: Vec<usize> = ranked.iter().zip(labels).map(|(r, &y)| r.rank(y as usize)).collect();
    size_by_true_rank(sets, &ranks, bins)
}

/// As [`size_by_rank`], from precomputed true-label ranks.
pub fn size_by_true_rank(sets: &[PredictionSet], ranks: &[usize], bins: &[RankBin]) -> Result<RankBinStats> {
    if sets.len() != ranks.len() {
        return Err(Error::LengthMismatch(format!(
            "{} prediction sets for {} ranks",
            sets.len(),
            ranks.len()
        )));
    }
    let max_rank = bins.iter().map(|b| b.hi).max().unwrap_or(0);
    check_rank_bins(bins, max_rank)?;
    let mut stats = Vec::with_capacity(bins.len());
    for bin in bins {
        let mut count = 0;
        let mut total = 0usize;
        for (set, &r) in sets.iter().zip(ranks) {
            if bin.contains(r) {
                count += 1;
                total += set.len();
            }
        }
        stats.push(RankBinStat {
            label: bin.label(),
            count,
            mean_size: (count > 0).then(|| total as f64 / count as f64),
        });
    }
    Ok(RankBinStats(stats))
}

/// Result of evaluating a softmax for exact-zero tail probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationDiagnostic {
    pub truncated_row_fraction: f64,
    pub zero_tail_counts: Vec<usize>,
}

/// Rows in which some class with a finite logit gets probability exactly 0.
pub fn truncation_diagnostic(
    map: &CalibrationMap,
    ds: &LogitsDataset,
    precision: Precision,
) -> Result<TruncationDiagnostic> {
    if !matches!(map, CalibrationMap::Temperature { .. }) {
        return Err(Error::Map(format!(
            "truncation diagnostic needs a temperature map, got {:?}",
            map.kind()
        )));
    }
    let probs = apply_map_dataset_with(map, ds, precision)?;
    Ok(zero_tails(&probs))
}

/// Exact-zero counts for an already evaluated probability matrix.
pub fn zero_tails(probs: &ProbMatrix) -> TruncationDiagnostic {
    let zero_tail_counts: Vec<usize> = probs
        .rows()
        .map(|row| row.iter().filter(|&&p| p == 0.0).count())
        .collect();
    let truncated = zero_tail_counts.iter().filter(|&&c| c > 0).count();
    TruncationDiagnostic {
        truncated_row_fraction: truncated as f64 / probs.len().max(1) as f64,
        zero_tail_counts,
    }
}

/// Summary of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub coverage: f64,
    pub average_size: f64,
    pub ece: f64,
    pub size_by_rank_bin: RankBinStats,
    pub truncated_row_fraction: f64,
    pub alpha: Option<f64>,
    pub n_test: usize,
    pub score: Option<ScoreSpec>,
    pub map: CalibrationMap,
}

/// Options for [`evaluate`].
#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    pub map: CalibrationMap,
    pub alpha: Option<f64>,
    pub score: Option<ScoreSpec>,
    /// `None` selects [`default_rank_bins`].
    pub bins: Option<Vec<RankBin>>,
    pub ece_bins: usize,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self {
            map: CalibrationMap::identity(),
            alpha: None,
            score: None,
            bins: None,
            ece_bins: DEFAULT_ECE_BINS,
        }
    }
}

/// Scores `sets` against `test`, whose probabilities come from `opts.map`.
pub fn evaluate(sets: &[PredictionSet], test: &LogitsDataset, opts: &EvaluateOptions) -> Result<EvaluationReport> {
    let (coverage, average_size) = coverage_and_size(sets, test.labels())?;
    let probs = apply_map_dataset_with(&opts.map, test, Precision::F64)?;
    let ece = expected_calibration_error(&probs, test.labels(), opts.ece_bins)?;
    let k = test.num_classes();
    let bins = opts.bins.clone().unwrap_or_else(|| default_rank_bins(k));
    check_rank_bins(&bins, k)?;
    let ranks: Vec<usize> = probs
        .rows()
        .zip(test.labels())
        .map(|(row, &y)| rank_row(row).rank(y as usize))
        .collect();
    let size_by_rank_bin = size_by_true_rank(sets, &ranks, &bins)?;
    Ok(EvaluationReport {
        coverage,
        average_size,
        ece,
        size_by_rank_bin,
        truncated_row_fraction: zero_tails(&probs).truncated_row_fraction,
        alpha: opts.alpha,
        n_test: test.len(),
        score: opts.score.clone(),
        map: opts.map.clone(),
    })
}
