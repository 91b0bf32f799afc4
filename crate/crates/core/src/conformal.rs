//! Split-conformal calibration and prediction-set construction.
//!
//! The threshold is the `ceil((n + 1)(1 - alpha))`-th smallest calibration
//! score. When that rank exceeds `n` no finite threshold exists and the
//! threshold becomes [`Tau::IncludeAll`]. Prediction sets contain every
//! class whose score is `<= tau`.
//!
//! Uniform draws for randomized scores are keyed by sample index:
//! calibration rows use `0..n_cal`, test rows `n_cal..n_cal + n_test`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::LogitsDataset;
use crate::error::{Error, Result};
use crate::maps::{apply_map_dataset_with, CalibrationMap, Precision, ProbMatrix};
use crate::score::{rank_row, ScoreSpec};

/// A calibrated threshold, or the sentinel for "calibration set too small".
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tau {
    Value(f64),
    IncludeAll,
}

impl Tau {
    /// Whether a score falls inside the set.
    #[inline]
    pub fn admits(self, score: f64) -> bool {
        match self {
            Tau::Value(tau) => score <= tau,
            Tau::IncludeAll => true,
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Tau::Value(v) => Some(v),
            Tau::IncludeAll => None,
        }
    }
}

impl Serialize for Tau {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Tau::Value(v) => s.serialize_f64(*v),
            Tau::IncludeAll => s.serialize_str("include_all"),
        }
    }
}

impl<'de> Deserialize<'de> for Tau {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Tau::Value(v)),
            Raw::Str(s) if s == "include_all" => Ok(Tau::IncludeAll),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "tau must be a number or \"include_all\", got \"{s}\""
            ))),
        }
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Alpha(alpha))
    }
}

/// `ceil((n + 1)(1 - alpha))`, the 1-indexed order statistic used as the
/// threshold. May exceed `n`.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let level = (n as f64 + 1.0) * (1.0 - alpha);
    // products such as 20 * 0.9 can land one ulp above an integer
    (level * (1.0 - 1e-12)).ceil() as usize
}

/// Smallest calibration size whose conformal rank fits inside the data.
pub fn min_calibration_size(alpha: f64) -> usize {
    (1..).find(|&n| conformal_rank(n, alpha) <= n).unwrap()
}

/// Threshold from a list of calibration scores.
pub fn calibrate_threshold(scores: &[f64], alpha: f64) -> Result<Tau> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Score(format!("calibration score {bad}")));
    }
    let rank = conformal_rank(scores.len(), alpha);
    if rank > scores.len() {
        return Ok(Tau::IncludeAll);
    }
    let mut work = scores.to_vec();
    let (_, kth, _) = work.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(Tau::Value(*kth))
}

/// Everything needed to build prediction sets for new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalThreshold {
    pub tau: Tau,
    pub alpha: f64,
    pub n_cal: usize,
    pub score: ScoreSpec,
    pub map: CalibrationMap,
}

impl ConformalThreshold {
    /// Calibrates on `cal` using true-label scores.
    pub fn calibrate(cal: &LogitsDataset, map: &CalibrationMap, spec: &ScoreSpec, alpha: f64) -> Result<Self> {
        Self::calibrate_with(cal, map, spec, alpha, Precision::F64)
    }

    pub fn calibrate_with(
        cal: &LogitsDataset,
        map: &CalibrationMap,
        spec: &ScoreSpec,
        alpha: f64,
        precision: Precision,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        spec.validate()?;
        let probs = apply_map_dataset_with(map, cal, precision)?;
        let scores = true_label_scores(&probs, cal.labels(), spec, 0);
        Ok(Self {
            tau: calibrate_threshold(&scores, alpha)?,
            alpha,
            n_cal: cal.len(),
            score: spec.clone(),
            map: map.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&text)?;
        check_alpha(t.alpha)?;
        t.score.validate()?;
        t.map.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Score of each row's true label. `u_offset` is the sample index of row 0.
pub fn true_label_scores(probs: &ProbMatrix, labels: &[u32], spec: &ScoreSpec, u_offset: u64) -> Vec<f64> {
    probs
        .par_rows()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (row, &y))| {
            let ranked = rank_row(row);
            let u = spec.sample_u(u_offset + i as u64);
            spec.score_at_rank(&ranked, ranked.rank(y as usize), u)
        })
        .collect()
}

/// Members of one prediction set, in ascending class order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub index: usize,
    #[serde(rename = "set")]
    pub members: Vec<usize>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.members.binary_search(&class).is_ok()
    }
}

/// `{ k : score(k) <= tau }` for one probability row.
///
/// `u` is ignored by non-randomized scores.
pub fn predict_set(threshold: &ConformalThreshold, probs: &[f64], u: f64, index: usize) -> PredictionSet {
    let k = probs.len();
    let members = match threshold.tau {
        Tau::IncludeAll => (0..k).collect(),
        tau => {
            let u = if threshold.score.uses_u() { u } else { 1.0 };
            let ranked = rank_row(probs);
            let mut scores = vec![0.0; k];
            threshold.score.scores_ranked(&ranked, u, &mut scores);
            (0..k).filter(|&c| tau.admits(scores[c])).collect()
        }
    };
    PredictionSet { index, members }
}

/// Prediction sets for every row of `test`; draws start at sample index
/// `threshold.n_cal`.
pub fn predict_sets(threshold: &ConformalThreshold, test: &LogitsDataset) -> Result<Vec<PredictionSet>> {
    predict_sets_with(threshold, test, Precision::F64)
}

pub fn predict_sets_with(
    threshold: &ConformalThreshold,
    test: &LogitsDataset,
    precision: Precision,
) -> Result<Vec<PredictionSet>> {
    let probs = apply_map_dataset_with(&threshold.map, test, precision)?;
    Ok(sets_from_probs(threshold, &probs))
}

pub fn sets_from_probs(threshold: &ConformalThreshold, probs: &ProbMatrix) -> Vec<PredictionSet> {
    let offset = threshold.n_cal as u64;
    probs
        .par_rows()
        .enumerate()
        .map(|(i, row)| predict_set(threshold, row, threshold.score.sample_u(offset + i as u64), i))
        .collect()
}

/// Output of a full calibrate-then-predict run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub threshold: ConformalThreshold,
    pub sets: Vec<PredictionSet>,
}

pub fn run_pipeline(
    cal: &LogitsDataset,
    test: &LogitsDataset,
    map: &CalibrationMap,
    spec: &ScoreSpec,
    alpha: f64,
) -> Result<PipelineOutput> {
    run_pipeline_with(cal, test, map, spec, alpha, Precision::F64)
}

pub fn run_pipeline_with(
    cal: &LogitsDataset,
    test: &LogitsDataset,
    map: &CalibrationMap,
    spec: &ScoreSpec,
    alpha: f64,
    precision: Precision,
) -> Result<PipelineOutput> {
    if cal.num_classes() != test.num_classes() {
        return Err(Error::ClassMismatch {
            expected: cal.num_classes(),
            found: test.num_classes(),
        });
    }
    let threshold = ConformalThreshold::calibrate_with(cal, map, spec, alpha, precision)?;
    let sets = predict_sets_with(&threshold, test, precision)?;
    Ok(PipelineOutput { threshold, sets })
}

/// Writes one `{"index": i, "set": [...]}` object per line.
pub fn write_sets(sets: &[PredictionSet], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for set in sets {
        serde_json::to_writer(&mut w, set)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sets(path: &Path) -> Result<Vec<PredictionSet>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sets = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut set: PredictionSet =
            serde_json::from_str(&line).map_err(|e| Error::row(line_no, format!("bad prediction set: {e}")))?;
        set.members.sort_unstable();
        set.members.dedup();
        sets.push(set);
    }
    Ok(sets)
}
