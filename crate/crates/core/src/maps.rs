//! Post-hoc calibration maps from logits to probabilities.
//!
//! Every map transforms a logit row and then applies a max-subtracted
//! softmax. Vector scaling is diagonal: one scale and one bias per class.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LogitsDataset;
use crate::error::{Error, Result};

/// Floating-point width used for the softmax.
///
/// `F32` exists to reproduce tail underflow; everything else runs in `F64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// A parameterized logits-to-probabilities transform.
///
/// Serialized as `{"kind": "...", "params": {...}}` with parameter names
/// `t`, `a`, `b`, `w`, `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase", deny_unknown_fields)]
pub enum CalibrationMap {
    Identity {},
    /// `softmax(f / t)`
    Temperature { t: f64 },
    /// `softmax(a * f + b)`
    Platt { a: f64, b: f64 },
    /// `softmax(w ⊙ f + c)`
    Vector { w: Vec<f64>, c: Vec<f64> },
}

/// Map family, without parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Identity,
    Temperature,
    Platt,
    Vector,
}

impl std::str::FromStr for MapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(MapKind::Identity),
            "temperature" => Ok(MapKind::Temperature),
            "platt" => Ok(MapKind::Platt),
            "vector" => Ok(MapKind::Vector),
            other => Err(Error::Map(format!("unknown map kind `{other}`"))),
        }
    }
}

impl CalibrationMap {
    pub fn identity() -> Self {
        CalibrationMap::Identity {}
    }

    pub fn temperature(t: f64) -> Result<Self> {
        let map = CalibrationMap::Temperature { t };
        map.validate()?;
        Ok(map)
    }

    pub fn platt(a: f64, b: f64) -> Result<Self> {
        let map = CalibrationMap::Platt { a, b };
        map.validate()?;
        Ok(map)
    }

    pub fn vector(w: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let map = CalibrationMap::Vector { w, c };
        map.validate()?;
        Ok(map)
    }

    pub fn kind(&self) -> MapKind {
        match self {
            CalibrationMap::Identity {} => MapKind::Identity,
            CalibrationMap::Temperature { .. } => MapKind::Temperature,
            CalibrationMap::Platt { .. } => MapKind::Platt,
            CalibrationMap::Vector { .. } => MapKind::Vector,
        }
    }

    /// Checks the parameter invariants that do not depend on `K`.
    pub fn validate(&self) -> Result<()> {
        match self {
            CalibrationMap::Identity {} => Ok(()),
            CalibrationMap::Temperature { t } => {
                if t.is_finite() && *t > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Map(format!("temperature must be positive and finite, got {t}")))
                }
            }
            CalibrationMap::Platt { a, b } => {
                if a.is_finite() && b.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Map(format!("non-finite platt parameters a={a}, b={b}")))
                }
            }
            CalibrationMap::Vector { w, c } => {
                if w.len() != c.len() {
                    return Err(Error::Map(format!(
                        "vector scales ({}) and biases ({}) differ in length",
                        w.len(),
                        c.len()
                    )));
                }
                if w.iter().chain(c).any(|v| !v.is_finite()) {
                    return Err(Error::Map("non-finite vector parameter".into()));
                }
                Ok(())
            }
        }
    }

    /// Validates the map against a class count.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        self.validate()?;
        if let CalibrationMap::Vector { w, .. } = self {
            if w.len() != num_classes {
                return Err(Error::Map(format!(
                    "vector map has {} classes, data has {num_classes}",
                    w.len()
                )));
            }
        }
        Ok(())
    }

    /// Flattened parameter vector, in the order the tuner perturbs them.
    pub fn params(&self) -> Vec<f64> {
        match self {
            CalibrationMap::Identity {} => Vec::new(),
            CalibrationMap::Temperature { t } => vec![*t],
            CalibrationMap::Platt { a, b } => vec![*a, *b],
            CalibrationMap::Vector { w, c } => w.iter().chain(c).copied().collect(),
        }
    }

    /// Rebuilds a map of the same kind from a flattened parameter vector.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let expected = self.params().len();
        if params.len() != expected {
            return Err(Error::Map(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        let map = match self {
            CalibrationMap::Identity {} => CalibrationMap::Identity {},
            CalibrationMap::Temperature { .. } => CalibrationMap::Temperature { t: params[0] },
            CalibrationMap::Platt { .. } => CalibrationMap::Platt {
                a: params[0],
                b: params[1],
            },
            CalibrationMap::Vector { .. } => {
                let (w, c) = params.split_at(params.len() / 2);
                CalibrationMap::Vector {
                    w: w.to_vec(),
                    c: c.to_vec(),
                }
            }
        };
        map.validate()?;
        Ok(map)
    }

    #[inline]
    fn transform(&self, class: usize, logit: f64) -> f64 {
        match self {
            CalibrationMap::Identity {} => logit,
            CalibrationMap::Temperature { t } => logit / t,
            CalibrationMap::Platt { a, b } => a * logit + b,
            CalibrationMap::Vector { w, c } => w[class] * logit + c[class],
        }
    }

    /// Writes the probabilities for one logit row into `out`.
    ///
    /// Callers must have run [`check_classes`](Self::check_classes).
    pub fn apply_into(&self, logits: &[f64], out: &mut [f64], precision: Precision) {
        debug_assert_eq!(logits.len(), out.len());
        match precision {
            Precision::F64 => {
                for (k, (o, &l)) in out.iter_mut().zip(logits).enumerate() {
                    *o = self.transform(k, l);
                }
                softmax_in_place(out);
            }
            Precision::F32 => {
                let mut z: Vec<f32> = logits
                    .iter()
                    .enumerate()
                    .map(|(k, &l)| self.transform(k, l) as f32)
                    .collect();
                softmax_in_place_f32(&mut z);
                for (o, v) in out.iter_mut().zip(z) {
                    *o = v as f64;
                }
            }
        }
    }
}

/// Max-subtracted softmax.
pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn softmax_in_place_f32(z: &mut [f32]) {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Probabilities for a single logit row.
pub fn apply_map(map: &CalibrationMap, logits: &[f64]) -> Result<Vec<f64>> {
    apply_map_with(map, logits, Precision::F64)
}

pub fn apply_map_with(map: &CalibrationMap, logits: &[f64], precision: Precision) -> Result<Vec<f64>> {
    map.check_classes(logits.len())?;
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Map(format!("non-finite logit {bad}")));
    }
    let mut out = vec![0.0; logits.len()];
    map.apply_into(logits, &mut out, precision);
    Ok(out)
}

/// Row-major `n x K` probability matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    num_classes: usize,
    values: Vec<f64>,
}

impl ProbMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_classes) {
            return Err(Error::LengthMismatch("ragged probability rows".into()));
        }
        Ok(Self {
            num_classes,
            values: rows.concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len().checked_div(self.num_classes).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks(self.num_classes)
    }

    pub fn par_rows(&self) -> rayon::slice::Chunks<'_, f64> {
        self.values.par_chunks(self.num_classes)
    }
}

/// Applies `map` to every row of `ds`. Parallel over rows; the output is
/// identical to serial evaluation.
pub fn apply_map_dataset(map: &CalibrationMap, ds: &LogitsDataset) -> Result<ProbMatrix> {
    apply_map_dataset_with(map, ds, Precision::F64)
}

pub fn apply_map_dataset_with(
    map: &CalibrationMap,
    ds: &LogitsDataset,
    precision: Precision,
) -> Result<ProbMatrix> {
    let k = ds.num_classes();
    map.check_classes(k)?;
    let mut values = vec![0.0; ds.logits().len()];
    values
        .par_chunks_mut(k)
        .zip(ds.logits().par_chunks(k))
        .for_each(|(out, row)| map.apply_into(row, out, precision));
    Ok(ProbMatrix {
        num_classes: k,
        values,
    })
}

impl CalibrationMap {
    /// Reads a map from its JSON form and validates it.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: Self = serde_json::from_str(&text)?;
        map.validate()?;
        Ok(map)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`, expected f32 or f64"))),
        }
    }
}
