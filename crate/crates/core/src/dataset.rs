//! Logits datasets: validation, CSV and binary storage, and seeded splits.
//!
//! Two on-disk formats are supported.
//!
//! CSV: a header `label,logit_0,...,logit_{K-1}` followed by one row per
//! sample. Floats are written in shortest round-trip form, so a CSV
//! round-trip is bit-exact as well.
//!
//! Binary (all integers little-endian):
//!
//! ```text
//! "CPLG" | 0x01 | n: u64 | K: u32 | n x u32 labels | n*K x f64 logits, row-major
//! ```
//!
//! Any deviation from either layout is a load error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CPLG";
const VERSION: u8 = 0x01;
const HEADER_LEN: usize = 4 + 1 + 8 + 4;

/// An `n x K` matrix of finite classifier logits with one label per row.
///
/// Immutable once constructed; every constructor enforces `n >= 1`,
/// `K >= 2`, finite logits and labels in `[0, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsDataset {
    num_classes: usize,
    logits: Vec<f64>,
    labels: Vec<u32>,
}

impl LogitsDataset {
    /// Builds a dataset from row-major logits.
    pub fn new(num_classes: usize, logits: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if num_classes < 2 {
            return Err(Error::Format(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if logits.len() != labels.len() * num_classes {
            return Err(Error::LengthMismatch(format!(
                "{} logits for {} rows of {} classes",
                logits.len(),
                labels.len(),
                num_classes
            )));
        }
        for (row, (&label, values)) in labels.iter().zip(logits.chunks(num_classes)).enumerate() {
            check_row(row, label, values, num_classes)?;
        }
        Ok(Self {
            num_classes,
            logits,
            labels,
        })
    }

    /// Builds a dataset from a list of rows.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<u32>) -> Result<Self> {
        let num_classes = rows.first().map_or(0, Vec::len);
        if let Some(row) = rows.iter().position(|r| r.len() != num_classes) {
            return Err(Error::row(row, "ragged row"));
        }
        Self::new(num_classes, rows.concat(), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.logits.chunks(self.num_classes)
    }

    /// Row-major logits.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Selects rows by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut logits = Vec::with_capacity(indices.len() * self.num_classes);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            logits.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(self.num_classes, logits, labels)
    }

    /// Top-1 accuracy of the raw logits (ties go to the lowest class index).
    pub fn accuracy(&self) -> f64 {
        let hits = self
            .rows()
            .zip(&self.labels)
            .filter(|(row, &y)| argmax(row) == y as usize)
            .count();
        hits as f64 / self.len() as f64
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_row(row: usize, label: u32, values: &[f64], num_classes: usize) -> Result<()> {
    if label as usize >= num_classes {
        return Err(Error::row(
            row,
            format!("label {label} out of range [0, {num_classes})"),
        ));
    }
    if let Some(col) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::row(
            row,
            format!("non-finite logit {} in column {col}", values[col]),
        ));
    }
    Ok(())
}

/// On-disk dataset encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Binary,
}

impl Format {
    /// `.csv` files are CSV; everything else is treated as binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Binary => "bin",
        }
    }
}

pub fn load_dataset(path: &Path, format: Format) -> Result<LogitsDataset> {
    match format {
        Format::Csv => load_csv(path),
        Format::Binary => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_binary(&bytes)
        }
    }
}

pub fn save_dataset(ds: &LogitsDataset, path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Csv => save_csv(ds, path),
        Format::Binary => {
            let bytes = encode_binary(ds);
            std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
        }
    }
}

/// Serializes a dataset into the binary layout.
pub fn encode_binary(ds: &LogitsDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * (4 + 8 * ds.num_classes));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.num_classes as u32).to_le_bytes());
    for &label in &ds.labels {
        out.extend_from_slice(&label.to_le_bytes());
    }
    for &v in &ds.logits {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses the binary layout, rejecting any deviation.
pub fn decode_binary(bytes: &[u8]) -> Result<LogitsDataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file too short for header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic bytes, expected CPLG".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let n = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
    let k = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if k < 2 {
        return Err(Error::Format(format!("need at least 2 classes, got {k}")));
    }
    let n = usize::try_from(n).map_err(|_| Error::Format(format!("row count {n} too large")))?;
    let body = &bytes[HEADER_LEN..];

    let label_bytes = n
        .checked_mul(4)
        .ok_or_else(|| Error::Format("row count overflows".into()))?;
    let row_bytes = k * 8;
    let expected = n
        .checked_mul(row_bytes)
        .and_then(|b| b.checked_add(label_bytes))
        .ok_or_else(|| Error::Format("size overflows".into()))?;

    if body.len() < label_bytes {
        let row = body.len() / 4;
        return Err(Error::row(row, "truncated file inside label block"));
    }
    if body.len() < expected {
        let row = (body.len() - label_bytes) / row_bytes;
        return Err(Error::row(row, "truncated file inside logit block"));
    }
    if body.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after logit block",
            body.len() - expected
        )));
    }

    let labels: Vec<u32> = body[..label_bytes]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let logits: Vec<f64> = body[label_bytes..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LogitsDataset::new(k, logits, labels)
}

fn load_csv(path: &Path) -> Result<LogitsDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header = reader
        .headers()
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?
        .clone();
    if header.get(0) != Some("label") {
        return Err(Error::Format("header must start with `label`".into()));
    }
    let k = header.len() - 1;
    for (i, name) in header.iter().skip(1).enumerate() {
        if name != format!("logit_{i}") {
            return Err(Error::Format(format!(
                "header column {} is `{name}`, expected `logit_{i}`",
                i + 1
            )));
        }
    }
    if k < 2 {
        return Err(Error::Format(format!("need at least 2 classes, got {k}")));
    }

    let mut labels = Vec::new();
    let mut logits = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::row(row, e.to_string()))?;
        if record.len() != k + 1 {
            return Err(Error::row(
                row,
                format!("expected {} fields, found {}", k + 1, record.len()),
            ));
        }
        let label: u32 = record[0]
            .parse()
            .map_err(|_| Error::row(row, format!("invalid label `{}`", &record[0])))?;
        let start = logits.len();
        for field in record.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::row(row, format!("invalid logit `{field}`")))?;
            logits.push(v);
        }
        check_row(row, label, &logits[start..], k)?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    LogitsDataset::new(k, logits, labels)
}

/// Shortest representation that parses back to the same bits.
fn format_float(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v:?}")
    } else {
        format!("{v:e}")
    }
}

fn save_csv(ds: &LogitsDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    let mut header = String::from("label");
    for i in 0..ds.num_classes {
        header.push_str(&format!(",logit_{i}"));
    }
    writeln!(w, "{header}").map_err(io)?;
    for (row, &label) in ds.rows().zip(&ds.labels) {
        let mut line = label.to_string();
        for &v in row {
            line.push(',');
            line.push_str(&format_float(v));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Named fractions, optional seeded shuffle.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub seed: u64,
    pub parts: Vec<(String, f64)>,
    pub shuffle: bool,
}

impl SplitSpec {
    pub fn new(parts: &[(&str, f64)], shuffle: bool, seed: u64) -> Self {
        Self {
            seed,
            parts: parts.iter().map(|&(n, f)| (n.to_string(), f)).collect(),
            shuffle,
        }
    }

    /// Equal halves; used by the tuner for the tau/loss split.
    pub fn halves(first: &str, second: &str, seed: u64) -> Self {
        Self::new(&[(first, 0.5), (second, 0.5)], true, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::Split("no parts".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (name, frac) in &self.parts {
            if name.is_empty() {
                return Err(Error::Split("empty part name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Split(format!("duplicate part `{name}`")));
            }
            if !(*frac > 0.0 && *frac <= 1.0) {
                return Err(Error::Split(format!(
                    "fraction {frac} for `{name}` outside (0, 1]"
                )));
            }
        }
        let total: f64 = self.parts.iter().map(|(_, f)| f).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Split(format!("fractions sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Part sizes for `n` rows: `floor(fraction * n)` each, the last part
    /// taking the remainder.
    pub fn part_sizes(&self, n: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if n < self.parts.len() {
            return Err(Error::Split(format!(
                "{n} rows cannot fill {} parts",
                self.parts.len()
            )));
        }
        let mut sizes: Vec<usize> = self.parts[..self.parts.len() - 1]
            .iter()
            // 1e-9 absorbs products like 0.29 * 100 = 28.999999999999996
            .map(|(_, f)| (f * n as f64 + 1e-9).floor() as usize)
            .collect();
        let used: usize = sizes.iter().sum();
        if used > n {
            return Err(Error::Split("part sizes exceed row count".into()));
        }
        sizes.push(n - used);
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Split(format!(
                "{n} rows too few: part `{}` would be empty",
                self.parts[i].0
            )));
        }
        Ok(sizes)
    }
}

/// Row order after the optional seeded shuffle.
pub fn split_permutation(n: usize, spec: &SplitSpec) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if spec.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        order.shuffle(&mut rng);
    }
    order
}

/// Partitions `ds` into disjoint named parts whose union is `ds`.
pub fn split_dataset(ds: &LogitsDataset, spec: &SplitSpec) -> Result<BTreeMap<String, LogitsDataset>> {
    let sizes = spec.part_sizes(ds.len())?;
    let order = split_permutation(ds.len(), spec);
    let mut parts = BTreeMap::new();
    let mut start = 0;
    for ((name, _), size) in spec.parts.iter().zip(sizes) {
        parts.insert(name.clone(), ds.select(&order[start..start + size])?);
        start += size;
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LogitsDataset {
        LogitsDataset::from_rows(&[vec![2.0, 1.0, 0.0], vec![0.0, 1.0, 2.0]], vec![0, 1]).unwrap()
    }

    fn numbered(n: usize) -> LogitsDataset {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, 0.0]).collect();
        LogitsDataset::from_rows(&rows, vec![0; n]).unwrap()
    }

    fn first_logits(ds: &LogitsDataset) -> Vec<usize> {
        ds.rows().map(|r| r[0] as usize).collect()
    }

    #[test]
    fn csv_parse_example() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "label,logit_0,logit_1,logit_2\n0,2.0,1.0,0.0\n1,0.0,1.0,2.0\n").unwrap();
        let ds = load_dataset(&path, Format::Csv).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes(), 3);
        assert_eq!(ds.labels(), &[0, 1]);
        assert_eq!(ds, small());
    }

    #[test]
    fn csv_nan_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "label,logit_0,logit_1\n0,1.0,2.0\n1,nan,0.5\n").unwrap();
        let err = load_dataset(&path, Format::Csv).unwrap_err();
        assert!(matches!(err, Error::Row { row: 1, .. }), "{err}");
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn csv_bad_header_and_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "y,logit_0,logit_1\n0,1.0,2.0\n").unwrap();
        assert!(matches!(load_dataset(&path, Format::Csv), Err(Error::Format(_))));
        std::fs::write(&path, "label,logit_0,logit_1\n0,1.0,2.0\n2,1.0,2.0\n").unwrap();
        assert!(matches!(
            load_dataset(&path, Format::Csv),
            Err(Error::Row { row: 1, .. })
        ));
        std::fs::write(&path, "label,logit_0,logit_1\n").unwrap();
        assert!(matches!(load_dataset(&path, Format::Csv), Err(Error::EmptyDataset)));
    }

    #[test]
    fn binary_empty_dataset() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.push(VERSION);
        bytes.extend_from_slice(&0u64.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        let err = decode_binary(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn binary_layout_is_exact() {
        let bytes = encode_binary(&small());
        assert_eq!(&bytes[..5], b"CPLG\x01");
        assert_eq!(&bytes[5..13], &2u64.to_le_bytes());
        assert_eq!(&bytes[13..17], &3u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &0u32.to_le_bytes());
        assert_eq!(&bytes[21..25], &1u32.to_le_bytes());
        assert_eq!(&bytes[25..33], &2.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 17 + 2 * 4 + 6 * 8);
    }

    #[test]
    fn binary_deviations_rejected() {
        let good = encode_binary(&small());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_binary(&bad_magic), Err(Error::Format(_))));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(decode_binary(&bad_version), Err(Error::Format(_))));

        let truncated = &good[..good.len() - 8];
        assert!(matches!(decode_binary(truncated), Err(Error::Row { row: 1, .. })));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_binary(&trailing), Err(Error::Format(_))));

        let mut bad_label = good.clone();
        bad_label[21..25].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode_binary(&bad_label), Err(Error::Row { row: 1, .. })));

        let mut inf = good;
        inf[25..33].copy_from_slice(&f64::INFINITY.to_le_bytes());
        assert!(matches!(decode_binary(&inf), Err(Error::Row { row: 0, .. })));
    }

    #[test]
    fn save_to_missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("d.bin");
        let err = save_dataset(&small(), &path, Format::Binary).unwrap_err();
        assert!(err.is_io());
    }

    #[test]
    fn csv_round_trip_exact() {
        let ds = LogitsDataset::from_rows(
            &[vec![0.1, -3.25e-300, 1e20], vec![-0.0, 7.0, 1.0 / 3.0]],
            vec![2, 0],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_dataset(&ds, &path, Format::Csv).unwrap();
        let back = load_dataset(&path, Format::Csv).unwrap();
        for (a, b) in ds.logits().iter().zip(back.logits()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn split_without_shuffle_is_contiguous() {
        let ds = numbered(10);
        let spec = SplitSpec::new(&[("a", 0.5), ("b", 0.5)], false, 0);
        let parts = split_dataset(&ds, &spec).unwrap();
        assert_eq!(first_logits(&parts["a"]), vec![0, 1, 2, 3, 4]);
        assert_eq!(first_logits(&parts["b"]), vec![5, 6, 7, 8, 9]);
    }

    #[test]
    fn split_same_seed_is_reproducible() {
        let ds = numbered(10);
        let spec = SplitSpec::new(&[("a", 0.5), ("b", 0.5)], true, 42);
        assert_eq!(split_dataset(&ds, &spec).unwrap(), split_dataset(&ds, &spec).unwrap());
        let other = SplitSpec { seed: 43, ..spec.clone() };
        assert_ne!(split_dataset(&ds, &spec).unwrap(), split_dataset(&ds, &other).unwrap());
    }

    #[test]
    fn nested_split_sizes() {
        let ds = numbered(10_000);
        let outer = SplitSpec::new(&[("conformal", 0.5), ("validation", 0.5)], true, 1);
        let parts = split_dataset(&ds, &outer).unwrap();
        let inner = SplitSpec::new(&[("tau", 0.5), ("loss", 0.5)], true, 2);
        let val = split_dataset(&parts["validation"], &inner).unwrap();
        assert_eq!(parts["conformal"].len(), 5000);
        assert_eq!(val["tau"].len(), 2500);
        assert_eq!(val["loss"].len(), 2500);
    }

    #[test]
    fn split_remainder_goes_last() {
        let spec = SplitSpec::new(&[("a", 1.0 / 3.0), ("b", 1.0 / 3.0), ("c", 1.0 / 3.0)], false, 0);
        assert_eq!(spec.part_sizes(10).unwrap(), vec![3, 3, 4]);
        let spec = SplitSpec::new(&[("a", 0.29), ("b", 0.71)], false, 0);
        assert_eq!(spec.part_sizes(100).unwrap(), vec![29, 71]);
    }

    #[test]
    fn split_errors() {
        let bad_sum = SplitSpec::new(&[("a", 0.5), ("b", 0.4)], false, 0);
        assert!(matches!(bad_sum.part_sizes(10), Err(Error::Split(_))));
        let zero = SplitSpec::new(&[("a", 0.0), ("b", 1.0)], false, 0);
        assert!(matches!(zero.part_sizes(10), Err(Error::Split(_))));
        let dup = SplitSpec::new(&[("a", 0.5), ("a", 0.5)], false, 0);
        assert!(matches!(dup.part_sizes(10), Err(Error::Split(_))));
        let ok = SplitSpec::new(&[("a", 0.5), ("b", 0.5)], false, 0);
        assert!(matches!(ok.part_sizes(1), Err(Error::Split(_))));
        let tiny = SplitSpec::new(&[("a", 0.1), ("b", 0.9)], false, 0);
        assert!(matches!(tiny.part_sizes(5), Err(Error::Split(_))));
    }
}
