//! UCR/UEA archive ingestion, missing-value repair and deterministic
//! series rendering.
//!
//! Two on-disk layouts are understood:
//!
//! - UCR: `<Name>/<Name>_TRAIN.tsv` and `<Name>/<Name>_TEST.tsv`, one sample
//!   per line, label first, tab- or comma-separated values.
//! - UEA: `<Name>/<Name>_TRAIN.ts` and `_TEST.ts`, `@`-prefixed header
//!   directives, then an `@data` section whose lines hold `:`-separated
//!   dimensions followed by the class label. Only the first dimension is
//!   kept.
//!
//! Raw labels are remapped to `1..=C` in ascending raw-label order. When
//! loading a train/test pair the map is built over the union of both splits
//! so that a class id means the same thing on both sides.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: cannot parse value {token:?}")]
    Parse {
        path: String,
        line: usize,
        token: String,
    },
    #[error("{path}:{line}: {message}")]
    Shape {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("all values missing, nothing to interpolate from")]
    Unrepairable,
    #[error("class {class_id} has {available} samples, {requested} requested")]
    InsufficientSamples {
        class_id: usize,
        available: usize,
        requested: usize,
    },
    #[error("dataset {0} has fewer than two classes")]
    TooFewClasses(String),
    #[error("label {label:?} is not present in the class map")]
    UnknownLabel { label: String },
    #[error("no archive files for dataset {name} under {root}")]
    NotFound { name: String, root: PathBuf },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn file_suffix(self) -> &'static str {
        match self {
            Split::Train => "_TRAIN",
            Split::Test => "_TEST",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSample {
    pub original_label: String,
    /// Class id in `1..=C`.
    pub class_id: usize,
    pub values: Vec<f64>,
    /// Position of the row within its split file.
    pub source_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub split: Split,
    pub samples: Vec<TimeSeriesSample>,
    pub num_classes: usize,
    pub series_length: usize,
    pub class_map: BTreeMap<String, usize>,
    /// True when at least one value was filled by [`repair_missing`].
    #[serde(default)]
    pub repaired_missing: bool,
}

impl TimeSeriesDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by class id, ascending within each class.
    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut by_class: BTreeMap<usize, Vec<usize>> =
            (1..=self.num_classes).map(|c| (c, Vec::new())).collect();
        for (i, s) in self.samples.iter().enumerate() {
            by_class.entry(s.class_id).or_default().push(i);
        }
        by_class
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.indices_by_class()
            .into_iter()
            .map(|(c, v)| (c, v.len()))
            .collect()
    }

    /// Builds a dataset from already-labelled rows, remapping raw labels.
    pub fn from_rows(
        name: impl Into<String>,
        split: Split,
        rows: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        let name = name.into();
        let class_map = build_class_map(rows.iter().map(|(l, _)| l.as_str()));
        let raw = RawSplit {
            path: name.clone(),
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(i, (label, values))| RawRow {
                    line: i + 1,
                    label,
                    values,
                })
                .collect(),
        };
        finish(name, split, raw, &class_map)
    }
}

/// A train/test pair sharing one class map.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub train: TimeSeriesDataset,
    pub test: TimeSeriesDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSelection {
    /// class id -> indices into `dataset.samples`
    pub per_class: BTreeMap<usize, Vec<usize>>,
    pub k_per_class: usize,
    pub seed: u64,
}

impl FewShotSelection {
    pub fn total(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }
}

struct RawRow {
    line: usize,
    label: String,
    values: Vec<f64>,
}

struct RawSplit {
    path: String,
    rows: Vec<RawRow>,
}

/// Ascending raw-label order: numeric when every label parses as a number,
/// lexicographic otherwise.
fn build_class_map<'a>(labels: impl Iterator<Item = &'a str>) -> BTreeMap<String, usize> {
    let distinct: BTreeSet<&str> = labels.collect();
    let mut ordered: Vec<&str> = distinct.into_iter().collect();
    let numeric: Option<Vec<f64>> = ordered.iter().map(|l| l.parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        let mut paired: Vec<(f64, &str)> = nums.into_iter().zip(ordered).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        ordered = paired.into_iter().map(|(_, l)| l).collect();
    }
    ordered
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l.to_string(), i + 1))
        .collect()
}

fn parse_value(token: &str, path: &str, line: usize) -> Result<f64> {
    let t = token.trim();
    if t == "?" || t.eq_ignore_ascii_case("nan") || t.is_empty() {
        return Ok(f64::NAN);
    }
    t.parse::<f64>().map_err(|_| DatasetError::Parse {
        path: path.to_string(),
        line,
        token: token.to_string(),
    })
}

/// Normalizes a raw label token: surrounding whitespace removed, and numeric
/// labels written as floats ("1.0") collapsed to their integer form.
fn normalize_label(token: &str) -> String {
    let t = token.trim();
    if let Ok(v) = t.parse::<f64>() {
        if v.fract() == 0.0 && v.abs() < 1e15 {
            return format!("{}", v as i64);
        }
    }
    t.to_string()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_tsv(path: &Path) -> Result<RawSplit> {
    let text = read_text(path)?;
    let p = path.display().to_string();
    let mut rows = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let sep = if line.contains('\t') { '\t' } else { ',' };
        let mut tokens = line.split(sep);
        let label = normalize_label(tokens.next().unwrap_or_default());
        let values = tokens
            .map(|t| parse_value(t, &p, lineno))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(DatasetError::Shape {
                path: p,
                line: lineno,
                message: "row has a label but no values".into(),
            });
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(DatasetError::Shape {
                    path: p,
                    line: lineno,
                    message: format!("expected {w} values, found {}", values.len()),
                })
            }
            _ => {}
        }
        rows.push(RawRow {
            line: lineno,
            label,
            values,
        });
    }
    Ok(RawSplit { path: p, rows })
}

fn parse_ts(path: &Path) -> Result<RawSplit> {
    let text = read_text(path)?;
    let p = path.display().to_string();
    let mut in_data = false;
    let mut has_class_label = false;
    let mut declared_labels: Option<BTreeSet<String>> = None;
    let mut rows = Vec::new();
    let mut width: Option<usize> = None;

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            if !line.starts_with('@') {
                return Err(DatasetError::Format {
                    path: p,
                    message: format!("line {lineno}: data row before @data marker"),
                });
            }
            let mut parts = line.split_whitespace();
            let directive = parts.next().unwrap_or_default().to_ascii_lowercase();
            match directive.as_str() {
                "@data" => in_data = true,
                "@classlabel" => {
                    has_class_label = true;
                    if parts.next().map(|s| s.eq_ignore_ascii_case("true")) == Some(true) {
                        declared_labels = Some(parts.map(normalize_label).collect());
                    } else {
                        return Err(DatasetError::Format {
                            path: p,
                            message: "@classLabel false: unlabelled problems are not supported"
                                .into(),
                        });
                    }
                }
                _ => {}
            }
            continue;
        }

        let mut dims: Vec<&str> = line.split(':').collect();
        if dims.len() < 2 {
            return Err(DatasetError::Format {
                path: p,
                message: format!("line {lineno}: expected dimensions followed by a class label"),
            });
        }
        let label = normalize_label(dims.pop().unwrap_or_default());
        if let Some(declared) = &declared_labels {
            if !declared.contains(&label) {
                return Err(DatasetError::Format {
                    path: p,
                    message: format!("line {lineno}: label {label:?} not declared in @classLabel"),
                });
            }
        }
        let parsed: Vec<Vec<f64>> = dims
            .iter()
            .map(|d| {
                d.split(',')
                    .map(|t| parse_value(t, &p, lineno))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let first_len = parsed[0].len();
        if let Some(bad) = parsed.iter().position(|d| d.len() != first_len) {
            return Err(DatasetError::Shape {
                path: p,
                line: lineno,
                message: format!(
                    "dimension {} has {} values, dimension 1 has {first_len}",
                    bad + 1,
                    parsed[bad].len()
                ),
            });
        }
        match width {
            None => width = Some(first_len),
            Some(w) if w != first_len => {
                return Err(DatasetError::Shape {
                    path: p,
                    line: lineno,
                    message: format!("expected series length {w}, found {first_len}"),
                })
            }
            _ => {}
        }
        let values = parsed.into_iter().next().unwrap_or_default();
        rows.push(RawRow {
            line: lineno,
            label,
            values,
        });
    }

    if !has_class_label {
        return Err(DatasetError::Format {
            path: p,
            message: "missing @classLabel directive".into(),
        });
    }
    if !in_data {
        return Err(DatasetError::Format {
            path: p,
            message: "missing @data directive".into(),
        });
    }
    Ok(RawSplit { path: p, rows })
}

fn finish(
    name: String,
    split: Split,
    raw: RawSplit,
    class_map: &BTreeMap<String, usize>,
) -> Result<TimeSeriesDataset> {
    if class_map.len() < 2 {
        return Err(DatasetError::TooFewClasses(name));
    }
    let series_length = raw.rows.first().map(|r| r.values.len()).unwrap_or(0);
    let mut repaired_missing = false;
    let mut samples = Vec::with_capacity(raw.rows.len());
    for (source_index, row) in raw.rows.into_iter().enumerate() {
        if row.values.len() != series_length {
            return Err(DatasetError::Shape {
                path: raw.path,
                line: row.line,
                message: format!("expected {series_length} values, found {}", row.values.len()),
            });
        }
        let values = if row.values.iter().all(|v| v.is_finite()) {
            row.values
        } else {
            repaired_missing = true;
            repair_missing(&row.values).map_err(|_| DatasetError::Shape {
                path: raw.path.clone(),
                line: row.line,
                message: "every value of the series is missing".into(),
            })?
        };
        let class_id = *class_map
            .get(&row.label)
            .ok_or_else(|| DatasetError::UnknownLabel {
                label: row.label.clone(),
            })?;
        samples.push(TimeSeriesSample {
            original_label: row.label,
            class_id,
            values,
            source_index,
        });
    }
    Ok(TimeSeriesDataset {
        name,
        split,
        samples,
        num_classes: class_map.len(),
        series_length,
        class_map: class_map.clone(),
        repaired_missing,
    })
}

/// `BME_TRAIN.tsv` -> (`BME`, Train). Files without a split suffix load as
/// training data.
fn name_and_split(path: &Path) -> (String, Split) {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    for split in [Split::Train, Split::Test] {
        if let Some(name) = stem.strip_suffix(split.file_suffix()) {
            return (name.to_string(), split);
        }
    }
    (stem, Split::Train)
}

fn parse_any(path: &Path) -> Result<RawSplit> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("ts") => parse_ts(path),
        _ => parse_tsv(path),
    }
}

fn load_single(path: &Path, raw: RawSplit) -> Result<TimeSeriesDataset> {
    let (name, split) = name_and_split(path);
    let class_map = build_class_map(raw.rows.iter().map(|r| r.label.as_str()));
    finish(name, split, raw, &class_map)
}

/// Loads one UCR split file with its own class map.
pub fn load_tsv(path: impl AsRef<Path>) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    let raw = parse_tsv(path)?;
    load_single(path, raw)
}

/// Loads one UEA split file, keeping only the first dimension.
pub fn load_ts(path: impl AsRef<Path>) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    let raw = parse_ts(path)?;
    load_single(path, raw)
}

fn split_path(root: &Path, name: &str, split: Split) -> Option<PathBuf> {
    let dir = root.join(name);
    ["tsv", "ts"]
        .iter()
        .map(|ext| dir.join(format!("{name}{}.{ext}", split.file_suffix())))
        .find(|p| p.is_file())
}

/// Whether `<root>/<name>/` holds both splits in either layout.
pub fn archive_exists(root: &Path, name: &str) -> bool {
    split_path(root, name, Split::Train).is_some() && split_path(root, name, Split::Test).is_some()
}

/// Loads `<root>/<name>/<name>_TRAIN.{tsv,ts}` and the matching test split
/// with one class map shared across both.
pub fn load_archive(root: impl AsRef<Path>, name: &str) -> Result<DatasetPair> {
    let root = root.as_ref();
    let not_found = || DatasetError::NotFound {
        name: name.to_string(),
        root: root.to_path_buf(),
    };
    let train_path = split_path(root, name, Split::Train).ok_or_else(not_found)?;
    let test_path = split_path(root, name, Split::Test).ok_or_else(not_found)?;
    let train_raw = parse_any(&train_path)?;
    let test_raw = parse_any(&test_path)?;
    let class_map = build_class_map(
        train_raw
            .rows
            .iter()
            .chain(test_raw.rows.iter())
            .map(|r| r.label.as_str()),
    );
    let train = finish(name.to_string(), Split::Train, train_raw, &class_map)?;
    let test = finish(name.to_string(), Split::Test, test_raw, &class_map)?;
    if train.series_length != test.series_length {
        return Err(DatasetError::Shape {
            path: test_path.display().to_string(),
            line: 1,
            message: format!(
                "test series length {} differs from train length {}",
                test.series_length, train.series_length
            ),
        });
    }
    Ok(DatasetPair { train, test })
}

/// Fills non-finite entries by linear interpolation between the nearest
/// finite neighbours; leading and trailing gaps take the nearest finite value.
pub fn repair_missing(values: &[f64]) -> Result<Vec<f64>> {
    let known: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_finite()).collect();
    let (&first, &last) = match (known.first(), known.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(DatasetError::Unrepairable),
    };
    let mut out = values.to_vec();
    for v in out.iter_mut().take(first) {
        *v = values[first];
    }
    for v in out.iter_mut().skip(last + 1) {
        *v = values[last];
    }
    for pair in known.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b - a < 2 {
            continue;
        }
        let (va, vb) = (values[a], values[b]);
        let span = (b - a) as f64;
        for (j, v) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let w = (j - a) as f64 / span;
            *v = va + (vb - va) * w;
        }
    }
    Ok(out)
}

/// Renders one value with exactly three fractional digits, rounding half
/// away from zero on the shortest decimal representation of the value.
pub fn format_value(value: f64) -> String {
    // Display for f64 is the shortest round-trip decimal and never uses an
    // exponent, so the digits below are exactly what a reader of the value
    // would type.
    let repr = format!("{}", value.abs());
    let (int_part, frac_part) = match repr.split_once('.') {
        Some((i, f)) => (i, f),
        None => (repr.as_str(), ""),
    };
    let mut digits: Vec<u8> = int_part
        .bytes()
        .chain(frac_part.bytes().chain(std::iter::repeat(b'0')).take(3))
        .map(|b| b - b'0')
        .collect();
    let round_up = frac_part.as_bytes().get(3).is_some_and(|&d| d >= b'5');
    if round_up {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let is_zero = digits.iter().all(|&d| d == 0);
    let split = digits.len() - 3;
    let int_digits: String = digits[..split].iter().map(|d| (b'0' + d) as char).collect();
    let frac_digits: String = digits[split..].iter().map(|d| (b'0' + d) as char).collect();
    let int_digits = int_digits.trim_start_matches('0');
    let int_digits = if int_digits.is_empty() { "0" } else { int_digits };
    let sign = if value.is_sign_negative() && !is_zero {
        "-"
    } else {
        ""
    };
    format!("{sign}{int_digits}.{frac_digits}")
}

/// Comma-plus-space separated three-decimal rendering of a series.
pub fn format_series(values: &[f64]) -> String {
    values
        .iter()
        .map(|&v| format_value(v))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Seeded draw of `k` distinct samples from every class, classes in
/// ascending id order.
pub fn sample_few_shot(dataset: &TimeSeriesDataset, k: usize, seed: u64) -> Result<FewShotSelection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class = BTreeMap::new();
    for (class_id, mut pool) in dataset.indices_by_class() {
        if pool.len() < k {
            return Err(DatasetError::InsufficientSamples {
                class_id,
                available: pool.len(),
                requested: k,
            });
        }
        let (chosen, _) = pool.partial_shuffle(&mut rng, k);
        per_class.insert(class_id, chosen.to_vec());
    }
    Ok(FewShotSelection {
        per_class,
        k_per_class: k,
        seed,
    })
}

/// Character count divided by four, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}
