//! Plug-in classifiers whose predictions and logits are fused into the
//! reasoning rounds.
//!
//! Two lightweight built-ins (nearest centroid, 1-NN) run in-process. Real
//! foundation-model classifiers are consumed through a logits file written
//! by an external exporter; see [`ExternalLogitsFile`] for the schema.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{TimeSeriesDataset, TimeSeriesSample};

#[derive(Debug, Error)]
pub enum PluginError {
    #[error("training error: {0}")]
    Training(String),
    #[error("query length {query} does not match training length {expected}")]
    LengthMismatch { query: usize, expected: usize },
    #[error("failed to read logits file {path}: {message}")]
    Load { path: String, message: String },
    #[error("no plug-in output recorded for test index {0}")]
    MissingIndex(usize),
    #[error(
        "ICL selection needs {needed_success} successes and {needed_fail} failures, \
         pool has {available_success} and {available_fail}"
    )]
    Selection {
        needed_success: usize,
        needed_fail: usize,
        available_success: usize,
        available_fail: usize,
    },
    #[error("cannot evaluate on an empty dataset")]
    EmptyData,
}

pub type Result<T> = std::result::Result<T, PluginError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginOutput {
    /// Class id in `1..=C`.
    pub predicted_class: usize,
    pub logits: Vec<f64>,
}

impl PluginOutput {
    /// Prediction from raw scores, argmax with the lowest class winning ties.
    pub fn from_logits(logits: Vec<f64>) -> Self {
        Self {
            predicted_class: argmax(&logits) + 1,
            logits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginProfile {
    pub model_name: String,
    /// Fraction in `[0, 1]`.
    pub train_accuracy: f64,
}

pub trait PluginModel: Send + Sync {
    fn profile(&self) -> &PluginProfile;
    fn num_classes(&self) -> usize;
    fn predict(&self, sample: &TimeSeriesSample) -> Result<PluginOutput>;
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Standardizes scores to mean 0 and unit (population) variance. Constant
/// input maps to all zeros.
pub fn zscore(scores: &[f64]) -> Vec<f64> {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - mean) / sd).collect()
}

fn check_length(query: &TimeSeriesSample, expected: usize) -> Result<()> {
    if query.values.len() != expected {
        return Err(PluginError::LengthMismatch {
            query: query.values.len(),
            expected,
        });
    }
    Ok(())
}

pub struct NearestCentroid {
    profile: PluginProfile,
    centroids: Vec<Vec<f64>>,
}

impl NearestCentroid {
    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }
}

impl PluginModel for NearestCentroid {
    fn profile(&self) -> &PluginProfile {
        &self.profile
    }

    fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    fn predict(&self, sample: &TimeSeriesSample) -> Result<PluginOutput> {
        check_length(sample, self.centroids[0].len())?;
        let neg: Vec<f64> = self
            .centroids
            .iter()
            .map(|c| -euclidean(&sample.values, c))
            .collect();
        Ok(PluginOutput::from_logits(zscore(&neg)))
    }
}

/// Per-class mean series; logits are z-scored negative centroid distances.
pub fn train_nearest_centroid(train: &TimeSeriesDataset) -> Result<NearestCentroid> {
    if train.is_empty() {
        return Err(PluginError::Training("empty training set".into()));
    }
    let w = train.series_length;
    let mut sums = vec![vec![0.0; w]; train.num_classes];
    let mut counts = vec![0usize; train.num_classes];
    for s in &train.samples {
        let c = s.class_id - 1;
        counts[c] += 1;
        for (acc, v) in sums[c].iter_mut().zip(&s.values) {
            *acc += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(PluginError::Training(format!(
            "class {} has no training samples",
            empty + 1
        )));
    }
    let centroids = sums
        .into_iter()
        .zip(&counts)
        .map(|(sum, &n)| sum.into_iter().map(|v| v / n as f64).collect())
        .collect();
    let mut model = NearestCentroid {
        profile: PluginProfile {
            model_name: "nearest-centroid".into(),
            train_accuracy: 0.0,
        },
        centroids,
    };
    model.profile.train_accuracy = evaluate_accuracy(&model, train)?;
    Ok(model)
}

pub struct OneNearestNeighbor {
    profile: PluginProfile,
    num_classes: usize,
    train: Vec<(usize, Vec<f64>)>,
}

impl PluginModel for OneNearestNeighbor {
    fn profile(&self) -> &PluginProfile {
        &self.profile
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, sample: &TimeSeriesSample) -> Result<PluginOutput> {
        check_length(sample, self.train[0].1.len())?;
        let mut per_class = vec![f64::INFINITY; self.num_classes];
        for (class_id, values) in &self.train {
            let d = euclidean(&sample.values, values);
            let slot = &mut per_class[class_id - 1];
            if d < *slot {
                *slot = d;
            }
        }
        // Classes absent from the training set never win: give them the
        // largest finite distance seen so z-scoring stays finite.
        let worst = per_class
            .iter()
            .copied()
            .filter(|d| d.is_finite())
            .fold(0.0, f64::max);
        let neg: Vec<f64> = per_class
            .iter()
            .map(|&d| if d.is_finite() { -d } else { -worst })
            .collect();
        // The global nearest neighbour's class is the class with the smallest
        // per-class minimum, which is exactly argmax of the negated minima.
        Ok(PluginOutput::from_logits(zscore(&neg)))
    }
}

/// Euclidean 1-NN; logits are z-scored negative per-class minimum distances.
pub fn train_one_nn(train: &TimeSeriesDataset) -> Result<OneNearestNeighbor> {
    if train.is_empty() {
        return Err(PluginError::Training("empty training set".into()));
    }
    let mut model = OneNearestNeighbor {
        profile: PluginProfile {
            model_name: "1-nn-euclidean".into(),
            train_accuracy: 0.0,
        },
        num_classes: train.num_classes,
        train: train
            .samples
            .iter()
            .map(|s| (s.class_id, s.values.clone()))
            .collect(),
    };
    model.profile.train_accuracy = evaluate_accuracy(&model, train)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalTestEntry {
    pub index: usize,
    pub pred: usize,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalTrainCase {
    pub index: usize,
    pub true_label: usize,
    pub pred: usize,
    pub logits: Vec<f64>,
}

/// On-disk contract shared with the foundation-model exporter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalLogitsFile {
    pub model_name: String,
    pub train_accuracy: f64,
    pub num_classes: usize,
    pub test: Vec<ExternalTestEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_cases: Vec<ExternalTrainCase>,
}

impl ExternalLogitsFile {
    /// Scores every sample of `data` with `model` into a file body.
    pub fn from_model(model: &dyn PluginModel, data: &TimeSeriesDataset) -> Result<Self> {
        let test = data
            .samples
            .iter()
            .map(|s| {
                model.predict(s).map(|o| ExternalTestEntry {
                    index: s.source_index,
                    pred: o.predicted_class,
                    logits: o.logits,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            model_name: model.profile().model_name.clone(),
            train_accuracy: model.profile().train_accuracy,
            num_classes: model.num_classes(),
            test,
            train_cases: Vec::new(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(self).map_err(|e| PluginError::Load {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        fs::write(path, body).map_err(|e| PluginError::Load {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Proxy answering `predict` by looking up the sample's `source_index`.
pub struct ExternalPlugin {
    profile: PluginProfile,
    num_classes: usize,
    outputs: BTreeMap<usize, PluginOutput>,
    train_cases: Vec<ExternalTrainCase>,
    warnings: Vec<String>,
}

impl ExternalPlugin {
    /// Non-fatal findings, such as a `pred` that is not the argmax of its logits.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn train_cases(&self) -> &[ExternalTrainCase] {
        &self.train_cases
    }
}

impl PluginModel for ExternalPlugin {
    fn profile(&self) -> &PluginProfile {
        &self.profile
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, sample: &TimeSeriesSample) -> Result<PluginOutput> {
        self.outputs
            .get(&sample.source_index)
            .cloned()
            .ok_or(PluginError::MissingIndex(sample.source_index))
    }
}

pub fn load_external(path: impl AsRef<Path>, expected_classes: usize) -> Result<ExternalPlugin> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let load_err = |message: String| PluginError::Load {
        path: shown.clone(),
        message,
    };
    let body = fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
    let file: ExternalLogitsFile =
        serde_json::from_str(&body).map_err(|e| load_err(e.to_string()))?;
    external_from_file(file, expected_classes).map_err(|e| match e {
        PluginError::Load { message, .. } => load_err(message),
        other => other,
    })
}

/// Validates an in-memory logits document.
pub fn external_from_file(file: ExternalLogitsFile, expected_classes: usize) -> Result<ExternalPlugin> {
    let invalid = |message: String| PluginError::Load {
        path: "<memory>".into(),
        message,
    };
    if file.num_classes != expected_classes {
        return Err(invalid(format!(
            "file declares {} classes, dataset has {expected_classes}",
            file.num_classes
        )));
    }
    if !(0.0..=1.0).contains(&file.train_accuracy) {
        return Err(invalid(format!(
            "train_accuracy {} outside [0, 1]",
            file.train_accuracy
        )));
    }
    let c = expected_classes;
    let check = |what: &str, index: usize, pred: usize, logits: &[f64]| -> Result<()> {
        if logits.len() != c {
            return Err(invalid(format!(
                "{what} index {index}: {} logits, expected {c}",
                logits.len()
            )));
        }
        if !(1..=c).contains(&pred) {
            return Err(invalid(format!("{what} index {index}: pred {pred} outside 1..={c}")));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("{what} index {index}: non-finite logit")));
        }
        Ok(())
    };
    let mut warnings = Vec::new();
    let mut outputs = BTreeMap::new();
    for e in file.test {
        check("test", e.index, e.pred, &e.logits)?;
        if argmax(&e.logits) + 1 != e.pred {
            warnings.push(format!(
                "test index {}: pred {} is not the argmax of its logits",
                e.index, e.pred
            ));
        }
        let out = PluginOutput {
            predicted_class: e.pred,
            logits: e.logits,
        };
        if outputs.insert(e.index, out).is_some() {
            return Err(invalid(format!("test index {} appears more than once", e.index)));
        }
    }
    for t in &file.train_cases {
        check("train_cases", t.index, t.pred, &t.logits)?;
        if !(1..=c).contains(&t.true_label) {
            return Err(invalid(format!(
                "train_cases index {}: true_label {} outside 1..={c}",
                t.index, t.true_label
            )));
        }
    }
    Ok(ExternalPlugin {
        profile: PluginProfile {
            model_name: file.model_name,
            train_accuracy: file.train_accuracy,
        },
        num_classes: c,
        outputs,
        train_cases: file.train_cases,
        warnings,
    })
}

pub fn evaluate_accuracy(model: &dyn PluginModel, data: &TimeSeriesDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(PluginError::EmptyData);
    }
    let mut correct = 0usize;
    for s in &data.samples {
        if model.predict(s)?.predicted_class == s.class_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// A pre-scored example shown to the LLM in the fusion round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclCase {
    /// Index into the dataset's `samples`.
    pub sample_index: usize,
    pub output: PluginOutput,
    pub truth: usize,
}

impl IclCase {
    pub fn is_success(&self) -> bool {
        self.output.predicted_class == self.truth
    }
}

/// Scores every sample, then draws `n_success` correct and `n_fail`
/// incorrect cases with a seeded generator.
///
/// Procedure: the success pool and failure pool are listed in sample order;
/// one `ChaCha8Rng` seeded with `seed` partially shuffles the success pool,
/// then the failure pool, and finally shuffles the concatenated picks so the
/// prompt order carries no success/failure signal.
pub fn select_icl_cases(
    model: &dyn PluginModel,
    data: &TimeSeriesDataset,
    n_success: usize,
    n_fail: usize,
    seed: u64,
) -> Result<Vec<IclCase>> {
    let scored = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            model.predict(s).map(|output| IclCase {
                sample_index: i,
                output,
                truth: s.class_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    select_from_scored(&scored, n_success, n_fail, seed)
}

/// Selection over an already-scored pool; see [`select_icl_cases`].
pub fn select_from_scored(
    scored: &[IclCase],
    n_success: usize,
    n_fail: usize,
    seed: u64,
) -> Result<Vec<IclCase>> {
    let (mut successes, mut failures): (Vec<&IclCase>, Vec<&IclCase>) =
        scored.iter().partition(|c| c.is_success());
    if successes.len() < n_success || failures.len() < n_fail {
        return Err(PluginError::Selection {
            needed_success: n_success,
            needed_fail: n_fail,
            available_success: successes.len(),
            available_fail: failures.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<IclCase> = Vec::with_capacity(n_success + n_fail);
    picked.extend(
        successes
            .partial_shuffle(&mut rng, n_success)
            .0
            .iter()
            .map(|c| (*c).clone()),
    );
    picked.extend(
        failures
            .partial_shuffle(&mut rng, n_fail)
            .0
            .iter()
            .map(|c| (*c).clone()),
    );
    picked.shuffle(&mut rng);
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;

    fn ds(rows: &[(usize, Vec<f64>)]) -> TimeSeriesDataset {
        TimeSeriesDataset::from_rows(
            "toy",
            Split::Train,
            rows.iter().map(|(c, v)| (c.to_string(), v.clone())).collect(),
        )
        .unwrap()
    }

    fn sample(values: Vec<f64>) -> TimeSeriesSample {
        TimeSeriesSample {
            original_label: "?".into(),
            class_id: 1,
            values,
            source_index: 0,
        }
    }

    #[test]
    fn centroid_exact_match_wins() {
        let train = ds(&[
            (1, vec![0.0, 0.0]),
            (2, vec![5.0, 5.0]),
            (3, vec![-5.0, 9.0]),
        ]);
        let m = train_nearest_centroid(&train).unwrap();
        let out = m.predict(&sample(vec![5.0, 5.0])).unwrap();
        assert_eq!(out.predicted_class, 2);
        let max = out.logits[1];
        assert!(out.logits[0] < max && out.logits[2] < max);
        assert_eq!(m.profile().train_accuracy, 1.0);
    }

    #[test]
    fn centroid_tie_goes_to_lowest_class() {
        let train = ds(&[(1, vec![-1.0]), (2, vec![1.0])]);
        let m = train_nearest_centroid(&train).unwrap();
        let out = m.predict(&sample(vec![0.0])).unwrap();
        assert_eq!(out.predicted_class, 1);
        assert_eq!(out.logits, vec![0.0, 0.0]);
    }

    #[test]
    fn centroid_length_mismatch() {
        let train = ds(&[(1, vec![0.0, 1.0]), (2, vec![1.0, 1.0])]);
        let m = train_nearest_centroid(&train).unwrap();
        assert!(matches!(
            m.predict(&sample(vec![0.0])),
            Err(PluginError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn one_nn_exact_and_singleton_class() {
        let train = ds(&[(1, vec![0.0, 0.0]), (1, vec![1.0, 0.0]), (2, vec![9.0, 9.0])]);
        let m = train_one_nn(&train).unwrap();
        assert_eq!(m.predict(&sample(vec![9.0, 9.0])).unwrap().predicted_class, 2);
        assert_eq!(m.predict(&sample(vec![1.0, 0.1])).unwrap().predicted_class, 1);
        assert_eq!(m.profile().train_accuracy, 1.0);
    }

    #[test]
    fn zscore_constant_is_zero() {
        assert_eq!(zscore(&[3.0, 3.0, 3.0]), vec![0.0; 3]);
        let z = zscore(&[1.0, 2.0, 3.0]);
        let mean: f64 = z.iter().sum::<f64>() / 3.0;
        let var: f64 = z.iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    struct Fixed(PluginProfile, Vec<usize>);
    impl PluginModel for Fixed {
        fn profile(&self) -> &PluginProfile {
            &self.0
        }
        fn num_classes(&self) -> usize {
            4
        }
        fn predict(&self, s: &TimeSeriesSample) -> Result<PluginOutput> {
            let c = self.1[s.source_index];
            let mut logits = vec![0.0; 4];
            logits[c - 1] = 1.0;
            Ok(PluginOutput::from_logits(logits))
        }
    }

    fn balanced4() -> TimeSeriesDataset {
        ds(&(0..8).map(|i| (i % 4 + 1, vec![i as f64])).collect::<Vec<_>>())
    }

    #[test]
    fn accuracy_counting() {
        let data = balanced4();
        let prof = PluginProfile {
            model_name: "f".into(),
            train_accuracy: 0.0,
        };
        let echo = Fixed(prof.clone(), data.samples.iter().map(|s| s.class_id).collect());
        assert_eq!(evaluate_accuracy(&echo, &data).unwrap(), 1.0);
        let constant = Fixed(prof, vec![1; 8]);
        assert_eq!(evaluate_accuracy(&constant, &data).unwrap(), 0.25);
    }

    #[test]
    fn icl_selection_errors_when_no_failures() {
        let data = balanced4();
        let prof = PluginProfile {
            model_name: "f".into(),
            train_accuracy: 1.0,
        };
        let echo = Fixed(prof, data.samples.iter().map(|s| s.class_id).collect());
        match select_icl_cases(&echo, &data, 1, 2, 0) {
            Err(PluginError::Selection {
                available_fail: 0,
                available_success: 8,
                ..
            }) => {}
            other => panic!("{other:?}"),
        }
        let all_success = select_icl_cases(&echo, &data, 3, 0, 0).unwrap();
        assert_eq!(all_success.len(), 3);
        assert!(all_success.iter().all(IclCase::is_success));
    }

    #[test]
    fn external_validation() {
        let good = ExternalLogitsFile {
            model_name: "MOMENT".into(),
            train_accuracy: 0.74,
            num_classes: 3,
            test: vec![ExternalTestEntry {
                index: 0,
                pred: 1,
                logits: vec![2.62, -1.15, -1.37],
            }],
            train_cases: vec![],
        };
        let m = external_from_file(good.clone(), 3).unwrap();
        assert_eq!(
            m.predict(&sample(vec![])).unwrap(),
            PluginOutput {
                predicted_class: 1,
                logits: vec![2.62, -1.15, -1.37]
            }
        );
        assert!(m.warnings().is_empty());
        let mut absent = sample(vec![]);
        absent.source_index = 5;
        assert!(matches!(m.predict(&absent), Err(PluginError::MissingIndex(5))));

        let mut long = good.clone();
        long.test[0].logits.push(0.0);
        assert!(matches!(external_from_file(long, 3), Err(PluginError::Load { .. })));

        let mut dup = good.clone();
        dup.test.push(dup.test[0].clone());
        assert!(external_from_file(dup, 3).is_err());

        let mut off = good;
        off.test[0].pred = 2;
        let m = external_from_file(off, 3).unwrap();
        assert_eq!(m.warnings().len(), 1);
    }
}
