//! Prompt rendering for every conversation turn the pipeline sends.
//!
//! Templates live in `templates/*.txt` with `{{name}}` placeholders and are
//! compiled into the binary. Rendering is a pure function of its inputs;
//! golden files under `tests/goldens/` pin the exact bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{estimate_tokens, format_series, FewShotSelection, TimeSeriesDataset, TimeSeriesSample};
use crate::plugin::{IclCase, PluginOutput, PluginProfile};

/// Bumped whenever a template's bytes change.
pub const TEMPLATE_VERSION: &str = "1";

const ROUND1: &str = include_str!("../templates/round1.txt");
const ROUND2: &str = include_str!("../templates/round2.txt");
const ROUND3: &str = include_str!("../templates/round3.txt");
const VANILLA: &str = include_str!("../templates/vanilla.txt");
const SYNTHETIC_MC: &str = include_str!("../templates/synthetic_mc.txt");
const PATTERN_PROBE: &str = include_str!("../templates/pattern_probe.txt");
const DOMAIN_NOTES: &str = include_str!("../templates/domain_notes.toml");

/// Template tokens that must never reach a model.
const TEMPLATE_TOKENS: &[&str] = &[
    "[dataset name]",
    "[domain-specific knowledge of the dataset]",
    "[class count]",
    "[sample length]",
    "[sample for category",
    "[performance of plug-in model",
    "[accuracy of plug-in model",
    "[ground truth]",
    "[plug-in model's prediction]",
    "[plug-in model's logits]",
    "[time series sample]",
];

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("unfilled placeholder {0:?} in rendered prompt")]
    Placeholder(String),
    #[error("round-2 prompt takes 1 to 3 cases, got {0}")]
    CaseCount(usize),
    #[error("pattern probe needs one sample per category: {expected} categories, {got} samples")]
    ProbeSampleCount { expected: usize, got: usize },
    #[error("few-shot selection is empty")]
    EmptySelection,
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Round {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
    Vanilla,
    Probe,
    Mc,
}

impl fmt::Display for Round {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Round::One => "1",
            Round::Two => "2",
            Round::Three => "3",
            Round::Vanilla => "vanilla",
            Round::Probe => "probe",
            Round::Mc => "mc",
        })
    }
}

/// What the round-3 prompt reveals about the plug-in model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    NoLogits,
    NoPlugin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBrief {
    pub name: String,
    pub domain_note: String,
    pub num_classes: usize,
    pub series_length: usize,
}

impl DatasetBrief {
    /// Brief for `dataset` with the catalog's domain sentence.
    pub fn for_dataset(dataset: &TimeSeriesDataset) -> Self {
        Self {
            name: dataset.name.clone(),
            domain_note: domain_note(&dataset.name),
            num_classes: dataset.num_classes,
            series_length: dataset.series_length,
        }
    }
}

#[derive(Deserialize)]
struct NoteCatalog {
    default: String,
    notes: BTreeMap<String, String>,
}

fn catalog() -> &'static NoteCatalog {
    static CATALOG: OnceLock<NoteCatalog> = OnceLock::new();
    CATALOG.get_or_init(|| toml::from_str(DOMAIN_NOTES).expect("bundled domain_notes.toml is valid"))
}

/// Domain sentence for a dataset name, or the generic fallback.
pub fn domain_note(name: &str) -> String {
    let c = catalog();
    c.notes.get(name).unwrap_or(&c.default).clone()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub round: Round,
    pub token_estimate: usize,
}

impl RenderedPrompt {
    fn new(text: String, round: Round) -> Result<Self> {
        scan_placeholders(&text)?;
        Ok(Self {
            token_estimate: estimate_tokens(&text),
            text,
            round,
        })
    }
}

/// Fails when a `{{name}}` slot or a bracketed template token survived.
pub fn scan_placeholders(text: &str) -> Result<()> {
    if let Some(start) = text.find("{{") {
        let end = text[start..].find("}}").map(|e| start + e + 2).unwrap_or(text.len());
        return Err(PromptError::Placeholder(text[start..end].to_string()));
    }
    for token in TEMPLATE_TOKENS {
        if text.contains(token) {
            return Err(PromptError::Placeholder((*token).to_string()));
        }
    }
    Ok(())
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.strip_suffix('\n').unwrap_or(template).to_string();
    for (key, value) in slots {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    out
}

fn number_word(n: usize) -> String {
    const WORDS: [&str; 11] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    WORDS.get(n).map(|w| w.to_string()).unwrap_or_else(|| n.to_string())
}

/// Percentage with two decimals, e.g. `0.74` -> `74.00%`.
pub fn format_accuracy(fraction: f64) -> String {
    format!("{:.2}%", fraction * 100.0)
}

/// Verbatim logits: shortest round-trip decimal of each value.
pub fn format_logits(logits: &[f64]) -> String {
    let parts: Vec<String> = logits.iter().map(|v| format!("{v}")).collect();
    format!("[{}]", parts.join(", "))
}

fn category(id: usize) -> String {
    format!("Category {id}")
}

pub fn render_round1(
    brief: &DatasetBrief,
    train: &TimeSeriesDataset,
    shots: &FewShotSelection,
) -> Result<RenderedPrompt> {
    if shots.total() == 0 {
        return Err(PromptError::EmptySelection);
    }
    let mut samples = String::new();
    for (class_id, picks) in &shots.per_class {
        samples.push_str(&format!("{}:\n", category(*class_id)));
        for (j, &idx) in picks.iter().enumerate() {
            samples.push_str(&format!(
                "- Sample {}: {}\n",
                j + 1,
                format_series(&train.samples[idx].values)
            ));
        }
    }
    let samples = samples.trim_end_matches('\n');
    let k = shots.k_per_class;
    let text = fill(
        ROUND1,
        &[
            ("dataset_name", &brief.name),
            ("domain_note", &brief.domain_note),
            ("k_word", &number_word(k)),
            ("k", &k.to_string()),
            ("sample_noun", if k == 1 { "sample" } else { "samples" }),
            ("num_classes", &brief.num_classes.to_string()),
            ("series_length", &brief.series_length.to_string()),
            ("samples", samples),
        ],
    );
    RenderedPrompt::new(text, Round::One)
}

/// Round-2 fusion prompt. `include_logits = false` drops the logits from
/// every case line (the no-logits ablation).
pub fn render_round2(
    brief: &DatasetBrief,
    profile: &PluginProfile,
    cases: &[(&TimeSeriesSample, &IclCase)],
    include_logits: bool,
) -> Result<RenderedPrompt> {
    if cases.is_empty() || cases.len() > 3 {
        return Err(PromptError::CaseCount(cases.len()));
    }
    let lines: Vec<String> = cases
        .iter()
        .enumerate()
        .map(|(i, (sample, case))| {
            let logits = if include_logits {
                format!(", Category Logits: {}", format_logits(&case.output.logits))
            } else {
                String::new()
            };
            format!(
                "- Case {}: True Label: {}, Model Result: {}{logits}, Time Series Sample: {}",
                i + 1,
                category(case.truth),
                category(case.output.predicted_class),
                format_series(&sample.values)
            )
        })
        .collect();
    let (results_phrase, results_short, hint) = if include_logits {
        (
            "results and logits (model probabilities for each category)",
            "results and logits",
            "Evaluate the logits' confidence and alignment with categories.",
        )
    } else {
        (
            "results",
            "results",
            "Evaluate the model's predictions and their alignment with categories.",
        )
    };
    let text = fill(
        ROUND2,
        &[
            ("dataset_name", &brief.name),
            ("domain_note", &brief.domain_note),
            ("num_classes", &brief.num_classes.to_string()),
            ("series_length", &brief.series_length.to_string()),
            ("accuracy", &format_accuracy(profile.train_accuracy)),
            ("cases", &lines.join("\n")),
            ("results_phrase", results_phrase),
            ("results_phrase_short", results_short),
            ("analysis_hint", hint),
        ],
    );
    RenderedPrompt::new(text, Round::Two)
}

/// Round-3 step-by-step prompt for one test sample.
pub fn render_round3(
    brief: &DatasetBrief,
    profile: &PluginProfile,
    sample: &TimeSeriesSample,
    output: &PluginOutput,
    ablation: Ablation,
) -> Result<RenderedPrompt> {
    let model_details = format!(
        "### Model Details\n- Classification Accuracy: {}\n",
        format_accuracy(profile.train_accuracy)
    );
    let result = category(output.predicted_class);
    let (support, details, fields, interpret, and_results) = match ablation {
        Ablation::None => (
            " along with the result and category logits (model probabilities for each category) from the domain-specific model",
            model_details,
            format!("Model Result: {result}, Category Logits: {}, ", format_logits(&output.logits)),
            "- Interpret the Model's Results: [Evaluate the model's classification result and logits. Assess the confidence level of the model's prediction and how well it aligns with the observed time series patterns.]\n",
            " and the model's results",
        ),
        Ablation::NoLogits => (
            " along with the result from the domain-specific model",
            model_details,
            format!("Model Result: {result}, "),
            "- Interpret the Model's Results: [Evaluate the model's classification result. Assess how well the model's prediction aligns with the observed time series patterns.]\n",
            " and the model's results",
        ),
        Ablation::NoPlugin => ("", String::new(), String::new(), "", ""),
    };
    let text = fill(
        ROUND3,
        &[
            ("model_support", support),
            ("num_classes", &brief.num_classes.to_string()),
            ("series_length", &brief.series_length.to_string()),
            ("model_details", &details),
            ("task_fields", &fields),
            ("series", &format_series(&sample.values)),
            ("interpret_step", interpret),
            ("and_model_results", and_results),
        ],
    );
    RenderedPrompt::new(text, Round::Three)
}

/// Single-turn baseline with a generic step-by-step instruction.
pub fn render_vanilla_cot(brief: &DatasetBrief, sample: &TimeSeriesSample) -> Result<RenderedPrompt> {
    let text = fill(
        VANILLA,
        &[
            ("dataset_name", &brief.name),
            ("domain_note", &brief.domain_note),
            ("num_classes", &brief.num_classes.to_string()),
            ("series_length", &brief.series_length.to_string()),
            ("series", &format_series(&sample.values)),
        ],
    );
    RenderedPrompt::new(text, Round::Vanilla)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum McKind {
    Trend,
    Frequency,
    Amplitude,
    Mixed,
}

impl McKind {
    pub const ALL: [McKind; 4] = [McKind::Trend, McKind::Frequency, McKind::Amplitude, McKind::Mixed];

    fn criterion(self) -> &'static str {
        match self {
            McKind::Trend => "demonstrates a more typical and well-defined trend pattern, specifically a sustained and clear directional trend (either upward or downward) throughout the series.",
            McKind::Frequency => "exhibits a more typical and well-defined frequency or cyclical pattern, characterized by consistent and regular periodic behavior or repetitive cycles throughout the series.",
            McKind::Amplitude => "demonstrates a more typical and well-defined amplitude pattern, characterized by consistent and pronounced variations in value range, indicative of strong oscillations or signal intensity.",
            McKind::Mixed => "exhibits more typical and well-defined patterns, such as trends, seasonality, or cyclical behavior.",
        }
    }

    /// Recovers the kind from a rendered multiple-choice prompt.
    pub fn detect(prompt: &str) -> Option<McKind> {
        McKind::ALL
            .into_iter()
            .find(|k| prompt.contains(k.criterion()))
    }
}

impl fmt::Display for McKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            McKind::Trend => "trend",
            McKind::Frequency => "frequency",
            McKind::Amplitude => "amplitude",
            McKind::Mixed => "mixed",
        })
    }
}

/// Two-option pattern question; `case_a` and `case_b` are rendered series.
pub fn render_synthetic_mc(kind: McKind, case_a: &str, case_b: &str) -> Result<RenderedPrompt> {
    let text = fill(
        SYNTHETIC_MC,
        &[
            ("criterion", kind.criterion()),
            ("case_a", case_a),
            ("case_b", case_b),
        ],
    );
    RenderedPrompt::new(text, Round::Mc)
}

/// Ten-characteristic 0/1 probe with one sample per category, in class order.
pub fn render_pattern_probe(
    brief: &DatasetBrief,
    one_per_class: &[&TimeSeriesSample],
) -> Result<RenderedPrompt> {
    if one_per_class.len() != brief.num_classes {
        return Err(PromptError::ProbeSampleCount {
            expected: brief.num_classes,
            got: one_per_class.len(),
        });
    }
    let samples: Vec<String> = one_per_class
        .iter()
        .enumerate()
        .map(|(i, s)| format!("- {}: {}", category(i + 1), format_series(&s.values)))
        .collect();
    let text = fill(
        PATTERN_PROBE,
        &[
            ("dataset_name", &brief.name),
            ("domain_note", &brief.domain_note),
            ("num_classes", &brief.num_classes.to_string()),
            ("series_length", &brief.series_length.to_string()),
            ("samples", &samples.join("\n")),
        ],
    );
    RenderedPrompt::new(text, Round::Probe)
}
