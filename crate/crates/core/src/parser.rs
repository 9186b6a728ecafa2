//! Extraction of labels, pattern flags and multiple-choice answers from
//! free-form model responses.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Exact,
    Fallback,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedDecision {
    pub final_label: Option<usize>,
    pub preliminary_label: Option<usize>,
    /// `None` when either label is missing.
    pub adopted_alternative: Option<bool>,
    pub parse_status: ParseStatus,
}

impl ParsedDecision {
    pub fn failed() -> Self {
        Self {
            final_label: None,
            preliminary_label: None,
            adopted_alternative: None,
            parse_status: ParseStatus::Failed,
        }
    }
}

const DECORATION: &str = r"[\s\-*#>=•–—_\d.)\[]*";

const HEADINGS: &[&str] = &[
    r"analy[sz]e\s+the\s+time\s+series\s+patterns?",
    r"interpret\s+the\s+model'?s\s+results?",
    r"make\s+a\s+preliminary\s+prediction",
    r"review\s+alternative\s+classifications?",
    r"final\s+classification\s+decision",
    r"true\s+label",
];

fn re(pattern: &str) -> Regex {
    Regex::new(pattern).expect("static regex compiles")
}

fn category_re() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    R.get_or_init(|| re(r"(?i)\bcategor(?:y|ies)\s*#?\s*(\d+)"))
}

fn label_token_re() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    R.get_or_init(|| re(r"(?i)\bcategor(?:y|ies)\s*#?\s*(\d+)|\b(\d+)\b"))
}

fn true_label_re() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    R.get_or_init(|| re(r"(?i)true\s*label[*_\]]*\s*[:=]"))
}

fn heading_re(idx: usize) -> &'static Regex {
    static R: OnceLock<Vec<Regex>> = OnceLock::new();
    &R.get_or_init(|| {
        HEADINGS
            .iter()
            .map(|h| re(&format!(r"(?im)^{DECORATION}{h}")))
            .collect()
    })[idx]
}

fn any_heading_re() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    R.get_or_init(|| re(&format!(r"(?im)^{DECORATION}(?:{})", HEADINGS.join("|"))))
}

const PRELIMINARY: usize = 2;
const FINAL_DECISION: usize = 4;

fn normalize(text: &str) -> String {
    text.replace(['’', '‘'], "'")
}

fn in_range(k: usize, num_classes: usize) -> bool {
    (1..=num_classes).contains(&k)
}

fn parse_num(s: &str) -> Option<usize> {
    s.parse().ok()
}

/// Ladder: last "True Label" line (exact), else the last category mention
/// after the last "Final Classification Decision" heading, else the last
/// category mention anywhere (both fallback).
pub fn extract_final_label(text: &str, num_classes: usize) -> (Option<usize>, ParseStatus) {
    let text = normalize(text);
    if let Some(m) = true_label_re().find_iter(&text).last() {
        let rest = &text[m.end()..];
        let mut lines = rest.lines();
        let first = lines.next().unwrap_or("");
        let line = if first.trim().trim_matches(['*', '_']).is_empty() {
            lines.find(|l| !l.trim().is_empty()).unwrap_or("")
        } else {
            first
        };
        if let Some(c) = label_token_re().captures(line) {
            let k = c.get(1).or(c.get(2)).and_then(|g| parse_num(g.as_str()));
            if let Some(k) = k.filter(|&k| in_range(k, num_classes)) {
                return (Some(k), ParseStatus::Exact);
            }
        }
    }
    if let Some(h) = heading_re(FINAL_DECISION).find_iter(&text).last() {
        if let Some(k) = last_category(&text[h.end()..], num_classes) {
            return (Some(k), ParseStatus::Fallback);
        }
    }
    match last_category(&text, num_classes) {
        Some(k) => (Some(k), ParseStatus::Fallback),
        None => (None, ParseStatus::Failed),
    }
}

fn last_category(text: &str, num_classes: usize) -> Option<usize> {
    category_re()
        .captures_iter(text)
        .filter_map(|c| parse_num(&c[1]))
        .filter(|&k| in_range(k, num_classes))
        .last()
}

/// First category mention between the "Make a Preliminary Prediction"
/// heading and the next heading.
pub fn extract_preliminary_label(text: &str, num_classes: usize) -> Option<usize> {
    let text = normalize(text);
    let h = heading_re(PRELIMINARY).find(&text)?;
    let region = &text[h.end()..];
    let end = any_heading_re().find(region).map_or(region.len(), |m| m.start());
    category_re()
        .captures_iter(&region[..end])
        .filter_map(|c| parse_num(&c[1]))
        .find(|&k| in_range(k, num_classes))
}

pub fn parse_decision(text: &str, num_classes: usize) -> ParsedDecision {
    let (final_label, parse_status) = extract_final_label(text, num_classes);
    let preliminary_label = extract_preliminary_label(text, num_classes);
    let adopted_alternative = match (preliminary_label, final_label) {
        (Some(p), Some(f)) => Some(p != f),
        _ => None,
    };
    ParsedDecision {
        final_label,
        preliminary_label,
        adopted_alternative,
        parse_status,
    }
}

/// The ten characteristics of the pattern probe, in prompt order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Trend,
    Cyclic,
    Stationarity,
    Amplitude,
    RateOfChange,
    Outliers,
    NoiseLevel,
    Volatility,
    StructuralBreak,
    MeanLevel,
}

impl Pattern {
    pub const ALL: [Pattern; 10] = [
        Pattern::Trend,
        Pattern::Cyclic,
        Pattern::Stationarity,
        Pattern::Amplitude,
        Pattern::RateOfChange,
        Pattern::Outliers,
        Pattern::NoiseLevel,
        Pattern::Volatility,
        Pattern::StructuralBreak,
        Pattern::MeanLevel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Trend => "Trend",
            Pattern::Cyclic => "Cyclic Behavior",
            Pattern::Stationarity => "Stationarity",
            Pattern::Amplitude => "Amplitude",
            Pattern::RateOfChange => "Rate of Change",
            Pattern::Outliers => "Outliers",
            Pattern::NoiseLevel => "Noise Level",
            Pattern::Volatility => "Volatility",
            Pattern::StructuralBreak => "Structural Break",
            Pattern::MeanLevel => "Mean Level",
        }
    }

    fn label_pattern(self) -> &'static str {
        match self {
            Pattern::Trend => r"trends?",
            Pattern::Cyclic => r"cyclic(?:al)?(?:\s+behaviou?r)?",
            Pattern::Stationarity => r"stationarity",
            Pattern::Amplitude => r"amplitudes?",
            Pattern::RateOfChange => r"rate\s+of\s+change",
            Pattern::Outliers => r"outliers?",
            Pattern::NoiseLevel => r"noise(?:\s+levels?)?",
            Pattern::Volatility => r"volatility",
            Pattern::StructuralBreak => r"structural\s+breaks?",
            Pattern::MeanLevel => r"mean(?:\s+levels?|\s+shifts?)?",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternFlags {
    pub flags: [bool; 10],
    pub warnings: Vec<String>,
}

impl PatternFlags {
    pub fn get(&self, p: Pattern) -> bool {
        self.flags[p as usize]
    }
}

fn flag_res() -> &'static [Regex] {
    static R: OnceLock<Vec<Regex>> = OnceLock::new();
    R.get_or_init(|| {
        Pattern::ALL
            .iter()
            .map(|p| {
                re(&format!(
                    r"(?i)\b{}\s+differences?[*_\s]*[:=]?[*_\s]*\[?\s*([01])(/?)",
                    p.label_pattern()
                ))
            })
            .collect()
    })
}

/// The 0/1 digit after each "<characteristic> Differences:" label. A missing
/// or unreadable line gives `false` and a warning.
pub fn parse_pattern_flags(text: &str) -> PatternFlags {
    let mut flags = [false; 10];
    let mut warnings = Vec::new();
    for (i, p) in Pattern::ALL.iter().enumerate() {
        let hit = flag_res()[i]
            .captures_iter(text)
            .find(|c| c[2].is_empty())
            .map(|c| &c[1] == "1");
        match hit {
            Some(v) => flags[i] = v,
            None => warnings.push(format!("no 0/1 value found for {}", p.name())),
        }
    }
    PatternFlags { flags, warnings }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum McChoice {
    A,
    B,
    Failed,
}

/// First "Case A"/"Case B" on an "Option" line, else the first one anywhere.
pub fn parse_mc_choice(text: &str) -> McChoice {
    static OPTION: OnceLock<Regex> = OnceLock::new();
    static ANY: OnceLock<Regex> = OnceLock::new();
    let option = OPTION.get_or_init(|| re(r"(?i)\boption\b[^\n]*?\bcase\s*([ab])\b"));
    let any = ANY.get_or_init(|| re(r"(?i)\bcase\s*([ab])\b"));
    let cap = option.captures(text).or_else(|| any.captures(text));
    match cap.map(|c| c[1].to_ascii_uppercase()) {
        Some(s) if s == "A" => McChoice::A,
        Some(_) => McChoice::B,
        None => McChoice::Failed,
    }
}
