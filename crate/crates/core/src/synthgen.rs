//! Synthetic pattern families, noise negatives, two-option pattern
//! questions and an analytic scoring oracle.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{format_series, DatasetPair, Split, TimeSeriesDataset};
use crate::parser::McChoice;
use crate::prompts::McKind;

/// Cap for scores whose denominator vanishes.
pub const SCORE_SENTINEL: f64 = 1e12;

const STREAM_PATTERN: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_POSITION: u64 = 2;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("multiple-choice sets need a patterned kind, not noise")]
    NoiseKind,
    #[error("dataset construction failed: {0}")]
    Dataset(String),
    #[error("writing {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Trend,
    Frequency,
    Amplitude,
    Mixed,
    Noise,
}

impl SynthKind {
    pub fn mc_kind(self) -> Option<McKind> {
        match self {
            SynthKind::Trend => Some(McKind::Trend),
            SynthKind::Frequency => Some(McKind::Frequency),
            SynthKind::Amplitude => Some(McKind::Amplitude),
            SynthKind::Mixed => Some(McKind::Mixed),
            SynthKind::Noise => None,
        }
    }
}

impl From<McKind> for SynthKind {
    fn from(k: McKind) -> Self {
        match k {
            McKind::Trend => SynthKind::Trend,
            McKind::Frequency => SynthKind::Frequency,
            McKind::Amplitude => SynthKind::Amplitude,
            McKind::Mixed => SynthKind::Mixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..self.max)
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return Err(SynthError::Spec(format!(
                "{name} range [{}, {}] is invalid",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub intercept: Range,
    /// Slope magnitude per step; the sign is drawn separately.
    pub slope: Range,
    pub amplitude: Range,
    /// Whole cycles per window, inclusive.
    pub frequency_min: u32,
    pub frequency_max: u32,
    /// Absolute noise deviation for the trend family.
    pub trend_sigma: f64,
    /// Noise deviation relative to the (first) amplitude.
    pub relative_sigma: f64,
    pub noise_sigma: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            intercept: Range::new(-1.0, 1.0),
            slope: Range::new(0.05, 0.1),
            amplitude: Range::new(0.5, 3.0),
            frequency_min: 2,
            frequency_max: 10,
            trend_sigma: 0.1,
            relative_sigma: 0.1,
            noise_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SynthKind,
    pub length: usize,
    pub count: usize,
    pub seed: u64,
    pub params: SynthParams,
}

impl SyntheticSpec {
    pub fn new(kind: SynthKind, seed: u64) -> Self {
        Self {
            kind,
            length: 100,
            count: 200,
            seed,
            params: SynthParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 8 {
            return Err(SynthError::Spec(format!("length {} < 8", self.length)));
        }
        if self.count == 0 {
            return Err(SynthError::Spec("count must be at least 1".into()));
        }
        let p = &self.params;
        p.intercept.check("intercept")?;
        p.slope.check("slope")?;
        p.amplitude.check("amplitude")?;
        if p.frequency_min == 0 || p.frequency_min > p.frequency_max {
            return Err(SynthError::Spec(format!(
                "frequency range {}..={} is invalid",
                p.frequency_min, p.frequency_max
            )));
        }
        for (name, s) in [
            ("trend_sigma", p.trend_sigma),
            ("relative_sigma", p.relative_sigma),
            ("noise_sigma", p.noise_sigma),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(SynthError::Spec(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Parameters actually drawn for one sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DrawnParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intercept: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequency: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplitude2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequency2: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase2: Option<f64>,
    pub sigma: f64,
}

fn index_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index as u64);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn signed_slope(p: &SynthParams, rng: &mut ChaCha8Rng) -> f64 {
    let magnitude = p.slope.draw(rng);
    if rng.random_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

fn frequency(p: &SynthParams, rng: &mut ChaCha8Rng) -> u32 {
    rng.random_range(p.frequency_min..=p.frequency_max)
}

fn phase(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0.0..std::f64::consts::TAU)
}

fn draw_one(kind: SynthKind, p: &SynthParams, len: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, DrawnParams) {
    let n = len as f64;
    let omega = |f: u32| std::f64::consts::TAU * f as f64 / n;
    match kind {
        SynthKind::Trend => {
            let b0 = p.intercept.draw(rng);
            let b1 = signed_slope(p, rng);
            let eps = gaussian(rng, p.trend_sigma, len);
            let y = (0..len).map(|t| b0 + b1 * t as f64 + eps[t]).collect();
            let d = DrawnParams {
                intercept: Some(b0),
                slope: Some(b1),
                sigma: p.trend_sigma,
                ..Default::default()
            };
            (y, d)
        }
        SynthKind::Frequency | SynthKind::Amplitude => {
            let a = p.amplitude.draw(rng);
            let f = frequency(p, rng);
            let phi = if kind == SynthKind::Frequency { phase(rng) } else { 0.0 };
            let sigma = p.relative_sigma * a;
            let eps = gaussian(rng, sigma, len);
            let y = (0..len)
                .map(|t| a * (omega(f) * t as f64 + phi).sin() + eps[t])
                .collect();
            let d = DrawnParams {
                amplitude: Some(a),
                frequency: Some(f),
                phase: (kind == SynthKind::Frequency).then_some(phi),
                sigma,
                ..Default::default()
            };
            (y, d)
        }
        SynthKind::Mixed => {
            let b0 = p.intercept.draw(rng);
            let b1 = signed_slope(p, rng);
            let a1 = p.amplitude.draw(rng);
            let f1 = frequency(p, rng);
            let phi1 = phase(rng);
            let a2 = p.amplitude.draw(rng);
            let f2 = frequency(p, rng);
            let phi2 = phase(rng);
            let sigma = p.relative_sigma * a1;
            let eps = gaussian(rng, sigma, len);
            let y = (0..len)
                .map(|t| {
                    let x = t as f64;
                    b0 + b1 * x
                        + a1 * (omega(f1) * x + phi1).sin()
                        + a2 * (omega(f2) * x + phi2).cos()
                        + eps[t]
                })
                .collect();
            let d = DrawnParams {
                intercept: Some(b0),
                slope: Some(b1),
                amplitude: Some(a1),
                frequency: Some(f1),
                phase: Some(phi1),
                amplitude2: Some(a2),
                frequency2: Some(f2),
                phase2: Some(phi2),
                sigma,
            };
            (y, d)
        }
        SynthKind::Noise => {
            let y = gaussian(rng, p.noise_sigma, len);
            (
                y,
                DrawnParams {
                    sigma: p.noise_sigma,
                    ..Default::default()
                },
            )
        }
    }
}

/// Sequence `index` of a spec; each index has its own generator.
pub fn generate_one(spec: &SyntheticSpec, index: usize) -> (Vec<f64>, DrawnParams) {
    let mut rng = index_rng(spec.seed, index, STREAM_PATTERN);
    draw_one(spec.kind, &spec.params, spec.length, &mut rng)
}

pub fn generate(spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    Ok((0..spec.count).map(|i| generate_one(spec, i).0).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Position {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCInstance {
    pub index: usize,
    pub kind: McKind,
    pub patterned: Vec<f64>,
    pub noise: Vec<f64>,
    pub patterned_position: Position,
    pub params: DrawnParams,
}

impl MCInstance {
    pub fn case_a(&self) -> &[f64] {
        match self.patterned_position {
            Position::A => &self.patterned,
            Position::B => &self.noise,
        }
    }

    pub fn case_b(&self) -> &[f64] {
        match self.patterned_position {
            Position::A => &self.noise,
            Position::B => &self.patterned,
        }
    }

    pub fn correct_choice(&self) -> McChoice {
        match self.patterned_position {
            Position::A => McChoice::A,
            Position::B => McChoice::B,
        }
    }

    /// Same instance with the two options exchanged.
    pub fn swapped(&self) -> Self {
        let mut s = self.clone();
        s.patterned_position = match self.patterned_position {
            Position::A => Position::B,
            Position::B => Position::A,
        };
        s
    }
}

/// One patterned sequence and one fresh noise sequence per instance, with a
/// fair coin for which option holds the pattern.
pub fn make_mc_set(spec: &SyntheticSpec) -> Result<Vec<MCInstance>> {
    spec.validate()?;
    let kind = spec.kind.mc_kind().ok_or(SynthError::NoiseKind)?;
    Ok((0..spec.count)
        .map(|i| {
            let (patterned, params) = generate_one(spec, i);
            let mut noise_rng = index_rng(spec.seed, i, STREAM_NOISE);
            let noise = gaussian(&mut noise_rng, spec.params.noise_sigma, spec.length);
            let mut pos_rng = index_rng(spec.seed, i, STREAM_POSITION);
            let patterned_position = if pos_rng.random_bool(0.5) {
                Position::A
            } else {
                Position::B
            };
            MCInstance {
                index: i,
                kind,
                patterned,
                noise,
                patterned_position,
                params,
            }
        })
        .collect())
}

/// `(slope, standard error)` of the least-squares line over `t = 0..n-1`.
pub fn ols_slope(series: &[f64]) -> (f64, f64) {
    let n = series.len() as f64;
    let t_mean = (n - 1.0) / 2.0;
    let y_mean = series.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (t, &y) in series.iter().enumerate() {
        let dt = t as f64 - t_mean;
        sxx += dt * dt;
        sxy += dt * (y - y_mean);
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * t_mean;
    let ssr: f64 = series
        .iter()
        .enumerate()
        .map(|(t, &y)| (y - intercept - slope * t as f64).powi(2))
        .sum();
    let se = (ssr / (n - 2.0) / sxx).sqrt();
    (slope, se)
}

fn capped_ratio(num: f64, den: f64) -> f64 {
    if den <= 0.0 || !den.is_finite() {
        return if num > 0.0 { SCORE_SENTINEL } else { 0.0 };
    }
    (num / den).min(SCORE_SENTINEL)
}

/// Magnitudes of DFT bins `1..=n/2`.
pub fn spectrum(series: &[f64]) -> Vec<f64> {
    let n = series.len();
    let mut buf: Vec<Complex<f64>> = series.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[1..=n / 2].iter().map(|c| c.norm()).collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Pattern strength of `series` for `kind`; larger is more patterned.
///
/// * trend: |slope| / standard error of the slope
/// * frequency, mixed: peak / median of the non-constant spectrum
/// * amplitude: sample deviation over the deviation implied by
///   point-to-point roughness (std of first differences / sqrt 2), which is
///   about 1 for white noise
pub fn analytic_oracle(series: &[f64], kind: McKind) -> f64 {
    match kind {
        McKind::Trend => {
            let (slope, se) = ols_slope(series);
            capped_ratio(slope.abs(), se)
        }
        McKind::Frequency | McKind::Mixed => {
            let mags = spectrum(series);
            let peak = mags.iter().copied().fold(0.0, f64::max);
            capped_ratio(peak, median(&mags))
        }
        McKind::Amplitude => {
            let diffs: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
            let reference = sample_std(&diffs) / std::f64::consts::SQRT_2;
            capped_ratio(sample_std(series), reference)
        }
    }
}

/// Picks the option with the higher analytic score; ties go to A.
pub fn oracle_agent(instance: &MCInstance) -> McChoice {
    let a = analytic_oracle(instance.case_a(), instance.kind);
    let b = analytic_oracle(instance.case_b(), instance.kind);
    if b > a {
        McChoice::B
    } else {
        McChoice::A
    }
}

/// Up / flat / down trend dataset (labels 1, 2, 3) with default-family
/// noise. Flat samples have zero slope.
pub fn trend_class_dataset(
    per_class_train: usize,
    per_class_test: usize,
    length: usize,
    seed: u64,
) -> Result<DatasetPair> {
    let p = SynthParams::default();
    let build = |split: Split, per_class: usize, offset: usize| {
        let mut rows = Vec::with_capacity(per_class * 3);
        for _ in 0..per_class {
            for (label, sign) in [("1", 1.0), ("2", 0.0), ("3", -1.0)] {
                let idx = offset + rows.len();
                let mut rng = index_rng(seed, idx, STREAM_PATTERN);
                let b0 = p.intercept.draw(&mut rng);
                let b1 = sign * p.slope.draw(&mut rng);
                let eps = gaussian(&mut rng, p.trend_sigma, length);
                let y = (0..length).map(|t| b0 + b1 * t as f64 + eps[t]).collect();
                rows.push((label.to_string(), y));
            }
        }
        TimeSeriesDataset::from_rows("SyntheticTrend", split, rows)
            .map_err(|e| SynthError::Dataset(e.to_string()))
    };
    let train = build(Split::Train, per_class_train, 0)?;
    let test = build(Split::Test, per_class_test, per_class_train * 3)?;
    Ok(DatasetPair { train, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McManifestEntry {
    pub index: usize,
    pub kind: McKind,
    pub patterned_position: Position,
    pub params: DrawnParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McManifest {
    pub spec: SyntheticSpec,
    pub instances: Vec<McManifestEntry>,
}

impl McManifest {
    pub fn new(spec: &SyntheticSpec, instances: &[MCInstance]) -> Self {
        Self {
            spec: spec.clone(),
            instances: instances
                .iter()
                .map(|m| McManifestEntry {
                    index: m.index,
                    kind: m.kind,
                    patterned_position: m.patterned_position,
                    params: m.params.clone(),
                })
                .collect(),
        }
    }
}

fn io_err(path: &Path, e: impl ToString) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes the instances as a UCR-style TSV (label 1 patterned, label 2
/// noise, patterned row first) and the manifest JSON next to it.
pub fn write_mc_files(
    spec: &SyntheticSpec,
    instances: &[MCInstance],
    tsv_path: &Path,
    manifest_path: &Path,
) -> Result<()> {
    let mut f = fs::File::create(tsv_path).map_err(|e| io_err(tsv_path, e))?;
    for m in instances {
        for (label, values) in [("1", &m.patterned), ("2", &m.noise)] {
            let row = format_series(values).replace(", ", "\t");
            writeln!(f, "{label}\t{row}").map_err(|e| io_err(tsv_path, e))?;
        }
    }
    let body = serde_json::to_string_pretty(&McManifest::new(spec, instances))
        .map_err(|e| io_err(manifest_path, e))?;
    fs::write(manifest_path, body).map_err(|e| io_err(manifest_path, e))
}
