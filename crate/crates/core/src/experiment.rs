//! Experiment manifests: arms, backends, run directories and the report,
//! CSV and plot-data artifacts written into them. Also the interpretation
//! probe, the synthetic multiple-choice arm and golden prompt export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{archive_exists, format_series, load_archive, sample_few_shot, DatasetPair, TimeSeriesSample};
use crate::llm::{
    CallContext, ChatBackend, ChatMessage, ChatRequest, Completion, HttpBackend, HttpConfig, LlmClient, LlmError,
    ReplayBackend, TranscriptRecord, TranscriptStore,
};
use crate::metrics::{
    facet_report, format_improvement, improvement_ratio, top_k_patterns, Facet, FacetBuckets, FacetRun, PatternTally,
};
use crate::orchestrator::{self, build_plugin, ArmAblation, PluginKind, RunConfig, RunContext, RunError, RunReport};
use crate::parser::{parse_mc_choice, parse_pattern_flags, McChoice, Pattern};
use crate::plugin::{IclCase, PluginOutput, PluginProfile};
use crate::prompts::{
    render_pattern_probe, render_round1, render_round2, render_round3, render_synthetic_mc, render_vanilla_cot,
    Ablation, DatasetBrief, McKind, Round,
};
use crate::synthgen::{analytic_oracle, make_mc_set, SynthKind, SyntheticSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("manifest error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("cannot compare reports from different datasets: {0}")]
    MixedDatasets(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path, e: impl ToString) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, body).map_err(|e| io_err(path, e))
}

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitStatus {
    Success = 0,
    Config = 1,
    Transport = 2,
    Partial = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

impl From<&ExperimentError> for ExitStatus {
    fn from(e: &ExperimentError) -> Self {
        match e {
            ExperimentError::Llm(LlmError::Transport { .. })
            | ExperimentError::Run(RunError::Llm(LlmError::Transport { .. })) => ExitStatus::Transport,
            ExperimentError::Llm(_) | ExperimentError::Run(RunError::Llm(_)) => ExitStatus::Transport,
            _ => ExitStatus::Config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmKind {
    ReasonTsc,
    VanillaCot,
    AblationNoLogits,
    AblationNoPlugin,
    InterpretationProbe,
    SyntheticMc,
}

impl ArmKind {
    fn ablation(self) -> Option<ArmAblation> {
        match self {
            ArmKind::ReasonTsc => Some(ArmAblation::None),
            ArmKind::VanillaCot => Some(ArmAblation::Vanilla),
            ArmKind::AblationNoLogits => Some(ArmAblation::NoLogits),
            ArmKind::AblationNoPlugin => Some(ArmAblation::NoPlugin),
            _ => None,
        }
    }
}

fn default_plugin() -> PluginKind {
    PluginKind::Centroid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub kind: ArmKind,
    /// Archive dataset name; unused by synthetic arms.
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default = "default_plugin")]
    pub plugin: PluginKind,
    #[serde(default)]
    pub shots_round1: Option<usize>,
    #[serde(default)]
    pub icl_success: Option<usize>,
    #[serde(default)]
    pub icl_fail: Option<usize>,
    #[serde(default)]
    pub exclude_icl: bool,
    /// Synthetic family for `synthetic_mc` arms.
    #[serde(default)]
    pub mc_kind: Option<McKind>,
    #[serde(default)]
    pub mc_count: Option<usize>,
    #[serde(default)]
    pub max_probes: Option<usize>,
    #[serde(default)]
    pub min_probes: Option<usize>,
}

impl Arm {
    pub fn new(label: impl Into<String>, kind: ArmKind, dataset: Option<&str>) -> Self {
        Self {
            label: label.into(),
            kind,
            dataset: dataset.map(str::to_string),
            plugin: PluginKind::Centroid,
            shots_round1: None,
            icl_success: None,
            icl_fail: None,
            exclude_icl: false,
            mc_kind: None,
            mc_count: None,
            max_probes: None,
            min_probes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackendSpec {
    Http(HttpConfig),
    /// Answers from a transcript file; records are filtered by `run_id`,
    /// which defaults to each arm's label.
    Replay {
        transcript: PathBuf,
        #[serde(default)]
        run_id: Option<String>,
        #[serde(default)]
        strict: bool,
    },
    Mock,
}

fn default_model() -> String {
    "mock".into()
}

fn default_concurrency() -> usize {
    4
}

fn default_token_cap() -> usize {
    crate::llm::DEFAULT_TOKEN_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub data_root: PathBuf,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default = "default_concurrency")]
    pub concurrency_limit: usize,
    #[serde(default = "default_token_cap")]
    pub token_cap: usize,
    pub backend: BackendSpec,
    pub arms: Vec<Arm>,
}

impl ExperimentManifest {
    /// Parses a TOML manifest; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut m: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut m.output_dir);
        rebase(&mut m.data_root);
        if let BackendSpec::Replay { transcript, .. } = &mut m.backend {
            rebase(transcript);
        }
        for arm in &mut m.arms {
            if let PluginKind::External(p) = &mut arm.plugin {
                rebase(p);
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Checks labels, datasets and arm fields without touching the network.
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(ExperimentError::Config("manifest has no arms".into()));
        }
        if self.concurrency_limit == 0 {
            return Err(ExperimentError::Config("concurrency_limit must be at least 1".into()));
        }
        let mut seen = BTreeSet::new();
        for arm in &self.arms {
            if arm.label.is_empty() || !arm.label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                return Err(ExperimentError::Config(format!(
                    "arm label {:?} must be non-empty ASCII letters, digits, '-', '_' or '.'",
                    arm.label
                )));
            }
            if !seen.insert(&arm.label) {
                return Err(ExperimentError::Config(format!("duplicate arm label {:?}", arm.label)));
            }
            match arm.kind {
                ArmKind::SyntheticMc => {
                    if arm.mc_kind.is_none() {
                        return Err(ExperimentError::Config(format!("arm {:?} needs mc_kind", arm.label)));
                    }
                }
                _ => {
                    let name = arm
                        .dataset
                        .as_deref()
                        .ok_or_else(|| ExperimentError::Config(format!("arm {:?} needs a dataset", arm.label)))?;
                    if !archive_exists(&self.data_root, name) {
                        return Err(ExperimentError::Config(format!(
                            "unknown dataset {name:?} under {}",
                            self.data_root.display()
                        )));
                    }
                }
            }
            if let Some(ab) = arm.kind.ablation() {
                self.run_config(arm, ab).validate()?;
            }
        }
        if let BackendSpec::Replay { transcript, .. } = &self.backend {
            if !transcript.is_file() {
                return Err(ExperimentError::Config(format!(
                    "replay transcript {} not found",
                    transcript.display()
                )));
            }
        }
        Ok(())
    }

    fn run_config(&self, arm: &Arm, ablation: ArmAblation) -> RunConfig {
        let mut c = RunConfig::new(&arm.label, arm.dataset.clone().unwrap_or_default(), &self.model_name);
        c.plugin = arm.plugin.clone();
        c.seed = self.seed;
        c.ablation = ablation;
        c.concurrency_limit = self.concurrency_limit;
        c.token_cap = self.token_cap;
        c.exclude_icl = arm.exclude_icl;
        if let Some(v) = arm.shots_round1 {
            c.shots_round1 = v;
        }
        if let Some(v) = arm.icl_success {
            c.icl_success = v;
        }
        if let Some(v) = arm.icl_fail {
            c.icl_fail = v;
        }
        c
    }
}

/// Builds the backend an arm talks to.
pub type BackendFactory<'a> = dyn Fn(&Arm) -> Result<Arc<dyn ChatBackend>> + 'a;

/// Backend factory for the manifest's own backend spec.
pub fn backend_for(spec: &BackendSpec, arm: &Arm) -> Result<Arc<dyn ChatBackend>> {
    Ok(match spec {
        BackendSpec::Http(cfg) => Arc::new(HttpBackend::new(cfg.clone())?),
        BackendSpec::Replay {
            transcript,
            run_id,
            strict,
        } => {
            let store = TranscriptStore::open(transcript)?;
            let id = run_id.clone().unwrap_or_else(|| arm.label.clone());
            Arc::new(ReplayBackend::from_store(&store, Some(&id), *strict)?)
        }
        BackendSpec::Mock => Arc::new(MockBackend::default()),
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Render prompts into the run directory and make no backend calls.
    pub dry_run: bool,
    /// Continue inside an existing run directory, reusing stored responses.
    pub resume: Option<PathBuf>,
    /// Overrides the manifest's concurrency limit.
    pub concurrency_limit: Option<usize>,
    /// Fixed directory name instead of a timestamp.
    pub run_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub label: String,
    pub dataset: String,
    pub num_classes: usize,
    pub probes: usize,
    pub skipped: Option<String>,
    pub counts: BTreeMap<Pattern, usize>,
    pub top3: Vec<PatternTally>,
    pub parse_warnings: usize,
    pub failed_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub label: String,
    pub kind: McKind,
    pub instances: usize,
    pub correct: usize,
    pub failed: usize,
    pub accuracy: f64,
    pub patterned_at_a: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "arm_type")]
pub enum ArmOutcome {
    Classification(Box<RunReport>),
    Probe(ProbeReport),
    Mc(McReport),
    Failed { label: String, error: String, exit: ExitStatus },
}

#[derive(Debug)]
pub struct ManifestOutcome {
    pub run_dir: PathBuf,
    pub outcomes: Vec<ArmOutcome>,
    pub status: ExitStatus,
}

fn timestamp_name() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("run-{secs}")
}

fn fresh_dir(base: &Path, name: &str) -> PathBuf {
    let mut dir = base.join(name);
    let mut n = 1;
    while dir.exists() {
        dir = base.join(format!("{name}-{n}"));
        n += 1;
    }
    dir
}

/// Runs every arm with the manifest's backend.
pub fn run_manifest(manifest: &ExperimentManifest, opts: &RunOptions) -> Result<ManifestOutcome> {
    let spec = manifest.backend.clone();
    run_manifest_with(manifest, opts, &move |arm| backend_for(&spec, arm))
}

/// Runs every arm sequentially, each against the backend `factory` returns.
pub fn run_manifest_with(
    manifest: &ExperimentManifest,
    opts: &RunOptions,
    factory: &BackendFactory<'_>,
) -> Result<ManifestOutcome> {
    manifest.validate()?;
    let mut manifest = manifest.clone();
    if let Some(c) = opts.concurrency_limit {
        manifest.concurrency_limit = c;
    }
    let run_dir = match &opts.resume {
        Some(dir) => dir.clone(),
        None => fresh_dir(
            &manifest.output_dir,
            &opts.run_name.clone().unwrap_or_else(timestamp_name),
        ),
    };
    fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;
    write_file(
        &run_dir.join("manifest.toml"),
        &toml::to_string(&manifest).map_err(|e| ExperimentError::Config(e.to_string()))?,
    )?;

    if opts.dry_run {
        for arm in &manifest.arms {
            dump_prompts(&manifest, arm, &run_dir.join("prompts").join(&arm.label))?;
        }
        return Ok(ManifestOutcome {
            run_dir,
            outcomes: Vec::new(),
            status: ExitStatus::Success,
        });
    }

    let store = TranscriptStore::open(run_dir.join("transcript.jsonl"))?;
    let mut outcomes = Vec::new();
    let mut status = ExitStatus::Success;
    for arm in &manifest.arms {
        let outcome = match run_arm(&manifest, arm, factory, &store, opts.resume.is_some()) {
            Ok(o) => o,
            Err(e) => {
                let exit = ExitStatus::from(&e);
                log::error!("arm {}: {e}", arm.label);
                ArmOutcome::Failed {
                    label: arm.label.clone(),
                    error: e.to_string(),
                    exit,
                }
            }
        };
        status = merge_status(status, &outcome);
        write_arm(&run_dir, &outcome)?;
        outcomes.push(outcome);
    }
    let reports: Vec<&RunReport> = outcomes
        .iter()
        .filter_map(|o| match o {
            ArmOutcome::Classification(r) => Some(r.as_ref()),
            _ => None,
        })
        .collect();
    if !reports.is_empty() {
        let bundle = summarize(&reports, &FacetBuckets::default());
        write_file(&run_dir.join("metrics.csv"), &bundle.csv)?;
        write_file(&run_dir.join("comparison.md"), &bundle.markdown)?;
        write_file(&run_dir.join("plot_data.csv"), &bundle.plot)?;
    }
    Ok(ManifestOutcome {
        run_dir,
        outcomes,
        status,
    })
}

fn merge_status(current: ExitStatus, outcome: &ArmOutcome) -> ExitStatus {
    let this = match outcome {
        ArmOutcome::Failed { exit, .. } => *exit,
        ArmOutcome::Classification(r) if r.metrics.n_failed > 0 => ExitStatus::Partial,
        ArmOutcome::Probe(p) if p.failed_calls > 0 => ExitStatus::Partial,
        ArmOutcome::Mc(m) if m.failed > 0 => ExitStatus::Partial,
        _ => ExitStatus::Success,
    };
    let rank = |s: ExitStatus| match s {
        ExitStatus::Success => 0,
        ExitStatus::Partial => 1,
        ExitStatus::Transport => 2,
        ExitStatus::Config => 3,
    };
    if rank(this) > rank(current) {
        this
    } else {
        current
    }
}

fn write_arm(dir: &Path, outcome: &ArmOutcome) -> Result<()> {
    match outcome {
        ArmOutcome::Classification(r) => write_file(&dir.join(format!("{}.report.json", r.config.run_id)), &r.to_json()),
        ArmOutcome::Probe(p) => write_file(
            &dir.join(format!("{}.probe.json", p.label)),
            &(serde_json::to_string_pretty(p).expect("probe serializes") + "\n"),
        ),
        ArmOutcome::Mc(m) => write_file(
            &dir.join(format!("{}.mc.json", m.label)),
            &(serde_json::to_string_pretty(m).expect("mc serializes") + "\n"),
        ),
        ArmOutcome::Failed { label, error, .. } => write_file(&dir.join(format!("{label}.error.txt")), error),
    }
}

fn run_arm(
    manifest: &ExperimentManifest,
    arm: &Arm,
    factory: &BackendFactory<'_>,
    store: &TranscriptStore,
    resume: bool,
) -> Result<ArmOutcome> {
    let backend = factory(arm)?;
    let client = LlmClient::new(backend, &manifest.model_name).with_token_cap(manifest.token_cap);
    match arm.kind {
        ArmKind::SyntheticMc => {
            let kind = arm.mc_kind.expect("validated");
            let mut spec = SyntheticSpec::new(SynthKind::from(kind), manifest.seed);
            if let Some(n) = arm.mc_count {
                spec.count = n;
            }
            let ctx = ArmCtx {
                label: &arm.label,
                dataset: "synthetic",
                client: &client,
                store,
                resume,
                limit: manifest.concurrency_limit,
            };
            Ok(ArmOutcome::Mc(run_synthetic_mc(&ctx, &spec)?))
        }
        ArmKind::InterpretationProbe => {
            let name = arm.dataset.as_deref().expect("validated");
            let data = load_archive(&manifest.data_root, name).map_err(RunError::from)?;
            let ctx = ArmCtx {
                label: &arm.label,
                dataset: name,
                client: &client,
                store,
                resume,
                limit: manifest.concurrency_limit,
            };
            Ok(ArmOutcome::Probe(probe_patterns(
                &ctx,
                &data,
                manifest.seed,
                arm.max_probes.unwrap_or(100),
                arm.min_probes.unwrap_or(30),
            )?))
        }
        kind => {
            let name = arm.dataset.as_deref().expect("validated");
            let data = load_archive(&manifest.data_root, name).map_err(RunError::from)?;
            let mut config = manifest.run_config(arm, kind.ablation().expect("classification arm"));
            config.resume = resume;
            let plugin = build_plugin(&config.plugin, &data)?;
            let ctx = RunContext {
                data: &data,
                plugin,
                client: &client,
                store,
            };
            Ok(ArmOutcome::Classification(Box::new(orchestrator::run(&config, &ctx)?)))
        }
    }
}

/// Per-arm call plumbing for the probe and multiple-choice arms.
pub struct ArmCtx<'a> {
    pub label: &'a str,
    pub dataset: &'a str,
    pub client: &'a LlmClient,
    pub store: &'a TranscriptStore,
    pub resume: bool,
    pub limit: usize,
}

impl ArmCtx<'_> {
    fn call(&self, key: &str, round: Round, prompt: String) -> std::result::Result<String, LlmError> {
        if self.resume {
            if let Some(r) = self.store.get(self.label, key, round) {
                return Ok(r.response);
            }
        }
        let request = self.client.request(vec![ChatMessage::user(prompt)]);
        let c = self.client.complete(&request, &CallContext::new(key, round))?;
        self.store.record(TranscriptRecord {
            run_id: self.label.to_string(),
            dataset: self.dataset.to_string(),
            sample_key: key.to_string(),
            round,
            request_digest: request.digest(),
            response: c.text.clone(),
            latency_ms: c.latency_ms,
            attempt: c.attempts,
        })?;
        Ok(c.text)
    }
}

/// Applies `f` to `0..n` on up to `limit` threads, results in index order.
fn parallel_map<T: Send>(n: usize, limit: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..limit.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let v = f(i);
                slots.lock().expect("slot lock")[i] = Some(v);
            });
        }
    });
    slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|v| v.expect("slot filled"))
        .collect()
}

/// Draw `j` of the probe: element `j` of every class pool, where each pool
/// is train ∪ test of that class shuffled with `seed`. Returns the number of
/// draws (smallest pool, capped at `max_probes`) and the draws themselves.
pub fn probe_draws<'a>(data: &'a DatasetPair, seed: u64, max_probes: usize) -> Vec<Vec<&'a TimeSeriesSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<&TimeSeriesSample>> = Vec::new();
    for c in 1..=data.test.num_classes {
        let mut pool: Vec<&TimeSeriesSample> = data
            .train
            .samples
            .iter()
            .chain(data.test.samples.iter())
            .filter(|s| s.class_id == c)
            .collect();
        pool.shuffle(&mut rng);
        pools.push(pool);
    }
    let draws = pools.iter().map(Vec::len).min().unwrap_or(0).min(max_probes);
    (0..draws).map(|j| pools.iter().map(|p| p[j]).collect()).collect()
}

/// Interpretation probe: tallies the ten 0/1 flags over up to `max_probes`
/// prompts; datasets supporting fewer than `min_probes` draws are skipped.
pub fn probe_patterns(
    ctx: &ArmCtx<'_>,
    data: &DatasetPair,
    seed: u64,
    max_probes: usize,
    min_probes: usize,
) -> Result<ProbeReport> {
    let draws = probe_draws(data, seed, max_probes);
    let mut report = ProbeReport {
        label: ctx.label.to_string(),
        dataset: data.test.name.clone(),
        num_classes: data.test.num_classes,
        probes: draws.len(),
        skipped: None,
        counts: Pattern::ALL.iter().map(|p| (*p, 0)).collect(),
        top3: Vec::new(),
        parse_warnings: 0,
        failed_calls: 0,
    };
    if draws.len() < min_probes {
        let why = format!("only {} draws available, fewer than {min_probes}", draws.len());
        log::warn!("probe {}: {why}", data.test.name);
        report.skipped = Some(why);
        return Ok(report);
    }
    let brief = DatasetBrief::for_dataset(&data.test);
    let answers = parallel_map(draws.len(), ctx.limit, |j| {
        let prompt = render_pattern_probe(&brief, &draws[j]).map_err(RunError::from)?;
        Ok::<_, ExperimentError>(ctx.call(&format!("probe:{j}"), Round::Probe, prompt.text))
    });
    for a in answers {
        match a? {
            Ok(text) => {
                let flags = parse_pattern_flags(&text);
                report.parse_warnings += flags.warnings.len();
                for p in Pattern::ALL {
                    if flags.get(p) {
                        *report.counts.entry(p).or_default() += 1;
                    }
                }
            }
            Err(e @ (LlmError::Duplicate { .. } | LlmError::Store { .. })) => return Err(e.into()),
            Err(e) => {
                log::warn!("probe call failed: {e}");
                report.failed_calls += 1;
            }
        }
    }
    report.top3 = top_k_patterns(&report.counts, 3);
    Ok(report)
}

/// Two-option pattern questions over a generated set.
pub fn run_synthetic_mc(ctx: &ArmCtx<'_>, spec: &SyntheticSpec) -> Result<McReport> {
    let set = make_mc_set(spec).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let kind = spec.kind.mc_kind().expect("make_mc_set rejects noise");
    let answers = parallel_map(set.len(), ctx.limit, |i| {
        let m = &set[i];
        let prompt = render_synthetic_mc(kind, &format_series(m.case_a()), &format_series(m.case_b()))
            .map_err(RunError::from)?;
        Ok::<_, ExperimentError>(ctx.call(&format!("mc:{i}"), Round::Mc, prompt.text))
    });
    let mut correct = 0;
    let mut failed = 0;
    for (m, a) in set.iter().zip(answers) {
        match a? {
            Ok(text) => match parse_mc_choice(&text) {
                McChoice::Failed => failed += 1,
                c if c == m.correct_choice() => correct += 1,
                _ => {}
            },
            Err(e @ (LlmError::Duplicate { .. } | LlmError::Store { .. })) => return Err(e.into()),
            Err(_) => failed += 1,
        }
    }
    Ok(McReport {
        label: ctx.label.to_string(),
        kind,
        instances: set.len(),
        correct,
        failed,
        accuracy: correct as f64 / set.len() as f64,
        patterned_at_a: set
            .iter()
            .filter(|m| m.correct_choice() == McChoice::A)
            .count(),
    })
}

/// Writes the prompts an arm would send, without any backend call. Round 3
/// prompts are rendered standalone (no prefix) for the first few samples.
fn dump_prompts(manifest: &ExperimentManifest, arm: &Arm, dir: &Path) -> Result<()> {
    match arm.kind {
        ArmKind::SyntheticMc => {
            let mut spec = SyntheticSpec::new(SynthKind::from(arm.mc_kind.expect("validated")), manifest.seed);
            spec.count = arm.mc_count.unwrap_or(spec.count).min(3);
            let kind = spec.kind.mc_kind().expect("patterned kind");
            for m in make_mc_set(&spec).map_err(|e| ExperimentError::Config(e.to_string()))? {
                let p = render_synthetic_mc(kind, &format_series(m.case_a()), &format_series(m.case_b()))
                    .map_err(RunError::from)?;
                write_file(&dir.join(format!("mc_{}.txt", m.index)), &p.text)?;
            }
        }
        ArmKind::InterpretationProbe => {
            let data = load_archive(&manifest.data_root, arm.dataset.as_deref().expect("validated"))
                .map_err(RunError::from)?;
            let brief = DatasetBrief::for_dataset(&data.test);
            if let Some(first) = probe_draws(&data, manifest.seed, 1).first() {
                let p = render_pattern_probe(&brief, first).map_err(RunError::from)?;
                write_file(&dir.join("probe_0.txt"), &p.text)?;
            }
        }
        kind => {
            let data = load_archive(&manifest.data_root, arm.dataset.as_deref().expect("validated"))
                .map_err(RunError::from)?;
            let config = manifest.run_config(arm, kind.ablation().expect("classification arm"));
            let plugin = build_plugin(&config.plugin, &data)?;
            let brief = DatasetBrief::for_dataset(&data.test);
            let scored = orchestrator::prescore(plugin.as_ref(), &data)?;
            if config.ablation != ArmAblation::Vanilla {
                let shots = sample_few_shot(&data.train, config.shots_round1, config.seed).map_err(RunError::from)?;
                let p1 = render_round1(&brief, &data.train, &shots).map_err(RunError::from)?;
                write_file(&dir.join("round1.txt"), &p1.text)?;
                let round2 = matches!(config.ablation, ArmAblation::None | ArmAblation::NoLogits)
                    && config.icl_success + config.icl_fail > 0;
                if round2 {
                    let cases = crate::plugin::select_from_scored(
                        &scored,
                        config.icl_success,
                        config.icl_fail,
                        config.seed.wrapping_add(1),
                    )
                    .map_err(RunError::from)?;
                    let pairs: Vec<(&TimeSeriesSample, &IclCase)> =
                        cases.iter().map(|c| (&data.test.samples[c.sample_index], c)).collect();
                    let p2 = render_round2(&brief, plugin.profile(), &pairs, config.ablation != ArmAblation::NoLogits)
                        .map_err(RunError::from)?;
                    write_file(&dir.join("round2.txt"), &p2.text)?;
                }
            }
            for (i, s) in data.test.samples.iter().enumerate().take(3) {
                let text = match config.ablation {
                    ArmAblation::Vanilla => render_vanilla_cot(&brief, s),
                    ArmAblation::NoLogits => render_round3(&brief, plugin.profile(), s, &scored[i].output, Ablation::NoLogits),
                    ArmAblation::NoPlugin => render_round3(&brief, plugin.profile(), s, &scored[i].output, Ablation::NoPlugin),
                    ArmAblation::None => render_round3(&brief, plugin.profile(), s, &scored[i].output, Ablation::None),
                }
                .map_err(RunError::from)?
                .text;
                write_file(&dir.join(format!("sample_{}.txt", s.source_index)), &text)?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub markdown: String,
    pub csv: String,
    pub plot: String,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", x * 100.0))
}

/// Comparison over reports of one dataset; errors when datasets differ.
pub fn compare_reports(reports: &[&RunReport]) -> Result<ReportBundle> {
    let names: BTreeSet<&str> = reports.iter().map(|r| r.dataset.name.as_str()).collect();
    if names.len() > 1 {
        return Err(ExperimentError::MixedDatasets(
            names.into_iter().collect::<Vec<_>>().join(", "),
        ));
    }
    if reports.is_empty() {
        return Err(ExperimentError::Config("no reports to compare".into()));
    }
    Ok(summarize(reports, &FacetBuckets::default()))
}

/// Markdown, metrics CSV and plot data for any mix of reports; datasets are
/// grouped separately and facet tables close the markdown.
pub fn summarize(reports: &[&RunReport], buckets: &FacetBuckets) -> ReportBundle {
    let mut by_dataset: BTreeMap<&str, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        by_dataset.entry(r.dataset.name.as_str()).or_default().push(r);
    }
    let mut md = String::new();
    let mut csv = String::from(
        "dataset,arm,ablation,accuracy,plugin_accuracy,n_total,n_parsed,n_failed,override_rate,override_accuracy,adoptions,successful_corrections\n",
    );
    let mut plot = String::from("series,x,y\n");
    for (name, rs) in &by_dataset {
        let _ = writeln!(md, "## {name}\n");
        md.push_str("| Arm | Accuracy (%) | Plug-in (%) | Samples | Failed | Overridden (%) | Override Acc. (%) | Adoptions | Corrections |\n");
        md.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for r in rs {
            let m = &r.metrics;
            let _ = writeln!(
                md,
                "| {} | {:.2} | {:.2} | {} | {} | {:.2} | {} | {} | {} |",
                r.config.run_id,
                m.accuracy * 100.0,
                m.plugin_accuracy * 100.0,
                m.n_total,
                m.n_failed,
                m.override_rate * 100.0,
                fmt_opt(m.override_accuracy),
                m.adoptions,
                m.successful_corrections
            );
            let _ = writeln!(
                csv,
                "{name},{},{},{},{},{},{},{},{},{},{},{}",
                r.config.run_id,
                serde_json::to_value(r.config.ablation).expect("ablation serializes").as_str().unwrap_or(""),
                m.accuracy,
                m.plugin_accuracy,
                m.n_total,
                m.n_parsed,
                m.n_failed,
                m.override_rate,
                m.override_accuracy.map_or(String::new(), |v| v.to_string()),
                m.adoptions,
                m.successful_corrections
            );
            let _ = writeln!(plot, "{name},{},{}", r.config.run_id, m.accuracy * 100.0);
        }
        if let Some(base) = rs.iter().find(|r| r.config.ablation == ArmAblation::Vanilla) {
            for r in rs.iter().filter(|r| r.config.ablation != ArmAblation::Vanilla) {
                if let Ok(ratio) = improvement_ratio(r.metrics.accuracy, base.metrics.accuracy) {
                    let _ = writeln!(
                        md,
                        "\nImprovement of {} over {}: {}",
                        r.config.run_id,
                        base.config.run_id,
                        format_improvement(ratio)
                    );
                }
            }
        }
        md.push('\n');
    }
    let runs: Vec<FacetRun> = reports
        .iter()
        .map(|r| FacetRun {
            dataset: r.dataset.name.clone(),
            num_classes: r.dataset.num_classes,
            series_length: r.dataset.series_length,
            tokens: r.max_prompt_tokens,
            accuracy: r.metrics.accuracy,
        })
        .collect();
    if by_dataset.len() > 1 {
        for facet in [Facet::ClassCount, Facet::SeriesLength, Facet::TokenBucket] {
            let _ = writeln!(md, "## By {facet}\n");
            md.push_str("| Bucket | Runs | Mean accuracy (%) | Datasets |\n|---|---|---|---|\n");
            for row in facet_report(&runs, facet, buckets) {
                let _ = writeln!(
                    md,
                    "| {} | {} | {:.2} | {} |",
                    row.bucket,
                    row.runs,
                    row.mean_accuracy * 100.0,
                    row.datasets.join(", ")
                );
                let _ = writeln!(plot, "{facet},{},{}", row.bucket, row.mean_accuracy * 100.0);
            }
            md.push('\n');
        }
    }
    ReportBundle {
        markdown: md,
        csv,
        plot,
    }
}

/// Reads `*.report.json` files (or directories holding them).
pub fn load_reports(paths: &[PathBuf]) -> Result<Vec<RunReport>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| io_err(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.to_string_lossy().ends_with(".report.json"))
                .collect();
            inner.sort();
            files.extend(inner);
        } else {
            files.push(p.clone());
        }
    }
    files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f).map_err(|e| io_err(f, e))?;
            serde_json::from_str(&text).map_err(|e| io_err(f, e))
        })
        .collect()
}

/// Offline stand-in used by demos and dry tests: acknowledges rounds 1-2,
/// echoes the plug-in's result in round 3, answers pattern questions with
/// the analytic oracle and flags no characteristics in the probe.
#[derive(Default)]
pub struct MockBackend {
    calls: AtomicUsize,
}

fn series_after(prompt: &str, marker: &str) -> Option<Vec<f64>> {
    let line = prompt.lines().find_map(|l| l.strip_prefix(marker))?;
    line.split(',').map(|t| t.trim().parse().ok()).collect()
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &ChatRequest, ctx: &CallContext) -> std::result::Result<Completion, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = request.messages.last().map(|m| m.content.as_str()).unwrap_or("");
        let text = match ctx.round {
            Round::One => "Noted the per-category patterns.".to_string(),
            Round::Two => "Noted the model's behaviour on the cases.".to_string(),
            Round::Three | Round::Vanilla => {
                let k = prompt
                    .split("Model Result: Category ")
                    .nth(1)
                    .and_then(|s| s.split(|c: char| !c.is_ascii_digit()).next())
                    .filter(|s| !s.is_empty())
                    .unwrap_or("1");
                format!("- Make a Preliminary Prediction: Category {k}\n- Final Classification Decision: Category {k}\n- True Label: Category {k}")
            }
            Round::Mc => {
                let kind = McKind::detect(prompt).unwrap_or(McKind::Mixed);
                let a = series_after(prompt, "- Case A: ").unwrap_or_default();
                let b = series_after(prompt, "- Case B: ").unwrap_or_default();
                let pick = if a.len() < 8 || b.len() < 8 || analytic_oracle(&a, kind) >= analytic_oracle(&b, kind) {
                    "A"
                } else {
                    "B"
                };
                format!("- Option: Case {pick}\n- Explanation: higher analytic pattern score")
            }
            Round::Probe => Pattern::ALL
                .iter()
                .map(|p| format!("- {} Differences: 0. None found.", p.name()))
                .collect::<Vec<_>>()
                .join("\n"),
        };
        Ok(Completion {
            text,
            attempts: 1,
            latency_ms: 0,
        })
    }

    fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Fixed plug-in output used by the golden round-2 and round-3 prompts.
pub fn golden_plugin_output() -> PluginOutput {
    PluginOutput {
        predicted_class: 1,
        logits: vec![2.62, -1.15, -1.37],
    }
}

/// Renders every prompt kind for a fixture dataset with fixed inputs.
/// Returns `(file name, text)` pairs.
pub fn golden_prompts(data: &DatasetPair) -> Result<Vec<(String, String)>> {
    let brief = DatasetBrief::for_dataset(&data.test);
    let profile = PluginProfile {
        model_name: "fixture".into(),
        train_accuracy: 0.74,
    };
    let shots = sample_few_shot(&data.train, 2, 0).map_err(RunError::from)?;
    let cases: Vec<IclCase> = [(0usize, 1usize, vec![2.03, 0.98, -0.5]), (1, 3, vec![1.02, -0.2, 0.78]), (2, 2, vec![-0.4, 1.3, 0.1])]
        .into_iter()
        .map(|(i, pred, logits)| IclCase {
            sample_index: i,
            output: PluginOutput {
                predicted_class: pred,
                logits,
            },
            truth: data.test.samples[i].class_id,
        })
        .collect();
    let pairs: Vec<(&TimeSeriesSample, &IclCase)> =
        cases.iter().map(|c| (&data.test.samples[c.sample_index], c)).collect();
    let sample = &data.test.samples[0];
    let out = golden_plugin_output();
    let one_per_class: Vec<&TimeSeriesSample> = (1..=data.train.num_classes)
        .filter_map(|c| data.train.samples.iter().find(|s| s.class_id == c))
        .collect();
    let a = format_series(&data.train.samples[0].values);
    let b = format_series(&data.train.samples[1].values);
    let r = |p: std::result::Result<crate::prompts::RenderedPrompt, crate::prompts::PromptError>| {
        p.map(|p| p.text).map_err(|e| ExperimentError::Run(RunError::from(e)))
    };
    let mut out_files = vec![
        ("round1.txt".to_string(), r(render_round1(&brief, &data.train, &shots))?),
        ("round2.txt".to_string(), r(render_round2(&brief, &profile, &pairs, true))?),
        ("round2_no_logits.txt".to_string(), r(render_round2(&brief, &profile, &pairs, false))?),
        ("round3.txt".to_string(), r(render_round3(&brief, &profile, sample, &out, Ablation::None))?),
        ("round3_no_logits.txt".to_string(), r(render_round3(&brief, &profile, sample, &out, Ablation::NoLogits))?),
        ("round3_no_plugin.txt".to_string(), r(render_round3(&brief, &profile, sample, &out, Ablation::NoPlugin))?),
        ("vanilla.txt".to_string(), r(render_vanilla_cot(&brief, sample))?),
        ("probe.txt".to_string(), r(render_pattern_probe(&brief, &one_per_class))?),
    ];
    for kind in McKind::ALL {
        out_files.push((format!("mc_{kind}.txt"), r(render_synthetic_mc(kind, &a, &b))?));
    }
    Ok(out_files)
}

/// Writes [`golden_prompts`] into `dir`.
pub fn export_goldens(data: &DatasetPair, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (name, text) in golden_prompts(data)? {
        let path = dir.join(name);
        write_file(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parses_and_rebases() {
        let text = r#"
output_dir = "runs"
seed = 7
data_root = "data"

[backend]
kind = "mock"

[[arms]]
label = "reason"
kind = "reason_tsc"
dataset = "BME"
plugin = { kind = "external", path = "logits.json" }

[[arms]]
label = "mc-trend"
kind = "synthetic_mc"
mc_kind = "trend"
"#;
        let m = ExperimentManifest::from_toml(text, Path::new("/base")).unwrap();
        assert_eq!(m.output_dir, PathBuf::from("/base/runs"));
        assert_eq!(m.arms[0].plugin, PluginKind::External("/base/logits.json".into()));
        assert_eq!(m.arms[1].mc_kind, Some(McKind::Trend));
        assert_eq!(m.concurrency_limit, 4);
        assert!(matches!(m.validate(), Err(ExperimentError::Config(_))));
    }

    #[test]
    fn duplicate_labels_rejected() {
        let mut m = ExperimentManifest {
            output_dir: "o".into(),
            seed: 0,
            data_root: "d".into(),
            model_name: "m".into(),
            concurrency_limit: 1,
            token_cap: 10_000,
            backend: BackendSpec::Mock,
            arms: vec![Arm::new("a", ArmKind::SyntheticMc, None), Arm::new("a", ArmKind::SyntheticMc, None)],
        };
        for a in &mut m.arms {
            a.mc_kind = Some(McKind::Trend);
        }
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("duplicate"));
    }

    #[test]
    fn mock_answers() {
        let mock = MockBackend::default();
        let req = ChatRequest::new("m", vec![ChatMessage::user("- Task: Model Result: Category 3, Category Logits: [1]")]);
        let out = mock.complete(&req, &CallContext::new("test:0", Round::Three)).unwrap();
        assert!(out.text.ends_with("True Label: Category 3"));
        let req = ChatRequest::new("m", vec![ChatMessage::user("x")]);
        let out = mock.complete(&req, &CallContext::new("probe:0", Round::Probe)).unwrap();
        assert_eq!(parse_pattern_flags(&out.text).warnings.len(), 0);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(ExitStatus::Partial.code(), 3);
        let e = ExperimentError::Llm(LlmError::Transport {
            attempts: 3,
            message: "x".into(),
        });
        assert_eq!(ExitStatus::from(&e), ExitStatus::Transport);
        assert_eq!(ExitStatus::from(&ExperimentError::Config("x".into())), ExitStatus::Config);
    }
}
