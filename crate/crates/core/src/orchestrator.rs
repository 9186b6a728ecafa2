//! The three-turn pipeline: rounds 1 and 2 once per run as a frozen
//! conversation prefix, then round 3 per test sample on a copy of it. Also
//! runs the single-turn vanilla baseline.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{sample_few_shot, DatasetError, DatasetPair, TimeSeriesSample};
use crate::llm::{CallContext, ChatMessage, LlmClient, LlmError, TranscriptRecord, TranscriptStore};
use crate::metrics::{MetricsBlock, MetricsError};
use crate::parser::{parse_decision, ParseStatus};
use crate::plugin::{
    load_external, select_from_scored, train_nearest_centroid, train_one_nn, IclCase, PluginError,
    PluginModel, PluginOutput, PluginProfile,
};
use crate::prompts::{
    render_round1, render_round2, render_round3, render_vanilla_cot, Ablation, DatasetBrief, PromptError,
    Round, TEMPLATE_VERSION,
};

pub const SESSION_KEY: &str = "session";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, RunError>;

pub fn sample_key(source_index: usize) -> String {
    format!("test:{source_index}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "path")]
pub enum PluginKind {
    Centroid,
    OneNn,
    External(PathBuf),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmAblation {
    #[default]
    None,
    NoLogits,
    NoPlugin,
    Vanilla,
}

impl ArmAblation {
    fn prompt_ablation(self) -> Ablation {
        match self {
            ArmAblation::NoLogits => Ablation::NoLogits,
            ArmAblation::NoPlugin => Ablation::NoPlugin,
            _ => Ablation::None,
        }
    }
}

fn default_shots() -> usize {
    2
}
fn default_icl_success() -> usize {
    1
}
fn default_icl_fail() -> usize {
    2
}
fn default_concurrency() -> usize {
    4
}
fn default_token_cap() -> usize {
    crate::llm::DEFAULT_TOKEN_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub dataset_name: String,
    pub model_name: String,
    pub plugin: PluginKind,
    pub seed: u64,
    #[serde(default = "default_shots")]
    pub shots_round1: usize,
    #[serde(default = "default_icl_success")]
    pub icl_success: usize,
    #[serde(default = "default_icl_fail")]
    pub icl_fail: usize,
    #[serde(default)]
    pub ablation: ArmAblation,
    /// Scheduling only; kept out of reports so they do not depend on it.
    #[serde(default = "default_concurrency", skip_serializing)]
    pub concurrency_limit: usize,
    #[serde(default = "default_token_cap")]
    pub token_cap: usize,
    /// Leave the round-2 cases out of the evaluated test samples.
    #[serde(default)]
    pub exclude_icl: bool,
    /// Reuse responses already present in the transcript store.
    #[serde(default, skip_serializing)]
    pub resume: bool,
}

impl RunConfig {
    pub fn new(run_id: impl Into<String>, dataset_name: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            dataset_name: dataset_name.into(),
            model_name: model_name.into(),
            plugin: PluginKind::Centroid,
            seed: 0,
            shots_round1: default_shots(),
            icl_success: default_icl_success(),
            icl_fail: default_icl_fail(),
            ablation: ArmAblation::None,
            concurrency_limit: default_concurrency(),
            token_cap: default_token_cap(),
            exclude_icl: false,
            resume: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots_round1 == 0 {
            return Err(RunError::Config("shots_round1 must be at least 1".into()));
        }
        if self.icl_success + self.icl_fail > 3 {
            return Err(RunError::Config(format!(
                "icl_success + icl_fail = {} exceeds 3",
                self.icl_success + self.icl_fail
            )));
        }
        if self.concurrency_limit == 0 {
            return Err(RunError::Config("concurrency_limit must be at least 1".into()));
        }
        if self.run_id.is_empty() {
            return Err(RunError::Config("run_id is empty".into()));
        }
        Ok(())
    }

    fn has_round2(&self) -> bool {
        matches!(self.ablation, ArmAblation::None | ArmAblation::NoLogits) && self.icl_success + self.icl_fail > 0
    }
}

/// Trains or loads the plug-in named by `kind` for `data`.
pub fn build_plugin(kind: &PluginKind, data: &DatasetPair) -> Result<Arc<dyn PluginModel>> {
    Ok(match kind {
        PluginKind::Centroid => Arc::new(train_nearest_centroid(&data.train)?),
        PluginKind::OneNn => Arc::new(train_one_nn(&data.train)?),
        PluginKind::External(path) => Arc::new(load_external(path, data.test.num_classes)?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_key: String,
    pub source_index: usize,
    pub ground_truth: usize,
    pub plugin_pred: usize,
    pub plugin_logits: Vec<f64>,
    pub llm_preliminary: Option<usize>,
    pub llm_final: Option<usize>,
    pub parse_status: ParseStatus,
    /// `llm_final != plugin_pred`; `None` without a final label.
    pub overridden: Option<bool>,
    #[serde(default)]
    pub budget_exceeded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub prompt_tokens: usize,
    pub transcript_refs: Vec<String>,
}

impl SampleResult {
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        sample_key: String,
        source_index: usize,
        ground_truth: usize,
        plugin_pred: usize,
        plugin_logits: Vec<f64>,
        llm_preliminary: Option<usize>,
        llm_final: Option<usize>,
        parse_status: ParseStatus,
    ) -> Self {
        Self {
            sample_key,
            source_index,
            ground_truth,
            plugin_pred,
            plugin_logits,
            llm_preliminary,
            llm_final,
            parse_status,
            overridden: llm_final.map(|f| f != plugin_pred),
            budget_exceeded: false,
            error: None,
            prompt_tokens: 0,
            transcript_refs: Vec::new(),
        }
    }

    pub fn is_correct(&self) -> bool {
        self.llm_final == Some(self.ground_truth)
    }
}

pub struct SessionContext {
    pub brief: DatasetBrief,
    pub plugin: Arc<dyn PluginModel>,
    /// Rounds 1 and 2, prompts and responses; empty for the vanilla arm.
    pub conversation_prefix: Vec<ChatMessage>,
    pub round1_response: Option<String>,
    pub round2_response: Option<String>,
    pub icl_cases: Vec<IclCase>,
    pub few_shot: Vec<usize>,
    prefix_digest: String,
}

impl SessionContext {
    /// SHA-256 over the serialized prefix.
    pub fn prefix_digest(&self) -> &str {
        &self.prefix_digest
    }
}

fn digest_messages(messages: &[ChatMessage]) -> String {
    let bytes = serde_json::to_vec(messages).expect("messages serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// Everything a run needs besides its config.
pub struct RunContext<'a> {
    pub data: &'a DatasetPair,
    pub plugin: Arc<dyn PluginModel>,
    pub client: &'a LlmClient,
    pub store: &'a TranscriptStore,
}

fn call(
    config: &RunConfig,
    ctx: &RunContext<'_>,
    client: &LlmClient,
    key: &str,
    round: Round,
    messages: Vec<ChatMessage>,
) -> std::result::Result<String, LlmError> {
    if config.resume {
        if let Some(rec) = ctx.store.get(&config.run_id, key, round) {
            return Ok(rec.response);
        }
    }
    let request = client.request(messages);
    let completion = client.complete(&request, &CallContext::new(key, round))?;
    ctx.store.record(TranscriptRecord {
        run_id: config.run_id.clone(),
        dataset: config.dataset_name.clone(),
        sample_key: key.to_string(),
        round,
        request_digest: request.digest(),
        response: completion.text.clone(),
        latency_ms: completion.latency_ms,
        attempt: completion.attempts,
    })?;
    Ok(completion.text)
}

fn client_for(config: &RunConfig, ctx: &RunContext<'_>) -> LlmClient {
    let mut client = ctx.client.clone().with_token_cap(config.token_cap);
    client.model_name = config.model_name.clone();
    client
}

/// Scores every test sample with the plug-in, in split order.
pub fn prescore(plugin: &dyn PluginModel, data: &DatasetPair) -> Result<Vec<IclCase>> {
    data.test
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(IclCase {
                sample_index: i,
                output: plugin.predict(s)?,
                truth: s.class_id,
            })
        })
        .collect()
}

/// Sends rounds 1 and 2 (as the ablation allows) and freezes the prefix.
pub fn build_session(config: &RunConfig, ctx: &RunContext<'_>, scored: &[IclCase]) -> Result<SessionContext> {
    config.validate()?;
    let client = client_for(config, ctx);
    let brief = DatasetBrief::for_dataset(&ctx.data.test);
    let mut session = SessionContext {
        brief,
        plugin: ctx.plugin.clone(),
        conversation_prefix: Vec::new(),
        round1_response: None,
        round2_response: None,
        icl_cases: Vec::new(),
        few_shot: Vec::new(),
        prefix_digest: String::new(),
    };
    if config.ablation == ArmAblation::Vanilla {
        session.prefix_digest = digest_messages(&[]);
        return Ok(session);
    }

    let shots = sample_few_shot(&ctx.data.train, config.shots_round1, config.seed)?;
    session.few_shot = shots
        .per_class
        .values()
        .flatten()
        .map(|&i| ctx.data.train.samples[i].source_index)
        .collect();
    let p1 = render_round1(&session.brief, &ctx.data.train, &shots)?;
    let mut prefix = vec![ChatMessage::user(p1.text)];
    let r1 = call(config, ctx, &client, SESSION_KEY, Round::One, prefix.clone())?;
    prefix.push(ChatMessage::assistant(r1.clone()));
    session.round1_response = Some(r1);

    if config.has_round2() {
        let cases = select_from_scored(scored, config.icl_success, config.icl_fail, config.seed.wrapping_add(1))?;
        let pairs: Vec<(&TimeSeriesSample, &IclCase)> = cases
            .iter()
            .map(|c| (&ctx.data.test.samples[c.sample_index], c))
            .collect();
        let include_logits = config.ablation != ArmAblation::NoLogits;
        let p2 = render_round2(&session.brief, ctx.plugin.profile(), &pairs, include_logits)?;
        prefix.push(ChatMessage::user(p2.text));
        let r2 = call(config, ctx, &client, SESSION_KEY, Round::Two, prefix.clone())?;
        prefix.push(ChatMessage::assistant(r2.clone()));
        session.round2_response = Some(r2);
        session.icl_cases = cases;
    }
    session.prefix_digest = digest_messages(&prefix);
    session.conversation_prefix = prefix;
    Ok(session)
}

/// Round 3 (or the vanilla turn) for one sample on a fresh copy of the
/// prefix. Budget and transport failures become failed results.
pub fn classify_sample(
    config: &RunConfig,
    ctx: &RunContext<'_>,
    session: &SessionContext,
    sample: &TimeSeriesSample,
    output: &PluginOutput,
) -> Result<SampleResult> {
    let client = client_for(config, ctx);
    let key = sample_key(sample.source_index);
    let (round, prompt) = if config.ablation == ArmAblation::Vanilla {
        (Round::Vanilla, render_vanilla_cot(&session.brief, sample)?)
    } else {
        (
            Round::Three,
            render_round3(
                &session.brief,
                session.plugin.profile(),
                sample,
                output,
                config.ablation.prompt_ablation(),
            )?,
        )
    };
    let mut messages = session.conversation_prefix.clone();
    messages.push(ChatMessage::user(prompt.text));
    let prompt_tokens = client.request(messages.clone()).token_estimate();

    let mut result = SampleResult::assemble(
        key.clone(),
        sample.source_index,
        sample.class_id,
        output.predicted_class,
        output.logits.clone(),
        None,
        None,
        ParseStatus::Failed,
    );
    result.prompt_tokens = prompt_tokens;
    if round == Round::Three {
        result.transcript_refs.push(format!("{SESSION_KEY}/1"));
        if session.round2_response.is_some() {
            result.transcript_refs.push(format!("{SESSION_KEY}/2"));
        }
    }
    match call(config, ctx, &client, &key, round, messages) {
        Ok(text) => {
            let d = parse_decision(&text, session.brief.num_classes);
            result.llm_preliminary = d.preliminary_label;
            result.llm_final = d.final_label;
            result.parse_status = d.parse_status;
            result.overridden = d.final_label.map(|f| f != output.predicted_class);
            result.transcript_refs.push(format!("{key}/{round}"));
        }
        Err(LlmError::Budget { estimate, cap }) => {
            result.budget_exceeded = true;
            result.error = Some(format!("prompt estimated at {estimate} tokens exceeds the cap of {cap}"));
        }
        Err(e @ LlmError::Duplicate { .. }) | Err(e @ LlmError::Store { .. }) => return Err(e.into()),
        Err(e) => result.error = Some(e.to_string()),
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub num_classes: usize,
    pub series_length: usize,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub template_version: String,
    pub config: RunConfig,
    pub dataset: DatasetSummary,
    pub plugin: PluginProfile,
    pub prefix_digest: String,
    /// Train-split source indices shown in round 1.
    pub few_shot: Vec<usize>,
    /// Test-split source indices shown in round 2.
    pub icl_cases: Vec<usize>,
    pub metrics: MetricsBlock,
    /// Largest conversation size sent, in estimated tokens.
    pub max_prompt_tokens: usize,
    pub results: Vec<SampleResult>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn n_failed(&self) -> usize {
        self.metrics.n_failed
    }
}

/// Whole run: pre-score, session once, round 3 for every evaluated sample
/// under the concurrency limit, results ordered by source index.
pub fn run(config: &RunConfig, ctx: &RunContext<'_>) -> Result<RunReport> {
    config.validate()?;
    let scored = prescore(ctx.plugin.as_ref(), ctx.data)?;
    let session = build_session(config, ctx, &scored)?;

    let icl: BTreeSet<usize> = session.icl_cases.iter().map(|c| c.sample_index).collect();
    let work: Vec<usize> = (0..ctx.data.test.len())
        .filter(|i| !(config.exclude_icl && icl.contains(i)))
        .collect();

    let slots: Mutex<Vec<Option<Result<SampleResult>>>> = Mutex::new((0..work.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = config.concurrency_limit.min(work.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                if j >= work.len() {
                    break;
                }
                let i = work[j];
                let out = classify_sample(config, ctx, &session, &ctx.data.test.samples[i], &scored[i].output);
                slots.lock().expect("result lock")[j] = Some(out);
            });
        }
    });
    let mut results = slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect::<Result<Vec<_>>>()?;
    results.sort_by_key(|r| r.source_index);

    let metrics = MetricsBlock::compute(&results)?;
    let test = &ctx.data.test;
    Ok(RunReport {
        template_version: TEMPLATE_VERSION.to_string(),
        config: config.clone(),
        dataset: DatasetSummary {
            name: test.name.clone(),
            num_classes: test.num_classes,
            series_length: test.series_length,
            n_train: ctx.data.train.len(),
            n_test: test.len(),
        },
        plugin: ctx.plugin.profile().clone(),
        prefix_digest: session.prefix_digest().to_string(),
        few_shot: session.few_shot.clone(),
        icl_cases: session
            .icl_cases
            .iter()
            .map(|c| test.samples[c.sample_index].source_index)
            .collect(),
        metrics,
        max_prompt_tokens: results.iter().map(|r| r.prompt_tokens).max().unwrap_or(0),
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Split, TimeSeriesDataset};
    use crate::llm::ScriptedBackend;

    fn toy() -> DatasetPair {
        let rows = |n: usize| {
            (0..n)
                .map(|i| {
                    let c = i % 3 + 1;
                    let v: Vec<f64> = (0..8).map(|t| c as f64 * t as f64 * 0.1 + (i as f64) * 0.01).collect();
                    (c.to_string(), v)
                })
                .collect::<Vec<_>>()
        };
        DatasetPair {
            train: TimeSeriesDataset::from_rows("Toy", Split::Train, rows(9)).unwrap(),
            test: TimeSeriesDataset::from_rows("Toy", Split::Test, rows(6)).unwrap(),
        }
    }

    fn echo_backend() -> Arc<ScriptedBackend> {
        Arc::new(ScriptedBackend::new(|req, ctx| {
            if ctx.round != Round::Three && ctx.round != Round::Vanilla {
                return Ok("Understood.".into());
            }
            let last = &req.messages.last().unwrap().content;
            let k = last
                .split("Model Result: Category ")
                .nth(1)
                .and_then(|s| s.split(',').next())
                .unwrap_or("1");
            Ok(format!("True Label: Category {k}"))
        }))
    }

    #[test]
    fn prefix_shapes() {
        let data = toy();
        let backend = echo_backend();
        let client = LlmClient::new(backend, "m");
        let store = TranscriptStore::in_memory();
        let plugin = build_plugin(&PluginKind::Centroid, &data).unwrap();
        let ctx = RunContext {
            data: &data,
            plugin: plugin.clone(),
            client: &client,
            store: &store,
        };
        let scored = prescore(plugin.as_ref(), &data).unwrap();
        let mut cfg = RunConfig::new("r", "Toy", "m");
        cfg.icl_success = 1;
        cfg.icl_fail = 0;
        let s = build_session(&cfg, &ctx, &scored).unwrap();
        assert_eq!(s.conversation_prefix.len(), 4);
        let mut cfg2 = cfg.clone();
        cfg2.run_id = "r2".into();
        cfg2.ablation = ArmAblation::NoPlugin;
        let s = build_session(&cfg2, &ctx, &scored).unwrap();
        assert_eq!(s.conversation_prefix.len(), 2);
        let mut cfg3 = cfg.clone();
        cfg3.run_id = "r3".into();
        cfg3.ablation = ArmAblation::Vanilla;
        let s = build_session(&cfg3, &ctx, &scored).unwrap();
        assert!(s.conversation_prefix.is_empty());
    }

    #[test]
    fn echo_run_never_overrides() {
        let data = toy();
        let client = LlmClient::new(echo_backend(), "m");
        let store = TranscriptStore::in_memory();
        let plugin = build_plugin(&PluginKind::Centroid, &data).unwrap();
        let ctx = RunContext {
            data: &data,
            plugin,
            client: &client,
            store: &store,
        };
        let mut cfg = RunConfig::new("r", "Toy", "m");
        cfg.icl_success = 1;
        cfg.icl_fail = 0;
        let report = run(&cfg, &ctx).unwrap();
        assert_eq!(report.results.len(), 6);
        assert!(report.results.iter().all(|r| r.overridden == Some(false)));
        assert_eq!(report.metrics.accuracy, report.metrics.plugin_accuracy);
        assert_eq!(store.len(), 2 + 6);
    }

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig::new("r", "Toy", "m");
        cfg.icl_success = 3;
        assert!(cfg.validate().is_err());
        cfg.icl_success = 1;
        cfg.shots_round1 = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn concurrency_not_echoed() {
        let cfg = RunConfig::new("r", "Toy", "m");
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(!json.contains("concurrency"));
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.concurrency_limit, 4);
    }
}
