//! Three-round LLM reasoning for time series classification, fusing a
//! plug-in classifier's predictions and logits into the conversation.

pub mod dataset;
pub mod experiment;
pub mod llm;
pub mod metrics;
pub mod orchestrator;
pub mod parser;
pub mod plugin;
pub mod prompts;
pub mod synthgen;

pub use dataset::{DatasetPair, Split, TimeSeriesDataset, TimeSeriesSample};
pub use llm::{ChatBackend, LlmClient, TranscriptStore};
pub use metrics::MetricsBlock;
pub use orchestrator::{RunConfig, RunReport, SampleResult};
pub use parser::{ParseStatus, ParsedDecision, Pattern};
pub use plugin::{PluginModel, PluginOutput, PluginProfile};
pub use prompts::{McKind, Round};
