use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use reasontsc_core::dataset::load_archive;
use reasontsc_core::experiment::{
    self, compare_reports, export_goldens, load_reports, probe_patterns, summarize, ArmCtx, ExitStatus,
    ExperimentError, ExperimentManifest, MockBackend, RunOptions,
};
use reasontsc_core::llm::{ChatBackend, HttpBackend, HttpConfig, LlmClient, ReplayBackend, TranscriptStore};
use reasontsc_core::metrics::FacetBuckets;
use reasontsc_core::parser::{parse_decision, parse_mc_choice, parse_pattern_flags, Pattern};
use reasontsc_core::synthgen::{make_mc_set, write_mc_files, SynthKind, SyntheticSpec};

#[derive(Parser)]
#[command(name = "reasontsc", version, about = "Multi-turn LLM reasoning for time series classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every arm of an experiment manifest.
    Run {
        manifest: PathBuf,
        /// Write the prompts that would be sent and make no backend calls.
        #[arg(long)]
        dry_run: bool,
        /// Continue an existing run directory, reusing stored responses.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        concurrency: Option<usize>,
        /// Run directory name (default: timestamp).
        #[arg(long)]
        name: Option<String>,
    },
    /// Compare run reports (files or run directories).
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Allow several datasets and add class-count, length and token facets.
        #[arg(long)]
        facets: bool,
        /// Directory for comparison.md, metrics.csv and plot_data.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic multiple-choice set as TSV plus a manifest.
    GenSynth {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 100)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpretation probe over archive datasets.
    ProbePatterns {
        #[arg(long)]
        data_root: PathBuf,
        #[arg(required = true)]
        datasets: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Chat-completions endpoint; the mock backend is used when absent.
        #[arg(long)]
        endpoint: Option<String>,
        /// Replay responses from a transcript file instead.
        #[arg(long, conflicts_with = "endpoint")]
        replay: Option<PathBuf>,
        #[arg(long, default_value = "mock")]
        model: String,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        #[arg(long, default_value_t = 100)]
        max_probes: usize,
        #[arg(long, default_value_t = 30)]
        min_probes: usize,
        /// Transcript file to append to.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Run the extraction ladder on a saved response.
    Parse {
        file: PathBuf,
        #[arg(long, default_value_t = 0)]
        classes: usize,
        /// Parse pattern-probe flags instead of a decision.
        #[arg(long, conflicts_with = "mc")]
        flags: bool,
        /// Parse a multiple-choice answer instead of a decision.
        #[arg(long)]
        mc: bool,
    },
    /// Render every prompt kind for a dataset into golden files.
    ExportGoldens {
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Trend,
    Frequency,
    Amplitude,
    Mixed,
}

impl From<Kind> for SynthKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Trend => SynthKind::Trend,
            Kind::Frequency => SynthKind::Frequency,
            Kind::Amplitude => SynthKind::Amplitude,
            Kind::Mixed => SynthKind::Mixed,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(status) => ExitCode::from(status.code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            let status = e
                .downcast_ref::<ExperimentError>()
                .map_or(ExitStatus::Config, ExitStatus::from);
            ExitCode::from(status.code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<ExitStatus> {
    match cmd {
        Command::Run {
            manifest,
            dry_run,
            resume,
            concurrency,
            name,
        } => {
            let m = ExperimentManifest::load(&manifest)?;
            let opts = RunOptions {
                dry_run,
                resume,
                concurrency_limit: concurrency,
                run_name: name,
            };
            let outcome = experiment::run_manifest(&m, &opts)?;
            println!("{}", outcome.run_dir.display());
            Ok(outcome.status)
        }
        Command::Report { reports, facets, out } => {
            let loaded = load_reports(&reports)?;
            let refs: Vec<_> = loaded.iter().collect();
            let bundle = if facets {
                if refs.is_empty() {
                    bail!("no reports found");
                }
                summarize(&refs, &FacetBuckets::default())
            } else {
                compare_reports(&refs)?
            };
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    std::fs::write(dir.join("comparison.md"), &bundle.markdown)?;
                    std::fs::write(dir.join("metrics.csv"), &bundle.csv)?;
                    std::fs::write(dir.join("plot_data.csv"), &bundle.plot)?;
                }
                None => print!("{}", bundle.markdown),
            }
            let failed: usize = loaded.iter().map(|r| r.metrics.n_failed).sum();
            if failed > 0 {
                eprintln!("{failed} sample(s) failed to produce a label");
            }
            Ok(ExitStatus::Success)
        }
        Command::GenSynth {
            kind,
            count,
            length,
            seed,
            out,
        } => {
            let mut spec = SyntheticSpec::new(kind.into(), seed);
            spec.count = count;
            spec.length = length;
            let set = make_mc_set(&spec)?;
            std::fs::create_dir_all(&out)?;
            let stem = format!("{:?}", spec.kind).to_lowercase();
            let tsv = out.join(format!("{stem}.tsv"));
            let manifest = out.join(format!("{stem}.manifest.json"));
            write_mc_files(&spec, &set, &tsv, &manifest)?;
            println!("{}\n{}", tsv.display(), manifest.display());
            Ok(ExitStatus::Success)
        }
        Command::ProbePatterns {
            data_root,
            datasets,
            seed,
            endpoint,
            replay,
            model,
            concurrency,
            max_probes,
            min_probes,
            transcript,
        } => {
            let backend: Arc<dyn ChatBackend> = match (endpoint, &replay) {
                (Some(url), _) => Arc::new(HttpBackend::new(HttpConfig::new(url))?),
                (None, Some(path)) => {
                    let store = TranscriptStore::open(path)?;
                    Arc::new(ReplayBackend::from_store(&store, None, false)?)
                }
                (None, None) => Arc::new(MockBackend::default()),
            };
            let client = LlmClient::new(backend, model);
            let store = match transcript {
                Some(p) => TranscriptStore::open(p)?,
                None => TranscriptStore::in_memory(),
            };
            let mut status = ExitStatus::Success;
            for name in &datasets {
                let data = load_archive(&data_root, name).with_context(|| format!("loading {name}"))?;
                let label = format!("probe-{name}");
                let ctx = ArmCtx {
                    label: &label,
                    dataset: name,
                    client: &client,
                    store: &store,
                    resume: false,
                    limit: concurrency,
                };
                let report = probe_patterns(&ctx, &data, seed, max_probes, min_probes)?;
                if report.failed_calls > 0 {
                    status = ExitStatus::Partial;
                }
                match &report.skipped {
                    Some(why) => println!("{name}: skipped ({why})"),
                    None => {
                        let counts: Vec<String> = Pattern::ALL
                            .iter()
                            .map(|p| format!("{}={}", p.name(), report.counts[p]))
                            .collect();
                        let top: Vec<String> = report
                            .top3
                            .iter()
                            .map(|t| format!("{} ({:.1}%)", t.pattern.name(), t.weight * 100.0))
                            .collect();
                        println!("{name}: {} probes; {}", report.probes, counts.join(", "));
                        println!("{name}: top-3 {}", top.join(", "));
                    }
                }
            }
            Ok(status)
        }
        Command::Parse {
            file,
            classes,
            flags,
            mc,
        } => {
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            if flags {
                println!("{}", serde_json::to_string_pretty(&parse_pattern_flags(&text))?);
            } else if mc {
                println!("{:?}", parse_mc_choice(&text));
            } else {
                if classes == 0 {
                    bail!("--classes is required to parse a decision");
                }
                println!("{}", serde_json::to_string_pretty(&parse_decision(&text, classes))?);
            }
            Ok(ExitStatus::Success)
        }
        Command::ExportGoldens { data_root, dataset, out } => {
            let data = load_archive(&data_root, &dataset)?;
            for p in export_goldens(&data, &out)? {
                println!("{}", p.display());
            }
            Ok(ExitStatus::Success)
        }
    }
}
