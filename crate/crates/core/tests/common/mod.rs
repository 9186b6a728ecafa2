#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use reasontsc_core::dataset::{format_value, DatasetPair, Split, TimeSeriesDataset};
use reasontsc_core::llm::ScriptedBackend;
use reasontsc_core::parser::ParseStatus;
use reasontsc_core::prompts::Round;
use reasontsc_core::SampleResult;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("goldens")
}

pub fn transcript(name: &str) -> String {
    fs::read_to_string(fixture_dir().join("transcripts").join(format!("{name}.txt"))).unwrap()
}

/// Three noisy sine classes (1, 2 and 3 cycles per window) that a
/// nearest-centroid model gets mostly, but not entirely, right.
pub fn toy_pair(train_per_class: usize, test_per_class: usize, length: usize, noise: f64, seed: u64) -> DatasetPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).unwrap();
    let mut make = |n: usize, split: Split| {
        let mut rows = Vec::new();
        for _ in 0..n {
            for c in 1..=3usize {
                let phase: f64 = rng.random_range(-0.3..0.3);
                let v: Vec<f64> = (0..length)
                    .map(|t| {
                        let x = std::f64::consts::TAU * c as f64 * t as f64 / length as f64;
                        (x + phase).sin() + normal.sample(&mut rng)
                    })
                    .collect();
                rows.push((c.to_string(), v));
            }
        }
        TimeSeriesDataset::from_rows("Toy", split, rows).unwrap()
    };
    let train = make(train_per_class, Split::Train);
    let test = make(test_per_class, Split::Test);
    DatasetPair { train, test }
}

/// Writes a pair in the archive layout `<root>/<name>/<name>_{TRAIN,TEST}.tsv`.
pub fn write_archive(root: &Path, name: &str, pair: &DatasetPair) {
    let dir = root.join(name);
    fs::create_dir_all(&dir).unwrap();
    for (ds, suffix) in [(&pair.train, "TRAIN"), (&pair.test, "TEST")] {
        let body: String = ds
            .samples
            .iter()
            .map(|s| {
                let vals: Vec<String> = s.values.iter().map(|v| format!("{v}")).collect();
                format!("{}\t{}\n", s.original_label, vals.join("\t"))
            })
            .collect();
        fs::write(dir.join(format!("{name}_{suffix}.tsv")), body).unwrap();
    }
}

/// Plug-in prediction named in a round-3 prompt.
pub fn model_result(prompt: &str) -> Option<usize> {
    prompt
        .split("Model Result: Category ")
        .nth(1)?
        .split(|c: char| !c.is_ascii_digit())
        .next()?
        .parse()
        .ok()
}

pub fn source_index(sample_key: &str) -> usize {
    sample_key.strip_prefix("test:").unwrap().parse().unwrap()
}

/// Agrees with the plug-in on every sample.
pub fn echo_backend() -> Arc<ScriptedBackend> {
    Arc::new(ScriptedBackend::new(|req, ctx| {
        if ctx.round != Round::Three {
            return Ok("Acknowledged.".into());
        }
        let k = model_result(&req.messages.last().unwrap().content).ok_or("no model result")?;
        Ok(format!(
            "- Make a Preliminary Prediction: Category {k}\n- Final Classification Decision: Category {k}\n- True Label: Category {k}"
        ))
    }))
}

/// Answers the ground truth exactly where the plug-in is wrong, otherwise
/// echoes it.
pub fn correcting_backend(truth: BTreeMap<usize, usize>) -> Arc<ScriptedBackend> {
    Arc::new(ScriptedBackend::new(move |req, ctx| {
        if ctx.round != Round::Three {
            return Ok("Acknowledged.".into());
        }
        let pred = model_result(&req.messages.last().unwrap().content).ok_or("no model result")?;
        let t = truth[&source_index(&ctx.sample_key)];
        let k = if pred != t { t } else { pred };
        Ok(format!("- Make a Preliminary Prediction: Category {pred}\n- True Label: Category {k}"))
    }))
}

/// Rounds `x` half away from zero at three decimals using exact decimal
/// arithmetic on the shortest representation.
pub fn bigint_round3(x: f64) -> String {
    use num_bigint::BigInt;
    let repr = format!("{}", x.abs());
    let (ip, fp) = repr.split_once('.').unwrap_or((repr.as_str(), ""));
    let scale = fp.len() as u32;
    let digits: BigInt = format!("{ip}{fp}").parse().unwrap();
    let result = if scale <= 3 {
        digits * BigInt::from(10u32).pow(3 - scale)
    } else {
        let div = BigInt::from(10u32).pow(scale - 3);
        let q = &digits / &div;
        let r = &digits % &div;
        if r * 2 >= div {
            q + 1
        } else {
            q
        }
    };
    let s = result.to_string();
    let s = format!("{s:0>4}");
    let (i, f) = s.split_at(s.len() - 3);
    let zero = result == BigInt::from(0);
    let sign = if x.is_sign_negative() && !zero { "-" } else { "" };
    format!("{sign}{i}.{f}")
}

pub fn check_format(x: f64) {
    assert_eq!(format_value(x), bigint_round3(x), "value {x:?}");
}

pub fn run_with(
    data: &DatasetPair,
    config: &reasontsc_core::RunConfig,
    backend: Arc<dyn reasontsc_core::ChatBackend>,
    store: &reasontsc_core::TranscriptStore,
) -> Result<reasontsc_core::RunReport, reasontsc_core::orchestrator::RunError> {
    use reasontsc_core::orchestrator::{build_plugin, run, RunContext};
    let client = reasontsc_core::LlmClient::new(backend, config.model_name.clone());
    let plugin = build_plugin(&config.plugin, data)?;
    let ctx = RunContext {
        data,
        plugin,
        client: &client,
        store,
    };
    run(config, &ctx)
}

/// Ground truth per test source index.
pub fn truth_map(data: &DatasetPair) -> BTreeMap<usize, usize> {
    data.test.samples.iter().map(|s| (s.source_index, s.class_id)).collect()
}

pub fn random_results(rng: &mut ChaCha8Rng) -> Vec<SampleResult> {
    let n = rng.random_range(1..60);
    let c = rng.random_range(2..8);
    (0..n)
        .map(|i| {
            let truth = rng.random_range(1..=c);
            let plugin = rng.random_range(1..=c);
            let fin = rng.random_bool(0.85).then(|| rng.random_range(1..=c));
            let pre = rng.random_bool(0.8).then(|| rng.random_range(1..=c));
            let status = if fin.is_some() { ParseStatus::Exact } else { ParseStatus::Failed };
            SampleResult::assemble(format!("test:{i}"), i, truth, plugin, vec![], pre, fin, status)
        })
        .collect()
}

/// Recount written as plain loops over tuples, without the library.
pub struct Recount {
    pub correct: usize,
    pub total: usize,
    pub parsed: usize,
    pub overrides: usize,
    pub overrides_correct: usize,
    pub adoptions: usize,
    pub corrections: usize,
}

pub fn recount(results: &[SampleResult]) -> Recount {
    let mut r = Recount {
        correct: 0,
        total: 0,
        parsed: 0,
        overrides: 0,
        overrides_correct: 0,
        adoptions: 0,
        corrections: 0,
    };
    for s in results {
        r.total += 1;
        match s.llm_final {
            None => {}
            Some(f) => {
                r.parsed += 1;
                if f == s.ground_truth {
                    r.correct += 1;
                }
                if f != s.plugin_pred {
                    r.overrides += 1;
                    if f == s.ground_truth {
                        r.overrides_correct += 1;
                    }
                }
                if let Some(p) = s.llm_preliminary {
                    if p != f {
                        r.adoptions += 1;
                        if f == s.ground_truth {
                            r.corrections += 1;
                        }
                    }
                }
            }
        }
    }
    r
}
