//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reasontsc_core::dataset::load_archive;
use reasontsc_core::experiment::{golden_prompts, run_manifest_with, ExperimentManifest, RunOptions};
use reasontsc_core::llm::ScriptedBackend;
use reasontsc_core::metrics::{accuracy, correction_stats, improvement_ratio, override_stats};
use reasontsc_core::parser::parse_decision;
use reasontsc_core::plugin::train_nearest_centroid;
use reasontsc_core::prompts::{scan_placeholders, Round};
use reasontsc_core::synthgen::{make_mc_set, oracle_agent, trend_class_dataset, Position, SynthKind, SyntheticSpec};
use reasontsc_core::{ChatBackend, PluginModel, RunConfig, TranscriptStore};

use common::{
    correcting_backend, echo_backend, fixture_dir, golden_dir, random_results, recount, run_with, toy_pair,
    transcript, truth_map, write_archive,
};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn prompt_goldens() -> Outcome {
    let start = Instant::now();
    let data = load_archive(fixture_dir(), "Toy").map_err(|e| e.to_string())?;
    let rendered = golden_prompts(&data).map_err(|e| e.to_string())?;
    for (name, text) in &rendered {
        let want = fs::read(golden_dir().join(name)).map_err(|e| format!("{name}: {e}"))?;
        if text.as_bytes() != want.as_slice() {
            return Err(format!("{name} differs from its golden"));
        }
        scan_placeholders(text).map_err(|e| format!("{name}: {e}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 1.0, format!("{} prompts byte-identical, {secs:.3} s", rendered.len()))
}

fn parser_fixtures() -> Outcome {
    let cases = [("deepseek", 7, 6, 6, false), ("llama", 7, 6, 3, true), ("gpt", 3, 1, 1, false)];
    let mut got = Vec::new();
    for (name, c, fin, pre, adopted) in cases {
        let d = parse_decision(&transcript(name), c);
        got.push(format!("{name}={:?}/{:?}", d.final_label, d.preliminary_label));
        if d.final_label != Some(fin) || d.preliminary_label != Some(pre) || d.adopted_alternative != Some(adopted) {
            return Err(format!("{name}: {d:?}"));
        }
    }
    Ok(got.join(", "))
}

fn metrics_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..1000 {
        let rs = random_results(&mut rng);
        let o = recount(&rs);
        let acc = accuracy(&rs).map_err(|e| e.to_string())?;
        let (rate, oacc) = override_stats(&rs);
        let want_rate = if o.parsed == 0 { 0.0 } else { o.overrides as f64 / o.parsed as f64 };
        let want_oacc = (o.overrides > 0).then(|| o.overrides_correct as f64 / o.overrides as f64);
        if acc != o.correct as f64 / o.total as f64
            || rate != want_rate
            || oacc != want_oacc
            || correction_stats(&rs) != (o.adoptions, o.corrections)
        {
            return Err(format!("list {i} disagrees with the recount"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 5.0, format!("1000 lists exact, {secs:.3} s"))
}

/// (vanilla, method, printed improvement) for every Table 1 column and model.
const TABLE1: [(f64, f64, f64); 24] = [
    (33.81, 63.31, 87.25),
    (23.38, 52.60, 124.98),
    (41.56, 61.04, 46.87),
    (36.84, 58.55, 58.93),
    (9.87, 77.63, 686.52),
    (42.34, 77.33, 82.64),
    (45.14, 68.00, 50.64),
    (15.58, 31.17, 100.06),
    (33.10, 63.31, 91.27),
    (41.24, 53.95, 30.82),
    (31.17, 61.04, 95.83),
    (46.71, 61.18, 30.98),
    (13.16, 77.63, 489.89),
    (59.00, 84.00, 42.37),
    (42.36, 66.86, 57.84),
    (31.81, 36.36, 14.30),
    (52.52, 65.71, 25.11),
    (47.08, 57.42, 21.96),
    (33.11, 63.64, 92.21),
    (51.98, 67.11, 29.11),
    (37.17, 80.26, 115.93),
    (76.66, 82.67, 7.84),
    (54.86, 69.14, 26.03),
    (28.57, 38.96, 36.37),
];

fn improvement_cells() -> Outcome {
    let mut hits = 0;
    let mut misses = Vec::new();
    for (base, method, printed) in TABLE1 {
        let r = improvement_ratio(method, base).map_err(|e| e.to_string())?;
        if (r - printed).abs() <= 0.01 + 1e-9 {
            hits += 1;
        } else {
            misses.push(format!("{base}->{method}: {r:.4} vs {printed}"));
        }
    }
    let mut detail = format!("{hits}/{} cells within 0.01 pp", TABLE1.len());
    if !misses.is_empty() {
        detail.push_str(&format!("; off: {}", misses.join(", ")));
    }
    check(hits >= 10, detail)
}

fn echo_invariant() -> Outcome {
    let start = Instant::now();
    let data = toy_pair(4, 20, 24, 2.0, 11);
    let store = TranscriptStore::in_memory();
    let r = run_with(&data, &RunConfig::new("echo", "Toy", "m"), echo_backend(), &store).map_err(|e| e.to_string())?;
    let m = &r.metrics;
    let secs = start.elapsed().as_secs_f64();
    check(
        m.n_total == 60 && m.accuracy == m.plugin_accuracy && m.override_rate == 0.0 && secs < 2.0,
        format!(
            "n={} accuracy={:.4} plug-in={:.4} override_rate={} {secs:.3} s",
            m.n_total, m.accuracy, m.plugin_accuracy, m.override_rate
        ),
    )
}

fn correction_invariant() -> Outcome {
    let data = toy_pair(4, 20, 24, 2.0, 11);
    let store = TranscriptStore::in_memory();
    let r = run_with(&data, &RunConfig::new("fix", "Toy", "m"), correcting_backend(truth_map(&data)), &store)
        .map_err(|e| e.to_string())?;
    let errors: BTreeSet<usize> = r
        .results
        .iter()
        .filter(|s| s.plugin_pred != s.ground_truth)
        .map(|s| s.source_index)
        .collect();
    let overrides: BTreeSet<usize> = r
        .results
        .iter()
        .filter(|s| s.overridden == Some(true))
        .map(|s| s.source_index)
        .collect();
    check(
        !errors.is_empty()
            && overrides == errors
            && r.metrics.override_accuracy == Some(1.0)
            && r.metrics.accuracy == 1.0,
        format!(
            "{} plug-in errors, {} overrides, override_accuracy={:?}, accuracy={}",
            errors.len(),
            overrides.len(),
            r.metrics.override_accuracy,
            r.metrics.accuracy
        ),
    )
}

fn synthetic_oracle() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in [SynthKind::Trend, SynthKind::Frequency, SynthKind::Amplitude, SynthKind::Mixed] {
        let set = make_mc_set(&SyntheticSpec::new(kind, 0)).map_err(|e| e.to_string())?;
        let correct = set.iter().filter(|m| oracle_agent(m) == m.correct_choice()).count();
        let acc = correct as f64 / set.len() as f64;
        let need = if kind == SynthKind::Mixed { 0.995 } else { 1.0 };
        ok &= set.len() == 200 && acc >= need;
        parts.push(format!("{kind:?} {:.2}%", acc * 100.0));
    }
    let secs = start.elapsed().as_secs_f64();
    check(ok && secs < 10.0, format!("{}, {secs:.3} s", parts.join(", ")))
}

fn mc_positions() -> Outcome {
    let spec = SyntheticSpec::new(SynthKind::Trend, 0);
    let a = make_mc_set(&spec).map_err(|e| e.to_string())?;
    let b = make_mc_set(&spec).map_err(|e| e.to_string())?;
    let at_a = a.iter().filter(|m| m.patterned_position == Position::A).count();
    let same = a.iter().zip(&b).all(|(x, y)| x.patterned_position == y.patterned_position);
    check(
        (70..=130).contains(&at_a) && same && a.len() == 200,
        format!("{at_a}/200 at A, reproducible={same}"),
    )
}

/// Responses vary with the sample so the replayed reports carry overrides,
/// adoptions and failures.
fn varied_backend() -> Arc<dyn ChatBackend> {
    Arc::new(ScriptedBackend::new(|_, ctx| {
        if !matches!(ctx.round, Round::Three | Round::Vanilla) {
            return Ok("Noted.".into());
        }
        let i: usize = ctx.sample_key.trim_start_matches("test:").parse().unwrap_or(0);
        if i % 11 == 5 {
            return Ok("I cannot decide.".into());
        }
        let pre = i % 3 + 1;
        let fin = (i * 7) % 3 + 1;
        Ok(format!(
            "- Make a Preliminary Prediction: Category {pre}\n- Review Alternative Classifications: maybe\n- True Label: Category {fin}"
        ))
    }))
}

fn replay_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    write_archive(&root.join("data"), "Toy", &toy_pair(4, 20, 24, 2.0, 11));
    let arms = r#"
[[arms]]
label = "reason"
kind = "reason_tsc"
dataset = "Toy"

[[arms]]
label = "vanilla"
kind = "vanilla_cot"
dataset = "Toy"

[[arms]]
label = "no-plugin"
kind = "ablation_no_plugin"
dataset = "Toy"
"#;
    let record = format!("output_dir = \"runs\"\nseed = 5\ndata_root = \"data\"\n\n[backend]\nkind = \"mock\"\n{arms}");
    let m = ExperimentManifest::from_toml(&record, root).map_err(|e| e.to_string())?;
    let opts = RunOptions {
        run_name: Some("record".into()),
        ..Default::default()
    };
    let rec = run_manifest_with(&m, &opts, &|_| Ok(varied_backend())).map_err(|e| e.to_string())?;
    let transcript = rec.run_dir.join("transcript.jsonl");

    let replay = format!(
        "output_dir = \"runs\"\nseed = 5\ndata_root = \"data\"\n\n[backend]\nkind = \"replay\"\ntranscript = {:?}\nstrict = true\n{arms}",
        transcript.display().to_string()
    );
    let m = ExperimentManifest::from_toml(&replay, root).map_err(|e| e.to_string())?;
    let mut dirs = Vec::new();
    for limit in [1, 8] {
        let opts = RunOptions {
            run_name: Some(format!("replay-{limit}")),
            concurrency_limit: Some(limit),
            ..Default::default()
        };
        dirs.push(reasontsc_core::experiment::run_manifest(&m, &opts).map_err(|e| e.to_string())?.run_dir);
    }
    let mut compared = 0;
    for label in ["reason", "vanilla", "no-plugin"] {
        let name = format!("{label}.report.json");
        let recorded = fs::read(rec.run_dir.join(&name)).map_err(|e| e.to_string())?;
        let one = fs::read(dirs[0].join(&name)).map_err(|e| e.to_string())?;
        let eight = fs::read(dirs[1].join(&name)).map_err(|e| e.to_string())?;
        if one != eight {
            return Err(format!("{name} differs between concurrency 1 and 8"));
        }
        if one != recorded {
            return Err(format!("{name} differs from the recorded run"));
        }
        compared += 1;
    }
    Ok(format!("{compared} reports byte-identical at concurrency 1 and 8"))
}

fn centroid_sanity() -> Outcome {
    let data = trend_class_dataset(20, 100, 100, 0).map_err(|e| e.to_string())?;
    let model = train_nearest_centroid(&data.train).map_err(|e| e.to_string())?;
    let c = data.train.num_classes;
    let w = data.train.series_length;
    let mut centroids = vec![vec![0.0; w]; c];
    let mut counts = vec![0.0; c];
    for s in &data.train.samples {
        counts[s.class_id - 1] += 1.0;
        for (a, v) in centroids[s.class_id - 1].iter_mut().zip(&s.values) {
            *a += v;
        }
    }
    for (cent, n) in centroids.iter_mut().zip(&counts) {
        cent.iter_mut().for_each(|v| *v /= n);
    }
    let mut correct = 0;
    for s in &data.test.samples {
        let pred = model.predict(s).map_err(|e| e.to_string())?.predicted_class;
        let brute = (0..c)
            .map(|k| (k + 1, centroids[k].iter().zip(&s.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        if pred != brute {
            return Err(format!("sample {} predicted {pred}, brute force {brute}", s.source_index));
        }
        correct += usize::from(pred == s.class_id);
    }
    let acc = correct as f64 / data.test.len() as f64;
    check(acc >= 0.95, format!("accuracy {:.2}% on {} samples, oracle agrees", acc * 100.0, data.test.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("prompt goldens", prompt_goldens),
        ("parser fixtures", parser_fixtures),
        ("metrics oracle", metrics_oracle),
        ("improvement ratio", improvement_cells),
        ("echo invariant", echo_invariant),
        ("correction invariant", correction_invariant),
        ("synthetic oracle", synthetic_oracle),
        ("mc positions", mc_positions),
        ("replay determinism", replay_determinism),
        ("nearest-centroid sanity", centroid_sanity),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match std::panic::catch_unwind(f) {
            Ok(Ok(detail)) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Ok(Err(detail)) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail})", i + 1);
            }
            Err(_) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL (panicked)", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
