use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_reasontsc"));
    c.env("RUST_LOG", "error");
    c
}

fn core_tests() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_manifest(dir: &Path, backend: &str, dataset: &str) -> PathBuf {
    let text = format!(
        r#"output_dir = "runs"
seed = 1
data_root = {:?}

[backend]
{backend}

[[arms]]
label = "reason"
kind = "reason_tsc"
dataset = "{dataset}"
icl_success = 1
icl_fail = 0

[[arms]]
label = "vanilla"
kind = "vanilla_cot"
dataset = "{dataset}"
"#,
        core_tests().join("fixtures").display().to_string()
    );
    let path = dir.join("manifest.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_synth_writes_tsv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["gen-synth", "--kind", "frequency", "--count", "20", "--length", "50", "--seed", "4", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    let tsv = fs::read_to_string(dir.path().join("frequency.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 40);
    assert!(tsv.lines().all(|l| l.split('\t').count() == 51));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("frequency.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["instances"].as_array().unwrap().len(), 20);
    assert_eq!(manifest["spec"]["seed"], 4);
}

#[test]
fn parse_reports_decision() {
    let file = core_tests().join("fixtures/transcripts/llama.txt");
    let o = bin().args(["parse", "--classes", "7"]).arg(&file).output().unwrap();
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["final_label"], 6);
    assert_eq!(v["preliminary_label"], 3);
    assert_eq!(v["adopted_alternative"], true);

    let o = bin().arg("parse").arg(&file).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn parse_mc_answer() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("mc.txt");
    fs::write(&f, "- Option: Case B\n- Explanation: periodic").unwrap();
    let o = bin().args(["parse", "--mc"]).arg(&f).output().unwrap();
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "B");
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), "kind = \"mock\"", "Toy");
    let o = bin().arg("run").arg(&m).args(["--name", "one", "--concurrency", "2"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = PathBuf::from(stdout(&o).trim());
    assert!(run_dir.join("reason.report.json").is_file());

    let out = dir.path().join("cmp");
    let o = bin().arg("report").arg(&run_dir).arg("--out").arg(&out).output().unwrap();
    assert!(o.status.success());
    let md = fs::read_to_string(out.join("comparison.md")).unwrap();
    assert!(md.contains("## Toy"));
    assert!(md.contains("| vanilla |"));
    assert!(out.join("metrics.csv").is_file());
}

#[test]
fn dry_run_renders_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), "kind = \"mock\"", "Toy");
    let o = bin().arg("run").arg(&m).args(["--dry-run", "--name", "dry"]).output().unwrap();
    assert!(o.status.success());
    let run_dir = PathBuf::from(stdout(&o).trim());
    assert!(run_dir.join("prompts/reason/round1.txt").is_file());
    assert!(!run_dir.join("transcript.jsonl").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), "kind = \"mock\"", "Missing");
    let o = bin().arg("run").arg(&m).output().unwrap();
    assert_eq!(o.status.code(), Some(1));

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let backend = format!("kind = \"replay\"\ntranscript = {:?}", empty.display().to_string());
    let m = write_manifest(dir.path(), &backend, "Toy");
    let o = bin().arg("run").arg(&m).output().unwrap();
    assert_eq!(o.status.code(), Some(2));

    let o = bin().arg("run").arg(dir.path().join("nope.toml")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn export_goldens_matches_checked_in_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["export-goldens", "--dataset", "Toy", "--data-root"])
        .arg(core_tests().join("fixtures"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    for entry in fs::read_dir(core_tests().join("goldens")).unwrap() {
        let p = entry.unwrap().path();
        let fresh = fs::read(dir.path().join(p.file_name().unwrap())).unwrap();
        assert_eq!(fresh, fs::read(&p).unwrap(), "{}", p.display());
    }
}

#[test]
fn probe_patterns_with_mock() {
    let o = bin()
        .args(["probe-patterns", "--min-probes", "5", "--data-root"])
        .arg(core_tests().join("fixtures"))
        .arg("Toy")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(stdout(&o).contains("Toy: 7 probes"), "{}", stdout(&o));

    let o = bin()
        .args(["probe-patterns", "--data-root"])
        .arg(core_tests().join("fixtures"))
        .arg("Toy")
        .output()
        .unwrap();
    assert!(stdout(&o).contains("skipped"));
}
