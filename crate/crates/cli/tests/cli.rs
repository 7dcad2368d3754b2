use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sieve_core::synth::{generate_world, synth_generate_images, SyntheticWorldSpec};
use sieve_core::tensor::jsonio::{read_json, read_jsonl, write_json};
use sieve_core::verification::{EntryStatus, GenerationPlan, RunReport};

fn sieve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sieve"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn spec() -> SyntheticWorldSpec {
    SyntheticWorldSpec::new(12, 32, 10, 4, 20, 5)
}

fn synth_dir(root: &Path, name: &str) -> PathBuf {
    let spec_path = root.join("spec.json");
    write_json(&spec_path, &spec()).unwrap();
    let run = root.join(name);
    let out = sieve(&[
        "synth",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    run
}

fn rd(run: &Path) -> &str {
    run.to_str().unwrap()
}

#[test]
fn select_writes_one_record_per_neuron() {
    let tmp = tempfile::tempdir().unwrap();
    let run = synth_dir(tmp.path(), "run");
    let out = sieve(&["select", "--run-dir", rd(&run)]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("select: 14 neurons"));
    let lines = fs::read_to_string(run.join("select/selection.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 14);
    assert!(run.join("select/manifest.json").exists());
    assert!(!run.join(".sieve.lock").exists());
}

#[test]
fn verify_before_hypothesize_is_a_stage_order_error() {
    let tmp = tempfile::tempdir().unwrap();
    let run = synth_dir(tmp.path(), "run");
    assert_eq!(code(&sieve(&["verify", "--run-dir", rd(&run)])), 2);
    assert_eq!(code(&sieve(&["select", "--run-dir", rd(&run)])), 0);
    let out = sieve(&["verify", "--run-dir", rd(&run)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sieve hypothesize"));
    assert!(!run.join("verify").exists());
}

#[test]
fn run_is_byte_identical_across_reruns_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth_dir(tmp.path(), "a");
    let b = synth_dir(tmp.path(), "b");
    assert_eq!(
        code(&sieve(&["run", "--run-dir", rd(&a), "--seed", "3"])),
        0
    );
    let first = fs::read(a.join("report/report.json")).unwrap();
    assert_eq!(
        code(&sieve(&["run", "--run-dir", rd(&a), "--seed", "3"])),
        0
    );
    assert_eq!(first, fs::read(a.join("report/report.json")).unwrap());
    assert_eq!(
        code(&sieve(&[
            "run",
            "--run-dir",
            rd(&b),
            "--seed",
            "3",
            "--jobs",
            "1"
        ])),
        0
    );
    assert_eq!(first, fs::read(b.join("report/report.json")).unwrap());

    let report: RunReport = read_json(&a.join("report/report.json")).unwrap();
    assert_eq!(report.summary.n_neurons, 14);
    assert!(a.join("report/summary.md").exists());
    assert!(a.join("report/recovery.json").exists());
}

#[test]
fn stages_can_run_one_by_one() {
    let tmp = tempfile::tempdir().unwrap();
    let run = synth_dir(tmp.path(), "run");
    for stage in ["select", "hypothesize", "verify", "report"] {
        let out = sieve(&[stage, "--run-dir", rd(&run)]);
        assert_eq!(
            code(&out),
            0,
            "{stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let stepwise = fs::read(run.join("report/report.json")).unwrap();
    assert_eq!(code(&sieve(&["run", "--run-dir", rd(&run)])), 0);
    assert_eq!(stepwise, fs::read(run.join("report/report.json")).unwrap());
}

#[test]
fn rerunning_a_stage_clears_later_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let run = synth_dir(tmp.path(), "run");
    assert_eq!(code(&sieve(&["run", "--run-dir", rd(&run)])), 0);
    assert_eq!(
        code(&sieve(&[
            "hypothesize",
            "--run-dir",
            rd(&run),
            "--top-k",
            "3"
        ])),
        0
    );
    assert!(!run.join("verify").exists());
    assert!(!run.join("report").exists());
    assert_eq!(code(&sieve(&["report", "--run-dir", rd(&run)])), 2);
}

#[test]
fn locked_run_dir_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let run = synth_dir(tmp.path(), "run");
    fs::write(run.join(".sieve.lock"), "1").unwrap();
    let out = sieve(&["select", "--run-dir", rd(&run)]);
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn validation_and_io_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let run = synth_dir(tmp.path(), "run");
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"beta": 10, "unknown_key": true}"#).unwrap();
    assert_eq!(
        code(&sieve(&[
            "select",
            "--run-dir",
            rd(&run),
            "--config",
            cfg.to_str().unwrap()
        ])),
        3
    );
    assert_eq!(
        code(&sieve(&["select", "--run-dir", rd(&run), "--beta=-1"])),
        3
    );

    let empty = tmp.path().join("empty");
    assert_eq!(code(&sieve(&["select", "--run-dir", rd(&empty)])), 4);

    fs::write(run.join("inputs/acts.svt1"), b"NOPE").unwrap();
    assert_eq!(code(&sieve(&["select", "--run-dir", rd(&run)])), 3);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&sieve(&["select"])), 2);
    assert_eq!(code(&sieve(&["frobnicate"])), 2);
}

#[test]
fn verification_can_be_disabled() {
    let tmp = tempfile::tempdir().unwrap();
    let run = synth_dir(tmp.path(), "run");
    assert_eq!(
        code(&sieve(&["run", "--run-dir", rd(&run), "--no-verify"])),
        0
    );
    let report: RunReport = read_json(&run.join("report/report.json")).unwrap();
    assert!(!report.summary.verification_enabled);
    assert_eq!(report.summary.n_retained, report.summary.n_hypotheses);
    assert!(!run.join("generate").exists());
}

/// Without a synthetic world the plan must be fulfilled by an external
/// generator before `verify` can run.
#[test]
fn external_generator_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let run = synth_dir(tmp.path(), "run");
    fs::remove_file(run.join("inputs/world.json")).unwrap();
    assert_eq!(code(&sieve(&["select", "--run-dir", rd(&run)])), 0);
    assert_eq!(code(&sieve(&["hypothesize", "--run-dir", rd(&run)])), 0);
    let out = sieve(&["verify", "--run-dir", rd(&run)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not been fulfilled"));

    let plan: GenerationPlan = read_json(&run.join("hypothesize/genplan.json")).unwrap();
    let world = generate_world(&spec()).unwrap();
    let (table, mut gm) = synth_generate_images(&plan, &world).unwrap();
    gm.generator = "external".into();
    gm.entries[0].status = EntryStatus::Failed;
    gm.entries[0].sample_ids.clear();
    fs::create_dir_all(run.join("generate")).unwrap();
    table.save(&run.join("generate/gen_acts.svt1")).unwrap();
    write_json(&run.join("generate/gen_manifest.json"), &gm).unwrap();

    assert_eq!(code(&sieve(&["verify", "--run-dir", rd(&run)])), 0);
    let records: Vec<serde_json::Value> =
        read_jsonl(&run.join("verify/verification.jsonl")).unwrap();
    assert_eq!(records.len(), plan.entries.len() - 1);
    assert_eq!(code(&sieve(&["report", "--run-dir", rd(&run)])), 0);
    let report = fs::read_to_string(run.join("report/report.json")).unwrap();
    assert!(report.contains("\"missing\""));

    gm.plan_digest = Some("0".repeat(64));
    write_json(&run.join("generate/gen_manifest.json"), &gm).unwrap();
    assert_eq!(code(&sieve(&["verify", "--run-dir", rd(&run)])), 3);
}

#[test]
fn agreement_metrics_in_report() {
    let tmp = tempfile::tempdir().unwrap();
    let run = synth_dir(tmp.path(), "run");
    let world = generate_world(&spec()).unwrap();
    world
        .concept_embs
        .save(&run.join("inputs/pred.svt1"))
        .unwrap();
    world
        .concept_embs
        .save(&run.join("inputs/labels.svt1"))
        .unwrap();
    let ids = world.concepts.concepts();
    let pairing: Vec<(String, String)> = ids.iter().map(|c| (c.clone(), c.clone())).collect();
    write_json(&run.join("inputs/pairing.json"), &pairing).unwrap();
    fs::write(
        run.join("config.json"),
        r#"{"paths": {"agreement": {"pairing": "inputs/pairing.json", "spaces": [{"predictions": "inputs/pred.svt1", "labels": "inputs/labels.svt1"}]}}}"#,
    )
    .unwrap();
    assert_eq!(code(&sieve(&["run", "--run-dir", rd(&run)])), 0);
    let report: RunReport = read_json(&run.join("report/report.json")).unwrap();
    assert_eq!(report.summary.agreement.len(), 1);
    assert!((report.summary.agreement[0].mean_cosine - 1.0).abs() < 1e-6);
}
