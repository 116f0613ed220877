use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cqr"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cqr(args);
    assert!(
        out.status.success(),
        "cqr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Data {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Data {
    fn path(&self, name: &str) -> String {
        self.root.join(name).to_string_lossy().into_owned()
    }
}

fn data() -> Data {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let mut passages = String::new();
    let topics = [
        "whale harpoon ship",
        "tea kettle leaf",
        "comet orbit tail",
        "violin bow string",
    ];
    for (t, words) in topics.iter().enumerate() {
        for j in 0..5 {
            passages.push_str(&format!(
                "{{\"id\":\"p{t}{j}\",\"text\":\"{words} note{t}x{j} about the {words}\"}}\n"
            ));
        }
    }
    fs::write(root.join("passages.jsonl"), passages).unwrap();
    let mut convs = String::new();
    for (s, words) in topics.iter().enumerate() {
        for turn in 1..=2 {
            convs.push_str(&format!(
                "{{\"session_id\":\"s{s}\",\"turn\":{turn},\"query\":\"tell me about {words}\",\"response\":\"the {words} story {turn}\",\"gold_ref_ids\":[\"p{s}{turn}\"]}}\n"
            ));
        }
    }
    fs::write(root.join("conversations.jsonl"), convs).unwrap();
    Data { _dir: dir, root }
}

fn lines(path: &str) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn chunk_splits_documents() {
    let d = data();
    let text: String = "x".repeat(1234);
    fs::write(
        d.path("docs.jsonl"),
        format!("{{\"id\":\"doc\",\"text\":\"{text}\"}}\n"),
    )
    .unwrap();
    let out = ok(&[
        "chunk",
        "--input",
        &d.path("docs.jsonl"),
        "--output",
        &d.path("chunks.jsonl"),
    ]);
    assert!(out.contains("1 documents -> 3 passages"), "{out}");
    assert_eq!(lines(&d.path("chunks.jsonl")), 3);
}

#[test]
fn stage_commands_chain() {
    let d = data();
    let (passages, convs) = (d.path("passages.jsonl"), d.path("conversations.jsonl"));
    let (index, cands, pseudo, feedback, export) = (
        d.path("index.json"),
        d.path("cands.jsonl"),
        d.path("pseudo.jsonl"),
        d.path("feedback.jsonl"),
        d.path("export"),
    );
    let data_args = [
        "--passages",
        passages.as_str(),
        "--conversations",
        convs.as_str(),
    ];
    ok(&["index", "--passages", &passages, "--output", &index]);

    let mut args = vec!["candidates"];
    args.extend(data_args);
    args.extend(["--output", &cands, "--n-rewrite", "4", "--n-expand", "1"]);
    ok(&args);
    assert_eq!(lines(&cands), 8);

    let mut args = vec!["pseudo"];
    args.extend(data_args);
    args.extend(["--index", &index, "--output", &pseudo]);
    ok(&args);
    assert_eq!(lines(&pseudo), 8);

    let mut args = vec!["prefs"];
    args.extend(data_args);
    args.extend([
        "--candidates",
        &cands,
        "--pseudo",
        &pseudo,
        "--output",
        &feedback,
    ]);
    ok(&args);
    assert!(lines(&feedback) > 0);

    let out = ok(&[
        "export",
        "--conversations",
        &convs,
        "--feedback",
        &feedback,
        "--out-dir",
        &export,
    ]);
    assert!(out.contains("SFT records"), "{out}");
    assert!(Path::new(&d.path("export/sft.jsonl")).exists());
    assert!(Path::new(&d.path("export/export_manifest.json")).exists());
}

#[test]
fn run_resume_and_evaluate() {
    let d = data();
    fs::write(
        d.path("cfg.toml"),
        "n_iters = 2\nseed = 5\n[candidates]\nn_rewrite = 4\nn_expand = 1\n",
    )
    .unwrap();
    let common = [
        "--config",
        &d.path("cfg.toml"),
        "--passages",
        &d.path("passages.jsonl"),
        "--conversations",
        &d.path("conversations.jsonl"),
        "--out-dir",
        &d.path("run"),
    ];
    let mut args = vec!["run"];
    args.extend(common);
    let out = ok(&args);
    assert!(
        out.contains("iteration 0") && out.contains("iteration 1"),
        "{out}"
    );
    assert!(Path::new(&d.path("run/iter_1/manifest.json")).exists());

    let mut args = vec!["resume"];
    args.extend(common);
    assert!(ok(&args).contains("nothing to do"));

    // A flag that changes the config no longer matches the stored run.
    let mut args = vec!["resume"];
    args.extend(common);
    args.extend(["--seed", "6"]);
    let out = cqr(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.json"));

    let out = ok(&[
        "eval-pseudo",
        "--conversations",
        &d.path("conversations.jsonl"),
        "--run-dir",
        &d.path("run"),
        "--csv",
        &d.path("trend.csv"),
    ]);
    assert!(out.contains("iter_0") && out.contains("iter_1"), "{out}");
    assert_eq!(lines(&d.path("trend.csv")), 4);

    fs::write(
        d.path("reform.jsonl"),
        "{\"session_id\":\"s0\",\"turn\":1,\"text\":\"note0x1\"}\n{\"session_id\":\"s1\",\"turn\":1,\"text\":\"nothing\"}\n",
    )
    .unwrap();
    let out = ok(&[
        "eval-retrieval",
        "--passages",
        &d.path("passages.jsonl"),
        "--conversations",
        &d.path("conversations.jsonl"),
        "--reformulations",
        &d.path("reform.jsonl"),
        "--output",
        &d.path("report.jsonl"),
    ]);
    assert!(out.contains("retrieval,2,6,0.500000"), "{out}");
}

#[test]
fn external_trainer_command_names_models() {
    let d = data();
    let out = ok(&[
        "run",
        "--n-iters",
        "2",
        "--passages",
        &d.path("passages.jsonl"),
        "--conversations",
        &d.path("conversations.jsonl"),
        "--out-dir",
        &d.path("run"),
        "--trainer-cmd",
        "sh",
        "--trainer-arg=-c",
        "--trainer-arg=echo \"$1-tuned\"",
        "--trainer-arg=sh",
    ]);
    assert!(out.contains("cqr-base -> cqr-base-tuned"), "{out}");
    assert!(
        out.contains("cqr-base-tuned -> cqr-base-tuned-tuned"),
        "{out}"
    );
}

#[test]
fn simulate_bounds_writes_csv() {
    let d = data();
    let out = ok(&[
        "simulate-bounds",
        "--n",
        "500",
        "--seeds",
        "4",
        "--output",
        &d.path("sim.csv"),
    ]);
    assert!(out.contains("mean errors over 4 seeds"), "{out}");
    let csv = fs::read_to_string(d.path("sim.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("mean,")));
}

#[test]
fn invalid_configuration_is_rejected() {
    let d = data();
    let out = cqr(&[
        "simulate-bounds",
        "--beta",
        "0",
        "--output",
        &d.path("x.csv"),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta"));

    fs::write(d.path("bad.toml"), "n_iters = \"three\"\n").unwrap();
    let out = cqr(&[
        "--config",
        &d.path("bad.toml"),
        "simulate-bounds",
        "--output",
        &d.path("x.csv"),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}
