use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn vlprobe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlprobe"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn vlprobe")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Exit code plus the parsed JSON error line that must end stderr.
fn failure(out: &Output) -> (i32, Value) {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().unwrap_or_default();
    let v: Value = serde_json::from_str(last).unwrap_or_else(|e| panic!("{e}: {stderr}"));
    (out.status.code().unwrap(), v)
}

/// A private copy of the smoke dataset and checkpoint.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let smoke = fixtures().join("smoke");
    fs::create_dir_all(dir.path().join("smoke/rois")).unwrap();
    fs::copy(smoke.join("corpus.tsv"), dir.path().join("smoke/corpus.tsv")).unwrap();
    for e in fs::read_dir(smoke.join("rois")).unwrap() {
        let p = e.unwrap().path();
        fs::copy(&p, dir.path().join("smoke/rois").join(p.file_name().unwrap())).unwrap();
    }
    fs::copy(fixtures().join("smoke.ckpt"), dir.path().join("smoke.ckpt")).unwrap();
    dir
}

fn probe(dir: &Path, ckpt: &str, out: &str) -> Value {
    let backend = format!("toy:{ckpt}");
    ok(&vlprobe(
        &["probe", "--data", "smoke/corpus.tsv", "--backend", &backend, "--out", out],
        dir,
    ));
    serde_json::from_str(&fs::read_to_string(dir.join(out).join("report.json")).unwrap()).unwrap()
}

#[test]
fn probe_on_smoke_fixture() {
    let dir = workspace();
    let report = probe(dir.path(), "smoke.ckpt", "p");
    let results = report["guided"]["results"].as_array().unwrap();
    assert_eq!(results.len(), 4);
    for r in results {
        assert_eq!(r["n_evaluated"], 10, "{r}");
        assert_eq!(r["n_skipped"], 0);
    }
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("p/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "probe");
    assert_eq!(m["config"]["k"], 5);
    let roles: Vec<&str> = m["inputs"].as_array().unwrap().iter().map(|i| i["role"].as_str().unwrap()).collect();
    assert_eq!(roles, ["data", "rois", "checkpoint"]);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn flags_override_config_file() {
    let dir = workspace();
    fs::write(dir.path().join("c.toml"), "k = 2\nconditions = [\"guided\", \"text_only\"]\n").unwrap();
    ok(&vlprobe(
        &[
            "probe", "--data", "smoke/corpus.tsv", "--backend", "toy:smoke.ckpt", "--config", "c.toml", "--k", "3",
            "--out", "p",
        ],
        dir.path(),
    ));
    let r: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("p/report.json")).unwrap()).unwrap();
    assert_eq!(r["config"]["k"], 3);
    assert_eq!(r["guided"]["results"].as_array().unwrap().len(), 2);
}

#[test]
fn report_has_one_row_per_condition_per_backend() {
    let dir = workspace();
    fs::copy(dir.path().join("smoke.ckpt"), dir.path().join("other.ckpt")).unwrap();
    probe(dir.path(), "smoke.ckpt", "a");
    probe(dir.path(), "other.ckpt", "b");
    ok(&vlprobe(&["report", "a/report.json", "b/report.json", "--out", "r"], dir.path()));
    let table = fs::read_to_string(dir.path().join("r/comparison.txt")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 8, "{table}");
    for backend in ["toy:smoke", "toy:other"] {
        for cond in ["guided", "subject_ablation", "whole_image", "text_only"] {
            let n = rows
                .iter()
                .filter(|r| r.split_whitespace().next() == Some(backend) && r.split_whitespace().nth(2) == Some(cond))
                .count();
            assert_eq!(n, 1, "{backend} {cond}\n{table}");
        }
    }
}

#[test]
fn replay_reproduces_bytes_and_detects_changed_inputs() {
    let dir = workspace();
    probe(dir.path(), "smoke.ckpt", "p");
    let out = vlprobe(&["replay", "p/manifest.json", "--workers", "2"], dir.path());
    ok(&out);
    for f in ["report.json", "report.txt"] {
        assert_eq!(
            fs::read(dir.path().join("p").join(f)).unwrap(),
            fs::read(dir.path().join("p/replay").join(f)).unwrap(),
            "{f}"
        );
    }

    let tsv = dir.path().join("smoke/corpus.tsv");
    let text = fs::read_to_string(&tsv).unwrap();
    fs::write(&tsv, text.lines().take(6).collect::<Vec<_>>().join("\n") + "\n").unwrap();
    let (code, err) = failure(&vlprobe(&["replay", "p/manifest.json", "--out", "again"], dir.path()));
    assert_eq!(code, 3);
    assert!(err["error"]["message"].as_str().unwrap().contains("changed"), "{err}");
}

#[test]
fn gen_and_train_replay_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    ok(&vlprobe(&["gen", "--samples", "64", "--negatives", "--out", "g"], dir.path()));
    let tsv = fs::read_to_string(dir.path().join("g/corpus.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 128);
    assert!(tsv.contains("\tnegative\tverb"));
    fs::write(
        dir.path().join("t.toml"),
        "d_model = 8\nn_heads = 2\nn_layers = 1\nffn_dim = 16\nmax_len = 12\nbatch = 8\n",
    )
    .unwrap();
    ok(&vlprobe(
        &["train", "--data", "g/corpus.tsv", "--config", "t.toml", "--steps", "4", "--out", "t"],
        dir.path(),
    ));
    assert_eq!(fs::read_to_string(dir.path().join("t/loss.tsv")).unwrap().lines().count(), 1 + 4);
    ok(&vlprobe(&["replay", "t/manifest.json"], dir.path()));
    ok(&vlprobe(&["replay", "g/manifest.json"], dir.path()));
    assert_eq!(
        fs::read(dir.path().join("t/model.ckpt")).unwrap(),
        fs::read(dir.path().join("t/replay/model.ckpt")).unwrap()
    );

    ok(&vlprobe(
        &["itm", "--data", "g/corpus.tsv", "--backend", "toy:t/model.ckpt", "--ablations", "none,whole", "--out", "i"],
        dir.path(),
    ));
    let r: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("i/report.json")).unwrap()).unwrap();
    let itm = r["itm"].as_array().unwrap();
    assert_eq!(itm.len(), 2);
    assert_eq!((itm[0]["n_pos"].as_u64(), itm[0]["n_neg"].as_u64()), (Some(64), Some(64)));
}

#[test]
fn explain_writes_heatmap() {
    let dir = workspace();
    let out = vlprobe(
        &[
            "explain", "--data", "smoke/corpus.tsv", "--backend", "toy:smoke.ckpt", "--sample", "syn12-000003#3",
            "--out", "e",
        ],
        dir.path(),
    );
    ok(&out);
    let ppm = fs::read(dir.path().join("e/syn12-000003_3.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n"));
    let bars = fs::read_to_string(dir.path().join("e/syn12-000003_3.tsv")).unwrap();
    assert!(bars.starts_with("[CLS]\t"));
    assert!(bars.contains("[MASK]\t"));
}

#[test]
fn exit_codes() {
    let dir = workspace();
    let p = dir.path();

    let (code, err) = failure(&vlprobe(&["probe", "--bogus"], p));
    assert_eq!((code, err["error"]["kind"].as_str()), (2, Some("usage")));

    let (code, _) = failure(&vlprobe(
        &["probe", "--data", "smoke/corpus.tsv", "--backend", "gpu:x", "--out", "o"],
        p,
    ));
    assert_eq!(code, 2);

    fs::write(p.join("bad.toml"), "nonsense_key = 1\n").unwrap();
    let (code, err) = failure(&vlprobe(
        &["probe", "--data", "smoke/corpus.tsv", "--backend", "toy:smoke.ckpt", "--config", "bad.toml", "--out", "o"],
        p,
    ));
    assert_eq!(code, 2);
    assert!(err["error"]["message"].as_str().unwrap().contains("nonsense_key"));

    let (code, err) = failure(&vlprobe(
        &["probe", "--data", "missing.tsv", "--backend", "toy:smoke.ckpt", "--out", "o"],
        p,
    ));
    assert_eq!((code, err["error"]["kind"].as_str()), (3, Some("data")));

    fs::write(p.join("broken.ckpt"), b"VLPROBE\0garbage").unwrap();
    let (code, _) = failure(&vlprobe(
        &["probe", "--data", "smoke/corpus.tsv", "--backend", "toy:broken.ckpt", "--out", "o"],
        p,
    ));
    assert_eq!(code, 3);

    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = format!("remote:127.0.0.1:{port}");
    let (code, err) = failure(&vlprobe(
        &["probe", "--data", "smoke/corpus.tsv", "--backend", &backend, "--out", "o"],
        p,
    ));
    assert_eq!((code, err["error"]["kind"].as_str()), (4, Some("backend")));
}
