use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rrl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = rrl(args);
    assert!(
        out.status.success(),
        "rrl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &Path) {
    let cfg = dir.join("gen.cfg");
    fs::write(&cfg, "n_subjects = 4\nper_subject = 4\n").unwrap();
    ok(&["gen-data", "--config", s(&cfg), "--seed", "3", "--out", s(&dir.join("data"))]);
}

#[test]
fn relmat_recovers_perfect_coupling() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.csv");
    fs::write(&labels, "image_id,au_0,au_1,au_2\na,1,1,0\nb,0,0,1\nc,1,1,1\nd,0,0,0\n").unwrap();
    let out = dir.path().join("m.csv");
    ok(&["relmat", "--labels", s(&labels), "--out", s(&out)]);
    let m = rrl_core::relation::read_relation(&out).unwrap();
    assert_eq!(m.get(0, 1), 1.0);
    assert_eq!(m.get(1, 0), 1.0);
    assert!(dir.path().join("relmat.cfg").exists());
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = rrl(&["relmat", "--labels", s(&missing), "--out", s(&dir.path().join("m.csv"))]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "image_id,au_0\na,7\n").unwrap();
    let out = rrl(&["relmat", "--labels", s(&bad), "--out", s(&dir.path().join("m.csv"))]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(rrl(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(rrl(&["--help"]).status.code(), Some(0));
}

#[test]
fn sinkhorn_check_reports_every_trial() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["sinkhorn-check", "--trials", "5", "--out", s(dir.path())]);
    let text = fs::read_to_string(dir.path().join("sinkhorn.csv")).unwrap();
    assert!(dir.path().join("sinkhorn-check.cfg").exists());
    assert_eq!(text.lines().filter(|l| l.ends_with(",true")).count(), 5, "{text}");
}

#[test]
fn pipeline_round_trip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let data = dir.path().join("data");
    for shard in ["train", "test"] {
        assert!(data.join(shard).join("labels.csv").exists());
    }
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, "batch_size = 4\n").unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["pretrain", "--config", s(&cfg), "--steps", "2", "--data", s(&data), "--out", s(&out)]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["loss.csv", "checkpoint/manifest.json", "checkpoint/params.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let log = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some(rrl_core::pipeline::LOSS_HEADER));
    assert_eq!(log.lines().count(), 3);

    let ckpt = a.join("checkpoint");
    let probe_dir = dir.path().join("probe");
    ok(&["probe", "--checkpoint", s(&ckpt), "--data", s(&data), "--epochs", "5", "--out", s(&probe_dir)]);
    let head = probe_dir.join("probe.json");
    assert!(head.exists());
    let eval_dir = dir.path().join("eval");
    let out = ok(&["eval", "--checkpoint", s(&ckpt), "--probe", s(&head), "--data", s(&data), "--out", s(&eval_dir)]);
    let report = fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    assert!(report.starts_with("au,tp,fp,fn,f1\n"));
    assert!(report.lines().last().unwrap().starts_with("average,"));
    assert_eq!(String::from_utf8_lossy(&out.stdout), report);
}
