use std::collections::BTreeMap;
use std::path::Path;

use pointgame_core::io::load_checkpoint;

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = pointgame_cli::run(std::iter::once("pointgame").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn synth(dir: &Path, per_class: &str, test: &str) {
    let (code, _, err) = cli(&["--preset", "gradcheck", "synth", "--out", s(dir), "--classes", "cube,sphere", "--per-class", per_class, "--test-per-class", test]);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn unknown_command_prints_usage() {
    let (code, _, err) = cli(&["frobnicate"]);
    assert_eq!(code, 1);
    assert!(err.contains("Usage"), "{err}");
    let (code, out, _) = cli(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("pretrain") && out.contains("selfcheck"));
}

#[test]
fn schema_violations_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = cli(&["--set", "model.heads=seven", "selfcheck"]);
    assert_eq!(code, 1);
    assert!(err.contains("model.heads"), "{err}");
    let file = dir.path().join("c.toml");
    std::fs::write(&file, "preset = \"tiny\"\n[train]\nepochz = 3\n").unwrap();
    let (code, _, err) = cli(&["--config", s(&file), "describe", "--input", "x.xyz"]);
    assert_eq!(code, 1);
    assert!(err.contains("train.epochz"), "{err}");
    std::fs::write(&file, "[optimizer]\nlr = 1\n").unwrap();
    let (code, _, err) = cli(&["--config", s(&file), "describe", "--input", "x.xyz"]);
    assert_eq!(code, 1);
    assert!(err.contains("optimizer"), "{err}");
    let (code, _, err) = cli(&["--set", "model.d=25", "describe", "--input", "x.xyz"]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn one_epoch_on_one_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (code, _, _) = cli(&["--preset", "gradcheck", "synth", "--out", s(&data), "--classes", "torus", "--per-class", "1", "--test-per-class", "0"]);
    assert_eq!(code, 0);
    let before = snapshot(&data);
    let out = dir.path().join("pre");
    let (code, report, err) = cli(&["--preset", "gradcheck", "pretrain", "--data", s(&data), "--out", s(&out), "--epochs", "1"]);
    assert_eq!(code, 0, "{err}");
    let checkpoints: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".pgck"))
        .collect();
    assert_eq!(checkpoints, vec!["checkpoint_epoch_0001.pgck"]);
    assert_eq!(report.lines().count(), 2);
    let curve = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "epoch,loss");
    assert!(lines[1].starts_with("1,"));
    assert_eq!(snapshot(&data), before, "input dataset was modified");
    let ck = load_checkpoint(&out.join("checkpoint_epoch_0001.pgck")).unwrap();
    assert_eq!(ck.config.epoch, 1);
    assert_eq!(ck.config.model, pointgame_core::config::ModelConfig::gradcheck());
}

#[test]
fn finetune_eval_extract_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "4", "2");
    let before = snapshot(&data);
    let pre = dir.path().join("pre");
    let (code, _, err) = cli(&["--preset", "gradcheck", "pretrain", "--data", s(&data), "--out", s(&pre), "--epochs", "2", "--batch-size", "4"]);
    assert_eq!(code, 0, "{err}");
    let ck = pre.join("checkpoint_epoch_0002.pgck");

    let ft = dir.path().join("ft");
    let (code, report, err) = cli(&["finetune", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&ft), "--epochs", "5", "--head", "nonlinear"]);
    assert_eq!(code, 0, "{err}");
    assert!(report.starts_with("split,items,accuracy\ntrain,8,"), "{report}");
    assert!(report.contains("\ntest,4,"));
    let classifier = ft.join("classifier.pgck");
    let meta = load_checkpoint(&classifier).unwrap().config.classifier.unwrap();
    assert_eq!(meta.classes, vec!["cube", "sphere"]);

    let (code, eval, _) = cli(&["eval", "--checkpoint", s(&classifier), "--data", s(&data), "--split", "train"]);
    assert_eq!(code, 0);
    assert!(eval.starts_with("split,items,accuracy\ntrain,8,"), "{eval}");
    let (code, _, err) = cli(&["eval", "--checkpoint", s(&ck), "--data", s(&data)]);
    assert_eq!(code, 2);
    assert!(err.contains("classifier"), "{err}");

    let (code, features, _) = cli(&["extract", "--checkpoint", s(&ck), "--data", s(&data)]);
    assert_eq!(code, 0);
    let rows: Vec<&str> = features.lines().collect();
    assert_eq!(rows.len(), 13);
    assert!(rows.iter().all(|r| r.split(',').count() == 1 + 2 * 24));

    let rec = dir.path().join("rec");
    let input = data.join("cube/train_0000.xyz");
    let (code, report, err) = cli(&["reconstruct", "--checkpoint", s(&ck), "--input", s(&input), "--out", s(&rec)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(report.lines().count(), 2);
    let count = |name: &str| std::fs::read_to_string(rec.join(name)).unwrap().lines().count();
    assert_eq!(count("train_0000_input.xyz"), 64);
    // gradcheck config: 2 of 4 patches masked, 8 points each
    assert_eq!(count("train_0000_predicted.xyz"), 16);
    assert!(count("train_0000_visible.xyz") >= 8);
    assert_eq!(snapshot(&data), before);
}

#[test]
fn describe_emits_descriptor_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "1", "0");
    let (code, out, err) = cli(&["--preset", "gradcheck", "describe", "--input", s(&data.join("cube/train_0000.xyz"))]);
    assert_eq!(code, 0, "{err}");
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 1 + 4);
    assert!(rows[0].starts_with("alpha0,") && rows[0].ends_with("theta10"));
    for r in &rows[1..] {
        let v: Vec<f64> = r.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v.len(), 33);
        for part in v.chunks(11) {
            assert!((part.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = cli(&["--preset", "gradcheck", "describe", "--input", s(&dir.path().join("missing.xyz"))]);
    assert_eq!(code, 2, "{err}");
    let bad = dir.path().join("bad.xyz");
    std::fs::write(&bad, "0 0 0\n1 two 3\n").unwrap();
    let (code, _, err) = cli(&["--preset", "gradcheck", "describe", "--input", s(&bad)]);
    assert_eq!(code, 2);
    assert!(err.contains(":2:"), "{err}");
}

#[test]
fn divergence_exits_three_and_keeps_last_good_state() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "2", "0");
    let out = dir.path().join("pre");
    let (code, _, err) = cli(&[
        "--preset", "gradcheck", "--set", "train.lr-max=1e30", "--set", "train.weight-decay=0", "pretrain", "--data", s(&data), "--out", s(&out),
        "--epochs", "5",
    ]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("diverge"), "{err}");
    let last = load_checkpoint(&out.join("checkpoint_last_good.pgck")).unwrap();
    assert!(last.params.iter().all(|(_, p)| p.value.all_finite()));
}

#[test]
fn selfcheck_passes() {
    let (code, out, err) = cli(&["selfcheck"]);
    assert_eq!(code, 0, "{out}{err}");
    assert!(out.starts_with("suite,status,seconds,detail\n"));
    assert_eq!(out.lines().skip(1).filter(|l| l.contains(",pass,")).count(), 6, "{out}");
}
