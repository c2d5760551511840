use std::path::Path;
use std::process::{Command, Output};

fn mbores(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbores"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn mbores")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "\
precision = \"f64\"
num_proposals = 8
min_objects = 2
max_objects = 5
d_obj = 16
d_t = 8
branch_heads = 2
branch_layers = 2
reasoner_heads = 2
reasoner_layers = 2
ffn_hidden = 32
top_n = 8
train_scenes = 12
val_scenes = 4
test_scenes = 10
epochs = 2
";

#[test]
fn generate_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let args = ["generate", "--config", "tiny.toml", "--out", "data"];
    let first = mbores(&args, dir.path());
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("12 train"));
    let again = mbores(&args, dir.path());
    assert!(!again.status.success());
    assert!(stderr(&again).starts_with("error[usage]"), "{}", stderr(&again));
    let forced = mbores(&[&args[..], &["--force"]].concat(), dir.path());
    assert!(forced.status.success());
}

#[test]
fn invalid_config_is_reported_as_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "min_objects = 1\nmax_objects = 1\n").unwrap();
    let o = mbores(&["generate", "--config", "bad.toml", "--out", "x"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[config]"), "{}", stderr(&o));

    std::fs::write(dir.path().join("typo.toml"), "epoch = 3\n").unwrap();
    let o = mbores(&["generate", "--config", "typo.toml", "--out", "x"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error["), "{}", stderr(&o));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn sampled_gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = mbores(&["gradcheck", "--sample", "3"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("reasoner.logit.w"));
}

#[test]
fn train_then_evaluate_a_top_n_sweep() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let g = mbores(&["generate", "--config", "tiny.toml", "--out", "data"], dir.path());
    assert!(g.status.success(), "{}", stderr(&g));
    let t = mbores(
        &["train", "--config", "tiny.toml", "--data", "data", "--out", "run", "--quiet"],
        dir.path(),
    );
    assert!(t.status.success(), "{}", stderr(&t));
    let run = dir.path().join("run");
    for f in ["best.ckpt", "manifest.json", "config.toml", "train.log"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let e = mbores(
        &["eval", "--checkpoint", "run/best.ckpt", "--data", "data", "--top-n", "4,8", "--out", "ev"],
        dir.path(),
    );
    assert!(e.status.success(), "{}", stderr(&e));
    let out = stdout(&e);
    assert!(out.contains("top_n=4") && out.contains("top_n=8"));
    for n in [4, 8] {
        assert!(dir.path().join(format!("ev/report_top{n}.txt")).exists());
        let dump = std::fs::read_to_string(dir.path().join(format!("ev/dump_top{n}.jsonl"))).unwrap();
        assert_eq!(dump.lines().count(), 10);
    }

    let bad = mbores(
        &["eval", "--checkpoint", "run/best.ckpt", "--data", "data", "--split", "dev"],
        dir.path(),
    );
    assert!(stderr(&bad).starts_with("error[usage]"), "{}", stderr(&bad));
    let mismatch = mbores(
        &["eval", "--checkpoint", "run/best.ckpt", "--data", "data", "--multi-branch", "off"],
        dir.path(),
    );
    assert!(stderr(&mismatch).starts_with("error[dimension]"), "{}", stderr(&mismatch));
}
