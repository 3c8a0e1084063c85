use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn quick() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.toml")
}

fn entmerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entmerge")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = entmerge(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32, prefix: &str) {
    let out = entmerge(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {stderr}");
    assert!(stderr.starts_with(prefix), "{args:?}: {stderr}");
}

#[test]
fn train_diagnose_and_gen_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick();
    let cfg = cfg.to_str().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();

    let listing = ok(&["gen-data", "--config", cfg, "--out", &d("data")]);
    assert_eq!(listing.lines().count(), 3);
    assert!(dir.path().join("data/domain2.csv").exists());

    ok(&["train", "--config", cfg, "--seed", "4", "--out", &d("pool.emrg")]);
    let text = ok(&["diagnose", "--pool", &d("pool.emrg"), "--out", &d("heat.csv")]);
    assert!(text.contains("head"));
    let heat = std::fs::read_to_string(dir.path().join("heat.csv")).unwrap();
    // 3 experts -> 3 pairs, over two blocks and the head
    assert_eq!(heat.lines().count(), 1 + 3 * 3);

    ok(&["train", "--config", cfg, "--seed", "4", "--held-out", "1", "--out", &d("lo.emrg")]);
    let text = ok(&["diagnose", "--pool", &d("lo.emrg"), "--out", &d("lo.csv")]);
    assert!(text.contains("block1"));
    assert_eq!(std::fs::read_to_string(dir.path().join("lo.csv")).unwrap().lines().count(), 1 + 3);
}

#[test]
fn eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick();
    let cfg = cfg.to_str().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let args = [
            "eval",
            "--config",
            cfg,
            "--method",
            "entropy_adaptive",
            "--method",
            "single_expert:1",
            "--stream",
            "temporal:0.9",
            "--out",
        ];
        let text = ok(&[&args[..], &[out.to_str().unwrap()]].concat());
        (out, text)
    };
    let (a, text) = run("a");
    assert!(text.contains("temporal:0.9") && text.contains("single_expert:1"));
    for f in ["results.csv", "coeffs.csv", "summary.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let (b, _) = run("b");
    assert_eq!(std::fs::read(a.join("results.csv")).unwrap(), std::fs::read(b.join("results.csv")).unwrap());

    let table = ok(&["report", "--input", a.to_str().unwrap()]);
    assert!(table.contains("entropy_adaptive"));
    assert!(!table.contains("mean "), "{table}");
}

#[test]
fn errors_carry_category_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick();
    let cfg = cfg.to_str().unwrap();

    fails(&["report", "--input", dir.path().to_str().unwrap()], 4, "io: ");
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seeds = []\n").unwrap();
    fails(&["eval", "--config", bad.to_str().unwrap()], 2, "config: ");
    std::fs::write(&bad, "[engine]\nema_rate = 1.0\n").unwrap();
    fails(&["eval", "--config", bad.to_str().unwrap()], 2, "config: ");

    let junk = dir.path().join("junk.emrg");
    std::fs::write(&junk, b"EMRG\x07\0\0\0").unwrap();
    fails(&["diagnose", "--pool", junk.to_str().unwrap()], 5, "format: ");

    let out = dir.path().join("x.emrg");
    fails(&["train", "--config", cfg, "--held-out", "9", "--out", out.to_str().unwrap()], 2, "config: ");
    assert!(!out.exists());

    // argument parsing errors come from clap
    let out = entmerge(&["eval", "--method", "median"]);
    assert_eq!(out.status.code(), Some(2));
}
