use std::path::Path;
use std::process::{Command, Output};

use dualprior::array_io::load_array;
use dualprior::harness::check::{fixture_config, CheckReport};
use dualprior::harness::RunConfig;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualprior")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn show_config_round_trips_and_applies_flags() {
    let text = ok(&["--toy", "--priors", "temporal", "--tstar", "0.5", "--seed", "9", "show-config"]);
    let cfg = RunConfig::from_toml_str(&text).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.restorer.t_star, 0.5);
    assert_eq!(cfg.restorer.fusion.priors, dualprior::fusion::PriorsMode::Temporal);
}

#[test]
fn bad_flags_exit_with_an_error() {
    assert_eq!(run(&["--priors", "sideways", "show-config"]).status.code(), Some(2));
    assert_eq!(run(&["--tstar", "0", "show-config"]).status.code(), Some(2));
    assert_eq!(run(&["check", "everything"]).status.code(), Some(2));
}

#[test]
fn check_suite_passes_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let stdout = ok(&["--out", out, "check", "algebra"]);
    assert!(stdout.contains("PASS algebra/one_step_oracle_inversion"), "{stdout}");
    let text = std::fs::read_to_string(dir.path().join("reports/check-algebra.json")).unwrap();
    let report: CheckReport = serde_json::from_str(&text).unwrap();
    assert!(report.all_passed());
}

#[test]
fn full_pipeline_on_the_fixture_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, fixture_config().to_toml().unwrap()).unwrap();
    let out = dir.path().join("run");
    let base = ["--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let call = |extra: &[&str]| {
        let args = with(extra);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    call(&["gen-data"]);
    assert!(out.join("data/manifest.json").exists());
    // stage 2 needs its inputs
    let args = with(&["train-stage2"]);
    assert_eq!(run(&args.iter().map(String::as_str).collect::<Vec<_>>()).status.code(), Some(2));

    call(&["train-stage0"]);
    call(&["train-stage1", "--stop-after", "1"]);
    call(&["train-stage1", "--resume"]);
    call(&["train-stage1p"]);
    call(&["train-stage2"]);
    let eval = call(&["eval"]);
    assert!(eval.contains("restored-both"), "{eval}");
    for f in ["stage1_loss.png", "stage2_history.jsonl", "eval-lq.summary.json"] {
        assert!(out.join("reports").join(f).exists(), "missing {f}");
    }
    let reports = std::fs::read_dir(out.join("reports")).unwrap();
    assert!(reports.map(|e| e.unwrap().file_name().into_string().unwrap()).any(|n| n.ends_with("_slices.png")));

    let input = out.join("data/clip_0000_lq.dpa");
    let restored = dir.path().join("restored.dpa");
    call(&["restore", input.to_str().unwrap(), restored.to_str().unwrap()]);
    assert_eq!(load_array(&restored).unwrap().shape, load_array(&input).unwrap().shape);

    // evaluating under a different config is refused unless overridden
    let args = with(&["--priors", "spatial", "eval", "--checkpoint", stage2_ckpt(&out).to_str().unwrap()]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(run(&args).status.code(), Some(2));
    let mut forced = args.clone();
    forced.push("--allow-hash-mismatch");
    ok(&forced);
}

fn stage2_ckpt(out: &Path) -> std::path::PathBuf {
    std::fs::read_dir(out.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_str().unwrap().starts_with("stage2-"))
        .unwrap()
}
