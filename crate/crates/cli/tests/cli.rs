use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn clipure(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clipure"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A pipeline small enough to finish in seconds.
const TINY: &str = "\
[data]
n_train = 256
n_val = 32
n_eval = 64
classes = 4

[encoder]
dim = 16
hidden = 32
token_dim = 16
epochs = 2
templates = fast

[attack]
steps = 2
eps_grid = 0, 8/255

[purify]
steps = 2
eta_grid = 1, 30
diff_samples = 16
diff_eot = 1

[prior]
hidden = 16
temb_dim = 8
epochs = 1
corpus = 64

[risk]
samples = 64
elbo_samples = 1
pixel_epochs = 1
pixel_corpus = 64

[run]
timing_samples = 8
timing_reps = 1
";

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_override_key_is_a_config_error() {
    let o = clipure(&["eval", "--attack.nonsense", "3"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("attack.nonsense"));
}

#[test]
fn malformed_override_value_is_a_config_error() {
    let o = clipure(&["eval", "--attack.steps=many"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_section_in_config_file_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "[wings]\nspan = 3\n").unwrap();
    let o = clipure(&["--config", path.to_str().unwrap(), "eval"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn report_on_missing_file_fails() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.json");
    let o = clipure(&["report", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("absent.json"));
}

#[test]
fn tiny_run_writes_a_report_that_can_be_reread() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("runs");
    let out = out.to_str().unwrap();
    let run = clipure(&["--config", &cfg, "run", "--run.out_dir", out]);
    // a two-step attack leaves the undefended model mostly intact
    assert_eq!(run.status.code(), Some(4), "{}", stderr(&run));
    let text = String::from_utf8_lossy(&run.stdout).into_owned();
    assert!(text.contains("FAIL undefended_robust_accuracy"), "{text}");

    let run_dir = std::fs::read_dir(out).unwrap().next().unwrap().unwrap().path();
    for f in ["report.json", "config.txt", "samples.csv", "plots/risk.csv"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let again = clipure(&["report", run_dir.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(4));
    let hash = run_dir.file_name().unwrap().to_str().unwrap();
    assert!(String::from_utf8_lossy(&again.stdout).contains(hash));

    // cached: a second run reads the stored report
    let cached = clipure(&["--config", &cfg, "run", "--run.out_dir", out]);
    assert_eq!(cached.stdout, run.stdout);
}

#[test]
fn gen_data_reports_balanced_splits() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("runs");
    let o = clipure(&["--config", &cfg, "gen-data", "--run.out_dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(text.contains("train: 256 samples, class counts [64, 64, 64, 64]"), "{text}");
}
