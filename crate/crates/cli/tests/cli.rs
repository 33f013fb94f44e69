use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn toib(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toib"))
        .current_dir(dir)
        .env_remove("TOIB_SEED")
        .args(args)
        .output()
        .expect("spawn toib")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small and fast; every flag goes through the config layer.
const SMALL: &[&str] = &[
    "--epochs",
    "2",
    "--n-per-user",
    "64",
    "--batch-size",
    "16",
    "--latent-dim",
    "4",
    "--hidden",
    "16",
    "--club-hidden",
    "8",
    "--n-eval",
    "64",
    "--n-export",
    "5",
    "--lr",
    "1e-3",
];

fn with(sub: &str, extra: &[&str]) -> Vec<String> {
    std::iter::once(sub).chain(SMALL.iter().copied()).chain(extra.iter().copied()).map(String::from).collect()
}

fn run(dir: &Path, sub: &str, extra: &[&str]) -> Output {
    let args = with(sub, extra);
    toib(dir, &args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = toib(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.conf"), "alpha = -1\n").unwrap();
    let o = toib(dir.path(), &["train", "--config", "bad.conf"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alpha ≥ 0"), "{}", stderr(&o));

    fs::write(dir.path().join("unknown.conf"), "gamma = 1\n").unwrap();
    let o = toib(dir.path(), &["train", "--config", "unknown.conf"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown key \"gamma\""), "{}", stderr(&o));

    let o = toib(dir.path(), &["train", "--config", "missing.conf"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_prints_a_table_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = toib(dir.path(), &["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("full_pipeline") && out.contains("max_rel_err"), "{out}");
    assert!(!out.contains("FAIL"));
}

#[test]
fn mi_check_independent_pair_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = toib(dir.path(), &["mi-check", "--rho", "0", "--d", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("PASS"));
    let o = toib(dir.path(), &["mi-check", "--rho", "1.5", "--d", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_data_writes_loadable_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "gen-data", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["train_user0.bin", "train_user1.bin", "test_user0.bin", "test_user1.bin"] {
        let ds = toib_core::data::load_dataset(&dir.path().join("data").join(name)).unwrap();
        assert_eq!((ds.len(), ds.input_dim(), ds.n_classes), (64, 8, 4));
    }
    let again = run(dir.path(), "gen-data", &[]);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"));
    assert_eq!(run(dir.path(), "gen-data", &["--force"]).status.code(), Some(0));
}

#[test]
fn eval_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "eval", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("toib train"), "{}", stderr(&o));
}

#[test]
fn full_workflow_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = run(p, "train", &["--label-mode", "independent", "--name", "a"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = p.join("run/a");
    for f in ["config.resolved", "checkpoint.bin", "metrics.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let resolved = fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("label_mode = independent\n") && resolved.contains("epochs = 2\n"));

    // Later subcommands pick up the run's resolved config on their own.
    for sub in ["eval", "sweep", "cross-decode", "export-latents"] {
        let o = toib(p, &[sub, "--name", "a"]);
        assert_eq!(o.status.code(), Some(0), "{sub}: {}", stderr(&o));
    }
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("snr_db,user,accuracy,ce\n-5,0,"));
    assert_eq!(sweep.lines().count(), 1 + 6 * 2);
    let cross = fs::read_to_string(out.join("crossdecode.csv")).unwrap();
    assert_eq!(cross.lines().count(), 1 + 4);
    let latents = fs::read_to_string(out.join("latents.csv")).unwrap();
    assert!(latents.starts_with("user,label,z_1,z_2,z_3,z_4\n"));
    assert_eq!(latents.lines().count(), 1 + 2 * 5);

    // Re-running from the echoed config reproduces outputs byte for byte.
    let o = toib(p, &["train", "--config", "run/a/config.resolved", "--name", "b"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = toib(p, &["sweep", "--name", "b"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["checkpoint.bin", "metrics.csv", "sweep.csv"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(p.join("run/b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_precedence_env_file_flag() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let seed_of = |name: &str| -> String {
        let text = fs::read_to_string(p.join("run").join(name).join("config.resolved")).unwrap();
        text.lines().find(|l| l.starts_with("seed = ")).unwrap().to_string()
    };
    let base = with("train", &["--epochs", "0"]);
    let cmd = |name: &str, env: Option<&str>, extra: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_toib"));
        c.current_dir(p).env_remove("TOIB_SEED").args(&base).args(["--name", name]).args(extra);
        if let Some(v) = env {
            c.env("TOIB_SEED", v);
        }
        assert_eq!(c.output().unwrap().status.code(), Some(0));
    };
    fs::write(p.join("seed.conf"), "seed = 5\n").unwrap();
    cmd("env", Some("9"), &[]);
    cmd("file", Some("9"), &["--config", "seed.conf"]);
    cmd("flag", Some("9"), &["--config", "seed.conf", "--seed", "2"]);
    assert_eq!(seed_of("env"), "seed = 9");
    assert_eq!(seed_of("file"), "seed = 5");
    assert_eq!(seed_of("flag"), "seed = 2");
}
