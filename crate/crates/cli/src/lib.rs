//! `toib` command-line front end: configuration resolution and subcommand
//! dispatch over `toib-core`.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Arg, ArgAction, ArgMatches, Command};
use toib_core::club::{run_gaussian_check, GaussianCheck};
use toib_core::data::{gen_synthetic, load_dataset, save_dataset, Dataset, LabelMode, Split};
use toib_core::eval::{cross_decode, evaluate_accuracy, export_latents, sweep_snr, EvalOptions};
use toib_core::gradcheck::{run_suite, SUITE_TOLERANCE};
use toib_core::rng::substream;
use toib_core::training::{train_epochs, RunState, TrainConfig};

pub use config::{resolve, Settings, KEYS, SEED_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const CONFIG_FILE: &str = "config.resolved";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CROSSDECODE_FILE: &str = "crossdecode.csv";
pub const LATENTS_FILE: &str = "latents.csv";

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("gen-data", "write train and test datasets to data_dir"),
    ("train", "train a run and write its checkpoint and metrics"),
    ("eval", "test accuracy of a trained run at eval_snr_db"),
    ("sweep", "test accuracy over snr_grid"),
    ("cross-decode", "cross-decoding matrix on independent-label test data"),
    ("export-latents", "encoder means of the first n_export test rows"),
    ("gradcheck", "finite-difference check of every differentiable op"),
    ("mi-check", "estimator check against correlated Gaussians"),
];

/// Subcommands that read a trained run and default to its resolved config.
const READS_RUN: &[&str] = &["eval", "sweep", "cross-decode", "export-latents"];

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

pub fn command() -> Command {
    let mut cmd = Command::new("toib")
        .about("Task-oriented orthogonalised information bottleneck for multi-user semantic broadcast")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(Arg::new("config").long("config").value_name("PATH").global(true).help("`key = value` config file"));
    for k in KEYS {
        let long: &'static str = Box::leak(flag_name(k.name).into_boxed_str());
        let mut arg = Arg::new(k.name).long(long).value_name("VALUE").global(true).overrides_with(k.name).help(k.help);
        if long != k.name {
            arg = arg.alias(k.name);
        }
        cmd = cmd.arg(arg);
    }
    for &(name, about) in SUBCOMMANDS {
        let mut sub = Command::new(name).about(about);
        if name == "mi-check" {
            sub = sub
                .arg(Arg::new("rho").long("rho").value_name("RHO").required(true).help("correlation in (-1, 1)"))
                .arg(Arg::new("d").long("d").value_name("D").required(true).help("dimension"));
        }
        if name == "gen-data" {
            sub = sub.arg(
                Arg::new("force").long("force").action(ArgAction::SetTrue).help("overwrite existing dataset files"),
            );
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code. `env_seed` is the value of `TOIB_SEED`, if set.
pub fn run<I, T>(args: I, env_seed: Option<String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&matches, env_seed.as_deref()) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    KEYS.iter().filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone()))).collect()
}

fn settings(name: &str, m: &ArgMatches, env_seed: Option<&str>) -> Result<Settings, Failure> {
    let flags = overrides(m);
    let path = match m.get_one::<String>("config") {
        Some(p) => Some(PathBuf::from(p)),
        None if READS_RUN.contains(&name) => {
            // Without --config, a run-reading subcommand uses the run's own
            // resolved config so the checkpoint shape always matches.
            let located = resolve(None, env_seed, &flags).map_err(Failure::Usage)?;
            Some(located.out_dir().join(CONFIG_FILE)).filter(|p| p.is_file())
        }
        None => None,
    };
    let text = match &path {
        Some(p) => Some(
            fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    resolve(text.as_deref(), env_seed, &flags).map_err(|e| match &path {
        Some(p) => Failure::Usage(format!("{}: {e}", p.display())),
        None => Failure::Usage(e),
    })
}

fn dispatch(m: &ArgMatches, env_seed: Option<&str>) -> Result<bool, Failure> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let s = settings(name, sub, env_seed)?;
    Ok(match name {
        "gen-data" => gen_data(&s, sub.get_flag("force"))?,
        "train" => train(&s)?,
        "eval" => eval(&s)?,
        "sweep" => sweep(&s)?,
        "cross-decode" => cross(&s)?,
        "export-latents" => latents(&s)?,
        "gradcheck" => gradcheck(&s)?,
        "mi-check" => {
            let rho = parse_arg::<f64>(sub, "rho")?;
            let d = parse_arg::<usize>(sub, "d")?;
            mi_check(&s, rho, d)?
        }
        other => unreachable!("unregistered subcommand {other}"),
    })
}

fn parse_arg<T: std::str::FromStr>(m: &ArgMatches, id: &str) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    let raw = m.get_one::<String>(id).expect("required argument");
    raw.parse().map_err(|e| Failure::Usage(format!("--{id}: cannot parse {raw:?}: {e}")))
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// `data_dir/{train,test}_user{u}.bin`.
pub fn dataset_path(data_dir: &Path, split: Split, user: usize) -> PathBuf {
    data_dir.join(format!("{}_user{user}.bin", split_name(split)))
}

/// Loads every user's split from `data_dir` when all files exist, otherwise
/// generates it in memory from the config.
fn datasets(s: &Settings, split: Split) -> anyhow::Result<Vec<Dataset>> {
    let n = s.train.n_users;
    let paths: Vec<PathBuf> = (0..n).map(|u| dataset_path(&s.data_dir, split, u)).collect();
    if !paths.iter().all(|p| p.is_file()) {
        return Ok(gen_synthetic(&s.gen, n, split)?);
    }
    let mut out = Vec::with_capacity(n);
    for p in &paths {
        let ds = load_dataset(p).with_context(|| format!("loading {}", p.display()))?;
        if ds.n_classes != s.gen.n_classes || ds.input_dim() != s.gen.input_dim {
            bail!(
                "{} has K = {}, d_x = {} but the config has n_classes = {}, input_dim = {}",
                p.display(),
                ds.n_classes,
                ds.input_dim(),
                s.gen.n_classes,
                s.gen.input_dim
            );
        }
        out.push(ds);
    }
    Ok(out)
}

fn write(dir: &Path, file: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(file);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn gen_data(s: &Settings, force: bool) -> anyhow::Result<bool> {
    for split in [Split::Train, Split::Test] {
        let sets = gen_synthetic(&s.gen, s.train.n_users, split)?;
        for (u, ds) in sets.iter().enumerate() {
            let path = dataset_path(&s.data_dir, split, u);
            if path.exists() && !force {
                bail!("{} exists; pass --force to overwrite", path.display());
            }
            fs::create_dir_all(&s.data_dir).with_context(|| format!("creating {}", s.data_dir.display()))?;
            save_dataset(ds, &path).with_context(|| format!("writing {}", path.display()))?;
            println!("{} ({} rows)", path.display(), ds.len());
        }
    }
    Ok(true)
}

fn train(s: &Settings) -> anyhow::Result<bool> {
    let out = s.out_dir();
    write(&out, CONFIG_FILE, s.render())?;
    let data = datasets(s, Split::Train)?;
    let mut state = RunState::new(&s.train, data[0].input_dim(), data[0].n_classes)?;
    for epoch in 1..=s.train.epochs {
        let cfg = TrainConfig { epochs: epoch, ..s.train.clone() };
        train_epochs(&mut state, &cfg, &data)?;
        if let Some(e) = state.history.last() {
            let acc: Vec<String> = e.users.iter().map(|u| format!("{:.4}", u.acc_train)).collect();
            let ce: Vec<String> = e.users.iter().map(|u| format!("{:.4}", u.ce)).collect();
            eprintln!("epoch {epoch}/{}: ce [{}] acc_train [{}]", s.train.epochs, ce.join(", "), acc.join(", "));
        }
    }
    state.save(&out.join(CHECKPOINT_FILE))?;
    let metrics = write(&out, METRICS_FILE, state.history.to_csv())?;
    println!("{}", out.join(CHECKPOINT_FILE).display());
    println!("{}", metrics.display());
    Ok(true)
}

fn load_run(s: &Settings, data: &[Dataset]) -> anyhow::Result<RunState> {
    let path = s.out_dir().join(CHECKPOINT_FILE);
    if !path.is_file() {
        bail!("no checkpoint at {}; run `toib train` first", path.display());
    }
    RunState::load(&path, &s.train, data[0].input_dim(), data[0].n_classes)
        .with_context(|| format!("loading {}", path.display()))
}

fn eval_options(s: &Settings) -> EvalOptions {
    EvalOptions { latent_mean: s.latent_mean, ..EvalOptions::from_config(&s.train, s.n_eval) }
}

fn eval(s: &Settings) -> anyhow::Result<bool> {
    let data = datasets(s, Split::Test)?;
    let state = load_run(s, &data)?;
    let mut rng = substream(s.train.seed, "eval/single");
    let r = evaluate_accuracy(&state, &s.train, &data, s.eval_snr_db, &eval_options(s), &mut rng)?;
    let mut csv = String::from("snr_db,user,accuracy,ce\n");
    for (u, (a, ce)) in r.accuracy.iter().zip(&r.ce).enumerate() {
        csv.push_str(&format!("{},{u},{a},{ce}\n", s.eval_snr_db));
    }
    write(&s.out_dir(), EVAL_FILE, &csv)?;
    print!("{csv}");
    Ok(true)
}

fn sweep(s: &Settings) -> anyhow::Result<bool> {
    if s.snr_grid.is_empty() {
        bail!("snr_grid is empty");
    }
    let data = datasets(s, Split::Test)?;
    let state = load_run(s, &data)?;
    let r = sweep_snr(&state, &s.train, &data, &s.snr_grid, &eval_options(s), s.train.seed)?;
    let csv = r.to_csv();
    write(&s.out_dir(), SWEEP_FILE, &csv)?;
    print!("{csv}");
    Ok(true)
}

fn cross(s: &Settings) -> anyhow::Result<bool> {
    // Independent labels give each user its own task on the shared inputs'
    // class structure. Files in data_dir are used as-is and must already be
    // independent-label data.
    let gen = toib_core::data::GenSpec { label_mode: LabelMode::Independent, ..s.gen.clone() };
    let indep = Settings { gen, ..s.clone() };
    let data = datasets(&indep, Split::Test)?;
    let state = load_run(s, &data)?;
    let mut rng = substream(s.train.seed, "eval/crossdecode");
    let m = cross_decode(&state, &s.train, &data, s.eval_snr_db, &eval_options(s), &mut rng)?;
    let csv = m.to_csv();
    write(&s.out_dir(), CROSSDECODE_FILE, &csv)?;
    print!("{csv}");
    Ok(true)
}

fn latents(s: &Settings) -> anyhow::Result<bool> {
    let data = datasets(s, Split::Test)?;
    let state = load_run(s, &data)?;
    let csv = export_latents(&state, &data, s.n_export)?;
    let path = write(&s.out_dir(), LATENTS_FILE, csv)?;
    println!("{}", path.display());
    Ok(true)
}

fn gradcheck(s: &Settings) -> anyhow::Result<bool> {
    let rows = run_suite(s.train.seed)?;
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    println!("{:<width$}  {:>12}  {:>8}  status", "op", "max_rel_err", "checked");
    for r in &rows {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<width$}  {:>12.3e}  {:>8}  {status}", r.name, r.max_rel_err, r.n_checked);
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!("{} ops, {failed} above tolerance {SUITE_TOLERANCE:e}", rows.len());
    Ok(failed == 0)
}

fn mi_check(s: &Settings, rho: f64, d: usize) -> anyhow::Result<bool> {
    let cfg = GaussianCheck {
        hidden: s.train.club_hidden,
        lr: s.train.club_lr,
        mode: s.train.phase_a_mode,
        seed: s.train.seed,
        ..GaussianCheck::new(rho, d)
    };
    let r = run_gaussian_check(&cfg)?;
    println!("rho = {rho}, d = {d}, mode = {}", cfg.mode);
    println!("true MI      {:.4} nats", r.true_mi);
    println!("CLUB bound   {:.4} nats", r.club_bound);
    println!("estimate     {:.4} ± {:.4} nats", r.estimate, r.stderr);
    println!("tolerance    {:.4} nats ({})", r.tolerance, if r.within_tolerance() { "within" } else { "outside" });
    println!("lower check  {}", if r.bound_holds() { "holds" } else { "violated" });
    println!("{}", if r.passed() { "PASS" } else { "FAIL" });
    Ok(r.passed())
}
