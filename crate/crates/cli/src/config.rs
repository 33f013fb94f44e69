//! Flat `key = value` configuration with typed keys, defaults, and
//! flag > file > environment > default precedence.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use toib_core::data::GenSpec;
use toib_core::eval::DEFAULT_SNR_GRID;
use toib_core::training::TrainConfig;

/// Lowest-precedence source for `seed`.
pub const SEED_ENV: &str = "TOIB_SEED";

/// Every setting a subcommand can read.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub gen: GenSpec,
    pub n_eval: usize,
    pub eval_snr_db: f64,
    pub snr_grid: Vec<f64>,
    pub latent_mean: bool,
    pub n_export: usize,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub name: String,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            gen: GenSpec::default(),
            n_eval: 2000,
            eval_snr_db: 0.0,
            snr_grid: DEFAULT_SNR_GRID.to_vec(),
            latent_mean: false,
            n_export: 500,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
            name: "default".into(),
        }
    }
}

impl Settings {
    /// `run_dir/name`.
    pub fn out_dir(&self) -> PathBuf {
        self.run_dir.join(&self.name)
    }

    /// Constraint checks beyond what each key's parser enforces.
    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        self.gen.validate().map_err(|e| e.to_string())?;
        if self.n_eval == 0 {
            return Err("n_eval ≥ 1 required".into());
        }
        if self.eval_snr_db.is_nan() {
            return Err("eval_snr_db must be a number".into());
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(format!("name must be a non-empty single path component, got {:?}", self.name));
        }
        Ok(())
    }

    /// Every key in table order, one `key = value` line each.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "{} = {}", k.name, (k.get)(self)).expect("string write");
        }
        out
    }
}

/// One configurable key.
pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
    pub get: fn(&Settings) -> String,
    pub set: fn(&mut Settings, &str) -> Result<(), String>,
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| format!("{key}: cannot parse {raw:?}: {e}"))
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<f64>, String> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|v| parse::<f64>(key, v.trim())).collect()
}

macro_rules! key {
    ($name:literal, $help:literal, |$s:ident| $field:expr) => {
        Key {
            name: $name,
            help: $help,
            get: |$s: &Settings| $field.to_string(),
            set: |$s: &mut Settings, raw: &str| {
                $field = parse($name, raw)?;
                Ok(())
            },
        }
    };
}

pub static KEYS: &[Key] = &[
    key!("n_users", "number of users N", |s| s.train.n_users),
    key!("epochs", "training epochs T", |s| s.train.epochs),
    key!("batch_size", "batch size V (≥ 2)", |s| s.train.batch_size),
    key!("channel_resamples", "channel resamples L per step (0 = noiseless)", |s| s.train.channel_resamples),
    key!("phase_a_steps", "estimator updates M per step", |s| s.train.phase_a_steps),
    key!("alpha", "orthogonality weight α", |s| s.train.alpha),
    key!("beta", "compression weight β", |s| s.train.beta),
    key!("lr", "encoder/decoder learning rate", |s| s.train.lr),
    key!("club_lr", "estimator learning rate", |s| s.train.club_lr),
    key!("latent_dim", "latent dimension d", |s| s.train.latent_dim),
    key!("hidden", "encoder/decoder hidden width", |s| s.train.hidden),
    key!("club_hidden", "estimator hidden width", |s| s.train.club_hidden),
    key!("channel", "awgn | rayleigh", |s| s.train.channel),
    key!("equalize", "divide by the fading gain at the receiver", |s| s.train.equalize),
    key!("train_snr_db", "training SNR in dB (inf = noiseless)", |s| s.train.train_snr_db),
    key!("p_max", "total transmit power", |s| s.train.p_max),
    key!("power", "equal | comma-separated weights", |s| s.train.power),
    key!("seed", "master seed", |s| s.train.seed),
    key!("phase_a_mode", "mle | vclub_ascent", |s| s.train.phase_a_mode),
    key!("label_mode", "shared | independent", |s| s.train.label_mode),
    key!("objective", "toib | vib", |s| s.train.objective),
    key!("steps_per_epoch", "batches per epoch (0 = ceil(n / V))", |s| s.train.steps_per_epoch),
    key!("n_classes", "classes K", |s| s.gen.n_classes),
    key!("input_dim", "input dimension d_x", |s| s.gen.input_dim),
    key!("n_per_user", "samples per user and split", |s| s.gen.n_per_user),
    key!("c_sep", "class-centre radius", |s| s.gen.c_sep),
    key!("sigma_x", "within-class noise standard deviation", |s| s.gen.sigma_x),
    key!("n_eval", "evaluation samples per user", |s| s.n_eval),
    key!("eval_snr_db", "SNR for eval and cross-decode", |s| s.eval_snr_db),
    Key {
        name: "snr_grid",
        help: "comma-separated sweep SNRs in dB",
        get: |s| s.snr_grid.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        set: |s, raw| {
            s.snr_grid = parse_list("snr_grid", raw)?;
            Ok(())
        },
    },
    key!("latent_mean", "transmit the encoder mean at evaluation", |s| s.latent_mean),
    key!("n_export", "latent rows exported per user", |s| s.n_export),
    Key {
        name: "data_dir",
        help: "dataset directory",
        get: |s| s.data_dir.display().to_string(),
        set: |s, raw| {
            s.data_dir = PathBuf::from(raw);
            Ok(())
        },
    },
    Key {
        name: "run_dir",
        help: "parent of run output directories",
        get: |s| s.run_dir.display().to_string(),
        set: |s, raw| {
            s.run_dir = PathBuf::from(raw);
            Ok(())
        },
    },
    key!("name", "run name; outputs go to run_dir/name", |s| s.name),
];

pub fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// `(key, value, line number)` triples of a config document. Blank lines and
/// `#` comments are skipped.
pub fn parse_document(text: &str) -> Result<Vec<(String, String, usize)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!("line {}: expected `key = value`, got {raw:?}", i + 1));
        };
        let k = k.trim();
        if find_key(k).is_none() {
            return Err(format!("line {}: unknown key {k:?}", i + 1));
        }
        out.push((k.to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

/// Applies sources from lowest to highest precedence: defaults, the seed
/// environment variable, the config document, then command-line overrides.
pub fn resolve(
    document: Option<&str>,
    env_seed: Option<&str>,
    overrides: &[(String, String)],
) -> Result<Settings, String> {
    let mut s = Settings::default();
    if let Some(raw) = env_seed {
        set_key(&mut s, "seed", raw).map_err(|e| format!("{SEED_ENV}: {e}"))?;
    }
    if let Some(text) = document {
        for (k, v, line) in parse_document(text)? {
            set_key(&mut s, &k, &v).map_err(|e| format!("line {line}: {e}"))?;
        }
    }
    for (k, v) in overrides {
        set_key(&mut s, k, v)?;
    }
    // The generator shares the run's seed and label mode.
    s.gen.seed = s.train.seed;
    s.gen.label_mode = s.train.label_mode;
    s.validate()?;
    Ok(s)
}

pub fn set_key(s: &mut Settings, key: &str, raw: &str) -> Result<(), String> {
    let k = find_key(key).ok_or_else(|| format!("unknown key {key:?}"))?;
    (k.set)(s, raw)
}
