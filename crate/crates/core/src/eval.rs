//! Test-time evaluation: accuracy at a given SNR, accuracy-vs-SNR sweeps, the
//! cross-decoding matrix and latent export. Nothing here mutates a run.

use std::fmt::Write as _;

use crate::autodiff::{Tape, Tensor};
use crate::channel::{Channel, SnrSpec};
use crate::data::{labels_shared, Dataset};
use crate::error::{contract_err, Result};
use crate::nn::{predict, Network};
use crate::objectives::cross_entropy;
use crate::rng::{substream, RunRng};
use crate::training::{forward_pipeline, BoundNets, NoiseLevel, RunState, StepNoise, TrainConfig};

/// Default sweep grid in dB.
pub const DEFAULT_SNR_GRID: [f64; 6] = [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub channel: Channel,
    pub n_eval: usize,
    /// Transmit the encoder mean instead of a reparameterised sample.
    pub latent_mean: bool,
}

impl EvalOptions {
    pub fn from_config(cfg: &TrainConfig, n_eval: usize) -> Self {
        Self { channel: cfg.channel(), n_eval, latent_mean: false }
    }
}

/// Decoder outputs of every user on the first `n_eval` rows of each dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Predicted class per user and row.
    pub predictions: Vec<Vec<usize>>,
    /// Mean cross-entropy per user against its own labels.
    pub ce: Vec<f64>,
}

fn eval_inputs(datasets: &[Dataset], state: &RunState, n_eval: usize) -> Result<(Vec<Tensor>, Vec<Vec<usize>>)> {
    if datasets.len() != state.n_users() {
        return contract_err(format!("{} datasets for {} users", datasets.len(), state.n_users()));
    }
    if n_eval == 0 {
        return contract_err("n_eval ≥ 1 required");
    }
    if let Some(ds) = datasets.iter().find(|d| d.len() < n_eval) {
        return contract_err(format!("n_eval = {n_eval} exceeds dataset size {}", ds.len()));
    }
    let idx: Vec<usize> = (0..n_eval).collect();
    let inputs = datasets.iter().map(|d| d.gather(&idx)).collect();
    let labels = datasets.iter().map(|d| d.labels[..n_eval].to_vec()).collect();
    Ok((inputs, labels))
}

/// Runs the full pipeline once at `snr_db` and decodes every user.
pub fn decode(
    state: &RunState,
    cfg: &TrainConfig,
    datasets: &[Dataset],
    snr_db: f64,
    opts: &EvalOptions,
    rng: &mut RunRng,
) -> Result<Decoded> {
    let (inputs, labels) = eval_inputs(datasets, state, opts.n_eval)?;
    let noise = StepNoise::draw(rng, state.n_users(), opts.n_eval, state.latent_dim(), 1, opts.channel);
    let mut tape = Tape::new();
    let nets = BoundNets::bind(&mut tape, &state.encoders, &state.decoders, false);
    let eps = if opts.latent_mean { None } else { Some(noise.eps.as_slice()) };
    let fwd = forward_pipeline(
        &mut tape,
        &nets,
        &inputs,
        eps,
        &noise.draws,
        opts.channel,
        &cfg.allocation()?,
        NoiseLevel::Snr(SnrSpec::db(snr_db)),
    )?;
    let mut predictions = Vec::with_capacity(state.n_users());
    let mut ce = Vec::with_capacity(state.n_users());
    for (u, &logits) in fwd.logits[0].iter().enumerate() {
        predictions.push(predict(tape.value(logits)));
        let v = cross_entropy(&mut tape, logits, &labels[u])?;
        ce.push(tape.value(v).item());
    }
    Ok(Decoded { predictions, ce })
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, u)| p == u).count() as f64 / pred.len() as f64
}

/// Per-user accuracy and cross-entropy at one SNR.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyResult {
    pub accuracy: Vec<f64>,
    pub ce: Vec<f64>,
}

pub fn evaluate_accuracy(
    state: &RunState,
    cfg: &TrainConfig,
    datasets: &[Dataset],
    snr_db: f64,
    opts: &EvalOptions,
    rng: &mut RunRng,
) -> Result<AccuracyResult> {
    let d = decode(state, cfg, datasets, snr_db, opts, rng)?;
    let accuracy = d.predictions.iter().zip(datasets).map(|(p, ds)| accuracy(p, &ds.labels[..opts.n_eval])).collect();
    Ok(AccuracyResult { accuracy, ce: d.ce })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub snr_db: f64,
    pub user: usize,
    pub accuracy: f64,
    pub ce: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub n_eval: usize,
    pub seed: u64,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("snr_db,user,accuracy,ce\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.snr_db, r.user, r.accuracy, r.ce).expect("string write");
        }
        out
    }

    /// Accuracy of `user` at the first row with `snr_db`.
    pub fn accuracy(&self, snr_db: f64, user: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.snr_db == snr_db && r.user == user).map(|r| r.accuracy)
    }
}

/// One evaluation per SNR, each with its own `eval/snr/{db}` substream.
pub fn sweep_snr(
    state: &RunState,
    cfg: &TrainConfig,
    datasets: &[Dataset],
    snrs: &[f64],
    opts: &EvalOptions,
    seed: u64,
) -> Result<SweepResult> {
    let mut rows = Vec::with_capacity(snrs.len() * state.n_users());
    for &db in snrs {
        let mut rng = substream(seed, &format!("eval/snr/{db}"));
        let r = evaluate_accuracy(state, cfg, datasets, db, opts, &mut rng)?;
        for (user, (&accuracy, &ce)) in r.accuracy.iter().zip(&r.ce).enumerate() {
            rows.push(SweepRow { snr_db: db, user, accuracy, ce });
        }
    }
    Ok(SweepResult { rows, n_eval: opts.n_eval, seed })
}

/// `acc[i][j]`: decoder `i` on its own received signal, scored against the
/// labels of user `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossDecodeMatrix {
    pub acc: Vec<Vec<f64>>,
}

impl CrossDecodeMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("decoder,target_user,accuracy\n");
        for (i, row) in self.acc.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                writeln!(out, "{i},{j},{a}").expect("string write");
            }
        }
        out
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.acc.len()).map(|i| self.acc[i][i]).collect()
    }

    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.acc.len();
        (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| self.acc[i][j]).collect()
    }
}

pub fn cross_decode(
    state: &RunState,
    cfg: &TrainConfig,
    datasets: &[Dataset],
    snr_db: f64,
    opts: &EvalOptions,
    rng: &mut RunRng,
) -> Result<CrossDecodeMatrix> {
    if labels_shared(datasets) {
        return contract_err(
            "cross-decoding needs user-specific labels; these datasets share one label sequence, \
             so every off-diagonal entry would equal normal decoding (generate with label_mode = independent)",
        );
    }
    let d = decode(state, cfg, datasets, snr_db, opts, rng)?;
    let acc = d
        .predictions
        .iter()
        .map(|p| datasets.iter().map(|ds| accuracy(p, &ds.labels[..opts.n_eval])).collect())
        .collect();
    Ok(CrossDecodeMatrix { acc })
}

/// CSV `user,label,z_1..z_d` of encoder means for the first `n` rows of each
/// user's dataset.
pub fn export_latents(state: &RunState, datasets: &[Dataset], n: usize) -> Result<String> {
    let (inputs, labels) = eval_inputs(datasets, state, n)?;
    let d = state.latent_dim();
    let mut out = String::from("user,label");
    for k in 1..=d {
        write!(out, ",z_{k}").expect("string write");
    }
    out.push('\n');
    for (u, (x, lab)) in inputs.into_iter().zip(&labels).enumerate() {
        let mut tape = Tape::new();
        let bound = state.encoders[u].bind(&mut tape, false);
        let xv = tape.constant(x);
        let lat = state.encoders[u].forward(&mut tape, &bound, xv)?;
        let mu = tape.value(lat.mu);
        for (r, &label) in lab.iter().enumerate() {
            write!(out, "{u},{label}").expect("string write");
            for v in mu.row(r) {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, GenSpec, LabelMode, Split};
    use crate::nn::InitScheme;
    use crate::training::train;

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            latent_dim: 4,
            hidden: 16,
            club_hidden: 8,
            steps_per_epoch: 5,
            lr: 1e-3,
            seed: 1,
            ..TrainConfig::default()
        }
    }

    fn data(mode: LabelMode, split: Split) -> Vec<Dataset> {
        gen_synthetic(&GenSpec { n_per_user: 300, label_mode: mode, seed: 1, ..GenSpec::default() }, 2, split).unwrap()
    }

    #[test]
    fn zero_decoder_predicts_class_zero() {
        let cfg = cfg();
        let mut state = RunState::new(&cfg, 8, 4).unwrap();
        for d in &mut state.decoders {
            d.init_params(&mut substream(0, "z"), InitScheme::Zeros);
        }
        let ds = data(LabelMode::Shared, Split::Test);
        let opts = EvalOptions::from_config(&cfg, 300);
        let r = evaluate_accuracy(&state, &cfg, &ds, 0.0, &opts, &mut substream(0, "e")).unwrap();
        for (u, acc) in r.accuracy.iter().enumerate() {
            let freq = ds[u].labels.iter().filter(|&&l| l == 0).count() as f64 / 300.0;
            assert_eq!(*acc, freq);
            assert!((acc - 0.25).abs() <= 3.0 * (1.0f64 / (4.0 * 300.0)).sqrt());
            assert!((r.ce[u] - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_shape_and_determinism() {
        let cfg = cfg();
        let ds_train = data(LabelMode::Shared, Split::Train);
        let state = train(&cfg, &ds_train).unwrap();
        let digest = state.param_digest();
        let ds = data(LabelMode::Shared, Split::Test);
        let opts = EvalOptions::from_config(&cfg, 200);
        let a = sweep_snr(&state, &cfg, &ds, &DEFAULT_SNR_GRID, &opts, 7).unwrap();
        assert_eq!(a.rows.len(), 12);
        assert!(a.rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
        let b = sweep_snr(&state, &cfg, &ds, &DEFAULT_SNR_GRID, &opts, 7).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(state.param_digest(), digest);

        let empty = sweep_snr(&state, &cfg, &ds, &[], &opts, 7).unwrap();
        assert_eq!(empty.to_csv(), "snr_db,user,accuracy,ce\n");
        let dup = sweep_snr(&state, &cfg, &ds, &[3.0, 3.0], &opts, 7).unwrap();
        assert_eq!(dup.rows.len(), 4);
        assert_eq!(dup.rows[0], dup.rows[2]);
    }

    #[test]
    fn n_eval_larger_than_data_is_rejected() {
        let cfg = cfg();
        let state = RunState::new(&cfg, 8, 4).unwrap();
        let ds = data(LabelMode::Shared, Split::Test);
        let opts = EvalOptions::from_config(&cfg, 301);
        assert!(evaluate_accuracy(&state, &cfg, &ds, 0.0, &opts, &mut substream(0, "e")).is_err());
    }

    #[test]
    fn cross_decode_contract_and_shape() {
        let cfg = cfg();
        let state = RunState::new(&cfg, 8, 4).unwrap();
        let opts = EvalOptions::from_config(&cfg, 100);
        let shared = data(LabelMode::Shared, Split::Test);
        let err = cross_decode(&state, &cfg, &shared, 0.0, &opts, &mut substream(0, "c")).unwrap_err();
        assert!(err.to_string().contains("user-specific labels"));

        let ind = data(LabelMode::Independent, Split::Test);
        let m = cross_decode(&state, &cfg, &ind, 0.0, &opts, &mut substream(0, "c")).unwrap();
        assert_eq!(m.acc.len(), 2);
        let direct = evaluate_accuracy(&state, &cfg, &ind, 0.0, &opts, &mut substream(0, "c")).unwrap();
        assert_eq!(m.diagonal(), direct.accuracy);
        assert_eq!(m.off_diagonal().len(), 2);
        assert!(m.to_csv().starts_with("decoder,target_user,accuracy\n0,0,"));
    }

    #[test]
    fn single_user_cross_decode_is_accuracy() {
        let cfg = TrainConfig { n_users: 1, ..cfg() };
        let state = RunState::new(&cfg, 8, 4).unwrap();
        let ds = vec![data(LabelMode::Shared, Split::Test).remove(0)];
        let opts = EvalOptions::from_config(&cfg, 100);
        let m = cross_decode(&state, &cfg, &ds, 0.0, &opts, &mut substream(0, "c")).unwrap();
        let a = evaluate_accuracy(&state, &cfg, &ds, 0.0, &opts, &mut substream(0, "c")).unwrap();
        assert_eq!(m.acc, vec![a.accuracy]);
    }

    #[test]
    fn latent_export() {
        let cfg = cfg();
        let state = RunState::new(&cfg, 8, 4).unwrap();
        let ds = data(LabelMode::Shared, Split::Test);
        let csv = export_latents(&state, &ds, 25).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "user,label,z_1,z_2,z_3,z_4");
        assert_eq!(lines.len(), 1 + 50);
        for l in &lines[1..] {
            let cols: Vec<&str> = l.split(',').collect();
            assert_eq!(cols.len(), 6);
            assert!(cols[2..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
        }
        assert_eq!(csv, export_latents(&state, &ds, 25).unwrap());
    }

    #[test]
    fn latent_mean_option_ignores_reparameterisation() {
        let cfg = cfg();
        let state = RunState::new(&cfg, 8, 4).unwrap();
        let ds = data(LabelMode::Shared, Split::Test);
        let opts = EvalOptions { latent_mean: true, ..EvalOptions::from_config(&cfg, 50) };
        let a = decode(&state, &cfg, &ds, f64::INFINITY, &opts, &mut substream(0, "a")).unwrap();
        let b = decode(&state, &cfg, &ds, f64::INFINITY, &opts, &mut substream(9, "b")).unwrap();
        assert_eq!(a, b);
    }
}
