//! Two-phase training: encode all users, superpose, transmit, update the pair
//! estimators on detached latents (Phase-A), then update every encoder and
//! decoder on the full objective with the estimators frozen (Phase-B).

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{Tape, Tensor, Var};
use crate::channel::{
    calibrate_noise, power_normalize, superpose, Channel, ChannelDraw, ChannelKind, PowerAllocation, SnrSpec,
};
use crate::club::{ordered_pairs, BankSpec, PairDiagnostics, PairEstimatorBank, PhaseAMode, CLUB_LR, PHASE_A_STEPS};
use crate::codec::{write_atomic, ByteReader, ByteWriter};
use crate::data::{BatchPair, BatchSampler, Dataset, LabelMode};
use crate::error::{contract_err, Error, Result};
use crate::nn::{
    predict, AdamState, Bound, Decoder, GaussianEncoder, GaussianLatent, InitScheme, Network, TensorBlock,
};
use crate::objectives::{
    cross_entropy, kl_to_std_normal, toib_loss, toib_loss_on_tape, vclub_pair, LossBreakdown, PairValue,
};
use crate::rng::{standard_normal, substream, RngState, RunRng};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TOIB";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which loss the Phase-B update minimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Objective {
    /// Cross-entropy, KL and the vCLUB orthogonality term.
    #[default]
    Toib,
    /// Cross-entropy and KL only. Estimators are still trained as monitors.
    Vib,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Toib => "toib",
            Objective::Vib => "vib",
        })
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "toib" => Ok(Objective::Toib),
            "vib" => Ok(Objective::Vib),
            other => Err(format!("unknown objective {other:?} (toib | vib)")),
        }
    }
}

/// How the power budget is split across users.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum PowerMode {
    #[default]
    Equal,
    /// Relative weights, rescaled onto `p_max`.
    Weights(Vec<f64>),
}

impl fmt::Display for PowerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PowerMode::Equal => f.write_str("equal"),
            PowerMode::Weights(w) => {
                let parts: Vec<String> = w.iter().map(f64::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for PowerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "equal" {
            return Ok(PowerMode::Equal);
        }
        s.split(',')
            .map(|w| w.trim().parse::<f64>().map_err(|e| format!("power weight {w:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(PowerMode::Weights)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_users: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Channel resamples `L` per step; 0 decodes the noiseless superposition.
    pub channel_resamples: usize,
    /// Phase-A steps `M` per training step.
    pub phase_a_steps: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub club_lr: f64,
    pub latent_dim: usize,
    pub hidden: usize,
    pub club_hidden: usize,
    pub channel: ChannelKind,
    pub equalize: bool,
    pub train_snr_db: f64,
    pub p_max: f64,
    pub power: PowerMode,
    pub seed: u64,
    pub phase_a_mode: PhaseAMode,
    pub label_mode: LabelMode,
    pub objective: Objective,
    /// Batches per epoch; 0 means `ceil(n / V)`.
    pub steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_users: 2,
            epochs: 100,
            batch_size: 64,
            channel_resamples: 1,
            phase_a_steps: PHASE_A_STEPS,
            alpha: 0.01,
            beta: 0.01,
            lr: 1e-4,
            club_lr: CLUB_LR,
            latent_dim: 16,
            hidden: 128,
            club_hidden: 64,
            channel: ChannelKind::Awgn,
            equalize: true,
            train_snr_db: 5.0,
            p_max: 1.0,
            power: PowerMode::Equal,
            seed: 0,
            phase_a_mode: PhaseAMode::Mle,
            label_mode: LabelMode::Shared,
            objective: Objective::Toib,
            steps_per_epoch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| -> Result<()> {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                contract_err(format!("{name} ≥ 0 required, got {v}"))
            }
        };
        nonneg("alpha", self.alpha)?;
        nonneg("beta", self.beta)?;
        nonneg("lr", self.lr)?;
        nonneg("club_lr", self.club_lr)?;
        if self.batch_size < 2 {
            return contract_err(format!("batch_size ≥ 2 required, got {}", self.batch_size));
        }
        for (name, v) in [
            ("n_users", self.n_users),
            ("latent_dim", self.latent_dim),
            ("hidden", self.hidden),
            ("club_hidden", self.club_hidden),
        ] {
            if v == 0 {
                return contract_err(format!("{name} ≥ 1 required"));
            }
        }
        if self.train_snr_db.is_nan() {
            return contract_err("train_snr_db must be a number");
        }
        self.allocation().map(|_| ())
    }

    pub fn allocation(&self) -> Result<PowerAllocation> {
        match &self.power {
            PowerMode::Equal => PowerAllocation::equal(self.n_users, self.p_max),
            PowerMode::Weights(w) if w.len() == self.n_users => PowerAllocation::from_weights(w, self.p_max),
            PowerMode::Weights(w) => contract_err(format!("{} power weights for {} users", w.len(), self.n_users)),
        }
    }

    pub fn channel(&self) -> Channel {
        Channel::new(self.channel, self.equalize)
    }
}

/// Randomness consumed by one step: reparameterisation noise per user and
/// one channel draw per (resample, user).
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    pub eps: Vec<Tensor>,
    pub draws: Vec<Vec<ChannelDraw>>,
}

impl StepNoise {
    pub fn draw(
        rng: &mut RunRng,
        n_users: usize,
        rows: usize,
        latent_dim: usize,
        resamples: usize,
        channel: Channel,
    ) -> Self {
        let eps = (0..n_users).map(|_| standard_normal(rng, &[rows, latent_dim])).collect();
        let draws =
            (0..resamples).map(|_| (0..n_users).map(|_| channel.draw(&[rows, latent_dim], rng)).collect()).collect();
        Self { eps, draws }
    }
}

/// Tape handles produced by one pass through the broadcast pipeline.
#[derive(Clone, Debug)]
pub struct Forward {
    pub latents: Vec<GaussianLatent>,
    pub z_norm: Vec<Var>,
    pub signal: Var,
    pub noise_var: f64,
    /// Decoder logits, indexed `[resample][user]`.
    pub logits: Vec<Vec<Var>>,
}

/// Noise level of the channel in [`forward_pipeline`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseLevel {
    /// Variance calibrated from the superposed batch to hit this SNR.
    Snr(SnrSpec),
    /// Fixed per-dimension variance.
    Variance(f64),
}

/// Encoders and decoders bound on a tape.
pub struct BoundNets<'a> {
    pub encoders: &'a [GaussianEncoder],
    pub decoders: &'a [Decoder],
    pub enc: Vec<Bound>,
    pub dec: Vec<Bound>,
}

impl<'a> BoundNets<'a> {
    pub fn bind(tape: &mut Tape, encoders: &'a [GaussianEncoder], decoders: &'a [Decoder], trainable: bool) -> Self {
        let enc = encoders.iter().map(|e| e.bind(tape, trainable)).collect();
        let dec = decoders.iter().map(|d| d.bind(tape, trainable)).collect();
        Self { encoders, decoders, enc, dec }
    }
}

/// Encode → (reparameterise) → normalise → superpose → transmit → decode.
/// With `eps = None` the latent mean is transmitted. An empty `draws` list
/// decodes the noiseless superposed signal.
#[allow(clippy::too_many_arguments)]
pub fn forward_pipeline(
    tape: &mut Tape,
    nets: &BoundNets<'_>,
    inputs: &[Tensor],
    eps: Option<&[Tensor]>,
    draws: &[Vec<ChannelDraw>],
    channel: Channel,
    alloc: &PowerAllocation,
    level: NoiseLevel,
) -> Result<Forward> {
    let n = nets.encoders.len();
    if inputs.len() != n || nets.decoders.len() != n {
        return contract_err(format!("{} inputs for {n} encoders / {} decoders", inputs.len(), nets.decoders.len()));
    }
    let mut latents = Vec::with_capacity(n);
    let mut z_norm = Vec::with_capacity(n);
    for u in 0..n {
        let x = tape.constant(inputs[u].clone());
        let lat = nets.encoders[u].forward(tape, &nets.enc[u], x)?;
        let z = match eps {
            Some(eps) => {
                let e = tape.constant(eps[u].clone());
                tape.reparam(lat.mu, lat.logvar, e)?
            }
            None => lat.mu,
        };
        z_norm.push(power_normalize(tape, z)?);
        latents.push(lat);
    }
    let signal = superpose(tape, &z_norm, alloc)?;
    let noise_var = match level {
        NoiseLevel::Snr(snr) => calibrate_noise(tape.value(signal), snr)?,
        NoiseLevel::Variance(v) => v,
    };
    let mut logits = Vec::with_capacity(draws.len().max(1));
    if draws.is_empty() {
        let row = (0..n).map(|u| nets.decoders[u].forward(tape, &nets.dec[u], signal)).collect::<Result<Vec<_>>>()?;
        logits.push(row);
    }
    for draw in draws {
        if draw.len() != n {
            return contract_err(format!("{} channel draws for {n} users", draw.len()));
        }
        let mut row = Vec::with_capacity(n);
        for (u, d) in draw.iter().enumerate() {
            let y = channel.apply(tape, signal, d, noise_var)?;
            row.push(nets.decoders[u].forward(tape, &nets.dec[u], y)?);
        }
        logits.push(row);
    }
    Ok(Forward { latents, z_norm, signal, noise_var, logits })
}

/// Per-user cross-entropy averaged over the channel resamples.
pub fn resample_mean_ce(tape: &mut Tape, fwd: &Forward, labels: &[Vec<usize>]) -> Result<Vec<Var>> {
    let n = fwd.z_norm.len();
    let l = fwd.logits.len();
    (0..n)
        .map(|u| {
            let mut acc: Option<Var> = None;
            for row in &fwd.logits {
                let ce = cross_entropy(tape, row[u], &labels[u])?;
                acc = Some(match acc {
                    None => ce,
                    Some(a) => tape.add(a, ce)?,
                });
            }
            let total = acc.expect("at least one logits row");
            Ok(if l == 1 { total } else { tape.scale(total, 1.0 / l as f64) })
        })
        .collect()
}

/// Everything a training run owns.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub encoders: Vec<GaussianEncoder>,
    pub decoders: Vec<Decoder>,
    pub enc_adam: Vec<AdamState>,
    pub dec_adam: Vec<AdamState>,
    pub bank: PairEstimatorBank,
    pub batch_rng: RunRng,
    pub noise_rng: RunRng,
    pub step: u64,
    pub epoch: u64,
    pub history: MetricsLog,
}

/// Result of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub phase_a: Vec<PairDiagnostics>,
    /// Estimator updates performed during this step.
    pub phase_a_updates: u64,
    /// Correct first-resample predictions per user.
    pub correct: Vec<usize>,
}

impl RunState {
    /// Fresh networks for inputs of width `input_dim` and `n_classes` labels.
    pub fn new(cfg: &TrainConfig, input_dim: usize, n_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_users;
        let mut encoders = Vec::with_capacity(n);
        let mut decoders = Vec::with_capacity(n);
        for u in 0..n {
            let mut enc = GaussianEncoder::new(&[input_dim, cfg.hidden, cfg.hidden], cfg.latent_dim);
            enc.init_params(&mut substream(cfg.seed, &format!("init/encoder/{u}")), InitScheme::XavierUniform);
            let mut dec = Decoder::new(&[cfg.latent_dim, cfg.hidden, n_classes]);
            dec.init_params(&mut substream(cfg.seed, &format!("init/decoder/{u}")), InitScheme::XavierUniform);
            encoders.push(enc);
            decoders.push(dec);
        }
        let enc_adam = encoders.iter().map(|e| AdamState::new(e, cfg.lr)).collect();
        let dec_adam = decoders.iter().map(|d| AdamState::new(d, cfg.lr)).collect();
        let bank = PairEstimatorBank::new(
            BankSpec {
                n_users: n,
                latent_dim: cfg.latent_dim,
                n_classes,
                hidden: cfg.club_hidden,
                lr: cfg.club_lr,
                steps: cfg.phase_a_steps,
                mode: cfg.phase_a_mode,
            },
            cfg.seed,
        );
        Ok(Self {
            encoders,
            decoders,
            enc_adam,
            dec_adam,
            bank,
            batch_rng: substream(cfg.seed, "train/batches"),
            noise_rng: substream(cfg.seed, "train/noise"),
            step: 0,
            epoch: 0,
            history: MetricsLog::default(),
        })
    }

    pub fn n_users(&self) -> usize {
        self.encoders.len()
    }

    pub fn n_classes(&self) -> usize {
        self.decoders[0].n_classes()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoders[0].latent_dim()
    }

    /// Draws a batch and step noise from the run's streams and trains on them.
    pub fn step_once(&mut self, cfg: &TrainConfig, sampler: &BatchSampler<'_>) -> Result<StepReport> {
        let batch = sampler.sample(&mut self.batch_rng);
        let (n, d) = (self.n_users(), self.latent_dim());
        let noise = StepNoise::draw(&mut self.noise_rng, n, batch.size(), d, cfg.channel_resamples, cfg.channel());
        self.train_step(cfg, &batch, &noise)
    }

    /// One Phase-A + Phase-B step on a given batch and noise draw.
    pub fn train_step(&mut self, cfg: &TrainConfig, batch: &BatchPair, noise: &StepNoise) -> Result<StepReport> {
        if batch.n_users() != self.n_users() {
            return contract_err(format!("batch for {} users, run has {}", batch.n_users(), self.n_users()));
        }
        let alloc = cfg.allocation()?;
        let mut tape = Tape::new();
        let nets = BoundNets::bind(&mut tape, &self.encoders, &self.decoders, true);
        let fwd = forward_pipeline(
            &mut tape,
            &nets,
            &batch.inputs,
            Some(&noise.eps),
            &noise.draws,
            cfg.channel(),
            &alloc,
            NoiseLevel::Snr(SnrSpec::db(cfg.train_snr_db)),
        )?;
        let ce = resample_mean_ce(&mut tape, &fwd, &batch.labels)?;
        let kl = fwd.latents.iter().map(|&lat| kl_to_std_normal(&mut tape, lat)).collect::<Result<Vec<_>>>()?;

        // Phase-A on values detached from this tape.
        let detached: Vec<Tensor> = fwd.z_norm.iter().map(|&z| tape.value(z).clone()).collect();
        let updates_before = self.bank.update_count();
        let phase_a = self.bank.phase_a_update_with(&detached, |i, j| batch.partition(i, j))?;
        let phase_a_updates = self.bank.update_count() - updates_before;

        // Phase-B with the estimators frozen.
        let total = match cfg.objective {
            Objective::Toib => {
                let mut vclub = Vec::with_capacity(self.bank.len());
                if cfg.alpha != 0.0 {
                    for est in self.bank.pairs() {
                        let frozen = est.net.bind(&mut tape, false);
                        let part = batch.partition(est.i, est.j);
                        let terms =
                            vclub_pair(&mut tape, &est.net, &frozen, fwd.z_norm[est.i], fwd.z_norm[est.j], &part)?;
                        vclub.push(terms.estimate);
                    }
                }
                toib_loss_on_tape(&mut tape, &ce, &kl, &vclub, cfg.alpha, cfg.beta)?
            }
            Objective::Vib => toib_loss_on_tape(&mut tape, &ce, &kl, &[], 0.0, cfg.beta)?,
        };

        let ce_v: Vec<f64> = ce.iter().map(|&v| tape.value(v).item()).collect();
        let kl_v: Vec<f64> = kl.iter().map(|&v| tape.value(v).item()).collect();
        let pairs: Vec<PairValue> = phase_a.iter().map(|d| PairValue { i: d.i, j: d.j, value: d.vclub }).collect();
        let alpha = if cfg.objective == Objective::Vib { 0.0 } else { cfg.alpha };
        let mut loss = toib_loss(&ce_v, &kl_v, &pairs, alpha, cfg.beta)?;
        loss.total = tape.value(total).item();
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                dump: format!("ce={:?} kl={:?} vclub={:?}", loss.ce, loss.kl, pairs),
            });
        }
        let correct = batch
            .labels
            .iter()
            .zip(&fwd.logits[0])
            .map(|(labels, &logits)| predict(tape.value(logits)).iter().zip(labels).filter(|(p, u)| p == u).count())
            .collect();

        tape.backward(total)?;
        let BoundNets { enc, dec, .. } = nets;
        for ((net, adam), bound) in self.encoders.iter_mut().zip(&mut self.enc_adam).zip(&enc) {
            adam.step_network(net, bound, &tape)?;
        }
        for ((net, adam), bound) in self.decoders.iter_mut().zip(&mut self.dec_adam).zip(&dec) {
            adam.step_network(net, bound, &tape)?;
        }
        self.step += 1;
        Ok(StepReport { loss, phase_a, phase_a_updates, correct })
    }

    /// Checkpoint bytes: magic, version, network blocks, then run counters and
    /// RNG positions. The metric history is not stored.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blocks = Vec::new();
        let adam_blocks = |blocks: &mut Vec<TensorBlock>, name: &str, a: &AdamState| {
            blocks.push(TensorBlock { name: format!("{name}/adam_m"), tensors: a.m.clone() });
            blocks.push(TensorBlock { name: format!("{name}/adam_v"), tensors: a.v.clone() });
        };
        for (u, (e, a)) in self.encoders.iter().zip(&self.enc_adam).enumerate() {
            let name = format!("encoder/{u}");
            blocks.push(TensorBlock::from_network(&name, e));
            adam_blocks(&mut blocks, &name, a);
        }
        for (u, (d, a)) in self.decoders.iter().zip(&self.dec_adam).enumerate() {
            let name = format!("decoder/{u}");
            blocks.push(TensorBlock::from_network(&name, d));
            adam_blocks(&mut blocks, &name, a);
        }
        for est in self.bank.pairs() {
            let name = format!("club/{}/{}", est.i, est.j);
            blocks.push(TensorBlock::from_network(&name, &est.net));
            adam_blocks(&mut blocks, &name, &est.adam);
        }

        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(blocks.len() as u32);
        for b in &blocks {
            b.write(&mut w);
        }
        w.u64(self.step);
        w.u64(self.epoch);
        w.u64(self.bank.update_count());
        for a in self.adam_states() {
            w.u64(a.step);
        }
        for rng in [&self.batch_rng, &self.noise_rng] {
            let s = RngState::capture(rng);
            w.bytes(&s.seed);
            w.u64(s.stream);
            w.u128(s.word_pos);
        }
        w.finish()
    }

    fn adam_states(&self) -> Vec<&AdamState> {
        self.enc_adam.iter().chain(&self.dec_adam).chain(self.bank.pairs().iter().map(|p| &p.adam)).collect()
    }

    /// Restores a checkpoint written for the same configuration and data shape.
    pub fn from_bytes(bytes: &[u8], cfg: &TrainConfig, input_dim: usize, n_classes: usize) -> Result<Self> {
        let mut state = Self::new(cfg, input_dim, n_classes)?;
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format { offset: 0, reason: "bad checkpoint magic".into() });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format { offset: 4, reason: format!("unsupported checkpoint version {version}") });
        }
        let count = r.u32()? as usize;
        let expected = 3 * (2 * state.n_users() + state.bank.len());
        if count != expected {
            return r.fail(format!("{count} blocks, configuration needs {expected}"));
        }

        fn load(r: &mut ByteReader<'_>, name: &str, net: &mut impl Network, adam: &mut AdamState) -> Result<()> {
            for (suffix, slot) in [("", 0), ("/adam_m", 1), ("/adam_v", 2)] {
                let at = r.offset();
                let block = TensorBlock::read(r)?;
                let want = format!("{name}{suffix}");
                if block.name != want {
                    return Err(Error::Format {
                        offset: at,
                        reason: format!("expected block {want}, found {}", block.name),
                    });
                }
                let res = match slot {
                    0 => net.load_tensors(block.tensors),
                    1 => replace_same_shape(&mut adam.m, block.tensors),
                    _ => replace_same_shape(&mut adam.v, block.tensors),
                };
                res.map_err(|e| Error::Format { offset: at, reason: format!("block {want}: {e}") })?;
            }
            Ok(())
        }

        for u in 0..state.n_users() {
            load(&mut r, &format!("encoder/{u}"), &mut state.encoders[u], &mut state.enc_adam[u])?;
        }
        for u in 0..state.n_users() {
            load(&mut r, &format!("decoder/{u}"), &mut state.decoders[u], &mut state.dec_adam[u])?;
        }
        for est in state.bank.pairs_mut() {
            let name = format!("club/{}/{}", est.i, est.j);
            load(&mut r, &name, &mut est.net, &mut est.adam)?;
        }

        state.step = r.u64()?;
        state.epoch = r.u64()?;
        let updates = r.u64()?;
        state.bank.restore_update_count(updates);
        let n_adam = state.adam_states().len();
        let mut steps = Vec::with_capacity(n_adam);
        for _ in 0..n_adam {
            steps.push(r.u64()?);
        }
        let mut adams: Vec<&mut AdamState> = state
            .enc_adam
            .iter_mut()
            .chain(state.dec_adam.iter_mut())
            .chain(state.bank.pairs_mut().iter_mut().map(|p| &mut p.adam))
            .collect();
        for (a, s) in adams.iter_mut().zip(steps) {
            a.step = s;
        }
        let mut rngs = Vec::with_capacity(2);
        for _ in 0..2 {
            let mut seed = [0u8; 32];
            seed.copy_from_slice(r.take(32)?);
            let stream = r.u64()?;
            let word_pos = r.u128()?;
            rngs.push(RngState { seed, stream, word_pos }.restore());
        }
        r.expect_end()?;
        state.noise_rng = rngs.pop().expect("two streams");
        state.batch_rng = rngs.pop().expect("two streams");
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, cfg: &TrainConfig, input_dim: usize, n_classes: usize) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, cfg, input_dim, n_classes)
    }

    /// Order-sensitive FNV-1a digest of every parameter bit pattern.
    pub fn param_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |t: &Tensor| {
            for x in t.data() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        for e in &self.encoders {
            e.tensors().into_iter().for_each(&mut feed);
        }
        for d in &self.decoders {
            d.tensors().into_iter().for_each(&mut feed);
        }
        for p in self.bank.pairs() {
            p.net.tensors().into_iter().for_each(&mut feed);
        }
        h
    }
}

fn replace_same_shape(slots: &mut [Tensor], tensors: Vec<Tensor>) -> Result<()> {
    if slots.len() != tensors.len() {
        return contract_err(format!("expected {} tensors, got {}", slots.len(), tensors.len()));
    }
    if let Some((s, t)) = slots.iter().zip(&tensors).find(|(s, t)| s.shape() != t.shape()) {
        return contract_err(format!("tensor shape {:?} != {:?}", t.shape(), s.shape()));
    }
    for (s, t) in slots.iter_mut().zip(tensors) {
        *s = t;
    }
    Ok(())
}

/// Per-user training metrics averaged over one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct UserMetrics {
    pub ce: f64,
    pub kl: f64,
    pub acc_train: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub users: Vec<UserMetrics>,
    pub pairs: Vec<PairValue>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricsLog {
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsLog {
    /// Two CSV tables separated by a blank line: per-user rows
    /// `epoch,user,ce,kl,acc_train`, then per-pair rows `epoch,pair_i,pair_j,vclub`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,user,ce,kl,acc_train\n");
        for e in &self.epochs {
            for (u, m) in e.users.iter().enumerate() {
                writeln!(out, "{},{u},{},{},{}", e.epoch, m.ce, m.kl, m.acc_train).expect("string write");
            }
        }
        out.push_str("\nepoch,pair_i,pair_j,vclub\n");
        for e in &self.epochs {
            for p in &e.pairs {
                writeln!(out, "{},{},{},{}", e.epoch, p.i, p.j, p.value).expect("string write");
            }
        }
        out
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

/// Trains from `state.epoch` up to `cfg.epochs` epochs, appending one metrics
/// row set per epoch.
pub fn train_epochs(state: &mut RunState, cfg: &TrainConfig, datasets: &[Dataset]) -> Result<()> {
    cfg.validate()?;
    if datasets.len() != cfg.n_users {
        return contract_err(format!("{} datasets for {} users", datasets.len(), cfg.n_users));
    }
    let sampler = BatchSampler::new(datasets, cfg.batch_size, cfg.label_mode)?;
    let steps = if cfg.steps_per_epoch == 0 { sampler.steps_per_epoch() } else { cfg.steps_per_epoch };
    let n = cfg.n_users;
    while (state.epoch as usize) < cfg.epochs {
        let mut ce = vec![0.0; n];
        let mut kl = vec![0.0; n];
        let mut correct = vec![0usize; n];
        let mut pair_sum: Vec<f64> = vec![0.0; state.bank.len()];
        for _ in 0..steps {
            let report = state.step_once(cfg, &sampler)?;
            for u in 0..n {
                ce[u] += report.loss.ce[u];
                kl[u] += report.loss.kl[u];
                correct[u] += report.correct[u];
            }
            for (acc, p) in pair_sum.iter_mut().zip(&report.loss.vclub) {
                *acc += p.value;
            }
        }
        let s = steps as f64;
        let seen = (steps * cfg.batch_size) as f64;
        let users =
            (0..n).map(|u| UserMetrics { ce: ce[u] / s, kl: kl[u] / s, acc_train: correct[u] as f64 / seen }).collect();
        let pairs = ordered_pairs(n).zip(&pair_sum).map(|((i, j), v)| PairValue { i, j, value: v / s }).collect();
        state.epoch += 1;
        state.history.epochs.push(EpochMetrics { epoch: state.epoch, users, pairs });
    }
    Ok(())
}

/// Fresh run of `cfg.epochs` epochs.
pub fn train(cfg: &TrainConfig, datasets: &[Dataset]) -> Result<RunState> {
    let Some(first) = datasets.first() else {
        return contract_err("no datasets");
    };
    let mut state = RunState::new(cfg, first.input_dim(), first.n_classes)?;
    train_epochs(&mut state, cfg, datasets)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, GenSpec, Split};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            latent_dim: 4,
            hidden: 16,
            club_hidden: 8,
            steps_per_epoch: 5,
            lr: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn data(n_users: usize, mode: LabelMode) -> Vec<Dataset> {
        let spec = GenSpec { n_per_user: 200, label_mode: mode, seed: 3, ..GenSpec::default() };
        gen_synthetic(&spec, n_users, Split::Train).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let err = TrainConfig { alpha: -1.0, ..TrainConfig::default() }.validate().unwrap_err();
        assert!(err.to_string().contains("alpha ≥ 0"), "{err}");
        assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { power: PowerMode::Weights(vec![1.0]), ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { power: PowerMode::Weights(vec![3.0, 1.0]), ..TrainConfig::default() }.validate().is_ok());
    }

    #[test]
    fn power_mode_round_trips() {
        for s in ["equal", "0.7,0.3"] {
            assert_eq!(s.parse::<PowerMode>().unwrap().to_string(), s);
        }
        assert!("a,b".parse::<PowerMode>().is_err());
    }

    #[test]
    fn zero_epochs_leave_state_unchanged() {
        let cfg = TrainConfig { epochs: 0, ..small_cfg() };
        let ds = data(2, LabelMode::Shared);
        let state = train(&cfg, &ds).unwrap();
        assert_eq!(state, RunState::new(&cfg, 8, 4).unwrap());
    }

    #[test]
    fn single_user_has_no_orthogonality_term() {
        let cfg = TrainConfig { n_users: 1, ..small_cfg() };
        let ds = data(1, LabelMode::Shared);
        let mut state = RunState::new(&cfg, 8, 4).unwrap();
        let sampler = BatchSampler::new(&ds, cfg.batch_size, cfg.label_mode).unwrap();
        let r = state.step_once(&cfg, &sampler).unwrap();
        assert!(r.loss.vclub.is_empty());
        assert_eq!(r.phase_a_updates, 0);
        assert_eq!(r.loss.total, r.loss.ce[0] + cfg.beta * r.loss.kl[0]);
    }

    #[test]
    fn phase_a_update_count_is_m_n_n_minus_one() {
        for n in 1..=4 {
            let cfg = TrainConfig { n_users: n, phase_a_steps: 3, ..small_cfg() };
            let ds = data(n, LabelMode::Shared);
            let mut state = RunState::new(&cfg, 8, 4).unwrap();
            let sampler = BatchSampler::new(&ds, cfg.batch_size, cfg.label_mode).unwrap();
            for _ in 0..2 {
                let r = state.step_once(&cfg, &sampler).unwrap();
                assert_eq!(r.phase_a_updates, (3 * n * (n - 1)) as u64);
            }
        }
    }

    #[test]
    fn alpha_zero_matches_vib_bitwise() {
        let ds = data(2, LabelMode::Shared);
        let toib = train(&TrainConfig { alpha: 0.0, ..small_cfg() }, &ds).unwrap();
        let vib = train(&TrainConfig { objective: Objective::Vib, ..small_cfg() }, &ds).unwrap();
        assert_eq!(toib.encoders, vib.encoders);
        assert_eq!(toib.decoders, vib.decoders);
        assert_eq!(toib.history.to_csv(), vib.history.to_csv());
        let with_alpha = train(&small_cfg(), &ds).unwrap();
        assert_ne!(with_alpha.encoders, vib.encoders);
    }

    #[test]
    fn reported_total_matches_value_level_sum() {
        let cfg = small_cfg();
        let ds = data(2, LabelMode::Shared);
        let mut state = RunState::new(&cfg, 8, 4).unwrap();
        let sampler = BatchSampler::new(&ds, cfg.batch_size, cfg.label_mode).unwrap();
        let r = state.step_once(&cfg, &sampler).unwrap();
        let check = toib_loss(&r.loss.ce, &r.loss.kl, &r.loss.vclub, cfg.alpha, cfg.beta).unwrap();
        assert_eq!(r.loss.total, check.total);
    }

    #[test]
    fn two_resamples_average_two_single_passes() {
        let cfg = TrainConfig { channel_resamples: 2, ..small_cfg() };
        let ds = data(2, LabelMode::Shared);
        let state = RunState::new(&cfg, 8, 4).unwrap();
        let sampler = BatchSampler::new(&ds, cfg.batch_size, cfg.label_mode).unwrap();
        let batch = sampler.sample(&mut substream(0, "b"));
        let noise = StepNoise::draw(&mut substream(0, "n"), 2, 16, 4, 2, cfg.channel());
        let ce_of = |draws: &[Vec<ChannelDraw>]| -> Vec<f64> {
            let mut tape = Tape::new();
            let nets = BoundNets::bind(&mut tape, &state.encoders, &state.decoders, false);
            let fwd = forward_pipeline(
                &mut tape,
                &nets,
                &batch.inputs,
                Some(&noise.eps),
                draws,
                cfg.channel(),
                &cfg.allocation().unwrap(),
                NoiseLevel::Snr(SnrSpec::db(cfg.train_snr_db)),
            )
            .unwrap();
            let ce = resample_mean_ce(&mut tape, &fwd, &batch.labels).unwrap();
            ce.iter().map(|&v| tape.value(v).item()).collect()
        };
        let both = ce_of(&noise.draws);
        let first = ce_of(&noise.draws[..1]);
        let second = ce_of(&noise.draws[1..]);
        for u in 0..2 {
            let mean = 0.5 * (first[u] + second[u]);
            assert!((both[u] - mean).abs() < 1e-14, "{} vs {mean}", both[u]);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = data(2, LabelMode::Independent);
        let cfg = TrainConfig { label_mode: LabelMode::Independent, ..small_cfg() };
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.epochs.len(), 2);
        let csv = a.history.to_csv();
        assert!(csv.starts_with("epoch,user,ce,kl,acc_train\n1,0,"));
        assert!(csv.contains("\nepoch,pair_i,pair_j,vclub\n1,0,1,"));
    }

    #[test]
    fn zero_learning_rate_freezes_networks() {
        let cfg = TrainConfig { lr: 0.0, ..small_cfg() };
        let ds = data(2, LabelMode::Shared);
        let fresh = RunState::new(&cfg, 8, 4).unwrap();
        let trained = train(&cfg, &ds).unwrap();
        assert_eq!(fresh.encoders, trained.encoders);
        assert_eq!(fresh.decoders, trained.decoders);
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let cfg = small_cfg();
        let ds = data(2, LabelMode::Shared);
        let sampler = BatchSampler::new(&ds, cfg.batch_size, cfg.label_mode).unwrap();
        let mut straight = RunState::new(&cfg, 8, 4).unwrap();
        for _ in 0..3 {
            straight.step_once(&cfg, &sampler).unwrap();
        }
        let bytes = straight.to_bytes();
        let mut resumed = RunState::from_bytes(&bytes, &cfg, 8, 4).unwrap();
        assert_eq!(resumed, straight);
        for _ in 0..10 {
            let a = straight.step_once(&cfg, &sampler).unwrap();
            let b = resumed.step_once(&cfg, &sampler).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(resumed, straight);
    }

    #[test]
    fn checkpoint_failures() {
        let cfg = small_cfg();
        let bytes = RunState::new(&cfg, 8, 4).unwrap().to_bytes();
        let fmt = |b: &[u8]| matches!(RunState::from_bytes(b, &cfg, 8, 4), Err(Error::Format { .. }));
        assert!(fmt(&bytes[..bytes.len() - 3]));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(fmt(&bad));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(fmt(&bad));
        let mut long = bytes.clone();
        long.push(0);
        assert!(fmt(&long));
        // Same bytes under a different latent size.
        let other = TrainConfig { latent_dim: 5, ..cfg.clone() };
        assert!(matches!(RunState::from_bytes(&bytes, &other, 8, 4), Err(Error::Format { .. })));
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let cfg = small_cfg();
        let ds = data(2, LabelMode::Shared);
        let mut state = RunState::new(&cfg, 8, 4).unwrap();
        state.decoders[0].mlp.linears_mut()[1].bias.data_mut()[0] = f64::INFINITY;
        let sampler = BatchSampler::new(&ds, cfg.batch_size, cfg.label_mode).unwrap();
        match state.step_once(&cfg, &sampler) {
            Err(Error::NonFinite { step: 0, dump }) => assert!(dump.contains("ce=")),
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn noiseless_decoding_with_zero_resamples() {
        let cfg = TrainConfig { channel_resamples: 0, ..small_cfg() };
        let ds = data(2, LabelMode::Shared);
        let state = train(&cfg, &ds).unwrap();
        assert!(state.history.epochs.iter().all(|e| e.users.iter().all(|u| u.ce.is_finite())));
    }
}
