//! Broadcast channel: latent power normalisation, power-weighted
//! superposition, SNR calibration and AWGN / Rayleigh transmission.
//!
//! SNR is the per-dimension received signal power divided by the per-dimension
//! noise variance. Fading gains are normalised to `E[h²] = 1`, so the same dB
//! value means the same average SNR for both channel kinds.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::rng::{standard_normal, RunRng};

/// Per-user transmit powers summing to the base-station budget.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerAllocation {
    powers: Vec<f64>,
    p_max: f64,
}

impl PowerAllocation {
    pub fn equal(n_users: usize, p_max: f64) -> Result<Self> {
        if n_users == 0 {
            return contract_err("power allocation over zero users");
        }
        Self::new(vec![p_max / n_users as f64; n_users], p_max)
    }

    /// Explicit powers; they must be non-negative and sum to `p_max`.
    pub fn new(powers: Vec<f64>, p_max: f64) -> Result<Self> {
        if !(p_max > 0.0 && p_max.is_finite()) {
            return contract_err(format!("p_max must be positive, got {p_max}"));
        }
        if powers.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return contract_err(format!("powers must be non-negative: {powers:?}"));
        }
        let total: f64 = powers.iter().sum();
        if (total - p_max).abs() > 1e-12 * p_max.max(1.0) {
            return contract_err(format!("powers sum to {total}, budget is {p_max}"));
        }
        Ok(Self { powers, p_max })
    }

    /// Scales relative weights onto the budget.
    pub fn from_weights(weights: &[f64], p_max: f64) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return contract_err("power weights must have a positive sum");
        }
        let mut powers: Vec<f64> = weights.iter().map(|w| w / total * p_max).collect();
        // Put the rounding residue on the last user so the budget holds exactly.
        let head: f64 = powers[..powers.len() - 1].iter().sum();
        *powers.last_mut().expect("nonempty") = p_max - head;
        Self::new(powers, p_max)
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    pub fn len(&self) -> usize {
        self.powers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.powers.is_empty()
    }
}

/// Target SNR in dB. `+inf` dB means a noiseless channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnrSpec {
    pub db: f64,
}

impl SnrSpec {
    pub fn db(db: f64) -> Self {
        Self { db }
    }

    pub fn linear(self) -> f64 {
        10f64.powf(self.db / 10.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ChannelKind {
    #[default]
    Awgn,
    Rayleigh,
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        })
    }
}

impl FromStr for ChannelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "awgn" => Ok(ChannelKind::Awgn),
            "rayleigh" => Ok(ChannelKind::Rayleigh),
            other => Err(format!("unknown channel kind {other:?} (awgn | rayleigh)")),
        }
    }
}

/// Gains and noise variances seen by every user in one channel use.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub kind: ChannelKind,
    pub gains: Vec<f64>,
    pub noise_vars: Vec<f64>,
}

/// One user's random channel state: the fading gain and standard-normal noise
/// (scaled by the calibrated standard deviation when applied).
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDraw {
    pub gain: f64,
    pub noise: Tensor,
}

/// Rayleigh(1/√2) sample, so that `E[h²] = 1`.
pub fn rayleigh_gain(rng: &mut RunRng) -> f64 {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    std::f64::consts::FRAC_1_SQRT_2 * (a * a + b * b).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Channel {
    pub kind: ChannelKind,
    /// Divide by the known gain at the receiver (perfect CSI).
    pub equalize: bool,
}

impl Channel {
    pub fn new(kind: ChannelKind, equalize: bool) -> Self {
        Self { kind, equalize }
    }

    pub fn draw(&self, shape: &[usize], rng: &mut RunRng) -> ChannelDraw {
        let gain = match self.kind {
            ChannelKind::Awgn => 1.0,
            ChannelKind::Rayleigh => rayleigh_gain(rng),
        };
        ChannelDraw { gain, noise: standard_normal(rng, shape) }
    }

    /// Received signal `h·s + n` (or `s + n/h` when equalising) for a fixed draw.
    /// Gradients flow through `s` only.
    pub fn apply(&self, tape: &mut Tape, s: Var, draw: &ChannelDraw, noise_var: f64) -> Result<Var> {
        if !(noise_var >= 0.0) {
            return contract_err(format!("noise variance must be non-negative, got {noise_var}"));
        }
        if tape.value(s).shape() != draw.noise.shape() {
            return dim_err(format!("signal {:?} vs noise {:?}", tape.value(s).shape(), draw.noise.shape()));
        }
        let sigma = noise_var.sqrt();
        let h = draw.gain;
        let (signal, noise_scale) = if self.kind == ChannelKind::Awgn {
            (s, sigma)
        } else if self.equalize {
            (s, sigma / h)
        } else {
            (tape.scale(s, h), sigma)
        };
        let noise = tape.constant(draw.noise.map(|n| n * noise_scale));
        tape.add(signal, noise)
    }

    /// Draws a fresh channel state and applies it.
    pub fn transmit(&self, tape: &mut Tape, s: Var, noise_var: f64, rng: &mut RunRng) -> Result<Var> {
        let draw = self.draw(tape.value(s).shape(), rng);
        self.apply(tape, s, &draw, noise_var)
    }
}

/// Rescales a latent batch so that its mean squared row norm is 1. The scale
/// factor stays on the tape.
pub fn power_normalize(tape: &mut Tape, z: Var) -> Result<Var> {
    let (rows, _) = tape.value(z).dims2()?;
    if rows == 0 {
        return contract_err("power normalisation of an empty batch");
    }
    let sq = tape.square(z);
    let total = tape.sum(sq, None)?;
    let mean_sq = tape.scale(total, 1.0 / rows as f64);
    if !(tape.value(mean_sq).item() > 0.0) {
        return Err(Error::Degenerate("latent batch has zero power".into()));
    }
    let gain = tape.powf(mean_sq, -0.5)?;
    tape.mul(z, gain)
}

/// `s = Σ_i √p_i · z_i`.
pub fn superpose(tape: &mut Tape, latents: &[Var], alloc: &PowerAllocation) -> Result<Var> {
    if latents.is_empty() || latents.len() != alloc.len() {
        return dim_err(format!("{} latents for {} power slots", latents.len(), alloc.len()));
    }
    let shape = tape.value(latents[0]).shape().to_vec();
    if let Some(bad) = latents.iter().find(|&&z| tape.value(z).shape() != shape) {
        return dim_err(format!("latent shapes {:?} vs {shape:?}", tape.value(*bad).shape()));
    }
    let mut s = tape.scale(latents[0], alloc.powers()[0].sqrt());
    for (&z, &p) in latents.iter().zip(alloc.powers()).skip(1) {
        let term = tape.scale(z, p.sqrt());
        s = tape.add(s, term)?;
    }
    Ok(s)
}

/// Per-dimension noise variance achieving `snr` for the signal batch `s`.
pub fn calibrate_noise(s: &Tensor, snr: SnrSpec) -> Result<f64> {
    let (rows, dims) = s.dims2()?;
    if rows == 0 || dims == 0 {
        return contract_err("noise calibration on an empty batch");
    }
    let power = s.data().iter().map(|x| x * x).sum::<f64>() / (rows * dims) as f64;
    if !(power > 0.0) {
        return Err(Error::Degenerate("signal batch has zero power".into()));
    }
    Ok(power / snr.linear())
}
