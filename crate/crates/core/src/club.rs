//! Phase-A training of the per-pair CLUB estimators, and the correlated
//! Gaussian oracle used to validate them.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Tensor};
use crate::error::{contract_err, Error, Result};
use crate::nn::{AdamState, ClubNet, InitScheme, Network};
use crate::objectives::{club_log_density, vclub_pair, ClassPartition};
use crate::rng::{standard_normal, substream, RunRng};

/// Default estimator learning rate.
pub const CLUB_LR: f64 = 1e-3;
/// Default Phase-A steps per training step.
pub const PHASE_A_STEPS: usize = 5;

/// What Phase-A ascends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PhaseAMode {
    /// Matched-pair log-likelihood `mean_v log q(z_j^v | z_i^v, w^v)`.
    #[default]
    Mle,
    /// The vCLUB estimate itself.
    VclubAscent,
}

impl fmt::Display for PhaseAMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseAMode::Mle => "mle",
            PhaseAMode::VclubAscent => "vclub_ascent",
        })
    }
}

impl FromStr for PhaseAMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mle" => Ok(PhaseAMode::Mle),
            "vclub_ascent" => Ok(PhaseAMode::VclubAscent),
            other => Err(format!("unknown phase-A mode {other:?} (mle | vclub_ascent)")),
        }
    }
}

/// Values of one estimator on the batch it was just trained on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairDiagnostics {
    pub i: usize,
    pub j: usize,
    pub matched_ll: f64,
    pub vclub: f64,
}

/// `q_ψ(z_j | z_i, w)` for one ordered user pair with its optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct PairEstimator {
    pub i: usize,
    pub j: usize,
    pub net: ClubNet,
    pub adam: AdamState,
}

impl PairEstimator {
    pub fn new(i: usize, j: usize, net: ClubNet, lr: f64) -> Self {
        let adam = AdamState::new(&net, lr);
        Self { i, j, net, adam }
    }

    /// One gradient-ascent step on fixed latents.
    pub fn update(&mut self, z_i: &Tensor, z_j: &Tensor, part: &ClassPartition, mode: PhaseAMode) -> Result<()> {
        let mut tape = Tape::new();
        let zi = tape.constant(z_i.clone());
        let zj = tape.constant(z_j.clone());
        let bound = self.net.bind(&mut tape, true);
        let target = match mode {
            PhaseAMode::Mle => {
                let rows = club_log_density(&mut tape, &self.net, &bound, zi, zj, part.classes())?;
                tape.mean(rows, None)?
            }
            PhaseAMode::VclubAscent => vclub_pair(&mut tape, &self.net, &bound, zi, zj, part)?.estimate,
        };
        let loss = tape.neg(target);
        tape.backward(loss)?;
        self.adam.step_network(&mut self.net, &bound, &tape)
    }

    /// Matched log-likelihood and vCLUB estimate without updating.
    pub fn evaluate(&self, z_i: &Tensor, z_j: &Tensor, part: &ClassPartition) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let zi = tape.constant(z_i.clone());
        let zj = tape.constant(z_j.clone());
        let bound = self.net.bind(&mut tape, false);
        let terms = vclub_pair(&mut tape, &self.net, &bound, zi, zj, part)?;
        Ok((tape.value(terms.matched).item(), tape.value(terms.estimate).item()))
    }
}

/// One estimator per ordered pair `(i, j)`, `i ≠ j`, stored in `(i, j)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct PairEstimatorBank {
    n_users: usize,
    pairs: Vec<PairEstimator>,
    steps: usize,
    mode: PhaseAMode,
    updates: u64,
}

/// Shape and optimisation settings of a bank.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BankSpec {
    pub n_users: usize,
    pub latent_dim: usize,
    pub n_classes: usize,
    pub hidden: usize,
    pub lr: f64,
    pub steps: usize,
    pub mode: PhaseAMode,
}

impl PairEstimatorBank {
    /// Estimators initialised from the `club/init/{i}/{j}` substreams of `seed`.
    pub fn new(spec: BankSpec, seed: u64) -> Self {
        let mut pairs = Vec::with_capacity(spec.n_users * spec.n_users.saturating_sub(1));
        for (i, j) in ordered_pairs(spec.n_users) {
            let mut net = ClubNet::new(spec.latent_dim, spec.n_classes, spec.hidden);
            net.init_params(&mut substream(seed, &format!("club/init/{i}/{j}")), InitScheme::XavierUniform);
            pairs.push(PairEstimator::new(i, j, net, spec.lr));
        }
        Self { n_users: spec.n_users, pairs, steps: spec.steps, mode: spec.mode, updates: 0 }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn mode(&self) -> PhaseAMode {
        self.mode
    }

    /// Total estimator updates performed so far.
    pub fn update_count(&self) -> u64 {
        self.updates
    }

    pub(crate) fn restore_update_count(&mut self, n: u64) {
        self.updates = n;
    }

    pub fn pairs(&self) -> &[PairEstimator] {
        &self.pairs
    }

    pub fn pairs_mut(&mut self) -> &mut [PairEstimator] {
        &mut self.pairs
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&PairEstimator> {
        self.pairs.iter().find(|p| p.i == i && p.j == j)
    }

    /// Phase-A with one partition shared by every pair.
    pub fn phase_a_update(&mut self, latents: &[Tensor], part: &ClassPartition) -> Result<Vec<PairDiagnostics>> {
        self.phase_a_update_with(latents, |_, _| part.clone())
    }

    /// Phase-A: `M` updates of every estimator on detached `latents`, with the
    /// conditioning partition of pair `(i, j)` given by `part_for(i, j)`.
    /// Returns each pair's values after its last update.
    pub fn phase_a_update_with(
        &mut self,
        latents: &[Tensor],
        part_for: impl Fn(usize, usize) -> ClassPartition,
    ) -> Result<Vec<PairDiagnostics>> {
        if latents.len() != self.n_users {
            return contract_err(format!("{} latents for a bank of {} users", latents.len(), self.n_users));
        }
        let mut out = Vec::with_capacity(self.pairs.len());
        for est in &mut self.pairs {
            let part = part_for(est.i, est.j);
            if part.batch_size() == 0 {
                return contract_err("phase-A over an empty partition");
            }
            let (z_i, z_j) = (&latents[est.i], &latents[est.j]);
            for _ in 0..self.steps {
                est.update(z_i, z_j, &part, self.mode)?;
                self.updates += 1;
            }
            let (matched_ll, vclub) = est.evaluate(z_i, z_j, &part)?;
            if !matched_ll.is_finite() || !vclub.is_finite() {
                return Err(Error::Degenerate(format!(
                    "estimator ({}, {}) produced matched {matched_ll}, vclub {vclub}",
                    est.i, est.j
                )));
            }
            out.push(PairDiagnostics { i: est.i, j: est.j, matched_ll, vclub });
        }
        Ok(out)
    }
}

/// All ordered pairs `(i, j)`, `i ≠ j`, in lexicographic order.
pub fn ordered_pairs(n_users: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n_users).flat_map(move |i| (0..n_users).filter(move |&j| j != i).map(move |j| (i, j)))
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.abs() < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("|rho| < 1 required, got {rho}")))
    }
}

/// `−(d/2)·ln(1 − ρ²)`: MI between `d` independent coordinate pairs of
/// unit-variance bivariate Gaussians with correlation `ρ`.
pub fn gaussian_mi_oracle(rho: f64, d: usize) -> Result<f64> {
    check_rho(rho)?;
    Ok(-(d as f64) / 2.0 * (-rho * rho).ln_1p())
}

/// Value of the vCLUB bound when `q` is the exact conditional
/// `N(ρ z_i, 1 − ρ²)`: `d·ρ²/(1 − ρ²)`.
pub fn gaussian_club_oracle(rho: f64, d: usize) -> Result<f64> {
    check_rho(rho)?;
    Ok(d as f64 * rho * rho / (1.0 - rho * rho))
}

/// `n` rows of `(z_i, z_j)` with `z_j = ρ z_i + √(1−ρ²) ε` per dimension.
pub fn sample_correlated_gaussians(rho: f64, d: usize, n: usize, rng: &mut RunRng) -> Result<(Tensor, Tensor)> {
    check_rho(rho)?;
    let z_i = standard_normal(rng, &[n, d]);
    let eps = standard_normal(rng, &[n, d]);
    let s = (1.0 - rho * rho).sqrt();
    let data = z_i.data().iter().zip(eps.data()).map(|(a, e)| rho * a + s * e).collect();
    let z_j = Tensor::from_vec(vec![n, d], data)?;
    Ok((z_i, z_j))
}

/// Settings of the Gaussian estimator check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianCheck {
    pub rho: f64,
    pub d: usize,
    pub hidden: usize,
    pub lr: f64,
    pub mode: PhaseAMode,
    pub train_steps: usize,
    pub train_batch: usize,
    pub eval_batches: usize,
    pub eval_batch: usize,
    pub seed: u64,
}

impl GaussianCheck {
    pub fn new(rho: f64, d: usize) -> Self {
        Self {
            rho,
            d,
            hidden: 64,
            lr: CLUB_LR,
            mode: PhaseAMode::Mle,
            train_steps: 3000,
            train_batch: 128,
            eval_batches: 50,
            eval_batch: 128,
            seed: 0,
        }
    }
}

/// Outcome of [`run_gaussian_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianReport {
    pub rho: f64,
    pub d: usize,
    pub true_mi: f64,
    pub club_bound: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub tolerance: f64,
}

impl GaussianReport {
    /// `|Î − I| ≤ max(0.1, 10% of I)`.
    pub fn within_tolerance(&self) -> bool {
        (self.estimate - self.true_mi).abs() <= self.tolerance
    }

    /// Mean estimate is not significantly below the true MI.
    pub fn bound_holds(&self) -> bool {
        self.estimate >= self.true_mi - 2.0 * self.stderr
    }

    pub fn passed(&self) -> bool {
        self.within_tolerance() && self.bound_holds()
    }
}

/// Trains one estimator on fresh correlated-Gaussian batches (a single
/// conditioning class) and averages its vCLUB estimate over independent
/// evaluation batches.
pub fn run_gaussian_check(cfg: &GaussianCheck) -> Result<GaussianReport> {
    let true_mi = gaussian_mi_oracle(cfg.rho, cfg.d)?;
    let club_bound = gaussian_club_oracle(cfg.rho, cfg.d)?;
    if cfg.train_batch < 2 || cfg.eval_batch < 2 || cfg.eval_batches < 2 {
        return contract_err("gaussian check needs batches of ≥ 2 rows and ≥ 2 evaluation batches");
    }
    let mut net = ClubNet::new(cfg.d, 1, cfg.hidden);
    net.init_params(&mut substream(cfg.seed, "mi/init"), InitScheme::XavierUniform);
    let mut est = PairEstimator::new(0, 1, net, cfg.lr);

    let mut rng = substream(cfg.seed, "mi/train");
    let train_part = ClassPartition::from_classes(&vec![0; cfg.train_batch]);
    for _ in 0..cfg.train_steps {
        let (z_i, z_j) = sample_correlated_gaussians(cfg.rho, cfg.d, cfg.train_batch, &mut rng)?;
        est.update(&z_i, &z_j, &train_part, cfg.mode)?;
    }

    let mut rng = substream(cfg.seed, "mi/eval");
    let eval_part = ClassPartition::from_classes(&vec![0; cfg.eval_batch]);
    let mut values = Vec::with_capacity(cfg.eval_batches);
    for _ in 0..cfg.eval_batches {
        let (z_i, z_j) = sample_correlated_gaussians(cfg.rho, cfg.d, cfg.eval_batch, &mut rng)?;
        values.push(est.evaluate(&z_i, &z_j, &eval_part)?.1);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(GaussianReport {
        rho: cfg.rho,
        d: cfg.d,
        true_mi,
        club_bound,
        estimate: mean,
        stderr: (var / n).sqrt(),
        tolerance: (0.1 * true_mi).max(0.1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GaussianEncoder;

    fn spec(n_users: usize, steps: usize) -> BankSpec {
        BankSpec { n_users, latent_dim: 3, n_classes: 2, hidden: 16, lr: CLUB_LR, steps, mode: PhaseAMode::Mle }
    }

    #[test]
    fn oracle_values() {
        assert_eq!(gaussian_mi_oracle(0.0, 4).unwrap(), 0.0);
        assert!((gaussian_mi_oracle(0.8, 4).unwrap() - 2.043302495063963).abs() < 1e-12);
        assert!((gaussian_mi_oracle(0.5, 1).unwrap() - 0.14384103622589045).abs() < 1e-12);
        assert!(matches!(gaussian_mi_oracle(1.0, 1), Err(Error::Domain(_))));
        assert!(matches!(gaussian_mi_oracle(-1.5, 1), Err(Error::Domain(_))));
        assert!((gaussian_club_oracle(0.8, 4).unwrap() - 4.0 * 0.64 / 0.36).abs() < 1e-12);
    }

    /// `∬ p(x, y) log(p(x, y) / p(x)p(y))` on a grid, for one coordinate pair.
    fn integrated_mi(rho: f64) -> f64 {
        let (lo, hi, n) = (-9.0, 9.0, 1200);
        let h = (hi - lo) / n as f64;
        let s = 1.0 - rho * rho;
        let mut total = 0.0;
        for a in 0..n {
            let x = lo + (a as f64 + 0.5) * h;
            for b in 0..n {
                let y = lo + (b as f64 + 0.5) * h;
                let log_joint =
                    -(x * x - 2.0 * rho * x * y + y * y) / (2.0 * s) - (2.0 * std::f64::consts::PI).ln() - 0.5 * s.ln();
                let log_marg = -(x * x + y * y) / 2.0 - (2.0 * std::f64::consts::PI).ln();
                total += log_joint.exp() * (log_joint - log_marg);
            }
        }
        total * h * h
    }

    #[test]
    fn oracle_matches_numerical_integration() {
        for rho in [0.5, 0.8, -0.3] {
            let numeric = integrated_mi(rho);
            let exact = gaussian_mi_oracle(rho, 1).unwrap();
            assert!((numeric - exact).abs() < 1e-6, "rho {rho}: {numeric} vs {exact}");
        }
        assert!((4.0 * integrated_mi(0.8) - 2.0433).abs() < 1e-4);
    }

    #[test]
    fn correlated_samples_have_expected_moments() {
        let n = 20_000;
        let tol = 3.0 / (n as f64).sqrt();
        for rho in [0.0, 0.5, -0.8] {
            let (a, b) = sample_correlated_gaussians(rho, 2, n, &mut substream(3, "g")).unwrap();
            for k in 0..2 {
                let col = |t: &Tensor| -> Vec<f64> { (0..n).map(|r| t.row(r)[k]).collect() };
                let (x, y) = (col(&a), col(&b));
                let m = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
                let (mx, my) = (m(&x), m(&y));
                let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n as f64;
                let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n as f64;
                let cov = x.iter().zip(&y).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n as f64;
                assert!((vx - 1.0).abs() < 3.0 * tol && (vy - 1.0).abs() < 3.0 * tol);
                assert!((cov / (vx * vy).sqrt() - rho).abs() < tol, "rho {rho}");
            }
        }
        let near_one = 1.0 - 1e-9;
        let (a, b) = sample_correlated_gaussians(near_one, 1, 1000, &mut substream(3, "h")).unwrap();
        let max_gap = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max_gap < 1e-3);
        assert!(sample_correlated_gaussians(1.0, 1, 1, &mut substream(0, "x")).is_err());
    }

    #[test]
    fn bank_layout_and_counter() {
        for n in 1..=4 {
            let mut bank = PairEstimatorBank::new(spec(n, 3), 0);
            assert_eq!(bank.len(), n * (n - 1));
            let pairs: Vec<_> = bank.pairs().iter().map(|p| (p.i, p.j)).collect();
            assert_eq!(pairs, ordered_pairs(n).collect::<Vec<_>>());
            let latents: Vec<Tensor> =
                (0..n).map(|u| standard_normal(&mut substream(u as u64, "z"), &[4, 3])).collect();
            let part = ClassPartition::from_classes(&[0, 1, 0, 1]);
            let diag = bank.phase_a_update(&latents, &part).unwrap();
            assert_eq!(diag.len(), n * (n - 1));
            assert_eq!(bank.update_count(), (3 * n * (n - 1)) as u64);
        }
    }

    #[test]
    fn zero_steps_leave_bank_unchanged() {
        let mut bank = PairEstimatorBank::new(spec(2, 0), 1);
        let before = bank.clone();
        let latents = vec![Tensor::full(&[3, 3], 0.5), Tensor::full(&[3, 3], -0.5)];
        bank.phase_a_update(&latents, &ClassPartition::from_classes(&[0, 0, 1])).unwrap();
        assert_eq!(bank, before);
    }

    #[test]
    fn empty_partition_is_rejected() {
        let mut bank = PairEstimatorBank::new(spec(2, 1), 1);
        let latents = vec![Tensor::zeros(&[0, 3]), Tensor::zeros(&[0, 3])];
        let err = bank.phase_a_update(&latents, &ClassPartition::from_classes(&[])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn mle_likelihood_increases_on_identical_latents() {
        let z = standard_normal(&mut substream(5, "z"), &[32, 3]);
        let latents = vec![z.clone(), z];
        let classes: Vec<usize> = (0..32).map(|v| v % 2).collect();
        let part = ClassPartition::from_classes(&classes);
        let mut bank = PairEstimatorBank::new(spec(2, 1), 2);
        let mut prev = bank.pairs()[0].evaluate(&latents[0], &latents[1], &part).unwrap().0;
        for _ in 0..10 {
            let diag = bank.phase_a_update(&latents, &part).unwrap();
            assert!(diag[0].matched_ll - prev > -1e-6, "{} after {prev}", diag[0].matched_ll);
            prev = diag[0].matched_ll;
        }
    }

    #[test]
    fn phase_a_does_not_touch_encoders() {
        let enc = GaussianEncoder::new(&[4, 8], 3);
        let mut enc = enc;
        enc.init_params(&mut substream(0, "enc"), InitScheme::XavierUniform);
        let mut tape = Tape::new();
        let x = tape.constant(standard_normal(&mut substream(0, "x"), &[6, 4]));
        let bound = enc.bind(&mut tape, true);
        let lat = enc.forward(&mut tape, &bound, x).unwrap();
        let latents = vec![tape.value(lat.mu).clone(), tape.value(lat.logvar).clone()];
        let before = enc.clone();
        let mut bank = PairEstimatorBank::new(spec(2, 4), 0);
        bank.phase_a_update(&latents, &ClassPartition::from_classes(&[0, 1, 0, 1, 0, 1])).unwrap();
        assert_eq!(enc, before);
        assert!(bound.vars().iter().all(|&v| tape.grad(v).is_none()));
    }

    #[test]
    fn phase_a_is_deterministic() {
        let latents: Vec<Tensor> = (0..3).map(|u| standard_normal(&mut substream(u, "z"), &[8, 3])).collect();
        let part = ClassPartition::from_classes(&[0, 1, 0, 1, 1, 0, 0, 1]);
        let run = || {
            let mut bank = PairEstimatorBank::new(spec(3, 2), 11);
            let d = bank.phase_a_update(&latents, &part).unwrap();
            (bank, d)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trained_estimate_approaches_the_exact_club_value() {
        // With q fitted to the true conditional, vCLUB converges to
        // d·ρ²/(1−ρ²) rather than the MI itself.
        let cfg = GaussianCheck { eval_batches: 20, ..GaussianCheck::new(0.5, 1) };
        let r = run_gaussian_check(&cfg).unwrap();
        assert!((r.estimate - r.club_bound).abs() < 0.08, "{r:?}");
        assert!(r.bound_holds());
        let r = run_gaussian_check(&GaussianCheck { eval_batches: 20, ..GaussianCheck::new(0.0, 4) }).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn literal_ascent_overshoots_the_likelihood_fit() {
        let base = GaussianCheck { train_steps: 400, eval_batches: 10, ..GaussianCheck::new(0.5, 1) };
        let mle = run_gaussian_check(&base).unwrap();
        let ascent = run_gaussian_check(&GaussianCheck { mode: PhaseAMode::VclubAscent, ..base }).unwrap();
        assert!(ascent.estimate > mle.estimate, "{ascent:?} vs {mle:?}");
        assert!(ascent.estimate > ascent.club_bound);
    }
}
