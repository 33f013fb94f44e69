//! Loss terms: cross-entropy sufficiency, KL compression against a standard
//! normal prior, and the variational CLUB orthogonality estimate between two
//! users' latents conditioned on the task class.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract_err, dim_err, Result};
use crate::nn::{Bound, ClubNet, GaussianLatent};

/// Batch rows grouped by conditioning class, ordered by class index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPartition {
    classes: Vec<usize>,
    groups: Vec<(usize, Vec<usize>)>,
}

impl ClassPartition {
    pub fn from_classes(classes: &[usize]) -> Self {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (v, &w) in classes.iter().enumerate() {
            map.entry(w).or_default().push(v);
        }
        Self { classes: classes.to_vec(), groups: map.into_iter().collect() }
    }

    /// Class of every batch row.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// `(w, rows of class w)` for every class present in the batch.
    pub fn groups(&self) -> &[(usize, Vec<usize>)] {
        &self.groups
    }

    pub fn batch_size(&self) -> usize {
        self.classes.len()
    }

    /// Ordered leave-one-out pairs `(v, v')`, `v ≠ v'`, inside every class,
    /// each with weight `1 / (V·(|V_w| − 1))`. Singleton classes contribute none.
    pub fn mismatched_pairs(&self) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let v_total = self.batch_size() as f64;
        let (mut rows_i, mut rows_j, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for (_, rows) in &self.groups {
            if rows.len() < 2 {
                continue;
            }
            let w = 1.0 / (v_total * (rows.len() - 1) as f64);
            for &a in rows {
                for &b in rows {
                    if a != b {
                        rows_i.push(a);
                        rows_j.push(b);
                        weights.push(w);
                    }
                }
            }
        }
        (rows_i, rows_j, weights)
    }
}

/// Batch-mean `−log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, k) = tape.value(logits).dims2()?;
    if labels.len() != rows {
        return dim_err(format!("{} labels for {rows} logit rows", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&u| u >= k) {
        return contract_err(format!("label {bad} out of range 0..{k}"));
    }
    let log_p = tape.log_softmax(logits)?;
    let picked = tape.select_cols(log_p, labels)?;
    let mean = tape.mean(picked, None)?;
    Ok(tape.neg(mean))
}

/// Batch mean of `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − log σ² − 1)`.
pub fn kl_to_std_normal(tape: &mut Tape, lat: GaussianLatent) -> Result<Var> {
    let (rows, _) = tape.value(lat.mu).dims2()?;
    if rows == 0 {
        return contract_err("KL over an empty batch");
    }
    let mu2 = tape.square(lat.mu);
    let var = tape.exp(lat.logvar);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, lat.logvar)?;
    let c = tape.shift(b, -1.0);
    let total = tape.sum(c, None)?;
    Ok(tape.scale(total, 0.5 / rows as f64))
}

/// Row-wise diagonal Gaussian log density of `x` under `N(mu, exp(logvar))`.
pub fn gaussian_log_density(tape: &mut Tape, mu: Var, logvar: Var, x: Var) -> Result<Var> {
    let diff = tape.sub(x, mu)?;
    let sq = tape.square(diff);
    let neg_lv = tape.neg(logvar);
    let precision = tape.exp(neg_lv);
    let maha = tape.mul(sq, precision)?;
    let a = tape.add(maha, logvar)?;
    let b = tape.shift(a, (2.0 * PI).ln());
    let rows = tape.sum(b, Some(1))?;
    Ok(tape.scale(rows, -0.5))
}

/// `log q_ψ(z_j | z_i, w)` for every batch row; shape `[V]`.
pub fn club_log_density(
    tape: &mut Tape,
    net: &ClubNet,
    bound: &Bound,
    z_i: Var,
    z_j: Var,
    classes: &[usize],
) -> Result<Var> {
    if tape.value(z_i).shape() != tape.value(z_j).shape() {
        return dim_err(format!("z_i {:?} vs z_j {:?}", tape.value(z_i).shape(), tape.value(z_j).shape()));
    }
    let (mu, logvar) = net.forward(tape, bound, z_i, classes)?;
    gaussian_log_density(tape, mu, logvar, z_j)
}

/// Matched term, mismatched term and their difference for one user pair.
#[derive(Clone, Copy, Debug)]
pub struct VclubTerms {
    pub matched: Var,
    pub mismatched: Var,
    pub estimate: Var,
}

/// Class-conditional vCLUB estimate
/// `Σ_w |V_w|/V · [mean_{v∈V_w} log q(z_j^v | z_i^v, w) − mean_{v≠v'∈V_w} log q(z_j^{v'} | z_i^v, w)]`.
///
/// The mismatched mean is skipped (taken as 0) for classes with a single row.
pub fn vclub_pair(
    tape: &mut Tape,
    net: &ClubNet,
    bound: &Bound,
    z_i: Var,
    z_j: Var,
    part: &ClassPartition,
) -> Result<VclubTerms> {
    let v = part.batch_size();
    if v == 0 {
        return contract_err("vCLUB over an empty batch");
    }
    let (rows, _) = tape.value(z_i).dims2()?;
    if rows != v || tape.value(z_j).shape() != tape.value(z_i).shape() {
        return dim_err(format!("partition of {v} rows for latents {:?}", tape.value(z_i).shape()));
    }
    let (mu, logvar) = net.forward(tape, bound, z_i, part.classes())?;
    // Σ_w |V_w|/V · mean over V_w collapses to the plain batch mean.
    let matched_rows = gaussian_log_density(tape, mu, logvar, z_j)?;
    let matched = tape.mean(matched_rows, None)?;

    let (rows_i, rows_j, weights) = part.mismatched_pairs();
    let mismatched = if rows_i.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let mu_p = tape.gather_rows(mu, &rows_i)?;
        let lv_p = tape.gather_rows(logvar, &rows_i)?;
        let zj_p = tape.gather_rows(z_j, &rows_j)?;
        let log_q = gaussian_log_density(tape, mu_p, lv_p, zj_p)?;
        let w = tape.constant(Tensor::vector(weights));
        let weighted = tape.mul(log_q, w)?;
        tape.sum(weighted, None)?
    };
    let estimate = tape.sub(matched, mismatched)?;
    Ok(VclubTerms { matched, mismatched, estimate })
}

/// vCLUB value for the ordered user pair `(i, j)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairValue {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// Per-term values of the training objective and their weighted total.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: Vec<f64>,
    pub kl: Vec<f64>,
    pub vclub: Vec<PairValue>,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0) {
        return contract_err(format!("alpha ≥ 0 required, got {alpha}"));
    }
    if !(beta >= 0.0) {
        return contract_err(format!("beta ≥ 0 required, got {beta}"));
    }
    Ok(())
}

/// `Σ ce + β·Σ kl + α·Σ vclub`, summed left to right. The orthogonality term
/// is left out entirely when `α = 0` or there are no pairs, which makes the
/// result identical to the plain VIB objective.
pub fn toib_loss(ce: &[f64], kl: &[f64], vclub: &[PairValue], alpha: f64, beta: f64) -> Result<LossBreakdown> {
    check_weights(alpha, beta)?;
    let sum = |xs: &mut dyn Iterator<Item = f64>| xs.reduce(|a, b| a + b).unwrap_or(0.0);
    let mut total = sum(&mut ce.iter().copied()) + beta * sum(&mut kl.iter().copied());
    if alpha != 0.0 && !vclub.is_empty() {
        total += alpha * sum(&mut vclub.iter().map(|p| p.value));
    }
    Ok(LossBreakdown { ce: ce.to_vec(), kl: kl.to_vec(), vclub: vclub.to_vec(), alpha, beta, total })
}

/// Tape version of [`toib_loss`] with the same summation order.
pub fn toib_loss_on_tape(tape: &mut Tape, ce: &[Var], kl: &[Var], vclub: &[Var], alpha: f64, beta: f64) -> Result<Var> {
    check_weights(alpha, beta)?;
    let chain = |tape: &mut Tape, xs: &[Var]| -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for &x in xs {
            acc = Some(match acc {
                None => x,
                Some(a) => tape.add(a, x)?,
            });
        }
        Ok(acc)
    };
    let zero = |tape: &mut Tape| tape.constant(Tensor::scalar(0.0));
    let ce_sum = match chain(tape, ce)? {
        Some(v) => v,
        None => zero(tape),
    };
    let kl_sum = match chain(tape, kl)? {
        Some(v) => v,
        None => zero(tape),
    };
    let kl_term = tape.scale(kl_sum, beta);
    let mut total = tape.add(ce_sum, kl_term)?;
    if alpha != 0.0 {
        if let Some(v) = chain(tape, vclub)? {
            let term = tape.scale(v, alpha);
            total = tape.add(total, term)?;
        }
    }
    Ok(total)
}
