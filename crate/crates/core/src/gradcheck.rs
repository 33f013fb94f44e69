//! Central finite-difference gradient checking.
//!
//! The numeric side never touches tape backward rules: it only evaluates the
//! forward graph at perturbed inputs. [`run_suite`] covers every tape
//! operation plus the full encoder → channel → decoder → loss pipeline.

use crate::autodiff::{Tape, Tensor, Var};
use crate::channel::{power_normalize, superpose, Channel, ChannelDraw, ChannelKind, PowerAllocation};
use crate::error::Result;
use crate::nn::{Bound, ClubNet, Decoder, GaussianEncoder, GaussianLatent, InitScheme, Network};
use crate::objectives::{
    club_log_density, cross_entropy, kl_to_std_normal, toib_loss_on_tape, vclub_pair, ClassPartition,
};
use crate::rng::{standard_normal, substream};
use crate::training::{forward_pipeline, resample_mean_ce, BoundNets, NoiseLevel};

/// Denominator floor for relative errors, so that exact zeros on both sides
/// (dead ReLUs, constant branches) do not divide by zero.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients of the scalar built by `f` with respect to every input.
pub fn tape_gradients<F>(inputs: &[Tensor], f: F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars.iter().map(|&v| tape.grad_or_zeros(v)).collect())
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Central differences `(f(x+h) − f(x−h)) / 2h`, one coordinate at a time.
pub fn finite_difference<F>(inputs: &[Tensor], step: f64, f: F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = evaluate(&work, &f)?;
            work[k].data_mut()[i] = orig - step;
            let minus = evaluate(&work, &f)?;
            work[k].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

pub fn max_relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(&p, &q)| relative_error(p, q)))
        .fold(0.0, f64::max)
}

/// Pass threshold on the maximum relative error of one suite row.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Result of checking one operation or composite graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub n_checked: usize,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= SUITE_TOLERANCE
    }
}

type Graph = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn check_row(name: &'static str, inputs: Vec<Tensor>, f: Graph) -> Result<SuiteRow> {
    let analytic = tape_gradients(&inputs, &f)?;
    let numeric = finite_difference(&inputs, DEFAULT_STEP, &f)?;
    Ok(SuiteRow {
        name,
        max_rel_err: max_relative_error(&analytic, &numeric),
        n_checked: inputs.iter().map(Tensor::numel).sum(),
    })
}

/// `Σ out ⊙ w`, a scalar with a non-trivial gradient for every output entry.
fn project(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p, None)
}

fn params_of(net: &impl Network) -> Vec<Tensor> {
    net.tensors().into_iter().cloned().collect()
}

/// Central-difference check of every tape operation, each loss term, and the
/// full encoder → normalise → superpose → transmit → decode → loss graph with
/// `V = 4`, `d = 2`, `N = 2`, `K = 3`.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteRow>> {
    let normal =
        |name: &str, shape: &[usize]| standard_normal(&mut substream(seed, &format!("gradcheck/{name}")), shape);
    let positive = |name: &str, shape: &[usize]| normal(name, shape).map(|x| 0.5 + x.abs());
    let mut rows = Vec::new();

    macro_rules! unary {
        ($name:expr, $input:expr, |$t:ident, $a:ident| $body:expr) => {{
            let w = normal(concat!($name, "/w"), &[3, 4]);
            rows.push(check_row(
                $name,
                vec![$input],
                Box::new(move |$t: &mut Tape, v: &[Var]| {
                    let $a = v[0];
                    let out = $body;
                    project($t, out, &w)
                }),
            )?);
        }};
    }
    macro_rules! binary {
        ($name:expr, $a_in:expr, $b_in:expr, $w_shape:expr, |$t:ident, $a:ident, $b:ident| $body:expr) => {{
            let w = normal(concat!($name, "/w"), $w_shape);
            rows.push(check_row(
                $name,
                vec![$a_in, $b_in],
                Box::new(move |$t: &mut Tape, v: &[Var]| {
                    let ($a, $b) = (v[0], v[1]);
                    let out = $body;
                    project($t, out, &w)
                }),
            )?);
        }};
    }

    let m34 = |n: &str| normal(n, &[3, 4]);
    binary!("add", m34("add/a"), m34("add/b"), &[3, 4], |t, a, b| t.add(a, b)?);
    binary!("add_scalar", m34("adds/a"), Tensor::scalar(0.7), &[3, 4], |t, a, b| t.add(a, b)?);
    binary!("sub", m34("sub/a"), m34("sub/b"), &[3, 4], |t, a, b| t.sub(a, b)?);
    binary!("mul", m34("mul/a"), m34("mul/b"), &[3, 4], |t, a, b| t.mul(a, b)?);
    binary!("mul_scalar", Tensor::scalar(-1.3), m34("muls/b"), &[3, 4], |t, a, b| t.mul(a, b)?);
    unary!("scale", m34("scale"), |t, a| t.scale(a, -2.5));
    unary!("neg", m34("neg"), |t, a| t.neg(a));
    unary!("shift", m34("shift"), |t, a| t.shift(a, 0.3));
    unary!("square", m34("square"), |t, a| t.square(a));
    unary!("exp", m34("exp"), |t, a| t.exp(a));
    unary!("log", positive("log", &[3, 4]), |t, a| t.log(a)?);
    unary!("relu", m34("relu"), |t, a| t.relu(a));
    unary!("tanh", m34("tanh"), |t, a| t.tanh(a));
    unary!("powf", positive("powf", &[3, 4]), |t, a| t.powf(a, -0.5)?);
    unary!("clamp", m34("clamp").map(|x| 0.8 * x), |t, a| t.clamp(a, -1.0, 1.0));
    unary!("log_softmax", m34("lsm"), |t, a| t.log_softmax(a)?);
    binary!("matmul", normal("mm/a", &[3, 5]), normal("mm/b", &[5, 4]), &[3, 4], |t, a, b| t.matmul(a, b)?);
    binary!("add_row", m34("ar/a"), normal("ar/b", &[4]), &[3, 4], |t, a, b| t.add_row(a, b)?);
    binary!("concat_cols", normal("cc/a", &[3, 1]), normal("cc/b", &[3, 3]), &[3, 4], |t, a, b| t.concat_cols(a, b)?);
    {
        let w_rows = normal("sum/w_rows", &[3]);
        let w_cols = normal("sum/w_cols", &[4]);
        rows.push(check_row(
            "sum",
            vec![m34("sum")],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let all = t.sum(v[0], None)?;
                let per_row = t.sum(v[0], Some(1))?;
                let per_col = t.sum(v[0], Some(0))?;
                let r = project(t, per_row, &w_rows)?;
                let c = project(t, per_col, &w_cols)?;
                let s = t.add(all, r)?;
                t.add(s, c)
            }),
        )?);
    }
    {
        let w = normal("mean/w", &[4]);
        rows.push(check_row(
            "mean",
            vec![m34("mean")],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let all = t.mean(v[0], None)?;
                let cols = t.mean(v[0], Some(0))?;
                let c = project(t, cols, &w)?;
                t.add(all, c)
            }),
        )?);
    }
    {
        let eps = m34("rp/eps");
        let w = m34("rp/w");
        rows.push(check_row(
            "reparam",
            vec![m34("rp/mu"), m34("rp/lv")],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let e = t.constant(eps.clone());
                let z = t.reparam(v[0], v[1], e)?;
                project(t, z, &w)
            }),
        )?);
    }
    {
        let w = normal("sel/w", &[3]);
        rows.push(check_row(
            "select_cols",
            vec![m34("sel")],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let s = t.select_cols(v[0], &[3, 0, 3])?;
                project(t, s, &w)
            }),
        )?);
    }
    {
        let w = normal("gr/w", &[5, 4]);
        rows.push(check_row(
            "gather_rows",
            vec![m34("gr")],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let g = t.gather_rows(v[0], &[2, 0, 2, 1, 2])?;
                project(t, g, &w)
            }),
        )?);
    }

    // Loss terms.
    rows.push(check_row(
        "cross_entropy",
        vec![m34("ce")],
        Box::new(|t: &mut Tape, v: &[Var]| cross_entropy(t, v[0], &[1, 3, 0])),
    )?);
    rows.push(check_row(
        "kl_to_std_normal",
        vec![m34("kl/mu"), m34("kl/lv")],
        Box::new(|t: &mut Tape, v: &[Var]| kl_to_std_normal(t, GaussianLatent { mu: v[0], logvar: v[1] })),
    )?);
    {
        let w = normal("pn/w", &[3, 4]);
        rows.push(check_row(
            "power_normalize",
            vec![m34("pn")],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let z = power_normalize(t, v[0])?;
                project(t, z, &w)
            }),
        )?);
    }
    {
        let w = normal("sp/w", &[3, 4]);
        let alloc = PowerAllocation::new(vec![0.3, 0.7], 1.0)?;
        rows.push(check_row(
            "superpose",
            vec![m34("sp/a"), m34("sp/b")],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let s = superpose(t, v, &alloc)?;
                project(t, s, &w)
            }),
        )?);
    }
    {
        let w = normal("ch/w", &[3, 4]);
        let draw = ChannelDraw { gain: 0.6, noise: normal("ch/n", &[3, 4]) };
        rows.push(check_row(
            "channel_apply",
            vec![m34("ch")],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let mut acc: Option<Var> = None;
                for ch in [
                    Channel::new(ChannelKind::Awgn, true),
                    Channel::new(ChannelKind::Rayleigh, true),
                    Channel::new(ChannelKind::Rayleigh, false),
                ] {
                    let y = ch.apply(t, v[0], &draw, 0.2)?;
                    let p = project(t, y, &w)?;
                    acc = Some(match acc {
                        None => p,
                        Some(a) => t.add(a, p)?,
                    });
                }
                Ok(acc.expect("three channels"))
            }),
        )?);
    }

    // CLUB density and vCLUB with respect to the estimator parameters and both latents.
    let (d, k, v_rows) = (2, 3, 4);
    let mut club = ClubNet::new(d, k, 5);
    club.init_params(&mut substream(seed, "gradcheck/club"), InitScheme::XavierUniform);
    let classes = vec![0, 2, 0, 0];
    {
        let net = club.clone();
        let classes = classes.clone();
        let w = normal("cld/w", &[v_rows]);
        let mut inputs = vec![normal("cld/zi", &[v_rows, d]), normal("cld/zj", &[v_rows, d])];
        inputs.extend(params_of(&net));
        rows.push(check_row(
            "club_log_density",
            inputs,
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let bound = Bound::from_vars(v[2..].to_vec());
                let lq = club_log_density(t, &net, &bound, v[0], v[1], &classes)?;
                project(t, lq, &w)
            }),
        )?);
    }
    {
        let net = club.clone();
        let part = ClassPartition::from_classes(&classes);
        let mut inputs = vec![normal("vc/zi", &[v_rows, d]), normal("vc/zj", &[v_rows, d])];
        inputs.extend(params_of(&net));
        rows.push(check_row(
            "vclub_pair",
            inputs,
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let bound = Bound::from_vars(v[2..].to_vec());
                Ok(vclub_pair(t, &net, &bound, v[0], v[1], &part)?.estimate)
            }),
        )?);
    }

    rows.push(full_pipeline_row(seed)?);
    Ok(rows)
}

/// Gradients of the weighted training loss with respect to every encoder and
/// decoder parameter. Estimators are frozen, the channel draws and noise
/// variance are fixed so that the graph is a deterministic function.
fn full_pipeline_row(seed: u64) -> Result<SuiteRow> {
    let (n, v_rows, d_x, d, k, hidden) = (2, 4, 3, 2, 3, 5);
    let mut encoders = Vec::new();
    let mut decoders = Vec::new();
    let mut clubs = Vec::new();
    for u in 0..n {
        let mut e = GaussianEncoder::new(&[d_x, hidden, hidden], d);
        e.init_params(&mut substream(seed, &format!("gradcheck/pipe/enc/{u}")), InitScheme::XavierUniform);
        let mut dec = Decoder::new(&[d, hidden, k]);
        dec.init_params(&mut substream(seed, &format!("gradcheck/pipe/dec/{u}")), InitScheme::XavierUniform);
        let mut c = ClubNet::new(d, k, hidden);
        c.init_params(&mut substream(seed, &format!("gradcheck/pipe/club/{u}")), InitScheme::XavierUniform);
        encoders.push(e);
        decoders.push(dec);
        clubs.push(c);
    }
    let mut rng = substream(seed, "gradcheck/pipe/noise");
    let inputs: Vec<Tensor> = (0..n).map(|_| standard_normal(&mut rng, &[v_rows, d_x])).collect();
    let eps: Vec<Tensor> = (0..n).map(|_| standard_normal(&mut rng, &[v_rows, d])).collect();
    let channel = Channel::new(ChannelKind::Rayleigh, false);
    let draws: Vec<Vec<ChannelDraw>> =
        (0..2).map(|_| (0..n).map(|_| channel.draw(&[v_rows, d], &mut rng)).collect()).collect();
    let labels = vec![vec![0, 2, 1, 2], vec![0, 2, 1, 2]];
    let part = ClassPartition::from_classes(&labels[0]);
    let alloc = PowerAllocation::equal(n, 1.0)?;

    let mut params = Vec::new();
    let mut counts = Vec::new();
    for e in &encoders {
        counts.push(e.tensors().len());
        params.extend(params_of(e));
    }
    for dec in &decoders {
        counts.push(dec.tensors().len());
        params.extend(params_of(dec));
    }

    let graph: Graph = Box::new(move |t: &mut Tape, v: &[Var]| {
        let mut offset = 0;
        let mut bounds = Vec::new();
        for &c in &counts {
            bounds.push(Bound::from_vars(v[offset..offset + c].to_vec()));
            offset += c;
        }
        let dec_b = bounds.split_off(n);
        let nets = BoundNets { encoders: &encoders, decoders: &decoders, enc: bounds, dec: dec_b };
        let fwd = forward_pipeline(t, &nets, &inputs, Some(&eps), &draws, channel, &alloc, NoiseLevel::Variance(0.1))?;
        let ce = resample_mean_ce(t, &fwd, &labels)?;
        let kl = fwd.latents.iter().map(|&lat| kl_to_std_normal(t, lat)).collect::<Result<Vec<_>>>()?;
        let mut vclub = Vec::new();
        for (c, (i, j)) in clubs.iter().zip([(0, 1), (1, 0)]) {
            let frozen = c.bind(t, false);
            vclub.push(vclub_pair(t, c, &frozen, fwd.z_norm[i], fwd.z_norm[j], &part)?.estimate);
        }
        toib_loss_on_tape(t, &ce, &kl, &vclub, 0.5, 0.3)
    });
    check_row("full_pipeline", params, graph)
}
