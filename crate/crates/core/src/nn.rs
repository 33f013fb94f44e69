//! Parameterised networks and the Adam optimizer.
//!
//! Every network is a stack of [`Linear`] layers. For a forward pass the
//! parameters are bound onto a [`Tape`] (see [`Network::bind`]) and the
//! resulting [`Bound`] handles are threaded through `forward`. After
//! `backward`, [`Bound::grads`] reads the gradients back out in the same order
//! as [`Network::tensors_mut`], which is what [`AdamState::step`] consumes.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{contract_err, dim_err, Result};
use crate::rng::RunRng;

/// Default clamp applied to every log-variance head.
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// Weights uniform in ±√(6/(fan_in+fan_out)), biases zero.
    #[default]
    XavierUniform,
    Zeros,
}

/// Affine map `x·W + b` with `W` of shape `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Tensor::zeros(&[fan_in, fan_out]), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn init(&mut self, rng: &mut RunRng, scheme: InitScheme) {
        self.bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
        match scheme {
            InitScheme::Zeros => self.weight.data_mut().iter_mut().for_each(|w| *w = 0.0),
            InitScheme::XavierUniform => {
                let limit = (6.0 / (self.fan_in() + self.fan_out()) as f64).sqrt();
                for w in self.weight.data_mut() {
                    *w = rng.random_range(-limit..limit);
                }
            }
        }
    }

    fn forward(tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, params[0])?;
        tape.add_row(h, params[1])
    }
}

/// Parameter handles of a network bound onto one tape.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps handles already on a tape, in the network's parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients in parameter order; zeros where backward did not reach.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.0.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

/// A network made of [`Linear`] layers.
pub trait Network {
    fn linears(&self) -> Vec<&Linear>;
    fn linears_mut(&mut self) -> Vec<&mut Linear>;

    fn tensors(&self) -> Vec<&Tensor> {
        self.linears().into_iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.linears_mut().into_iter().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Records the parameters as leaves (`trainable`) or constants.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.tensors()
                .into_iter()
                .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
                .collect(),
        )
    }

    fn init_params(&mut self, rng: &mut RunRng, scheme: InitScheme) {
        for layer in self.linears_mut() {
            layer.init(rng, scheme);
        }
    }

    /// Replaces all parameters, checking shapes.
    fn load_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        let mut slots = self.tensors_mut();
        if slots.len() != tensors.len() {
            return dim_err(format!("expected {} tensors, got {}", slots.len(), tensors.len()));
        }
        for (slot, t) in slots.iter_mut().zip(&tensors) {
            if slot.shape() != t.shape() {
                return dim_err(format!("tensor shape {:?} != {:?}", t.shape(), slot.shape()));
            }
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            *slot = t;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
    activate_output: bool,
}

impl Mlp {
    /// Zero-initialised MLP over `widths` (input first).
    pub fn new(widths: &[usize], activation: Activation, activate_output: bool) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Self { layers, activation, activate_output }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].fan_in()];
        w.extend(self.layers.iter().map(Linear::fan_out));
        w
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("nonempty").fan_out()
    }

    fn forward_with(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let width = tape.value(x).dims2()?.1;
        if width != self.input_width() {
            return dim_err(format!("input width {width}, network expects {}", self.input_width()));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, chunk) in params.chunks(2).take(self.layers.len()).enumerate() {
            h = Linear::forward(tape, chunk, h)?;
            if k < last || self.activate_output {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        self.forward_with(tape, bound.vars(), x)
    }

    fn n_params(&self) -> usize {
        2 * self.layers.len()
    }
}

impl Network for Mlp {
    fn linears(&self) -> Vec<&Linear> {
        self.layers.iter().collect()
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        self.layers.iter_mut().collect()
    }
}

/// Tape handles of a diagonal Gaussian `N(mu, diag(exp(logvar)))`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianLatent {
    pub mu: Var,
    pub logvar: Var,
}

/// Encoder `x ↦ (μ(x), log σ²(x))`: an MLP trunk followed by two affine heads.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEncoder {
    pub trunk: Mlp,
    pub mu_head: Linear,
    pub logvar_head: Linear,
    pub logvar_clamp: f64,
}

impl GaussianEncoder {
    /// `trunk_widths` runs from the input width to the last hidden width.
    pub fn new(trunk_widths: &[usize], latent_dim: usize) -> Self {
        let hidden = *trunk_widths.last().expect("nonempty widths");
        Self {
            trunk: Mlp::new(trunk_widths, Activation::Relu, true),
            mu_head: Linear::zeros(hidden, latent_dim),
            logvar_head: Linear::zeros(hidden, latent_dim),
            logvar_clamp: LOGVAR_CLAMP,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_width()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_head.fan_out()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<GaussianLatent> {
        let p = bound.vars();
        let k = self.trunk.n_params();
        let h = self.trunk.forward_with(tape, &p[..k], x)?;
        let mu = Linear::forward(tape, &p[k..k + 2], h)?;
        let raw = Linear::forward(tape, &p[k + 2..k + 4], h)?;
        let logvar = tape.clamp(raw, -self.logvar_clamp, self.logvar_clamp);
        Ok(GaussianLatent { mu, logvar })
    }
}

impl Network for GaussianEncoder {
    fn linears(&self) -> Vec<&Linear> {
        let mut v = self.trunk.linears();
        v.push(&self.mu_head);
        v.push(&self.logvar_head);
        v
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut v = self.trunk.linears_mut();
        v.push(&mut self.mu_head);
        v.push(&mut self.logvar_head);
        v
    }
}

/// Per-user decoder from a received latent to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub mlp: Mlp,
}

impl Decoder {
    /// `widths` runs from the latent dim to the number of classes.
    pub fn new(widths: &[usize]) -> Self {
        Self { mlp: Mlp::new(widths, Activation::Relu, false) }
    }

    pub fn n_classes(&self) -> usize {
        self.mlp.output_width()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, y: Var) -> Result<Var> {
        self.mlp.forward(tape, bound, y)
    }
}

impl Network for Decoder {
    fn linears(&self) -> Vec<&Linear> {
        self.mlp.linears()
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        self.mlp.linears_mut()
    }
}

/// Row-wise argmax; ties go to the lowest index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let (rows, _) = logits.dims2().expect("logits are a matrix");
    (0..rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// One-hot rows for class indices.
pub fn one_hot(classes: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; classes.len() * n_classes];
    for (r, &c) in classes.iter().enumerate() {
        if c >= n_classes {
            return contract_err(format!("class {c} out of range 0..{n_classes}"));
        }
        data[r * n_classes + c] = 1.0;
    }
    Tensor::from_vec(vec![classes.len(), n_classes], data)
}

/// Variational conditional `q(z_j | z_i, w)`: a diagonal Gaussian whose mean
/// and log-variance are read from `[z_i | one_hot(w)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClubNet {
    pub trunk: Mlp,
    pub mu_head: Linear,
    pub logvar_head: Linear,
    pub n_classes: usize,
    pub logvar_clamp: f64,
}

impl ClubNet {
    pub fn new(latent_dim: usize, n_classes: usize, hidden: usize) -> Self {
        Self {
            trunk: Mlp::new(&[latent_dim + n_classes, hidden], Activation::Relu, true),
            mu_head: Linear::zeros(hidden, latent_dim),
            logvar_head: Linear::zeros(hidden, latent_dim),
            n_classes,
            logvar_clamp: LOGVAR_CLAMP,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_head.fan_out()
    }

    /// Conditional mean and log-variance for every row of `z_i`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z_i: Var, classes: &[usize]) -> Result<(Var, Var)> {
        let rows = tape.value(z_i).dims2()?.0;
        if classes.len() != rows {
            return dim_err(format!("{} classes for {rows} latent rows", classes.len()));
        }
        let w = tape.constant(one_hot(classes, self.n_classes)?);
        let input = tape.concat_cols(z_i, w)?;
        let p = bound.vars();
        let k = self.trunk.n_params();
        let h = self.trunk.forward_with(tape, &p[..k], input)?;
        let mu = Linear::forward(tape, &p[k..k + 2], h)?;
        let raw = Linear::forward(tape, &p[k + 2..k + 4], h)?;
        let logvar = tape.clamp(raw, -self.logvar_clamp, self.logvar_clamp);
        Ok((mu, logvar))
    }
}

impl Network for ClubNet {
    fn linears(&self) -> Vec<&Linear> {
        let mut v = self.trunk.linears();
        v.push(&self.mu_head);
        v.push(&self.logvar_head);
        v
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut v = self.trunk.linears_mut();
        v.push(&mut self.mu_head);
        v.push(&mut self.logvar_head);
        v
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(net: &impl Network, lr: f64) -> Self {
        let zeros: Vec<Tensor> = net.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update of `params` from `grads` (consumed).
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: Vec<Tensor>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return contract_err(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        for ((p, g), m) in params.iter().zip(&grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return contract_err(format!("adam shape mismatch: param {:?}, grad {:?}", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(&grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((theta, &gi), (mi, vi)) in it {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Convenience: update a network from the gradients on `tape`.
    pub fn step_network(&mut self, net: &mut impl Network, bound: &Bound, tape: &Tape) -> Result<()> {
        let grads = bound.grads(tape);
        self.step(net.tensors_mut(), grads)
    }
}

/// Named list of tensors as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorBlock {
    pub name: String,
    pub tensors: Vec<Tensor>,
}

impl TensorBlock {
    pub fn from_network(name: impl Into<String>, net: &impl Network) -> Self {
        Self { name: name.into(), tensors: net.tensors().into_iter().cloned().collect() }
    }

    /// Layout: name length u32, UTF-8 name, tensor count u32, then per tensor
    /// rank u32, each dim u64, and the values as f64.
    pub fn write(&self, w: &mut ByteWriter) {
        w.u32(self.name.len() as u32);
        w.bytes(self.name.as_bytes());
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            for &x in t.data() {
                w.f64(x);
            }
        }
    }

    pub fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let len = r.u32()? as usize;
        let name = match std::str::from_utf8(r.take(len)?) {
            Ok(s) => s.to_owned(),
            Err(_) => return r.fail("block name is not UTF-8"),
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rank = r.u32()? as usize;
            if rank > 8 {
                return r.fail(format!("implausible tensor rank {rank}"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = match n {
                Some(n) if n.saturating_mul(8) <= r.remaining() => n,
                _ => return r.fail(format!("tensor of shape {shape:?} exceeds file size")),
            };
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64()?);
            }
            tensors.push(Tensor::from_vec(shape, data)?);
        }
        Ok(Self { name, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference, max_relative_error, tape_gradients};
    use crate::rng::substream;

    fn input(rows: usize, cols: usize, seed: u64) -> Tensor {
        crate::rng::standard_normal(&mut substream(seed, "x"), &[rows, cols])
    }

    #[test]
    fn zero_heads_give_standard_latent() {
        let mut enc = GaussianEncoder::new(&[5, 12, 12], 16);
        enc.trunk.init_params(&mut substream(1, "t"), InitScheme::XavierUniform);
        let mut tape = Tape::new();
        let b = enc.bind(&mut tape, false);
        let x = tape.constant(input(8, 5, 2));
        let lat = enc.forward(&mut tape, &b, x).unwrap();
        assert_eq!(tape.value(lat.mu).shape(), &[8, 16]);
        assert_eq!(tape.value(lat.logvar).shape(), &[8, 16]);
        assert!(tape.value(lat.mu).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(lat.logvar).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_rejects_wrong_width() {
        let enc = GaussianEncoder::new(&[5, 12], 4);
        let mut tape = Tape::new();
        let b = enc.bind(&mut tape, false);
        let x = tape.constant(input(3, 6, 0));
        assert!(matches!(enc.forward(&mut tape, &b, x), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn encoder_mu_gradient_matches_fd() {
        let mut enc = GaussianEncoder::new(&[3, 6], 2);
        enc.init_params(&mut substream(4, "enc"), InitScheme::XavierUniform);
        let x = input(4, 3, 5);
        let first_w = enc.trunk.linears()[0].weight.clone();
        let f = |tape: &mut Tape, v: &[Var]| {
            let mut e = enc.clone();
            e.trunk.linears_mut()[0].weight = tape.value(v[0]).clone();
            let mut b = e.bind(tape, false);
            b.0[0] = v[0];
            let xv = tape.constant(x.clone());
            let lat = e.forward(tape, &b, xv)?;
            tape.sum(lat.mu, None)
        };
        let a = tape_gradients(std::slice::from_ref(&first_w), f).unwrap();
        let n = finite_difference(&[first_w], 1e-5, f).unwrap();
        assert!(max_relative_error(&a, &n) < 1e-6);
    }

    #[test]
    fn zero_decoder_uniform_and_ties_to_lowest() {
        let dec = Decoder::new(&[4, 8, 3]);
        let mut tape = Tape::new();
        let b = dec.bind(&mut tape, false);
        let y = tape.constant(input(4, 4, 9));
        let logits = dec.forward(&mut tape, &b, y).unwrap();
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
        assert_eq!(predict(tape.value(logits)), vec![0, 0, 0, 0]);
        let t = Tensor::from_rows(&[&[1.0, 3.0, 3.0], &[2.0, 1.0, 0.0]]).unwrap();
        assert_eq!(predict(&t), vec![1, 0]);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let mut a = Mlp::new(&[10, 20, 5], Activation::Relu, false);
        let mut b = a.clone();
        a.init_params(&mut substream(11, "w"), InitScheme::XavierUniform);
        b.init_params(&mut substream(11, "w"), InitScheme::XavierUniform);
        assert_eq!(a, b);
        for l in a.linears() {
            assert!(l.bias.data().iter().all(|&x| x == 0.0));
        }
        assert_eq!(a.param_count(), 10 * 20 + 20 + 20 * 5 + 5);
        assert_eq!(a.widths(), vec![10, 20, 5]);
    }

    #[test]
    fn xavier_variance_matches_uniform_law() {
        // Var of U(-a, a) is a²/3 = 2/(fan_in + fan_out).
        let mut l = Linear::zeros(100, 100);
        l.init(&mut substream(3, "v"), InitScheme::XavierUniform);
        let d = l.weight.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
        let expect = 2.0 / 200.0;
        assert!((var - expect).abs() < 0.2 * expect, "var {var} vs {expect}");
    }

    fn quad_net() -> Mlp {
        let mut net = Mlp::new(&[2, 3], Activation::Tanh, false);
        net.init_params(&mut substream(0, "q"), InitScheme::XavierUniform);
        net
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut net = quad_net();
        let before = net.clone();
        let mut adam = AdamState::new(&net, 1e-3);
        let grads = net.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        adam.step(net.tensors_mut(), grads).unwrap();
        assert_eq!(net, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_single_step_moves_by_lr_sign() {
        let mut net = quad_net();
        let before = net.clone();
        let lr = 1e-4;
        let mut adam = AdamState::new(&net, lr);
        let grads: Vec<Tensor> = net
            .tensors()
            .iter()
            .enumerate()
            .map(|(k, t)| Tensor::full(t.shape(), if k % 2 == 0 { 0.37 } else { -2.5 }))
            .collect();
        adam.step(net.tensors_mut(), grads.clone()).unwrap();
        for ((a, b), g) in net.tensors().iter().zip(before.tensors()).zip(&grads) {
            for ((&x, &y), &gi) in a.data().iter().zip(b.data()).zip(g.data()) {
                let delta = x - y;
                assert!(delta.abs() <= lr * (1.0 + 1e-6));
                assert!((delta + lr * gi.signum()).abs() < 1e-3 * lr);
            }
        }
    }

    #[test]
    fn adam_zero_lr_keeps_params() {
        let mut net = quad_net();
        let before = net.clone();
        let mut adam = AdamState::new(&net, 0.0);
        let grads = net.tensors().iter().map(|t| Tensor::full(t.shape(), 1.3)).collect();
        adam.step(net.tensors_mut(), grads).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut net = quad_net();
        let mut adam = AdamState::new(&net, 1e-3);
        let grads = vec![Tensor::zeros(&[1]); 2];
        assert!(matches!(adam.step(net.tensors_mut(), grads), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn adam_trajectories_repeat() {
        let run = || {
            let mut net = quad_net();
            let mut adam = AdamState::new(&net, 1e-2);
            let x = input(5, 2, 1);
            for _ in 0..20 {
                let mut tape = Tape::new();
                let b = net.bind(&mut tape, true);
                let xv = tape.constant(x.clone());
                let out = net.forward(&mut tape, &b, xv).unwrap();
                let sq = tape.square(out);
                let loss = tape.mean(sq, None).unwrap();
                tape.backward(loss).unwrap();
                adam.step_network(&mut net, &b, &tape).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn club_net_shapes_and_z_independence() {
        let mut net = ClubNet::new(3, 4, 8);
        net.init_params(&mut substream(2, "c"), InitScheme::XavierUniform);
        // Zero the weights reading z_i: rows 0..3 of the first layer.
        let w = &mut net.trunk.linears_mut()[0].weight;
        for r in 0..3 {
            for c in 0..8 {
                w.data_mut()[r * 8 + c] = 0.0;
            }
        }
        let run = |z: Tensor| {
            let mut tape = Tape::new();
            let b = net.bind(&mut tape, false);
            let zv = tape.constant(z);
            let (mu, lv) = net.forward(&mut tape, &b, zv, &[0, 3]).unwrap();
            (tape.value(mu).clone(), tape.value(lv).clone())
        };
        let (m1, l1) = run(input(2, 3, 1));
        let (m2, l2) = run(input(2, 3, 2));
        assert_eq!(m1, m2);
        assert_eq!(l1, l2);
        assert_eq!(m1.shape(), &[2, 3]);
    }

    #[test]
    fn tensor_block_round_trip() {
        let net = quad_net();
        let block = TensorBlock::from_network("enc/0", &net);
        let mut w = ByteWriter::new();
        block.write(&mut w);
        let bytes = w.finish();
        let mut r = ByteReader::new(&bytes);
        assert_eq!(TensorBlock::read(&mut r).unwrap(), block);
        r.expect_end().unwrap();
        let mut r = ByteReader::new(&bytes[..bytes.len() - 3]);
        assert!(matches!(TensorBlock::read(&mut r), Err(crate::Error::Format { .. })));
    }
}
