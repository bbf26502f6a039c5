//! Feedforward networks with exact reverse-mode products.
//!
//! [`Mlp`] is a plain multilayer perceptron: affine layers with a smooth
//! activation between them and a linear output layer. [`VelocityNet`] wraps
//! it as a time-conditioned field `v(x, t)` by appending `t` to the input.
//!
//! A forward pass returns an [`ActivationTape`] holding the pre- and
//! post-activation vectors of every layer. The tape is the unit of activation
//! memory: while it is alive it is registered with the network's
//! [`OpCounters`], and it must be handed back to compute a VJP.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::counters::{LiveTape, OpCounters};
use crate::error::{Error, Result};
use crate::rng;

/// Seed used by [`VelocityNet::new`] when the caller does not pick one.
pub const DEFAULT_INIT_SEED: u64 = 0x5eed;

const CHECKPOINT_MAGIC: &str = "msflow-mlp";
const CHECKPOINT_VERSION: u32 = 1;

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => h.tanh(),
            Activation::Identity => h,
        }
    }

    /// Derivative expressed through the pre-activation `h` and output `a`.
    fn derivative(self, _h: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Parse(format!("unknown activation tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Gradient with respect to every weight and bias, shaped like the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub layers: Vec<Layer>,
}

impl ParamGrad {
    pub fn zeros_like(net: &Mlp) -> Self {
        ParamGrad {
            layers: net
                .layers
                .iter()
                .map(|l| Layer {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    /// Flattened in the same order as [`Mlp::params_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        for r in 0..l.weight.nrows() {
            out.extend(l.weight.row(r).iter().copied());
        }
        out.extend(l.bias.iter().copied());
    }
    out
}

/// Intermediates of one forward pass.
///
/// `pre[l]` and `post[l]` are the affine output and activated output of layer
/// `l`; for the last layer they coincide because the output is linear.
#[derive(Debug)]
pub struct ActivationTape {
    net_id: u64,
    input: DVector<f64>,
    pre: Vec<DVector<f64>>,
    post: Vec<DVector<f64>>,
    _live: LiveTape,
}

impl ActivationTape {
    pub fn len(&self) -> usize {
        self.pre.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pre.is_empty()
    }

    pub fn input(&self) -> &DVector<f64> {
        &self.input
    }

    pub fn output(&self) -> &DVector<f64> {
        self.post.last().expect("tape has at least one layer")
    }
}

/// Multilayer perceptron with a linear output layer.
#[derive(Debug)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
    counters: Arc<OpCounters>,
    id: u64,
}

/// Clones get their own counters; tapes from the original are not accepted.
impl Clone for Mlp {
    fn clone(&self) -> Self {
        Mlp {
            layers: self.layers.clone(),
            activation: self.activation,
            counters: OpCounters::new(),
            id: fresh_id(),
        }
    }
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.activation == other.activation && self.layers == other.layers
    }
}

impl Mlp {
    /// Uniform init in `±1/sqrt(fan_in)` for weights and biases.
    pub fn new(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_widths(widths)?;
        let mut rng = rng::seeded(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                Layer {
                    weight: DMatrix::from_fn(fan_out, fan_in, |_, _| {
                        rng.random_range(-bound..bound)
                    }),
                    bias: DVector::from_fn(fan_out, |_, _| rng.random_range(-bound..bound)),
                }
            })
            .collect();
        Ok(Self::assemble(layers, activation))
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        validate_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weight: DMatrix::zeros(w[1], w[0]),
                bias: DVector::zeros(w[1]),
            })
            .collect();
        Ok(Self::assemble(layers, activation))
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::contract(format!(
                    "layer {i}: bias length {} does not match {} output rows",
                    l.bias.len(),
                    l.weight.nrows()
                )));
            }
            if i > 0 && layers[i - 1].weight.nrows() != l.weight.ncols() {
                return Err(Error::contract(format!(
                    "layer {i}: expects {} inputs but previous layer emits {}",
                    l.weight.ncols(),
                    layers[i - 1].weight.nrows()
                )));
            }
        }
        let net = Self::assemble(layers, activation);
        if !net.is_finite() {
            return Err(Error::non_finite("network parameters"));
        }
        Ok(net)
    }

    fn assemble(layers: Vec<Layer>, activation: Activation) -> Self {
        Mlp {
            layers,
            activation,
            counters: OpCounters::new(),
            id: fresh_id(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].weight.ncols()];
        w.extend(self.layers.iter().map(|l| l.weight.nrows()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.nrows()).unwrap_or(0)
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn counters(&self) -> &Arc<OpCounters> {
        &self.counters
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Weights row-major then bias, layer by layer.
    pub fn params_flat(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for r in 0..l.weight.nrows() {
                for c in 0..l.weight.ncols() {
                    l.weight[(r, c)] = it.next().unwrap();
                }
            }
            for b in l.bias.iter_mut() {
                *b = it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &DVector<f64>) -> Result<(DVector<f64>, ActivationTape)> {
        if input.len() != self.input_dim() {
            return Err(Error::contract(format!(
                "network input has dimension {}, expected {}",
                input.len(),
                self.input_dim()
            )));
        }
        if !input.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("network input"));
        }
        self.counters.charge_forward();
        let live = LiveTape::register(&self.counters);

        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<DVector<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let a_in = if i == 0 { input } else { &post[i - 1] };
            let h = &layer.weight * a_in + &layer.bias;
            let a = if i == last {
                h.clone()
            } else {
                h.map(|v| self.activation.apply(v))
            };
            pre.push(h);
            post.push(a);
        }
        let out = post[last].clone();
        let tape = ActivationTape {
            net_id: self.id,
            input: input.clone(),
            pre,
            post,
            _live: live,
        };
        Ok((out, tape))
    }

    /// Forward pass whose activations are released immediately.
    pub fn eval(&self, input: &DVector<f64>) -> Result<DVector<f64>> {
        self.forward(input).map(|(out, _)| out)
    }

    fn check_tape(&self, tape: &ActivationTape, w: &DVector<f64>) -> Result<()> {
        if tape.net_id != self.id {
            return Err(Error::contract("activation tape was recorded on a different network"));
        }
        if w.len() != self.output_dim() {
            return Err(Error::contract(format!(
                "cotangent has dimension {}, expected {}",
                w.len(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    fn backward(
        &self,
        tape: &ActivationTape,
        w: &DVector<f64>,
        mut params: Option<&mut ParamGrad>,
    ) -> DVector<f64> {
        let last = self.layers.len() - 1;
        let mut delta = w.clone();
        for i in (0..=last).rev() {
            if i != last {
                let act = self.activation;
                delta.zip_zip_apply(&tape.pre[i], &tape.post[i], |d, h, a| {
                    *d *= act.derivative(h, a)
                });
            }
            let a_in = if i == 0 { &tape.input } else { &tape.post[i - 1] };
            if let Some(g) = params.as_deref_mut() {
                g.layers[i].weight.ger(1.0, &delta, a_in, 1.0);
                g.layers[i].bias += &delta;
            }
            delta = self.layers[i].weight.tr_mul(&delta);
        }
        delta
    }

    /// `J^T w` with respect to the full network input.
    pub fn vjp_input(&self, tape: &ActivationTape, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_tape(tape, w)?;
        self.counters.charge_vjp();
        Ok(self.backward(tape, w, None))
    }

    /// `J^T w` with respect to every weight and bias.
    pub fn vjp_params(&self, tape: &ActivationTape, w: &DVector<f64>) -> Result<ParamGrad> {
        self.check_tape(tape, w)?;
        self.counters.charge_vjp();
        let mut g = ParamGrad::zeros_like(self);
        self.backward(tape, w, Some(&mut g));
        Ok(g)
    }

    pub fn to_checkpoint_string(&self, kind: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(s, "kind {kind}");
        let _ = writeln!(s, "activation {}", self.activation.tag());
        let widths: Vec<String> = self.widths().iter().map(|w| w.to_string()).collect();
        let _ = writeln!(s, "widths {}", widths.join(" "));
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "weight {i}");
            for r in 0..l.weight.nrows() {
                let row: Vec<String> = l.weight.row(r).iter().map(|v| format!("{v:e}")).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
            let _ = writeln!(s, "bias {i}");
            let row: Vec<String> = l.bias.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    /// Parses the text checkpoint; returns the network and its `kind` tag.
    pub fn from_checkpoint_str(text: &str) -> Result<(Self, String)> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines
                .next()
                .map(|(n, l)| (n + 1, l.trim()))
                .ok_or_else(|| Error::Parse(format!("checkpoint truncated: expected {what}")))
        };
        let bad = |line: usize, msg: String| Error::Parse(format!("checkpoint line {line}: {msg}"));

        let (n, header) = next("header")?;
        let version = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad(n, "not an msflow checkpoint".into()))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(bad(n, format!("unsupported checkpoint version {version}")));
        }
        let (n, kind) = next("kind")?;
        let kind = kind
            .strip_prefix("kind ")
            .ok_or_else(|| bad(n, "expected `kind <tag>`".into()))?
            .to_string();
        let (n, act) = next("activation")?;
        let activation = Activation::from_tag(
            act.strip_prefix("activation ")
                .ok_or_else(|| bad(n, "expected `activation <tag>`".into()))?,
        )?;
        let (n, w) = next("widths")?;
        let widths: Vec<usize> = w
            .strip_prefix("widths ")
            .ok_or_else(|| bad(n, "expected `widths ...`".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| bad(n, format!("bad width {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        validate_widths(&widths)?;

        let parse_row = |n: usize, line: &str, expect: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|e| bad(n, format!("bad number {t:?}: {e}"))))
                .collect::<Result<_>>()?;
            if vals.len() != expect {
                return Err(bad(n, format!("expected {expect} values, found {}", vals.len())));
            }
            Ok(vals)
        };

        let mut layers = Vec::new();
        for (i, win) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (win[0], win[1]);
            let (n, tag) = next("weight header")?;
            if tag != format!("weight {i}") {
                return Err(bad(n, format!("expected `weight {i}`")));
            }
            let mut weight = DMatrix::zeros(fan_out, fan_in);
            for r in 0..fan_out {
                let (n, line) = next("weight row")?;
                for (c, v) in parse_row(n, line, fan_in)?.into_iter().enumerate() {
                    weight[(r, c)] = v;
                }
            }
            let (n, tag) = next("bias header")?;
            if tag != format!("bias {i}") {
                return Err(bad(n, format!("expected `bias {i}`")));
            }
            let (n, line) = next("bias row")?;
            let bias = DVector::from_vec(parse_row(n, line, fan_out)?);
            layers.push(Layer { weight, bias });
        }
        Ok((Self::from_layers(layers, activation)?, kind))
    }
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::contract(format!(
            "layer widths must list at least two positive sizes, got {widths:?}"
        )));
    }
    Ok(())
}

/// Time-conditioned velocity field `v(x, t)` on `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    mlp: Mlp,
}

impl VelocityNet {
    /// `hidden` lists the hidden widths; input is `dim + 1`, output `dim`.
    pub fn new(dim: usize, hidden: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        Self::from_mlp(Mlp::new(&Self::widths_for(dim, hidden), activation, seed)?)
    }

    pub fn zeros(dim: usize, hidden: &[usize], activation: Activation) -> Result<Self> {
        Self::from_mlp(Mlp::zeros(&Self::widths_for(dim, hidden), activation)?)
    }

    fn widths_for(dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut w = vec![dim + 1];
        w.extend_from_slice(hidden);
        w.push(dim);
        w
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.input_dim() != mlp.output_dim() + 1 {
            return Err(Error::contract(format!(
                "velocity network needs input width d+1; got {} -> {}",
                mlp.input_dim(),
                mlp.output_dim()
            )));
        }
        Ok(VelocityNet { mlp })
    }

    pub fn dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn counters(&self) -> &Arc<OpCounters> {
        self.mlp.counters()
    }

    pub fn forward(&self, x: &DVector<f64>, t: f64) -> Result<(DVector<f64>, ActivationTape)> {
        if x.len() != self.dim() {
            return Err(Error::contract(format!(
                "state has dimension {}, network expects {}",
                x.len(),
                self.dim()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract(format!("time {t} outside [0, 1]")));
        }
        let input = DVector::from_iterator(self.dim() + 1, x.iter().copied().chain([t]));
        self.mlp.forward(&input)
    }

    /// `J_x^T w`; the time component of the input gradient is discarded.
    pub fn vjp_input(&self, tape: &ActivationTape, w: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.mlp.vjp_input(tape, w)?;
        Ok(g.rows(0, self.dim()).into_owned())
    }

    pub fn vjp_params(&self, tape: &ActivationTape, w: &DVector<f64>) -> Result<ParamGrad> {
        self.mlp.vjp_params(tape, w)
    }

    pub fn to_checkpoint_string(&self) -> String {
        self.mlp.to_checkpoint_string("velocity")
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let (mlp, kind) = Mlp::from_checkpoint_str(text)?;
        if kind != "velocity" {
            return Err(Error::Parse(format!("expected a velocity checkpoint, found kind {kind:?}")));
        }
        Self::from_mlp(mlp)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}
