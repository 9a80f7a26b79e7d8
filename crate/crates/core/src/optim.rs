//! First-order optimizers applied to privatized gradients.
//!
//! Every update takes the current head and state by reference and returns
//! fresh values. The only gradient type accepted is [`PrivatizedGradient`],
//! so nothing in this module can observe per-example data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{LinearHead, PrivatizedGradient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
    Lamb,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Lamb => "lamb",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" => Ok(OptimizerKind::Momentum),
            "adam" => Ok(OptimizerKind::Adam),
            "lamb" => Ok(OptimizerKind::Lamb),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Added to `sqrt(v̂)` in Adam and LAMB denominators.
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn with_kind(kind: OptimizerKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0, 1)")))
            }
        };
        unit("momentum", self.momentum)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps = {} must be positive", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay {} must be nonnegative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Head-shaped buffer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamBuffer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamBuffer {
    fn zeros_like(head: &LinearHead) -> Self {
        Self {
            weights: vec![0.0; head.weights().len()],
            bias: vec![0.0; head.bias().len()],
        }
    }
}

/// Optimizer moments and step counter.
///
/// `first` is the velocity for momentum and `m` for Adam/LAMB; `second` is
/// `v` for Adam/LAMB and empty otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
    first: ParamBuffer,
    second: ParamBuffer,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, head: &LinearHead) -> Self {
        let first = match config.kind {
            OptimizerKind::Sgd => ParamBuffer::default(),
            _ => ParamBuffer::zeros_like(head),
        };
        let second = match config.kind {
            OptimizerKind::Adam | OptimizerKind::Lamb => ParamBuffer::zeros_like(head),
            _ => ParamBuffer::default(),
        };
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &ParamBuffer {
        &self.first
    }

    pub fn second_moment(&self) -> &ParamBuffer {
        &self.second
    }
}

fn check_shapes(head: &LinearHead, g: &PrivatizedGradient) -> Result<()> {
    if head.weights().len() != g.weights().len() {
        return Err(Error::Shape {
            what: "gradient weights",
            expected: head.weights().len(),
            actual: g.weights().len(),
        });
    }
    if head.bias().len() != g.bias().len() {
        return Err(Error::Shape {
            what: "gradient bias",
            expected: head.bias().len(),
            actual: g.bias().len(),
        });
    }
    Ok(())
}

fn check_state(head: &LinearHead, state: &OptimizerState) -> Result<()> {
    let buffers: &[&ParamBuffer] = match state.config.kind {
        OptimizerKind::Sgd => &[],
        OptimizerKind::Momentum => &[&state.first],
        OptimizerKind::Adam | OptimizerKind::Lamb => &[&state.first, &state.second],
    };
    for b in buffers {
        if b.weights.len() != head.weights().len() || b.bias.len() != head.bias().len() {
            return Err(Error::Shape {
                what: "optimizer state",
                expected: head.weights().len() + head.bias().len(),
                actual: b.weights.len() + b.bias.len(),
            });
        }
    }
    Ok(())
}

/// One optimizer step on a privatized gradient.
pub fn dp_step(
    head: &LinearHead,
    state: &OptimizerState,
    gradient: &PrivatizedGradient,
    rate: f64,
) -> Result<(LinearHead, OptimizerState)> {
    check_shapes(head, gradient)?;
    check_state(head, state)?;
    match state.config.kind {
        OptimizerKind::Sgd => Ok(sgd_update(head, state, gradient, rate)),
        OptimizerKind::Momentum => Ok(momentum_update(head, state, gradient, rate)),
        OptimizerKind::Adam => {
            let (direction, next) = adam_update(state, gradient);
            let decay = state.config.weight_decay;
            let mut out = head.clone();
            apply(out.weights_mut(), &direction.weights, rate, decay, 1.0);
            apply(out.bias_mut(), &direction.bias, rate, decay, 1.0);
            Ok((out, next))
        }
        OptimizerKind::Lamb => Ok(lamb_update(head, state, gradient, rate)),
    }
}

/// `w ← w − rate·ratio·(u + λw)`.
fn apply(w: &mut [f64], u: &[f64], rate: f64, decay: f64, ratio: f64) {
    for (wi, &ui) in w.iter_mut().zip(u) {
        *wi -= rate * ratio * (ui + decay * *wi);
    }
}

fn sgd_update(
    head: &LinearHead,
    state: &OptimizerState,
    g: &PrivatizedGradient,
    rate: f64,
) -> (LinearHead, OptimizerState) {
    let decay = state.config.weight_decay;
    let mut out = head.clone();
    apply(out.weights_mut(), g.weights(), rate, decay, 1.0);
    apply(out.bias_mut(), g.bias(), rate, decay, 1.0);
    let mut next = state.clone();
    next.step += 1;
    (out, next)
}

/// Heavy-ball momentum: `v ← μv + g`, `w ← w − η(v + λw)`.
fn momentum_update(
    head: &LinearHead,
    state: &OptimizerState,
    g: &PrivatizedGradient,
    rate: f64,
) -> (LinearHead, OptimizerState) {
    let mu = state.config.momentum;
    let mut next = state.clone();
    for (v, &gi) in next.first.weights.iter_mut().zip(g.weights()) {
        *v = mu * *v + gi;
    }
    for (v, &gi) in next.first.bias.iter_mut().zip(g.bias()) {
        *v = mu * *v + gi;
    }
    next.step += 1;
    let decay = state.config.weight_decay;
    let mut out = head.clone();
    apply(out.weights_mut(), &next.first.weights, rate, decay, 1.0);
    apply(out.bias_mut(), &next.first.bias, rate, decay, 1.0);
    (out, next)
}

fn adam_group(m: &mut [f64], v: &mut [f64], g: &[f64], config: &OptimizerConfig, step: u64) -> Vec<f64> {
    let (b1, b2) = (config.beta1, config.beta2);
    let t = i32::try_from(step).unwrap_or(i32::MAX);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    m.iter_mut()
        .zip(v.iter_mut())
        .zip(g)
        .map(|((mi, vi), &gi)| {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            m_hat / (v_hat.sqrt() + config.eps)
        })
        .collect()
}

/// Bias-corrected Adam direction `m̂/(sqrt(v̂) + ε)` together with the
/// advanced state.
pub fn adam_update(state: &OptimizerState, g: &PrivatizedGradient) -> (ParamBuffer, OptimizerState) {
    let mut next = state.clone();
    next.step += 1;
    let weights = adam_group(
        &mut next.first.weights,
        &mut next.second.weights,
        g.weights(),
        &state.config,
        next.step,
    );
    let bias = adam_group(
        &mut next.first.bias,
        &mut next.second.bias,
        g.bias(),
        &state.config,
        next.step,
    );
    (ParamBuffer { weights, bias }, next)
}

fn l2(xs: impl Iterator<Item = f64>) -> f64 {
    xs.map(|x| x * x).sum::<f64>().sqrt()
}

/// Layerwise trust ratio `‖w‖/‖u + λw‖`, or 1 when either norm is zero.
pub fn trust_ratio(w: &[f64], u: &[f64], decay: f64) -> f64 {
    let w_norm = l2(w.iter().copied());
    let u_norm = l2(u.iter().zip(w).map(|(ui, wi)| ui + decay * wi));
    if w_norm == 0.0 || u_norm == 0.0 {
        1.0
    } else {
        w_norm / u_norm
    }
}

/// LAMB: the Adam direction rescaled by a trust ratio computed separately for
/// `W` and for `b`.
pub fn lamb_update(
    head: &LinearHead,
    state: &OptimizerState,
    g: &PrivatizedGradient,
    rate: f64,
) -> (LinearHead, OptimizerState) {
    let (direction, next) = adam_update(state, g);
    let decay = state.config.weight_decay;
    let mut out = head.clone();
    let r_w = trust_ratio(head.weights(), &direction.weights, decay);
    let r_b = trust_ratio(head.bias(), &direction.bias, decay);
    apply(out.weights_mut(), &direction.weights, rate, decay, r_w);
    apply(out.bias_mut(), &direction.bias, rate, decay, r_b);
    (out, next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    LinearWarmupLinearDecay,
    LinearWarmupCosineDecay,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::LinearWarmupLinearDecay => "linear_warmup_linear_decay",
            ScheduleKind::LinearWarmupCosineDecay => "linear_warmup_cosine_decay",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(ScheduleKind::Constant),
            "linear_warmup_linear_decay" => Ok(ScheduleKind::LinearWarmupLinearDecay),
            "linear_warmup_cosine_decay" => Ok(ScheduleKind::LinearWarmupCosineDecay),
            other => Err(Error::Config(format!("unknown schedule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub base_rate: f64,
}

impl Schedule {
    pub fn constant(base_rate: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            warmup_steps: 0,
            total_steps,
            base_rate,
        }
    }

    /// Learning rate at step `t`; steps past `total_steps` clamp to the final value.
    pub fn rate(&self, t: u64) -> f64 {
        if self.kind == ScheduleKind::Constant {
            return self.base_rate;
        }
        let t = t.min(self.total_steps);
        if t < self.warmup_steps {
            return self.base_rate * t as f64 / self.warmup_steps as f64;
        }
        let decay_len = self.total_steps.saturating_sub(self.warmup_steps);
        if decay_len == 0 {
            return self.base_rate;
        }
        let progress = (t - self.warmup_steps) as f64 / decay_len as f64;
        match self.kind {
            ScheduleKind::LinearWarmupLinearDecay => self.base_rate * (1.0 - progress),
            ScheduleKind::LinearWarmupCosineDecay => {
                self.base_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            ScheduleKind::Constant => unreachable!(),
        }
    }
}
