//! Adam with per-block shared second moments.
//!
//! Each parameter block keeps a full-shape first moment `M` and a second
//! moment `V` reduced along the block's [`Axes`]: squared gradients are
//! averaged over those axes before entering the moving average, and the
//! reduced `V` is broadcast back when scaling the update. `Axes::None` on
//! every block is plain AdamW; `Axes::Both` everywhere is AdaLayer.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Census, Model};
use crate::rules::{Provenance, RuleSet};
use crate::tensor::{broadcast_along, mean_along, Axes, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl Default for Hyper {
    fn default() -> Self {
        Self::pretraining(1e-3)
    }
}

impl Hyper {
    pub fn pretraining(lr: f64) -> Self {
        Hyper {
            lr,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: Some(1.0),
        }
    }

    pub fn finetuning(lr: f64) -> Self {
        Hyper {
            beta2: 0.999,
            ..Self::pretraining(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Input(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Input("betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Input(
                "eps must be positive and weight decay non-negative".into(),
            ));
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return Err(Error::Input("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from zero to `peak_lr`, then cosine decay to `peak_lr / 10`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup: u64,
    pub total: u64,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup: u64, total: u64) -> Result<Self> {
        if !(0 < warmup && warmup < total) {
            return Err(Error::Input(format!(
                "schedule needs 0 < warmup < total, got {warmup} and {total}"
            )));
        }
        Ok(Schedule {
            peak_lr,
            warmup,
            total,
        })
    }

    pub fn min_lr(&self) -> f64 {
        self.peak_lr / 10.0
    }

    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t > self.total {
            return Err(Error::Range(format!(
                "step {t} beyond schedule end {}",
                self.total
            )));
        }
        let peak = self.peak_lr;
        if t <= self.warmup {
            return Ok(peak * t as f64 / self.warmup as f64);
        }
        let progress = (t - self.warmup) as f64 / (self.total - self.warmup) as f64;
        let min = self.min_lr();
        Ok(min + (peak - min) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0)
    }
}

/// Scales all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`. Returns the norm observed before scaling.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::Input(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::Divergence(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }
    Ok(norm)
}

/// Optimizer state of one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    pub name: String,
    pub axes: Axes,
    pub m: Tensor,
    pub v: Tensor,
}

impl BlockState {
    pub fn new(name: impl Into<String>, shape: &[usize], axes: Axes) -> Result<Self> {
        let reduced = axes.reduced_shape(shape)?;
        Ok(BlockState {
            name: name.into(),
            axes,
            m: Tensor::zeros(shape),
            v: Tensor::zeros(&reduced),
        })
    }
}

/// One update of a single block at global step `t` (1-based).
pub fn shared_moment_step(
    state: &mut BlockState,
    w: &mut Tensor,
    g: &Tensor,
    hyper: &Hyper,
    lr_t: f64,
    t: u64,
) -> Result<()> {
    if g.shape() != w.shape() || state.m.shape() != w.shape() {
        return Err(Error::Shape(format!(
            "block {}: gradient {:?} / weight {:?} / state {:?}",
            state.name,
            g.shape(),
            w.shape(),
            state.m.shape()
        )));
    }
    if t == 0 {
        return Err(Error::Contract(
            "step counter must be incremented before updating".into(),
        ));
    }
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    for (m, &gi) in state.m.data_mut().iter_mut().zip(g.data()) {
        *m = b1 * *m + (1.0 - b1) * gi;
    }
    let g2 = g.map(|x| x * x);
    let g2_shared = mean_along(&g2, state.axes)?;
    for (v, &s) in state.v.data_mut().iter_mut().zip(g2_shared.data()) {
        *v = b2 * *v + (1.0 - b2) * s;
    }
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let v_hat = broadcast_along(&state.v.map(|v| v / bc2), state.axes, w.shape())?;
    let decay = lr_t * hyper.weight_decay;
    for ((wi, &m), &vh) in w
        .data_mut()
        .iter_mut()
        .zip(state.m.data())
        .zip(v_hat.data())
    {
        let m_hat = m / bc1;
        *wi = *wi - lr_t * (m_hat / (vh.sqrt() + hyper.eps)) - decay * *wi;
    }
    if !w.all_finite() {
        return Err(Error::Divergence(format!(
            "non-finite update in block {}",
            state.name
        )));
    }
    Ok(())
}

/// Shared-second-moment Adam over all storage slots of a model.
#[derive(Debug, Clone)]
pub struct SharedMomentAdam {
    pub hyper: Hyper,
    pub states: Vec<BlockState>,
    /// Global step counter; 0 before the first step.
    pub t: u64,
}

impl SharedMomentAdam {
    /// One state per storage slot, compressed according to `rules`. Blocks
    /// absent from `rules` stay uncompressed.
    pub fn new(model: &Model, rules: &RuleSet, hyper: Hyper) -> Result<Self> {
        hyper.validate()?;
        rules.check_against(&model.census())?;
        let states = model
            .primary_blocks()
            .map(|b| BlockState::new(&b.name, &b.shape, rules.get(&b.name)))
            .collect::<Result<_>>()?;
        Ok(SharedMomentAdam {
            hyper,
            states,
            t: 0,
        })
    }

    /// Clip (if configured), advance the step counter, update every block.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, weights: &mut [Tensor], grads: &mut [Tensor], lr_t: f64) -> Result<f64> {
        if weights.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(Error::Contract(format!(
                "{} states, {} weights, {} gradients",
                self.states.len(),
                weights.len(),
                grads.len()
            )));
        }
        let norm = match self.hyper.clip_norm {
            Some(c) => clip_grad_norm(grads, c)?,
            None => {
                let n = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
                if !n.is_finite() {
                    return Err(Error::Divergence(format!("gradient norm is {n}")));
                }
                n
            }
        };
        self.t += 1;
        for ((state, w), g) in self
            .states
            .iter_mut()
            .zip(weights.iter_mut())
            .zip(grads.iter())
        {
            shared_moment_step(state, w, g, &self.hyper, lr_t, self.t)?;
        }
        Ok(norm)
    }

    /// Second-moment entries currently stored.
    pub fn stored_second_moments(&self) -> usize {
        self.states.iter().map(|s| s.v.len()).sum()
    }

    /// Text checkpoint of `(name, axes, t, M, V)` per block. Values use the
    /// shortest round-trip decimal form, so reloading is bit-exact.
    pub fn checkpoint(&self) -> String {
        let mut out = format!("step {}\n", self.t);
        let shape = |t: &Tensor| {
            t.shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x")
        };
        let row = |t: &Tensor| {
            t.data()
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        for s in &self.states {
            let _ = writeln!(
                out,
                "block {} {} {} {}",
                s.name,
                s.axes,
                shape(&s.m),
                shape(&s.v)
            );
            let _ = writeln!(out, "m {}", row(&s.m));
            let _ = writeln!(out, "v {}", row(&s.v));
        }
        out
    }

    /// Restores state written by [`SharedMomentAdam::checkpoint`].
    pub fn restore(&mut self, text: &str) -> Result<()> {
        let parsed = parse_checkpoint(text)?;
        if parsed.1.len() != self.states.len() {
            return Err(Error::Input(format!(
                "checkpoint has {} blocks, optimizer has {}",
                parsed.1.len(),
                self.states.len()
            )));
        }
        for (mine, theirs) in self.states.iter().zip(&parsed.1) {
            if mine.name != theirs.name
                || mine.axes != theirs.axes
                || mine.v.shape() != theirs.v.shape()
            {
                return Err(Error::Input(format!(
                    "checkpoint block {} ({}) does not match {} ({})",
                    theirs.name, theirs.axes, mine.name, mine.axes
                )));
            }
        }
        self.t = parsed.0;
        self.states = parsed.1;
        Ok(())
    }
}

/// Parses a checkpoint into `(step, block states)`.
pub fn parse_checkpoint(text: &str) -> Result<(u64, Vec<BlockState>)> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let perr = |line: usize, msg: String| Error::Parse {
        line: line + 1,
        msg,
    };
    let (n, first) = lines
        .next()
        .ok_or_else(|| perr(0, "empty checkpoint".into()))?;
    let t = first
        .strip_prefix("step ")
        .and_then(|s| s.trim().parse::<u64>().ok())
        .ok_or_else(|| perr(n, "expected `step <t>`".into()))?;
    let parse_shape = |line: usize, s: &str| -> Result<Vec<usize>> {
        s.split('x')
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|e| perr(line, format!("bad shape `{s}`: {e}")))
            })
            .collect()
    };
    let mut states = Vec::new();
    while let Some((n, header)) = lines.next() {
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 5 || f[0] != "block" {
            return Err(perr(
                n,
                "expected `block <name> <axes> <m-shape> <v-shape>`".into(),
            ));
        }
        let axes = Axes::from_str(f[2]).map_err(|e| perr(n, e.to_string()))?;
        let (ms, vs) = (parse_shape(n, f[3])?, parse_shape(n, f[4])?);
        let mut read = |tag: &str, shape: &[usize]| -> Result<Tensor> {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| perr(n, format!("missing `{tag}` line")))?;
            let body = line
                .strip_prefix(tag)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| perr(ln, format!("expected `{tag}` line")))?;
            let data = body
                .split_whitespace()
                .map(|x| {
                    x.parse::<f64>()
                        .map_err(|e| perr(ln, format!("bad value `{x}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Tensor::new(shape, data).map_err(|e| perr(ln, e.to_string()))
        };
        let m = read("m", &ms)?;
        let v = read("v", &vs)?;
        if axes.reduced_shape(&ms).ok().as_deref() != Some(vs.as_slice()) {
            return Err(perr(
                n,
                format!("v shape {vs:?} inconsistent with {axes} on {ms:?}"),
            ));
        }
        states.push(BlockState {
            name: f[1].to_string(),
            axes,
            m,
            v,
        });
    }
    Ok((t, states))
}

/// Rule sets of the published low-memory Adam variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Adam,
    Adalayer,
    AdalayerLnTl,
    AdaminiV2,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [
        Baseline::Adam,
        Baseline::Adalayer,
        Baseline::AdalayerLnTl,
        Baseline::AdaminiV2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Adam => "adam",
            Baseline::Adalayer => "adalayer",
            Baseline::AdalayerLnTl => "adalayer_ln_tl",
            Baseline::AdaminiV2 => "adamini_v2",
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown baseline `{s}`")))
    }
}

pub fn make_baseline_rules(census: &Census, variant: Baseline) -> RuleSet {
    let mut rules = RuleSet::new(Provenance::Baseline(variant));
    for e in census.primary() {
        let t = e.layer_type;
        let k = match variant {
            Baseline::Adam => Axes::None,
            Baseline::Adalayer => Axes::Both,
            Baseline::AdalayerLnTl if t.is_norm() || t.has_token_dim() => Axes::None,
            Baseline::AdalayerLnTl => Axes::Both,
            // One moment per output neuron (per token row for the
            // embedding/head); norms always share one moment.
            Baseline::AdaminiV2 if t.is_norm() => Axes::Both,
            Baseline::AdaminiV2 if e.is_matrix() => Axes::FanIn,
            Baseline::AdaminiV2 => Axes::None,
        };
        rules.insert(&e.name, k);
    }
    rules
}
