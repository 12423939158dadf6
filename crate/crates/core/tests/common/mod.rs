//! Reference implementations and helpers shared by the integration tests
//! and the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slimadam_core::autodiff::grad_check;
use slimadam_core::data::gaussian_blobs;
use slimadam_core::model::{build_model, Batch, Model, ModelKind, ModelObjective, ModelSpec};
use slimadam_core::optim::{make_baseline_rules, Baseline, Hyper, Schedule, SharedMomentAdam};
use slimadam_core::rules::RuleSet;
use slimadam_core::snr::{snr_k_with, AveragedSnr};
use slimadam_core::tensor::{broadcast_along, Axes, Tensor, VarianceEstimator};

/// Plain per-coordinate AdamW with decoupled weight decay.
pub struct RefAdam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl RefAdam {
    pub fn new(weights: &[Tensor]) -> Self {
        RefAdam {
            m: weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            v: weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, weights: &mut [Tensor], grads: &[Tensor], h: &Hyper, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - h.beta1.powi(self.t);
        let bc2 = 1.0 - h.beta2.powi(self.t);
        for (p, (w, g)) in weights.iter_mut().zip(grads).enumerate() {
            for (i, wi) in w.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                self.m[p][i] = h.beta1 * self.m[p][i] + (1.0 - h.beta1) * gi;
                self.v[p][i] = h.beta2 * self.v[p][i] + (1.0 - h.beta2) * (gi * gi);
                let m_hat = self.m[p][i] / bc1;
                let v_hat = self.v[p][i] / bc2;
                *wi = *wi - lr * (m_hat / (v_hat.sqrt() + h.eps)) - lr * h.weight_decay * *wi;
            }
        }
    }
}

/// One shared second moment per tensor, written out with explicit loops.
pub struct RefAdaLayer {
    m: Vec<Vec<f64>>,
    v: Vec<f64>,
    t: i32,
}

impl RefAdaLayer {
    pub fn new(weights: &[Tensor]) -> Self {
        RefAdaLayer {
            m: weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            v: vec![0.0; weights.len()],
            t: 0,
        }
    }

    pub fn step(&mut self, weights: &mut [Tensor], grads: &[Tensor], h: &Hyper, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - h.beta1.powi(self.t);
        let bc2 = 1.0 - h.beta2.powi(self.t);
        for (p, (w, g)) in weights.iter_mut().zip(grads).enumerate() {
            let n = g.len() as f64;
            let mut sum = 0.0;
            for &x in g.data() {
                sum += x * x;
            }
            let mean = sum / n;
            let mut residual = 0.0;
            for &x in g.data() {
                residual += x * x - mean;
            }
            let g2 = mean + residual / n;
            self.v[p] = h.beta2 * self.v[p] + (1.0 - h.beta2) * g2;
            let v_hat = self.v[p] / bc2;
            for (i, wi) in w.data_mut().iter_mut().enumerate() {
                self.m[p][i] = h.beta1 * self.m[p][i] + (1.0 - h.beta1) * g.data()[i];
                let m_hat = self.m[p][i] / bc1;
                *wi = *wi - lr * (m_hat / (v_hat.sqrt() + h.eps)) - lr * h.weight_decay * *wi;
            }
        }
    }
}

pub fn ref_clip(grads: &mut [Tensor], max_norm: f64) {
    let mut total = 0.0;
    for g in grads.iter() {
        total += g.data().iter().map(|x| x * x).sum::<f64>();
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }
}

pub fn mlp_setup(seed: u64) -> (Model, Batch) {
    let spec = ModelSpec::mlp_classifier(8, 16, 2, 4);
    let model = build_model(&spec, seed).unwrap();
    let (x, labels) = gaussian_blobs(64, 8, 4, 1.0, 1.0, seed).unwrap();
    (model, Batch::Features { x, labels })
}

enum Reference {
    Adam(RefAdam),
    AdaLayer(RefAdaLayer),
}

/// Trains the MLP with the library optimizer and the matching reference.
/// Returns the first step at which any weight differs in its bits.
pub fn first_mismatch(seed: u64, variant: Baseline, clip: Option<f64>, steps: u64) -> Option<u64> {
    let (mut model, batch) = mlp_setup(seed);
    let hyper = Hyper {
        clip_norm: clip,
        ..Hyper::pretraining(3e-3)
    };
    let schedule = Schedule::new(hyper.lr, 10, steps).unwrap();
    let rules = make_baseline_rules(&model.census(), variant);
    let mut opt = SharedMomentAdam::new(&model, &rules, hyper).unwrap();
    let mut ref_w = model.weights.clone();
    let mut reference = match variant {
        Baseline::Adam => Reference::Adam(RefAdam::new(&ref_w)),
        Baseline::Adalayer => Reference::AdaLayer(RefAdaLayer::new(&ref_w)),
        other => panic!("no reference for {other:?}"),
    };
    for t in 1..=steps {
        let lr = schedule.lr_at(t).unwrap();
        let (_, mut grads) = model.loss_and_grad(&batch).unwrap();
        let mut ref_model = model.clone();
        ref_model.weights = ref_w.clone();
        let (_, mut ref_grads) = ref_model.loss_and_grad(&batch).unwrap();
        opt.step(&mut model.weights, &mut grads, lr).unwrap();
        if let Some(c) = clip {
            ref_clip(&mut ref_grads, c);
        }
        match &mut reference {
            Reference::Adam(r) => r.step(&mut ref_w, &ref_grads, &hyper, lr),
            Reference::AdaLayer(r) => r.step(&mut ref_w, &ref_grads, &hyper, lr),
        }
        let same = model.weights.iter().zip(&ref_w).all(|(a, b)| {
            a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
        if !same {
            return Some(t);
        }
    }
    None
}

/// Gradient for a (4, 6) block at step `t` that is constant along `k`.
pub fn constant_along(k: Axes, t: u64) -> Tensor {
    let (r, c) = (4, 6);
    let f = |i: usize, j: usize| {
        let (a, b) = match k {
            Axes::None => (i, j),
            Axes::FanOut => (0, j),
            Axes::FanIn => (i, 0),
            Axes::Both => (0, 0),
        };
        ((a * 7 + b * 3) as f64 * 0.37 + t as f64 * 0.11).sin() * (1.0 + a as f64) * 1e-2
    };
    let data = (0..r).flat_map(|i| (0..c).map(move |j| f(i, j))).collect();
    Tensor::matrix(r, c, data).unwrap()
}

/// Largest relative gap between k-shared and plain Adam weights, and
/// between their broadcast second moments, over `steps` steps of
/// gradients constant along `k`.
pub fn constant_gradient_gap(k: Axes, steps: u64) -> f64 {
    let model = build_model(&ModelSpec::linear_token(4, 6, true), 1).unwrap();
    let hyper = Hyper {
        clip_norm: None,
        ..Hyper::pretraining(1e-2)
    };
    let schedule = Schedule::new(hyper.lr, steps / 10, steps).unwrap();
    let mut shared_rules = RuleSet::default();
    shared_rules.insert("tok_embd", k);
    let mut shared = SharedMomentAdam::new(&model, &shared_rules, hyper).unwrap();
    let mut adam = SharedMomentAdam::new(&model, &RuleSet::default(), hyper).unwrap();
    let mut ws = model.weights.clone();
    let mut wa = model.weights.clone();
    let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1e-300);
    let mut worst = 0.0f64;
    for t in 1..=steps {
        let lr = schedule.lr_at(t).unwrap();
        let g = constant_along(k, t);
        shared.step(&mut ws, &mut [g.clone()], lr).unwrap();
        adam.step(&mut wa, &mut [g], lr).unwrap();
        for (x, y) in ws[0].data().iter().zip(wa[0].data()) {
            worst = worst.max(rel(*x, *y));
        }
    }
    let vb = broadcast_along(&shared.states[0].v, k, &[4, 6]).unwrap();
    for (x, y) in vb.data().iter().zip(adam.states[0].v.data()) {
        worst = worst.max(rel(*x, *y));
    }
    worst
}

/// Direct double loop over groups: mean, population variance, ratio.
pub fn brute_snr(v: &[Vec<f64>], k: Axes, eps: f64) -> f64 {
    let (r, c) = (v.len(), v[0].len());
    let groups: Vec<Vec<f64>> = match k {
        Axes::FanIn => v.to_vec(),
        Axes::FanOut => (0..c).map(|j| (0..r).map(|i| v[i][j]).collect()).collect(),
        Axes::Both => vec![v.iter().flatten().copied().collect()],
        Axes::None => unreachable!(),
    };
    let mut total = 0.0;
    for g in &groups {
        let n = g.len() as f64;
        let mut mean = 0.0;
        for x in g {
            mean += x;
        }
        mean /= n;
        let mut var = 0.0;
        for x in g {
            var += (x - mean) * (x - mean);
        }
        var /= n;
        total += mean * mean / (var + eps);
    }
    total / groups.len() as f64
}

/// Nonnegative entries with a skewed distribution, like squared gradients.
pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
    (0..r)
        .map(|_| {
            (0..c)
                .map(|_| rng.random::<f64>() * rng.random::<f64>())
                .collect()
        })
        .collect()
}

pub fn to_tensor(v: &[Vec<f64>]) -> Tensor {
    let rows: Vec<&[f64]> = v.iter().map(|r| r.as_slice()).collect();
    Tensor::from_rows(&rows)
}

/// Averaged SNR of every block of a small transformer, computed from
/// synthetic second moments scaled by `c`.
pub fn synthetic_averaged(c: f64, seed: u64) -> (AveragedSnr, slimadam_core::Census) {
    let model = build_model(&ModelSpec::mini_transformer(32, 16, 2, 4, 8), 0).unwrap();
    let census = model.census();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut avg = AveragedSnr::new();
    for e in census.primary() {
        if e.shape.len() == 1 {
            continue;
        }
        let (r, cols) = (e.shape[0], e.shape[1]);
        let row_scale: Vec<f64> = (0..r).map(|_| rng.random_range(0.1..10.0)).collect();
        let col_scale: Vec<f64> = (0..cols).map(|_| rng.random_range(0.1..10.0)).collect();
        let data = (0..r)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| c * row_scale[i] * col_scale[j] * rng.random_range(0.5..1.5))
            .collect();
        let v = Tensor::matrix(r, cols, data).unwrap();
        for k in Axes::REDUCING {
            let s = snr_k_with(&v, k, 0.0, VarianceEstimator::Population).unwrap();
            avg.insert((e.name.clone(), k), s);
        }
    }
    (avg, census)
}

/// Replaces every weight with uniform draws of standard deviation `scale`
/// so gradient checks exercise non-trivial activations and LayerNorm gains.
pub fn randomize(model: &mut Model, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for w in &mut model.weights {
        for x in w.data_mut() {
            *x = (rng.random::<f64>() * 2.0 - 1.0) * scale * 3f64.sqrt();
        }
    }
}

pub fn token_batch(vocab: usize, batch: usize, context: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * context;
    Batch::Tokens {
        inputs: (0..n).map(|_| rng.random_range(0..vocab)).collect(),
        targets: (0..n).map(|_| rng.random_range(0..vocab)).collect(),
        batch,
        context,
    }
}

/// Every model kind, tied and untied where tying applies.
pub fn grad_specs() -> Vec<ModelSpec> {
    let mut out = Vec::new();
    for tying in [true, false] {
        out.push(ModelSpec::linear_token(11, 5, tying));
        let mut t = ModelSpec::mini_transformer(13, 8, 2, 2, 5);
        t.weight_tying = tying;
        out.push(t);
    }
    out.push(ModelSpec::mlp_classifier(6, 7, 2, 3));
    out
}

pub fn batch_for(spec: &ModelSpec, seed: u64) -> Batch {
    match spec.kind {
        ModelKind::MlpClassifier => {
            let (x, labels) =
                gaussian_blobs(9, spec.input_dim, spec.vocab, 1.0, 1.0, seed).unwrap();
            Batch::Features { x, labels }
        }
        _ => token_batch(spec.vocab, 2, spec.context.min(5), seed),
    }
}

/// Worst relative gradient error of `spec` at randomized weights.
pub fn grad_error(spec: &ModelSpec, seed: u64) -> f64 {
    let mut model = build_model(spec, seed).unwrap();
    randomize(&mut model, 0.5, seed);
    let batch = batch_for(spec, seed);
    let mut obj = ModelObjective {
        model: &mut model,
        batch: &batch,
    };
    grad_check(&mut obj, 1e-5, 40).unwrap()
}

pub const BIN: &str = env!("CARGO_BIN_EXE_slimadam");

pub fn run_cli(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .map(|rd| {
            rd.map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    fs::read(e.path()).unwrap(),
                )
            })
            .collect()
        })
        .unwrap_or_default()
}

/// Runs `args` twice into the same output directory and compares every
/// written file byte for byte, plus standard output.
pub fn rerun_identical(args: &[&str], out: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let first = run_cli(args);
    if !first.status.success() {
        return Err(format!(
            "{args:?} failed: {}",
            String::from_utf8_lossy(&first.stderr)
        ));
    }
    let a = snapshot(out);
    if a.is_empty() {
        return Err(format!("{args:?} wrote nothing"));
    }
    fs::remove_dir_all(out).map_err(|e| e.to_string())?;
    let second = run_cli(args);
    if !second.status.success() {
        return Err(format!("{args:?} failed on rerun"));
    }
    let b = snapshot(out);
    if a.keys().ne(b.keys()) {
        return Err(format!("{args:?} wrote different files on rerun"));
    }
    if let Some(name) = a.keys().find(|n| a[*n] != b[*n]) {
        return Err(format!("{args:?}: {name} differs between reruns"));
    }
    if first.stdout != second.stdout {
        return Err(format!("{args:?}: stdout differs between reruns"));
    }
    Ok(a)
}

pub const TINY_TRANSFORMER: &str = r#"
vocab = 32
d_model = 8
n_layers = 1
n_heads = 2
context = 8
batch = 4
steps = 20
warmup = 4
stream_length = 4000
lrs = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1]
"#;

pub const TINY_LINEAR: &str = r#"
model = "linear_token_model"
weight_tying = false
d_model = 4
context = 8
batch = 4
steps = 12
warmup = 3
stream_length = 3000
vocabs = [16, 32]
seeds = [0]
"#;
