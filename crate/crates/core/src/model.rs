//! Toy models that carry the transformer layer taxonomy.
//!
//! A [`Model`] is an ordered list of [`ParamBlock`]s plus one weight tensor
//! per storage slot. Tied blocks (token embedding and LM head under weight
//! tying) point at the same slot, so they share weights and, downstream, a
//! single optimizer state.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Differentiable, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerType {
    TokEmbd,
    LMHead,
    AttnKey,
    AttnQuery,
    AttnValue,
    AttnProj,
    MLPUp,
    MLPDown,
    AttnLN,
    MLPLN,
    FinalLN,
    PosEmbd,
    Generic,
}

impl LayerType {
    pub const ALL: [LayerType; 13] = [
        LayerType::TokEmbd,
        LayerType::LMHead,
        LayerType::AttnKey,
        LayerType::AttnQuery,
        LayerType::AttnValue,
        LayerType::AttnProj,
        LayerType::MLPUp,
        LayerType::MLPDown,
        LayerType::AttnLN,
        LayerType::MLPLN,
        LayerType::FinalLN,
        LayerType::PosEmbd,
        LayerType::Generic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerType::TokEmbd => "TokEmbd",
            LayerType::LMHead => "LMHead",
            LayerType::AttnKey => "AttnKey",
            LayerType::AttnQuery => "AttnQuery",
            LayerType::AttnValue => "AttnValue",
            LayerType::AttnProj => "AttnProj",
            LayerType::MLPUp => "MLPUp",
            LayerType::MLPDown => "MLPDown",
            LayerType::AttnLN => "AttnLN",
            LayerType::MLPLN => "MLPLN",
            LayerType::FinalLN => "FinalLN",
            LayerType::PosEmbd => "PosEmbd",
            LayerType::Generic => "Generic",
        }
    }

    pub fn is_norm(self) -> bool {
        matches!(
            self,
            LayerType::AttnLN | LayerType::MLPLN | LayerType::FinalLN
        )
    }

    /// Token embedding or LM head: matrices with a vocabulary axis (axis 0).
    pub fn has_token_dim(self) -> bool {
        matches!(self, LayerType::TokEmbd | LayerType::LMHead)
    }
}

impl fmt::Display for LayerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown layer type `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearTokenModel,
    MlpClassifier,
    MiniTransformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Normal(0, std²); residual projections get variance std²/(2·n_layers).
    Mitchell,
    /// Uniform(±1/sqrt(fan_in)).
    Default,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Vocabulary size for token models; number of classes for the MLP.
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context: usize,
    pub weight_tying: bool,
    pub init: Init,
    pub init_std: f64,
    /// Input features of the MLP classifier; unused by token models.
    pub input_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::MiniTransformer,
            vocab: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            context: 32,
            weight_tying: true,
            init: Init::Mitchell,
            init_std: 0.02,
            input_dim: 8,
        }
    }
}

impl ModelSpec {
    pub fn linear_token(vocab: usize, d_model: usize, weight_tying: bool) -> Self {
        ModelSpec {
            kind: ModelKind::LinearTokenModel,
            vocab,
            d_model,
            n_layers: 0,
            weight_tying,
            ..Default::default()
        }
    }

    pub fn mini_transformer(
        vocab: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        context: usize,
    ) -> Self {
        ModelSpec {
            kind: ModelKind::MiniTransformer,
            vocab,
            d_model,
            n_layers,
            n_heads,
            context,
            weight_tying: true,
            ..Default::default()
        }
    }

    pub fn mlp_classifier(
        input_dim: usize,
        hidden: usize,
        n_layers: usize,
        classes: usize,
    ) -> Self {
        ModelSpec {
            kind: ModelKind::MlpClassifier,
            vocab: classes,
            d_model: hidden,
            n_layers,
            input_dim,
            weight_tying: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.vocab == 0 || self.d_model == 0 {
            return bad("vocab and d_model must be positive".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        match self.kind {
            ModelKind::MiniTransformer => {
                if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
                    return bad(format!(
                        "d_model {} not divisible by n_heads {}",
                        self.d_model, self.n_heads
                    ));
                }
                if self.n_layers == 0 || self.context == 0 {
                    return bad("transformer needs n_layers ≥ 1 and context ≥ 1".into());
                }
            }
            ModelKind::MlpClassifier => {
                if self.input_dim == 0 || self.vocab < 2 {
                    return bad("classifier needs input_dim ≥ 1 and ≥ 2 classes".into());
                }
            }
            ModelKind::LinearTokenModel => {}
        }
        Ok(())
    }
}

/// A named, typed parameter. `slot` indexes the model's weight storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub layer_type: LayerType,
    pub depth: usize,
    pub shape: Vec<usize>,
    pub tied_to: Option<String>,
    pub slot: usize,
}

impl ParamBlock {
    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Block layout for `spec` without allocating weights.
pub fn layout(spec: &ModelSpec) -> Result<Vec<ParamBlock>> {
    spec.validate()?;
    let mut blocks: Vec<ParamBlock> = Vec::new();
    let mut add = |name: String, layer_type, depth, shape: Vec<usize>| {
        let slot = blocks.iter().filter(|b| b.tied_to.is_none()).count();
        blocks.push(ParamBlock {
            name,
            layer_type,
            depth,
            shape,
            tied_to: None,
            slot,
        });
    };
    let (v, d) = (spec.vocab, spec.d_model);
    match spec.kind {
        ModelKind::LinearTokenModel => {
            add("tok_embd".into(), LayerType::TokEmbd, 0, vec![v, d]);
            if !spec.weight_tying {
                add("lm_head".into(), LayerType::LMHead, 0, vec![v, d]);
            }
        }
        ModelKind::MiniTransformer => {
            add("tok_embd".into(), LayerType::TokEmbd, 0, vec![v, d]);
            add(
                "pos_embd".into(),
                LayerType::PosEmbd,
                0,
                vec![spec.context, d],
            );
            for l in 0..spec.n_layers {
                add(format!("h.{l}.attn_ln"), LayerType::AttnLN, l, vec![d]);
                add(format!("h.{l}.attn.key"), LayerType::AttnKey, l, vec![d, d]);
                add(
                    format!("h.{l}.attn.query"),
                    LayerType::AttnQuery,
                    l,
                    vec![d, d],
                );
                add(
                    format!("h.{l}.attn.value"),
                    LayerType::AttnValue,
                    l,
                    vec![d, d],
                );
                add(
                    format!("h.{l}.attn.proj"),
                    LayerType::AttnProj,
                    l,
                    vec![d, d],
                );
                add(format!("h.{l}.mlp_ln"), LayerType::MLPLN, l, vec![d]);
                add(format!("h.{l}.mlp.up"), LayerType::MLPUp, l, vec![4 * d, d]);
                add(
                    format!("h.{l}.mlp.down"),
                    LayerType::MLPDown,
                    l,
                    vec![d, 4 * d],
                );
            }
            add("final_ln".into(), LayerType::FinalLN, 0, vec![d]);
            if !spec.weight_tying {
                add("lm_head".into(), LayerType::LMHead, 0, vec![v, d]);
            }
        }
        ModelKind::MlpClassifier => {
            let mut fan_in = spec.input_dim;
            for l in 0..spec.n_layers {
                add(
                    format!("layers.{l}.weight"),
                    LayerType::Generic,
                    l,
                    vec![d, fan_in],
                );
                add(format!("layers.{l}.bias"), LayerType::Generic, l, vec![d]);
                fan_in = d;
            }
            let l = spec.n_layers;
            add(
                format!("layers.{l}.weight"),
                LayerType::Generic,
                l,
                vec![v, fan_in],
            );
            add(format!("layers.{l}.bias"), LayerType::Generic, l, vec![v]);
        }
    }
    if spec.weight_tying && spec.kind != ModelKind::MlpClassifier {
        blocks.push(ParamBlock {
            name: "lm_head".into(),
            layer_type: LayerType::LMHead,
            depth: 0,
            shape: vec![v, d],
            tied_to: Some("tok_embd".into()),
            slot: 0,
        });
    }
    Ok(blocks)
}

/// One line of the census manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusEntry {
    pub name: String,
    pub layer_type: LayerType,
    pub depth: usize,
    pub shape: Vec<usize>,
    pub tied_to: Option<String>,
}

impl CensusEntry {
    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Block inventory of a model: names, types, depths and shapes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Census {
    pub entries: Vec<CensusEntry>,
}

impl Census {
    pub fn from_blocks(blocks: &[ParamBlock]) -> Self {
        Census {
            entries: blocks
                .iter()
                .map(|b| CensusEntry {
                    name: b.name.clone(),
                    layer_type: b.layer_type,
                    depth: b.depth,
                    shape: b.shape.clone(),
                    tied_to: b.tied_to.clone(),
                })
                .collect(),
        }
    }

    pub fn for_spec(spec: &ModelSpec) -> Result<Self> {
        Ok(Self::from_blocks(&layout(spec)?))
    }

    /// GPT-small: 12 layers, width 768, 12 heads, tied 50304-token
    /// embedding and a learnable 1024-position embedding.
    pub fn gpt_small() -> Self {
        let mut spec = ModelSpec::mini_transformer(50304, 768, 12, 12, 1024);
        spec.weight_tying = true;
        Self::for_spec(&spec).expect("valid GPT-small spec")
    }

    /// Entries that own storage (not tied to another block).
    pub fn primary(&self) -> impl Iterator<Item = &CensusEntry> {
        self.entries.iter().filter(|e| e.tied_to.is_none())
    }

    pub fn get(&self, name: &str) -> Option<&CensusEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// `name layer_type depth fan_out fan_in tied_to`, one line per block.
    /// Vectors write their length as `fan_out` and `-` for `fan_in`;
    /// untied blocks write `-` for `tied_to`.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let fan_in = if e.is_matrix() {
                e.shape[1].to_string()
            } else {
                "-".into()
            };
            out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                e.name,
                e.layer_type,
                e.depth,
                e.shape[0],
                fan_in,
                e.tied_to.as_deref().unwrap_or("-")
            ));
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(perr(format!("expected 6 fields, got {}", f.len())));
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| perr(format!("bad number `{s}`: {e}")))
            };
            let layer_type = f[1].parse().map_err(|e: Error| perr(e.to_string()))?;
            let depth = num(f[2])?;
            let fan_out = num(f[3])?;
            let shape = if f[4] == "-" {
                vec![fan_out]
            } else {
                vec![fan_out, num(f[4])?]
            };
            if shape.contains(&0) {
                return Err(perr("zero-sized dimension".into()));
            }
            if entries.iter().any(|e: &CensusEntry| e.name == f[0]) {
                return Err(perr(format!("duplicate block `{}`", f[0])));
            }
            entries.push(CensusEntry {
                name: f[0].to_string(),
                layer_type,
                depth,
                shape,
                tied_to: (f[5] != "-").then(|| f[5].to_string()),
            });
        }
        Ok(Census { entries })
    }
}

/// Inputs and targets for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    /// `batch` sequences of `context` tokens, flattened sequence-major.
    Tokens {
        inputs: Vec<usize>,
        targets: Vec<usize>,
        batch: usize,
        context: usize,
    },
    Features {
        x: Tensor,
        labels: Vec<usize>,
    },
}

impl Batch {
    pub fn targets(&self) -> &[usize] {
        match self {
            Batch::Tokens { targets, .. } => targets,
            Batch::Features { labels, .. } => labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub blocks: Vec<ParamBlock>,
    pub weights: Vec<Tensor>,
}

/// Builds `spec` with weights drawn from a generator seeded by `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let blocks = layout(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    for b in blocks.iter().filter(|b| b.tied_to.is_none()) {
        weights.push(init_block(spec, b, &mut rng)?);
    }
    Ok(Model {
        spec: spec.clone(),
        blocks,
        weights,
    })
}

fn init_block(spec: &ModelSpec, b: &ParamBlock, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = b.numel();
    if b.layer_type.is_norm() {
        return Ok(Tensor::full(&b.shape, 1.0));
    }
    if !b.is_matrix() {
        return Ok(Tensor::zeros(&b.shape));
    }
    let data: Vec<f64> = match spec.init {
        Init::Mitchell => {
            let mut std = spec.init_std;
            if matches!(b.layer_type, LayerType::AttnProj | LayerType::MLPDown) {
                std /= (2.0 * spec.n_layers as f64).sqrt();
            }
            let normal = Normal::new(0.0, std).map_err(|e| Error::Input(e.to_string()))?;
            (0..n).map(|_| normal.sample(rng)).collect()
        }
        Init::Default => {
            let bound = 1.0 / (b.shape[1] as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        }
    };
    Tensor::new(&b.shape, data)
}

impl Model {
    pub fn census(&self) -> Census {
        Census::from_blocks(&self.blocks)
    }

    /// Blocks that own a storage slot, in slot order.
    pub fn primary_blocks(&self) -> impl Iterator<Item = &ParamBlock> {
        self.blocks.iter().filter(|b| b.tied_to.is_none())
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    fn slot_of(&self, name: &str) -> usize {
        self.block(name)
            .map(|b| b.slot)
            .expect("block present by construction")
    }

    /// Records the forward pass and returns `(param nodes per slot, logits)`.
    fn record(&self, tape: &mut Tape, batch: &Batch) -> Result<(Vec<NodeId>, NodeId)> {
        let params: Vec<NodeId> = self.weights.iter().map(|w| tape.param(w.clone())).collect();
        let p = |name: &str| params[self.slot_of(name)];
        let logits = match (self.spec.kind, batch) {
            (ModelKind::LinearTokenModel, Batch::Tokens { inputs, .. }) => {
                self.check_tokens(inputs)?;
                let x = tape.gather(p("tok_embd"), inputs)?;
                tape.linear(x, p("lm_head"))?
            }
            (
                ModelKind::MiniTransformer,
                Batch::Tokens {
                    inputs,
                    batch,
                    context,
                    ..
                },
            ) => {
                self.check_tokens(inputs)?;
                self.transformer_forward(tape, &p, inputs, *batch, *context)?
            }
            (ModelKind::MlpClassifier, Batch::Features { x, .. }) => {
                if x.cols() != self.spec.input_dim {
                    return Err(Error::Input(format!(
                        "features have {} columns, model expects {}",
                        x.cols(),
                        self.spec.input_dim
                    )));
                }
                let mut h = tape.input(x.clone());
                for l in 0..=self.spec.n_layers {
                    h = tape.linear(h, p(&format!("layers.{l}.weight")))?;
                    h = tape.add_bias(h, p(&format!("layers.{l}.bias")))?;
                    if l < self.spec.n_layers {
                        h = tape.gelu(h);
                    }
                }
                h
            }
            (kind, _) => {
                return Err(Error::Input(format!(
                    "batch type does not match model kind {kind:?}"
                )))
            }
        };
        Ok((params, logits))
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.spec.vocab) {
            Some(t) => Err(Error::Input(format!(
                "token {t} out of range for vocab {}",
                self.spec.vocab
            ))),
            None => Ok(()),
        }
    }

    fn transformer_forward(
        &self,
        tape: &mut Tape,
        p: &dyn Fn(&str) -> NodeId,
        inputs: &[usize],
        batch: usize,
        context: usize,
    ) -> Result<NodeId> {
        let spec = &self.spec;
        if context > spec.context || inputs.len() != batch * context {
            return Err(Error::Input(format!(
                "batch of {batch}x{context} tokens does not fit context {}",
                spec.context
            )));
        }
        let (d, heads) = (spec.d_model, spec.n_heads);
        let dh = d / heads;
        let n = batch * context;
        let positions: Vec<usize> = (0..n).map(|i| i % context).collect();
        let tok = tape.gather(p("tok_embd"), inputs)?;
        let pos = tape.gather(p("pos_embd"), &positions)?;
        let mut x = tape.add(tok, pos)?;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for l in 0..spec.n_layers {
            let h = tape.layer_norm(x, p(&format!("h.{l}.attn_ln")), None)?;
            let q = tape.linear(h, p(&format!("h.{l}.attn.query")))?;
            let k = tape.linear(h, p(&format!("h.{l}.attn.key")))?;
            let v = tape.linear(h, p(&format!("h.{l}.attn.value")))?;
            let mut parts = Vec::with_capacity(batch * heads);
            for b in 0..batch {
                for hd in 0..heads {
                    let (r0, c0) = (b * context, hd * dh);
                    let qs = tape.slice(q, r0, context, c0, dh)?;
                    let ks = tape.slice(k, r0, context, c0, dh)?;
                    let vs = tape.slice(v, r0, context, c0, dh)?;
                    let s = tape.matmul_t(qs, false, ks, true)?;
                    let s = tape.scale(s, inv_sqrt);
                    let a = tape.causal_softmax(s)?;
                    let o = tape.matmul(a, vs)?;
                    parts.push((o, r0, c0));
                }
            }
            let att = tape.assemble((n, d), &parts)?;
            let att = tape.linear(att, p(&format!("h.{l}.attn.proj")))?;
            x = tape.add(x, att)?;
            let h = tape.layer_norm(x, p(&format!("h.{l}.mlp_ln")), None)?;
            let u = tape.linear(h, p(&format!("h.{l}.mlp.up")))?;
            let u = tape.gelu(u);
            let m = tape.linear(u, p(&format!("h.{l}.mlp.down")))?;
            x = tape.add(x, m)?;
        }
        let x = tape.layer_norm(x, p("final_ln"), None)?;
        tape.linear(x, p("lm_head"))
    }

    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, logits) = self.record(&mut tape, batch)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean cross-entropy over every position (or sample) in the batch.
    pub fn forward_loss(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, logits) = self.record(&mut tape, batch)?;
        let loss = tape.cross_entropy(logits, batch.targets())?;
        Ok(tape.value(loss).item())
    }

    /// Loss and one gradient per storage slot. Tied blocks receive the sum
    /// of their uses.
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let (params, logits) = self.record(&mut tape, batch)?;
        let loss = tape.cross_entropy(logits, batch.targets())?;
        let mut grads = tape.backward(loss)?;
        let g = params
            .iter()
            .map(|&id| grads.take(id).expect("every param gets a gradient"))
            .collect();
        Ok((tape.value(loss).item(), g))
    }
}

/// Per-position cross-entropy of `logits` rows against `targets`.
pub fn per_position_losses(logits: &Tensor, targets: &[usize]) -> Vec<f64> {
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            max + z.ln() - row[t]
        })
        .collect()
}

/// A model paired with a fixed batch, for gradient checking.
pub struct ModelObjective<'a> {
    pub model: &'a mut Model,
    pub batch: &'a Batch,
}

impl Differentiable for ModelObjective<'_> {
    fn parameters(&self) -> &[Tensor] {
        &self.model.weights
    }

    fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.model.weights
    }

    fn loss(&self) -> Result<f64> {
        self.model.forward_loss(self.batch)
    }

    fn loss_and_grad(&self) -> Result<(f64, Vec<Tensor>)> {
        self.model.loss_and_grad(self.batch)
    }
}
