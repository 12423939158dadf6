//! Training loop and the experiment protocols built on it: single runs with
//! SNR recording, the vocabulary grid, learning-rate sweeps and SNR versus
//! learning rate.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{char_corpus, gaussian_blobs, split_held_out, TokenBatches, ZipfStream};
use crate::error::{Error, Result};
use crate::model::{build_model, Batch, Census, Init, LayerType, ModelKind, ModelSpec};
use crate::optim::{make_baseline_rules, Baseline, Hyper, Schedule, SharedMomentAdam};
use crate::rules::{
    canonical_rules, derive_rules, savings_report, DeriveMode, DeriveOptions, RuleSet,
    SavingsReport,
};
use crate::snr::{
    averaged_snr, depth_averaged_snr, measured_axes, AveragedSnr, MeasurementGrid, SnrTrajectory,
};
use crate::tensor::{Axes, Tensor, VarianceEstimator};

/// Where the optimizer's compression rules come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RuleSource {
    Baseline(Baseline),
    Canonical,
    /// Derived from a short Adam run at `derive_lr` before training.
    SlimAdam,
    File(PathBuf),
}

impl fmt::Display for RuleSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleSource::Baseline(b) => f.write_str(b.as_str()),
            RuleSource::Canonical => f.write_str("canonical"),
            RuleSource::SlimAdam => f.write_str("slimadam"),
            RuleSource::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl FromStr for RuleSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(p) = s.strip_prefix("file:") {
            return Ok(RuleSource::File(PathBuf::from(p)));
        }
        match s {
            "canonical" => Ok(RuleSource::Canonical),
            "slimadam" => Ok(RuleSource::SlimAdam),
            _ => s
                .parse()
                .map(RuleSource::Baseline)
                .map_err(|_| Error::Config(format!("unknown rule source `{s}`"))),
        }
    }
}

impl TryFrom<String> for RuleSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RuleSource> for String {
    fn from(r: RuleSource) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DataSource {
    Zipf,
    /// Zipf tokens where some positions copy an earlier token.
    ZipfCopy,
    /// The bundled character-level text.
    Corpus,
    Blobs,
    /// A token file written by [`ZipfStream::write_token_file`].
    File(PathBuf),
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Zipf => f.write_str("zipf"),
            DataSource::ZipfCopy => f.write_str("zipf_copy"),
            DataSource::Corpus => f.write_str("corpus"),
            DataSource::Blobs => f.write_str("blobs"),
            DataSource::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(p) = s.strip_prefix("file:") {
            return Ok(DataSource::File(PathBuf::from(p)));
        }
        match s {
            "zipf" => Ok(DataSource::Zipf),
            "zipf_copy" => Ok(DataSource::ZipfCopy),
            "corpus" => Ok(DataSource::Corpus),
            "blobs" => Ok(DataSource::Blobs),
            _ => Err(Error::Config(format!("unknown data source `{s}`"))),
        }
    }
}

impl TryFrom<String> for DataSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DataSource> for String {
    fn from(d: DataSource) -> String {
        d.to_string()
    }
}

/// SNR guard for training runs. Second-moment entries of these models sit
/// far below 1e-6, so the generic guard would swamp their variance.
pub const RUN_EPS_SNR: f64 = 1e-40;

/// Everything that determines a run, as one flat key-value document.
/// Missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// Vocabulary for token models, class count for the classifier.
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context: usize,
    pub weight_tying: bool,
    pub init: Init,
    pub init_std: f64,
    pub input_dim: usize,

    pub data: DataSource,
    pub alpha: f64,
    pub stream_length: usize,
    pub data_seed: u64,
    /// Copy probability and look-back distance for `data = "zipf_copy"`.
    pub copy_prob: f64,
    pub copy_lag: usize,
    /// Blob count, centre offset and noise for `data = "blobs"`.
    pub samples: usize,
    pub separation: f64,
    pub spread: f64,
    /// Fraction of the data, taken from the end, reserved for evaluation.
    pub held_out: f64,

    pub batch: usize,
    pub steps: u64,
    pub warmup: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,

    pub rules: RuleSource,
    pub cutoff: f64,
    pub derive_mode: DeriveMode,
    pub no_both: bool,
    /// Learning rate of the rule-derivation run; defaults to `lr / 10`.
    pub derive_lr: Option<f64>,

    pub seed: u64,
    pub snr: bool,
    pub eps_snr: f64,
    /// Variance divisor used by the SNR statistic.
    pub variance: VarianceEstimator,
    /// Held-out evaluation cadence; 0 means every `steps / 10`.
    pub eval_every: u64,
    /// A run diverges when its loss exceeds this multiple of the first loss.
    pub divergence_factor: f64,
    pub out_dir: PathBuf,

    pub vocabs: Vec<usize>,
    pub seeds: Vec<u64>,
    pub lrs: Vec<f64>,
    pub cutoffs: Vec<f64>,
    /// Extra rule sources compared in `lr-sweep`.
    pub optimizers: Vec<RuleSource>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let spec = ModelSpec::default();
        let hyper = Hyper::default();
        TrainConfig {
            model: spec.kind,
            vocab: spec.vocab,
            d_model: spec.d_model,
            n_layers: spec.n_layers,
            n_heads: spec.n_heads,
            context: spec.context,
            weight_tying: spec.weight_tying,
            init: spec.init,
            init_std: spec.init_std,
            input_dim: spec.input_dim,
            data: DataSource::Zipf,
            alpha: 1.0,
            stream_length: 200_000,
            data_seed: 0,
            copy_prob: 0.5,
            copy_lag: 8,
            samples: 512,
            separation: 2.0,
            spread: 0.5,
            held_out: 0.1,
            batch: 16,
            steps: 2000,
            warmup: 200,
            lr: hyper.lr,
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            eps: hyper.eps,
            weight_decay: hyper.weight_decay,
            clip_norm: hyper.clip_norm.unwrap_or(0.0),
            rules: RuleSource::Baseline(Baseline::Adam),
            cutoff: 1.0,
            derive_mode: DeriveMode::PerLayer,
            no_both: false,
            derive_lr: None,
            seed: 0,
            snr: true,
            eps_snr: RUN_EPS_SNR,
            variance: VarianceEstimator::Population,
            eval_every: 0,
            divergence_factor: 10.0,
            out_dir: PathBuf::from("runs/default"),
            vocabs: vec![64, 256, 1024, 4096],
            seeds: vec![0, 1, 2],
            lrs: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2],
            cutoffs: vec![0.5, 1.0, 2.0, 4.0],
            optimizers: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.model,
            vocab: self.vocab,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            context: self.context,
            weight_tying: self.weight_tying,
            init: self.init,
            init_std: self.init_std,
            input_dim: self.input_dim,
        }
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.lr, self.warmup, self.steps)
    }

    pub fn derive_options(&self, lr: Option<f64>, source: &str) -> DeriveOptions {
        DeriveOptions {
            cutoff: self.cutoff,
            mode: self.derive_mode,
            allow_both: !self.no_both,
            lr,
            source: source.to_string(),
        }
    }

    /// Reports every inconsistency as a config error.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.model_spec().validate().map_err(cfg)?;
        self.hyper().validate().map_err(cfg)?;
        self.schedule().map_err(cfg)?;
        if self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be ≥ 0".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.held_out > 0.0 && self.held_out < 1.0) {
            return Err(Error::Config(format!(
                "held_out must lie in (0, 1), got {}",
                self.held_out
            )));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::Config("divergence_factor must exceed 1".into()));
        }
        if !(self.cutoff > 0.0) || !(self.eps_snr >= 0.0) {
            return Err(Error::Config(
                "cutoff must be positive and eps_snr non-negative".into(),
            ));
        }
        if matches!(self.derive_lr, Some(lr) if !(lr > 0.0)) {
            return Err(Error::Config("derive_lr must be positive".into()));
        }
        let token_model = self.model != ModelKind::MlpClassifier;
        let blobs = self.data == DataSource::Blobs;
        if token_model == blobs {
            return Err(Error::Config(format!(
                "data source `{}` does not fit model `{:?}`",
                self.data, self.model
            )));
        }
        Ok(())
    }
}

/// Training and evaluation data for one run.
enum TrainData {
    Tokens {
        train: Vec<usize>,
        held: Vec<usize>,
    },
    Features {
        train_x: Tensor,
        train_y: Vec<usize>,
        held_x: Tensor,
        held_y: Vec<usize>,
    },
}

impl TrainData {
    fn load(cfg: &TrainConfig) -> Result<Self> {
        let tokens = match &cfg.data {
            DataSource::Blobs => {
                let (x, y) = gaussian_blobs(
                    cfg.samples,
                    cfg.input_dim,
                    cfg.vocab,
                    cfg.separation,
                    cfg.spread,
                    cfg.data_seed,
                )?;
                let n_held = ((cfg.samples as f64) * cfg.held_out).round() as usize;
                let n_train = cfg.samples - n_held;
                if n_train == 0 || n_held == 0 {
                    return Err(Error::Config("too few samples for a held-out split".into()));
                }
                let rows = |r: std::ops::Range<usize>| {
                    let d = cfg.input_dim;
                    Tensor::matrix(r.len(), d, x.data()[r.start * d..r.end * d].to_vec())
                };
                return Ok(TrainData::Features {
                    train_x: rows(0..n_train)?,
                    train_y: y[..n_train].to_vec(),
                    held_x: rows(n_train..cfg.samples)?,
                    held_y: y[n_train..].to_vec(),
                });
            }
            DataSource::Zipf | DataSource::ZipfCopy => {
                let stream = ZipfStream {
                    vocab: cfg.vocab,
                    alpha: cfg.alpha,
                    length: cfg.stream_length,
                    seed: cfg.data_seed,
                };
                if cfg.data == DataSource::ZipfCopy {
                    stream.generate_with_copies(cfg.copy_prob, cfg.copy_lag)?
                } else {
                    stream.generate()?
                }
            }
            DataSource::Corpus => char_corpus().0,
            DataSource::File(p) => ZipfStream::read_token_file(p)?.1,
        };
        if let Some(t) = tokens.iter().max().filter(|&&t| t >= cfg.vocab) {
            return Err(Error::Config(format!(
                "data contains token {t}, vocab is {}",
                cfg.vocab
            )));
        }
        let (train, held) = split_held_out(&tokens, cfg.held_out);
        Ok(TrainData::Tokens {
            train: train.to_vec(),
            held: held.to_vec(),
        })
    }

    fn train_batches<'a>(
        &'a self,
        cfg: &TrainConfig,
    ) -> Result<Box<dyn Iterator<Item = Batch> + 'a>> {
        Ok(match self {
            TrainData::Tokens { train, .. } => {
                Box::new(TokenBatches::new(train, cfg.context, cfg.batch, cfg.seed)?)
            }
            TrainData::Features {
                train_x, train_y, ..
            } => Box::new(FeatureBatches::new(train_x, train_y, cfg.batch, cfg.seed)?),
        })
    }

    fn eval_batches(&self, cfg: &TrainConfig) -> Result<Vec<Batch>> {
        match self {
            TrainData::Tokens { held, .. } => {
                TokenBatches::sequential(held, cfg.context, cfg.batch)
                    .map_err(|e| Error::Config(format!("held-out split unusable: {e}")))
            }
            TrainData::Features { held_x, held_y, .. } => Ok(vec![Batch::Features {
                x: held_x.clone(),
                labels: held_y.clone(),
            }]),
        }
    }
}

/// Minibatches of feature rows, reshuffled every epoch.
struct FeatureBatches<'a> {
    x: &'a Tensor,
    y: &'a [usize],
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> FeatureBatches<'a> {
    fn new(x: &'a Tensor, y: &'a [usize], batch: usize, seed: u64) -> Result<Self> {
        if batch > y.len() {
            return Err(Error::Config(format!(
                "batch {batch} exceeds {} training samples",
                y.len()
            )));
        }
        let mut it = FeatureBatches {
            x,
            y,
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        it.shuffle();
        Ok(it)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order = (0..self.y.len()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }
}

impl Iterator for FeatureBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor + self.batch > self.order.len() {
            self.epoch += 1;
            self.shuffle();
        }
        let idx = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        let d = self.x.cols();
        let data = idx
            .iter()
            .flat_map(|&i| self.x.row(i).iter().copied())
            .collect();
        let x = Tensor::matrix(idx.len(), d, data).expect("rows of a matrix");
        Some(Batch::Features {
            x,
            labels: idx.iter().map(|&i| self.y[i]).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    #[serde(skip)]
    pub losses: Vec<LossRow>,
    pub evals: Vec<EvalRow>,
    pub steps_run: u64,
    pub initial_loss: f64,
    /// Last finite training loss.
    pub final_loss: f64,
    pub final_eval_loss: Option<f64>,
    pub best_eval_loss: Option<f64>,
    pub diverged: bool,
    pub divergence: Option<String>,
    pub savings_fraction: f64,
    #[serde(skip)]
    pub savings: SavingsReport,
    #[serde(skip)]
    pub rules: RuleSet,
    #[serde(skip)]
    pub snr: SnrTrajectory,
    #[serde(skip)]
    pub census: Census,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl TrainReport {
    /// Loss used to compare runs: best held-out loss, or for a diverged
    /// run the last finite training loss.
    pub fn sweep_loss(&self) -> f64 {
        match (self.diverged, self.best_eval_loss) {
            (false, Some(l)) => l,
            _ => self.final_loss,
        }
    }

    pub fn averaged_snr(&self) -> Result<AveragedSnr> {
        averaged_snr(&self.snr)
    }
}

/// Resolves the configured rule source against the model census.
pub fn resolve_rules(cfg: &TrainConfig, census: &Census) -> Result<RuleSet> {
    let rules = match &cfg.rules {
        RuleSource::Baseline(b) => make_baseline_rules(census, *b),
        RuleSource::Canonical => canonical_rules(census),
        RuleSource::File(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            RuleSet::from_text(&text)?
        }
        RuleSource::SlimAdam => {
            let lr = cfg.derive_lr.unwrap_or(cfg.lr / 10.0);
            let source = TrainConfig {
                rules: RuleSource::Baseline(Baseline::Adam),
                lr,
                snr: true,
                ..cfg.clone()
            };
            let report = train(&source)?;
            let avg = report.averaged_snr()?;
            derive_rules(&avg, census, &cfg.derive_options(Some(lr), "inline"))?
        }
    };
    rules
        .check_against(census)
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(rules)
}

pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let census = Census::for_spec(&cfg.model_spec())?;
    let rules = resolve_rules(cfg, &census)?;
    train_with_rules(cfg, rules)
}

/// Trains with an explicit rule set, ignoring `cfg.rules`.
pub fn train_with_rules(cfg: &TrainConfig, rules: RuleSet) -> Result<TrainReport> {
    cfg.validate()?;
    let started = Instant::now();
    let data = TrainData::load(cfg)?;
    let mut model = build_model(&cfg.model_spec(), cfg.seed)?;
    let census = model.census();
    let savings = savings_report(&census, &rules)?;
    let mut opt = SharedMomentAdam::new(&model, &rules, cfg.hyper())?;
    let schedule = cfg.schedule()?;
    let grid = MeasurementGrid::for_total(cfg.steps);
    let eval_every = if cfg.eval_every == 0 {
        (cfg.steps / 10).max(1)
    } else {
        cfg.eval_every
    };
    let eval_batches = data.eval_batches(cfg)?;
    let mut batches = data.train_batches(cfg)?;

    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let mut evals = Vec::new();
    let mut snr = SnrTrajectory::new();
    let mut initial = f64::NAN;
    let mut last_finite = f64::NAN;
    let mut divergence = None;

    for t in 1..=cfg.steps {
        let batch = batches.next().expect("batch iterators never end");
        let (loss, mut grads) = model.loss_and_grad(&batch)?;
        let lr = schedule.lr_at(t)?;
        losses.push(LossRow { step: t, loss, lr });
        if t == 1 {
            initial = loss;
        }
        if loss.is_finite() {
            last_finite = loss;
        }
        if !loss.is_finite() || loss > cfg.divergence_factor * initial {
            divergence = Some(format!("loss {loss} at step {t} (initial {initial})"));
            break;
        }
        match opt.step(&mut model.weights, &mut grads, lr) {
            Err(Error::Divergence(msg)) => {
                divergence = Some(format!("step {t}: {msg}"));
                break;
            }
            other => {
                other?;
            }
        }
        if cfg.snr && grid.contains(t) {
            let blocks = opt
                .states
                .iter()
                .filter(|s| s.axes == Axes::None)
                .map(|s| (census.get(&s.name).expect("state per census block"), &s.v));
            snr.record(t, blocks, cfg.eps_snr, cfg.variance)?;
        }
        if t % eval_every == 0 || t == cfg.steps {
            let l = evaluate(&model, &eval_batches)?;
            evals.push(EvalRow { step: t, loss: l });
            if !l.is_finite() {
                divergence = Some(format!("held-out loss {l} at step {t}"));
                break;
            }
        }
    }

    let finite_evals = evals.iter().map(|e| e.loss).filter(|l| l.is_finite());
    Ok(TrainReport {
        steps_run: losses.last().map_or(0, |r| r.step),
        initial_loss: initial,
        final_loss: last_finite,
        final_eval_loss: evals.last().map(|e| e.loss),
        best_eval_loss: finite_evals.reduce(f64::min),
        diverged: divergence.is_some(),
        divergence,
        savings_fraction: savings.fraction,
        savings,
        losses,
        evals,
        rules,
        snr,
        census,
        wall_time: started.elapsed(),
    })
}

/// Mean cross-entropy over every held-out target.
fn evaluate(model: &crate::model::Model, batches: &[Batch]) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for b in batches {
        let k = b.targets().len();
        total += model.forward_loss(b)? * k as f64;
        n += k;
    }
    Ok(total / n as f64)
}

fn csv_string<T: Serialize>(rows: &[T], header: &[&str]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header)
            .map_err(|e| Error::Input(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Input(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub(crate) fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn losses_csv(report: &TrainReport) -> Result<String> {
    csv_string(&report.losses, &["step", "loss", "lr"])
}

/// Writes `losses.csv`, `snr.csv`, `rules.txt`, `savings.json`, `run.json`
/// and `report.json` into `dir`.
pub fn write_train_outputs(dir: &Path, cfg: &TrainConfig, report: &TrainReport) -> Result<()> {
    write_file(dir, "losses.csv", &losses_csv(report)?)?;
    write_file(dir, "snr.csv", &report.snr.to_csv()?)?;
    write_file(dir, "rules.txt", &report.rules.to_text())?;
    write_file(dir, "savings.json", &json(&report.savings))?;
    write_file(dir, "run.json", &json(cfg))?;
    write_file(dir, "report.json", &json(report))?;
    Ok(())
}

/// `(K_embd, K_head)` choices of the vocabulary grid. The embedding and
/// head are `(vocab, d_model)`, so `FanOut` shares along the token axis
/// and `FanIn` along the embedding axis.
pub const VOCAB_AXES: [Axes; 4] = [Axes::None, Axes::FanOut, Axes::FanIn, Axes::Both];

pub fn vocab_grid_cells() -> Vec<(Axes, Axes)> {
    VOCAB_AXES
        .iter()
        .flat_map(|&e| VOCAB_AXES.iter().map(move |&h| (e, h)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabCell {
    pub vocab: usize,
    pub seed: u64,
    pub k_embd: Axes,
    pub k_head: Axes,
    pub loss: f64,
    pub delta: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSnr {
    pub vocab: usize,
    pub seed: u64,
    pub block: String,
    pub k: Axes,
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VocabReport {
    pub cells: Vec<VocabCell>,
    pub snr: Vec<VocabSnr>,
}

impl VocabReport {
    /// Averaged SNR of `block` along `k`, one value per seed, for `vocab`.
    pub fn snr_of(&self, vocab: usize, block: &str, k: Axes) -> Vec<f64> {
        self.snr
            .iter()
            .filter(|s| s.vocab == vocab && s.block == block && s.k == k)
            .map(|s| s.snr)
            .collect()
    }

    pub fn cells_csv(&self) -> Result<String> {
        csv_string(
            &self.cells,
            &[
                "vocab", "seed", "k_embd", "k_head", "loss", "delta", "diverged",
            ],
        )
    }

    pub fn snr_csv(&self) -> Result<String> {
        csv_string(&self.snr, &["vocab", "seed", "block", "k", "snr"])
    }
}

/// Trains an untied linear token model for every vocabulary, seed and
/// `(K_embd, K_head)` cell, reporting the held-out loss gap to Adam and
/// the Adam run's averaged SNR of the embedding and head.
pub fn vocab_experiment(
    base: &TrainConfig,
    vocabs: &[usize],
    seeds: &[u64],
    cells: &[(Axes, Axes)],
) -> Result<VocabReport> {
    if base.model != ModelKind::LinearTokenModel || base.weight_tying {
        return Err(Error::Config(
            "vocabulary grid needs an untied linear_token_model".into(),
        ));
    }
    let mut out = VocabReport::default();
    for &vocab in vocabs {
        for &seed in seeds {
            let cfg = TrainConfig {
                vocab,
                seed,
                data_seed: seed,
                snr: true,
                ..base.clone()
            };
            let census = Census::for_spec(&cfg.model_spec())?;
            let adam = train_with_rules(&cfg, make_baseline_rules(&census, Baseline::Adam))?;
            let adam_loss = adam.final_eval_loss.unwrap_or(f64::NAN);
            for ((block, k), snr) in adam.averaged_snr()? {
                out.snr.push(VocabSnr {
                    vocab,
                    seed,
                    block,
                    k,
                    snr,
                });
            }
            for &(k_embd, k_head) in cells {
                let report = if (k_embd, k_head) == (Axes::None, Axes::None) {
                    adam.clone()
                } else {
                    let mut rules = RuleSet::default();
                    rules.insert("tok_embd", k_embd);
                    rules.insert("lm_head", k_head);
                    train_with_rules(
                        &TrainConfig {
                            snr: false,
                            ..cfg.clone()
                        },
                        rules,
                    )?
                };
                let loss = if report.diverged {
                    report.final_loss
                } else {
                    report.final_eval_loss.unwrap_or(f64::NAN)
                };
                out.cells.push(VocabCell {
                    vocab,
                    seed,
                    k_embd,
                    k_head,
                    loss,
                    delta: loss - adam_loss,
                    diverged: report.diverged,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub optimizer: String,
    pub lr: f64,
    pub loss: f64,
    pub diverged: bool,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    csv_string(rows, &["optimizer", "lr", "loss", "diverged"])
}

/// Trains `base` once per learning rate with the given rules.
pub fn sweep_runs(
    base: &TrainConfig,
    lrs: &[f64],
    rules: &RuleSet,
) -> Result<Vec<(f64, TrainReport)>> {
    lrs.iter()
        .map(|&lr| {
            Ok((
                lr,
                train_with_rules(&TrainConfig { lr, ..base.clone() }, rules.clone())?,
            ))
        })
        .collect()
}

fn rows_of(label: &str, runs: &[(f64, TrainReport)]) -> Vec<SweepRow> {
    runs.iter()
        .map(|(lr, r)| SweepRow {
            optimizer: label.to_string(),
            lr: *lr,
            loss: r.sweep_loss(),
            diverged: r.diverged,
        })
        .collect()
}

/// Per-learning-rate loss for each rule source.
pub fn lr_sweep(
    base: &TrainConfig,
    lrs: &[f64],
    optimizers: &[RuleSource],
) -> Result<Vec<SweepRow>> {
    check_grid(lrs, 5)?;
    let census = Census::for_spec(&base.model_spec())?;
    let mut rows = Vec::new();
    for source in optimizers {
        let rules = resolve_rules(
            &TrainConfig {
                rules: source.clone(),
                ..base.clone()
            },
            &census,
        )?;
        rows.extend(rows_of(
            &source.to_string(),
            &sweep_runs(base, lrs, &rules)?,
        ));
    }
    Ok(rows)
}

fn check_grid(lrs: &[f64], min: usize) -> Result<()> {
    if lrs.len() < min {
        return Err(Error::Config(format!(
            "need at least {min} learning rates, got {}",
            lrs.len()
        )));
    }
    if lrs.iter().any(|&lr| !(lr > 0.0)) || lrs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "learning rates must be positive and increasing".into(),
        ));
    }
    Ok(())
}

/// Index of the lowest loss among runs that did not diverge.
pub fn argmin_loss(runs: &[(f64, TrainReport)]) -> Option<usize> {
    runs.iter()
        .enumerate()
        .filter(|(_, (_, r))| !r.diverged)
        .min_by(|a, b| a.1 .1.sweep_loss().total_cmp(&b.1 .1.sweep_loss()))
        .map(|(i, _)| i)
}

/// Adam versus SlimAdam across a learning-rate grid, with SlimAdam's
/// rules derived from an Adam run at a tenth of Adam's best rate.
#[derive(Debug, Clone)]
pub struct Robustness {
    pub rows: Vec<SweepRow>,
    pub adam_runs: Vec<(f64, TrainReport)>,
    pub slim_runs: Vec<(f64, TrainReport)>,
    pub adam_best_lr: f64,
    pub derive_lr: f64,
    pub rules: RuleSet,
}

pub fn robustness(base: &TrainConfig, lrs: &[f64]) -> Result<Robustness> {
    check_grid(lrs, 5)?;
    let census = Census::for_spec(&base.model_spec())?;
    let adam = make_baseline_rules(&census, Baseline::Adam);
    let adam_runs = sweep_runs(
        &TrainConfig {
            snr: true,
            ..base.clone()
        },
        lrs,
        &adam,
    )?;
    robustness_from(base, lrs, adam_runs)
}

/// As [`robustness`], reusing finished Adam runs over `lrs`.
pub fn robustness_from(
    base: &TrainConfig,
    lrs: &[f64],
    adam_runs: Vec<(f64, TrainReport)>,
) -> Result<Robustness> {
    let census = Census::for_spec(&base.model_spec())?;
    let best = argmin_loss(&adam_runs)
        .ok_or_else(|| Error::Divergence("every Adam run diverged".into()))?;
    let adam_best_lr = adam_runs[best].0;
    let derive_lr = adam_best_lr / 10.0;
    let reusable = adam_runs
        .iter()
        .find(|(lr, r)| (lr / derive_lr - 1.0).abs() < 1e-9 && !r.snr.is_empty() && !r.diverged);
    let avg = match reusable {
        Some((_, r)) => r.averaged_snr()?,
        None => {
            let source = TrainConfig {
                lr: derive_lr,
                snr: true,
                ..base.clone()
            };
            train_with_rules(&source, make_baseline_rules(&census, Baseline::Adam))?
                .averaged_snr()?
        }
    };
    let rules = derive_rules(
        &avg,
        &census,
        &base.derive_options(Some(derive_lr), "adam@optimal/10"),
    )?;
    let slim_runs = sweep_runs(
        &TrainConfig {
            snr: false,
            ..base.clone()
        },
        lrs,
        &rules,
    )?;
    let mut rows = rows_of("adam", &adam_runs);
    rows.extend(rows_of("slimadam", &slim_runs));
    Ok(Robustness {
        rows,
        adam_runs,
        slim_runs,
        adam_best_lr,
        derive_lr,
        rules,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrLrRow {
    pub lr: f64,
    pub layer_type: LayerType,
    pub k: Axes,
    pub snr: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsPoint {
    pub lr: f64,
    pub cutoff: f64,
    pub fraction: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SnrVsLr {
    pub rows: Vec<SnrLrRow>,
    pub surface: Vec<SavingsPoint>,
}

impl SnrVsLr {
    pub fn rows_csv(&self) -> Result<String> {
        csv_string(&self.rows, &["lr", "layer_type", "k", "snr", "diverged"])
    }

    pub fn surface_csv(&self) -> Result<String> {
        csv_string(&self.surface, &["lr", "cutoff", "fraction", "diverged"])
    }

    /// `(lr, snr)` pairs of one layer type over runs that did not diverge.
    pub fn series(&self, t: LayerType) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.layer_type == t && !r.diverged)
            .map(|r| (r.lr, r.snr))
            .collect()
    }

    pub fn savings_at(&self, lr: f64, cutoff: f64) -> Option<f64> {
        self.surface
            .iter()
            .find(|p| p.lr == lr && p.cutoff == cutoff)
            .map(|p| p.fraction)
    }
}

/// Depth-averaged SNR at the best axes per layer type, with the savings
/// that rules derived at each cutoff would give.
pub fn snr_vs_lr(base: &TrainConfig, lrs: &[f64], cutoffs: &[f64]) -> Result<SnrVsLr> {
    check_grid(lrs, 4)?;
    let census = Census::for_spec(&base.model_spec())?;
    let adam = make_baseline_rules(&census, Baseline::Adam);
    let runs = sweep_runs(
        &TrainConfig {
            snr: true,
            ..base.clone()
        },
        lrs,
        &adam,
    )?;
    snr_vs_lr_from(base, &runs, cutoffs)
}

pub fn snr_vs_lr_from(
    base: &TrainConfig,
    runs: &[(f64, TrainReport)],
    cutoffs: &[f64],
) -> Result<SnrVsLr> {
    let census = Census::for_spec(&base.model_spec())?;
    let mut out = SnrVsLr::default();
    for (lr, report) in runs {
        if report.snr.is_empty() {
            continue;
        }
        let avg = report.averaged_snr()?;
        let by_type = depth_averaged_snr(&avg, &census)?;
        let mut types: Vec<LayerType> = by_type.keys().map(|(t, _)| *t).collect();
        types.dedup();
        for t in types {
            let rank = census
                .primary()
                .find(|e| e.layer_type == t)
                .map_or(1, |e| e.shape.len());
            let (k, snr) = best_axes(&by_type, t, measured_axes(rank), !base.no_both);
            out.rows.push(SnrLrRow {
                lr: *lr,
                layer_type: t,
                k,
                snr,
                diverged: report.diverged,
            });
        }
        for &cutoff in cutoffs {
            let opts = DeriveOptions {
                cutoff,
                ..base.derive_options(Some(*lr), "")
            };
            let rules = derive_rules(&avg, &census, &opts)?;
            let fraction = savings_report(&census, &rules)?.fraction;
            out.surface.push(SavingsPoint {
                lr: *lr,
                cutoff,
                fraction,
                diverged: report.diverged,
            });
        }
    }
    Ok(out)
}

fn best_axes(
    by_type: &BTreeMap<(LayerType, Axes), f64>,
    t: LayerType,
    candidates: &[Axes],
    allow_both: bool,
) -> (Axes, f64) {
    let mut best = (Axes::None, f64::NEG_INFINITY);
    for &k in [Axes::Both, Axes::FanOut, Axes::FanIn]
        .iter()
        .filter(|k| candidates.contains(k))
    {
        if k == Axes::Both && !allow_both && candidates.len() > 1 {
            continue;
        }
        if let Some(&s) = by_type.get(&(t, k)) {
            if s > best.1 {
                best = (k, s);
            }
        }
    }
    best
}

/// Spearman rank correlation, with tied values given their average rank.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman needs paired samples");
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &p in &idx[i..=j] {
                r[p] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(xs), rank(ys));
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let cov: f64 = rx
        .iter()
        .zip(&ry)
        .map(|(a, b)| (a - mean) * (b - mean))
        .sum();
    let vx: f64 = rx.iter().map(|a| (a - mean).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - mean).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelKind::MlpClassifier,
            vocab: 3,
            d_model: 16,
            n_layers: 1,
            input_dim: 4,
            init: Init::Default,
            data: DataSource::Blobs,
            samples: 300,
            batch: 32,
            steps: 300,
            warmup: 30,
            lr: 1e-2,
            weight_decay: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_defaults_round_trip() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(TrainConfig::from_toml_str("").unwrap(), cfg);
        let partial = TrainConfig::from_toml_str("lr = 0.01\nrules = \"adalayer\"\n").unwrap();
        assert_eq!(partial.lr, 0.01);
        assert_eq!(partial.rules, RuleSource::Baseline(Baseline::Adalayer));
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            TrainConfig::from_toml_str("learning_rate = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::from_toml_str("rules = \"magic\""),
            Err(Error::Config(_))
        ));
        let bad = TrainConfig {
            warmup: 5000,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mismatch = TrainConfig {
            data: DataSource::Blobs,
            ..TrainConfig::default()
        };
        assert!(matches!(mismatch.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn sources_parse() {
        assert_eq!(
            "file:a/b.txt".parse::<RuleSource>().unwrap(),
            RuleSource::File("a/b.txt".into())
        );
        assert_eq!(
            "adamini_v2".parse::<RuleSource>().unwrap().to_string(),
            "adamini_v2"
        );
        assert_eq!("corpus".parse::<DataSource>().unwrap(), DataSource::Corpus);
    }

    #[test]
    fn blobs_training_reduces_loss() {
        let r = train(&blobs_cfg()).unwrap();
        assert!(!r.diverged);
        assert_eq!(r.losses.len(), 300);
        assert!(
            r.final_loss < 0.1 * r.initial_loss,
            "{} vs {}",
            r.final_loss,
            r.initial_loss
        );
        assert_eq!(r.snr.steps(), MeasurementGrid::for_total(300).steps());
    }

    #[test]
    fn divergence_is_flagged() {
        let cfg = TrainConfig {
            lr: 1e6,
            clip_norm: 0.0,
            ..blobs_cfg()
        };
        let r = train(&cfg).unwrap();
        assert!(r.diverged);
        assert!(r.steps_run < 300);
        assert!(r.divergence.is_some());
    }

    #[test]
    fn spearman_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 5.0, 9.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]), 0.0);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]);
        assert!(r > 0.9 && r < 1.0);
    }

    #[test]
    fn vocab_grid_has_sixteen_cells() {
        let cells = vocab_grid_cells();
        assert_eq!(cells.len(), 16);
        assert_eq!(cells[0], (Axes::None, Axes::None));
        let tied = TrainConfig {
            model: ModelKind::LinearTokenModel,
            ..TrainConfig::default()
        };
        assert!(vocab_experiment(&tied, &[8], &[0], &cells).is_err());
    }

    #[test]
    fn sample_variance_lowers_recorded_snr() {
        let cfg = TrainConfig::from_toml_str("variance = \"sample\"").unwrap();
        assert_eq!(cfg.variance, VarianceEstimator::Sample);
        let pop = train(&TrainConfig {
            steps: 40,
            warmup: 4,
            ..blobs_cfg()
        })
        .unwrap();
        let sample = train(&TrainConfig {
            steps: 40,
            warmup: 4,
            variance: VarianceEstimator::Sample,
            ..blobs_cfg()
        })
        .unwrap();
        let (p, s) = (pop.averaged_snr().unwrap(), sample.averaged_snr().unwrap());
        assert_eq!(p.len(), s.len());
        for (key, v) in &p {
            assert!(s[key] < *v, "{key:?}: {} vs {v}", s[key]);
        }
    }
}
