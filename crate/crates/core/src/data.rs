//! Deterministic synthetic data: Zipf token streams, next-token batching,
//! Gaussian class blobs and a small character-level corpus.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::Tensor;

/// I.i.d. tokens with `P(t) ∝ (t+1)^-alpha` over `0..vocab`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZipfStream {
    pub vocab: usize,
    pub alpha: f64,
    pub length: usize,
    pub seed: u64,
}

impl ZipfStream {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 {
            return Err(Error::Input("vocab must be at least 1".into()));
        }
        if self.vocab > u32::MAX as usize {
            return Err(Error::Input(format!(
                "vocab {} does not fit 32-bit ids",
                self.vocab
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Input(format!(
                "alpha must be finite and ≥ 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn probabilities(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let w: Vec<f64> = (0..self.vocab)
            .map(|t| ((t + 1) as f64).powf(-self.alpha))
            .collect();
        let z: f64 = w.iter().sum();
        Ok(w.into_iter().map(|x| x / z).collect())
    }

    pub fn generate(&self) -> Result<Vec<usize>> {
        let p = self.probabilities()?;
        if self.vocab == 1 {
            return Ok(vec![0; self.length]);
        }
        let dist = WeightedIndex::new(&p).map_err(|e| Error::Input(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.length).map(|_| dist.sample(&mut rng)).collect())
    }

    /// A stream with the same marginal law in which each token, with
    /// probability `copy_prob`, repeats the token `lag` positions earlier.
    /// Predicting the copies requires looking back in the context.
    pub fn generate_with_copies(&self, copy_prob: f64, lag: usize) -> Result<Vec<usize>> {
        if !(0.0..=1.0).contains(&copy_prob) || lag == 0 {
            return Err(Error::Input(format!(
                "need copy_prob in [0, 1] and lag ≥ 1, got {copy_prob} and {lag}"
            )));
        }
        let mut tokens = self.generate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        for i in lag..tokens.len() {
            if rand::Rng::random_bool(&mut rng, copy_prob) {
                tokens[i] = tokens[i - lag];
            }
        }
        Ok(tokens)
    }

    /// Binary dump: a `vocab,length,alpha,seed` text line, then one
    /// little-endian `u32` per token.
    pub fn write_token_file(&self, path: &Path, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.length {
            return Err(Error::Input(format!(
                "stream has {} tokens, header says {}",
                tokens.len(),
                self.length
            )));
        }
        let mut buf = format!(
            "{},{},{},{}\n",
            self.vocab, self.length, self.alpha, self.seed
        )
        .into_bytes();
        buf.reserve(4 * tokens.len());
        for &t in tokens {
            if t >= self.vocab {
                return Err(Error::Input(format!(
                    "token {t} outside vocab {}",
                    self.vocab
                )));
            }
            buf.extend_from_slice(&(t as u32).to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_token_file(path: &Path) -> Result<(ZipfStream, Vec<usize>)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: "missing header line".into(),
            })?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        let f: Vec<&str> = header.split(',').collect();
        let perr = |msg: String| Error::Parse { line: 1, msg };
        if f.len() != 4 {
            return Err(perr(format!(
                "expected `vocab,length,alpha,seed`, got `{header}`"
            )));
        }
        let spec = ZipfStream {
            vocab: f[0]
                .parse()
                .map_err(|_| perr(format!("bad vocab `{}`", f[0])))?,
            length: f[1]
                .parse()
                .map_err(|_| perr(format!("bad length `{}`", f[1])))?,
            alpha: f[2]
                .parse()
                .map_err(|_| perr(format!("bad alpha `{}`", f[2])))?,
            seed: f[3]
                .parse()
                .map_err(|_| perr(format!("bad seed `{}`", f[3])))?,
        };
        let body = &bytes[nl + 1..];
        if body.len() != 4 * spec.length {
            return Err(Error::Input(format!(
                "{}: expected {} token bytes, found {}",
                path.display(),
                4 * spec.length,
                body.len()
            )));
        }
        let tokens: Vec<usize> = body
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        if let Some(t) = tokens.iter().find(|&&t| t >= spec.vocab) {
            return Err(Error::Input(format!(
                "token {t} outside vocab {}",
                spec.vocab
            )));
        }
        Ok((spec, tokens))
    }
}

/// Splits a stream into training and held-out parts; the held-out part is
/// the last `fraction` of the tokens.
pub fn split_held_out(tokens: &[usize], fraction: f64) -> (&[usize], &[usize]) {
    let held = ((tokens.len() as f64) * fraction).round() as usize;
    tokens.split_at(tokens.len() - held.min(tokens.len()))
}

/// Next-token batches over non-overlapping windows of `context + 1`
/// tokens. Window order is reshuffled every epoch from `seed`; a trailing
/// partial batch is dropped. Iterating never ends.
#[derive(Debug, Clone)]
pub struct TokenBatches<'a> {
    tokens: &'a [usize],
    context: usize,
    batch: usize,
    seed: u64,
    order: Vec<usize>,
    epoch: u64,
    cursor: usize,
}

impl<'a> TokenBatches<'a> {
    pub fn new(tokens: &'a [usize], context: usize, batch: usize, seed: u64) -> Result<Self> {
        if context == 0 || batch == 0 {
            return Err(Error::Input("context and batch must be at least 1".into()));
        }
        if tokens.len() < context + 1 {
            return Err(Error::Input(format!(
                "stream of {} tokens is shorter than context + 1 = {}",
                tokens.len(),
                context + 1
            )));
        }
        let mut it = TokenBatches {
            tokens,
            context,
            batch,
            seed,
            order: Vec::new(),
            epoch: 0,
            cursor: 0,
        };
        if it.batches_per_epoch() == 0 {
            return Err(Error::Input(format!(
                "{} windows cannot fill a batch of {batch}",
                it.windows()
            )));
        }
        it.shuffle();
        Ok(it)
    }

    pub fn windows(&self) -> usize {
        (self.tokens.len() - 1) / self.context
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.windows() / self.batch
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order = (0..self.windows()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    /// Windows covering the whole stream in order, grouped into batches;
    /// used for held-out evaluation.
    pub fn sequential(tokens: &[usize], context: usize, batch: usize) -> Result<Vec<Batch>> {
        if batch == 0 {
            return Err(Error::Input("batch must be at least 1".into()));
        }
        let it = TokenBatches::new(tokens, context, 1, 0)?;
        let order: Vec<usize> = (0..it.windows()).collect();
        Ok(order.chunks(batch).map(|ws| it.assemble(ws)).collect())
    }

    fn assemble(&self, windows: &[usize]) -> Batch {
        let c = self.context;
        let mut inputs = Vec::with_capacity(windows.len() * c);
        let mut targets = Vec::with_capacity(windows.len() * c);
        for &w in windows {
            let s = &self.tokens[w * c..w * c + c + 1];
            inputs.extend_from_slice(&s[..c]);
            targets.extend_from_slice(&s[1..]);
        }
        Batch::Tokens {
            inputs,
            targets,
            batch: windows.len(),
            context: c,
        }
    }
}

impl Iterator for TokenBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor + self.batch > self.order.len() {
            self.epoch += 1;
            self.shuffle();
        }
        let ws = &self.order[self.cursor..self.cursor + self.batch];
        let b = self.assemble(ws);
        self.cursor += self.batch;
        Some(b)
    }
}

/// `n` points in `classes` Gaussian clusters of standard deviation
/// `spread`, with centres drawn at ±`separation` per coordinate.
pub fn gaussian_blobs(
    n: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    spread: f64,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    if n == 0 || dim == 0 || classes < 2 {
        return Err(Error::Input(
            "blobs need n ≥ 1, dim ≥ 1 and ≥ 2 classes".into(),
        ));
    }
    let noise = Normal::new(0.0, spread).map_err(|e| Error::Input(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    if rand::Rng::random_bool(&mut rng, 0.5) {
                        separation
                    } else {
                        -separation
                    }
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        data.extend(centres[c].iter().map(|&m| m + noise.sample(&mut rng)));
    }
    Ok((Tensor::matrix(n, dim, data)?, labels))
}

const CORPUS: &str = include_str!("corpus.txt");

/// The bundled plain-text corpus as character ids, with the sorted
/// character alphabet that maps ids back to text.
pub fn char_corpus() -> (Vec<usize>, Vec<char>) {
    let mut alphabet: Vec<char> = CORPUS.chars().collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    let ids = CORPUS
        .chars()
        .map(|c| alphabet.binary_search(&c).expect("char in alphabet"))
        .collect();
    (ids, alphabet)
}
