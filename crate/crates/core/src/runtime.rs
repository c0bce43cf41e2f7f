//! Corpus and checkpoint files, the training loop and greedy generation.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::blocks::{Decoder, GradientSet, Model};
use crate::config::{LrSchedule, ModelConfig};
use crate::error::{Result, UmoeError};
use crate::tensor::Matrix;

pub const CORPUS_MAGIC: &[u8; 8] = b"UMOETOKS";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UMOECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenCorpus {
    pub vocab_size: u32,
    pub ids: Vec<u32>,
}

impl TokenCorpus {
    pub fn new(vocab_size: u32, ids: Vec<u32>) -> Result<Self> {
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(UmoeError::IdOutOfVocab {
                id,
                vocab: vocab_size as usize,
            });
        }
        Ok(Self { vocab_size, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.ids.len());
        out.extend_from_slice(CORPUS_MAGIC);
        out.extend_from_slice(&self.vocab_size.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != CORPUS_MAGIC {
            return Err(UmoeError::BadMagic);
        }
        let mut r = Reader::new(&bytes[8..]);
        let truncated = |_| {
            UmoeError::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "truncated corpus",
            ))
        };
        let vocab = r.u32().map_err(truncated)?;
        let count = r.u64().map_err(truncated)? as usize;
        if r.remaining() != count.saturating_mul(4) {
            return Err(UmoeError::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!(
                    "corpus header declares {count} ids, payload holds {} bytes",
                    r.remaining()
                ),
            )));
        }
        let ids = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        Self::new(vocab, ids)
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<TokenCorpus> {
    TokenCorpus::from_bytes(&fs::read(path)?)
}

pub fn save_corpus(corpus: &TokenCorpus, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, corpus.to_bytes())?;
    Ok(())
}

/// Seeded fixture: a random `period`-token pattern of distinct ids repeated to `len` tokens.
pub fn synthetic_corpus(vocab_size: usize, len: usize, period: usize, seed: u64) -> Result<TokenCorpus> {
    if period == 0 || period > vocab_size {
        return Err(UmoeError::InvalidConfig(format!(
            "pattern period {period} must be in 1..={vocab_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<u32> = sample(&mut rng, vocab_size, period)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    let ids = base.iter().copied().cycle().take(len).collect();
    TokenCorpus::new(vocab_size as u32, ids)
}

/// The 1024-token overfit fixture.
pub fn overfit_fixture(cfg: &ModelConfig, seed: u64) -> Result<TokenCorpus> {
    synthetic_corpus(cfg.vocab_size, 1024, 128.min(cfg.vocab_size), seed)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| UmoeError::CorruptCheckpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| UmoeError::CorruptCheckpoint("non-utf8 string".into()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Serializes a model: magic, version, config text, tensor table, then the f32 payload.
pub fn checkpoint_bytes(model: &Model<f32>) -> Vec<u8> {
    let tensors = model.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = model.cfg.to_config_string();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, _, m) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * m.data().len() as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, _, m) in &tensors {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct TableEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(UmoeError::BadMagic);
    }
    let mut r = Reader::new(&bytes[8..]);
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(UmoeError::UnsupportedVersion(version));
    }
    let cfg = ModelConfig::parse(&r.string()?)?;
    let n = r.u32()? as usize;
    let mut table = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name = r.string()?;
        let dtype = r.u8()?;
        let ndim = r.u32()?;
        if dtype != DTYPE_F32 || ndim != 2 {
            return Err(UmoeError::CorruptCheckpoint(format!(
                "tensor {name}: unsupported dtype or rank"
            )));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let offset = r.u64()? as usize;
        table.push(TableEntry {
            name,
            rows,
            cols,
            offset,
        });
    }
    let payload_len = r.u64()? as usize;
    if r.remaining() != payload_len {
        return Err(UmoeError::CorruptCheckpoint(format!(
            "payload holds {} bytes, table declares {payload_len}",
            r.remaining()
        )));
    }
    let payload = r.take(payload_len)?;

    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(table.len());
    for e in &table {
        let len = e
            .rows
            .checked_mul(e.cols)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| UmoeError::CorruptCheckpoint(format!("tensor {} is too large", e.name)))?;
        let end = e.offset.checked_add(len).filter(|&end| end <= payload_len);
        let end = end.ok_or_else(|| UmoeError::CorruptCheckpoint(format!("tensor {} exceeds payload", e.name)))?;
        spans.push((e.offset, end));
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(UmoeError::CorruptCheckpoint("overlapping tensors".into()));
    }

    let mut model = Model::<f32>::init(&cfg, 0)?;
    let mut filled = vec![false; table.len()];
    for (name, _, m) in model.tensors_mut() {
        let idx = table
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| UmoeError::CorruptCheckpoint(format!("missing tensor {name}")))?;
        let e = &table[idx];
        if filled[idx] || (e.rows, e.cols) != (m.rows(), m.cols()) {
            return Err(UmoeError::CorruptCheckpoint(format!(
                "tensor {name} duplicated or misshapen"
            )));
        }
        filled[idx] = true;
        let src = &payload[e.offset..e.offset + 4 * e.rows * e.cols];
        for (dst, chunk) in m.data_mut().iter_mut().zip(src.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    if let Some(i) = filled.iter().position(|f| !f) {
        return Err(UmoeError::CorruptCheckpoint(format!(
            "unexpected tensor {}",
            table[i].name
        )));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    checkpoint_from_bytes(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub aux: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<StepMetrics>,
}

/// Learning rate at `step` of `total`: linear warmup, then constant or cosine decay to zero.
pub fn learning_rate(cfg: &ModelConfig, step: usize, total: usize) -> f64 {
    let warmup = (cfg.warmup_ratio * total as f64).round() as usize;
    if step < warmup {
        return cfg.learning_rate * (step + 1) as f64 / warmup as f64;
    }
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.learning_rate,
        LrSchedule::Cosine => {
            let span = total.saturating_sub(warmup).max(1) as f64;
            let progress = (step - warmup) as f64 / span;
            0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

struct Adam {
    m: Vec<Matrix<f32>>,
    v: Vec<Matrix<f32>>,
    t: i32,
}

impl Adam {
    fn new(model: &Model<f32>) -> Self {
        let zeros: Vec<Matrix<f32>> = model
            .tensors()
            .iter()
            .map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            v: zeros.clone(),
            m: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model<f32>, grads: &GradientSet<f32>, cfg: &ModelConfig, lr: f64) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1 as f32, cfg.adam_beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (lr as f32, cfg.adam_eps as f32);
        let params = model.tensors_mut();
        let gs = grads.tensors();
        for (((_, _, p), (_, _, g)), (m, v)) in params.into_iter().zip(gs).zip(self.m.iter_mut().zip(&mut self.v)) {
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

fn add_grads(acc: &mut GradientSet<f32>, other: &GradientSet<f32>) {
    for ((_, _, a), (_, _, b)) in acc.tensors_mut().into_iter().zip(other.tensors()) {
        a.add_assign(b);
    }
}

/// Adam training over sequential, non-overlapping `context_len` windows.
pub fn train(cfg: &ModelConfig, corpus: &TokenCorpus, steps: usize, seed: u64) -> Result<TrainOutcome> {
    train_with(cfg, corpus, steps, seed, |_| {})
}

/// [`train`] with a callback receiving each step's metrics.
pub fn train_with(
    cfg: &ModelConfig,
    corpus: &TokenCorpus,
    steps: usize,
    seed: u64,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    let cfg = cfg.validate()?.into_inner();
    let ctx = cfg.context_len;
    if corpus.len() < ctx + 1 {
        return Err(UmoeError::CorpusTooSmall {
            len: corpus.len(),
            context_len: ctx,
        });
    }
    if let Some(&id) = corpus.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(UmoeError::IdOutOfVocab {
            id,
            vocab: cfg.vocab_size,
        });
    }
    let n_windows = (corpus.len() - 1) / ctx;
    let batch = cfg.batch_size.max(1);
    let mut model = Model::<f32>::init(&cfg, seed)?;
    let mut adam = Adam::new(&model);
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let starts: Vec<usize> = (0..batch).map(|b| ((step * batch + b) % n_windows) * ctx).collect();
        let scale = 1.0 / batch as f32;
        let parts = starts
            .par_iter()
            .map(|&s| {
                let tokens = &corpus.ids[s..s + ctx];
                let targets = &corpus.ids[s + 1..s + ctx + 1];
                let mut g = model.zeros_like();
                let loss = model.accumulate_gradients(tokens, targets, scale, &mut g)?;
                Ok((g, loss))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ce = 0.0;
        let mut aux = 0.0;
        let mut iter = parts.into_iter();
        let (mut grads, first) = iter.next().expect("batch is non-empty");
        ce += first.ce as f64;
        aux += first.aux as f64;
        for (g, l) in iter {
            add_grads(&mut grads, &g);
            ce += l.ce as f64;
            aux += l.aux as f64;
        }
        let lr = learning_rate(&cfg, step, steps);
        adam.step(&mut model, &grads, &cfg, lr);
        let m = StepMetrics {
            step,
            lr,
            ce: ce / batch as f64,
            aux: aux / batch as f64,
            tokens: batch * ctx,
        };
        on_step(&m);
        log.push(m);
    }
    Ok(TrainOutcome { model, log })
}

// ---------------------------------------------------------------------------
// Generation

fn argmax(v: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding through the incremental caches; returns prompt plus `n_new` tokens.
pub fn generate(model: &Model<f32>, prompt: &[u32], n_new: usize) -> Result<Vec<u32>> {
    let mut out = prompt.to_vec();
    if n_new == 0 {
        return Ok(out);
    }
    if prompt.is_empty() {
        return Err(UmoeError::EmptyBatch);
    }
    let mut dec = Decoder::new(model);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = dec.step(t)?;
    }
    for i in 0..n_new {
        let next = argmax(&logits);
        out.push(next);
        if i + 1 < n_new {
            logits = dec.step(next)?;
        }
    }
    Ok(out)
}
