//! Optimizers, batching, token-stream files and the training loop.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{derive_seed, ChannelModel};
use crate::codebook::RelevanceMatrix;
use crate::grad::{backward, forward_loss, GradientSet};
use crate::io::{read_file, write_file, Reader, Writer};
use crate::link::Link;
use crate::wavebank::WavebankParams;
use crate::{Error, Result};

pub const TOKEN_STREAM_MAGIC: &[u8; 8] = b"SWTS\x01\x00\x00\x00";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SWCK\x01\x00\x00\x00";

/// Tokens per video frame.
pub const TOKENS_PER_FRAME: usize = 16;

// ---------------------------------------------------------------------------
// Token streams

/// Token indices grouped into video frames of `frame_len` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    k: usize,
    frame_len: usize,
    tokens: Vec<u16>,
}

impl TokenStream {
    pub fn new(k: usize, frame_len: usize, tokens: Vec<u16>) -> Result<Self> {
        if k == 0 || k > 1 << 16 {
            return Err(Error::InvalidParameter(format!("K = {k} does not fit 16-bit tokens")));
        }
        if frame_len == 0 || !tokens.len().is_multiple_of(frame_len) {
            return Err(Error::InvalidParameter(format!(
                "{} tokens do not form whole frames of {frame_len}",
                tokens.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= k) {
            return Err(Error::TokenOutOfRange { token: t as usize, k });
        }
        Ok(Self { k, frame_len, tokens })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(TOKEN_STREAM_MAGIC)?;
        let k = r.u32("K")? as usize;
        let frame_len = r.u32("frame_len")? as usize;
        let count = r.u64("count")? as usize;
        if count > r.remaining() / 2 {
            return Err(Error::format(r.offset(), format!("count {count} exceeds the remaining data")));
        }
        let mut tokens = Vec::with_capacity(count);
        for _ in 0..count {
            let off = r.offset();
            let t = r.u16("token")?;
            if t as usize >= k {
                return Err(Error::format(off, format!("token {t} out of range for K = {k}")));
            }
            tokens.push(t);
        }
        r.finish()?;
        Self::new(k, frame_len, tokens)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(TOKEN_STREAM_MAGIC);
        w.u32(self.k as u32);
        w.u32(self.frame_len as u32);
        w.u64(self.tokens.len() as u64);
        for &t in &self.tokens {
            w.u16(t);
        }
        w.buf
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Consecutive tokens from the concatenated streams, wrapping around.
    Sequential,
    /// I.i.d. uniform tokens in `0..K`.
    #[default]
    UniformRandom,
}

/// Tokens for training step `step`: `batch_frames * 16` of them.
pub fn assemble_batch(
    streams: &[TokenStream],
    k: usize,
    batch_frames: usize,
    sampling: Sampling,
    seed: u64,
    step: u64,
) -> Result<Vec<usize>> {
    let n = batch_frames * TOKENS_PER_FRAME;
    match sampling {
        Sampling::UniformRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step.wrapping_mul(3)));
            Ok((0..n).map(|_| rng.random_range(0..k)).collect())
        }
        Sampling::Sequential => {
            let total: usize = streams.iter().map(TokenStream::len).sum();
            if total == 0 {
                return Err(Error::InvalidParameter("sequential sampling needs a nonempty token stream".into()));
            }
            if let Some(s) = streams.iter().find(|s| s.k() != k) {
                return Err(Error::LengthMismatch {
                    expected: k,
                    actual: s.k(),
                });
            }
            let start = ((step as u128 * n as u128) % total as u128) as usize;
            let all = streams.iter().flat_map(|s| s.tokens().iter().map(|&t| t as usize));
            Ok(all.cycle().skip(start).take(n).collect())
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizers

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Moment estimates of the optimizer; empty for SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub optimizer: Optimizer,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, n_params: usize) -> Self {
        let n = match optimizer {
            Optimizer::Sgd => 0,
            Optimizer::Adam { .. } => n_params,
        };
        Self {
            optimizer,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One optimizer step. Non-finite gradients are rejected and leave both the
/// parameters and the state untouched.
pub fn update(params: &mut WavebankParams, grads: &GradientSet, state: &mut OptimizerState, lr: f64) -> Result<()> {
    let n = params.k() * params.l();
    if grads.d_f_real.len() != n || grads.d_f_imag.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: grads.d_f_real.len(),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let g = grads.d_f_real.iter().chain(&grads.d_f_imag).chain(std::iter::once(&grads.d_log_tau));
    let (re, im, lt) = params.parts_mut();
    let p = re.iter_mut().chain(im.iter_mut()).chain(std::iter::once(lt));
    match state.optimizer {
        Optimizer::Sgd => {
            for (pv, gv) in p.zip(g) {
                *pv -= lr * gv;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            if state.m.len() != 2 * n + 1 {
                return Err(Error::LengthMismatch {
                    expected: 2 * n + 1,
                    actual: state.m.len(),
                });
            }
            state.t += 1;
            let c1 = 1.0 - beta1.powi(state.t as i32);
            let c2 = 1.0 - beta2.powi(state.t as i32);
            for (((pv, gv), m), v) in p.zip(g).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * gv;
                *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                *pv -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    /// Video frames (16 tokens each) per step.
    pub batch_frames: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// `(snr_db, weight)` pairs sampled once per step.
    pub snr_schedule: Vec<(f64, f64)>,
    pub channel: ChannelModel,
    pub sampling: Sampling,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_frames: 6,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            snr_schedule: [5.0, 10.0, 15.0, 20.0, 25.0, 30.0].iter().map(|&s| (s, 1.0)).collect(),
            channel: ChannelModel::ideal(),
            sampling: Sampling::UniformRandom,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be ≥ 1".into()));
        }
        if self.batch_frames == 0 {
            return Err(Error::InvalidParameter("batch_frames must be ≥ 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter("learning_rate must be finite and ≥ 0".into()));
        }
        if self.snr_schedule.is_empty() || self.snr_schedule.iter().any(|&(s, w)| !(w > 0.0) || s.is_nan()) {
            return Err(Error::InvalidParameter("snr_schedule needs entries with positive weights".into()));
        }
        self.channel.validate()
    }

    /// SNR drawn for step `step`.
    pub fn snr_for_step(&self, step: u64) -> f64 {
        let total: f64 = self.snr_schedule.iter().map(|p| p.1).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, step.wrapping_mul(3).wrapping_add(1)));
        let mut u = rng.random_range(0.0..total);
        for &(s, w) in &self.snr_schedule {
            if u < w {
                return s;
            }
            u -= w;
        }
        self.snr_schedule.last().unwrap().0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub snr_db: f64,
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: WavebankParams,
    pub optimizer: OptimizerState,
    /// Completed steps.
    pub step: u64,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(params: WavebankParams, optimizer: Optimizer) -> Self {
        let n = 2 * params.k() * params.l() + 1;
        Self {
            params,
            optimizer: OptimizerState::new(optimizer, n),
            step: 0,
            history: Vec::new(),
        }
    }

    /// Full-precision checkpoint (parameters, optimizer moments, history).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u64(self.step);
        w.u32(self.params.k() as u32);
        w.u32(self.params.l() as u32);
        for &v in self.params.f_real().iter().chain(self.params.f_imag()) {
            w.f64(v);
        }
        w.f64(self.params.log_tau());
        match self.optimizer.optimizer {
            Optimizer::Sgd => w.u32(0),
            Optimizer::Adam { beta1, beta2, eps } => {
                w.u32(1);
                w.f64(beta1);
                w.f64(beta2);
                w.f64(eps);
            }
        }
        w.u64(self.optimizer.t);
        w.u64(self.optimizer.m.len() as u64);
        for &v in self.optimizer.m.iter().chain(&self.optimizer.v) {
            w.f64(v);
        }
        w.u64(self.history.len() as u64);
        for h in &self.history {
            w.u64(h.step);
            w.f64(h.loss);
            w.f64(h.snr_db);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let step = r.u64("step")?;
        let k = r.u32("K")? as usize;
        let l = r.u32("L")? as usize;
        if k.saturating_mul(l).saturating_mul(16) > r.remaining() {
            return Err(Error::format(r.offset(), "parameter block exceeds the file"));
        }
        let read_vec = |r: &mut Reader, n: usize, what: &str| -> Result<Vec<f64>> { (0..n).map(|_| r.f64(what)).collect() };
        let re = read_vec(&mut r, k * l, "F_real")?;
        let im = read_vec(&mut r, k * l, "F_imag")?;
        let log_tau = r.f64("log_tau")?;
        let optimizer = match r.u32("optimizer")? {
            0 => Optimizer::Sgd,
            1 => Optimizer::Adam {
                beta1: r.f64("beta1")?,
                beta2: r.f64("beta2")?,
                eps: r.f64("eps")?,
            },
            other => return Err(Error::format(r.offset() - 4, format!("unknown optimizer tag {other}"))),
        };
        let t = r.u64("t")?;
        let n = r.u64("moment length")? as usize;
        if n.saturating_mul(16) > r.remaining() {
            return Err(Error::format(r.offset(), "moment block exceeds the file"));
        }
        let m = read_vec(&mut r, n, "m")?;
        let v = read_vec(&mut r, n, "v")?;
        let hn = r.u64("history length")? as usize;
        if hn.saturating_mul(24) > r.remaining() {
            return Err(Error::format(r.offset(), "history block exceeds the file"));
        }
        let mut history = Vec::with_capacity(hn);
        for _ in 0..hn {
            history.push(LossRecord {
                step: r.u64("step")?,
                loss: r.f64("loss")?,
                snr_db: r.f64("snr_db")?,
            });
        }
        r.finish()?;
        Ok(Self {
            params: WavebankParams::from_log_tau(k, l, re, im, log_tau)?,
            optimizer: OptimizerState { optimizer, t, m, v },
            step,
            history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// Where checkpoints go. Files are `checkpoint-<step>.swck`, plus
/// `latest.swck` overwritten each time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointDir(pub PathBuf);

impl CheckpointDir {
    pub fn path_for(&self, step: u64) -> PathBuf {
        self.0.join(format!("checkpoint-{step:06}.swck"))
    }

    pub fn latest(&self) -> PathBuf {
        self.0.join("latest.swck")
    }

    fn write(&self, state: &TrainState) -> Result<()> {
        let bytes = state.to_bytes();
        write_file(&self.path_for(state.step), &bytes)?;
        write_file(&self.latest(), &bytes)
    }
}

/// Runs the remaining steps of `state` up to `config.steps`.
///
/// On a non-finite loss or gradient the run stops with
/// [`Error::Diverged`]; checkpoints already written are left in place.
pub fn train_from(
    mut state: TrainState,
    relevance: &RelevanceMatrix,
    link: &Link,
    config: &TrainConfig,
    streams: &[TokenStream],
    checkpoints: Option<&CheckpointDir>,
) -> Result<TrainState> {
    config.validate()?;
    let k = state.params.k();
    if relevance.k() != k {
        return Err(Error::LengthMismatch {
            expected: k,
            actual: relevance.k(),
        });
    }
    if state.optimizer.optimizer != config.optimizer {
        return Err(Error::InvalidParameter("checkpoint optimizer differs from the configuration".into()));
    }
    while state.step < config.steps {
        let step = state.step;
        let snr = config.snr_for_step(step);
        let model = config.channel.with_snr(snr);
        let tokens = assemble_batch(streams, k, config.batch_frames, config.sampling, config.seed, step)?;
        let step_seed = derive_seed(config.seed, step.wrapping_mul(3).wrapping_add(2));
        let mut eval = match forward_loss(&state.params, relevance, &tokens, link, &model, step_seed) {
            Ok(e) => e,
            Err(Error::NonFinite(what)) => {
                return Err(Error::Diverged {
                    step,
                    reason: format!("non-finite {what}"),
                })
            }
            Err(e) => return Err(e),
        };
        let grads = backward(&mut eval.tape).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged {
                step,
                reason: format!("non-finite {what}"),
            },
            e => e,
        })?;
        update(&mut state.params, &grads, &mut state.optimizer, config.learning_rate)?;
        if !state.params.log_tau().is_finite() || !state.params.tau().is_normal() {
            return Err(Error::Diverged {
                step,
                reason: "temperature left the representable range".into(),
            });
        }
        state.history.push(LossRecord {
            step,
            loss: eval.loss,
            snr_db: snr,
        });
        state.step += 1;
        if let Some(dir) = checkpoints {
            if config.checkpoint_every > 0 && state.step.is_multiple_of(config.checkpoint_every) {
                dir.write(&state)?;
            }
        }
    }
    Ok(state)
}

pub fn train(
    params: WavebankParams,
    relevance: &RelevanceMatrix,
    link: &Link,
    config: &TrainConfig,
    streams: &[TokenStream],
    checkpoints: Option<&CheckpointDir>,
) -> Result<TrainState> {
    train_from(TrainState::new(params, config.optimizer), relevance, link, config, streams, checkpoints)
}

/// Loss history as `step,loss,snr_db` CSV.
pub fn write_loss_csv(path: impl AsRef<Path>, history: &[LossRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,loss,snr_db").unwrap();
    for h in history {
        writeln!(out, "{},{:.10e},{}", h.step, h.loss, h.snr_db).unwrap();
    }
    write_file(path.as_ref(), &out)
}
