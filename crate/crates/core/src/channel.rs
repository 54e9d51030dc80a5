//! Channel simulation.
//!
//! Every propagation effect here is a fixed linear operator on the complex
//! baseband stream, paired with an explicit adjoint so gradients can flow
//! through it. Noise is drawn afterwards from a seed and never depends on the
//! signal except through its power.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{db_to_linear, mean_power};
use crate::io::{read_file, write_file, Reader, Writer};
use crate::{Cplx, Error, Result};

pub const TVIR_MAGIC: &[u8; 8] = b"SWIR\x01\x00\x00\x00";

const ZERO: Cplx = Cplx { re: 0.0, im: 0.0 };

/// Sample rate and carrier of the transmitted baseband stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baseband {
    pub fs_hz: f64,
    pub carrier_hz: f64,
}

// ---------------------------------------------------------------------------
// Resampling

/// Linear-interpolation resampler: `y[n] = x(n / ratio)`, `floor(len * ratio)`
/// outputs. Each output touches at most two inputs.
#[derive(Debug, Clone)]
pub struct LinearResampler {
    ratio: f64,
    in_len: usize,
    out_len: usize,
}

impl LinearResampler {
    pub fn new(in_len: usize, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(Error::InvalidParameter(format!("rate ratio must be positive, got {ratio}")));
        }
        if in_len < 2 {
            return Err(Error::InvalidParameter("linear resampling needs at least 2 samples".into()));
        }
        let out_len = (in_len as f64 * ratio).floor() as usize;
        Ok(Self { ratio, in_len, out_len })
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    fn tap(&self, n: usize) -> (usize, f64) {
        let pos = n as f64 / self.ratio;
        let i = (pos.floor() as usize).min(self.in_len - 1);
        let frac = if i + 1 < self.in_len { pos - i as f64 } else { 0.0 };
        (i, frac)
    }

    pub fn apply(&self, x: &[Cplx]) -> Vec<Cplx> {
        (0..self.out_len)
            .map(|n| {
                let (i, f) = self.tap(n);
                if f == 0.0 {
                    x[i]
                } else {
                    x[i] * (1.0 - f) + x[i + 1] * f
                }
            })
            .collect()
    }

    pub fn adjoint(&self, g: &[Cplx]) -> Vec<Cplx> {
        let mut out = vec![ZERO; self.in_len];
        for (n, gv) in g.iter().enumerate().take(self.out_len) {
            let (i, f) = self.tap(n);
            out[i] += gv * (1.0 - f);
            if f != 0.0 {
                out[i + 1] += gv * f;
            }
        }
        out
    }
}

pub fn resample_linear(x: &[Cplx], rate_ratio: f64) -> Result<Vec<Cplx>> {
    Ok(LinearResampler::new(x.len(), rate_ratio)?.apply(x))
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// Kaiser window parameter of the anti-alias filter.
pub const KAISER_BETA: f64 = 8.0;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Rational resampler: zero-stuff by `up`, windowed-sinc low-pass, keep every
/// `down`-th sample. Filter delay is compensated so sample 0 maps to sample 0.
#[derive(Debug, Clone)]
pub struct PolyphaseResampler {
    up: usize,
    down: usize,
    taps: Vec<f64>,
    delay: usize,
}

impl PolyphaseResampler {
    pub fn new(up: usize, down: usize) -> Result<Self> {
        if up == 0 || down == 0 {
            return Err(Error::InvalidParameter("up and down must be ≥ 1".into()));
        }
        let g = gcd(up, down);
        let (up, down) = (up / g, down / g);
        let m = up.max(down);
        if m == 1 {
            return Ok(Self {
                up,
                down,
                taps: vec![1.0],
                delay: 0,
            });
        }
        let len = 64 * m + 1;
        let order = (len - 1) as f64;
        // Kaiser transition width (fraction of the upsampled Nyquist band);
        // the cutoff sits half a transition below the lower Nyquist so the
        // stopband starts exactly there.
        let atten = KAISER_BETA / 0.1102 + 8.7;
        let transition = (atten - 8.0) / (2.285 * order) / PI;
        let cutoff = 1.0 / m as f64 - transition / 2.0;
        let delay = (len - 1) / 2;
        let norm = bessel_i0(KAISER_BETA);
        let taps = (0..len)
            .map(|i| {
                let t = i as f64 - delay as f64;
                let sinc = if t == 0.0 {
                    1.0
                } else {
                    (PI * cutoff * t).sin() / (PI * cutoff * t)
                };
                let r = 2.0 * i as f64 / order - 1.0;
                let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
                up as f64 * cutoff * sinc * w
            })
            .collect();
        Ok(Self { up, down, taps, delay })
    }

    pub fn up(&self) -> usize {
        self.up
    }

    pub fn down(&self) -> usize {
        self.down
    }

    pub fn out_len(&self, in_len: usize) -> usize {
        (in_len * self.up).div_ceil(self.down)
    }

    /// Visits every `(output, input, weight)` triple of the operator.
    fn for_each_weight(&self, in_len: usize, mut f: impl FnMut(usize, usize, f64)) {
        let len = self.taps.len();
        for j in 0..self.out_len(in_len) {
            let p = j * self.down + self.delay;
            // Inputs q with 0 <= p - q*up < len.
            let q_hi = (p / self.up).min(in_len.saturating_sub(1));
            let q_lo = if p + 1 > len { (p + 1 - len).div_ceil(self.up) } else { 0 };
            if q_lo > q_hi || in_len == 0 {
                continue;
            }
            for q in q_lo..=q_hi {
                f(j, q, self.taps[p - q * self.up]);
            }
        }
    }

    pub fn apply(&self, x: &[Cplx]) -> Vec<Cplx> {
        let mut out = vec![ZERO; self.out_len(x.len())];
        self.for_each_weight(x.len(), |j, q, w| out[j] += x[q] * w);
        out
    }

    pub fn adjoint(&self, g: &[Cplx], in_len: usize) -> Vec<Cplx> {
        let mut out = vec![ZERO; in_len];
        self.for_each_weight(in_len, |j, q, w| out[q] += g[j] * w);
        out
    }
}

pub fn resample_polyphase(x: &[Cplx], up: usize, down: usize) -> Result<Vec<Cplx>> {
    Ok(PolyphaseResampler::new(up, down)?.apply(x))
}

// ---------------------------------------------------------------------------
// Noise and FIR

/// Mixes a base seed with a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Circular complex Gaussian noise with total per-sample variance `variance`.
pub fn gaussian_noise(len: usize, variance: f64, seed: u64) -> Vec<Cplx> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = Normal::new(0.0, (variance / 2.0).sqrt()).unwrap();
    (0..len)
        .map(|_| Cplx::new(nd.sample(&mut rng), nd.sample(&mut rng)))
        .collect()
}

/// Noise variance for `snr_db` against signal power `power`. Zero for +inf.
pub fn noise_variance(power: f64, snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        power / db_to_linear(snr_db)
    }
}

/// `x + n` with `var(n) = mean_power(x) / 10^(snr_db / 10)`.
pub fn apply_awgn(x: &[Cplx], snr_db: f64, seed: u64) -> Vec<Cplx> {
    let var = noise_variance(mean_power(x), snr_db);
    if var == 0.0 {
        return x.to_vec();
    }
    let n = gaussian_noise(x.len(), var, seed);
    x.iter().zip(n).map(|(a, b)| a + b).collect()
}

/// Causal convolution truncated to the input length.
pub fn apply_fir(x: &[Cplx], taps: &[Cplx]) -> Vec<Cplx> {
    let mut out = vec![ZERO; x.len()];
    for (m, &t) in taps.iter().enumerate() {
        if t == ZERO {
            continue;
        }
        for n in m..x.len() {
            out[n] += t * x[n - m];
        }
    }
    out
}

pub fn apply_fir_adjoint(g: &[Cplx], taps: &[Cplx]) -> Vec<Cplx> {
    let mut out = vec![ZERO; g.len()];
    for (m, &t) in taps.iter().enumerate() {
        if t == ZERO {
            continue;
        }
        let tc = t.conj();
        for n in m..g.len() {
            out[n - m] += tc * g[n];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Time-varying impulse response replay

/// Measured (or synthetic) time-varying impulse response at complex baseband.
#[derive(Debug, Clone, PartialEq)]
pub struct TvirRecord {
    pub fs_channel: f64,
    pub carrier_hz: f64,
    /// Refresh interval between successive impulse responses, seconds.
    pub dt: f64,
    t: usize,
    m: usize,
    taps: Vec<Cplx>,
}

/// Parameters of the synthetic sparse-arrival TVIR generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTvir {
    pub fs_channel: f64,
    pub carrier_hz: f64,
    pub dt: f64,
    pub duration_s: f64,
    /// Delay of the last arrival, seconds.
    pub delay_spread_s: f64,
    /// Number of scattered arrivals after the direct path.
    pub paths: usize,
    /// Power of an arrival at the full delay spread relative to delay 0, dB.
    pub decay_db: f64,
    /// Rician K-factor of the direct path (linear). 0 makes it Rayleigh.
    pub direct_k: f64,
    /// Maximum Doppler spread of the fading processes, Hz.
    pub doppler_hz: f64,
    pub seed: u64,
}

impl Default for SyntheticTvir {
    fn default() -> Self {
        Self {
            fs_channel: 8000.0,
            carrier_hz: 14_000.0,
            dt: 0.032,
            duration_s: 30.0,
            delay_spread_s: 0.115,
            paths: 12,
            decay_db: 30.0,
            direct_k: 10.0,
            doppler_hz: 0.5,
            seed: 1,
        }
    }
}

impl SyntheticTvir {
    /// Long, fast-fading response whose tail spills past the cyclic prefix.
    /// Uncoded BER over this channel sits in the 20 to 40% range.
    pub fn harsh() -> Self {
        Self {
            delay_spread_s: 0.2,
            doppler_hz: 5.0,
            ..Self::default()
        }
    }
}

impl TvirRecord {
    pub fn new(fs_channel: f64, carrier_hz: f64, dt: f64, t: usize, m: usize, taps: Vec<Cplx>) -> Result<Self> {
        if !(fs_channel > 0.0 && dt > 0.0) || !carrier_hz.is_finite() {
            return Err(Error::InvalidParameter("TVIR rates must be positive".into()));
        }
        if t < 1 || m < 1 {
            return Err(Error::InvalidParameter("TVIR needs T ≥ 1 and M ≥ 1".into()));
        }
        if taps.len() != t * m {
            return Err(Error::LengthMismatch {
                expected: t * m,
                actual: taps.len(),
            });
        }
        if taps.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("TVIR taps"));
        }
        Ok(Self {
            fs_channel,
            carrier_hz,
            dt,
            t,
            m,
            taps,
        })
    }

    /// Single impulse response held for `duration_s`.
    pub fn static_response(fs_channel: f64, carrier_hz: f64, duration_s: f64, taps: Vec<Cplx>) -> Result<Self> {
        let m = taps.len();
        Self::new(fs_channel, carrier_hz, duration_s, 1, m, taps)
    }

    pub fn time_steps(&self) -> usize {
        self.t
    }

    pub fn delay_taps(&self) -> usize {
        self.m
    }

    pub fn response(&self, step: usize) -> &[Cplx] {
        &self.taps[step * self.m..(step + 1) * self.m]
    }

    pub fn delay_spread_s(&self) -> f64 {
        self.m as f64 / self.fs_channel
    }

    /// Channel-rate samples per refresh interval.
    pub fn samples_per_step(&self) -> f64 {
        self.dt * self.fs_channel
    }

    /// Number of channel-rate samples the record can replay.
    pub fn coverage_samples(&self) -> usize {
        (self.t as f64 * self.samples_per_step()).floor() as usize
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(TVIR_MAGIC)?;
        let fs = r.f64("fs_channel")?;
        let fc = r.f64("carrier_hz")?;
        let dt = r.f64("dt")?;
        let t = r.u32("T")? as usize;
        let m = r.u32("M")? as usize;
        if !(fs > 0.0 && dt > 0.0) || !fc.is_finite() || t == 0 || m == 0 {
            return Err(Error::format(8, "invalid TVIR header"));
        }
        let mut taps = Vec::with_capacity(t * m);
        for _ in 0..t * m {
            let off = r.offset();
            let re = r.f32("tap")?;
            let im = r.f32("tap")?;
            if !(re.is_finite() && im.is_finite()) {
                return Err(Error::format(off, "non-finite tap"));
            }
            taps.push(Cplx::new(re as f64, im as f64));
        }
        r.finish()?;
        Self::new(fs, fc, dt, t, m, taps)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(TVIR_MAGIC);
        w.f64(self.fs_channel);
        w.f64(self.carrier_hz);
        w.f64(self.dt);
        w.u32(self.t as u32);
        w.u32(self.m as u32);
        for v in &self.taps {
            w.f32(v.re as f32);
            w.f32(v.im as f32);
        }
        w.buf
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    /// Imports interleaved re/im text rows (one impulse response per line,
    /// whitespace or comma separated) as produced by common at-sea channel
    /// toolboxes after export to text.
    pub fn import_text(text: &str, fs_channel: f64, carrier_hz: f64, dt: f64) -> Result<Self> {
        let mut taps = Vec::new();
        let mut m = None;
        let mut t = 0;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidParameter(format!("line {}: {e}", lineno + 1)))?;
            if !vals.len().is_multiple_of(2) {
                return Err(Error::InvalidParameter(format!("line {}: odd value count", lineno + 1)));
            }
            let row_m = vals.len() / 2;
            if *m.get_or_insert(row_m) != row_m {
                return Err(Error::InvalidParameter(format!("line {}: ragged row", lineno + 1)));
            }
            taps.extend(vals.chunks(2).map(|c| Cplx::new(c[0], c[1])));
            t += 1;
        }
        Self::new(fs_channel, carrier_hz, dt, t, m.unwrap_or(0), taps)
    }

    /// Sparse-arrival synthetic record: a Rician direct path plus `paths`
    /// Rayleigh arrivals with an exponential power-delay profile, each fading
    /// as a sum of sinusoids with Doppler up to `doppler_hz`. Mean total power
    /// is one.
    pub fn synthetic(cfg: &SyntheticTvir) -> Result<Self> {
        if !(cfg.duration_s > 0.0 && cfg.dt > 0.0 && cfg.delay_spread_s >= 0.0) {
            return Err(Error::InvalidParameter("invalid synthetic TVIR parameters".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let m = (cfg.delay_spread_s * cfg.fs_channel).round() as usize + 1;
        let t = (cfg.duration_s / cfg.dt).ceil() as usize;
        let mut delays = vec![0usize];
        for _ in 0..cfg.paths {
            delays.push(rng.random_range(1..m.max(2)));
        }
        if cfg.paths > 0 {
            // Pin the last arrival to the full delay spread.
            *delays.last_mut().unwrap() = m - 1;
        }
        let powers: Vec<f64> = delays
            .iter()
            .map(|&d| db_to_linear(-cfg.decay_db * d as f64 / (m.max(2) - 1) as f64))
            .collect();
        let total: f64 = powers.iter().sum();
        const SINUSOIDS: usize = 8;
        let mut taps = vec![ZERO; t * m];
        for (p, (&d, &pw)) in delays.iter().zip(&powers).enumerate() {
            let pw = pw / total;
            let (los, scatter) = if p == 0 && cfg.direct_k > 0.0 {
                let k = cfg.direct_k;
                ((pw * k / (k + 1.0)).sqrt(), (pw / (k + 1.0)).sqrt())
            } else {
                (0.0, pw.sqrt())
            };
            let los_phase = rng.random_range(0.0..2.0 * PI);
            let comps: Vec<(f64, f64)> = (0..SINUSOIDS)
                .map(|_| {
                    let angle: f64 = rng.random_range(0.0..2.0 * PI);
                    (cfg.doppler_hz * angle.cos(), rng.random_range(0.0..2.0 * PI))
                })
                .collect();
            for step in 0..t {
                let time = step as f64 * cfg.dt;
                let fade: Cplx = comps
                    .iter()
                    .map(|&(f, ph)| Cplx::from_polar(1.0, 2.0 * PI * f * time + ph))
                    .sum::<Cplx>()
                    / (SINUSOIDS as f64).sqrt();
                taps[step * m + d] += Cplx::from_polar(los, los_phase) + fade * scatter;
            }
        }
        Self::new(cfg.fs_channel, cfg.carrier_hz, cfg.dt, t, m, taps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapInterpolation {
    /// Impulse response held constant across each refresh interval.
    #[default]
    Hold,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResamplerKind {
    #[default]
    Polyphase,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayOptions {
    pub taps: TapInterpolation,
    pub resampler: ResamplerKind,
}

enum Rate {
    Same,
    Poly { fwd: PolyphaseResampler, back: PolyphaseResampler },
    Linear { ratio: f64 },
}

fn rate_plan(fs_tx: f64, fs_ch: f64, kind: ResamplerKind) -> Result<Rate> {
    if fs_tx == fs_ch {
        return Ok(Rate::Same);
    }
    match kind {
        ResamplerKind::Linear => Ok(Rate::Linear { ratio: fs_ch / fs_tx }),
        ResamplerKind::Polyphase => {
            let (a, b) = (fs_ch.round(), fs_tx.round());
            if (a - fs_ch).abs() > 1e-9 || (b - fs_tx).abs() > 1e-9 || a < 1.0 || b < 1.0 {
                return Err(Error::InvalidParameter(
                    "polyphase replay needs integer sample rates".into(),
                ));
            }
            let (up, down) = (a as usize, b as usize);
            Ok(Rate::Poly {
                fwd: PolyphaseResampler::new(up, down)?,
                back: PolyphaseResampler::new(down, up)?,
            })
        }
    }
}

/// Sparse view of the taps used by one replay, one list per time step.
struct SparseTaps {
    rows: Vec<Vec<(usize, Cplx)>>,
}

impl SparseTaps {
    fn new(rec: &TvirRecord) -> Self {
        let rows = (0..rec.t)
            .map(|s| {
                rec.response(s)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != ZERO)
                    .map(|(m, v)| (m, *v))
                    .collect()
            })
            .collect();
        Self { rows }
    }
}

/// Time-varying convolution `y[n] = sum_m H(n)[m] x[n - m]` where `H(n)` is
/// the response at absolute channel sample `start + n`.
fn tv_convolve(rec: &TvirRecord, sp: &SparseTaps, x: &[Cplx], start: usize, interp: TapInterpolation, adjoint: bool) -> Vec<Cplx> {
    let mut out = vec![ZERO; x.len()];
    let sps = rec.samples_per_step();
    for n in 0..x.len() {
        let pos = (start + n) as f64 / sps;
        let s0 = (pos.floor() as usize).min(rec.t - 1);
        let (s1, w) = match interp {
            TapInterpolation::Hold => (s0, 0.0),
            TapInterpolation::Linear if s0 + 1 < rec.t => (s0 + 1, pos - s0 as f64),
            TapInterpolation::Linear => (s0, 0.0),
        };
        let mut visit = |row: &[(usize, Cplx)], weight: f64| {
            if weight == 0.0 {
                return;
            }
            for &(m, h) in row {
                if m > n {
                    break;
                }
                if adjoint {
                    out[n - m] += (h * weight).conj() * x[n];
                } else {
                    out[n] += h * weight * x[n - m];
                }
            }
        };
        visit(&sp.rows[s0], 1.0 - w);
        if s1 != s0 {
            visit(&sp.rows[s1], w);
        }
    }
    out
}

/// Channel-rate length a stream of `len` transmit samples occupies.
fn channel_len(rate: &Rate, len: usize) -> usize {
    match rate {
        Rate::Same => len,
        Rate::Poly { fwd, .. } => fwd.out_len(len),
        Rate::Linear { ratio } => (len as f64 * ratio).floor() as usize,
    }
}

/// Compiled replay of one record for one transmit rate.
pub struct TvirReplay<'a> {
    rec: &'a TvirRecord,
    sparse: SparseTaps,
    rate: Rate,
    shift_hz: f64,
    fs_tx: f64,
    options: ReplayOptions,
}

impl<'a> TvirReplay<'a> {
    pub fn new(rec: &'a TvirRecord, tx: Baseband, options: ReplayOptions) -> Result<Self> {
        Ok(Self {
            rec,
            sparse: SparseTaps::new(rec),
            rate: rate_plan(tx.fs_hz, rec.fs_channel, options.resampler)?,
            shift_hz: tx.carrier_hz - rec.carrier_hz,
            fs_tx: tx.fs_hz,
            options,
        })
    }

    /// Latest channel-rate start sample at which `len` transmit samples fit.
    pub fn max_start(&self, len: usize) -> Result<usize> {
        let needed = channel_len(&self.rate, len);
        let available = self.rec.coverage_samples();
        if needed > available {
            return Err(Error::TvirTooShort { needed, available });
        }
        Ok(available - needed)
    }

    fn shift(&self, x: &[Cplx], sign: f64) -> Vec<Cplx> {
        if self.shift_hz == 0.0 {
            return x.to_vec();
        }
        x.iter()
            .enumerate()
            .map(|(n, v)| v * Cplx::from_polar(1.0, sign * 2.0 * PI * self.shift_hz * n as f64 / self.fs_tx))
            .collect()
    }

    fn to_channel_rate(&self, x: &[Cplx]) -> Result<Vec<Cplx>> {
        Ok(match &self.rate {
            Rate::Same => x.to_vec(),
            Rate::Poly { fwd, .. } => fwd.apply(x),
            Rate::Linear { ratio } => LinearResampler::new(x.len(), *ratio)?.apply(x),
        })
    }

    fn to_channel_rate_adjoint(&self, g: &[Cplx], len: usize) -> Result<Vec<Cplx>> {
        Ok(match &self.rate {
            Rate::Same => g.to_vec(),
            Rate::Poly { fwd, .. } => fwd.adjoint(g, len),
            Rate::Linear { ratio } => LinearResampler::new(len, *ratio)?.adjoint(g),
        })
    }

    fn back_resampler(&self, ch_len: usize) -> Result<Option<LinearResampler>> {
        match &self.rate {
            Rate::Linear { ratio } => Ok(Some(LinearResampler::new(ch_len, 1.0 / ratio)?)),
            _ => Ok(None),
        }
    }

    fn to_tx_rate(&self, y: &[Cplx], len: usize) -> Result<Vec<Cplx>> {
        let mut out = match &self.rate {
            Rate::Same => y.to_vec(),
            Rate::Poly { back, .. } => back.apply(y),
            Rate::Linear { .. } => self.back_resampler(y.len())?.unwrap().apply(y),
        };
        out.resize(len, ZERO);
        Ok(out)
    }

    fn to_tx_rate_adjoint(&self, g: &[Cplx], ch_len: usize) -> Result<Vec<Cplx>> {
        Ok(match &self.rate {
            Rate::Same => g.to_vec(),
            Rate::Poly { back, .. } => {
                let mut gg = g.to_vec();
                gg.resize(back.out_len(ch_len), ZERO);
                back.adjoint(&gg, ch_len)
            }
            Rate::Linear { .. } => {
                let r = self.back_resampler(ch_len)?.unwrap();
                let mut gg = g.to_vec();
                gg.resize(r.out_len(), ZERO);
                r.adjoint(&gg)
            }
        })
    }

    /// Replays `x` starting at channel sample `start`. Output has `x.len()` samples.
    pub fn apply(&self, x: &[Cplx], start: usize) -> Result<Vec<Cplx>> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let limit = self.max_start(x.len())?;
        if start > limit {
            return Err(Error::TvirTooShort {
                needed: start + channel_len(&self.rate, x.len()),
                available: self.rec.coverage_samples(),
            });
        }
        let up = self.to_channel_rate(&self.shift(x, 1.0))?;
        let y = tv_convolve(self.rec, &self.sparse, &up, start, self.options.taps, false);
        Ok(self.shift(&self.to_tx_rate(&y, x.len())?, -1.0))
    }

    pub fn adjoint(&self, g: &[Cplx], start: usize) -> Result<Vec<Cplx>> {
        if g.is_empty() {
            return Ok(Vec::new());
        }
        let len = g.len();
        let ch_len = channel_len(&self.rate, len);
        let g1 = self.shift(g, 1.0);
        let g2 = self.to_tx_rate_adjoint(&g1, ch_len)?;
        let g3 = tv_convolve(self.rec, &self.sparse, &g2, start, self.options.taps, true);
        let g4 = self.to_channel_rate_adjoint(&g3, len)?;
        Ok(self.shift(&g4, -1.0))
    }
}

/// Replays `x` through `tvir` from the start of the record.
pub fn replay_tvir(x: &[Cplx], tvir: &TvirRecord, tx: Baseband) -> Result<Vec<Cplx>> {
    TvirReplay::new(tvir, tx, ReplayOptions::default())?.apply(x, 0)
}

// ---------------------------------------------------------------------------
// Channel model dispatch

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelKind {
    Ideal,
    Awgn,
    Fir(Vec<Cplx>),
    Tvir {
        record: Arc<TvirRecord>,
        options: ReplayOptions,
        /// Draw a random start point in the record per realization.
        random_start: bool,
    },
}

/// A propagation effect followed by white Gaussian noise at `snr_db`
/// (`+inf` disables noise). The SNR is measured against the mean power of
/// the propagated stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub seed: u64,
}

/// Frozen randomness of one channel use.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub start: usize,
    pub noise: Vec<Cplx>,
}

impl ChannelModel {
    pub fn ideal() -> Self {
        Self {
            kind: ChannelKind::Ideal,
            snr_db: f64::INFINITY,
            seed: 0,
        }
    }

    pub fn awgn(snr_db: f64, seed: u64) -> Self {
        Self {
            kind: ChannelKind::Awgn,
            snr_db,
            seed,
        }
    }

    pub fn fir(taps: Vec<Cplx>, snr_db: f64, seed: u64) -> Self {
        Self {
            kind: ChannelKind::Fir(taps),
            snr_db,
            seed,
        }
    }

    pub fn tvir(record: Arc<TvirRecord>, snr_db: f64, seed: u64) -> Self {
        Self {
            kind: ChannelKind::Tvir {
                record,
                options: ReplayOptions::default(),
                random_start: true,
            },
            snr_db,
            seed,
        }
    }

    pub fn with_snr(&self, snr_db: f64) -> Self {
        Self {
            snr_db,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::InvalidParameter("snr_db must be finite or +inf".into()));
        }
        if let ChannelKind::Fir(t) = &self.kind {
            if t.is_empty() || t.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("FIR taps must be nonempty and finite".into()));
            }
        }
        Ok(())
    }

    fn noisy(&self) -> bool {
        !matches!(self.kind, ChannelKind::Ideal) && self.snr_db != f64::INFINITY
    }

    /// Start sample for realization `epoch`.
    pub fn start_for(&self, tx: Baseband, len: usize, epoch: u64) -> Result<usize> {
        match &self.kind {
            ChannelKind::Tvir {
                record,
                options,
                random_start,
            } => {
                let max = TvirReplay::new(record, tx, *options)?.max_start(len)?;
                if *random_start && max > 0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, epoch.wrapping_mul(2).wrapping_add(1)));
                    Ok(rng.random_range(0..=max))
                } else {
                    Ok(0)
                }
            }
            _ => Ok(0),
        }
    }

    /// The noise-free linear part of the channel.
    pub fn propagate(&self, x: &[Cplx], tx: Baseband, start: usize) -> Result<Vec<Cplx>> {
        match &self.kind {
            ChannelKind::Ideal | ChannelKind::Awgn => Ok(x.to_vec()),
            ChannelKind::Fir(t) => Ok(apply_fir(x, t)),
            ChannelKind::Tvir { record, options, .. } => TvirReplay::new(record, tx, *options)?.apply(x, start),
        }
    }

    pub fn propagate_adjoint(&self, g: &[Cplx], tx: Baseband, start: usize) -> Result<Vec<Cplx>> {
        match &self.kind {
            ChannelKind::Ideal | ChannelKind::Awgn => Ok(g.to_vec()),
            ChannelKind::Fir(t) => Ok(apply_fir_adjoint(g, t)),
            ChannelKind::Tvir { record, options, .. } => TvirReplay::new(record, tx, *options)?.adjoint(g, start),
        }
    }

    /// Noise for realization `epoch`, scaled against the propagated stream.
    pub fn noise_for(&self, propagated: &[Cplx], epoch: u64) -> Vec<Cplx> {
        if !self.noisy() {
            return vec![ZERO; propagated.len()];
        }
        let var = noise_variance(mean_power(propagated), self.snr_db);
        gaussian_noise(propagated.len(), var, derive_seed(self.seed, epoch.wrapping_mul(2)))
    }

    /// Propagation plus noise, returning the frozen randomness alongside.
    pub fn apply_detailed(&self, x: &[Cplx], tx: Baseband, epoch: u64) -> Result<(Vec<Cplx>, Realization)> {
        self.validate()?;
        if x.is_empty() {
            return Err(Error::InvalidParameter("empty input stream".into()));
        }
        let start = self.start_for(tx, x.len(), epoch)?;
        let y = self.propagate(x, tx, start)?;
        let noise = self.noise_for(&y, epoch);
        let out = y.iter().zip(&noise).map(|(a, b)| a + b).collect();
        Ok((out, Realization { start, noise }))
    }

    pub fn apply(&self, x: &[Cplx], tx: Baseband, epoch: u64) -> Result<Vec<Cplx>> {
        Ok(self.apply_detailed(x, tx, epoch)?.0)
    }
}

/// Dispatch with an optional SNR override.
pub fn apply_channel(model: &ChannelModel, x: &[Cplx], tx: Baseband, epoch: u64, snr_db_override: Option<f64>) -> Result<Vec<Cplx>> {
    match snr_db_override {
        Some(s) => model.with_snr(s).apply(x, tx, epoch),
        None => model.apply(x, tx, epoch),
    }
}
