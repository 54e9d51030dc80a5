//! Trainable token-to-waveform bank.
//!
//! Each token owns a length-`L` complex spectrum `F[t] = F_real[t] + j F_imag[t]`.
//! Its waveform is the unitary inverse DFT of that spectrum, and every waveform
//! sample rides on one OFDM data slot. Decoding picks the bank waveform closest
//! in L2 to the equalized slice; training uses a temperature softmax over the
//! negated distances scored against a row of the relevance matrix.

use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::idft_unitary;
use crate::io::{read_file, write_file, Reader, Writer};
use crate::{Cplx, Error, Result};

pub const WAVEBANK_MAGIC: &[u8; 8] = b"SWWB\x01\x00\x00\x00";

/// Lower clamp applied to probabilities inside the log of the loss.
pub const LOG_CLAMP: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// i.i.d. normal spectra, each waveform rescaled to unit average power.
    #[default]
    Gaussian,
    /// Random unit-modulus spectra with QPSK phases.
    QpskLike,
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "qpsk-like" => Ok(Self::QpskLike),
            _ => Err(Error::Unknown {
                kind: "init scheme",
                name: s.to_string(),
            }),
        }
    }
}

/// Synthesized bank: `K` rows of `L` complex samples.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformTable {
    k: usize,
    l: usize,
    samples: Vec<Cplx>,
}

impl WaveformTable {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn row(&self, token: usize) -> &[Cplx] {
        &self.samples[token * self.l..(token + 1) * self.l]
    }

    /// Nearest-neighbor decode. Returns the winning token and all `K` distances.
    /// Ties go to the lowest index.
    pub fn decode_nn(&self, received: &[Cplx]) -> Result<(usize, Vec<f64>)> {
        if received.len() != self.l {
            return Err(Error::LengthMismatch {
                expected: self.l,
                actual: received.len(),
            });
        }
        if received.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("received waveform"));
        }
        let distances: Vec<f64> = (0..self.k)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(received)
                    .map(|(w, r)| (r - w).norm_sqr())
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok((argmin(&distances), distances))
    }
}

/// Index of the smallest value, lowest index on ties.
pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Frequency-domain bank parameters plus the log-temperature.
#[derive(Debug, Clone)]
pub struct WavebankParams {
    k: usize,
    l: usize,
    f_real: Vec<f64>,
    f_imag: Vec<f64>,
    log_tau: f64,
    cache: OnceLock<WaveformTable>,
}

impl PartialEq for WavebankParams {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k
            && self.l == other.l
            && self.f_real == other.f_real
            && self.f_imag == other.f_imag
            && self.log_tau == other.log_tau
    }
}

impl WavebankParams {
    pub fn new(k: usize, l: usize, f_real: Vec<f64>, f_imag: Vec<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
        }
        Self::from_log_tau(k, l, f_real, f_imag, tau.ln())
    }

    pub fn from_log_tau(
        k: usize,
        l: usize,
        f_real: Vec<f64>,
        f_imag: Vec<f64>,
        log_tau: f64,
    ) -> Result<Self> {
        if k < 1 || l < 1 {
            return Err(Error::InvalidParameter("K and L must be ≥ 1".into()));
        }
        for v in [&f_real, &f_imag] {
            if v.len() != k * l {
                return Err(Error::LengthMismatch {
                    expected: k * l,
                    actual: v.len(),
                });
            }
        }
        if f_real.iter().chain(&f_imag).any(|v| !v.is_finite()) || !log_tau.is_finite() {
            return Err(Error::NonFinite("wavebank parameters"));
        }
        Ok(Self {
            k,
            l,
            f_real,
            f_imag,
            log_tau,
            cache: OnceLock::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn log_tau(&self) -> f64 {
        self.log_tau
    }

    pub fn f_real(&self) -> &[f64] {
        &self.f_real
    }

    pub fn f_imag(&self) -> &[f64] {
        &self.f_imag
    }

    /// Mutable access to the three trainable blocks. Invalidates the
    /// synthesized-waveform cache.
    pub fn parts_mut(&mut self) -> (&mut [f64], &mut [f64], &mut f64) {
        self.cache = OnceLock::new();
        (&mut self.f_real, &mut self.f_imag, &mut self.log_tau)
    }

    pub fn spectrum(&self, token: usize) -> Result<Vec<Cplx>> {
        self.check_token(token)?;
        let r = token * self.l..(token + 1) * self.l;
        Ok(self.f_real[r.clone()]
            .iter()
            .zip(&self.f_imag[r])
            .map(|(&a, &b)| Cplx::new(a, b))
            .collect())
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.k {
            return Err(Error::TokenOutOfRange { token, k: self.k });
        }
        Ok(())
    }

    /// `w = IDFT(F[token])` with `1/sqrt(L)` scaling.
    pub fn synthesize(&self, token: usize) -> Result<Vec<Cplx>> {
        let mut w = self.spectrum(token)?;
        idft_unitary(&mut w);
        Ok(w)
    }

    /// All `K` waveforms, cached until the next parameter mutation.
    pub fn synthesize_all(&self) -> &WaveformTable {
        self.cache.get_or_init(|| {
            let mut samples = Vec::with_capacity(self.k * self.l);
            for t in 0..self.k {
                samples.extend(self.synthesize(t).expect("token in range"));
            }
            WaveformTable {
                k: self.k,
                l: self.l,
                samples,
            }
        })
    }

    /// Concatenated waveforms of `tokens`, `L` symbols each, in order.
    pub fn encode_tokens(&self, tokens: &[usize]) -> Result<Vec<Cplx>> {
        let table = self.synthesize_all();
        let mut out = Vec::with_capacity(tokens.len() * self.l);
        for &t in tokens {
            self.check_token(t)?;
            out.extend_from_slice(table.row(t));
        }
        Ok(out)
    }

    pub fn decode_nn(&self, received: &[Cplx]) -> Result<(usize, Vec<f64>)> {
        self.synthesize_all().decode_nn(received)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(WAVEBANK_MAGIC);
        w.u32(self.k as u32);
        w.u32(self.l as u32);
        for &v in self.f_real.iter().chain(&self.f_imag) {
            w.f32(v as f32);
        }
        w.f64(self.log_tau);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(WAVEBANK_MAGIC)?;
        let k = r.u32("K")? as usize;
        let l = r.u32("L")? as usize;
        if k < 1 || l < 1 {
            return Err(Error::format(8, "K and L must be ≥ 1"));
        }
        let read_block = |r: &mut Reader| -> Result<Vec<f64>> {
            let mut v = Vec::with_capacity(k * l);
            for _ in 0..k * l {
                let off = r.offset();
                let x = r.f32("wavebank value")?;
                if !x.is_finite() {
                    return Err(Error::format(off, "non-finite wavebank value"));
                }
                v.push(x as f64);
            }
            Ok(v)
        };
        let f_real = read_block(&mut r)?;
        let f_imag = read_block(&mut r)?;
        let off = r.offset();
        let log_tau = r.f64("log tau")?;
        if !log_tau.is_finite() {
            return Err(Error::format(off, "non-finite log tau"));
        }
        r.finish()?;
        Self::from_log_tau(k, l, f_real, f_imag, log_tau)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    /// Rounds every spectrum value through f32, the checkpoint precision.
    pub fn quantize_to_storage(&mut self) {
        let (re, im, _) = self.parts_mut();
        for v in re.iter_mut().chain(im.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
}

/// Deterministic bank initialization with `tau = 1`.
pub fn init_wavebank(k: usize, l: usize, seed: u64, scheme: InitScheme) -> Result<WavebankParams> {
    if k < 1 || l < 1 {
        return Err(Error::InvalidParameter("K and L must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut re = vec![0.0; k * l];
    let mut im = vec![0.0; k * l];
    match scheme {
        InitScheme::Gaussian => {
            let normal = Normal::new(0.0, 1.0).unwrap();
            for t in 0..k {
                let row = t * l..(t + 1) * l;
                for i in row.clone() {
                    re[i] = normal.sample(&mut rng);
                    im[i] = normal.sample(&mut rng);
                }
                // Parseval: mean |w|^2 = ||F||^2 / L.
                let energy: f64 = row.clone().map(|i| re[i] * re[i] + im[i] * im[i]).sum();
                let s = if energy > 0.0 { (l as f64 / energy).sqrt() } else { 0.0 };
                for i in row {
                    re[i] *= s;
                    im[i] *= s;
                }
            }
        }
        InitScheme::QpskLike => {
            let h = std::f64::consts::FRAC_1_SQRT_2;
            for i in 0..k * l {
                let q: u8 = rng.random_range(0..4);
                re[i] = if q & 1 == 0 { h } else { -h };
                im[i] = if q & 2 == 0 { h } else { -h };
            }
        }
    }
    WavebankParams::from_log_tau(k, l, re, im, 0.0)
}

/// `p_i = exp(-d_i / tau) / sum_j exp(-d_j / tau)`, evaluated with the
/// minimum distance subtracted first.
pub fn token_posterior(distances: &[f64], tau: f64) -> Vec<f64> {
    let dmin = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = distances.iter().map(|d| (-(d - dmin) / tau).exp()).collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    p
}

/// `-sum_i R[t][i] log(max(p_i, 1e-30))`. The relevance row is used as-is.
pub fn wavebank_loss(posterior: &[f64], relevance_row: &[f64]) -> f64 {
    posterior
        .iter()
        .zip(relevance_row)
        .map(|(&p, &r)| -r * p.max(LOG_CLAMP).ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_idft(f: &[Cplx]) -> Vec<Cplx> {
        let l = f.len();
        (0..l)
            .map(|n| {
                f.iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        v * Cplx::from_polar(1.0, 2.0 * std::f64::consts::PI * (n * k) as f64 / l as f64)
                    })
                    .sum::<Cplx>()
                    / (l as f64).sqrt()
            })
            .collect()
    }

    #[test]
    fn dc_spectrum_gives_constant_waveform() {
        let l = 6;
        let mut re = vec![0.0; 2 * l];
        re[0] = (l as f64).sqrt();
        let p = WavebankParams::new(2, l, re, vec![0.0; 2 * l], 1.0).unwrap();
        for v in p.synthesize(0).unwrap() {
            assert!((v - Cplx::new(1.0, 0.0)).norm() < 1e-12);
        }
        assert!(p.synthesize(1).unwrap().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn synthesis_matches_direct_sum_and_parseval() {
        let p = init_wavebank(3, 8, 11, InitScheme::Gaussian).unwrap();
        for t in 0..3 {
            let f = p.spectrum(t).unwrap();
            let w = p.synthesize(t).unwrap();
            for (a, b) in w.iter().zip(naive_idft(&f)) {
                assert!((a - b).norm() < 1e-9);
            }
            let ef: f64 = f.iter().map(|v| v.norm_sqr()).sum();
            let ew: f64 = w.iter().map(|v| v.norm_sqr()).sum();
            assert!((ef.sqrt() - ew.sqrt()).abs() <= 1e-9 * ef.sqrt());
        }
        assert!(matches!(p.synthesize(3), Err(Error::TokenOutOfRange { token: 3, k: 3 })));
    }

    #[test]
    fn synthesize_all_matches_rows_and_invalidates() {
        let mut p = init_wavebank(2, 5, 1, InitScheme::Gaussian).unwrap();
        for t in 0..2 {
            assert_eq!(p.synthesize_all().row(t), &p.synthesize(t).unwrap()[..]);
        }
        let before = p.synthesize_all().row(0).to_vec();
        p.parts_mut().0[0] += 1.0;
        assert_ne!(p.synthesize_all().row(0), &before[..]);
        assert_eq!(p.synthesize_all().row(0), &p.synthesize(0).unwrap()[..]);
    }

    #[test]
    fn large_bank_spot_check() {
        let p = init_wavebank(1024, 10, 5, InitScheme::Gaussian).unwrap();
        let table = p.synthesize_all();
        assert_eq!((table.k(), table.l()), (1024, 10));
        let f = p.spectrum(7).unwrap();
        for (a, b) in table.row(7).iter().zip(naive_idft(&f)) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn encode_concatenates() {
        let p = init_wavebank(4, 9, 2, InitScheme::QpskLike).unwrap();
        assert_eq!(p.encode_tokens(&[2]).unwrap(), p.synthesize(2).unwrap());
        let s = p.encode_tokens(&[1, 3]).unwrap();
        assert_eq!(&s[..9], &p.synthesize(1).unwrap()[..]);
        assert_eq!(&s[9..], &p.synthesize(3).unwrap()[..]);
        assert!(p.encode_tokens(&[]).unwrap().is_empty());
        assert_eq!(p.encode_tokens(&[0; 16]).unwrap().len(), 144);
        assert!(p.encode_tokens(&[4]).is_err());
    }

    #[test]
    fn decode_exact_and_tie() {
        let p = init_wavebank(16, 8, 3, InitScheme::Gaussian).unwrap();
        for t in 0..16 {
            let (tok, d) = p.decode_nn(&p.synthesize(t).unwrap()).unwrap();
            assert_eq!(tok, t);
            assert_eq!(d[t], 0.0);
        }
        // w0 = +1, w1 = -1: the origin is equidistant.
        let l = 2;
        let s = (l as f64).sqrt();
        let p = WavebankParams::new(2, l, vec![s, 0.0, -s, 0.0], vec![0.0; 4], 1.0).unwrap();
        let (tok, d) = p.decode_nn(&[Cplx::new(0.0, 0.0); 2]).unwrap();
        assert_eq!(tok, 0);
        assert_eq!(d[0], d[1]);
        assert!(p.decode_nn(&[Cplx::new(f64::NAN, 0.0); 2]).is_err());
        assert!(p.decode_nn(&[Cplx::new(0.0, 0.0); 3]).is_err());
    }

    #[test]
    fn posterior_cases() {
        let p = token_posterior(&[2.0; 5], 0.7);
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let p = token_posterior(&[3.0, 1.0, 2.5, 4.0], 1e-3);
        assert!(p[1] > 0.999);
        // Direct evaluation.
        let d = [0.0, 1.0, 2.0, 3.0];
        let z: f64 = d.iter().map(|x: &f64| (-x).exp()).sum();
        let p = token_posterior(&d, 1.0);
        for (pi, di) in p.iter().zip(d) {
            assert!((pi - (-di).exp() / z).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_cases() {
        let eps = 1e-6;
        let mut post = vec![eps / 3.0; 4];
        post[2] = 1.0 - eps;
        let l = wavebank_loss(&post, &[0.0, 0.0, 1.0, 0.0]);
        assert!((l - eps).abs() < 1e-11);
        let k = 8;
        let row = [1.0, 0.5, 0.25, 0.0, 0.0, 0.75, 0.1, 0.4];
        let s: f64 = row.iter().sum();
        let l = wavebank_loss(&vec![1.0 / k as f64; k], &row);
        assert!((l - s * (k as f64).ln()).abs() < 1e-12);
        // Clamp keeps the loss finite.
        let l = wavebank_loss(&[1.0, 0.0], &[1.0, 1.0]);
        assert!((l - (-(1e-30f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn init_is_deterministic_and_unit_power() {
        let a = init_wavebank(1024, 30, 9, InitScheme::Gaussian).unwrap();
        let b = init_wavebank(1024, 30, 9, InitScheme::Gaussian).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.f_real().len(), a.f_imag().len()), (1024 * 30, 1024 * 30));
        for t in (0..1024).step_by(37) {
            let w = a.synthesize(t).unwrap();
            let p = w.iter().map(|v| v.norm_sqr()).sum::<f64>() / 30.0;
            assert!((p - 1.0).abs() < 1e-6);
        }
        let q = init_wavebank(4, 8, 1, InitScheme::QpskLike).unwrap();
        for t in 0..4 {
            for v in q.spectrum(t).unwrap() {
                assert!((v.norm() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(a.tau(), 1.0);
        assert!("fancy".parse::<InitScheme>().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = init_wavebank(8, 5, 4, InitScheme::Gaussian).unwrap();
        *p.parts_mut().2 = 0.3127;
        p.quantize_to_storage();
        let back = WavebankParams::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(back, p);
        let bytes = p.to_bytes();
        assert!(WavebankParams::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
