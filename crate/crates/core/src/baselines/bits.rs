//! Token bit packing and BPSK/QPSK mapping.

use serde::{Deserialize, Serialize};

use crate::channel::gaussian_noise;
use crate::{Cplx, Error, Result};

/// `ceil(log2 k)`, at least 1.
pub fn bits_per_token(k: usize) -> Result<usize> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("codebook size {k} needs at least 2 tokens")));
    }
    Ok((usize::BITS - (k - 1).leading_zeros()) as usize)
}

/// Big-endian fixed-width fields, one per token.
pub fn tokens_to_bits(tokens: &[usize], k: usize) -> Result<Vec<u8>> {
    let b = bits_per_token(k)?;
    let mut out = Vec::with_capacity(tokens.len() * b);
    for &t in tokens {
        if t >= k {
            return Err(Error::TokenOutOfRange { token: t, k });
        }
        out.extend((0..b).rev().map(|i| ((t >> i) & 1) as u8));
    }
    Ok(out)
}

/// Inverse of [`tokens_to_bits`]. Words decoding to `>= k` (possible after
/// bit errors when `k` is not a power of two) are clamped to `k - 1`.
pub fn bits_to_tokens(bits: &[u8], k: usize) -> Result<Vec<usize>> {
    let b = bits_per_token(k)?;
    if !bits.len().is_multiple_of(b) {
        return Err(Error::LengthMismatch {
            expected: bits.len().div_ceil(b) * b,
            actual: bits.len(),
        });
    }
    Ok(bits
        .chunks(b)
        .map(|w| w.iter().fold(0usize, |acc, &x| (acc << 1) | (x & 1) as usize).min(k - 1))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modulation {
    Bpsk,
    Qpsk,
}

impl Modulation {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Bpsk => 1,
            Modulation::Qpsk => 2,
        }
    }

    pub fn map(self, bits: &[u8]) -> Result<Vec<Cplx>> {
        match self {
            Modulation::Bpsk => Ok(map_bpsk(bits)),
            Modulation::Qpsk => map_qpsk(bits),
        }
    }
}

fn sign(b: u8) -> f64 {
    if b & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// 0 maps to +1, 1 to -1.
pub fn map_bpsk(bits: &[u8]) -> Vec<Cplx> {
    bits.iter().map(|&b| Cplx::new(sign(b), 0.0)).collect()
}

/// Gray-mapped unit-energy QPSK: the first bit sets I, the second Q.
pub fn map_qpsk(bits: &[u8]) -> Result<Vec<Cplx>> {
    if !bits.len().is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("QPSK needs an even bit count, got {}", bits.len())));
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Ok(bits.chunks(2).map(|p| Cplx::new(s * sign(p[0]), s * sign(p[1]))).collect())
}

pub fn demap_hard(symbols: &[Cplx], modulation: Modulation) -> Vec<u8> {
    let bit = |v: f64| u8::from(v < 0.0);
    match modulation {
        Modulation::Bpsk => symbols.iter().map(|y| bit(y.re)).collect(),
        Modulation::Qpsk => symbols.iter().flat_map(|y| [bit(y.re), bit(y.im)]).collect(),
    }
}

/// Bit LLRs `ln P(0)/P(1)` for symbols seen through complex AWGN of
/// per-symbol variance `noise_var[i]`.
pub fn demap_llr(symbols: &[Cplx], noise_var: &[f64], modulation: Modulation) -> Result<Vec<f64>> {
    if symbols.len() != noise_var.len() {
        return Err(Error::LengthMismatch {
            expected: symbols.len(),
            actual: noise_var.len(),
        });
    }
    let out: Vec<f64> = match modulation {
        Modulation::Bpsk => symbols.iter().zip(noise_var).map(|(y, v)| 4.0 * y.re / v).collect(),
        Modulation::Qpsk => {
            let c = 2.0 * std::f64::consts::SQRT_2;
            symbols
                .iter()
                .zip(noise_var)
                .flat_map(|(y, v)| [c * y.re / v, c * y.im / v])
                .collect()
        }
    };
    if out.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("bit LLRs"));
    }
    Ok(out)
}

/// Gaussian tail probability `Q(x) = P(N(0,1) > x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2)
}

/// Analytic hard-decision BER for unit-energy symbols in complex AWGN of
/// variance `noise_var`.
pub fn uncoded_ber(modulation: Modulation, noise_var: f64) -> f64 {
    match modulation {
        Modulation::Bpsk => q_function((2.0 / noise_var).sqrt()),
        Modulation::Qpsk => q_function((1.0 / noise_var).sqrt()),
    }
}

/// Monte Carlo bit error rate of uncoded `modulation` over complex AWGN at
/// the given `Eb/N0` (dB), using `n_bits` random bits.
pub fn simulate_awgn_ber(modulation: Modulation, ebn0_db: f64, n_bits: usize, seed: u64) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let bps = modulation.bits_per_symbol();
    let n_bits = n_bits.div_ceil(bps) * bps;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let bits: Vec<u8> = (0..n_bits).map(|_| rng.random_range(0..2u8)).collect();
    let tx = modulation.map(&bits)?;
    // Unit symbol energy: N0 = Es / (Eb/N0 * bits per symbol).
    let n0 = 1.0 / (10f64.powf(ebn0_db / 10.0) * bps as f64);
    let noise = gaussian_noise(tx.len(), n0, seed ^ 0x5eed);
    let rx: Vec<Cplx> = tx.iter().zip(&noise).map(|(a, b)| a + b).collect();
    let errors = demap_hard(&rx, modulation).iter().zip(&bits).filter(|(a, b)| a != b).count();
    Ok(errors as f64 / n_bits as f64)
}
