//! Comparison systems: token bits over BPSK/QPSK (optionally LDPC coded)
//! and an analog SoftCast-lite image path.

mod bits;
pub mod ldpc;
pub mod softcast;

pub use bits::{
    bits_per_token, bits_to_tokens, demap_hard, demap_llr, map_bpsk, map_qpsk, q_function, simulate_awgn_ber,
    tokens_to_bits, uncoded_ber, Modulation,
};
pub use ldpc::LdpcCode;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelModel;
use crate::link::{frame_epoch, run_frame, FrameRecord, Link};
use crate::metrics::token_accuracy;
use crate::{Cplx, Error, Result};

/// Seed of the parity-check construction used by [`DigitalConfig::build`].
pub const LDPC_SEED: u64 = 1;
/// Noise variance floor, keeps LLRs finite on noiseless channels.
const MIN_NOISE_VAR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Fec {
    None,
    Ldpc { rate: f64, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DigitalConfig {
    pub modulation: Modulation,
    pub fec: Fec,
}

impl DigitalConfig {
    pub fn uncoded(modulation: Modulation) -> Self {
        Self { modulation, fec: Fec::None }
    }

    pub fn ldpc(modulation: Modulation, rate: f64) -> Self {
        Self {
            modulation,
            fec: Fec::Ldpc {
                rate,
                n: ldpc::DEFAULT_BLOCK_LEN,
            },
        }
    }

    pub fn build(&self) -> Result<DigitalSystem> {
        let code = match self.fec {
            Fec::None => None,
            Fec::Ldpc { rate, n } => Some(LdpcCode::peg(n, rate, ldpc::DEFAULT_VAR_DEGREE, LDPC_SEED)?),
        };
        Ok(DigitalSystem {
            modulation: self.modulation,
            code,
        })
    }

    /// Short name such as `bpsk-ldpc0.33`.
    pub fn name(&self) -> String {
        let m = match self.modulation {
            Modulation::Bpsk => "bpsk",
            Modulation::Qpsk => "qpsk",
        };
        match self.fec {
            Fec::None => m.to_string(),
            Fec::Ldpc { rate, .. } => format!("{m}-ldpc{rate}"),
        }
    }
}

/// A [`DigitalConfig`] with its code constructed.
#[derive(Debug, Clone)]
pub struct DigitalSystem {
    pub modulation: Modulation,
    pub code: Option<LdpcCode>,
}

impl DigitalSystem {
    /// Coded bits sent per information bit.
    pub fn expansion(&self) -> f64 {
        self.code.as_ref().map_or(1.0, |c| 1.0 / c.rate())
    }

    fn encode(&self, info: &[u8]) -> Result<Vec<u8>> {
        let Some(code) = &self.code else {
            return Ok(info.to_vec());
        };
        let mut out = Vec::with_capacity(info.len().div_ceil(code.k()) * code.n());
        for block in info.chunks(code.k()) {
            let mut b = block.to_vec();
            b.resize(code.k(), 0);
            out.extend(code.encode(&b)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DigitalResult {
    pub tokens: Vec<usize>,
    /// Hard-decision error rate on the transmitted (coded) bits.
    pub ber_pre: f64,
    /// Error rate on the information bits after decoding.
    pub ber_post: f64,
    /// Analytic uncoded BER for the per-slot SNR implied by the realized
    /// noise and the estimated channel gain, averaged over the sent slots.
    /// Pilot estimation noise makes it a rough guide below about 5 dB.
    pub ber_theory: f64,
    pub token_accuracy: f64,
    pub frames: usize,
    pub undetected_frames: usize,
    /// Codewords whose decoder did not satisfy all checks.
    pub failed_blocks: usize,
}

/// Noise variance seen by each equalized data slot: the realized
/// per-sample noise power divided by the estimated channel gain.
pub fn slot_noise_variance(rec: &FrameRecord) -> Vec<f64> {
    let n = rec.frozen.noise.len().max(1) as f64;
    let var = (rec.frozen.noise.iter().map(|v| v.norm_sqr()).sum::<f64>() / n).max(MIN_NOISE_VAR);
    rec.estimate.data.iter().map(|h| var / h.norm_sqr().max(MIN_NOISE_VAR)).collect()
}

/// Sends `tokens` as bits over the OFDM link and decodes them with hard
/// decisions (or LDPC belief propagation when coded).
pub fn run_digital_pipeline(
    system: &DigitalSystem,
    tokens: &[usize],
    k: usize,
    link: &Link,
    model: &ChannelModel,
    seed: u64,
) -> Result<DigitalResult> {
    if tokens.is_empty() {
        return Err(Error::InvalidParameter("no tokens to send".into()));
    }
    let info = tokens_to_bits(tokens, k)?;
    let coded = system.encode(&info)?;
    let bps = system.modulation.bits_per_symbol();
    let mut padded = coded.clone();
    padded.resize(coded.len().div_ceil(bps) * bps, 0);
    let symbols = system.modulation.map(&padded)?;

    let slots = link.spec.data_slots();
    let mut rx_syms = Vec::with_capacity(symbols.len());
    let mut rx_var = Vec::with_capacity(symbols.len());
    let mut undetected = 0;
    let mut frames = 0;
    for (f, chunk) in symbols.chunks(slots).enumerate() {
        let mut data = chunk.to_vec();
        data.resize(slots, Cplx::new(0.0, 0.0));
        let rec = run_frame(link, model, &data, frame_epoch(seed, f), None)?;
        undetected += usize::from(!rec.detected);
        frames += 1;
        rx_syms.extend_from_slice(&rec.symbols[..chunk.len()]);
        rx_var.extend_from_slice(&slot_noise_variance(&rec)[..chunk.len()]);
    }

    let ber_theory = rx_var.iter().map(|&v| uncoded_ber(system.modulation, v)).sum::<f64>() / rx_var.len() as f64;
    let hard = demap_hard(&rx_syms, system.modulation);
    let pre_errors = hard.iter().zip(&coded).filter(|(a, b)| a != b).count();
    let mut failed = 0;
    let decoded_info = match &system.code {
        None => hard[..info.len()].to_vec(),
        Some(code) => {
            let llr = demap_llr(&rx_syms, &rx_var, system.modulation)?;
            let mut out = Vec::with_capacity(info.len());
            for block in llr[..coded.len()].chunks(code.n()) {
                let d = code.decode(block)?;
                failed += usize::from(!d.converged);
                out.extend(d.info);
            }
            out.truncate(info.len());
            out
        }
    };
    let post_errors = decoded_info.iter().zip(&info).filter(|(a, b)| a != b).count();
    let decoded = bits_to_tokens(&decoded_info, k)?;
    Ok(DigitalResult {
        token_accuracy: token_accuracy(tokens, &decoded)?,
        tokens: decoded,
        ber_pre: pre_errors as f64 / coded.len() as f64,
        ber_post: post_errors as f64 / info.len() as f64,
        ber_theory,
        frames,
        undetected_frames: undetected,
        failed_blocks: failed,
    })
}
