//! One OFDM frame through transmitter, channel and receiver.
//!
//! The record returned by [`run_frame`] keeps every intermediate the gradient
//! pass needs, plus the frozen randomness and synchronization decisions so a
//! second evaluation can replay exactly the same channel use.

use serde::{Deserialize, Serialize};

use crate::channel::{derive_seed, Baseband, ChannelModel};
use crate::ofdm::{
    assemble_frame, detect_frame, estimate_cfo, estimate_channel, frame_grid, normalize_power, zf_equalize,
    ChannelEstimate, FrameLayout, OfdmFrameSpec,
};
use crate::wavebank::WavebankParams;
use crate::{Cplx, Error, Result};

/// Default number of silent samples before and after each frame.
pub const DEFAULT_GUARD: usize = 32;

/// How the pilot channel estimate enters the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateGradient {
    /// Differentiate through the pilot-derived estimate.
    #[default]
    Through,
    /// Treat the estimate as a constant.
    Stop,
}

/// Static link configuration shared by all frames.
#[derive(Debug, Clone)]
pub struct Link {
    pub spec: OfdmFrameSpec,
    pub layout: FrameLayout,
    pub guard: usize,
    pub estimate_gradient: EstimateGradient,
}

impl Link {
    pub fn new(spec: OfdmFrameSpec, layout_seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = FrameLayout::new(&spec, layout_seed);
        Ok(Self {
            spec,
            layout,
            guard: DEFAULT_GUARD,
            estimate_gradient: EstimateGradient::default(),
        })
    }

    pub fn baseband(&self) -> Baseband {
        Baseband {
            fs_hz: self.spec.sample_rate(),
            carrier_hz: self.spec.carrier_hz,
        }
    }

    pub fn stream_len(&self) -> usize {
        self.spec.frame_len() + 2 * self.guard
    }

    /// Tokens carried by one frame at wavelength `l`.
    pub fn tokens_per_frame(&self, l: usize) -> Result<usize> {
        let n = self.spec.data_slots().checked_div(l).unwrap_or(0);
        if n == 0 {
            return Err(Error::InvalidParameter(format!(
                "wavelength {l} does not fit in {} data slots",
                self.spec.data_slots()
            )));
        }
        Ok(n)
    }
}

/// Randomness and receiver decisions of one channel use.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenFrame {
    pub start: usize,
    pub noise: Vec<Cplx>,
    pub offset: usize,
    pub cfo_hz: f64,
    /// Held only when the estimate is a stop-gradient.
    pub estimate: Option<ChannelEstimate>,
}

/// Everything observed while sending one frame.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    /// Frame before power normalization.
    pub raw: Vec<Cplx>,
    pub rms: f64,
    /// Received stream including guards.
    pub rx: Vec<Cplx>,
    pub detected: bool,
    pub frozen: FrozenFrame,
    pub grid: Vec<Cplx>,
    pub estimate: ChannelEstimate,
    /// Equalized data slots in transmit order.
    pub symbols: Vec<Cplx>,
}

/// Sends one frame of data slots. With `frozen` set, the stored randomness
/// and synchronization are reused instead of drawn and estimated.
pub fn run_frame(
    link: &Link,
    model: &ChannelModel,
    data: &[Cplx],
    epoch: u64,
    frozen: Option<&FrozenFrame>,
) -> Result<FrameRecord> {
    let spec = &link.spec;
    let raw = assemble_frame(spec, &link.layout, data)?;
    let (frame, rms) = normalize_power(&raw);
    if rms == 0.0 {
        return Err(Error::NonFinite("frame power is zero"));
    }
    let mut stream = vec![Cplx::new(0.0, 0.0); link.stream_len()];
    stream[link.guard..link.guard + frame.len()].copy_from_slice(&frame);
    let bb = link.baseband();

    let start = match frozen {
        Some(f) => f.start,
        None => model.start_for(bb, stream.len(), epoch)?,
    };
    let propagated = model.propagate(&stream, bb, start)?;
    let noise = match frozen {
        Some(f) => f.noise.clone(),
        None => model.noise_for(&propagated, epoch),
    };
    let rx: Vec<Cplx> = propagated.iter().zip(&noise).map(|(a, b)| a + b).collect();
    if rx.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("received stream"));
    }

    let (offset, cfo_hz, detected) = match frozen {
        Some(f) => (f.offset, f.cfo_hz, true),
        None => match detect_frame(spec, &link.layout, &rx) {
            Ok(offset) => {
                let pre = offset + spec.chirp_len;
                (offset, estimate_cfo(spec, &rx[pre..pre + spec.sc_len])?, true)
            }
            // No lock: fall back to the nominal timing, no carrier correction.
            Err(Error::NoFrameDetected { .. }) => (link.guard, 0.0, false),
            Err(e) => return Err(e),
        },
    };

    let grid = frame_grid(spec, &rx, offset, cfo_hz)?;
    let estimate = match frozen.and_then(|f| f.estimate.clone()) {
        Some(e) => e,
        None => estimate_channel(spec, &link.layout, &grid)?,
    };
    let symbols = zf_equalize(&crate::ofdm::data_rows(spec, &grid), &estimate.data)?;
    let keep_estimate = link.estimate_gradient == EstimateGradient::Stop;
    Ok(FrameRecord {
        raw,
        rms,
        rx,
        detected,
        frozen: FrozenFrame {
            start,
            noise,
            offset,
            cfo_hz,
            estimate: keep_estimate.then(|| estimate.clone()),
        },
        grid,
        estimate,
        symbols,
    })
}

/// Channel-use index of frame `frame` in a run seeded with `seed`.
pub fn frame_epoch(seed: u64, frame: usize) -> u64 {
    derive_seed(seed, frame as u64)
}

/// Packs token waveforms into frames, zero-filling unused slots.
pub fn pack_tokens(link: &Link, params: &WavebankParams, tokens: &[usize]) -> Result<Vec<Vec<Cplx>>> {
    let per = link.tokens_per_frame(params.l())?;
    let slots = link.spec.data_slots();
    tokens
        .chunks(per)
        .map(|chunk| {
            let mut data = params.encode_tokens(chunk)?;
            data.resize(slots, Cplx::new(0.0, 0.0));
            Ok(data)
        })
        .collect()
}

/// Sends `tokens` with the waveform bank and decodes them by nearest
/// neighbor. Returns the decoded tokens in order.
pub fn transmit_tokens(
    link: &Link,
    params: &WavebankParams,
    model: &ChannelModel,
    tokens: &[usize],
    seed: u64,
) -> Result<Vec<usize>> {
    let frames = pack_tokens(link, params, tokens)?;
    transmit_packed(link, params, model, &frames, tokens.len(), seed)
}

/// Sends frames from [`pack_tokens`] and decodes the first `n_tokens`
/// tokens. Reusing one packing for several channels guarantees every
/// receiver sees the same transmit stream.
pub fn transmit_packed(
    link: &Link,
    params: &WavebankParams,
    model: &ChannelModel,
    frames: &[Vec<Cplx>],
    n_tokens: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let l = params.l();
    let per = link.tokens_per_frame(l)?;
    if n_tokens > frames.len() * per {
        return Err(Error::LengthMismatch {
            expected: frames.len() * per,
            actual: n_tokens,
        });
    }
    let table = params.synthesize_all();
    let mut out = Vec::with_capacity(n_tokens);
    for (f, data) in frames.iter().enumerate() {
        let count = (n_tokens - out.len()).min(per);
        if count == 0 {
            break;
        }
        let rec = run_frame(link, model, data, frame_epoch(seed, f), None)?;
        for t in 0..count {
            out.push(table.decode_nn(&rec.symbols[t * l..(t + 1) * l])?.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::TvirRecord;
    use crate::wavebank::{init_wavebank, InitScheme};
    use std::sync::Arc;

    #[test]
    fn ideal_loopback_all_wavelengths() {
        let link = Link::new(OfdmFrameSpec::default(), 7).unwrap();
        for l in [9, 10, 13, 30] {
            let p = init_wavebank(1024, l, 3, InitScheme::Gaussian).unwrap();
            let tokens: Vec<usize> = (0..300).map(|i| (i * 37 + l) % 1024).collect();
            let got = transmit_tokens(&link, &p, &ChannelModel::ideal(), &tokens, 1).unwrap();
            assert_eq!(got, tokens, "L={l}");
        }
    }

    #[test]
    fn frozen_replay_reproduces_record() {
        let link = Link::new(OfdmFrameSpec::default(), 7).unwrap();
        let p = init_wavebank(16, 8, 3, InitScheme::Gaussian).unwrap();
        let rec = Arc::new(
            TvirRecord::synthetic(&crate::channel::SyntheticTvir {
                duration_s: 2.0,
                ..Default::default()
            })
            .unwrap(),
        );
        let model = ChannelModel::tvir(rec, 12.0, 5);
        let data = &pack_tokens(&link, &p, &(0..96).map(|i| i % 16).collect::<Vec<_>>()).unwrap()[0];
        let a = run_frame(&link, &model, data, 9, None).unwrap();
        let b = run_frame(&link, &model, data, 9, Some(&a.frozen)).unwrap();
        assert!(a.detected);
        assert_eq!(a.symbols, b.symbols);
    }

    #[test]
    fn oversized_wavelength_rejected() {
        let link = Link::new(OfdmFrameSpec::default(), 7).unwrap();
        assert!(link.tokens_per_frame(769).is_err());
        assert_eq!(link.tokens_per_frame(8).unwrap(), 96);
    }
}
