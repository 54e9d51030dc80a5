//! Semantic waveform bank link simulator.
//!
//! Tokens from a frozen vector-quantized codebook are mapped to learned complex
//! waveforms, carried over a pilot-aided OFDM frame through simulated underwater
//! acoustic channels, and decoded by nearest-neighbor search. The bank is
//! trained end to end by differentiating a semantic cross-entropy loss through
//! the whole transmit, channel and receive chain.
//!
//! Module map:
//!
//! * [`codebook`]: token embeddings and the semantic relevance matrix.
//! * [`wavebank`]: frequency-domain waveform parameters, synthesis, decoding, loss.
//! * [`ofdm`]: frame layout, modulator, synchronization and equalizing receiver.
//! * [`channel`]: AWGN, FIR and time-varying impulse-response replay with resampling.
//! * [`grad`]: forward/backward evaluation of the loss over the full link.
//! * [`training`]: optimizers, batching, the training loop and checkpoints.
//! * [`baselines`]: token bits over BPSK/QPSK with optional LDPC, and SoftCast-lite.
//! * [`metrics`]: accuracy, semantic distance, BER, PSNR/SSIM, fps accounting.

pub mod baselines;
pub mod channel;
pub mod codebook;
mod dsp;
pub mod error;
pub mod grad;
mod io;
pub mod link;
pub mod metrics;
pub mod ofdm;
pub mod training;
pub mod wavebank;

pub use error::{Error, Result};

/// Complex sample type used throughout the signal chain.
pub type Cplx = num_complex::Complex64;
