//! SoftCast-lite: analog transmission of DCT coefficients with per-chunk
//! power scaling and LLSE decoding.
//!
//! An image is cut into 8x8 blocks and transformed with an orthonormal DCT.
//! Chunk `j` collects coefficient `j` of every block, so there are 64 chunks.
//! Chunk means and variances travel as side information.

use crate::channel::ChannelModel;
use crate::link::{frame_epoch, run_frame, Link};
use crate::metrics::Image;
use crate::{Cplx, Error, Result};

pub const BLOCK: usize = 8;
pub const CHUNKS: usize = BLOCK * BLOCK;
/// Chunks with variance at or below this carry nothing and are never sent.
pub const MIN_CHUNK_VAR: f64 = 1e-12;

/// Side information shared with the receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftcastMeta {
    pub height: usize,
    pub width: usize,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    /// Transmit gain per chunk; zero for chunks not sent.
    pub gains: Vec<f64>,
    /// Chunks sent, in transmission order.
    pub sent: Vec<usize>,
}

impl SoftcastMeta {
    fn blocks(&self) -> usize {
        (self.height / BLOCK) * (self.width / BLOCK)
    }

    /// Complex symbols occupied by the sent chunks.
    pub fn symbols(&self) -> usize {
        (self.sent.len() * self.blocks()).div_ceil(2)
    }
}

fn dct_matrix() -> [[f64; BLOCK]; BLOCK] {
    let mut c = [[0.0; BLOCK]; BLOCK];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0 / BLOCK as f64).sqrt() } else { (2.0 / BLOCK as f64).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / (2 * BLOCK) as f64).cos();
        }
    }
    c
}

/// Coefficients as `chunks[j][block]`.
fn forward(img: &Image) -> Vec<Vec<f64>> {
    let c = dct_matrix();
    let (bh, bw) = (img.height / BLOCK, img.width / BLOCK);
    let mut chunks = vec![vec![0.0; bh * bw]; CHUNKS];
    for by in 0..bh {
        for bx in 0..bw {
            for u in 0..BLOCK {
                for v in 0..BLOCK {
                    let mut s = 0.0;
                    for y in 0..BLOCK {
                        for x in 0..BLOCK {
                            s += c[u][y] * c[v][x] * img.get(by * BLOCK + y, bx * BLOCK + x);
                        }
                    }
                    chunks[u * BLOCK + v][by * bw + bx] = s;
                }
            }
        }
    }
    chunks
}

fn inverse(chunks: &[Vec<f64>], height: usize, width: usize) -> Image {
    let c = dct_matrix();
    let bw = width / BLOCK;
    let mut data = vec![0.0; height * width];
    for by in 0..height / BLOCK {
        for bx in 0..bw {
            let b = by * bw + bx;
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    let mut s = 0.0;
                    for u in 0..BLOCK {
                        for v in 0..BLOCK {
                            s += c[u][y] * c[v][x] * chunks[u * BLOCK + v][b];
                        }
                    }
                    data[(by * BLOCK + y) * width + bx * BLOCK + x] = s;
                }
            }
        }
    }
    Image { height, width, data }
}

/// Encodes `img` into at most `budget` complex symbols, sending the
/// highest-variance chunks that fit. Mean symbol power is 1.
pub fn softcast_encode(img: &Image, budget: usize) -> Result<(Vec<Cplx>, SoftcastMeta)> {
    if !img.height.is_multiple_of(BLOCK) || !img.width.is_multiple_of(BLOCK) || img.height == 0 || img.width == 0 {
        return Err(Error::InvalidParameter(format!(
            "image {}x{} is not a multiple of {BLOCK}x{BLOCK}",
            img.height, img.width
        )));
    }
    let chunks = forward(img);
    let blocks = chunks[0].len();
    let per_chunk = blocks as f64 / 2.0;
    let fit = (2 * budget) / blocks;
    if fit == 0 {
        return Err(Error::InvalidParameter(format!(
            "budget of {budget} symbols is smaller than one chunk ({per_chunk} symbols)"
        )));
    }
    let means: Vec<f64> = chunks.iter().map(|c| c.iter().sum::<f64>() / blocks as f64).collect();
    let vars: Vec<f64> = chunks
        .iter()
        .zip(&means)
        .map(|(c, m)| c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / blocks as f64)
        .collect();
    let mut order: Vec<usize> = (0..CHUNKS).filter(|&j| vars[j] > MIN_CHUNK_VAR).collect();
    order.sort_by(|&a, &b| vars[b].total_cmp(&vars[a]).then(a.cmp(&b)));
    order.truncate(fit);

    let mut gains = vec![0.0; CHUNKS];
    let mut meta = SoftcastMeta {
        height: img.height,
        width: img.width,
        means,
        vars,
        gains: Vec::new(),
        sent: order,
    };
    let n_sym = meta.symbols();
    if !meta.sent.is_empty() {
        // g_j = c * var_j^(-1/4), total energy sum_j blocks * g_j^2 * var_j = n_sym.
        let denom: f64 = meta.sent.iter().map(|&j| blocks as f64 * meta.vars[j].sqrt()).sum();
        let c = (n_sym as f64 / denom).sqrt();
        for &j in &meta.sent {
            gains[j] = c * meta.vars[j].powf(-0.25);
        }
    }
    meta.gains = gains;
    let mut reals: Vec<f64> = Vec::with_capacity(2 * n_sym);
    for &j in &meta.sent {
        reals.extend(chunks[j].iter().map(|v| meta.gains[j] * (v - meta.means[j])));
    }
    reals.resize(2 * n_sym, 0.0);
    let symbols = reals.chunks(2).map(|p| Cplx::new(p[0], p[1])).collect();
    Ok((symbols, meta))
}

/// LLSE reconstruction from symbols seen through AWGN of complex variance
/// `noise_var` (half per real component). Unsent chunks decode to their mean.
pub fn softcast_decode(symbols: &[Cplx], noise_var: f64, meta: &SoftcastMeta) -> Result<Image> {
    if symbols.len() != meta.symbols() {
        return Err(Error::LengthMismatch {
            expected: meta.symbols(),
            actual: symbols.len(),
        });
    }
    let blocks = meta.blocks();
    let reals: Vec<f64> = symbols.iter().flat_map(|s| [s.re, s.im]).collect();
    let half = (noise_var / 2.0).max(0.0);
    let mut chunks: Vec<Vec<f64>> = meta.means.iter().map(|&m| vec![m; blocks]).collect();
    for (slot, &j) in meta.sent.iter().enumerate() {
        let g = meta.gains[j];
        let w = g * meta.vars[j] / (g * g * meta.vars[j] + half);
        for (b, v) in chunks[j].iter_mut().enumerate() {
            *v += w * reals[slot * blocks + b];
        }
    }
    Ok(inverse(&chunks, meta.height, meta.width))
}

/// Sends an image over the OFDM link. The decoder uses the realized noise
/// power divided by the mean estimated channel power as its AWGN variance,
/// so frequency-selective fades are not modeled by the LLSE weights.
pub fn run_softcast(img: &Image, budget: usize, link: &Link, model: &ChannelModel, seed: u64) -> Result<Image> {
    let (symbols, meta) = softcast_encode(img, budget)?;
    let slots = link.spec.data_slots();
    let mut rx = Vec::with_capacity(symbols.len());
    let mut var_sum = 0.0;
    let mut frames = 0;
    for (f, chunk) in symbols.chunks(slots).enumerate() {
        let mut data = chunk.to_vec();
        data.resize(slots, Cplx::new(0.0, 0.0));
        let rec = run_frame(link, model, &data, frame_epoch(seed, f), None)?;
        let n = rec.frozen.noise.len().max(1) as f64;
        let noise = rec.frozen.noise.iter().map(|v| v.norm_sqr()).sum::<f64>() / n;
        let gain = rec.estimate.data.iter().map(|h| h.norm_sqr()).sum::<f64>() / rec.estimate.data.len() as f64;
        var_sum += noise / gain.max(1e-12);
        frames += 1;
        rx.extend_from_slice(&rec.symbols[..chunk.len()]);
    }
    softcast_decode(&rx, var_sum / frames as f64, &meta)
}
