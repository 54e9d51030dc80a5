//! Pilot-aided OFDM framing and the equalizing receiver.
//!
//! A frame is `chirp | Schmidl-Cox preamble | 16 OFDM symbols`, all at complex
//! baseband with one sample per Hz of bandwidth. Every fourth OFDM symbol
//! (indices 0, 4, 8, 12) is a pilot symbol; the remaining twelve carry
//! `12 * 64 = 768` data slots, filled symbol by symbol, subcarrier 0 first.
//! The finished frame is scaled to unit mean power.
//!
//! Receiver: chirp matched filter for timing, preamble half-correlation for
//! carrier offset, CP strip, unitary 64-point DFT, pilot channel estimates
//! linearly interpolated in time, then per-subcarrier zero forcing.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{dft_unitary, idft_unitary, inner};
use crate::{Cplx, Error, Result};

/// Magnitude floor applied to channel estimates before division.
pub const ZF_FLOOR: f64 = 1e-6;

/// Normalized chirp correlation required to declare a frame.
pub const DETECT_THRESHOLD: f64 = 0.3;

/// Framing constants. `Default` is the 8 kHz acoustic profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfdmFrameSpec {
    pub n_sub: usize,
    pub cp_len: usize,
    pub syms_per_frame: usize,
    pub pilot_period: usize,
    pub bandwidth_hz: f64,
    pub chirp_len: usize,
    pub sc_len: usize,
    pub carrier_hz: f64,
}

impl Default for OfdmFrameSpec {
    fn default() -> Self {
        Self {
            n_sub: 64,
            cp_len: 63,
            syms_per_frame: 16,
            pilot_period: 4,
            bandwidth_hz: 8000.0,
            chirp_len: 500,
            sc_len: 128,
            carrier_hz: 14_000.0,
        }
    }
}

impl OfdmFrameSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.n_sub == 0 || self.syms_per_frame == 0 || self.pilot_period == 0 {
            return bad("subcarriers, symbols and pilot period must be positive");
        }
        if self.sc_len != 2 * self.n_sub {
            return bad("preamble length must be twice the subcarrier count");
        }
        if self.cp_len >= self.n_sub + self.cp_len || self.chirp_len < 2 {
            return bad("invalid cyclic prefix or chirp length");
        }
        if !(self.bandwidth_hz > 0.0) {
            return bad("bandwidth must be positive");
        }
        if self.data_symbols() == 0 {
            return bad("frame has no data symbols");
        }
        Ok(())
    }

    pub fn sample_rate(&self) -> f64 {
        self.bandwidth_hz
    }

    pub fn is_pilot(&self, sym: usize) -> bool {
        sym.is_multiple_of(self.pilot_period)
    }

    pub fn pilot_indices(&self) -> Vec<usize> {
        (0..self.syms_per_frame).filter(|&s| self.is_pilot(s)).collect()
    }

    pub fn data_indices(&self) -> Vec<usize> {
        (0..self.syms_per_frame).filter(|&s| !self.is_pilot(s)).collect()
    }

    pub fn data_symbols(&self) -> usize {
        self.syms_per_frame - self.pilot_indices().len()
    }

    /// Data subcarrier slots per frame.
    pub fn data_slots(&self) -> usize {
        self.data_symbols() * self.n_sub
    }

    pub fn symbol_len(&self) -> usize {
        self.n_sub + self.cp_len
    }

    /// Offset of the first OFDM symbol from the frame start.
    pub fn body_offset(&self) -> usize {
        self.chirp_len + self.sc_len
    }

    pub fn frame_len(&self) -> usize {
        self.body_offset() + self.syms_per_frame * self.symbol_len()
    }

    pub fn frame_duration_s(&self) -> f64 {
        self.frame_len() as f64 / self.sample_rate()
    }

    /// Data slots carried per second.
    pub fn data_slot_rate(&self) -> f64 {
        self.data_slots() as f64 / self.frame_duration_s()
    }

    /// Unambiguous carrier-offset range of the half-preamble estimator, Hz.
    pub fn cfo_range_hz(&self) -> f64 {
        self.sample_rate() / (2.0 * self.n_sub as f64)
    }
}

/// Pilot values, preamble half and chirp for one frame layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLayout {
    pub seed: u64,
    /// `pilot_symbols x n_sub` unit-modulus values.
    pub pilots: Vec<Cplx>,
    /// First half of the Schmidl-Cox preamble; the second half repeats it.
    pub preamble_half: Vec<Cplx>,
    pub chirp: Vec<Cplx>,
}

fn qpsk_point(q: u8) -> Cplx {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    Cplx::new(if q & 1 == 0 { h } else { -h }, if q & 2 == 0 { h } else { -h })
}

/// Hann-windowed linear FM sweep across the whole complex band.
pub fn lfm_chirp(len: usize) -> Vec<Cplx> {
    let n = len as f64;
    (0..len)
        .map(|i| {
            let t = i as f64;
            // Instantaneous frequency sweeps -fs/2 .. +fs/2.
            let phase = PI * (-t + t * t / n);
            let w = 0.5 - 0.5 * (2.0 * PI * t / (n - 1.0)).cos();
            Cplx::from_polar(w, phase)
        })
        .collect()
}

impl FrameLayout {
    pub fn new(spec: &OfdmFrameSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_pilot = spec.pilot_indices().len();
        let pilots = (0..n_pilot * spec.n_sub)
            .map(|_| qpsk_point(rng.random_range(0..4)))
            .collect();
        let mut preamble_half: Vec<Cplx> = (0..spec.n_sub)
            .map(|_| qpsk_point(rng.random_range(0..4)))
            .collect();
        idft_unitary(&mut preamble_half);
        Self {
            seed,
            pilots,
            preamble_half,
            chirp: lfm_chirp(spec.chirp_len),
        }
    }

    /// Pilot value on subcarrier `k` of the `p`-th pilot symbol.
    pub fn pilot(&self, spec: &OfdmFrameSpec, p: usize, k: usize) -> Cplx {
        self.pilots[p * spec.n_sub + k]
    }
}

fn check_finite(x: &[Cplx], what: &'static str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// Builds the frame before power normalization. Affine in `data`.
pub fn assemble_frame(spec: &OfdmFrameSpec, layout: &FrameLayout, data: &[Cplx]) -> Result<Vec<Cplx>> {
    if data.len() != spec.data_slots() {
        return Err(Error::LengthMismatch {
            expected: spec.data_slots(),
            actual: data.len(),
        });
    }
    check_finite(data, "data symbols")?;
    let n = spec.n_sub;
    let mut out = Vec::with_capacity(spec.frame_len());
    out.extend_from_slice(&layout.chirp);
    out.extend_from_slice(&layout.preamble_half);
    out.extend_from_slice(&layout.preamble_half);
    let (mut p, mut d) = (0, 0);
    let mut sym = vec![Cplx::new(0.0, 0.0); n];
    for s in 0..spec.syms_per_frame {
        if spec.is_pilot(s) {
            sym.copy_from_slice(&layout.pilots[p * n..(p + 1) * n]);
            p += 1;
        } else {
            sym.copy_from_slice(&data[d * n..(d + 1) * n]);
            d += 1;
        }
        idft_unitary(&mut sym);
        out.extend_from_slice(&sym[n - spec.cp_len..]);
        out.extend_from_slice(&sym);
    }
    Ok(out)
}

/// Cotangent of the data slots given the cotangent of the assembled frame.
pub fn assemble_frame_adjoint(spec: &OfdmFrameSpec, cot: &[Cplx]) -> Vec<Cplx> {
    let n = spec.n_sub;
    let mut out = Vec::with_capacity(spec.data_slots());
    for s in spec.data_indices() {
        let start = spec.body_offset() + s * spec.symbol_len();
        let mut body = cot[start + spec.cp_len..start + spec.cp_len + n].to_vec();
        for (m, c) in cot[start..start + spec.cp_len].iter().enumerate() {
            body[n - spec.cp_len + m] += c;
        }
        dft_unitary(&mut body);
        out.extend(body);
    }
    out
}

/// Scales `x` to unit mean power. Returns the scaled frame and the RMS used.
pub fn normalize_power(x: &[Cplx]) -> (Vec<Cplx>, f64) {
    let rms = crate::dsp::mean_power(x).sqrt();
    if rms == 0.0 {
        return (x.to_vec(), 0.0);
    }
    (x.iter().map(|v| v / rms).collect(), rms)
}

/// Adjoint of [`normalize_power`] at `x`:
/// `g_x = g_y / rms - x * Re<x, g_y> / (N rms^3)`.
pub fn normalize_power_adjoint(x: &[Cplx], rms: f64, g_y: &[Cplx]) -> Vec<Cplx> {
    let n = x.len() as f64;
    let proj = inner(x, g_y).re / (n * rms * rms * rms);
    x.iter().zip(g_y).map(|(xv, g)| g / rms - xv * proj).collect()
}

/// Complete transmitter: assemble, then normalize to unit mean power.
pub fn modulate_frame(spec: &OfdmFrameSpec, layout: &FrameLayout, data: &[Cplx]) -> Result<Vec<Cplx>> {
    Ok(normalize_power(&assemble_frame(spec, layout, data)?).0)
}

/// Normalized chirp correlation at every lag where a whole frame fits.
pub fn chirp_correlation(spec: &OfdmFrameSpec, layout: &FrameLayout, rx: &[Cplx]) -> Vec<f64> {
    let frame = spec.frame_len();
    if rx.len() < frame {
        return Vec::new();
    }
    let c = &layout.chirp;
    let cn = c.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let lags = rx.len() - frame + 1;
    let mut energy: f64 = rx[..c.len()].iter().map(|v| v.norm_sqr()).sum();
    let mut out = Vec::with_capacity(lags);
    for lag in 0..lags {
        if lag > 0 {
            energy += rx[lag + c.len() - 1].norm_sqr() - rx[lag - 1].norm_sqr();
        }
        let e = energy.max(0.0);
        let corr = inner(c, &rx[lag..lag + c.len()]).norm();
        out.push(if e > 1e-300 { (corr / (cn * e.sqrt())).min(1.0) } else { 0.0 });
    }
    out
}

/// Frame start via chirp matched filtering.
///
/// Takes the strongest correlation, then moves back to the earliest local
/// maximum within one cyclic prefix that reaches half the peak, so timing
/// locks to the first strong arrival rather than the strongest one.
pub fn detect_frame(spec: &OfdmFrameSpec, layout: &FrameLayout, rx: &[Cplx]) -> Result<usize> {
    let c = chirp_correlation(spec, layout, rx);
    if c.is_empty() {
        return Err(Error::NoFrameDetected {
            peak: 0.0,
            threshold: DETECT_THRESHOLD,
        });
    }
    let peak_at = c
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > c[best] { i } else { best });
    let peak = c[peak_at];
    if peak < DETECT_THRESHOLD {
        return Err(Error::NoFrameDetected {
            peak,
            threshold: DETECT_THRESHOLD,
        });
    }
    let lo = peak_at.saturating_sub(spec.cp_len);
    for lag in lo..peak_at {
        let left = if lag == 0 { 0.0 } else { c[lag - 1] };
        if c[lag] >= 0.5 * peak && c[lag] >= left && c[lag] >= c[lag + 1] {
            return Ok(lag);
        }
    }
    Ok(peak_at)
}

/// Carrier offset in Hz from a synchronized `2 * n_sub` preamble segment.
///
/// `f = angle(sum conj(r[n]) r[n + N]) * fs / (2 pi N)`: a positive frequency
/// shift applied to the signal yields a positive estimate. Offsets beyond
/// `±fs / (2N)` alias.
pub fn estimate_cfo(spec: &OfdmFrameSpec, preamble_rx: &[Cplx]) -> Result<f64> {
    let n = spec.n_sub;
    if preamble_rx.len() != 2 * n {
        return Err(Error::LengthMismatch {
            expected: 2 * n,
            actual: preamble_rx.len(),
        });
    }
    let acc = inner(&preamble_rx[..n], &preamble_rx[n..]);
    Ok(acc.arg() * spec.sample_rate() / (2.0 * PI * n as f64))
}

fn derotation(spec: &OfdmFrameSpec, cfo_hz: f64, n: usize) -> Cplx {
    Cplx::from_polar(1.0, -2.0 * PI * cfo_hz * n as f64 / spec.sample_rate())
}

/// CFO-derotated, CP-stripped, DFT-domain symbols: `syms_per_frame x n_sub`.
/// Linear in `rx` for a fixed offset and carrier offset.
pub fn frame_grid(spec: &OfdmFrameSpec, rx: &[Cplx], offset: usize, cfo_hz: f64) -> Result<Vec<Cplx>> {
    if offset + spec.frame_len() > rx.len() {
        return Err(Error::LengthMismatch {
            expected: offset + spec.frame_len(),
            actual: rx.len(),
        });
    }
    let n = spec.n_sub;
    let mut grid = Vec::with_capacity(spec.syms_per_frame * n);
    for s in 0..spec.syms_per_frame {
        let rel = spec.body_offset() + s * spec.symbol_len() + spec.cp_len;
        let mut body: Vec<Cplx> = (0..n)
            .map(|i| rx[offset + rel + i] * derotation(spec, cfo_hz, rel + i))
            .collect();
        dft_unitary(&mut body);
        grid.extend(body);
    }
    Ok(grid)
}

/// Adjoint of [`frame_grid`]: spreads a grid cotangent back over a stream of
/// `stream_len` samples.
pub fn frame_grid_adjoint(
    spec: &OfdmFrameSpec,
    grid_cot: &[Cplx],
    offset: usize,
    cfo_hz: f64,
    stream_len: usize,
) -> Vec<Cplx> {
    let n = spec.n_sub;
    let mut out = vec![Cplx::new(0.0, 0.0); stream_len];
    for s in 0..spec.syms_per_frame {
        let rel = spec.body_offset() + s * spec.symbol_len() + spec.cp_len;
        let mut t = grid_cot[s * n..(s + 1) * n].to_vec();
        idft_unitary(&mut t);
        for (i, v) in t.iter().enumerate() {
            out[offset + rel + i] += v * derotation(spec, cfo_hz, rel + i).conj();
        }
    }
    out
}

/// Pilot-derived channel gains.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstimate {
    /// `pilot_symbols x n_sub`, `Y / P` at each pilot symbol.
    pub pilot: Vec<Cplx>,
    /// `data_symbols x n_sub`, interpolated in time.
    pub data: Vec<Cplx>,
}

/// Interpolation weights `(pilot_a, pilot_b, w)` for every data symbol:
/// `H = (1 - w) H[a] + w H[b]`. Data symbols after the last pilot hold it.
pub fn interpolation_weights(spec: &OfdmFrameSpec) -> Vec<(usize, usize, f64)> {
    let pilots = spec.pilot_indices();
    spec.data_indices()
        .into_iter()
        .map(|s| {
            let a = pilots.iter().rposition(|&p| p <= s).unwrap_or(0);
            match pilots.get(a + 1) {
                Some(&pb) if pilots[a] <= s => {
                    let w = (s - pilots[a]) as f64 / (pb - pilots[a]) as f64;
                    (a, a + 1, w)
                }
                _ => (a, a, 0.0),
            }
        })
        .collect()
}

pub fn estimate_channel(spec: &OfdmFrameSpec, layout: &FrameLayout, grid: &[Cplx]) -> Result<ChannelEstimate> {
    let n = spec.n_sub;
    let mut pilot = Vec::with_capacity(spec.pilot_indices().len() * n);
    for (p, s) in spec.pilot_indices().into_iter().enumerate() {
        for k in 0..n {
            let pv = layout.pilot(spec, p, k);
            if pv.norm() < 1e-12 {
                return Err(Error::UnusablePilot(k));
            }
            pilot.push(grid[s * n + k] / pv);
        }
    }
    let mut data = Vec::with_capacity(spec.data_slots());
    for (a, b, w) in interpolation_weights(spec) {
        for k in 0..n {
            data.push(pilot[a * n + k] * (1.0 - w) + pilot[b * n + k] * w);
        }
    }
    Ok(ChannelEstimate { pilot, data })
}

/// Applies the magnitude floor while keeping the phase. Returns whether the
/// floor was active.
pub fn clamp_gain(h: Cplx) -> (Cplx, bool) {
    let m = h.norm();
    if m >= ZF_FLOOR {
        (h, false)
    } else if m > 0.0 {
        (h * (ZF_FLOOR / m), true)
    } else {
        (Cplx::new(ZF_FLOOR, 0.0), true)
    }
}

/// `X = Y / H` per element with `|H|` floored at [`ZF_FLOOR`].
pub fn zf_equalize(y: &[Cplx], h: &[Cplx]) -> Result<Vec<Cplx>> {
    if y.len() != h.len() {
        return Err(Error::LengthMismatch {
            expected: h.len(),
            actual: y.len(),
        });
    }
    Ok(y.iter().zip(h).map(|(yv, hv)| yv / clamp_gain(*hv).0).collect())
}

/// Data-symbol rows of a full grid, in transmit order.
pub fn data_rows(spec: &OfdmFrameSpec, grid: &[Cplx]) -> Vec<Cplx> {
    let n = spec.n_sub;
    spec.data_indices()
        .into_iter()
        .flat_map(|s| grid[s * n..(s + 1) * n].iter().copied())
        .collect()
}

/// Receiver output with the intermediates the gradient pass needs.
#[derive(Debug, Clone)]
pub struct Demodulated {
    pub grid: Vec<Cplx>,
    pub estimate: ChannelEstimate,
    /// Equalized data slots in transmit order.
    pub symbols: Vec<Cplx>,
}

pub fn demodulate_detailed(
    spec: &OfdmFrameSpec,
    layout: &FrameLayout,
    rx: &[Cplx],
    offset: usize,
    cfo_hz: f64,
) -> Result<Demodulated> {
    let grid = frame_grid(spec, rx, offset, cfo_hz)?;
    let estimate = estimate_channel(spec, layout, &grid)?;
    let symbols = zf_equalize(&data_rows(spec, &grid), &estimate.data)?;
    Ok(Demodulated {
        grid,
        estimate,
        symbols,
    })
}

/// Equalized data symbols of the frame starting at `offset`.
pub fn demodulate_frame(
    spec: &OfdmFrameSpec,
    layout: &FrameLayout,
    rx: &[Cplx],
    offset: usize,
    cfo_hz: f64,
) -> Result<Vec<Cplx>> {
    Ok(demodulate_detailed(spec, layout, rx, offset, cfo_hz)?.symbols)
}

/// Timing, carrier offset and demodulation in one call.
pub fn receive_frame(spec: &OfdmFrameSpec, layout: &FrameLayout, rx: &[Cplx]) -> Result<(usize, f64, Demodulated)> {
    let offset = detect_frame(spec, layout, rx)?;
    let pre = offset + spec.chirp_len;
    let cfo = estimate_cfo(spec, &rx[pre..pre + spec.sc_len])?;
    let demod = demodulate_detailed(spec, layout, rx, offset, cfo)?;
    Ok((offset, cfo, demod))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn random_data(spec: &OfdmFrameSpec, seed: u64) -> Vec<Cplx> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        (0..spec.data_slots())
            .map(|_| Cplx::new(nd.sample(&mut rng), nd.sample(&mut rng)))
            .collect()
    }

    fn shift(x: &[Cplx], hz: f64, fs: f64) -> Vec<Cplx> {
        x.iter()
            .enumerate()
            .map(|(n, v)| v * Cplx::from_polar(1.0, 2.0 * PI * hz * n as f64 / fs))
            .collect()
    }

    fn fir(x: &[Cplx], taps: &[Cplx]) -> Vec<Cplx> {
        (0..x.len())
            .map(|n| (0..taps.len()).filter(|&m| m <= n).map(|m| taps[m] * x[n - m]).sum())
            .collect()
    }

    #[test]
    fn frame_arithmetic() {
        let spec = OfdmFrameSpec::default();
        assert_eq!(spec.data_symbols(), 12);
        assert_eq!(spec.data_slots(), 768);
        assert_eq!(spec.frame_len(), 2660);
        assert_eq!(spec.pilot_indices(), vec![0, 4, 8, 12]);
        assert!((spec.data_slot_rate() - 2309.77).abs() < 0.01);
        assert!((spec.frame_duration_s() - 0.3325).abs() < 1e-12);
        spec.validate().unwrap();
    }

    #[test]
    fn modulated_frame_has_unit_power() {
        let spec = OfdmFrameSpec::default();
        let layout = FrameLayout::new(&spec, 1);
        let tx = modulate_frame(&spec, &layout, &random_data(&spec, 2)).unwrap();
        assert_eq!(tx.len(), 2660);
        assert!((crate::dsp::mean_power(&tx) - 1.0).abs() < 1e-9);
        assert!(modulate_frame(&spec, &layout, &[Cplx::new(0.0, 0.0); 10]).is_err());
        let mut bad = random_data(&spec, 2);
        bad[5] = Cplx::new(f64::INFINITY, 0.0);
        assert!(modulate_frame(&spec, &layout, &bad).is_err());
    }

    #[test]
    fn zero_data_keeps_pilots_only() {
        let spec = OfdmFrameSpec::default();
        let layout = FrameLayout::new(&spec, 3);
        let zeros = vec![Cplx::new(0.0, 0.0); 768];
        let tx = modulate_frame(&spec, &layout, &zeros).unwrap();
        for s in 0..16 {
            let start = spec.body_offset() + s * spec.symbol_len();
            let e: f64 = tx[start..start + spec.symbol_len()].iter().map(|v| v.norm_sqr()).sum();
            if spec.is_pilot(s) {
                assert!(e > 1.0);
            } else {
                assert_eq!(e, 0.0);
            }
        }
        let pre: f64 = tx[500..628].iter().map(|v| v.norm_sqr()).sum();
        assert!(pre > 1.0);
    }

    #[test]
    fn loopback_identity() {
        let spec = OfdmFrameSpec::default();
        for seed in 0..4 {
            let layout = FrameLayout::new(&spec, seed);
            let x = random_data(&spec, seed + 10);
            let tx = modulate_frame(&spec, &layout, &x).unwrap();
            let (off, cfo, d) = receive_frame(&spec, &layout, &tx).unwrap();
            assert_eq!(off, 0);
            assert!(cfo.abs() < 1e-6 * spec.sample_rate());
            for (a, b) in d.symbols.iter().zip(&x) {
                assert!((a - b).norm() <= 1e-6 * b.norm().max(1.0));
            }
        }
    }

    #[test]
    fn detect_embedded_frame_and_reject_noise() {
        let spec = OfdmFrameSpec::default();
        let layout = FrameLayout::new(&spec, 5);
        let tx = modulate_frame(&spec, &layout, &random_data(&spec, 6)).unwrap();
        let mut rx = vec![Cplx::new(0.0, 0.0); 1234];
        rx.extend_from_slice(&tx);
        rx.extend(vec![Cplx::new(0.0, 0.0); 300]);
        assert_eq!(detect_frame(&spec, &layout, &rx).unwrap(), 1234);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let noise: Vec<Cplx> = (0..6000)
            .map(|_| Cplx::new(nd.sample(&mut rng), nd.sample(&mut rng)))
            .collect();
        assert!(matches!(
            detect_frame(&spec, &layout, &noise),
            Err(Error::NoFrameDetected { .. })
        ));
        assert!(detect_frame(&spec, &layout, &tx[..100]).is_err());
    }

    #[test]
    fn detection_under_awgn() {
        let spec = OfdmFrameSpec::default();
        let layout = FrameLayout::new(&spec, 7);
        let tx = modulate_frame(&spec, &layout, &random_data(&spec, 8)).unwrap();
        let sigma = (0.1f64 / 2.0).sqrt(); // 10 dB against unit power
        let nd = Normal::new(0.0, sigma).unwrap();
        let mut hits = 0;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let mut rx: Vec<Cplx> = (0..400).map(|_| Cplx::new(0.0, 0.0)).collect();
            rx.extend_from_slice(&tx);
            rx.extend(vec![Cplx::new(0.0, 0.0); 200]);
            for v in rx.iter_mut() {
                *v += Cplx::new(nd.sample(&mut rng), nd.sample(&mut rng));
            }
            let off = detect_frame(&spec, &layout, &rx).unwrap();
            if (off as i64 - 400).abs() <= 2 {
                hits += 1;
            }
        }
        assert!(hits >= 99, "{hits}");
    }

    #[test]
    fn cfo_estimation() {
        let spec = OfdmFrameSpec::default();
        let layout = FrameLayout::new(&spec, 2);
        let tx = modulate_frame(&spec, &layout, &random_data(&spec, 3)).unwrap();
        let f0 = estimate_cfo(&spec, &tx[500..628]).unwrap();
        assert!(f0.abs() < 1e-6 * spec.sample_rate());
        let shifted = shift(&tx, 20.0, spec.sample_rate());
        let f = estimate_cfo(&spec, &shifted[500..628]).unwrap();
        assert!((f - 20.0).abs() < 0.1, "{f}");
        // Beyond +fs/128 the estimate wraps to the negative side.
        let over = spec.cfo_range_hz() + 10.0;
        let shifted = shift(&tx, over, spec.sample_rate());
        let f = estimate_cfo(&spec, &shifted[500..628]).unwrap();
        assert!((f - (over - 2.0 * spec.cfo_range_hz())).abs() < 0.1, "{f}");
        // Derotation restores the data.
        let x = random_data(&spec, 3);
        let shifted = shift(&tx, 20.0, spec.sample_rate());
        let (_, cfo, d) = receive_frame(&spec, &layout, &shifted).unwrap();
        assert!((cfo - 20.0).abs() < 0.1);
        for (a, b) in d.symbols.iter().zip(&x) {
            assert!((a - b).norm() < 1e-6 * b.norm().max(1.0));
        }
    }

    #[test]
    fn channel_estimates() {
        let spec = OfdmFrameSpec::default();
        let layout = FrameLayout::new(&spec, 4);
        let tx = modulate_frame(&spec, &layout, &random_data(&spec, 1)).unwrap();
        // The estimate absorbs the transmit normalization, so compare against
        // the pilot magnitude scale of the flat channel.
        let d = demodulate_detailed(&spec, &layout, &tx, 0, 0.0).unwrap();
        let g = d.estimate.pilot[0];
        for h in d.estimate.pilot.iter().chain(&d.estimate.data) {
            assert!((h - g).norm() < 1e-9);
        }

        let taps = [Cplx::new(0.8, 0.1), Cplx::new(0.0, 0.0), Cplx::new(-0.3, 0.4)];
        let rx = fir(&tx, &taps);
        let d = demodulate_detailed(&spec, &layout, &rx, 0, 0.0).unwrap();
        for k in 0..64 {
            let resp: Cplx = taps
                .iter()
                .enumerate()
                .map(|(m, t)| t * Cplx::from_polar(1.0, -2.0 * PI * (k * m) as f64 / 64.0))
                .sum();
            assert!((d.estimate.pilot[k] / g - resp).norm() < 1e-6);
        }
    }

    #[test]
    fn interpolation_brackets_gain_ramp() {
        let spec = OfdmFrameSpec::default();
        let layout = FrameLayout::new(&spec, 4);
        let tx = modulate_frame(&spec, &layout, &random_data(&spec, 1)).unwrap();
        let rx: Vec<Cplx> = tx
            .iter()
            .enumerate()
            .map(|(n, v)| v * (1.0 + n as f64 / 2660.0))
            .collect();
        let d = demodulate_detailed(&spec, &layout, &rx, 0, 0.0).unwrap();
        for (j, (a, b, _)) in interpolation_weights(&spec).into_iter().enumerate() {
            for k in 0..64 {
                let h = d.estimate.data[j * 64 + k].norm();
                let (ha, hb) = (d.estimate.pilot[a * 64 + k].norm(), d.estimate.pilot[b * 64 + k].norm());
                assert!(h >= ha.min(hb) - 1e-12 && h <= ha.max(hb) + 1e-12);
            }
        }
    }

    #[test]
    fn zero_forcing() {
        let y = vec![Cplx::new(1.0, 2.0), Cplx::new(-0.5, 0.25)];
        assert_eq!(zf_equalize(&y, &[Cplx::new(1.0, 0.0); 2]).unwrap(), y);
        let h = vec![Cplx::new(0.3, -0.7), Cplx::new(2.0, 1.0)];
        let x = vec![Cplx::new(0.1, 0.9), Cplx::new(-1.0, 0.5)];
        let yy: Vec<Cplx> = h.iter().zip(&x).map(|(a, b)| a * b).collect();
        for (a, b) in zf_equalize(&yy, &h).unwrap().iter().zip(&x) {
            assert!((a - b).norm() < 1e-9);
        }
        let fade = [Cplx::new(1e-9, 0.0)];
        let out = zf_equalize(&[Cplx::new(3.0, 4.0)], &fade).unwrap();
        assert!(out[0].is_finite());
        assert!(out[0].norm() <= 5.0 / ZF_FLOOR * (1.0 + 1e-12));
    }

    #[test]
    fn multipath_within_cp_is_clean() {
        let spec = OfdmFrameSpec::default();
        let layout = FrameLayout::new(&spec, 8);
        let x = random_data(&spec, 4);
        let tx = modulate_frame(&spec, &layout, &x).unwrap();
        let taps = [Cplx::new(1.0, 0.0), Cplx::new(0.0, 0.5), Cplx::new(0.2, -0.1)];
        let mut stream = tx.clone();
        stream.extend(vec![Cplx::new(0.0, 0.0); 80]);
        let rx = fir(&stream, &taps);
        let d = demodulate_frame(&spec, &layout, &rx, 0, 0.0).unwrap();
        let err: f64 = d.iter().zip(&x).map(|(a, b)| (a - b).norm_sqr()).sum();
        let sig: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        assert!(10.0 * (err / sig).log10() <= -60.0);
    }

    #[test]
    fn adjoints_are_transposes() {
        let spec = OfdmFrameSpec::default();
        let layout = FrameLayout::new(&spec, 1);
        let zeros = vec![Cplx::new(0.0, 0.0); 768];
        let base = assemble_frame(&spec, &layout, &zeros).unwrap();
        let d = random_data(&spec, 2);
        let lin: Vec<Cplx> = assemble_frame(&spec, &layout, &d)
            .unwrap()
            .iter()
            .zip(&base)
            .map(|(a, b)| a - b)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let c: Vec<Cplx> = (0..2660).map(|_| Cplx::new(nd.sample(&mut rng), nd.sample(&mut rng))).collect();
        let lhs = inner(&c, &lin);
        let rhs = inner(&assemble_frame_adjoint(&spec, &c), &d);
        assert!((lhs - rhs).norm() < 1e-9 * lhs.norm());

        let rx: Vec<Cplx> = (0..3000).map(|_| Cplx::new(nd.sample(&mut rng), nd.sample(&mut rng))).collect();
        let g = frame_grid(&spec, &rx, 17, 13.0).unwrap();
        let gc: Vec<Cplx> = (0..g.len()).map(|_| Cplx::new(nd.sample(&mut rng), nd.sample(&mut rng))).collect();
        let lhs = inner(&gc, &g);
        let rhs = inner(&frame_grid_adjoint(&spec, &gc, 17, 13.0, rx.len()), &rx);
        assert!((lhs - rhs).norm() < 1e-9 * lhs.norm());
    }

    #[test]
    fn normalization_adjoint_matches_differences() {
        let x: Vec<Cplx> = (0..20).map(|i| Cplx::new((i as f64).sin(), (i as f64 * 0.3).cos())).collect();
        let g: Vec<Cplx> = (0..20).map(|i| Cplx::new((i as f64 * 0.7).cos(), 0.2)).collect();
        let (_, rms) = normalize_power(&x);
        let adj = normalize_power_adjoint(&x, rms, &g);
        let f = |x: &[Cplx]| inner(&g, &normalize_power(x).0).re;
        let h = 1e-6;
        for i in [0, 7, 19] {
            for dir in [Cplx::new(1.0, 0.0), Cplx::new(0.0, 1.0)] {
                let mut a = x.clone();
                a[i] += dir * h;
                let mut b = x.clone();
                b[i] -= dir * h;
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                let an = (adj[i].conj() * dir).re;
                assert!((fd - an).abs() < 1e-8, "{fd} {an}");
            }
        }
    }
}
