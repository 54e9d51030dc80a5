//! Reverse-mode gradients of the semantic loss over the whole link.
//!
//! [`forward_loss`] runs transmitter, channel and receiver for a batch of
//! tokens and records a [`DiffTape`]. [`backward`] walks the recorded linear
//! stages in reverse with their exact adjoints, combined with the analytic
//! derivatives of the posterior, cross-entropy and distance.
//!
//! Complex gradients follow one convention throughout: for a real function
//! `f` of complex `z`, the stored gradient is `df/dRe(z) + i df/dIm(z)`. For a
//! complex-linear stage `y = A x` this makes `g_x = A^H g_y`.
//!
//! Stop-gradients: the channel start sample, the noise realization, the frame
//! timing and the carrier-offset estimate. The pilot channel estimate is
//! differentiated unless the link selects [`EstimateGradient::Stop`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::ChannelModel;
use crate::codebook::RelevanceMatrix;
use crate::dsp::dft_unitary;
use crate::link::{frame_epoch, pack_tokens, run_frame, EstimateGradient, FrameRecord, FrozenFrame, Link};
use crate::ofdm::{assemble_frame_adjoint, clamp_gain, frame_grid_adjoint, interpolation_weights, normalize_power_adjoint};
use crate::wavebank::{token_posterior, wavebank_loss, WavebankParams, LOG_CLAMP};
use crate::{Cplx, Error, Result};

/// Added in quadrature to waveform distances on the loss path so the
/// distance stays differentiable at zero.
pub const DISTANCE_SMOOTHING: f64 = 1e-6;

/// Quantities held fixed during differentiation.
pub const STOP_GRADIENTS: &[&str] = &["channel start", "noise", "frame offset", "carrier offset"];

const ZERO: Cplx = Cplx { re: 0.0, im: 0.0 };

/// Gradient of the loss with respect to every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub d_f_real: Vec<f64>,
    pub d_f_imag: Vec<f64>,
    pub d_log_tau: f64,
}

impl GradientSet {
    pub fn zeros(k: usize, l: usize) -> Self {
        Self {
            d_f_real: vec![0.0; k * l],
            d_f_imag: vec![0.0; k * l],
            d_log_tau: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_log_tau.is_finite() && self.d_f_real.iter().chain(&self.d_f_imag).all(|v| v.is_finite())
    }

    /// Accumulates `other * scale`.
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        for (a, b) in self.d_f_real.iter_mut().zip(&other.d_f_real) {
            *a += b * scale;
        }
        for (a, b) in self.d_f_imag.iter_mut().zip(&other.d_f_imag) {
            *a += b * scale;
        }
        self.d_log_tau += other.d_log_tau * scale;
    }

    /// Flat view: real parts, imaginary parts, then log tau.
    pub fn coordinate(&self, i: usize) -> f64 {
        let n = self.d_f_real.len();
        if i < n {
            self.d_f_real[i]
        } else if i < 2 * n {
            self.d_f_imag[i - n]
        } else {
            self.d_log_tau
        }
    }

    pub fn norm(&self) -> f64 {
        (self.d_f_real.iter().chain(&self.d_f_imag).map(|v| v * v).sum::<f64>() + self.d_log_tau.powi(2)).sqrt()
    }
}

struct FrameTape {
    record: FrameRecord,
    /// `(token, first slot)` of every token in this frame.
    tokens: Vec<(usize, usize)>,
    /// Per token: smoothed distances and posterior, `K` each.
    distances: Vec<f64>,
    posteriors: Vec<f64>,
}

/// Primal values of one [`forward_loss`] evaluation.
pub struct DiffTape {
    k: usize,
    l: usize,
    tau: f64,
    waveforms: Vec<Cplx>,
    relevance: Vec<f64>,
    link: Link,
    model: ChannelModel,
    frames: Vec<FrameTape>,
    n_tokens: usize,
    consumed: bool,
}

impl DiffTape {
    pub fn stop_gradients(&self) -> &'static [&'static str] {
        STOP_GRADIENTS
    }

    /// Frozen randomness and receiver decisions, one entry per frame.
    pub fn frozen(&self) -> Vec<FrozenFrame> {
        self.frames.iter().map(|f| f.record.frozen.clone()).collect()
    }

    pub fn frames(&self) -> usize {
        self.frames.len()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

/// Output of [`forward_loss`].
pub struct Evaluation {
    pub loss: f64,
    pub tape: DiffTape,
    /// Nearest-neighbor decisions for every transmitted token.
    pub decoded: Vec<usize>,
}

fn smoothed_distance(r: &[Cplx], w: &[Cplx]) -> f64 {
    (r.iter().zip(w).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() + DISTANCE_SMOOTHING * DISTANCE_SMOOTHING).sqrt()
}

fn evaluate(
    params: &WavebankParams,
    relevance: &RelevanceMatrix,
    tokens: &[usize],
    link: &Link,
    model: &ChannelModel,
    seed: u64,
    frozen: Option<&[FrozenFrame]>,
) -> Result<(f64, DiffTape, Vec<usize>)> {
    let (k, l) = (params.k(), params.l());
    if relevance.k() != k {
        return Err(Error::LengthMismatch {
            expected: k,
            actual: relevance.k(),
        });
    }
    if tokens.is_empty() {
        return Err(Error::InvalidParameter("empty token batch".into()));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= k) {
        return Err(Error::TokenOutOfRange { token: t, k });
    }
    let per = link.tokens_per_frame(l)?;
    let packed = pack_tokens(link, params, tokens)?;
    if let Some(f) = frozen {
        if f.len() != packed.len() {
            return Err(Error::LengthMismatch {
                expected: packed.len(),
                actual: f.len(),
            });
        }
    }
    let table = params.synthesize_all();
    let tau = params.tau();
    let mut frames = Vec::with_capacity(packed.len());
    let mut relevance_rows = Vec::with_capacity(tokens.len() * k);
    let mut decoded = Vec::with_capacity(tokens.len());
    let mut total = 0.0;
    for (f, data) in packed.iter().enumerate() {
        let record = run_frame(link, model, data, frame_epoch(seed, f), frozen.map(|fr| &fr[f]))?;
        let chunk = &tokens[f * per..((f + 1) * per).min(tokens.len())];
        let mut distances = Vec::with_capacity(chunk.len() * k);
        let mut posteriors = Vec::with_capacity(chunk.len() * k);
        let mut toks = Vec::with_capacity(chunk.len());
        for (i, &t) in chunk.iter().enumerate() {
            let r = &record.symbols[i * l..(i + 1) * l];
            let d: Vec<f64> = (0..k).map(|j| smoothed_distance(r, table.row(j))).collect();
            let p = token_posterior(&d, tau);
            total += wavebank_loss(&p, relevance.row(t));
            decoded.push(crate::wavebank::argmin(&d));
            relevance_rows.extend_from_slice(relevance.row(t));
            distances.extend(d);
            posteriors.extend(p);
            toks.push((t, i * l));
        }
        frames.push(FrameTape {
            record,
            tokens: toks,
            distances,
            posteriors,
        });
    }
    let loss = total / tokens.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let tape = DiffTape {
        k,
        l,
        tau,
        waveforms: (0..k).flat_map(|j| table.row(j).iter().copied()).collect(),
        relevance: relevance_rows,
        link: link.clone(),
        model: model.clone(),
        frames,
        n_tokens: tokens.len(),
        consumed: false,
    };
    Ok((loss, tape, decoded))
}

/// Mean per-token semantic cross-entropy over the link, with its tape.
///
/// Tokens are packed `floor(data_slots / L)` per frame; each frame is a
/// separate channel use seeded from `seed` and its index.
pub fn forward_loss(
    params: &WavebankParams,
    relevance: &RelevanceMatrix,
    tokens: &[usize],
    link: &Link,
    model: &ChannelModel,
    seed: u64,
) -> Result<Evaluation> {
    let (loss, tape, decoded) = evaluate(params, relevance, tokens, link, model, seed, None)?;
    Ok(Evaluation { loss, tape, decoded })
}

/// Loss with every stop-gradient quantity pinned to `frozen`.
pub fn forward_loss_frozen(
    params: &WavebankParams,
    relevance: &RelevanceMatrix,
    tokens: &[usize],
    link: &Link,
    model: &ChannelModel,
    seed: u64,
    frozen: &[FrozenFrame],
) -> Result<f64> {
    Ok(evaluate(params, relevance, tokens, link, model, seed, Some(frozen))?.0)
}

pub fn backward(tape: &mut DiffTape) -> Result<GradientSet> {
    backward_impl(tape, false)
}

/// Backward pass with a deliberately wrong power-normalization adjoint (the
/// projection term is dropped). Exists only as a negative control for
/// gradient checking.
pub fn corrupted_backward(tape: &mut DiffTape) -> Result<GradientSet> {
    backward_impl(tape, true)
}

fn backward_impl(tape: &mut DiffTape, corrupt: bool) -> Result<GradientSet> {
    if tape.consumed {
        return Err(Error::TapeConsumed);
    }
    tape.consumed = true;
    let (k, l, tau) = (tape.k, tape.l, tape.tau);
    let spec = &tape.link.spec;
    let n = spec.n_sub;
    let scale = 1.0 / tape.n_tokens as f64;
    let through = tape.link.estimate_gradient == EstimateGradient::Through;
    let bb = tape.link.baseband();
    let mut g_w = vec![ZERO; k * l];
    let mut g_log_tau = 0.0;
    let mut token_base = 0;

    for ft in &tape.frames {
        let rec = &ft.record;
        let mut g_sym = vec![ZERO; spec.data_slots()];
        for (i, &(_, slot)) in ft.tokens.iter().enumerate() {
            let row = &tape.relevance[(token_base + i) * k..(token_base + i + 1) * k];
            let d = &ft.distances[i * k..(i + 1) * k];
            let p = &ft.posteriors[i * k..(i + 1) * k];
            // Terms whose probability hit the log clamp are constant.
            let live: Vec<f64> = row.iter().zip(p).map(|(&r, &pv)| if pv >= LOG_CLAMP { r } else { 0.0 }).collect();
            let s: f64 = live.iter().sum();
            if s == 0.0 {
                continue;
            }
            let pd: f64 = p.iter().zip(d).map(|(a, b)| a * b).sum();
            let rd: f64 = live.iter().zip(d).map(|(a, b)| a * b).sum();
            g_log_tau += scale * (s * pd - rd) / tau;
            let r = &rec.symbols[slot..slot + l];
            for j in 0..k {
                let c = scale * (live[j] - s * p[j]) / tau;
                if c == 0.0 {
                    continue;
                }
                let w = &tape.waveforms[j * l..(j + 1) * l];
                for m in 0..l {
                    let u = (r[m] - w[m]) * (c / d[j]);
                    g_sym[slot + m] += u;
                    g_w[j * l + m] -= u;
                }
            }
        }

        // Zero-forcing: X = Y / H.
        let data_idx = spec.data_indices();
        let pilot_idx = spec.pilot_indices();
        let mut g_grid = vec![ZERO; spec.syms_per_frame * n];
        let mut g_h_data = vec![ZERO; spec.data_slots()];
        for (di, &s) in data_idx.iter().enumerate() {
            for kk in 0..n {
                let slot = di * n + kk;
                let g = g_sym[slot];
                if g == ZERO {
                    continue;
                }
                let (h, clamped) = clamp_gain(rec.estimate.data[slot]);
                g_grid[s * n + kk] += g * (1.0 / h).conj();
                if through && !clamped {
                    g_h_data[slot] = -g * (rec.symbols[slot] / h).conj();
                }
            }
        }
        if through {
            let mut g_pilot = vec![ZERO; pilot_idx.len() * n];
            for (di, (a, b, w)) in interpolation_weights(spec).into_iter().enumerate() {
                for kk in 0..n {
                    let g = g_h_data[di * n + kk];
                    g_pilot[a * n + kk] += g * (1.0 - w);
                    g_pilot[b * n + kk] += g * w;
                }
            }
            for (pi, &s) in pilot_idx.iter().enumerate() {
                for kk in 0..n {
                    let pv = tape.link.layout.pilot(spec, pi, kk);
                    g_grid[s * n + kk] += g_pilot[pi * n + kk] * (1.0 / pv).conj();
                }
            }
        }

        let fr = &rec.frozen;
        let g_rx = frame_grid_adjoint(spec, &g_grid, fr.offset, fr.cfo_hz, rec.rx.len());
        let g_stream = tape.model.propagate_adjoint(&g_rx, bb, fr.start)?;
        let guard = tape.link.guard;
        let g_frame = &g_stream[guard..guard + spec.frame_len()];
        let g_raw = if corrupt {
            g_frame.iter().map(|g| g / rec.rms).collect()
        } else {
            normalize_power_adjoint(&rec.raw, rec.rms, g_frame)
        };
        let g_data = assemble_frame_adjoint(spec, &g_raw);
        for &(t, slot) in &ft.tokens {
            for m in 0..l {
                g_w[t * l + m] += g_data[slot + m];
            }
        }
        token_base += ft.tokens.len();
    }

    let mut out = GradientSet::zeros(k, l);
    for j in 0..k {
        let mut row = g_w[j * l..(j + 1) * l].to_vec();
        dft_unitary(&mut row);
        for (m, v) in row.iter().enumerate() {
            out.d_f_real[j * l + m] = v.re;
            out.d_f_imag[j * l + m] = v.im;
        }
    }
    out.d_log_tau = g_log_tau;
    if !out.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(out)
}

/// Settings for [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    /// Number of `F` coordinates sampled (all of them if fewer exist).
    pub coordinates: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            coordinates: 64,
            step: 1e-4,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    /// Flat index: real parts, then imaginary parts, then log tau last.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|a - n| / max(|a|, |n|, abs_tol / rel_tol)`.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub checks: Vec<CoordinateCheck>,
    pub max_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn coordinate_name(&self, index: usize, k: usize, l: usize) -> String {
        let n = k * l;
        if index < n {
            format!("F_real[{}][{}]", index / l, index % l)
        } else if index < 2 * n {
            format!("F_imag[{}][{}]", (index - n) / l, (index - n) % l)
        } else {
            "log_tau".into()
        }
    }
}

fn perturbed(params: &WavebankParams, index: usize, delta: f64) -> WavebankParams {
    let mut p = params.clone();
    let n = p.k() * p.l();
    let (re, im, lt) = p.parts_mut();
    if index < n {
        re[index] += delta;
    } else if index < 2 * n {
        im[index - n] += delta;
    } else {
        *lt += delta;
    }
    p
}

/// Compares `backward_fn` against central finite differences of the loss
/// with all stop-gradient quantities frozen.
pub fn check_gradients_with(
    params: &WavebankParams,
    relevance: &RelevanceMatrix,
    tokens: &[usize],
    link: &Link,
    model: &ChannelModel,
    seed: u64,
    cfg: &GradCheckConfig,
    backward_fn: impl Fn(&mut DiffTape) -> Result<GradientSet>,
) -> Result<GradCheckReport> {
    let mut eval = forward_loss(params, relevance, tokens, link, model, seed)?;
    let frozen = eval.tape.frozen();
    let grads = backward_fn(&mut eval.tape)?;
    let n = params.k() * params.l();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let count = cfg.coordinates.min(2 * n);
    let mut indices: Vec<usize> = sample(&mut rng, 2 * n, count).into_vec();
    indices.sort_unstable();
    indices.push(2 * n);
    let floor = cfg.abs_tol / cfg.rel_tol;
    let mut checks = Vec::with_capacity(indices.len());
    for index in indices {
        let lp = forward_loss_frozen(&perturbed(params, index, cfg.step), relevance, tokens, link, model, seed, &frozen)?;
        let lm = forward_loss_frozen(&perturbed(params, index, -cfg.step), relevance, tokens, link, model, seed, &frozen)?;
        let numeric = (lp - lm) / (2.0 * cfg.step);
        let analytic = grads.coordinate(index);
        let error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        checks.push(CoordinateCheck {
            index,
            analytic,
            numeric,
            error,
        });
    }
    let max_error = checks.iter().map(|c| c.error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        loss: eval.loss,
        checks,
        max_error,
        passed: max_error <= cfg.rel_tol,
    })
}

pub fn check_gradients(
    params: &WavebankParams,
    relevance: &RelevanceMatrix,
    tokens: &[usize],
    link: &Link,
    model: &ChannelModel,
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    check_gradients_with(params, relevance, tokens, link, model, seed, cfg, backward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Codebook;
    use crate::ofdm::OfdmFrameSpec;
    use crate::wavebank::{init_wavebank, InitScheme};

    fn fixture(k: usize, l: usize) -> (WavebankParams, RelevanceMatrix, Vec<usize>, Link) {
        let cb = Codebook::planted_clusters(k, 8, 4, 0.3, 11).unwrap();
        let r = RelevanceMatrix::from_codebook(&cb).unwrap();
        let mut p = init_wavebank(k, l, 5, InitScheme::Gaussian).unwrap();
        *p.parts_mut().2 = 0.4f64.ln();
        let link = Link::new(OfdmFrameSpec::default(), 3).unwrap();
        let tokens = (0..link.tokens_per_frame(l).unwrap()).map(|i| (i * 7) % k).collect();
        (p, r, tokens, link)
    }

    #[test]
    fn ideal_channel_matches_finite_differences() {
        let (p, r, tokens, link) = fixture(4, 4);
        let cfg = GradCheckConfig {
            coordinates: 32,
            ..Default::default()
        };
        let rep = check_gradients(&p, &r, &tokens, &link, &ChannelModel::ideal(), 1, &cfg).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.checks.len(), 33);
    }

    #[test]
    fn stop_gradient_estimate_also_checks() {
        let (p, r, tokens, mut link) = fixture(4, 4);
        link.estimate_gradient = EstimateGradient::Stop;
        let model = ChannelModel::fir(vec![Cplx::new(1.0, 0.0), Cplx::new(0.3, -0.2)], 20.0, 4);
        let rep = check_gradients(&p, &r, &tokens, &link, &model, 1, &GradCheckConfig::default()).unwrap();
        assert!(rep.passed, "{}", rep.max_error);
    }

    #[test]
    fn corrupted_adjoint_is_caught() {
        let (p, r, tokens, link) = fixture(4, 4);
        let model = ChannelModel::fir(vec![Cplx::new(1.0, 0.0), Cplx::new(0.3, -0.2)], 20.0, 4);
        let rep = check_gradients_with(&p, &r, &tokens, &link, &model, 1, &GradCheckConfig::default(), corrupted_backward)
            .unwrap();
        assert!(!rep.passed);
    }

    #[test]
    fn zero_relevance_row_gives_zero_gradient() {
        let (p, _, tokens, link) = fixture(4, 4);
        let r = RelevanceMatrix::from_raw(crate::codebook::SquareMatrix::from_vec(4, vec![0.0; 16]).unwrap());
        let mut e = forward_loss(&p, &r, &tokens, &link, &ChannelModel::awgn(10.0, 1), 2).unwrap();
        assert_eq!(e.loss, 0.0);
        let g = backward(&mut e.tape).unwrap();
        assert_eq!(g, GradientSet::zeros(4, 4));
    }

    #[test]
    fn tape_is_single_use_and_deterministic() {
        let (p, r, tokens, link) = fixture(8, 8);
        let model = ChannelModel::awgn(5.0, 9);
        let mut a = forward_loss(&p, &r, &tokens, &link, &model, 3).unwrap();
        let b = forward_loss(&p, &r, &tokens, &link, &model, 3).unwrap();
        assert_eq!(a.loss, b.loss);
        assert!(a.loss >= 0.0);
        backward(&mut a.tape).unwrap();
        assert!(matches!(backward(&mut a.tape), Err(Error::TapeConsumed)));
    }

    #[test]
    fn analytic_minimum_is_reached_and_stationary() {
        // Four waveforms at equal mutual distance D with off-diagonal
        // relevance rho: the posterior p_i ∝ R_i is attainable with
        // tau = D / -ln(rho), and the loss equals the cross-entropy floor.
        let (k, l) = (4, 4);
        let rho: f64 = 0.5;
        let dist = 10.0;
        let side = dist / 2f64.sqrt();
        let mut re = vec![0.0; k * l];
        for j in 0..k {
            re[j * l + j] = side;
        }
        // Time-domain simplex corners; convert to the spectral parameters.
        let mut f_re = vec![0.0; k * l];
        let mut f_im = vec![0.0; k * l];
        for j in 0..k {
            let mut w: Vec<Cplx> = re[j * l..(j + 1) * l].iter().map(|&v| Cplx::new(v, 0.0)).collect();
            dft_unitary(&mut w);
            for m in 0..l {
                f_re[j * l + m] = w[m].re;
                f_im[j * l + m] = w[m].im;
            }
        }
        let tau = dist / -rho.ln();
        let p = WavebankParams::new(k, l, f_re, f_im, tau).unwrap();
        let mut rel = vec![rho; k * k];
        for j in 0..k {
            rel[j * k + j] = 1.0;
        }
        let r = RelevanceMatrix::from_raw(crate::codebook::SquareMatrix::from_vec(k, rel).unwrap());
        let link = Link::new(OfdmFrameSpec::default(), 3).unwrap();
        let tokens: Vec<usize> = (0..192).map(|i| i % k).collect();
        let mut e = forward_loss(&p, &r, &tokens, &link, &ChannelModel::ideal(), 1).unwrap();
        let s = 1.0 + 3.0 * rho;
        let floor = -(1.0 / s).ln() - 3.0 * rho * (rho / s).ln();
        assert!((e.loss - floor).abs() < 1e-6, "{} vs {floor}", e.loss);
        let g = backward(&mut e.tape).unwrap();
        assert!(g.norm() < 1e-6, "{}", g.norm());
    }
}
