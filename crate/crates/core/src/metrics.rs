//! Evaluation metrics and throughput accounting.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use crate::baselines::Modulation;
use crate::codebook::Codebook;
use crate::io::write_file;
use crate::ofdm::OfdmFrameSpec;
use crate::{Error, Result};

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { expected: a, actual: b });
    }
    Ok(())
}

/// Fraction of positions where the decoded token equals the sent one.
pub fn token_accuracy(sent: &[usize], received: &[usize]) -> Result<f64> {
    check_len(sent.len(), received.len())?;
    if sent.is_empty() {
        return Err(Error::InvalidParameter("empty token sequence".into()));
    }
    let hits = sent.iter().zip(received).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / sent.len() as f64)
}

/// Mean codebook distance between sent and received tokens.
pub fn semantic_l2(cb: &Codebook, sent: &[usize], received: &[usize]) -> Result<f64> {
    check_len(sent.len(), received.len())?;
    if sent.is_empty() {
        return Err(Error::InvalidParameter("empty token sequence".into()));
    }
    let mut total = 0.0;
    for (&a, &b) in sent.iter().zip(received) {
        for t in [a, b] {
            if t >= cb.k() {
                return Err(Error::TokenOutOfRange { token: t, k: cb.k() });
            }
        }
        total += cb.distance(a, b);
    }
    Ok(total / sent.len() as f64)
}

pub fn bit_error_rate(sent: &[u8], received: &[u8]) -> Result<f64> {
    check_len(sent.len(), received.len())?;
    if sent.is_empty() {
        return Ok(0.0);
    }
    let errors = sent.iter().zip(received).filter(|(a, b)| a != b).count();
    Ok(errors as f64 / sent.len() as f64)
}

// ---------------------------------------------------------------------------
// Throughput

/// Channel resources one token consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TokenCost {
    /// Learned waveform of `l` data symbols.
    Wave { l: usize },
    /// Coded bits per token (may be fractional: `bits / rate`).
    Digital { bits: f64, modulation: Modulation },
}

impl TokenCost {
    pub fn slots(self) -> f64 {
        match self {
            TokenCost::Wave { l } => l as f64,
            TokenCost::Digital { bits, modulation } => bits / modulation.bits_per_symbol() as f64,
        }
    }
}

/// Video frames per second the link sustains: data slots per second divided
/// by the slots per video frame.
pub fn fps_equivalent(spec: &OfdmFrameSpec, cost: TokenCost, tokens_per_frame: usize) -> Result<f64> {
    let slots = cost.slots();
    if !(slots > 0.0) || tokens_per_frame == 0 {
        return Err(Error::InvalidParameter("token cost and tokens per frame must be positive".into()));
    }
    Ok(spec.data_slot_rate() / (slots * tokens_per_frame as f64))
}

/// One row of the throughput equivalence table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputRow {
    pub config: String,
    pub fps: f64,
    /// Coded bits per token over BPSK; `None` for the waveform-only row.
    pub bpsk_bits: Option<usize>,
    pub qpsk_symbols: Option<usize>,
    pub l_bpsk: usize,
    pub l_qpsk: usize,
}

/// Equivalence between digital configurations and waveform lengths for a
/// `k`-token codebook: the real-time row (`target_fps`), uncoded, and one
/// row per code rate. Waveform lengths are the largest `L` that keeps pace
/// with the digital configuration; the QPSK columns halve the slot costs.
pub fn throughput_table(
    spec: &OfdmFrameSpec,
    k: usize,
    tokens_per_frame: usize,
    target_fps: f64,
    rates: &[f64],
) -> Result<Vec<ThroughputRow>> {
    let bits = crate::baselines::bits_per_token(k)? as f64;
    let cap = spec.data_slot_rate() / tokens_per_frame as f64;
    let half = |n: usize| n.div_ceil(2);
    let mut rows = Vec::new();
    let l_rt = (cap / target_fps).floor() as usize;
    rows.push(ThroughputRow {
        config: "real-time".into(),
        fps: fps_equivalent(spec, TokenCost::Wave { l: l_rt }, tokens_per_frame)?,
        bpsk_bits: None,
        qpsk_symbols: None,
        l_bpsk: l_rt,
        l_qpsk: half(l_rt),
    });
    let mut push = |config: String, coded: f64| -> Result<()> {
        let fps = fps_equivalent(
            spec,
            TokenCost::Digital {
                bits: coded,
                modulation: Modulation::Bpsk,
            },
            tokens_per_frame,
        )?;
        let n_bits = coded.round() as usize;
        let l = (cap / fps + 1e-9).floor() as usize;
        rows.push(ThroughputRow {
            config,
            fps,
            bpsk_bits: Some(n_bits),
            qpsk_symbols: Some(half(n_bits)),
            l_bpsk: l,
            l_qpsk: half(l),
        });
        Ok(())
    };
    push("no-fec".into(), bits)?;
    for &r in rates {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidParameter(format!("code rate {r} outside (0, 1]")));
        }
        push(format!("ldpc-r{r}"), bits / r)?;
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Images

/// Single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_len(height * width, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(Self { height, width, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    fn same_shape(&self, other: &Image) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::InvalidParameter(format!(
                "image shapes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// PSNR in dB; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    a.same_shape(b)?;
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter("peak must be positive".into()));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_RADIUS: usize = 5;

/// Mean SSIM over all positions where the 11x11 Gaussian window (sigma 1.5)
/// fits inside the image, with `K1 = 0.01`, `K2 = 0.03` and population
/// statistics. `data_range` is the dynamic range of the pixel values.
pub fn ssim(a: &Image, b: &Image, data_range: f64) -> Result<f64> {
    a.same_shape(b)?;
    let r = SSIM_RADIUS;
    let win = 2 * r + 1;
    if a.height < win || a.width < win {
        return Err(Error::InvalidParameter(format!("SSIM needs images of at least {win}x{win}")));
    }
    let g: Vec<f64> = (0..win)
        .map(|i| {
            let x = i as f64 - r as f64;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let gs: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / gs).collect();
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let (h, w) = (a.height - 2 * r, a.width - 2 * r);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, gy) in g.iter().enumerate() {
                for (dx, gx) in g.iter().enumerate() {
                    let wgt = gy * gx;
                    let va = a.get(y + dy, x + dx);
                    let vb = b.get(y + dy, x + dx);
                    ma += wgt * va;
                    mb += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * va * vb;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (h * w) as f64)
}

// ---------------------------------------------------------------------------
// Records

pub const METRICS_SCHEMA: &str = "# semwave-metrics v1";

/// One evaluation trial of one system on one channel at one SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub channel: String,
    pub snr_db: f64,
    pub system: String,
    pub seed: u64,
    /// Token fields are empty for the analog image system.
    pub token_accuracy: Option<f64>,
    pub semantic_l2: Option<f64>,
    pub ber: Option<f64>,
    pub fps_equivalent: f64,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub scene: Option<String>,
}

/// Mean and population standard deviation of a group of trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub channel: String,
    pub snr_db: f64,
    pub system: String,
    pub trials: usize,
    pub token_accuracy_mean: Option<f64>,
    pub token_accuracy_std: Option<f64>,
    pub semantic_l2_mean: Option<f64>,
    pub semantic_l2_std: Option<f64>,
    pub ber_mean: Option<f64>,
    pub ber_std: Option<f64>,
    pub psnr_db_mean: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub fps_equivalent: f64,
}

/// Mean and std of a column, if every record has it.
fn column(records: &[MetricRecord], f: impl Fn(&MetricRecord) -> Option<f64>) -> (Option<f64>, Option<f64>) {
    let Some(v) = records.iter().map(&f).collect::<Option<Vec<f64>>>() else {
        return (None, None);
    };
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (Some(m), Some(var.sqrt()))
}

/// Aggregates trials sharing channel, SNR and system (taken from the first).
pub fn aggregate(records: &[MetricRecord]) -> Result<AggregateRecord> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidParameter("no trials to aggregate".into()))?;
    let (am, asd) = column(records, |r| r.token_accuracy);
    let (sm, ssd) = column(records, |r| r.semantic_l2);
    let (bm, bsd) = column(records, |r| r.ber);
    Ok(AggregateRecord {
        channel: first.channel.clone(),
        snr_db: first.snr_db,
        system: first.system.clone(),
        trials: records.len(),
        token_accuracy_mean: am,
        token_accuracy_std: asd,
        semantic_l2_mean: sm,
        semantic_l2_std: ssd,
        ber_mean: bm,
        ber_std: bsd,
        psnr_db_mean: column(records, |r| r.psnr_db).0,
        ssim_mean: column(records, |r| r.ssim).0,
        fps_equivalent: first.fps_equivalent,
    })
}

/// CSV text with the schema line first.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidParameter(format!("csv: {e}")))?;
    }
    let body = w.into_inner().map_err(|e| Error::InvalidParameter(format!("csv: {e}")))?;
    Ok(format!("{METRICS_SCHEMA}\n{}", String::from_utf8(body).expect("csv output is utf-8")))
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    write_file(path.as_ref(), to_csv(rows)?.as_bytes())
}

/// One JSON object per line, schema line first.
pub fn write_json_lines<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{METRICS_SCHEMA}").unwrap();
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::InvalidParameter(format!("json: {e}")))?;
        out.push(b'\n');
    }
    write_file(path.as_ref(), &out)
}

/// Parses CSV produced by [`write_csv`].
pub fn read_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    let body = text
        .strip_prefix(METRICS_SCHEMA)
        .ok_or_else(|| Error::format(0, "missing metrics schema line"))?;
    csv::Reader::from_reader(body.trim_start_matches('\n').as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::InvalidParameter(format!("csv: {e}")))
}
