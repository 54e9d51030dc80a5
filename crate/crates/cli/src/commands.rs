//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semwave::baselines::softcast::run_softcast;
use semwave::baselines::{bits_per_token, run_digital_pipeline, Fec, Modulation};
use semwave::channel::{derive_seed, ChannelModel};
use semwave::codebook::Codebook;
use semwave::grad::{backward, check_gradients_with, corrupted_backward, GradCheckConfig};
use semwave::link::{pack_tokens, transmit_packed, Link};
use semwave::metrics::{
    aggregate, fps_equivalent, psnr, semantic_l2, ssim, throughput_table, token_accuracy, write_csv, AggregateRecord,
    Image, MetricRecord, TokenCost,
};
use semwave::training::{train_from, write_loss_csv, CheckpointDir, TrainState, TOKENS_PER_FRAME};
use semwave::wavebank::WavebankParams;

use crate::config::{init_wavebank_from, ExperimentConfig, Issue, System};
use crate::pool::run_indexed;

/// Failure classes, mapped to process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error:\n{}", format_issues(.0))]
    Config(Vec<Issue>),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

fn format_issues(issues: &[Issue]) -> String {
    issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n")
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<Vec<Issue>> for CliError {
    fn from(v: Vec<Issue>) -> Self {
        CliError::Config(v)
    }
}

impl From<semwave::Error> for CliError {
    fn from(e: semwave::Error) -> Self {
        use semwave::Error as E;
        match e {
            E::Diverged { .. } | E::NonFinite(_) => CliError::Numeric(e.to_string()),
            E::Io { .. } => CliError::Io(e.to_string()),
            e => CliError::Config(vec![Issue {
                field: "run".into(),
                reason: e.to_string(),
            }]),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Command-line settings shared by all subcommands.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub jobs: usize,
    pub resume: bool,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            seed: None,
            trials: None,
            jobs: 1,
            resume: false,
        }
    }
}

/// Applies flag overrides and validates.
pub fn prepare(mut cfg: ExperimentConfig, opts: &RunOptions) -> CliResult<ExperimentConfig> {
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(t) = opts.trials {
        cfg.trials = t;
    }
    let issues = cfg.validate();
    if !issues.is_empty() {
        return Err(CliError::Config(issues));
    }
    Ok(cfg)
}

/// `<out>/<name>-<command>`, or `<out>/<command>` for unnamed configs.
fn out_dir(cfg: &ExperimentConfig, opts: &RunOptions, command: &str) -> CliResult<PathBuf> {
    let dir = opts.out.join(match &cfg.name {
        Some(n) => format!("{n}-{command}"),
        None => command.to_string(),
    });
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))
}

fn trial_seed(cfg: &ExperimentConfig, trial: usize) -> u64 {
    derive_seed(cfg.seed, trial as u64)
}

/// Uniform random tokens for one trial, shared by every system and channel.
fn trial_tokens(cfg: &ExperimentConfig, k: usize, trial: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(trial_seed(cfg, trial), 0x70));
    (0..cfg.tokens_per_trial).map(|_| rng.random_range(0..k)).collect()
}

/// Smooth synthetic luminance frame in [0, 1] for the analog baseline.
pub fn test_image(seed: u64) -> Image {
    let n = 128;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.01..0.12),
                rng.random_range(0.01..0.12),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.12),
            )
        })
        .collect();
    let data = (0..n * n)
        .map(|p| {
            let (y, x) = ((p / n) as f64, (p % n) as f64);
            let v: f64 = waves.iter().map(|(fy, fx, ph, a)| a * (fy * y + fx * x + ph).sin()).sum();
            (0.5 + v).clamp(0.0, 1.0)
        })
        .collect();
    Image {
        height: n,
        width: n,
        data,
    }
}

fn trial_model(base: &ChannelModel, snr_db: f64, trial_seed: u64) -> ChannelModel {
    let mut m = base.with_snr(snr_db);
    m.seed = derive_seed(base.seed, trial_seed);
    m
}

/// Nominal code rate from the config (the table uses requested rates).
fn coded_bits(bits: usize, fec: Fec) -> f64 {
    match fec {
        Fec::None => bits as f64,
        Fec::Ldpc { rate, .. } => bits as f64 / rate,
    }
}

fn system_fps(link: &Link, system: &System, k: usize) -> CliResult<f64> {
    let spec = &link.spec;
    Ok(match system {
        System::Wave(p) => fps_equivalent(spec, TokenCost::Wave { l: p.l() }, TOKENS_PER_FRAME)?,
        System::Digital(cfg, _) => fps_equivalent(
            spec,
            TokenCost::Digital {
                bits: coded_bits(bits_per_token(k)?, cfg.fec),
                modulation: cfg.modulation,
            },
            TOKENS_PER_FRAME,
        )?,
        System::Softcast { budget } => spec.data_slot_rate() / *budget as f64,
    })
}

fn check_bank(index: usize, p: &WavebankParams, k: usize) -> CliResult<()> {
    if p.k() != k {
        return Err(CliError::Config(vec![Issue {
            field: format!("systems[{index}].bank"),
            reason: format!("bank has K = {} but the codebook has K = {k}", p.k()),
        }]));
    }
    Ok(())
}

fn load_systems(cfg: &ExperimentConfig, k: usize) -> CliResult<Vec<System>> {
    if cfg.systems.is_empty() {
        return Err(CliError::Config(vec![Issue {
            field: "systems".into(),
            reason: "no systems configured".into(),
        }]));
    }
    let mut out = Vec::new();
    for i in 0..cfg.systems.len() {
        let s = cfg.system(i, k)?;
        if let System::Wave(p) = &s {
            check_bank(i, p, k)?;
        }
        out.push(s);
    }
    Ok(out)
}

fn load_channels(cfg: &ExperimentConfig) -> CliResult<Vec<ChannelModel>> {
    if cfg.channels.is_empty() {
        return Err(CliError::Config(vec![Issue {
            field: "channels".into(),
            reason: "no channels configured".into(),
        }]));
    }
    (0..cfg.channels.len())
        .map(|i| cfg.channel_model(i, 0.0).map_err(CliError::from))
        .collect()
}

// ---------------------------------------------------------------------------
// train

pub fn cmd_train(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<PathBuf> {
    let spec = cfg.train.as_ref().ok_or_else(|| {
        CliError::Config(vec![Issue {
            field: "train".into(),
            reason: "missing [train] section".into(),
        }])
    })?;
    let (_, relevance) = cfg.require_codebook()?;
    let (ci, _) = cfg.channel(&spec.channel, "train.channel")?;
    let model = cfg.channel_model(ci, 0.0)?;
    let link = cfg.link()?;
    let streams = cfg.load_streams(spec)?;
    let config = cfg.train_config(spec, model);
    config.validate().map_err(|e| {
        CliError::Config(vec![Issue {
            field: "train".into(),
            reason: e.to_string(),
        }])
    })?;
    let dir = out_dir(cfg, opts, "train")?;
    let ck = CheckpointDir(dir.join("checkpoints"));
    ensure_dir(&ck.0)?;
    let state = if opts.resume && ck.latest().is_file() {
        TrainState::load(ck.latest())?
    } else {
        let params = init_wavebank_from(&spec.init, relevance.k(), cfg.seed)?;
        TrainState::new(params, config.optimizer)
    };
    let state = train_from(state, &relevance, &link, &config, &streams, Some(&ck))?;
    write_loss_csv(dir.join("loss.csv"), &state.history)?;
    state.save(dir.join("final.swck"))?;
    state.params.save(dir.join("bank.swwb"))?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// eval

struct Cell {
    system: usize,
    channel: usize,
    snr: f64,
}

fn run_trial(
    cfg: &ExperimentConfig,
    link: &Link,
    cb: &Codebook,
    system: &System,
    model: &ChannelModel,
    trial: usize,
) -> semwave::Result<(Option<f64>, Option<f64>, Option<f64>, Option<f64>, Option<f64>)> {
    let seed = trial_seed(cfg, trial);
    match system {
        System::Wave(p) => {
            let tokens = trial_tokens(cfg, cb.k(), trial);
            let frames = pack_tokens(link, p, &tokens)?;
            let got = transmit_packed(link, p, model, &frames, tokens.len(), seed)?;
            Ok((
                Some(token_accuracy(&tokens, &got)?),
                Some(semantic_l2(cb, &tokens, &got)?),
                None,
                None,
                None,
            ))
        }
        System::Digital(_, sys) => {
            let tokens = trial_tokens(cfg, cb.k(), trial);
            let r = run_digital_pipeline(sys, &tokens, cb.k(), link, model, seed)?;
            Ok((
                Some(r.token_accuracy),
                Some(semantic_l2(cb, &tokens, &r.tokens)?),
                Some(r.ber_post),
                None,
                None,
            ))
        }
        System::Softcast { budget } => {
            let img = test_image(derive_seed(seed, 0x1a));
            let out = run_softcast(&img, *budget, link, model, seed)?;
            Ok((None, None, None, Some(psnr(&img, &out, 1.0)?), Some(ssim(&img, &out, 1.0)?)))
        }
    }
}

fn write_grouped(dir: &Path, records: &[MetricRecord]) -> CliResult<()> {
    let mut groups: BTreeMap<(String, String), Vec<MetricRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.system.clone(), r.channel.clone())).or_default().push(r.clone());
    }
    for ((system, channel), rows) in groups {
        let sd = dir.join(&system);
        ensure_dir(&sd)?;
        write_csv(sd.join(format!("{channel}.csv")), &rows)?;
    }
    Ok(())
}

pub fn cmd_eval(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<PathBuf> {
    let (cb, _) = cfg.require_codebook()?;
    let link = cfg.link()?;
    let systems = load_systems(cfg, cb.k())?;
    let channels = load_channels(cfg)?;
    let fps: Vec<f64> = systems.iter().map(|s| system_fps(&link, s, cb.k())).collect::<CliResult<_>>()?;
    let mut cells = Vec::new();
    for system in 0..systems.len() {
        for channel in 0..channels.len() {
            for &snr in &cfg.snr_db {
                cells.push(Cell { system, channel, snr });
            }
        }
    }
    let results = run_indexed(cells.len(), opts.jobs, |i| -> semwave::Result<Vec<MetricRecord>> {
        let c = &cells[i];
        (0..cfg.trials)
            .map(|t| {
                let model = trial_model(&channels[c.channel], c.snr, trial_seed(cfg, t));
                let (acc, sem, ber, p, s) = run_trial(cfg, &link, &cb, &systems[c.system], &model, t)?;
                Ok(MetricRecord {
                    channel: cfg.channels[c.channel].id.clone(),
                    snr_db: c.snr,
                    system: cfg.systems[c.system].id.clone(),
                    seed: trial_seed(cfg, t),
                    token_accuracy: acc,
                    semantic_l2: sem,
                    ber,
                    fps_equivalent: fps[c.system],
                    psnr_db: p,
                    ssim: s,
                    scene: None,
                })
            })
            .collect()
    });
    let dir = out_dir(cfg, opts, "eval")?;
    let mut all = Vec::new();
    let mut summary = Vec::new();
    for r in results {
        let rows = r?;
        summary.push(aggregate(&rows)?);
        all.extend(rows);
    }
    write_grouped(&dir, &all)?;
    write_csv(dir.join("summary.csv"), &summary)?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// multicast

/// Receivers of each multicast group, in config order.
fn multicast_groups(cfg: &ExperimentConfig) -> CliResult<Vec<(String, Vec<usize>)>> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, c) in cfg.channels.iter().enumerate() {
        if let Some(g) = &c.group {
            match groups.iter_mut().find(|(name, _)| name == g) {
                Some((_, v)) => v.push(i),
                None => groups.push((g.clone(), vec![i])),
            }
        }
    }
    let mut issues = Vec::new();
    if groups.is_empty() {
        issues.push(Issue {
            field: "channels".into(),
            reason: "no channel carries a multicast 'group' tag".into(),
        });
    }
    for (g, members) in &groups {
        if members.len() < 2 {
            issues.push(Issue {
                field: format!("channels[{}].group", members[0]),
                reason: format!("multicast group '{g}' has fewer than 2 receivers"),
            });
        }
    }
    if !issues.is_empty() {
        return Err(CliError::Config(issues));
    }
    Ok(groups)
}

pub fn cmd_multicast(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<PathBuf> {
    let (cb, _) = cfg.require_codebook()?;
    let link = cfg.link()?;
    let groups = multicast_groups(cfg)?;
    let systems = load_systems(cfg, cb.k())?;
    let wave: Vec<usize> = (0..systems.len())
        .filter(|&i| matches!(systems[i], System::Wave(_)))
        .collect();
    if wave.is_empty() {
        return Err(CliError::Config(vec![Issue {
            field: "systems".into(),
            reason: "multicast needs at least one wave system".into(),
        }]));
    }
    let channels = load_channels(cfg)?;
    // One cell per (wave system, group, snr); every receiver of the group
    // decodes the same packed frames.
    let mut cells = Vec::new();
    for &s in &wave {
        for g in 0..groups.len() {
            for &snr in &cfg.snr_db {
                cells.push((s, g, snr));
            }
        }
    }
    let results = run_indexed(cells.len(), opts.jobs, |i| -> semwave::Result<Vec<Vec<MetricRecord>>> {
        let (s, g, snr) = cells[i];
        let System::Wave(p) = &systems[s] else { unreachable!() };
        let fps = fps_equivalent(&link.spec, TokenCost::Wave { l: p.l() }, TOKENS_PER_FRAME)?;
        let receivers = &groups[g].1;
        let mut per_rx: Vec<Vec<MetricRecord>> = vec![Vec::new(); receivers.len()];
        for t in 0..cfg.trials {
            let tokens = trial_tokens(cfg, cb.k(), t);
            let frames = pack_tokens(&link, p, &tokens)?;
            for (r, &ci) in receivers.iter().enumerate() {
                let model = trial_model(&channels[ci], snr, trial_seed(cfg, t));
                let got = transmit_packed(&link, p, &model, &frames, tokens.len(), trial_seed(cfg, t))?;
                per_rx[r].push(MetricRecord {
                    channel: cfg.channels[ci].id.clone(),
                    snr_db: snr,
                    system: cfg.systems[s].id.clone(),
                    seed: trial_seed(cfg, t),
                    token_accuracy: Some(token_accuracy(&tokens, &got)?),
                    semantic_l2: Some(semantic_l2(&cb, &tokens, &got)?),
                    ber: None,
                    fps_equivalent: fps,
                    psnr_db: None,
                    ssim: None,
                    scene: None,
                });
            }
        }
        Ok(per_rx)
    });
    let dir = out_dir(cfg, opts, "multicast")?;
    let mut all = Vec::new();
    let mut summary: Vec<AggregateRecord> = Vec::new();
    for (cell, r) in cells.iter().zip(results) {
        let per_rx = r?;
        let aggs: Vec<AggregateRecord> = per_rx.iter().map(|rows| aggregate(rows)).collect::<semwave::Result<_>>()?;
        summary.push(group_mean(&groups[cell.1].0, &aggs));
        summary.extend(aggs);
        all.extend(per_rx.into_iter().flatten());
    }
    write_grouped(&dir, &all)?;
    write_csv(dir.join("summary.csv"), &summary)?;
    Ok(dir)
}

/// Mean over receivers of their per-receiver means; the std columns hold
/// the spread across receivers.
fn group_mean(group: &str, aggs: &[AggregateRecord]) -> AggregateRecord {
    let stats = |f: &dyn Fn(&AggregateRecord) -> Option<f64>| -> (Option<f64>, Option<f64>) {
        let v: Option<Vec<f64>> = aggs.iter().map(f).collect();
        v.map(|v| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
        })
        .unzip()
    };
    let (am, asd) = stats(&|a| a.token_accuracy_mean);
    let (sm, ssd) = stats(&|a| a.semantic_l2_mean);
    AggregateRecord {
        channel: group.to_string(),
        snr_db: aggs[0].snr_db,
        system: aggs[0].system.clone(),
        trials: aggs.iter().map(|a| a.trials).sum(),
        token_accuracy_mean: am,
        token_accuracy_std: asd,
        semantic_l2_mean: sm,
        semantic_l2_std: ssd,
        ber_mean: None,
        ber_std: None,
        psnr_db_mean: None,
        ssim_mean: None,
        fps_equivalent: aggs[0].fps_equivalent,
    }
}

// ---------------------------------------------------------------------------
// ber

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BerRow {
    pub channel: String,
    pub snr_db: f64,
    pub system: String,
    pub modulation: Modulation,
    pub fec: String,
    pub ber_pre: f64,
    pub ber_post: f64,
    /// Analytic uncoded BER for the realized per-slot noise.
    pub ber_theory: f64,
    pub failed_blocks: usize,
    pub trials: usize,
}

pub fn cmd_ber(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<PathBuf> {
    let k = match cfg.load_codebook()? {
        Some((cb, _)) => cb.k(),
        None => 1024,
    };
    let link = cfg.link()?;
    let systems = load_systems(cfg, k)?;
    let digital: Vec<usize> = (0..systems.len())
        .filter(|&i| matches!(systems[i], System::Digital(..)))
        .collect();
    if digital.is_empty() {
        return Err(CliError::Config(vec![Issue {
            field: "systems".into(),
            reason: "ber needs at least one digital system".into(),
        }]));
    }
    let channels = load_channels(cfg)?;
    let mut cells = Vec::new();
    for &s in &digital {
        for c in 0..channels.len() {
            for &snr in &cfg.snr_db {
                cells.push((s, c, snr));
            }
        }
    }
    let rows = run_indexed(cells.len(), opts.jobs, |i| -> semwave::Result<BerRow> {
        let (s, c, snr) = cells[i];
        let System::Digital(dcfg, sys) = &systems[s] else { unreachable!() };
        let (mut pre, mut post, mut theory, mut failed) = (0.0, 0.0, 0.0, 0);
        for t in 0..cfg.trials {
            let tokens = trial_tokens(cfg, k, t);
            let model = trial_model(&channels[c], snr, trial_seed(cfg, t));
            let r = run_digital_pipeline(sys, &tokens, k, &link, &model, trial_seed(cfg, t))?;
            pre += r.ber_pre;
            post += r.ber_post;
            theory += r.ber_theory;
            failed += r.failed_blocks;
        }
        let n = cfg.trials as f64;
        Ok(BerRow {
            channel: cfg.channels[c].id.clone(),
            snr_db: snr,
            system: cfg.systems[s].id.clone(),
            modulation: dcfg.modulation,
            fec: match dcfg.fec {
                Fec::None => "none".into(),
                Fec::Ldpc { rate, n } => format!("ldpc-r{rate}-n{n}"),
            },
            ber_pre: pre / n,
            ber_post: post / n,
            ber_theory: theory / n,
            failed_blocks: failed,
            trials: cfg.trials,
        })
    });
    let rows: Vec<BerRow> = rows.into_iter().collect::<semwave::Result<_>>()?;
    let dir = out_dir(cfg, opts, "ber")?;
    let mut groups: BTreeMap<(String, String), Vec<BerRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.system.clone(), r.channel.clone())).or_default().push(r.clone());
    }
    for ((system, channel), g) in groups {
        let sd = dir.join(&system);
        ensure_dir(&sd)?;
        write_csv(sd.join(format!("{channel}.csv")), &g)?;
    }
    write_csv(dir.join("summary.csv"), &rows)?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub channel: String,
    pub coordinates: usize,
    pub loss: f64,
    pub max_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct CoordinateRow {
    index: usize,
    coordinate: String,
    analytic: f64,
    numeric: f64,
    error: f64,
}

/// Runs the finite-difference check on every listed channel. Returns the
/// output directory and whether all channels passed.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<(PathBuf, Vec<GradcheckRow>)> {
    let spec = cfg.gradcheck.as_ref().ok_or_else(|| {
        CliError::Config(vec![Issue {
            field: "gradcheck".into(),
            reason: "missing [gradcheck] section".into(),
        }])
    })?;
    let (_, relevance) = cfg.require_codebook()?;
    let link = cfg.link()?;
    let k = relevance.k();
    let params = semwave::wavebank::init_wavebank(k, spec.l, derive_seed(cfg.seed, spec.init_seed), Default::default())?;
    let n_tokens = link.tokens_per_frame(spec.l)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x6c));
    let tokens: Vec<usize> = (0..n_tokens).map(|_| rng.random_range(0..k)).collect();
    let mut models = Vec::new();
    for (i, id) in spec.channels.iter().enumerate() {
        let (ci, _) = cfg.channel(id, &format!("gradcheck.channels[{i}]"))?;
        models.push((id.clone(), cfg.channel_model(ci, spec.snr_db)?));
    }
    let check = GradCheckConfig {
        coordinates: spec.coordinates,
        step: spec.step,
        rel_tol: spec.rel_tol,
        abs_tol: spec.abs_tol,
        seed: derive_seed(cfg.seed, 0x6d),
    };
    let reports = run_indexed(models.len(), opts.jobs, |i| {
        let model = &models[i].1;
        if spec.corrupt_adjoint {
            check_gradients_with(&params, &relevance, &tokens, &link, model, cfg.seed, &check, corrupted_backward)
        } else {
            check_gradients_with(&params, &relevance, &tokens, &link, model, cfg.seed, &check, backward)
        }
    });
    let dir = out_dir(cfg, opts, "gradcheck")?;
    let mut summary = Vec::new();
    for ((id, _), rep) in models.iter().zip(reports) {
        let rep = rep?;
        let rows: Vec<CoordinateRow> = rep
            .checks
            .iter()
            .map(|c| CoordinateRow {
                index: c.index,
                coordinate: rep.coordinate_name(c.index, k, spec.l),
                analytic: c.analytic,
                numeric: c.numeric,
                error: c.error,
            })
            .collect();
        write_csv(dir.join(format!("{id}.csv")), &rows)?;
        summary.push(GradcheckRow {
            channel: id.clone(),
            coordinates: rep.checks.len(),
            loss: rep.loss,
            max_error: rep.max_error,
            passed: rep.passed,
        });
    }
    write_csv(dir.join("summary.csv"), &summary)?;
    Ok((dir, summary))
}

// ---------------------------------------------------------------------------
// info

/// Profile constants and the throughput table, as text.
pub fn cmd_info(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<(PathBuf, String)> {
    let spec = cfg.spec();
    let k = match cfg.load_codebook()? {
        Some((cb, _)) => cb.k(),
        None => 1024,
    };
    let mut s = String::new();
    let _ = writeln!(s, "profile            {}", cfg.profile);
    let _ = writeln!(s, "sample rate        {} Hz", spec.sample_rate());
    let _ = writeln!(s, "carrier            {} Hz", spec.carrier_hz);
    let _ = writeln!(s, "subcarriers        {}", spec.n_sub);
    let _ = writeln!(s, "cyclic prefix      {}", spec.cp_len);
    let _ = writeln!(s, "symbols per frame  {} (pilot every {})", spec.syms_per_frame, spec.pilot_period);
    let _ = writeln!(s, "frame length       {} samples ({:.4} s)", spec.frame_len(), spec.frame_duration_s());
    let _ = writeln!(s, "data slots         {}", spec.data_slots());
    let _ = writeln!(s, "slot rate          {:.2} slots/s", spec.data_slot_rate());
    let _ = writeln!(s, "bits per token     {} (K = {k})", bits_per_token(k)?);
    let _ = writeln!(s);
    let rows = throughput_table(&spec, k, TOKENS_PER_FRAME, 16.0, &[0.73, 0.33])?;
    let _ = writeln!(s, "{:<12} {:>6} {:>6} {:>6} {:>7} {:>7}", "config", "fps", "bits", "qpsk", "L_bpsk", "L_qpsk");
    for r in &rows {
        let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{:<12} {:>6.1} {:>6} {:>6} {:>7} {:>7}",
            r.config,
            r.fps,
            opt(r.bpsk_bits),
            opt(r.qpsk_symbols),
            r.l_bpsk,
            r.l_qpsk
        );
    }
    let dir = out_dir(cfg, opts, "info")?;
    write_csv(dir.join("table_ii.csv"), &rows)?;
    write_text(&dir.join("info.txt"), &s)?;
    Ok((dir, s))
}
