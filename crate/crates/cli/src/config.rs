//! Experiment configuration files (TOML).
//!
//! Relative paths are resolved against the directory holding the config.
//! Every field except the ones needed by the chosen subcommand is optional;
//! see `README.md` for the full grammar.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use semwave::baselines::{DigitalConfig, Fec, Modulation};
use semwave::channel::{derive_seed, ChannelKind, ChannelModel, ReplayOptions, SyntheticTvir, TvirRecord};
use semwave::codebook::{Codebook, RelevanceMatrix};
use semwave::link::{EstimateGradient, Link};
use semwave::ofdm::OfdmFrameSpec;
use semwave::training::{Optimizer, Sampling, TokenStream, TrainConfig, TrainState};
use semwave::wavebank::{init_wavebank, InitScheme, WavebankParams};
use semwave::Cplx;

/// The only built-in constant set: 8 kHz band at 14 kHz carrier.
pub const DEFAULT_PROFILE: &str = "watermark-8k";

/// One problem found while validating a config, tied to its field path.
#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

fn issue(field: impl Into<String>, reason: impl Into<String>) -> Issue {
    Issue {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output directories are named `<name>-<command>`.
    pub name: Option<String>,
    #[serde(default = "default_profile")]
    pub profile: String,
    /// Overrides of the profile's framing constants.
    pub ofdm: Option<OfdmFrameSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_tokens_per_trial")]
    pub tokens_per_trial: usize,
    #[serde(default = "default_snr_grid")]
    pub snr_db: Vec<f64>,
    #[serde(default = "default_layout_seed")]
    pub layout_seed: u64,
    #[serde(default)]
    pub estimate_gradient: EstimateGradient,
    pub codebook: Option<CodebookSpec>,
    #[serde(default)]
    pub channels: Vec<ChannelSpec>,
    #[serde(default)]
    pub systems: Vec<SystemSpec>,
    pub train: Option<TrainSpec>,
    pub gradcheck: Option<GradcheckSpec>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_profile() -> String {
    DEFAULT_PROFILE.to_string()
}
fn default_trials() -> usize {
    20
}
fn default_tokens_per_trial() -> usize {
    384
}
fn default_snr_grid() -> Vec<f64> {
    vec![0.0, 10.0, 20.0, 30.0]
}
fn default_layout_seed() -> u64 {
    7
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookSpec {
    /// SWCB1 file.
    pub path: Option<PathBuf>,
    /// Synthetic codebook with orthogonal cluster centres.
    pub planted: Option<PlantedSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSpec {
    pub k: usize,
    pub d: usize,
    pub clusters: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_spread")]
    pub spread: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_separation() -> f64 {
    3.0
}
fn default_spread() -> f64 {
    0.005
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelType {
    Ideal,
    Awgn,
    Fir,
    Tvir,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub id: String,
    pub kind: ChannelType,
    /// FIR taps as `[re, im]` pairs.
    pub taps: Option<Vec<[f64; 2]>>,
    /// TVIR file (SWIR1).
    pub path: Option<PathBuf>,
    /// Generated TVIR; missing fields take the generator defaults.
    pub synthetic: Option<SyntheticTvir>,
    #[serde(default)]
    pub replay: ReplayOptions,
    #[serde(default = "default_true")]
    pub random_start: bool,
    /// Multicast group tag: receivers sharing a tag hear the same transmission.
    pub group: Option<String>,
    /// Base seed of the noise and start-point draws.
    pub noise_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemType {
    Wave,
    Digital,
    Softcast,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub id: String,
    pub kind: SystemType,
    /// Wave: checkpoint (SWCK) or wavebank file.
    pub bank: Option<PathBuf>,
    /// Wave: random initialization when no bank is given.
    pub init: Option<InitSpec>,
    /// Digital.
    pub modulation: Option<Modulation>,
    /// Digital; omitted means uncoded.
    pub fec: Option<Fec>,
    /// SoftCast: complex symbols per image.
    pub budget: Option<usize>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub l: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scheme: InitScheme,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub channel: String,
    pub init: InitSpec,
    pub steps: u64,
    pub batch_frames: Option<usize>,
    pub learning_rate: Option<f64>,
    pub optimizer: Option<Optimizer>,
    /// `[snr_db, weight]` pairs.
    pub snr_schedule: Option<Vec<[f64; 2]>>,
    pub sampling: Option<Sampling>,
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Token streams (SWTS1); uniform random tokens when empty.
    #[serde(default)]
    pub streams: Vec<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSpec {
    pub channels: Vec<String>,
    pub l: usize,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "default_coordinates")]
    pub coordinates: usize,
    #[serde(default = "default_fd_step")]
    pub step: f64,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_abs_tol")]
    pub abs_tol: f64,
    /// SNR used for channels with noise.
    #[serde(default = "default_gradcheck_snr")]
    pub snr_db: f64,
    /// Negative control: drop a term of the backward pass.
    #[serde(default)]
    pub corrupt_adjoint: bool,
}

fn default_coordinates() -> usize {
    64
}
fn default_fd_step() -> f64 {
    1e-4
}
fn default_rel_tol() -> f64 {
    1e-4
}
fn default_abs_tol() -> f64 {
    1e-7
}
fn default_gradcheck_snr() -> f64 {
    20.0
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) && !id.starts_with('.')
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, Vec<Issue>> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let span = e.span().map(|s| format!(" (byte {})", s.start)).unwrap_or_default();
            vec![issue("config", format!("{}{span}", e.message()))]
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Vec<Issue>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| vec![issue("--config", format!("cannot read {}: {e}", path.display()))])?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn check_file(&self, field: String, p: &Path, out: &mut Vec<Issue>) {
        let full = self.resolve_path(p);
        if !full.is_file() {
            out.push(issue(field, format!("file not found: {}", full.display())));
        }
    }

    /// Checks shared by every subcommand.
    pub fn validate(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        if self.profile != DEFAULT_PROFILE {
            out.push(issue("profile", format!("unknown profile '{}', expected '{DEFAULT_PROFILE}'", self.profile)));
        }
        if let Some(n) = &self.name {
            if !valid_id(n) {
                out.push(issue("name", "use letters, digits, '-', '_' or '.'"));
            }
        }
        if let Err(e) = self.spec().validate() {
            out.push(issue("ofdm", e.to_string()));
        }
        if self.trials == 0 {
            out.push(issue("trials", "must be at least 1"));
        }
        if self.tokens_per_trial == 0 {
            out.push(issue("tokens_per_trial", "must be at least 1"));
        }
        if self.snr_db.is_empty() {
            out.push(issue("snr_db", "grid is empty"));
        }
        if self.snr_db.iter().any(|s| s.is_nan()) {
            out.push(issue("snr_db", "NaN in grid"));
        }
        if let Some(cb) = &self.codebook {
            match (&cb.path, &cb.planted) {
                (Some(p), None) => self.check_file("codebook.path".into(), p, &mut out),
                (None, Some(_)) => {}
                _ => out.push(issue("codebook", "give exactly one of 'path' or 'planted'")),
            }
        }
        let mut ids = HashSet::new();
        for (i, c) in self.channels.iter().enumerate() {
            let f = |name: &str| format!("channels[{i}].{name}");
            if !valid_id(&c.id) {
                out.push(issue(f("id"), format!("invalid id '{}'", c.id)));
            }
            if !ids.insert(c.id.clone()) {
                out.push(issue(f("id"), format!("duplicate id '{}'", c.id)));
            }
            match c.kind {
                ChannelType::Fir => {
                    if c.taps.as_ref().is_none_or(|t| t.is_empty()) {
                        out.push(issue(f("taps"), "fir channel needs at least one tap"));
                    }
                }
                ChannelType::Tvir => match (&c.path, &c.synthetic) {
                    (Some(p), None) => self.check_file(f("path"), p, &mut out),
                    (None, Some(_)) => {}
                    _ => out.push(issue(f("path"), "tvir channel needs exactly one of 'path' or 'synthetic'")),
                },
                ChannelType::Ideal | ChannelType::Awgn => {}
            }
            if c.kind != ChannelType::Fir && c.taps.is_some() {
                out.push(issue(f("taps"), "only fir channels take taps"));
            }
            if c.kind != ChannelType::Tvir && (c.path.is_some() || c.synthetic.is_some()) {
                out.push(issue(f("path"), "only tvir channels take 'path' or 'synthetic'"));
            }
        }
        let mut sys_ids = HashSet::new();
        for (i, s) in self.systems.iter().enumerate() {
            let f = |name: &str| format!("systems[{i}].{name}");
            if !valid_id(&s.id) {
                out.push(issue(f("id"), format!("invalid id '{}'", s.id)));
            }
            if !sys_ids.insert(s.id.clone()) {
                out.push(issue(f("id"), format!("duplicate id '{}'", s.id)));
            }
            match s.kind {
                SystemType::Wave => match (&s.bank, &s.init) {
                    (Some(p), None) => self.check_file(f("bank"), p, &mut out),
                    (None, Some(_)) => {}
                    _ => out.push(issue(f("bank"), "wave system needs exactly one of 'bank' or 'init'")),
                },
                SystemType::Digital => {
                    if s.modulation.is_none() {
                        out.push(issue(f("modulation"), "digital system needs a modulation"));
                    }
                }
                SystemType::Softcast => {
                    if s.budget.is_none_or(|b| b == 0) {
                        out.push(issue(f("budget"), "softcast system needs a positive symbol budget"));
                    }
                }
            }
        }
        out
    }

    pub fn spec(&self) -> OfdmFrameSpec {
        self.ofdm.clone().unwrap_or_default()
    }

    pub fn link(&self) -> Result<Link, Vec<Issue>> {
        let mut link = Link::new(self.spec(), self.layout_seed).map_err(|e| vec![issue("ofdm", e.to_string())])?;
        link.estimate_gradient = self.estimate_gradient;
        Ok(link)
    }

    pub fn load_codebook(&self) -> Result<Option<(Codebook, RelevanceMatrix)>, Vec<Issue>> {
        let Some(spec) = &self.codebook else {
            return Ok(None);
        };
        let cb = match (&spec.path, &spec.planted) {
            (Some(p), _) => Codebook::load(self.resolve_path(p)),
            (None, Some(p)) => Codebook::orthogonal_clusters(p.k, p.d, p.clusters, p.separation, p.spread, p.seed),
            (None, None) => return Err(vec![issue("codebook", "give 'path' or 'planted'")]),
        }
        .map_err(|e| vec![issue("codebook", e.to_string())])?;
        let rel = RelevanceMatrix::from_codebook(&cb).map_err(|e| vec![issue("codebook", e.to_string())])?;
        Ok(Some((cb, rel)))
    }

    pub fn require_codebook(&self) -> Result<(Codebook, RelevanceMatrix), Vec<Issue>> {
        self.load_codebook()?
            .ok_or_else(|| vec![issue("codebook", "this command needs a [codebook] section")])
    }

    pub fn channel(&self, id: &str, field: &str) -> Result<(usize, &ChannelSpec), Vec<Issue>> {
        self.channels
            .iter()
            .enumerate()
            .find(|(_, c)| c.id == id)
            .ok_or_else(|| vec![issue(field, format!("no channel with id '{id}'"))])
    }

    /// Channel model at SNR `snr_db` with its base noise seed.
    pub fn channel_model(&self, index: usize, snr_db: f64) -> Result<ChannelModel, Vec<Issue>> {
        let c = &self.channels[index];
        let field = format!("channels[{index}]");
        let seed = c.noise_seed.unwrap_or_else(|| derive_seed(self.seed, 0x100 + index as u64));
        let model = match c.kind {
            ChannelType::Ideal => ChannelModel::ideal(),
            ChannelType::Awgn => ChannelModel::awgn(snr_db, seed),
            ChannelType::Fir => ChannelModel::fir(
                c.taps.iter().flatten().map(|t| Cplx::new(t[0], t[1])).collect(),
                snr_db,
                seed,
            ),
            ChannelType::Tvir => {
                let record = match (&c.path, &c.synthetic) {
                    (Some(p), _) => TvirRecord::load(self.resolve_path(p)),
                    (None, Some(s)) => TvirRecord::synthetic(s),
                    (None, None) => return Err(vec![issue(field, "tvir channel needs 'path' or 'synthetic'")]),
                }
                .map_err(|e| vec![issue(field.clone(), e.to_string())])?;
                ChannelModel {
                    kind: ChannelKind::Tvir {
                        record: Arc::new(record),
                        options: c.replay,
                        random_start: c.random_start,
                    },
                    snr_db,
                    seed,
                }
            }
        };
        model.validate().map_err(|e| vec![issue(field, e.to_string())])?;
        Ok(model)
    }

    /// Builds system `index`; `k` sizes randomly initialized banks.
    pub fn system(&self, index: usize, k: usize) -> Result<System, Vec<Issue>> {
        let s = &self.systems[index];
        let field = |name: &str| format!("systems[{index}].{name}");
        Ok(match s.kind {
            SystemType::Wave => {
                let params = match (&s.bank, &s.init) {
                    (Some(p), _) => load_bank(&self.resolve_path(p)).map_err(|e| vec![issue(field("bank"), e)])?,
                    (None, Some(i)) => {
                        init_wavebank_from(i, k, self.seed).map_err(|e| vec![issue(field("init"), e.to_string())])?
                    }
                    (None, None) => return Err(vec![issue(field("bank"), "missing")]),
                };
                System::Wave(params)
            }
            SystemType::Digital => {
                let modulation = s.modulation.ok_or_else(|| vec![issue(field("modulation"), "missing")])?;
                let cfg = DigitalConfig {
                    modulation,
                    fec: s.fec.unwrap_or(Fec::None),
                };
                let built = cfg.build().map_err(|e| vec![issue(field("fec"), e.to_string())])?;
                System::Digital(cfg, Box::new(built))
            }
            SystemType::Softcast => System::Softcast {
                budget: s.budget.ok_or_else(|| vec![issue(field("budget"), "missing")])?,
            },
        })
    }

    pub fn train_config(&self, spec: &TrainSpec, channel: ChannelModel) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            steps: spec.steps,
            batch_frames: spec.batch_frames.unwrap_or(d.batch_frames),
            learning_rate: spec.learning_rate.unwrap_or(d.learning_rate),
            optimizer: spec.optimizer.unwrap_or(d.optimizer),
            snr_schedule: spec
                .snr_schedule
                .as_ref()
                .map(|s| s.iter().map(|p| (p[0], p[1])).collect())
                .unwrap_or(d.snr_schedule),
            channel,
            sampling: spec.sampling.unwrap_or(d.sampling),
            seed: self.seed,
            checkpoint_every: spec.checkpoint_every,
        }
    }

    pub fn load_streams(&self, spec: &TrainSpec) -> Result<Vec<TokenStream>, Vec<Issue>> {
        spec.streams
            .iter()
            .enumerate()
            .map(|(i, p)| {
                TokenStream::load(self.resolve_path(p)).map_err(|e| vec![issue(format!("train.streams[{i}]"), e.to_string())])
            })
            .collect()
    }
}

/// Initial `k`-token bank; the init seed is mixed with the experiment seed.
pub fn init_wavebank_from(spec: &InitSpec, k: usize, seed: u64) -> semwave::Result<WavebankParams> {
    init_wavebank(k, spec.l, derive_seed(seed, spec.seed), spec.scheme)
}

/// Reads a bank from a training checkpoint or a plain wavebank file.
pub fn load_bank(path: &Path) -> Result<WavebankParams, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    if bytes.starts_with(semwave::training::CHECKPOINT_MAGIC) {
        TrainState::from_bytes(&bytes).map(|s| s.params).map_err(|e| e.to_string())
    } else {
        WavebankParams::from_bytes(&bytes).map_err(|e| e.to_string())
    }
}

/// A resolved system ready to run.
#[derive(Debug)]
pub enum System {
    Wave(WavebankParams),
    Digital(DigitalConfig, Box<semwave::baselines::DigitalSystem>),
    Softcast { budget: usize },
}
