//! Declarative run configuration. Loaded from TOML (unknown keys are
//! rejected) and patched with dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec_sim::{SimModel, DEFAULT_DELTA_SCALE, QUANT_LEVEL_MAX, QUANT_LEVEL_MIN};
use crate::dpn::{DpnModel, DEFAULT_BLOCKS, DEFAULT_CHANNELS, MIN_PATCH};
use crate::error::{Error, Result};
use crate::evaluation::MetricTool;
use crate::fen::{FenModel, DEFAULT_HIDDEN};
use crate::loss::{LambdaMap, SSIM_WINDOW};
use crate::preanalysis::{EncoderProbe, ProbeConfig, DEFAULT_PROBE_BITRATE_KBPS};

pub const DEFAULT_LADDER_KBPS: [u32; 4] = [1000, 2500, 4000, 5000];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub fen_hidden: usize,
    pub dpn_channels: usize,
    pub dpn_blocks: usize,
    pub dpn_zero_tail: bool,
    pub sim_channels: usize,
    pub sim_latent_channels: usize,
    pub prior_filters: Vec<usize>,
    pub prior_init_scale: f64,
    pub delta_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let sim = SimModel::default();
        Self {
            fen_hidden: DEFAULT_HIDDEN,
            dpn_channels: DEFAULT_CHANNELS,
            dpn_blocks: DEFAULT_BLOCKS,
            dpn_zero_tail: false,
            sim_channels: sim.channels,
            sim_latent_channels: sim.latent_channels,
            prior_filters: sim.prior_filters,
            prior_init_scale: sim.prior_init_scale,
            delta_scale: DEFAULT_DELTA_SCALE,
        }
    }
}

impl ModelConfig {
    pub fn fen(&self) -> FenModel {
        FenModel { hidden: self.fen_hidden }
    }

    pub fn dpn(&self) -> DpnModel {
        DpnModel {
            channels: self.dpn_channels,
            blocks: self.dpn_blocks,
        }
    }

    pub fn sim(&self) -> SimModel {
        SimModel {
            channels: self.sim_channels,
            latent_channels: self.sim_latent_channels,
            prior_filters: self.prior_filters.clone(),
            prior_init_scale: self.prior_init_scale,
            delta_scale: self.delta_scale,
        }
    }
}

/// The three dynamic controls and the constants used when each is off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub enable_dpi: bool,
    pub enable_dql: bool,
    pub enable_dlamt: bool,
    pub fixed_f_d: f64,
    pub fixed_f_q: f64,
    pub fixed_lambda: f64,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            enable_dpi: true,
            enable_dql: true,
            enable_dlamt: true,
            fixed_f_d: 1.0,
            fixed_f_q: 30.0,
            fixed_lambda: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: u64,
    pub patch_size: usize,
    pub samples_per_clip: usize,
    /// Sub-sequences whose gradients are averaged per optimizer step.
    pub accumulate: usize,
    pub checkpoint_every: u64,
    pub freeze_simulator: bool,
    /// Leading steps that train only the simulator on unprocessed input.
    pub sim_warmup_steps: u64,
    pub simulator_objective: SimObjective,
}

/// What the simulator parameters are optimized against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimObjective {
    /// Rate plus distortion between the simulator input `P(x)` and its
    /// reconstruction, so the simulator stays a codec stand-in and cannot
    /// learn to undo the preprocessing.
    #[default]
    Fidelity,
    /// The preprocessing loss against the source `x`, shared with FEN/DPN.
    Joint,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            steps: 1000,
            patch_size: 128,
            samples_per_clip: 8,
            accumulate: 1,
            checkpoint_every: 100,
            freeze_simulator: false,
            sim_warmup_steps: 0,
            simulator_objective: SimObjective::Fidelity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub bitrate_kbps: u32,
    /// Off skips the encoder and uses only the fallback map.
    pub use_encoder: bool,
    /// `None` uses only the fallback map.
    pub encoder: Option<EncoderProbe>,
    pub fallback: bool,
    pub cache_dir: Option<PathBuf>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            bitrate_kbps: DEFAULT_PROBE_BITRATE_KBPS,
            use_encoder: true,
            encoder: p.encoder,
            fallback: p.fallback,
            cache_dir: None,
        }
    }
}

impl ProbeSection {
    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            bitrate_kbps: self.bitrate_kbps,
            encoder: self.encoder.clone().filter(|_| self.use_encoder),
            fallback: self.fallback,
            cache_dir: self.cache_dir.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bitrates_kbps: Vec<u32>,
    pub metrics: Vec<String>,
    /// Tool for `vmaf`/`vmaf_neg`; `None` runs libvmaf's `vmaf` CLI.
    pub vmaf_tool: Option<MetricTool>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bitrates_kbps: DEFAULT_LADDER_KBPS.to_vec(),
            metrics: vec!["ms_ssim".into()],
            vmaf_tool: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TdpConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub toggles: Toggles,
    pub lambda: LambdaMap,
    pub train: TrainConfig,
    pub probe: ProbeSection,
    pub eval: EvalConfig,
}

fn in_range(name: &str, v: f64, lo: f64, hi: f64, lo_open: bool) -> Result<()> {
    let ok = v.is_finite() && v <= hi && if lo_open { v > lo } else { v >= lo };
    if ok {
        Ok(())
    } else {
        let open = if lo_open { "(" } else { "[" };
        Err(Error::Config(format!("{name} = {v} is outside {open}{lo}, {hi}]")))
    }
}

impl TdpConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `section.key=value` overrides in order. Values are parsed
    /// as TOML literals, falling back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let parts: Vec<&str> = key.trim().split('.').collect();
            if parts.iter().any(|p| p.is_empty()) {
                return Err(Error::Config(format!("bad override key `{key}`")));
            }
            let mut table = &mut root;
            for part in &parts[..parts.len() - 1] {
                table = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
            }
            table.insert(parts[parts.len() - 1].to_string(), value);
        }
        let text = toml::to_string(&root).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.toggles;
        if !t.enable_dpi {
            in_range("toggles.fixed_f_d", t.fixed_f_d, 0.0, 1.0, false)?;
        }
        if !t.enable_dql {
            in_range("toggles.fixed_f_q", t.fixed_f_q, QUANT_LEVEL_MIN, QUANT_LEVEL_MAX, false)?;
        }
        if !t.enable_dlamt {
            in_range("toggles.fixed_lambda", t.fixed_lambda, self.lambda.lambda_min, self.lambda.lambda_max, true)?;
        }
        let l = &self.lambda;
        if !(l.k.is_finite() && l.b.is_finite() && l.k >= 0.0) {
            return Err(Error::Config("lambda.k must be finite and non-negative, lambda.b finite".into()));
        }
        if !(l.lambda_min > 0.0 && l.lambda_min < l.lambda_max && l.lambda_max.is_finite() && l.qp_max > 0.0) {
            return Err(Error::Config("lambda bounds must satisfy 0 < lambda_min < lambda_max".into()));
        }
        let tr = &self.train;
        if !(tr.lr.is_finite() && tr.lr > 0.0) {
            return Err(Error::Config(format!("train.lr = {} must be positive", tr.lr)));
        }
        let min_patch = MIN_PATCH.max(SSIM_WINDOW);
        if tr.patch_size < min_patch || tr.patch_size % 4 != 0 {
            return Err(Error::Config(format!(
                "train.patch_size = {} must be a multiple of 4 and at least {min_patch}",
                tr.patch_size
            )));
        }
        if tr.samples_per_clip == 0 || tr.accumulate == 0 || tr.checkpoint_every == 0 {
            return Err(Error::Config(
                "train.samples_per_clip, train.accumulate and train.checkpoint_every must be positive".into(),
            ));
        }
        let m = &self.model;
        if m.fen_hidden == 0
            || m.dpn_channels == 0
            || m.sim_channels == 0
            || m.sim_latent_channels == 0
            || m.prior_filters.contains(&0)
        {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !(m.delta_scale.is_finite() && m.delta_scale > 0.0 && m.prior_init_scale.is_finite() && m.prior_init_scale > 0.0) {
            return Err(Error::Config("model.delta_scale and model.prior_init_scale must be positive".into()));
        }
        if self.eval.bitrates_kbps.is_empty() || self.eval.bitrates_kbps.contains(&0) {
            return Err(Error::Config("eval.bitrates_kbps must be non-empty and positive".into()));
        }
        if self.probe.bitrate_kbps == 0 {
            return Err(Error::Config("probe.bitrate_kbps must be positive".into()));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}
