//! Joint training of FEN, DPN and the codec simulator on 3-frame patch
//! sub-sequences, with the DPI/DQL/DlamT switches from the config.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec_sim::{dynamic_quant_level, QuantLevel, QuantMode, PRIOR_PREFIX, SIM_PREFIX};
use crate::config::{ModelConfig, SimObjective, TdpConfig, Toggles};
use crate::dpn::{apply_intensity, preprocess_clip, PreprocessOptions, Preprocessed, DPN_PREFIX};
use crate::error::{Error, Result};
use crate::fen::{FeatureNormalizer, FEN_PREFIX};
use crate::loss::rd_loss;
use crate::numerics::{Bound, Checkpoint, Graph, ParamStore, Tensor, Var};
use crate::preanalysis::{analyze_lumas, extract_features, probe_qp, FeatureVector, ProbeConfig};
use crate::video_io::{read_clip, Clip, FrameRate};
use crate::workers::parallel_map;

pub const SUBSEQ_FRAMES: usize = 3;
pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.tdpc";
pub const NORMALIZER_FILE: &str = "normalizer.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";

const STREAM_CROP: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_STEP: u64 = 3;
const STREAM_INIT: u64 = 4;

/// SplitMix64 finaliser folded over `parts`; gives independent seeds for
/// each (purpose, index) pair.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Complexity class of a generated clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    /// Constant luma, static.
    Flat,
    /// Smooth ramp drifting one step per frame.
    Gradient,
    /// Independent Gaussian noise per frame.
    Noise,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::Flat, Stratum::Gradient, Stratum::Noise];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Flat => "flat",
            Stratum::Gradient => "gradient",
            Stratum::Noise => "noise",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub id: String,
    pub stratum: Stratum,
    pub clip: Clip,
}

pub const NOISE_SIGMA_8BIT: f64 = 40.0;

/// An 8-bit 4:2:0 clip of the given stratum.
pub fn synthetic_clip(stratum: Stratum, width: usize, height: usize, frames: usize, seed: u64) -> Result<Clip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = width * height;
    let planes: Vec<Vec<u16>> = match stratum {
        Stratum::Flat => {
            let level = rng.random_range(50..=200u16);
            vec![vec![level; n]; frames]
        }
        Stratum::Gradient => {
            let theta = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
            let (lo, hi) = (rng.random_range(16.0..80.0), rng.random_range(176.0..235.0));
            let span = (width + height + frames) as f64;
            (0..frames)
                .map(|t| {
                    (0..n)
                        .map(|i| {
                            let (x, y) = ((i % width) as f64, (i / width) as f64);
                            let u = (x * theta.cos() + y * theta.sin() + t as f64) / span;
                            (lo + (hi - lo) * u).round() as u16
                        })
                        .collect()
                })
                .collect()
        }
        Stratum::Noise => {
            let dist = Normal::new(128.0, NOISE_SIGMA_8BIT).expect("valid sigma");
            (0..frames)
                .map(|_| (0..n).map(|_| dist.sample(&mut rng).round().clamp(0.0, 255.0) as u16).collect())
                .collect()
        }
    };
    Clip::from_luma_planes(planes, width, height, FrameRate::new(30, 1)?, 8)
}

/// `per_stratum` clips of each stratum, ids `<stratum>-<k>`.
pub fn synthetic_corpus(
    per_stratum: usize,
    width: usize,
    height: usize,
    frames: usize,
    seed: u64,
) -> Result<Vec<SyntheticClip>> {
    let mut out = Vec::with_capacity(per_stratum * Stratum::ALL.len());
    for (s, stratum) in Stratum::ALL.into_iter().enumerate() {
        for k in 0..per_stratum {
            out.push(SyntheticClip {
                id: format!("{}-{k}", stratum.name()),
                stratum,
                clip: synthetic_clip(stratum, width, height, frames, derive_seed(&[seed, s as u64, k as u64]))?,
            });
        }
    }
    Ok(out)
}

/// Three co-located luma patches from consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub clip_id: String,
    pub start_frame: usize,
    pub top: usize,
    pub left: usize,
    /// `SUBSEQ_FRAMES` planes of `[patch, patch]`, normalised to [0, 1].
    pub patches: Vec<Tensor<f64>>,
    /// Features of the full-frame sub-sequence.
    pub features: FeatureVector,
    pub qp: f64,
}

impl TrainSample {
    pub fn patch_size(&self) -> usize {
        self.patches[0].shape()[0]
    }

    /// `[3, 1, P, P]` batch.
    pub fn batch(&self) -> Result<Tensor<f32>> {
        let p = self.patch_size();
        let data = self.patches.iter().flat_map(|t| t.data().iter().map(|&v| v as f32)).collect();
        Tensor::new(vec![self.patches.len(), 1, p, p], data)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<TrainSample>,
    /// `(clip id, reason)` for every clip left out.
    pub skipped: Vec<(String, String)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// SHA-256 over crop positions, QP, features and patch samples.
    pub fn manifest_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.clip_id.as_bytes());
            h.update([0]);
            for v in [s.start_frame, s.top, s.left] {
                h.update((v as u64).to_le_bytes());
            }
            h.update(s.qp.to_le_bytes());
            for v in s.features.to_array() {
                h.update(v.to_le_bytes());
            }
            for p in &s.patches {
                for v in p.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn features(&self) -> Vec<FeatureVector> {
        self.samples.iter().map(|s| s.features).collect()
    }
}

fn crop(plane: &Tensor<f64>, top: usize, left: usize, size: usize) -> Tensor<f64> {
    let w = plane.shape()[1];
    Tensor::from_fn(vec![size, size], |i| plane.data()[(top + i / size) * w + left + i % size])
}

fn clip_samples(
    index: usize,
    id: &str,
    clip: &Clip,
    patch_size: usize,
    samples_per_clip: usize,
    probe: &ProbeConfig,
    seed: u64,
) -> std::result::Result<Vec<TrainSample>, String> {
    if clip.len() < SUBSEQ_FRAMES {
        return Err(format!("{} frames, need {SUBSEQ_FRAMES}", clip.len()));
    }
    if clip.width() < patch_size || clip.height() < patch_size {
        return Err(format!("{}x{} is smaller than patch {patch_size}", clip.width(), clip.height()));
    }
    let qp = probe_qp(clip, probe).map_err(|e| e.to_string())?.clip_qp;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, STREAM_CROP, index as u64]));
    let mut out = Vec::with_capacity(samples_per_clip);
    for _ in 0..samples_per_clip {
        let start = rng.random_range(0..=clip.len() - SUBSEQ_FRAMES);
        let top = rng.random_range(0..=clip.height() - patch_size);
        let left = rng.random_range(0..=clip.width() - patch_size);
        let lumas: Vec<Tensor<f64>> = (start..start + SUBSEQ_FRAMES).map(|i| clip.luma(i)).collect();
        let features = analyze_lumas(&lumas, qp).map_err(|e| e.to_string())?.features;
        out.push(TrainSample {
            clip_id: id.to_string(),
            start_frame: start,
            top,
            left,
            patches: lumas.iter().map(|l| crop(l, top, left, patch_size)).collect(),
            features,
            qp,
        });
    }
    Ok(out)
}

/// Random crops of consecutive frames from every clip. Clips that are too
/// short, too small or fail probing are skipped and logged. Deterministic
/// under `seed` for any `jobs`.
pub fn build_dataset(
    clips: &[(String, Clip)],
    patch_size: usize,
    samples_per_clip: usize,
    probe: &ProbeConfig,
    seed: u64,
    jobs: usize,
) -> Result<Dataset> {
    if patch_size == 0 || samples_per_clip == 0 {
        return Err(Error::Config("patch size and samples per clip must be positive".into()));
    }
    let per_clip = parallel_map(clips, jobs, |i, (id, clip)| {
        clip_samples(i, id, clip, patch_size, samples_per_clip, probe, seed)
    });
    let mut ds = Dataset::default();
    for ((id, _), r) in clips.iter().zip(per_clip) {
        match r {
            Ok(samples) => ds.samples.extend(samples),
            Err(reason) => {
                log::warn!("skipping clip {id}: {reason}");
                ds.skipped.push((id.clone(), reason));
            }
        }
    }
    Ok(ds)
}

/// [`build_dataset`] over files; unreadable clips are skipped like short ones.
pub fn build_dataset_from_paths(
    paths: &[PathBuf],
    patch_size: usize,
    samples_per_clip: usize,
    probe: &ProbeConfig,
    seed: u64,
    jobs: usize,
) -> Result<Dataset> {
    let mut clips = Vec::new();
    let mut unreadable = Vec::new();
    for p in paths {
        let id = p.display().to_string();
        match read_clip(p, None) {
            Ok(c) => clips.push((id, c)),
            Err(e) => {
                log::warn!("skipping clip {id}: {e}");
                unreadable.push((id, e.to_string()));
            }
        }
    }
    let mut ds = build_dataset(&clips, patch_size, samples_per_clip, probe, seed, jobs)?;
    ds.skipped.extend(unreadable);
    Ok(ds)
}

/// Parameters of all three networks plus the feature normaliser.
#[derive(Clone, Debug)]
pub struct TdpModels {
    pub model: ModelConfig,
    pub store: ParamStore<f32>,
    pub normalizer: FeatureNormalizer,
}

impl TdpModels {
    pub fn new(model: &ModelConfig, normalizer: FeatureNormalizer, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, STREAM_INIT]));
        let mut store = ParamStore::new();
        model.fen().init(&mut store, &mut rng)?;
        model.dpn().init(&mut store, &mut rng, model.dpn_zero_tail)?;
        model.sim().init(&mut store, &mut rng)?;
        Ok(Self {
            model: model.clone(),
            store,
            normalizer,
        })
    }

    /// Parameters with model config, normaliser and `step` in the metadata.
    pub fn to_checkpoint(&self, include_optimizer: bool, step: u64) -> Result<Checkpoint> {
        let mut ck = self.store.to_checkpoint(include_optimizer);
        ck.metadata.insert("model".into(), serde_json::to_value(&self.model)?);
        ck.metadata.insert("normalizer".into(), serde_json::to_value(&self.normalizer)?);
        ck.metadata.insert("step".into(), step.into());
        Ok(ck)
    }

    /// Rebuilds models from a checkpoint; returns them with the stored step.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, u64)> {
        let meta = |k: &str| {
            ck.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks `{k}`")))
        };
        let model: ModelConfig =
            serde_json::from_value(meta("model")?).map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let normalizer: FeatureNormalizer = serde_json::from_value(meta("normalizer")?)
            .map_err(|e| Error::Checkpoint(format!("normalizer: {e}")))?;
        let step = meta("step")?
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("step is not an integer".into()))?;
        let mut models = Self::new(&model, normalizer, 0)?;
        models.store.load_checkpoint(ck)?;
        Ok((models, step))
    }

    pub fn load(path: &Path) -> Result<(Self, u64)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// `f_d` predicted for one feature vector.
    pub fn intensity(&self, features: &FeatureVector) -> Result<f64> {
        self.model.fen().infer(&self.store, &self.normalizer, features)
    }

    pub fn preprocess(&self, clip: &Clip, qp: f64, opts: &PreprocessOptions) -> Result<Preprocessed> {
        preprocess_clip(
            &self.model.fen(),
            &self.model.dpn(),
            &self.store,
            &self.normalizer,
            clip,
            qp,
            opts,
        )
    }

    /// Freezes whatever has no gradient path: the FEN without DPI, and both
    /// preprocessing networks during simulator warm-up.
    pub fn configure_trainable(&mut self, toggles: &Toggles, freeze_simulator: bool, warmup: bool) {
        self.store.set_frozen(FEN_PREFIX, warmup || !toggles.enable_dpi);
        self.store.set_frozen(DPN_PREFIX, warmup);
        self.store.set_frozen(SIM_PREFIX, freeze_simulator);
        self.store.set_frozen(PRIOR_PREFIX, freeze_simulator);
    }
}

/// Per-step record; one CSV row per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub step: u64,
    pub loss: f64,
    pub distortion: f64,
    pub rate: f64,
    pub lambda: f64,
    pub f_d: f64,
    pub f_q: f64,
    pub qp: f64,
    pub clip_id: String,
}

/// Samples consumed at `step`: consecutive positions in a stream of
/// per-epoch shuffles.
pub fn step_indices(n: usize, per_step: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..per_step as u64)
        .map(|k| {
            let pos = step * per_step as u64 + k;
            let epoch = pos / n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, STREAM_ORDER, epoch])));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("set above").1[(pos % n as u64) as usize]
        })
        .collect()
}

struct Forward {
    total: f64,
    distortion: f64,
    rate: f64,
    lambda: f64,
    f_d: f64,
    f_q: f64,
}

/// `P(x)` on the graph with `f_d` from the FEN or the fixed fallback.
fn preprocess_graph(
    models: &TdpModels,
    g: &Graph<f32>,
    bound: &Bound,
    x: Var,
    sample: &TrainSample,
    t: &Toggles,
) -> Result<(Var, f64)> {
    let f_d = if t.enable_dpi {
        let feats = g.constant(models.normalizer.batch_tensor(std::slice::from_ref(&sample.features))?);
        let fd = models.model.fen().forward(g, bound, feats)?;
        g.reshape(fd, vec![1, 1, 1, 1])?
    } else {
        g.constant(Tensor::full(vec![1, 1, 1, 1], t.fixed_f_d as f32))
    };
    let x_m = models.model.dpn().mask(g, bound, x)?;
    Ok((apply_intensity(g, x, x_m, f_d)?, g.item(f_d)? as f64))
}

fn forward_backward(
    models: &mut TdpModels,
    sample: &TrainSample,
    cfg: &TdpConfig,
    warmup: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Forward> {
    let t = &cfg.toggles;
    // Under the fidelity objective the simulator gets its own pass below,
    // so here only FEN/DPN are differentiable. During warm-up `P(x) = x`
    // and both objectives coincide.
    let split = !warmup && cfg.train.simulator_objective == SimObjective::Fidelity;
    let g = Graph::<f32>::new();
    let bound = if split {
        models.store.bind_where(&g, |n| !is_simulator_param(n))
    } else {
        models.store.bind(&g)
    };
    let x = g.constant(sample.batch()?);
    let (p, f_d) = if warmup {
        (x, 0.0)
    } else {
        preprocess_graph(models, &g, &bound, x, sample, t)?
    };
    let fq = dynamic_quant_level(if t.enable_dql { sample.qp } else { t.fixed_f_q })?;
    let lambda = if t.enable_dlamt {
        cfg.lambda.lambda(sample.qp)
    } else {
        t.fixed_lambda
    };
    let sim = models.model.sim().simulate(&g, &bound, p, fq, QuantMode::Train, rng)?;
    let loss = rd_loss(&g, x, sim.reconstruction, sim.rate_bits, lambda, sample.patches.len())?;
    let out = Forward {
        total: loss.terms.total,
        distortion: loss.terms.distortion,
        rate: loss.terms.rate,
        lambda,
        f_d,
        f_q: fq.value(),
    };
    if !loss.terms.is_finite() {
        return Ok(out);
    }
    let mut grads = g.backward(loss.total)?;
    models.store.accumulate_grads(&bound, &mut grads)?;
    if split && !cfg.train.freeze_simulator {
        let p_value = g.value(p).clone();
        simulator_fidelity_pass(models, p_value, fq, lambda, sample.patches.len(), rng)?;
    }
    Ok(out)
}

fn is_simulator_param(name: &str) -> bool {
    name.starts_with(SIM_PREFIX) || name.starts_with(PRIOR_PREFIX)
}

/// Simulator-only update: code the (fixed) preprocessed input and
/// reconstruct it, `d(P(x), C(P(x))) + lambda * R`.
fn simulator_fidelity_pass(
    models: &mut TdpModels,
    input: Tensor<f32>,
    fq: QuantLevel,
    lambda: f64,
    rate_units: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let g = Graph::<f32>::new();
    let bound = models.store.bind_where(&g, is_simulator_param);
    let p = g.constant(input);
    let sim = models.model.sim().simulate(&g, &bound, p, fq, QuantMode::Train, rng)?;
    let loss = rd_loss(&g, p, sim.reconstruction, sim.rate_bits, lambda, rate_units)?;
    if !loss.terms.is_finite() {
        return Err(Error::NonFinite {
            step: models.store.adam_steps(),
            diagnostic: "simulator fidelity loss is not finite".into(),
        });
    }
    let mut grads = g.backward(loss.total)?;
    models.store.accumulate_grads(&bound, &mut grads)
}

/// One optimizer step over `train.accumulate` samples chosen for `step`.
/// On a non-finite loss or update the parameters are left as they were
/// and [`Error::NonFinite`] is returned.
pub fn train_step(models: &mut TdpModels, dataset: &Dataset, cfg: &TdpConfig, step: u64) -> Result<MetricsRow> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    let warmup = step < cfg.train.sim_warmup_steps;
    if warmup && cfg.train.freeze_simulator {
        return Err(Error::Config("simulator warm-up needs an unfrozen simulator".into()));
    }
    models.configure_trainable(&cfg.toggles, cfg.train.freeze_simulator, warmup);
    let idx = step_indices(dataset.len(), cfg.train.accumulate, cfg.seed, step);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, STREAM_STEP, step]));
    let snapshot = models.store.clone();
    models.store.clear_grads();
    let k = idx.len() as f64;
    let mut row = MetricsRow {
        schema_version: METRICS_SCHEMA_VERSION,
        step,
        loss: 0.0,
        distortion: 0.0,
        rate: 0.0,
        lambda: 0.0,
        f_d: 0.0,
        f_q: 0.0,
        qp: 0.0,
        clip_id: String::new(),
    };
    let mut ids = Vec::new();
    for &i in &idx {
        let s = &dataset.samples[i];
        let f = forward_backward(models, s, cfg, warmup, &mut rng)?;
        if !f.total.is_finite() {
            models.store = snapshot;
            return Err(Error::NonFinite {
                step,
                diagnostic: format!(
                    "sample {} (clip {}): D={} R={} lambda={} f_d={} f_q={}",
                    i, s.clip_id, f.distortion, f.rate, f.lambda, f.f_d, f.f_q
                ),
            });
        }
        row.loss += f.total / k;
        row.distortion += f.distortion / k;
        row.rate += f.rate / k;
        row.lambda += f.lambda / k;
        row.f_d += f.f_d / k;
        row.f_q += f.f_q / k;
        row.qp += s.qp / k;
        ids.push(s.clip_id.as_str());
    }
    row.clip_id = ids.join(";");
    if idx.len() > 1 {
        models.store.scale_grads(1.0 / k);
    }
    models.store.adam_step(cfg.train.lr)?;
    if !models.store.all_finite() {
        models.store = snapshot;
        return Err(Error::NonFinite {
            step,
            diagnostic: "parameter update produced non-finite values".into(),
        });
    }
    Ok(row)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from `checkpoint.tdpc` in the output directory if present.
    pub resume: bool,
    /// Stop after this many total steps (for interruption tests).
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub start_step: u64,
    pub end_step: u64,
    /// Rows produced by this invocation.
    pub rows: Vec<MetricsRow>,
    pub models: TdpModels,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics<R: std::io::Read>(r: R) -> Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    parse_metrics(fs::File::open(path).map_err(|e| Error::io(path, e))?)
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn append_metrics(path: &Path, row: &MetricsRow) -> Result<()> {
    let f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    w.serialize(row)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn fresh_models(cfg: &TdpConfig, dataset: &Dataset) -> Result<TdpModels> {
    let normalizer = match FeatureNormalizer::fit(&dataset.features()) {
        Ok(n) => n,
        Err(e) => {
            log::warn!("using identity feature normalizer: {e}");
            FeatureNormalizer::identity()
        }
    };
    TdpModels::new(&cfg.model, normalizer, cfg.seed)
}

/// Runs `train.steps` optimizer steps into `out_dir`, writing
/// `checkpoint.tdpc` every `train.checkpoint_every` steps and at the end,
/// plus `metrics.csv`, `normalizer.json` and `config.toml`. With `resume`
/// the run continues from the saved step and replays identically.
pub fn train(cfg: &TdpConfig, dataset: &Dataset, out_dir: &Path, opts: TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    let (mut models, start) = if opts.resume && ck_path.exists() {
        let (models, step) = TdpModels::load(&ck_path)?;
        let kept: Vec<MetricsRow> = if metrics_path.exists() {
            read_metrics(&metrics_path)?.into_iter().filter(|r| r.step < step).collect()
        } else {
            Vec::new()
        };
        write_metrics(&metrics_path, &kept)?;
        log::info!("resuming from step {step}");
        (models, step)
    } else {
        write_metrics(&metrics_path, &[])?;
        (fresh_models(cfg, dataset)?, 0)
    };
    write_atomic(&out_dir.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    write_atomic(&out_dir.join(NORMALIZER_FILE), models.normalizer.to_json()?.as_bytes())?;
    // csv writes the header lazily, so an empty metrics file needs one.
    if fs::metadata(&metrics_path).map(|m| m.len() == 0).unwrap_or(true) {
        let mut f = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(f, "schema_version,step,loss,distortion,rate,lambda,f_d,f_q,qp,clip_id")
            .map_err(|e| Error::io(&metrics_path, e))?;
    }
    let end = opts.stop_after.map_or(cfg.train.steps, |s| s.min(cfg.train.steps));
    let mut rows = Vec::new();
    for step in start..end {
        let row = train_step(&mut models, dataset, cfg, step)?;
        append_metrics(&metrics_path, &row)?;
        log::debug!("step {step} loss {:.6} D {:.6} R {:.3} f_d {:.4}", row.loss, row.distortion, row.rate, row.f_d);
        rows.push(row);
        let done = step + 1;
        if done % cfg.train.checkpoint_every == 0 || done == end {
            write_atomic(&ck_path, &models.to_checkpoint(true, done)?.encode())?;
        }
    }
    Ok(TrainReport {
        start_step: start,
        end_step: end.max(start),
        rows,
        models,
    })
}

/// One Table 3 configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub name: &'static str,
    pub dpi: bool,
    pub dql: bool,
    pub dlamt: bool,
}

/// Each control alone, then all three together.
pub const ABLATION_ROWS: [AblationRow; 4] = [
    AblationRow { name: "dpi", dpi: true, dql: false, dlamt: false },
    AblationRow { name: "dql", dpi: false, dql: true, dlamt: false },
    AblationRow { name: "dlamt", dpi: false, dql: false, dlamt: true },
    AblationRow { name: "full", dpi: true, dql: true, dlamt: true },
];

impl AblationRow {
    pub fn apply(&self, cfg: &TdpConfig) -> Result<TdpConfig> {
        let mut c = cfg.clone();
        c.toggles.enable_dpi = self.dpi;
        c.toggles.enable_dql = self.dql;
        c.toggles.enable_dlamt = self.dlamt;
        c.validate()?;
        Ok(c)
    }
}

/// Trains one bundle per ablation row under `out_root/<row name>`.
pub fn run_ablation(cfg: &TdpConfig, dataset: &Dataset, out_root: &Path) -> Result<Vec<(AblationRow, PathBuf)>> {
    let mut out = Vec::new();
    for row in ABLATION_ROWS {
        let dir = out_root.join(row.name);
        log::info!("ablation row {}", row.name);
        train(&row.apply(cfg)?, dataset, &dir, TrainOptions::default())?;
        out.push((row, dir));
    }
    Ok(out)
}

/// Mean predicted `f_d` over clips, each analysed with its own probed QP.
pub fn mean_intensity(models: &TdpModels, clips: &[&Clip], probe: &ProbeConfig) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::InvalidInput("no clips".into()));
    }
    let mut acc = 0.0;
    for c in clips {
        let qp = probe_qp(c, probe)?.clip_qp;
        acc += models.intensity(&extract_features(c, qp)?.features)?;
    }
    Ok(acc / clips.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preanalysis::ProbeConfig;

    fn tiny_cfg() -> TdpConfig {
        TdpConfig::default()
            .with_overrides(&[
                "model.dpn_channels=2",
                "model.dpn_blocks=1",
                "model.sim_channels=4",
                "model.sim_latent_channels=2",
                "train.patch_size=16",
                "train.samples_per_clip=2",
                "train.steps=6",
                "train.checkpoint_every=4",
                "train.lr=0.001",
            ])
            .unwrap()
    }

    fn corpus(frames: usize) -> Vec<(String, Clip)> {
        synthetic_corpus(1, 24, 20, frames, 5)
            .unwrap()
            .into_iter()
            .map(|s| (s.id, s.clip))
            .collect()
    }

    fn dataset(cfg: &TdpConfig) -> Dataset {
        build_dataset(
            &corpus(5),
            cfg.train.patch_size,
            cfg.train.samples_per_clip,
            &ProbeConfig::fallback_only(),
            cfg.seed,
            1,
        )
        .unwrap()
    }

    #[test]
    fn samples_are_three_consecutive_patches() {
        let clips = vec![("ten".to_string(), synthetic_clip(Stratum::Noise, 32, 32, 10, 1).unwrap())];
        let ds = build_dataset(&clips, 16, 2, &ProbeConfig::fallback_only(), 0, 1).unwrap();
        assert_eq!(ds.len(), 2);
        let clip = &clips[0].1;
        for s in &ds.samples {
            assert_eq!(s.patches.len(), 3);
            for (k, p) in s.patches.iter().enumerate() {
                assert_eq!(p.shape(), &[16, 16]);
                assert_eq!(p, &crop(&clip.luma(s.start_frame + k), s.top, s.left, 16));
            }
            assert!(s.start_frame + 3 <= 10);
        }
    }

    #[test]
    fn manifest_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_cfg();
        let a = dataset(&cfg).manifest_hash();
        assert_eq!(a, dataset(&cfg).manifest_hash());
        let parallel = build_dataset(&corpus(5), 16, 2, &ProbeConfig::fallback_only(), cfg.seed, 3).unwrap();
        assert_eq!(a, parallel.manifest_hash());
        let other = build_dataset(&corpus(5), 16, 2, &ProbeConfig::fallback_only(), 99, 1).unwrap();
        assert_ne!(a, other.manifest_hash());
    }

    #[test]
    fn short_and_small_clips_are_skipped() {
        let mut clips = corpus(2);
        clips.push(("big".into(), synthetic_clip(Stratum::Flat, 16, 16, 4, 0).unwrap()));
        clips.push(("small".into(), synthetic_clip(Stratum::Flat, 8, 8, 4, 0).unwrap()));
        let ds = build_dataset(&clips, 16, 1, &ProbeConfig::fallback_only(), 0, 1).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.skipped.len(), 4);
    }

    #[test]
    fn generator_strata_are_ordered_by_complexity() {
        let c = synthetic_corpus(2, 32, 32, 4, 3).unwrap();
        assert_eq!(c.len(), 6);
        let feats = |st: Stratum| -> Vec<FeatureVector> {
            c.iter()
                .filter(|s| s.stratum == st)
                .map(|s| extract_features(&s.clip, 0.0).unwrap().features)
                .collect()
        };
        let (flat, grad, noise) = (feats(Stratum::Flat), feats(Stratum::Gradient), feats(Stratum::Noise));
        for f in &flat {
            assert_eq!((f.si_avg, f.ti_avg), (0.0, 0.0));
        }
        let max_grad = grad.iter().fold(0.0f64, |m, f| m.max(f.si_avg).max(f.ti_avg));
        assert!(grad.iter().all(|f| f.si_avg > 0.0));
        assert!(noise.iter().all(|f| f.si_avg > max_grad && f.ti_avg > max_grad));
    }

    #[test]
    fn step_indices_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| step_indices(10, 2, 7, s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(step_indices(10, 2, 7, 3), step_indices(10, 2, 7, 3));
    }

    #[test]
    fn first_step_is_finite_and_updates_parameters() {
        let cfg = tiny_cfg();
        let ds = dataset(&cfg);
        let mut m = fresh_models(&cfg, &ds).unwrap();
        let before = m.store.get("dpn.tail.w").unwrap().clone();
        let row = train_step(&mut m, &ds, &cfg, 0).unwrap();
        assert!(row.loss.is_finite() && row.f_d > 0.0 && row.f_d < 1.0);
        assert_ne!(m.store.get("dpn.tail.w").unwrap(), &before);
    }

    #[test]
    fn simulator_objective_changes_only_simulator_updates() {
        let fidelity = tiny_cfg();
        let joint = fidelity.with_overrides(&["train.simulator_objective=joint"]).unwrap();
        let ds = dataset(&fidelity);
        let mut a = fresh_models(&fidelity, &ds).unwrap();
        let mut b = fresh_models(&joint, &ds).unwrap();
        train_step(&mut a, &ds, &fidelity, 0).unwrap();
        train_step(&mut b, &ds, &joint, 0).unwrap();
        let mut sim_differs = false;
        for name in a.store.names() {
            let (va, vb) = (a.store.get(name).unwrap(), b.store.get(name).unwrap());
            if is_simulator_param(name) {
                sim_differs |= va != vb;
            } else {
                assert_eq!(va, vb, "{name}");
            }
        }
        assert!(sim_differs);
    }

    #[test]
    fn static_baseline_uses_fixed_values_and_freezes_fen() {
        let cfg = tiny_cfg()
            .with_overrides(&["toggles.enable_dpi=false", "toggles.enable_dql=false", "toggles.enable_dlamt=false"])
            .unwrap();
        let ds = dataset(&cfg);
        let mut m = fresh_models(&cfg, &ds).unwrap();
        let fen_before = m.store.get("fen.w1").unwrap().clone();
        let row = train_step(&mut m, &ds, &cfg, 0).unwrap();
        assert_eq!((row.f_d, row.f_q, row.lambda), (1.0, 30.0, 1e-4));
        assert_eq!(m.store.get("fen.w1").unwrap(), &fen_before);
    }

    #[test]
    fn non_finite_step_restores_parameters() {
        let cfg = tiny_cfg();
        let mut ds = dataset(&cfg);
        for s in &mut ds.samples {
            s.patches[0].data_mut()[0] = f64::NAN;
        }
        let mut m = fresh_models(&cfg, &ds).unwrap();
        let before = m.store.to_checkpoint(true).encode();
        assert!(matches!(train_step(&mut m, &ds, &cfg, 0), Err(Error::NonFinite { step: 0, .. })));
        assert_eq!(m.store.to_checkpoint(true).encode(), before);
    }

    #[test]
    fn resume_replays_bitwise_and_metrics_match_steps() {
        let cfg = tiny_cfg();
        let ds = dataset(&cfg);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let full = train(&cfg, &ds, a.path(), TrainOptions::default()).unwrap();
        let ck = b.path().join(CHECKPOINT_FILE);
        train(&cfg, &ds, b.path(), TrainOptions { resume: false, stop_after: Some(4) }).unwrap();
        let at4 = fs::read(&ck).unwrap();
        train(&cfg, &ds, b.path(), TrainOptions { resume: true, stop_after: Some(5) }).unwrap();
        // Crash after step 4 logged its row but before its checkpoint landed.
        fs::write(&ck, at4).unwrap();
        assert_eq!(read_metrics(&b.path().join(METRICS_FILE)).unwrap().len(), 5);
        let resumed = train(&cfg, &ds, b.path(), TrainOptions { resume: true, stop_after: None }).unwrap();
        assert_eq!(resumed.start_step, 4);
        assert_eq!(
            full.models.to_checkpoint(true, 6).unwrap().encode(),
            resumed.models.to_checkpoint(true, 6).unwrap().encode()
        );
        let ma = read_metrics(&a.path().join(METRICS_FILE)).unwrap();
        let mb = read_metrics(&b.path().join(METRICS_FILE)).unwrap();
        assert_eq!(ma.len(), 6);
        assert_eq!(ma, mb);
        assert!(b.path().join(NORMALIZER_FILE).exists() && b.path().join(CONFIG_FILE).exists());
    }

    #[test]
    fn checkpoint_round_trip_preserves_inference() {
        let cfg = tiny_cfg();
        let ds = dataset(&cfg);
        let m = fresh_models(&cfg, &ds).unwrap();
        let (back, step) = TdpModels::from_checkpoint(&m.to_checkpoint(false, 3).unwrap()).unwrap();
        assert_eq!(step, 3);
        let f = ds.samples[0].features;
        assert_eq!(m.intensity(&f).unwrap(), back.intensity(&f).unwrap());
        assert!(matches!(TdpModels::load(Path::new("/nonexistent/x.tdpc")), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn ablation_rows_match_table() {
        let flags: Vec<(bool, bool, bool)> = ABLATION_ROWS.iter().map(|r| (r.dpi, r.dql, r.dlamt)).collect();
        assert_eq!(
            flags,
            vec![(true, false, false), (false, true, false), (false, false, true), (true, true, true)]
        );
        let cfg = tiny_cfg().with_overrides(&["train.steps=1"]).unwrap();
        let ds = dataset(&cfg);
        let root = tempfile::tempdir().unwrap();
        let bundles = run_ablation(&cfg, &ds, root.path()).unwrap();
        assert_eq!(bundles.len(), 4);
        for (_, dir) in bundles {
            assert!(dir.join(CHECKPOINT_FILE).exists());
            assert_eq!(read_metrics(&dir.join(METRICS_FILE)).unwrap().len(), 1);
        }
    }
}
