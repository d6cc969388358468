//! Dynamic preprocessing network: a residual CNN producing a bounded mask
//! `x_m`, and the intensity-scaled application `P(x) = f_d * x_m + x`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fen::{FeatureNormalizer, FenModel};
use crate::numerics::{he_normal, Bound, Graph, ParamStore, Real, Tensor, Var};
use crate::preanalysis::{extract_features, FeatureVector};
use crate::video_io::{from_normalized_luma, Clip, Frame};

pub const DEFAULT_CHANNELS: usize = 32;
pub const DEFAULT_BLOCKS: usize = 4;
pub const DPN_PREFIX: &str = "dpn.";
pub const MIN_PATCH: usize = 16;
/// Frames are processed in tiles of this size (plus halo) at inference.
pub const INFERENCE_TILE: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpnModel {
    pub channels: usize,
    pub blocks: usize,
}

impl Default for DpnModel {
    fn default() -> Self {
        Self {
            channels: DEFAULT_CHANNELS,
            blocks: DEFAULT_BLOCKS,
        }
    }
}

impl DpnModel {
    /// Pixels of context each output depends on, per side.
    pub fn receptive_radius(&self) -> usize {
        2 + 2 * self.blocks
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng, zero_tail: bool) -> Result<()> {
        let c = self.channels;
        if c == 0 {
            return Err(Error::Config("DPN channel width must be positive".into()));
        }
        store.insert("dpn.head.w", he_normal::<T>(&[c, 1, 3, 3], rng))?;
        store.insert("dpn.head.b", Tensor::zeros(vec![1, c, 1, 1]))?;
        for i in 0..self.blocks {
            store.insert(format!("dpn.block{i}.w1"), he_normal::<T>(&[c, c, 3, 3], rng))?;
            store.insert(format!("dpn.block{i}.b1"), Tensor::zeros(vec![1, c, 1, 1]))?;
            // Damped second conv keeps the residual stack near identity at init.
            let w2 = he_normal::<T>(&[c, c, 3, 3], rng).map(|v| v * T::from_f64_lossy(0.1));
            store.insert(format!("dpn.block{i}.w2"), w2)?;
            store.insert(format!("dpn.block{i}.b2"), Tensor::zeros(vec![1, c, 1, 1]))?;
        }
        let tail = if zero_tail {
            Tensor::zeros(vec![1, c, 3, 3])
        } else {
            he_normal::<T>(&[1, c, 3, 3], rng).map(|v| v * T::from_f64_lossy(0.1))
        };
        store.insert("dpn.tail.w", tail)?;
        store.insert("dpn.tail.b", Tensor::zeros(vec![1, 1, 1, 1]))?;
        Ok(())
    }

    /// `x: [N, 1, H, W]` to the mask `x_m` of the same shape, in `[-1, 1]`.
    pub fn mask<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        match g.shape(x)[..] {
            [_, 1, h, w] if h >= MIN_PATCH && w >= MIN_PATCH => {}
            ref s => {
                return Err(Error::Shape(format!(
                    "DPN input must be [N, 1, H, W] with H, W >= {MIN_PATCH}, got {s:?}"
                )))
            }
        }
        let conv = |x: Var, w: &str, b: &str| -> Result<Var> {
            let y = g.conv2d(x, p.get(w)?, 1, 1)?;
            g.add(y, p.get(b)?)
        };
        let mut h = conv(x, "dpn.head.w", "dpn.head.b")?;
        for i in 0..self.blocks {
            let r = g.relu(conv(h, &format!("dpn.block{i}.w1"), &format!("dpn.block{i}.b1"))?);
            let r = conv(r, &format!("dpn.block{i}.w2"), &format!("dpn.block{i}.b2"))?;
            h = g.add(h, r)?;
        }
        let out = conv(h, "dpn.tail.w", "dpn.tail.b")?;
        Ok(g.tanh(out))
    }

    /// Mask for one normalised `H x W` plane without tracking gradients.
    /// Large planes are processed in overlapping tiles whose halo covers the
    /// receptive field, so the result equals a whole-plane pass.
    pub fn mask_plane<T: Real>(&self, store: &ParamStore<T>, plane: &Tensor<f64>, tile: usize) -> Result<Vec<f64>> {
        let (h, w) = match plane.shape() {
            &[h, w] => (h, w),
            s => return Err(Error::Shape(format!("expected an H x W plane, got {s:?}"))),
        };
        let tile = tile.max(1);
        let halo = self.receptive_radius();
        let mut out = vec![0.0; h * w];
        for ty in (0..h).step_by(tile) {
            for tx in (0..w).step_by(tile) {
                let (y0, y1) = (ty.saturating_sub(halo), (ty + tile + halo).min(h));
                let (x0, x1) = (tx.saturating_sub(halo), (tx + tile + halo).min(w));
                let (th, tw) = (y1 - y0, x1 - x0);
                // Tiny edge tiles fall below the minimum patch; grow them inward.
                let (y0, th) = grow(y0, th, h);
                let (x0, tw) = grow(x0, tw, w);
                let data: Vec<T> = (0..th * tw)
                    .map(|i| T::from_f64_lossy(plane.data()[(y0 + i / tw) * w + x0 + i % tw]))
                    .collect();
                let g = Graph::<T>::new();
                let p = store.bind_constants(&g);
                let x = g.constant(Tensor::new(vec![1, 1, th, tw], data)?);
                let m = self.mask(&g, &p, x)?;
                let m = g.value(m);
                for y in ty..(ty + tile).min(h) {
                    for x in tx..(tx + tile).min(w) {
                        out[y * w + x] = m.data()[(y - y0) * tw + x - x0].to_f64().unwrap_or(f64::NAN);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn grow(start: usize, len: usize, full: usize) -> (usize, usize) {
    if len >= MIN_PATCH || full < MIN_PATCH {
        return (start, len);
    }
    let start = start.min(full - MIN_PATCH);
    (start, MIN_PATCH.max(len).min(full - start))
}

/// `f_d * x_m + x` on the graph. `f_d` is a scalar or broadcasts per sample.
pub fn apply_intensity<T: Real>(g: &Graph<T>, x: Var, x_m: Var, f_d: Var) -> Result<Var> {
    if g.shape(x) != g.shape(x_m) {
        return Err(Error::Shape(format!(
            "input {:?} and mask {:?} differ",
            g.shape(x),
            g.shape(x_m)
        )));
    }
    let scaled = g.mul(f_d, x_m)?;
    g.add(scaled, x)
}

/// `f_d * x_m + x` on plain values, without clamping.
pub fn apply_intensity_values(x: &[f64], x_m: &[f64], f_d: f64) -> Result<Vec<f64>> {
    if x.len() != x_m.len() {
        return Err(Error::Shape(format!("input {} and mask {} differ", x.len(), x_m.len())));
    }
    Ok(x.iter().zip(x_m).map(|(&a, &m)| f_d * m + a).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PreprocessOptions {
    /// Overrides the FEN output when set.
    pub force_fd: Option<f64>,
    pub tile: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub clip: Clip,
    pub f_d: f64,
    pub features: FeatureVector,
}

/// Runs the inference path on every frame: features and `qp` give `f_d`
/// through the FEN, the DPN gives a per-frame mask, and luma is replaced by
/// `clamp(P(x), 0, 1)` rounded to the source bit depth. Chroma is copied.
pub fn preprocess_clip<T: Real>(
    fen: &FenModel,
    dpn: &DpnModel,
    store: &ParamStore<T>,
    normalizer: &FeatureNormalizer,
    clip: &Clip,
    qp: f64,
    opts: &PreprocessOptions,
) -> Result<Preprocessed> {
    let features = extract_features(clip, qp)?.features;
    let f_d = match opts.force_fd {
        Some(v) if v.is_finite() && (0.0..=1.0).contains(&v) => v,
        Some(v) => return Err(Error::Config(format!("forced f_d {v} outside [0, 1]"))),
        None => fen.infer(store, normalizer, &features)?,
    };
    let tile = opts.tile.unwrap_or(INFERENCE_TILE);
    let mut frames = Vec::with_capacity(clip.len());
    for (i, frame) in clip.frames().iter().enumerate() {
        let x = clip.luma(i);
        let x_m = dpn.mask_plane(store, &x, tile)?;
        let p = apply_intensity_values(x.data(), &x_m, f_d)?;
        frames.push(Frame {
            y: from_normalized_luma(&p, clip.bit_depth()),
            u: frame.u.clone(),
            v: frame.v.clone(),
        });
    }
    Ok(Preprocessed {
        clip: clip.with_frames(frames)?,
        f_d,
        features,
    })
}
