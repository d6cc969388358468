//! Differentiable stand-in for a codec, used only while training: a small
//! strided-conv transform pair, scalar quantisation whose step follows the
//! quantisation level `f_q`, and a per-channel factorized prior that turns
//! quantised latents into a bit estimate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{he_normal, Bound, Graph, ParamStore, Real, Tensor, Var};

pub const QUANT_LEVEL_MIN: f64 = 1.0;
pub const QUANT_LEVEL_MAX: f64 = 50.0;
/// Latent-domain step at `f_q = 4`; with 0.125 the step is 1 at `f_q = 22`.
pub const DEFAULT_DELTA_SCALE: f64 = 0.125;
/// Floor on per-symbol likelihood, i.e. at most 50 bits per latent.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / (1u64 << 50) as f64;
pub const SIM_PREFIX: &str = "sim.";
pub const PRIOR_PREFIX: &str = "prior.";

/// Quantisation level `f_q`, always within `[1, 50]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct QuantLevel(f64);

impl QuantLevel {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `f_q = clip(qp, 1, 50)`.
pub fn dynamic_quant_level(qp: f64) -> Result<QuantLevel> {
    if !qp.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite QP {qp}")));
    }
    Ok(QuantLevel(qp.clamp(QUANT_LEVEL_MIN, QUANT_LEVEL_MAX)))
}

/// Step size `delta_scale * 2^((f_q - 4) / 6)`: doubles every 6 levels.
pub fn step_size(fq: QuantLevel, delta_scale: f64) -> f64 {
    delta_scale * ((fq.0 - 4.0) / 6.0).exp2()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Additive uniform noise on `[-step/2, step/2]`.
    Train,
    /// Rounding to the nearest multiple of the step, straight-through gradient.
    Eval,
}

pub fn quantize<T: Real>(g: &Graph<T>, latent: Var, step: f64, mode: QuantMode, rng: &mut impl Rng) -> Result<Var> {
    match mode {
        QuantMode::Train => {
            let half = step / 2.0;
            let noise = Tensor::from_fn(g.shape(latent), |_| T::from_f64_lossy(rng.random_range(-half..=half)));
            g.add(latent, g.constant(noise))
        }
        QuantMode::Eval => Ok(g.round_ste(latent, T::from_f64_lossy(step))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimModel {
    pub channels: usize,
    pub latent_channels: usize,
    /// Hidden widths of the per-channel CDF network.
    pub prior_filters: Vec<usize>,
    pub prior_init_scale: f64,
    pub delta_scale: f64,
}

impl Default for SimModel {
    fn default() -> Self {
        Self {
            channels: 32,
            latent_channels: 16,
            prior_filters: vec![3, 3, 3],
            prior_init_scale: 10.0,
            delta_scale: DEFAULT_DELTA_SCALE,
        }
    }
}

pub struct SimOutput {
    pub reconstruction: Var,
    pub rate_bits: Var,
    pub latent: Var,
    pub quantized: Var,
    pub step: f64,
}

fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl SimModel {
    fn prior_dims(&self) -> Vec<usize> {
        let mut d = vec![1];
        d.extend(&self.prior_filters);
        d.push(1);
        d
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        let (c, l) = (self.channels, self.latent_channels);
        if c == 0 || l == 0 || self.prior_filters.contains(&0) {
            return Err(Error::Config("simulator widths must be positive".into()));
        }
        if !(self.delta_scale.is_finite() && self.delta_scale > 0.0) {
            return Err(Error::Config(format!("delta_scale {} must be positive", self.delta_scale)));
        }
        store.insert("sim.a1.w", he_normal::<T>(&[c, 1, 5, 5], rng))?;
        store.insert("sim.a1.b", Tensor::zeros(vec![1, c, 1, 1]))?;
        store.insert("sim.a2.w", he_normal::<T>(&[l, c, 5, 5], rng))?;
        store.insert("sim.a2.b", Tensor::zeros(vec![1, l, 1, 1]))?;
        store.insert("sim.s1.w", he_normal::<T>(&[c, l, 5, 5], rng))?;
        store.insert("sim.s1.b", Tensor::zeros(vec![1, c, 1, 1]))?;
        let s2 = he_normal::<T>(&[1, c, 5, 5], rng).map(|v| v * T::from_f64_lossy(0.5));
        store.insert("sim.s2.w", s2)?;
        store.insert("sim.s2.b", Tensor::zeros(vec![1, 1, 1, 1]))?;

        let dims = self.prior_dims();
        let layers = dims.len() - 1;
        let scale = self.prior_init_scale.powf(1.0 / layers as f64);
        for k in 0..layers {
            let init = T::from_f64_lossy(softplus_inv(1.0 / scale / dims[k + 1] as f64));
            store.insert(format!("prior.matrix{k}"), Tensor::full(vec![l, dims[k + 1], dims[k]], init))?;
            let bias = Tensor::from_fn(vec![l, dims[k + 1], 1], |_| T::from_f64_lossy(rng.random_range(-0.5..0.5)));
            store.insert(format!("prior.bias{k}"), bias)?;
            if k + 1 < layers {
                store.insert(format!("prior.factor{k}"), Tensor::zeros(vec![l, dims[k + 1], 1]))?;
            }
        }
        Ok(())
    }

    /// `[N, 1, H, W]` to latents `[N, L, H/4, W/4]`.
    pub fn analysis<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        match g.shape(x)[..] {
            [_, 1, h, w] if h % 4 == 0 && w % 4 == 0 && h > 0 && w > 0 => {}
            ref s => {
                return Err(Error::Shape(format!(
                    "simulator input must be [N, 1, H, W] with H, W multiples of 4, got {s:?}"
                )))
            }
        }
        let y = g.add(g.conv2d(x, p.get("sim.a1.w")?, 2, 2)?, p.get("sim.a1.b")?)?;
        let y = g.relu(y);
        g.add(g.conv2d(y, p.get("sim.a2.w")?, 2, 2)?, p.get("sim.a2.b")?)
    }

    pub fn synthesis<T: Real>(&self, g: &Graph<T>, p: &Bound, y: Var) -> Result<Var> {
        let u = g.upsample2(y)?;
        let u = g.add(g.conv2d(u, p.get("sim.s1.w")?, 1, 2)?, p.get("sim.s1.b")?)?;
        let u = g.relu(u);
        let u = g.upsample2(u)?;
        g.add(g.conv2d(u, p.get("sim.s2.w")?, 1, 2)?, p.get("sim.s2.b")?)
    }

    /// Per-channel CDF logits for `v: [L, 1, M]` (channel-major values).
    pub fn cdf_logits<T: Real>(&self, g: &Graph<T>, p: &Bound, v: Var) -> Result<Var> {
        let layers = self.prior_dims().len() - 1;
        let mut h = v;
        for k in 0..layers {
            let m = g.softplus(p.get(&format!("prior.matrix{k}"))?);
            h = g.channel_dense(h, m)?;
            h = g.add(h, p.get(&format!("prior.bias{k}"))?)?;
            if k + 1 < layers {
                let f = g.tanh(p.get(&format!("prior.factor{k}"))?);
                let t = g.mul(f, g.tanh(h))?;
                h = g.add(h, t)?;
            }
        }
        Ok(h)
    }

    /// Probability mass of the bin `[v - step/2, v + step/2]` for every
    /// latent value, shaped `[L, 1, M]` with `M = N * h * w`.
    pub fn likelihood<T: Real>(&self, g: &Graph<T>, p: &Bound, y_hat: Var, step: f64) -> Result<Var> {
        let shape = g.shape(y_hat);
        let [n, l, h, w] = shape[..] else {
            return Err(Error::Shape(format!("latent must be rank 4, got {shape:?}")));
        };
        if l != self.latent_channels {
            return Err(Error::Shape(format!("latent has {l} channels, prior has {}", self.latent_channels)));
        }
        let v = g.permute(y_hat, &[1, 0, 2, 3])?;
        let v = g.reshape(v, vec![l, 1, n * h * w])?;
        let half = T::from_f64_lossy(step / 2.0);
        let lower = self.cdf_logits(g, p, g.add_const(v, -half))?;
        let upper = self.cdf_logits(g, p, g.add_const(v, half))?;
        // Evaluate on whichever tail keeps the sigmoid difference well conditioned.
        let sign = {
            let (lo, up) = (g.value(lower), g.value(upper));
            let s: Vec<T> = lo
                .data()
                .iter()
                .zip(up.data())
                .map(|(&a, &b)| if a + b > T::zero() { -T::one() } else { T::one() })
                .collect();
            Tensor::new(lo.shape().to_vec(), s)?
        };
        g.note_branches(sign.data().iter().map(|&s| (s > T::zero()) as i64));
        let sign = g.constant(sign);
        let hi = g.sigmoid(g.mul(sign, upper)?);
        let lo = g.sigmoid(g.mul(sign, lower)?);
        Ok(g.abs(g.sub(hi, lo)?))
    }

    /// `sum(-log2(max(likelihood, 2^-50)))`; floor hits are counted in
    /// [`Graph::clamp_hits`].
    pub fn rate_bits<T: Real>(&self, g: &Graph<T>, p: &Bound, y_hat: Var, step: f64) -> Result<Var> {
        let lik = self.likelihood(g, p, y_hat, step)?;
        let lik = g.clamp_min(lik, T::from_f64_lossy(LIKELIHOOD_FLOOR));
        let bits = g.log2(lik);
        Ok(g.neg(g.sum(bits)))
    }

    pub fn simulate<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        x: Var,
        fq: QuantLevel,
        mode: QuantMode,
        rng: &mut impl Rng,
    ) -> Result<SimOutput> {
        let step = step_size(fq, self.delta_scale);
        let latent = self.analysis(g, p, x)?;
        let quantized = quantize(g, latent, step, mode, rng)?;
        let reconstruction = self.synthesis(g, p, quantized)?;
        let rate_bits = self.rate_bits(g, p, quantized, step)?;
        Ok(SimOutput {
            reconstruction,
            rate_bits,
            latent,
            quantized,
            step,
        })
    }
}
