//! Rate-distortion objective: MS-SSIM distortion, the QP-driven
//! Lagrange multiplier, and their combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Canonical per-scale exponents, finest first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Per-scale terms are floored here before exponentiation.
pub const SSIM_TERM_FLOOR: f64 = 1e-6;

/// `log10(lambda) = k * qp + b`, with `qp` clamped to `(0, qp_max]` and the
/// result clamped to `(lambda_min, lambda_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaMap {
    pub k: f64,
    pub b: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub qp_max: f64,
}

/// Smallest QP the map is evaluated at.
pub const QP_EPSILON: f64 = 1e-12;

impl Default for LambdaMap {
    fn default() -> Self {
        Self {
            k: 0.12,
            b: -8.0,
            lambda_min: 1e-8,
            lambda_max: 1e-2,
            qp_max: 50.0,
        }
    }
}

impl LambdaMap {
    pub fn lambda(&self, qp: f64) -> f64 {
        let qp = if qp.is_nan() { QP_EPSILON } else { qp.clamp(QP_EPSILON, self.qp_max) };
        let l = 10f64.powf(self.k * qp + self.b);
        if l <= self.lambda_min {
            // Stay inside the open lower end.
            self.lambda_min.next_up()
        } else {
            l.min(self.lambda_max)
        }
    }
}

pub fn lambda_adapt(qp: f64) -> f64 {
    LambdaMap::default().lambda(qp)
}

/// Number of MS-SSIM scales for a given smaller image side: the largest
/// `m <= 5` whose coarsest level, `ceil(side / 2^(m-1))`, still fits the
/// 11-tap window.
pub fn ms_ssim_scales(min_side: usize) -> Result<usize> {
    let fits = |m: usize| min_side.div_ceil(1 << (m - 1)) >= SSIM_WINDOW;
    if !fits(1) {
        return Err(Error::Shape(format!(
            "MS-SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, smaller side is {min_side}"
        )));
    }
    Ok((1..=MS_SSIM_WEIGHTS.len()).rev().find(|&m| fits(m)).unwrap_or(1))
}

/// The first `scales` canonical weights, renormalised to sum to one.
pub fn ms_ssim_weights(scales: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..scales.clamp(1, MS_SSIM_WEIGHTS.len())];
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut t = [0.0; SSIM_WINDOW];
    for (i, v) in t.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

fn blur<T: Real>(g: &Graph<T>, x: Var) -> Result<Var> {
    let taps = gaussian_taps();
    let row = Tensor::from_fn(vec![1, 1, 1, SSIM_WINDOW], |i| T::from_f64_lossy(taps[i]));
    let col = Tensor::from_fn(vec![1, 1, SSIM_WINDOW, 1], |i| T::from_f64_lossy(taps[i]));
    let x = g.conv2d(x, g.constant(row), 1, 0)?;
    g.conv2d(x, g.constant(col), 1, 0)
}

/// Per-sample `(cs, ssim)` means at one scale, each `[N]`.
fn ssim_terms<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<(Var, Var)> {
    let c1 = T::from_f64_lossy(SSIM_C1);
    let c2 = T::from_f64_lossy(SSIM_C2);
    let mu_a = blur(g, a)?;
    let mu_b = blur(g, b)?;
    let mu_aa = g.square(mu_a);
    let mu_bb = g.square(mu_b);
    let mu_ab = g.mul(mu_a, mu_b)?;
    let s_aa = g.sub(blur(g, g.square(a))?, mu_aa)?;
    let s_bb = g.sub(blur(g, g.square(b))?, mu_bb)?;
    let s_ab = g.sub(blur(g, g.mul(a, b)?)?, mu_ab)?;
    let cs_num = g.add_const(g.scale(s_ab, T::from_f64_lossy(2.0)), c2);
    let cs_den = g.add_const(g.add(s_aa, s_bb)?, c2);
    let cs = g.div(cs_num, cs_den)?;
    let l_num = g.add_const(g.scale(mu_ab, T::from_f64_lossy(2.0)), c1);
    let l_den = g.add_const(g.add(mu_aa, mu_bb)?, c1);
    let l = g.div(l_num, l_den)?;
    let ssim = g.mul(l, cs)?;
    Ok((g.mean_per_sample(cs)?, g.mean_per_sample(ssim)?))
}

/// Per-sample MS-SSIM of `[N, 1, H, W]` images in `[0, 1]`, shaped `[N]`.
pub fn ms_ssim<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<Var> {
    let shape = g.shape(a);
    if shape != g.shape(b) {
        return Err(Error::Shape(format!("MS-SSIM inputs differ: {shape:?} vs {:?}", g.shape(b))));
    }
    let [_, 1, h, w] = shape[..] else {
        return Err(Error::Shape(format!("MS-SSIM expects [N, 1, H, W], got {shape:?}")));
    };
    let scales = ms_ssim_scales(h.min(w))?;
    let weights = ms_ssim_weights(scales);
    let floor = T::from_f64_lossy(SSIM_TERM_FLOOR);
    let (mut a, mut b) = (a, b);
    let mut acc: Option<Var> = None;
    for (j, &wj) in weights.iter().enumerate() {
        let (cs, ssim) = ssim_terms(g, a, b)?;
        let term = if j + 1 == scales { ssim } else { cs };
        let term = g.powf(g.clamp_min(term, floor), T::from_f64_lossy(wj));
        acc = Some(match acc {
            Some(p) => g.mul(p, term)?,
            None => term,
        });
        if j + 1 < scales {
            a = g.avg_pool2(a)?;
            b = g.avg_pool2(b)?;
        }
    }
    Ok(acc.expect("at least one scale"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdLossTerms {
    /// `1 - MS-SSIM`, averaged over the batch.
    pub distortion: f64,
    /// Bits per rate unit; training uses bits per frame patch.
    pub rate: f64,
    pub lambda: f64,
    pub total: f64,
}

impl RdLossTerms {
    pub fn is_finite(&self) -> bool {
        self.distortion.is_finite() && self.rate.is_finite() && self.lambda.is_finite() && self.total.is_finite()
    }
}

pub struct RdLoss {
    pub total: Var,
    pub terms: RdLossTerms,
}

/// `D + lambda * R` with `D = 1 - mean MS-SSIM(recon, x)` and
/// `R = rate_bits / rate_units`.
pub fn rd_loss<T: Real>(
    g: &Graph<T>,
    x: Var,
    recon: Var,
    rate_bits: Var,
    lambda: f64,
    rate_units: usize,
) -> Result<RdLoss> {
    if rate_units == 0 {
        return Err(Error::InvalidInput("rate units must be positive".into()));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("lambda {lambda} must be finite and non-negative")));
    }
    let score = g.mean(ms_ssim(g, recon, x)?);
    let d = g.add_const(g.neg(score), T::one());
    let r = g.scale(rate_bits, T::from_f64_lossy(1.0 / rate_units as f64));
    let total = g.add(d, g.scale(r, T::from_f64_lossy(lambda)))?;
    let val = |v: Var| -> Result<f64> { Ok(g.item(v)?.to_f64().unwrap_or(f64::NAN)) };
    let terms = RdLossTerms {
        distortion: val(d)?,
        rate: val(r)?,
        lambda,
        total: val(total)?,
    };
    Ok(RdLoss { total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, DEFAULT_FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lambda_endpoints() {
        assert!((lambda_adapt(50.0) / 1e-2 - 1.0).abs() < 1e-12);
        assert!((lambda_adapt(25.0) / 1e-5 - 1.0).abs() < 1e-12);
        let low = lambda_adapt(1e-15);
        assert!(low > 1e-8 && (low / 1e-8 - 1.0).abs() < 1e-12);
        assert_eq!(lambda_adapt(80.0), 1e-2);
        assert!(lambda_adapt(-5.0) > 1e-8);
        assert!(lambda_adapt(f64::NAN) > 1e-8);
    }

    #[test]
    fn scale_rule() {
        assert_eq!(ms_ssim_scales(161).unwrap(), 5);
        assert_eq!(ms_ssim_scales(160).unwrap(), 4);
        assert_eq!(ms_ssim_scales(128).unwrap(), 4);
        assert_eq!(ms_ssim_scales(64).unwrap(), 3);
        assert_eq!(ms_ssim_scales(48).unwrap(), 3);
        assert_eq!(ms_ssim_scales(21).unwrap(), 2);
        assert_eq!(ms_ssim_scales(11).unwrap(), 1);
        assert!(ms_ssim_scales(10).is_err());
        let w = ms_ssim_weights(3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(ms_ssim_weights(5), MS_SSIM_WEIGHTS.map(|v| v / MS_SSIM_WEIGHTS.iter().sum::<f64>()));
    }

    fn image(seed: u64, n: usize, hw: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![n, 1, hw, hw], |_| rng.random_range(0.0..1.0))
    }

    fn score(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let g = Graph::new();
        let s = ms_ssim(&g, g.constant(a.clone()), g.constant(b.clone())).unwrap();
        let v = g.value(s).data().to_vec();
        v
    }

    #[test]
    fn self_similarity_and_symmetry() {
        let a = image(1, 2, 48);
        let b = image(2, 2, 48);
        assert!(score(&a, &a).iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let (ab, ba) = (score(&a, &b), score(&b, &a));
        for (x, y) in ab.iter().zip(&ba) {
            assert!((x - y).abs() < 1e-12);
            assert!((0.0..1.0).contains(x));
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![1, 1, 10, 32]));
        assert!(ms_ssim(&g, a, a).is_err());
        let b = g.constant(Tensor::zeros(vec![1, 1, 16, 16]));
        let c = g.constant(Tensor::zeros(vec![1, 1, 16, 17]));
        assert!(ms_ssim(&g, b, c).is_err());
    }

    #[test]
    fn identical_recon_without_rate_costs_nothing() {
        let g = Graph::<f64>::new();
        let x = g.constant(image(3, 1, 32));
        let r = g.constant(Tensor::scalar(0.0));
        let loss = rd_loss(&g, x, x, r, lambda_adapt(30.0), 32 * 32).unwrap();
        assert!(loss.terms.total.abs() < 1e-12);
    }

    #[test]
    fn total_increases_with_qp() {
        let mut prev = f64::NEG_INFINITY;
        for qp in [1.0, 10.0, 20.0, 35.0, 50.0] {
            let g = Graph::<f64>::new();
            let x = g.constant(image(4, 1, 16));
            let y = g.constant(image(5, 1, 16));
            let r = g.constant(Tensor::scalar(5000.0));
            let t = rd_loss(&g, x, y, r, lambda_adapt(qp), 256).unwrap().terms;
            assert!(t.total > prev);
            assert!((t.total - (t.distortion + t.lambda * t.rate)).abs() < 1e-12);
            prev = t.total;
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let x = image(6, 1, 22);
        let y = image(7, 1, 22).map(|v| 0.5 * v + 0.25);
        let report = check_gradients(&[y, Tensor::scalar(300.0)], DEFAULT_FD_STEP, |g, v| {
            let x = g.constant(x.clone());
            Ok(rd_loss(g, x, v[0], v[1], 1e-3, 22 * 22)?.total)
        })
        .unwrap();
        assert!(report.max_relative_error() < 1e-3, "{report:?}");
    }

    proptest::proptest! {
        #[test]
        fn lambda_is_monotone_and_bounded(a in -100f64..100.0, b in -100f64..100.0) {
            let (la, lb) = (lambda_adapt(a), lambda_adapt(b));
            proptest::prop_assert!(la > 1e-8 && la <= 1e-2);
            if a <= b {
                proptest::prop_assert!(la <= lb);
            }
        }
    }
}
