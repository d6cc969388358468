//! Rate-distortion curves and the Bjøntegaard delta rate, using monotone
//! piecewise-cubic Hermite (PCHIP) interpolation of log10 rate over
//! quality, integrated in closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_CURVE_POINTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    /// Measured, not target, bitrate.
    pub bitrate_kbps: f64,
    pub quality: f64,
    pub metric: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    pub codec: String,
    pub clip: String,
    /// Sorted by bitrate.
    pub points: Vec<RdPoint>,
    /// Non-fatal shape problems found at construction.
    pub warnings: Vec<String>,
}

impl RdCurve {
    /// Validates and sorts by bitrate. Repeated bitrates are kept with a
    /// warning (a lossless stub reports one rate for every target).
    pub fn new(codec: impl Into<String>, clip: impl Into<String>, mut points: Vec<RdPoint>) -> Result<Self> {
        if points.len() < MIN_CURVE_POINTS {
            return Err(Error::InvalidInput(format!(
                "RD curve needs at least {MIN_CURVE_POINTS} points, got {}",
                points.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !(p.bitrate_kbps.is_finite() && p.bitrate_kbps > 0.0)) {
            return Err(Error::InvalidInput(format!("bitrate {} must be positive", p.bitrate_kbps)));
        }
        if let Some(p) = points.iter().find(|p| !p.quality.is_finite()) {
            return Err(Error::InvalidInput(format!("quality {} is not finite", p.quality)));
        }
        if points.iter().any(|p| p.metric != points[0].metric) {
            return Err(Error::InvalidInput("RD curve mixes metrics".into()));
        }
        points.sort_by(|a, b| a.bitrate_kbps.total_cmp(&b.bitrate_kbps));
        let mut warnings = Vec::new();
        if points.windows(2).any(|w| w[0].bitrate_kbps == w[1].bitrate_kbps) {
            warnings.push("repeated bitrate; curve is not strictly increasing in rate".into());
        }
        Ok(Self {
            codec: codec.into(),
            clip: clip.into(),
            points,
            warnings,
        })
    }

    pub fn metric(&self) -> &str {
        &self.points[0].metric
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BdbrResult {
    /// Percent rate change of test against anchor at equal quality.
    pub value: f64,
    /// Quality interval integrated over.
    pub overlap: (f64, f64),
    /// False when the curves share no quality range; `value` is NaN.
    pub valid: bool,
    /// The overlap is a single quality level; `value` is the pointwise
    /// log-rate difference there.
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

/// Monotone cubic Hermite interpolant through `(x, y)` with strictly
/// increasing `x` (Fritsch-Carlson slopes).
#[derive(Clone, Debug, PartialEq)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

fn endpoint_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() || m0 == 0.0 {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

impl Pchip {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::InvalidInput("PCHIP needs at least 2 matching points".into()));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) || x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("PCHIP abscissae must be finite and strictly increasing".into()));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let m: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d = vec![m[0], m[0]];
        } else {
            for k in 1..n - 1 {
                if m[k - 1] * m[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / m[k - 1] + w2 / m[k]);
                }
            }
            d[0] = endpoint_slope(h[0], h[1], m[0], m[1]);
            d[n - 1] = endpoint_slope(h[n - 2], h[n - 3], m[n - 2], m[n - 3]);
        }
        Ok(Self { x, y, d })
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.x.len();
        match self.x.partition_point(|&v| v <= t) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.segment(t);
        let h = self.x[k + 1] - self.x[k];
        let s = (t - self.x[k]) / h;
        let (s2, s3) = (s * s, s * s * s);
        (2.0 * s3 - 3.0 * s2 + 1.0) * self.y[k]
            + (s3 - 2.0 * s2 + s) * h * self.d[k]
            + (-2.0 * s3 + 3.0 * s2) * self.y[k + 1]
            + (s3 - s2) * h * self.d[k + 1]
    }

    /// Exact integral of one Hermite segment from its start to `s * h`.
    fn partial(&self, k: usize, s: f64) -> f64 {
        let h = self.x[k + 1] - self.x[k];
        let (s2, s3, s4) = (s * s, s * s * s, s * s * s * s);
        h * ((s4 / 2.0 - s3 + s) * self.y[k]
            + (s4 / 4.0 - 2.0 * s3 / 3.0 + s2 / 2.0) * h * self.d[k]
            + (-s4 / 2.0 + s3) * self.y[k + 1]
            + (s4 / 4.0 - s3 / 3.0) * h * self.d[k + 1])
    }

    /// Integral over `[a, b]` within the knot range.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        let prim = |t: f64| -> f64 {
            let k = self.segment(t);
            let whole: f64 = (0..k).map(|j| self.partial(j, 1.0)).sum();
            whole + self.partial(k, (t - self.x[k]) / (self.x[k + 1] - self.x[k]))
        };
        prim(b) - prim(a)
    }
}

/// `(quality, log10 rate)` sorted by quality, equal qualities averaged.
fn log_rate_by_quality(curve: &RdCurve, warnings: &mut Vec<String>) -> (Vec<f64>, Vec<f64>) {
    let mut pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.quality, p.bitrate_kbps.log10()))
        .collect();
    if pts.windows(2).any(|w| w[1].0 < w[0].0) {
        warnings.push(format!(
            "{}/{}: quality does not increase with bitrate; sorted by quality",
            curve.codec, curve.clip
        ));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (mut q, mut r) = (Vec::new(), Vec::new());
    let mut i = 0;
    while i < pts.len() {
        let j = pts[i..].iter().take_while(|p| p.0 == pts[i].0).count();
        if j > 1 {
            warnings.push(format!(
                "{}/{}: {j} points share quality {}; log-rates averaged",
                curve.codec, curve.clip, pts[i].0
            ));
        }
        q.push(pts[i].0);
        r.push(pts[i..i + j].iter().map(|p| p.1).sum::<f64>() / j as f64);
        i += j;
    }
    (q, r)
}

fn interpolant(q: Vec<f64>, r: Vec<f64>) -> Result<Option<Pchip>> {
    if q.len() < 2 {
        return Ok(None);
    }
    Pchip::new(q, r).map(Some)
}

fn eval_at(p: &Option<Pchip>, single: f64, t: f64) -> f64 {
    p.as_ref().map_or(single, |p| p.eval(t))
}

/// Bjøntegaard delta rate of `test` against `anchor` over their shared
/// quality range.
pub fn bdbr(anchor: &RdCurve, test: &RdCurve) -> Result<BdbrResult> {
    if anchor.metric() != test.metric() {
        return Err(Error::InvalidInput(format!(
            "metric mismatch: {} vs {}",
            anchor.metric(),
            test.metric()
        )));
    }
    let mut warnings: Vec<String> = anchor.warnings.iter().chain(&test.warnings).cloned().collect();
    let (qa, ra) = log_rate_by_quality(anchor, &mut warnings);
    let (qt, rt) = log_rate_by_quality(test, &mut warnings);
    let lo = qa[0].max(qt[0]);
    let hi = qa[qa.len() - 1].min(qt[qt.len() - 1]);
    if lo > hi {
        warnings.push(format!("no quality overlap: [{lo}, {hi}]"));
        return Ok(BdbrResult {
            value: f64::NAN,
            overlap: (lo, hi),
            valid: false,
            degenerate: false,
            warnings,
        });
    }
    let (single_a, single_t) = (ra[0], rt[0]);
    let pa = interpolant(qa, ra)?;
    let pt = interpolant(qt, rt)?;
    let (avg, degenerate) = if lo == hi {
        warnings.push(format!("quality overlap is the single level {lo}"));
        (eval_at(&pt, single_t, lo) - eval_at(&pa, single_a, lo), true)
    } else {
        let (pa, pt) = (pa.expect("span > 0"), pt.expect("span > 0"));
        ((pt.integrate(lo, hi) - pa.integrate(lo, hi)) / (hi - lo), false)
    };
    Ok(BdbrResult {
        value: (10f64.powf(avg) - 1.0) * 100.0,
        overlap: (lo, hi),
        valid: true,
        degenerate,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn curve(rates: &[f64], qualities: &[f64]) -> RdCurve {
        let pts = rates
            .iter()
            .zip(qualities)
            .map(|(&r, &q)| RdPoint {
                bitrate_kbps: r,
                quality: q,
                metric: "ms_ssim".into(),
            })
            .collect();
        RdCurve::new("c", "x", pts).unwrap()
    }

    const RATES: [f64; 4] = [1000.0, 2500.0, 4000.0, 5000.0];
    const QUAL: [f64; 4] = [0.90, 0.95, 0.97, 0.98];

    #[test]
    fn identical_curves_give_zero() {
        let a = curve(&RATES, &QUAL);
        let r = bdbr(&a, &a).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.valid && !r.degenerate);
    }

    #[test]
    fn uniform_rate_scaling() {
        let a = curve(&RATES, &QUAL);
        let t = curve(&RATES.map(|r| r * 0.9), &QUAL);
        assert!((bdbr(&a, &t).unwrap().value + 10.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_quality_is_invalid() {
        let a = curve(&RATES, &QUAL);
        let t = curve(&RATES, &QUAL.map(|q| q - 0.5));
        let r = bdbr(&a, &t).unwrap();
        assert!(!r.valid && r.value.is_nan());
    }

    #[test]
    fn constant_quality_curves_are_degenerate_but_exact() {
        let a = curve(&[3000.0; 4], &[1.0; 4]);
        assert!(!a.warnings.is_empty());
        let r = bdbr(&a, &a).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.valid && r.degenerate);
        let t = curve(&[1500.0; 4], &[1.0; 4]);
        assert!((bdbr(&a, &t).unwrap().value + 50.0).abs() < 1e-9);
    }

    #[test]
    fn non_monotone_curve_warns() {
        let a = curve(&RATES, &QUAL);
        let t = curve(&RATES, &[0.90, 0.96, 0.95, 0.98]);
        let r = bdbr(&a, &t).unwrap();
        assert!(r.valid && r.warnings.iter().any(|w| w.contains("sorted by quality")));
    }

    #[test]
    fn curve_validation() {
        let p = |r: f64, q: f64, m: &str| RdPoint {
            bitrate_kbps: r,
            quality: q,
            metric: m.into(),
        };
        assert!(RdCurve::new("c", "x", vec![p(1.0, 1.0, "a"); 3]).is_err());
        assert!(RdCurve::new("c", "x", vec![p(0.0, 1.0, "a"); 4]).is_err());
        assert!(RdCurve::new("c", "x", vec![p(1.0, f64::NAN, "a"); 4]).is_err());
        let mixed = vec![p(1.0, 1.0, "a"), p(2.0, 1.0, "a"), p(3.0, 1.0, "a"), p(4.0, 1.0, "b")];
        assert!(RdCurve::new("c", "x", mixed).is_err());
        let a = curve(&RATES, &QUAL);
        let mut b = a.clone();
        b.points.iter_mut().for_each(|p| p.metric = "psnr".into());
        assert!(bdbr(&a, &b).is_err());
    }

    #[test]
    fn pchip_interpolates_knots_and_stays_monotone() {
        let x = vec![0.0, 1.0, 2.5, 3.0, 7.0];
        let y = vec![0.0, 0.5, 0.6, 2.0, 2.1];
        let p = Pchip::new(x.clone(), y.clone()).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((p.eval(*a) - b).abs() < 1e-12);
        }
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=7000 {
            let v = p.eval(i as f64 / 1000.0);
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    #[test]
    fn closed_form_integral_matches_fine_trapezoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mut x = vec![0.0];
            let mut y = vec![rng.random_range(-1.0..1.0)];
            for _ in 0..4 {
                x.push(x.last().unwrap() + rng.random_range(0.1..2.0));
                y.push(rng.random_range(-1.0..1.0));
            }
            let p = Pchip::new(x.clone(), y).unwrap();
            let (a, b) = (rng.random_range(0.0..x[2]), rng.random_range(x[2]..x[4]));
            let n = 200_000;
            let h = (b - a) / n as f64;
            let trap: f64 = (0..n)
                .map(|i| 0.5 * h * (p.eval(a + i as f64 * h) + p.eval(a + (i + 1) as f64 * h)))
                .sum();
            assert!((p.integrate(a, b) - trap).abs() < 1e-8, "{} {}", p.integrate(a, b), trap);
        }
    }

    #[test]
    fn quality_affine_rescaling_invariance() {
        let a = curve(&RATES, &QUAL);
        let t = curve(&[900.0, 2600.0, 3500.0, 5200.0], &[0.905, 0.948, 0.968, 0.981]);
        let base = bdbr(&a, &t).unwrap().value;
        let s = |c: &RdCurve| {
            let mut c = c.clone();
            c.points.iter_mut().for_each(|p| p.quality = 40.0 * p.quality + 3.0);
            c
        };
        assert!((bdbr(&s(&a), &s(&t)).unwrap().value - base).abs() < 1e-9);
    }

    #[test]
    fn approximate_antisymmetry() {
        let a = curve(&RATES, &QUAL);
        let t = curve(&RATES.map(|r| r * 1.07), &[0.902, 0.951, 0.969, 0.981]);
        let ab = bdbr(&a, &t).unwrap().value;
        let ba = bdbr(&t, &a).unwrap().value;
        assert!((ab + ba / (1.0 + ba / 100.0)).abs() < 0.1, "{ab} {ba}");
    }
}
