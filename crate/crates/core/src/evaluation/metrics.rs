//! Full-reference quality metrics on luma. MS-SSIM and SSIM are computed
//! in f64 without the autograd tape; VMAF-family scores come from an
//! external tool's JSON report.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::loss::{gaussian_taps, ms_ssim_scales, ms_ssim_weights, SSIM_C1, SSIM_C2, SSIM_TERM_FLOOR, SSIM_WINDOW};
use crate::numerics::Tensor;
use crate::video_io::Clip;

/// PSNR reported for identical planes.
pub const MAX_PSNR_DB: f64 = 100.0;

fn blur(src: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let taps = gaussian_taps();
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += src[y * w + x + k] * t;
            }
            rows[y * wo + x] = acc;
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += rows[(y + k) * wo + x] * t;
            }
            out[y * wo + x] = acc;
        }
    }
    (out, ho, wo)
}

/// Mean contrast-structure and SSIM maps at one scale.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (mu_a, _, _) = blur(a, h, w);
    let (mu_b, _, _) = blur(b, h, w);
    let (e_aa, _, _) = blur(&sq(a), h, w);
    let (e_bb, _, _) = blur(&sq(b), h, w);
    let (e_ab, _, _) = blur(&prod, h, w);
    let n = mu_a.len() as f64;
    let (mut cs_sum, mut ssim_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let s_aa = e_aa[i] - ma * ma;
        let s_bb = e_bb[i] - mb * mb;
        let s_ab = e_ab[i] - ma * mb;
        let cs = (2.0 * s_ab + SSIM_C2) / (s_aa + s_bb + SSIM_C2);
        let l = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
        cs_sum += cs;
        ssim_sum += l * cs;
    }
    (cs_sum / n, ssim_sum / n)
}

fn pool2(src: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(ho * wo);
    for y in 0..ho {
        let (r0, r1) = (2 * y, (2 * y + 1).min(h - 1));
        for x in 0..wo {
            let (c0, c1) = (2 * x, (2 * x + 1).min(w - 1));
            out.push((src[r0 * w + c0] + src[r0 * w + c1] + src[r1 * w + c0] + src[r1 * w + c1]) * 0.25);
        }
    }
    (out, ho, wo)
}

fn plane_dims(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<(usize, usize)> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::Shape(format!(
            "metric planes must be equal [H, W], got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

/// Single-scale SSIM of two `[H, W]` planes in `[0, 1]`.
pub fn ssim_plane(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let (h, w) = plane_dims(a, b)?;
    ms_ssim_scales(h.min(w))?;
    Ok(ssim_terms(a.data(), b.data(), h, w).1)
}

/// MS-SSIM of two `[H, W]` planes in `[0, 1]`, using the same scale rule,
/// weights and floor as the training loss.
pub fn ms_ssim_plane(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let (mut h, mut w) = plane_dims(a, b)?;
    let scales = ms_ssim_scales(h.min(w))?;
    let weights = ms_ssim_weights(scales);
    let (mut pa, mut pb) = (a.data().to_vec(), b.data().to_vec());
    let mut acc = 1.0;
    for (j, &wj) in weights.iter().enumerate() {
        let (cs, ssim) = ssim_terms(&pa, &pb, h, w);
        let term = if j + 1 == scales { ssim } else { cs };
        acc *= term.max(SSIM_TERM_FLOOR).powf(wj);
        if j + 1 < scales {
            let (na, nh, nw) = pool2(&pa, h, w);
            pb = pool2(&pb, h, w).0;
            pa = na;
            (h, w) = (nh, nw);
        }
    }
    Ok(acc)
}

/// PSNR in dB for planes in `[0, 1]`, capped at [`MAX_PSNR_DB`].
pub fn psnr_plane(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    plane_dims(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 {
        MAX_PSNR_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(MAX_PSNR_DB)
    })
}

/// Metrics computed in-process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InternalMetric {
    MsSsim,
    Ssim,
    Psnr,
}

impl InternalMetric {
    pub fn name(self) -> &'static str {
        match self {
            InternalMetric::MsSsim => "ms_ssim",
            InternalMetric::Ssim => "ssim",
            InternalMetric::Psnr => "psnr",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [InternalMetric::MsSsim, InternalMetric::Ssim, InternalMetric::Psnr]
            .into_iter()
            .find(|m| m.name() == name)
    }

    fn plane(self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
        match self {
            InternalMetric::MsSsim => ms_ssim_plane(a, b),
            InternalMetric::Ssim => ssim_plane(a, b),
            InternalMetric::Psnr => psnr_plane(a, b),
        }
    }

    /// Mean of the per-frame luma score of `distorted` against `reference`.
    pub fn clip_score(self, reference: &Clip, distorted: &Clip) -> Result<f64> {
        check_pair(reference, distorted)?;
        if reference.is_empty() {
            return Err(Error::InvalidClip("cannot score an empty clip".into()));
        }
        let mut acc = 0.0;
        for i in 0..reference.len() {
            acc += self.plane(&reference.luma(i), &distorted.luma(i))?;
        }
        Ok(acc / reference.len() as f64)
    }
}

fn check_pair(reference: &Clip, distorted: &Clip) -> Result<()> {
    if (reference.width(), reference.height(), reference.len())
        != (distorted.width(), distorted.height(), distorted.len())
    {
        return Err(Error::InvalidClip(format!(
            "distorted clip {}x{}x{} does not match reference {}x{}x{}",
            distorted.width(),
            distorted.height(),
            distorted.len(),
            reference.width(),
            reference.height(),
            reference.len()
        )));
    }
    Ok(())
}

/// External VMAF-style tool. Argument templates may use `{reference}`,
/// `{distorted}` and `{output}` (the JSON report path).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricTool {
    pub program: String,
    pub args: Vec<String>,
}

impl MetricTool {
    /// libvmaf's `vmaf` CLI reporting both the default and NEG models.
    pub fn libvmaf() -> Self {
        Self {
            program: "vmaf".into(),
            args: [
                "-r",
                "{reference}",
                "-d",
                "{distorted}",
                "--model",
                "version=vmaf_v0.6.1:name=vmaf",
                "--model",
                "version=vmaf_v0.6.1neg:name=vmaf_neg",
                "--json",
                "-o",
                "{output}",
            ]
            .map(String::from)
            .to_vec(),
        }
    }

    /// Runs the tool on two Y4M files and returns the pooled mean of `key`.
    pub fn score(&self, reference: &Path, distorted: &Path, report: &Path, key: &str) -> Result<f64> {
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| {
                a.replace("{reference}", &reference.display().to_string())
                    .replace("{distorted}", &distorted.display().to_string())
                    .replace("{output}", &report.display().to_string())
            })
            .collect();
        let out = Command::new(&self.program)
            .args(&args)
            .output()
            .map_err(|e| Error::Metric(format!("cannot run `{}`: {e}", self.program)))?;
        if !out.status.success() {
            return Err(Error::Metric(format!(
                "`{} {}` exited with {}: {}",
                self.program,
                args.join(" "),
                out.status,
                String::from_utf8_lossy(&out.stderr)
            )));
        }
        let bytes = std::fs::read(report).map_err(|e| Error::io(report, e))?;
        parse_vmaf_json(&bytes, key)
    }
}

/// Pooled mean of `key` from a libvmaf JSON report. Accepts the v2 layout
/// (`pooled_metrics.<key>.mean`) and, for `vmaf`, the v1 layout
/// (`aggregate.VMAF_score`).
pub fn parse_vmaf_json(bytes: &[u8], key: &str) -> Result<f64> {
    let v: Value = serde_json::from_slice(bytes).map_err(|e| Error::Metric(format!("VMAF report: {e}")))?;
    let pooled = v.get("pooled_metrics").and_then(|p| p.get(key)).and_then(|m| m.get("mean"));
    let legacy = (key == "vmaf")
        .then(|| v.get("aggregate").and_then(|a| a.get("VMAF_score")))
        .flatten();
    let score = pooled
        .or(legacy)
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::Metric(format!("VMAF report has no pooled mean for `{key}`")))?;
    if !score.is_finite() {
        return Err(Error::Metric(format!("VMAF score for `{key}` is not finite")));
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::ms_ssim;
    use crate::numerics::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![h, w], |_| rng.random_range(0.0..1.0))
    }

    fn graph_ms_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let g = Graph::<f64>::new();
        let s = |t: &Tensor<f64>| g.constant(t.clone().reshape(vec![1, 1, t.shape()[0], t.shape()[1]]).unwrap());
        let v = ms_ssim(&g, s(a), s(b)).unwrap();
        g.item(v).unwrap()
    }

    #[test]
    fn matches_training_loss_implementation() {
        for (h, w, seed) in [(64, 64, 1), (48, 80, 2), (33, 21, 3), (128, 96, 4)] {
            let a = noise(h, w, seed);
            let b = Tensor::from_fn(vec![h, w], |i| (a.data()[i] * 0.8 + 0.1 * ((i % 7) as f64 / 7.0)).min(1.0));
            let ours = ms_ssim_plane(&a, &b).unwrap();
            assert!((ours - graph_ms_ssim(&a, &b)).abs() < 1e-6, "{h}x{w}");
        }
    }

    #[test]
    fn identical_planes_score_one() {
        let a = noise(40, 40, 7);
        assert!((ms_ssim_plane(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim_plane(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(psnr_plane(&a, &a).unwrap(), MAX_PSNR_DB);
    }

    #[test]
    fn psnr_of_uniform_offset() {
        let a = Tensor::full(vec![16, 16], 0.5);
        let b = Tensor::full(vec![16, 16], 0.6);
        assert!((psnr_plane(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_mismatched_planes() {
        assert!(ms_ssim_plane(&noise(16, 16, 0), &noise(16, 17, 0)).is_err());
        assert!(ssim_plane(&noise(8, 8, 0), &noise(8, 8, 0)).is_err());
    }

    #[test]
    fn vmaf_report_layouts() {
        let v2 = br#"{"pooled_metrics": {"vmaf": {"min": 80, "mean": 91.25}, "vmaf_neg": {"mean": 88.5}}}"#;
        assert_eq!(parse_vmaf_json(v2, "vmaf").unwrap(), 91.25);
        assert_eq!(parse_vmaf_json(v2, "vmaf_neg").unwrap(), 88.5);
        let v1 = br#"{"aggregate": {"VMAF_score": 77.0}}"#;
        assert_eq!(parse_vmaf_json(v1, "vmaf").unwrap(), 77.0);
        assert!(parse_vmaf_json(v1, "vmaf_neg").is_err());
        assert!(parse_vmaf_json(b"{", "vmaf").is_err());
        assert!(parse_vmaf_json(br#"{"pooled_metrics": {"vmaf": {"mean": "x"}}}"#, "vmaf").is_err());
    }

    #[test]
    fn missing_tool_is_metric_error() {
        let t = MetricTool {
            program: "/nonexistent/vmaf".into(),
            args: vec![],
        };
        let p = Path::new("/tmp/x");
        assert!(matches!(t.score(p, p, p, "vmaf"), Err(Error::Metric(_))));
    }
}
