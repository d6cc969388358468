//! Spatial/temporal complexity statistics and the QP probe that together
//! form the 7-component content descriptor.
//!
//! SI and TI are computed on luma normalised to `[0, 1]`. SI is the
//! population standard deviation of the 3x3 Sobel gradient magnitude over
//! interior pixels (the one-pixel border is excluded); TI is the population
//! standard deviation of the difference to the previous frame.

use std::path::{Path, PathBuf};
use std::process::Command;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::video_io::{encode_y4m, Clip};

pub const DEFAULT_PROBE_BITRATE_KBPS: u32 = 1500;

/// Version of [`fallback_qp`]; bump whenever the map changes.
pub const FALLBACK_MAP_VERSION: u32 = 1;
pub const FALLBACK_QP_MIN: f64 = 10.0;
pub const FALLBACK_QP_MAX: f64 = 45.0;
/// Complexity (`si_avg + ti_avg`) at which the fallback map reaches its midpoint.
pub const FALLBACK_HALF_COMPLEXITY: f64 = 0.25;

pub const PROBE_CACHE_SCHEMA_VERSION: u32 = 1;

/// Names of the feature vector components, in their frozen order.
pub const FEATURE_NAMES: [&str; 7] = ["si_max", "si_avg", "si_std", "ti_max", "ti_avg", "ti_std", "qp"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub si_max: f64,
    pub si_avg: f64,
    pub si_std: f64,
    pub ti_max: f64,
    pub ti_avg: f64,
    pub ti_std: f64,
    pub qp: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.si_max,
            self.si_avg,
            self.si_std,
            self.ti_max,
            self.ti_avg,
            self.ti_std,
            self.qp,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            si_max: a[0],
            si_avg: a[1],
            si_std: a[2],
            ti_max: a[3],
            ti_avg: a[4],
            ti_std: a[5],
            qp: a[6],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Per-frame series plus the aggregated descriptor for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipAnalysis {
    pub features: FeatureVector,
    pub per_frame_si: Vec<f64>,
    pub per_frame_ti: Vec<f64>,
    /// Set when the clip has a single frame, so TI statistics are defined as 0.
    pub ti_undefined: bool,
}

fn plane_dims(t: &Tensor<f64>) -> Result<(usize, usize)> {
    match t.shape() {
        &[h, w] => Ok((h, w)),
        s => Err(Error::Shape(format!("expected an H x W plane, got {s:?}"))),
    }
}

/// Sobel gradient magnitude `sqrt(Gx^2 + Gy^2)`; border pixels are zero.
pub fn sobel_magnitude(luma: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (h, w) = plane_dims(luma)?;
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!("frame {w}x{h} is smaller than the 3x3 Sobel kernel")));
    }
    let src = luma.data();
    let mut out = vec![0.0; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let at = |dy: usize, dx: usize| src[(y + dy - 1) * w + x + dx - 1];
            // Weighted column/row sums are differenced last so flat
            // neighbourhoods give exactly zero.
            let gx = (at(0, 2) + 2.0 * at(1, 2) + at(2, 2)) - (at(0, 0) + 2.0 * at(1, 0) + at(2, 0));
            let gy = (at(2, 0) + 2.0 * at(2, 1) + at(2, 2)) - (at(0, 0) + 2.0 * at(0, 1) + at(0, 2));
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    Tensor::new(vec![h, w], out)
}

/// `(max, mean, population std)` of a series; zeros for an empty one.
pub fn series_stats(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = values.len() as f64;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (max, mean, var.max(0.0).sqrt())
}

pub fn spatial_information(luma: &Tensor<f64>) -> Result<f64> {
    let mag = sobel_magnitude(luma)?;
    let (h, w) = plane_dims(luma)?;
    let interior: Vec<f64> = (1..h - 1)
        .flat_map(|y| mag.data()[y * w + 1..y * w + w - 1].iter().copied())
        .collect();
    Ok(series_stats(&interior).2)
}

pub fn temporal_information(curr: &Tensor<f64>, prev: &Tensor<f64>) -> Result<f64> {
    if curr.shape() != prev.shape() {
        return Err(Error::Shape(format!(
            "TI frames differ in size: {:?} vs {:?}",
            curr.shape(),
            prev.shape()
        )));
    }
    let diff: Vec<f64> = curr.data().iter().zip(prev.data()).map(|(a, b)| a - b).collect();
    Ok(series_stats(&diff).2)
}

/// Features for a sequence of normalised luma planes.
pub fn analyze_lumas(lumas: &[Tensor<f64>], qp: f64) -> Result<ClipAnalysis> {
    if lumas.is_empty() {
        return Err(Error::InvalidClip("cannot analyse an empty clip".into()));
    }
    let per_frame_si = lumas.iter().map(spatial_information).collect::<Result<Vec<_>>>()?;
    let per_frame_ti = lumas
        .windows(2)
        .map(|p| temporal_information(&p[1], &p[0]))
        .collect::<Result<Vec<_>>>()?;
    let ti_undefined = per_frame_ti.is_empty();
    if ti_undefined {
        log::warn!("single-frame input: TI statistics set to 0");
    }
    let (si_max, si_avg, si_std) = series_stats(&per_frame_si);
    let (ti_max, ti_avg, ti_std) = series_stats(&per_frame_ti);
    Ok(ClipAnalysis {
        features: FeatureVector {
            si_max,
            si_avg,
            si_std,
            ti_max,
            ti_avg,
            ti_std,
            qp,
        },
        per_frame_si,
        per_frame_ti,
        ti_undefined,
    })
}

pub fn extract_features(clip: &Clip, qp: f64) -> Result<ClipAnalysis> {
    let lumas: Vec<Tensor<f64>> = (0..clip.len()).map(|i| clip.luma(i)).collect();
    analyze_lumas(&lumas, qp)
}

/// Deterministic QP estimate used when no encoder is available: a monotone
/// saturating map of `si_avg + ti_avg` onto `[FALLBACK_QP_MIN, FALLBACK_QP_MAX]`.
pub fn fallback_qp(si_avg: f64, ti_avg: f64) -> f64 {
    let s = (si_avg.max(0.0) + ti_avg.max(0.0)).min(1e12);
    FALLBACK_QP_MIN + (FALLBACK_QP_MAX - FALLBACK_QP_MIN) * s / (s + FALLBACK_HALF_COMPLEXITY)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    Encoder,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpProbeResult {
    pub per_frame_qp: Vec<f64>,
    pub clip_qp: f64,
    pub source: ProbeSource,
}

impl QpProbeResult {
    pub fn from_frame_qps(per_frame_qp: Vec<f64>, source: ProbeSource) -> Result<Self> {
        if per_frame_qp.is_empty() {
            return Err(Error::Probe("no frame QPs".into()));
        }
        let clip_qp = per_frame_qp.iter().sum::<f64>() / per_frame_qp.len() as f64;
        Ok(Self {
            per_frame_qp,
            clip_qp,
            source,
        })
    }
}

/// CLI encoder used for the rate probe. Argument templates may contain
/// `{input}`, `{output}` and `{bitrate}` (kbps).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderProbe {
    pub program: String,
    pub args: Vec<String>,
}

impl EncoderProbe {
    /// x264, preset `fast`, CBR via matching VBV limits, per-frame debug log.
    pub fn x264_fast() -> Self {
        let args = [
            "--preset",
            "fast",
            "--bitrate",
            "{bitrate}",
            "--vbv-maxrate",
            "{bitrate}",
            "--vbv-bufsize",
            "{bitrate}",
            "--verbose",
            "-o",
            "{output}",
            "{input}",
        ];
        Self {
            program: "x264".into(),
            args: args.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub bitrate_kbps: u32,
    pub encoder: Option<EncoderProbe>,
    pub fallback: bool,
    pub cache_dir: Option<PathBuf>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            bitrate_kbps: DEFAULT_PROBE_BITRATE_KBPS,
            encoder: Some(EncoderProbe::x264_fast()),
            fallback: true,
            cache_dir: None,
        }
    }
}

impl ProbeConfig {
    pub fn fallback_only() -> Self {
        Self {
            encoder: None,
            ..Self::default()
        }
    }
}

fn qp_line_regex() -> Regex {
    Regex::new(r"frame=\s*(\d+)\s+QP=(\d+(?:\.\d+)?)").expect("valid regex")
}

/// Extracts per-frame QPs from encoder log text. Matches lines containing
/// `frame=<n> QP=<q>` (x264's `--verbose` format) and returns QPs ordered by
/// frame number.
pub fn parse_qp_log(text: &str) -> Vec<f64> {
    let re = qp_line_regex();
    let mut pairs: Vec<(u64, f64)> = re
        .captures_iter(text)
        .filter_map(|c| Some((c[1].parse().ok()?, c[2].parse().ok()?)))
        .filter(|(_, q): &(u64, f64)| q.is_finite())
        .collect();
    pairs.sort_by_key(|&(f, _)| f);
    pairs.into_iter().map(|(_, q)| q).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCacheEntry {
    pub schema_version: u32,
    pub clip_hash: String,
    pub bitrate_kbps: u32,
    pub fallback_version: u32,
    #[serde(flatten)]
    pub result: QpProbeResult,
}

pub fn parse_probe_cache(bytes: &[u8]) -> Result<ProbeCacheEntry> {
    let entry: ProbeCacheEntry = serde_json::from_slice(bytes)?;
    if entry.schema_version != PROBE_CACHE_SCHEMA_VERSION {
        return Err(Error::Serde(format!(
            "unsupported probe cache schema {}",
            entry.schema_version
        )));
    }
    if entry.result.per_frame_qp.is_empty() || !entry.result.clip_qp.is_finite() {
        return Err(Error::Serde("probe cache entry has no valid QP".into()));
    }
    Ok(entry)
}

pub fn cache_path(dir: &Path, clip_hash: &str, bitrate_kbps: u32) -> PathBuf {
    let short = &clip_hash[..clip_hash.len().min(16)];
    dir.join(format!("qp-{short}-{bitrate_kbps}.json"))
}

fn run_encoder_probe(clip: &Clip, enc: &EncoderProbe, bitrate_kbps: u32) -> Result<Vec<f64>> {
    let dir = tempfile::tempdir().map_err(|e| Error::Probe(format!("temp dir: {e}")))?;
    let input = dir.path().join("probe_input.y4m");
    let output = dir.path().join("probe_output.bin");
    let file = std::fs::File::create(&input).map_err(|e| Error::io(&input, e))?;
    encode_y4m(clip, std::io::BufWriter::new(file)).map_err(|e| Error::io(&input, e))?;
    let args: Vec<String> = enc
        .args
        .iter()
        .map(|a| {
            a.replace("{input}", &input.to_string_lossy())
                .replace("{output}", &output.to_string_lossy())
                .replace("{bitrate}", &bitrate_kbps.to_string())
        })
        .collect();
    let out = Command::new(&enc.program)
        .args(&args)
        .output()
        .map_err(|e| Error::Probe(format!("cannot run `{}`: {e}", enc.program)))?;
    if !out.status.success() {
        return Err(Error::Probe(format!(
            "`{} {}` exited with {}",
            enc.program,
            args.join(" "),
            out.status
        )));
    }
    let mut text = String::from_utf8_lossy(&out.stderr).into_owned();
    text.push_str(&String::from_utf8_lossy(&out.stdout));
    let qps = parse_qp_log(&text);
    if qps.is_empty() {
        return Err(Error::Probe(format!("no per-frame QP lines in `{}` output", enc.program)));
    }
    Ok(qps)
}

fn fallback_probe(clip: &Clip) -> Result<QpProbeResult> {
    let analysis = extract_features(clip, 0.0)?;
    let qp = fallback_qp(analysis.features.si_avg, analysis.features.ti_avg);
    QpProbeResult::from_frame_qps(vec![qp; clip.len().max(1)], ProbeSource::Fallback)
}

/// Frame-level QP of `clip` at `cfg.bitrate_kbps`, via the configured encoder
/// or, when that is absent or fails and `cfg.fallback` is set, via
/// [`fallback_qp`]. Results are cached as JSON sidecars when
/// `cfg.cache_dir` is set.
pub fn probe_qp(clip: &Clip, cfg: &ProbeConfig) -> Result<QpProbeResult> {
    let hash = clip.content_hash();
    if let Some(dir) = &cfg.cache_dir {
        let path = cache_path(dir, &hash, cfg.bitrate_kbps);
        if let Ok(bytes) = std::fs::read(&path) {
            match parse_probe_cache(&bytes) {
                Ok(entry) if entry.clip_hash == hash && entry.bitrate_kbps == cfg.bitrate_kbps => {
                    let usable = match entry.result.source {
                        ProbeSource::Encoder => cfg.encoder.is_some(),
                        ProbeSource::Fallback => {
                            cfg.encoder.is_none() && entry.fallback_version == FALLBACK_MAP_VERSION
                        }
                    };
                    if usable {
                        return Ok(entry.result);
                    }
                }
                Ok(_) => log::warn!("ignoring mismatched probe cache {}", path.display()),
                Err(e) => log::warn!("ignoring unreadable probe cache {}: {e}", path.display()),
            }
        }
    }

    let result = match &cfg.encoder {
        Some(enc) => match run_encoder_probe(clip, enc, cfg.bitrate_kbps) {
            Ok(qps) => QpProbeResult::from_frame_qps(qps, ProbeSource::Encoder)?,
            Err(e) if cfg.fallback => {
                log::warn!("{e}; using fallback QP map v{FALLBACK_MAP_VERSION}");
                fallback_probe(clip)?
            }
            Err(e) => return Err(e),
        },
        None if cfg.fallback => fallback_probe(clip)?,
        None => return Err(Error::Probe("no encoder configured and fallback disabled".into())),
    };

    if let Some(dir) = &cfg.cache_dir {
        // Fallback results are only cached when no encoder was requested.
        if result.source == ProbeSource::Encoder || cfg.encoder.is_none() {
            let entry = ProbeCacheEntry {
                schema_version: PROBE_CACHE_SCHEMA_VERSION,
                clip_hash: hash.clone(),
                bitrate_kbps: cfg.bitrate_kbps,
                fallback_version: FALLBACK_MAP_VERSION,
                result: result.clone(),
            };
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = cache_path(dir, &hash, cfg.bitrate_kbps);
            std::fs::write(&path, serde_json::to_vec_pretty(&entry)?).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video_io::FrameRate;

    fn plane(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(vec![h, w], |i| f(i / w, i % w))
    }

    #[test]
    fn constant_plane_has_zero_gradient() {
        let p = plane(6, 7, |_, _| 0.4);
        assert!(sobel_magnitude(&p).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(spatial_information(&p).unwrap(), 0.0);
    }

    #[test]
    fn too_small_for_kernel() {
        assert!(sobel_magnitude(&plane(2, 5, |_, _| 0.0)).is_err());
    }

    #[test]
    fn vertical_step_edge_hand_convolution() {
        // Columns 0..4 are 0, columns 4.. are h. At (y=3, x=4) the 3x3
        // neighbourhood has columns 3 (0), 4 (h), 5 (h):
        // Gx = (-1*0 + 1*h) + (-2*0 + 2*h) + (-1*0 + 1*h) = 4h, Gy = 0.
        let h = 0.3;
        let p = plane(8, 8, |_, x| if x >= 4 { h } else { 0.0 });
        let mag = sobel_magnitude(&p).unwrap();
        assert!((mag.data()[3 * 8 + 4] - 4.0 * h).abs() < 1e-12);
        // At x=3 the neighbourhood is columns 2 (0), 3 (0), 4 (h): Gx = 4h too.
        assert!((mag.data()[3 * 8 + 3] - 4.0 * h).abs() < 1e-12);
        assert_eq!(mag.data()[3 * 8 + 6], 0.0);
    }

    #[test]
    fn horizontal_ramp_has_constant_magnitude() {
        // f(x) = s x: Gx = s*(1+2+1)*2 = 8s everywhere inside, Gy = 0.
        let s = 0.01;
        let p = plane(7, 9, |_, x| s * x as f64);
        let mag = sobel_magnitude(&p).unwrap();
        for y in 1..6 {
            for x in 1..8 {
                assert!((mag.data()[y * 9 + x] - 8.0 * s).abs() < 1e-12);
            }
        }
        assert!(spatial_information(&p).unwrap() < 1e-12);
    }

    #[test]
    fn ti_of_offset_frames_is_zero() {
        let a = plane(5, 5, |y, x| (y * 5 + x) as f64 / 25.0);
        let b = a.map(|v| v + 0.1);
        assert!(temporal_information(&b, &a).unwrap() < 1e-12);
        assert_eq!(temporal_information(&a, &a).unwrap(), 0.0);
        assert!(temporal_information(&a, &plane(4, 5, |_, _| 0.0)).is_err());
    }

    #[test]
    fn static_clip_features_are_zero() {
        let clip = Clip::from_luma_planes(vec![vec![90; 64]; 4], 8, 8, FrameRate::new(30, 1).unwrap(), 8).unwrap();
        let a = extract_features(&clip, 27.0).unwrap();
        assert_eq!(a.features.to_array(), [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 27.0]);
        assert!(!a.ti_undefined);
    }

    #[test]
    fn single_frame_sets_warning_flag() {
        let clip = Clip::from_luma_planes(vec![vec![90; 64]], 8, 8, FrameRate::new(30, 1).unwrap(), 8).unwrap();
        let a = extract_features(&clip, 20.0).unwrap();
        assert!(a.ti_undefined);
        assert_eq!(a.features.ti_max, 0.0);
    }

    #[test]
    fn qp_log_mean() {
        let log = "x264 [debug]: frame=   1 QP=22.00 NAL=2 Slice:P\n\
                   x264 [debug]: frame=   0 QP=20.00 NAL=3 Slice:I\n\
                   x264 [debug]: frame=   2 QP=24.00 NAL=2 Slice:P\n\
                   x264 [info]: frame I:1 Avg QP:20.00 size: 100\n";
        let qps = parse_qp_log(log);
        assert_eq!(qps, vec![20.0, 22.0, 24.0]);
        let r = QpProbeResult::from_frame_qps(qps, ProbeSource::Encoder).unwrap();
        assert_eq!(r.clip_qp, 22.0);
    }

    #[test]
    fn fallback_is_monotone_and_bounded() {
        assert_eq!(fallback_qp(0.0, 0.0), FALLBACK_QP_MIN);
        let mut prev = fallback_qp(0.0, 0.0);
        for i in 1..200 {
            let q = fallback_qp(i as f64 * 0.01, i as f64 * 0.005);
            assert!(q >= prev && q <= FALLBACK_QP_MAX);
            prev = q;
        }
    }

    #[test]
    fn missing_encoder_uses_fallback_for_flat_clip() {
        let clip = Clip::from_luma_planes(vec![vec![0; 64]; 3], 8, 8, FrameRate::new(30, 1).unwrap(), 8).unwrap();
        let cfg = ProbeConfig {
            encoder: Some(EncoderProbe {
                program: "/nonexistent/encoder-binary".into(),
                args: vec![],
            }),
            ..ProbeConfig::default()
        };
        let r = probe_qp(&clip, &cfg).unwrap();
        assert_eq!(r.source, ProbeSource::Fallback);
        assert_eq!(r.clip_qp, FALLBACK_QP_MIN);

        let strict = ProbeConfig {
            fallback: false,
            ..cfg
        };
        assert!(matches!(probe_qp(&clip, &strict), Err(Error::Probe(_))));
    }

    #[test]
    fn default_probe_bitrate() {
        assert_eq!(ProbeConfig::default().bitrate_kbps, 1500);
    }

    fn sobel_oracle(p: &Tensor<f64>) -> Vec<f64> {
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let (h, w) = (p.shape()[0], p.shape()[1]);
        let mut out = vec![0.0; h * w];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let (mut gx, mut gy) = (0.0, 0.0);
                for i in 0..3 {
                    for j in 0..3 {
                        let v = p.data()[(y + i - 1) * w + x + j - 1];
                        gx += kx[i][j] * v;
                        gy += kx[j][i] * v;
                    }
                }
                out[y * w + x] = (gx * gx + gy * gy).sqrt();
            }
        }
        out
    }

    proptest::proptest! {
        #[test]
        fn sobel_matches_kernel_oracle(h in 3usize..9, w in 3usize..9, seed in 0u64..1000) {
            let p = plane(h, w, |y, x| ((y * 31 + x * 17 + seed as usize) % 23) as f64 / 23.0);
            let got = sobel_magnitude(&p).unwrap();
            for (a, b) in got.data().iter().zip(sobel_oracle(&p)) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn si_ti_scale_homogeneous(vals in proptest::collection::vec(0.0f64..1.0, 50), a in 0.01f64..4.0) {
            let p = Tensor::new(vec![5, 10], vals).unwrap();
            let q = p.map(|v| v * a);
            let si = spatial_information(&p).unwrap();
            proptest::prop_assert!((spatial_information(&q).unwrap() - a * si).abs() < 1e-9 * (1.0 + si));
            let prev = plane(5, 10, |_, _| 0.0);
            let ti = temporal_information(&p, &prev).unwrap();
            proptest::prop_assert!((temporal_information(&q, &prev).unwrap() - a * ti).abs() < 1e-9 * (1.0 + ti));
            proptest::prop_assert!(si >= 0.0 && ti >= 0.0);
        }
    }
}
