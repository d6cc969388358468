//! Codec profiles and the encode/decode/measure step. External codecs are
//! described by argument templates; two built-in stubs make runs hermetic.

use std::path::{Path, PathBuf};
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::bdbr::RdPoint;
use super::metrics::{InternalMetric, MetricTool};
use crate::error::{Error, Result};
use crate::training::derive_seed;
use crate::video_io::{encode_y4m, from_normalized_luma, read_clip, write_y4m, Clip, Frame};

/// Program plus argument templates. Placeholders: `{input}`, `{output}`,
/// `{bitrate}` (kbps), `{bitrate_bps}`, `{width}`, `{height}`, `{fps_num}`,
/// `{fps_den}`, `{bit_depth}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandTemplate {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandTemplate {
    fn new(program: &str, args: &[&str]) -> Self {
        Self {
            program: program.into(),
            args: args.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn render(&self, vars: &[(&str, String)]) -> Vec<String> {
        self.args
            .iter()
            .map(|a| {
                vars.iter()
                    .fold(a.clone(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodedFormat {
    Y4m,
    /// Headerless planar YUV with the source geometry.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalCodec {
    pub name: String,
    pub encoder: CommandTemplate,
    pub decoder: CommandTemplate,
    pub bitstream_ext: String,
    pub decoded: DecodedFormat,
    /// Command whose first output line is recorded as the tool version.
    pub version: Option<CommandTemplate>,
}

fn ffmpeg_to_y4m() -> CommandTemplate {
    CommandTemplate::new(
        "ffmpeg",
        &["-y", "-loglevel", "error", "-i", "{input}", "-strict", "-1", "-f", "yuv4mpegpipe", "{output}"],
    )
}

impl ExternalCodec {
    /// x264, preset medium, CBR via matching VBV rate and buffer.
    pub fn x264() -> Self {
        Self {
            name: "x264".into(),
            encoder: CommandTemplate::new(
                "x264",
                &[
                    "--preset", "medium", "--bitrate", "{bitrate}", "--vbv-maxrate", "{bitrate}", "--vbv-bufsize",
                    "{bitrate}", "--nal-hrd", "cbr", "-o", "{output}", "{input}",
                ],
            ),
            decoder: ffmpeg_to_y4m(),
            bitstream_ext: "264".into(),
            decoded: DecodedFormat::Y4m,
            version: Some(CommandTemplate::new("x264", &["--version"])),
        }
    }

    /// x265, preset medium, strict CBR.
    pub fn x265() -> Self {
        Self {
            name: "x265".into(),
            encoder: CommandTemplate::new(
                "x265",
                &[
                    "--input", "{input}", "--preset", "medium", "--bitrate", "{bitrate}", "--vbv-maxrate",
                    "{bitrate}", "--vbv-bufsize", "{bitrate}", "--strict-cbr", "-o", "{output}",
                ],
            ),
            decoder: ffmpeg_to_y4m(),
            bitstream_ext: "hevc".into(),
            decoded: DecodedFormat::Y4m,
            version: Some(CommandTemplate::new("x265", &["--version"])),
        }
    }

    /// vvenc's `vvencapp`, preset medium, decoded with `vvdecapp`.
    pub fn vvenc() -> Self {
        Self {
            name: "vvenc".into(),
            encoder: CommandTemplate::new(
                "vvencapp",
                &["-i", "{input}", "--preset", "medium", "-b", "{bitrate_bps}", "-o", "{output}"],
            ),
            decoder: CommandTemplate::new("vvdecapp", &["-b", "{input}", "-o", "{output}"]),
            bitstream_ext: "266".into(),
            decoded: DecodedFormat::Raw,
            version: Some(CommandTemplate::new("vvencapp", &["--version"])),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CodecProfile {
    /// Returns the input unchanged; the bitstream is the Y4M file itself.
    LosslessStub,
    /// Adds Gaussian luma noise with standard deviation
    /// `sigma_at_1000_kbps * sqrt(1000 / bitrate)` (normalised units) and
    /// reports exactly the target rate.
    NoisyStub { sigma_at_1000_kbps: f64, seed: u64 },
    External(ExternalCodec),
}

pub const DEFAULT_STUB_SIGMA: f64 = 0.05;

impl CodecProfile {
    /// `stub`, `noisy_stub`, `x264`, `x265` or `vvenc`.
    pub fn named(name: &str) -> Result<Self> {
        Ok(match name {
            "stub" | "lossless_stub" => CodecProfile::LosslessStub,
            "noisy_stub" => CodecProfile::NoisyStub {
                sigma_at_1000_kbps: DEFAULT_STUB_SIGMA,
                seed: 0,
            },
            "x264" => CodecProfile::External(ExternalCodec::x264()),
            "x265" => CodecProfile::External(ExternalCodec::x265()),
            "vvenc" => CodecProfile::External(ExternalCodec::vvenc()),
            other => return Err(Error::Config(format!("unknown codec profile `{other}`"))),
        })
    }

    /// A named profile, or a TOML profile file when `spec` is a path.
    pub fn resolve(spec: &str) -> Result<Self> {
        let p = Path::new(spec);
        if p.extension().is_some_and(|e| e == "toml") {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{spec}: {e}")))?;
            return Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{spec}: {e}")));
        }
        Self::named(spec)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn id(&self) -> String {
        match self {
            CodecProfile::LosslessStub => "stub".into(),
            CodecProfile::NoisyStub { .. } => "noisy_stub".into(),
            CodecProfile::External(c) => c.name.clone(),
        }
    }

    /// Tool identification recorded with every result row.
    pub fn version(&self) -> String {
        let own = concat!("tdp ", env!("CARGO_PKG_VERSION"));
        match self {
            CodecProfile::External(c) => c
                .version
                .as_ref()
                .and_then(|v| Command::new(&v.program).args(&v.args).output().ok())
                .and_then(|o| {
                    let text = [o.stdout, o.stderr].concat();
                    String::from_utf8_lossy(&text).lines().next().map(|l| l.trim().to_string())
                })
                .unwrap_or_else(|| format!("{} (version unknown)", c.name)),
            _ => format!("{own} {}", self.id()),
        }
    }
}

/// How a requested metric is scored.
#[derive(Clone, Debug, PartialEq)]
pub enum MetricSpec {
    Internal(InternalMetric),
    /// External tool and the report key to read.
    External { name: String, tool: MetricTool },
}

impl MetricSpec {
    /// `ms_ssim`, `ssim` and `psnr` are internal; `vmaf` and `vmaf_neg`
    /// use `tool` (libvmaf by default).
    pub fn parse(name: &str, tool: Option<&MetricTool>) -> Result<Self> {
        if let Some(m) = InternalMetric::from_name(name) {
            return Ok(MetricSpec::Internal(m));
        }
        match name {
            "vmaf" | "vmaf_neg" => Ok(MetricSpec::External {
                name: name.into(),
                tool: tool.cloned().unwrap_or_else(MetricTool::libvmaf),
            }),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            MetricSpec::Internal(m) => m.name(),
            MetricSpec::External { name, .. } => name,
        }
    }
}

/// One encode: decoded output and measured rate.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub decoded: Clip,
    pub bytes: u64,
    pub bitrate_kbps: f64,
}

fn run(codec: &str, program: &str, args: &[String]) -> Result<()> {
    let command = format!("{program} {}", args.join(" "));
    let out = Command::new(program).args(args).output().map_err(|e| Error::Codec {
        codec: codec.into(),
        command: command.clone(),
        status: "not started".into(),
        stderr: e.to_string(),
    })?;
    if !out.status.success() {
        return Err(Error::Codec {
            codec: codec.into(),
            command,
            status: out.status.to_string(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        });
    }
    Ok(())
}

fn noisy(clip: &Clip, sigma: f64, seed: u64) -> Result<Clip> {
    let max = clip.max_sample() as f64;
    let frames = clip
        .frames()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64]));
            let dist = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("stub sigma: {e}")))?;
            let y: Vec<f64> = f.y.iter().map(|&v| v as f64 / max + dist.sample(&mut rng)).collect();
            Ok(Frame {
                y: from_normalized_luma(&y, clip.bit_depth()),
                u: f.u.clone(),
                v: f.v.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    clip.with_frames(frames)
}

/// Encodes `clip` at `target_kbps` and decodes it. `workdir` holds the
/// intermediate files for external codecs.
pub fn encode(clip: &Clip, profile: &CodecProfile, target_kbps: u32, workdir: &Path) -> Result<Encoded> {
    let duration = clip.duration();
    if !(duration > 0.0) {
        return Err(Error::InvalidClip("cannot measure bitrate of an empty clip".into()));
    }
    let rate = |bytes: u64| bytes as f64 * 8.0 / duration / 1000.0;
    match profile {
        CodecProfile::LosslessStub => {
            let mut buf = Vec::new();
            encode_y4m(clip, &mut buf).map_err(|e| Error::io("<memory>", e))?;
            let bytes = buf.len() as u64;
            Ok(Encoded {
                decoded: clip.clone(),
                bytes,
                bitrate_kbps: rate(bytes),
            })
        }
        CodecProfile::NoisyStub { sigma_at_1000_kbps, seed } => {
            if !(sigma_at_1000_kbps.is_finite() && *sigma_at_1000_kbps >= 0.0) || target_kbps == 0 {
                return Err(Error::Config("noisy stub needs sigma >= 0 and a positive bitrate".into()));
            }
            let sigma = sigma_at_1000_kbps * (1000.0 / target_kbps as f64).sqrt();
            let bytes = (target_kbps as f64 * 1000.0 * duration / 8.0).round() as u64;
            Ok(Encoded {
                decoded: noisy(clip, sigma, derive_seed(&[*seed, target_kbps as u64]))?,
                bytes,
                bitrate_kbps: rate(bytes),
            })
        }
        CodecProfile::External(c) => {
            let input = workdir.join("input.y4m");
            let bitstream = workdir.join(format!("out-{target_kbps}.{}", c.bitstream_ext));
            let decoded_path: PathBuf = workdir.join(match c.decoded {
                DecodedFormat::Y4m => format!("dec-{target_kbps}.y4m"),
                DecodedFormat::Raw => format!("dec-{target_kbps}.yuv"),
            });
            write_y4m(clip, &input)?;
            let fr = clip.frame_rate();
            let vars = |i: &Path, o: &Path| {
                vec![
                    ("input", i.display().to_string()),
                    ("output", o.display().to_string()),
                    ("bitrate", target_kbps.to_string()),
                    ("bitrate_bps", (target_kbps as u64 * 1000).to_string()),
                    ("width", clip.width().to_string()),
                    ("height", clip.height().to_string()),
                    ("fps_num", fr.num.to_string()),
                    ("fps_den", fr.den.to_string()),
                    ("bit_depth", clip.bit_depth().to_string()),
                ]
            };
            run(&c.name, &c.encoder.program, &c.encoder.render(&vars(&input, &bitstream)))?;
            let bytes = std::fs::metadata(&bitstream).map_err(|e| Error::io(&bitstream, e))?.len();
            run(&c.name, &c.decoder.program, &c.decoder.render(&vars(&bitstream, &decoded_path)))?;
            let decoded = match c.decoded {
                DecodedFormat::Y4m => read_clip(&decoded_path, None)?,
                DecodedFormat::Raw => read_clip(&decoded_path, Some(clip.geometry()))?,
            };
            Ok(Encoded {
                decoded,
                bytes,
                bitrate_kbps: rate(bytes),
            })
        }
    }
}

/// Encodes `input` and scores the decoded result against `reference`
/// (the original source, also for preprocessed inputs). One point per
/// metric.
pub fn encode_and_measure(
    input: &Clip,
    reference: &Clip,
    profile: &CodecProfile,
    target_kbps: u32,
    metrics: &[MetricSpec],
    workdir: &Path,
) -> Result<Vec<RdPoint>> {
    let enc = encode(input, profile, target_kbps, workdir)?;
    let mut ref_path = None;
    let mut points = Vec::with_capacity(metrics.len());
    for m in metrics {
        let quality = match m {
            MetricSpec::Internal(im) => im.clip_score(reference, &enc.decoded)?,
            MetricSpec::External { name, tool } => {
                let rp = match &ref_path {
                    Some(p) => p,
                    None => {
                        let p = workdir.join("reference.y4m");
                        write_y4m(reference, &p)?;
                        ref_path.insert(p)
                    }
                };
                let dp = workdir.join(format!("metric-{target_kbps}.y4m"));
                write_y4m(&enc.decoded, &dp)?;
                tool.score(rp, &dp, &workdir.join(format!("{name}-{target_kbps}.json")), name)?
            }
        };
        points.push(RdPoint {
            bitrate_kbps: enc.bitrate_kbps,
            quality,
            metric: m.name().to_string(),
        });
    }
    Ok(points)
}
