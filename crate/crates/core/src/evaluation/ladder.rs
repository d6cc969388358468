//! Bitrate ladder runs, the result CSV and per-clip BDBR comparisons.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bdbr::{bdbr, BdbrResult, RdCurve, RdPoint};
use super::codec::{encode_and_measure, CodecProfile, MetricSpec};
use crate::error::{Error, Result};
use crate::video_io::Clip;
use crate::workers::parallel_map;

pub const RESULTS_SCHEMA_VERSION: u32 = 1;

/// One measured point, one CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema_version: u32,
    pub clip: String,
    pub codec: String,
    pub target_kbps: u32,
    pub bitrate_kbps: f64,
    pub metric: String,
    pub score: f64,
    pub tool_version: String,
}

/// A clip to encode and the original it is scored against.
#[derive(Clone, Debug)]
pub struct LadderInput {
    pub id: String,
    pub input: Clip,
    pub reference: Clip,
}

/// Encode that failed; kept when the run continues past errors.
#[derive(Debug)]
pub struct LadderFailure {
    pub clip: String,
    pub target_kbps: u32,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct LadderOutcome {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<LadderFailure>,
}

/// Encodes every input at every target over a bounded worker pool. Rows
/// are ordered by (input, target, metric) whatever the scheduling. With
/// `keep_going` off the first failure (in that order) is returned.
pub fn run_ladder(
    inputs: &[LadderInput],
    profile: &CodecProfile,
    targets_kbps: &[u32],
    metrics: &[MetricSpec],
    jobs: usize,
    keep_going: bool,
) -> Result<LadderOutcome> {
    if targets_kbps.is_empty() || metrics.is_empty() {
        return Err(Error::Config("ladder needs at least one bitrate and one metric".into()));
    }
    let root = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let codec = profile.id();
    let version = profile.version();
    let work: Vec<(usize, u32)> = (0..inputs.len())
        .flat_map(|i| targets_kbps.iter().map(move |&b| (i, b)))
        .collect();
    let results = parallel_map(&work, jobs, |k, &(i, b)| {
        let dir = root.path().join(format!("job-{k}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let inp = &inputs[i];
        log::debug!("encoding {} at {b} kbps with {codec}", inp.id);
        let points = encode_and_measure(&inp.input, &inp.reference, profile, b, metrics, &dir);
        let _ = std::fs::remove_dir_all(&dir);
        points
    });
    let mut out = LadderOutcome::default();
    for (&(i, b), res) in work.iter().zip(results) {
        match res {
            Ok(points) => out.rows.extend(points.into_iter().map(|p| ResultRow {
                schema_version: RESULTS_SCHEMA_VERSION,
                clip: inputs[i].id.clone(),
                codec: codec.clone(),
                target_kbps: b,
                bitrate_kbps: p.bitrate_kbps,
                metric: p.metric,
                score: p.quality,
                tool_version: version.clone(),
            })),
            Err(error) if keep_going => {
                log::warn!("{} at {b} kbps failed: {error}", inputs[i].id);
                out.failures.push(LadderFailure {
                    clip: inputs[i].id.clone(),
                    target_kbps: b,
                    error,
                });
            }
            Err(error) => return Err(error),
        }
    }
    Ok(out)
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a result CSV, rejecting unknown schema versions.
pub fn parse_results<R: std::io::Read>(r: R) -> Result<Vec<ResultRow>> {
    let rows = csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<Vec<ResultRow>, _>>()?;
    if let Some(r) = rows.iter().find(|r| r.schema_version != RESULTS_SCHEMA_VERSION) {
        return Err(Error::Serde(format!(
            "result schema version {} (expected {RESULTS_SCHEMA_VERSION})",
            r.schema_version
        )));
    }
    Ok(rows)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    parse_results(std::fs::File::open(path).map_err(|e| Error::io(path, e))?)
}

/// One curve per (codec, clip) for `metric`, in key order.
pub fn curves_from_rows(rows: &[ResultRow], metric: &str) -> Result<Vec<RdCurve>> {
    let mut groups: BTreeMap<(&str, &str), Vec<RdPoint>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == metric) {
        groups.entry((&r.codec, &r.clip)).or_default().push(RdPoint {
            bitrate_kbps: r.bitrate_kbps,
            quality: r.score,
            metric: r.metric.clone(),
        });
    }
    groups
        .into_iter()
        .map(|((codec, clip), points)| RdCurve::new(codec, clip, points))
        .collect()
}

/// BDBR of one clip's test curve against its anchor curve.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBdbr {
    pub clip: String,
    pub codec: String,
    pub metric: String,
    pub result: BdbrResult,
}

/// Flat CSV form of [`ClipBdbr`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipBdbrRow {
    pub schema_version: u32,
    pub clip: String,
    pub codec: String,
    pub metric: String,
    pub bdbr_percent: f64,
    pub valid: bool,
    pub degenerate: bool,
    pub overlap_lo: f64,
    pub overlap_hi: f64,
}

impl From<&ClipBdbr> for ClipBdbrRow {
    fn from(c: &ClipBdbr) -> Self {
        Self {
            schema_version: RESULTS_SCHEMA_VERSION,
            clip: c.clip.clone(),
            codec: c.codec.clone(),
            metric: c.metric.clone(),
            bdbr_percent: c.result.value,
            valid: c.result.valid,
            degenerate: c.result.degenerate,
            overlap_lo: c.result.overlap.0,
            overlap_hi: c.result.overlap.1,
        }
    }
}

/// Pairs anchor and test curves by (codec, clip) and computes BDBR for
/// each. Every clip must appear in both sets.
pub fn compare(anchor: &[ResultRow], test: &[ResultRow], metric: &str) -> Result<Vec<ClipBdbr>> {
    let a = curves_from_rows(anchor, metric)?;
    let t = curves_from_rows(test, metric)?;
    if a.is_empty() {
        return Err(Error::InvalidInput(format!("no `{metric}` rows in the anchor results")));
    }
    let key = |c: &RdCurve| (c.codec.clone(), c.clip.clone());
    let a_keys: Vec<_> = a.iter().map(key).collect();
    let t_keys: Vec<_> = t.iter().map(key).collect();
    if a_keys != t_keys {
        return Err(Error::InvalidInput(format!(
            "anchor and test cover different (codec, clip) sets: {a_keys:?} vs {t_keys:?}"
        )));
    }
    a.iter()
        .zip(&t)
        .map(|(ac, tc)| {
            Ok(ClipBdbr {
                clip: ac.clip.clone(),
                codec: ac.codec.clone(),
                metric: metric.to_string(),
                result: bdbr(ac, tc)?,
            })
        })
        .collect()
}

pub fn write_clip_bdbr(path: &Path, rows: &[ClipBdbr]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(ClipBdbrRow::from(r))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_clip_bdbr<R: std::io::Read>(r: R) -> Result<Vec<ClipBdbrRow>> {
    let rows = csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<Vec<ClipBdbrRow>, _>>()?;
    if let Some(r) = rows.iter().find(|r| r.schema_version != RESULTS_SCHEMA_VERSION) {
        return Err(Error::InvalidInput(format!("unsupported BDBR schema version {}", r.schema_version)));
    }
    Ok(rows)
}

pub fn read_clip_bdbr(path: &Path) -> Result<Vec<ClipBdbrRow>> {
    parse_clip_bdbr(std::fs::File::open(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{synthetic_clip, Stratum};

    fn inputs(n: usize) -> Vec<LadderInput> {
        (0..n)
            .map(|i| {
                let c = synthetic_clip(Stratum::Gradient, 24, 16, 2, i as u64).unwrap();
                LadderInput {
                    id: format!("c{i}"),
                    input: c.clone(),
                    reference: c,
                }
            })
            .collect()
    }

    const LADDER: [u32; 4] = [1000, 2500, 4000, 5000];

    #[test]
    fn ladder_yields_one_point_per_target() {
        let ms = [MetricSpec::parse("ms_ssim", None).unwrap()];
        let out = run_ladder(&inputs(2), &CodecProfile::LosslessStub, &LADDER, &ms, 2, false).unwrap();
        assert_eq!(out.rows.len(), 8);
        let targets: Vec<u32> = out.rows.iter().take(4).map(|r| r.target_kbps).collect();
        assert_eq!(targets, LADDER);
        let curves = curves_from_rows(&out.rows, "ms_ssim").unwrap();
        assert_eq!(curves.len(), 2);
        assert!(curves.iter().all(|c| c.points.len() == 4));
    }

    #[test]
    fn ladder_is_reproducible_across_job_counts() {
        let ms = [
            MetricSpec::parse("ms_ssim", None).unwrap(),
            MetricSpec::parse("psnr", None).unwrap(),
        ];
        let prof = CodecProfile::named("noisy_stub").unwrap();
        let a = run_ladder(&inputs(2), &prof, &LADDER, &ms, 1, false).unwrap();
        let b = run_ladder(&inputs(2), &prof, &LADDER, &ms, 3, false).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn csv_round_trip_and_identical_runs_give_zero() {
        let ms = [MetricSpec::parse("ms_ssim", None).unwrap()];
        let rows = run_ladder(&inputs(2), &CodecProfile::LosslessStub, &LADDER, &ms, 1, false)
            .unwrap()
            .rows;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_results(&p, &rows).unwrap();
        let back = read_results(&p).unwrap();
        assert_eq!(back, rows);
        let cmp = compare(&back, &rows, "ms_ssim").unwrap();
        assert!(cmp.iter().all(|c| c.result.value == 0.0 && c.result.valid));
        let q = dir.path().join("b.csv");
        write_clip_bdbr(&q, &cmp).unwrap();
        assert_eq!(read_clip_bdbr(&q).unwrap().len(), 2);
    }

    #[test]
    fn mismatched_sets_and_schema_rejected() {
        let ms = [MetricSpec::parse("psnr", None).unwrap()];
        let prof = CodecProfile::named("noisy_stub").unwrap();
        let rows = run_ladder(&inputs(2), &prof, &LADDER, &ms, 1, false).unwrap().rows;
        let fewer: Vec<_> = rows.iter().filter(|r| r.clip == "c0").cloned().collect();
        assert!(compare(&rows, &fewer, "psnr").is_err());
        assert!(compare(&rows, &rows, "ms_ssim").is_err());
        let mut bad = rows.clone();
        bad[0].schema_version = 9;
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for r in &bad {
                w.serialize(r).unwrap();
            }
        }
        assert!(parse_results(&buf[..]).is_err());
    }

    #[test]
    fn failures_abort_or_are_collected() {
        use super::super::codec::{CommandTemplate, DecodedFormat, ExternalCodec};
        let prof = CodecProfile::External(ExternalCodec {
            name: "broken".into(),
            encoder: CommandTemplate {
                program: "false".into(),
                args: vec![],
            },
            decoder: CommandTemplate {
                program: "true".into(),
                args: vec![],
            },
            bitstream_ext: "bin".into(),
            decoded: DecodedFormat::Y4m,
            version: None,
        });
        let ms = [MetricSpec::parse("psnr", None).unwrap()];
        assert!(matches!(
            run_ladder(&inputs(1), &prof, &LADDER, &ms, 1, false),
            Err(Error::Codec { .. })
        ));
        let out = run_ladder(&inputs(1), &prof, &LADDER, &ms, 2, true).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(out.failures.len(), 4);
    }
}
