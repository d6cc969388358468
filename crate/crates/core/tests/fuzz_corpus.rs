//! Replays the checked-in fuzz seeds through the same entry points as the
//! fuzz targets. Every seed must parse; truncated and byte-flipped variants
//! must fail cleanly or round-trip, never panic.

use std::path::{Path, PathBuf};

use tdp::config::TdpConfig;
use tdp::evaluation::ladder::{parse_clip_bdbr, parse_results};
use tdp::evaluation::metrics::parse_vmaf_json;
use tdp::evaluation::{curves_from_rows, CodecProfile};
use tdp::numerics::Checkpoint;
use tdp::preanalysis::{parse_probe_cache, parse_qp_log};
use tdp::training::{parse_metrics, TdpModels};
use tdp::video_io::{encode_y4m, parse_raw_yuv, parse_y4m, RawGeometry};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Prefixes at a few cut points and single-byte flips at a few offsets.
fn variants(seed: &[u8]) -> Vec<Vec<u8>> {
    let n = seed.len();
    let mut v: Vec<Vec<u8>> = [0, 1, n / 3, n / 2, n.saturating_sub(1)]
        .iter()
        .map(|&k| seed[..k.min(n)].to_vec())
        .collect();
    for k in [0, n / 5, n / 2, n * 4 / 5, n.saturating_sub(1)] {
        if k < n {
            for mask in [0x01u8, 0x80, 0xff] {
                let mut m = seed.to_vec();
                m[k] ^= mask;
                v.push(m);
            }
        }
    }
    v
}

/// Runs `ok` on each seed (must accept) and `body` on each variant.
fn replay(target: &str, ok: impl Fn(&[u8]) -> bool, body: impl Fn(&[u8])) {
    for (path, seed) in seeds(target) {
        assert!(ok(&seed), "{} rejected", path.display());
        body(&seed);
        for v in variants(&seed) {
            body(&v);
        }
    }
}

fn text(data: &[u8]) -> Option<&str> {
    std::str::from_utf8(data).ok()
}

#[test]
fn y4m_seeds() {
    let body = |d: &[u8]| {
        if let Ok(clip) = parse_y4m(d) {
            let mut out = Vec::new();
            encode_y4m(&clip, &mut out).unwrap();
            assert_eq!(parse_y4m(out.as_slice()).unwrap().content_hash(), clip.content_hash());
        }
    };
    replay("y4m", |d| parse_y4m(d).is_ok(), body);
}

fn split_raw(d: &[u8]) -> Option<(RawGeometry, &[u8])> {
    let split = d.iter().position(|&b| b == b'\n').unwrap_or(d.len());
    let geom = RawGeometry::parse(text(&d[..split])?).ok()?;
    Some((geom, d.get(split + 1..).unwrap_or(&[])))
}

#[test]
fn raw_yuv_seeds() {
    replay(
        "raw_yuv",
        |d| split_raw(d).is_some_and(|(g, p)| parse_raw_yuv(p, g).is_ok()),
        |d| {
            if let Some((g, p)) = split_raw(d) {
                if let Ok(clip) = parse_raw_yuv(p, g) {
                    assert_eq!(clip.frames().len() * g.frame_bytes(), p.len());
                }
            }
        },
    );
}

#[test]
fn probe_cache_seeds() {
    replay(
        "probe_cache",
        |d| parse_probe_cache(d).is_ok(),
        |d| {
            if let Ok(e) = parse_probe_cache(d) {
                assert!(e.result.clip_qp.is_finite());
            }
        },
    );
}

#[test]
fn qp_log_seeds() {
    replay(
        "qp_log",
        |d| text(d).is_some_and(|t| !parse_qp_log(t).is_empty()),
        |d| {
            if let Some(t) = text(d) {
                assert!(parse_qp_log(t).iter().all(|q| q.is_finite()));
            }
        },
    );
}

#[test]
fn vmaf_json_seeds() {
    replay(
        "vmaf_json",
        |d| parse_vmaf_json(d, "vmaf").is_ok(),
        |d| {
            for key in ["vmaf", "vmaf_neg"] {
                if let Ok(v) = parse_vmaf_json(d, key) {
                    assert!(v.is_finite());
                }
            }
        },
    );
}

#[test]
fn checkpoint_seeds() {
    replay(
        "checkpoint",
        |d| Checkpoint::decode(d).is_ok_and(|ck| TdpModels::from_checkpoint(&ck).is_ok()),
        |d| {
            if let Ok(ck) = Checkpoint::decode(d) {
                assert_eq!(Checkpoint::decode(&ck.encode()).unwrap().encode(), ck.encode());
                let _ = TdpModels::from_checkpoint(&ck);
            }
        },
    );
}

#[test]
fn config_toml_seeds() {
    replay(
        "config_toml",
        |d| text(d).is_some_and(|t| TdpConfig::from_toml_str(t).is_ok()),
        |d| {
            if let Some(Ok(cfg)) = text(d).map(TdpConfig::from_toml_str) {
                assert_eq!(TdpConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap(), cfg);
            }
        },
    );
}

#[test]
fn codec_profile_seeds() {
    replay(
        "codec_profile",
        |d| text(d).is_some_and(|t| CodecProfile::from_toml_str(t).is_ok()),
        |d| {
            if let Some(Ok(p)) = text(d).map(CodecProfile::from_toml_str) {
                let _ = p.id();
            }
        },
    );
}

#[test]
fn results_csv_seeds() {
    replay(
        "results_csv",
        |d| parse_results(d).is_ok(),
        |d| {
            if let Ok(rows) = parse_results(d) {
                for metric in ["ms_ssim", "psnr", "vmaf"] {
                    let _ = curves_from_rows(&rows, metric);
                }
            }
        },
    );
}

#[test]
fn clip_bdbr_csv_seeds() {
    replay(
        "clip_bdbr_csv",
        |d| parse_clip_bdbr(d).is_ok(),
        |d| {
            let _ = parse_clip_bdbr(d);
        },
    );
}

#[test]
fn metrics_csv_seeds() {
    replay(
        "metrics_csv",
        |d| parse_metrics(d).is_ok(),
        |d| {
            let _ = parse_metrics(d);
        },
    );
}
