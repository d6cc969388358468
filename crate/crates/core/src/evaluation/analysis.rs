//! Aggregate views over per-clip BDBR: bad-case rate, a complexity proxy
//! and the complexity by `f_q` heat-map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preanalysis::FeatureVector;

/// Share of results with BDBR above zero (worse than the anchor).
pub fn bad_case_rate(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("bad-case rate of an empty set".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("invalid BDBR value {v}")));
    }
    Ok(values.iter().filter(|&&v| v > 0.0).count() as f64 / values.len() as f64)
}

/// Un-normalised complexity proxy `sqrt(si_avg * ti_avg)`.
pub fn complexity_score(f: &FeatureVector) -> f64 {
    (f.si_avg.max(0.0) * f.ti_avg.max(0.0)).sqrt()
}

/// Min-max normalisation of proxy scores over one evaluation set. A set
/// with no spread maps to 0.5 throughout.
pub fn normalized_complexity(scores: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("invalid complexity score {v}")));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(vec![0.5; scores.len()]);
    }
    Ok(scores.iter().map(|s| ((s - lo) / (hi - lo)).clamp(0.0, 1.0)).collect())
}

pub const COMPLEXITY_BINS: usize = 10;
pub const DEFAULT_FQ_EDGES: [f64; 6] = [1.0, 10.0, 20.0, 30.0, 40.0, 50.0];

/// Bin `i` covers `[i/10, (i+1)/10)`; 1.0 falls in the last bin.
pub fn complexity_bin(c: f64) -> usize {
    ((c * COMPLEXITY_BINS as f64).floor().max(0.0) as usize).min(COMPLEXITY_BINS - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSample {
    pub complexity: f64,
    pub f_q: f64,
    pub bdbr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Column edges; column `j` covers `[edges[j], edges[j+1])`, the last
    /// one closed.
    pub fq_edges: Vec<f64>,
    /// `cells[complexity_bin][fq_bin]`: mean BDBR and count, `None` if empty.
    pub cells: Vec<Vec<Option<(f64, usize)>>>,
}

impl Heatmap {
    fn fq_bin(&self, fq: f64) -> Option<usize> {
        let e = &self.fq_edges;
        let last = e.len() - 2;
        (0..=last).find(|&j| fq >= e[j] && (fq < e[j + 1] || (j == last && fq <= e[j + 1])))
    }

    /// Rows are complexity bins, columns `f_q` bins; empty cells are `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("complexity_bin");
        for w in self.fq_edges.windows(2) {
            s.push_str(&format!(",fq_{}_{}", w[0], w[1]));
        }
        s.push('\n');
        for (i, row) in self.cells.iter().enumerate() {
            s.push_str(&format!("{:.1}-{:.1}", i as f64 / 10.0, (i + 1) as f64 / 10.0));
            for c in row {
                match c {
                    Some((m, _)) => s.push_str(&format!(",{m}")),
                    None => s.push_str(",NA"),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn populated(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }
}

/// Mean BDBR per (complexity bin, `f_q` bin). Samples outside the `f_q`
/// range are dropped with a warning.
pub fn complexity_heatmap(samples: &[HeatmapSample], fq_edges: &[f64]) -> Result<Heatmap> {
    if fq_edges.len() < 2 || fq_edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("f_q edges must be at least two increasing values".into()));
    }
    let mut map = Heatmap {
        fq_edges: fq_edges.to_vec(),
        cells: vec![vec![None; fq_edges.len() - 1]; COMPLEXITY_BINS],
    };
    let mut sums = vec![vec![(0.0, 0usize); fq_edges.len() - 1]; COMPLEXITY_BINS];
    for s in samples {
        if !(0.0..=1.0).contains(&s.complexity) {
            return Err(Error::InvalidInput(format!("complexity {} outside [0, 1]", s.complexity)));
        }
        let Some(j) = map.fq_bin(s.f_q) else {
            log::warn!("f_q {} outside the heat-map range; sample dropped", s.f_q);
            continue;
        };
        let cell = &mut sums[complexity_bin(s.complexity)][j];
        cell.0 += s.bdbr;
        cell.1 += 1;
    }
    for (row, srow) in map.cells.iter_mut().zip(&sums) {
        for (c, &(sum, n)) in row.iter_mut().zip(srow) {
            if n > 0 {
                *c = Some((sum / n as f64, n));
            }
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preanalysis::extract_features;
    use crate::training::{synthetic_clip, Stratum};
    use crate::video_io::{from_normalized_luma, Frame};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn bad_case_examples() {
        assert_eq!(bad_case_rate(&[-1.0, -0.5]).unwrap(), 0.0);
        assert_eq!(bad_case_rate(&[-1.0, 2.0, -3.0, 4.0]).unwrap(), 0.5);
        assert_eq!(bad_case_rate(&[0.0]).unwrap(), 0.0);
        assert!(bad_case_rate(&[]).is_err());
        assert!(bad_case_rate(&[f64::NAN]).is_err());
    }

    #[test]
    fn heatmap_binning() {
        let one = complexity_heatmap(
            &[HeatmapSample {
                complexity: 0.95,
                f_q: 25.0,
                bdbr: -3.0,
            }],
            &DEFAULT_FQ_EDGES,
        )
        .unwrap();
        assert_eq!(one.populated(), 1);
        assert_eq!(one.cells[9][2], Some((-3.0, 1)));
        assert_eq!(complexity_bin(1.0), 9);
        assert_eq!(complexity_bin(0.0), 0);
        assert_eq!(complexity_bin(0.1), 1);
        let csv = one.to_csv();
        assert_eq!(csv.lines().count(), 11);
        assert!(csv.lines().nth(10).unwrap().starts_with("0.9-1.0,NA,NA,-3,NA,NA"));
        assert!(complexity_heatmap(&[], &[1.0]).is_err());
        let edge = complexity_heatmap(
            &[HeatmapSample {
                complexity: 0.0,
                f_q: 50.0,
                bdbr: 1.0,
            }],
            &DEFAULT_FQ_EDGES,
        )
        .unwrap();
        assert_eq!(edge.cells[0][4], Some((1.0, 1)));
    }

    proptest! {
        #[test]
        fn uniform_results_give_equal_cells(
            pts in proptest::collection::vec((0.0f64..=1.0, 1.0f64..=50.0), 1..40),
            v in -20.0f64..20.0,
        ) {
            let s: Vec<_> = pts.iter().map(|&(c, q)| HeatmapSample { complexity: c, f_q: q, bdbr: v }).collect();
            let m = complexity_heatmap(&s, &DEFAULT_FQ_EDGES).unwrap();
            let total: usize = m.cells.iter().flatten().flatten().map(|c| c.1).sum();
            prop_assert_eq!(total, s.len());
            for c in m.cells.iter().flatten().flatten() {
                prop_assert!((c.0 - v).abs() < 1e-9);
            }
        }

        #[test]
        fn normalized_within_unit_interval(xs in proptest::collection::vec(0.0f64..1e3, 1..30)) {
            for v in normalized_complexity(&xs).unwrap() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn flat_clip_is_minimum_and_degenerate_set_is_half() {
        let scores: Vec<f64> = Stratum::ALL
            .iter()
            .map(|&s| {
                let c = synthetic_clip(s, 48, 32, 4, 3).unwrap();
                complexity_score(&extract_features(&c, 30.0).unwrap().features)
            })
            .collect();
        let n = normalized_complexity(&scores).unwrap();
        assert_eq!(n[0], 0.0);
        assert_eq!(n[2], 1.0);
        assert_eq!(normalized_complexity(&[2.0, 2.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn added_noise_never_lowers_raw_score() {
        for seed in 0..6 {
            let c = synthetic_clip(Stratum::Gradient, 48, 32, 4, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let dist = Normal::new(0.0, 0.05).unwrap();
            let noisy: Vec<Frame> = c
                .frames()
                .iter()
                .map(|f| {
                    let y: Vec<f64> = f.y.iter().map(|&v| v as f64 / 255.0 + dist.sample(&mut rng)).collect();
                    Frame {
                        y: from_normalized_luma(&y, 8),
                        u: f.u.clone(),
                        v: f.v.clone(),
                    }
                })
                .collect();
            let n = c.with_frames(noisy).unwrap();
            let a = complexity_score(&extract_features(&c, 30.0).unwrap().features);
            let b = complexity_score(&extract_features(&n, 30.0).unwrap().features);
            assert!(b >= a, "seed {seed}: {b} < {a}");
        }
    }
}
