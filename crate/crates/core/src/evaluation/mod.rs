//! Evaluation harness: codec profiles, quality metrics, ladder runs, BDBR
//! and the aggregate analyses built on it.

pub mod analysis;
pub mod bdbr;
pub mod codec;
pub mod ladder;
pub mod metrics;

pub use analysis::{
    bad_case_rate, complexity_bin, complexity_heatmap, complexity_score, normalized_complexity, Heatmap,
    HeatmapSample, DEFAULT_FQ_EDGES,
};
pub use bdbr::{bdbr, BdbrResult, RdCurve, RdPoint};
pub use codec::{encode, encode_and_measure, CodecProfile, MetricSpec};
pub use ladder::{compare, curves_from_rows, read_results, run_ladder, write_results, LadderInput, ResultRow};
pub use metrics::{InternalMetric, MetricTool};
