use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tdp::codec_sim::dynamic_quant_level;
use tdp::config::TdpConfig;
use tdp::dpn::PreprocessOptions;
use tdp::evaluation::ladder::{read_clip_bdbr, write_clip_bdbr};
use tdp::evaluation::{
    bad_case_rate, compare, complexity_heatmap, complexity_score, normalized_complexity, read_results, run_ladder,
    write_results, CodecProfile, HeatmapSample, LadderInput, MetricSpec, DEFAULT_FQ_EDGES,
};
use tdp::preanalysis::{extract_features, probe_qp, ClipAnalysis, ProbeSource};
use tdp::training::{
    build_dataset, run_ablation, synthetic_corpus, train, Dataset, TdpModels, TrainOptions, ABLATION_ROWS,
    CONFIG_FILE,
};
use tdp::video_io::{read_clip, write_y4m, Clip, RawGeometry};
use tdp::{Error, Result};

const ANALYSIS_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "tdp", version, about = "Content-adaptive learned preprocessing for video compression")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Global {
    /// TOML config file; flags and --set override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted config override, e.g. `train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every random choice; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Headerless YUV input geometry: `WxH[:NUM/DEN][:BITS][:420|422|444]`.
    #[arg(long, global = true, value_name = "GEOMETRY")]
    raw: Option<String>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-clip SI/TI features and probed QP as JSON.
    Analyze {
        /// Y4M clips, or raw YUV with `--raw`.
        inputs: Vec<PathBuf>,
        /// Probe encode bitrate in kbps; defaults to `probe.bitrate_kbps`.
        #[arg(long)]
        probe_bitrate: Option<u32>,
        /// Output path, `-` for standard output.
        #[arg(long, default_value = "-")]
        json: String,
    },
    /// Trains all networks into an output directory.
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Run directory for checkpoint, metrics, normaliser and config.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Writes the preprocessed clip.
    Preprocess {
        input: PathBuf,
        /// `checkpoint.tdpc` from a training run.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output Y4M path.
        #[arg(long)]
        output: PathBuf,
        /// Use this intensity instead of the predicted one.
        #[arg(long)]
        force_fd: Option<f64>,
    },
    /// Encodes every input along a bitrate ladder and writes a result CSV.
    Evaluate {
        inputs: Vec<PathBuf>,
        /// Originals to score against, paired with inputs; defaults to the inputs.
        #[arg(long, num_args = 1..)]
        reference: Vec<PathBuf>,
        /// `stub`, `noisy_stub`, `x264`, `x265`, `vvenc` or a TOML profile.
        #[arg(long, default_value = "x265")]
        codec: String,
        /// Comma-separated kbps ladder; defaults to `eval.bitrates_kbps`.
        #[arg(long, value_delimiter = ',')]
        bitrates: Option<Vec<u32>>,
        /// Comma-separated metrics (`ms_ssim`, `ssim`, `psnr`, `vmaf`,
        /// `vmaf_neg`); defaults to `eval.metrics`.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        /// Preprocess inputs with this checkpoint before encoding.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// With `--checkpoint`, use this intensity instead of the predicted one.
        #[arg(long)]
        force_fd: Option<f64>,
        /// Result CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Record failed encodes and continue.
        #[arg(long)]
        keep_going: bool,
    },
    /// BDBR of test results against anchor results, per clip and on average.
    Bdbr {
        /// Result CSV without preprocessing.
        anchor: PathBuf,
        /// Result CSV to compare, same clips and codecs.
        test: PathBuf,
        #[arg(long, default_value = "ms_ssim")]
        metric: String,
        /// Per-clip BDBR CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean BDBR by normalised complexity and `f_q`, as a CSV matrix.
    Heatmap {
        /// Per-clip BDBR CSV from `bdbr --out`.
        #[arg(long)]
        bdbr: PathBuf,
        /// The evaluated clips; file stems must match the clip ids.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Heat-map CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the four control-scheme ablation rows.
    Ablate {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Root directory; each row trains into a subdirectory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only list the rows.
        #[arg(long)]
        dry_run: bool,
    },
}

#[derive(Args)]
struct CorpusArgs {
    /// Y4M training clips.
    inputs: Vec<PathBuf>,
    /// Add this many procedurally generated clips per complexity stratum.
    #[arg(long, default_value_t = 0)]
    synthetic: usize,
    /// Synthetic clip size `WxHxFRAMES`.
    #[arg(long, default_value = "96x96x6")]
    synthetic_size: String,
}

fn parse_dims(s: &str, n: usize) -> Result<Vec<usize>> {
    let v: Vec<usize> = s
        .split('x')
        .map(|p| p.parse().map_err(|_| Error::Config(format!("bad dimensions `{s}`"))))
        .collect::<Result<_>>()?;
    if v.len() != n || v.contains(&0) {
        return Err(Error::Config(format!("expected {n} positive values separated by `x`, got `{s}`")));
    }
    Ok(v)
}

struct Ctx {
    cfg: TdpConfig,
    jobs: usize,
    raw: Option<RawGeometry>,
}

impl Ctx {
    fn new(g: &Global) -> Result<Self> {
        let base = match &g.config {
            Some(p) => TdpConfig::load(p)?,
            None => TdpConfig::default(),
        };
        let mut cfg = base.with_overrides(&g.overrides)?;
        if let Some(s) = g.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(Self {
            cfg,
            jobs: g.jobs,
            raw: g.raw.as_deref().map(RawGeometry::parse).transpose()?,
        })
    }

    fn read(&self, p: &Path) -> Result<Clip> {
        read_clip(p, self.raw)
    }
}

fn clip_id(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

#[derive(Serialize)]
struct AnalysisRecord<'a> {
    schema_version: u32,
    clip: String,
    qp_source: ProbeSource,
    per_frame_qp: &'a [f64],
    #[serde(flatten)]
    analysis: &'a ClipAnalysis,
}

fn analyze(ctx: &Ctx, inputs: &[PathBuf], probe_bitrate: Option<u32>, json: &str) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Config("no input clips".into()));
    }
    let mut probe = ctx.cfg.probe.probe_config();
    if let Some(b) = probe_bitrate {
        probe.bitrate_kbps = b;
    }
    let mut out = Vec::new();
    for p in inputs {
        let clip = ctx.read(p)?;
        let qp = probe_qp(&clip, &probe)?;
        let analysis = extract_features(&clip, qp.clip_qp)?;
        out.push(serde_json::to_value(AnalysisRecord {
            schema_version: ANALYSIS_SCHEMA_VERSION,
            clip: p.display().to_string(),
            qp_source: qp.source,
            per_frame_qp: &qp.per_frame_qp,
            analysis: &analysis,
        })?);
    }
    let text = serde_json::to_string_pretty(&out)? + "\n";
    if json == "-" {
        std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e))
    } else {
        std::fs::write(json, text).map_err(|e| Error::io(json, e))
    }
}

fn corpus(ctx: &Ctx, a: &CorpusArgs) -> Result<Dataset> {
    let mut clips = Vec::new();
    for p in &a.inputs {
        clips.push((p.display().to_string(), ctx.read(p)?));
    }
    if a.synthetic > 0 {
        let d = parse_dims(&a.synthetic_size, 3)?;
        for s in synthetic_corpus(a.synthetic, d[0], d[1], d[2], ctx.cfg.seed)? {
            clips.push((s.id, s.clip));
        }
    }
    if clips.is_empty() {
        return Err(Error::Config("no training clips: pass inputs or --synthetic N".into()));
    }
    let t = &ctx.cfg.train;
    let ds = build_dataset(
        &clips,
        t.patch_size,
        t.samples_per_clip,
        &ctx.cfg.probe.probe_config(),
        ctx.cfg.seed,
        ctx.jobs,
    )?;
    log::info!(
        "dataset: {} samples, {} clips skipped, manifest {}",
        ds.len(),
        ds.skipped.len(),
        ds.manifest_hash()
    );
    Ok(ds)
}

/// Loads a checkpoint and the intensity override implied by the training
/// config saved beside it (a fixed `f_d` when DPI was disabled).
fn load_models(path: &Path, force_fd: Option<f64>) -> Result<(TdpModels, Option<f64>)> {
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", path.display())));
    }
    let (models, _) = TdpModels::load(path)?;
    let saved = path.parent().map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file());
    let fd = match (force_fd, saved) {
        (Some(v), _) => Some(v),
        (None, Some(p)) => {
            let c = TdpConfig::load(&p)?;
            (!c.toggles.enable_dpi).then_some(c.toggles.fixed_f_d)
        }
        (None, None) => None,
    };
    Ok((models, fd))
}

fn preprocess_one(ctx: &Ctx, models: &TdpModels, clip: &Clip, force_fd: Option<f64>) -> Result<Clip> {
    let qp = probe_qp(clip, &ctx.cfg.probe.probe_config())?.clip_qp;
    let out = models.preprocess(
        clip,
        qp,
        &PreprocessOptions {
            force_fd,
            ..Default::default()
        },
    )?;
    log::info!("f_d = {:.4}", out.f_d);
    Ok(out.clip)
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    ctx: &Ctx,
    inputs: &[PathBuf],
    reference: &[PathBuf],
    codec: &str,
    bitrates: Option<Vec<u32>>,
    metrics: Option<Vec<String>>,
    checkpoint: Option<&Path>,
    force_fd: Option<f64>,
    out: &Path,
    keep_going: bool,
) -> Result<bool> {
    if inputs.is_empty() {
        return Err(Error::Config("no input clips".into()));
    }
    if !reference.is_empty() && reference.len() != inputs.len() {
        return Err(Error::Config("--reference must list one file per input".into()));
    }
    let profile = CodecProfile::resolve(codec)?;
    let bitrates = bitrates.unwrap_or_else(|| ctx.cfg.eval.bitrates_kbps.clone());
    let metrics = metrics
        .unwrap_or_else(|| ctx.cfg.eval.metrics.clone())
        .iter()
        .map(|m| MetricSpec::parse(m, ctx.cfg.eval.vmaf_tool.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let models = checkpoint.map(|p| load_models(p, force_fd)).transpose()?;
    if models.is_none() && force_fd.is_some() {
        return Err(Error::Config("--force-fd needs --checkpoint".into()));
    }
    let mut jobs = Vec::new();
    for (i, p) in inputs.iter().enumerate() {
        let input = ctx.read(p)?;
        let (id, reference) = match reference.get(i) {
            Some(r) => (clip_id(r), ctx.read(r)?),
            None => (clip_id(p), input.clone()),
        };
        let input = match &models {
            Some((m, fd)) => preprocess_one(ctx, m, &input, *fd)?,
            None => input,
        };
        jobs.push(LadderInput { id, input, reference });
    }
    let outcome = run_ladder(&jobs, &profile, &bitrates, &metrics, ctx.jobs, keep_going)?;
    write_results(out, &outcome.rows)?;
    for f in &outcome.failures {
        eprintln!("failed: {} at {} kbps: {}", f.clip, f.target_kbps, f.error);
    }
    println!("{} rows written to {}", outcome.rows.len(), out.display());
    Ok(outcome.failures.is_empty())
}

fn bdbr_cmd(anchor: &Path, test: &Path, metric: &str, out: Option<&Path>) -> Result<()> {
    let res = compare(&read_results(anchor)?, &read_results(test)?, metric)?;
    let mut valid = Vec::new();
    for c in &res {
        for w in &c.result.warnings {
            log::warn!("{}: {w}", c.clip);
        }
        if c.result.valid {
            println!("{}\t{}\t{:.2}", c.clip, c.codec, c.result.value);
            valid.push(c.result.value);
        } else {
            println!("{}\t{}\tinvalid (no quality overlap)", c.clip, c.codec);
        }
    }
    if let Some(p) = out {
        write_clip_bdbr(p, &res)?;
    }
    if valid.is_empty() {
        return Err(Error::InvalidInput("no valid BDBR result".into()));
    }
    println!("mean BDBR ({metric}): {:.2}", valid.iter().sum::<f64>() / valid.len() as f64);
    println!("bad-case rate: {:.4}", bad_case_rate(&valid)?);
    Ok(())
}

fn heatmap(ctx: &Ctx, bdbr: &Path, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let rows = read_clip_bdbr(bdbr)?;
    let probe = ctx.cfg.probe.probe_config();
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    let mut fqs = Vec::new();
    for p in inputs {
        let clip = ctx.read(p)?;
        let qp = probe_qp(&clip, &probe)?.clip_qp;
        scores.push(complexity_score(&extract_features(&clip, qp)?.features));
        fqs.push(dynamic_quant_level(qp)?.value());
        ids.push(clip_id(p));
    }
    let norm = normalized_complexity(&scores)?;
    let mut samples = Vec::new();
    for r in rows.iter().filter(|r| r.valid) {
        let i = ids
            .iter()
            .position(|id| *id == r.clip)
            .ok_or_else(|| Error::InvalidInput(format!("no input clip for BDBR row `{}`", r.clip)))?;
        samples.push(HeatmapSample {
            complexity: norm[i],
            f_q: fqs[i],
            bdbr: r.bdbr_percent,
        });
    }
    let map = complexity_heatmap(&samples, &DEFAULT_FQ_EDGES)?;
    std::fs::write(out, map.to_csv()).map_err(|e| Error::io(out, e))?;
    println!("{} populated cells written to {}", map.populated(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let ctx = Ctx::new(&cli.global)?;
    match cli.command {
        Cmd::Analyze {
            inputs,
            probe_bitrate,
            json,
        } => analyze(&ctx, &inputs, probe_bitrate, &json)?,
        Cmd::Train { corpus: c, out, resume } => {
            let ds = corpus(&ctx, &c)?;
            let r = train(&ctx.cfg, &ds, &out, TrainOptions { resume, stop_after: None })?;
            if let Some(last) = r.rows.last() {
                println!("step {} loss {:.6} f_d {:.4}", r.end_step, last.loss, last.f_d);
            }
            println!("checkpoint written to {}", out.display());
        }
        Cmd::Preprocess {
            input,
            checkpoint,
            output,
            force_fd,
        } => {
            let (models, fd) = load_models(&checkpoint, force_fd)?;
            let clip = preprocess_one(&ctx, &models, &ctx.read(&input)?, fd)?;
            write_y4m(&clip, &output)?;
        }
        Cmd::Evaluate {
            inputs,
            reference,
            codec,
            bitrates,
            metrics,
            checkpoint,
            force_fd,
            out,
            keep_going,
        } => {
            return evaluate(
                &ctx,
                &inputs,
                &reference,
                &codec,
                bitrates,
                metrics,
                checkpoint.as_deref(),
                force_fd,
                &out,
                keep_going,
            )
        }
        Cmd::Bdbr {
            anchor,
            test,
            metric,
            out,
        } => bdbr_cmd(&anchor, &test, &metric, out.as_deref())?,
        Cmd::Heatmap { bdbr, inputs, out } => heatmap(&ctx, &bdbr, &inputs, &out)?,
        Cmd::Ablate {
            corpus: c,
            out,
            dry_run,
        } => {
            for r in ABLATION_ROWS {
                println!("{}\tdpi={}\tdql={}\tdlamt={}", r.name, r.dpi, r.dql, r.dlamt);
            }
            if !dry_run {
                let out = out.ok_or_else(|| Error::Config("ablate needs --out unless --dry-run".into()))?;
                let ds = corpus(&ctx, &c)?;
                for (row, dir) in run_ablation(&ctx.cfg, &ds, &out)? {
                    println!("{} trained into {}", row.name, dir.display());
                }
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
