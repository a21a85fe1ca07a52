//! `sparseloc`: simulate, map, localize and score sparse semantic
//! localization experiments.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sparseloc::config::ExperimentConfig;
use sparseloc::geometry::Pose;
use sparseloc::io::{self, Header, TraceRecord, DETECTIONS_FORMAT, GROUND_TRUTH_FORMAT, TRACE_FORMAT};
use sparseloc::mapping::raw_point_count;
use sparseloc::metrics::{EvalWindow, SuccessThreshold};
use sparseloc::pipeline::{self, MetricsReport, Scenario};
use sparseloc::sim::DetectionFrame;

#[derive(Debug, Parser)]
#[command(name = "sparseloc", version, about = "Sparse semantic map building and global localization")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; inputs default to files inside it.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads for particle scoring (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a world and write the mapping log, localization log and ground truth.
    Simulate,
    /// Build a sparse map from a detection log with known poses.
    BuildMap {
        /// Detection log [default: <out>/<outputs.map_log>].
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Ground-truth poses; taken from `gt_pose` fields when absent.
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    /// Run global localization of a detection log against a map.
    Localize {
        /// Map file [default: <out>/<outputs.map>].
        #[arg(long)]
        map: Option<PathBuf>,
        /// Detection log [default: <out>/<outputs.log>].
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Score a trace against ground truth.
    Evaluate {
        /// Trace file [default: <out>/<outputs.trace>].
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Ground truth [default: <out>/<outputs.ground_truth>].
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Success threshold as METERS,DEGREES; repeatable.
        #[arg(long = "threshold", value_parser = parse_threshold)]
        thresholds: Vec<SuccessThreshold>,
        /// Score every frame instead of only frames after first convergence.
        #[arg(long)]
        all_frames: bool,
    },
    /// Run complete experiments over consecutive seeds and write an aggregate CSV.
    Bench {
        /// Number of seeds.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn parse_threshold(s: &str) -> Result<SuccessThreshold, String> {
    let (t, r) = s.split_once(',').ok_or("expected METERS,DEGREES")?;
    let t: f64 = t.trim().parse().map_err(|e| format!("{t}: {e}"))?;
    let r: f64 = r.trim().parse().map_err(|e| format!("{r}: {e}"))?;
    if t > 0.0 && r > 0.0 {
        Ok(SuccessThreshold::new(t, r))
    } else {
        Err("thresholds must be positive".into())
    }
}

/// Bad invocation or config; exits with 1 rather than 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

type CmdResult = anyhow::Result<()>;

struct Ctx {
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn info(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn warn(&self, msg: impl AsRef<str>) {
        eprintln!("warning: {}", msg.as_ref());
    }

    fn path(&self, explicit: Option<PathBuf>, name: &str) -> PathBuf {
        explicit.unwrap_or_else(|| self.out.join(name))
    }
}

fn load_config(g: &GlobalArgs, required: bool) -> anyhow::Result<Option<ExperimentConfig>> {
    let Some(path) = &g.config else {
        if required {
            return Err(usage("--config is required for this command"));
        }
        return Ok(None);
    };
    let mut cfg = ExperimentConfig::load(path)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(Some(cfg))
}

fn require_config(g: &GlobalArgs) -> anyhow::Result<ExperimentConfig> {
    Ok(load_config(g, true)?.expect("required config"))
}

fn header(format: &str, cfg: &ExperimentConfig) -> Header {
    Header::new(format, cfg.seed, &cfg.hash())
}

fn simulate(ctx: &Ctx, cfg: &ExperimentConfig) -> CmdResult {
    let scenario = Scenario::generate(cfg).context("generating world")?;
    let mp = pipeline::mapping_pass(cfg, &scenario).context("mapping drive")?;
    let lp = pipeline::localization_pass(cfg, &scenario).context("localization drive")?;
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    let o = &cfg.outputs;
    let h = header(DETECTIONS_FORMAT, cfg);
    io::write_detection_log(&ctx.out.join(&o.map_log), &h, &mp.frames).context("writing mapping log")?;
    io::write_detection_log(&ctx.out.join(&o.log), &h, &lp.frames).context("writing detection log")?;
    io::write_ground_truth(&ctx.out.join(&o.ground_truth), &header(GROUND_TRUTH_FORMAT, cfg), &lp.poses)
        .context("writing ground truth")?;
    ctx.info(format!(
        "seed {}: {} landmarks, mapping drive {} frames, localization drive {} frames -> {}",
        cfg.seed,
        scenario.world.len(),
        mp.frames.len(),
        lp.frames.len(),
        ctx.out.display()
    ));
    Ok(())
}

fn frame_poses(frames: &[DetectionFrame], poses: Option<&Path>) -> anyhow::Result<Vec<Pose>> {
    if let Some(path) = poses {
        let mut recs = io::read_ground_truth(path)?;
        recs.sort_by_key(|r| r.frame);
        return Ok(recs.into_iter().map(|r| r.pose).collect());
    }
    frames
        .iter()
        .map(|f| {
            f.ground_truth_pose
                .ok_or_else(|| anyhow!("frame {} has no gt_pose; pass --poses", f.frame_index))
        })
        .collect()
}

fn build_map(ctx: &Ctx, cfg: &ExperimentConfig, detections: Option<PathBuf>, poses: Option<PathBuf>) -> CmdResult {
    let log = ctx.path(detections, &cfg.outputs.map_log);
    let (_, frames) = io::read_detection_log(&log)?;
    if frames.is_empty() {
        ctx.warn(format!("{} holds no frames; writing an empty map", log.display()));
    }
    let poses = frame_poses(&frames, poses.as_deref())?;
    let labels = Scenario::label_set(cfg).context("label set")?;
    let mut map = pipeline::build_map(&frames, &poses, &labels, &cfg.mapping)?;
    map.metadata.seed = Some(cfg.seed);
    map.metadata.config_hash = Some(cfg.hash());
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    let path = ctx.out.join(&cfg.outputs.map);
    io::write_map(&path, &map)?;
    let raw = raw_point_count(&frames);
    let ratio = if map.is_empty() {
        "n/a".to_string()
    } else {
        format!("{:.1}", raw as f64 / map.len() as f64)
    };
    ctx.info(format!("K = {}, raw points = {raw}, sparsity ratio = {ratio} -> {}", map.len(), path.display()));
    Ok(())
}

fn localize(ctx: &Ctx, cfg: &ExperimentConfig, map: Option<PathBuf>, detections: Option<PathBuf>) -> CmdResult {
    let map_path = ctx.path(map, &cfg.outputs.map);
    let map = io::read_map(&map_path)?;
    if map.is_empty() {
        bail!("{} has no instances; cannot localize", map_path.display());
    }
    let log = ctx.path(detections, &cfg.outputs.log);
    let (_, frames) = io::read_detection_log(&log)?;
    if frames.is_empty() {
        ctx.warn(format!("{} holds no frames", log.display()));
    }
    let unknown: BTreeSet<&str> = frames
        .iter()
        .flat_map(|f| &f.detections)
        .map(|d| d.label.as_str())
        .filter(|l| map.label_set.index_of(l).is_none())
        .collect();
    let dims: BTreeSet<usize> = frames.iter().flat_map(|f| &f.detections).map(|d| d.feature.len()).collect();
    if !unknown.is_empty() || dims.iter().any(|&d| d != map.label_set.dim()) {
        ctx.warn(format!(
            "detection labels or feature sizes do not match the map label set (unknown labels: {}); matching on features only",
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        ));
    }
    let trace = pipeline::localize(&map, &frames, &cfg.localization, &cfg.refine, cfg.seed)?;
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    let path = ctx.out.join(&cfg.outputs.trace);
    io::write_jsonl(&path, Some(&header(TRACE_FORMAT, cfg)), &trace)?;
    match trace.iter().find(|r| r.converged) {
        Some(r) => ctx.info(format!("converged at frame {}; {} frames -> {}", r.frame, trace.len(), path.display())),
        None => ctx.info(format!("did not converge in {} frames -> {}", trace.len(), path.display())),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportFile<'a> {
    seed: Option<u64>,
    config_hash: Option<String>,
    window: EvalWindow,
    thresholds: &'a [SuccessThreshold],
    #[serde(flatten)]
    report: &'a MetricsReport,
}

fn evaluate(
    ctx: &Ctx,
    cfg: Option<&ExperimentConfig>,
    trace: Option<PathBuf>,
    ground_truth: Option<PathBuf>,
    thresholds: Vec<SuccessThreshold>,
    all_frames: bool,
) -> CmdResult {
    let base = cfg.cloned().unwrap_or_else(|| ExperimentConfig::with_seed(0));
    let mut eval = base.evaluation.clone();
    if !thresholds.is_empty() {
        eval.thresholds = thresholds;
    }
    eval.thresholds = eval.effective_thresholds();
    if all_frames {
        eval.window = EvalWindow::All;
    }
    let trace_path = ctx.path(trace, &base.outputs.trace);
    let (h, records) = io::read_jsonl::<TraceRecord>(&trace_path)?;
    let gt_path = ctx.path(ground_truth, &base.outputs.ground_truth);
    let mut truth = io::read_ground_truth(&gt_path)?;
    truth.sort_by_key(|r| r.frame);
    let truth: Vec<Pose> = truth.into_iter().map(|r| r.pose).collect();
    let report = pipeline::evaluate(&records, &truth, &eval)?;
    let aligned = pipeline::align(&records, &truth)?;
    let (seed, config_hash) = match (&h, cfg) {
        (Some(h), _) => (Some(h.seed), Some(h.config_hash.clone())),
        (None, Some(c)) => (Some(c.seed), Some(c.hash())),
        (None, None) => (None, None),
    };
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    let report_path = ctx.out.join(&base.outputs.report);
    io::write_json(
        &report_path,
        &ReportFile {
            seed,
            config_hash,
            window: eval.window,
            thresholds: &eval.thresholds,
            report: &report,
        },
    )?;
    io::write_text(&ctx.out.join(&base.outputs.aligned_csv), &pipeline::aligned_csv(&aligned))?;
    match &report.coarse {
        None => ctx.info(format!("no frames in the evaluation window -> {}", report_path.display())),
        Some(c) => {
            let mut line = format!("frames {}: ATE {:.3} m, ARE {:.3} deg", c.frames, c.ate, c.are);
            for s in &c.success {
                line.push_str(&format!(
                    ", SR({},{}) {:.1}%",
                    s.threshold.max_trans, s.threshold.max_rot, s.rate
                ));
            }
            if let (Some(r), Some(imp)) = (&report.refined, report.improvement) {
                line.push_str(&format!("; refined ATE {:.3} m ({imp:+.1}%)", r.ate));
            }
            ctx.info(line);
        }
    }
    Ok(())
}

fn bench(ctx: &Ctx, cfg: &ExperimentConfig, seeds: u64) -> CmdResult {
    if seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let thresholds = cfg.evaluation.effective_thresholds();
    let mut csv = String::from("seed,map_instances,raw_points,first_converged,ate,are");
    for th in &thresholds {
        csv.push_str(&format!(",sr_{}m_{}deg", th.max_trans, th.max_rot));
    }
    csv.push_str(",refined_ate,refined_are,improvement\n");
    let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut sums = vec![0.0; 5 + thresholds.len()];
    let mut counts = vec![0usize; sums.len()];
    let mut add = |i: usize, v: Option<f64>| {
        if let Some(v) = v {
            sums[i] += v;
            counts[i] += 1;
        }
    };
    let mut converged = 0;
    for seed in cfg.seed..cfg.seed + seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        let o = pipeline::run_experiment(&run_cfg).with_context(|| format!("seed {seed}"))?;
        let r = &o.report;
        let coarse = r.coarse.as_ref();
        let refined = r.refined.as_ref();
        let srs: Vec<Option<f64>> = (0..thresholds.len())
            .map(|i| coarse.map(|c| c.success[i].rate))
            .collect();
        converged += usize::from(r.first_converged.is_some());
        add(0, coarse.map(|c| c.ate));
        add(1, coarse.map(|c| c.are));
        for (i, sr) in srs.iter().enumerate() {
            add(2 + i, *sr);
        }
        let n = 2 + thresholds.len();
        add(n, refined.map(|c| c.ate));
        add(n + 1, refined.map(|c| c.are));
        add(n + 2, r.improvement);
        csv.push_str(&format!(
            "{seed},{},{},{},{},{}",
            o.map_instances,
            o.raw_points,
            r.first_converged.map(|f| f.to_string()).unwrap_or_default(),
            cell(coarse.map(|c| c.ate)),
            cell(coarse.map(|c| c.are)),
        ));
        for sr in &srs {
            csv.push_str(&format!(",{}", cell(*sr)));
        }
        csv.push_str(&format!(
            ",{},{},{}\n",
            cell(refined.map(|c| c.ate)),
            cell(refined.map(|c| c.are)),
            cell(r.improvement)
        ));
        ctx.info(format!(
            "seed {seed}: K {}, converged {}, ATE {}",
            o.map_instances,
            r.first_converged.map_or("never".into(), |f| format!("at frame {f}")),
            coarse.map_or("n/a".into(), |c| format!("{:.3} m", c.ate))
        ));
    }
    csv.push_str("mean,,,");
    csv.push_str(&converged.to_string());
    for (s, n) in sums.iter().zip(&counts) {
        csv.push(',');
        if *n > 0 {
            csv.push_str(&(s / *n as f64).to_string());
        }
    }
    csv.push('\n');
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    let path = ctx.out.join(&cfg.outputs.bench_csv);
    io::write_text(&path, &csv)?;
    ctx.info(format!("{converged}/{seeds} seeds converged -> {}", path.display()));
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let ctx = Ctx {
        out: cli.global.out.clone(),
        quiet: cli.global.quiet,
    };
    match cli.command {
        Command::Simulate => simulate(&ctx, &require_config(&cli.global)?),
        Command::BuildMap { detections, poses } => build_map(&ctx, &require_config(&cli.global)?, detections, poses),
        Command::Localize { map, detections } => localize(&ctx, &require_config(&cli.global)?, map, detections),
        Command::Evaluate {
            trace,
            ground_truth,
            thresholds,
            all_frames,
        } => {
            let cfg = load_config(&cli.global, false)?;
            evaluate(&ctx, cfg.as_ref(), trace, ground_truth, thresholds, all_frames)
        }
        Command::Bench { seeds } => bench(&ctx, &require_config(&cli.global)?, seeds),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<UsageError>() { 1 } else { 2 })
        }
    }
}
