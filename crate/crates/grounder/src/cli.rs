//! Command-line surface: grounding runs, evaluation, stitching, and the
//! visual-retrieval benchmark.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use image::RgbImage;
use log::warn;
use serde::Serialize;
use thiserror::Error;

use crate::agent::backend::{BackendError, HttpVlmBackend, ScriptFile, VlmBackend};
use crate::bench::{
    generate_suite, run_layout_sweep, suite_manifest, time_requests, write_sweep_csv,
    write_timing_csv, BenchError, EchoBackend, ImageSource,
};
use crate::config::{self, BackendKind, ConfigError, Overrides, PerceptionKind, PipelineConfig};
use crate::eval::{
    accuracy_report, iou3d, mask_iou, nr3d_match, write_records_jsonl, EvalError, EvalRecord,
};
use crate::perception::fixtures::FixturePerception;
use crate::perception::http::{HttpDetector, HttpSegmenter};
use crate::perception::{
    BBox2, Detection2D, Detector, Mask2D, Matcher, PerceptionError, PixelPair, Segmenter,
};
use crate::pipeline::{ground_query, GroundingResult, PerceptionSuite, ResultStatus};
use crate::projection::Aabb3;
use crate::scene::{load_queries, load_scene, Frame, Query, Scene, SceneError};
use crate::stitch::{plan_layouts, render_plan, Layout, StitchError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Stitch(#[from] StitchError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("cannot write {path}: {detail}")]
    Write { path: String, detail: String },
    #[error("{0}")]
    Invalid(String),
    #[error("missing result files for {} queries: {}", ids.len(), ids.join(", "))]
    MissingResults { ids: Vec<String> },
    #[error("{} queries failed: {}", failures.len(),
            failures.iter().map(|(id, e)| format!("{id}: {e}")).collect::<Vec<_>>().join("; "))]
    QueryFailures { failures: Vec<(String, String)> },
    #[error("all {0} benchmark requests failed")]
    BenchTotalFailure(usize),
}

#[derive(Debug, Parser)]
#[command(
    name = "grounder",
    version,
    about = "Zero-shot 3D visual grounding from posed RGB-D scans"
)]
pub struct Cli {
    /// Configuration file (.toml or .json); keys mirror the config defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for query-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Random seed for benchmark suite generation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ground every query against its scene and write per-query records.
    Ground(GroundArgs),
    /// Score grounding results against ground truth.
    Eval(EvalArgs),
    /// Stitch a directory of images into grid composites.
    Stitch(StitchArgs),
    /// Generate and score the visual-retrieval benchmark.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GroundArgs {
    /// Scene root containing one directory per scene.
    #[arg(long)]
    pub scene_root: PathBuf,
    /// Queries file, one JSON object per line.
    #[arg(long)]
    pub queries: PathBuf,
    /// Perception fixture root (one subdirectory per scene).
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Response script file; implies the scripted backend.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Retry budget for the grounding loop.
    #[arg(long)]
    pub retry_limit: Option<u32>,
    /// Soft limit on stitched images per request.
    #[arg(long)]
    pub soft_limit: Option<usize>,
    /// Keep one frame from every this-many frames.
    #[arg(long)]
    pub frame_stride: Option<usize>,
    /// Minimum detection score for view preselection and candidates.
    #[arg(long)]
    pub detection_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Queries file with ground-truth boxes, one JSON object per line.
    #[arg(long)]
    pub queries: PathBuf,
    /// Directory of per-query result JSON files [default: <out>/results].
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Also score predicted 2D masks against ground-truth masks.
    #[arg(long)]
    pub mask_iou: bool,
}

#[derive(Debug, Args)]
pub struct StitchArgs {
    /// Directory of input images; file stems become frame IDs.
    #[arg(long)]
    pub input: PathBuf,
    /// Soft limit on composite count [default: config soft_limit].
    #[arg(long)]
    pub soft_limit: Option<usize>,
    /// Skip drawing frame IDs (needed for non-numeric file stems).
    #[arg(long)]
    pub plain: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Number of benchmark items to generate.
    #[arg(long, default_value_t = 40)]
    pub count: usize,
    /// Directory of base images [default: synthetic 640x480 backgrounds].
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Comma-separated grid layouts to sweep.
    #[arg(long, default_value = "4x1,2x4,8x2,9x3")]
    pub layouts: String,
    /// Images bundled into each retrieval request.
    #[arg(long, default_value_t = 4)]
    pub images_per_request: usize,
    /// Measure request wall time instead of running the accuracy sweep.
    #[arg(long)]
    pub timing: bool,
    /// Maximum attached image copies in timing mode.
    #[arg(long, default_value_t = 8)]
    pub copies: usize,
    /// Trials per copy count in timing mode.
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    /// Backend override: echo, scripted, or http.
    #[arg(long)]
    pub backend: Option<String>,
}

/// Dispatches one parsed invocation.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Ground(args) => cmd_ground(cli, args),
        Command::Eval(args) => cmd_eval(cli, args),
        Command::Stitch(args) => cmd_stitch(cli, args),
        Command::Bench(args) => cmd_bench(cli, args),
    }
}

/// Record of what a run was asked to do, written next to its outputs.
#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    version: &'static str,
    timestamp_unix: u64,
    seed: u64,
    jobs: usize,
    config: &'a PipelineConfig,
}

fn write_manifest(
    dir: &Path,
    command: &'static str,
    cfg: &PipelineConfig,
    seed: u64,
    jobs: usize,
) -> Result<(), CliError> {
    let timestamp_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        timestamp_unix,
        seed,
        jobs,
        config: cfg,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let write_err = |detail: String| CliError::Write {
        path: path.display().to_string(),
        detail,
    };
    let mut text = serde_json::to_string_pretty(value).map_err(|e| write_err(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| write_err(e.to_string()))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Write {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Perception stack assembled from independently-sourced parts.
struct ComposedPerception {
    detector: Box<dyn Detector>,
    segmenter: Box<dyn Segmenter>,
    matcher: Box<dyn Matcher>,
}

impl Detector for ComposedPerception {
    fn detect(&self, frame: &Frame, class: &str) -> Result<Vec<Detection2D>, PerceptionError> {
        self.detector.detect(frame, class)
    }
}

impl Segmenter for ComposedPerception {
    fn segment(&self, frame: &Frame, bbox: &BBox2) -> Result<Mask2D, PerceptionError> {
        self.segmenter.segment(frame, bbox)
    }
}

impl Matcher for ComposedPerception {
    fn match_pair(
        &self,
        source: &Frame,
        target: &Frame,
    ) -> Result<Vec<PixelPair>, PerceptionError> {
        self.matcher.match_pair(source, target)
    }
}

/// Matcher for deployments without a correspondence source: every candidate
/// view is omitted, so boxes fuse from the anchor view alone.
struct NoMatches;

impl Matcher for NoMatches {
    fn match_pair(
        &self,
        _source: &Frame,
        _target: &Frame,
    ) -> Result<Vec<PixelPair>, PerceptionError> {
        Ok(Vec::new())
    }
}

enum BackendSource {
    /// Per-query scripts keyed by query ID.
    Script(ScriptFile),
    /// One shared live backend.
    Shared(Arc<dyn VlmBackend>),
}

fn http_backend(cfg: &PipelineConfig) -> Result<HttpVlmBackend, BackendError> {
    HttpVlmBackend::new(
        &cfg.backend.base_url,
        &cfg.backend.model,
        cfg.backend.api_key_env.as_deref(),
        cfg.backend.temperature,
        cfg.backend.top_p,
        Duration::from_secs(cfg.backend.timeout_s),
        cfg.backend.max_images,
    )
}

fn cmd_ground(cli: &Cli, args: &GroundArgs) -> Result<(), CliError> {
    let overrides = Overrides {
        retry_limit: args.retry_limit,
        soft_limit: args.soft_limit,
        frame_stride: args.frame_stride,
        detection_threshold: args.detection_threshold,
        script: args.script.clone(),
        fixtures: args.fixtures.clone(),
    };
    let cfg = config::resolve(cli.config.as_deref(), &overrides)?;

    let mut queries = load_queries(&args.queries)?;
    queries.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    if queries.is_empty() {
        return Err(CliError::Invalid(format!(
            "no queries in {}",
            args.queries.display()
        )));
    }

    // Load each referenced scene once, already frame-sampled.
    let mut scenes: BTreeMap<String, Scene> = BTreeMap::new();
    for q in &queries {
        if !scenes.contains_key(&q.scene_id) {
            let scene = load_scene(&args.scene_root, &q.scene_id, cfg.depth_divisor)?;
            scenes.insert(q.scene_id.clone(), scene.sample_frames(cfg.frame_stride));
        }
    }

    let mut perception: BTreeMap<String, Arc<dyn PerceptionSuite>> = BTreeMap::new();
    match cfg.perception.kind {
        PerceptionKind::Fixture => {
            let root = cfg.perception.fixtures.as_deref().ok_or_else(|| {
                CliError::Invalid(
                    "fixture perception needs a fixture root (--fixtures or perception.fixtures)"
                        .into(),
                )
            })?;
            for scene_id in scenes.keys() {
                perception.insert(
                    scene_id.clone(),
                    Arc::new(FixturePerception::open(root, scene_id)?),
                );
            }
        }
        PerceptionKind::Http => {
            warn!(
                "http perception has no cross-view correspondence source; \
                 boxes will fuse from the anchor view alone"
            );
            let timeout = Duration::from_secs(cfg.backend.timeout_s);
            let suite: Arc<dyn PerceptionSuite> = Arc::new(ComposedPerception {
                detector: Box::new(HttpDetector::new(&cfg.perception.base_url, timeout)?),
                segmenter: Box::new(HttpSegmenter::new(&cfg.perception.base_url, timeout)?),
                matcher: Box::new(NoMatches),
            });
            for scene_id in scenes.keys() {
                perception.insert(scene_id.clone(), Arc::clone(&suite));
            }
        }
    }

    let backend_source = match cfg.backend.kind {
        BackendKind::Scripted => {
            let path = cfg.backend.script.as_deref().ok_or_else(|| {
                CliError::Invalid(
                    "scripted backend needs a script file (--script or backend.script)".into(),
                )
            })?;
            BackendSource::Script(ScriptFile::load(path)?)
        }
        BackendKind::Http => BackendSource::Shared(Arc::new(http_backend(&cfg)?)),
        BackendKind::Echo => {
            return Err(CliError::Invalid(
                "the echo backend only answers retrieval requests; use it with bench".into(),
            ))
        }
    };

    let out = &cli.out;
    for sub in ["results", "transcripts", "timings", "masks"] {
        ensure_dir(&out.join(sub))?;
    }

    let next = AtomicUsize::new(0);
    let successes = AtomicUsize::new(0);
    let failures = AtomicUsize::new(0);
    let errors: Mutex<Vec<(String, String)>> = Mutex::new(Vec::new());
    let workers = cli.jobs.clamp(1, queries.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(query) = queries.get(i) else { break };
                match run_one_query(query, &scenes, &perception, &backend_source, &cfg, out) {
                    Ok(ResultStatus::Success) => {
                        successes.fetch_add(1, Ordering::Relaxed);
                    }
                    Ok(ResultStatus::Failure) => {
                        failures.fetch_add(1, Ordering::Relaxed);
                    }
                    Err(e) => errors
                        .lock()
                        .expect("error list lock")
                        .push((query.query_id.clone(), e)),
                }
            });
        }
    });

    write_manifest(out, "ground", &cfg, cli.seed, cli.jobs)?;
    println!(
        "grounded {} queries: {} succeeded, {} reported failure -> {}",
        queries.len(),
        successes.load(Ordering::Relaxed),
        failures.load(Ordering::Relaxed),
        out.display()
    );
    let mut errors = errors.into_inner().expect("error list lock");
    if errors.is_empty() {
        Ok(())
    } else {
        errors.sort();
        Err(CliError::QueryFailures { failures: errors })
    }
}

/// Grounds one query and writes its four output files. Errors are returned
/// as strings so the caller can keep processing the rest of the batch.
fn run_one_query(
    query: &Query,
    scenes: &BTreeMap<String, Scene>,
    perception: &BTreeMap<String, Arc<dyn PerceptionSuite>>,
    backend_source: &BackendSource,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<ResultStatus, String> {
    let scene = &scenes[&query.scene_id];
    let suite = &perception[&query.scene_id];
    let scripted;
    let backend: &dyn VlmBackend = match backend_source {
        BackendSource::Script(file) => {
            scripted = file
                .backend_for(&query.query_id)
                .map_err(|e| e.to_string())?;
            &scripted
        }
        BackendSource::Shared(shared) => shared.as_ref(),
    };
    let grounded =
        ground_query(scene, query, cfg, backend, suite.as_ref()).map_err(|e| e.to_string())?;
    let id = &query.query_id;
    write_json(
        &out.join("results").join(format!("{id}.json")),
        &grounded.result,
    )
    .map_err(|e| e.to_string())?;
    write_json(
        &out.join("transcripts").join(format!("{id}.json")),
        &grounded.transcript,
    )
    .map_err(|e| e.to_string())?;
    write_json(
        &out.join("timings").join(format!("{id}.json")),
        &grounded.timings,
    )
    .map_err(|e| e.to_string())?;
    if let Some(mask) = &grounded.anchor_mask {
        let path = out.join("masks").join(format!("{id}.png"));
        mask.to_gray()
            .save(&path)
            .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    }
    Ok(grounded.result.status)
}

fn aabb_from(b: &[f64; 6]) -> Aabb3 {
    Aabb3 {
        min: [b[0], b[1], b[2]],
        max: [b[3], b[4], b[5]],
    }
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<(), CliError> {
    let cfg = config::resolve(cli.config.as_deref(), &Overrides::default())?;
    let queries = load_queries(&args.queries)?;
    let results_dir = args
        .results
        .clone()
        .unwrap_or_else(|| cli.out.join("results"));
    // Predicted masks live next to the results directory.
    let masks_dir = results_dir
        .parent()
        .map(|p| p.join("masks"))
        .unwrap_or_else(|| PathBuf::from("masks"));
    let queries_dir = args
        .queries
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();

    let scored: Vec<&Query> = queries.iter().filter(|q| q.gt_box.is_some()).collect();
    if scored.is_empty() {
        return Err(CliError::Invalid(format!(
            "no queries with ground-truth boxes in {}",
            args.queries.display()
        )));
    }

    let mut missing = Vec::new();
    let mut loaded: Vec<(&Query, GroundingResult)> = Vec::new();
    for q in &scored {
        let path = results_dir.join(format!("{}.json", q.query_id));
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                let result: GroundingResult = serde_json::from_str(&text).map_err(|e| {
                    CliError::Invalid(format!("malformed result {}: {e}", path.display()))
                })?;
                loaded.push((q, result));
            }
            Err(_) => missing.push(q.query_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(CliError::MissingResults { ids: missing });
    }

    let mut records = Vec::new();
    let mut nr3d_hits = 0usize;
    let mut nr3d_total = 0usize;
    for (q, result) in &loaded {
        let gt = aabb_from(q.gt_box.as_ref().expect("filtered to scored queries"));
        let iou = match &result.bbox {
            Some(b) => iou3d(&aabb_from(b), &gt),
            None => 0.0,
        };
        let mask_score = if args.mask_iou {
            score_mask(q, result, &masks_dir, &queries_dir)?
        } else {
            None
        };
        records.push(EvalRecord::new(
            q.query_id.clone(),
            iou,
            q.splits.clone(),
            mask_score,
        ));
        if let (Some(boxes), Some(target)) = (&q.gt_boxes, q.gt_target_index) {
            nr3d_total += 1;
            if let Some(b) = &result.bbox {
                let gts: Vec<Aabb3> = boxes.iter().map(aabb_from).collect();
                if nr3d_match(&aabb_from(b), &gts) == target {
                    nr3d_hits += 1;
                }
            }
        }
    }

    let report = accuracy_report(&records)?;
    let eval_dir = cli.out.join("eval");
    ensure_dir(&eval_dir)?;
    write_records_jsonl(&eval_dir.join("records.jsonl"), &records)?;
    let mut report_value = serde_json::to_value(&report)
        .map_err(|e| CliError::Invalid(format!("cannot serialize report: {e}")))?;
    if nr3d_total > 0 {
        report_value["nr3d_top1"] = serde_json::json!(nr3d_hits as f64 / nr3d_total as f64);
    }
    write_json(&eval_dir.join("report.json"), &report_value)?;
    write_manifest(&eval_dir, "eval", &cfg, cli.seed, cli.jobs)?;
    print!("{}", report.render_table());
    if nr3d_total > 0 {
        println!(
            "closest-center top-1: {:.3} ({nr3d_hits}/{nr3d_total})",
            nr3d_hits as f64 / nr3d_total as f64
        );
    }
    Ok(())
}

/// 2D-mask score for one query. `None` means the query carries no mask
/// ground truth; a prediction that cannot be compared scores 0.
fn score_mask(
    query: &Query,
    result: &GroundingResult,
    masks_dir: &Path,
    queries_dir: &Path,
) -> Result<Option<f64>, CliError> {
    let Some(gt_masks) = &query.gt_masks else {
        return Ok(None);
    };
    let Some(frame_id) = &result.target_frame_id else {
        return Ok(Some(0.0)); // grounding failed
    };
    let Some(gt_rel) = gt_masks.get(frame_id) else {
        return Ok(Some(0.0)); // predicted a frame with no ground-truth mask
    };
    let pred_path = masks_dir.join(format!("{}.png", query.query_id));
    if !pred_path.exists() {
        return Ok(Some(0.0));
    }
    let pred = load_mask(&pred_path, frame_id)?;
    let gt = load_mask(&queries_dir.join(gt_rel), frame_id)?;
    Ok(Some(mask_iou(&pred, &gt)?))
}

fn load_mask(path: &Path, frame_id: &str) -> Result<Mask2D, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::Invalid(format!("cannot read mask {}: {e}", path.display())))?
        .to_luma8();
    Ok(Mask2D::from_gray(frame_id, &img))
}

fn cmd_stitch(cli: &Cli, args: &StitchArgs) -> Result<(), CliError> {
    let cfg = config::resolve(cli.config.as_deref(), &Overrides::default())?;
    let soft_limit = args.soft_limit.unwrap_or(cfg.soft_limit);

    let mut inputs: Vec<(String, PathBuf)> = Vec::new();
    let entries = std::fs::read_dir(&args.input).map_err(|e| {
        CliError::Invalid(format!(
            "cannot read input directory {}: {e}",
            args.input.display()
        ))
    })?;
    for entry in entries {
        let path = entry
            .map_err(|e| {
                CliError::Invalid(format!(
                    "cannot read input directory {}: {e}",
                    args.input.display()
                ))
            })?
            .path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        if matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                inputs.push((stem.to_string(), path.clone()));
            }
        }
    }
    inputs.sort();
    if inputs.is_empty() {
        return Err(CliError::Invalid(format!(
            "no images (.png/.jpg/.jpeg) in {}",
            args.input.display()
        )));
    }

    let mut images: Vec<(String, RgbImage)> = Vec::with_capacity(inputs.len());
    for (stem, path) in &inputs {
        let img = image::open(path)
            .map_err(|e| CliError::Invalid(format!("cannot read image {}: {e}", path.display())))?
            .to_rgb8();
        images.push((stem.clone(), img));
    }
    let frames: Vec<(&str, &RgbImage)> = images.iter().map(|(s, i)| (s.as_str(), i)).collect();

    let plan = plan_layouts(frames.len(), soft_limit);
    let composites = render_plan(&plan, &frames, cfg.cell, !args.plain)?;

    let stitch_dir = cli.out.join("stitch");
    ensure_dir(&stitch_dir)?;

    #[derive(Serialize)]
    struct CompositeInfo {
        file: String,
        layout: Layout,
        cell_map: Vec<(usize, String)>,
    }
    #[derive(Serialize)]
    struct PlanFile {
        soft_limit: usize,
        soft_limit_exceeded: bool,
        composites: Vec<CompositeInfo>,
    }

    let mut infos = Vec::new();
    for (i, composite) in composites.iter().enumerate() {
        let file = format!("composite-{i:02}.png");
        let path = stitch_dir.join(&file);
        composite.raster.save(&path).map_err(|e| CliError::Write {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        infos.push(CompositeInfo {
            file,
            layout: composite.layout,
            cell_map: composite.cell_map.clone(),
        });
    }
    let plan_file = PlanFile {
        soft_limit,
        soft_limit_exceeded: plan.soft_limit_exceeded,
        composites: infos,
    };
    write_json(&stitch_dir.join("plan.json"), &plan_file)?;
    write_manifest(&stitch_dir, "stitch", &cfg, cli.seed, cli.jobs)?;
    println!(
        "stitched {} images into {} composites -> {}",
        frames.len(),
        composites.len(),
        stitch_dir.display()
    );
    if plan.soft_limit_exceeded {
        warn!("composite count exceeds the soft limit of {soft_limit}");
    }
    Ok(())
}

fn parse_layouts(spec: &str) -> Result<Vec<Layout>, CliError> {
    let layouts = spec
        .split(',')
        .map(|s| Layout::parse(s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    if layouts.is_empty() {
        return Err(CliError::Invalid("no layouts given".into()));
    }
    Ok(layouts)
}

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> Result<(), CliError> {
    let cfg = config::resolve(cli.config.as_deref(), &Overrides::default())?;
    let kind = match args.backend.as_deref() {
        None => cfg.backend.kind,
        Some("echo") => BackendKind::Echo,
        Some("scripted") => BackendKind::Scripted,
        Some("http") => BackendKind::Http,
        Some(other) => {
            return Err(CliError::Invalid(format!(
                "unknown backend {other:?} (expected echo, scripted, or http)"
            )))
        }
    };
    let source = match &args.source {
        Some(dir) => ImageSource::Directory(dir.clone()),
        None => ImageSource::Synthetic {
            width: 640,
            height: 480,
        },
    };
    let suite = generate_suite(args.count, cli.seed, &source)?;

    let bench_dir = cli.out.join("bench");
    let items_dir = bench_dir.join("items");
    ensure_dir(&items_dir)?;
    for item in &suite {
        let path = items_dir.join(format!("{}.png", item.item_id));
        item.image.save(&path).map_err(|e| CliError::Write {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    }
    write_json(&bench_dir.join("items.json"), &suite_manifest(&suite))?;

    let echo_holder;
    let scripted_holder;
    let http_holder;
    let backend: &dyn VlmBackend = match kind {
        BackendKind::Echo => {
            echo_holder = EchoBackend::new(&suite);
            &echo_holder
        }
        BackendKind::Scripted => {
            let path = cfg.backend.script.as_deref().ok_or_else(|| {
                CliError::Invalid("scripted backend needs a script file (backend.script)".into())
            })?;
            scripted_holder = ScriptFile::load(path)?.backend_for("bench")?;
            &scripted_holder
        }
        BackendKind::Http => {
            http_holder = http_backend(&cfg)?;
            &http_holder
        }
    };

    if args.timing {
        let rows = time_requests(&suite[0].image, args.copies, args.trials, backend);
        write_timing_csv(&bench_dir.join("timing.csv"), &rows)?;
        write_manifest(&bench_dir, "bench", &cfg, cli.seed, cli.jobs)?;
        println!(
            "timed {} copy counts -> {}",
            rows.len(),
            bench_dir.join("timing.csv").display()
        );
        let failed: usize = rows.iter().map(|r| r.failed_trials).sum();
        if failed == rows.len() * args.trials {
            return Err(CliError::BenchTotalFailure(failed));
        }
    } else {
        let layouts = parse_layouts(&args.layouts)?;
        let rows = run_layout_sweep(&suite, &layouts, args.images_per_request, cfg.cell, backend)?;
        write_sweep_csv(&bench_dir.join("sweep.csv"), &rows)?;
        write_manifest(&bench_dir, "bench", &cfg, cli.seed, cli.jobs)?;
        println!(
            "swept {} layouts -> {}",
            rows.len(),
            bench_dir.join("sweep.csv").display()
        );
        let chunks = args.count.div_ceil(args.images_per_request.max(1));
        if !rows.is_empty() && rows.iter().all(|r| r.incomplete == chunks) {
            return Err(CliError::BenchTotalFailure(rows.len() * chunks));
        }
    }
    Ok(())
}
