use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use relground::autolabel::{self, BuildOptions, RelationRuleConfig};
use relground::corpus::load_corpus;
use relground::dataio::{self, BBox2D, DatasetIndex, Expression, RelationVocabulary, SceneManifest};
use relground::evalx;
use relground::features::{EmbeddingTable, FeatureSchema};
use relground::geometry::{self, DenoiseConfig, Region};
use relground::ranking::{self, DetectorProfile, Grounder, LiftCache, PairScore, RankingConfig};
use relground::srm::{self, TrainConfig};
use relground::synthgen::{self, SceneSpec};
use relground::{Error, Result};

mod config;

#[derive(Parser, Debug)]
#[command(name = "relground", version, about = "Spatial-relation grounding over RGB-D scenes")]
#[command(args_override_self = true)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for scene-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    /// TOML file with default flag values (top level and per-command tables).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Allow replacing existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic train/val/test benchmark.
    GenSynthetic(GenArgs),
    /// Lift detections and generate relation expressions for scene manifests.
    Autolabel(AutolabelArgs),
    /// Lift the detections of one scene to 3D boxes.
    Lift(LiftArgs),
    /// Train the relation classifier.
    TrainSrm(TrainArgs),
    /// Evaluate a relation classifier on a dataset.
    EvalSrm(EvalSrmArgs),
    /// Ground referring expressions.
    Ground(GroundArgs),
    /// Score grounding results against ground truth.
    EvalGrounding(EvalGroundingArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    #[arg(long)]
    out: PathBuf,
    /// Probability that an object gets no detection.
    #[arg(long, default_value_t = 0.1)]
    detector_noise: f64,
    /// Emit exact boxes with score 1 instead of noised detections.
    #[arg(long)]
    perfect_detections: bool,
    #[arg(long, default_value_t = 0.5)]
    occlusion_rate: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VocabChoice {
    Six,
    Tabletop,
}

impl VocabChoice {
    fn vocabulary(self) -> RelationVocabulary {
        match self {
            VocabChoice::Six => RelationVocabulary::six_directional(),
            VocabChoice::Tabletop => RelationVocabulary::tabletop(),
        }
    }
}

#[derive(Args, Debug)]
struct AutolabelArgs {
    /// Scene manifests, or directories containing them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Detections below this score are not labeled.
    #[arg(long, default_value_t = 0.5)]
    min_score: f64,
    #[arg(long, value_enum, default_value = "six")]
    vocabulary: VocabChoice,
    #[arg(long, default_value_t = 0.5)]
    margin_fraction: f64,
    #[arg(long, default_value_t = 3.0)]
    max_pair_distance: f64,
}

#[derive(Args, Debug)]
struct LiftArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Only lift detections under this query label.
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the denoised point cloud of each detection here (`x y z` lines).
    #[arg(long)]
    dump_points: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "geom3d")]
    features: FeatureSchema,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Continue training this model instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_values_t = [64, 32])]
    hidden: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum ReportFormat {
    #[default]
    Text,
    Json,
}

#[derive(Args, Debug)]
struct EvalSrmArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Probability threshold for multilabel predictions.
    #[arg(long, default_value_t = evalx::DEFAULT_PROB_THRESHOLD)]
    threshold: f64,
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_values_t = [1, 2])]
    topk: Vec<usize>,
    #[arg(long, value_enum, default_value = "text")]
    format: ReportFormat,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    DetectorOnly,
}

#[derive(Args, Debug)]
struct GroundArgs {
    #[arg(long, required_unless_present = "baseline")]
    model: Option<PathBuf>,
    #[arg(long, conflicts_with = "data", requires = "expr")]
    scene: Option<PathBuf>,
    /// `target,relation,reference`
    #[arg(long, requires = "scene")]
    expr: Option<String>,
    /// Ground every expression of a dataset.
    #[arg(long, required_unless_present = "scene")]
    data: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Include the full pair score table in each record.
    #[arg(long)]
    explain: bool,
    #[arg(long, default_value = "detic")]
    detector_profile: DetectorProfile,
    /// Candidates per role (default: 3 multiclass, 10 multilabel).
    #[arg(long)]
    k: Option<usize>,
    /// Drop pairs whose lift failed instead of penalizing them.
    #[arg(long)]
    strict: bool,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Write JSON-lines records here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalGroundingArgs {
    /// JSON-lines records from `ground`.
    #[arg(long)]
    results: PathBuf,
    #[arg(long, default_value_t = evalx::DEFAULT_IOU_THRESHOLD)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "text")]
    format: ReportFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn validation(field: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        field: field.to_string(),
        message: message.into(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Refuses to replace an existing file or non-empty directory without `--force`.
fn check_output(path: &Path, force: bool) -> Result<()> {
    let occupied = if path.is_dir() {
        std::fs::read_dir(path).map_err(|e| io_err(path, e))?.next().is_some()
    } else {
        path.exists()
    };
    if occupied && !force {
        return Err(Error::WouldOverwrite(path.to_path_buf()));
    }
    Ok(())
}

fn load_embeddings(path: Option<&PathBuf>) -> Result<Option<EmbeddingTable>> {
    path.map(|p| EmbeddingTable::load(p)).transpose()
}

fn emit(out: Option<&PathBuf>, text: &str, force: bool) -> Result<()> {
    match out {
        Some(path) => {
            check_output(path, force)?;
            dataio::write_text(path, text)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| validation("threads", e.to_string()))
}

fn cmd_gen_synthetic(cli: &Cli, a: &GenArgs) -> Result<()> {
    check_output(&a.out, cli.force)?;
    let spec = SceneSpec {
        seed: cli.seed,
        detector_noise: a.detector_noise,
        noisy_detections: !a.perfect_detections,
        occlusion_rate: a.occlusion_rate,
        ..Default::default()
    };
    let summary = synthgen::generate_benchmark(a.scenes, &spec, cli.threads, &a.out)?;
    for (split, s) in &summary.splits {
        log::info!("{split}: {} scenes, {} expressions, {} pairs", s.scenes, s.expressions, s.pairs);
    }
    println!("{}", dataio::to_json_string(&summary).trim_end());
    Ok(())
}

fn manifest_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| io_err(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    name.ends_with(".json")
                        && !name.ends_with(".pairs.json")
                        && name != dataio::INDEX_FILE
                        && name != "summary.json"
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(files)
}

fn cmd_autolabel(cli: &Cli, a: &AutolabelArgs) -> Result<()> {
    check_output(&a.out, cli.force)?;
    let files = manifest_files(&a.inputs)?;
    let opts = BuildOptions {
        rules: RelationRuleConfig {
            margin_fraction: a.margin_fraction,
            max_pair_distance_m: a.max_pair_distance,
            ..Default::default()
        },
        min_score: a.min_score,
        vocabulary: a.vocabulary.vocabulary(),
        threads: cli.threads,
        ..Default::default()
    };
    let summary = autolabel::build_dataset(&files, &opts, &a.out)?;
    println!("{}", dataio::to_json_string(&summary).trim_end());
    Ok(())
}

#[derive(Serialize)]
struct LiftRecord {
    label: String,
    index: usize,
    score: f64,
    bbox: BBox2D,
    n_points: usize,
    degenerate: bool,
    box3d: geometry::OrientedBox3D,
}

fn cmd_lift(cli: &Cli, a: &LiftArgs) -> Result<()> {
    let scene = dataio::load_manifest(&a.scene)?;
    let depth = scene.load_depth_for(&a.scene)?;
    let cfg = DenoiseConfig::default();
    if let Some(dir) = &a.dump_points {
        check_output(dir, cli.force)?;
    }
    let mut records = Vec::new();
    for (label, dets) in &scene.detections {
        if a.label.as_ref().is_some_and(|l| l != label) {
            continue;
        }
        for (index, det) in dets.iter().enumerate() {
            let region = match &det.mask {
                Some(m) if m.area() > 0 => Region::Mask(m),
                _ => Region::BBox(det.bbox),
            };
            let cloud = geometry::backproject(&depth, region, &scene.intrinsics).and_then(|c| geometry::denoise(&c, &cfg));
            let lift = geometry::lift_detection(&depth, det.mask.as_ref(), &det.bbox, &scene.intrinsics, &cfg);
            let n_points = cloud.as_ref().map_or(0, |c| c.len());
            if let (Some(dir), Ok(c)) = (&a.dump_points, &cloud) {
                let name = format!("{}_{index}.xyz", label.replace(char::is_whitespace, "_"));
                dataio::write_point_dump(&c.to_arrays(), &dir.join(name))?;
            }
            records.push(LiftRecord {
                label: label.clone(),
                index,
                score: det.score,
                bbox: det.bbox,
                n_points,
                degenerate: lift.degenerate,
                box3d: lift.bbox3d,
            });
        }
    }
    if let Some(l) = &a.label {
        if records.is_empty() {
            return Err(validation("label", format!("no detections under `{l}`")));
        }
    }
    emit(a.out.as_ref(), &dataio::to_json_string(&records), cli.force)
}

fn cmd_train_srm(cli: &Cli, a: &TrainArgs) -> Result<()> {
    check_output(&a.out, cli.force)?;
    let log_path = log_path_for(&a.out);
    check_output(&log_path, cli.force)?;
    let [h1, h2] = a.hidden[..] else {
        return Err(validation("hidden", "expected two layer widths, e.g. 64,32"));
    };
    let emb = load_embeddings(a.embeddings.as_ref())?;
    let denoise = DenoiseConfig::default();
    let cfg = TrainConfig {
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        hidden: [h1, h2],
        seed: cli.seed,
        ..Default::default()
    };
    let resumed = a.resume.as_ref().map(|p| srm::load_model(p)).transpose()?;
    if let Some(m) = &resumed {
        if m.schema != a.features {
            return Err(Error::SchemaMismatch {
                expected: m.schema.id().to_string(),
                found: a.features.id().to_string(),
            });
        }
    }
    let train = load_corpus(&a.data, a.features, emb.as_ref(), &denoise)?;
    let val = a.val.as_ref().map(|v| load_corpus(v, a.features, emb.as_ref(), &denoise)).transpose()?;
    if let Some(v) = &val {
        if v.vocabulary != train.vocabulary {
            return Err(validation("val", "validation set uses a different relation vocabulary"));
        }
    }
    let val_samples = val.as_ref().map(|v| v.samples.as_slice());
    log::info!("training {} on {} samples", a.features, train.samples.len());
    let (model, log) = match resumed {
        Some(m) => {
            if m.vocabulary != train.vocabulary {
                return Err(validation("resume", "model and data use different relation vocabularies"));
            }
            srm::resume(&cfg, m, &train.samples, val_samples)?
        }
        None => srm::train(&cfg, a.features, &train.vocabulary, &train.samples, val_samples)?,
    };
    srm::save_model(&model, &a.out)?;
    dataio::write_text(&log_path, &dataio::to_json_string(&log))?;
    let last = log.epochs.last().expect("at least one epoch");
    println!(
        "{}",
        serde_json::json!({
            "model": a.out,
            "features": a.features.id(),
            "samples": train.samples.len(),
            "final_loss": last.loss,
            "train_top1": last.train_top1,
            "val_top1": last.val_top1,
        })
    );
    Ok(())
}

fn log_path_for(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".log.json");
    PathBuf::from(s)
}

fn cmd_eval_srm(cli: &Cli, a: &EvalSrmArgs) -> Result<()> {
    let model = srm::load_model(&a.model)?;
    let emb = load_embeddings(a.embeddings.as_ref())?;
    let corpus = load_corpus(&a.data, model.schema, emb.as_ref(), &DenoiseConfig::default())?;
    if corpus.vocabulary != model.vocabulary {
        return Err(validation("data", "dataset and model use different relation vocabularies"));
    }
    let preds: Vec<srm::RelationDistribution> =
        corpus.samples.iter().map(|s| srm::forward(&model, &s.x)).collect::<Result<_>>()?;
    let labels: Vec<Vec<usize>> = corpus.samples.iter().map(|s| s.labels.clone()).collect();
    let m = evalx::eval_classification(&preds, &labels, &model.vocabulary, a.threshold, &a.topk)?;
    let json = dataio::to_json_string(&m);
    if let Some(out) = &a.out {
        check_output(out, cli.force)?;
        dataio::write_text(out, &json)?;
    }
    match a.format {
        ReportFormat::Text => print!("{}", evalx::classification_report_text(&m)),
        ReportFormat::Json => print!("{json}"),
    }
    Ok(())
}

/// One line of `ground` output.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroundRecord {
    scene_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expression_index: Option<usize>,
    expression: String,
    status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_bbox: Option<BBox2D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference_bbox: Option<BBox2D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joint_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relation_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    gt_targets: Vec<BBox2D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pairs: Option<Vec<PairScore>>,
}

fn status_of(e: &Error) -> String {
    match e {
        Error::NoCandidates(role) => format!("no_candidates:{role}"),
        Error::NoValidPairs => "no_valid_pairs".into(),
        other => format!("error: {other}"),
    }
}

struct GroundContext<'a> {
    grounder: Option<Grounder<'a>>,
    ranking: RankingConfig,
    explain: bool,
}

impl GroundContext<'_> {
    fn ground_scene(&self, scene: &SceneManifest, manifest_path: &Path, exprs: &[(Option<usize>, Expression)]) -> Result<Vec<GroundRecord>> {
        let depth = match &self.grounder {
            Some(_) => Some(scene.load_depth_for(manifest_path)?),
            None => None,
        };
        let mut cache = LiftCache::default();
        let mut out = Vec::with_capacity(exprs.len());
        for (index, expr) in exprs {
            let (t, r, f) = expr.triplet();
            let mut rec = GroundRecord {
                scene_id: scene.scene_id.clone(),
                expression_index: *index,
                expression: format!("{t},{r},{f}"),
                status: "ok".into(),
                target_bbox: None,
                reference_bbox: None,
                joint_score: None,
                relation_prob: None,
                gt_targets: expr.gt_targets(),
                pairs: None,
            };
            match (&self.grounder, &depth) {
                (Some(g), Some(d)) => match g.ground(scene, d, expr, &mut cache, self.explain) {
                    Ok(res) => {
                        rec.target_bbox = Some(res.target.bbox);
                        rec.reference_bbox = Some(res.reference.bbox);
                        rec.joint_score = Some(res.joint_score);
                        rec.relation_prob = Some(res.relation_prob);
                        rec.pairs = res.per_pair_table;
                    }
                    Err(e) if e.is_validation() => return Err(e),
                    Err(e) => rec.status = status_of(&e),
                },
                _ => match ranking::detector_only(scene, expr, &self.ranking) {
                    Ok(det) => {
                        rec.target_bbox = Some(det.bbox);
                        rec.joint_score = Some(det.score);
                    }
                    Err(e) => rec.status = status_of(&e),
                },
            }
            out.push(rec);
        }
        Ok(out)
    }
}

fn cmd_ground(cli: &Cli, a: &GroundArgs) -> Result<()> {
    if let Some(out) = &a.out {
        check_output(out, cli.force)?;
    }
    let model = match (&a.baseline, &a.model) {
        (Some(Baseline::DetectorOnly), _) => None,
        (None, Some(p)) => Some(srm::load_model(p)?),
        (None, None) => return Err(validation("model", "required without --baseline")),
    };
    let emb = load_embeddings(a.embeddings.as_ref())?;
    let vocab = model.as_ref().map(|m| m.vocabulary.clone()).unwrap_or_default();
    let mut ranking = RankingConfig {
        profile: a.detector_profile,
        strict: a.strict,
        ..RankingConfig::for_vocabulary(&vocab)
    };
    if let Some(k) = a.k {
        ranking.k = k;
    }
    ranking.validate()?;
    let ctx = GroundContext {
        grounder: model.as_ref().map(|m| Grounder {
            model: m,
            embeddings: emb.as_ref(),
            ranking: ranking.clone(),
            denoise: DenoiseConfig::default(),
        }),
        ranking,
        explain: a.explain,
    };
    let records: Vec<GroundRecord> = if let (Some(scene_path), Some(expr)) = (&a.scene, &a.expr) {
        let scene = dataio::load_manifest(scene_path)?;
        let expr = Expression::parse_triplet(expr)?;
        ctx.ground_scene(&scene, scene_path, &[(None, expr)])?
    } else {
        let dir = a.data.as_ref().expect("clap enforces --data or --scene");
        let index = DatasetIndex::load(dir)?;
        let pool = thread_pool(cli.threads)?;
        let per_scene: Vec<Vec<GroundRecord>> = pool.install(|| {
            (0..index.scenes.len())
                .into_par_iter()
                .map(|i| {
                    let scene = index.load_scene(dir, i)?;
                    let exprs: Vec<(Option<usize>, Expression)> =
                        scene.expressions.iter().cloned().enumerate().map(|(j, e)| (Some(j), e)).collect();
                    ctx.ground_scene(&scene, &index.manifest_path(dir, i), &exprs)
                })
                .collect::<Result<_>>()
        })?;
        per_scene.into_iter().flatten().collect()
    };
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    let failed = records.iter().filter(|r| r.status != "ok").count();
    log::info!("grounded {} expressions ({failed} without a result)", records.len());
    emit(a.out.as_ref(), &text, cli.force)
}

fn cmd_eval_grounding(cli: &Cli, a: &EvalGroundingArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.results).map_err(|e| io_err(&a.results, e))?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: GroundRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            context: format!("{}:{}", a.results.display(), n + 1),
            message: e.to_string(),
        })?;
        if rec.gt_targets.is_empty() {
            continue;
        }
        preds.push(rec.target_bbox);
        gts.push(rec.gt_targets);
    }
    if preds.is_empty() {
        return Err(validation("results", "no records carry ground-truth boxes"));
    }
    let m = evalx::eval_grounding(&preds, &gts, a.threshold)?;
    let json = dataio::to_json_string(&m);
    if let Some(out) = &a.out {
        check_output(out, cli.force)?;
        dataio::write_text(out, &json)?;
    }
    match a.format {
        ReportFormat::Text => print!("{}", evalx::grounding_report_text(&m)),
        ReportFormat::Json => print!("{json}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynthetic(a) => cmd_gen_synthetic(cli, a),
        Command::Autolabel(a) => cmd_autolabel(cli, a),
        Command::Lift(a) => cmd_lift(cli, a),
        Command::TrainSrm(a) => cmd_train_srm(cli, a),
        Command::EvalSrm(a) => cmd_eval_srm(cli, a),
        Command::Ground(a) => cmd_ground(cli, a),
        Command::EvalGrounding(a) => cmd_eval_grounding(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match config::parse_with_config::<Cli>(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(config::ParseFailure::Clap(e)) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
        Err(config::ParseFailure::Config(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
