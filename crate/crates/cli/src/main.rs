use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use workzone_core::casedb::CaseDatabase;
use workzone_core::clustering::cluster_prototypes;
use workzone_core::geometry::PixelPoint;
use workzone_core::metrics::{evaluate, EvalCase};
use workzone_core::mining::{mine, PrototypeManifest};
use workzone_core::pipeline::{
    build_database, eval_cases, failure_overlay_ref, infer_all, load_scenes, make_backend, reference_overlay_ref,
    retrieve_scene, scene_summary, BackendKind, RunConfig, Scene,
};
use workzone_core::planner::{mitigate_with_retry, FixedProposal, Proposal};
use workzone_core::render::{overlay, save_png, Layer, BLUE, GREEN, RED};
use workzone_core::scene_graph::{build_scene_graph, read_detections, SceneGraph};
use workzone_core::vlm_adapter::{AdapterSource, PromptContext};

#[derive(Parser)]
#[command(
    name = "workzone",
    version,
    about = "Work-zone scene mining, case retrieval and trajectory mitigation"
)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true)]
    db: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    /// Fixture file for the stub and replay backends.
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Stub,
    Replay,
    Remote,
}

#[derive(Subcommand)]
enum Command {
    /// Detections (JSONL) to one scene graph file per frame.
    Graph,
    /// Scene graph directory to a prototype manifest.
    Mine,
    /// Prototype manifest to a cluster report.
    Cluster,
    /// Offline stage: abnormal frames to a verified case database.
    BuildDb,
    /// Retrieval trace for one scene.
    Retrieve {
        #[arg(long)]
        frame: Option<String>,
    },
    /// Mitigation for one scene, from a stored case or the backend.
    Plan {
        #[arg(long)]
        frame: Option<String>,
        #[arg(long)]
        case: Option<String>,
    },
    /// Online stage over a scene set.
    Infer,
    /// Predictions with ground truth to a metrics report.
    Eval,
    /// Trajectory overlays as PNG files.
    Render {
        /// Predictions file (eval format) drawn in blue.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<workzone_core::Error> for Failure {
    fn from(e: workzone_core::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

enum Status {
    Ok,
    /// Some frames did not verify; outputs were still written.
    Partial(usize),
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Partial(n)) => {
            eprintln!("warning: {n} frame(s) failed verification");
            ExitCode::from(4)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nUsage: workzone [OPTIONS] <COMMAND>\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(b) = cli.backend {
        cfg.backend.kind = match b {
            BackendArg::Stub => BackendKind::Stub,
            BackendArg::Replay => BackendKind::Replay,
            BackendArg::Remote => BackendKind::Remote,
        };
    }
    if let Some(f) = &cli.fixtures {
        cfg.backend.fixtures = Some(f.clone());
    }
    if let Some(d) = &cli.db {
        cfg.paths.db = Some(d.clone());
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = Some(o.clone());
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn required(path: Option<&PathBuf>, what: &str) -> CliResult<PathBuf> {
    path.cloned().ok_or_else(|| Failure::Usage(format!("missing {what}")))
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    text.push('\n');
    write(path, &text)
}

fn write_constants(out: &Path, cfg: &RunConfig) -> CliResult<()> {
    write_json(&out.join("constants.json"), &cfg.constants())
}

fn scenes_input(cli: &Cli, fallback: Option<&PathBuf>, cfg: &RunConfig) -> CliResult<Vec<Scene>> {
    let path = required(cli.input.as_ref().or(fallback), "--input scene set")?;
    Ok(load_scenes(&path, &cfg.ego)?)
}

fn pick<'a>(scenes: &'a [Scene], frame: Option<&str>) -> CliResult<&'a Scene> {
    match frame {
        Some(f) => scenes
            .iter()
            .find(|s| s.spec.frame_id == f)
            .ok_or_else(|| Failure::Data(format!("frame {f:?} not in scene set"))),
        None => scenes.first().ok_or_else(|| Failure::Data("scene set is empty".into())),
    }
}

fn load_db(cfg: &RunConfig) -> CliResult<CaseDatabase> {
    let path = required(cfg.paths.db.as_ref(), "--db case database")?;
    Ok(CaseDatabase::load(&path)?)
}

fn run(cli: Cli) -> CliResult<Status> {
    let cfg = load_config(&cli)?;
    let out = required(cfg.paths.out.as_ref(), "--out directory")?;
    match &cli.command {
        Command::Graph => graph(&cli, &cfg, &out),
        Command::Mine => mine_cmd(&cli, &cfg, &out),
        Command::Cluster => cluster(&cli, &cfg, &out),
        Command::BuildDb => build_db(&cli, &cfg, &out),
        Command::Retrieve { frame } => retrieve(&cli, &cfg, &out, frame.as_deref()),
        Command::Plan { frame, case } => plan(&cli, &cfg, &out, frame.as_deref(), case.as_deref()),
        Command::Infer => infer_cmd(&cli, &cfg, &out),
        Command::Eval => eval(&cli, &cfg, &out),
        Command::Render { predictions } => render(&cli, &cfg, &out, predictions.as_deref()),
    }
}

fn graph(cli: &Cli, cfg: &RunConfig, out: &Path) -> CliResult<Status> {
    let path = required(cli.input.as_ref(), "--input detections file")?;
    let set = read_detections(&read(&path)?)?;
    for (frame, dets) in &set.frames {
        let g = build_scene_graph(frame, dets, &cfg.ego)?;
        let mut text = g.to_canonical_string();
        text.push('\n');
        write(&out.join("graphs").join(format!("{frame}.json")), &text)?;
    }
    write_constants(out, cfg)?;
    println!("{} scene graph(s) written", set.frames.len());
    Ok(Status::Ok)
}

fn mine_cmd(cli: &Cli, cfg: &RunConfig, out: &Path) -> CliResult<Status> {
    let dir = required(cli.input.as_ref(), "--input graph directory")?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let graphs = files
        .iter()
        .map(|p| SceneGraph::from_json(&read(p)?).map_err(|e| Failure::Data(format!("{}: {e}", p.display()))))
        .collect::<CliResult<Vec<_>>>()?;
    let manifest = mine(&graphs, &cfg.mining, &cfg.gate)?;
    write(&out.join("manifest.json"), &(manifest.to_json() + "\n"))?;
    write_constants(out, cfg)?;
    println!(
        "{} candidate(s) merged into {} prototype(s)",
        manifest.candidate_count,
        manifest.clusters.len()
    );
    Ok(Status::Ok)
}

fn cluster(cli: &Cli, cfg: &RunConfig, out: &Path) -> CliResult<Status> {
    let path = required(cli.input.as_ref(), "--input manifest")?;
    let manifest = PrototypeManifest::from_json(&read(&path)?)?;
    let report = cluster_prototypes(&manifest.clusters, cfg.appearance_dim, cfg.k_max, cfg.seed)?;
    write_json(&out.join("clusters.json"), &report)?;
    write_constants(out, cfg)?;
    println!("K = {}", report.k);
    Ok(Status::Ok)
}

fn build_db(cli: &Cli, cfg: &RunConfig, out: &Path) -> CliResult<Status> {
    let scenes = scenes_input(cli, cfg.paths.scenes.as_ref(), cfg)?;
    let backend = make_backend(&cfg.backend)?;
    let built = build_database(&scenes, cfg, backend.as_ref())?;
    let db_path = cfg.paths.db.clone().unwrap_or_else(|| out.join("cases.jsonl"));
    built.database.save(&db_path)?;
    write(&out.join("manifest.json"), &(built.manifest.to_json() + "\n"))?;
    write_json(&out.join("clusters.json"), &built.clusters)?;
    write_json(&out.join("build_report.json"), &built.report)?;

    for scene in &scenes {
        if !built.report.abnormal.contains(&scene.spec.frame_id) {
            continue;
        }
        let boxes: Vec<_> = scene.spec.detections.iter().map(|d| d.bbox).collect();
        let failed: Vec<&[PixelPoint]> = scene.spec.planner_outputs.iter().map(Vec::as_slice).collect();
        let layers: Vec<Layer> = failed.iter().map(|p| Layer { points: p, color: RED }).collect();
        save_png(
            &overlay(&scene.mask, &boxes, &layers),
            &out.join(failure_overlay_ref(&scene.spec.frame_id)),
        )?;
        if let Some(gt) = &scene.spec.ground_truth {
            let layers = [Layer {
                points: gt,
                color: GREEN,
            }];
            save_png(
                &overlay(&scene.mask, &boxes, &layers),
                &out.join(reference_overlay_ref(&scene.spec.frame_id)),
            )?;
        }
    }
    write_constants(out, cfg)?;
    let missing = built.report.abnormal.len() - built.report.stored;
    println!(
        "{} frame(s), {} abnormal, {} case(s) stored in {}",
        built.report.frames,
        built.report.abnormal.len(),
        built.report.stored,
        db_path.display()
    );
    Ok(if missing > 0 {
        Status::Partial(missing)
    } else {
        Status::Ok
    })
}

fn retrieve(cli: &Cli, cfg: &RunConfig, out: &Path, frame: Option<&str>) -> CliResult<Status> {
    let scenes = scenes_input(cli, cfg.paths.infer_scenes.as_ref(), cfg)?;
    let db = load_db(cfg)?;
    let scene = pick(&scenes, frame)?;
    let trace = retrieve_scene(scene, &db, cfg)?;
    write_json(&out.join(format!("retrieval_{}.json", scene.spec.frame_id)), &trace)?;
    write_constants(out, cfg)?;
    println!("{}: {:?}", scene.spec.frame_id, trace.decision);
    Ok(Status::Ok)
}

fn plan(cli: &Cli, cfg: &RunConfig, out: &Path, frame: Option<&str>, case: Option<&str>) -> CliResult<Status> {
    let scenes = scenes_input(cli, cfg.paths.scenes.as_ref(), cfg)?;
    let scene = pick(&scenes, frame)?;
    let spec = &scene.spec;
    let reference = spec.ground_truth.as_ref().and_then(|g| g.last().copied());
    let planning = scene.planning();
    let params = cfg.destination_params();
    let (outcome, exchanges) = match case {
        Some(id) => {
            let db = load_db(cfg)?;
            let record = db
                .get(id)
                .ok_or_else(|| Failure::Data(format!("case {id:?} not in database")))?;
            let mut source = FixedProposal(Proposal {
                constraints: record.constraints,
                config: record.mitigation,
            });
            let o = mitigate_with_retry(
                &planning,
                &mut source,
                reference,
                cfg.max_iter,
                &cfg.thresholds,
                &params,
            );
            (o, Vec::new())
        }
        None => {
            let backend = make_backend(&cfg.backend)?;
            let ctx = PromptContext {
                case_id: spec.frame_id.clone(),
                scene_summary: scene_summary(&spec.detections),
                failure_overlay: failure_overlay_ref(&spec.frame_id),
                gt_overlay: reference_overlay_ref(&spec.frame_id),
                attempt: 1,
                feedback: Vec::new(),
            };
            let mut source = AdapterSource::new(backend.as_ref(), ctx, cfg.mitigation);
            let o = mitigate_with_retry(
                &planning,
                &mut source,
                reference,
                cfg.max_iter,
                &cfg.thresholds,
                &params,
            );
            (o, source.exchanges)
        }
    };
    write_json(
        &out.join(format!("plan_{}.json", spec.frame_id)),
        &json!({ "frame_id": spec.frame_id, "outcome": outcome, "exchanges": exchanges }),
    )?;
    write_constants(out, cfg)?;
    for rec in &outcome.history {
        println!("{}", rec.describe());
    }
    Ok(if outcome.verified {
        Status::Ok
    } else {
        Status::Partial(1)
    })
}

fn infer_cmd(cli: &Cli, cfg: &RunConfig, out: &Path) -> CliResult<Status> {
    let db = load_db(cfg)?;
    let scenes = scenes_input(cli, cfg.paths.infer_scenes.as_ref(), cfg)?;
    let backend = make_backend(&cfg.backend)?;
    let traces = infer_all(&scenes, &db, cfg, backend.as_ref())?;
    for t in &traces {
        write_json(&out.join("traces").join(format!("{}.json", t.frame_id)), t)?;
    }
    let cases = eval_cases(&scenes, &traces);
    write_json(&out.join("predictions.json"), &cases)?;
    if !cases.is_empty() {
        let report = evaluate(&cases, cfg.collision_margin)?;
        write_json(&out.join("report.json"), &report)?;
        write(&out.join("report.tsv"), &report.to_table())?;
    }
    let summary: BTreeMap<&str, _> = traces
        .iter()
        .map(|t| {
            (
                t.frame_id.as_str(),
                json!({ "decision": t.retrieval.decision, "verified": t.verified, "planner_fallback": t.planner_fallback }),
            )
        })
        .collect();
    write_json(&out.join("summary.json"), &summary)?;
    write_constants(out, cfg)?;
    let unverified = traces.iter().filter(|t| !t.verified).count();
    println!("{} scene(s) inferred, {} unverified", traces.len(), unverified);
    Ok(if unverified > 0 {
        Status::Partial(unverified)
    } else {
        Status::Ok
    })
}

fn eval(cli: &Cli, cfg: &RunConfig, out: &Path) -> CliResult<Status> {
    let path = required(cli.input.as_ref(), "--input predictions file")?;
    let text = read(&path)?;
    let cases: Vec<EvalCase> =
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let report = evaluate(&cases, cfg.collision_margin)?;
    write_json(&out.join("report.json"), &report)?;
    write(&out.join("report.tsv"), &report.to_table())?;
    write_constants(out, cfg)?;
    print!("{}", report.to_table());
    Ok(Status::Ok)
}

fn render(cli: &Cli, cfg: &RunConfig, out: &Path, predictions: Option<&Path>) -> CliResult<Status> {
    let scenes = scenes_input(cli, cfg.paths.infer_scenes.as_ref(), cfg)?;
    let predicted: BTreeMap<String, Vec<PixelPoint>> = match predictions {
        Some(p) => {
            let cases: Vec<EvalCase> =
                serde_json::from_str(&read(p)?).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
            cases.into_iter().map(|c| (c.case_id, c.predicted)).collect()
        }
        None => BTreeMap::new(),
    };
    for scene in &scenes {
        let spec = &scene.spec;
        let boxes: Vec<_> = spec.detections.iter().map(|d| d.bbox).collect();
        let mut layers: Vec<Layer> = spec
            .planner_outputs
            .iter()
            .map(|p| Layer { points: p, color: RED })
            .collect();
        if let Some(gt) = &spec.ground_truth {
            layers.push(Layer {
                points: gt,
                color: GREEN,
            });
        }
        if let Some(p) = predicted.get(&spec.frame_id) {
            layers.push(Layer { points: p, color: BLUE });
        }
        save_png(
            &overlay(&scene.mask, &boxes, &layers),
            &out.join(format!("{}.png", spec.frame_id)),
        )?;
    }
    println!("{} overlay(s) written", scenes.len());
    Ok(Status::Ok)
}
