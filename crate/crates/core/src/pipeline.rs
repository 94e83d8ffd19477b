//! Offline case-database construction and online retrieval-driven inference.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::casedb::{CaseDatabase, CaseRecord, MitigationConfig, PatternTag, SceneRef};
use crate::clustering::{aggregate_appearance, cluster_prototypes, ClusterReport};
use crate::error::{Error, Result};
use crate::geometry::{EgoConfig, PixelPoint, PROXIMITY_BOUNDS};
use crate::metrics::{ade, classify_case_failure, fde, EvalCase};
use crate::mining::{extract_candidate, mine, CandidateSubgraph, GateThresholds, MiningParams, PrototypeManifest};
use crate::planner::{
    mitigate_with_retry, AttemptRecord, DestinationParams, FixedProposal, PlanningScene, Proposal, RoadMask,
    Thresholds, Trajectory,
};
use crate::retrieval::{dispatch, retrieve_topk, Dispatch, Query, RetrievalParams, RetrievalTrace};
use crate::scene_graph::{build_scene_graph, json_error, Detection, SceneGraph};
use crate::vlm_adapter::{
    AdapterSource, Backend, Exchange, FixtureFile, PromptContext, RemoteBackend, RemoteConfig, ReplayBackend,
    StubBackend,
};

/// How recorded planner outputs decide whether a frame is abnormal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbnormalMode {
    /// Abnormal when every recorded output fails.
    All,
    /// Abnormal when at least one recorded output fails.
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Stub,
    Replay,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub fixtures: Option<PathBuf>,
    pub remote: RemoteConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Stub,
            fixtures: None,
            remote: RemoteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Scene set used to build the database.
    pub scenes: Option<PathBuf>,
    /// Scene set used for inference.
    pub infer_scenes: Option<PathBuf>,
    pub db: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub max_iter: usize,
    pub k_max: usize,
    pub appearance_dim: usize,
    pub abnormal_mode: AbnormalMode,
    pub collision_margin: f64,
    pub ego: EgoConfig,
    pub mining: MiningParams,
    pub gate: GateThresholds,
    pub retrieval: RetrievalParams,
    pub thresholds: Thresholds,
    pub mitigation: MitigationConfig,
    pub backend: BackendConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            max_iter: 3,
            k_max: 15,
            appearance_dim: 8,
            abnormal_mode: AbnormalMode::All,
            collision_margin: 5.0,
            ego: EgoConfig::default(),
            mining: MiningParams::default(),
            gate: GateThresholds::default(),
            retrieval: RetrievalParams::default(),
            thresholds: Thresholds::default(),
            mitigation: MitigationConfig::default(),
            backend: BackendConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// A named constant and whether it comes from the method description
/// ("paper") or is an implementation choice ("decision").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constant {
    pub name: String,
    pub value: f64,
    pub source: String,
}

impl RunConfig {
    /// Parses TOML and resolves relative paths against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            offset: e.span().map_or(0, |s| s.start),
            message: e.message().to_owned(),
        })?;
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut cfg.paths.scenes);
        fix(&mut cfg.paths.infer_scenes);
        fix(&mut cfg.paths.db);
        fix(&mut cfg.paths.out);
        fix(&mut cfg.backend.fixtures);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.ego.validate()?;
        if self.max_iter == 0 || self.workers == 0 || self.appearance_dim == 0 {
            return Err(Error::invalid("max_iter, workers and appearance_dim must be positive"));
        }
        if self.k_max < 3 {
            return Err(Error::invalid("k_max must be at least 3"));
        }
        Ok(())
    }

    pub fn destination_params(&self) -> DestinationParams {
        DestinationParams {
            lane_half_width_px: self.ego.lane_half_width_px(),
        }
    }

    pub fn retrieval_params(&self) -> RetrievalParams {
        self.retrieval.with_frame(self.ego.image_width, self.ego.image_height)
    }

    pub fn constants(&self) -> Vec<Constant> {
        let c = |name: &str, value: f64, source: &str| Constant {
            name: name.into(),
            value,
            source: source.into(),
        };
        let mut out = vec![
            c("mining.max_hops", self.mining.max_hops as f64, "paper"),
            c("mining.min_size", self.mining.min_size as f64, "paper"),
            c("gate.max_depth_diff_m", self.gate.max_depth_diff, "paper"),
            c("gate.max_radius_diff_px", self.gate.max_radius_diff, "paper"),
            c("retrieval.threshold", self.retrieval.threshold, "paper"),
            c("retrieval.top_k", self.retrieval.top_k as f64, "paper"),
            c("retrieval.depth_scale_m", self.retrieval.depth_scale, "paper"),
            c("retrieval.bbox_scale_px", self.retrieval_params().bbox_scale, "paper"),
            c("metrics.case_ade_limit_px", crate::metrics::CASE_ADE_LIMIT, "paper"),
            c("metrics.case_fde_limit_px", crate::metrics::CASE_FDE_LIMIT, "paper"),
            c(
                "metrics.scenario_fail_fraction",
                crate::metrics::SCENARIO_FAIL_FRACTION,
                "paper",
            ),
            c("trajectory.points", crate::planner::TRAJECTORY_LEN as f64, "paper"),
            c("ego.alpha_rad", self.ego.alpha, "decision"),
            c("ego.ppm", self.ego.ppm, "decision"),
            c("ego.lane_half_width_m", self.ego.lane_half_width, "decision"),
            c("planner.tau_road_px", self.thresholds.tau_road, "decision"),
            c("planner.tau_px", self.thresholds.tau, "decision"),
            c(
                "planner.inflation_margin_px",
                self.mitigation.inflation_margin,
                "decision",
            ),
            c("planner.cluster_gap_px", self.mitigation.cluster_gap, "decision"),
            c("planner.follow_gap_px", self.mitigation.follow_gap, "decision"),
            c("planner.max_iter", self.max_iter as f64, "decision"),
            c("metrics.collision_margin_px", self.collision_margin, "decision"),
            c("clustering.k_max", self.k_max as f64, "decision"),
        ];
        for (i, b) in PROXIMITY_BOUNDS.iter().enumerate() {
            out.push(c(&format!("geometry.proximity_bound_{i}_m"), *b, "paper"));
        }
        out
    }
}

pub fn make_backend(cfg: &BackendConfig) -> Result<Box<dyn Backend>> {
    let fixtures = || -> Result<FixtureFile> {
        let path = cfg
            .fixtures
            .as_ref()
            .ok_or_else(|| Error::invalid("backend needs a fixtures file"))?;
        FixtureFile::load(path)
    };
    Ok(match cfg.kind {
        BackendKind::Stub => Box::new(StubBackend::new(fixtures()?)),
        BackendKind::Replay => Box::new(ReplayBackend::new(fixtures()?)),
        BackendKind::Remote => Box::new(RemoteBackend::new(cfg.remote.clone())),
    })
}

/// One frame as stored in a scene-set file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub frame_id: String,
    pub sequence_id: String,
    pub frame_index: u32,
    /// Road mask, relative to the scene-set file.
    pub mask: String,
    pub start: PixelPoint,
    #[serde(default)]
    pub lane_center: Option<f64>,
    pub detections: Vec<Detection>,
    #[serde(default)]
    pub ground_truth: Option<Vec<PixelPoint>>,
    /// Trajectories previously produced by the planner under evaluation.
    #[serde(default)]
    pub planner_outputs: Vec<Vec<PixelPoint>>,
    #[serde(default)]
    pub pattern: Option<PatternTag>,
}

const SCENES_FORMAT: &str = "workzone-scenes";
const SCENES_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSetFile {
    pub format: String,
    pub version: u32,
    pub scenes: Vec<SceneSpec>,
}

impl SceneSetFile {
    pub fn new(scenes: Vec<SceneSpec>) -> Self {
        Self {
            format: SCENES_FORMAT.into(),
            version: SCENES_VERSION,
            scenes,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenes serialize") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: SceneSetFile = serde_json::from_str(text).map_err(|e| json_error(text, &e))?;
        if f.format != SCENES_FORMAT {
            return Err(Error::schema(format!("unexpected format {:?}", f.format)));
        }
        if f.version != SCENES_VERSION {
            return Err(Error::Version {
                found: f.version,
                expected: SCENES_VERSION,
            });
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub mask: RoadMask,
}

impl Scene {
    pub fn planning(&self) -> PlanningScene {
        PlanningScene {
            mask: self.mask.clone(),
            work_zone: self.spec.detections.clone(),
            start: self.spec.start,
            lane_center: self.spec.lane_center,
        }
    }

    pub fn graph(&self, ego: &EgoConfig) -> Result<SceneGraph> {
        build_scene_graph(&self.spec.frame_id, &self.spec.detections, ego)
    }
}

pub fn load_scenes(path: &Path, ego: &EgoConfig) -> Result<Vec<Scene>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = SceneSetFile::from_json(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    file.scenes
        .into_iter()
        .map(|spec| {
            let mask_path = base.join(&spec.mask);
            let bytes = std::fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
            let mask = RoadMask::from_pgm(&bytes)?;
            if mask.width() as f64 != ego.image_width || mask.height() as f64 != ego.image_height {
                return Err(Error::schema(format!(
                    "frame {}: mask is {}x{}, configured image is {}x{}",
                    spec.frame_id,
                    mask.width(),
                    mask.height(),
                    ego.image_width,
                    ego.image_height
                )));
            }
            Ok(Scene { spec, mask })
        })
        .collect()
}

/// First recorded output that fails the case criterion, if the frame counts
/// as abnormal under `mode`.
pub fn abnormal_output(spec: &SceneSpec, mode: AbnormalMode) -> Result<Option<&[PixelPoint]>> {
    let Some(gt) = &spec.ground_truth else {
        return Ok(None);
    };
    let mut failing = Vec::new();
    for out in &spec.planner_outputs {
        if classify_case_failure(ade(out, gt)?, fde(out, gt)?) {
            failing.push(out.as_slice());
        }
    }
    let abnormal = match mode {
        AbnormalMode::All => !spec.planner_outputs.is_empty() && failing.len() == spec.planner_outputs.len(),
        AbnormalMode::Any => !failing.is_empty(),
    };
    Ok(if abnormal { failing.first().copied() } else { None })
}

fn file_stem(frame_id: &str) -> String {
    frame_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

pub fn failure_overlay_ref(frame_id: &str) -> String {
    format!("overlays/{}_failure.png", file_stem(frame_id))
}

pub fn reference_overlay_ref(frame_id: &str) -> String {
    format!("overlays/{}_reference.png", file_stem(frame_id))
}

pub fn scene_summary(dets: &[Detection]) -> String {
    if dets.is_empty() {
        return "none".into();
    }
    dets.iter()
        .map(|d| {
            format!(
                "{} #{} at [{:.0}, {:.0}, {:.0}, {:.0}] {:.1} m",
                d.category, d.instance_id, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.depth
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Ego-rooted candidate used for case records and queries; unlike mining it
/// has no minimum size so that every frame can be indexed.
pub fn index_candidate(graph: &SceneGraph, cfg: &RunConfig) -> Result<CandidateSubgraph> {
    let params = MiningParams {
        min_size: 1,
        ..cfg.mining
    };
    Ok(extract_candidate(graph, &params)?.expect("ego alone satisfies a minimum size of one"))
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseLog {
    pub frame_id: String,
    pub stored: bool,
    pub case_id: Option<String>,
    pub pattern: Option<PatternTag>,
    pub reason: Option<String>,
    pub history: Vec<AttemptRecord>,
    pub exchanges: Vec<Exchange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub constants: Vec<Constant>,
    pub frames: usize,
    pub abnormal: Vec<String>,
    pub stored: usize,
    pub cases: Vec<CaseLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub database: CaseDatabase,
    pub manifest: PrototypeManifest,
    pub clusters: ClusterReport,
    pub report: BuildReport,
}

fn process_case(scene: &Scene, cfg: &RunConfig, backend: &dyn Backend) -> (CaseLog, Option<CaseRecord>) {
    let spec = &scene.spec;
    let mut log = CaseLog {
        frame_id: spec.frame_id.clone(),
        stored: false,
        case_id: None,
        pattern: None,
        reason: None,
        history: Vec::new(),
        exchanges: Vec::new(),
    };
    let prepared = (|| -> Result<(CandidateSubgraph, Vec<f64>)> {
        let graph = scene.graph(&cfg.ego)?;
        let cand = index_candidate(&graph, cfg)?;
        let app = aggregate_appearance(&cand.instance_embeddings(), cfg.appearance_dim)?;
        Ok((cand, app))
    })();
    let (candidate, appearance) = match prepared {
        Ok(v) => v,
        Err(e) => {
            log.reason = Some(e.to_string());
            return (log, None);
        }
    };
    let gt_dest = spec
        .ground_truth
        .as_ref()
        .and_then(|g| g.last().copied())
        .expect("abnormal frames have ground truth");

    let ctx = PromptContext {
        case_id: spec.frame_id.clone(),
        scene_summary: scene_summary(&spec.detections),
        failure_overlay: failure_overlay_ref(&spec.frame_id),
        gt_overlay: reference_overlay_ref(&spec.frame_id),
        attempt: 1,
        feedback: Vec::new(),
    };
    let mut source = AdapterSource::new(backend, ctx, cfg.mitigation);
    let outcome = mitigate_with_retry(
        &scene.planning(),
        &mut source,
        Some(gt_dest),
        cfg.max_iter,
        &cfg.thresholds,
        &cfg.destination_params(),
    );
    log.history = outcome.history.clone();
    log.exchanges = source.exchanges;

    if !outcome.verified {
        log.reason = Some(format!(
            "verification failed after {} attempt(s)",
            outcome.history.len()
        ));
        return (log, None);
    }
    let constraints = outcome
        .proposal_constraints
        .expect("verified outcomes carry a proposal");
    let Some(pattern) = PatternTag::infer(&constraints).or(spec.pattern) else {
        log.reason = Some("constraints match no known pattern".into());
        return (log, None);
    };
    let record = CaseRecord {
        case_id: spec.frame_id.clone(),
        pattern_tag: pattern,
        scene: SceneRef {
            frame_id: spec.frame_id.clone(),
            detections_file: cfg
                .paths
                .scenes
                .as_ref()
                .and_then(|p| p.file_name())
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        },
        sequence_id: spec.sequence_id.clone(),
        frame_index: spec.frame_index,
        prototype: candidate,
        constraints,
        mitigation: outcome.proposal_config.expect("verified outcomes carry a proposal"),
        appearance,
        verification: outcome.verification_record().expect("verified outcomes have feedback"),
    };
    log.pattern = Some(pattern);
    (log, Some(record))
}

/// Offline stage: abnormal-frame selection, mining and clustering reports,
/// and one verified case per successfully mitigated abnormal frame.
pub fn build_database(scenes: &[Scene], cfg: &RunConfig, backend: &dyn Backend) -> Result<BuildOutput> {
    cfg.validate()?;
    let mut abnormal: Vec<(&Scene, &[PixelPoint])> = Vec::new();
    for s in scenes {
        if let Some(f) = abnormal_output(&s.spec, cfg.abnormal_mode)? {
            abnormal.push((s, f));
        }
    }

    let mut graphs = Vec::new();
    for (s, _) in &abnormal {
        // Unbuildable frames are reported per case below.
        if let Ok(g) = s.graph(&cfg.ego) {
            graphs.push(g);
        }
    }
    let manifest = mine(&graphs, &cfg.mining, &cfg.gate)?;
    let clusters = cluster_prototypes(&manifest.clusters, cfg.appearance_dim, cfg.k_max, cfg.seed)?;

    let results: Vec<(CaseLog, Option<CaseRecord>)> = with_pool(cfg.workers, || {
        abnormal
            .par_iter()
            .map(|(s, _)| process_case(s, cfg, backend))
            .collect()
    })?;

    let mut database = CaseDatabase::new(cfg.appearance_dim);
    let mut logs = Vec::new();
    for (mut log, record) in results {
        if let Some(r) = record {
            match database.add_case(r) {
                Ok(id) => {
                    log.stored = true;
                    log.case_id = Some(id);
                }
                Err(e) => log.reason = Some(e.to_string()),
            }
        }
        logs.push(log);
    }
    Ok(BuildOutput {
        report: BuildReport {
            constants: cfg.constants(),
            frames: scenes.len(),
            abnormal: abnormal.iter().map(|(s, _)| s.spec.frame_id.clone()).collect(),
            stored: database.len(),
            cases: logs,
        },
        database,
        manifest,
        clusters,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub frame_id: String,
    pub retrieval: RetrievalTrace,
    pub verified: bool,
    /// True when planning produced nothing and the straight-line fallback
    /// was emitted instead.
    pub planner_fallback: bool,
    pub history: Vec<AttemptRecord>,
    pub exchanges: Vec<Exchange>,
    pub trajectory: Trajectory,
}

/// Straight ahead from the start to the last drivable row of its column.
pub fn straight_line_baseline(scene: &Scene) -> Trajectory {
    let start = scene.spec.start;
    let (c, mut r) = RoadMask::cell_of(start);
    while scene.mask.get_signed(c, r - 1) {
        r -= 1;
    }
    Trajectory::straight(
        start,
        PixelPoint::new(start.x, r.min(RoadMask::cell_of(start).1) as f64),
    )
}

/// Query construction and retrieval for one scene, without planning.
pub fn retrieve_scene(scene: &Scene, db: &CaseDatabase, cfg: &RunConfig) -> Result<RetrievalTrace> {
    let spec = &scene.spec;
    let graph = scene.graph(&cfg.ego)?;
    let candidate = index_candidate(&graph, cfg)?;
    let appearance = aggregate_appearance(&candidate.instance_embeddings(), cfg.appearance_dim)?;
    let query = Query {
        frame_id: spec.frame_id.clone(),
        sequence_id: spec.sequence_id.clone(),
        frame_index: spec.frame_index,
        prototype: candidate,
        appearance,
    };
    let params = cfg.retrieval_params();
    let result = retrieve_topk(&query, db, &params);
    let decision = dispatch(&result);
    Ok(RetrievalTrace {
        params,
        result,
        decision,
    })
}

/// Online stage for one scene.
pub fn infer(scene: &Scene, db: &CaseDatabase, cfg: &RunConfig, backend: &dyn Backend) -> Result<InferenceTrace> {
    let spec = &scene.spec;
    let retrieval = retrieve_scene(scene, db, cfg)?;
    let planning = scene.planning();
    let dest_params = cfg.destination_params();
    let (outcome, exchanges) = match &retrieval.decision {
        Dispatch::UseCase(id) => {
            let record = db.get(id).expect("dispatch picks a stored case");
            let mut source = FixedProposal(Proposal {
                constraints: record.constraints,
                config: record.mitigation,
            });
            let out = mitigate_with_retry(
                &planning,
                &mut source,
                None,
                cfg.max_iter,
                &cfg.thresholds,
                &dest_params,
            );
            (out, Vec::new())
        }
        Dispatch::FallbackVlm => {
            let ctx = PromptContext {
                case_id: spec.frame_id.clone(),
                scene_summary: scene_summary(&spec.detections),
                failure_overlay: failure_overlay_ref(&spec.frame_id),
                gt_overlay: reference_overlay_ref(&spec.frame_id),
                attempt: 1,
                feedback: Vec::new(),
            };
            let mut source = AdapterSource::new(backend, ctx, cfg.mitigation);
            let out = mitigate_with_retry(
                &planning,
                &mut source,
                None,
                cfg.max_iter,
                &cfg.thresholds,
                &dest_params,
            );
            (out, source.exchanges)
        }
    };
    let planner_fallback = outcome.trajectory.is_none();
    Ok(InferenceTrace {
        frame_id: spec.frame_id.clone(),
        retrieval,
        verified: outcome.verified,
        planner_fallback,
        history: outcome.history,
        exchanges,
        trajectory: outcome.trajectory.unwrap_or_else(|| straight_line_baseline(scene)),
    })
}

pub fn infer_all(
    scenes: &[Scene],
    db: &CaseDatabase,
    cfg: &RunConfig,
    backend: &dyn Backend,
) -> Result<Vec<InferenceTrace>> {
    with_pool(cfg.workers, || {
        scenes
            .par_iter()
            .map(|s| infer(s, db, cfg, backend))
            .collect::<Result<Vec<_>>>()
    })?
}

/// Pairs inference output with ground truth for the metrics harness. Scenes
/// without ground truth are skipped.
pub fn eval_cases(scenes: &[Scene], traces: &[InferenceTrace]) -> Vec<EvalCase> {
    scenes
        .iter()
        .zip(traces)
        .filter_map(|(s, t)| {
            Some(EvalCase {
                case_id: s.spec.frame_id.clone(),
                pattern: s.spec.pattern.map(|p| p.to_string()),
                scenario: Some(s.spec.sequence_id.clone()),
                predicted: t.trajectory.points().to_vec(),
                ground_truth: s.spec.ground_truth.clone()?,
                obstacles: s.spec.detections.iter().map(|d| d.bbox).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casedb::{ConstraintSet, DetourSide};
    use crate::geometry::BBox;
    use crate::scene_graph::Category;
    use crate::vlm_adapter::FixtureEntry;

    fn det(id: u32, cat: Category, b: [f64; 4], app: usize) -> Detection {
        let mut v = vec![0.0; 4];
        v[app] = 1.0;
        Detection {
            instance_id: id,
            category: cat,
            bbox: BBox::from(b),
            depth: 10.0,
            appearance: Some(v),
        }
    }

    fn cfg() -> RunConfig {
        RunConfig {
            appearance_dim: 4,
            ego: EgoConfig {
                center: (100.0, 190.0),
                ..EgoConfig::for_image(200.0, 200.0)
            },
            ..RunConfig::default()
        }
    }

    fn scene(frame: &str, seq: &str, index: u32) -> Scene {
        let mut mask = RoadMask::filled(200, 200, false);
        mask.fill_rect(40..160, 10..200, true);
        let gt: Vec<PixelPoint> = (0..20)
            .map(|i| PixelPoint::new(100.0, 190.0 - 9.0 * i as f64))
            .collect();
        let bad: Vec<PixelPoint> = (0..20)
            .map(|i| PixelPoint::new(100.0 + 15.0 * i as f64, 190.0))
            .collect();
        Scene {
            spec: SceneSpec {
                frame_id: frame.into(),
                sequence_id: seq.into(),
                frame_index: index,
                mask: "unused.pgm".into(),
                start: PixelPoint::new(100.0, 190.0),
                lane_center: None,
                detections: vec![
                    det(1, Category::Cone, [40.0, 80.0, 10.0, 10.0], 0),
                    det(2, Category::Cone, [45.0, 110.0, 10.0, 10.0], 0),
                ],
                ground_truth: Some(gt),
                planner_outputs: vec![bad],
                pattern: None,
            },
            mask,
        }
    }

    fn reply(c: &ConstraintSet) -> String {
        serde_json::json!({ "constraints": c.to_slot_map() }).to_string()
    }

    fn lane_center() -> ConstraintSet {
        ConstraintSet {
            follow_lane_center: true,
            ..ConstraintSet::permissive()
        }
    }

    #[test]
    fn config_round_trips_and_labels_constants() {
        let c = cfg();
        let back = RunConfig::from_toml(&c.to_toml(), Path::new("/")).unwrap();
        assert_eq!(back, c);
        let partial = RunConfig::from_toml("seed = 9\n[retrieval]\ntop_k = 10\n", Path::new("/x")).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.retrieval.top_k, 10);
        assert_eq!(partial.retrieval.threshold, 0.8);
        assert!(RunConfig::from_toml("bogus = 1\n", Path::new("/")).is_err());
        let constants = c.constants();
        let threshold = constants.iter().find(|k| k.name == "retrieval.threshold").unwrap();
        assert_eq!((threshold.value, threshold.source.as_str()), (0.8, "paper"));
        assert!(constants.iter().any(|k| k.source == "decision"));
    }

    #[test]
    fn abnormal_modes() {
        let mut s = scene("a", "s", 0).spec;
        assert!(abnormal_output(&s, AbnormalMode::All).unwrap().is_some());
        s.planner_outputs.push(s.ground_truth.clone().unwrap());
        assert!(abnormal_output(&s, AbnormalMode::All).unwrap().is_none());
        assert!(abnormal_output(&s, AbnormalMode::Any).unwrap().is_some());
        s.ground_truth = None;
        assert!(abnormal_output(&s, AbnormalMode::Any).unwrap().is_none());
    }

    #[test]
    fn builds_and_reuses_a_case() {
        let stub = StubBackend::new(FixtureFile {
            entries: vec![FixtureEntry {
                key: "case:a".into(),
                response: reply(&lane_center()),
            }],
        });
        let out = build_database(&[scene("a", "s", 0)], &cfg(), &stub).unwrap();
        assert_eq!(out.database.len(), 1);
        assert_eq!(out.database.get("a").unwrap().pattern_tag, PatternTag::P1);
        assert!(out.report.cases[0].stored);

        let trace = infer(&scene("b", "s", 1), &out.database, &cfg(), &stub).unwrap();
        assert_eq!(trace.retrieval.decision, Dispatch::UseCase("a".into()));
        assert!(trace.verified);
        assert_eq!(trace.trajectory.points().len(), 20);
    }

    #[test]
    fn infeasible_constraints_store_nothing() {
        let turn = ConstraintSet {
            turn_to_avoid_work_zone: true,
            ..ConstraintSet::permissive()
        };
        let stub = StubBackend::new(FixtureFile {
            entries: vec![FixtureEntry {
                key: "case:a".into(),
                response: reply(&turn),
            }],
        });
        let out = build_database(&[scene("a", "s", 0)], &cfg(), &stub).unwrap();
        assert!(out.database.is_empty());
        let log = &out.report.cases[0];
        assert!(!log.stored);
        assert_eq!(log.history.len(), 3);
        assert!(log.reason.is_some());
    }

    #[test]
    fn empty_pool_gives_empty_database() {
        let mut s = scene("a", "s", 0);
        s.spec.planner_outputs.clear();
        let stub = StubBackend::new(FixtureFile::default());
        let out = build_database(&[s], &cfg(), &stub).unwrap();
        assert!(out.database.is_empty());
        assert!(out.report.abnormal.is_empty());
    }

    #[test]
    fn empty_database_falls_back() {
        let stub = StubBackend::new(FixtureFile {
            entries: vec![FixtureEntry {
                key: "case:b".into(),
                response: reply(&ConstraintSet {
                    detour_side: DetourSide::Right,
                    ..lane_center()
                }),
            }],
        });
        let trace = infer(&scene("b", "s", 1), &CaseDatabase::new(4), &cfg(), &stub).unwrap();
        assert_eq!(trace.retrieval.decision, Dispatch::FallbackVlm);
        assert_eq!(trace.exchanges.len(), 1);
        assert!(trace.verified);
    }

    #[test]
    fn planner_fallback_is_flagged() {
        let stub = StubBackend::new(FixtureFile::default());
        let trace = infer(&scene("b", "s", 1), &CaseDatabase::new(4), &cfg(), &stub).unwrap();
        assert!(trace.planner_fallback);
        assert!(!trace.verified);
        assert_eq!(trace.trajectory.destination(), PixelPoint::new(100.0, 10.0));
    }
}
