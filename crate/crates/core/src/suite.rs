//! Bundled synthetic scene suite: one hand-laid work-zone scene per failure
//! pattern, a near-identical follow-up frame for each, one scene that is not
//! abnormal and one novel scene, together with scripted adapter responses.

use std::path::Path;

use crate::casedb::{ConstraintSet, DetourSide, Passage, PatternTag};
use crate::error::{Error, Result};
use crate::geometry::{BBox, EgoConfig, PixelPoint};
use crate::pipeline::{RunConfig, Scene, SceneSetFile, SceneSpec};
use crate::planner::{resample, RoadMask, TRAJECTORY_LEN};
use crate::scene_graph::{write_detections, Category, Detection, DetectionSet};
use crate::vlm_adapter::{FixtureEntry, FixtureFile};

pub const WIDTH: usize = 960;
pub const HEIGHT: usize = 540;
pub const APPEARANCE_DIM: usize = 8;
pub const START: PixelPoint = PixelPoint { x: 480.0, y: 530.0 };
pub const SEED: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    Straight,
    DeadEnd,
    Shift,
    Turn,
}

impl Layout {
    fn name(&self) -> &'static str {
        match self {
            Layout::Straight => "straight",
            Layout::DeadEnd => "dead_end",
            Layout::Shift => "shift",
            Layout::Turn => "turn",
        }
    }

    fn mask(&self) -> RoadMask {
        let mut m = RoadMask::filled(WIDTH, HEIGHT, false);
        match self {
            Layout::Straight => m.fill_rect(375..585, 40..540, true),
            Layout::DeadEnd => {
                m.fill_rect(375..585, 205..540, true);
                m.fill_rect(585..960, 205..300, true);
            }
            Layout::Shift => {
                m.fill_rect(375..585, 250..540, true);
                m.fill_rect(480..690, 40..250, true);
            }
            Layout::Turn => {
                m.fill_rect(375..585, 150..540, true);
                m.fill_rect(100..585, 150..260, true);
                m.fill_rect(100..310, 40..150, true);
            }
        }
        m
    }
}

struct PatternScene {
    pattern: PatternTag,
    layout: Layout,
    objects: Vec<(Category, [f64; 4])>,
    /// Waypoints of the reference trajectory.
    reference: Vec<[f64; 2]>,
    constraints: ConstraintSet,
}

fn set(f: impl FnOnce(&mut ConstraintSet)) -> ConstraintSet {
    let mut c = ConstraintSet::permissive();
    f(&mut c);
    c
}

fn pattern_scenes() -> Vec<PatternScene> {
    use Category::*;
    vec![
        PatternScene {
            pattern: PatternTag::P1,
            layout: Layout::Straight,
            objects: vec![
                (Cone, [340.0, 150.0, 16.0, 24.0]),
                (Cone, [335.0, 210.0, 16.0, 24.0]),
                (Cone, [330.0, 270.0, 16.0, 24.0]),
                (Cone, [325.0, 330.0, 16.0, 24.0]),
                (Drum, [600.0, 200.0, 24.0, 36.0]),
            ],
            reference: vec![[480.0, 530.0], [480.0, 40.0]],
            constraints: set(|c| c.follow_lane_center = true),
        },
        PatternScene {
            pattern: PatternTag::P2,
            layout: Layout::DeadEnd,
            objects: vec![
                (Barrier, [380.0, 165.0, 200.0, 35.0]),
                (Drum, [400.0, 120.0, 24.0, 36.0]),
                (Drum, [540.0, 120.0, 24.0, 36.0]),
            ],
            reference: vec![
                [480.0, 530.0],
                [480.0, 380.0],
                [520.0, 290.0],
                [600.0, 255.0],
                [955.0, 252.0],
            ],
            constraints: set(|c| c.turn_to_avoid_work_zone = true),
        },
        PatternScene {
            pattern: PatternTag::P3,
            layout: Layout::Straight,
            objects: vec![
                (WorkVehicle, [470.0, 170.0, 110.0, 130.0]),
                (Cone, [455.0, 320.0, 16.0, 24.0]),
                (Cone, [560.0, 320.0, 16.0, 24.0]),
            ],
            reference: vec![
                [480.0, 530.0],
                [470.0, 420.0],
                [412.0, 340.0],
                [412.0, 170.0],
                [470.0, 90.0],
                [480.0, 40.0],
            ],
            constraints: set(|c| {
                c.detour_side = DetourSide::Left;
                c.follow_lane_center = true;
            }),
        },
        PatternScene {
            pattern: PatternTag::P4,
            layout: Layout::Straight,
            objects: vec![
                (Drum, [465.0, 150.0, 30.0, 40.0]),
                (Drum, [468.0, 215.0, 30.0, 40.0]),
                (Drum, [471.0, 280.0, 30.0, 40.0]),
                (Cone, [540.0, 240.0, 16.0, 24.0]),
            ],
            reference: vec![
                [480.0, 530.0],
                [470.0, 400.0],
                [418.0, 310.0],
                [418.0, 160.0],
                [470.0, 80.0],
                [480.0, 40.0],
            ],
            constraints: set(|c| {
                c.detour_side = DetourSide::Left;
                c.return_to_original_lane_after_workzone = true;
            }),
        },
        PatternScene {
            pattern: PatternTag::P5,
            layout: Layout::Shift,
            objects: vec![
                (Cone, [390.0, 300.0, 16.0, 24.0]),
                (Cone, [410.0, 265.0, 16.0, 24.0]),
                (Drum, [440.0, 255.0, 24.0, 36.0]),
            ],
            reference: vec![
                [480.0, 530.0],
                [480.0, 330.0],
                [560.0, 230.0],
                [584.0, 140.0],
                [584.0, 40.0],
            ],
            constraints: set(|c| {
                c.passage = Passage::Cross;
                c.return_center_line_after_crossing = true;
            }),
        },
        PatternScene {
            pattern: PatternTag::P6,
            layout: Layout::Straight,
            objects: vec![
                (TtcSign, [545.0, 180.0, 30.0, 45.0]),
                (Cone, [560.0, 250.0, 16.0, 24.0]),
                (Cone, [565.0, 300.0, 16.0, 24.0]),
            ],
            reference: vec![[480.0, 530.0], [480.0, 40.0]],
            constraints: set(|c| {
                c.follow_sign = true;
                c.return_center_line_after_crossing = true;
            }),
        },
        PatternScene {
            pattern: PatternTag::P7,
            layout: Layout::Straight,
            objects: vec![
                (WorkVehicle, [450.0, 150.0, 60.0, 60.0]),
                (Cone, [540.0, 230.0, 16.0, 24.0]),
                (Cone, [545.0, 290.0, 16.0, 24.0]),
            ],
            reference: vec![[480.0, 530.0], [480.0, 240.0]],
            constraints: set(|c| {
                c.follow_front_car = true;
                c.follow_lane_center = true;
            }),
        },
        PatternScene {
            pattern: PatternTag::P8,
            layout: Layout::Turn,
            objects: vec![
                (Cone, [330.0, 180.0, 16.0, 24.0]),
                (Cone, [290.0, 215.0, 16.0, 24.0]),
                (Drum, [520.0, 160.0, 24.0, 36.0]),
            ],
            reference: vec![
                [480.0, 530.0],
                [480.0, 300.0],
                [420.0, 215.0],
                [260.0, 190.0],
                [206.0, 120.0],
                [205.0, 40.0],
            ],
            constraints: set(|c| {
                c.passage = Passage::Cross;
                c.follow_lane_center = true;
            }),
        },
    ]
}

pub fn config() -> RunConfig {
    let mut cfg = RunConfig {
        seed: SEED,
        appearance_dim: APPEARANCE_DIM,
        ego: EgoConfig {
            center: (START.x, START.y),
            ..EgoConfig::for_image(WIDTH as f64, HEIGHT as f64)
        },
        ..RunConfig::default()
    };
    cfg.backend.fixtures = Some("fixtures.json".into());
    cfg.paths.scenes = Some("scenes_build.json".into());
    cfg.paths.infer_scenes = Some("scenes_infer.json".into());
    cfg
}

fn appearance(category: Category, pattern: usize) -> Vec<f64> {
    let mut v = vec![0.0; APPEARANCE_DIM];
    v[category.index() % APPEARANCE_DIM] = 1.0;
    v[pattern % APPEARANCE_DIM] += 0.25;
    v
}

fn detections(objects: &[(Category, [f64; 4])], pattern: usize, shift: (f64, f64)) -> Vec<Detection> {
    objects
        .iter()
        .enumerate()
        .map(|(i, (category, b))| {
            let bbox = BBox::new(b[0] + shift.0, b[1] + shift.1, b[2], b[3]);
            let c = bbox.center();
            // Depth follows the ego-frame range of the box centre.
            let depth = ((c.x - START.x) / 20.0).hypot((START.y - c.y) / 20.0);
            Detection {
                instance_id: i as u32 + 1,
                category: *category,
                bbox,
                depth: (depth * 100.0).round() / 100.0,
                appearance: Some(appearance(*category, pattern)),
            }
        })
        .collect()
}

fn polyline(points: &[[f64; 2]]) -> Vec<PixelPoint> {
    let pts: Vec<PixelPoint> = points.iter().map(|p| PixelPoint::from(*p)).collect();
    resample(&pts, TRAJECTORY_LEN)
}

/// A recorded planner output that drifts away from the reference.
fn drifting_output(reference: &[PixelPoint]) -> Vec<PixelPoint> {
    let dest = *reference.last().unwrap();
    let dx = if dest.x < 480.0 { 300.0 } else { -300.0 };
    let wrong = PixelPoint::new(dest.x + dx, dest.y + 60.0);
    resample(&[reference[0], wrong], TRAJECTORY_LEN)
}

fn reply(c: &ConstraintSet, note: &str, planner: Option<serde_json::Value>) -> String {
    let mut block = serde_json::json!({ "constraints": c.to_slot_map() });
    if let Some(p) = planner {
        block["planner"] = p;
    }
    format!(
        "{note}\n\n```json\n{}\n```\n\n```python\n# planning code is not executed\n```\n",
        serde_json::to_string_pretty(&block).unwrap()
    )
}

pub struct Suite {
    pub config: RunConfig,
    pub build: Vec<Scene>,
    pub infer: Vec<Scene>,
    pub fixtures: FixtureFile,
}

#[allow(clippy::too_many_arguments)]
fn scene(
    frame_id: String,
    sequence_id: String,
    frame_index: u32,
    layout: Layout,
    dets: Vec<Detection>,
    reference: Vec<PixelPoint>,
    outputs: Vec<Vec<PixelPoint>>,
    pattern: Option<PatternTag>,
) -> Scene {
    Scene {
        spec: SceneSpec {
            frame_id,
            sequence_id,
            frame_index,
            mask: format!("masks/{}.pgm", layout.name()),
            start: START,
            lane_center: None,
            detections: dets,
            ground_truth: Some(reference),
            planner_outputs: outputs,
            pattern,
        },
        mask: layout.mask(),
    }
}

pub fn synthetic_suite() -> Suite {
    let mut build = Vec::new();
    let mut infer = Vec::new();
    let mut fixtures = Vec::new();

    for (i, p) in pattern_scenes().into_iter().enumerate() {
        let tag = p.pattern.to_string().to_lowercase();
        let seq = format!("seq-{tag}");
        let reference = polyline(&p.reference);
        let outputs = vec![drifting_output(&reference)];
        let base_id = format!("{seq}-000");
        build.push(scene(
            base_id.clone(),
            seq.clone(),
            0,
            p.layout,
            detections(&p.objects, i, (0.0, 0.0)),
            reference.clone(),
            outputs.clone(),
            Some(p.pattern),
        ));
        infer.push(scene(
            format!("{seq}-001"),
            seq.clone(),
            1,
            p.layout,
            detections(&p.objects, i, (2.0, -3.0)),
            reference,
            outputs,
            Some(p.pattern),
        ));
        if p.pattern == PatternTag::P4 {
            // First answer aims far off the road; verification sends it back.
            fixtures.push(FixtureEntry {
                key: format!("case:{base_id}#1"),
                response: reply(
                    &p.constraints,
                    "The drums block the ego lane, so borrow the left lane.",
                    Some(serde_json::json!({ "destination_offset": [420.0, 0.0] })),
                ),
            });
        }
        fixtures.push(FixtureEntry {
            key: format!("case:{base_id}"),
            response: reply(
                &p.constraints,
                &format!("Scripted answer for {}.", p.pattern.title()),
                None,
            ),
        });
    }

    // Planner output already close to the reference: not abnormal.
    let normal_ref = polyline(&[[480.0, 530.0], [480.0, 40.0]]);
    let near: Vec<PixelPoint> = normal_ref.iter().map(|p| PixelPoint::new(p.x + 4.0, p.y)).collect();
    build.push(scene(
        "seq-normal-000".into(),
        "seq-normal".into(),
        0,
        Layout::Straight,
        detections(
            &[
                (Category::Cone, [600.0, 150.0, 16.0, 24.0]),
                (Category::Cone, [605.0, 220.0, 16.0, 24.0]),
            ],
            8,
            (0.0, 0.0),
        ),
        normal_ref.clone(),
        vec![near],
        None,
    ));

    // Nothing like it is stored: retrieval must fall back to the adapter.
    infer.push(scene(
        "seq-novel-000".into(),
        "seq-novel".into(),
        0,
        Layout::Straight,
        detections(
            &[
                (Category::Worker, [395.0, 120.0, 20.0, 40.0]),
                (Category::Worker, [400.0, 200.0, 20.0, 40.0]),
                (Category::Fence, [380.0, 260.0, 40.0, 30.0]),
            ],
            9,
            (0.0, 0.0),
        ),
        normal_ref,
        Vec::new(),
        None,
    ));
    fixtures.push(FixtureEntry {
        key: "case:seq-novel-000".into(),
        response: reply(
            &set(|c| {
                c.detour_side = DetourSide::Right;
                c.follow_lane_center = true;
            }),
            "Workers on the left; keep right of them.",
            None,
        ),
    });

    Suite {
        config: config(),
        build,
        infer,
        fixtures: FixtureFile { entries: fixtures },
    }
}

/// File name and bytes of every file making up the suite on disk.
fn detection_set(scenes: &[Scene]) -> DetectionSet {
    DetectionSet {
        appearance_dim: Some(APPEARANCE_DIM),
        frames: scenes
            .iter()
            .map(|x| (x.spec.frame_id.clone(), x.spec.detections.clone()))
            .collect(),
    }
}

pub fn suite_files() -> Vec<(String, Vec<u8>)> {
    let s = synthetic_suite();
    let mut files = vec![
        ("config.toml".to_owned(), s.config.to_toml().into_bytes()),
        (
            "scenes_build.json".to_owned(),
            SceneSetFile::new(s.build.iter().map(|x| x.spec.clone()).collect())
                .to_json()
                .into_bytes(),
        ),
        (
            "scenes_infer.json".to_owned(),
            SceneSetFile::new(s.infer.iter().map(|x| x.spec.clone()).collect())
                .to_json()
                .into_bytes(),
        ),
        (
            "fixtures.json".to_owned(),
            (serde_json::to_string_pretty(&s.fixtures).unwrap() + "\n").into_bytes(),
        ),
        (
            "detections_build.jsonl".to_owned(),
            write_detections(&detection_set(&s.build)).into_bytes(),
        ),
    ];
    for layout in [Layout::Straight, Layout::DeadEnd, Layout::Shift, Layout::Turn] {
        files.push((format!("masks/{}.pgm", layout.name()), layout.mask().to_pgm()));
    }
    files
}

pub fn write_suite(dir: &Path) -> Result<()> {
    for (name, bytes) in suite_files() {
        let path = dir.join(&name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
