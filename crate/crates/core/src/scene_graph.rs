//! Per-frame ego-centric scene graphs.
//!
//! Every graph carries five auxiliary nodes (ego, three virtual lanes and the
//! road root) plus one node per detection. Direction and proximity edges start
//! at ego; lane membership edges run detection -> lane -> road.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    assign_lane, classify_direction, classify_proximity, pixel_to_ego, relative_angle, BBox, DirRelation, EgoConfig,
    EgoPoint, LaneId, Pose, ProxRelation,
};

pub const EGO_ID: &str = "ego";
pub const ROOT_ID: &str = "road:root";

pub fn lane_node_id(lane: LaneId) -> &'static str {
    match lane {
        LaneId::LeftLane => "lane:left",
        LaneId::MiddleLane => "lane:middle",
        LaneId::RightLane => "lane:right",
    }
}

pub fn detection_node_id(instance_id: u32) -> String {
    format!("det:{instance_id}")
}

/// Work-zone object categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Drum,
    Cone,
    WorkVehicle,
    TtcSign,
    Fence,
    Barricade,
    Barrier,
    Worker,
    TubularMarker,
    VerticalPanel,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::Drum,
        Category::Cone,
        Category::WorkVehicle,
        Category::TtcSign,
        Category::Fence,
        Category::Barricade,
        Category::Barrier,
        Category::Worker,
        Category::TubularMarker,
        Category::VerticalPanel,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Drum => "drum",
            Category::Cone => "cone",
            Category::WorkVehicle => "work vehicle",
            Category::TtcSign => "ttc sign",
            Category::Fence => "fence",
            Category::Barricade => "barricade",
            Category::Barrier => "barrier",
            Category::Worker => "worker",
            Category::TubularMarker => "tubular marker",
            Category::VerticalPanel => "vertical panel",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::schema(format!("unknown work-zone category {s:?}")))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum NodeLabel {
    Ego,
    Lane(LaneId),
    RootRoad,
    WorkZone(Category),
}

impl NodeLabel {
    pub fn is_work_zone(&self) -> bool {
        matches!(self, NodeLabel::WorkZone(_))
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            NodeLabel::Ego => "ego",
            NodeLabel::Lane(l) => l.as_str(),
            NodeLabel::RootRoad => "RootRoad",
            NodeLabel::WorkZone(c) => c.as_str(),
        }
    }
}

impl fmt::Display for NodeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ego" => NodeLabel::Ego,
            "LeftLane" => NodeLabel::Lane(LaneId::LeftLane),
            "MiddleLane" => NodeLabel::Lane(LaneId::MiddleLane),
            "RightLane" => NodeLabel::Lane(LaneId::RightLane),
            "RootRoad" => NodeLabel::RootRoad,
            other => NodeLabel::WorkZone(other.parse()?),
        })
    }
}

impl From<NodeLabel> for String {
    fn from(l: NodeLabel) -> Self {
        l.as_str().to_owned()
    }
}

impl TryFrom<String> for NodeLabel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationFamily {
    Direction,
    Proximity,
    Lane,
}

/// Edge relation drawn from one of three disjoint families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Relation {
    Dir(DirRelation),
    Prox(ProxRelation),
    IsIn,
}

impl Relation {
    /// All nine relation labels, in histogram order.
    pub const ALL: [Relation; 9] = [
        Relation::Dir(DirRelation::InFrontOf),
        Relation::Dir(DirRelation::ToLeftOf),
        Relation::Dir(DirRelation::ToRightOf),
        Relation::Prox(ProxRelation::NearCollision),
        Relation::Prox(ProxRelation::SuperNear),
        Relation::Prox(ProxRelation::VeryNear),
        Relation::Prox(ProxRelation::Near),
        Relation::Prox(ProxRelation::Visible),
        Relation::IsIn,
    ];

    pub fn family(&self) -> RelationFamily {
        match self {
            Relation::Dir(_) => RelationFamily::Direction,
            Relation::Prox(_) => RelationFamily::Proximity,
            Relation::IsIn => RelationFamily::Lane,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Relation::Dir(d) => d.as_str(),
            Relation::Prox(p) => p.as_str(),
            Relation::IsIn => "isIn",
        }
    }

    pub fn index(&self) -> usize {
        Relation::ALL.iter().position(|r| r == self).unwrap()
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Relation::ALL
            .iter()
            .copied()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::schema(format!("unknown relation {s:?}")))
    }
}

impl From<Relation> for String {
    fn from(r: Relation) -> Self {
        r.as_str().to_owned()
    }
}

impl TryFrom<String> for Relation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub instance_id: u32,
    #[serde(with = "category_serde")]
    pub category: Category,
    pub bbox: BBox,
    #[serde(rename = "depth_m")]
    pub depth: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance: Option<Vec<f64>>,
}

mod category_serde {
    use super::Category;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(c: &Category, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(c.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Category, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub label: NodeLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<EgoPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance: Option<Vec<f64>>,
}

impl Node {
    fn auxiliary(label: NodeLabel) -> Self {
        Self {
            label,
            position: None,
            bbox: None,
            depth: None,
            appearance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub relation: Relation,
}

impl Edge {
    pub fn new(src: impl Into<String>, dst: impl Into<String>, relation: Relation) -> Self {
        Self {
            src: src.into(),
            dst: dst.into(),
            relation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub frame_id: String,
    /// Image-space position of the ego origin, used for pixel radii.
    pub image_center: (f64, f64),
    pub nodes: BTreeMap<String, Node>,
    /// Sorted edge triplets.
    pub edges: Vec<Edge>,
}

impl SceneGraph {
    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn outgoing<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.src == id)
    }

    /// Pretty JSON with sorted node ids and sorted edges; stable across runs.
    pub fn to_canonical_string(&self) -> String {
        let mut g = self.clone();
        g.edges.sort();
        g.edges.dedup();
        serde_json::to_string_pretty(&g).expect("scene graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut g: SceneGraph = serde_json::from_str(text).map_err(|e| json_error(text, &e))?;
        g.edges.sort();
        Ok(g)
    }
}

pub(crate) fn json_error(text: &str, e: &serde_json::Error) -> Error {
    Error::Parse {
        offset: line_col_offset(text, e.line(), e.column()),
        message: e.to_string(),
    }
}

pub(crate) fn line_col_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

/// Builds the scene graph for one frame.
pub fn build_scene_graph(frame_id: &str, detections: &[Detection], cfg: &EgoConfig) -> Result<SceneGraph> {
    cfg.validate()?;
    let mut nodes = BTreeMap::new();
    nodes.insert(EGO_ID.to_owned(), {
        let mut n = Node::auxiliary(NodeLabel::Ego);
        n.position = Some(EgoPoint::ORIGIN);
        n
    });
    for lane in LaneId::ALL {
        nodes.insert(lane_node_id(lane).to_owned(), Node::auxiliary(NodeLabel::Lane(lane)));
    }
    nodes.insert(ROOT_ID.to_owned(), Node::auxiliary(NodeLabel::RootRoad));

    let mut edges: Vec<Edge> = LaneId::ALL
        .iter()
        .map(|&l| Edge::new(lane_node_id(l), ROOT_ID, Relation::IsIn))
        .collect();

    let ego = Pose::ego();
    for det in detections {
        let id = detection_node_id(det.instance_id);
        if nodes.contains_key(&id) {
            return Err(Error::schema(format!(
                "frame {frame_id}: duplicate instance_id {}",
                det.instance_id
            )));
        }
        if !(det.depth >= 0.0 && det.depth.is_finite()) {
            return Err(Error::schema(format!(
                "frame {frame_id}: instance {} has invalid depth {}",
                det.instance_id, det.depth
            )));
        }
        let pos = pixel_to_ego(&det.bbox, cfg)?;
        // An object centred on the ego origin has no bearing; it sits dead ahead.
        let dir = match relative_angle(&ego, &pos) {
            Ok(theta) => classify_direction(theta, cfg.alpha),
            Err(Error::DegenerateGeometry(_)) => DirRelation::InFrontOf,
            Err(e) => return Err(e),
        };
        edges.push(Edge::new(EGO_ID, id.clone(), Relation::Dir(dir)));
        if let Some(prox) = classify_proximity(det.depth)? {
            edges.push(Edge::new(EGO_ID, id.clone(), Relation::Prox(prox)));
        }
        let lane = assign_lane(pos.x, cfg.lane_half_width);
        edges.push(Edge::new(id.clone(), lane_node_id(lane), Relation::IsIn));
        nodes.insert(
            id,
            Node {
                label: NodeLabel::WorkZone(det.category),
                position: Some(pos),
                bbox: Some(det.bbox),
                depth: Some(det.depth),
                appearance: det.appearance.clone(),
            },
        );
    }
    edges.sort();

    Ok(SceneGraph {
        frame_id: frame_id.to_owned(),
        image_center: cfg.center,
        nodes,
        edges,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub subject: String,
    pub rule: String,
}

impl Violation {
    fn new(subject: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.rule)
    }
}

/// Checks every structural invariant of a scene graph. An empty list means
/// the graph is well formed.
pub fn validate(graph: &SceneGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let count = |pred: &dyn Fn(&NodeLabel) -> bool| graph.nodes.values().filter(|n| pred(&n.label)).count();

    match count(&|l| *l == NodeLabel::Ego) {
        1 => {}
        0 => out.push(Violation::new("graph", "missing ego node")),
        _ => out.push(Violation::new("graph", "multiple ego nodes")),
    }
    for lane in LaneId::ALL {
        let n = count(&|l| *l == NodeLabel::Lane(lane));
        if n != 1 {
            out.push(Violation::new("graph", format!("expected one {lane} node, found {n}")));
        }
    }
    let roots = count(&|l| *l == NodeLabel::RootRoad);
    if roots != 1 {
        out.push(Violation::new(
            "graph",
            format!("expected one RootRoad node, found {roots}"),
        ));
    }

    let label_of = |id: &str| graph.nodes.get(id).map(|n| n.label);
    let mut seen = BTreeSet::new();
    for e in &graph.edges {
        let subject = format!("edge ({}, {}, {})", e.src, e.dst, e.relation);
        if !seen.insert(e) {
            out.push(Violation::new(subject.clone(), "duplicate edge"));
        }
        if e.src == e.dst {
            out.push(Violation::new(subject.clone(), "self loop"));
        }
        let (Some(src), Some(dst)) = (label_of(&e.src), label_of(&e.dst)) else {
            out.push(Violation::new(subject, "endpoint not in node set"));
            continue;
        };
        let ok = match e.relation.family() {
            RelationFamily::Direction | RelationFamily::Proximity => src == NodeLabel::Ego && dst.is_work_zone(),
            RelationFamily::Lane => {
                (src.is_work_zone() && matches!(dst, NodeLabel::Lane(_)))
                    || (matches!(src, NodeLabel::Lane(_)) && dst == NodeLabel::RootRoad)
            }
        };
        if !ok {
            out.push(Violation::new(
                subject,
                format!("relation family does not match endpoints {src} -> {dst}"),
            ));
        }
    }

    for (id, node) in &graph.nodes {
        match node.label {
            NodeLabel::WorkZone(_) => {
                let incoming = |fam: RelationFamily| {
                    graph
                        .edges
                        .iter()
                        .filter(|e| e.dst == *id && e.relation.family() == fam)
                        .count()
                };
                let dir = incoming(RelationFamily::Direction);
                if dir != 1 {
                    out.push(Violation::new(
                        id.clone(),
                        format!("expected exactly one direction edge, found {dir}"),
                    ));
                }
                let prox = incoming(RelationFamily::Proximity);
                if prox > 1 {
                    out.push(Violation::new(
                        id.clone(),
                        format!("expected at most one proximity edge, found {prox}"),
                    ));
                }
                let lane_edges = graph
                    .edges
                    .iter()
                    .filter(|e| {
                        e.src == *id
                            && e.relation == Relation::IsIn
                            && matches!(label_of(&e.dst), Some(NodeLabel::Lane(_)))
                    })
                    .count();
                if lane_edges != 1 {
                    out.push(Violation::new(
                        id.clone(),
                        format!("expected exactly one isIn edge to a lane, found {lane_edges}"),
                    ));
                }
            }
            NodeLabel::Lane(_) => {
                let to_root = graph.edges.iter().any(|e| {
                    e.src == *id && e.relation == Relation::IsIn && label_of(&e.dst) == Some(NodeLabel::RootRoad)
                });
                if !to_root {
                    out.push(Violation::new(id.clone(), "lane lacks isIn edge to RootRoad"));
                }
            }
            NodeLabel::Ego | NodeLabel::RootRoad => {}
        }
    }
    out
}

/// Detections grouped by frame, as read from a detection stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionSet {
    pub appearance_dim: Option<usize>,
    pub frames: BTreeMap<String, Vec<Detection>>,
}

#[derive(Serialize, Deserialize)]
struct DetectionHeader {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    appearance_dim: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    frame_id: String,
    #[serde(flatten)]
    detection: Detection,
}

const DETECTIONS_FORMAT: &str = "detections";
const DETECTIONS_VERSION: u32 = 1;

/// Reads newline-delimited detection records. An optional first line may be a
/// header declaring the appearance-vector dimensionality.
pub fn read_detections(text: &str) -> Result<DetectionSet> {
    let mut set = DetectionSet::default();
    let mut offset = 0;
    for (lineno, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len();
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            offset: start + e.column().saturating_sub(1),
            message: format!("line {}: {e}", lineno + 1),
        })?;
        if value.get("format").is_some() {
            if lineno != 0 || !set.frames.is_empty() {
                return Err(Error::schema(format!("line {}: header must come first", lineno + 1)));
            }
            let header: DetectionHeader =
                serde_json::from_value(value).map_err(|e| Error::schema(format!("line {}: {e}", lineno + 1)))?;
            if header.format != DETECTIONS_FORMAT {
                return Err(Error::schema(format!("unexpected format {:?}", header.format)));
            }
            if header.version != DETECTIONS_VERSION {
                return Err(Error::Version {
                    found: header.version,
                    expected: DETECTIONS_VERSION,
                });
            }
            set.appearance_dim = header.appearance_dim;
            continue;
        }
        let rec: DetectionRecord =
            serde_json::from_value(value).map_err(|e| Error::schema(format!("line {}: {e}", lineno + 1)))?;
        if let (Some(dim), Some(app)) = (set.appearance_dim, &rec.detection.appearance) {
            if app.len() != dim {
                return Err(Error::schema(format!(
                    "line {}: appearance has {} dims, header declares {dim}",
                    lineno + 1,
                    app.len()
                )));
            }
        }
        let frame = set.frames.entry(rec.frame_id).or_default();
        if frame.iter().any(|d| d.instance_id == rec.detection.instance_id) {
            return Err(Error::schema(format!(
                "line {}: duplicate instance_id {}",
                lineno + 1,
                rec.detection.instance_id
            )));
        }
        frame.push(rec.detection);
    }
    Ok(set)
}

pub fn write_detections(set: &DetectionSet) -> String {
    let mut out = String::new();
    let header = DetectionHeader {
        format: DETECTIONS_FORMAT.into(),
        version: DETECTIONS_VERSION,
        appearance_dim: set.appearance_dim,
    };
    out.push_str(&serde_json::to_string(&header).unwrap());
    out.push('\n');
    for (frame_id, dets) in &set.frames {
        for d in dets {
            let rec = DetectionRecord {
                frame_id: frame_id.clone(),
                detection: d.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).unwrap());
            out.push('\n');
        }
    }
    out
}
