//! Constraint sets, verified failure cases and the persistent case store.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::geometry::PixelPoint;
use crate::mining::CandidateSubgraph;

/// Slot names of the constraint template, in template order.
pub const SLOT_NAMES: [&str; 8] = [
    "no_cross_workzone",
    "detour_side",
    "return_to_original_lane_after_workzone",
    "follow_lane_center",
    "turn_to_avoid_work_zone",
    "return_center_line_after_crossing",
    "follow_sign",
    "follow_front_car",
];

pub const UNKNOWN: &str = "UNKNOWN";

/// Raw slot values as produced by the adapter.
pub type SlotMap = BTreeMap<String, String>;

/// Whether the vehicle may drive through the work zone. Serialized under the
/// `no_cross_workzone` slot where `"no"` means bypass and `"yes"` means cross.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Passage {
    #[serde(rename = "no")]
    Bypass,
    #[serde(rename = "yes")]
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetourSide {
    Left,
    Right,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConstraintSet {
    #[serde(rename = "no_cross_workzone")]
    pub passage: Passage,
    pub detour_side: DetourSide,
    pub return_to_original_lane_after_workzone: bool,
    pub follow_lane_center: bool,
    pub turn_to_avoid_work_zone: bool,
    pub return_center_line_after_crossing: bool,
    pub follow_sign: bool,
    pub follow_front_car: bool,
}

impl ConstraintSet {
    /// Everything off: bypass allowed, no detour, no extra rules.
    pub fn permissive() -> Self {
        Self {
            passage: Passage::Bypass,
            detour_side: DetourSide::None,
            return_to_original_lane_after_workzone: false,
            follow_lane_center: false,
            turn_to_avoid_work_zone: false,
            return_center_line_after_crossing: false,
            follow_sign: false,
            follow_front_car: false,
        }
    }

    /// Names of the cross-slot rules this set breaks.
    pub fn violated_rules(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.detour_side != DetourSide::None && self.passage == Passage::Cross {
            out.push("detour_side requires no_cross_workzone = no");
        }
        if self.turn_to_avoid_work_zone && self.passage == Passage::Cross {
            out.push("turn_to_avoid_work_zone excludes crossing the work zone");
        }
        out
    }

    /// Active rules in the vocabulary used by [`PatternTag::rules`].
    pub fn active_rules(&self) -> BTreeSet<Rule> {
        let mut r = BTreeSet::new();
        if self.passage == Passage::Cross {
            r.insert(Rule::CrossWorkZone);
        }
        if self.detour_side != DetourSide::None {
            r.insert(Rule::Detour);
        }
        let flags = [
            (self.return_to_original_lane_after_workzone, Rule::ReturnToOriginalLane),
            (self.follow_lane_center, Rule::FollowLaneCenter),
            (self.turn_to_avoid_work_zone, Rule::TurnToAvoid),
            (self.return_center_line_after_crossing, Rule::ReturnCenterLine),
            (self.follow_sign, Rule::FollowSign),
            (self.follow_front_car, Rule::FollowFrontCar),
        ];
        r.extend(flags.into_iter().filter(|(on, _)| *on).map(|(_, rule)| rule));
        r
    }

    pub fn to_slot_map(&self) -> SlotMap {
        let value = serde_json::to_value(self).expect("constraints serialize");
        value
            .as_object()
            .unwrap()
            .iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::String(s) => s.clone(),
                    serde_json::Value::Bool(b) => if *b { "True" } else { "False" }.to_owned(),
                    other => other.to_string(),
                };
                (k.clone(), s)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConstraintError {
    #[error("incomplete constraints: unresolved slots {0:?}")]
    Incomplete(Vec<String>),
    #[error("inconsistent constraints: {0:?}")]
    Inconsistent(Vec<String>),
    #[error("slot {slot} has invalid value {value:?}")]
    InvalidValue { slot: String, value: String },
}

fn parse_bool(slot: &str, v: &str) -> Result<bool, ConstraintError> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" => Ok(true),
        "false" | "no" => Ok(false),
        _ => Err(ConstraintError::InvalidValue {
            slot: slot.to_owned(),
            value: v.to_owned(),
        }),
    }
}

/// Resolves a slot map into a complete, consistent constraint set.
pub fn resolve_constraints(slots: &SlotMap) -> Result<ConstraintSet, ConstraintError> {
    let unresolved: Vec<String> = SLOT_NAMES
        .iter()
        .filter(|s| {
            slots
                .get(**s)
                .is_none_or(|v| v.trim().eq_ignore_ascii_case(UNKNOWN) || v.trim().is_empty())
        })
        .map(|s| (*s).to_owned())
        .collect();
    if !unresolved.is_empty() {
        return Err(ConstraintError::Incomplete(unresolved));
    }
    let get = |s: &str| slots[s].as_str();
    let passage = match get("no_cross_workzone").trim().to_ascii_lowercase().as_str() {
        "no" | "false" => Passage::Bypass,
        "yes" | "true" => Passage::Cross,
        _ => {
            return Err(ConstraintError::InvalidValue {
                slot: "no_cross_workzone".into(),
                value: get("no_cross_workzone").into(),
            })
        }
    };
    let detour_side = match get("detour_side").trim().to_ascii_lowercase().as_str() {
        "left" => DetourSide::Left,
        "right" => DetourSide::Right,
        "none" => DetourSide::None,
        _ => {
            return Err(ConstraintError::InvalidValue {
                slot: "detour_side".into(),
                value: get("detour_side").into(),
            })
        }
    };
    let flag = |s: &str| parse_bool(s, get(s));
    let set = ConstraintSet {
        passage,
        detour_side,
        return_to_original_lane_after_workzone: flag("return_to_original_lane_after_workzone")?,
        follow_lane_center: flag("follow_lane_center")?,
        turn_to_avoid_work_zone: flag("turn_to_avoid_work_zone")?,
        return_center_line_after_crossing: flag("return_center_line_after_crossing")?,
        follow_sign: flag("follow_sign")?,
        follow_front_car: flag("follow_front_car")?,
    };
    let broken = set.violated_rules();
    if !broken.is_empty() {
        return Err(ConstraintError::Inconsistent(
            broken.into_iter().map(str::to_owned).collect(),
        ));
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    CrossWorkZone,
    Detour,
    ReturnToOriginalLane,
    FollowLaneCenter,
    TurnToAvoid,
    ReturnCenterLine,
    FollowSign,
    FollowFrontCar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PatternTag {
    P1,
    P2,
    P3,
    P4,
    P5,
    P6,
    P7,
    P8,
}

impl PatternTag {
    pub const ALL: [PatternTag; 8] = [
        PatternTag::P1,
        PatternTag::P2,
        PatternTag::P3,
        PatternTag::P4,
        PatternTag::P5,
        PatternTag::P6,
        PatternTag::P7,
        PatternTag::P8,
    ];

    pub fn title(&self) -> &'static str {
        match self {
            PatternTag::P1 => "dense drums or cones on sidewalk",
            PatternTag::P2 => "dead-end road",
            PatternTag::P3 => "large work vehicle interference",
            PatternTag::P4 => "lane borrowing through work zone",
            PatternTag::P5 => "lane shift across work zone",
            PatternTag::P6 => "overreaction to signs",
            PatternTag::P7 => "exit inside work zone",
            PatternTag::P8 => "turning through work zone",
        }
    }

    /// Rules a mitigation for this pattern has to follow.
    pub fn rules(&self) -> BTreeSet<Rule> {
        use Rule::*;
        let r: &[Rule] = match self {
            PatternTag::P1 => &[FollowLaneCenter],
            PatternTag::P2 => &[TurnToAvoid],
            PatternTag::P3 => &[FollowLaneCenter, Detour],
            PatternTag::P4 => &[ReturnToOriginalLane, Detour],
            PatternTag::P5 => &[CrossWorkZone, ReturnCenterLine],
            PatternTag::P6 => &[FollowSign, ReturnCenterLine],
            PatternTag::P7 => &[FollowFrontCar, FollowLaneCenter],
            PatternTag::P8 => &[CrossWorkZone, FollowLaneCenter],
        };
        r.iter().copied().collect()
    }

    /// The pattern whose rule set equals the active rules of `c`, if any.
    pub fn infer(c: &ConstraintSet) -> Option<PatternTag> {
        let active = c.active_rules();
        PatternTag::ALL.into_iter().find(|p| p.rules() == active)
    }
}

impl fmt::Display for PatternTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for PatternTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PatternTag::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| Error::schema(format!("unknown pattern tag {s:?}")))
    }
}

/// Declarative planner parameters stored with a case and interpreted by the
/// native planner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MitigationConfig {
    /// Pixels added around every work-zone box before it is blocked.
    pub inflation_margin: f64,
    /// Boxes closer than this horizontally form one work-zone cluster.
    pub cluster_gap: f64,
    /// Distance kept behind a followed vehicle, pixels.
    pub follow_gap: f64,
    /// Offset applied to the planned destination.
    pub destination_offset: PixelPoint,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        Self {
            inflation_margin: 5.0,
            cluster_gap: 20.0,
            follow_gap: 20.0,
            destination_offset: PixelPoint::new(0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub passed: bool,
    pub attempts: usize,
    pub drivability_passed: bool,
    pub clearance: f64,
    pub tau_road: f64,
    pub destination_passed: bool,
    pub d_pix: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRef {
    pub frame_id: String,
    pub detections_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub pattern_tag: PatternTag,
    pub scene: SceneRef,
    pub sequence_id: String,
    pub frame_index: u32,
    pub prototype: CandidateSubgraph,
    pub constraints: ConstraintSet,
    pub mitigation: MitigationConfig,
    pub appearance: Vec<f64>,
    pub verification: VerificationRecord,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub const DB_FORMAT: &str = "workzone-casedb";
pub const DB_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DbHeader {
    format: String,
    version: u32,
    appearance_dim: usize,
    count: usize,
}

/// In-memory case store with pattern, sequence and appearance lookups.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseDatabase {
    appearance_dim: usize,
    records: BTreeMap<String, CaseRecord>,
    by_pattern: BTreeMap<PatternTag, BTreeSet<String>>,
    by_sequence: BTreeMap<String, BTreeSet<(u32, String)>>,
}

impl CaseDatabase {
    pub fn new(appearance_dim: usize) -> Self {
        Self {
            appearance_dim,
            records: BTreeMap::new(),
            by_pattern: BTreeMap::new(),
            by_sequence: BTreeMap::new(),
        }
    }

    pub fn appearance_dim(&self) -> usize {
        self.appearance_dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, case_id: &str) -> Option<&CaseRecord> {
        self.records.get(case_id)
    }

    /// Records in case-id order.
    pub fn records(&self) -> impl Iterator<Item = &CaseRecord> {
        self.records.values()
    }

    pub fn add_case(&mut self, record: CaseRecord) -> Result<String> {
        if !record.verification.passed {
            return Err(Error::Rejected(format!(
                "case {} has not passed verification",
                record.case_id
            )));
        }
        if record.appearance.len() != self.appearance_dim {
            return Err(Error::schema(format!(
                "case {} appearance has {} dims, database expects {}",
                record.case_id,
                record.appearance.len(),
                self.appearance_dim
            )));
        }
        if self.records.contains_key(&record.case_id) {
            return Err(Error::Conflict(format!("duplicate case_id {}", record.case_id)));
        }
        let id = record.case_id.clone();
        self.by_pattern
            .entry(record.pattern_tag)
            .or_default()
            .insert(id.clone());
        self.by_sequence
            .entry(record.sequence_id.clone())
            .or_default()
            .insert((record.frame_index, id.clone()));
        self.records.insert(id.clone(), record);
        Ok(id)
    }

    pub fn by_pattern(&self, tag: PatternTag) -> Vec<&CaseRecord> {
        self.by_pattern
            .get(&tag)
            .into_iter()
            .flatten()
            .map(|id| &self.records[id])
            .collect()
    }

    /// Cases of a sequence ordered by frame index.
    pub fn by_sequence(&self, sequence_id: &str) -> Vec<&CaseRecord> {
        self.by_sequence
            .get(sequence_id)
            .into_iter()
            .flatten()
            .map(|(_, id)| &self.records[id])
            .collect()
    }

    /// Exact cosine scan; ties broken by case id.
    pub fn nearest(&self, query: &[f64], k: usize) -> Vec<(&CaseRecord, f64)> {
        let mut scored: Vec<(&CaseRecord, f64)> = self
            .records
            .values()
            .map(|r| (r, cosine(query, &r.appearance)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.case_id.cmp(&b.0.case_id)));
        scored.truncate(k);
        scored
    }

    pub fn to_canonical_string(&self) -> String {
        let header = DbHeader {
            format: DB_FORMAT.into(),
            version: DB_VERSION,
            appearance_dim: self.appearance_dim,
            count: self.records.len(),
        };
        let mut out = serde_json::to_string(&header).unwrap();
        out.push('\n');
        for r in self.records.values() {
            out.push_str(&serde_json::to_string(r).expect("case record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_canonical_str(text: &str) -> Result<Self> {
        let mut lines = text.split_inclusive('\n');
        let first = lines.next().ok_or(Error::Parse {
            offset: 0,
            message: "empty database file".into(),
        })?;
        let header: DbHeader = serde_json::from_str(first.trim_end()).map_err(|e| Error::Parse {
            offset: e.column().saturating_sub(1),
            message: format!("header: {e}"),
        })?;
        if header.format != DB_FORMAT {
            return Err(Error::Parse {
                offset: 0,
                message: format!("unexpected format {:?}", header.format),
            });
        }
        if header.version != DB_VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: DB_VERSION,
            });
        }
        let mut db = CaseDatabase::new(header.appearance_dim);
        let mut offset = first.len();
        for line in lines {
            let start = offset;
            offset += line.len();
            if line.trim().is_empty() {
                continue;
            }
            if !line.ends_with('\n') {
                return Err(Error::Parse {
                    offset: text.len(),
                    message: "unterminated record (truncated file?)".into(),
                });
            }
            let rec: CaseRecord = serde_json::from_str(line.trim_end()).map_err(|e| Error::Parse {
                offset: start + e.column().saturating_sub(1),
                message: e.to_string(),
            })?;
            db.add_case(rec)?;
        }
        if db.len() != header.count {
            return Err(Error::Parse {
                offset: text.len(),
                message: format!("header declares {} records, found {}", header.count, db.len()),
            });
        }
        Ok(db)
    }

    /// Writes via a temporary file and rename so readers never see a partial
    /// database.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_canonical_string()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_canonical_str(&text)
    }
}
