//! Top-K case retrieval with temporal-prefix priority and the triplet
//! similarity gate that decides whether a stored mitigation is reused.

use std::collections::BTreeSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::casedb::{cosine, CaseDatabase};
use crate::mining::CandidateSubgraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalParams {
    pub top_k: usize,
    /// Minimum over the three similarities for a case to count as a match.
    pub threshold: f64,
    /// Depth difference at which depth similarity reaches zero, meters.
    pub depth_scale: f64,
    /// Radius difference at which box similarity reaches zero, pixels.
    pub bbox_scale: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            top_k: 5,
            threshold: 0.8,
            depth_scale: 3.5,
            bbox_scale: 960.0,
        }
    }
}

impl RetrievalParams {
    /// Box scale tied to the frame size, `max(width, height)`.
    pub fn with_frame(mut self, width: f64, height: f64) -> Self {
        self.bbox_scale = width.max(height);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletSim {
    pub structure: f64,
    pub depth: f64,
    pub bbox: f64,
}

impl TripletSim {
    pub fn min(&self) -> f64 {
        self.structure.min(self.depth).min(self.bbox)
    }
}

/// Jaccard index of two sets; two empty sets are identical.
pub fn jaccard<T: Ord + Hash>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub fn triplet_similarity(a: &CandidateSubgraph, b: &CandidateSubgraph, p: &RetrievalParams) -> TripletSim {
    let la: BTreeSet<_> = a.labels().collect();
    let lb: BTreeSet<_> = b.labels().collect();
    let ra: BTreeSet<_> = a.relations().collect();
    let rb: BTreeSet<_> = b.relations().collect();
    TripletSim {
        structure: 0.5 * (jaccard(&la, &lb) + jaccard(&ra, &rb)),
        depth: (1.0 - (a.mean_depth - b.mean_depth).abs() / p.depth_scale).max(0.0),
        bbox: (1.0 - (a.mean_radius - b.mean_radius).abs() / p.bbox_scale).max(0.0),
    }
}

pub fn is_non_independent(s: &TripletSim, threshold: f64) -> bool {
    s.min() >= threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub frame_id: String,
    pub sequence_id: String,
    pub frame_index: u32,
    pub prototype: CandidateSubgraph,
    pub appearance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedCase {
    pub case_id: String,
    /// 1 for earlier frames of the query's sequence, 2 otherwise.
    pub tier: u8,
    pub appearance_score: f64,
    pub similarity: TripletSim,
    pub non_independent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_frame: String,
    pub entries: Vec<RetrievedCase>,
}

pub fn retrieve_topk(query: &Query, db: &CaseDatabase, p: &RetrievalParams) -> RetrievalResult {
    let mut scored: Vec<(u8, f64, &str)> = db
        .records()
        .map(|r| {
            let tier = if r.sequence_id == query.sequence_id && r.frame_index < query.frame_index {
                1
            } else {
                2
            };
            (tier, cosine(&query.appearance, &r.appearance), r.case_id.as_str())
        })
        .collect();
    scored.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(b.2)));
    scored.truncate(p.top_k);

    let entries = scored
        .into_iter()
        .map(|(tier, score, id)| {
            let record = db.get(id).expect("scored ids come from the database");
            let similarity = triplet_similarity(&query.prototype, &record.prototype, p);
            RetrievedCase {
                case_id: id.to_owned(),
                tier,
                appearance_score: score,
                non_independent: is_non_independent(&similarity, p.threshold),
                similarity,
            }
        })
        .collect();
    RetrievalResult {
        query_frame: query.frame_id.clone(),
        entries,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "decision", content = "case_id")]
pub enum Dispatch {
    UseCase(String),
    FallbackVlm,
}

/// Reuses the top case only when it is non-independent of the query.
pub fn dispatch(result: &RetrievalResult) -> Dispatch {
    match result.entries.first() {
        Some(top) if top.non_independent => Dispatch::UseCase(top.case_id.clone()),
        _ => Dispatch::FallbackVlm,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub params: RetrievalParams,
    pub result: RetrievalResult,
    pub decision: Dispatch,
}
