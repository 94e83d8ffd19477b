//! Open-loop trajectory metrics and failure classification.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, PixelPoint};
use crate::planner::resample;

/// Case failure needs ADE strictly above this ...
pub const CASE_ADE_LIMIT: f64 = 50.0;
/// ... and FDE strictly above this.
pub const CASE_FDE_LIMIT: f64 = 100.0;
/// A scenario fails when strictly more than this fraction of its cases fail.
pub const SCENARIO_FAIL_FRACTION: f64 = 0.5;
pub const DEFAULT_COLLISION_MARGIN: f64 = 5.0;

/// Brings `gt` to the length of `pred` by arc-length resampling.
fn aligned(pred: &[PixelPoint], gt: &[PixelPoint]) -> Result<Vec<PixelPoint>> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    if pred.len() == gt.len() {
        return Ok(gt.to_vec());
    }
    if pred.len() < 2 {
        return Err(Error::invalid(format!(
            "cannot align {} ground-truth points to {} predicted points",
            gt.len(),
            pred.len()
        )));
    }
    Ok(resample(gt, pred.len()))
}

pub fn ade(pred: &[PixelPoint], gt: &[PixelPoint]) -> Result<f64> {
    let gt = aligned(pred, gt)?;
    let total: f64 = pred.iter().zip(&gt).map(|(p, g)| p.distance(g)).sum();
    Ok(total / pred.len() as f64)
}

pub fn fde(pred: &[PixelPoint], gt: &[PixelPoint]) -> Result<f64> {
    match (pred.last(), gt.last()) {
        (Some(p), Some(g)) => Ok(p.distance(g)),
        _ => Err(Error::invalid("empty trajectory")),
    }
}

/// Whether any point lies strictly inside an obstacle inflated by `margin`.
pub fn collision(traj: &[PixelPoint], obstacles: &[BBox], margin: f64) -> bool {
    obstacles.iter().any(|b| {
        let b = b.inflate(margin);
        traj.iter().any(|p| b.contains_strict(*p))
    })
}

pub fn cr(collisions: &[bool]) -> Result<f64> {
    if collisions.is_empty() {
        return Err(Error::invalid("collision rate of an empty set"));
    }
    Ok(collisions.iter().filter(|c| **c).count() as f64 / collisions.len() as f64)
}

pub fn classify_case_failure(ade: f64, fde: f64) -> bool {
    ade > CASE_ADE_LIMIT && fde > CASE_FDE_LIMIT
}

pub fn classify_scenario_failure(case_flags: &[bool]) -> Result<bool> {
    if case_flags.is_empty() {
        return Err(Error::invalid("scenario without cases"));
    }
    let failed = case_flags.iter().filter(|f| **f).count() as f64;
    Ok(failed / case_flags.len() as f64 > SCENARIO_FAIL_FRACTION)
}

/// One evaluated prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub case_id: String,
    #[serde(default)]
    pub pattern: Option<String>,
    /// Scenario the case belongs to; defaults to the case itself.
    #[serde(default)]
    pub scenario: Option<String>,
    pub predicted: Vec<PixelPoint>,
    pub ground_truth: Vec<PixelPoint>,
    #[serde(default)]
    pub obstacles: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub pattern: Option<String>,
    pub scenario: String,
    pub ade: f64,
    pub fde: f64,
    pub collided: bool,
    pub case_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub ade: f64,
    pub fde: f64,
    pub cr: f64,
    pub case_failure_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub collision_margin: f64,
    pub cases: Vec<CaseMetrics>,
    pub overall: Aggregate,
    pub by_pattern: BTreeMap<String, Aggregate>,
    pub scenario_failure: BTreeMap<String, bool>,
}

fn aggregate(rows: &[&CaseMetrics]) -> Result<Aggregate> {
    let n = rows.len() as f64;
    let collisions: Vec<bool> = rows.iter().map(|r| r.collided).collect();
    Ok(Aggregate {
        count: rows.len(),
        ade: rows.iter().map(|r| r.ade).sum::<f64>() / n,
        fde: rows.iter().map(|r| r.fde).sum::<f64>() / n,
        cr: cr(&collisions)?,
        case_failure_rate: rows.iter().filter(|r| r.case_failure).count() as f64 / n,
    })
}

pub fn evaluate(cases: &[EvalCase], collision_margin: f64) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::invalid("no cases to evaluate"));
    }
    let rows = cases
        .iter()
        .map(|c| {
            let a = ade(&c.predicted, &c.ground_truth)?;
            let f = fde(&c.predicted, &c.ground_truth)?;
            Ok(CaseMetrics {
                case_id: c.case_id.clone(),
                pattern: c.pattern.clone(),
                scenario: c.scenario.clone().unwrap_or_else(|| c.case_id.clone()),
                ade: a,
                fde: f,
                collided: collision(&c.predicted, &c.obstacles, collision_margin),
                case_failure: classify_case_failure(a, f),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let all: Vec<&CaseMetrics> = rows.iter().collect();
    let mut patterns: BTreeMap<String, Vec<&CaseMetrics>> = BTreeMap::new();
    let mut scenarios: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for r in &rows {
        if let Some(p) = &r.pattern {
            patterns.entry(p.clone()).or_default().push(r);
        }
        scenarios.entry(r.scenario.clone()).or_default().push(r.case_failure);
    }
    Ok(MetricsReport {
        collision_margin,
        overall: aggregate(&all)?,
        by_pattern: patterns
            .into_iter()
            .map(|(k, v)| Ok((k, aggregate(&v)?)))
            .collect::<Result<_>>()?,
        scenario_failure: scenarios
            .into_iter()
            .map(|(k, v)| Ok((k, classify_scenario_failure(&v)?)))
            .collect::<Result<_>>()?,
        cases: rows,
    })
}

impl MetricsReport {
    /// Tab-separated table: per-case rows, then per-pattern and overall rows.
    pub fn to_table(&self) -> String {
        let mut out = String::from("kind\tid\tpattern\tade\tfde\tcollided_or_cr\tfailure\n");
        for c in &self.cases {
            let _ = writeln!(
                out,
                "case\t{}\t{}\t{:.4}\t{:.4}\t{}\t{}",
                c.case_id,
                c.pattern.as_deref().unwrap_or("-"),
                c.ade,
                c.fde,
                c.collided,
                c.case_failure
            );
        }
        for (p, a) in &self.by_pattern {
            let _ = writeln!(
                out,
                "pattern\t{p}\t{p}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                a.ade, a.fde, a.cr, a.case_failure_rate
            );
        }
        let a = &self.overall;
        let _ = writeln!(
            out,
            "overall\tall\t-\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            a.ade, a.fde, a.cr, a.case_failure_rate
        );
        out
    }
}
