//! Constraint-parameterized mitigation planning in image space.
//!
//! A plan is produced in four steps: the road mask is cut according to the
//! constraint set, a destination is chosen on what remains, a smoothed grid
//! path joins start and destination, and the result is verified against the
//! distance field of the cut mask (and, when available, a reference
//! destination).

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::casedb::{ConstraintSet, DetourSide, MitigationConfig, Passage, VerificationRecord};
use crate::error::{Error, Result};
use crate::geometry::{BBox, PixelPoint};
use crate::scene_graph::{Category, Detection};

pub const TRAJECTORY_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum PlanError {
    #[error("no drivable space left after segmentation")]
    NoDrivableSpace,
    #[error("start point ({0}, {1}) is not drivable")]
    StartNotDrivable(i64, i64),
    #[error("infeasible destination: {0}")]
    InfeasibleDestination(String),
    #[error("no path between start and destination")]
    NoPath,
}

/// Binary drivable mask, row-major, `true` = drivable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoadMask {
    width: usize,
    height: usize,
    cells: Vec<bool>,
}

impl RoadMask {
    pub fn filled(width: usize, height: usize, drivable: bool) -> Self {
        Self {
            width,
            height,
            cells: vec![drivable; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> bool {
        self.cells[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, drivable: bool) {
        self.cells[row * self.width + col] = drivable;
    }

    /// Looks up a signed cell; outside the raster is never drivable.
    #[inline]
    pub fn get_signed(&self, col: i64, row: i64) -> bool {
        col >= 0
            && row >= 0
            && (col as usize) < self.width
            && (row as usize) < self.height
            && self.get(col as usize, row as usize)
    }

    pub fn drivable_count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn fill_rect(&mut self, cols: std::ops::Range<usize>, rows: std::ops::Range<usize>, drivable: bool) {
        for r in rows.start..rows.end.min(self.height) {
            for c in cols.start..cols.end.min(self.width) {
                self.set(c, r, drivable);
            }
        }
    }

    /// The cell a continuous point falls in.
    pub fn cell_of(p: PixelPoint) -> (i64, i64) {
        (p.x.round() as i64, p.y.round() as i64)
    }

    pub fn is_drivable_point(&self, p: PixelPoint) -> bool {
        let (c, r) = Self::cell_of(p);
        self.get_signed(c, r)
    }

    /// Blocks every cell whose unit square meets the open interior of `b`.
    pub fn block_box(&mut self, b: &BBox) {
        let c0 = ((b.x - 0.5).floor() as i64 + 1).max(0);
        let c1 = ((b.right() + 0.5).ceil() as i64 - 1).min(self.width as i64 - 1);
        let r0 = ((b.y - 0.5).floor() as i64 + 1).max(0);
        let r1 = ((b.bottom() + 0.5).ceil() as i64 - 1).min(self.height as i64 - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                self.set(c as usize, r as usize, false);
            }
        }
    }

    /// Parses a binary (P5) or ASCII (P2) graymap. Values above half of the
    /// maximum are drivable.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = |bytes: &[u8]| -> Result<(String, usize)> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Parse {
                    offset: start,
                    message: "unexpected end of graymap header".into(),
                });
            }
            Ok((String::from_utf8_lossy(&bytes[start..pos]).into_owned(), start))
        };
        let (magic, _) = token(bytes)?;
        let mut number = |bytes: &[u8]| -> Result<usize> {
            let (t, at) = token(bytes)?;
            t.parse().map_err(|_| Error::Parse {
                offset: at,
                message: format!("expected a number, found {t:?}"),
            })
        };
        let width = number(bytes)?;
        let height = number(bytes)?;
        let maxval = number(bytes)?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
            return Err(Error::invalid(format!(
                "unsupported graymap {width}x{height} maxval {maxval}"
            )));
        }
        let threshold = maxval / 2;
        let cells: Vec<bool> = match magic.as_str() {
            "P5" => {
                let data_start = pos + 1;
                let data = bytes.get(data_start..data_start + width * height).ok_or(Error::Parse {
                    offset: bytes.len(),
                    message: "graymap raster is truncated".into(),
                })?;
                data.iter().map(|&v| v as usize > threshold).collect()
            }
            "P2" => (0..width * height)
                .map(|_| number(bytes).map(|v| v > threshold))
                .collect::<Result<_>>()?,
            other => {
                return Err(Error::Parse {
                    offset: 0,
                    message: format!("unsupported graymap magic {other:?}"),
                })
            }
        };
        Ok(Self { width, height, cells })
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.cells.iter().map(|&c| if c { 255u8 } else { 0 }));
        out
    }
}

/// Per-cell Euclidean distance to the nearest drivable cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DistanceField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Distance at the cell containing `p`. Points outside the raster are
    /// measured directly against the drivable cells of `mask`.
    pub fn at_point(&self, p: PixelPoint, mask: &RoadMask) -> f64 {
        let (c, r) = RoadMask::cell_of(p);
        if c >= 0 && r >= 0 && (c as usize) < self.width && (r as usize) < self.height {
            return self.get(c as usize, r as usize);
        }
        let mut best = f64::INFINITY;
        for row in 0..mask.height {
            for col in 0..mask.width {
                if mask.get(col, row) {
                    let d = ((col as i64 - c) as f64).hypot((row as i64 - r) as f64);
                    best = best.min(d);
                }
            }
        }
        best
    }
}

/// Lower envelope of parabolas rooted at the finite entries of `f`
/// (squared distances); writes squared distances into `out`.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    // z[k] is the left boundary of parabola v[k]; z[k + 1] its right one.
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let Some(&p) = v.last() else {
                z.push(f64::NEG_INFINITY);
                break;
            };
            let pf = p as f64;
            let s = ((fq + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf);
            // Drop the trailing +inf, compare against p's left boundary.
            z.pop();
            if s <= *z.last().unwrap() {
                v.pop();
            } else {
                z.push(s);
                break;
            }
        }
        v.push(q);
        z.push(f64::INFINITY);
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact Euclidean distance transform (separable lower-envelope method).
pub fn distance_transform(mask: &RoadMask) -> DistanceField {
    let (w, h) = (mask.width, mask.height);
    let mut sq = vec![f64::INFINITY; w * h];

    // Columns: squared distance to the nearest drivable cell in the same column.
    for c in 0..w {
        let mut last: Option<usize> = None;
        for r in 0..h {
            if mask.get(c, r) {
                last = Some(r);
            }
            if let Some(l) = last {
                let d = (r - l) as f64;
                sq[r * w + c] = d * d;
            }
        }
        last = None;
        for r in (0..h).rev() {
            if mask.get(c, r) {
                last = Some(r);
            }
            if let Some(l) = last {
                let d = (l - r) as f64;
                sq[r * w + c] = sq[r * w + c].min(d * d);
            }
        }
    }

    let mut row_in = vec![0.0; w];
    let mut row_out = vec![0.0; w];
    let (mut v, mut z) = (Vec::with_capacity(w), Vec::with_capacity(w + 1));
    for r in 0..h {
        row_in.copy_from_slice(&sq[r * w..(r + 1) * w]);
        edt_1d(&row_in, &mut row_out, &mut v, &mut z);
        sq[r * w..(r + 1) * w].copy_from_slice(&row_out);
    }
    DistanceField {
        width: w,
        height: h,
        values: sq.into_iter().map(f64::sqrt).collect(),
    }
}

/// Horizontally overlapping (or nearly touching) boxes, merged.
fn work_zone_clusters(boxes: &[BBox], gap: f64) -> Vec<BBox> {
    let mut sorted: Vec<BBox> = boxes.to_vec();
    sorted.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    let mut clusters: Vec<BBox> = Vec::new();
    for b in sorted {
        match clusters.last_mut() {
            Some(last) if b.x <= last.right() + gap => *last = last.union(&b),
            _ => clusters.push(b),
        }
    }
    clusters
}

/// Removes work-zone boxes from the drivable set and, for a detour, the
/// road on the far side of each work-zone cluster.
pub fn segment_drivable_mask(
    mask: &RoadMask,
    work_zone: &[Detection],
    constraints: &ConstraintSet,
    config: &MitigationConfig,
    start: PixelPoint,
) -> Result<RoadMask, PlanError> {
    let mut out = mask.clone();
    let inflated: Vec<BBox> = work_zone
        .iter()
        .map(|d| d.bbox.inflate(config.inflation_margin))
        .collect();
    for b in &inflated {
        out.block_box(b);
    }

    if constraints.passage == Passage::Bypass && constraints.detour_side != DetourSide::None {
        let lateral: Vec<BBox> = work_zone
            .iter()
            .zip(&inflated)
            .filter(|(d, _)| !(constraints.follow_sign && d.category == Category::TtcSign))
            .map(|(_, b)| *b)
            .collect();
        let far = mask.width() as f64 + 1.0;
        for cluster in work_zone_clusters(&lateral, config.cluster_gap) {
            let blocked = match constraints.detour_side {
                // Clusters entirely on the detour side of the ego do not force
                // anything.
                DetourSide::Left if cluster.right() > start.x => {
                    BBox::new(cluster.x, cluster.y, far - cluster.x, cluster.h)
                }
                DetourSide::Right if cluster.x < start.x => {
                    BBox::new(-1.0, cluster.y, cluster.right() + 1.0, cluster.h)
                }
                _ => continue,
            };
            out.block_box(&blocked);
        }
    }

    if out.drivable_count() == 0 {
        return Err(PlanError::NoDrivableSpace);
    }
    Ok(out)
}

const NEIGHBOURS: [(i64, i64); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Whether a move from `(c, r)` by `(dc, dr)` stays on the mask without
/// cutting a blocked corner.
#[inline]
fn can_step(mask: &RoadMask, c: i64, r: i64, dc: i64, dr: i64) -> bool {
    mask.get_signed(c + dc, r + dr)
        && (dc == 0 || dr == 0 || (mask.get_signed(c + dc, r) && mask.get_signed(c, r + dr)))
}

/// Cells reachable from `start` under the planner's move rules.
pub fn reachable_cells(mask: &RoadMask, start: (i64, i64)) -> Vec<bool> {
    let mut seen = vec![false; mask.width * mask.height];
    if !mask.get_signed(start.0, start.1) {
        return seen;
    }
    let idx = |c: i64, r: i64| r as usize * mask.width + c as usize;
    seen[idx(start.0, start.1)] = true;
    let mut queue = VecDeque::from([start]);
    while let Some((c, r)) = queue.pop_front() {
        for (dc, dr) in NEIGHBOURS {
            if can_step(mask, c, r, dc, dr) && !seen[idx(c + dc, r + dr)] {
                seen[idx(c + dc, r + dr)] = true;
                queue.push_back((c + dc, r + dr));
            }
        }
    }
    seen
}

fn nearest_in_row(cols: &[usize], target: f64) -> Option<usize> {
    cols.iter().copied().min_by(|a, b| {
        (*a as f64 - target)
            .abs()
            .total_cmp(&(*b as f64 - target).abs())
            .then(a.cmp(b))
    })
}

/// Maximal runs of consecutive columns.
fn runs(cols: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &c in cols {
        match out.last_mut() {
            Some((_, end)) if *end + 1 == c => *end = c,
            _ => out.push((c, c)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DestinationParams {
    /// Half lane width in pixels.
    pub lane_half_width_px: f64,
}

/// Chooses a destination on the segmented mask according to the constraint
/// set. The destination is always a drivable cell reachable from `start`.
pub fn plan_destination(
    mask: &RoadMask,
    work_zone: &[Detection],
    constraints: &ConstraintSet,
    config: &MitigationConfig,
    start: PixelPoint,
    lane_center: Option<f64>,
    params: &DestinationParams,
) -> Result<PixelPoint, PlanError> {
    let s = RoadMask::cell_of(start);
    if !mask.get_signed(s.0, s.1) {
        return Err(PlanError::StartNotDrivable(s.0, s.1));
    }
    let seen = reachable_cells(mask, s);
    let rows: Vec<Vec<usize>> = (0..mask.height)
        .map(|r| (0..mask.width).filter(|&c| seen[r * mask.width + c]).collect())
        .collect();
    let top_row = rows
        .iter()
        .position(|r| !r.is_empty())
        .expect("start cell is reachable");
    let reference = lane_center.unwrap_or(start.x);
    let cell = |c: usize, r: usize| PixelPoint::new(c as f64, r as f64);

    if constraints.turn_to_avoid_work_zone {
        let lateral = |c: usize| (c as f64 - start.x).abs();
        let best_col = rows
            .iter()
            .flatten()
            .copied()
            .max_by(|a, b| lateral(*a).total_cmp(&lateral(*b)).then(b.cmp(a)))
            .unwrap();
        if lateral(best_col) < params.lane_half_width_px {
            return Err(PlanError::InfeasibleDestination(
                "no lateral corridor to turn into".into(),
            ));
        }
        let col_rows: Vec<usize> = (0..mask.height).filter(|&r| rows[r].contains(&best_col)).collect();
        return Ok(cell(best_col, col_rows[col_rows.len() / 2]));
    }

    if constraints.follow_front_car {
        let lane = params.lane_half_width_px;
        let front = work_zone
            .iter()
            .filter(|d| d.category == Category::WorkVehicle)
            .filter(|d| d.bbox.bottom() < start.y && (d.bbox.center().x - reference).abs() <= 2.0 * lane)
            .max_by(|a, b| a.bbox.bottom().total_cmp(&b.bbox.bottom()));
        if let Some(car) = front {
            let row = (car.bbox.bottom() + config.inflation_margin + config.follow_gap).round();
            if row < 0.0 || row as usize >= mask.height {
                return Err(PlanError::InfeasibleDestination(
                    "followed vehicle is out of frame".into(),
                ));
            }
            let row = row as usize;
            return nearest_in_row(&rows[row], car.bbox.center().x)
                .map(|c| cell(c, row))
                .ok_or_else(|| {
                    PlanError::InfeasibleDestination("no drivable cell behind the followed vehicle".into())
                });
        }
    }

    let top = &rows[top_row];
    if constraints.return_to_original_lane_after_workzone {
        let wz_top = work_zone
            .iter()
            .map(|d| d.bbox.y - config.inflation_margin)
            .fold(f64::INFINITY, f64::min);
        if (top_row as f64) >= wz_top {
            return Err(PlanError::InfeasibleDestination(
                "no drivable row beyond the work zone".into(),
            ));
        }
        let col = nearest_in_row(top, reference).unwrap();
        if (col as f64 - reference).abs() > params.lane_half_width_px {
            return Err(PlanError::InfeasibleDestination(format!(
                "original lane at column {reference} is blocked beyond the work zone"
            )));
        }
        return Ok(cell(col, top_row));
    }

    if constraints.follow_lane_center {
        let run = runs(top)
            .into_iter()
            .min_by(|a, b| {
                let dist = |(lo, hi): (usize, usize)| {
                    if (lo as f64) <= reference && reference <= hi as f64 {
                        0.0
                    } else {
                        (lo as f64 - reference).abs().min((hi as f64 - reference).abs())
                    }
                };
                dist(*a).total_cmp(&dist(*b)).then(a.cmp(b))
            })
            .unwrap();
        return Ok(cell((run.0 + run.1) / 2, top_row));
    }

    if constraints.return_center_line_after_crossing {
        let mid = (top[0] + top[top.len() - 1]) as f64 / 2.0;
        let col = nearest_in_row(top, mid).unwrap();
        return Ok(cell(col, top_row));
    }

    Ok(cell(nearest_in_row(top, reference).unwrap(), top_row))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<PixelPoint>", into = "Vec<PixelPoint>")]
pub struct Trajectory {
    points: Vec<PixelPoint>,
}

impl TryFrom<Vec<PixelPoint>> for Trajectory {
    type Error = Error;

    fn try_from(points: Vec<PixelPoint>) -> Result<Self> {
        Trajectory::new(points)
    }
}

impl From<Trajectory> for Vec<PixelPoint> {
    fn from(t: Trajectory) -> Self {
        t.points
    }
}

impl Trajectory {
    pub fn new(points: Vec<PixelPoint>) -> Result<Self> {
        if points.len() != TRAJECTORY_LEN {
            return Err(Error::invalid(format!(
                "trajectory must have {TRAJECTORY_LEN} points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::invalid("trajectory contains non-finite points"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[PixelPoint] {
        &self.points
    }

    pub fn start(&self) -> PixelPoint {
        self.points[0]
    }

    pub fn destination(&self) -> PixelPoint {
        self.points[TRAJECTORY_LEN - 1]
    }

    /// Evenly spaced points on the straight segment from `start` to `dest`.
    pub fn straight(start: PixelPoint, dest: PixelPoint) -> Self {
        Self {
            points: resample(&[start, dest], TRAJECTORY_LEN),
        }
    }
}

/// Arc-length resampling of a polyline to `n` points, endpoints preserved.
pub fn resample(polyline: &[PixelPoint], n: usize) -> Vec<PixelPoint> {
    assert!(!polyline.is_empty() && n >= 2);
    let mut cum = Vec::with_capacity(polyline.len());
    cum.push(0.0);
    for w in polyline.windows(2) {
        let last = *cum.last().unwrap();
        cum.push(last + w[0].distance(&w[1]));
    }
    let total = *cum.last().unwrap();
    let last = *polyline.last().unwrap();
    if total == 0.0 {
        return vec![polyline[0]; n];
    }
    let mut out = Vec::with_capacity(n);
    out.push(polyline[0]);
    let mut seg = 0;
    for k in 1..n - 1 {
        let target = total * k as f64 / (n - 1) as f64;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < target {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { (target - cum[seg]) / len } else { 0.0 };
        out.push(polyline[seg].lerp(&polyline[seg + 1], t));
    }
    out.push(last);
    out
}

/// Whether every point of the segment falls in a drivable cell. Sampling at
/// quarter-pixel steps and testing the four cells around each sample
/// covers every cell the segment can touch.
pub fn segment_on_mask(mask: &RoadMask, a: PixelPoint, b: PixelPoint) -> bool {
    let steps = (a.distance(&b) / 0.25).ceil().max(1.0) as usize;
    const H: f64 = 0.125;
    (0..=steps).all(|i| {
        let p = a.lerp(&b, i as f64 / steps as f64);
        [(-H, -H), (-H, H), (H, -H), (H, H)]
            .iter()
            .all(|(dx, dy)| mask.is_drivable_point(PixelPoint::new(p.x + dx, p.y + dy)))
    })
}

#[derive(Copy, Clone, PartialEq)]
struct Open {
    f: f64,
    g: f64,
    cell: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| self.g.total_cmp(&other.g))
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A* over the 8-connected grid with Euclidean step costs.
pub fn grid_path(mask: &RoadMask, start: (i64, i64), goal: (i64, i64)) -> Option<Vec<(i64, i64)>> {
    if !mask.get_signed(start.0, start.1) || !mask.get_signed(goal.0, goal.1) {
        return None;
    }
    let w = mask.width;
    let idx = |c: i64, r: i64| r as usize * w + c as usize;
    let heuristic = |c: i64, r: i64| {
        let dx = (c - goal.0).abs() as f64;
        let dy = (r - goal.1).abs() as f64;
        dx.max(dy) + (std::f64::consts::SQRT_2 - 1.0) * dx.min(dy)
    };
    let mut g = vec![f64::INFINITY; w * mask.height];
    let mut parent = vec![usize::MAX; w * mask.height];
    let mut closed = vec![false; w * mask.height];
    let mut open = BinaryHeap::new();
    let s = idx(start.0, start.1);
    g[s] = 0.0;
    open.push(Open {
        f: heuristic(start.0, start.1),
        g: 0.0,
        cell: s,
    });
    let goal_idx = idx(goal.0, goal.1);
    while let Some(Open { g: gc, cell, .. }) = open.pop() {
        if closed[cell] {
            continue;
        }
        closed[cell] = true;
        if cell == goal_idx {
            let mut path = vec![goal];
            let mut cur = cell;
            while cur != s {
                cur = parent[cur];
                path.push(((cur % w) as i64, (cur / w) as i64));
            }
            path.reverse();
            return Some(path);
        }
        let (c, r) = ((cell % w) as i64, (cell / w) as i64);
        for (dc, dr) in NEIGHBOURS {
            if !can_step(mask, c, r, dc, dr) {
                continue;
            }
            let n = idx(c + dc, r + dr);
            if closed[n] {
                continue;
            }
            let step = if dc != 0 && dr != 0 {
                std::f64::consts::SQRT_2
            } else {
                1.0
            };
            let cand = gc + step;
            if cand < g[n] {
                g[n] = cand;
                parent[n] = cell;
                open.push(Open {
                    f: cand + heuristic(c + dc, r + dr),
                    g: cand,
                    cell: n,
                });
            }
        }
    }
    None
}

const SMOOTHING_PASSES: usize = 200;
const SMOOTHING_SPACING: f64 = 8.0;

/// Greedy line-of-sight shortcutting: keeps only the vertices needed for
/// every straight piece to stay on the mask.
fn shortcut(pts: &[PixelPoint], mask: &RoadMask) -> Vec<PixelPoint> {
    let mut out = vec![pts[0]];
    let mut anchor = 0;
    while anchor + 1 < pts.len() {
        let mut next = anchor + 1;
        while next + 1 < pts.len() && segment_on_mask(mask, pts[anchor], pts[next + 1]) {
            next += 1;
        }
        out.push(pts[next]);
        anchor = next;
    }
    out
}

/// Inserts points so that no piece is longer than `spacing`.
fn densify(pts: &[PixelPoint], spacing: f64) -> Vec<PixelPoint> {
    let mut out = vec![pts[0]];
    for w in pts.windows(2) {
        let pieces = (w[0].distance(&w[1]) / spacing).ceil().max(1.0) as usize;
        out.extend((1..=pieces).map(|k| w[0].lerp(&w[1], k as f64 / pieces as f64)));
    }
    *out.last_mut().unwrap() = *pts.last().unwrap();
    out
}

/// Shortest grid path, smoothed by constrained midpoint averaging and
/// resampled to exactly [`TRAJECTORY_LEN`] points.
pub fn smooth_trajectory(start: PixelPoint, dest: PixelPoint, mask: &RoadMask) -> Result<Trajectory, PlanError> {
    let s = RoadMask::cell_of(start);
    if !mask.get_signed(s.0, s.1) {
        return Err(PlanError::StartNotDrivable(s.0, s.1));
    }
    if !mask.is_drivable_point(dest) {
        return Err(PlanError::InfeasibleDestination("destination is not drivable".into()));
    }
    if start == dest {
        return Ok(Trajectory {
            points: vec![start; TRAJECTORY_LEN],
        });
    }
    let cells = grid_path(mask, s, RoadMask::cell_of(dest)).ok_or(PlanError::NoPath)?;
    let mut pts: Vec<PixelPoint> = cells
        .iter()
        .map(|&(c, r)| PixelPoint::new(c as f64, r as f64))
        .collect();
    pts[0] = start;
    let n = pts.len();
    pts[n - 1] = dest;
    if n == 1 {
        pts.push(dest);
    }
    let mut pts = densify(&shortcut(&pts, mask), SMOOTHING_SPACING);

    for _ in 0..SMOOTHING_PASSES {
        let mut moved: f64 = 0.0;
        for i in 1..pts.len().saturating_sub(1) {
            let mid = pts[i - 1].lerp(&pts[i + 1], 0.5);
            let cand = pts[i].lerp(&mid, 0.5);
            if segment_on_mask(mask, pts[i - 1], cand) && segment_on_mask(mask, cand, pts[i + 1]) {
                moved = moved.max(cand.distance(&pts[i]));
                pts[i] = cand;
            }
        }
        if moved < 1e-3 {
            break;
        }
    }
    Ok(Trajectory {
        points: resample(&pts, TRAJECTORY_LEN),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Maximum distance of the destination from the drivable set, pixels.
    pub tau_road: f64,
    /// Maximum distance of the destination from the reference, pixels.
    pub tau: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau_road: 10.0,
            tau: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivabilityCheck {
    pub passed: bool,
    pub clearance: f64,
    pub tau_road: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DestinationCheck {
    pub passed: bool,
    pub d_pix: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationFeedback {
    pub attempt: usize,
    pub drivability: DrivabilityCheck,
    /// Absent when no reference destination exists (online use).
    pub destination: Option<DestinationCheck>,
    pub rendered: Option<String>,
}

impl VerificationFeedback {
    pub fn passed(&self) -> bool {
        self.drivability.passed && self.destination.is_none_or(|d| d.passed)
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "drivability {}: clearance {:.3} px (limit {:.3})",
            if self.drivability.passed { "ok" } else { "FAILED" },
            self.drivability.clearance,
            self.drivability.tau_road
        );
        if let Some(d) = self.destination {
            s.push_str(&format!(
                "; destination {}: {:.3} px from reference (limit {:.3})",
                if d.passed { "ok" } else { "FAILED" },
                d.d_pix,
                d.tau
            ));
        }
        s
    }
}

pub fn verify(
    pred: PixelPoint,
    reference: Option<PixelPoint>,
    field: &DistanceField,
    mask: &RoadMask,
    thresholds: &Thresholds,
) -> VerificationFeedback {
    let clearance = field.at_point(pred, mask);
    VerificationFeedback {
        attempt: 0,
        drivability: DrivabilityCheck {
            passed: clearance <= thresholds.tau_road,
            clearance,
            tau_road: thresholds.tau_road,
        },
        destination: reference.map(|gt| {
            let d_pix = ((pred.x - gt.x).powi(2) + (pred.y - gt.y).powi(2)).sqrt();
            DestinationCheck {
                passed: d_pix <= thresholds.tau,
                d_pix,
                tau: thresholds.tau,
            }
        }),
        rendered: None,
    }
}

/// Everything the planner needs to know about one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanningScene {
    pub mask: RoadMask,
    pub work_zone: Vec<Detection>,
    pub start: PixelPoint,
    pub lane_center: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptOutcome {
    pub destination: PixelPoint,
    pub trajectory: Trajectory,
    pub feedback: VerificationFeedback,
}

/// One segment -> destination -> smooth -> verify pass.
pub fn run_attempt(
    scene: &PlanningScene,
    constraints: &ConstraintSet,
    config: &MitigationConfig,
    reference: Option<PixelPoint>,
    thresholds: &Thresholds,
    params: &DestinationParams,
) -> Result<AttemptOutcome, PlanError> {
    let mask = segment_drivable_mask(&scene.mask, &scene.work_zone, constraints, config, scene.start)?;
    let planned = plan_destination(
        &mask,
        &scene.work_zone,
        constraints,
        config,
        scene.start,
        scene.lane_center,
        params,
    )?;
    let predicted = PixelPoint::new(
        planned.x + config.destination_offset.x,
        planned.y + config.destination_offset.y,
    );
    let field = distance_transform(&mask);
    let feedback = verify(predicted, reference, &field, &mask, thresholds);

    // An off-mask prediction is still drawn, ending at the closest cell the
    // vehicle can actually reach.
    let target = if mask.is_drivable_point(predicted) && {
        let (c, r) = RoadMask::cell_of(predicted);
        reachable_cells(&mask, RoadMask::cell_of(scene.start))[r as usize * mask.width + c as usize]
    } {
        predicted
    } else {
        nearest_reachable(&mask, scene.start, predicted)
    };
    let trajectory = smooth_trajectory(scene.start, target, &mask)?;
    Ok(AttemptOutcome {
        destination: predicted,
        trajectory,
        feedback,
    })
}

fn nearest_reachable(mask: &RoadMask, start: PixelPoint, p: PixelPoint) -> PixelPoint {
    let seen = reachable_cells(mask, RoadMask::cell_of(start));
    let mut best = (f64::INFINITY, start);
    for r in 0..mask.height {
        for c in 0..mask.width {
            if seen[r * mask.width + c] {
                let q = PixelPoint::new(c as f64, r as f64);
                let d = q.distance(&p);
                if d < best.0 {
                    best = (d, q);
                }
            }
        }
    }
    best.1
}

/// A mitigation proposal for one attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub constraints: ConstraintSet,
    pub config: MitigationConfig,
}

/// Supplies a proposal per attempt, given the history so far.
pub trait ProposalSource {
    fn propose(&mut self, attempt: usize, history: &[AttemptRecord]) -> std::result::Result<Proposal, String>;
}

/// Replays one fixed proposal, e.g. a stored case.
pub struct FixedProposal(pub Proposal);

impl ProposalSource for FixedProposal {
    fn propose(&mut self, _: usize, _: &[AttemptRecord]) -> std::result::Result<Proposal, String> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: usize,
    pub constraints: Option<ConstraintSet>,
    pub config: Option<MitigationConfig>,
    pub destination: Option<PixelPoint>,
    pub feedback: Option<VerificationFeedback>,
    pub error: Option<String>,
}

impl AttemptRecord {
    pub fn passed(&self) -> bool {
        self.feedback.as_ref().is_some_and(VerificationFeedback::passed)
    }

    /// Feedback text handed to the next attempt.
    pub fn describe(&self) -> String {
        match (&self.feedback, &self.error) {
            (_, Some(e)) => format!("attempt {}: error: {e}", self.attempt),
            (Some(f), None) => format!("attempt {}: {}", self.attempt, f.summary()),
            (None, None) => format!("attempt {}: no result", self.attempt),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationOutcome {
    pub verified: bool,
    pub trajectory: Option<Trajectory>,
    pub proposal_constraints: Option<ConstraintSet>,
    pub proposal_config: Option<MitigationConfig>,
    pub history: Vec<AttemptRecord>,
}

impl MitigationOutcome {
    pub fn verification_record(&self) -> Option<VerificationRecord> {
        let last = self.history.last()?;
        let f = last.feedback.as_ref()?;
        Some(VerificationRecord {
            passed: self.verified,
            attempts: self.history.len(),
            drivability_passed: f.drivability.passed,
            clearance: f.drivability.clearance,
            tau_road: f.drivability.tau_road,
            destination_passed: f.destination.is_none_or(|d| d.passed),
            d_pix: f.destination.map_or(0.0, |d| d.d_pix),
            tau: f.destination.map_or(f64::NAN, |d| d.tau),
        })
    }
}

/// Runs attempts until verification passes or `max_iter` attempts are used.
pub fn mitigate_with_retry(
    scene: &PlanningScene,
    source: &mut dyn ProposalSource,
    reference: Option<PixelPoint>,
    max_iter: usize,
    thresholds: &Thresholds,
    params: &DestinationParams,
) -> MitigationOutcome {
    let mut history: Vec<AttemptRecord> = Vec::new();
    let mut last_trajectory = None;
    let mut last_proposal = None;
    for attempt in 1..=max_iter.max(1) {
        let mut record = AttemptRecord {
            attempt,
            constraints: None,
            config: None,
            destination: None,
            feedback: None,
            error: None,
        };
        match source.propose(attempt, &history) {
            Err(e) => record.error = Some(e),
            Ok(p) => {
                record.constraints = Some(p.constraints);
                record.config = Some(p.config);
                match run_attempt(scene, &p.constraints, &p.config, reference, thresholds, params) {
                    Ok(out) => {
                        let mut fb = out.feedback;
                        fb.attempt = attempt;
                        record.destination = Some(out.destination);
                        record.feedback = Some(fb);
                        last_trajectory = Some(out.trajectory);
                    }
                    Err(e) => record.error = Some(e.to_string()),
                }
                last_proposal = Some(p);
            }
        }
        let passed = record.passed();
        history.push(record);
        if passed {
            break;
        }
    }
    let verified = history.last().is_some_and(AttemptRecord::passed);
    MitigationOutcome {
        verified,
        trajectory: last_trajectory,
        proposal_constraints: last_proposal.as_ref().map(|p| p.constraints),
        proposal_config: last_proposal.map(|p| p.config),
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(mask: &RoadMask) -> Vec<f64> {
        let drivable: Vec<(usize, usize)> = (0..mask.height())
            .flat_map(|r| (0..mask.width()).map(move |c| (c, r)))
            .filter(|&(c, r)| mask.get(c, r))
            .collect();
        (0..mask.height())
            .flat_map(|r| (0..mask.width()).map(move |c| (c, r)))
            .map(|(c, r)| {
                drivable
                    .iter()
                    .map(|&(dc, dr)| {
                        let dx = dc as f64 - c as f64;
                        let dy = dr as f64 - r as f64;
                        (dx * dx + dy * dy).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    fn det(id: u32, cat: Category, bbox: [f64; 4]) -> Detection {
        Detection {
            instance_id: id,
            category: cat,
            bbox: bbox.into(),
            depth: 8.0,
            appearance: None,
        }
    }

    const LANE: DestinationParams = DestinationParams {
        lane_half_width_px: 35.0,
    };

    #[test]
    fn all_drivable_field_is_zero() {
        let f = distance_transform(&RoadMask::filled(7, 5, true));
        assert!(f.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_seed_three_four_five() {
        let mut m = RoadMask::filled(20, 20, false);
        m.set(10, 10, true);
        let f = distance_transform(&m);
        assert_eq!(f.get(13, 14), 5.0);
        assert_eq!(f.get(10, 10), 0.0);
    }

    #[test]
    fn empty_mask_is_infinite() {
        let f = distance_transform(&RoadMask::filled(4, 3, false));
        assert!(f.values().iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
            let density = rng.gen_range(0.0..0.3);
            let mut m = RoadMask::filled(w, h, false);
            for r in 0..h {
                for c in 0..w {
                    if rng.gen_bool(density) {
                        m.set(c, r, true);
                    }
                }
            }
            assert_eq!(distance_transform(&m).values(), brute_force(&m).as_slice());
        }
    }

    #[test]
    fn pgm_round_trip_and_ascii() {
        let mut m = RoadMask::filled(5, 3, false);
        m.fill_rect(1..4, 0..2, true);
        assert_eq!(RoadMask::from_pgm(&m.to_pgm()).unwrap(), m);
        let ascii = b"P2\n# comment\n2 2\n255\n0 255\n255 0\n";
        let a = RoadMask::from_pgm(ascii).unwrap();
        assert!(!a.get(0, 0) && a.get(1, 0) && a.get(0, 1) && !a.get(1, 1));
        let bytes = m.to_pgm();
        assert!(RoadMask::from_pgm(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn permissive_without_work_zone_is_identity() {
        let m = RoadMask::filled(30, 20, true);
        let out = segment_drivable_mask(
            &m,
            &[],
            &ConstraintSet::permissive(),
            &MitigationConfig::default(),
            PixelPoint::new(15.0, 19.0),
        )
        .unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn left_detour_blocks_right_of_work_zone() {
        let m = RoadMask::filled(100, 60, true);
        let drum = det(1, Category::Drum, [70.0, 20.0, 10.0, 10.0]);
        let c = ConstraintSet {
            detour_side: DetourSide::Left,
            ..ConstraintSet::permissive()
        };
        let cfg = MitigationConfig {
            inflation_margin: 0.0,
            ..MitigationConfig::default()
        };
        let out = segment_drivable_mask(&m, &[drum], &c, &cfg, PixelPoint::new(50.0, 59.0)).unwrap();
        for r in 21..30 {
            for col in 71..100 {
                assert!(!out.get(col, r), "({col},{r}) should be blocked");
            }
            assert!(out.get(60, r));
        }
        assert!(out.get(90, 10) && out.get(90, 40));
    }

    #[test]
    fn work_zone_boxes_always_blocked() {
        let m = RoadMask::filled(60, 60, true);
        let cone = det(1, Category::Cone, [20.0, 20.0, 10.0, 10.0]);
        for c in [
            ConstraintSet::permissive(),
            ConstraintSet {
                passage: Passage::Cross,
                ..ConstraintSet::permissive()
            },
        ] {
            let out = segment_drivable_mask(
                &m,
                std::slice::from_ref(&cone),
                &c,
                &MitigationConfig::default(),
                PixelPoint::new(5.0, 59.0),
            )
            .unwrap();
            for r in 15..=35 {
                for col in 15..=35 {
                    assert!(!out.get(col, r));
                }
            }
        }
    }

    #[test]
    fn blocking_everything_is_an_error() {
        let m = RoadMask::filled(10, 10, true);
        let wall = det(1, Category::Barrier, [-5.0, -5.0, 20.0, 20.0]);
        let err = segment_drivable_mask(
            &m,
            &[wall],
            &ConstraintSet::permissive(),
            &MitigationConfig::default(),
            PixelPoint::new(5.0, 5.0),
        );
        assert_eq!(err, Err(PlanError::NoDrivableSpace));
    }

    #[test]
    fn lane_center_on_empty_road() {
        let mut m = RoadMask::filled(200, 120, false);
        m.fill_rect(60..141, 10..120, true);
        let c = ConstraintSet {
            follow_lane_center: true,
            ..ConstraintSet::permissive()
        };
        let d = plan_destination(
            &m,
            &[],
            &c,
            &MitigationConfig::default(),
            PixelPoint::new(80.0, 119.0),
            None,
            &LANE,
        )
        .unwrap();
        assert_eq!(d, PixelPoint::new(100.0, 10.0));
    }

    #[test]
    fn return_to_lane_after_left_detour() {
        let mut m = RoadMask::filled(300, 200, false);
        m.fill_rect(50..251, 0..200, true);
        let wz = [det(1, Category::Drum, [140.0, 80.0, 40.0, 60.0])];
        let c = ConstraintSet {
            detour_side: DetourSide::Left,
            return_to_original_lane_after_workzone: true,
            ..ConstraintSet::permissive()
        };
        let cfg = MitigationConfig::default();
        let start = PixelPoint::new(160.0, 199.0);
        let seg = segment_drivable_mask(&m, &wz, &c, &cfg, start).unwrap();
        let d = plan_destination(&seg, &wz, &c, &cfg, start, None, &LANE).unwrap();
        assert!(d.y < 80.0 - cfg.inflation_margin);
        assert!((d.x - start.x).abs() <= LANE.lane_half_width_px);
        assert!(seg.is_drivable_point(d));
    }

    #[test]
    fn dead_end_turns_into_side_corridor() {
        let mut m = RoadMask::filled(300, 200, false);
        m.fill_rect(120..181, 40..200, true);
        m.fill_rect(0..181, 60..100, true);
        let wz = [det(1, Category::Barrier, [110.0, 20.0, 80.0, 30.0])];
        let c = ConstraintSet {
            turn_to_avoid_work_zone: true,
            ..ConstraintSet::permissive()
        };
        let cfg = MitigationConfig::default();
        let start = PixelPoint::new(150.0, 199.0);
        let seg = segment_drivable_mask(&m, &wz, &c, &cfg, start).unwrap();
        let d = plan_destination(&seg, &wz, &c, &cfg, start, None, &LANE).unwrap();
        assert_eq!(d.x, 0.0);
        assert!((60.0..100.0).contains(&d.y));
    }

    #[test]
    fn degenerate_trajectory() {
        let m = RoadMask::filled(10, 10, true);
        let p = PixelPoint::new(4.0, 4.0);
        let t = smooth_trajectory(p, p, &m).unwrap();
        assert!(t.points().iter().all(|q| *q == p));
        assert_eq!(t.points().len(), TRAJECTORY_LEN);
    }

    #[test]
    fn straight_corridor_is_straight_and_even() {
        let mut m = RoadMask::filled(100, 200, false);
        m.fill_rect(30..70, 0..200, true);
        let (s, d) = (PixelPoint::new(40.0, 190.0), PixelPoint::new(60.0, 5.0));
        let t = smooth_trajectory(s, d, &m).unwrap();
        assert_eq!(t.start(), s);
        assert_eq!(t.destination(), d);
        let oracle = resample(&[s, d], TRAJECTORY_LEN);
        for (p, q) in t.points().iter().zip(&oracle) {
            // distance from the straight segment
            let (dx, dy) = (d.x - s.x, d.y - s.y);
            let off = ((p.x - s.x) * dy - (p.y - s.y) * dx).abs() / dx.hypot(dy);
            assert!(off <= 0.5, "point {p:?} is {off} px off the line");
            assert!(p.distance(q) <= 2.0, "uneven spacing at {p:?} vs {q:?}");
        }
    }

    #[test]
    fn detour_around_central_obstacle_stays_on_mask() {
        let mut m = RoadMask::filled(120, 200, false);
        m.fill_rect(20..100, 0..200, true);
        let obstacle = BBox::new(50.0, 80.0, 20.0, 30.0);
        let wz = [Detection {
            instance_id: 1,
            category: Category::Drum,
            bbox: obstacle,
            depth: 5.0,
            appearance: None,
        }];
        let cfg = MitigationConfig::default();
        let seg = segment_drivable_mask(
            &m,
            &wz,
            &ConstraintSet::permissive(),
            &cfg,
            PixelPoint::new(60.0, 199.0),
        )
        .unwrap();
        let t = smooth_trajectory(PixelPoint::new(60.0, 199.0), PixelPoint::new(60.0, 2.0), &seg).unwrap();
        let field = distance_transform(&seg);
        for p in t.points() {
            assert_eq!(field.at_point(*p, &seg), 0.0);
            assert!(!obstacle.inflate(cfg.inflation_margin).contains_strict(*p));
        }
    }

    #[test]
    fn disconnected_is_no_path() {
        let mut m = RoadMask::filled(50, 50, true);
        m.fill_rect(0..50, 20..25, false);
        let r = smooth_trajectory(PixelPoint::new(10.0, 40.0), PixelPoint::new(10.0, 5.0), &m);
        assert_eq!(r, Err(PlanError::NoPath));
    }

    #[test]
    fn verify_examples() {
        let mut m = RoadMask::filled(40, 40, false);
        m.fill_rect(0..10, 0..40, true);
        let f = distance_transform(&m);
        let t = Thresholds::default();
        let p = PixelPoint::new(5.0, 5.0);
        let fb = verify(p, Some(p), &f, &m, &t);
        assert!(fb.passed());
        assert_eq!(fb.destination.unwrap().d_pix, 0.0);

        // Column 21 is 12 cells from the last drivable column (9).
        let far = PixelPoint::new(21.0, 5.0);
        let fb = verify(far, None, &f, &m, &t);
        assert!(!fb.passed());
        assert_eq!(fb.drivability.clearance, 12.0);
        assert_eq!(fb.drivability.tau_road, 10.0);

        let fb = verify(PixelPoint::new(8.0, 9.0), Some(p), &f, &m, &t);
        assert!(fb.passed());
        assert_eq!(fb.destination.unwrap().d_pix, 5.0);
    }

    struct Scripted(Vec<Proposal>);

    impl ProposalSource for Scripted {
        fn propose(&mut self, attempt: usize, _: &[AttemptRecord]) -> std::result::Result<Proposal, String> {
            Ok(self.0[(attempt - 1).min(self.0.len() - 1)].clone())
        }
    }

    fn corridor_scene() -> PlanningScene {
        let mut mask = RoadMask::filled(120, 160, false);
        mask.fill_rect(30..90, 0..160, true);
        PlanningScene {
            mask,
            work_zone: vec![],
            start: PixelPoint::new(60.0, 159.0),
            lane_center: None,
        }
    }

    #[test]
    fn retry_happy_path_and_second_attempt() {
        let scene = corridor_scene();
        let good = Proposal {
            constraints: ConstraintSet {
                follow_lane_center: true,
                ..ConstraintSet::permissive()
            },
            config: MitigationConfig::default(),
        };
        let gt = PixelPoint::new(59.0, 0.0);
        let t = Thresholds::default();
        let out = mitigate_with_retry(&scene, &mut FixedProposal(good.clone()), Some(gt), 3, &t, &LANE);
        assert!(out.verified);
        assert_eq!(out.history.len(), 1);

        let mut off_mask = good.clone();
        off_mask.config.destination_offset = PixelPoint::new(50.0, 0.0);
        let out = mitigate_with_retry(&scene, &mut Scripted(vec![off_mask, good]), Some(gt), 3, &t, &LANE);
        assert!(out.verified);
        assert_eq!(out.history.len(), 2);
        assert!(!out.history[0].feedback.as_ref().unwrap().drivability.passed);
    }

    #[test]
    fn retry_exhausts_on_infeasible_constraints() {
        let scene = corridor_scene();
        let turn = Proposal {
            constraints: ConstraintSet {
                turn_to_avoid_work_zone: true,
                ..ConstraintSet::permissive()
            },
            config: MitigationConfig::default(),
        };
        let out = mitigate_with_retry(&scene, &mut FixedProposal(turn), None, 3, &Thresholds::default(), &LANE);
        assert!(!out.verified);
        assert_eq!(out.history.len(), 3);
        assert!(out.history.iter().all(|h| h.error.is_some()));
    }

    #[test]
    fn retry_is_deterministic() {
        let scene = corridor_scene();
        let p = Proposal {
            constraints: ConstraintSet::permissive(),
            config: MitigationConfig::default(),
        };
        let run = || {
            mitigate_with_retry(
                &scene,
                &mut FixedProposal(p.clone()),
                None,
                2,
                &Thresholds::default(),
                &LANE,
            )
        };
        assert_eq!(run(), run());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn boxes() -> impl Strategy<Value = Vec<BBox>> {
            prop::collection::vec((0.0..60.0f64, 0.0..60.0f64, 1.0..20.0f64, 1.0..20.0f64), 0..5)
                .prop_map(|v| v.into_iter().map(|(x, y, w, h)| BBox::new(x, y, w, h)).collect())
        }

        fn dets(b: &[BBox]) -> Vec<Detection> {
            b.iter()
                .enumerate()
                .map(|(i, b)| det(i as u32, Category::Cone, [b.x, b.y, b.w, b.h]))
                .collect()
        }

        fn constraints() -> impl Strategy<Value = ConstraintSet> {
            (0..3usize, any::<bool>()).prop_map(|(side, sign)| ConstraintSet {
                detour_side: [DetourSide::None, DetourSide::Left, DetourSide::Right][side],
                follow_sign: sign,
                ..ConstraintSet::permissive()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn segmentation_is_monotone(b in boxes(), extra in boxes(), c in constraints()) {
                let m = RoadMask::filled(64, 64, true);
                let cfg = MitigationConfig::default();
                let start = PixelPoint::new(32.0, 63.0);
                let base = segment_drivable_mask(&m, &dets(&b), &c, &cfg, start);
                let mut more = b.clone();
                more.extend(extra);
                let grown = segment_drivable_mask(&m, &dets(&more), &c, &cfg, start);
                if let (Ok(base), Ok(grown)) = (base, grown) {
                    for r in 0..64 {
                        for col in 0..64 {
                            prop_assert!(!grown.get(col, r) || base.get(col, r));
                        }
                    }
                }
            }

            #[test]
            fn distance_transform_exact(w in 1usize..24, h in 1usize..24, bits in prop::collection::vec(any::<u8>(), 576)) {
                let mut m = RoadMask::filled(w, h, false);
                for r in 0..h {
                    for c in 0..w {
                        m.set(c, r, bits[r * w + c] < 40);
                    }
                }
                let field = distance_transform(&m);
                let oracle = brute_force(&m);
                prop_assert_eq!(field.values(), oracle.as_slice());
            }

            #[test]
            fn feasible_paths_have_twenty_on_mask_points(
                b in boxes(),
                sx in 0.0..64.0f64, sy in 0.0..64.0f64,
                dx in 0.0..64.0f64, dy in 0.0..64.0f64,
            ) {
                let mut m = RoadMask::filled(64, 64, true);
                for bb in &b {
                    m.block_box(bb);
                }
                let (s, d) = (PixelPoint::new(sx, sy), PixelPoint::new(dx, dy));
                if let Ok(t) = smooth_trajectory(s, d, &m) {
                    prop_assert_eq!(t.points().len(), TRAJECTORY_LEN);
                    prop_assert_eq!(t.start(), s);
                    prop_assert_eq!(t.destination(), d);
                    for p in t.points() {
                        prop_assert!(m.is_drivable_point(*p));
                        for bb in &b {
                            prop_assert!(!bb.contains_strict(*p));
                        }
                    }
                }
            }
        }
    }
}
