//! Pixel/ego-frame transforms and the three relation classifiers used to
//! label scene-graph edges.
//!
//! The ego frame is metric, centred on the ego vehicle, with `x` pointing to
//! the right and `y` pointing forward. Image space has its origin in the top
//! left corner with rows growing downwards.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, TAU};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Heading of the ego vehicle in the ego frame. The vehicle faces `+y`, which
/// is a quarter turn counter-clockwise from the `+x` axis that `atan2` measures
/// from.
pub const EGO_HEADING: f64 = FRAC_PI_2;

/// Upper bounds (exclusive) of the proximity bins, in meters.
pub const PROXIMITY_BOUNDS: [f64; 5] = [4.0, 7.0, 10.0, 16.0, 25.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EgoConfig {
    pub image_width: f64,
    pub image_height: f64,
    /// Image-space location of the ego origin. Defaults to the image centre.
    pub center: (f64, f64),
    /// Pixels per meter.
    pub ppm: f64,
    /// Half-angle of the forward sector, radians.
    pub alpha: f64,
    /// Half of the lane width, meters.
    pub lane_half_width: f64,
}

impl Default for EgoConfig {
    fn default() -> Self {
        Self::for_image(960.0, 540.0)
    }
}

impl EgoConfig {
    pub fn for_image(width: f64, height: f64) -> Self {
        Self {
            image_width: width,
            image_height: height,
            center: (width / 2.0, height / 2.0),
            ppm: 20.0,
            alpha: FRAC_PI_4,
            lane_half_width: 1.75,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.image_width,
            self.image_height,
            self.center.0,
            self.center.1,
            self.ppm,
            self.alpha,
            self.lane_half_width,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("ego config contains non-finite values"));
        }
        if self.image_width <= 0.0 || self.image_height <= 0.0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if self.ppm <= 0.0 {
            return Err(Error::invalid("pixels-per-meter must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < FRAC_PI_2) {
            return Err(Error::invalid("alpha must lie in (0, pi/2)"));
        }
        if self.lane_half_width <= 0.0 {
            return Err(Error::invalid("lane half width must be positive"));
        }
        Ok(())
    }

    /// Half of the lane width expressed in pixels.
    pub fn lane_half_width_px(&self) -> f64 {
        self.lane_half_width * self.ppm
    }
}

/// Axis-aligned pixel box `(x, y, w, h)` with `(x, y)` the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn center(&self) -> PixelPoint {
        PixelPoint::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn inflate(&self, margin: f64) -> BBox {
        BBox::new(
            self.x - margin,
            self.y - margin,
            self.w + 2.0 * margin,
            self.h + 2.0 * margin,
        )
    }

    /// Strict interior test; points on the boundary are outside.
    pub fn contains_strict(&self, p: PixelPoint) -> bool {
        p.x > self.x && p.x < self.right() && p.y > self.y && p.y < self.bottom()
    }

    pub fn union(&self, other: &BBox) -> BBox {
        let x0 = self.x.min(other.x);
        let y0 = self.y.min(other.y);
        let x1 = self.right().max(other.right());
        let y1 = self.bottom().max(other.bottom());
        BBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0) || ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
    }
}

/// A point in image space, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for PixelPoint {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<PixelPoint> for [f64; 2] {
    fn from(p: PixelPoint) -> Self {
        [p.x, p.y]
    }
}

impl PixelPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(&self, other: &PixelPoint, t: f64) -> PixelPoint {
        PixelPoint::new(self.x + (other.x - self.x) * t, self.y + (other.y - self.y) * t)
    }
}

/// A point in the metric ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoPoint {
    pub x: f64,
    pub y: f64,
}

impl EgoPoint {
    pub const ORIGIN: EgoPoint = EgoPoint { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: EgoPoint,
    pub psi: f64,
}

impl Pose {
    pub fn ego() -> Self {
        Self {
            position: EgoPoint::ORIGIN,
            psi: EGO_HEADING,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DirRelation {
    #[serde(rename = "inFrontOf")]
    InFrontOf,
    #[serde(rename = "toLeftOf")]
    ToLeftOf,
    #[serde(rename = "toRightOf")]
    ToRightOf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxRelation {
    NearCollision,
    SuperNear,
    VeryNear,
    Near,
    Visible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LaneId {
    LeftLane,
    MiddleLane,
    RightLane,
}

impl DirRelation {
    pub const ALL: [DirRelation; 3] = [DirRelation::InFrontOf, DirRelation::ToLeftOf, DirRelation::ToRightOf];

    pub fn as_str(&self) -> &'static str {
        match self {
            DirRelation::InFrontOf => "inFrontOf",
            DirRelation::ToLeftOf => "toLeftOf",
            DirRelation::ToRightOf => "toRightOf",
        }
    }
}

impl ProxRelation {
    pub const ALL: [ProxRelation; 5] = [
        ProxRelation::NearCollision,
        ProxRelation::SuperNear,
        ProxRelation::VeryNear,
        ProxRelation::Near,
        ProxRelation::Visible,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProxRelation::NearCollision => "near_collision",
            ProxRelation::SuperNear => "super_near",
            ProxRelation::VeryNear => "very_near",
            ProxRelation::Near => "near",
            ProxRelation::Visible => "visible",
        }
    }
}

impl LaneId {
    pub const ALL: [LaneId; 3] = [LaneId::LeftLane, LaneId::MiddleLane, LaneId::RightLane];

    pub fn as_str(&self) -> &'static str {
        match self {
            LaneId::LeftLane => "LeftLane",
            LaneId::MiddleLane => "MiddleLane",
            LaneId::RightLane => "RightLane",
        }
    }
}

impl fmt::Display for DirRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for ProxRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for LaneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Maps the centre of a pixel box onto the ego plane.
pub fn pixel_to_ego(bbox: &BBox, cfg: &EgoConfig) -> Result<EgoPoint> {
    if bbox.is_degenerate() {
        return Err(Error::invalid(format!(
            "degenerate bbox ({}, {}, {}, {})",
            bbox.x, bbox.y, bbox.w, bbox.h
        )));
    }
    let (cx, cy) = cfg.center;
    let c = bbox.center();
    Ok(EgoPoint::new((c.x - cx) / cfg.ppm, (cy - c.y) / cfg.ppm))
}

/// Inverse of [`pixel_to_ego`] for box centres.
pub fn ego_to_pixel(p: &EgoPoint, cfg: &EgoConfig) -> PixelPoint {
    let (cx, cy) = cfg.center;
    PixelPoint::new(cx + p.x * cfg.ppm, cy - p.y * cfg.ppm)
}

/// Normalises an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::invalid(format!("non-finite angle {theta}")));
    }
    let r = theta.rem_euclid(TAU);
    Ok(if r > PI { r - TAU } else { r })
}

/// Bearing of `dst` as seen from `src`, relative to the source heading.
pub fn relative_angle(src: &Pose, dst: &EgoPoint) -> Result<f64> {
    let dx = dst.x - src.position.x;
    let dy = dst.y - src.position.y;
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::DegenerateGeometry("source and target positions coincide".into()));
    }
    wrap_angle(dy.atan2(dx) - src.psi)
}

pub fn classify_direction(theta: f64, alpha: f64) -> DirRelation {
    if theta.abs() <= alpha {
        DirRelation::InFrontOf
    } else if theta > alpha {
        DirRelation::ToLeftOf
    } else {
        DirRelation::ToRightOf
    }
}

/// Bins an ego distance into a proximity relation. Distances of 25 m and
/// beyond produce no relation.
pub fn classify_proximity(distance: f64) -> Result<Option<ProxRelation>> {
    if distance.is_nan() || distance < 0.0 {
        return Err(Error::invalid(format!("negative distance {distance}")));
    }
    Ok(PROXIMITY_BOUNDS
        .iter()
        .position(|&upper| distance < upper)
        .map(|i| ProxRelation::ALL[i]))
}

pub fn assign_lane(x: f64, lane_half_width: f64) -> LaneId {
    if x < -lane_half_width {
        LaneId::LeftLane
    } else if x > lane_half_width {
        LaneId::RightLane
    } else {
        LaneId::MiddleLane
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg_480_270() -> EgoConfig {
        EgoConfig {
            center: (480.0, 270.0),
            ppm: 20.0,
            ..EgoConfig::default()
        }
    }

    #[test]
    fn pixel_to_ego_examples() {
        let cfg = cfg_480_270();
        let p = pixel_to_ego(&BBox::new(470.0, 260.0, 20.0, 20.0), &cfg).unwrap();
        assert_eq!(p, EgoPoint::ORIGIN);
        let p = pixel_to_ego(&BBox::new(470.0, 250.0, 20.0, 20.0), &cfg).unwrap();
        assert_eq!(p, EgoPoint::new(0.0, 0.5));
        let p = pixel_to_ego(&BBox::new(520.0, 270.0, 40.0, 20.0), &cfg).unwrap();
        assert_eq!(p, EgoPoint::new(3.0, -0.5));
    }

    #[test]
    fn degenerate_bbox_rejected() {
        let cfg = cfg_480_270();
        assert!(pixel_to_ego(&BBox::new(0.0, 0.0, 0.0, 5.0), &cfg).is_err());
        assert!(pixel_to_ego(&BBox::new(0.0, 0.0, 5.0, -1.0), &cfg).is_err());
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(0.0).unwrap(), 0.0);
        assert!((wrap_angle(1.5 * PI).unwrap() + FRAC_PI_2).abs() < 1e-12);
        assert_eq!(wrap_angle(-PI).unwrap(), PI);
        assert_eq!(wrap_angle(PI).unwrap(), PI);
        assert!(wrap_angle(f64::NAN).is_err());
        assert!(wrap_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn relative_angle_examples() {
        let src = Pose {
            position: EgoPoint::ORIGIN,
            psi: 0.0,
        };
        let a = relative_angle(&src, &EgoPoint::new(0.0, 5.0)).unwrap();
        assert!((a - FRAC_PI_2).abs() < 1e-15);

        let src = Pose {
            position: EgoPoint::ORIGIN,
            psi: FRAC_PI_2,
        };
        assert_eq!(relative_angle(&src, &EgoPoint::new(0.0, 5.0)).unwrap(), 0.0);
        assert!(matches!(
            relative_angle(&src, &EgoPoint::ORIGIN),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn ego_pose_sees_forward_as_front() {
        let ego = Pose::ego();
        let alpha = FRAC_PI_4;
        let rel = |x, y| classify_direction(relative_angle(&ego, &EgoPoint::new(x, y)).unwrap(), alpha);
        assert_eq!(rel(0.0, 10.0), DirRelation::InFrontOf);
        assert_eq!(rel(-10.0, 1.0), DirRelation::ToLeftOf);
        assert_eq!(rel(10.0, 1.0), DirRelation::ToRightOf);
    }

    #[test]
    fn direction_examples() {
        assert_eq!(classify_direction(0.0, FRAC_PI_4), DirRelation::InFrontOf);
        assert_eq!(classify_direction(FRAC_PI_2, FRAC_PI_4), DirRelation::ToLeftOf);
        assert_eq!(classify_direction(-PI / 3.0, FRAC_PI_4), DirRelation::ToRightOf);
        assert_eq!(classify_direction(FRAC_PI_4, FRAC_PI_4), DirRelation::InFrontOf);
        assert_eq!(classify_direction(-FRAC_PI_4, FRAC_PI_4), DirRelation::InFrontOf);
    }

    #[test]
    fn proximity_examples() {
        assert_eq!(classify_proximity(3.9).unwrap(), Some(ProxRelation::NearCollision));
        assert_eq!(classify_proximity(16.0).unwrap(), Some(ProxRelation::Visible));
        assert_eq!(classify_proximity(25.0).unwrap(), None);
        assert_eq!(classify_proximity(0.0).unwrap(), Some(ProxRelation::NearCollision));
        assert_eq!(classify_proximity(4.0).unwrap(), Some(ProxRelation::SuperNear));
        assert_eq!(classify_proximity(7.0).unwrap(), Some(ProxRelation::VeryNear));
        assert_eq!(classify_proximity(10.0).unwrap(), Some(ProxRelation::Near));
        assert!(classify_proximity(-0.1).is_err());
    }

    #[test]
    fn lane_examples() {
        assert_eq!(assign_lane(0.0, 1.75), LaneId::MiddleLane);
        assert_eq!(assign_lane(-2.0, 1.75), LaneId::LeftLane);
        assert_eq!(assign_lane(1.75, 1.75), LaneId::MiddleLane);
        assert_eq!(assign_lane(-1.75, 1.75), LaneId::MiddleLane);
        assert_eq!(assign_lane(1.7500001, 1.75), LaneId::RightLane);
    }

    #[test]
    fn config_validation() {
        assert!(EgoConfig::default().validate().is_ok());
        let bad = EgoConfig {
            alpha: FRAC_PI_2,
            ..EgoConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EgoConfig {
            ppm: 0.0,
            ..EgoConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn wrap_is_idempotent_and_congruent(theta in -1e4f64..1e4) {
            let w = wrap_angle(theta).unwrap();
            prop_assert!(w > -PI && w <= PI);
            prop_assert_eq!(wrap_angle(w).unwrap(), w);
            let turns = (theta - w) / TAU;
            prop_assert!((turns - turns.round()).abs() < 1e-9);
        }

        #[test]
        fn direction_partitions(theta in -PI..=PI, alpha in 0.01f64..1.5) {
            let front = theta.abs() <= alpha;
            let left = theta > alpha;
            let right = theta < -alpha;
            prop_assert_eq!([front, left, right].iter().filter(|b| **b).count(), 1);
        }

        #[test]
        fn lane_is_monotone(a in -20.0f64..20.0, b in -20.0f64..20.0, l in 0.1f64..5.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(assign_lane(lo, l) <= assign_lane(hi, l));
        }

        #[test]
        fn ego_round_trip(x in 0.0f64..900.0, y in 0.0f64..500.0, w in 1.0f64..60.0, h in 1.0f64..40.0) {
            let cfg = EgoConfig::default();
            let b = BBox::new(x, y, w, h);
            let back = ego_to_pixel(&pixel_to_ego(&b, &cfg).unwrap(), &cfg);
            let c = b.center();
            prop_assert!((back.x - c.x).abs() / cfg.ppm < 1e-9);
            prop_assert!((back.y - c.y).abs() / cfg.ppm < 1e-9);
        }
    }
}
