//! Oriented grasp rectangles, convex clipping and the rectangle metric.
//!
//! Angles are radians, counter-clockwise from +x in a frame whose y axis
//! points down the image. A grasp angle is π-periodic; [`canonical_angle`]
//! folds it into `(-π/2, π/2]`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points closer than this to a clip edge count as inside.
pub const CLIP_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid grasp: {0}")]
    InvalidGrasp(String),
    #[error("ground-truth list is empty")]
    EmptyGroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }
}

/// Folds an angle onto the π-periodic range `(-π/2, π/2]`.
pub fn canonical_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(PI);
    // t in [0, π)
    if t > FRAC_PI_2 {
        t -= PI;
    }
    t
}

/// Distance between two grasp angles on the π-periodic circle, in `[0, π/2]`.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// A parallel-jaw grasp: center, orientation, gripper opening and jaw size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspPose {
    pub center_x: f64,
    pub center_y: f64,
    /// Radians, canonical range `(-π/2, π/2]`.
    pub angle: f64,
    /// Extent along the grasp axis (jaw separation).
    pub opening: f64,
    /// Extent perpendicular to the grasp axis.
    pub jaw_size: f64,
}

impl GraspPose {
    /// Builds a validated pose; the angle is canonicalized.
    pub fn new(center_x: f64, center_y: f64, angle: f64, opening: f64, jaw_size: f64) -> Result<Self, GeometryError> {
        let pose = Self {
            center_x,
            center_y,
            angle: canonical_angle(angle),
            opening,
            jaw_size,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let fields = [
            ("center_x", self.center_x),
            ("center_y", self.center_y),
            ("angle", self.angle),
            ("opening", self.opening),
            ("jaw_size", self.jaw_size),
        ];
        if let Some((name, v)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(GeometryError::InvalidGrasp(format!("{name} is not finite ({v})")));
        }
        if self.opening <= 0.0 {
            return Err(GeometryError::InvalidGrasp(format!(
                "opening must be positive, got {}",
                self.opening
            )));
        }
        if self.jaw_size <= 0.0 {
            return Err(GeometryError::InvalidGrasp(format!(
                "jaw_size must be positive, got {}",
                self.jaw_size
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Point {
        Point::new(self.center_x, self.center_y)
    }

    /// Unit vector along the grasp axis.
    pub fn axis(&self) -> Point {
        Point::new(self.angle.cos(), self.angle.sin())
    }

    pub fn rectangle(&self) -> GraspRectangle {
        GraspRectangle::from_grasp(self)
    }
}

/// Oriented rectangle with corners in positive (shoelace) order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspRectangle {
    pub corners: [Point; 4],
}

impl GraspRectangle {
    /// `center ± (opening/2)·u ± (jaw/2)·v` with `u = (cos θ, sin θ)` and
    /// `v = (-sin θ, cos θ)`. The pose is assumed valid.
    pub fn from_grasp(g: &GraspPose) -> Self {
        let (s, c) = g.angle.sin_cos();
        let a = g.opening / 2.0;
        let b = g.jaw_size / 2.0;
        let (ux, uy) = (a * c, a * s);
        let (vx, vy) = (-b * s, b * c);
        let (cx, cy) = (g.center_x, g.center_y);
        Self {
            corners: [
                Point::new(cx - ux - vx, cy - uy - vy),
                Point::new(cx + ux - vx, cy + uy - vy),
                Point::new(cx + ux + vx, cy + uy + vy),
                Point::new(cx - ux + vx, cy - uy + vy),
            ],
        }
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.corners)
    }

    pub fn centroid(&self) -> Point {
        let (sx, sy) = self.corners.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point::new(sx / 4.0, sy / 4.0)
    }
}

/// Validated constructor for [`GraspRectangle`].
pub fn rect_from_grasp(g: &GraspPose) -> Result<GraspRectangle, GeometryError> {
    g.validate()?;
    Ok(GraspRectangle::from_grasp(g))
}

/// Shoelace area; positive for counter-clockwise (in the math sense) order.
pub fn signed_area(poly: &[Point]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let n = poly.len();
    let twice: f64 = (0..n).map(|i| poly[i].cross(poly[(i + 1) % n])).sum();
    twice / 2.0
}

/// Sutherland–Hodgman: clips `subject` by the convex, positively oriented `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let e0 = clip[i];
        let e1 = clip[(i + 1) % m];
        let edge = e1.sub(e0);
        let len = edge.x.hypot(edge.y);
        // signed distance to the edge line, positive on the inner side
        let side = |p: Point| edge.cross(p.sub(e0)) / len;

        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let next = input[(j + 1) % n];
            let dc = side(cur);
            let dn = side(next);
            let cur_in = dc >= -CLIP_EPSILON;
            let next_in = dn >= -CLIP_EPSILON;
            if cur_in {
                output.push(cur);
            }
            if cur_in != next_in {
                let t = dc / (dc - dn);
                output.push(Point::new(cur.x + t * (next.x - cur.x), cur.y + t * (next.y - cur.y)));
            }
        }
    }
    output
}

/// Area of `a ∩ b`; zero when disjoint.
pub fn intersection_area(a: &GraspRectangle, b: &GraspRectangle) -> f64 {
    let clipped = clip_convex(&a.corners, &b.corners);
    signed_area(&clipped).abs()
}

/// Intersection over union, clamped to `[0, 1]`.
pub fn iou(a: &GraspRectangle, b: &GraspRectangle) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Best IOU of `pred` against `gts` and the arg-max index (lowest index on ties).
pub fn max_iou(pred: &GraspPose, gts: &[GraspPose]) -> Result<(f64, usize), GeometryError> {
    if gts.is_empty() {
        return Err(GeometryError::EmptyGroundTruth);
    }
    let pr = pred.rectangle();
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, gt) in gts.iter().enumerate() {
        let v = iou(&pr, &gt.rectangle());
        if v > best.0 {
            best = (v, i);
        }
    }
    Ok(best)
}

/// Thresholds for the rectangle success metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessCriteria {
    pub iou_min: f64,
    /// Radians.
    pub angle_max: f64,
}

impl Default for SuccessCriteria {
    fn default() -> Self {
        Self {
            iou_min: 0.25,
            angle_max: 30f64.to_radians(),
        }
    }
}

/// True iff some ground truth has `iou >= iou_min` and `angle_distance <= angle_max`.
pub fn grasp_success(pred: &GraspPose, gts: &[GraspPose], criteria: SuccessCriteria) -> Result<bool, GeometryError> {
    if gts.is_empty() {
        return Err(GeometryError::EmptyGroundTruth);
    }
    let pr = pred.rectangle();
    Ok(gts.iter().any(|gt| {
        angle_distance(pred.angle, gt.angle) <= criteria.angle_max && iou(&pr, &gt.rectangle()) >= criteria.iou_min
    }))
}
