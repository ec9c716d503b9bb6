//! Planar grasp rectangles, their normalized diffusion coordinates, and the
//! overlap/orientation tests used to score predictions.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension of the diffusion state.
pub const POSE_DIM: usize = 5;

/// IoU a prediction must strictly exceed to count as a success.
pub const IOU_THRESHOLD: f64 = 0.25;

/// Orientation offset a prediction must stay strictly below.
pub const ANGLE_THRESHOLD: f64 = FRAC_PI_6;

/// Reduces an angle modulo π into `[-π/2, π/2)`.
pub fn canonical_angle(theta: f64) -> f64 {
    let mut r = (theta + FRAC_PI_2).rem_euclid(PI);
    if r >= PI {
        r -= PI;
    }
    r - FRAC_PI_2
}

/// An oriented grasp rectangle: center, gripper opening `w`, plate length
/// `h`, and orientation of the opening axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspPose {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta: f64,
}

impl GraspPose {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && theta.is_finite()) {
            return Err(Error::invalid("grasp pose coordinates must be finite"));
        }
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(Error::invalid(format!(
                "grasp size must be positive, got w={w} h={h}"
            )));
        }
        Ok(Self {
            cx,
            cy,
            w,
            h,
            theta: canonical_angle(theta),
        })
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.cx, self.cy, self.w, self.h, self.theta]
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (0.5 * self.w, 0.5 * self.h);
        let u = [c * hw, s * hw];
        let v = [-s * hh, c * hh];
        [
            [self.cx - u[0] - v[0], self.cy - u[1] - v[1]],
            [self.cx + u[0] - v[0], self.cy + u[1] - v[1]],
            [self.cx + u[0] + v[0], self.cy + u[1] + v[1]],
            [self.cx - u[0] + v[0], self.cy - u[1] + v[1]],
        ]
    }

    /// Whether a point lies inside the closed rectangle.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        along.abs() <= 0.5 * self.w && across.abs() <= 0.5 * self.h
    }
}

impl TryFrom<[f64; 5]> for GraspPose {
    type Error = Error;

    fn try_from(a: [f64; 5]) -> Result<Self> {
        GraspPose::new(a[0], a[1], a[2], a[3], a[4])
    }
}

impl Serialize for GraspPose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for GraspPose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 5]>::deserialize(d)?;
        GraspPose::try_from(a).map_err(serde::de::Error::custom)
    }
}

/// A grasp in normalized diffusion coordinates. Unconstrained: noisy states
/// may leave `[-1, 1]^5`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoseVec(pub [f64; POSE_DIM]);

impl PoseVec {
    pub const ZERO: PoseVec = PoseVec([0.0; POSE_DIM]);

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &PoseVec) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, k: f64) -> PoseVec {
        PoseVec(self.0.map(|v| v * k))
    }
}

impl std::ops::Add for PoseVec {
    type Output = PoseVec;

    fn add(self, rhs: PoseVec) -> PoseVec {
        let mut out = self.0;
        for (o, r) in out.iter_mut().zip(rhs.0) {
            *o += r;
        }
        PoseVec(out)
    }
}

impl std::ops::Sub for PoseVec {
    type Output = PoseVec;

    fn sub(self, rhs: PoseVec) -> PoseVec {
        let mut out = self.0;
        for (o, r) in out.iter_mut().zip(rhs.0) {
            *o -= r;
        }
        PoseVec(out)
    }
}

/// Maps a grasp in a square workspace of side `scene_extent` to the
/// normalized state `(2cx/E-1, 2cy/E-1, 2w/E-1, 2h/E-1, θ/(π/2))`.
pub fn encode_pose(g: &GraspPose, scene_extent: f64) -> Result<PoseVec> {
    if !(scene_extent > 0.0 && scene_extent.is_finite()) {
        return Err(Error::invalid(format!(
            "scene extent must be positive, got {scene_extent}"
        )));
    }
    let lin = |v: f64| 2.0 * v / scene_extent - 1.0;
    Ok(PoseVec([
        lin(g.cx),
        lin(g.cy),
        lin(g.w),
        lin(g.h),
        g.theta / FRAC_PI_2,
    ]))
}

/// Inverse of [`encode_pose`]. Sizes are floored at `1e-3·E`; non-finite
/// coordinates decode to a floor-sized rectangle at the workspace origin so
/// the result is always a valid pose.
pub fn decode_pose(v: &PoseVec, scene_extent: f64) -> GraspPose {
    let extent = if scene_extent > 0.0 && scene_extent.is_finite() {
        scene_extent
    } else {
        1.0
    };
    let floor = 1e-3 * extent;
    let lin = |x: f64| {
        let y = 0.5 * (x + 1.0) * extent;
        if y.is_finite() {
            y
        } else {
            0.0
        }
    };
    let size = |x: f64| {
        let y = lin(x);
        if y > floor {
            y
        } else {
            floor
        }
    };
    let theta = if v.0[4].is_finite() {
        v.0[4] * FRAC_PI_2
    } else {
        0.0
    };
    GraspPose {
        cx: lin(v.0[0]),
        cy: lin(v.0[1]),
        w: size(v.0[2]),
        h: size(v.0[3]),
        theta: canonical_angle(theta),
    }
}

/// Result of an overlap computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Iou {
    pub value: f64,
    /// Set when either rectangle has (numerically) zero area.
    pub degenerate: bool,
}

fn shoelace(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc
}

fn cross(o: [f64; 2], a: [f64; 2], p: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0])
}

/// Sutherland–Hodgman clipping of `subject` by the convex, counter-clockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let mut prev = *input.last().unwrap();
        let mut prev_side = cross(a, b, prev);
        for &cur in &input {
            let cur_side = cross(a, b, cur);
            if cur_side >= 0.0 {
                if prev_side < 0.0 {
                    output.push(intersect(prev, cur, prev_side, cur_side));
                }
                output.push(cur);
            } else if prev_side >= 0.0 {
                output.push(intersect(prev, cur, prev_side, cur_side));
            }
            prev = cur;
            prev_side = cur_side;
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Intersection-over-union of two oriented rectangles by exact convex
/// polygon clipping.
pub fn rect_iou(a: &GraspPose, b: &GraspPose) -> Iou {
    let (area_a, area_b) = (a.area(), b.area());
    let tiny = f64::MIN_POSITIVE.sqrt();
    if !(area_a > tiny && area_b > tiny) || !(area_a.is_finite() && area_b.is_finite()) {
        return Iou {
            value: 0.0,
            degenerate: true,
        };
    }
    if a == b {
        return Iou {
            value: 1.0,
            degenerate: false,
        };
    }
    // Clip the smaller rectangle by the larger one, making the result
    // independent of argument order.
    let (small, large) = if (area_a, a.to_array()) <= (area_b, b.to_array()) {
        (a, b)
    } else {
        (b, a)
    };
    let inter = shoelace(&clip_convex(&small.corners(), &large.corners())).max(0.0);
    let union = area_a + area_b - inter;
    let value = if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Iou {
        value,
        degenerate: false,
    }
}

/// Orientation difference under the π-periodic symmetry of a rectangle,
/// in `[0, π/2]`.
pub fn angle_offset(a: &GraspPose, b: &GraspPose) -> f64 {
    angle_offset_raw(a.theta, b.theta)
}

pub(crate) fn angle_offset_raw(ta: f64, tb: f64) -> f64 {
    let d = (ta - tb).abs().rem_euclid(PI);
    d.min(PI - d).clamp(0.0, FRAC_PI_2)
}

/// A prediction succeeds when some ground-truth grasp has IoU strictly above
/// 25% and orientation offset strictly below 30°.
pub fn is_success(pred: &GraspPose, gts: &[GraspPose]) -> Result<bool> {
    if gts.is_empty() {
        return Err(Error::invalid("ground-truth grasp set is empty"));
    }
    Ok(gts.iter().any(|g| {
        angle_offset(pred, g) < ANGLE_THRESHOLD && rect_iou(pred, g).value > IOU_THRESHOLD
    }))
}

/// Harmonic mean of the seen and unseen success rates; zero if either is.
pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen <= 0.0 || unseen <= 0.0 {
        return 0.0;
    }
    2.0 * seen * unseen / (seen + unseen)
}
