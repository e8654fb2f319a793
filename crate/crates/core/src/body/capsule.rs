use crate::numerics::linalg::{add, dot, norm_sq, scale, sub, Vec3};
use crate::numerics::Real;

use super::Skeleton;

/// Line segment with a radius, in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

impl Capsule {
    /// Center and radius of a sphere enclosing the capsule.
    pub fn bounding_sphere(&self) -> ([f64; 3], f64) {
        let c = [
            0.5 * (self.a[0] + self.b[0]),
            0.5 * (self.a[1] + self.b[1]),
            0.5 * (self.a[2] + self.b[2]),
        ];
        let half = norm_sq(sub(self.b, self.a)).sqrt() * 0.5;
        (c, half + self.radius)
    }
}

const SEG_EPS: f64 = 1e-12;

/// Minimum distance between segments `p1q1` and `p2q2`.
///
/// For (near-)parallel segments the closest-point parameter on the first
/// segment is pinned to its start, which picks one of the equally distant
/// pairs; the value stays exact and the derivative is a valid subgradient.
pub fn segment_distance<R: Real>(p1: Vec3<R>, q1: Vec3<R>, p2: Vec3<R>, q2: Vec3<R>) -> R {
    let d1 = sub(q1, p1);
    let d2 = sub(q2, p2);
    let r = sub(p1, p2);
    let a = norm_sq(d1);
    let e = norm_sq(d2);
    let f = dot(d2, r);
    let zero = R::zero();
    let (s, t);
    if a.value() <= SEG_EPS && e.value() <= SEG_EPS {
        s = zero;
        t = zero;
    } else if a.value() <= SEG_EPS {
        s = zero;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = dot(d1, r);
        if e.value() <= SEG_EPS {
            t = zero;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = dot(d1, d2);
            let denom = a * e - b * b;
            let s0 = if denom.value() > SEG_EPS * a.value() * e.value() {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                zero
            };
            let t0 = (b * s0 + f) / e;
            if t0.value() < 0.0 {
                t = zero;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t0.value() > 1.0 {
                t = R::cst(1.0);
                s = ((b - c) / a).clamp(0.0, 1.0);
            } else {
                t = t0;
                s = s0;
            }
        }
    }
    let c1 = add(p1, scale(d1, s));
    let c2 = add(p2, scale(d2, t));
    norm_sq(sub(c1, c2)).sqrt()
}

/// Segment distance minus both radii; negative means interpenetration.
pub fn capsule_clearance(a: &Capsule, b: &Capsule) -> f64 {
    segment_distance(a.a, a.b, b.a, b.b) - (a.radius + b.radius)
}

pub(crate) fn clearance_generic<R: Real>(
    a: (Vec3<R>, Vec3<R>, f64),
    b: (Vec3<R>, Vec3<R>, f64),
) -> R {
    segment_distance(a.0, a.1, b.0, b.1) - (a.2 + b.2)
}

/// One capsule per joint: parent-to-joint bones plus a sphere at the root.
pub fn body_capsules(joints: &[[f64; 3]], skeleton: &Skeleton) -> Vec<Capsule> {
    (0..skeleton.num_joints())
        .map(|j| {
            let a = skeleton.parent(j).map_or(joints[j], |p| joints[p]);
            Capsule {
                a,
                b: joints[j],
                radius: skeleton.radius(j),
            }
        })
        .collect()
}

/// Generic twin of [`body_capsules`] for taped joint positions.
pub(crate) fn body_segments<R: Real>(joints: &[Vec3<R>], skeleton: &Skeleton) -> Vec<(Vec3<R>, Vec3<R>, f64)> {
    (0..skeleton.num_joints())
        .map(|j| {
            let a = skeleton.parent(j).map_or(joints[j], |p| joints[p]);
            (a, joints[j], skeleton.radius(j))
        })
        .collect()
}
