//! Joints-only articulated body: pose/shape/translation to 3D joints,
//! pinhole projection, and capsule collision proxies.

pub mod capsule;
mod skeleton;

pub use capsule::{body_capsules, capsule_clearance, segment_distance, Capsule};
pub use skeleton::{
    default_skeleton_hash, sha256_hex, Skeleton, SkeletonFile, DEFAULT_SKELETON_JSON, NUM_BETAS,
    NUM_JOINTS, SCALE_RANGE, SKELETON_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::linalg::{add, identity, mat_mul, mat_vec, Mat3, Vec3};
use crate::numerics::scalar::rodrigues;
use crate::numerics::Real;

pub const THETA_DIM: usize = 3 * NUM_JOINTS;
/// Packed pose layout: root translation (3) followed by 23 axis-angle rotations.
pub const POSE_DIM: usize = 3 + THETA_DIM;

/// Minimum depth a joint must have to be projected.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Root translation, meters.
    pub tau: [f64; 3],
    /// Axis-angle per joint, joint 0 is the global root orientation.
    pub theta: Vec<f64>,
}

impl Pose {
    pub fn rest(tau: [f64; 3]) -> Self {
        Pose {
            tau,
            theta: vec![0.0; THETA_DIM],
        }
    }

    pub fn joint_rotation(&self, j: usize) -> [f64; 3] {
        [self.theta[3 * j], self.theta[3 * j + 1], self.theta[3 * j + 2]]
    }

    pub fn set_joint_rotation(&mut self, j: usize, w: [f64; 3]) {
        self.theta[3 * j..3 * j + 3].copy_from_slice(&w);
    }

    fn validate(&self) -> Result<()> {
        if self.theta.len() != THETA_DIM {
            return Err(Error::invalid(format!(
                "pose needs {THETA_DIM} rotation parameters, got {}",
                self.theta.len()
            )));
        }
        if !self.tau.iter().chain(&self.theta).all(|v| v.is_finite()) {
            return Err(Error::invalid("pose contains non-finite values"));
        }
        Ok(())
    }
}

pub fn pack_pose(pose: &Pose) -> Result<Vec<f64>> {
    pose.validate()?;
    let mut y = Vec::with_capacity(POSE_DIM);
    y.extend_from_slice(&pose.tau);
    y.extend_from_slice(&pose.theta);
    Ok(y)
}

pub fn unpack_pose(y: &[f64]) -> Result<Pose> {
    if y.len() != POSE_DIM {
        return Err(Error::invalid(format!(
            "packed pose must have {POSE_DIM} entries, got {}",
            y.len()
        )));
    }
    Ok(Pose {
        tau: [y[0], y[1], y[2]],
        theta: y[3..].to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyShape {
    pub beta: [f64; NUM_BETAS],
}

impl Default for BodyShape {
    fn default() -> Self {
        BodyShape {
            beta: [0.0; NUM_BETAS],
        }
    }
}

/// Pinhole camera; the world frame is the camera frame with z as depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let c = Camera { fx, fy, cx, cy };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        Ok(())
    }
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            fx: 1000.0,
            fy: 1000.0,
            cx: 960.0,
            cy: 540.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    pub poses: Vec<Pose>,
    pub shape: BodyShape,
    pub fps: f64,
}

pub const DEFAULT_FPS: f64 = 30.0;

impl MotionSequence {
    pub fn new(poses: Vec<Pose>, shape: BodyShape, fps: f64) -> Result<Self> {
        let m = MotionSequence { poses, shape, fps };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.poses.is_empty() {
            return Err(Error::invalid("motion needs at least one frame"));
        }
        if !(self.fps > 0.0) {
            return Err(Error::invalid("frame rate must be positive"));
        }
        if !self.shape.beta.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("shape contains non-finite values"));
        }
        self.poses.iter().try_for_each(Pose::validate)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Joint positions for every frame.
    pub fn joints(&self, skeleton: &Skeleton) -> Result<Vec<Vec<[f64; 3]>>> {
        self.poses
            .iter()
            .map(|p| forward_kinematics(p, &self.shape, skeleton))
            .collect()
    }
}

/// Mean per-joint position error between two motions of equal length.
pub fn mpjpe(a: &MotionSequence, b: &MotionSequence, skeleton: &Skeleton) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("motions have {} and {} frames", a.len(), b.len())));
    }
    let (ja, jb) = (a.joints(skeleton)?, b.joints(skeleton)?);
    let mut sum = 0.0;
    let mut n = 0.0;
    for (fa, fb) in ja.iter().zip(&jb) {
        for (x, y) in fa.iter().zip(fb) {
            sum += (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>().sqrt();
            n += 1.0;
        }
    }
    Ok(sum / n)
}

/// Per-joint scale of the rest offset, clamped to [`SCALE_RANGE`].
pub fn bone_scale<R: Real>(skeleton: &Skeleton, j: usize, beta: &[R]) -> R {
    let row = skeleton.beta_row(j);
    let mut s = R::cst(1.0);
    for (k, &c) in row.iter().enumerate() {
        if c != 0.0 {
            s += beta[k] * c;
        }
    }
    s.clamp(SCALE_RANGE.0, SCALE_RANGE.1)
}

/// Joint positions from root translation, axis-angle rotations and shape.
///
/// `theta` has [`THETA_DIM`] entries and `beta` [`NUM_BETAS`].
pub fn fk_generic<R: Real>(skeleton: &Skeleton, tau: Vec3<R>, theta: &[R], beta: &[R]) -> Vec<Vec3<R>> {
    let n = skeleton.num_joints();
    let mut has_children = vec![false; n];
    for j in 1..n {
        if let Some(p) = skeleton.parent(j) {
            has_children[p] = true;
        }
    }
    let mut pos: Vec<Vec3<R>> = Vec::with_capacity(n);
    let mut glob: Vec<Mat3<R>> = Vec::with_capacity(n);
    for j in 0..n {
        let w = [theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]];
        match skeleton.parent(j) {
            None => {
                pos.push(tau);
                glob.push(rodrigues(w));
            }
            Some(p) => {
                let o = skeleton.offset(j);
                let s = bone_scale(skeleton, j, beta);
                let local = [s * o[0], s * o[1], s * o[2]];
                let x = add(pos[p], mat_vec(&glob[p], local));
                pos.push(x);
                if has_children[j] {
                    let g = mat_mul(&glob[p], &rodrigues(w));
                    glob.push(g);
                } else {
                    glob.push(identity());
                }
            }
        }
    }
    pos
}

pub fn forward_kinematics(pose: &Pose, shape: &BodyShape, skeleton: &Skeleton) -> Result<Vec<[f64; 3]>> {
    pose.validate()?;
    if !shape.beta.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("shape contains non-finite values"));
    }
    Ok(fk_generic(skeleton, pose.tau, &pose.theta, &shape.beta))
}

/// Pinhole projection of one point; fails when the point is not in front.
pub fn project_point<R: Real>(x: Vec3<R>, camera: &Camera) -> Option<[R; 2]> {
    if x[2].value() <= MIN_DEPTH {
        return None;
    }
    let inv = R::cst(1.0) / x[2];
    Some([x[0] * inv * camera.fx + camera.cx, x[1] * inv * camera.fy + camera.cy])
}

pub fn project(joints: &[[f64; 3]], camera: &Camera) -> Result<Vec<[f64; 2]>> {
    joints
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            project_point(x, camera).ok_or(Error::BehindCamera {
                dancer: None,
                frame: None,
                joint: j,
                depth: x[2],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ScalarObjective, Taped, DEFAULT_FD_STEP};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    fn random_pose(rng: &mut ChaCha8Rng, spread: f64) -> Pose {
        Pose {
            tau: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(4.0..6.0)],
            theta: (0..THETA_DIM).map(|_| rng.random_range(-spread..spread)).collect(),
        }
    }

    #[test]
    fn identity_pose_translates_rest_skeleton() {
        let s = Skeleton::default();
        let x0 = forward_kinematics(&Pose::rest([0.0; 3]), &BodyShape::default(), &s).unwrap();
        let x1 = forward_kinematics(&Pose::rest([1.0, 2.0, 3.0]), &BodyShape::default(), &s).unwrap();
        assert_eq!(x1[0], [1.0, 2.0, 3.0]);
        for (a, b) in x0.iter().zip(&x1) {
            for k in 0..3 {
                assert!((b[k] - a[k] - [1.0, 2.0, 3.0][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn root_half_turn_rotates_everything() {
        let s = Skeleton::default();
        let rest = forward_kinematics(&Pose::rest([0.0; 3]), &BodyShape::default(), &s).unwrap();
        let mut p = Pose::rest([0.0; 3]);
        p.set_joint_rotation(0, [0.0, 0.0, std::f64::consts::PI]);
        let turned = forward_kinematics(&p, &BodyShape::default(), &s).unwrap();
        let r = crate::numerics::rodrigues([0.0, 0.0, std::f64::consts::PI]).unwrap();
        for (a, b) in rest.iter().zip(&turned) {
            let expect = mat_vec(&r, *a);
            assert!(dist(expect, *b) < 1e-12);
            // a half turn about z negates x and y
            assert!((b[0] + a[0]).abs() < 1e-12 && (b[1] + a[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn beta_scales_every_bone() {
        let s = Skeleton::default();
        let mut shape = BodyShape::default();
        shape.beta[0] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = forward_kinematics(&random_pose(&mut rng, 0.5), &shape, &s).unwrap();
        for j in 1..s.num_joints() {
            let len = dist(x[j], x[s.parent(j).unwrap()]);
            assert!((len - 1.1 * s.rest_length(j)).abs() < 1e-9, "joint {j}");
        }
    }

    #[test]
    fn bone_scale_is_clamped() {
        let s = Skeleton::default();
        let mut beta = [0.0; NUM_BETAS];
        beta[0] = -100.0;
        assert_eq!(bone_scale(&s, 4, &beta), SCALE_RANGE.0);
        beta[0] = 100.0;
        assert_eq!(bone_scale(&s, 4, &beta), SCALE_RANGE.1);
    }

    #[test]
    fn projection_examples() {
        let cam = Camera::new(1000.0, 1000.0, 500.0, 500.0).unwrap();
        let uv = project(&[[0.0, 0.0, 5.0], [1.0, 0.0, 2.0]], &cam).unwrap();
        assert_eq!(uv[0], [500.0, 500.0]);
        assert_eq!(uv[1], [1000.0, 500.0]);
        let near = project(&[[0.3, -0.2, 2.0]], &cam).unwrap()[0];
        let far = project(&[[0.3, -0.2, 4.0]], &cam).unwrap()[0];
        assert!(((far[0] - 500.0) * 2.0 - (near[0] - 500.0)).abs() < 1e-12);
        assert!(((far[1] - 500.0) * 2.0 - (near[1] - 500.0)).abs() < 1e-12);
        match project(&[[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]], &cam) {
            Err(Error::BehindCamera { joint, .. }) => assert_eq!(joint, 1),
            other => panic!("expected behind-camera error, got {other:?}"),
        }
        assert!(Camera::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn pack_unpack_layout() {
        assert_eq!(pack_pose(&Pose::rest([0.0; 3])).unwrap(), vec![0.0; POSE_DIM]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_pose(&mut rng, 1.0);
        let y = pack_pose(&p).unwrap();
        assert_eq!(&y[..3], &p.tau);
        let back = unpack_pose(&y).unwrap();
        assert_eq!(back, p);
        assert!(unpack_pose(&y[..71]).is_err());
    }

    struct ProjectedFk {
        skeleton: Skeleton,
        camera: Camera,
        weights: Vec<f64>,
    }

    impl ScalarObjective for ProjectedFk {
        fn dim(&self) -> usize {
            POSE_DIM + NUM_BETAS
        }
        fn eval<R: Real>(&self, x: &[R]) -> crate::error::Result<R> {
            let tau = [x[0], x[1], x[2]];
            let joints = fk_generic(&self.skeleton, tau, &x[3..POSE_DIM], &x[POSE_DIM..]);
            let mut acc = R::zero();
            for (j, p) in joints.iter().enumerate() {
                let uv = project_point(*p, &self.camera).unwrap();
                acc += (uv[0] * self.weights[2 * j] + uv[1] * self.weights[2 * j + 1]) * 1e-3;
                acc += p[2] * self.weights[j];
            }
            Ok(acc)
        }
    }

    #[test]
    fn projected_fk_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = Taped(ProjectedFk {
            skeleton: Skeleton::default(),
            camera: Camera::default(),
            weights: (0..2 * NUM_JOINTS).map(|_| rng.random_range(-1.0..1.0)).collect(),
        });
        for _ in 0..10 {
            let p = random_pose(&mut rng, 0.8);
            let mut x = pack_pose(&p).unwrap();
            x.extend((0..NUM_BETAS).map(|_| rng.random_range(-1.0..1.0)));
            let r = grad_check(&f, &x, DEFAULT_FD_STEP).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn fk_preserves_bone_lengths(seed in any::<u64>()) {
            let s = Skeleton::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut shape = BodyShape::default();
            for b in shape.beta.iter_mut() {
                *b = rng.random_range(-1.0..1.0);
            }
            let base = forward_kinematics(&Pose::rest([0.0; 3]), &shape, &s).unwrap();
            let posed = forward_kinematics(&random_pose(&mut rng, 3.0), &shape, &s).unwrap();
            for j in 1..s.num_joints() {
                let p = s.parent(j).unwrap();
                prop_assert!((dist(base[j], base[p]) - dist(posed[j], posed[p])).abs() < 1e-9);
            }
        }
    }
}
