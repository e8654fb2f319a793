//! Per-dancer sequence fitting: reprojection, pose/shape priors, temporal
//! smoothness and foot-contact energies, minimised over all frames jointly.

use serde::{Deserialize, Serialize};

use crate::body::{
    fk_generic, project_point, BodyShape, Camera, MotionSequence, Pose, Skeleton, NUM_BETAS,
    POSE_DIM,
};
use crate::error::{Error, Result};
use crate::global_fit::GroundPlane;
use crate::numerics::linalg::{norm_sq, sub, Vec3};
use crate::numerics::optim::{minimize_monotone, DescentOptions};
use crate::numerics::scalar::huber_norm2;
use crate::numerics::{Real, ScalarObjective, Taped};

/// Per frame, per joint: `[u, v, confidence]` in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointTrack {
    pub frames: Vec<Vec<[f64; 3]>>,
}

impl KeypointTrack {
    pub fn new(frames: Vec<Vec<[f64; 3]>>) -> Result<Self> {
        let t = KeypointTrack { frames };
        for (f, frame) in t.frames.iter().enumerate() {
            for (j, k) in frame.iter().enumerate() {
                if !(0.0..=1.0).contains(&k[2]) {
                    return Err(Error::invalid(format!(
                        "keypoint confidence {} at frame {f}, joint {j} is outside [0, 1]",
                        k[2]
                    )));
                }
                if !k[0].is_finite() || !k[1].is_finite() {
                    return Err(Error::invalid(format!("non-finite keypoint at frame {f}, joint {j}")));
                }
            }
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Projects a motion into a noiseless, fully confident track.
    pub fn from_motion(motion: &MotionSequence, camera: &Camera, skeleton: &Skeleton) -> Result<Self> {
        let frames = motion
            .joints(skeleton)?
            .iter()
            .enumerate()
            .map(|(t, joints)| {
                joints
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| {
                        project_point(x, camera)
                            .map(|uv| [uv[0], uv[1], 1.0])
                            .ok_or(Error::BehindCamera {
                                dancer: None,
                                frame: Some(t),
                                joint: j,
                                depth: x[2],
                            })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        KeypointTrack::new(frames)
    }

    pub(crate) fn check_dims(&self, frames: usize, joints: usize) -> Result<()> {
        if self.frames.len() != frames {
            return Err(Error::invalid(format!(
                "track has {} frames, motion has {frames}",
                self.frames.len()
            )));
        }
        if let Some(f) = self.frames.iter().position(|fr| fr.len() != joints) {
            return Err(Error::invalid(format!("track frame {f} does not have {joints} joints")));
        }
        Ok(())
    }
}

/// Binary foot-contact labels, `labels[k][t]` for joint `feet[k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactLabels {
    pub feet: Vec<usize>,
    pub labels: Vec<Vec<bool>>,
}

impl ContactLabels {
    pub fn none(skeleton: &Skeleton, frames: usize) -> Self {
        ContactLabels {
            feet: skeleton.feet().to_vec(),
            labels: vec![vec![false; frames]; skeleton.feet().len()],
        }
    }

    pub fn all(skeleton: &Skeleton, frames: usize) -> Self {
        ContactLabels {
            feet: skeleton.feet().to_vec(),
            labels: vec![vec![true; frames]; skeleton.feet().len()],
        }
    }

    pub fn check(&self, skeleton: &Skeleton, frames: usize) -> Result<()> {
        if self.feet != skeleton.feet() {
            return Err(Error::invalid(format!(
                "contact labels are defined on joints {:?}, skeleton feet are {:?}",
                self.feet,
                skeleton.feet()
            )));
        }
        if self.labels.len() != self.feet.len() || self.labels.iter().any(|l| l.len() != frames) {
            return Err(Error::invalid(format!(
                "contact labels must be {} feet x {frames} frames",
                self.feet.len()
            )));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.labels.iter().flatten().filter(|&&c| c).count()
    }
}

fn default_lambda_theta() -> f64 {
    1.0
}
fn default_lambda_beta() -> f64 {
    0.1
}
fn default_lambda_smooth() -> f64 {
    10.0
}
fn default_lambda_foot() -> f64 {
    10.0
}
fn default_huber_px() -> f64 {
    1.0
}
fn default_iterations() -> usize {
    500
}
fn default_lr_pose() -> f64 {
    1e-2
}
fn default_lr_shape() -> f64 {
    1e-3
}
fn default_rel_tol() -> f64 {
    1e-10
}
fn default_stages() -> [f64; 3] {
    [0.2, 0.4, 0.4]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalFitConfig {
    #[serde(default = "default_lambda_theta")]
    pub lambda_theta: f64,
    #[serde(default = "default_lambda_beta")]
    pub lambda_beta: f64,
    #[serde(default = "default_lambda_smooth")]
    pub lambda_smooth: f64,
    #[serde(default = "default_lambda_foot")]
    pub lambda_foot: f64,
    /// Huber threshold on pixel residuals.
    #[serde(default = "default_huber_px")]
    pub huber_delta: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_lr_pose")]
    pub lr_pose: f64,
    #[serde(default = "default_lr_shape")]
    pub lr_shape: f64,
    /// Relative energy decrease below which a stage counts as converged.
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    /// Fractions of the budget for the τ, (τ, θ) and (τ, θ, β) stages.
    #[serde(default = "default_stages")]
    pub stages: [f64; 3],
}

impl Default for LocalFitConfig {
    fn default() -> Self {
        LocalFitConfig {
            lambda_theta: default_lambda_theta(),
            lambda_beta: default_lambda_beta(),
            lambda_smooth: default_lambda_smooth(),
            lambda_foot: default_lambda_foot(),
            huber_delta: default_huber_px(),
            iterations: default_iterations(),
            lr_pose: default_lr_pose(),
            lr_shape: default_lr_shape(),
            rel_tol: default_rel_tol(),
            stages: default_stages(),
        }
    }
}

impl LocalFitConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let weights = [
            ("lambda_theta", self.lambda_theta),
            ("lambda_beta", self.lambda_beta),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_foot", self.lambda_foot),
        ];
        for (name, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(config_err(prefix, name, format!("weight must be >= 0, got {w}")));
            }
        }
        if self.iterations == 0 {
            return Err(config_err(prefix, "iterations", "budget must be >= 1".into()));
        }
        for (name, v) in [
            ("huber_delta", self.huber_delta),
            ("lr_pose", self.lr_pose),
            ("lr_shape", self.lr_shape),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config_err(prefix, name, format!("must be > 0, got {v}")));
            }
        }
        if !(self.rel_tol >= 0.0) {
            return Err(config_err(prefix, "rel_tol", "must be >= 0".into()));
        }
        if self.stages.iter().any(|s| !(*s >= 0.0)) || self.stages.iter().sum::<f64>() <= 0.0 {
            return Err(config_err(prefix, "stages", "fractions must be >= 0 with a positive sum".into()));
        }
        Ok(())
    }
}

pub(crate) fn config_err(prefix: &str, field: &str, message: String) -> Error {
    let path = if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    };
    Error::Config { path, message }
}

/// Per-term energies of one dancer.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalTerms<R> {
    pub reproj: R,
    pub pose_prior: R,
    pub shape_prior: R,
    pub smooth: R,
    pub foot: R,
}

impl LocalTerms<f64> {
    pub fn total(&self, cfg: &LocalFitConfig) -> f64 {
        self.reproj
            + cfg.lambda_theta * self.pose_prior
            + cfg.lambda_beta * self.shape_prior
            + cfg.lambda_smooth * self.smooth
            + cfg.lambda_foot * self.foot
    }
}

/// Flat optimisation vector: T packed poses `[τ; θ]` followed by β.
pub fn pack_motion(motion: &MotionSequence) -> Vec<f64> {
    let mut x = Vec::with_capacity(motion.len() * POSE_DIM + NUM_BETAS);
    for p in &motion.poses {
        x.extend_from_slice(&p.tau);
        x.extend_from_slice(&p.theta);
    }
    x.extend_from_slice(&motion.shape.beta);
    x
}

pub fn unpack_motion(x: &[f64], frames: usize, fps: f64) -> MotionSequence {
    let poses = (0..frames)
        .map(|t| {
            let y = &x[t * POSE_DIM..(t + 1) * POSE_DIM];
            Pose {
                tau: [y[0], y[1], y[2]],
                theta: y[3..].to_vec(),
            }
        })
        .collect();
    let mut beta = [0.0; NUM_BETAS];
    beta.copy_from_slice(&x[frames * POSE_DIM..frames * POSE_DIM + NUM_BETAS]);
    MotionSequence {
        poses,
        shape: BodyShape { beta },
        fps,
    }
}

/// Joint positions per frame from a flat vector of packed poses and a shape.
pub(crate) fn frames_fk<R: Real>(skeleton: &Skeleton, poses: &[R], beta: &[R], frames: usize) -> Vec<Vec<Vec3<R>>> {
    (0..frames)
        .map(|t| {
            let y = &poses[t * POSE_DIM..(t + 1) * POSE_DIM];
            fk_generic(skeleton, [y[0], y[1], y[2]], &y[3..], beta)
        })
        .collect()
}

pub(crate) fn reproj_generic<R: Real>(
    joints: &[Vec<Vec3<R>>],
    track: &KeypointTrack,
    camera: &Camera,
    delta: f64,
    dancer: Option<usize>,
) -> Result<R> {
    let mut acc = R::zero();
    for (t, frame) in joints.iter().enumerate() {
        for (j, &x) in frame.iter().enumerate() {
            let k = track.frames[t][j];
            let uv = project_point(x, camera).ok_or(Error::BehindCamera {
                dancer,
                frame: Some(t),
                joint: j,
                depth: x[2].value(),
            })?;
            if k[2] == 0.0 {
                continue;
            }
            acc += huber_norm2(uv[0] - k[0], uv[1] - k[1], delta) * k[2];
        }
    }
    Ok(acc)
}

pub(crate) fn smooth_generic<R: Real>(poses: &[R], joints: &[Vec<Vec3<R>>]) -> R {
    let frames = joints.len();
    let mut acc = R::zero();
    for t in 0..frames.saturating_sub(1) {
        let a = &poses[t * POSE_DIM + 3..(t + 1) * POSE_DIM];
        let b = &poses[(t + 1) * POSE_DIM + 3..(t + 2) * POSE_DIM];
        for (p, q) in a.iter().zip(b) {
            acc += (*q - *p).sq();
        }
        for (xa, xb) in joints[t].iter().zip(&joints[t + 1]) {
            acc += norm_sq(sub(*xb, *xa));
        }
    }
    acc
}

pub(crate) fn foot_velocity_generic<R: Real>(joints: &[Vec<Vec3<R>>], contacts: &ContactLabels) -> R {
    let mut acc = R::zero();
    for (k, &j) in contacts.feet.iter().enumerate() {
        for t in 0..joints.len().saturating_sub(1) {
            if contacts.labels[k][t] {
                acc += norm_sq(sub(joints[t + 1][j], joints[t][j]));
            }
        }
    }
    acc
}

/// Everything needed to evaluate one dancer's local energy.
#[derive(Clone, Debug)]
pub struct LocalProblem<'a> {
    pub skeleton: &'a Skeleton,
    pub camera: &'a Camera,
    pub track: &'a KeypointTrack,
    pub contacts: &'a ContactLabels,
    pub config: &'a LocalFitConfig,
    pub frames: usize,
}

impl<'a> LocalProblem<'a> {
    pub fn new(
        skeleton: &'a Skeleton,
        camera: &'a Camera,
        track: &'a KeypointTrack,
        contacts: &'a ContactLabels,
        config: &'a LocalFitConfig,
        frames: usize,
    ) -> Result<Self> {
        if frames == 0 {
            return Err(Error::invalid("motion needs at least one frame"));
        }
        track.check_dims(frames, skeleton.num_joints())?;
        contacts.check(skeleton, frames)?;
        Ok(LocalProblem {
            skeleton,
            camera,
            track,
            contacts,
            config,
            frames,
        })
    }

    pub fn dim(&self) -> usize {
        self.frames * POSE_DIM + NUM_BETAS
    }

    pub fn terms<R: Real>(&self, x: &[R]) -> Result<LocalTerms<R>> {
        let split = self.frames * POSE_DIM;
        let (poses, beta) = (&x[..split], &x[split..]);
        let joints = frames_fk(self.skeleton, poses, beta, self.frames);
        let reproj = reproj_generic(&joints, self.track, self.camera, self.config.huber_delta, None)?;
        let mut pose_prior = R::zero();
        for t in 0..self.frames {
            for v in &poses[t * POSE_DIM + 3..(t + 1) * POSE_DIM] {
                pose_prior += v.sq();
            }
        }
        let mut shape_prior = R::zero();
        for b in beta {
            shape_prior += b.sq();
        }
        Ok(LocalTerms {
            reproj,
            pose_prior,
            shape_prior,
            smooth: smooth_generic(poses, &joints),
            foot: foot_velocity_generic(&joints, self.contacts),
        })
    }

    pub fn total<R: Real>(&self, x: &[R]) -> Result<R> {
        let t = self.terms(x)?;
        let c = self.config;
        Ok(t.reproj
            + t.pose_prior * c.lambda_theta
            + t.shape_prior * c.lambda_beta
            + t.smooth * c.lambda_smooth
            + t.foot * c.lambda_foot)
    }
}

/// Which part of the local energy a [`LocalObjective`] evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalTerm {
    Reproj,
    PosePrior,
    ShapePrior,
    Smooth,
    Foot,
    Total,
}

pub struct LocalObjective<'a> {
    pub problem: LocalProblem<'a>,
    pub term: LocalTerm,
}

impl ScalarObjective for LocalObjective<'_> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn eval<R: Real>(&self, x: &[R]) -> Result<R> {
        if self.term == LocalTerm::Total {
            return self.problem.total(x);
        }
        let t = self.problem.terms(x)?;
        Ok(match self.term {
            LocalTerm::Reproj => t.reproj,
            LocalTerm::PosePrior => t.pose_prior,
            LocalTerm::ShapePrior => t.shape_prior,
            LocalTerm::Smooth => t.smooth,
            LocalTerm::Foot => t.foot,
            LocalTerm::Total => unreachable!(),
        })
    }
}

pub fn e_reproj(
    motion: &MotionSequence,
    track: &KeypointTrack,
    camera: &Camera,
    skeleton: &Skeleton,
    huber_delta: f64,
) -> Result<f64> {
    motion.validate()?;
    track.check_dims(motion.len(), skeleton.num_joints())?;
    let joints = motion.joints(skeleton)?;
    reproj_generic(&joints, track, camera, huber_delta, None)
}

/// Σ_t ‖θ_t − θ_rest‖² with the rest pose at zero rotation.
pub fn e_pose_prior(motion: &MotionSequence) -> f64 {
    motion
        .poses
        .iter()
        .flat_map(|p| p.theta.iter())
        .map(|v| v * v)
        .sum()
}

pub fn e_shape_prior(shape: &BodyShape) -> f64 {
    shape.beta.iter().map(|v| v * v).sum()
}

pub fn e_smooth(motion: &MotionSequence, skeleton: &Skeleton) -> Result<f64> {
    if motion.len() < 2 {
        return Err(Error::invalid("smoothness needs at least two frames"));
    }
    motion.validate()?;
    let joints = motion.joints(skeleton)?;
    Ok(smooth_generic(&pack_motion(motion), &joints))
}

pub fn e_foot(motion: &MotionSequence, contacts: &ContactLabels, skeleton: &Skeleton) -> Result<f64> {
    if motion.len() < 2 {
        return Err(Error::invalid("foot term needs at least two frames"));
    }
    contacts.check(skeleton, motion.len())?;
    let joints = motion.joints(skeleton)?;
    Ok(foot_velocity_generic(&joints, contacts))
}

pub fn local_terms(
    motion: &MotionSequence,
    track: &KeypointTrack,
    contacts: &ContactLabels,
    camera: &Camera,
    config: &LocalFitConfig,
    skeleton: &Skeleton,
) -> Result<LocalTerms<f64>> {
    motion.validate()?;
    let problem = LocalProblem::new(skeleton, camera, track, contacts, config, motion.len())?;
    problem.terms(&pack_motion(motion))
}

pub fn e_local_total(
    motion: &MotionSequence,
    track: &KeypointTrack,
    contacts: &ContactLabels,
    camera: &Camera,
    config: &LocalFitConfig,
    skeleton: &Skeleton,
) -> Result<f64> {
    Ok(local_terms(motion, track, contacts, camera, config, skeleton)?.total(config))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTraceRow {
    pub iteration: usize,
    pub e_j: f64,
    pub e_theta: f64,
    pub e_beta: f64,
    pub e_s: f64,
    pub e_f: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct LocalFitResult {
    pub motion: MotionSequence,
    pub trace: Vec<LocalTraceRow>,
}

fn reject_behind_camera(r: Result<f64>) -> Result<f64> {
    match r {
        Err(Error::BehindCamera { .. }) => Ok(f64::INFINITY),
        other => other,
    }
}

/// Staged fit: τ only, then τ and θ, then everything including β.
pub fn fit_local(
    track: &KeypointTrack,
    contacts: &ContactLabels,
    camera: &Camera,
    init: &MotionSequence,
    config: &LocalFitConfig,
    skeleton: &Skeleton,
) -> Result<LocalFitResult> {
    config.validate("local_fit")?;
    init.validate()?;
    let frames = init.len();
    let problem = LocalProblem::new(skeleton, camera, track, contacts, config, frames)?;
    let objective = Taped(LocalObjective {
        problem: problem.clone(),
        term: LocalTerm::Total,
    });
    let dim = problem.dim();
    let mut x = pack_motion(init);
    let mut trace: Vec<LocalTraceRow> = Vec::new();
    let total_frac: f64 = config.stages.iter().sum();
    let mut offset = 0;
    for (stage, frac) in config.stages.iter().enumerate() {
        let budget = ((config.iterations as f64) * frac / total_frac).round() as usize;
        if budget == 0 {
            continue;
        }
        let lr: Vec<f64> = (0..dim)
            .map(|i| {
                if i >= frames * POSE_DIM {
                    if stage == 2 {
                        config.lr_shape
                    } else {
                        0.0
                    }
                } else if i % POSE_DIM < 3 || stage >= 1 {
                    config.lr_pose
                } else {
                    0.0
                }
            })
            .collect();
        let opts = DescentOptions {
            iterations: budget,
            rel_tol: config.rel_tol,
            ..DescentOptions::default()
        };
        let base = offset;
        let outcome = minimize_monotone(
            &mut x,
            &lr,
            &opts,
            |x| objective.value_and_gradient(x),
            |x| reject_behind_camera(problem.total::<f64>(x)),
            |it, x, _| {
                if it == 0 && !trace.is_empty() {
                    return Ok(());
                }
                let t = problem.terms::<f64>(x)?;
                trace.push(LocalTraceRow {
                    iteration: base + it,
                    e_j: t.reproj,
                    e_theta: t.pose_prior,
                    e_beta: t.shape_prior,
                    e_s: t.smooth,
                    e_f: t.foot,
                    total: t.total(config),
                });
                Ok(())
            },
        );
        match outcome {
            Ok(o) => offset += o.iterations,
            Err(Error::OptimizationFailed { iteration, reason, .. }) => {
                return Err(Error::OptimizationFailed {
                    iteration: base + iteration,
                    reason,
                    last_valid: Box::new(vec![unpack_motion(&x, frames, init.fps)]),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(LocalFitResult {
        motion: unpack_motion(&x, frames, init.fps),
        trace,
    })
}

/// Initial motion from keypoints: depth from the ratio of rest bone lengths
/// to their pixel lengths, root from the back-projected pelvis, rest pose.
pub fn initialize_motion(
    track: &KeypointTrack,
    camera: &Camera,
    skeleton: &Skeleton,
    fps: f64,
) -> Result<MotionSequence> {
    if track.is_empty() {
        return Err(Error::invalid("empty keypoint track"));
    }
    track.check_dims(track.len(), skeleton.num_joints())?;
    let f = 0.5 * (camera.fx + camera.fy);
    let mut last_depth = 5.0;
    let poses = track
        .frames
        .iter()
        .map(|frame| {
            let (mut rest, mut pix) = (0.0, 0.0);
            for j in 1..skeleton.num_joints() {
                let p = skeleton.parent(j).expect("non-root joint");
                let (a, b) = (frame[p], frame[j]);
                if a[2] > 0.1 && b[2] > 0.1 {
                    rest += skeleton.rest_length(j);
                    pix += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                }
            }
            if pix > 1e-6 {
                last_depth = f * rest / pix;
            }
            let z = last_depth;
            let root = frame[0];
            Pose::rest([(root[0] - camera.cx) * z / camera.fx, (root[1] - camera.cy) * z / camera.fy, z])
        })
        .collect();
    MotionSequence::new(poses, BodyShape::default(), fps)
}

/// Heuristic contacts: foot near the plane and nearly stationary.
pub fn detect_contacts(
    motion: &MotionSequence,
    ground: &GroundPlane,
    height_eps: f64,
    vel_eps: f64,
    skeleton: &Skeleton,
) -> Result<ContactLabels> {
    let joints = motion.joints(skeleton)?;
    let frames = joints.len();
    let labels = skeleton
        .feet()
        .iter()
        .map(|&j| {
            (0..frames)
                .map(|t| {
                    let x = joints[t][j];
                    let speed = if frames < 2 {
                        0.0
                    } else if t + 1 < frames {
                        norm_sq(sub(joints[t + 1][j], x)).sqrt()
                    } else {
                        norm_sq(sub(x, joints[t - 1][j])).sqrt()
                    };
                    ground.signed_distance(x) < height_eps && speed < vel_eps
                })
                .collect()
        })
        .collect();
    Ok(ContactLabels {
        feet: skeleton.feet().to_vec(),
        labels,
    })
}
