//! Joint refinement of all dancers: penetration, regularisation toward the
//! per-dancer solutions, ordinal depth, and ground contact.

mod plane;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use plane::{
    fit_ground_plane, fit_plane_least_squares, plane_objective, weighted_geometric_median, weighted_median, GroundPlane,
    PlaneFitOptions, PlaneObjective,
};

use crate::body::capsule::{body_capsules, body_segments, capsule_clearance, clearance_generic, Capsule};
use crate::body::{Camera, MotionSequence, Pose, Skeleton, POSE_DIM};
use crate::error::{Error, Result};
use crate::local_fit::{config_err, foot_velocity_generic, frames_fk, reproj_generic, ContactLabels, KeypointTrack};
use crate::numerics::linalg::Vec3;
use crate::numerics::optim::{minimize_monotone, DescentOptions};
use crate::numerics::scalar::softplus;
use crate::numerics::{Real, ScalarObjective, Taped};

/// Ordinal depth labels `r_t(p, p′) ∈ {−1, 0, 1}`; 1 means p is closer.
///
/// Stored once per unordered pair; lookups in either order are antisymmetric.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthAnnotation {
    entries: BTreeMap<(usize, usize, usize), i8>,
}

impl DepthAnnotation {
    pub fn new() -> Self {
        Self::default()
    }

    /// From `(t, p, p′, r)` triples; contradicting duplicates are rejected.
    pub fn from_triples(triples: &[(usize, usize, usize, i64)]) -> Result<Self> {
        let mut a = DepthAnnotation::new();
        for &(t, p, q, r) in triples {
            let r = i8::try_from(r)
                .ok()
                .filter(|r| (-1..=1).contains(r))
                .ok_or_else(|| Error::invalid(format!("depth label must be -1, 0 or 1, got {r}")))?;
            if let Some(old) = a.get(t, p, q) {
                if old != r {
                    return Err(Error::invalid(format!(
                        "conflicting depth labels for frame {t}, dancers ({p}, {q})"
                    )));
                }
            }
            a.set(t, p, q, r)?;
        }
        Ok(a)
    }

    pub fn set(&mut self, t: usize, p: usize, q: usize, r: i8) -> Result<()> {
        if p == q {
            return Err(Error::invalid("depth annotation pairs a dancer with itself"));
        }
        if !(-1..=1).contains(&r) {
            return Err(Error::invalid(format!("depth label must be -1, 0 or 1, got {r}")));
        }
        if p < q {
            self.entries.insert((t, p, q), r);
        } else {
            self.entries.insert((t, q, p), -r);
        }
        Ok(())
    }

    pub fn get(&self, t: usize, p: usize, q: usize) -> Option<i8> {
        if p < q {
            self.entries.get(&(t, p, q)).copied()
        } else {
            self.entries.get(&(t, q, p)).map(|r| -r)
        }
    }

    /// Canonical `(t, p, p′, r)` with `p < p′`, ordered by frame then pair.
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, usize, i8)> + '_ {
        self.entries.iter().map(|(&(t, p, q), &r)| (t, p, q, r))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn check(&self, dancers: usize, frames: usize) -> Result<()> {
        for (t, p, q, _) in self.triples() {
            if t >= frames || q >= dancers {
                return Err(Error::invalid(format!(
                    "depth annotation (frame {t}, dancers {p}, {q}) is out of range for {dancers} dancers x {frames} frames"
                )));
            }
        }
        Ok(())
    }
}

fn default_lambda_pen() -> f64 {
    1e3
}
fn default_lambda_reg() -> f64 {
    0.1
}
fn default_lambda_dep() -> f64 {
    1.0
}
fn default_lambda_gc() -> f64 {
    10.0
}
fn default_plane_delta() -> f64 {
    0.05
}
fn default_huber_px() -> f64 {
    1.0
}
fn default_iterations() -> usize {
    300
}
fn default_lr() -> f64 {
    1e-2
}
fn default_rel_tol() -> f64 {
    1e-10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalFitConfig {
    #[serde(default = "default_lambda_pen")]
    pub lambda_pen: f64,
    #[serde(default = "default_lambda_reg")]
    pub lambda_reg: f64,
    #[serde(default = "default_lambda_dep")]
    pub lambda_dep: f64,
    #[serde(default = "default_lambda_gc")]
    pub lambda_gc: f64,
    #[serde(default = "default_plane_delta")]
    pub plane_delta: f64,
    #[serde(default = "default_huber_px")]
    pub huber_delta: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
}

impl Default for GlobalFitConfig {
    fn default() -> Self {
        GlobalFitConfig {
            lambda_pen: default_lambda_pen(),
            lambda_reg: default_lambda_reg(),
            lambda_dep: default_lambda_dep(),
            lambda_gc: default_lambda_gc(),
            plane_delta: default_plane_delta(),
            huber_delta: default_huber_px(),
            iterations: default_iterations(),
            lr: default_lr(),
            rel_tol: default_rel_tol(),
        }
    }
}

impl GlobalFitConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        for (name, w) in [
            ("lambda_pen", self.lambda_pen),
            ("lambda_reg", self.lambda_reg),
            ("lambda_dep", self.lambda_dep),
            ("lambda_gc", self.lambda_gc),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(config_err(prefix, name, format!("weight must be >= 0, got {w}")));
            }
        }
        for (name, v) in [
            ("plane_delta", self.plane_delta),
            ("huber_delta", self.huber_delta),
            ("lr", self.lr),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config_err(prefix, name, format!("must be > 0, got {v}")));
            }
        }
        if self.iterations == 0 {
            return Err(config_err(prefix, "iterations", "budget must be >= 1".into()));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(config_err(prefix, "rel_tol", "must be >= 0".into()));
        }
        Ok(())
    }
}

/// Σ over frames, dancer pairs p < p′ and capsule pairs of max(0, −clearance)².
///
/// `frames[t][p]` holds dancer p's capsules at frame t.
pub fn e_pen_capsules(frames: &[Vec<Vec<Capsule>>]) -> f64 {
    let mut acc = 0.0;
    for dancers in frames {
        for p in 0..dancers.len() {
            for q in p + 1..dancers.len() {
                for a in &dancers[p] {
                    for b in &dancers[q] {
                        let c = capsule_clearance(a, b);
                        if c < 0.0 {
                            acc += c * c;
                        }
                    }
                }
            }
        }
    }
    acc
}

fn check_group(motions: &[MotionSequence]) -> Result<usize> {
    let first = motions.first().ok_or_else(|| Error::invalid("no dancers given"))?;
    let frames = first.len();
    for (p, m) in motions.iter().enumerate() {
        m.validate()?;
        if m.len() != frames {
            return Err(Error::invalid(format!(
                "dancer {p} has {} frames, dancer 0 has {frames}",
                m.len()
            )));
        }
    }
    Ok(frames)
}

pub fn e_pen(motions: &[MotionSequence], skeleton: &Skeleton) -> Result<f64> {
    if motions.len() < 2 {
        return Err(Error::invalid("penetration needs at least two dancers"));
    }
    let frames = check_group(motions)?;
    let joints = motions
        .iter()
        .map(|m| m.joints(skeleton))
        .collect::<Result<Vec<_>>>()?;
    let caps: Vec<Vec<Vec<Capsule>>> = (0..frames)
        .map(|t| joints.iter().map(|j| body_capsules(&j[t], skeleton)).collect())
        .collect();
    Ok(e_pen_capsules(&caps))
}

/// Deepest inter-dancer capsule overlap over all frames, in meters (0 if none).
pub fn max_penetration(motions: &[MotionSequence], skeleton: &Skeleton) -> Result<f64> {
    let frames = check_group(motions)?;
    let joints = motions
        .iter()
        .map(|m| m.joints(skeleton))
        .collect::<Result<Vec<_>>>()?;
    let mut worst: f64 = 0.0;
    for t in 0..frames {
        let caps: Vec<Vec<Capsule>> = joints.iter().map(|j| body_capsules(&j[t], skeleton)).collect();
        for p in 0..caps.len() {
            for q in p + 1..caps.len() {
                for a in &caps[p] {
                    for b in &caps[q] {
                        worst = worst.max(-capsule_clearance(a, b));
                    }
                }
            }
        }
    }
    Ok(worst)
}

fn bounding_sphere<R: Real>(segs: &[(Vec3<R>, Vec3<R>, f64)]) -> ([f64; 3], f64) {
    let n = segs.len() as f64;
    let mut c = [0.0; 3];
    for s in segs {
        for k in 0..3 {
            c[k] += s.1[k].value() / n;
        }
    }
    let mut r: f64 = 0.0;
    for s in segs {
        for end in [s.0, s.1] {
            let d: f64 = (0..3).map(|k| (end[k].value() - c[k]).powi(2)).sum::<f64>().sqrt();
            r = r.max(d + s.2);
        }
    }
    (c, r)
}

fn spheres_apart(a: ([f64; 3], f64), b: ([f64; 3], f64)) -> bool {
    let d2: f64 = (0..3).map(|k| (a.0[k] - b.0[k]).powi(2)).sum();
    d2 > (a.1 + b.1) * (a.1 + b.1)
}

fn segment_sphere<R: Real>(s: &(Vec3<R>, Vec3<R>, f64)) -> ([f64; 3], f64) {
    let a = [s.0[0].value(), s.0[1].value(), s.0[2].value()];
    let b = [s.1[0].value(), s.1[1].value(), s.1[2].value()];
    let c = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * (a[2] + b[2])];
    let half = 0.5 * ((0..3).map(|k| (b[k] - a[k]).powi(2)).sum::<f64>()).sqrt();
    (c, half + s.2)
}

/// Penetration of one frame, with bounding-sphere culling done on values.
fn pen_frame<R: Real>(bodies: &[Vec<(Vec3<R>, Vec3<R>, f64)>]) -> R {
    let mut acc = R::zero();
    let spheres: Vec<_> = bodies.iter().map(|b| bounding_sphere(b)).collect();
    for p in 0..bodies.len() {
        for q in p + 1..bodies.len() {
            if spheres_apart(spheres[p], spheres[q]) {
                continue;
            }
            for a in &bodies[p] {
                let sa = segment_sphere(a);
                for b in &bodies[q] {
                    if spheres_apart(sa, segment_sphere(b)) {
                        continue;
                    }
                    let c = clearance_generic(*a, *b);
                    if c.value() < 0.0 {
                        acc += c.sq();
                    }
                }
            }
        }
    }
    acc
}

/// Σ_t ‖θ_t − θ̂_t‖².
pub fn e_reg(motion: &MotionSequence, anchor: &MotionSequence) -> Result<f64> {
    if motion.len() != anchor.len() {
        return Err(Error::invalid(format!(
            "motion has {} frames, anchor has {}",
            motion.len(),
            anchor.len()
        )));
    }
    Ok(motion
        .poses
        .iter()
        .zip(&anchor.poses)
        .flat_map(|(a, b)| a.theta.iter().zip(&b.theta))
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

fn dep_case<R: Real>(zp: R, zq: R, r: i8) -> R {
    match r {
        1 => softplus(zp - zq),
        -1 => softplus(zq - zp),
        _ => (zp - zq).sq(),
    }
}

/// Ordinal depth energy on root depths; smaller z is closer to the camera.
pub fn e_dep(motions: &[MotionSequence], annotation: &DepthAnnotation) -> Result<f64> {
    let frames = check_group(motions)?;
    annotation.check(motions.len(), frames)?;
    Ok(annotation
        .triples()
        .map(|(t, p, q, r)| dep_case(motions[p].poses[t].tau[2], motions[q].poses[t].tau[2], r))
        .sum())
}

fn plane_term<R: Real>(joints: &[Vec<Vec3<R>>], contacts: &ContactLabels, plane: &GroundPlane) -> R {
    let mut acc = R::zero();
    for (k, &j) in contacts.feet.iter().enumerate() {
        for (t, frame) in joints.iter().enumerate() {
            if contacts.labels[k][t] {
                let mut d = R::zero();
                for a in 0..3 {
                    d += (frame[j][a] - plane.point[a]) * plane.normal[a];
                }
                acc += d.sq();
            }
        }
    }
    acc
}

/// Contact feet stationary plus contact feet on the plane.
pub fn e_gc(motion: &MotionSequence, contacts: &ContactLabels, plane: &GroundPlane, skeleton: &Skeleton) -> Result<f64> {
    motion.validate()?;
    plane.validate()?;
    contacts.check(skeleton, motion.len())?;
    let joints = motion.joints(skeleton)?;
    Ok(foot_velocity_generic(&joints, contacts) + plane_term(&joints, contacts, plane))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GlobalTerms<R> {
    pub reproj: R,
    pub pen: R,
    pub reg: R,
    pub dep: R,
    pub gc: R,
}

impl GlobalTerms<f64> {
    pub fn total(&self, c: &GlobalFitConfig) -> f64 {
        self.reproj + c.lambda_pen * self.pen + c.lambda_reg * self.reg + c.lambda_dep * self.dep + c.lambda_gc * self.gc
    }
}

/// All inputs of the joint energy. The optimisation vector stacks every
/// dancer's packed poses; shapes are taken from the anchors and held fixed.
#[derive(Clone, Debug)]
pub struct GlobalProblem<'a> {
    pub skeleton: &'a Skeleton,
    pub camera: &'a Camera,
    pub tracks: &'a [KeypointTrack],
    pub contacts: &'a [ContactLabels],
    pub annotation: &'a DepthAnnotation,
    pub plane: &'a GroundPlane,
    pub anchors: &'a [MotionSequence],
    pub config: &'a GlobalFitConfig,
    pub frames: usize,
}

impl<'a> GlobalProblem<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        skeleton: &'a Skeleton,
        camera: &'a Camera,
        tracks: &'a [KeypointTrack],
        contacts: &'a [ContactLabels],
        annotation: &'a DepthAnnotation,
        plane: &'a GroundPlane,
        anchors: &'a [MotionSequence],
        config: &'a GlobalFitConfig,
    ) -> Result<Self> {
        let frames = check_group(anchors)?;
        let n = anchors.len();
        if tracks.len() != n || contacts.len() != n {
            return Err(Error::invalid(format!(
                "{n} dancers but {} tracks and {} contact sets",
                tracks.len(),
                contacts.len()
            )));
        }
        for (p, (t, c)) in tracks.iter().zip(contacts).enumerate() {
            t.check_dims(frames, skeleton.num_joints())
                .map_err(|e| Error::invalid(format!("dancer {p}: {e}")))?;
            c.check(skeleton, frames)?;
        }
        annotation.check(n, frames)?;
        plane.validate()?;
        Ok(GlobalProblem {
            skeleton,
            camera,
            tracks,
            contacts,
            annotation,
            plane,
            anchors,
            config,
            frames,
        })
    }

    pub fn dancers(&self) -> usize {
        self.anchors.len()
    }

    pub fn dim(&self) -> usize {
        self.dancers() * self.frames * POSE_DIM
    }

    pub fn pack(&self, motions: &[MotionSequence]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        for m in motions {
            for p in &m.poses {
                x.extend_from_slice(&p.tau);
                x.extend_from_slice(&p.theta);
            }
        }
        x
    }

    pub fn unpack(&self, x: &[f64]) -> Vec<MotionSequence> {
        let block = self.frames * POSE_DIM;
        self.anchors
            .iter()
            .enumerate()
            .map(|(p, a)| {
                let poses = (0..self.frames)
                    .map(|t| {
                        let y = &x[p * block + t * POSE_DIM..p * block + (t + 1) * POSE_DIM];
                        Pose {
                            tau: [y[0], y[1], y[2]],
                            theta: y[3..].to_vec(),
                        }
                    })
                    .collect();
                MotionSequence {
                    poses,
                    shape: a.shape.clone(),
                    fps: a.fps,
                }
            })
            .collect()
    }

    pub fn terms<R: Real>(&self, x: &[R]) -> Result<GlobalTerms<R>> {
        let block = self.frames * POSE_DIM;
        let mut out = GlobalTerms {
            reproj: R::zero(),
            pen: R::zero(),
            reg: R::zero(),
            dep: R::zero(),
            gc: R::zero(),
        };
        let mut joints = Vec::with_capacity(self.dancers());
        for (p, anchor) in self.anchors.iter().enumerate() {
            let poses = &x[p * block..(p + 1) * block];
            let beta: Vec<R> = anchor.shape.beta.iter().map(|&b| R::cst(b)).collect();
            let j = frames_fk(self.skeleton, poses, &beta, self.frames);
            out.reproj += reproj_generic(&j, &self.tracks[p], self.camera, self.config.huber_delta, Some(p))?;
            for (t, a) in anchor.poses.iter().enumerate() {
                let th = &poses[t * POSE_DIM + 3..(t + 1) * POSE_DIM];
                for (v, &v0) in th.iter().zip(&a.theta) {
                    out.reg += (*v - v0).sq();
                }
            }
            out.gc += foot_velocity_generic(&j, &self.contacts[p]) + plane_term(&j, &self.contacts[p], self.plane);
            joints.push(j);
        }
        if self.dancers() >= 2 {
            for t in 0..self.frames {
                let bodies: Vec<_> = joints.iter().map(|j| body_segments(&j[t], self.skeleton)).collect();
                out.pen += pen_frame(&bodies);
            }
        }
        for (t, p, q, r) in self.annotation.triples() {
            out.dep += dep_case(x[p * block + t * POSE_DIM + 2], x[q * block + t * POSE_DIM + 2], r);
        }
        Ok(out)
    }

    pub fn total<R: Real>(&self, x: &[R]) -> Result<R> {
        let t = self.terms(x)?;
        let c = self.config;
        Ok(t.reproj + t.pen * c.lambda_pen + t.reg * c.lambda_reg + t.dep * c.lambda_dep + t.gc * c.lambda_gc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalTerm {
    Reproj,
    Pen,
    Reg,
    Dep,
    Gc,
    Total,
}

pub struct GlobalObjective<'a> {
    pub problem: GlobalProblem<'a>,
    pub term: GlobalTerm,
}

impl ScalarObjective for GlobalObjective<'_> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn eval<R: Real>(&self, x: &[R]) -> Result<R> {
        if self.term == GlobalTerm::Total {
            return self.problem.total(x);
        }
        let t = self.problem.terms(x)?;
        Ok(match self.term {
            GlobalTerm::Reproj => t.reproj,
            GlobalTerm::Pen => t.pen,
            GlobalTerm::Reg => t.reg,
            GlobalTerm::Dep => t.dep,
            GlobalTerm::Gc => t.gc,
            GlobalTerm::Total => unreachable!(),
        })
    }
}

#[allow(clippy::too_many_arguments)]
pub fn global_terms(
    motions: &[MotionSequence],
    tracks: &[KeypointTrack],
    contacts: &[ContactLabels],
    camera: &Camera,
    annotation: &DepthAnnotation,
    plane: &GroundPlane,
    anchors: &[MotionSequence],
    config: &GlobalFitConfig,
    skeleton: &Skeleton,
) -> Result<GlobalTerms<f64>> {
    if motions.len() != anchors.len() {
        return Err(Error::invalid("one anchor per dancer is required"));
    }
    let frames = check_group(motions)?;
    let problem = GlobalProblem::new(skeleton, camera, tracks, contacts, annotation, plane, anchors, config)?;
    if frames != problem.frames {
        return Err(Error::invalid("motions and anchors differ in length"));
    }
    problem.terms(&problem.pack(motions))
}

#[allow(clippy::too_many_arguments)]
pub fn e_global_total(
    motions: &[MotionSequence],
    tracks: &[KeypointTrack],
    contacts: &[ContactLabels],
    camera: &Camera,
    annotation: &DepthAnnotation,
    plane: &GroundPlane,
    anchors: &[MotionSequence],
    config: &GlobalFitConfig,
    skeleton: &Skeleton,
) -> Result<f64> {
    Ok(global_terms(motions, tracks, contacts, camera, annotation, plane, anchors, config, skeleton)?.total(config))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalTraceRow {
    pub iteration: usize,
    pub e_j: f64,
    pub e_pen: f64,
    pub e_reg: f64,
    pub e_dep: f64,
    pub e_gc: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct GlobalFitResult {
    pub motions: Vec<MotionSequence>,
    pub plane: GroundPlane,
    pub trace: Vec<GlobalTraceRow>,
}

/// Contact feet of all dancers, unit weights, plus the mean joint position.
pub fn contact_points(
    motions: &[MotionSequence],
    contacts: &[ContactLabels],
    skeleton: &Skeleton,
) -> Result<(Vec<[f64; 3]>, [f64; 3])> {
    let mut points = Vec::new();
    let mut mean = [0.0; 3];
    let mut count = 0.0;
    for (m, c) in motions.iter().zip(contacts) {
        c.check(skeleton, m.len())?;
        let joints = m.joints(skeleton)?;
        for (k, &j) in c.feet.iter().enumerate() {
            for (t, frame) in joints.iter().enumerate() {
                if c.labels[k][t] {
                    points.push(frame[j]);
                }
            }
        }
        for x in joints.iter().flatten() {
            for a in 0..3 {
                mean[a] += x[a];
            }
            count += 1.0;
        }
    }
    Ok((points, mean.map(|v| v / count.max(1.0))))
}

/// Fits the ground plane to the local solutions' contact feet, then refines
/// every dancer's θ and τ jointly.
pub fn fit_global(
    local: &[MotionSequence],
    tracks: &[KeypointTrack],
    contacts: &[ContactLabels],
    camera: &Camera,
    annotation: &DepthAnnotation,
    config: &GlobalFitConfig,
    skeleton: &Skeleton,
) -> Result<GlobalFitResult> {
    config.validate("global_fit")?;
    check_group(local)?;
    if contacts.len() != local.len() {
        return Err(Error::invalid("one contact set per dancer is required"));
    }
    let (points, hint) = contact_points(local, contacts, skeleton)?;
    let weights = vec![1.0; points.len()];
    let plane = fit_ground_plane(
        &points,
        &weights,
        &PlaneFitOptions {
            delta: config.plane_delta,
            toward: Some(hint),
            ..Default::default()
        },
    )?;
    let problem = GlobalProblem::new(skeleton, camera, tracks, contacts, annotation, &plane, local, config)?;
    let objective = Taped(GlobalObjective {
        problem: problem.clone(),
        term: GlobalTerm::Total,
    });
    let mut x = problem.pack(local);
    let lr = vec![config.lr; x.len()];
    let opts = DescentOptions {
        iterations: config.iterations,
        rel_tol: config.rel_tol,
        ..Default::default()
    };
    let mut trace = Vec::new();
    let outcome = minimize_monotone(
        &mut x,
        &lr,
        &opts,
        |x| objective.value_and_gradient(x),
        |x| match problem.total::<f64>(x) {
            Err(Error::BehindCamera { .. }) => Ok(f64::INFINITY),
            other => other,
        },
        |it, x, _| {
            let t = problem.terms::<f64>(x)?;
            trace.push(GlobalTraceRow {
                iteration: it,
                e_j: t.reproj,
                e_pen: t.pen,
                e_reg: t.reg,
                e_dep: t.dep,
                e_gc: t.gc,
                total: t.total(config),
            });
            Ok(())
        },
    );
    if let Err(e) = outcome {
        return Err(match e {
            Error::OptimizationFailed { iteration, reason, .. } => Error::OptimizationFailed {
                iteration,
                reason,
                last_valid: Box::new(problem.unpack(&x)),
            },
            other => other,
        });
    }
    Ok(GlobalFitResult {
        motions: problem.unpack(&x),
        plane,
        trace,
    })
}

/// Fraction of annotated (t, p, p′) with r ≠ 0 whose root-depth order agrees.
pub fn depth_order_agreement(motions: &[MotionSequence], annotation: &DepthAnnotation) -> Result<f64> {
    let frames = check_group(motions)?;
    annotation.check(motions.len(), frames)?;
    let (mut agree, mut total) = (0usize, 0usize);
    for (t, p, q, r) in annotation.triples() {
        if r == 0 {
            continue;
        }
        total += 1;
        let (zp, zq) = (motions[p].poses[t].tau[2], motions[q].poses[t].tau[2]);
        if (r == 1 && zp < zq) || (r == -1 && zp > zq) {
            agree += 1;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("no ordered depth annotations".into()));
    }
    Ok(agree as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{BodyShape, THETA_DIM};
    use crate::numerics::{grad_check, DEFAULT_FD_STEP};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn still(frames: usize, tau: [f64; 3]) -> MotionSequence {
        MotionSequence::new(vec![Pose::rest(tau); frames], BodyShape::default(), 30.0).unwrap()
    }

    fn jitter(m: &MotionSequence, rng: &mut ChaCha8Rng, s: f64) -> MotionSequence {
        let mut m = m.clone();
        for p in &mut m.poses {
            for v in p.theta.iter_mut() {
                *v += rng.random_range(-s..s);
            }
            for v in p.tau.iter_mut() {
                *v += rng.random_range(-s..s) * 0.1;
            }
        }
        m
    }

    #[test]
    fn far_apart_dancers_do_not_penetrate() {
        let s = Skeleton::default();
        let m = [still(3, [-2.5, 0.0, 6.0]), still(3, [2.5, 0.0, 6.0])];
        assert_eq!(e_pen(&m, &s).unwrap(), 0.0);
        assert!(e_pen(&m[..1], &s).is_err());
    }

    #[test]
    fn single_bone_closed_form() {
        let a = Capsule {
            a: [0.0, 0.0, 0.0],
            b: [1.0, 0.0, 0.0],
            radius: 0.2,
        };
        let b = Capsule {
            a: [0.0, 0.2, 0.0],
            b: [1.0, 0.2, 0.0],
            radius: 0.2,
        };
        let frames = vec![vec![vec![a], vec![b]]; 3];
        assert!((e_pen_capsules(&frames) - 0.12).abs() < 1e-12);
    }

    #[test]
    fn penetration_matches_naive_enumeration_and_is_permutation_invariant() {
        let s = Skeleton::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = vec![
            jitter(&still(2, [0.0, 0.0, 5.0]), &mut rng, 0.3),
            jitter(&still(2, [0.25, 0.0, 5.1]), &mut rng, 0.3),
            jitter(&still(2, [-0.2, 0.05, 4.9]), &mut rng, 0.3),
        ];
        let fast = e_pen(&m, &s).unwrap();
        assert!(fast > 0.0);
        let mut naive = 0.0;
        for t in 0..2 {
            let j: Vec<_> = m.iter().map(|d| d.joints(&s).unwrap()[t].clone()).collect();
            for p in 0..3 {
                for q in 0..3 {
                    if p >= q {
                        continue;
                    }
                    for a in body_capsules(&j[p], &s) {
                        for b in body_capsules(&j[q], &s) {
                            naive += capsule_clearance(&a, &b).min(0.0).powi(2);
                        }
                    }
                }
            }
        }
        assert!((fast - naive).abs() < 1e-10);
        let perm = vec![m[2].clone(), m[0].clone(), m[1].clone()];
        assert!((e_pen(&perm, &s).unwrap() - fast).abs() < 1e-12);

        // culling in the taped path agrees with the plain sum
        let anchors = m.clone();
        let tracks: Vec<_> = m
            .iter()
            .map(|d| KeypointTrack::from_motion(d, &Camera::default(), &s).unwrap())
            .collect();
        let contacts = vec![ContactLabels::none(&s, 2); 3];
        let plane = GroundPlane::new([0.0, -1.0, 0.0], [0.0, 0.9, 5.0]).unwrap();
        let cfg = GlobalFitConfig::default();
        let ann = DepthAnnotation::new();
        let t = global_terms(&m, &tracks, &contacts, &Camera::default(), &ann, &plane, &anchors, &cfg, &s).unwrap();
        assert!((t.pen - naive).abs() < 1e-10);
    }

    #[test]
    fn reg_examples() {
        let a = still(5, [0.0, 0.0, 5.0]);
        assert_eq!(e_reg(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        for p in &mut b.poses {
            p.theta[0] += 1.0;
            p.tau[1] += 3.0;
        }
        assert_eq!(e_reg(&b, &a).unwrap(), 5.0);
        assert!(e_reg(&still(4, [0.0; 3]), &a).is_err());
    }

    #[test]
    fn depth_cases() {
        let m = vec![still(1, [0.0, 0.0, 5.0]), still(1, [1.0, 0.0, 5.0])];
        let zero = DepthAnnotation::from_triples(&[(0, 0, 1, 0)]).unwrap();
        assert_eq!(e_dep(&m, &zero).unwrap(), 0.0);
        let closer = DepthAnnotation::from_triples(&[(0, 0, 1, 1)]).unwrap();
        assert!((e_dep(&m, &closer).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let m2 = vec![still(1, [0.0, 0.0, 5.0]), still(1, [1.0, 0.0, 25.0])];
        assert!(e_dep(&m2, &closer).unwrap() < 1e-8);
        assert!(DepthAnnotation::from_triples(&[(0, 0, 1, 2)]).is_err());
        assert!(DepthAnnotation::from_triples(&[(0, 0, 1, 1), (0, 1, 0, 1)]).is_err());
        assert!(e_dep(&m, &DepthAnnotation::from_triples(&[(3, 0, 1, 1)]).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn depth_cases_sum_bound(zp in 0.5f64..20.0, zq in 0.5f64..20.0) {
            let m = vec![still(1, [0.0, 0.0, zp]), still(1, [0.0, 0.0, zq])];
            let a = e_dep(&m, &DepthAnnotation::from_triples(&[(0, 0, 1, 1)]).unwrap()).unwrap();
            let b = e_dep(&m, &DepthAnnotation::from_triples(&[(0, 0, 1, -1)]).unwrap()).unwrap();
            prop_assert!(a + b >= 2.0 * std::f64::consts::LN_2 - 1e-15);
            if zp != zq {
                prop_assert!(a + b > 2.0 * std::f64::consts::LN_2);
            }
            let flipped = e_dep(&m, &DepthAnnotation::from_triples(&[(0, 1, 0, -1)]).unwrap()).unwrap();
            prop_assert_eq!(a, flipped);
        }

        #[test]
        fn closer_case_decreases_with_gap(zp in 1.0f64..10.0, g1 in -5.0f64..5.0, dg in 0.01f64..3.0) {
            let ann = DepthAnnotation::from_triples(&[(0, 0, 1, 1)]).unwrap();
            let e = |g: f64| e_dep(&[still(1, [0.0, 0.0, zp]), still(1, [0.0, 0.0, zp + g])], &ann).unwrap();
            prop_assert!(e(g1 + dg) < e(g1));
        }
    }

    #[test]
    fn ground_contact_examples() {
        let s = Skeleton::default();
        let m = still(2, [0.0, 0.0, 5.0]);
        let foot = m.joints(&s).unwrap()[0][s.feet()[0]];
        let on = GroundPlane::new([0.0, -1.0, 0.0], foot).unwrap();
        assert!(e_gc(&m, &ContactLabels::all(&s, 2), &on, &s).unwrap() < 1e-24);
        let below = GroundPlane::new([0.0, -1.0, 0.0], [0.0, foot[1] + 0.1, 0.0]).unwrap();
        let mut c = ContactLabels::none(&s, 2);
        c.labels[0] = vec![true, true];
        assert!((e_gc(&m, &c, &below, &s).unwrap() - 0.02).abs() < 1e-12);
        assert_eq!(e_gc(&m, &ContactLabels::none(&s, 2), &below, &s).unwrap(), 0.0);
    }

    struct Toy {
        skeleton: Skeleton,
        camera: Camera,
        tracks: Vec<KeypointTrack>,
        contacts: Vec<ContactLabels>,
        annotation: DepthAnnotation,
        plane: GroundPlane,
        anchors: Vec<MotionSequence>,
        motions: Vec<MotionSequence>,
    }

    fn toy(seed: u64) -> Toy {
        let skeleton = Skeleton::default();
        let camera = Camera::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = vec![still(3, [-0.25, 0.0, 5.0]), still(3, [0.25, 0.0, 5.05])];
        let tracks = gt
            .iter()
            .map(|m| KeypointTrack::from_motion(&jitter(m, &mut rng, 0.02), &camera, &skeleton).unwrap())
            .collect();
        let anchors: Vec<_> = gt.iter().map(|m| jitter(m, &mut rng, 0.03)).collect();
        // keep every θ offset from its anchor well above finite-difference noise
        let motions: Vec<_> = anchors
            .iter()
            .map(|m| {
                let mut m = jitter(m, &mut rng, 0.01);
                for p in &mut m.poses {
                    for v in p.theta.iter_mut() {
                        let d: f64 = rng.random_range(0.02..0.05);
                        *v += if rng.random_bool(0.5) { d } else { -d };
                    }
                }
                m
            })
            .collect();
        let mut contacts = vec![ContactLabels::none(&skeleton, 3); 2];
        contacts[0].labels[0] = vec![true, true, false];
        contacts[1].labels[3] = vec![false, true, true];
        let annotation = DepthAnnotation::from_triples(&[(0, 0, 1, 1), (1, 1, 0, 1), (2, 0, 1, 0)]).unwrap();
        let plane = GroundPlane::new([0.1, -1.0, 0.05], [0.0, 0.9, 5.0]).unwrap();
        Toy {
            skeleton,
            camera,
            tracks,
            contacts,
            annotation,
            plane,
            anchors,
            motions,
        }
    }

    #[test]
    fn total_is_weighted_sum_of_terms() {
        let t = toy(1);
        let cfg = GlobalFitConfig::default();
        let total = e_global_total(
            &t.motions, &t.tracks, &t.contacts, &t.camera, &t.annotation, &t.plane, &t.anchors, &cfg, &t.skeleton,
        )
        .unwrap();
        let s = &t.skeleton;
        let mut by_hand = 0.0;
        for p in 0..2 {
            by_hand += crate::local_fit::e_reproj(&t.motions[p], &t.tracks[p], &t.camera, s, cfg.huber_delta).unwrap();
            by_hand += cfg.lambda_reg * e_reg(&t.motions[p], &t.anchors[p]).unwrap();
            by_hand += cfg.lambda_gc * e_gc(&t.motions[p], &t.contacts[p], &t.plane, s).unwrap();
        }
        by_hand += cfg.lambda_pen * e_pen(&t.motions, s).unwrap();
        by_hand += cfg.lambda_dep * e_dep(&t.motions, &t.annotation).unwrap();
        assert!((total - by_hand).abs() < 1e-12 * total.max(1.0), "{total} vs {by_hand}");

        let zero = GlobalFitConfig {
            lambda_pen: 0.0,
            lambda_reg: 0.0,
            lambda_dep: 0.0,
            lambda_gc: 0.0,
            ..cfg
        };
        let only_j = e_global_total(
            &t.motions, &t.tracks, &t.contacts, &t.camera, &t.annotation, &t.plane, &t.anchors, &zero, &t.skeleton,
        )
        .unwrap();
        let j: f64 = (0..2)
            .map(|p| crate::local_fit::e_reproj(&t.motions[p], &t.tracks[p], &t.camera, s, 1.0).unwrap())
            .sum();
        assert!((only_j - j).abs() < 1e-12 * j.max(1.0));
    }

    #[test]
    fn all_terms_pass_grad_check() {
        for seed in 0..3 {
            let t = toy(seed + 10);
            let cfg = GlobalFitConfig::default();
            let problem = GlobalProblem::new(
                &t.skeleton, &t.camera, &t.tracks, &t.contacts, &t.annotation, &t.plane, &t.anchors, &cfg,
            )
            .unwrap();
            let x = problem.pack(&t.motions);
            for term in [
                GlobalTerm::Reproj,
                GlobalTerm::Pen,
                GlobalTerm::Reg,
                GlobalTerm::Dep,
                GlobalTerm::Gc,
                GlobalTerm::Total,
            ] {
                let f = Taped(GlobalObjective {
                    problem: problem.clone(),
                    term,
                });
                let r = grad_check(&f, &x, DEFAULT_FD_STEP).unwrap();
                assert!(r.max_rel_error < 1e-4, "{term:?}: {r:?}");
            }
        }
    }

    #[test]
    fn consistent_input_is_a_fixed_point() {
        let s = Skeleton::default();
        let cam = Camera::default();
        let gt = vec![still(4, [-1.0, 0.0, 5.0]), still(4, [1.0, 0.0, 5.0])];
        let tracks: Vec<_> = gt.iter().map(|m| KeypointTrack::from_motion(m, &cam, &s).unwrap()).collect();
        let contacts = vec![ContactLabels::all(&s, 4); 2];
        let ann = DepthAnnotation::from_triples(&[(0, 0, 1, 0), (3, 1, 0, 0)]).unwrap();
        let r = fit_global(&gt, &tracks, &contacts, &cam, &ann, &GlobalFitConfig::default(), &s).unwrap();
        for (a, b) in r.motions.iter().zip(&gt) {
            for (pa, pb) in a.poses.iter().zip(&b.poses) {
                for k in 0..3 {
                    assert!((pa.tau[k] - pb.tau[k]).abs() < 1e-6);
                }
                for k in 0..THETA_DIM {
                    assert!((pa.theta[k] - pb.theta[k]).abs() < 1e-6);
                }
            }
        }
        assert!(r.plane.normal[1] < -0.999, "{:?}", r.plane);
    }

    #[test]
    fn missing_contacts_make_the_plane_degenerate() {
        let s = Skeleton::default();
        let cam = Camera::default();
        let gt = vec![still(2, [-1.0, 0.0, 5.0]), still(2, [1.0, 0.0, 5.0])];
        let tracks: Vec<_> = gt.iter().map(|m| KeypointTrack::from_motion(m, &cam, &s).unwrap()).collect();
        let contacts = vec![ContactLabels::none(&s, 2); 2];
        let r = fit_global(&gt, &tracks, &contacts, &cam, &DepthAnnotation::new(), &GlobalFitConfig::default(), &s);
        assert!(matches!(r, Err(Error::DegenerateGeometry(_))));
    }
}
