//! Deterministic synthetic group scenes with known ground truth.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{click_train, extract_features, MusicFeatures};
use crate::body::{BodyShape, Camera, MotionSequence, Pose, Skeleton, DEFAULT_FPS};
use crate::error::{Error, Result};
use crate::global_fit::{DepthAnnotation, GroundPlane};
use crate::local_fit::{ContactLabels, KeypointTrack};

pub const SYNTH_SAMPLE_RATE: u32 = 22050;
/// Frames between music beats (120 BPM at 30 FPS).
pub const BEAT_PERIOD: usize = 15;
/// Frame of the first beat.
pub const BEAT_PHASE: usize = 7;
/// Ground height in camera coordinates (y points down).
pub const GROUND_Y: f64 = 0.9;
/// Depth difference below which two dancers count as level.
pub const DEPTH_TIE: f64 = 0.05;

const ARM_DOWN: f64 = 1.2;
const SPACING: f64 = 1.5;
const BASE_DEPTH: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Static,
    Circle,
    Wave,
    Crossing,
    Colliding,
    Gait,
}

impl Pattern {
    pub const ALL: [Pattern; 6] = [
        Pattern::Static,
        Pattern::Circle,
        Pattern::Wave,
        Pattern::Crossing,
        Pattern::Colliding,
        Pattern::Gait,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Static => "static",
            Pattern::Circle => "circle",
            Pattern::Wave => "wave",
            Pattern::Crossing => "crossing",
            Pattern::Colliding => "colliding",
            Pattern::Gait => "gait",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown pattern `{s}` (expected one of static, circle, wave, crossing, colliding, gait)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub pattern: Pattern,
    pub dancers: usize,
    pub frames: usize,
    /// Gaussian keypoint noise, pixels.
    pub noise_px: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SyntheticScenario {
    pub spec: SynthSpec,
    pub motions: Vec<MotionSequence>,
    pub camera: Camera,
    pub tracks: Vec<KeypointTrack>,
    pub contacts: Vec<ContactLabels>,
    pub annotation: DepthAnnotation,
    pub features: MusicFeatures,
    pub plane: GroundPlane,
    pub audio: Vec<f64>,
    pub sample_rate: u32,
}

/// Music beat frames shared by all patterns.
pub fn beat_frames(frames: usize) -> Vec<usize> {
    (BEAT_PHASE..frames).step_by(BEAT_PERIOD).collect()
}

/// Arm swing whose turning points sit on the beats.
fn beat_wave(t: usize) -> f64 {
    (PI * (t as f64 - BEAT_PHASE as f64) / BEAT_PERIOD as f64).cos()
}

struct Joints {
    l_hip: usize,
    r_hip: usize,
    l_knee: usize,
    r_knee: usize,
    l_shoulder: usize,
    r_shoulder: usize,
    l_elbow: usize,
    r_elbow: usize,
}

impl Joints {
    fn of(s: &Skeleton) -> Result<Self> {
        let j = |n: &str| {
            s.joint_index(n)
                .ok_or_else(|| Error::invalid(format!("skeleton has no joint `{n}`")))
        };
        Ok(Joints {
            l_hip: j("left_hip")?,
            r_hip: j("right_hip")?,
            l_knee: j("left_knee")?,
            r_knee: j("right_knee")?,
            l_shoulder: j("left_shoulder")?,
            r_shoulder: j("right_shoulder")?,
            l_elbow: j("left_elbow")?,
            r_elbow: j("right_elbow")?,
        })
    }
}

/// Arms lowered from the T-pose, plus an optional symmetric swing.
fn posed(jn: &Joints, tau: [f64; 3], swing: f64) -> Pose {
    let mut p = Pose::rest(tau);
    p.set_joint_rotation(jn.l_shoulder, [0.0, 0.0, ARM_DOWN - swing]);
    p.set_joint_rotation(jn.r_shoulder, [0.0, 0.0, -(ARM_DOWN - swing)]);
    p.set_joint_rotation(jn.l_elbow, [0.0, 0.0, 0.3 * swing.abs()]);
    p.set_joint_rotation(jn.r_elbow, [0.0, 0.0, -0.3 * swing.abs()]);
    p
}

fn line_x(p: usize, n: usize) -> f64 {
    (p as f64 - (n as f64 - 1.0) / 2.0) * SPACING
}

/// Left and right leg swing amounts; each leg swings during the middle of alternate beats.
fn gait_lift(t: usize) -> [f64; 2] {
    let phase = t % (2 * BEAT_PERIOD);
    let leg = phase / BEAT_PERIOD;
    let u = (phase % BEAT_PERIOD) as f64 / BEAT_PERIOD as f64;
    let w = ((u - 0.2) / 0.6).clamp(0.0, 1.0);
    let mut out = [0.0; 2];
    if w > 0.0 && w < 1.0 {
        out[leg] = (PI * w).sin();
    }
    out
}

/// Ground-truth motions and contact labels for a pattern.
fn build_motions(
    spec: &SynthSpec,
    skeleton: &Skeleton,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<MotionSequence>, Vec<ContactLabels>)> {
    let (n, t_len) = (spec.dancers, spec.frames);
    let jn = Joints::of(skeleton)?;
    let amp: Vec<f64> = (0..n).map(|_| 0.4 * rng.random_range(0.85..1.15)).collect();
    let mut motions = Vec::with_capacity(n);
    let mut contacts = Vec::with_capacity(n);
    for p in 0..n {
        let mut poses = Vec::with_capacity(t_len);
        let mut labels = ContactLabels::none(skeleton, t_len);
        for t in 0..t_len {
            let tf = t as f64;
            let pose = match spec.pattern {
                Pattern::Static => posed(&jn, [line_x(p, n), 0.0, BASE_DEPTH], 0.0),
                Pattern::Wave => {
                    let sign = if p % 2 == 0 { 1.0 } else { -1.0 };
                    posed(&jn, [line_x(p, n), 0.0, BASE_DEPTH], sign * amp[p] * beat_wave(t))
                }
                Pattern::Circle => {
                    let radius = (0.35 * n as f64).max(1.0);
                    let phi = 2.0 * PI * p as f64 / n as f64 + 2.0 * PI * tf / 120.0;
                    let tau = [radius * phi.sin(), 0.0, BASE_DEPTH + 1.0 + radius * phi.cos()];
                    posed(&jn, tau, amp[p] * beat_wave(t))
                }
                Pattern::Crossing => {
                    let sign = if p % 2 == 0 { 1.0 } else { -1.0 };
                    let phase = 2.0 * PI * (tf - BEAT_PHASE as f64) / (4 * BEAT_PERIOD) as f64;
                    let tau = [line_x(p, n), 0.0, BASE_DEPTH + sign * phase.cos()];
                    posed(&jn, tau, amp[p] * beat_wave(t))
                }
                Pattern::Colliding => {
                    let x = if p < 2 {
                        // the first pair meets in the middle of the clip
                        let gap = 1.5 - 1.3 * (PI * tf / (t_len.max(2) - 1) as f64).sin().powi(2);
                        if p == 0 {
                            -gap / 2.0
                        } else {
                            gap / 2.0
                        }
                    } else {
                        1.5 + SPACING * (p - 1) as f64
                    };
                    posed(&jn, [x, 0.0, BASE_DEPTH], 0.0)
                }
                Pattern::Gait => {
                    let lift = gait_lift(t);
                    let cycle = 2 * BEAT_PERIOD;
                    let mut pose = posed(&jn, [line_x(p, n), 0.0, BASE_DEPTH], 0.2 * (2.0 * PI * tf / cycle as f64).sin());
                    for (leg, (hip, knee)) in [(jn.l_hip, jn.l_knee), (jn.r_hip, jn.r_knee)].into_iter().enumerate() {
                        pose.set_joint_rotation(hip, [-0.5 * lift[leg], 0.0, 0.0]);
                        pose.set_joint_rotation(knee, [1.0 * lift[leg], 0.0, 0.0]);
                    }
                    // a foot is planted while its leg stays still over the next frame too
                    let next = gait_lift(t + 1);
                    for k in 0..labels.feet.len() {
                        let leg = k % 2;
                        if lift[leg] == 0.0 && next[leg] == 0.0 {
                            labels.labels[k][t] = true;
                        }
                    }
                    pose
                }
            };
            let planted = match spec.pattern {
                Pattern::Static | Pattern::Wave => true,
                Pattern::Colliding => p >= 2,
                _ => false,
            };
            if planted {
                for k in 0..labels.feet.len() {
                    labels.labels[k][t] = true;
                }
            }
            poses.push(pose);
        }
        motions.push(MotionSequence::new(poses, BodyShape::default(), DEFAULT_FPS)?);
        contacts.push(labels);
    }
    Ok((motions, contacts))
}

/// Ordinal labels for every frame and pair from ground-truth root depths.
pub fn annotate_depths(motions: &[MotionSequence]) -> Result<DepthAnnotation> {
    let mut a = DepthAnnotation::new();
    let frames = motions.first().map_or(0, |m| m.len());
    for t in 0..frames {
        for p in 0..motions.len() {
            for q in p + 1..motions.len() {
                let dz = motions[p].poses[t].tau[2] - motions[q].poses[t].tau[2];
                let r = if dz < -DEPTH_TIE {
                    1
                } else if dz > DEPTH_TIE {
                    -1
                } else {
                    0
                };
                a.set(t, p, q, r)?;
            }
        }
    }
    Ok(a)
}

pub fn synth_scenario(spec: &SynthSpec, skeleton: &Skeleton) -> Result<SyntheticScenario> {
    if spec.dancers == 0 || spec.frames == 0 {
        return Err(Error::invalid("scenario needs at least one dancer and one frame"));
    }
    if spec.dancers > 16 {
        return Err(Error::invalid("synthetic scenes support at most 16 dancers"));
    }
    if matches!(spec.pattern, Pattern::Crossing | Pattern::Colliding) && spec.dancers < 2 {
        return Err(Error::invalid(format!("pattern `{}` needs at least two dancers", spec.pattern)));
    }
    if !(spec.noise_px >= 0.0) || !spec.noise_px.is_finite() {
        return Err(Error::invalid("keypoint noise must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let camera = Camera::default();
    let (motions, contacts) = build_motions(spec, skeleton, &mut rng)?;
    let noise = Normal::new(0.0, spec.noise_px.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let tracks = motions
        .iter()
        .enumerate()
        .map(|(p, m)| {
            let mut track = KeypointTrack::from_motion(m, &camera, skeleton).map_err(|e| match e {
                Error::BehindCamera { frame, joint, depth, .. } => Error::BehindCamera {
                    dancer: Some(p),
                    frame,
                    joint,
                    depth,
                },
                other => other,
            })?;
            if spec.noise_px > 0.0 {
                for k in track.frames.iter_mut().flatten() {
                    k[0] += noise.sample(&mut rng);
                    k[1] += noise.sample(&mut rng);
                }
            }
            Ok(track)
        })
        .collect::<Result<Vec<_>>>()?;
    let annotation = annotate_depths(&motions)?;
    let duration = spec.frames as f64 / DEFAULT_FPS;
    let beats: Vec<f64> = beat_frames(spec.frames)
        .iter()
        .map(|&f| f as f64 / DEFAULT_FPS)
        .collect();
    // quantised as on disk, so features of the written WAV match exactly
    let audio: Vec<f64> = click_train(duration, SYNTH_SAMPLE_RATE, &beats)
        .iter()
        .map(|s| super::pcm16(*s) as f64 / 32768.0)
        .collect();
    let features = extract_features(&audio, SYNTH_SAMPLE_RATE)?;
    let plane = GroundPlane::new([0.0, -1.0, 0.0], [0.0, GROUND_Y, BASE_DEPTH])?;
    Ok(SyntheticScenario {
        spec: spec.clone(),
        motions,
        camera,
        tracks,
        contacts,
        annotation,
        features,
        plane,
        audio,
        sample_rate: SYNTH_SAMPLE_RATE,
    })
}
