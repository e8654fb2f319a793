//! Finite-difference checks of every differentiable objective on random toys.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::body::{BodyShape, Camera, MotionSequence, Pose, Skeleton, NUM_BETAS, THETA_DIM};
use crate::error::{Error, Result};
use crate::features::{synth_scenario, Pattern, SynthSpec};
use crate::generator::{train::pose_statistics, GeneratorConfig, GeneratorLoss, ModelParams, TrainSample};
use crate::global_fit::{PlaneObjective, DepthAnnotation, GlobalFitConfig, GlobalObjective, GlobalProblem, GlobalTerm, GroundPlane};
use crate::local_fit::{ContactLabels, KeypointTrack, LocalFitConfig, LocalObjective, LocalProblem, LocalTerm};
use crate::numerics::{grad_check, DifferentiableFunction, Taped, DEFAULT_FD_STEP};

pub const ENERGY_TOLERANCE: f64 = 1e-4;
pub const GENERATOR_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Local,
    Global,
    Plane,
    Generator,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "local" => Suite::Local,
            "global" => Suite::Global,
            "plane" => Suite::Plane,
            "generator" => Suite::Generator,
            "all" => Suite::All,
            _ => {
                return Err(Error::invalid(format!(
                    "unknown suite `{s}` (expected local, global, plane, generator or all)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub module: &'static str,
    pub term: &'static str,
    /// Worst relative error over every toy.
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub toys: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn worst(f: &dyn DifferentiableFunction, x: &[f64], acc: &mut f64) -> Result<()> {
    let r = grad_check(f, x, DEFAULT_FD_STEP)?;
    *acc = acc.max(r.max_rel_error);
    Ok(())
}

fn random_motion(rng: &mut ChaCha8Rng, frames: usize) -> MotionSequence {
    let poses = (0..frames)
        .map(|_| Pose {
            tau: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(4.0..6.0)],
            theta: (0..THETA_DIM).map(|_| rng.random_range(-0.4..0.4)).collect(),
        })
        .collect();
    let mut beta = [0.0; NUM_BETAS];
    for b in &mut beta {
        *b = rng.random_range(-0.5..0.5);
    }
    MotionSequence::new(poses, BodyShape { beta }, 30.0).expect("valid toy motion")
}

const LOCAL_TERMS: [(LocalTerm, &str); 6] = [
    (LocalTerm::Reproj, "E_J"),
    (LocalTerm::PosePrior, "E_theta"),
    (LocalTerm::ShapePrior, "E_beta"),
    (LocalTerm::Smooth, "E_S"),
    (LocalTerm::Foot, "E_F"),
    (LocalTerm::Total, "local_total"),
];

pub fn check_local(toys: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let s = Skeleton::default();
    let cam = Camera::default();
    let cfg = LocalFitConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut err = [0.0; LOCAL_TERMS.len()];
    for toy in 0..toys {
        let gt = random_motion(&mut rng, 3);
        let mut track = KeypointTrack::from_motion(&gt, &cam, &s)?;
        for k in track.frames.iter_mut().flatten() {
            k[2] = rng.random_range(0.2..1.0);
        }
        let m = random_motion(&mut rng, 3);
        let mut c = ContactLabels::none(&s, 3);
        c.labels[toy % 4][0] = true;
        c.labels[(toy + 1) % 4][1] = true;
        let problem = LocalProblem::new(&s, &cam, &track, &c, &cfg, 3)?;
        let x = crate::local_fit::pack_motion(&m);
        for (k, (term, _)) in LOCAL_TERMS.iter().enumerate() {
            let f = Taped(LocalObjective {
                problem: problem.clone(),
                term: *term,
            });
            worst(&f, &x, &mut err[k])?;
        }
    }
    Ok(LOCAL_TERMS
        .iter()
        .zip(err)
        .map(|((_, name), e)| CheckResult {
            module: "local_fit",
            term: name,
            max_rel_error: e,
            tolerance: ENERGY_TOLERANCE,
            toys,
        })
        .collect())
}

fn still(frames: usize, tau: [f64; 3]) -> MotionSequence {
    MotionSequence::new(vec![Pose::rest(tau); frames], BodyShape::default(), 30.0).expect("valid toy motion")
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

const GLOBAL_TERMS: [(GlobalTerm, &str); 6] = [
    (GlobalTerm::Reproj, "E_J"),
    (GlobalTerm::Pen, "E_pen"),
    (GlobalTerm::Reg, "E_reg"),
    (GlobalTerm::Dep, "E_dep"),
    (GlobalTerm::Gc, "E_gc"),
    (GlobalTerm::Total, "global_total"),
];

/// Two overlapping dancers with contacts, depth labels and a tilted plane.
pub fn check_global(toys: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let skeleton = Skeleton::default();
    let camera = Camera::default();
    let cfg = GlobalFitConfig::default();
    let mut err = [0.0; GLOBAL_TERMS.len()];
    for toy in 0..toys {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(toy as u64));
        let gt = [still(3, [-0.25, 0.0, 5.0]), still(3, [0.25, 0.0, 5.05])];
        let tracks = gt
            .iter()
            .map(|m| KeypointTrack::from_motion(&jitter(m, &mut rng, 0.02), &camera, &skeleton))
            .collect::<Result<Vec<_>>>()?;
        let anchors: Vec<_> = gt.iter().map(|m| jitter(m, &mut rng, 0.03)).collect();
        // θ offsets from the anchors stay well above finite-difference noise
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
        let annotation = DepthAnnotation::from_triples(&[(0, 0, 1, 1), (1, 1, 0, 1), (2, 0, 1, 0)])?;
        let plane = GroundPlane::new([0.1, -1.0, 0.05], [0.0, 0.9, 5.0])?;
        let problem = GlobalProblem::new(
            &skeleton, &camera, &tracks, &contacts, &annotation, &plane, &anchors, &cfg,
        )?;
        let x = problem.pack(&motions);
        for (k, (term, _)) in GLOBAL_TERMS.iter().enumerate() {
            let f = Taped(GlobalObjective {
                problem: problem.clone(),
                term: *term,
            });
            worst(&f, &x, &mut err[k])?;
        }
    }
    Ok(GLOBAL_TERMS
        .iter()
        .zip(err)
        .map(|((_, name), e)| CheckResult {
            module: "global_fit",
            term: name,
            max_rel_error: e,
            tolerance: ENERGY_TOLERANCE,
            toys,
        })
        .collect())
}

pub fn check_plane(toys: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<[f64; 3]> = (0..40)
        .map(|i| {
            let z = if i % 8 == 0 { 1.0 } else { rng.random_range(-0.05..0.05) };
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), z]
        })
        .collect();
    let w: Vec<f64> = (0..pts.len()).map(|i| 0.5 + (i % 3) as f64 * 0.25).collect();
    let mut err = 0.0;
    for _ in 0..toys {
        let f = Taped(PlaneObjective {
            points: &pts,
            weights: &w,
            point: [0.1, -0.1, 0.0],
            delta: 0.05,
            penalty: 10.0,
        });
        let n = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.8..1.2)];
        worst(&f, &n, &mut err)?;
    }
    Ok(CheckResult {
        module: "global_fit",
        term: "plane",
        max_rel_error: err,
        tolerance: ENERGY_TOLERANCE,
        toys,
    })
}

/// Tiny architecture with every component present.
pub fn tiny_generator(d_in: usize) -> GeneratorConfig {
    GeneratorConfig {
        d_in,
        d_model: 8,
        music_layers: 1,
        music_heads: 2,
        ff_dim: 8,
        group_layers: 2,
        heads: 2,
        d_k: 3,
        mlp_hidden: 6,
        mlp_layers: 2,
        window: 3,
    }
}

/// Teacher-forced and free-running windows through the whole model.
pub fn check_generator(toys: usize, seed: u64) -> Result<CheckResult> {
    let sc = synth_scenario(
        &SynthSpec {
            pattern: Pattern::Crossing,
            dancers: 2,
            frames: 8,
            noise_px: 0.0,
            seed: 3,
        },
        &Skeleton::default(),
    )?;
    let sample = TrainSample {
        features: sc.features,
        group: sc.motions,
    };
    let cfg = tiny_generator(sample.features.dim());
    let (mean, std) = pose_statistics(std::slice::from_ref(&sample))?;
    let masks = [vec![true, true, true], vec![true, false, true], vec![true, false, false]];
    let mut err = 0.0;
    for toy in 0..toys {
        let mut p = ModelParams::init(&cfg, seed.wrapping_add(toy as u64))?;
        p.set_normalization(&mean, &std)?;
        // biases and γ start at zero; perturb them off the symmetric point
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + toy as u64));
        let x: Vec<f64> = p.flat().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
        p.set_flat(&x)?;
        let f = GeneratorLoss::new(p, &sample, 2, 3, masks[toy % masks.len()].clone())?;
        worst(&f, &f.initial(), &mut err)?;
    }
    Ok(CheckResult {
        module: "generator",
        term: "full_pass",
        max_rel_error: err,
        tolerance: GENERATOR_TOLERANCE,
        toys,
    })
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Local | Suite::All) {
        out.extend(check_local(3, seed)?);
    }
    if matches!(suite, Suite::Global | Suite::All) {
        out.extend(check_global(3, seed)?);
    }
    if matches!(suite, Suite::Plane | Suite::All) {
        out.push(check_plane(20, seed)?);
    }
    if matches!(suite, Suite::Generator | Suite::All) {
        out.push(check_generator(3, seed)?);
    }
    Ok(out)
}
