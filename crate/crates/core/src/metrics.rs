//! Evaluation metrics over generated group motion.
//!
//! TIF, GenDiv and MMC are documented variants: their original definitions
//! are not public, so the report labels every value with the variant used.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{body_capsules, capsule_clearance, BodyShape, Capsule, MotionSequence, Pose, Skeleton, DEFAULT_FPS};
use crate::error::{Error, Result};
use crate::features::MusicFeatures;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Beat-alignment tolerance, seconds.
    pub mmc_sigma: f64,
    /// Kinematic beats must lie below this percentile of the speed curve.
    pub beat_percentile: f64,
    /// Minimum spacing of kinematic beats, seconds.
    pub beat_min_separation: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            mmc_sigma: 0.1,
            beat_percentile: 25.0,
            beat_min_separation: 0.2,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let err = |f: &str, m: &str| Error::Config {
            path: format!("{prefix}.{f}"),
            message: m.into(),
        };
        if !(self.mmc_sigma > 0.0) {
            return Err(err("mmc_sigma", "must be > 0"));
        }
        if !(0.0..=100.0).contains(&self.beat_percentile) {
            return Err(err("beat_percentile", "must lie in [0, 100]"));
        }
        if !(self.beat_min_separation >= 0.0) {
            return Err(err("beat_min_separation", "must be ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub variant: String,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tif: Option<MetricValue>,
    pub gendiv: Option<MetricValue>,
    pub mmc: Option<MetricValue>,
    pub fid_kinetic: Option<MetricValue>,
    pub config: MetricsConfig,
}

pub const TIF_VARIANT: &str = "documented variant: fraction of frames with any inter-dancer capsule penetration";
pub const GENDIV_VARIANT: &str = "documented variant: mean pairwise distance of kinetic feature vectors";
pub const MMC_VARIANT: &str = "documented variant: gaussian beat alignment of music beats to kinematic beats";
pub const FID_VARIANT: &str = "frechet distance over hand-crafted kinetic features";

fn frames_of(group: &[MotionSequence]) -> Result<usize> {
    let t = group.first().map_or(0, |m| m.len());
    if group.iter().any(|m| m.len() != t) {
        return Err(Error::invalid("all dancers must have the same number of frames"));
    }
    Ok(t)
}

fn spheres_overlap(a: ([f64; 3], f64), b: ([f64; 3], f64)) -> bool {
    let d2: f64 = (0..3).map(|k| (a.0[k] - b.0[k]).powi(2)).sum();
    d2 < (a.1 + b.1).powi(2)
}

fn body_sphere(caps: &[Capsule]) -> ([f64; 3], f64) {
    let n = caps.len() as f64;
    let mut c = [0.0; 3];
    for cap in caps {
        for k in 0..3 {
            c[k] += cap.b[k] / n;
        }
    }
    let r = caps
        .iter()
        .map(|cap| {
            let (sc, sr) = cap.bounding_sphere();
            (0..3).map(|k| (sc[k] - c[k]).powi(2)).sum::<f64>().sqrt() + sr
        })
        .fold(0.0, f64::max);
    (c, r)
}

/// True when any two bodies interpenetrate.
pub fn frame_has_penetration(bodies: &[Vec<Capsule>]) -> bool {
    let spheres: Vec<_> = bodies.iter().map(|b| body_sphere(b)).collect();
    for p in 0..bodies.len() {
        for q in p + 1..bodies.len() {
            if !spheres_overlap(spheres[p], spheres[q]) {
                continue;
            }
            for a in &bodies[p] {
                let sa = a.bounding_sphere();
                for b in &bodies[q] {
                    if spheres_overlap(sa, b.bounding_sphere()) && capsule_clearance(a, b) < 0.0 {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Fraction of frames in which at least one dancer pair interpenetrates.
pub fn tif(group: &[MotionSequence], skeleton: &Skeleton) -> Result<f64> {
    if group.len() < 2 {
        return Err(Error::invalid("TIF needs at least two dancers"));
    }
    let frames = frames_of(group)?;
    if frames == 0 {
        return Err(Error::invalid("TIF needs at least one frame"));
    }
    let joints = group.iter().map(|m| m.joints(skeleton)).collect::<Result<Vec<_>>>()?;
    let hits = (0..frames)
        .filter(|&t| {
            let bodies: Vec<Vec<Capsule>> = joints.iter().map(|j| body_capsules(&j[t], skeleton)).collect();
            frame_has_penetration(&bodies)
        })
        .count();
    Ok(hits as f64 / frames as f64)
}

/// Per joint: mean speed, speed variance and mean acceleration magnitude (3J values).
pub fn kinetic_features(motion: &MotionSequence, skeleton: &Skeleton) -> Result<Vec<f64>> {
    if motion.len() < 3 {
        return Err(Error::invalid("kinetic features need at least three frames"));
    }
    let fps = if motion.fps > 0.0 { motion.fps } else { DEFAULT_FPS };
    let j = motion.joints(skeleton)?;
    let nj = skeleton.num_joints();
    let t = j.len();
    let mut out = Vec::with_capacity(3 * nj);
    for k in 0..nj {
        let speeds: Vec<f64> = (0..t - 1)
            .map(|f| dist(j[f + 1][k], j[f][k]) * fps)
            .collect();
        let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
        let var = speeds.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / speeds.len() as f64;
        let acc = (1..t - 1)
            .map(|f| {
                let a: Vec<f64> = (0..3).map(|d| j[f + 1][k][d] - 2.0 * j[f][k][d] + j[f - 1][k][d]).collect();
                (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt() * fps * fps
            })
            .sum::<f64>()
            / (t - 2) as f64;
        out.extend([mean, var, acc]);
    }
    Ok(out)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean pairwise Euclidean distance between feature vectors.
pub fn gendiv_features(features: &[Vec<f64>]) -> Result<f64> {
    if features.len() < 2 {
        return Err(Error::invalid("GenDiv needs at least two motions"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("feature vectors differ in length"));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..features.len() {
        for k in i + 1..features.len() {
            sum += features[i]
                .iter()
                .zip(&features[k])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

pub fn gendiv(motions: &[MotionSequence], skeleton: &Skeleton) -> Result<f64> {
    if motions.len() < 2 {
        return Err(Error::invalid("GenDiv needs at least two motions"));
    }
    let f = motions
        .iter()
        .map(|m| kinetic_features(m, skeleton))
        .collect::<Result<Vec<_>>>()?;
    gendiv_features(&f)
}

/// Mean joint speed per frame (central differences, one-sided at the ends), m/s.
pub fn mean_joint_speed(motion: &MotionSequence, skeleton: &Skeleton) -> Result<Vec<f64>> {
    if motion.len() < 2 {
        return Err(Error::invalid("speed needs at least two frames"));
    }
    let fps = if motion.fps > 0.0 { motion.fps } else { DEFAULT_FPS };
    let j = motion.joints(skeleton)?;
    let t = j.len();
    let nj = skeleton.num_joints() as f64;
    Ok((0..t)
        .map(|f| {
            let (a, b, span) = match f {
                0 => (1, 0, 1.0),
                _ if f == t - 1 => (t - 1, t - 2, 1.0),
                _ => (f + 1, f - 1, 2.0),
            };
            j[a].iter().zip(&j[b]).map(|(p, q)| dist(*p, *q)).sum::<f64>() / nj * fps / span
        })
        .collect())
}

/// Linear-interpolated percentile (0..=100) of a sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Frames that are strict local minima of the speed curve, below the
/// configured percentile, thinned to the minimum separation (lower speed wins).
pub fn kinematic_beats(speed: &[f64], fps: f64, cfg: &MetricsConfig) -> Vec<usize> {
    if speed.len() < 3 {
        return Vec::new();
    }
    let thr = percentile(speed, cfg.beat_percentile);
    let min_gap = cfg.beat_min_separation * fps;
    let mut beats: Vec<usize> = Vec::new();
    for t in 1..speed.len() - 1 {
        let v = speed[t];
        if !(v < speed[t - 1] && v <= speed[t + 1] && v < thr) {
            continue;
        }
        match beats.last() {
            Some(&last) if ((t - last) as f64) < min_gap => {
                if v < speed[last] {
                    *beats.last_mut().expect("non-empty") = t;
                }
            }
            _ => beats.push(t),
        }
    }
    beats
}

/// Mean over music beats of exp(−d²/2σ²), d the distance to the nearest kinematic beat.
pub fn mmc_from_beats(kinematic: &[f64], music: &[f64], sigma: f64) -> Result<f64> {
    if music.is_empty() {
        return Err(Error::UndefinedMetric("music has no beats".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma must be > 0"));
    }
    if kinematic.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = music
        .iter()
        .map(|b| {
            let d = kinematic.iter().map(|k| (k - b).abs()).fold(f64::INFINITY, f64::min);
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / music.len() as f64)
}

pub fn mmc(motion: &MotionSequence, features: &MusicFeatures, cfg: &MetricsConfig, skeleton: &Skeleton) -> Result<f64> {
    cfg.validate("metrics")?;
    let music: Vec<f64> = features.beat_frames()?.iter().map(|&f| f as f64 / features.fps).collect();
    if music.is_empty() {
        return Err(Error::UndefinedMetric("music has no beats".into()));
    }
    let fps = if motion.fps > 0.0 { motion.fps } else { DEFAULT_FPS };
    let speed = mean_joint_speed(motion, skeleton)?;
    let kin: Vec<f64> = kinematic_beats(&speed, fps, cfg).iter().map(|&f| f as f64 / fps).collect();
    mmc_from_beats(&kin, &music, cfg.mmc_sigma)
}

/// Mean and covariance of row samples; covariance uses n−1 and gets +1e−6·I
/// when there are too few samples for it to be non-singular.
pub fn gaussian_stats(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if samples.is_empty() {
        return Err(Error::invalid("empty sample set"));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::invalid("samples must share a non-zero dimension"));
    }
    let n = samples.len();
    let x = DMatrix::from_fn(n, d, |i, k| samples[i][k]);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, k| x[(i, k)] - mu[k]);
    let mut cov = if n > 1 {
        centered.transpose() * &centered / (n - 1) as f64
    } else {
        DMatrix::zeros(d, d)
    };
    if n < d + 1 {
        cov += DMatrix::identity(d, d) * 1e-6;
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// ‖μ₁−μ₂‖² + Tr(Σ₁+Σ₂−2(Σ₁Σ₂)^{1/2}).
///
/// Tr((Σ₁Σ₂)^{1/2}) is the sum of singular values of √Σ₁√Σ₂, which is the
/// same for either argument order.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::invalid("mean and covariance dimensions disagree"));
    }
    let m = sym_sqrt(s1) * sym_sqrt(s2);
    let tr_cross = m.svd(false, false).singular_values.sum();
    let diff = mu1 - mu2;
    Ok((diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_cross).max(0.0))
}

pub fn fid_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = gaussian_stats(a)?;
    let (m2, s2) = gaussian_stats(b)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

pub fn fid_kinetic(a: &[MotionSequence], b: &[MotionSequence], skeleton: &Skeleton) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("FID needs non-empty motion sets"));
    }
    let fa = a.iter().map(|m| kinetic_features(m, skeleton)).collect::<Result<Vec<_>>>()?;
    let fb = b.iter().map(|m| kinetic_features(m, skeleton)).collect::<Result<Vec<_>>>()?;
    fid_features(&fa, &fb)
}

/// Every metric that the inputs allow.
pub fn evaluate(
    generated: &[MotionSequence],
    reference: Option<&[MotionSequence]>,
    features: Option<&MusicFeatures>,
    cfg: &MetricsConfig,
    skeleton: &Skeleton,
) -> Result<MetricsReport> {
    cfg.validate("metrics")?;
    let frames = frames_of(generated)?;
    let mut r = MetricsReport {
        config: cfg.clone(),
        ..MetricsReport::default()
    };
    if generated.len() >= 2 {
        r.tif = Some(MetricValue {
            value: tif(generated, skeleton)?,
            variant: TIF_VARIANT.into(),
            samples: frames,
            sigma: None,
        });
        r.gendiv = Some(MetricValue {
            value: gendiv(generated, skeleton)?,
            variant: GENDIV_VARIANT.into(),
            samples: generated.len(),
            sigma: None,
        });
    }
    if let Some(f) = features {
        let vals = generated
            .iter()
            .map(|m| mmc(m, f, cfg, skeleton))
            .collect::<Result<Vec<_>>>()?;
        r.mmc = Some(MetricValue {
            value: vals.iter().sum::<f64>() / vals.len() as f64,
            variant: MMC_VARIANT.into(),
            samples: vals.len(),
            sigma: Some(cfg.mmc_sigma),
        });
    }
    if let Some(reference) = reference {
        r.fid_kinetic = Some(MetricValue {
            value: fid_kinetic(generated, reference, skeleton)?,
            variant: FID_VARIANT.into(),
            samples: generated.len() + reference.len(),
            sigma: None,
        });
    }
    Ok(r)
}

/// Dancers dropped uniformly into a square area, each taking a random walk
/// with reflecting walls. Used to echo how TIF grows with group size.
pub fn random_walk_group(dancers: usize, frames: usize, area: f64, step: f64, seed: u64) -> Result<Vec<MotionSequence>> {
    if dancers == 0 || frames == 0 || !(area > 0.0) || !(step >= 0.0) {
        return Err(Error::invalid("random walk needs dancers, frames and a positive area"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = 6.0 + area / 2.0;
    let mut out = Vec::with_capacity(dancers);
    for _ in 0..dancers {
        let mut x = rng.random_range(-area / 2.0..area / 2.0);
        let mut z = rng.random_range(-area / 2.0..area / 2.0);
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let mut poses = Vec::with_capacity(frames);
        for _ in 0..frames {
            let mut pose = Pose::rest([x, 0.0, depth + z]);
            // face the walking direction
            pose.set_joint_rotation(0, [0.0, heading, 0.0]);
            poses.push(pose);
            x = reflect(x + rng.random_range(-step..=step), area / 2.0);
            z = reflect(z + rng.random_range(-step..=step), area / 2.0);
        }
        out.push(MotionSequence::new(poses, BodyShape::default(), DEFAULT_FPS)?);
    }
    Ok(out)
}

fn reflect(v: f64, half: f64) -> f64 {
    if v > half {
        2.0 * half - v
    } else if v < -half {
        -2.0 * half - v
    } else {
        v
    }
}

/// Mean TIF over `seeds` random-walk groups for each group size.
pub fn tif_by_group_size(
    sizes: &[usize],
    seeds: u64,
    frames: usize,
    area: f64,
    skeleton: &Skeleton,
) -> Result<Vec<(usize, f64)>> {
    sizes
        .iter()
        .map(|&n| {
            let mut total = 0.0;
            for s in 0..seeds {
                let g = random_walk_group(n, frames, area, 0.03, s * 1000 + n as u64)?;
                total += tif(&g, skeleton)?;
            }
            Ok((n, total / seeds as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;

    fn static_at(tau: [f64; 3], frames: usize) -> MotionSequence {
        MotionSequence::new(vec![Pose::rest(tau); frames], BodyShape::default(), DEFAULT_FPS).unwrap()
    }

    #[test]
    fn tif_constructed_cases() {
        let s = Skeleton::default();
        let apart = [static_at([0.0, 0.0, 6.0], 20), static_at([5.0, 0.0, 6.0], 20)];
        assert_eq!(tif(&apart, &s).unwrap(), 0.0);
        let overlap = [static_at([0.0, 0.0, 6.0], 20), static_at([0.0, 0.0, 6.0], 20)];
        assert_eq!(tif(&overlap, &s).unwrap(), 1.0);
        let mut b = static_at([5.0, 0.0, 6.0], 120);
        for t in 40..70 {
            b.poses[t].tau = [0.1, 0.0, 6.0];
        }
        let partial = [static_at([0.0, 0.0, 6.0], 120), b];
        assert_eq!(tif(&partial, &s).unwrap(), 0.25);
        assert!(tif(&partial[..1], &s).is_err());
    }

    #[test]
    fn tif_is_translation_invariant() {
        let s = Skeleton::default();
        let g = random_walk_group(4, 30, 2.0, 0.05, 3).unwrap();
        let shifted: Vec<MotionSequence> = g
            .iter()
            .map(|m| {
                let mut m = m.clone();
                for p in &mut m.poses {
                    p.tau = [p.tau[0] + 3.0, p.tau[1] - 0.5, p.tau[2] + 2.0];
                }
                m
            })
            .collect();
        assert_eq!(tif(&g, &s).unwrap(), tif(&shifted, &s).unwrap());
    }

    #[test]
    fn gendiv_examples() {
        let a = vec![1.0, 2.0, 3.0];
        let mut b = a.clone();
        b[1] += 1.0;
        assert_eq!(gendiv_features(&[a.clone(), a.clone()]).unwrap(), 0.0);
        assert!((gendiv_features(&[a.clone(), b.clone()]).unwrap() - 1.0).abs() < 1e-15);
        let c = vec![0.0, -1.0, 4.0];
        let x = gendiv_features(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = gendiv_features(&[c, a.clone(), b]).unwrap();
        assert!((x - y).abs() < 1e-12);
        assert!(gendiv_features(&[a]).is_err());
    }

    fn beat_motion(beats: &[usize], frames: usize, period: f64) -> MotionSequence {
        // speed ∝ 1 − cos, zero exactly on each beat
        let phase = beats[0] as f64;
        let poses = (0..frames)
            .map(|t| {
                let u = (t as f64 - phase) / period * std::f64::consts::TAU;
                let x = 0.05 * (u - u.sin());
                Pose::rest([x, 0.0, 6.0])
            })
            .collect();
        MotionSequence::new(poses, BodyShape::default(), DEFAULT_FPS).unwrap()
    }

    #[test]
    fn kinematic_beats_land_on_speed_minima() {
        let s = Skeleton::default();
        let beats: Vec<usize> = (0..6).map(|k| 7 + 15 * k).collect();
        let m = beat_motion(&beats, 90, 15.0);
        let speed = mean_joint_speed(&m, &s).unwrap();
        let kb = kinematic_beats(&speed, 30.0, &MetricsConfig::default());
        assert_eq!(kb, beats[..6].iter().copied().filter(|&b| b > 0 && b < 89).collect::<Vec<_>>());
    }

    #[test]
    fn mmc_examples() {
        let music = [0.5, 1.0, 1.5];
        assert_eq!(mmc_from_beats(&music, &music, 0.1).unwrap(), 1.0);
        let off: Vec<f64> = music.iter().map(|b| b + 0.1).collect();
        assert!((mmc_from_beats(&off, &music, 0.1).unwrap() - (-0.5f64).exp()).abs() < 1e-9);
        assert!((mmc_from_beats(&off, &music, 0.1).unwrap() - 0.606531).abs() < 1e-6);
        assert_eq!(mmc_from_beats(&[], &music, 0.1).unwrap(), 0.0);
        assert!(matches!(mmc_from_beats(&music, &[], 0.1), Err(Error::UndefinedMetric(_))));
        // uniform time shift
        let a = mmc_from_beats(&[0.52, 1.07, 1.4], &music, 0.1).unwrap();
        let b = mmc_from_beats(&[3.52, 4.07, 4.4], &[3.5, 4.0, 4.5], 0.1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn static_motion_has_no_kinematic_beats() {
        let s = Skeleton::default();
        let m = static_at([0.0, 0.0, 6.0], 40);
        let speed = mean_joint_speed(&m, &s).unwrap();
        assert!(kinematic_beats(&speed, 30.0, &MetricsConfig::default()).is_empty());
        assert_eq!(mmc_from_beats(&[], &[1.0], 0.1).unwrap(), 0.0);
    }

    fn random_gaussian(rng: &mut ChaCha8Rng) -> (DVector<f64>, DMatrix<f64>) {
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let cov = &a * a.transpose() + DMatrix::identity(4, 4) * 0.1;
        let mu = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        (mu, cov)
    }

    #[test]
    fn frechet_matches_general_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (m1, s1) = random_gaussian(&mut rng);
            let (m2, s2) = random_gaussian(&mut rng);
            let got = frechet_distance(&m1, &s1, &m2, &s2).unwrap();
            // Σ₁Σ₂ is similar to a PSD matrix: its eigenvalues are real and ≥ 0
            let prod = Matrix4::from_iterator((&s1 * &s2).iter().copied());
            let tr: f64 = prod.complex_eigenvalues().iter().map(|c| c.re.max(0.0).sqrt()).sum();
            let d = &m1 - &m2;
            let oracle = d.dot(&d) + s1.trace() + s2.trace() - 2.0 * tr;
            assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
            let back = frechet_distance(&m2, &s2, &m1, &s1).unwrap();
            assert!((got - back).abs() < 1e-8);
        }
    }

    #[test]
    fn frechet_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (m, s) = random_gaussian(&mut rng);
        assert!(frechet_distance(&m, &s, &m, &s).unwrap() <= 1e-8);
        let mut m2 = m.clone();
        m2[2] += 1.0;
        assert!((frechet_distance(&m, &s, &m2, &s).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn fid_kinetic_self_distance_is_zero() {
        let s = Skeleton::default();
        let set: Vec<MotionSequence> = (0..5).flat_map(|k| random_walk_group(2, 20, 3.0, 0.05, k).unwrap()).collect();
        let other: Vec<MotionSequence> = (10..15).flat_map(|k| random_walk_group(2, 20, 3.0, 0.1, k).unwrap()).collect();
        assert!(fid_kinetic(&set, &set, &s).unwrap() <= 1e-8);
        let ab = fid_kinetic(&set, &other, &s).unwrap();
        let ba = fid_kinetic(&other, &set, &s).unwrap();
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-8, "{ab} {ba}");
        assert!(fid_kinetic(&[], &set, &s).is_err());
    }

    #[test]
    fn kinetic_features_of_constant_velocity() {
        let s = Skeleton::default();
        let poses = (0..10).map(|t| Pose::rest([0.1 * t as f64, 0.0, 6.0])).collect();
        let m = MotionSequence::new(poses, BodyShape::default(), 30.0).unwrap();
        let f = kinetic_features(&m, &s).unwrap();
        assert_eq!(f.len(), 3 * s.num_joints());
        for k in 0..s.num_joints() {
            assert!((f[3 * k] - 3.0).abs() < 1e-9);
            assert!(f[3 * k + 1].abs() < 1e-9);
            assert!(f[3 * k + 2].abs() < 1e-6);
        }
    }
}
