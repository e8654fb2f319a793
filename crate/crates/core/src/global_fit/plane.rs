use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::scalar::huber;
use crate::numerics::{Real, ScalarObjective};

/// Plane through `point` with unit `normal`; positive side is where the bodies are.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub normal: [f64; 3],
    pub point: [f64; 3],
}

impl GroundPlane {
    /// Normalises `normal`; fails on a zero or non-finite normal.
    pub fn new(normal: [f64; 3], point: [f64; 3]) -> Result<Self> {
        let len = (normal[0] * normal[0] + normal[1] * normal[1] + normal[2] * normal[2]).sqrt();
        if !(len > 1e-12) || !len.is_finite() || point.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("ground plane needs a finite, non-zero normal"));
        }
        Ok(GroundPlane {
            normal: [normal[0] / len, normal[1] / len, normal[2] / len],
            point,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n2: f64 = self.normal.iter().map(|v| v * v).sum();
        if !((n2.sqrt() - 1.0).abs() <= 1e-9) || self.point.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("ground plane normal must have unit length"));
        }
        Ok(())
    }

    pub fn signed_distance(&self, x: [f64; 3]) -> f64 {
        (0..3).map(|k| (x[k] - self.point[k]) * self.normal[k]).sum()
    }

    /// Angle between normals in radians, ignoring orientation.
    pub fn angle_to(&self, normal: [f64; 3]) -> f64 {
        let n = Vector3::from(normal).normalize();
        Vector3::from(self.normal).dot(&n).abs().min(1.0).acos()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneFitOptions {
    pub delta: f64,
    pub iterations: usize,
    /// Orient the normal toward this point when given.
    pub toward: Option<[f64; 3]>,
}

impl Default for PlaneFitOptions {
    fn default() -> Self {
        PlaneFitOptions {
            delta: 0.05,
            iterations: 100,
            toward: None,
        }
    }
}

/// Weighted Σ H((x_i − f)ᵀn, δ) + penalty·(nᵀn − 1)² over the normal `n`.
pub struct PlaneObjective<'a> {
    pub points: &'a [[f64; 3]],
    pub weights: &'a [f64],
    pub point: [f64; 3],
    pub delta: f64,
    pub penalty: f64,
}

impl ScalarObjective for PlaneObjective<'_> {
    fn dim(&self) -> usize {
        3
    }

    fn eval<R: Real>(&self, n: &[R]) -> Result<R> {
        let mut acc = R::zero();
        for (p, &w) in self.points.iter().zip(self.weights) {
            let mut r = R::zero();
            for k in 0..3 {
                r += n[k] * (p[k] - self.point[k]);
            }
            acc += huber(r, self.delta) * w;
        }
        let nn = n[0].sq() + n[1].sq() + n[2].sq();
        Ok(acc + (nn - 1.0).sq() * self.penalty)
    }
}

fn check_inputs(points: &[[f64; 3]], weights: &[f64]) -> Result<()> {
    if points.len() != weights.len() {
        return Err(Error::invalid("plane fit needs one weight per point"));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("plane fit inputs must be finite with weights >= 0"));
    }
    let used = weights.iter().filter(|&&w| w > 0.0).count();
    if used < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "plane fit needs at least 3 weighted points, got {used}"
        )));
    }
    Ok(())
}

fn weighted_scatter(points: &[[f64; 3]], weights: &[f64], center: Vector3<f64>) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for (p, &w) in points.iter().zip(weights) {
        let d = Vector3::from(*p) - center;
        m += d * d.transpose() * w;
    }
    m
}

fn smallest_eigvec(m: Matrix3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = Vector3::new(eig.eigenvalues[idx[0]], eig.eigenvalues[idx[1]], eig.eigenvalues[idx[2]]);
    (eig.eigenvectors.column(idx[0]).into_owned(), vals)
}

fn orient(n: Vector3<f64>, reference: Option<Vector3<f64>>) -> Vector3<f64> {
    match reference {
        Some(r) if n.dot(&r) < 0.0 => -n,
        Some(_) => n,
        None => {
            // deterministic sign: largest-magnitude component positive
            let k = n.iamax();
            if n[k] < 0.0 {
                -n
            } else {
                n
            }
        }
    }
}

/// Weighted median of scalars; ties resolve toward the lower value.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| weights[i] > 0.0).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = idx.iter().map(|&i| weights[i]).sum();
    let mut acc = 0.0;
    for &i in &idx {
        acc += weights[i];
        if acc >= 0.5 * total {
            return values[i];
        }
    }
    idx.last().map_or(0.0, |&i| values[i])
}

/// Weighted geometric median (Weiszfeld iterations from the weighted mean).
pub fn weighted_geometric_median(points: &[[f64; 3]], weights: &[f64]) -> Result<[f64; 3]> {
    check_inputs(points, weights)?;
    let total: f64 = weights.iter().sum();
    let mut m = points
        .iter()
        .zip(weights)
        .fold(Vector3::zeros(), |acc, (p, &w)| acc + Vector3::from(*p) * w)
        / total;
    for _ in 0..500 {
        let mut num = Vector3::zeros();
        let mut den = 0.0;
        for (p, &w) in points.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let d = (Vector3::from(*p) - m).norm().max(1e-12);
            num += Vector3::from(*p) * (w / d);
            den += w / d;
        }
        let next = num / den;
        let step = (next - m).norm();
        m = next;
        if step < 1e-13 {
            break;
        }
    }
    Ok([m[0], m[1], m[2]])
}

/// Plain least-squares plane through the weighted centroid.
pub fn fit_plane_least_squares(points: &[[f64; 3]], weights: &[f64], toward: Option<[f64; 3]>) -> Result<GroundPlane> {
    check_inputs(points, weights)?;
    let total: f64 = weights.iter().sum();
    let c = points
        .iter()
        .zip(weights)
        .fold(Vector3::zeros(), |acc, (p, &w)| acc + Vector3::from(*p) * w)
        / total;
    let (n, vals) = smallest_eigvec(weighted_scatter(points, weights, c));
    check_spread(vals)?;
    let n = orient(n, toward.map(|t| Vector3::from(t) - c));
    GroundPlane::new([n[0], n[1], n[2]], [c[0], c[1], c[2]])
}

fn check_spread(vals: Vector3<f64>) -> Result<()> {
    let scale = vals[2].abs().max(1e-300);
    if vals[2] <= 1e-20 || vals[1] <= 1e-10 * scale {
        return Err(Error::DegenerateGeometry(
            "contact points are coincident or collinear".into(),
        ));
    }
    Ok(())
}

/// Huber plane fit by iteratively reweighted least squares.
///
/// Residuals are first measured from the weighted geometric median; each
/// round then takes the reweighted centroid as the point and the smallest
/// principal axis of the reweighted scatter as the normal. Every step
/// commutes with rotations of the input.
pub fn fit_ground_plane(points: &[[f64; 3]], weights: &[f64], opts: &PlaneFitOptions) -> Result<GroundPlane> {
    if !(opts.delta > 0.0) {
        return Err(Error::invalid(format!("plane Huber delta must be > 0, got {}", opts.delta)));
    }
    check_inputs(points, weights)?;
    let total: f64 = weights.iter().sum();
    let mean = points
        .iter()
        .zip(weights)
        .fold(Vector3::zeros(), |acc, (p, &w)| acc + Vector3::from(*p) * w)
        / total;
    let (_, spread) = smallest_eigvec(weighted_scatter(points, weights, mean));
    check_spread(spread)?;

    let mut f = Vector3::from(weighted_geometric_median(points, weights)?);
    let (mut n, _) = smallest_eigvec(weighted_scatter(points, weights, f));
    let mut irls = vec![0.0; points.len()];
    for _ in 0..opts.iterations {
        for (i, (p, &w)) in points.iter().zip(weights).enumerate() {
            let r = (Vector3::from(*p) - f).dot(&n).abs();
            irls[i] = if r <= opts.delta { w } else { w * opts.delta / r };
        }
        let total: f64 = irls.iter().sum();
        let center = points
            .iter()
            .zip(&irls)
            .fold(Vector3::zeros(), |acc, (p, &u)| acc + Vector3::from(*p) * u)
            / total;
        let (next, _) = smallest_eigvec(weighted_scatter(points, &irls, center));
        let next = orient(next, Some(n));
        let change = (next - n).norm() + (center - f).norm();
        n = next;
        f = center;
        if change < 1e-14 {
            break;
        }
    }
    let n = orient(n, opts.toward.map(|t| Vector3::from(t) - f));
    GroundPlane::new([n[0], n[1], n[2]], [f[0], f[1], f[2]])
}

/// Value of the robust plane objective for a given plane.
pub fn plane_objective(points: &[[f64; 3]], weights: &[f64], plane: &GroundPlane, delta: f64) -> f64 {
    points
        .iter()
        .zip(weights)
        .map(|(p, &w)| w * huber(plane.signed_distance(*p), delta))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Taped, DEFAULT_FD_STEP};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noisy_plane(seed: u64, n: usize, sigma: f64, outliers: usize) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut pts: Vec<[f64; 3]> = (0..n - outliers)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), noise.sample(&mut rng)])
            .collect();
        for _ in 0..outliers {
            pts.push([rng.random_range(0.6..1.0), rng.random_range(0.6..1.0), 1.0]);
        }
        pts
    }

    #[test]
    fn weighted_median_ties_go_low() {
        assert_eq!(weighted_median(&[3.0, 1.0, 2.0, 4.0], &[1.0; 4]), 2.0);
        assert_eq!(weighted_median(&[1.0, 2.0, 9.0], &[1.0, 1.0, 5.0]), 9.0);
        assert_eq!(weighted_median(&[5.0], &[2.0]), 5.0);
    }

    #[test]
    fn exact_plane() {
        let pts: Vec<[f64; 3]> = (0..20).map(|i| [(i % 5) as f64, (i / 5) as f64 * 0.7, 0.0]).collect();
        let w = vec![1.0; pts.len()];
        let p = fit_ground_plane(&pts, &w, &PlaneFitOptions::default()).unwrap();
        assert!(p.normal[2].abs() > 1.0 - 1e-6);
        assert!(plane_objective(&pts, &w, &p, 0.05) < 1e-20);
    }

    #[test]
    fn gaussian_noise_under_one_degree() {
        let pts = noisy_plane(3, 100, 0.01, 0);
        let w = vec![1.0; 100];
        let p = fit_ground_plane(&pts, &w, &PlaneFitOptions::default()).unwrap();
        assert!(p.angle_to([0.0, 0.0, 1.0]).to_degrees() < 1.0);
    }

    #[test]
    fn outliers_beat_least_squares() {
        let pts = noisy_plane(5, 100, 0.01, 10);
        let w = vec![1.0; 100];
        let robust = fit_ground_plane(&pts, &w, &PlaneFitOptions::default()).unwrap();
        let ls = fit_plane_least_squares(&pts, &w, None).unwrap();
        let (a, b) = (
            robust.angle_to([0.0, 0.0, 1.0]).to_degrees(),
            ls.angle_to([0.0, 0.0, 1.0]).to_degrees(),
        );
        assert!(a < 2.0, "huber {a}");
        assert!(b > 5.0, "ls {b}");
    }

    #[test]
    fn normal_points_toward_hint() {
        let pts = noisy_plane(1, 30, 0.0, 0);
        let w = vec![1.0; 30];
        let up = fit_ground_plane(
            &pts,
            &w,
            &PlaneFitOptions {
                toward: Some([0.0, 0.0, 2.0]),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(up.normal[2] > 0.999);
        let down = fit_ground_plane(
            &pts,
            &w,
            &PlaneFitOptions {
                toward: Some([0.0, 0.0, -2.0]),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(down.normal[2] < -0.999);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        let w = vec![1.0; 10];
        assert!(matches!(
            fit_ground_plane(&pts, &w, &PlaneFitOptions::default()),
            Err(Error::DegenerateGeometry(_))
        ));
        assert!(matches!(
            fit_ground_plane(&pts[..2], &w[..2], &PlaneFitOptions::default()),
            Err(Error::DegenerateGeometry(_))
        ));
        let same = vec![[1.0, 1.0, 1.0]; 5];
        assert!(fit_ground_plane(&same, &w[..5], &PlaneFitOptions::default()).is_err());
    }

    #[test]
    fn objective_passes_grad_check() {
        let pts = noisy_plane(8, 40, 0.03, 4);
        let w: Vec<f64> = (0..40).map(|i| 0.5 + (i % 3) as f64 * 0.25).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let f = Taped(PlaneObjective {
                points: &pts,
                weights: &w,
                point: [0.1, -0.1, 0.0],
                delta: 0.05,
                penalty: 10.0,
            });
            let n = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.8..1.2)];
            let r = grad_check(&f, &n, DEFAULT_FD_STEP).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    fn rotation(a: f64, b: f64, c: f64) -> Matrix3<f64> {
        *nalgebra::Rotation3::from_euler_angles(a, b, c).matrix()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn fit_is_rotation_equivariant(seed in 0u64..1000, a in -3.0f64..3.0, b in -1.5f64..1.5, c in -3.0f64..3.0) {
            let pts = noisy_plane(seed, 60, 0.02, 6);
            let w: Vec<f64> = (0..60).map(|i| 1.0 + (i % 4) as f64 * 0.1).collect();
            let hint = [0.0, 0.0, 1.5];
            let r = rotation(a, b, c);
            let rot = |p: [f64; 3]| {
                let v = r * Vector3::from(p);
                [v[0], v[1], v[2]]
            };
            let base = fit_ground_plane(&pts, &w, &PlaneFitOptions { toward: Some(hint), ..Default::default() }).unwrap();
            let rpts: Vec<[f64; 3]> = pts.iter().map(|p| rot(*p)).collect();
            let turned = fit_ground_plane(&rpts, &w, &PlaneFitOptions { toward: Some(rot(hint)), ..Default::default() }).unwrap();
            let expect = rot(base.normal);
            for k in 0..3 {
                prop_assert!((turned.normal[k] - expect[k]).abs() < 1e-6, "{:?} vs {:?}", turned.normal, expect);
            }
        }
    }
}
