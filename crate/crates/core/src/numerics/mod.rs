//! Dense math, differentiation, and the scalar functions shared by every
//! energy term.

pub mod ad;
pub mod graph;
pub mod linalg;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use ad::{gradient, Real, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

fn ensure_finite(xs: &[f64], what: &str) -> Result<()> {
    match xs.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::invalid(format!("{what}: non-finite entry at index {i}"))),
        None => Ok(()),
    }
}

/// Axis-angle (radians) to rotation matrix.
pub fn rodrigues(axis_angle: [f64; 3]) -> Result<[[f64; 3]; 3]> {
    ensure_finite(&axis_angle, "rodrigues")?;
    Ok(scalar::rodrigues(axis_angle))
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    ensure_finite(logits, "softmax")?;
    Ok(graph::softmax_slice(logits))
}

pub fn softplus(x: f64) -> Result<f64> {
    ensure_finite(&[x], "softplus")?;
    Ok(scalar::softplus(x))
}

pub fn huber(x: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("huber delta must be > 0, got {delta}")));
    }
    ensure_finite(&[x], "huber")?;
    Ok(scalar::huber(x, delta))
}

/// A scalar function with an analytic gradient.
pub trait DifferentiableFunction {
    fn dim(&self) -> usize;
    fn evaluate(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Objective written once over [`Real`]; the tape provides its gradient.
pub trait ScalarObjective {
    fn dim(&self) -> usize;
    fn eval<R: Real>(&self, x: &[R]) -> Result<R>;
}

/// Adapts a [`ScalarObjective`] to [`DifferentiableFunction`].
pub struct Taped<O>(pub O);

impl<O: ScalarObjective> DifferentiableFunction for Taped<O> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn evaluate(&self, x: &[f64]) -> Result<f64> {
        self.0.eval::<f64>(x)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(ad::gradient(x, |v| self.0.eval::<Var>(v))?.1)
    }
}

impl<O: ScalarObjective> Taped<O> {
    pub fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        ad::gradient(x, |v| self.0.eval::<Var>(v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compare the analytic gradient with central differences at every coordinate.
pub fn grad_check(f: &dyn DifferentiableFunction, x: &[f64], step: f64) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    if x.len() != f.dim() {
        return Err(Error::invalid(format!(
            "grad_check: expected {} parameters, got {}",
            f.dim(),
            x.len()
        )));
    }
    let analytic = f.gradient(x)?;
    if analytic.len() != x.len() {
        return Err(Error::invalid("gradient dimension differs from parameter dimension"));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let fp = f.evaluate(&probe)?;
        probe[i] = x[i] - step;
        let fm = f.evaluate(&probe)?;
        probe[i] = x[i];
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_error || i == 0 {
            report = GradCheckReport {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quaternion_rotation(w: [f64; 3]) -> [[f64; 3]; 3] {
        // independent route: unit quaternion from axis-angle, then to matrix
        let th = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        let (s, c) = ((th / 2.0).sin(), (th / 2.0).cos());
        let (x, y, z) = (w[0] / th * s, w[1] / th * s, w[2] / th * s);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * c), 2.0 * (x * z + y * c)],
            [2.0 * (x * y + z * c), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * c)],
            [2.0 * (x * z - y * c), 2.0 * (y * z + x * c), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    fn orthonormality_error(r: &[[f64; 3]; 3]) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    #[test]
    fn rodrigues_examples() {
        let r = rodrigues([0.0; 3]).unwrap();
        assert_eq!(r, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

        let r = rodrigues([0.0, 0.0, std::f64::consts::PI]).unwrap();
        let expect = [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[i][j] - expect[i][j]).abs() < 1e-15);
            }
        }

        let w = [0.3, -0.2, 0.1];
        let r = rodrigues(w).unwrap();
        assert!(orthonormality_error(&r) < 1e-12);
        let q = quaternion_rotation(w);
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[i][j] - q[i][j]).abs() < 1e-10);
            }
        }
        assert!(rodrigues([f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[2.0, 2.0, 2.0]).unwrap();
        for v in &s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softplus_examples() {
        assert!((softplus(0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-100.0).unwrap() < 1e-40);
        assert!((softplus(100.0).unwrap() - 100.0).abs() < 1e-12);
        assert!(softplus(f64::INFINITY).is_err());
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(huber(0.5, 1.0).unwrap(), 0.125);
        assert_eq!(huber(2.0, 1.0).unwrap(), 1.5);
        assert!(huber(1.0, 0.0).is_err());
        assert!(huber(1.0, -1.0).is_err());
    }

    struct SquaredNorm;
    impl ScalarObjective for SquaredNorm {
        fn dim(&self) -> usize {
            2
        }
        fn eval<R: Real>(&self, x: &[R]) -> Result<R> {
            Ok(x[0] * x[0] + x[1] * x[1])
        }
    }

    struct HuberAt;
    impl ScalarObjective for HuberAt {
        fn dim(&self) -> usize {
            1
        }
        fn eval<R: Real>(&self, x: &[R]) -> Result<R> {
            Ok(scalar::huber(x[0], 1.0))
        }
    }

    #[test]
    fn grad_check_examples() {
        let r = grad_check(&Taped(SquaredNorm), &[1.0, 2.0], DEFAULT_FD_STEP).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        let r = grad_check(&Taped(HuberAt), &[0.5], DEFAULT_FD_STEP).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert!(grad_check(&Taped(SquaredNorm), &[1.0], DEFAULT_FD_STEP).is_err());
    }

    proptest! {
        #[test]
        fn rodrigues_is_orthonormal(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, s in 0.0f64..1.0) {
            let n = (x * x + y * y + z * z).sqrt().max(1e-12);
            let angle = s * 2.0 * std::f64::consts::PI;
            let r = rodrigues([x / n * angle, y / n * angle, z / n * angle]).unwrap();
            prop_assert!(orthonormality_error(&r) < 1e-12);
        }

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(v in proptest::collection::vec(-30.0f64..30.0, 1..12), c in -50.0f64..50.0) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (p, q) in a.iter().zip(&b) {
                prop_assert!(*p > 0.0);
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        fn huber_bounded_by_quadratic_and_monotone(x in -10.0f64..10.0, y in -10.0f64..10.0, d in 0.01f64..5.0) {
            let hx = huber(x, d).unwrap();
            prop_assert!(hx <= x * x / 2.0 + 1e-15);
            let hy = huber(y, d).unwrap();
            if x.abs() <= y.abs() {
                prop_assert!(hx <= hy + 1e-15);
            }
        }
    }
}
