//! Scalar building blocks shared by the energy terms.

use super::ad::Real;
use super::linalg::{Mat3, Vec3};

/// Below this rotation angle the first-order expansion `I + [w]x` is used.
pub const SMALL_ANGLE: f64 = 1e-8;

pub fn rodrigues<R: Real>(w: Vec3<R>) -> Mat3<R> {
    let th2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let one = R::cst(1.0);
    let z = R::zero();
    if th2.value().sqrt() < SMALL_ANGLE {
        return [
            [one, -w[2], w[1]],
            [w[2], one, -w[0]],
            [-w[1], w[0], one],
        ];
    }
    let th = th2.sqrt();
    let a = th.sin() / th;
    let b = (one - th.cos()) / th2;
    // R = I + a [w]x + b (w wᵀ - |w|² I)
    let mut r = [[z; 3]; 3];
    for (i, row) in r.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let mut v = b * w[i] * w[j];
            if i == j {
                v = v + one - b * th2;
            }
            *cell = v;
        }
    }
    r[0][1] -= a * w[2];
    r[0][2] += a * w[1];
    r[1][0] += a * w[2];
    r[1][2] -= a * w[0];
    r[2][0] -= a * w[1];
    r[2][1] += a * w[0];
    r
}

/// log(1 + exp(x)) without overflow.
#[inline]
pub fn softplus<R: Real>(x: R) -> R {
    if x.value() > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn huber<R: Real>(x: R, delta: f64) -> R {
    let a = x.abs();
    if a.value() <= delta {
        x * x * 0.5
    } else {
        (a - delta * 0.5) * delta
    }
}

/// Huber applied to the Euclidean norm of a 2D residual.
#[inline]
pub fn huber_norm2<R: Real>(dx: R, dy: R, delta: f64) -> R {
    let r2 = dx * dx + dy * dy;
    if r2.value() <= delta * delta {
        r2 * 0.5
    } else {
        (r2.sqrt() - delta * 0.5) * delta
    }
}
