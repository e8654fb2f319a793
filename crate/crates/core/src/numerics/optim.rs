//! Adam, plus a monotone driver that only accepts energy-decreasing steps.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Fold in a new gradient and return the bias-corrected update direction
    /// (to be scaled by per-coordinate learning rates and subtracted).
    pub fn direction(&mut self, grad: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        self.m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(grad)
            .map(|((m, v), &g)| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                (*m / c1) / ((*v / c2).sqrt() + self.eps)
            })
            .collect()
    }

    /// Plain Adam update with one learning rate.
    pub fn step(&mut self, x: &mut [f64], grad: &[f64], lr: f64) {
        let d = self.direction(grad);
        for (xi, di) in x.iter_mut().zip(d) {
            *xi -= lr * di;
        }
    }
}

#[derive(Clone, Debug)]
pub struct DescentOptions {
    pub iterations: usize,
    /// Stop once the relative decrease stays below this for `patience` accepted steps.
    pub rel_tol: f64,
    pub patience: usize,
    /// Stop once the step scale has been halved below this.
    pub min_scale: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions {
            iterations: 500,
            rel_tol: 1e-9,
            patience: 20,
            min_scale: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct DescentOutcome {
    pub iterations: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub final_energy: f64,
}

/// Minimise with Adam directions, rejecting any step that raises the energy.
///
/// `lr[i] == 0` freezes coordinate `i`. `on_accept` sees every accepted
/// iterate, and the initial point as iteration 0.
pub fn minimize_monotone<VG, V, A>(
    x: &mut [f64],
    lr: &[f64],
    opts: &DescentOptions,
    mut value_grad: VG,
    mut value: V,
    mut on_accept: A,
) -> Result<DescentOutcome>
where
    VG: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    V: FnMut(&[f64]) -> Result<f64>,
    A: FnMut(usize, &[f64], f64) -> Result<()>,
{
    assert_eq!(x.len(), lr.len(), "learning-rate layout mismatch");
    let mut adam = Adam::new(x.len());
    let mut out = DescentOutcome::default();
    let (mut energy, mut grad) = value_grad(x)?;
    if !energy.is_finite() {
        return Err(diverged(0, "initial energy is not finite"));
    }
    on_accept(0, x, energy)?;
    let mut scale = 1.0;
    let mut stalled = 0;
    let mut proposal = x.to_vec();
    for it in 1..=opts.iterations {
        out.iterations = it;
        if energy <= 1e-24 {
            break;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged(it, "gradient is not finite"));
        }
        let dir = adam.direction(&grad);
        let mut moved = false;
        for i in 0..x.len() {
            proposal[i] = x[i] - scale * lr[i] * dir[i];
            moved |= proposal[i] != x[i];
        }
        if !moved {
            break;
        }
        let trial = value(&proposal)?;
        if trial.is_finite() && trial <= energy {
            let decrease = energy - trial;
            x.copy_from_slice(&proposal);
            out.accepted += 1;
            on_accept(it, x, trial)?;
            let (e, g) = value_grad(x)?;
            if !e.is_finite() {
                return Err(diverged(it, "energy became non-finite"));
            }
            energy = e;
            grad = g;
            scale = (scale * 1.1).min(1.0);
            if decrease <= opts.rel_tol * energy.abs().max(1e-300) {
                stalled += 1;
                if stalled >= opts.patience {
                    break;
                }
            } else {
                stalled = 0;
            }
        } else {
            out.rejected += 1;
            scale *= 0.5;
            if scale < opts.min_scale {
                break;
            }
        }
    }
    out.final_energy = energy;
    Ok(out)
}

fn diverged(iteration: usize, reason: &str) -> Error {
    Error::OptimizationFailed {
        iteration,
        reason: reason.to_string(),
        last_valid: Box::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(2);
        for _ in 0..2000 {
            let g = vec![2.0 * x[0], 8.0 * x[1]];
            adam.step(&mut x, &g, 0.05);
        }
        assert!(x[0].abs() < 1e-3 && x[1].abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn monotone_trace_never_increases() {
        let f = |x: &[f64]| (x[0] - 1.0).powi(2) + 10.0 * (x[1] + x[0] * x[0]).powi(2);
        let mut x = vec![-1.5, 2.0];
        let mut trace = Vec::new();
        let out = minimize_monotone(
            &mut x,
            &[0.1, 0.1],
            &DescentOptions {
                iterations: 3000,
                ..Default::default()
            },
            |x| {
                let g0 = 2.0 * (x[0] - 1.0) + 40.0 * x[0] * (x[1] + x[0] * x[0]);
                let g1 = 20.0 * (x[1] + x[0] * x[0]);
                Ok((f(x), vec![g0, g1]))
            },
            |x| Ok(f(x)),
            |_, _, e| {
                trace.push(e);
                Ok(())
            },
        )
        .unwrap();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.final_energy < 1e-3, "{out:?}");
    }

    #[test]
    fn frozen_coordinates_stay_put() {
        let mut x = vec![1.0, 1.0];
        minimize_monotone(
            &mut x,
            &[0.1, 0.0],
            &DescentOptions::default(),
            |x| Ok((x[0] * x[0] + x[1] * x[1], vec![2.0 * x[0], 2.0 * x[1]])),
            |x| Ok(x[0] * x[0] + x[1] * x[1]),
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert_eq!(x[1], 1.0);
        assert!(x[0].abs() < 0.05);
    }

    #[test]
    fn non_finite_start_is_divergence() {
        let mut x = vec![0.0];
        let r = minimize_monotone(
            &mut x,
            &[0.1],
            &DescentOptions::default(),
            |_| Ok((f64::NAN, vec![0.0])),
            |_| Ok(f64::NAN),
            |_, _, _| Ok(()),
        );
        assert!(matches!(r, Err(Error::OptimizationFailed { .. })));
    }
}
