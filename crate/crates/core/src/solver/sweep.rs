//! Backward co-state sweep and forward variational sweep over a recorded tape.
//!
//! The co-state scheme is the partitioned companion of the forward RK
//! method: with `b̃_i = b_i` for `b_i ≠ 0` and `b̃_i = τ` otherwise,
//!
//! ```text
//! p_l    = p_{l+1} + τ Σ_i b̃_i k_i,          k_i = (∂_y drift(y_li))ᵀ p_li
//! p_li   = p_{l+1} + (τ / b_i) Σ_j b̃_j a_ji k_j   (b_i ≠ 0)
//! p_li   =           Σ_j b̃_j a_ji k_j             (b_i = 0)
//! ∇θ    += τ Σ_i b̃_i (∂_θ drift(y_li))ᵀ p_li
//! ```
//!
//! (`k_i = -h_li` in the potential-gradient sign convention.) Because each
//! `p_li` only depends on later stages, the scheme is explicit backward in
//! time, and it is exactly the transpose of the forward step's linearization:
//! the gradient returned is the derivative of the discrete map.

use super::ForwardTape;
use crate::error::{config, Result};
use crate::field::{MlpField, ParamVector, Scratch};

/// Result of [`adjoint_sweep`].
#[derive(Debug, Clone)]
pub struct AdjointSweep {
    pub p_start: Vec<f64>,
    pub grad: ParamVector,
    /// Co-state at every step boundary, `p_0 … p_L` (`p_L = p_end`).
    pub p_steps: Vec<Vec<f64>>,
}

fn check_tape(tape: &ForwardTape, field: &MlpField, v: &[f64]) -> Result<()> {
    if tape.dim != field.dim() {
        return config(format!("tape dimension {} does not match field dimension {}", tape.dim, field.dim()));
    }
    if v.len() != tape.dim {
        return config(format!("vector has length {}, expected {}", v.len(), tape.dim));
    }
    Ok(())
}

/// Propagates `p_end` back to the start of the tape and returns the gradient
/// of `⟨y_end(θ), p_end⟩` with respect to the field parameters.
pub fn adjoint_sweep(tape: &ForwardTape, field: &MlpField, p_end: &[f64]) -> Result<AdjointSweep> {
    check_tape(tape, field, p_end)?;
    let mut p = p_end.to_vec();
    let mut grad = vec![0.0; field.num_params()];
    let mut p_steps = Vec::with_capacity(tape.steps.len() + 1);
    let mut s = field.scratch();
    adjoint_sweep_into(tape, field, &mut p, &mut grad, Some(&mut p_steps), &mut s);
    Ok(AdjointSweep {
        p_start: p,
        grad: ParamVector(grad),
        p_steps,
    })
}

/// In-place form used by the training loop: `p` enters as `p_end` and leaves
/// as `p_start`; the parameter gradient is added into `grad`. Dimensions are
/// not re-checked.
pub fn adjoint_sweep_into(
    tape: &ForwardTape,
    field: &MlpField,
    p: &mut [f64],
    grad: &mut [f64],
    mut record: Option<&mut Vec<Vec<f64>>>,
    scratch: &mut Scratch,
) {
    let d = tape.dim;
    let tab = &tape.tableau;
    let st = tab.stages;
    let mut k = vec![0.0; st * d];
    let mut p_stage = vec![0.0; d];
    let mut live = vec![false; st];
    if let Some(r) = record.as_deref_mut() {
        r.clear();
        r.push(p.to_vec());
    }
    for step in tape.steps.iter().rev() {
        let tau = step.tau;
        for i in (0..st).rev() {
            let bt_i = tab.b_tilde(i, tau);
            if tab.b[i] != 0.0 {
                p_stage.copy_from_slice(p);
            } else {
                p_stage.fill(0.0);
            }
            let coef = if tab.b[i] != 0.0 { tau / tab.b[i] } else { 1.0 };
            for j in i + 1..st {
                let aji = tab.a(j, i);
                if aji != 0.0 && live[j] {
                    let w = coef * tab.b_tilde(j, tau) * aji;
                    for (ps, kj) in p_stage.iter_mut().zip(&k[j * d..(j + 1) * d]) {
                        *ps += w * kj;
                    }
                }
            }
            let ki = &mut k[i * d..(i + 1) * d];
            // stages whose co-state is identically zero contribute nothing
            live[i] = p_stage.iter().any(|&x| x != 0.0);
            if live[i] {
                field.vjp_and_param_grad(step.stage(i, d), &p_stage, tau * bt_i, Some(grad), ki, scratch);
            } else {
                ki.fill(0.0);
            }
        }
        for i in 0..st {
            if live[i] {
                let w = tau * tab.b_tilde(i, tau);
                for (pv, kv) in p.iter_mut().zip(&k[i * d..(i + 1) * d]) {
                    *pv += w * kv;
                }
            }
        }
        if let Some(r) = record.as_deref_mut() {
            r.push(p.to_vec());
        }
    }
    if let Some(r) = record {
        r.reverse();
    }
}

/// Propagates a perturbation `δ_0` forward through the same RK scheme,
/// returning `δ` at every step boundary `δ_0 … δ_L`.
pub fn variational_sweep(tape: &ForwardTape, field: &MlpField, delta0: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_tape(tape, field, delta0)?;
    let d = tape.dim;
    let tab = &tape.tableau;
    let st = tab.stages;
    let mut s = field.scratch();
    let mut dv = vec![0.0; st * d];
    let mut ds = vec![0.0; d];
    let mut delta = delta0.to_vec();
    let mut out = Vec::with_capacity(tape.steps.len() + 1);
    out.push(delta.clone());
    for step in &tape.steps {
        let tau = step.tau;
        for i in 0..st {
            ds.copy_from_slice(&delta);
            for j in 0..i {
                let aij = tab.a(i, j);
                if aij != 0.0 {
                    for (x, dj) in ds.iter_mut().zip(&dv[j * d..(j + 1) * d]) {
                        *x += tau * aij * dj;
                    }
                }
            }
            field.jvp_into(step.stage(i, d), &ds, &mut dv[i * d..(i + 1) * d], &mut s);
        }
        for i in 0..st {
            let bi = tab.b[i];
            if bi != 0.0 {
                for (x, di) in delta.iter_mut().zip(&dv[i * d..(i + 1) * d]) {
                    *x += tau * bi * di;
                }
            }
        }
        out.push(delta.clone());
    }
    Ok(out)
}

/// Jacobian `∂y_end/∂y_0` of the discrete flow map, row-major `d × d`.
pub fn flow_jacobian(tape: &ForwardTape, field: &MlpField) -> Result<Vec<f64>> {
    let d = tape.dim;
    let mut jac = vec![0.0; d * d];
    for c in 0..d {
        let mut e = vec![0.0; d];
        e[c] = 1.0;
        let col = variational_sweep(tape, field, &e)?.pop().unwrap();
        for r in 0..d {
            jac[r * d + c] = col[r];
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldMode;
    use crate::solver::{integrate_fixed, integrate_forward, ButcherTableau, Method, StepControl};

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn zero_costate_gives_zero() {
        let f = MlpField::init(&[2, 8, 1], FieldMode::Scalar, 3).unwrap();
        let tape = integrate_fixed(&f, &[0.3, -0.2], (0.0, 0.1), Method::Dopri5, 0.02).unwrap();
        let r = adjoint_sweep(&tape, &f, &[0.0, 0.0]).unwrap();
        assert_eq!(r.p_start, vec![0.0, 0.0]);
        assert!(r.grad.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_potential_gradient() {
        let f = MlpField::from_params(&[2, 1], FieldMode::Scalar, ParamVector(vec![0.4, -1.2, 0.7])).unwrap();
        let tape = integrate_fixed(&f, &[1.0, 1.0], (0.0, 0.3), Method::Dopri5, 0.1).unwrap();
        let p_end = [2.0, -0.5];
        let r = adjoint_sweep(&tape, &f, &p_end).unwrap();
        assert_eq!(r.p_start, p_end.to_vec());
        // y_end = y0 - T w, so ∂⟨y_end, p⟩/∂w = -T p
        assert!((r.grad[0] + 0.3 * 2.0).abs() < 1e-14);
        assert!((r.grad[1] - 0.3 * 0.5).abs() < 1e-14);
        assert_eq!(r.grad[2], 0.0);
    }

    #[test]
    fn one_step_gradient_matches_finite_differences() {
        let f = MlpField::init(&[2, 8, 1], FieldMode::Scalar, 17).unwrap();
        let y0 = [0.4, -0.6];
        let p_end = [1.0, 0.0];
        let tape = integrate_fixed(&f, &y0, (0.0, 0.25), Method::Dopri5, 0.25).unwrap();
        let r = adjoint_sweep(&tape, &f, &p_end).unwrap();
        let base = f.get_params();
        let h = 1e-5;
        let fd: Vec<f64> = (0..base.len())
            .map(|k| {
                let eval = |delta: f64| {
                    let mut q = base.clone();
                    q.0[k] += delta;
                    let g = MlpField::from_params(f.dims(), f.mode(), q).unwrap();
                    let t = integrate_fixed(&g, &y0, (0.0, 0.25), Method::Dopri5, 0.25).unwrap();
                    dot(&t.y_end, &p_end)
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect();
        let num: f64 = r.grad.as_slice().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(num / den <= 1e-7, "rel err {}", num / den);
    }

    #[test]
    fn adjoint_start_matches_flow_jacobian_transpose() {
        let f = MlpField::init(&[3, 6, 3], FieldMode::Vector, 2).unwrap();
        let tape = integrate_fixed(&f, &[0.1, 0.2, -0.3], (0.0, 0.5), Method::Dopri5, 0.05).unwrap();
        let p_end = [0.3, -1.0, 0.5];
        let r = adjoint_sweep(&tape, &f, &p_end).unwrap();
        let jac = flow_jacobian(&tape, &f).unwrap();
        for c in 0..3 {
            let jt: f64 = (0..3).map(|row| jac[row * 3 + c] * p_end[row]).sum();
            assert!((jt - r.p_start[c]).abs() < 1e-13);
        }
    }

    #[test]
    fn variational_linear_potential_is_identity() {
        let f = MlpField::from_params(&[2, 1], FieldMode::Scalar, ParamVector(vec![0.4, -1.2, 0.7])).unwrap();
        let tape = integrate_fixed(&f, &[1.0, 1.0], (0.0, 0.3), Method::Dopri5, 0.1).unwrap();
        for dl in variational_sweep(&tape, &f, &[0.25, -3.0]).unwrap() {
            assert_eq!(dl, vec![0.25, -3.0]);
        }
    }

    #[test]
    fn variational_on_linear_decay_is_amplification_power() {
        // vector-mode [1,1] network is the linear map y ↦ w y + b
        let lam = 1.3;
        let f = MlpField::from_params(&[1, 1], FieldMode::Vector, ParamVector(vec![-lam, 0.0])).unwrap();
        let h = 0.1;
        let tape = integrate_fixed(&f, &[1.0], (0.0, 1.0), Method::Rk4, h).unwrap();
        let z = -lam * h;
        let amp = 1.0 + z + z * z / 2.0 + z.powi(3) / 6.0 + z.powi(4) / 24.0;
        for (l, dl) in variational_sweep(&tape, &f, &[2.0]).unwrap().iter().enumerate() {
            assert!((dl[0] - 2.0 * amp.powi(l as i32)).abs() < 1e-14);
        }
    }

    #[test]
    fn variational_matches_finite_differences() {
        let f = MlpField::init(&[1, 8, 1], FieldMode::Scalar, 4).unwrap();
        let tab = ButcherTableau::dopri5();
        let ctrl = StepControl::fixed(0.05);
        let y0 = 0.35;
        let tape = integrate_forward(&f, &[y0], (0.0, 1.0), &tab, &ctrl).unwrap();
        let delta = variational_sweep(&tape, &f, &[1.0]).unwrap().pop().unwrap()[0];
        let eps = 1e-5;
        let yp = integrate_forward(&f, &[y0 + eps], (0.0, 1.0), &tab, &ctrl).unwrap().y_end[0];
        let ym = integrate_forward(&f, &[y0 - eps], (0.0, 1.0), &tab, &ctrl).unwrap().y_end[0];
        let fd = (yp - ym) / (2.0 * eps);
        assert!(((delta - fd) / fd).abs() <= 1e-6, "{delta} vs {fd}");
    }

    #[test]
    fn bilinear_invariant_is_conserved_adaptive() {
        let f = MlpField::init(&[2, 10, 10, 1], FieldMode::Scalar, 9).unwrap();
        let tape = integrate_forward(&f, &[0.8, -0.4], (0.0, 2.0), &ButcherTableau::dopri5(), &StepControl::adaptive(1e-7, 1e-9)).unwrap();
        assert!(tape.steps.len() > 3);
        let deltas = variational_sweep(&tape, &f, &[0.6, 1.1]).unwrap();
        let ps = adjoint_sweep(&tape, &f, &[-0.3, 0.9]).unwrap().p_steps;
        let s0 = dot(&deltas[0], &ps[0]);
        for (dl, pl) in deltas.iter().zip(&ps) {
            assert!((dot(dl, pl) - s0).abs() <= 1e-12 * s0.abs().max(1.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let f = MlpField::init(&[2, 4, 1], FieldMode::Scalar, 0).unwrap();
        let g = MlpField::init(&[3, 4, 1], FieldMode::Scalar, 0).unwrap();
        let tape = integrate_fixed(&f, &[0.0, 0.0], (0.0, 0.1), Method::Rk4, 0.1).unwrap();
        assert!(adjoint_sweep(&tape, &g, &[0.0, 0.0, 0.0]).is_err());
        assert!(adjoint_sweep(&tape, &f, &[0.0]).is_err());
        assert!(variational_sweep(&tape, &g, &[0.0; 3]).is_err());
    }
}
