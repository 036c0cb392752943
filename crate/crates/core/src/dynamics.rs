//! Spatial-domain triple integrator.
//!
//! With path position `p` as the independent variable the state `(t, v, a)`
//! evolves as `dt/dp = 1/v`, `dv/dp = a/v`, `da/dp = j/v` under a jerk `j`
//! held constant over each grid interval.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speeds below this are treated as a singularity of the spatial model.
pub const V_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialState {
    pub t: f64,
    pub v: f64,
    pub a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub jerk: f64,
}

/// `d(t, v, a)/dp`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative {
    pub dt: f64,
    pub dv: f64,
    pub da: f64,
}

/// How the curvature enters the friction-ellipse constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LateralModel {
    /// Lateral acceleration `kappa * v^2`.
    #[default]
    Centripetal,
    /// Literal `kappa * v` form.
    Linear,
}

/// Arithmetic needed by the integrator, shared by plain floats and jets.
pub(crate) trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Mul<f64, Output = Self>
{
    fn recip(self) -> Self;
    fn value(self) -> f64;
}

impl Scalar for f64 {
    fn recip(self) -> Self {
        1.0 / self
    }
    fn value(self) -> f64 {
        self
    }
}

/// Second-order forward-mode number over the three seeds `(v, a, j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Jet {
    pub val: f64,
    pub grad: [f64; 3],
    pub hess: [[f64; 3]; 3],
}

impl Jet {
    pub fn constant(val: f64) -> Self {
        Jet {
            val,
            grad: [0.0; 3],
            hess: [[0.0; 3]; 3],
        }
    }

    pub fn seed(val: f64, which: usize) -> Self {
        let mut j = Jet::constant(val);
        j.grad[which] = 1.0;
        j
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(mut self, o: Jet) -> Jet {
        self.val += o.val;
        for r in 0..3 {
            self.grad[r] += o.grad[r];
            for c in 0..3 {
                self.hess[r][c] += o.hess[r][c];
            }
        }
        self
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self + o * -1.0
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(mut self, s: f64) -> Jet {
        self.val *= s;
        for r in 0..3 {
            self.grad[r] *= s;
            for c in 0..3 {
                self.hess[r][c] *= s;
            }
        }
        self
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let mut out = Jet::constant(self.val * o.val);
        for r in 0..3 {
            out.grad[r] = self.grad[r] * o.val + self.val * o.grad[r];
            for c in 0..3 {
                out.hess[r][c] = self.hess[r][c] * o.val
                    + self.grad[r] * o.grad[c]
                    + o.grad[r] * self.grad[c]
                    + self.val * o.hess[r][c];
            }
        }
        out
    }
}

impl Scalar for Jet {
    fn recip(self) -> Jet {
        let inv = 1.0 / self.val;
        let inv2 = inv * inv;
        let mut out = Jet::constant(inv);
        for r in 0..3 {
            out.grad[r] = -self.grad[r] * inv2;
            for c in 0..3 {
                out.hess[r][c] =
                    -self.hess[r][c] * inv2 + 2.0 * self.grad[r] * self.grad[c] * inv2 * inv;
            }
        }
        out
    }
    fn value(self) -> f64 {
        self.val
    }
}

fn guard(v: f64) -> Result<()> {
    if v >= V_FLOOR {
        Ok(())
    } else {
        Err(Error::Singularity {
            speed: v,
            floor: V_FLOOR,
        })
    }
}

/// Right-hand side over `(tau, v, a)`; time does not feed back.
fn rhs<S: Scalar>(v: S, a: S, j: S) -> Result<[S; 3]> {
    guard(v.value())?;
    let inv = v.recip();
    Ok([inv, a * inv, j * inv])
}

/// Classical RK4 over `[0, h]` in `substeps` equal steps, returning the
/// elapsed time and the final speed and acceleration.
fn rk4<S: Scalar>(v0: S, a0: S, j: S, h: f64, substeps: usize) -> Result<[S; 3]> {
    let dh = h / substeps as f64;
    let zero = v0 * 0.0;
    let mut y = [zero, v0, a0];
    for _ in 0..substeps {
        let stage = |y: [S; 3], k: [S; 3], c: f64| [y[0] + k[0] * c, y[1] + k[1] * c, y[2] + k[2] * c];
        let k1 = rhs(y[1], y[2], j)?;
        let y2 = stage(y, k1, 0.5 * dh);
        let k2 = rhs(y2[1], y2[2], j)?;
        let y3 = stage(y, k2, 0.5 * dh);
        let k3 = rhs(y3[1], y3[2], j)?;
        let y4 = stage(y, k3, dh);
        let k4 = rhs(y4[1], y4[2], j)?;
        for i in 0..3 {
            y[i] = y[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dh / 6.0);
        }
    }
    Ok(y)
}

pub fn ode_rhs(state: &SpatialState, control: &Control) -> Result<StateDerivative> {
    let [dt, dv, da] = rhs(state.v, state.a, control.jerk)?;
    Ok(StateDerivative { dt, dv, da })
}

/// One RK4 step from `p_from` to `p_to` with constant jerk.
pub fn erk4_step(
    state: &SpatialState,
    control: &Control,
    p_from: f64,
    p_to: f64,
) -> Result<SpatialState> {
    erk4_integrate(state, control, p_from, p_to, 1)
}

/// RK4 over `[p_from, p_to]` split into `substeps` equal steps.
pub fn erk4_integrate(
    state: &SpatialState,
    control: &Control,
    p_from: f64,
    p_to: f64,
    substeps: usize,
) -> Result<SpatialState> {
    let h = p_to - p_from;
    if !(h > 0.0) || substeps == 0 {
        return Err(Error::Input(format!(
            "integration needs p_to > p_from and at least one step (got {p_from} -> {p_to}, {substeps})"
        )));
    }
    let [tau, v, a] = rk4(state.v, state.a, control.jerk, h, substeps)?;
    Ok(SpatialState {
        t: state.t + tau,
        v,
        a,
    })
}

/// Interval transition with exact first and second derivatives.
///
/// `jac[r]` is the gradient of output `r` (t, v, a) with respect to
/// `(t, v, a, j)` at the interval start; `hess[r]` is the Hessian of output
/// `r` over `(v, a, j)` (the start time enters linearly).
#[derive(Debug, Clone, Copy)]
pub struct StepSensitivity {
    pub next: SpatialState,
    pub jac: [[f64; 4]; 3],
    pub hess: [[[f64; 3]; 3]; 3],
}

pub fn step_sensitivity(
    state: &SpatialState,
    control: &Control,
    h: f64,
    substeps: usize,
) -> Result<StepSensitivity> {
    if !(h > 0.0) || substeps == 0 {
        return Err(Error::Input("step length must be positive".into()));
    }
    let out = rk4(
        Jet::seed(state.v, 0),
        Jet::seed(state.a, 1),
        Jet::seed(control.jerk, 2),
        h,
        substeps,
    )?;
    let mut jac = [[0.0; 4]; 3];
    let mut hess = [[[0.0; 3]; 3]; 3];
    for r in 0..3 {
        jac[r][1..4].copy_from_slice(&out[r].grad);
        hess[r] = out[r].hess;
    }
    jac[0][0] = 1.0;
    Ok(StepSensitivity {
        next: SpatialState {
            t: state.t + out[0].val,
            v: out[1].val,
            a: out[2].val,
        },
        jac,
        hess,
    })
}

/// Friction-ellipse residual; feasible when `<= 0`.
pub fn lateral_ellipse(
    state: &SpatialState,
    kappa: f64,
    a_lon_max: f64,
    a_lat_max: f64,
    model: LateralModel,
) -> f64 {
    EllipseTerms::new(state.v, state.a, kappa, a_lon_max, a_lat_max, model).value
}

/// Ellipse residual with gradient and Hessian over `(v, a)`.
#[derive(Debug, Clone, Copy)]
pub struct EllipseTerms {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: [[f64; 2]; 2],
}

impl EllipseTerms {
    pub fn new(
        v: f64,
        a: f64,
        kappa: f64,
        a_lon_max: f64,
        a_lat_max: f64,
        model: LateralModel,
    ) -> Self {
        let lon = a / a_lon_max;
        let k = kappa / a_lat_max;
        let (lat, dlat, ddlat) = match model {
            LateralModel::Centripetal => (k * v * v, 2.0 * k * v, 2.0 * k),
            LateralModel::Linear => (k * v, k, 0.0),
        };
        let dlon = 1.0 / a_lon_max;
        EllipseTerms {
            value: lon * lon + lat * lat - 1.0,
            grad: [2.0 * lat * dlat, 2.0 * lon * dlon],
            hess: [
                [2.0 * (dlat * dlat + lat * ddlat), 0.0],
                [0.0, 2.0 * dlon * dlon],
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(t: f64, v: f64, a: f64) -> SpatialState {
        SpatialState { t, v, a }
    }

    #[test]
    fn rhs_direct_evaluation() {
        let d = ode_rhs(&st(3.0, 10.0, 2.0), &Control { jerk: 0.5 }).unwrap();
        assert_eq!((d.dt, d.dv, d.da), (0.1, 0.2, 0.05));
        let d = ode_rhs(&st(0.0, 1.0, 0.0), &Control { jerk: 0.0 }).unwrap();
        assert_eq!((d.dt, d.dv, d.da), (1.0, 0.0, 0.0));
    }

    #[test]
    fn rhs_guards_singularity() {
        let err = ode_rhs(&st(0.0, 1e-9, 0.0), &Control { jerk: 0.0 }).unwrap_err();
        assert!(matches!(err, Error::Singularity { .. }));
    }

    #[test]
    fn constant_speed_step_is_exact() {
        let s = erk4_step(&st(1.0, 10.0, 0.0), &Control { jerk: 0.0 }, 0.0, 5.0).unwrap();
        assert_eq!(s, st(1.5, 10.0, 0.0));
    }

    #[test]
    fn constant_acceleration_matches_closed_form() {
        // dv/dp = a/v with constant a gives v(p) = sqrt(v0^2 + 2 a p).
        let s = erk4_step(&st(0.0, 10.0, 2.0), &Control { jerk: 0.0 }, 0.0, 1.0).unwrap();
        assert!((s.v - 104f64.sqrt()).abs() < 1e-7);
        assert_eq!(s.a, 2.0);
    }

    #[test]
    fn step_sensitivity_matches_finite_differences() {
        let base = st(2.0, 8.0, 1.5);
        let u = Control { jerk: -0.4 };
        let h = 3.0;
        let sens = step_sensitivity(&base, &u, h, 1).unwrap();
        let eval = |z: [f64; 4]| {
            let s = erk4_integrate(&st(z[0], z[1], z[2]), &Control { jerk: z[3] }, 0.0, h, 1).unwrap();
            [s.t, s.v, s.a]
        };
        let z0 = [base.t, base.v, base.a, u.jerk];
        for c in 0..4 {
            let eps = 1e-6;
            let mut zp = z0;
            let mut zm = z0;
            zp[c] += eps;
            zm[c] -= eps;
            let (fp, fm) = (eval(zp), eval(zm));
            for r in 0..3 {
                let fd = (fp[r] - fm[r]) / (2.0 * eps);
                assert!((fd - sens.jac[r][c]).abs() < 1e-7, "r{r} c{c}: {fd} vs {}", sens.jac[r][c]);
            }
        }
        // Hessians by differencing the analytic Jacobian.
        for c in 0..3 {
            let eps = 1e-5;
            let mut zp = [base.v, base.a, u.jerk];
            let mut zm = zp;
            zp[c] += eps;
            zm[c] -= eps;
            let jp = step_sensitivity(&st(0.0, zp[0], zp[1]), &Control { jerk: zp[2] }, h, 1).unwrap();
            let jm = step_sensitivity(&st(0.0, zm[0], zm[1]), &Control { jerk: zm[2] }, h, 1).unwrap();
            for r in 0..3 {
                for q in 0..3 {
                    let fd = (jp.jac[r][q + 1] - jm.jac[r][q + 1]) / (2.0 * eps);
                    assert!((fd - sens.hess[r][q][c]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn stage_singularity_reported() {
        // Hard braking drives a stage speed below the floor.
        let err = erk4_step(&st(0.0, 1.0, -50.0), &Control { jerk: 0.0 }, 0.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Singularity { .. }));
    }

    #[test]
    fn ellipse_boundaries() {
        let c = LateralModel::Centripetal;
        assert_eq!(lateral_ellipse(&st(0.0, 10.0, 4.0), 0.0, 4.0, 2.0, c), 0.0);
        assert!(lateral_ellipse(&st(0.0, 10.0, 0.0), 0.02, 4.0, 2.0, c).abs() < 1e-15);
        assert_eq!(lateral_ellipse(&st(0.0, 10.0, 0.0), 0.0, 4.0, 2.0, c), -1.0);
        // kappa * v = 0.2 * 10 = 2 in the literal form.
        let l = LateralModel::Linear;
        assert!(lateral_ellipse(&st(0.0, 10.0, 0.0), 0.2, 4.0, 2.0, l).abs() < 1e-15);
    }

    #[test]
    fn ellipse_derivatives() {
        for model in [LateralModel::Centripetal, LateralModel::Linear] {
            let (v, a, k) = (7.0, -1.2, 0.03);
            let e = EllipseTerms::new(v, a, k, 4.0, 2.0, model);
            let f = |v: f64, a: f64| EllipseTerms::new(v, a, k, 4.0, 2.0, model);
            let eps = 1e-6;
            let gv = (f(v + eps, a).value - f(v - eps, a).value) / (2.0 * eps);
            let ga = (f(v, a + eps).value - f(v, a - eps).value) / (2.0 * eps);
            assert!((gv - e.grad[0]).abs() < 1e-7);
            assert!((ga - e.grad[1]).abs() < 1e-7);
            let hvv = (f(v + eps, a).grad[0] - f(v - eps, a).grad[0]) / (2.0 * eps);
            assert!((hvv - e.hess[0][0]).abs() < 1e-6);
        }
    }
}
