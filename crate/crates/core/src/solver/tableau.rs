use serde::{Deserialize, Serialize};

use crate::error::{config, OcnError, Result};

/// Explicit Runge–Kutta coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    pub name: &'static str,
    /// Stage count `s`.
    pub stages: usize,
    /// Row-major `s × s`, strictly lower triangular.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    /// Embedded lower-order weights for local error estimation.
    pub b_hat: Option<Vec<f64>>,
    /// Order of the propagating solution (used by the step controller).
    pub order: u32,
    /// Last stage is evaluated at the new step point (first-same-as-last).
    pub fsal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

impl std::str::FromStr for Method {
    type Err = OcnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            "dopri5" => Ok(Method::Dopri5),
            other => config(format!("unknown RK method '{other}'")),
        }
    }
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
            Method::Dopri5 => "dopri5",
        }
    }

    pub fn tableau(self) -> ButcherTableau {
        match self {
            Method::Euler => ButcherTableau::euler(),
            Method::Rk4 => ButcherTableau::rk4(),
            Method::Dopri5 => ButcherTableau::dopri5(),
        }
    }
}

impl ButcherTableau {
    #[inline]
    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.stages + j]
    }

    /// Adjoint-side weight: `b_i` when nonzero, the step size otherwise.
    #[inline]
    pub fn b_tilde(&self, i: usize, tau: f64) -> f64 {
        if self.b[i] != 0.0 {
            self.b[i]
        } else {
            tau
        }
    }

    pub fn euler() -> Self {
        ButcherTableau {
            name: "euler",
            stages: 1,
            a: vec![0.0],
            b: vec![1.0],
            c: vec![0.0],
            b_hat: None,
            order: 1,
            fsal: false,
        }
    }

    pub fn rk4() -> Self {
        #[rustfmt::skip]
        let a = vec![
            0.0, 0.0, 0.0, 0.0,
            0.5, 0.0, 0.0, 0.0,
            0.0, 0.5, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
        ];
        ButcherTableau {
            name: "rk4",
            stages: 4,
            a,
            b: vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            c: vec![0.0, 0.5, 0.5, 1.0],
            b_hat: None,
            order: 4,
            fsal: false,
        }
    }

    /// Dormand–Prince 5(4).
    pub fn dopri5() -> Self {
        let b = [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
            0.0,
        ];
        #[rustfmt::skip]
        let a = vec![
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0, 0.0,
            19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0, 0.0,
            9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0, 0.0,
            b[0], b[1], b[2], b[3], b[4], b[5], 0.0,
        ];
        ButcherTableau {
            name: "dopri5",
            stages: 7,
            a,
            b: b.to_vec(),
            c: vec![0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0],
            b_hat: Some(vec![
                5179.0 / 57600.0,
                0.0,
                7571.0 / 16695.0,
                393.0 / 640.0,
                -92097.0 / 339200.0,
                187.0 / 2100.0,
                1.0 / 40.0,
            ]),
            order: 5,
            fsal: true,
        }
    }

    /// Checks explicitness and consistency.
    pub fn validate(&self) -> Result<()> {
        let s = self.stages;
        if s == 0 || self.a.len() != s * s || self.b.len() != s || self.c.len() != s {
            return config(format!("tableau '{}' has inconsistent shapes", self.name));
        }
        for i in 0..s {
            for j in i..s {
                if self.a(i, j) != 0.0 {
                    return config(format!("tableau '{}' is not explicit (a[{i}][{j}] ≠ 0)", self.name));
                }
            }
        }
        let sum: f64 = self.b.iter().sum();
        if (sum - 1.0).abs() > 1e-14 {
            return config(format!("tableau '{}' weights sum to {sum}", self.name));
        }
        if let Some(bh) = &self.b_hat {
            if bh.len() != s {
                return config(format!("tableau '{}' embedded weights have wrong length", self.name));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for m in [Method::Euler, Method::Rk4, Method::Dopri5] {
            m.tableau().validate().unwrap();
        }
    }

    #[test]
    fn dopri5_shape() {
        let t = ButcherTableau::dopri5();
        assert_eq!(t.stages, 7);
        assert_eq!(t.b[1], 0.0);
        assert_eq!(t.b[6], 0.0);
        for i in 0..7 {
            let row: f64 = (0..7).map(|j| t.a(i, j)).sum();
            assert!((row - t.c[i]).abs() < 1e-14, "row sum {i}");
        }
        let bh: f64 = t.b_hat.as_ref().unwrap().iter().sum();
        assert!((bh - 1.0).abs() < 1e-14);
        assert_eq!(t.b_tilde(1, 0.25), 0.25);
        assert_eq!(t.b_tilde(0, 0.25), 35.0 / 384.0);
    }

    #[test]
    fn implicit_tableau_rejected() {
        let mut t = ButcherTableau::rk4();
        t.a[0] = 0.1;
        assert!(t.validate().is_err());
        let mut t = ButcherTableau::rk4();
        t.b[0] = 0.5;
        assert!(t.validate().is_err());
    }
}
