//! Rogers–McCulloch ionic current and gating dynamics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Membrane and ionic-model constants (mV, ms, μF/cm²).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IonicParams {
    pub cm: f64,
    pub v_rest: f64,
    pub v_th: f64,
    pub v_peak: f64,
    pub c1: f64,
    pub c2: f64,
    pub b: f64,
    pub d: f64,
}

impl Default for IonicParams {
    fn default() -> Self {
        Self {
            cm: 1.0,
            v_rest: -85.0,
            v_th: -72.0,
            v_peak: 15.0,
            c1: 11.54,
            c2: 4.4,
            b: 0.012,
            d: 1.0,
        }
    }
}

/// The four first derivatives of `(I_ion, g)` at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IonicPartials {
    pub di_du: f64,
    pub di_dw: f64,
    pub dg_du: f64,
    pub dg_dw: f64,
}

impl IonicParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.cm, self.v_rest, self.v_th, self.v_peak, self.c1, self.c2, self.b, self.d]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return invalid("ionic parameters must be finite");
        }
        if !(self.v_rest < self.v_th && self.v_th < self.v_peak) {
            return invalid("ionic parameters need V_r < V_th < V_p");
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0 && self.b > 0.0) {
            return invalid("ionic rates c1, c2, b must be positive");
        }
        if !(self.cm > 0.0) || self.d < 0.0 {
            return invalid("C_m must be positive and d non-negative");
        }
        Ok(())
    }

    pub fn beta1(&self) -> f64 {
        let span = self.v_peak - self.v_rest;
        self.c1 / (span * span)
    }

    pub fn beta2(&self) -> f64 {
        self.b / (self.v_peak - self.v_rest)
    }

    #[inline]
    pub fn i_ion(&self, u: f64, w: f64) -> f64 {
        let ur = u - self.v_rest;
        self.cm * (self.beta1() * ur * (u - self.v_th) * (u - self.v_peak) + self.c2 * ur * w)
    }

    #[inline]
    pub fn g(&self, u: f64, w: f64) -> f64 {
        -self.beta2() * (u - self.v_rest) + self.b * self.d * w
    }

    /// Backward Euler step of `dw/dt = −g(ũ, w)`; exact because `g` is affine in `w`.
    #[inline]
    pub fn gating_step(&self, w_prev: f64, u_tilde: f64, dt: f64) -> f64 {
        (w_prev + dt * self.beta2() * (u_tilde - self.v_rest)) / (1.0 + dt * self.b * self.d)
    }

    #[inline]
    pub fn partials(&self, u: f64, w: f64) -> IonicPartials {
        let a = u - self.v_rest;
        let b = u - self.v_th;
        let c = u - self.v_peak;
        IonicPartials {
            di_du: self.cm * (self.beta1() * (b * c + a * c + a * b) + self.c2 * w),
            di_dw: self.cm * self.c2 * a,
            dg_du: -self.beta2(),
            dg_dw: self.b * self.d,
        }
    }

    /// Factor `1 / (1 + Δt·∂_w g)` shared by the gating update and its adjoint.
    pub fn gating_damping(&self, dt: f64) -> f64 {
        1.0 / (1.0 + dt * self.b * self.d)
    }
}

/// Component-wise `I_ion(u, w)` into `out`.
pub fn i_ion_into(p: &IonicParams, u: &[f64], w: &[f64], out: &mut [f64]) {
    let b1 = p.beta1();
    for ((o, &u), &w) in out.iter_mut().zip(u).zip(w) {
        let ur = u - p.v_rest;
        *o = p.cm * (b1 * ur * (u - p.v_th) * (u - p.v_peak) + p.c2 * ur * w);
    }
}

/// In-place component-wise gating update `w ← gating_step(w, ũ, Δt)`.
pub fn gating_update(p: &IonicParams, w: &mut [f64], u_tilde: &[f64], dt: f64) {
    let k = dt * p.beta2();
    let damp = p.gating_damping(dt);
    for (w, &u) in w.iter_mut().zip(u_tilde) {
        *w = (*w + k * (u - p.v_rest)) * damp;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn rest_and_peak_are_roots() {
        let p = IonicParams::default();
        assert_eq!(p.i_ion(-85.0, 0.0), 0.0);
        assert_eq!(p.i_ion(15.0, 0.0), 0.0);
        assert_eq!(p.g(-85.0, 0.0), 0.0);
    }

    #[test]
    fn cubic_hand_value() {
        // β1 = 11.54/100² ; 35·22·(−65) = −50050
        let p = IonicParams::default();
        let expected = 11.54e-4 * 35.0 * 22.0 * -65.0;
        assert!((p.i_ion(-50.0, 0.0) - expected).abs() < 1e-12);
        assert!((p.i_ion(-50.0, 0.0) + 57.7577).abs() < 1e-4);
    }

    #[test]
    fn gating_function_values() {
        let p = IonicParams::default();
        assert!((p.g(-85.0, 1.0) - 0.012).abs() < 1e-15);
        assert!((p.beta2() - 1.2e-4).abs() < 1e-18);
        let d = p.partials(3.0, 0.7);
        assert_eq!(d.dg_dw, 0.012);
        assert_eq!(d.dg_du, -1.2e-4);
        assert_eq!(p.partials(-85.0, 0.3).di_dw, 0.0);
    }

    #[test]
    fn gating_step_closed_form() {
        let p = IonicParams::default();
        assert_eq!(p.gating_step(0.0, -85.0, 0.05), 0.0);
        let w = p.gating_step(1.0, -85.0, 0.05);
        assert!((w - 1.0 / 1.0006).abs() < 1e-15);
        assert!((w - 0.99940).abs() < 1e-5);
    }

    #[test]
    fn gating_step_solves_the_implicit_equation() {
        let p = IonicParams::default();
        let dt = 0.05;
        for &(w0, u) in &[(0.3, -20.0), (1.5, 10.0), (0.0, -80.0)] {
            // one Newton step from w0 on F(w) = (w − w0)/dt + g(u, w); exact since F is affine
            let f = |w: f64| (w - w0) / dt + p.g(u, w);
            let newton = w0 - f(w0) / (1.0 / dt + p.b * p.d);
            let closed = p.gating_step(w0, u, dt);
            assert!((newton - closed).abs() < 1e-14);
            assert!(f(closed).abs() < 1e-12);
        }
    }

    #[test]
    fn partials_match_finite_differences() {
        let p = IonicParams::default();
        let h = 1e-4;
        for i in 0..=14 {
            let u = -100.0 + 10.0 * i as f64;
            for j in 0..=4 {
                let w = 0.5 * j as f64;
                let d = p.partials(u, w);
                let pairs = [
                    (d.di_du, central(|x| p.i_ion(x, w), u, h)),
                    (d.di_dw, central(|x| p.i_ion(u, x), w, h)),
                    (d.dg_du, central(|x| p.g(x, w), u, h)),
                    (d.dg_dw, central(|x| p.g(u, x), w, h)),
                ];
                for (exact, fd) in pairs {
                    let scale = exact.abs().max(1e-3);
                    assert!((exact - fd).abs() <= 1e-6 * scale, "u={u} w={w}: {exact} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn gating_update_is_contractive() {
        let p = IonicParams::default();
        let dt = 0.05;
        let u = [-40.0, 0.0];
        let mut a: Vec<f64> = vec![0.2, 0.9];
        let mut b = vec![0.5, 0.1];
        let before: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect();
        gating_update(&p, &mut a, &u, dt);
        gating_update(&p, &mut b, &u, dt);
        for (k, d0) in before.iter().enumerate() {
            assert!((a[k] - b[k]).abs() <= d0 / (1.0 + dt * p.b * p.d) + 1e-15);
        }
    }

    #[test]
    fn vector_helpers_match_scalars() {
        let p = IonicParams::default();
        let u = [-85.0, -60.0, 0.0];
        let w = [0.0, 0.4, 1.2];
        let mut out = [0.0; 3];
        i_ion_into(&p, &u, &w, &mut out);
        for k in 0..3 {
            assert!((out[k] - p.i_ion(u[k], w[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_ordering_rejected() {
        let p = IonicParams {
            v_th: -90.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        IonicParams::default().validate().unwrap();
    }
}
