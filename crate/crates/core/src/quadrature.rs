//! Exact-quadrature assembly of the ionic load vector `∫ I_ion(u_h, w_h) φ_j`.
//!
//! This is the reference path against which the component-wise evaluation
//! `M_L · I_ion(u, w)` is compared; the solvers use the component-wise form.

use crate::error::Result;
use crate::ionic::IonicParams;
use crate::mesh::{element_geometry, Mesh};

/// Gauss–Legendre nodes and weights on `[0, 1]` (weights sum to 1).
pub fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Newton iteration on P_n starting from the Chebyshev guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pnm1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    out
}

/// Collapsed-coordinate (conical product) rule on the reference tetrahedron.
/// Returns barycentric points and weights normalized to sum to one.
/// With `(3, 4, 4)` points it integrates all polynomials of degree ≤ 5 exactly.
pub fn tet_rule(na: usize, nb: usize, nc: usize) -> Vec<([f64; 4], f64)> {
    let ga = gauss_legendre_unit(na);
    let gb = gauss_legendre_unit(nb);
    let gc = gauss_legendre_unit(nc);
    let mut pts = Vec::with_capacity(na * nb * nc);
    for &(c, wc) in &gc {
        for &(b, wb) in &gb {
            for &(a, wa) in &ga {
                let x = a * (1.0 - b) * (1.0 - c);
                let y = b * (1.0 - c);
                let z = c;
                let weight = 6.0 * wa * wb * wc * (1.0 - b) * (1.0 - c) * (1.0 - c);
                pts.push(([1.0 - x - y - z, x, y, z], weight));
            }
        }
    }
    pts
}

/// Precomputed element data for assembling the ionic load vector.
pub struct IonicQuadrature {
    tets: Vec<[usize; 4]>,
    volumes: Vec<f64>,
    rule: Vec<([f64; 4], f64)>,
    n: usize,
}

impl IonicQuadrature {
    pub fn new(mesh: &Mesh) -> Result<Self> {
        let volumes = (0..mesh.n_tets())
            .map(|e| element_geometry(mesh, e).map(|g| g.volume))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tets: mesh.tets.clone(),
            volumes,
            rule: tet_rule(3, 4, 4),
            n: mesh.n_nodes(),
        })
    }

    pub fn n_points(&self) -> usize {
        self.rule.len()
    }

    /// `out_j = ∫ I_ion(u_h, w_h) φ_j` with `u_h, w_h` the P1 interpolants of nodal values.
    pub fn assemble_into(&self, p: &IonicParams, u: &[f64], w: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (tet, &vol) in self.tets.iter().zip(&self.volumes) {
            let ue = [u[tet[0]], u[tet[1]], u[tet[2]], u[tet[3]]];
            let we = [w[tet[0]], w[tet[1]], w[tet[2]], w[tet[3]]];
            let mut acc = [0.0; 4];
            for (lam, wq) in &self.rule {
                let uq = lam[0] * ue[0] + lam[1] * ue[1] + lam[2] * ue[2] + lam[3] * ue[3];
                let wqv = lam[0] * we[0] + lam[1] * we[1] + lam[2] * we[2] + lam[3] * we[3];
                let f = wq * p.i_ion(uq, wqv);
                for k in 0..4 {
                    acc[k] += f * lam[k];
                }
            }
            for k in 0..4 {
                out[tet[k]] += vol * acc[k];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial(n: u32) -> f64 {
        (1..=n).map(|k| k as f64).product()
    }

    /// ∫_T λ0^a λ1^b λ2^c λ3^d / |T| = 3! a! b! c! d! / (a+b+c+d+3)!
    fn barycentric_moment(e: [u32; 4]) -> f64 {
        6.0 * e.iter().map(|&k| factorial(k)).product::<f64>() / factorial(e.iter().sum::<u32>() + 3)
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in 1..6 {
            let g = gauss_legendre_unit(n);
            for deg in 0..(2 * n) {
                let q: f64 = g.iter().map(|&(x, w)| w * x.powi(deg as i32)).sum();
                assert!((q - 1.0 / (deg as f64 + 1.0)).abs() < 1e-14, "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn tet_rule_is_exact_to_degree_five() {
        let rule = tet_rule(3, 4, 4);
        for a in 0..=5u32 {
            for b in 0..=(5 - a) {
                for c in 0..=(5 - a - b) {
                    for d in 0..=(5 - a - b - c) {
                        let e = [a, b, c, d];
                        let q: f64 = rule
                            .iter()
                            .map(|(l, w)| w * (0..4).map(|k| l[k].powi(e[k] as i32)).product::<f64>())
                            .sum();
                        let exact = barycentric_moment(e);
                        assert!((q - exact).abs() < 1e-14, "{e:?}: {q} vs {exact}");
                    }
                }
            }
        }
    }

    #[test]
    fn linear_ionic_field_recovers_consistent_mass_product() {
        // with c1 → 0 the current is c2(u − V_r)w; for w ≡ 1 it is linear in u,
        // so the load vector equals M (u − V_r)
        let mesh = crate::mesh::build_slab_mesh([1.0, 1.0, 0.5], [2, 2, 1], [1.0, 0.0, 0.0]).unwrap();
        let ops = crate::mesh::assemble(&mesh).unwrap();
        let p = IonicParams {
            c1: 1e-300,
            ..Default::default()
        };
        let u: Vec<f64> = (0..mesh.n_nodes()).map(|i| -80.0 + 3.0 * i as f64).collect();
        let w = vec![1.0; mesh.n_nodes()];
        let q = IonicQuadrature::new(&mesh).unwrap();
        let mut out = vec![0.0; mesh.n_nodes()];
        q.assemble_into(&p, &u, &w, &mut out);
        let shifted: Vec<f64> = u.iter().map(|v| p.c2 * (v - p.v_rest)).collect();
        let expected = ops.mass.apply(&shifted);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
    }
}
