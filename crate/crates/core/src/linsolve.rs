//! Jacobi-preconditioned conjugate gradients for the SPD Monodomain system.

use crate::sparse::CsrMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgFailure {
    pub iterations: usize,
    pub residual: f64,
}

/// A matrix together with its inverse diagonal and reusable work vectors.
pub struct PreconditionedCg {
    matrix: CsrMatrix,
    inv_diag: Vec<f64>,
    tol: f64,
    max_iter: usize,
    r: Vec<f64>,
    z: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
}

impl PreconditionedCg {
    pub fn new(matrix: CsrMatrix, tol: f64, max_iter: usize) -> Self {
        let n = matrix.n();
        let inv_diag = matrix.diagonal().iter().map(|d| 1.0 / d).collect();
        Self {
            matrix,
            inv_diag,
            tol,
            max_iter,
            r: vec![0.0; n],
            z: vec![0.0; n],
            p: vec![0.0; n],
            q: vec![0.0; n],
        }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    /// Solves `A x = b` starting from the contents of `x`. Stops when
    /// `‖b − A x‖ ≤ tol · ‖b‖`; returns the iteration count.
    pub fn solve(&mut self, b: &[f64], x: &mut [f64]) -> Result<usize, CgFailure> {
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if bnorm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return Ok(0);
        }
        let target = self.tol * bnorm;

        self.matrix.mul_vec(x, &mut self.q);
        for i in 0..b.len() {
            self.r[i] = b[i] - self.q[i];
        }
        let mut rnorm = norm(&self.r);
        if rnorm <= target {
            return Ok(0);
        }
        for i in 0..b.len() {
            self.z[i] = self.inv_diag[i] * self.r[i];
            self.p[i] = self.z[i];
        }
        let mut rz = dot(&self.r, &self.z);

        for it in 1..=self.max_iter {
            self.matrix.mul_vec(&self.p, &mut self.q);
            let alpha = rz / dot(&self.p, &self.q);
            for i in 0..b.len() {
                x[i] += alpha * self.p[i];
                self.r[i] -= alpha * self.q[i];
            }
            rnorm = norm(&self.r);
            if rnorm <= target {
                return Ok(it);
            }
            for i in 0..b.len() {
                self.z[i] = self.inv_diag[i] * self.r[i];
            }
            let rz_new = dot(&self.r, &self.z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..b.len() {
                self.p[i] = self.z[i] + beta * self.p[i];
            }
        }
        Err(CgFailure {
            iterations: self.max_iter,
            residual: rnorm / bnorm,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Default iteration cap `10·√n` (never below 50).
pub fn default_max_iter(n: usize) -> usize {
    ((10.0 * (n as f64).sqrt()).ceil() as usize).max(50)
}
