//! Discrete empirical interpolation: greedy row selection and the interpolant
//! `f̂ = f̄ + Z (PᵀZ)⁻¹ Pᵀ(f − f̄)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::pod::PodBasis;

/// Pivots below this magnitude mean the modes are not independent.
pub const MIN_PIVOT: f64 = 1e-14;

/// Greedy index selection with the rank-one update of `(PᵀZ)⁻¹`.
/// Returns the indices and the inverse. Ties go to the lowest row.
pub fn select_indices(modes: &DMatrix<f64>) -> Result<(Vec<usize>, DMatrix<f64>)> {
    let (n, m) = modes.shape();
    if m == 0 || m > n {
        return invalid(format!("DEIM needs 1 ≤ M ≤ n, got M={m}, n={n}"));
    }
    let argmax = |v: &DVector<f64>| -> (usize, f64) {
        let mut best = (0, v[0]);
        for (i, &x) in v.iter().enumerate().skip(1) {
            if x.abs() > best.1.abs() {
                best = (i, x);
            }
        }
        best
    };

    let z1: DVector<f64> = modes.column(0).into_owned();
    let (p1, rho) = argmax(&z1);
    if rho.abs() < MIN_PIVOT {
        return Err(Error::DegenerateBasis { mode: 0, rho });
    }
    let mut indices = vec![p1];
    let mut inv = DMatrix::from_element(1, 1, 1.0 / rho);

    for l in 1..m {
        let z: DVector<f64> = modes.column(l).into_owned();
        let pz = DVector::from_iterator(l, indices.iter().map(|&p| z[p]));
        let c = &inv * pz;
        let r = &z - modes.columns(0, l) * &c;
        let (p, rho) = argmax(&r);
        if rho.abs() < MIN_PIVOT {
            return Err(Error::DegenerateBasis { mode: l, rho });
        }
        // [[I, −c], [0, 1]] · [[M, 0], [−ρ⁻¹aᵀM, ρ⁻¹]] with aᵀ the new row of Z
        let a = DVector::from_iterator(l, (0..l).map(|k| modes[(p, k)]));
        let a_m = inv.tr_mul(&a).transpose() / rho; // ρ⁻¹ aᵀM as a row
        let mut next = DMatrix::zeros(l + 1, l + 1);
        let top = &inv + &c * &a_m;
        next.view_mut((0, 0), (l, l)).copy_from(&top);
        next.view_mut((0, l), (l, 1)).copy_from(&(-&c / rho));
        next.view_mut((l, 0), (1, l)).copy_from(&(-&a_m));
        next[(l, l)] = 1.0 / rho;
        inv = next;
        indices.push(p);
    }
    Ok((indices, inv))
}

/// Interpolation data for one ionic-current basis.
#[derive(Clone, Debug, PartialEq)]
pub struct DeimOperator {
    pub indices: Vec<usize>,
    /// `(PᵀZ_ion)⁻¹`.
    pub inv_ptz: DMatrix<f64>,
    /// `Z_ion (PᵀZ_ion)⁻¹`, the full-length interpolant (offline use only).
    pub interp: DMatrix<f64>,
    /// Snapshot mean of the ionic current.
    pub mean: DVector<f64>,
}

impl DeimOperator {
    pub fn new(basis: &PodBasis) -> Result<Self> {
        let (indices, inv_ptz) = select_indices(&basis.modes)?;
        Ok(Self::from_parts(basis, indices, inv_ptz))
    }

    /// Rebuilds the operator from stored indices and inverse.
    pub fn from_parts(basis: &PodBasis, indices: Vec<usize>, inv_ptz: DMatrix<f64>) -> Self {
        let interp = &basis.modes * &inv_ptz;
        Self {
            indices,
            inv_ptz,
            interp,
            mean: basis.mean.clone(),
        }
    }

    pub fn n_points(&self) -> usize {
        self.indices.len()
    }

    pub fn n(&self) -> usize {
        self.interp.nrows()
    }

    /// `Pᵀv`.
    pub fn gather(&self, v: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.indices.len(), self.indices.iter().map(|&p| v[p]))
    }

    pub fn mean_at_points(&self) -> DVector<f64> {
        DVector::from_iterator(self.indices.len(), self.indices.iter().map(|&p| self.mean[p]))
    }

    /// Full-length reconstruction `f̂` from values at the interpolation rows.
    pub fn reconstruct(&self, f_at_points: &DVector<f64>) -> Result<DVector<f64>> {
        if f_at_points.len() != self.n_points() {
            return invalid(format!("expected {} DEIM values, got {}", self.n_points(), f_at_points.len()));
        }
        Ok(&self.interp * (f_at_points - self.mean_at_points()) + &self.mean)
    }

    /// Mass-weighted projection onto a state basis:
    /// `(Z_uᵀ M Z_ion (PᵀZ_ion)⁻¹, PᵀZ_u)` with `M` diagonal.
    pub fn project(&self, zu: &DMatrix<f64>, diag_mass: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if zu.nrows() != self.n() || diag_mass.len() != self.n() {
            return invalid("state basis or mass length differs from the DEIM basis");
        }
        let weighted = DMatrix::from_fn(self.n(), self.n_points(), |i, j| diag_mass[i] * self.interp[(i, j)]);
        let m_iu = zu.tr_mul(&weighted);
        let extractor = DMatrix::from_fn(self.n_points(), zu.ncols(), |k, j| zu[(self.indices[k], j)]);
        Ok((m_iu, extractor))
    }

    /// Projected path: `Z_uᵀ M f̂` from the M values, touching only `N×M` data.
    pub fn apply_projected(&self, m_iu: &DMatrix<f64>, offset: &DVector<f64>, f_at_points: &DVector<f64>) -> Result<DVector<f64>> {
        if f_at_points.len() != self.n_points() || m_iu.ncols() != self.n_points() {
            return invalid("projected DEIM dimensions disagree");
        }
        Ok(m_iu * f_at_points + offset)
    }

    /// Offset `Z_uᵀ M f̄ − M_iu Pᵀf̄` that accompanies [`apply_projected`](Self::apply_projected).
    pub fn projected_offset(&self, zu: &DMatrix<f64>, diag_mass: &[f64], m_iu: &DMatrix<f64>) -> DVector<f64> {
        let weighted = DVector::from_iterator(self.n(), self.mean.iter().zip(diag_mass).map(|(f, m)| f * m));
        zu.tr_mul(&weighted) - m_iu * self.mean_at_points()
    }
}
