//! Snapshot matrices and POD bases (thin QR of the snapshots, then SVD of R).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::forward::{Conductivity, TrajectoryRecord};

/// Which field a snapshot set or basis describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    U,
    Iion,
}

impl Field {
    pub fn tag(self) -> &'static str {
        match self {
            Field::U => "u",
            Field::Iion => "iion",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "u" => Some(Field::U),
            "iion" => Some(Field::Iion),
            _ => None,
        }
    }
}

/// Column snapshots with their mean removed.
#[derive(Clone, Debug)]
pub struct SnapshotMatrix {
    pub data: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub sigma_gen: Conductivity,
    pub field: Field,
}

impl SnapshotMatrix {
    /// Builds from raw frames; `center` subtracts the column mean.
    pub fn from_frames(frames: &[Vec<f64>], sigma_gen: Conductivity, field: Field, center: bool) -> Result<Self> {
        let Some(first) = frames.first() else {
            return invalid("snapshot set is empty");
        };
        let n = first.len();
        if n == 0 || frames.iter().any(|f| f.len() != n) {
            return invalid("snapshot frames must be non-empty and of equal length");
        }
        let data = DMatrix::from_fn(n, frames.len(), |i, j| frames[j][i]);
        Ok(Self::from_matrix(data, sigma_gen, field, center))
    }

    pub fn from_matrix(mut data: DMatrix<f64>, sigma_gen: Conductivity, field: Field, center: bool) -> Self {
        let mean = if center {
            let mean = data.column_mean();
            for mut col in data.column_iter_mut() {
                col -= &mean;
            }
            mean
        } else {
            DVector::zeros(data.nrows())
        };
        Self {
            data,
            mean,
            sigma_gen,
            field,
        }
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn m(&self) -> usize {
        self.data.ncols()
    }

    /// Uncentered column `j`.
    pub fn raw_column(&self, j: usize) -> DVector<f64> {
        self.data.column(j) + &self.mean
    }

    /// Keeps every `k`-th column (starting with the first) and re-centers.
    pub fn thinned(&self, k: usize) -> Self {
        let k = k.max(1);
        let cols: Vec<usize> = (0..self.m()).step_by(k).collect();
        let raw = DMatrix::from_fn(self.n(), cols.len(), |i, j| self.data[(i, cols[j])] + self.mean[i]);
        Self::from_matrix(raw, self.sigma_gen, self.field, true)
    }
}

/// How many modes to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankRule {
    Fixed(usize),
    /// Smallest `N` with `s_N / s_1 ≤ τ` (all modes if never reached).
    Energy(f64),
}

/// Column-orthonormal modes plus the data needed to lift reduced states.
#[derive(Clone, Debug, PartialEq)]
pub struct PodBasis {
    pub modes: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub sigma_gen: Conductivity,
    pub field: Field,
    pub mean: DVector<f64>,
}

impl PodBasis {
    /// Wraps explicit modes (assumed orthonormal) without an SVD.
    pub fn from_modes(modes: DMatrix<f64>, mean: DVector<f64>, sigma_gen: Conductivity, field: Field) -> Result<Self> {
        if mean.len() != modes.nrows() || modes.ncols() == 0 {
            return invalid("basis modes and mean disagree in length");
        }
        let singular_values = vec![1.0; modes.ncols()];
        Ok(Self {
            modes,
            singular_values,
            sigma_gen,
            field,
            mean,
        })
    }

    pub fn n(&self) -> usize {
        self.modes.nrows()
    }

    pub fn rank(&self) -> usize {
        self.modes.ncols()
    }

    pub fn orthonormality_error(&self) -> f64 {
        let g = self.modes.tr_mul(&self.modes);
        let mut worst = 0.0f64;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }

    /// Reduced coordinates `Zᵀ(v − mean)`.
    pub fn project(&self, v: &[f64]) -> DVector<f64> {
        let centered = DVector::from_iterator(v.len(), v.iter().zip(self.mean.iter()).map(|(a, m)| a - m));
        self.modes.tr_mul(&centered)
    }

    /// `mean + Z·coeffs`.
    pub fn lift(&self, coeffs: &DVector<f64>) -> Vec<f64> {
        let v = &self.modes * coeffs + &self.mean;
        v.as_slice().to_vec()
    }

    /// Keeps the leading `n_modes` columns.
    pub fn truncated(&self, n_modes: usize) -> Result<Self> {
        if n_modes == 0 || n_modes > self.rank() {
            return invalid(format!("cannot truncate a rank-{} basis to {n_modes}", self.rank()));
        }
        Ok(Self {
            modes: self.modes.columns(0, n_modes).into_owned(),
            ..self.clone()
        })
    }
}

/// Thin QR of the snapshots followed by an SVD of the small triangular factor.
/// Returns `Q·U_R` (all columns) and the descending singular values.
fn left_singular_vectors(y: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let qr = y.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let (u_r, sv) = small_svd(&r);
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let values = order.iter().map(|&k| sv[k]).collect();
    let sorted = DMatrix::from_fn(u_r.nrows(), order.len(), |i, j| u_r[(i, order[j])]);
    (q * sorted, values)
}

/// Left singular vectors and values of a small dense matrix.
///
/// nalgebra's bidiagonal SVD occasionally returns factors that do not
/// reproduce the input when it has exactly zero singular values (which mean
/// centering always produces), so the result is checked and recomputed with
/// one-sided Jacobi when needed.
fn small_svd(r: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let svd = r.clone().svd(true, true);
    let scale = r.amax().max(f64::MIN_POSITIVE);
    if let Ok(back) = svd.clone().recompose() {
        if (back - r).amax() <= 1e-13 * scale {
            let u = svd.u.expect("requested U");
            return (u, svd.singular_values.iter().copied().collect());
        }
    }
    log::debug!("falling back to Jacobi SVD for a {}x{} factor", r.nrows(), r.ncols());
    jacobi_svd(r)
}

/// One-sided (Hestenes) Jacobi: rotate column pairs of `A` until they are
/// mutually orthogonal; the column norms are then the singular values.
/// Columns of `U` belonging to zero singular values are left at zero.
fn jacobi_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let mut w = a.clone();
    let k = w.ncols();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let (alpha, beta, gamma) = {
                    let cp = w.column(p);
                    let cq = w.column(q);
                    (cp.norm_squared(), cq.norm_squared(), cp.dot(&cq))
                };
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..w.nrows() {
                    let (x, y) = (w[(i, p)], w[(i, q)]);
                    w[(i, p)] = c * x - s * y;
                    w[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let values: Vec<f64> = w.column_iter().map(|c| c.norm()).collect();
    let top = values.iter().copied().fold(0.0, f64::max);
    for (j, &s) in values.iter().enumerate() {
        if s > 1e-15 * top {
            let mut col = w.column_mut(j);
            col /= s;
        } else {
            w.column_mut(j).fill(0.0);
        }
    }
    (w, values)
}

pub fn build_pod(snaps: &SnapshotMatrix, rule: RankRule) -> Result<PodBasis> {
    let m = snaps.m();
    if m == 0 {
        return invalid("snapshot set is empty");
    }
    let (vectors, mut values) = left_singular_vectors(&snaps.data);
    values.resize(m, 0.0);
    let s1 = values[0];
    let requested = match rule {
        RankRule::Fixed(k) => {
            if k == 0 || k > m || k > snaps.n() {
                return invalid(format!("rank {k} requested from {m} snapshots of length {}", snaps.n()));
            }
            k
        }
        RankRule::Energy(tau) => {
            if !(tau > 0.0) {
                return invalid("energy threshold must be positive");
            }
            values
                .iter()
                .position(|&s| s <= tau * s1)
                .map_or(vectors.ncols(), |k| (k + 1).min(vectors.ncols()))
        }
    };
    let numerical = values.iter().take_while(|&&s| s > 1e-14 * s1).count().max(1);
    let n_modes = if requested > numerical {
        log::warn!(
            "{} snapshots at {:?} have numerical rank {numerical}; truncating the basis from {requested}",
            snaps.field.tag(),
            snaps.sigma_gen
        );
        numerical
    } else {
        requested
    };
    Ok(PodBasis {
        modes: vectors.columns(0, n_modes).into_owned(),
        singular_values: values,
        sigma_gen: snaps.sigma_gen,
        field: snaps.field,
        mean: snaps.mean.clone(),
    })
}

/// `s_i / s_1` for all singular values of the snapshot matrix.
pub fn singular_decay_report(snaps: &SnapshotMatrix) -> Vec<f64> {
    let (_, values) = left_singular_vectors(&snaps.data);
    let mut values = values;
    values.resize(snaps.m(), 0.0);
    let s1 = values[0];
    if s1 == 0.0 {
        let mut out = vec![0.0; values.len()];
        out[0] = 1.0;
        return out;
    }
    values.iter().map(|s| s / s1).collect()
}

/// First 1-based index `i` with `s_i/s_1 ≤ threshold`.
pub fn decay_index(ratios: &[f64], threshold: f64) -> Option<usize> {
    ratios.iter().position(|&r| r <= threshold).map(|k| k + 1)
}

/// Interleaves `[y_1, δ_l ∂y_1/∂σ_ml, δ_t ∂y_1/∂σ_mt, …]` and re-centers.
/// Columns scaled by a zero δ are dropped.
pub fn augment_with_sensitivities(
    snaps: &SnapshotMatrix,
    sens_l: &TrajectoryRecord,
    sens_t: &TrajectoryRecord,
    delta_l: f64,
    delta_t: f64,
) -> Result<SnapshotMatrix> {
    let m = snaps.m();
    let n = snaps.n();
    if sens_l.u.len() != m || sens_t.u.len() != m {
        return invalid(format!(
            "sensitivity frame counts ({}, {}) differ from {m} snapshots",
            sens_l.u.len(),
            sens_t.u.len()
        ));
    }
    if sens_l.u.iter().chain(&sens_t.u).any(|f| f.len() != n) {
        return invalid("sensitivity frame length differs from the snapshot length");
    }
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(3 * m);
    for j in 0..m {
        cols.push(snaps.raw_column(j).as_slice().to_vec());
        if delta_l != 0.0 {
            cols.push(sens_l.u[j].iter().map(|v| delta_l * v).collect());
        }
        if delta_t != 0.0 {
            cols.push(sens_t.u[j].iter().map(|v| delta_t * v).collect());
        }
    }
    SnapshotMatrix::from_frames(&cols, snaps.sigma_gen, snaps.field, true)
}

/// `δ = σ_target − σ_gen`, the scaling that maps the generator onto a chosen point.
pub fn sensitivity_scaling(sigma_gen: Conductivity, target: Conductivity) -> (f64, f64) {
    (target.ml - sigma_gen.ml, target.mt - sigma_gen.mt)
}

/// `Σ_j ‖y_j − ZZᵀy_j‖²`.
pub fn projection_error(data: &DMatrix<f64>, modes: &DMatrix<f64>) -> f64 {
    let coeffs = modes.tr_mul(data);
    let residual = data - modes * coeffs;
    residual.norm_squared()
}
