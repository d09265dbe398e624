//! Reduced Monodomain model: Galerkin projection on a POD basis with DEIM for
//! the ionic current, its discrete adjoint and the conductivity gradient.
//!
//! The reduced state represents `u − ū` where `ū` is the snapshot mean, so
//! `u ≈ ū + Z_u u_r`. Projecting the full step gives
//! `A_r u_r^l = I_r^l − σ_ml s̄_l − σ_mt s̄_t + βC_m M_u Σ α_i/Δt u_r^{l−i} − β(M_iu f_P^l + f_off)`
//! with `s̄_k = Z_uᵀ S_k ū`; the mass part of `A ū` cancels because `α0 = α1 + α2`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::deim::DeimOperator;
use crate::error::{invalid, Error, Result};
use crate::forward::{Conductivity, SolveConfig, StimulusField};
use crate::ionic::IonicParams;
use crate::measure::{MeasurementSet, Regularization};
use crate::mesh::AssembledOperators;
use crate::pod::PodBasis;

/// Everything the online solver needs. Nothing here has length `n`.
#[derive(Clone, Debug)]
pub struct ReducedOperators {
    pub m_u: DMatrix<f64>,
    pub s_lu: DMatrix<f64>,
    pub s_tu: DMatrix<f64>,
    /// `Z_uᵀ S_k ū`.
    pub s_bar_l: DVector<f64>,
    pub s_bar_t: DVector<f64>,
    /// `Z_uᵀ M Z_ion (PᵀZ_ion)⁻¹`.
    pub m_iu: DMatrix<f64>,
    /// `PᵀZ_u`.
    pub extractor: DMatrix<f64>,
    /// `Pᵀū`.
    pub mean_p: DVector<f64>,
    /// `Z_uᵀ M f̄ − M_iu Pᵀf̄`.
    pub ion_offset: DVector<f64>,
    /// `Z_uᵀ M I_app` while the stimulus is on.
    pub stim_r: DVector<f64>,
    pub stim_duration: f64,
    pub u_r0: DVector<f64>,
    pub w_p0: DVector<f64>,
    pub params: IonicParams,
    pub cfg: SolveConfig,
}

impl ReducedOperators {
    pub fn n_modes(&self) -> usize {
        self.m_u.nrows()
    }

    pub fn n_points(&self) -> usize {
        self.mean_p.len()
    }

    fn stimulus_active(&self, step: usize) -> bool {
        let t = step as f64 * self.cfg.dt;
        t >= 0.0 && t < self.stim_duration
    }

    /// `βC_m α0/Δt M_u + σ_ml S_lu + σ_mt S_tu`.
    pub fn system_matrix(&self, sigma: Conductivity, alpha0: f64) -> DMatrix<f64> {
        let c = self.cfg.beta * self.params.cm * alpha0 / self.cfg.dt;
        &self.m_u * c + &self.s_lu * sigma.ml + &self.s_tu * sigma.mt
    }

    fn factor(&self, sigma: Conductivity, alpha0: f64) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.system_matrix(sigma, alpha0))
            .ok_or_else(|| Error::Internal(format!("reduced system matrix at {sigma:?} is not positive definite")))
    }

    /// Ionic arguments at the DEIM points from a reduced extrapolation.
    fn point_values(&self, u_tilde_r: &DVector<f64>) -> DVector<f64> {
        &self.extractor * u_tilde_r + &self.mean_p
    }
}

/// Projects the operators, stimulus and initial state.
#[allow(clippy::too_many_arguments)]
pub fn build_reduced_operators(
    ops: &AssembledOperators,
    zu: &PodBasis,
    deim: &DeimOperator,
    stimulus: &StimulusField,
    params: &IonicParams,
    cfg: &SolveConfig,
    u0: &[f64],
    w0: &[f64],
) -> Result<ReducedOperators> {
    let n = ops.n();
    if zu.n() != n || deim.n() != n || stimulus.values.len() != n || u0.len() != n || w0.len() != n {
        return invalid("reduced operator inputs disagree on the node count");
    }
    cfg.validate()?;
    params.validate()?;
    let z = &zu.modes;
    let mass = &ops.lumped_mass;
    let m_u = {
        let mz = DMatrix::from_fn(n, z.ncols(), |i, j| mass[i] * z[(i, j)]);
        z.tr_mul(&mz)
    };
    let s_lu = ops.stiff_l.congruence(z);
    let s_tu = ops.stiff_t.congruence(z);
    let mean = zu.mean.as_slice();
    let s_bar_l = z.tr_mul(&DVector::from_vec(ops.stiff_l.apply(mean)));
    let s_bar_t = z.tr_mul(&DVector::from_vec(ops.stiff_t.apply(mean)));
    let (m_iu, extractor) = deim.project(z, mass)?;
    let ion_offset = deim.projected_offset(z, mass, &m_iu);
    let mean_p = deim.gather(mean);
    let stim_r = z.tr_mul(&DVector::from_iterator(n, stimulus.values.iter().zip(mass).map(|(s, m)| s * m)));
    Ok(ReducedOperators {
        m_u,
        s_lu,
        s_tu,
        s_bar_l,
        s_bar_t,
        m_iu,
        extractor,
        mean_p,
        ion_offset,
        stim_r,
        stim_duration: stimulus.duration,
        u_r0: zu.project(u0),
        w_p0: deim.gather(w0),
        params: *params,
        cfg: cfg.clone(),
    })
}

/// Measurement data in reduced form: `X_u = Z_uᵀ X_site Z_u`,
/// `û^l = Z_uᵀ X_site (u_meas^l − ū)` and `‖X_site (u_meas^l − ū)‖²`.
#[derive(Clone, Debug)]
pub struct ReducedMeasurements {
    pub x_u: DMatrix<f64>,
    pub steps: Vec<usize>,
    pub u_hat: Vec<DVector<f64>>,
    pub norms: Vec<f64>,
}

impl ReducedMeasurements {
    pub fn new(zu: &PodBasis, meas: &MeasurementSet) -> Result<Self> {
        meas.validate()?;
        if meas.n != zu.n() {
            return invalid("measurement mesh differs from the basis length");
        }
        let z = &zu.modes;
        let rows = DMatrix::from_fn(meas.sites.len(), z.ncols(), |k, j| z[(meas.sites[k], j)]);
        let x_u = rows.tr_mul(&rows);
        let mean_s = DVector::from_iterator(meas.sites.len(), meas.sites.iter().map(|&s| zu.mean[s]));
        let mut u_hat = Vec::with_capacity(meas.steps.len());
        let mut norms = Vec::with_capacity(meas.steps.len());
        for v in &meas.values {
            let d = DVector::from_column_slice(v) - &mean_s;
            u_hat.push(rows.tr_mul(&d));
            norms.push(d.norm_squared());
        }
        Ok(Self {
            x_u,
            steps: meas.steps.clone(),
            u_hat,
            norms,
        })
    }

    fn marker(&self, l: usize) -> Option<usize> {
        self.steps.binary_search(&l).ok()
    }
}

/// Reduced states at every step `0..=L`.
#[derive(Clone, Debug, Default)]
pub struct ReducedTrajectory {
    pub dt: f64,
    pub steps: usize,
    pub u_r: Vec<DVector<f64>>,
    pub w_p: Vec<DVector<f64>>,
}

impl ReducedTrajectory {
    /// Extrapolated state `ũ_r^l` (`ũ_r^1 = u_r^0`).
    pub fn u_tilde(&self, l: usize) -> DVector<f64> {
        if l <= 1 {
            self.u_r[0].clone()
        } else {
            &self.u_r[l - 1] * 2.0 - &self.u_r[l - 2]
        }
    }

    /// Full-length `ū + Z u_r^l` for every step.
    pub fn lift(&self, zu: &PodBasis) -> Vec<Vec<f64>> {
        self.u_r.iter().map(|c| zu.lift(c)).collect()
    }
}

pub fn solve_reduced(ro: &ReducedOperators, sigma: Conductivity) -> Result<ReducedTrajectory> {
    sigma.validate()?;
    let cfg = &ro.cfg;
    let p = &ro.params;
    let steps = cfg.steps();
    let dt = cfg.dt;
    let beta = cfg.beta;
    let c = beta * p.cm / dt;
    let first = ro.factor(sigma, 1.0)?;
    let rest = if cfg.bdf_order == 2 && steps > 1 {
        Some(ro.factor(sigma, 1.5)?)
    } else {
        None
    };
    let fixed = -(&ro.s_bar_l * sigma.ml) - &ro.s_bar_t * sigma.mt;
    let damp = p.gating_damping(dt);
    let k_gate = dt * p.beta2();

    let mut traj = ReducedTrajectory {
        dt,
        steps,
        u_r: Vec::with_capacity(steps + 1),
        w_p: Vec::with_capacity(steps + 1),
    };
    traj.u_r.push(ro.u_r0.clone());
    traj.w_p.push(ro.w_p0.clone());
    let mut w = ro.w_p0.clone();
    let mut f = DVector::zeros(ro.n_points());

    for l in 1..=steps {
        let u_tilde = traj.u_tilde(l);
        let up = ro.point_values(&u_tilde);
        for k in 0..w.len() {
            w[k] = (w[k] + k_gate * (up[k] - p.v_rest)) * damp;
            f[k] = p.i_ion(up[k], w[k]);
        }
        let [_, a1, a2] = cfg.bdf_coefficients(l);
        let mut hist = &traj.u_r[l - 1] * a1;
        if a2 != 0.0 {
            hist += &traj.u_r[l - 2] * a2;
        }
        let mut rhs = &ro.m_u * hist * c + &fixed - (&ro.m_iu * &f + &ro.ion_offset) * beta;
        if ro.stimulus_active(l) {
            rhs += &ro.stim_r;
        }
        let solver = match (&rest, l) {
            (Some(r), l) if l > 1 => r,
            _ => &first,
        };
        solver.solve_mut(&mut rhs);
        traj.u_r.push(rhs);
        traj.w_p.push(w.clone());
    }
    Ok(traj)
}

/// Misfit in the efficient form
/// `½ Σ χ^l [u_rᵀ X_u u_r − 2 ûᵀ u_r + ‖X(u_meas − ū)‖²] + (α/2)R(σ)`.
pub fn reduced_cost(
    rm: &ReducedMeasurements,
    traj: &ReducedTrajectory,
    reg: &Regularization,
    sigma: Conductivity,
) -> Result<f64> {
    let mut j = 0.0;
    for (k, &l) in rm.steps.iter().enumerate() {
        let Some(u) = traj.u_r.get(l) else {
            return invalid(format!("reduced trajectory ends before marked step {l}"));
        };
        j += 0.5 * (u.dot(&(&rm.x_u * u)) - 2.0 * rm.u_hat[k].dot(u) + rm.norms[k]);
    }
    Ok(j + reg.value(sigma))
}

/// Adjoint multipliers `q_r^l` (length N) and `r_r^l` (length M) for `l = 1..=L`;
/// index 0 is unused and zero.
#[derive(Clone, Debug, Default)]
pub struct ReducedDual {
    pub q: Vec<DVector<f64>>,
    pub r: Vec<DVector<f64>>,
}

/// Backward sweep of the discrete adjoint of [`solve_reduced`].
///
/// `A_l q^l = d^l` with
/// `d^l = χ^l(X_u u_r^l − û^l) + βC_m M_u Σ_{i=1,2} α_i^{l+i}/Δt q^{l+i} + 2 g^{l+1} − g^{l+2}`,
/// `g^m = Uᵀ[−β(M_iuᵀq^m)∘∂_u I^m − ∂_u g · r^m]` and
/// `r^m = (r^{m+1} − Δt β (M_iuᵀq^m)∘∂_w I^m) / (1 + Δt ∂_w g)`.
/// Every quantity beyond `L` is zero.
pub fn solve_reduced_adjoint(
    ro: &ReducedOperators,
    rm: &ReducedMeasurements,
    sigma: Conductivity,
    primal: &ReducedTrajectory,
) -> Result<ReducedDual> {
    let cfg = &ro.cfg;
    let steps = cfg.steps();
    if primal.u_r.len() != steps + 1 || primal.w_p.len() != steps + 1 {
        return invalid("adjoint needs the reduced state at every step");
    }
    let p = &ro.params;
    let dt = cfg.dt;
    let beta = cfg.beta;
    let c = beta * p.cm / dt;
    let damp = p.gating_damping(dt);
    let dg_du = -p.beta2();
    let first = ro.factor(sigma, 1.0)?;
    let rest = if cfg.bdf_order == 2 && steps > 1 {
        Some(ro.factor(sigma, 1.5)?)
    } else {
        None
    };

    let nn = ro.n_modes();
    let mm = ro.n_points();
    let mut dual = ReducedDual {
        q: vec![DVector::zeros(nn); steps + 1],
        r: vec![DVector::zeros(mm); steps + 1],
    };
    let mut g1 = DVector::zeros(nn); // g^{l+1}
    let mut g2 = DVector::zeros(nn); // g^{l+2}
    let mut r_next = DVector::zeros(mm);

    for l in (1..=steps).rev() {
        let mut d = DVector::zeros(nn);
        if let Some(k) = rm.marker(l) {
            d += &rm.x_u * &primal.u_r[l] - &rm.u_hat[k];
        }
        let mut qmass = DVector::zeros(nn);
        for i in 1..=2 {
            let m = l + i;
            if m <= steps {
                let a = cfg.bdf_coefficients(m)[i];
                if a != 0.0 {
                    qmass += &dual.q[m] * a;
                }
            }
        }
        d += &ro.m_u * qmass * c;
        d += &g1 * 2.0 - &g2;

        let solver = match (&rest, l) {
            (Some(r), l) if l > 1 => r,
            _ => &first,
        };
        solver.solve_mut(&mut d);

        let phi = ro.m_iu.tr_mul(&d) * -beta;
        let up = ro.point_values(&primal.u_tilde(l));
        let w = &primal.w_p[l];
        let mut r = DVector::zeros(mm);
        let mut inner = DVector::zeros(mm);
        for k in 0..mm {
            let part = p.partials(up[k], w[k]);
            r[k] = damp * (r_next[k] + dt * phi[k] * part.di_dw);
            inner[k] = phi[k] * part.di_du - dg_du * r[k];
        }
        let g = ro.extractor.tr_mul(&inner);
        g2 = std::mem::replace(&mut g1, g);
        r_next = r.clone();
        dual.q[l] = d;
        dual.r[l] = r;
    }
    Ok(dual)
}

/// `DJ_r/Dσ_k = −Σ_l (q_r^l)ᵀ(S_ku u_r^l + s̄_k) + (α/2)∂R/∂σ_k`.
pub fn reduced_gradient(
    ro: &ReducedOperators,
    primal: &ReducedTrajectory,
    dual: &ReducedDual,
    reg: &Regularization,
    sigma: Conductivity,
) -> Result<[f64; 2]> {
    if primal.u_r.len() != dual.q.len() {
        return invalid("primal and dual step counts differ");
    }
    let mut g = reg.gradient(sigma);
    for l in 1..dual.q.len() {
        let q = &dual.q[l];
        let u = &primal.u_r[l];
        g[0] -= q.dot(&(&ro.s_lu * u + &ro.s_bar_l));
        g[1] -= q.dot(&(&ro.s_tu * u + &ro.s_bar_t));
    }
    Ok(g)
}

/// Reduced cost and its gradient in one forward/backward pass.
pub fn reduced_cost_and_gradient(
    ro: &ReducedOperators,
    rm: &ReducedMeasurements,
    reg: &Regularization,
    sigma: Conductivity,
) -> Result<(f64, [f64; 2])> {
    let primal = solve_reduced(ro, sigma)?;
    let j = reduced_cost(rm, &primal, reg, sigma)?;
    let dual = solve_reduced_adjoint(ro, rm, sigma, &primal)?;
    Ok((j, reduced_gradient(ro, &primal, &dual, reg, sigma)?))
}
