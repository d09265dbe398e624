//! Full-order semi-implicit Monodomain solver.
//!
//! Each step updates the gating variable by backward Euler at the
//! extrapolated potential `ũ^{l+1} = 2u^l − u^{l−1}`, evaluates the ionic
//! current component-wise, and solves
//! `(βC_m α0/Δt M + σ_ml S_l + σ_mt S_t) u^{l+1} = M(I_app − β I_ion) + βC_m M Σ α_i/Δt u^{l+1−i}`
//! with the lumped mass. The first step is BDF1, all later steps BDF2.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ionic::{gating_update, i_ion_into, IonicParams};
use crate::linsolve::{default_max_iter, PreconditionedCg};
use crate::mesh::{nearest_node, AssembledOperators, Mesh};
use crate::quadrature::IonicQuadrature;
use crate::sparse::CsrMatrix;

/// Longitudinal and transverse conductivities (mS/cm).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conductivity {
    pub ml: f64,
    pub mt: f64,
}

impl Conductivity {
    pub const fn new(ml: f64, mt: f64) -> Self {
        Self { ml, mt }
    }

    /// Polar view `(ρ, θ)` with `ρ = |σ|`, `θ = arctan(σ_mt / σ_ml)`.
    pub fn polar(&self) -> (f64, f64) {
        (self.ml.hypot(self.mt), self.mt.atan2(self.ml))
    }

    pub fn from_polar(rho: f64, theta: f64) -> Self {
        Self {
            ml: rho * theta.cos(),
            mt: rho * theta.sin(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ml.is_finite() && self.mt.is_finite() && self.ml > 0.0 && self.mt > 0.0) {
            return invalid(format!("conductivity must be finite and positive, got {self:?}"));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.ml, self.mt]
    }

    pub fn from_array(a: [f64; 2]) -> Self {
        Self { ml: a[0], mt: a[1] }
    }
}

/// Which conductivity component a derivative refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Ml,
    Mt,
}

impl Component {
    pub fn index(self) -> usize {
        match self {
            Component::Ml => 0,
            Component::Mt => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StimulusSite {
    pub center: [f64; 3],
    pub radius: f64,
}

/// Applied current pulses: `amplitude` (μA/cm³) on balls around `sites` for `t ∈ [0, duration)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StimulusProtocol {
    pub sites: Vec<StimulusSite>,
    pub amplitude: f64,
    pub duration: f64,
}

pub const DEFAULT_STIMULUS_RADIUS: f64 = 0.1;

impl StimulusProtocol {
    /// Four corner pulses plus one at the center of a `[0,ex]×[0,ey]×[0,ez]`
    /// slab, at mid-depth, 10⁵ μA/cm³ for 1 ms.
    pub fn slab_default(extent: [f64; 3], radius: f64) -> Self {
        let z = 0.5 * extent[2];
        let [ex, ey, _] = extent;
        let centers = [[0.0, 0.0, z], [ex, 0.0, z], [0.0, ey, z], [ex, ey, z], [0.5 * ex, 0.5 * ey, z]];
        Self {
            sites: centers.iter().map(|&center| StimulusSite { center, radius }).collect(),
            amplitude: 1e5,
            duration: 1.0,
        }
    }

    pub fn none() -> Self {
        Self {
            sites: Vec::new(),
            amplitude: 0.0,
            duration: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites.iter().any(|s| !(s.radius > 0.0)) {
            return invalid("stimulus radius must be positive");
        }
        if !(self.duration > 0.0) || !self.amplitude.is_finite() {
            return invalid("stimulus duration must be positive and amplitude finite");
        }
        Ok(())
    }

    pub fn is_active(&self, t: f64) -> bool {
        t >= 0.0 && t < self.duration
    }

    /// Nodes inside any ball. A ball that contains no node falls back to the
    /// node nearest to its center.
    pub fn footprint(&self, mesh: &Mesh) -> Vec<bool> {
        let mut mask = vec![false; mesh.n_nodes()];
        for s in &self.sites {
            let r2 = s.radius * s.radius;
            let mut hit = false;
            for (i, p) in mesh.nodes.iter().enumerate() {
                let d2 = (0..3).map(|k| (p[k] - s.center[k]).powi(2)).sum::<f64>();
                if d2 <= r2 {
                    mask[i] = true;
                    hit = true;
                }
            }
            if !hit {
                log::warn!("stimulus ball at {:?} contains no node; using the nearest node", s.center);
                mask[nearest_node(mesh, s.center)] = true;
            }
        }
        mask
    }

    pub fn field(&self, mesh: &Mesh) -> Result<StimulusField> {
        self.validate()?;
        let values = self
            .footprint(mesh)
            .into_iter()
            .map(|hit| if hit { self.amplitude } else { 0.0 })
            .collect();
        Ok(StimulusField {
            values,
            duration: self.duration,
        })
    }
}

/// Nodal stimulus footprint for one mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct StimulusField {
    pub values: Vec<f64>,
    pub duration: f64,
}

impl StimulusField {
    pub fn zero(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
            duration: 0.0,
        }
    }

    pub fn is_active(&self, t: f64) -> bool {
        t >= 0.0 && t < self.duration
    }
}

/// Nodal applied current `I_app(t)`.
pub fn apply_stimulus(stim: &StimulusProtocol, mesh: &Mesh, t: f64) -> Vec<f64> {
    if stim.is_active(t) && stim.amplitude != 0.0 {
        stim.footprint(mesh)
            .into_iter()
            .map(|hit| if hit { stim.amplitude } else { 0.0 })
            .collect()
    } else {
        vec![0.0; mesh.n_nodes()]
    }
}

/// Time stepping settings. `beta` is the membrane surface-to-volume ratio (1/cm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    pub dt: f64,
    pub t_end: f64,
    pub bdf_order: u8,
    pub beta: f64,
    pub cg_tol: f64,
    pub cg_max_iter: Option<usize>,
    pub stride: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            t_end: 30.0,
            bdf_order: 2,
            beta: 2000.0,
            cg_tol: 1e-10,
            cg_max_iter: None,
            stride: 1,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.t_end >= self.dt) {
            return invalid(format!("need dt > 0 and T ≥ dt, got dt={} T={}", self.dt, self.t_end));
        }
        if !(self.bdf_order == 1 || self.bdf_order == 2) {
            return invalid("bdf_order must be 1 or 2");
        }
        if self.stride == 0 {
            return invalid("recording stride must be at least 1");
        }
        if !(self.beta > 0.0) || !(self.cg_tol > 0.0) {
            return invalid("beta and cg_tol must be positive");
        }
        Ok(())
    }

    /// Number of time steps `L = T/Δt` (rounded).
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    /// BDF coefficients `(α0, α1, α2)` used for step `l ≥ 1`.
    pub fn bdf_coefficients(&self, step: usize) -> [f64; 3] {
        if step <= 1 || self.bdf_order == 1 {
            [1.0, 1.0, 0.0]
        } else {
            [1.5, 2.0, -0.5]
        }
    }

    pub fn with_stride(&self, stride: usize) -> Self {
        Self {
            stride,
            ..self.clone()
        }
    }
}

/// Which per-step fields to keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Record {
    pub u: bool,
    pub w: bool,
    pub iion: bool,
}

impl Record {
    pub const U: Record = Record {
        u: true,
        w: false,
        iion: false,
    };
    pub const STATE: Record = Record {
        u: true,
        w: true,
        iion: false,
    };
    pub const ALL: Record = Record {
        u: true,
        w: true,
        iion: true,
    };
}

/// Frames recorded at steps `0, stride, 2·stride, …, ≤ L`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrajectoryRecord {
    pub dt: f64,
    pub steps: usize,
    pub stride: usize,
    pub u: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub iion: Vec<Vec<f64>>,
    /// Total conjugate-gradient iterations spent.
    pub linear_iterations: usize,
}

impl TrajectoryRecord {
    pub fn frame_steps(&self) -> impl Iterator<Item = usize> + '_ {
        (0..=self.steps).step_by(self.stride)
    }

    pub fn frame_index(&self, step: usize) -> Option<usize> {
        (step % self.stride == 0 && step <= self.steps).then_some(step / self.stride)
    }

    pub fn u_at(&self, step: usize) -> Option<&[f64]> {
        self.frame_index(step).and_then(|k| self.u.get(k)).map(Vec::as_slice)
    }

    pub fn w_at(&self, step: usize) -> Option<&[f64]> {
        self.frame_index(step).and_then(|k| self.w.get(k)).map(Vec::as_slice)
    }

    pub fn has_every_step(&self) -> bool {
        self.stride == 1 && self.u.len() == self.steps + 1 && self.w.len() == self.steps + 1
    }
}

/// Immutable inputs shared by every full-order solve on one mesh.
#[derive(Clone, Copy)]
pub struct Monodomain<'a> {
    pub ops: &'a AssembledOperators,
    pub stimulus: &'a StimulusField,
    pub params: &'a IonicParams,
    pub cfg: &'a SolveConfig,
}

/// How the ionic term of the right-hand side is integrated.
#[derive(Clone, Copy)]
pub enum IonicAssembly<'a> {
    /// `M_L · I_ion(u, w)` evaluated at the nodes.
    ComponentWise,
    /// `∫ I_ion(u_h, w_h) φ_j` by quadrature.
    Quadrature(&'a IonicQuadrature),
}

impl<'a> Monodomain<'a> {
    pub fn n(&self) -> usize {
        self.ops.n()
    }

    pub fn validate(&self, sigma: Conductivity) -> Result<()> {
        self.cfg.validate()?;
        self.params.validate()?;
        sigma.validate()?;
        if self.stimulus.values.len() != self.n() {
            return invalid("stimulus field length differs from the node count");
        }
        Ok(())
    }

    /// `βC_m α0/Δt M_L + σ_ml S_l + σ_mt S_t`.
    pub fn system_matrix(&self, sigma: Conductivity, alpha0: f64) -> CsrMatrix {
        let c = self.cfg.beta * self.params.cm * alpha0 / self.cfg.dt;
        let shift: Vec<f64> = self.ops.lumped_mass.iter().map(|m| c * m).collect();
        CsrMatrix::combine(&[(&self.ops.stiff_l, sigma.ml), (&self.ops.stiff_t, sigma.mt)], Some(&shift))
    }

    /// One preconditioned solver per distinct BDF coefficient set, indexed by step.
    pub(crate) fn step_solvers(&self, sigma: Conductivity) -> StepSolvers {
        let n = self.n();
        let max_iter = self.cfg.cg_max_iter.unwrap_or_else(|| default_max_iter(n));
        let first = PreconditionedCg::new(self.system_matrix(sigma, 1.0), self.cfg.cg_tol, max_iter);
        let rest = if self.cfg.bdf_order == 2 && self.cfg.steps() > 1 {
            Some(PreconditionedCg::new(self.system_matrix(sigma, 1.5), self.cfg.cg_tol, max_iter))
        } else {
            None
        };
        StepSolvers { first, rest }
    }

    pub fn stimulus_at(&self, step: usize) -> Option<&[f64]> {
        let t = step as f64 * self.cfg.dt;
        self.stimulus.is_active(t).then_some(self.stimulus.values.as_slice())
    }
}

pub(crate) struct StepSolvers {
    first: PreconditionedCg,
    rest: Option<PreconditionedCg>,
}

impl StepSolvers {
    pub(crate) fn solve(&mut self, step: usize, b: &[f64], x: &mut [f64]) -> Result<usize> {
        let solver = match (&mut self.rest, step) {
            (Some(s), l) if l > 1 => s,
            _ => &mut self.first,
        };
        solver.solve(b, x).map_err(|f| Error::Solve {
            step,
            iterations: f.iterations,
            residual: f.residual,
        })
    }
}

fn check_initial(n: usize, u0: &[f64], w0: &[f64]) -> Result<()> {
    if u0.len() != n || w0.len() != n {
        return invalid(format!("initial data must have length {n}"));
    }
    Ok(())
}

pub fn solve_monodomain(
    model: &Monodomain,
    sigma: Conductivity,
    u0: &[f64],
    w0: &[f64],
    record: Record,
) -> Result<TrajectoryRecord> {
    solve_monodomain_with(model, IonicAssembly::ComponentWise, sigma, u0, w0, record)
}

pub fn solve_monodomain_with(
    model: &Monodomain,
    ionic: IonicAssembly,
    sigma: Conductivity,
    u0: &[f64],
    w0: &[f64],
    record: Record,
) -> Result<TrajectoryRecord> {
    model.validate(sigma)?;
    let n = model.n();
    check_initial(n, u0, w0)?;
    let cfg = model.cfg;
    let p = model.params;
    let steps = cfg.steps();
    let dt = cfg.dt;
    let beta = cfg.beta;
    let mass = &model.ops.lumped_mass;

    let mut solvers = model.step_solvers(sigma);
    let mut traj = TrajectoryRecord {
        dt,
        steps,
        stride: cfg.stride,
        ..Default::default()
    };

    let mut u_prev2 = u0.to_vec(); // u^{l-1}
    let mut u_prev = u0.to_vec(); // u^l
    let mut w = w0.to_vec();
    let mut u_tilde = vec![0.0; n];
    let mut iion = vec![0.0; n];
    let mut rhs = vec![0.0; n];

    if record.u {
        traj.u.push(u0.to_vec());
    }
    if record.w {
        traj.w.push(w0.to_vec());
    }
    if record.iion {
        let mut f0 = vec![0.0; n];
        i_ion_into(p, u0, w0, &mut f0);
        traj.iion.push(f0);
    }

    for l in 1..=steps {
        if l == 1 {
            u_tilde.copy_from_slice(u0);
        } else {
            for i in 0..n {
                u_tilde[i] = 2.0 * u_prev[i] - u_prev2[i];
            }
        }
        gating_update(p, &mut w, &u_tilde, dt);
        i_ion_into(p, &u_tilde, &w, &mut iion);

        let [_, a1, a2] = cfg.bdf_coefficients(l);
        let c = beta * p.cm / dt;
        let stim = model.stimulus_at(l);
        match ionic {
            IonicAssembly::ComponentWise => {
                for i in 0..n {
                    let iapp = stim.map_or(0.0, |s| s[i]);
                    rhs[i] = mass[i] * (iapp - beta * iion[i] + c * (a1 * u_prev[i] + a2 * u_prev2[i]));
                }
            }
            IonicAssembly::Quadrature(q) => {
                q.assemble_into(p, &u_tilde, &w, &mut rhs);
                for i in 0..n {
                    let iapp = stim.map_or(0.0, |s| s[i]);
                    rhs[i] = mass[i] * (iapp + c * (a1 * u_prev[i] + a2 * u_prev2[i])) - beta * rhs[i];
                }
            }
        }

        // u_tilde doubles as the initial guess; it then becomes u^{l+1}
        let mut u_next = std::mem::take(&mut u_tilde);
        traj.linear_iterations += solvers.solve(l, &rhs, &mut u_next)?;
        u_tilde = std::mem::replace(&mut u_prev2, std::mem::replace(&mut u_prev, u_next));

        if l % cfg.stride == 0 {
            if record.u {
                traj.u.push(u_prev.clone());
            }
            if record.w {
                traj.w.push(w.clone());
            }
            if record.iion {
                traj.iion.push(iion.clone());
            }
        }
    }
    Ok(traj)
}

/// Forward sensitivities `∂u/∂σ_k`, `∂w/∂σ_k` of a base trajectory, stepped
/// with the same scheme as the state. Returned in the `u` and `w` frames.
pub fn solve_sensitivity(
    model: &Monodomain,
    sigma: Conductivity,
    base: &TrajectoryRecord,
    which: Component,
) -> Result<TrajectoryRecord> {
    model.validate(sigma)?;
    let cfg = model.cfg;
    if !base.has_every_step() || base.steps != cfg.steps() {
        return invalid("sensitivity solve needs base u and w frames at every step");
    }
    let n = model.n();
    let p = model.params;
    let dt = cfg.dt;
    let beta = cfg.beta;
    let mass = &model.ops.lumped_mass;
    let stiff = match which {
        Component::Ml => &model.ops.stiff_l,
        Component::Mt => &model.ops.stiff_t,
    };
    let mut solvers = model.step_solvers(sigma);
    let damp = p.gating_damping(dt);
    let k_gate = dt * p.beta2();

    let mut out = TrajectoryRecord {
        dt,
        steps: base.steps,
        stride: cfg.stride,
        ..Default::default()
    };
    let mut s_prev2 = vec![0.0; n];
    let mut s_prev = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut s_tilde = vec![0.0; n];
    let mut su = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    out.u.push(s_prev.clone());
    out.w.push(z.clone());

    for l in 1..=base.steps {
        let u_l = &base.u[l];
        let w_l = &base.w[l];
        if l == 1 {
            s_tilde.iter_mut().for_each(|v| *v = 0.0);
        } else {
            for i in 0..n {
                s_tilde[i] = 2.0 * s_prev[i] - s_prev2[i];
            }
        }
        for i in 0..n {
            z[i] = (z[i] + k_gate * s_tilde[i]) * damp;
        }
        stiff.mul_vec(u_l, &mut su);
        let [_, a1, a2] = cfg.bdf_coefficients(l);
        let c = beta * p.cm / dt;
        for i in 0..n {
            let ut = if l == 1 {
                base.u[0][i]
            } else {
                2.0 * base.u[l - 1][i] - base.u[l - 2][i]
            };
            let d = p.partials(ut, w_l[i]);
            rhs[i] = -su[i]
                + mass[i] * (-beta * (d.di_du * s_tilde[i] + d.di_dw * z[i]) + c * (a1 * s_prev[i] + a2 * s_prev2[i]));
        }
        let mut s_next = std::mem::take(&mut s_tilde);
        s_next.copy_from_slice(&s_prev);
        out.linear_iterations += solvers.solve(l, &rhs, &mut s_next)?;
        s_tilde = std::mem::replace(&mut s_prev2, std::mem::replace(&mut s_prev, s_next));
        if l % cfg.stride == 0 {
            out.u.push(s_prev.clone());
            out.w.push(z.clone());
        }
    }
    Ok(out)
}

/// Rest state `u ≡ V_r`, `w ≡ 0`.
pub fn rest_state(n: usize, p: &IonicParams) -> (Vec<f64>, Vec<f64>) {
    (vec![p.v_rest; n], vec![0.0; n])
}
