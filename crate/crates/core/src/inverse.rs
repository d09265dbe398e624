//! Conductivity estimation: admissible set, full-order adjoint, basis
//! libraries, and the log-barrier BFGS driver used by the full, reduced and
//! adaptive solvers.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::deim::DeimOperator;
use crate::error::{invalid, Result};
use crate::forward::{solve_monodomain, Conductivity, Monodomain, Record, TrajectoryRecord};
use crate::measure::{add_noise, cost_full, MeasurementSet, NoiseModel, Regularization};
use crate::pod::{build_pod, Field, PodBasis, RankRule, SnapshotMatrix};
use crate::rom::{
    build_reduced_operators, reduced_cost, reduced_gradient, solve_reduced, solve_reduced_adjoint, ReducedMeasurements,
    ReducedOperators, ReducedTrajectory,
};

/// Admissible set `1 ≤ σ_ml/σ_mt ≤ 100`, `σ_mt ≥ 0.05`, `σ_ml ≤ 7`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Constraints {
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub mt_min: f64,
    pub ml_max: f64,
}

impl Default for Constraints {
    fn default() -> Self {
        Self {
            ratio_min: 1.0,
            ratio_max: 100.0,
            mt_min: 0.05,
            ml_max: 7.0,
        }
    }
}

impl Constraints {
    /// `[h_1, h_2, h_3, h_4]`; feasible means all strictly positive.
    pub fn values(&self, s: Conductivity) -> [f64; 4] {
        let ratio = s.ml / s.mt;
        [ratio - self.ratio_min, self.ratio_max - ratio, s.mt - self.mt_min, self.ml_max - s.ml]
    }

    pub fn gradients(&self, s: Conductivity) -> [[f64; 2]; 4] {
        let d_ratio = [1.0 / s.mt, -s.ml / (s.mt * s.mt)];
        [d_ratio, [-d_ratio[0], -d_ratio[1]], [0.0, 1.0], [-1.0, 0.0]]
    }

    pub fn is_feasible(&self, s: Conductivity) -> bool {
        s.mt > 0.0 && s.ml.is_finite() && self.values(s).iter().all(|&h| h > 0.0)
    }

    pub fn min_margin(&self, s: Conductivity) -> f64 {
        self.values(s).iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `−μ Σ log h_i`.
    pub fn barrier(&self, s: Conductivity, mu: f64) -> f64 {
        -mu * self.values(s).iter().map(|h| h.ln()).sum::<f64>()
    }

    /// `−μ Σ ∇h_i / h_i`.
    pub fn barrier_gradient(&self, s: Conductivity, mu: f64) -> [f64; 2] {
        let h = self.values(s);
        let g = self.gradients(s);
        let mut out = [0.0; 2];
        for i in 0..4 {
            out[0] -= mu * g[i][0] / h[i];
            out[1] -= mu * g[i][1] / h[i];
        }
        out
    }
}

/// Barrier-BFGS settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerOptions {
    pub max_iter: usize,
    pub mu0: f64,
    /// Barrier shrink factor ς.
    pub shrink: f64,
    pub mu_min: f64,
    pub grad_tol: f64,
    pub armijo: f64,
    pub max_halvings: usize,
    pub regularization: Regularization,
    pub constraints: Constraints,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            max_iter: 40,
            mu0: 1.0,
            shrink: 0.1,
            mu_min: 1e-8,
            grad_tol: 1e-6,
            armijo: 1e-4,
            max_halvings: 30,
            regularization: Regularization::default(),
            constraints: Constraints::default(),
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return invalid("max_iter must be at least 1");
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) || !(self.mu0 > 0.0) {
            return invalid("barrier needs μ0 > 0 and 0 < ς < 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord {
    pub iter: usize,
    pub sigma: Conductivity,
    pub cost: f64,
    pub grad_norm: f64,
    pub basis_index: Option<usize>,
    pub mu: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveCounts {
    pub forward: usize,
    pub backward: usize,
    /// Full-order solves made to build bases (adaptive mode).
    pub snapshot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub sigma: Conductivity,
    pub status: Status,
    pub history: Vec<IterateRecord>,
    pub counts: SolveCounts,
    pub wall_seconds: f64,
    /// Library size after each adaptive cycle (empty otherwise).
    pub library_sizes: Vec<usize>,
}

/// A cost functional with adjoint gradient. `prepare` picks whatever
/// approximation is used near `sigma` and reports whether it changed.
pub trait Objective {
    fn prepare(&mut self, sigma: Conductivity) -> Result<bool>;
    fn cost(&mut self, sigma: Conductivity) -> Result<f64>;
    fn cost_and_gradient(&mut self, sigma: Conductivity) -> Result<(f64, [f64; 2])>;
    fn basis_index(&self) -> Option<usize>;
    fn counts(&self) -> SolveCounts;
}

fn norm2(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

/// 2×2 inverse-Hessian approximation.
#[derive(Clone, Copy, Debug)]
struct InverseHessian([[f64; 2]; 2]);

impl InverseHessian {
    fn scaled_identity(g: [f64; 2]) -> Self {
        let s = 1.0 / norm2(g).max(1e-300);
        Self([[s, 0.0], [0.0, s]])
    }

    fn apply(&self, g: [f64; 2]) -> [f64; 2] {
        let h = self.0;
        [h[0][0] * g[0] + h[0][1] * g[1], h[1][0] * g[0] + h[1][1] * g[1]]
    }

    /// Standard BFGS update; skipped when `sᵀy ≤ 1e-12`.
    fn update(&mut self, s: [f64; 2], y: [f64; 2]) -> bool {
        let sy = s[0] * y[0] + s[1] * y[1];
        if sy <= 1e-12 {
            return false;
        }
        let rho = 1.0 / sy;
        let hy = self.apply(y);
        let yhy = y[0] * hy[0] + y[1] * hy[1];
        let h = &mut self.0;
        for i in 0..2 {
            for j in 0..2 {
                h[i][j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
            }
        }
        true
    }
}

fn add(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

/// Log-barrier BFGS with backtracking line search. The outer loop shrinks
/// `μ ← ςμ`; the inner loop runs BFGS on `J − μ Σ log h_i`. The approximation
/// chosen by `prepare` stays fixed during a line search.
pub fn barrier_bfgs<O: Objective>(obj: &mut O, sigma0: Conductivity, opts: &OptimizerOptions) -> Result<OptimizationResult> {
    opts.validate()?;
    let cons = &opts.constraints;
    if !cons.is_feasible(sigma0) {
        return invalid(format!("initial guess {sigma0:?} is not strictly feasible"));
    }
    let start = Instant::now();
    let mut sigma = sigma0;
    let mut mu = opts.mu0;
    let mut k = 0;
    let mut history = Vec::new();
    let mut status = Status::MaxIterations;

    obj.prepare(sigma)?;
    let (mut j, mut gj) = obj.cost_and_gradient(sigma)?;

    'outer: while k < opts.max_iter {
        let mut phi = j + cons.barrier(sigma, mu);
        let mut grad = add(gj, cons.barrier_gradient(sigma, mu));
        let mut hinv = InverseHessian::scaled_identity(grad);
        let mut inner_converged = false;

        while k < opts.max_iter {
            history.push(IterateRecord {
                iter: k,
                sigma,
                cost: j,
                grad_norm: norm2(grad),
                basis_index: obj.basis_index(),
                mu,
            });
            if norm2(grad) < opts.grad_tol * j.abs().max(1.0) {
                inner_converged = true;
                break;
            }
            let mut v = hinv.apply(grad).map(|x| -x);
            let mut slope = v[0] * grad[0] + v[1] * grad[1];
            if !(slope < 0.0) {
                hinv = InverseHessian::scaled_identity(grad);
                v = hinv.apply(grad).map(|x| -x);
                slope = v[0] * grad[0] + v[1] * grad[1];
            }

            let mut gamma = 1.0;
            let mut accepted = None;
            for _ in 0..=opts.max_halvings {
                let trial = Conductivity::new(sigma.ml + gamma * v[0], sigma.mt + gamma * v[1]);
                if cons.is_feasible(trial) {
                    if let Ok(jt) = obj.cost(trial) {
                        let phit = jt + cons.barrier(trial, mu);
                        if phit.is_finite() && phit <= phi + opts.armijo * gamma * slope {
                            accepted = Some(trial);
                            break;
                        }
                    }
                }
                gamma *= 0.5;
            }
            let Some(next) = accepted else {
                status = Status::LineSearchFailed;
                break 'outer;
            };

            k += 1;
            let step = [next.ml - sigma.ml, next.mt - sigma.mt];
            let changed = obj.prepare(next)?;
            let (jn, gn) = obj.cost_and_gradient(next)?;
            let grad_next = add(gn, cons.barrier_gradient(next, mu));
            if !changed {
                hinv.update(step, [grad_next[0] - grad[0], grad_next[1] - grad[1]]);
            }
            sigma = next;
            j = jn;
            gj = gn;
            phi = j + cons.barrier(sigma, mu);
            grad = grad_next;
            if norm2(step) <= 1e-10 * (1.0 + norm2(sigma.as_array())) {
                inner_converged = true;
                break;
            }
        }

        if inner_converged && mu <= opts.mu_min {
            status = Status::Converged;
            break;
        }
        mu *= opts.shrink;
    }
    if status == Status::MaxIterations && history.last().map(|h| h.sigma) != Some(sigma) {
        history.push(IterateRecord {
            iter: k,
            sigma,
            cost: j,
            grad_norm: norm2(add(gj, cons.barrier_gradient(sigma, mu))),
            basis_index: obj.basis_index(),
            mu,
        });
    }
    Ok(OptimizationResult {
        sigma,
        status,
        history,
        counts: obj.counts(),
        wall_seconds: start.elapsed().as_secs_f64(),
        library_sizes: Vec::new(),
    })
}

/// Discrete adjoint of the full-order scheme for the misfit functional.
/// Returns `q^l` for `l = 0..=L` (index 0 unused).
pub fn solve_adjoint_full(
    model: &Monodomain,
    sigma: Conductivity,
    base: &TrajectoryRecord,
    meas: &MeasurementSet,
) -> Result<Vec<Vec<f64>>> {
    model.validate(sigma)?;
    let cfg = model.cfg;
    let steps = cfg.steps();
    if !base.has_every_step() || base.steps != steps {
        return invalid("full adjoint needs u and w at every step");
    }
    if meas.n != model.n() {
        return invalid("measurement mesh differs from the model");
    }
    let n = model.n();
    let p = model.params;
    let dt = cfg.dt;
    let beta = cfg.beta;
    let c = beta * p.cm / dt;
    let damp = p.gating_damping(dt);
    let dg_du = -p.beta2();
    let mass = &model.ops.lumped_mass;
    let mut solvers = model.step_solvers(sigma);

    let mut q = vec![vec![0.0; n]; steps + 1];
    let mut g1 = vec![0.0; n];
    let mut g2 = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut guess = vec![0.0; n];

    for l in (1..=steps).rev() {
        for i in 0..n {
            d[i] = 2.0 * g1[i] - g2[i];
        }
        for i in 1..=2 {
            let m = l + i;
            if m <= steps {
                let a = cfg.bdf_coefficients(m)[i];
                if a != 0.0 {
                    for (dv, (&qv, &mv)) in d.iter_mut().zip(q[m].iter().zip(mass)) {
                        *dv += c * a * mv * qv;
                    }
                }
            }
        }
        if let Some(k) = meas.marker(l) {
            for (&s, &um) in meas.sites.iter().zip(&meas.values[k]) {
                d[s] += base.u[l][s] - um;
            }
        }
        solvers.solve(l, &d, &mut guess)?;
        q[l].copy_from_slice(&guess);

        let w = &base.w[l];
        for i in 0..n {
            let ut = if l == 1 {
                base.u[0][i]
            } else {
                2.0 * base.u[l - 1][i] - base.u[l - 2][i]
            };
            let part = p.partials(ut, w[i]);
            let phi = -beta * mass[i] * q[l][i];
            r[i] = damp * (r[i] + dt * phi * part.di_dw);
            g2[i] = g1[i];
            g1[i] = phi * part.di_du - dg_du * r[i];
        }
    }
    Ok(q)
}

/// `DJ/Dσ_k = −Σ_l (q^l)ᵀ S_k u^l + (α/2)∂R/∂σ_k`.
pub fn gradient_full(
    model: &Monodomain,
    base: &TrajectoryRecord,
    q: &[Vec<f64>],
    reg: &Regularization,
    sigma: Conductivity,
) -> [f64; 2] {
    let mut g = reg.gradient(sigma);
    let n = model.n();
    let mut su = vec![0.0; n];
    for l in 1..q.len() {
        for (k, s) in [&model.ops.stiff_l, &model.ops.stiff_t].into_iter().enumerate() {
            s.mul_vec(&base.u[l], &mut su);
            g[k] -= q[l].iter().zip(&su).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    g
}

/// Full-order objective; caches the last primal solve.
pub struct FullObjective<'a> {
    pub model: Monodomain<'a>,
    pub meas: &'a MeasurementSet,
    pub reg: Regularization,
    pub u0: &'a [f64],
    pub w0: &'a [f64],
    cache: Option<(Conductivity, TrajectoryRecord)>,
    counts: SolveCounts,
}

impl<'a> FullObjective<'a> {
    pub fn new(model: Monodomain<'a>, meas: &'a MeasurementSet, reg: Regularization, u0: &'a [f64], w0: &'a [f64]) -> Self {
        Self {
            model,
            meas,
            reg,
            u0,
            w0,
            cache: None,
            counts: SolveCounts::default(),
        }
    }

    fn primal(&mut self, sigma: Conductivity) -> Result<&TrajectoryRecord> {
        if self.cache.as_ref().map(|c| c.0) != Some(sigma) {
            let cfg = self.model.cfg.with_stride(1);
            let model = Monodomain { cfg: &cfg, ..self.model };
            let tr = solve_monodomain(&model, sigma, self.u0, self.w0, Record::STATE)?;
            self.counts.forward += 1;
            self.cache = Some((sigma, tr));
        }
        Ok(&self.cache.as_ref().expect("cached").1)
    }
}

impl Objective for FullObjective<'_> {
    fn prepare(&mut self, _sigma: Conductivity) -> Result<bool> {
        Ok(false)
    }

    fn cost(&mut self, sigma: Conductivity) -> Result<f64> {
        let reg = self.reg;
        let meas = self.meas;
        cost_full(sigma, self.primal(sigma)?, meas, &reg)
    }

    fn cost_and_gradient(&mut self, sigma: Conductivity) -> Result<(f64, [f64; 2])> {
        let reg = self.reg;
        let meas = self.meas;
        let j = cost_full(sigma, self.primal(sigma)?, meas, &reg)?;
        let cfg = self.model.cfg.with_stride(1);
        let model = Monodomain { cfg: &cfg, ..self.model };
        let base = &self.cache.as_ref().expect("cached").1;
        let q = solve_adjoint_full(&model, sigma, base, meas)?;
        self.counts.backward += 1;
        Ok((j, gradient_full(&model, base, &q, &reg, sigma)))
    }

    fn basis_index(&self) -> Option<usize> {
        None
    }

    fn counts(&self) -> SolveCounts {
        self.counts.clone()
    }
}

/// One `(Z_u, Z_ion, DEIM)` triple and its generating parameter.
#[derive(Clone, Debug)]
pub struct BasisEntry {
    pub u: PodBasis,
    pub ion: PodBasis,
    pub deim: DeimOperator,
}

impl BasisEntry {
    pub fn new(u: PodBasis, ion: PodBasis) -> Result<Self> {
        if u.n() != ion.n() {
            return invalid("u and I_ion bases disagree on n");
        }
        let deim = DeimOperator::new(&ion)?;
        Ok(Self { u, ion, deim })
    }

    pub fn sigma_gen(&self) -> Conductivity {
        self.u.sigma_gen
    }
}

#[derive(Clone, Debug, Default)]
pub struct BasisLibrary {
    pub entries: Vec<BasisEntry>,
}

impl BasisLibrary {
    pub fn push(&mut self, entry: BasisEntry) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.u.n() != entry.u.n() {
                return invalid("all library bases must share n");
            }
        }
        if self.entries.iter().any(|e| e.sigma_gen() == entry.sigma_gen()) {
            return invalid(format!("library already has a basis generated at {:?}", entry.sigma_gen()));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn generators(&self) -> Vec<Conductivity> {
        self.entries.iter().map(BasisEntry::sigma_gen).collect()
    }
}

/// Distance in polar coordinates `√((ρ−ρ')² + (θ−θ')²)`.
pub fn polar_distance(a: Conductivity, b: Conductivity) -> f64 {
    let (ra, ta) = a.polar();
    let (rb, tb) = b.polar();
    (ra - rb).hypot(ta - tb)
}

/// Index of the nearest generator under the polar metric (lowest index on ties).
pub fn select_basis(generators: &[Conductivity], sigma: Conductivity) -> Result<usize> {
    if generators.is_empty() {
        return invalid("basis library is empty");
    }
    if !(sigma.ml > 0.0) {
        return invalid("σ_ml must be positive for the polar metric");
    }
    let mut best = (0, polar_distance(sigma, generators[0]));
    for (i, g) in generators.iter().enumerate().skip(1) {
        let d = polar_distance(sigma, *g);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

/// Shared full-order data for building reduced models.
#[derive(Clone, Copy)]
pub struct FullContext<'a> {
    pub model: Monodomain<'a>,
    pub u0: &'a [f64],
    pub w0: &'a [f64],
}

/// Reduced objective over a basis library; switches bases by polar distance.
pub struct ReducedObjective<'a> {
    ctx: FullContext<'a>,
    lib: &'a BasisLibrary,
    meas: &'a MeasurementSet,
    reg: Regularization,
    current: Option<usize>,
    built: HashMap<usize, (ReducedOperators, ReducedMeasurements)>,
    cache: Option<(usize, Conductivity, ReducedTrajectory)>,
    counts: SolveCounts,
    pub imports: usize,
}

impl<'a> ReducedObjective<'a> {
    pub fn new(ctx: FullContext<'a>, lib: &'a BasisLibrary, meas: &'a MeasurementSet, reg: Regularization) -> Result<Self> {
        if lib.is_empty() {
            return invalid("basis library is empty");
        }
        Ok(Self {
            ctx,
            lib,
            meas,
            reg,
            current: None,
            built: HashMap::new(),
            cache: None,
            counts: SolveCounts::default(),
            imports: 0,
        })
    }

    fn ops(&self) -> &(ReducedOperators, ReducedMeasurements) {
        &self.built[&self.current.expect("prepare before solving")]
    }

    fn primal(&mut self, sigma: Conductivity) -> Result<()> {
        let idx = self.current.expect("prepare before solving");
        if self.cache.as_ref().map(|c| (c.0, c.1)) != Some((idx, sigma)) {
            let tr = solve_reduced(&self.ops().0, sigma)?;
            self.counts.forward += 1;
            self.cache = Some((idx, sigma, tr));
        }
        Ok(())
    }
}

impl Objective for ReducedObjective<'_> {
    fn prepare(&mut self, sigma: Conductivity) -> Result<bool> {
        let idx = select_basis(&self.lib.generators(), sigma)?;
        if self.current == Some(idx) {
            return Ok(false);
        }
        if !self.built.contains_key(&idx) {
            let e = &self.lib.entries[idx];
            let m = self.ctx.model;
            let cfg = m.cfg.with_stride(1);
            let ro = build_reduced_operators(m.ops, &e.u, &e.deim, m.stimulus, m.params, &cfg, self.ctx.u0, self.ctx.w0)?;
            let rm = ReducedMeasurements::new(&e.u, self.meas)?;
            self.built.insert(idx, (ro, rm));
        }
        self.imports += 1;
        let changed = self.current.is_some();
        self.current = Some(idx);
        Ok(changed)
    }

    fn cost(&mut self, sigma: Conductivity) -> Result<f64> {
        self.primal(sigma)?;
        let (_, rm) = self.ops();
        reduced_cost(rm, &self.cache.as_ref().expect("cached").2, &self.reg, sigma)
    }

    fn cost_and_gradient(&mut self, sigma: Conductivity) -> Result<(f64, [f64; 2])> {
        self.primal(sigma)?;
        let (ro, rm) = self.ops();
        let tr = &self.cache.as_ref().expect("cached").2;
        let j = reduced_cost(rm, tr, &self.reg, sigma)?;
        let dual = solve_reduced_adjoint(ro, rm, sigma, tr)?;
        let g = reduced_gradient(ro, tr, &dual, &self.reg, sigma)?;
        self.counts.backward += 1;
        Ok((j, g))
    }

    fn basis_index(&self) -> Option<usize> {
        self.current
    }

    fn counts(&self) -> SolveCounts {
        self.counts.clone()
    }
}

pub fn optimize_full(
    sigma0: Conductivity,
    ctx: FullContext,
    meas: &MeasurementSet,
    opts: &OptimizerOptions,
) -> Result<OptimizationResult> {
    let mut obj = FullObjective::new(ctx.model, meas, opts.regularization, ctx.u0, ctx.w0);
    barrier_bfgs(&mut obj, sigma0, opts)
}

pub fn optimize_reduced(
    sigma0: Conductivity,
    ctx: FullContext,
    lib: &BasisLibrary,
    meas: &MeasurementSet,
    opts: &OptimizerOptions,
) -> Result<OptimizationResult> {
    let mut obj = ReducedObjective::new(ctx, lib, meas, opts.regularization)?;
    barrier_bfgs(&mut obj, sigma0, opts)
}

/// Basis sizes and snapshot thinning used when bases are built on the fly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisSpec {
    pub n_u: usize,
    pub n_ion: usize,
    /// Keep every `snapshot_stride`-th time step as a snapshot.
    pub snapshot_stride: usize,
    /// Snapshot horizon in ms; the model horizon when unset.
    pub snapshot_t_end: Option<f64>,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            n_u: 35,
            n_ion: 80,
            snapshot_stride: 1,
            snapshot_t_end: None,
        }
    }
}

/// Full-order solve at `sigma` followed by POD of `u` and `I_ion` and DEIM.
pub fn build_basis_entry(ctx: FullContext, sigma: Conductivity, spec: &BasisSpec) -> Result<BasisEntry> {
    let mut cfg = ctx.model.cfg.with_stride(spec.snapshot_stride.max(1));
    if let Some(t) = spec.snapshot_t_end {
        cfg.t_end = t;
    }
    let model = Monodomain { cfg: &cfg, ..ctx.model };
    let tr = solve_monodomain(&model, sigma, ctx.u0, ctx.w0, Record { u: true, w: false, iion: true })?;
    let su = SnapshotMatrix::from_frames(&tr.u, sigma, Field::U, true)?;
    let si = SnapshotMatrix::from_frames(&tr.iion, sigma, Field::Iion, true)?;
    let m = su.m();
    let zu = build_pod(&su, RankRule::Fixed(spec.n_u.min(m)))?;
    let zi = build_pod(&si, RankRule::Fixed(spec.n_ion.min(m)))?;
    BasisEntry::new(zu, zi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveOptions {
    pub cycles: usize,
    pub inner_max_iter: usize,
    pub basis: BasisSpec,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        Self {
            cycles: 5,
            inner_max_iter: 20,
            basis: BasisSpec::default(),
        }
    }
}

/// Alternates full-order snapshot generation at the current estimate with
/// reduced optimization over the growing library.
pub fn optimize_adaptive(
    sigma0: Conductivity,
    ctx: FullContext,
    meas: &MeasurementSet,
    opts: &OptimizerOptions,
    adaptive: &AdaptiveOptions,
) -> Result<OptimizationResult> {
    if adaptive.cycles == 0 || adaptive.inner_max_iter == 0 {
        return invalid("adaptive optimization needs at least one cycle and one iteration");
    }
    if !opts.constraints.is_feasible(sigma0) {
        return invalid(format!("initial guess {sigma0:?} is not strictly feasible"));
    }
    let start = Instant::now();
    let mut lib = BasisLibrary::default();
    let mut sigma = sigma0;
    let mut history = Vec::new();
    let mut counts = SolveCounts::default();
    let mut sizes = Vec::new();
    let mut status = Status::MaxIterations;
    let inner = OptimizerOptions {
        max_iter: adaptive.inner_max_iter,
        ..opts.clone()
    };
    for cycle in 0..adaptive.cycles {
        if lib.generators().contains(&sigma) {
            // the previous cycle did not move; a second basis at the same point adds nothing
            log::info!("adaptive cycle {cycle}: estimate unchanged, stopping");
            break;
        }
        lib.push(build_basis_entry(ctx, sigma, &adaptive.basis)?)?;
        counts.snapshot += 1;
        sizes.push(lib.len());
        let res = optimize_reduced(sigma, ctx, &lib, meas, &inner)?;
        counts.forward += res.counts.forward;
        counts.backward += res.counts.backward;
        let offset = history.len();
        history.extend(res.history.into_iter().map(|mut h| {
            h.iter += offset;
            h
        }));
        sigma = res.sigma;
        status = res.status;
    }
    Ok(OptimizationResult {
        sigma,
        status,
        history,
        counts,
        wall_seconds: start.elapsed().as_secs_f64(),
        library_sizes: sizes,
    })
}

/// Noisy synthetic observations of a full-order solve at `sigma_exact`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementProtocol {
    pub dt_snap: f64,
    pub noise_level: f64,
    pub seed: u64,
    pub noise: NoiseModel,
}

impl Default for MeasurementProtocol {
    fn default() -> Self {
        Self {
            dt_snap: 2.0,
            noise_level: 0.15,
            seed: 0,
            noise: NoiseModel::Multiplicative,
        }
    }
}

pub fn generate_measurements(
    ctx: FullContext,
    sigma_exact: Conductivity,
    sites: &[usize],
    protocol: &MeasurementProtocol,
) -> Result<MeasurementSet> {
    let cfg = ctx.model.cfg.with_stride(1);
    let model = Monodomain { cfg: &cfg, ..ctx.model };
    let tr = solve_monodomain(&model, sigma_exact, ctx.u0, ctx.w0, Record::U)?;
    let mut meas = MeasurementSet::from_trajectory(&tr, sites, protocol.dt_snap)?;
    meas.values = add_noise(&meas.values, protocol.noise_level, protocol.seed, protocol.noise)?;
    Ok(meas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{rest_state, SolveConfig, StimulusField, StimulusProtocol};
    use crate::ionic::IonicParams;
    use crate::mesh::{assemble, build_slab_mesh, AssembledOperators, Mesh};

    #[test]
    fn constraint_values_and_gradients() {
        let c = Constraints::default();
        let s = Conductivity::new(3.0, 1.0);
        assert_eq!(c.values(s), [2.0, 97.0, 0.95, 4.0]);
        assert!(c.is_feasible(s));
        assert!(!c.is_feasible(Conductivity::new(1.0, 1.0)));
        assert!(!c.is_feasible(Conductivity::new(7.5, 1.0)));
        let h = 1e-6;
        let g = c.barrier_gradient(s, 0.7);
        let fd0 = (c.barrier(Conductivity::new(3.0 + h, 1.0), 0.7) - c.barrier(Conductivity::new(3.0 - h, 1.0), 0.7)) / (2.0 * h);
        let fd1 = (c.barrier(Conductivity::new(3.0, 1.0 + h), 0.7) - c.barrier(Conductivity::new(3.0, 1.0 - h), 0.7)) / (2.0 * h);
        assert!((g[0] - fd0).abs() < 1e-6 && (g[1] - fd1).abs() < 1e-6);
    }

    #[test]
    fn basis_selection() {
        let gens = vec![Conductivity::new(2.0, 1.0), Conductivity::new(4.0, 1.0), Conductivity::new(4.0, 3.0)];
        assert_eq!(select_basis(&gens, gens[1]).unwrap(), 1);
        assert_eq!(select_basis(&gens[..1], Conductivity::new(6.0, 0.1)).unwrap(), 0);
        assert!(select_basis(&[], gens[0]).is_err());
        let q = Conductivity::new(4.5, 1.0);
        let brute = (0..3)
            .min_by(|&a, &b| polar_distance(q, gens[a]).total_cmp(&polar_distance(q, gens[b])))
            .unwrap();
        assert_eq!(select_basis(&gens, q).unwrap(), brute);
        // equal distances pick the first
        let tie = vec![Conductivity::new(1.0, 1.0), Conductivity::new(1.0, 1.0)];
        assert_eq!(select_basis(&tie, Conductivity::new(2.0, 1.0)).unwrap(), 0);
    }

    /// Minimizes a quadratic through the driver.
    struct Quadratic {
        target: [f64; 2],
        evals: usize,
    }

    impl Objective for Quadratic {
        fn prepare(&mut self, _: Conductivity) -> Result<bool> {
            Ok(false)
        }
        fn cost(&mut self, s: Conductivity) -> Result<f64> {
            self.evals += 1;
            Ok(50.0 * ((s.ml - self.target[0]).powi(2) + 4.0 * (s.mt - self.target[1]).powi(2)))
        }
        fn cost_and_gradient(&mut self, s: Conductivity) -> Result<(f64, [f64; 2])> {
            let j = self.cost(s)?;
            Ok((j, [100.0 * (s.ml - self.target[0]), 400.0 * (s.mt - self.target[1])]))
        }
        fn basis_index(&self) -> Option<usize> {
            None
        }
        fn counts(&self) -> SolveCounts {
            SolveCounts::default()
        }
    }

    #[test]
    fn driver_finds_interior_minimum_and_stays_feasible() {
        let mut q = Quadratic {
            target: [4.0, 1.5],
            evals: 0,
        };
        let opts = OptimizerOptions {
            max_iter: 200,
            ..Default::default()
        };
        let res = barrier_bfgs(&mut q, Conductivity::new(1.5, 1.0), &opts).unwrap();
        assert!((res.sigma.ml - 4.0).abs() < 1e-3 && (res.sigma.mt - 1.5).abs() < 1e-3, "{:?}", res.sigma);
        assert_eq!(res.status, Status::Converged);
        let cons = Constraints::default();
        assert!(res.history.iter().all(|h| cons.min_margin(h.sigma) > 0.0));
        // μ_k = μ0 ς^k along the history
        for h in &res.history {
            let k = (h.mu.log10()).round();
            assert!((h.mu - 10f64.powf(k)).abs() < 1e-12 * h.mu);
        }
    }

    #[test]
    fn driver_respects_boundary_minimum() {
        // unconstrained optimum violates σ_ml/σ_mt ≥ 1
        let mut q = Quadratic {
            target: [1.0, 2.0],
            evals: 0,
        };
        let res = barrier_bfgs(&mut q, Conductivity::new(3.0, 1.0), &OptimizerOptions::default()).unwrap();
        let cons = Constraints::default();
        assert!(res.history.iter().all(|h| cons.is_feasible(h.sigma)));
        assert!(cons.is_feasible(res.sigma));
        assert!(res.sigma.ml / res.sigma.mt < 1.01);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let mut q = Quadratic {
            target: [4.0, 1.5],
            evals: 0,
        };
        assert!(barrier_bfgs(&mut q, Conductivity::new(1.0, 2.0), &OptimizerOptions::default()).is_err());
    }

    struct Setup {
        mesh: Mesh,
        ops: AssembledOperators,
        stim: StimulusField,
        params: IonicParams,
        cfg: SolveConfig,
        u0: Vec<f64>,
        w0: Vec<f64>,
    }

    fn setup(res: [usize; 3], t_end: f64) -> Setup {
        let extent = [1.0, 1.0, 0.2];
        let mesh = build_slab_mesh(extent, res, [1.0, 0.0, 0.0]).unwrap();
        let ops = assemble(&mesh).unwrap();
        let stim = StimulusProtocol::slab_default(extent, 0.3).field(&mesh).unwrap();
        let params = IonicParams::default();
        let (u0, w0) = rest_state(mesh.n_nodes(), &params);
        Setup {
            mesh,
            ops,
            stim,
            params,
            cfg: SolveConfig {
                t_end,
                cg_tol: 1e-13,
                ..Default::default()
            },
            u0,
            w0,
        }
    }

    impl Setup {
        fn ctx(&self) -> FullContext<'_> {
            FullContext {
                model: Monodomain {
                    ops: &self.ops,
                    stimulus: &self.stim,
                    params: &self.params,
                    cfg: &self.cfg,
                },
                u0: &self.u0,
                w0: &self.w0,
            }
        }
    }

    fn clean_protocol(dt_snap: f64) -> MeasurementProtocol {
        MeasurementProtocol {
            dt_snap,
            noise_level: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn full_gradient_matches_central_differences() {
        let s = setup([4, 4, 1], 3.0);
        let sites: Vec<usize> = (0..s.mesh.n_nodes()).collect();
        let meas = generate_measurements(s.ctx(), Conductivity::new(4.0, 1.5), &sites, &clean_protocol(0.5)).unwrap();
        let mut obj = FullObjective::new(s.ctx().model, &meas, Regularization::default(), &s.u0, &s.w0);
        let h = 1e-3;
        for sigma in [Conductivity::new(2.5, 0.8), Conductivity::new(5.5, 2.5)] {
            let (_, g) = obj.cost_and_gradient(sigma).unwrap();
            for k in 0..2 {
                let shift = |d: f64| {
                    let mut a = sigma.as_array();
                    a[k] += d;
                    Conductivity::from_array(a)
                };
                let fd = (obj.cost(shift(h)).unwrap() - obj.cost(shift(-h)).unwrap()) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-4 * g[k].abs(), "σ={sigma:?} k={k}: {fd} vs {}", g[k]);
            }
        }
        let c = obj.counts();
        assert_eq!(c.backward, 2);
        assert_eq!(c.forward, 2 + 8);
    }

    #[test]
    fn full_inverse_recovers_clean_data() {
        let s = setup([4, 4, 1], 4.0);
        let sites: Vec<usize> = (0..s.mesh.n_nodes()).collect();
        let exact = Conductivity::new(3.0, 1.2);
        let meas = generate_measurements(s.ctx(), exact, &sites, &clean_protocol(0.5)).unwrap();
        let res = optimize_full(Conductivity::new(1.5, 1.0), s.ctx(), &meas, &OptimizerOptions::default()).unwrap();
        assert!((res.sigma.ml / exact.ml - 1.0).abs() < 0.02, "{:?}", res.sigma);
        assert!((res.sigma.mt / exact.mt - 1.0).abs() < 0.02, "{:?}", res.sigma);
        let cons = Constraints::default();
        assert!(res.history.iter().all(|h| cons.is_feasible(h.sigma)));
    }

    #[test]
    fn start_at_optimum_stays_put() {
        let s = setup([3, 3, 1], 2.0);
        let sites: Vec<usize> = (0..s.mesh.n_nodes()).collect();
        let sigma0 = Conductivity::new(2.0, 1.0);
        let meas = generate_measurements(s.ctx(), sigma0, &sites, &clean_protocol(0.5)).unwrap();
        let res = optimize_full(sigma0, s.ctx(), &meas, &OptimizerOptions::default()).unwrap();
        assert!(polar_distance(res.sigma, sigma0) < 1e-3, "{:?}", res.sigma);
    }

    #[test]
    fn reduced_and_adaptive_paths_run() {
        let s = setup([4, 4, 1], 3.0);
        let sites: Vec<usize> = (0..s.mesh.n_nodes()).collect();
        let exact = Conductivity::new(3.0, 1.2);
        let meas = generate_measurements(s.ctx(), exact, &sites, &clean_protocol(0.5)).unwrap();
        let spec = BasisSpec {
            n_u: 12,
            n_ion: 16,
            snapshot_stride: 1,
            snapshot_t_end: Some(2.5),
        };
        let mut lib = BasisLibrary::default();
        for g in [Conductivity::new(2.0, 1.0), Conductivity::new(3.5, 1.0)] {
            lib.push(build_basis_entry(s.ctx(), g, &spec).unwrap()).unwrap();
        }
        assert!(lib.push(build_basis_entry(s.ctx(), Conductivity::new(2.0, 1.0), &spec).unwrap()).is_err());
        let res = optimize_reduced(Conductivity::new(1.5, 1.0), s.ctx(), &lib, &meas, &OptimizerOptions::default()).unwrap();
        assert!(res.history.iter().all(|h| h.basis_index.is_some()));
        assert!(res.counts.forward >= res.counts.backward);

        let ad = AdaptiveOptions {
            cycles: 2,
            inner_max_iter: 5,
            basis: spec,
        };
        let res = optimize_adaptive(Conductivity::new(1.5, 1.0), s.ctx(), &meas, &OptimizerOptions::default(), &ad).unwrap();
        assert_eq!(res.library_sizes, (1..=res.library_sizes.len()).collect::<Vec<_>>());
        assert_eq!(res.counts.snapshot, res.library_sizes.len());
    }
}
