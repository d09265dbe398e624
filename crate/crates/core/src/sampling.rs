//! Polar Gaussian-node sampling of the conductivity plane and
//! domain-of-effectiveness maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::forward::{solve_monodomain, Conductivity, Monodomain, Record};
use crate::inverse::{BasisEntry, Constraints, FullContext};
use crate::rom::{build_reduced_operators, solve_reduced};

/// Per-band radial node count `n_ρ(i) = max(base − i, floor)` with 1-based `i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialCountRule {
    pub base: usize,
    pub floor: usize,
}

impl RadialCountRule {
    pub fn count(&self, band: usize) -> usize {
        self.base.saturating_sub(band).max(self.floor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolarSamplingSpec {
    pub theta_min: f64,
    pub theta_max: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub n_theta: usize,
    pub n_rho: RadialCountRule,
    /// Appended verbatim as `(ρ, θ)`.
    pub extra: Vec<(f64, f64)>,
}

impl Default for PolarSamplingSpec {
    fn default() -> Self {
        let theta_min = (1.0f64 / 14.0).atan();
        let theta_max = 1.2f64.atan();
        Self {
            theta_min,
            theta_max,
            rho_min: 1.5,
            rho_max: 6.5,
            n_theta: 4,
            n_rho: RadialCountRule { base: 6, floor: 3 },
            extra: vec![(1.3, 0.5 * (theta_min + theta_max))],
        }
    }
}

/// `x_max − (x_max − x_min) cos((k−1)π / (2(n−1)))` for `k = 1..=n`.
pub fn cosine_nodes(min: f64, max: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            if k + 1 == n {
                // cos(π/2) is not exactly zero in floating point
                max
            } else {
                max - (max - min) * (k as f64 * std::f64::consts::PI / (2.0 * (n - 1) as f64)).cos()
            }
        })
        .collect()
}

impl PolarSamplingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_min < self.theta_max) || !(self.rho_min < self.rho_max) {
            return invalid("sampling ranges must satisfy min < max");
        }
        if self.n_theta < 2 {
            return invalid("n_theta must be at least 2");
        }
        if (1..self.n_theta).any(|i| self.n_rho.count(i) < 2) {
            return invalid("every band needs at least two radial nodes");
        }
        Ok(())
    }

    pub fn theta_nodes(&self) -> Vec<f64> {
        cosine_nodes(self.theta_min, self.theta_max, self.n_theta)
    }

    /// Radial nodes of band `i` (1-based).
    pub fn rho_nodes(&self, band: usize) -> Vec<f64> {
        cosine_nodes(self.rho_min, self.rho_max, self.n_rho.count(band))
    }

    /// `Σ_i (n_ρ(i) − 1) + |extra|`.
    pub fn sample_count(&self) -> usize {
        (1..self.n_theta).map(|i| self.n_rho.count(i) - 1).sum::<usize>() + self.extra.len()
    }
}

/// Midpoints of consecutive angular nodes paired with midpoints of that
/// band's radial nodes, followed by the extra points.
pub fn polar_samples(spec: &PolarSamplingSpec) -> Result<Vec<Conductivity>> {
    spec.validate()?;
    let theta = spec.theta_nodes();
    let mut out = Vec::with_capacity(spec.sample_count());
    for i in 1..spec.n_theta {
        let t = 0.5 * (theta[i - 1] + theta[i]);
        let rho = spec.rho_nodes(i);
        for r in rho.windows(2) {
            out.push(Conductivity::from_polar(0.5 * (r[0] + r[1]), t));
        }
    }
    out.extend(spec.extra.iter().map(|&(r, t)| Conductivity::from_polar(r, t)));

    let cons = Constraints::default();
    let outside: Vec<_> = out.iter().filter(|s| !cons.is_feasible(**s)).collect();
    if !outside.is_empty() {
        log::warn!("samples outside the admissible set: {outside:?}");
    }
    Ok(out)
}

/// `k + 1` equi-spaced angle boundaries over `[θ_min, θ_max]`.
pub fn equiangular_partition(theta_min: f64, theta_max: f64, k: usize) -> Result<Vec<f64>> {
    if k == 0 || !(theta_min < theta_max) {
        return invalid("partition needs k ≥ 1 and θ_min < θ_max");
    }
    Ok((0..=k)
        .map(|i| {
            if i == k {
                theta_max
            } else {
                theta_min + (theta_max - theta_min) * i as f64 / k as f64
            }
        })
        .collect())
}

/// Band of `theta` for the given boundaries; the outer bands extend to ±∞.
pub fn band_of(boundaries: &[f64], theta: f64) -> usize {
    let k = boundaries.len().saturating_sub(1).max(1);
    boundaries[1..boundaries.len().saturating_sub(1)]
        .iter()
        .take_while(|&&b| theta >= b)
        .count()
        .min(k - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DoeClass {
    Black,
    Cyan,
    White,
}

impl DoeClass {
    pub const BLACK_MAX: f64 = 0.002;
    pub const CYAN_MAX: f64 = 0.005;

    pub fn classify(e: f64) -> Self {
        if e <= Self::BLACK_MAX {
            DoeClass::Black
        } else if e <= Self::CYAN_MAX {
            DoeClass::Cyan
        } else {
            DoeClass::White
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DoeClass::Black => "black",
            DoeClass::Cyan => "cyan",
            DoeClass::White => "white",
        }
    }

    pub fn in_domain(self) -> bool {
        self != DoeClass::White
    }
}

/// Cartesian test grid, endpoints included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoeGrid {
    pub ml: [f64; 2],
    pub mt: [f64; 2],
    pub count: [usize; 2],
}

impl Default for DoeGrid {
    fn default() -> Self {
        Self {
            ml: [1.0, 7.0],
            mt: [0.1, 5.0],
            count: [16, 16],
        }
    }
}

impl DoeGrid {
    pub fn points(&self) -> Result<Vec<Conductivity>> {
        if self.count.contains(&0) {
            return invalid("DOE grid needs at least one point per axis");
        }
        if !(self.ml[0] > 0.0 && self.mt[0] > 0.0 && self.ml[0] <= self.ml[1] && self.mt[0] <= self.mt[1]) {
            return invalid("DOE grid must lie in the positive quadrant");
        }
        let axis = |r: [f64; 2], n: usize, k: usize| {
            if n == 1 {
                0.5 * (r[0] + r[1])
            } else {
                r[0] + (r[1] - r[0]) * k as f64 / (n - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(self.count[0] * self.count[1]);
        for j in 0..self.count[1] {
            for i in 0..self.count[0] {
                out.push(Conductivity::new(axis(self.ml, self.count[0], i), axis(self.mt, self.count[1], j)));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoePoint {
    pub sigma: Conductivity,
    /// `None` when either solve failed.
    pub error: Option<f64>,
    pub failure: Option<String>,
}

impl DoePoint {
    pub fn class(&self) -> Option<DoeClass> {
        self.error.map(DoeClass::classify)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoeMap {
    pub sigma_gen: Conductivity,
    pub points: Vec<DoePoint>,
}

impl DoeMap {
    /// Share of the in-domain points (`e ≤ 0.005`) lying in the angular band
    /// of the generator; `None` if no point is in-domain.
    pub fn in_band_fraction(&self, boundaries: &[f64]) -> Option<f64> {
        let band = band_of(boundaries, self.sigma_gen.polar().1);
        let dom: Vec<_> = self.points.iter().filter(|p| p.class().is_some_and(DoeClass::in_domain)).collect();
        if dom.is_empty() {
            return None;
        }
        let inside = dom.iter().filter(|p| band_of(boundaries, p.sigma.polar().1) == band).count();
        Some(inside as f64 / dom.len() as f64)
    }

    /// CSV with header `sigma_ml,sigma_mt,e,class`; failed points get `nan,failed`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sigma_ml,sigma_mt,e,class\n");
        for p in &self.points {
            match p.error {
                Some(e) => s.push_str(&format!("{},{},{:e},{}\n", p.sigma.ml, p.sigma.mt, e, DoeClass::classify(e).name())),
                None => s.push_str(&format!("{},{},nan,failed\n", p.sigma.ml, p.sigma.mt)),
            }
        }
        s
    }
}

/// Relative space-time error `Σ_l ‖ū + Z u_r^l − u^l‖² / Σ_l ‖u^l‖²` over steps `1..=L`.
pub fn reduced_relative_error(ctx: FullContext, entry: &BasisEntry, ro: &crate::rom::ReducedOperators, sigma: Conductivity) -> Result<f64> {
    let cfg = ctx.model.cfg.with_stride(1);
    let model = Monodomain { cfg: &cfg, ..ctx.model };
    let full = solve_monodomain(&model, sigma, ctx.u0, ctx.w0, Record::U)?;
    let red = solve_reduced(ro, sigma)?;
    let (mut num, mut den) = (0.0, 0.0);
    for l in 1..=full.steps {
        let lifted = entry.u.lift(&red.u_r[l]);
        for (a, b) in lifted.iter().zip(&full.u[l]) {
            num += (a - b).powi(2);
            den += b * b;
        }
    }
    if !(den > 0.0) {
        return invalid("full-order trajectory is identically zero");
    }
    Ok(num / den)
}

/// Evaluates `e(σ)` on every grid point in parallel. Solver failures are
/// recorded per point.
pub fn doe_map(ctx: FullContext, entry: &BasisEntry, grid: &[Conductivity]) -> Result<DoeMap> {
    if grid.iter().any(|s| !(s.ml > 0.0 && s.mt > 0.0)) {
        return invalid("DOE grid must lie in the positive quadrant");
    }
    let m = ctx.model;
    let cfg = m.cfg.with_stride(1);
    let ro = build_reduced_operators(m.ops, &entry.u, &entry.deim, m.stimulus, m.params, &cfg, ctx.u0, ctx.w0)?;
    let points = grid
        .par_iter()
        .map(|&sigma| match reduced_relative_error(ctx, entry, &ro, sigma) {
            Ok(e) => DoePoint {
                sigma,
                error: Some(e),
                failure: None,
            },
            Err(err) => DoePoint {
                sigma,
                error: None,
                failure: Some(err.to_string()),
            },
        })
        .collect();
    Ok(DoeMap {
        sigma_gen: entry.sigma_gen(),
        points,
    })
}
