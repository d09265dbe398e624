//! Observation sites, snapshot markers, synthetic noise and the misfit functional.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::forward::{Conductivity, TrajectoryRecord};
use crate::mesh::{nearest_node, Mesh};

/// Potentials observed at `sites` on the marked steps `every, 2·every, …`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub n: usize,
    /// Sorted, distinct node indices (the diagonal of `X_site`).
    pub sites: Vec<usize>,
    pub dt: f64,
    pub dt_snap: f64,
    /// Marked step indices, all positive multiples of `dt_snap/dt`.
    pub steps: Vec<usize>,
    /// One row per marked step, one value per site.
    pub values: Vec<Vec<f64>>,
}

/// Number of time steps between observations.
pub fn snap_interval(dt: f64, dt_snap: f64) -> Result<usize> {
    if !(dt > 0.0 && dt_snap >= dt) {
        return invalid(format!("need 0 < dt ≤ dt_snap, got dt={dt}, dt_snap={dt_snap}"));
    }
    let k = (dt_snap / dt).round();
    if (k * dt - dt_snap).abs() > 1e-9 * dt_snap {
        return invalid(format!("dt_snap={dt_snap} is not a multiple of dt={dt}"));
    }
    Ok(k as usize)
}

impl MeasurementSet {
    /// Samples a trajectory (which must hold every marked frame) at the sites.
    pub fn from_trajectory(traj: &TrajectoryRecord, sites: &[usize], dt_snap: f64) -> Result<Self> {
        let every = snap_interval(traj.dt, dt_snap)?;
        let n = traj.u.first().map_or(0, Vec::len);
        let mut sites = sites.to_vec();
        sites.sort_unstable();
        sites.dedup();
        if sites.iter().any(|&s| s >= n) {
            return invalid("measurement site outside the mesh");
        }
        let steps: Vec<usize> = (1..=traj.steps / every).map(|k| k * every).collect();
        let mut values = Vec::with_capacity(steps.len());
        for &l in &steps {
            let Some(u) = traj.u_at(l) else {
                return invalid(format!("trajectory has no frame at step {l}"));
            };
            values.push(sites.iter().map(|&s| u[s]).collect());
        }
        Ok(Self {
            n,
            sites,
            dt: traj.dt,
            dt_snap,
            steps,
            values,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let every = snap_interval(self.dt, self.dt_snap)?;
        if self.steps.iter().any(|&l| l == 0 || l % every != 0) {
            return invalid("snapshot markers must sit on positive multiples of dt_snap/dt");
        }
        if self.values.len() != self.steps.len() || self.values.iter().any(|v| v.len() != self.sites.len()) {
            return invalid("every marked step needs one value per site");
        }
        if self.sites.windows(2).any(|w| w[0] >= w[1]) || self.sites.last().is_some_and(|&s| s >= self.n) {
            return invalid("sites must be sorted, distinct and inside the mesh");
        }
        Ok(())
    }

    /// Index into `values` when step `l` is marked.
    pub fn marker(&self, l: usize) -> Option<usize> {
        self.steps.binary_search(&l).ok()
    }

    /// Diagonal of `X_site` as 0/1 values.
    pub fn mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n];
        for &s in &self.sites {
            m[s] = 1.0;
        }
        m
    }

    pub fn last_step(&self) -> usize {
        self.steps.last().copied().unwrap_or(0)
    }
}

/// A `gx × gy` grid on the top face of the mesh bounding box, snapped to the
/// nearest node (duplicates removed).
pub fn surface_grid_sites(mesh: &Mesh, gx: usize, gy: usize) -> Result<Vec<usize>> {
    if gx == 0 || gy == 0 {
        return invalid("site grid needs at least one point per direction");
    }
    let (lo, hi) = mesh.bounds();
    let coord = |k: usize, count: usize, a: f64, b: f64| {
        if count == 1 {
            0.5 * (a + b)
        } else {
            a + (b - a) * k as f64 / (count - 1) as f64
        }
    };
    let mut sites = Vec::with_capacity(gx * gy);
    for j in 0..gy {
        for i in 0..gx {
            let p = [coord(i, gx, lo[0], hi[0]), coord(j, gy, lo[1], hi[1]), hi[2]];
            sites.push(nearest_node(mesh, p));
        }
    }
    sites.sort_unstable();
    sites.dedup();
    Ok(sites)
}

/// Default site grid: 100 × 100, reduced to the node count per side on coarse meshes.
pub fn default_site_grid(mesh: &Mesh, resolution: [usize; 3]) -> Result<Vec<usize>> {
    let gx = (resolution[0] + 1).min(100);
    let gy = (resolution[1] + 1).min(100);
    surface_grid_sites(mesh, gx, gy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    /// `u·(1 + level·η)`.
    Multiplicative,
    /// `u + level·scale·η`.
    Additive { scale: f64 },
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::Multiplicative
    }
}

/// Adds i.i.d. `η ~ U(−1, 1)` noise, one draw per site per frame in row order.
pub fn add_noise(values: &[Vec<f64>], level: f64, seed: u64, model: NoiseModel) -> Result<Vec<Vec<f64>>> {
    if !(level >= 0.0) {
        return invalid("noise level must be non-negative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(values
        .iter()
        .map(|row| {
            row.iter()
                .map(|&u| {
                    let eta: f64 = rng.random_range(-1.0..=1.0);
                    match model {
                        NoiseModel::Multiplicative => u * (1.0 + level * eta),
                        NoiseModel::Additive { scale } => u + level * scale * eta,
                    }
                })
                .collect()
        })
        .collect())
}

/// `(α/2)·R(σ)` with the Tikhonov choice `R = ‖σ − σ_prior‖²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Regularization {
    pub alpha: f64,
    pub prior: Conductivity,
}

impl Default for Regularization {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            prior: Conductivity::new(0.0, 0.0),
        }
    }
}

impl Regularization {
    pub fn value(&self, s: Conductivity) -> f64 {
        0.5 * self.alpha * ((s.ml - self.prior.ml).powi(2) + (s.mt - self.prior.mt).powi(2))
    }

    pub fn gradient(&self, s: Conductivity) -> [f64; 2] {
        [self.alpha * (s.ml - self.prior.ml), self.alpha * (s.mt - self.prior.mt)]
    }
}

/// `½ Σ_l χ^l (u^l − u_meas^l)ᵀ X_site (u^l − u_meas^l) + (α/2)R(σ)`.
pub fn cost_full(sigma: Conductivity, traj: &TrajectoryRecord, meas: &MeasurementSet, reg: &Regularization) -> Result<f64> {
    let mut j = 0.0;
    for (k, &l) in meas.steps.iter().enumerate() {
        let Some(u) = traj.u_at(l) else {
            return invalid(format!("trajectory has no frame at marked step {l}"));
        };
        if u.len() != meas.n {
            return invalid("trajectory length differs from the measurement mesh");
        }
        for (&s, &m) in meas.sites.iter().zip(&meas.values[k]) {
            j += 0.5 * (u[s] - m).powi(2);
        }
    }
    Ok(j + reg.value(sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_slab_mesh;

    fn traj(frames: Vec<Vec<f64>>, dt: f64) -> TrajectoryRecord {
        TrajectoryRecord {
            dt,
            steps: frames.len() - 1,
            stride: 1,
            u: frames,
            ..Default::default()
        }
    }

    #[test]
    fn frame_count_follows_snap_interval() {
        let t = traj(vec![vec![0.0; 4]; 601], 0.05);
        let m = MeasurementSet::from_trajectory(&t, &[0, 2], 2.0).unwrap();
        assert_eq!(m.steps.len(), 15);
        assert_eq!(m.steps[0], 40);
        assert_eq!(m.last_step(), 600);
        m.validate().unwrap();
        assert!(snap_interval(0.05, 0.07).is_err());
    }

    #[test]
    fn cost_cases() {
        let sig = Conductivity::new(3.0, 1.0);
        let t = traj(vec![vec![0.0, 1.0], vec![2.0, 3.0]], 1.0);
        let m = MeasurementSet::from_trajectory(&t, &[1], 1.0).unwrap();
        let reg = Regularization::default();
        assert_eq!(cost_full(sig, &t, &m, &reg).unwrap(), 0.0);

        let mut off = m.clone();
        off.values[0][0] += 0.5;
        assert!((cost_full(sig, &t, &off, &reg).unwrap() - 0.125).abs() < 1e-15);

        let empty = MeasurementSet {
            sites: vec![],
            values: vec![vec![]],
            ..m.clone()
        };
        let tik = Regularization {
            alpha: 2.0,
            prior: Conductivity::new(1.0, 1.0),
        };
        assert!((cost_full(sig, &t, &empty, &tik).unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn missing_frames_are_rejected() {
        let t = traj(vec![vec![0.0; 2]; 5], 1.0);
        let m = MeasurementSet::from_trajectory(&t, &[0], 2.0).unwrap();
        let short = traj(vec![vec![0.0; 2]; 3], 1.0);
        assert!(cost_full(Conductivity::new(1.0, 1.0), &short, &m, &Regularization::default()).is_err());
    }

    #[test]
    fn noise_is_bounded_and_deterministic() {
        let v = vec![vec![-85.0; 50]; 3];
        assert_eq!(add_noise(&v, 0.0, 1, NoiseModel::Multiplicative).unwrap(), v);
        let a = add_noise(&v, 0.15, 42, NoiseModel::Multiplicative).unwrap();
        let b = add_noise(&v, 0.15, 42, NoiseModel::Multiplicative).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|&x| (-97.75..=-72.25).contains(&x)));
        assert!(a.iter().flatten().any(|&x| x != -85.0));
        assert!(add_noise(&v, -0.1, 1, NoiseModel::Multiplicative).is_err());
        let c = add_noise(&v, 0.1, 42, NoiseModel::Additive { scale: 10.0 }).unwrap();
        assert!(c.iter().flatten().all(|&x| (-86.0..=-84.0).contains(&x)));
    }

    #[test]
    fn surface_sites_lie_on_top() {
        let mesh = build_slab_mesh([1.0, 1.0, 0.5], [4, 4, 2], [1.0, 0.0, 0.0]).unwrap();
        let sites = surface_grid_sites(&mesh, 5, 5).unwrap();
        assert_eq!(sites.len(), 25);
        assert!(sites.iter().all(|&s| (mesh.nodes[s][2] - 0.5).abs() < 1e-12));
        let coarse = surface_grid_sites(&mesh, 10, 10).unwrap();
        assert_eq!(coarse.len(), 25);
    }
}
