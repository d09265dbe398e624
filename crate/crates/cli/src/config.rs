use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cardiored_core::forward::StimulusProtocol;
use cardiored_core::inverse::{AdaptiveOptions, BasisSpec, MeasurementProtocol, OptimizerOptions};
use cardiored_core::mesh::{build_slab_mesh, load_mesh, Mesh};
use cardiored_core::sampling::{DoeGrid, PolarSamplingSpec};
use cardiored_core::{Conductivity, IonicParams, SolveConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MeshSpec {
    Slab {
        extent: [f64; 3],
        resolution: [usize; 3],
        #[serde(default = "default_fiber")]
        fiber_axis: [f64; 3],
    },
    File {
        path: PathBuf,
    },
}

fn default_fiber() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

impl Default for MeshSpec {
    /// The 24272-node slab.
    fn default() -> Self {
        MeshSpec::Slab {
            extent: [5.0, 5.0, 0.5],
            resolution: [73, 81, 3],
            fiber_axis: default_fiber(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardSpec {
    pub sigma: Conductivity,
    /// Steps between written frames.
    pub stride: usize,
}

impl Default for ForwardSpec {
    fn default() -> Self {
        Self {
            sigma: Conductivity::new(3.0, 1.0),
            stride: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementSpec {
    pub sigma_exact: Conductivity,
    /// Site grid on the top surface; defaults to 100×100 capped by the mesh.
    pub site_grid: Option<[usize; 2]>,
    pub protocol: MeasurementProtocol,
    /// Existing measurement file; defaults to `<out>/measurements.json`.
    pub path: Option<PathBuf>,
}

impl Default for MeasurementSpec {
    fn default() -> Self {
        Self {
            sigma_exact: Conductivity::new(4.5, 1.0),
            site_grid: None,
            protocol: MeasurementProtocol::default(),
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoeSpec {
    pub generators: Vec<Conductivity>,
    pub grid: DoeGrid,
    /// Number of equiangular bands drawn on the plots.
    pub bands: usize,
}

impl Default for DoeSpec {
    fn default() -> Self {
        Self {
            generators: vec![Conductivity::new(3.0, 0.35)],
            grid: DoeGrid::default(),
            bands: 3,
        }
    }
}

/// One JSON document describing a whole experiment. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mesh: MeshSpec,
    pub solve: SolveConfig,
    pub ionic: IonicParams,
    /// Defaults to corner and center pulses on slab meshes.
    pub stimulus: Option<StimulusProtocol>,
    pub forward: ForwardSpec,
    pub measurement: MeasurementSpec,
    pub sigma0: Conductivity,
    pub optimizer: OptimizerOptions,
    pub sampling: PolarSamplingSpec,
    pub basis: BasisSpec,
    pub adaptive: AdaptiveOptions,
    pub doe: DoeSpec,
    /// Basis archives; defaults to `<out>/bases`.
    pub bases_dir: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mesh: MeshSpec::default(),
            solve: SolveConfig::default(),
            ionic: IonicParams::default(),
            stimulus: None,
            forward: ForwardSpec::default(),
            measurement: MeasurementSpec::default(),
            sigma0: Conductivity::new(1.5, 1.0),
            optimizer: OptimizerOptions::default(),
            sampling: PolarSamplingSpec::default(),
            basis: BasisSpec {
                snapshot_t_end: Some(25.0),
                ..Default::default()
            },
            adaptive: AdaptiveOptions {
                basis: BasisSpec {
                    snapshot_t_end: Some(25.0),
                    ..Default::default()
                },
                ..Default::default()
            },
            doe: DoeSpec::default(),
            bases_dir: None,
            out: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Reads the config; relative paths are taken from the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let MeshSpec::File { path } = &mut cfg.mesh {
            resolve(path);
        }
        resolve(&mut cfg.out);
        if let Some(p) = &mut cfg.measurement.path {
            resolve(p);
        }
        if let Some(p) = &mut cfg.bases_dir {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.solve.validate()?;
        self.ionic.validate()?;
        self.optimizer.validate()?;
        self.sampling.validate()?;
        if let MeshSpec::Slab { extent, resolution, .. } = &self.mesh {
            if extent.iter().any(|&e| !(e > 0.0)) || resolution.contains(&0) {
                bail!("slab extent and resolution must be positive");
            }
        }
        if let MeshSpec::File { path } = &self.mesh {
            if !path.exists() {
                bail!("mesh file {} does not exist", path.display());
            }
        }
        if self.forward.stride == 0 {
            bail!("forward.stride must be at least 1");
        }
        if self.basis.n_u == 0 || self.basis.n_ion == 0 {
            bail!("basis dimensions must be positive");
        }
        for b in [&self.basis, &self.adaptive.basis] {
            if b.snapshot_t_end.is_some_and(|t| !(t >= self.solve.dt)) {
                bail!("snapshot_t_end must cover at least one step");
            }
        }
        if self.doe.bands == 0 {
            bail!("doe.bands must be at least 1");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (hex).
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_mesh(&self) -> Result<(Mesh, Option<[usize; 3]>)> {
        Ok(match &self.mesh {
            MeshSpec::Slab {
                extent,
                resolution,
                fiber_axis,
            } => (build_slab_mesh(*extent, *resolution, *fiber_axis)?, Some(*resolution)),
            MeshSpec::File { path } => (load_mesh(path)?, None),
        })
    }

    pub fn stimulus(&self) -> Result<StimulusProtocol> {
        match (&self.stimulus, &self.mesh) {
            (Some(s), _) => Ok(s.clone()),
            (None, MeshSpec::Slab { extent, .. }) => Ok(StimulusProtocol::slab_default(*extent, cardiored_core::forward::DEFAULT_STIMULUS_RADIUS)),
            (None, MeshSpec::File { .. }) => bail!("file meshes need an explicit `stimulus`"),
        }
    }

    pub fn measurements_path(&self) -> PathBuf {
        self.measurement.path.clone().unwrap_or_else(|| self.out.join("measurements.json"))
    }

    pub fn bases_dir(&self) -> PathBuf {
        self.bases_dir.clone().unwrap_or_else(|| self.out.join("bases"))
    }
}
