use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cardiored_core::archive::{entry_to_bytes, load_entry};
use cardiored_core::forward::{rest_state, solve_monodomain, Monodomain, Record, StimulusField};
use cardiored_core::inverse::{
    build_basis_entry, generate_measurements, optimize_adaptive, optimize_full, optimize_reduced, BasisLibrary,
    FullContext, MeasurementProtocol, OptimizationResult,
};
use cardiored_core::measure::{default_site_grid, surface_grid_sites, MeasurementSet};
use cardiored_core::mesh::{assemble, AssembledOperators, Mesh};
use cardiored_core::sampling::{doe_map, equiangular_partition, polar_samples, DoeMap};
use cardiored_core::{Conductivity, SolveConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::output::{write_atomic, write_csv, write_json, Meta};

/// Assembled model shared by all commands.
pub struct Setup {
    pub mesh: Mesh,
    pub resolution: Option<[usize; 3]>,
    pub ops: AssembledOperators,
    pub stimulus: StimulusField,
    pub cfg: ExperimentConfig,
    pub u0: Vec<f64>,
    pub w0: Vec<f64>,
    pub meta: Meta,
}

impl Setup {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let (mesh, resolution) = cfg.build_mesh()?;
        let ops = assemble(&mesh)?;
        let stimulus = cfg.stimulus()?.field(&mesh)?;
        let (u0, w0) = rest_state(mesh.n_nodes(), &cfg.ionic);
        log::info!("mesh: {} nodes, {} tets", mesh.n_nodes(), mesh.n_tets());
        Ok(Self {
            meta: Meta::new(cfg.hash()),
            mesh,
            resolution,
            ops,
            stimulus,
            cfg,
            u0,
            w0,
        })
    }

    pub fn ctx<'a>(&'a self, solve: &'a SolveConfig) -> FullContext<'a> {
        FullContext {
            model: Monodomain {
                ops: &self.ops,
                stimulus: &self.stimulus,
                params: &self.cfg.ionic,
                cfg: solve,
            },
            u0: &self.u0,
            w0: &self.w0,
        }
    }

    fn out(&self) -> &Path {
        &self.cfg.out
    }
}

#[derive(Serialize)]
struct ForwardSummary<'a> {
    meta: &'a Meta,
    sigma: Conductivity,
    n_nodes: usize,
    steps: usize,
    frames: usize,
    linear_iterations: usize,
    wall_seconds: f64,
}

pub fn forward(setup: &Setup) -> Result<()> {
    let solve = setup.cfg.solve.with_stride(setup.cfg.forward.stride);
    let ctx = setup.ctx(&solve);
    let sigma = setup.cfg.forward.sigma;
    let start = Instant::now();
    let tr = solve_monodomain(&ctx.model, sigma, ctx.u0, ctx.w0, Record::U)?;
    let wall = start.elapsed().as_secs_f64();

    let dir = setup.out().join("forward");
    let mut body = String::from("step,t");
    for i in 0..setup.mesh.n_nodes() {
        write!(body, ",u{i}").unwrap();
    }
    body.push('\n');
    for (step, u) in tr.frame_steps().zip(&tr.u) {
        write!(body, "{step},{}", step as f64 * tr.dt).unwrap();
        for v in u {
            write!(body, ",{v}").unwrap();
        }
        body.push('\n');
    }
    write_csv(&dir.join("u.csv"), &setup.meta, &body)?;
    write_json(
        &dir.join("summary.json"),
        &ForwardSummary {
            meta: &setup.meta,
            sigma,
            n_nodes: setup.mesh.n_nodes(),
            steps: tr.steps,
            frames: tr.u.len(),
            linear_iterations: tr.linear_iterations,
            wall_seconds: wall,
        },
    )?;
    println!("forward: {} frames written to {}", tr.u.len(), dir.display());
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeasurementFile {
    pub meta: Meta,
    pub sigma_exact: Conductivity,
    pub protocol: MeasurementProtocol,
    pub set: MeasurementSet,
}

pub fn measure(setup: &Setup) -> Result<()> {
    let spec = &setup.cfg.measurement;
    spec.sigma_exact.validate()?;
    if !setup.cfg.optimizer.constraints.is_feasible(spec.sigma_exact) {
        bail!("sigma_exact {:?} is outside the admissible set", spec.sigma_exact);
    }
    let sites = match (spec.site_grid, setup.resolution) {
        (Some([gx, gy]), _) => surface_grid_sites(&setup.mesh, gx, gy)?,
        (None, Some(res)) => default_site_grid(&setup.mesh, res)?,
        (None, None) => surface_grid_sites(&setup.mesh, 100, 100)?,
    };
    let set = generate_measurements(setup.ctx(&setup.cfg.solve), spec.sigma_exact, &sites, &spec.protocol)?;
    let path = setup.cfg.measurements_path();
    write_json(
        &path,
        &MeasurementFile {
            meta: setup.meta.clone(),
            sigma_exact: spec.sigma_exact,
            protocol: spec.protocol.clone(),
            set,
        },
    )?;
    println!("measure: {} sites written to {}", sites.len(), path.display());
    Ok(())
}

pub fn load_measurements(path: &Path) -> Result<MeasurementFile> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading measurements {} (run `cardiored measure` first)", path.display()))?;
    let file: MeasurementFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    file.set.validate()?;
    Ok(file)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasisIndexEntry {
    pub index: usize,
    pub sigma_gen: Conductivity,
    pub file: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasisIndex {
    pub meta: Meta,
    pub n_u: usize,
    pub n_ion: usize,
    pub entries: Vec<BasisIndexEntry>,
}

pub fn bases(setup: &Setup) -> Result<()> {
    let samples = polar_samples(&setup.cfg.sampling)?;
    let ctx = setup.ctx(&setup.cfg.solve);
    let dir = setup.cfg.bases_dir();
    let entries: Vec<BasisIndexEntry> = samples
        .par_iter()
        .enumerate()
        .map(|(index, &sigma)| {
            let file = format!("basis_{index:03}.podb");
            let built = build_basis_entry(ctx, sigma, &setup.cfg.basis)
                .map_err(anyhow::Error::from)
                .and_then(|e| write_atomic(&dir.join(&file), &entry_to_bytes(&e)?));
            match built {
                Ok(()) => BasisIndexEntry {
                    index,
                    sigma_gen: sigma,
                    file: Some(file),
                    error: None,
                },
                Err(err) => {
                    log::error!("sample {index} at {sigma:?} failed: {err:#}");
                    BasisIndexEntry {
                        index,
                        sigma_gen: sigma,
                        file: None,
                        error: Some(format!("{err:#}")),
                    }
                }
            }
        })
        .collect();
    let ok = entries.iter().filter(|e| e.file.is_some()).count();
    write_json(
        &dir.join("index.json"),
        &BasisIndex {
            meta: setup.meta.clone(),
            n_u: setup.cfg.basis.n_u,
            n_ion: setup.cfg.basis.n_ion,
            entries,
        },
    )?;
    println!("bases: {ok}/{} archives written to {}", samples.len(), dir.display());
    if ok == 0 {
        bail!("no basis could be built");
    }
    Ok(())
}

pub fn load_library(dir: &Path, n: usize) -> Result<BasisLibrary> {
    let index_path = dir.join("index.json");
    if !index_path.exists() {
        bail!("no basis library at {} (run `cardiored bases` first)", dir.display());
    }
    let index: BasisIndex = serde_json::from_str(&fs::read_to_string(&index_path)?)
        .with_context(|| format!("parsing {}", index_path.display()))?;
    let mut lib = BasisLibrary::default();
    for e in index.entries {
        if let Some(file) = e.file {
            let path = dir.join(&file);
            let entry = load_entry(&path).with_context(|| format!("loading {}", path.display()))?;
            if entry.u.n() != n {
                bail!("{} was built for {} nodes, mesh has {n}", path.display(), entry.u.n());
            }
            lib.push(entry)?;
        }
    }
    if lib.is_empty() {
        bail!("basis library at {} is empty", dir.display());
    }
    Ok(lib)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Full,
    Reduced,
    Adaptive,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Reduced => "reduced",
            Mode::Adaptive => "adaptive",
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct EstimateSummary {
    pub meta: Meta,
    pub mode: Mode,
    pub sigma0: Conductivity,
    pub sigma_exact: Conductivity,
    pub sigma_estimated: Conductivity,
    pub relative_error: [f64; 2],
    pub status: cardiored_core::inverse::Status,
    pub iterations: usize,
    pub forward_solves: usize,
    pub backward_solves: usize,
    pub snapshot_solves: usize,
    pub library_sizes: Vec<usize>,
    pub wall_seconds: f64,
    /// Wall time relative to a full-order estimate found in the same output directory.
    pub time_percent_of_full: Option<f64>,
}

fn estimate_dir(out: &Path, mode: Mode) -> PathBuf {
    out.join(format!("estimate_{}", mode.name()))
}

pub fn estimate(setup: &Setup, mode: Mode) -> Result<()> {
    let meas = load_measurements(&setup.cfg.measurements_path())?;
    let n = setup.mesh.n_nodes();
    if meas.set.n != n {
        bail!("measurements were taken on {} nodes, mesh has {n}", meas.set.n);
    }
    if (meas.set.dt - setup.cfg.solve.dt).abs() > 1e-12 {
        bail!("measurement dt {} differs from solve.dt {}", meas.set.dt, setup.cfg.solve.dt);
    }
    let ctx = setup.ctx(&setup.cfg.solve);
    let opts = &setup.cfg.optimizer;
    let sigma0 = setup.cfg.sigma0;
    let res: OptimizationResult = match mode {
        Mode::Full => optimize_full(sigma0, ctx, &meas.set, opts)?,
        Mode::Reduced => {
            let start = Instant::now();
            let lib = load_library(&setup.cfg.bases_dir(), n)?;
            let mut r = optimize_reduced(sigma0, ctx, &lib, &meas.set, opts)?;
            // basis import is part of the online cost
            r.wall_seconds = start.elapsed().as_secs_f64();
            r
        }
        Mode::Adaptive => optimize_adaptive(sigma0, ctx, &meas.set, opts, &setup.cfg.adaptive)?,
    };

    let full_time = if mode == Mode::Full {
        None
    } else {
        fs::read_to_string(estimate_dir(setup.out(), Mode::Full).join("summary.json"))
            .ok()
            .and_then(|s| serde_json::from_str::<EstimateSummary>(&s).ok())
            .map(|s| s.wall_seconds)
    };
    let exact = meas.sigma_exact;
    let est = res.sigma;
    let summary = EstimateSummary {
        meta: setup.meta.clone(),
        mode,
        sigma0,
        sigma_exact: exact,
        sigma_estimated: est,
        relative_error: [(est.ml - exact.ml).abs() / exact.ml, (est.mt - exact.mt).abs() / exact.mt],
        status: res.status,
        iterations: res.history.last().map_or(0, |h| h.iter),
        forward_solves: res.counts.forward,
        backward_solves: res.counts.backward,
        snapshot_solves: res.counts.snapshot,
        library_sizes: res.library_sizes.clone(),
        wall_seconds: res.wall_seconds,
        time_percent_of_full: full_time.filter(|&t| t > 0.0).map(|t| 100.0 * res.wall_seconds / t),
    };
    let dir = estimate_dir(setup.out(), mode);
    write_json(&dir.join("summary.json"), &summary)?;
    let mut body = String::from("iter,sigma_ml,sigma_mt,cost,grad_norm,basis,mu\n");
    for h in &res.history {
        let basis = h.basis_index.map_or(String::new(), |b| b.to_string());
        writeln!(body, "{},{},{},{:e},{:e},{basis},{:e}", h.iter, h.sigma.ml, h.sigma.mt, h.cost, h.grad_norm, h.mu).unwrap();
    }
    write_csv(&dir.join("history.csv"), &setup.meta, &body)?;
    println!(
        "estimate ({}): sigma = [{:.4}, {:.4}], status {:?}, {} fwd | {} bwd",
        mode.name(),
        est.ml,
        est.mt,
        res.status,
        res.counts.forward,
        res.counts.backward
    );
    Ok(())
}

#[derive(Serialize)]
struct DoeIndexEntry {
    sigma_gen: Conductivity,
    csv: Option<String>,
    error_at_generator: Option<f64>,
    in_band_fraction: Option<f64>,
    failed_points: usize,
    error: Option<String>,
}

pub fn gnuplot_script(meta: &Meta, csv: &str, map: &DoeMap, bands: &[f64], rho_max: f64) -> String {
    let mut s = String::new();
    s.push_str(&meta.comment_line());
    s.push_str("set datafile separator ','\nset key off\nset xlabel 'sigma_ml'\nset ylabel 'sigma_mt'\n");
    for &t in bands {
        writeln!(s, "set arrow from 0,0 to {},{} nohead dt 2 lc rgb 'red'", rho_max * t.cos(), rho_max * t.sin()).unwrap();
    }
    writeln!(
        s,
        "plot '{csv}' every ::1 using 1:(strcol(4) eq 'black' ? $2 : 1/0) with points pt 7 lc rgb 'black', \\\n     \
         '' every ::1 using 1:(strcol(4) eq 'cyan' ? $2 : 1/0) with points pt 7 lc rgb 'cyan', \\\n     \
         '' every ::1 using 1:(strcol(4) eq 'white' ? $2 : 1/0) with points pt 6 lc rgb 'gray', \\\n     \
         '-' using 1:2 with points pt 9 ps 2 lc rgb 'red'"
    )
    .unwrap();
    writeln!(s, "{} {}\ne", map.sigma_gen.ml, map.sigma_gen.mt).unwrap();
    s
}

pub fn doe(setup: &Setup) -> Result<()> {
    let spec = &setup.cfg.doe;
    let grid = spec.grid.points()?;
    let ctx = setup.ctx(&setup.cfg.solve);
    let sampling = &setup.cfg.sampling;
    let bands = equiangular_partition(sampling.theta_min, sampling.theta_max, spec.bands)?;
    let dir = setup.out().join("doe");
    let mut index = Vec::new();
    for (k, &gen) in spec.generators.iter().enumerate() {
        let result = build_basis_entry(ctx, gen, &setup.cfg.basis).and_then(|e| {
            let at_gen = doe_map(ctx, &e, &[gen])?.points[0].error;
            Ok((doe_map(ctx, &e, &grid)?, at_gen))
        });
        match result {
            Ok((map, at_gen)) => {
                let csv = format!("doe_{k}.csv");
                write_csv(&dir.join(&csv), &setup.meta, &map.to_csv())?;
                let script = gnuplot_script(&setup.meta, &csv, &map, &bands, sampling.rho_max);
                write_atomic(&dir.join(format!("doe_{k}.gp")), script.as_bytes())?;
                index.push(DoeIndexEntry {
                    sigma_gen: gen,
                    csv: Some(csv),
                    error_at_generator: at_gen,
                    in_band_fraction: map.in_band_fraction(&bands),
                    failed_points: map.points.iter().filter(|p| p.error.is_none()).count(),
                    error: None,
                });
                println!("doe: generator {gen:?} mapped on {} points", grid.len());
            }
            Err(err) => {
                log::error!("DOE for {gen:?} failed: {err}");
                index.push(DoeIndexEntry {
                    sigma_gen: gen,
                    csv: None,
                    error_at_generator: None,
                    in_band_fraction: None,
                    failed_points: grid.len(),
                    error: Some(err.to_string()),
                });
            }
        }
    }
    #[derive(Serialize)]
    struct DoeIndex<'a> {
        meta: &'a Meta,
        band_boundaries: Vec<f64>,
        maps: Vec<DoeIndexEntry>,
    }
    write_json(
        &dir.join("index.json"),
        &DoeIndex {
            meta: &setup.meta,
            band_boundaries: bands,
            maps: index,
        },
    )?;
    Ok(())
}
