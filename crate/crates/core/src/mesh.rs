//! P1 tetrahedral meshes with a myocardial fiber field, and assembly of the
//! mass, lumped-mass and fiber-split stiffness operators.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::sparse::CsrMatrix;

/// Elements below this volume (cm³) are rejected as degenerate.
pub const MIN_ELEMENT_VOLUME: f64 = 1e-14;

const FIBER_WARN_TOL: f64 = 1e-6;
const FIBER_ERROR_TOL: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub enum FiberField {
    Nodal(Vec<[f64; 3]>),
    Elemental(Vec<[f64; 3]>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<[f64; 3]>,
    pub tets: Vec<[usize; 4]>,
    pub fiber: FiberField,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn signed_volume(p: [[f64; 3]; 4]) -> f64 {
    let e1 = sub(p[1], p[0]);
    let e2 = sub(p[2], p[0]);
    let e3 = sub(p[3], p[0]);
    dot(e1, cross(e2, e3)) / 6.0
}

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn tet_points(&self, e: usize) -> [[f64; 3]; 4] {
        let t = self.tets[e];
        [self.nodes[t[0]], self.nodes[t[1]], self.nodes[t[2]], self.nodes[t[3]]]
    }

    pub fn tet_volume(&self, e: usize) -> f64 {
        signed_volume(self.tet_points(e))
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.n_tets()).map(|e| self.tet_volume(e)).sum()
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.nodes {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    /// Fiber direction used inside element `e`: the element value, or the
    /// renormalized mean of the nodal values.
    pub fn element_fiber(&self, e: usize) -> Result<[f64; 3]> {
        match &self.fiber {
            FiberField::Elemental(f) => Ok(f[e]),
            FiberField::Nodal(f) => {
                let mut a = [0.0; 3];
                for &v in &self.tets[e] {
                    for d in 0..3 {
                        a[d] += 0.25 * f[v][d];
                    }
                }
                let len = norm(a);
                if len < 1e-8 {
                    return Err(Error::Assembly {
                        element: e,
                        msg: "nodal fibers cancel out inside the element".into(),
                    });
                }
                Ok([a[0] / len, a[1] / len, a[2] / len])
            }
        }
    }

    /// Checks index ranges, fiber normalization and element volumes.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes();
        for (e, t) in self.tets.iter().enumerate() {
            if let Some(&bad) = t.iter().find(|&&v| v >= n) {
                return invalid(format!("tet {e} references node {bad} of {n}"));
            }
            let vol = self.tet_volume(e);
            if vol < MIN_ELEMENT_VOLUME {
                return Err(Error::Assembly {
                    element: e,
                    msg: format!("volume {vol:e} below {MIN_ELEMENT_VOLUME:e}"),
                });
            }
        }
        let fibers = match &self.fiber {
            FiberField::Nodal(f) => {
                if f.len() != n {
                    return invalid("nodal fiber count differs from node count");
                }
                f
            }
            FiberField::Elemental(f) => {
                if f.len() != self.n_tets() {
                    return invalid("element fiber count differs from element count");
                }
                f
            }
        };
        for (i, a) in fibers.iter().enumerate() {
            if (norm(*a) - 1.0).abs() > 1e-12 {
                return invalid(format!("fiber {i} is not a unit vector"));
            }
        }
        Ok(())
    }
}

/// Structured slab `[0,ex]×[0,ey]×[0,ez]` split into six tetrahedra per cell,
/// with a constant nodal fiber. Nodes are numbered lexicographically with x fastest.
pub fn build_slab_mesh(extent: [f64; 3], resolution: [usize; 3], fiber_axis: [f64; 3]) -> Result<Mesh> {
    if extent.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return invalid(format!("slab extents must be positive, got {extent:?}"));
    }
    if resolution.iter().any(|&r| r == 0) {
        return invalid(format!("slab resolution must be at least 1, got {resolution:?}"));
    }
    let len = norm(fiber_axis);
    if !(len > 0.0) {
        return invalid("fiber axis must be nonzero");
    }
    let axis = [fiber_axis[0] / len, fiber_axis[1] / len, fiber_axis[2] / len];

    let [nx, ny, nz] = resolution;
    let idx = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push([
                    extent[0] * i as f64 / nx as f64,
                    extent[1] * j as f64 / ny as f64,
                    extent[2] * k as f64 / nz as f64,
                ]);
            }
        }
    }

    // Kuhn triangulation: one tet per monotone path from corner 000 to 111.
    const PATHS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                for path in PATHS {
                    let mut c = [i, j, k];
                    let mut tet = [idx(c[0], c[1], c[2]); 4];
                    for (s, &axis_step) in path.iter().enumerate() {
                        c[axis_step] += 1;
                        tet[s + 1] = idx(c[0], c[1], c[2]);
                    }
                    let pts = [nodes[tet[0]], nodes[tet[1]], nodes[tet[2]], nodes[tet[3]]];
                    if signed_volume(pts) < 0.0 {
                        tet.swap(2, 3);
                    }
                    tets.push(tet);
                }
            }
        }
    }

    let n = nodes.len();
    Ok(Mesh {
        nodes,
        tets,
        fiber: FiberField::Nodal(vec![axis; n]),
    })
}

/// Text serialization: `monomesh v1 <n_nodes> <n_tets>`, then `x y z fx fy fz`
/// per node and `i0 i1 i2 i3` per tet.
pub fn write_mesh_string(mesh: &Mesh) -> Result<String> {
    let FiberField::Nodal(fiber) = &mesh.fiber else {
        return invalid("only nodal fiber fields can be written in the mesh text format");
    };
    let mut s = String::new();
    writeln!(s, "monomesh v1 {} {}", mesh.n_nodes(), mesh.n_tets()).unwrap();
    for (p, a) in mesh.nodes.iter().zip(fiber) {
        writeln!(s, "{} {} {} {} {} {}", p[0], p[1], p[2], a[0], a[1], a[2]).unwrap();
    }
    for t in &mesh.tets {
        writeln!(s, "{} {} {} {}", t[0], t[1], t[2], t[3]).unwrap();
    }
    Ok(s)
}

pub fn write_mesh(mesh: &Mesh, path: &Path) -> Result<()> {
    std::fs::write(path, write_mesh_string(mesh)?)?;
    Ok(())
}

pub fn load_mesh(path: &Path) -> Result<Mesh> {
    let file = std::fs::File::open(path)?;
    read_mesh(file)
}

fn load_err<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Load {
        line,
        msg: msg.into(),
    })
}

pub fn read_mesh<R: Read>(reader: R) -> Result<Mesh> {
    let mut lines = BufReader::new(reader).lines().enumerate().filter_map(|(i, l)| match l {
        Ok(l) if l.trim().is_empty() || l.trim_start().starts_with('#') => None,
        other => Some((i + 1, other)),
    });

    let (hline, header) = match lines.next() {
        Some((i, l)) => (i, l?),
        None => return load_err(1, "empty mesh file"),
    };
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 4 || h[0] != "monomesh" || h[1] != "v1" {
        return load_err(hline, "expected header `monomesh v1 <n_nodes> <n_tets>`");
    }
    let parse_count = |s: &str| s.parse::<usize>().or_else(|_| load_err(hline, format!("bad count `{s}`")));
    let n_nodes = parse_count(h[2])?;
    let n_tets = parse_count(h[3])?;

    let mut nodes = Vec::with_capacity(n_nodes);
    let mut fiber = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let Some((ln, l)) = lines.next() else {
            return load_err(hline, "file ended before all nodes were read");
        };
        let l = l?;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .or_else(|e| load_err(ln, format!("bad number: {e}")))?;
        if v.len() != 6 || v.iter().any(|x| !x.is_finite()) {
            return load_err(ln, "node line needs 6 finite numbers `x y z fx fy fz`");
        }
        let a = [v[3], v[4], v[5]];
        let len = norm(a);
        let dev = (len - 1.0).abs();
        if dev > FIBER_ERROR_TOL {
            return load_err(ln, format!("fiber norm {len} is too far from 1"));
        }
        if dev > FIBER_WARN_TOL {
            log::warn!("line {ln}: fiber norm {len} renormalized");
        }
        nodes.push([v[0], v[1], v[2]]);
        fiber.push([a[0] / len, a[1] / len, a[2] / len]);
    }

    let mut tets = Vec::with_capacity(n_tets);
    for _ in 0..n_tets {
        let Some((ln, l)) = lines.next() else {
            return load_err(hline, "file ended before all tets were read");
        };
        let l = l?;
        let v: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .or_else(|e| load_err(ln, format!("bad node index: {e}")))?;
        if v.len() != 4 {
            return load_err(ln, "tet line needs 4 node indices");
        }
        if let Some(&bad) = v.iter().find(|&&i| i >= n_nodes) {
            return load_err(ln, format!("tet references node {bad} but only {n_nodes} nodes exist"));
        }
        let mut t = [v[0], v[1], v[2], v[3]];
        let pts = [nodes[t[0]], nodes[t[1]], nodes[t[2]], nodes[t[3]]];
        let vol = signed_volume(pts);
        if vol.abs() < MIN_ELEMENT_VOLUME {
            return load_err(ln, format!("degenerate tet (volume {vol:e})"));
        }
        if vol < 0.0 {
            t.swap(2, 3);
        }
        tets.push(t);
    }
    if let Some((ln, _)) = lines.next() {
        return load_err(ln, "trailing content after the last tet");
    }

    Ok(Mesh {
        nodes,
        tets,
        fiber: FiberField::Nodal(fiber),
    })
}

#[derive(Clone, Debug)]
pub struct AssembledOperators {
    /// Consistent P1 mass matrix.
    pub mass: CsrMatrix,
    /// Diagonal of the lumped mass matrix.
    pub lumped_mass: Vec<f64>,
    /// Stiffness along the fibers, integrand `a_l a_lᵀ ∇φ_k · ∇φ_j`.
    pub stiff_l: CsrMatrix,
    /// Cross-fiber stiffness, integrand `(I − a_l a_lᵀ) ∇φ_k · ∇φ_j`.
    pub stiff_t: CsrMatrix,
}

impl AssembledOperators {
    pub fn n(&self) -> usize {
        self.lumped_mass.len()
    }
}

/// Geometry of one P1 tetrahedron: volume and barycentric gradients.
#[derive(Clone, Copy, Debug)]
pub struct ElementGeometry {
    pub volume: f64,
    pub grads: [[f64; 3]; 4],
}

pub fn element_geometry(mesh: &Mesh, e: usize) -> Result<ElementGeometry> {
    let p = mesh.tet_points(e);
    let e1 = sub(p[1], p[0]);
    let e2 = sub(p[2], p[0]);
    let e3 = sub(p[3], p[0]);
    let det = dot(e1, cross(e2, e3));
    let volume = det / 6.0;
    if !(volume >= MIN_ELEMENT_VOLUME) {
        return Err(Error::Assembly {
            element: e,
            msg: format!("volume {volume:e} below {MIN_ELEMENT_VOLUME:e}"),
        });
    }
    // Rows of J^{-1} with J = [e1 e2 e3]; expressed through cross products.
    let g1 = cross(e2, e3).map(|x| x / det);
    let g2 = cross(e3, e1).map(|x| x / det);
    let g3 = cross(e1, e2).map(|x| x / det);
    let g0 = [-(g1[0] + g2[0] + g3[0]), -(g1[1] + g2[1] + g3[1]), -(g1[2] + g2[2] + g3[2])];
    Ok(ElementGeometry {
        volume,
        grads: [g0, g1, g2, g3],
    })
}

/// Diagonal lumping that preserves total mass: `M_L[i] = (M_tot / Tr M) · M_ii`.
pub fn lump_mass(mass: &CsrMatrix) -> Vec<f64> {
    let total: f64 = mass.values().iter().sum();
    let diag = mass.diagonal();
    let trace: f64 = diag.iter().sum();
    diag.iter().map(|d| total / trace * d).collect()
}

pub fn assemble(mesh: &Mesh) -> Result<AssembledOperators> {
    let n = mesh.n_nodes();
    let cap = 16 * mesh.n_tets();
    let mut mass = Vec::with_capacity(cap);
    let mut stl = Vec::with_capacity(cap);
    let mut stt = Vec::with_capacity(cap);
    for (e, tet) in mesh.tets.iter().enumerate() {
        let geo = element_geometry(mesh, e)?;
        let a = mesh.element_fiber(e)?;
        for r in 0..4 {
            for c in 0..4 {
                let m = geo.volume / 20.0 * if r == c { 2.0 } else { 1.0 };
                let gg = dot(geo.grads[r], geo.grads[c]);
                let along = dot(a, geo.grads[r]) * dot(a, geo.grads[c]);
                mass.push((tet[r], tet[c], m));
                stl.push((tet[r], tet[c], geo.volume * along));
                stt.push((tet[r], tet[c], geo.volume * (gg - along)));
            }
        }
    }
    let mass = CsrMatrix::from_triplets(n, &mass);
    let lumped_mass = lump_mass(&mass);
    Ok(AssembledOperators {
        mass,
        lumped_mass,
        stiff_l: CsrMatrix::from_triplets(n, &stl),
        stiff_t: CsrMatrix::from_triplets(n, &stt),
    })
}

/// Plain `∇φ_k · ∇φ_j` stiffness, independent of the fiber field.
pub fn assemble_isotropic_stiffness(mesh: &Mesh) -> Result<CsrMatrix> {
    let mut trip = Vec::with_capacity(16 * mesh.n_tets());
    for (e, tet) in mesh.tets.iter().enumerate() {
        let geo = element_geometry(mesh, e)?;
        for r in 0..4 {
            for c in 0..4 {
                trip.push((tet[r], tet[c], geo.volume * dot(geo.grads[r], geo.grads[c])));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(mesh.n_nodes(), &trip))
}

/// Nodes on the face `z = z_max` of the bounding box.
pub fn top_surface_nodes(mesh: &Mesh) -> Vec<usize> {
    let (lo, hi) = mesh.bounds();
    let tol = 1e-9 * (hi[2] - lo[2]).abs().max(1.0);
    (0..mesh.n_nodes())
        .filter(|&i| (mesh.nodes[i][2] - hi[2]).abs() <= tol)
        .collect()
}

/// Index of the node closest to `p` (lowest index on ties).
pub fn nearest_node(mesh: &Mesh, p: [f64; 3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, q) in mesh.nodes.iter().enumerate() {
        let d = dot(sub(*q, p), sub(*q, p));
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}
