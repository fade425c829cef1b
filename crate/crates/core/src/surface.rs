//! Dense-grid isosurface extraction and mesh export.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mc_tables::{EDGE_TABLE, TRI_TABLE};
use crate::neural_sdf::{union_min, union_smooth, UnifModel, UnionMode};
use crate::skeleton::{Pose, Skeleton, Vec3};

pub const MIN_RESOLUTION: usize = 8;
pub const DEFAULT_RESOLUTION: usize = 64;

// nodes evaluated per model call
const SLAB_CHUNK: usize = 4096;

// corner offsets and edge endpoints of a cell
const CORNERS: [[usize; 3]; 8] =
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];
const EDGES: [[usize; 2]; 12] =
    [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !(min.iter().chain(max.iter()).all(|v| v.is_finite())) {
            return Err(Error::NonFinite("bounding box".into()));
        }
        if (0..3).any(|k| max[k] <= min[k]) {
            return Err(Error::Degenerate(format!("empty bounding box {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn cube(center: Vec3, half: f64) -> Result<Self> {
        Self::new(center - Vec3::repeat(half), center + Vec3::repeat(half))
    }

    /// Box around the posed joints, padded by `pad` on every side.
    pub fn around_pose(skeleton: &Skeleton, pose: &Pose, pad: f64) -> Result<Self> {
        pose.validate(skeleton.part_count())?;
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for j in 0..skeleton.joint_count() {
            let p = skeleton.posed_joint(pose, j);
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        Self::new(lo - Vec3::repeat(pad), hi + Vec3::repeat(pad))
    }
}

/// Node-sampled scalar field with an optional per-node part label.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub bbox: Aabb,
    /// Cells per axis; there are `resolution + 1` nodes per axis.
    pub resolution: usize,
    pub values: Vec<f64>,
    pub labels: Option<Vec<u32>>,
}

impl Grid {
    pub fn nodes_per_axis(&self) -> usize {
        self.resolution + 1
    }

    pub fn spacing(&self) -> Vec3 {
        (self.bbox.max - self.bbox.min) / self.resolution as f64
    }

    pub fn cell_diagonal(&self) -> f64 {
        self.spacing().norm()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let n = self.nodes_per_axis();
        (k * n + j) * n + i
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> Vec3 {
        node_position(&self.bbox, self.resolution, i, j, k)
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    /// Samples `f` at every node.
    pub fn from_fn(bbox: Aabb, resolution: usize, f: impl Fn(&Vec3) -> f64) -> Result<Self> {
        check_resolution(resolution)?;
        let values: Vec<f64> = all_nodes(&bbox, resolution).iter().map(f).collect();
        Ok(Self { bbox, resolution, values, labels: None })
    }
}

fn check_resolution(resolution: usize) -> Result<()> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::Config(format!("resolution must be at least {MIN_RESOLUTION}, got {resolution}")));
    }
    Ok(())
}

fn node_position(bbox: &Aabb, resolution: usize, i: usize, j: usize, k: usize) -> Vec3 {
    let t = Vec3::new(i as f64, j as f64, k as f64) / resolution as f64;
    bbox.min + (bbox.max - bbox.min).component_mul(&t)
}

fn all_nodes(bbox: &Aabb, resolution: usize) -> Vec<Vec3> {
    let n = resolution + 1;
    let mut out = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                out.push(node_position(bbox, resolution, i, j, k));
            }
        }
    }
    out
}

/// Hard-min union of the model at every node, with the argmin part per node.
pub fn eval_grid(model: &UnifModel, pose: &Pose, bbox: Aabb, resolution: usize) -> Result<Grid> {
    eval_grid_with(model, pose, bbox, resolution, UnionMode::Min)
}

pub fn eval_grid_with(model: &UnifModel, pose: &Pose, bbox: Aabb, resolution: usize, mode: UnionMode) -> Result<Grid> {
    check_resolution(resolution)?;
    let ctx = model.pose_context(pose)?;
    let nodes = all_nodes(&bbox, resolution);
    let mut values = Vec::with_capacity(nodes.len());
    let mut labels = Vec::with_capacity(nodes.len());
    for chunk in nodes.chunks(SLAB_CHUNK) {
        let d = model.eval_part_values(&ctx, chunk)?;
        let mut parts = vec![0.0; d.len()];
        for i in 0..chunk.len() {
            for (p, dn) in parts.iter_mut().zip(&d) {
                *p = dn[i];
            }
            let (v, arg) = union_min(&parts)?;
            values.push(match mode {
                UnionMode::Min => v,
                UnionMode::Smooth => union_smooth(&parts, model.config.union_beta)?,
            });
            labels.push(arg as u32);
        }
    }
    Ok(Grid { bbox, resolution, values, labels: Some(labels) })
}

/// The field of part `n` alone.
pub fn eval_part_grid(model: &UnifModel, pose: &Pose, n: usize, bbox: Aabb, resolution: usize) -> Result<Grid> {
    check_resolution(resolution)?;
    if n >= model.part_count() {
        return Err(Error::Shape(format!("part {n} out of range for {} parts", model.part_count())));
    }
    let ctx = model.pose_context(pose)?;
    let nodes = all_nodes(&bbox, resolution);
    let mut values = Vec::with_capacity(nodes.len());
    for chunk in nodes.chunks(SLAB_CHUNK) {
        values.extend_from_slice(&model.eval_part_values(&ctx, chunk)?[n]);
    }
    let labels = vec![n as u32; values.len()];
    Ok(Grid { bbox, resolution, values, labels: Some(labels) })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub part_ids: Option<Vec<u32>>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.vertices.len();
        if let Some(ids) = &self.part_ids {
            if ids.len() != nv {
                return Err(Error::Shape(format!("{} part ids for {nv} vertices", ids.len())));
            }
        }
        if self.triangles.iter().flatten().any(|&i| i as usize >= nv) {
            return Err(Error::Shape("triangle index out of range".into()));
        }
        Ok(())
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| triangle_area(&self.triangle(t))).sum()
    }

    /// Signed enclosed volume; positive when triangles face outward.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// V − E + F counting only vertices referenced by triangles.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = HashSet::new();
        let mut edges = HashSet::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                used.insert(a);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        used.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    /// True when every edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        let mut count: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().all(|&c| c == 2)
    }

    /// Number of connected components of triangles sharing vertices.
    pub fn connected_components(&self) -> usize {
        let mut parent: Vec<u32> = (0..self.vertices.len() as u32).collect();
        fn find(p: &mut [u32], mut x: u32) -> u32 {
            while p[x as usize] != x {
                p[x as usize] = p[p[x as usize] as usize];
                x = p[x as usize];
            }
            x
        }
        for t in &self.triangles {
            for k in 1..3 {
                let (a, b) = (find(&mut parent, t[0]), find(&mut parent, t[k]));
                if a != b {
                    parent[a as usize] = b;
                }
            }
        }
        let roots: HashSet<u32> = self.triangles.iter().map(|t| find(&mut parent, t[0])).collect();
        roots.len()
    }

    /// Keeps only triangles whose vertices all carry `part`.
    pub fn filter_part(&self, part: u32) -> Mesh {
        let Some(ids) = &self.part_ids else { return Mesh::default() };
        let tris: Vec<[u32; 3]> =
            self.triangles.iter().copied().filter(|t| t.iter().all(|&i| ids[i as usize] == part)).collect();
        let mut remap = HashMap::new();
        let mut out = Mesh { part_ids: Some(Vec::new()), ..Mesh::default() };
        for t in tris {
            let nt = t.map(|i| {
                *remap.entry(i).or_insert_with(|| {
                    out.vertices.push(self.vertices[i as usize]);
                    out.part_ids.as_mut().unwrap().push(part);
                    out.vertices.len() as u32 - 1
                })
            });
            out.triangles.push(nt);
        }
        out
    }
}

pub fn triangle_area(t: &[Vec3; 3]) -> f64 {
    0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm()
}

/// Fixed-table marching cubes; triangles face the side where the field
/// exceeds `iso`. Vertices on shared edges are welded.
pub fn marching_cubes(grid: &Grid, iso: f64) -> Result<Mesh> {
    if grid.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("grid values".into()));
    }
    let n = grid.nodes_per_axis();
    if grid.values.len() != n * n * n {
        return Err(Error::Shape(format!("grid holds {} values, expected {}", grid.values.len(), n * n * n)));
    }
    let mut mesh = Mesh { part_ids: grid.labels.as_ref().map(|_| Vec::new()), ..Mesh::default() };
    let mut welded: HashMap<(usize, usize), u32> = HashMap::new();
    let r = grid.resolution;
    for k in 0..r {
        for j in 0..r {
            for i in 0..r {
                let corner = |c: usize| [i + CORNERS[c][0], j + CORNERS[c][1], k + CORNERS[c][2]];
                let vals: [f64; 8] = std::array::from_fn(|c| {
                    let [a, b, d] = corner(c);
                    grid.value(a, b, d)
                });
                let case = (0..8).fold(0usize, |acc, c| acc | (((vals[c] < iso) as usize) << c));
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut edge_vertex = [u32::MAX; 12];
                for (e, ends) in EDGES.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let (ca, cb) = (corner(ends[0]), corner(ends[1]));
                    let (ia, ib) = (grid.index(ca[0], ca[1], ca[2]), grid.index(cb[0], cb[1], cb[2]));
                    let (va, vb) = (vals[ends[0]], vals[ends[1]]);
                    let t = if vb != va { ((iso - va) / (vb - va)).clamp(0.0, 1.0) } else { 0.5 };
                    // a vertex sitting on a node is shared by every edge through it
                    let key = match t {
                        0.0 => (ia, ia),
                        1.0 => (ib, ib),
                        _ => (ia.min(ib), ia.max(ib)),
                    };
                    edge_vertex[e] = *welded.entry(key).or_insert_with(|| {
                        let pa = grid.node(ca[0], ca[1], ca[2]);
                        let pb = grid.node(cb[0], cb[1], cb[2]);
                        mesh.vertices.push(pa + (pb - pa) * t);
                        if let (Some(ids), Some(labels)) = (mesh.part_ids.as_mut(), grid.labels.as_ref()) {
                            let inside = if va < iso { ia } else { ib };
                            ids.push(labels[inside]);
                        }
                        mesh.vertices.len() as u32 - 1
                    });
                }
                for tri in TRI_TABLE[case].chunks(3).take_while(|t| t[0] >= 0) {
                    // table winding faces the inside; swap to face outward
                    let t = [edge_vertex[tri[0] as usize], edge_vertex[tri[2] as usize], edge_vertex[tri[1] as usize]];
                    if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                        continue;
                    }
                    if triangle_area(&t.map(|v| mesh.vertices[v as usize])) > 0.0 {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

/// Union mesh at `pose`, vertices labelled by the argmin part of the inside node.
pub fn extract_union(model: &UnifModel, pose: &Pose, bbox: Aabb, resolution: usize) -> Result<Mesh> {
    extract_union_with(model, pose, bbox, resolution, UnionMode::Min)
}

pub fn extract_union_with(model: &UnifModel, pose: &Pose, bbox: Aabb, resolution: usize, mode: UnionMode) -> Result<Mesh> {
    marching_cubes(&eval_grid_with(model, pose, bbox, resolution, mode)?, 0.0)
}

pub fn extract_part(model: &UnifModel, pose: &Pose, n: usize, bbox: Aabb, resolution: usize) -> Result<Mesh> {
    marching_cubes(&eval_part_grid(model, pose, n, bbox, resolution)?, 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
            Some("obj") => Ok(Self::Obj),
            Some("ply") => Ok(Self::Ply),
            _ => Err(Error::Config(format!("{}: mesh extension must be .obj or .ply", path.display()))),
        }
    }
}

/// `v` printed with nine significant digits in plain decimal form.
fn sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let decimals = (8 - v.abs().log10().floor() as i64).clamp(0, 40) as usize;
    format!("{v:.decimals$}")
}

pub fn obj_string(mesh: &Mesh) -> String {
    let mut out = String::with_capacity(40 * (mesh.vertices.len() + mesh.triangles.len()));
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", sig9(v.x), sig9(v.y), sig9(v.z));
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}

pub fn ply_bytes(mesh: &Mesh) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        mesh.vertices.len()
    );
    if mesh.part_ids.is_some() {
        out.push_str("property int part_id\n");
    }
    let _ = write!(out, "element face {}\nproperty list uchar int vertex_indices\nend_header\n", mesh.triangles.len());
    let mut bytes = out.into_bytes();
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in v.iter() {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
        if let Some(ids) = &mesh.part_ids {
            bytes.extend_from_slice(&(ids[i] as i32).to_le_bytes());
        }
    }
    for t in &mesh.triangles {
        bytes.push(3);
        for &i in t {
            bytes.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    bytes
}

pub fn export_mesh(mesh: &Mesh, path: &Path, format: MeshFormat) -> Result<()> {
    mesh.validate()?;
    let bytes = match format {
        MeshFormat::Obj => obj_string(mesh).into_bytes(),
        MeshFormat::Ply => ply_bytes(mesh),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads `v` and triangular `f` records; other lines are ignored.
pub fn parse_obj(text: &str, path: &Path) -> Result<Mesh> {
    let mut mesh = Mesh::default();
    for (no, line) in text.lines().enumerate() {
        let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", no + 1));
        let mut words = line.split_whitespace();
        match words.next() {
            Some("v") => {
                let c: Vec<f64> = words.take(3).map(|w| w.parse().map_err(|_| bad("bad coordinate"))).collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(bad("vertex needs three coordinates"));
                }
                mesh.vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = words
                    .map(|w| {
                        let i: i64 = w.split('/').next().unwrap_or("").parse().map_err(|_| bad("bad face index"))?;
                        if i < 1 {
                            return Err(bad("face indices must be positive"));
                        }
                        Ok(i as u32 - 1)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(bad("only triangles are supported"));
                }
                mesh.triangles.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    mesh.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(mesh)
}

pub fn read_mesh(path: &Path) -> Result<Mesh> {
    match MeshFormat::from_path(path)? {
        MeshFormat::Obj => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_obj(&text, path)
        }
        MeshFormat::Ply => {
            let ply = crate::ply::read(path)?;
            let v = ply.element("vertex").ok_or_else(|| Error::format(path, "no vertex element"))?;
            let col = |n: &str| v.column(n).ok_or_else(|| Error::format(path, format!("missing vertex property {n}")));
            let (x, y, z) = (col("x")?, col("y")?, col("z")?);
            let mut mesh = Mesh {
                vertices: (0..v.count).map(|i| Vec3::new(x[i], y[i], z[i])).collect(),
                part_ids: v.column("part_id").map(|c| c.iter().map(|&p| p as u32).collect()),
                ..Mesh::default()
            };
            if let Some(f) = ply.element("face") {
                for row in &f.rows {
                    let idx = &row[0];
                    if idx.len() != 3 || idx.iter().any(|&i| i < 0.0) {
                        return Err(Error::format(path, "only triangles with non-negative indices are supported"));
                    }
                    mesh.triangles.push([idx[0] as u32, idx[1] as u32, idx[2] as u32]);
                }
            }
            mesh.validate().map_err(|e| Error::format(path, e.to_string()))?;
            Ok(mesh)
        }
    }
}
