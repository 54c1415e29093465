//! Marching-cubes extraction, OBJ input/output and point-cloud surface
//! metrics (accuracy, completeness, precision, recall, F-score).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::ScalarField;
use crate::geometry::Vec3;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("no sign change of the field inside the extraction bound")]
    EmptyField,
    #[error("resolution {0} is below the minimum of 8")]
    Resolution(usize),
    #[error("{path}: line {line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error("mesh has no triangles")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_points(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    /// Unnormalized face normal (twice the area).
    pub fn face_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangle_points(t);
        (b - a).cross(&(c - a))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        0.5 * self.face_normal(t).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Undirected edge -> number of incident triangles.
    pub fn edge_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut m = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }

    /// V - E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &v in t {
                used[v as usize] = true;
            }
        }
        let v = used.iter().filter(|u| **u).count() as i64;
        v - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    pub fn to_obj_string(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 60 + self.triangles.len() * 24);
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    /// Parses `v` and `f` records; other records are ignored. Face entries of
    /// the form `i/j/k` use the position index; polygons are fanned.
    pub fn from_obj_str(text: &str, name: &str) -> Result<Self, MeshError> {
        let err = |line: usize, msg: String| MeshError::Format { path: name.to_string(), line, msg };
        let mut mesh = TriangleMesh::default();
        for (no, raw) in text.lines().enumerate() {
            let line = no + 1;
            let mut it = raw.split_whitespace();
            match it.next() {
                Some("v") => {
                    let mut c = [0.0; 3];
                    for x in &mut c {
                        let tok = it.next().ok_or_else(|| err(line, "vertex needs 3 coordinates".into()))?;
                        *x = tok.parse().map_err(|_| err(line, format!("bad coordinate '{tok}'")))?;
                    }
                    mesh.vertices.push(Vec3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let mut idx = Vec::new();
                    for tok in it {
                        let first = tok.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|_| err(line, format!("bad face index '{tok}'")))?;
                        let n = mesh.vertices.len() as i64;
                        let i = if i < 0 { n + i } else { i - 1 };
                        if i < 0 || i >= n {
                            return Err(err(line, format!("face index {first} out of range")));
                        }
                        idx.push(i as u32);
                    }
                    if idx.len() < 3 {
                        return Err(err(line, "face needs at least 3 vertices".into()));
                    }
                    for k in 1..idx.len() - 1 {
                        mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Ok(mesh)
    }

    pub fn write_obj(&self, path: &Path) -> Result<(), MeshError> {
        std::fs::write(path, self.to_obj_string())?;
        Ok(())
    }

    pub fn read_obj(path: &Path) -> Result<Self, MeshError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_obj_str(&text, &path.display().to_string())
    }
}

// ---------------------------------------------------------------------------
// Case table.
//
// Corner c of a cell sits at offset (c & 1, c >> 1 & 1, c >> 2 & 1). Edge
// 4a + m joins corner `low` and `low | 1 << a`, where `low` enumerates the
// corners with bit a clear in increasing order. The table is built once
// from the corner signs: on every face the crossing edges are paired (the
// ambiguous face always separates the negative corners, so neighbouring
// cells agree), the pairs are chained into loops, each loop is oriented so
// its normal points to the positive side, and loops are fanned.

const EDGE_CORNERS: [[usize; 2]; 12] = {
    let mut out = [[0usize; 2]; 12];
    let mut a = 0;
    while a < 3 {
        let mut m = 0;
        let mut c = 0;
        while c < 8 {
            if c & (1 << a) == 0 {
                out[4 * a + m] = [c, c | (1 << a)];
                m += 1;
            }
            c += 1;
        }
        a += 1;
    }
    out
};

fn corner_offset(c: usize) -> Vec3 {
    Vec3::new((c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64)
}

fn edge_between(c0: usize, c1: usize) -> usize {
    EDGE_CORNERS.iter().position(|e| (e[0] == c0 && e[1] == c1) || (e[0] == c1 && e[1] == c0)).unwrap()
}

/// The 6 faces as cyclic corner lists.
fn faces() -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for a in 0..3 {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        for side in 0..2 {
            let base = side << a;
            out.push([base, base | 1 << b, base | 1 << b | 1 << c, base | 1 << c]);
        }
    }
    out
}

fn build_case(case: usize) -> Vec<[u8; 3]> {
    let neg = |c: usize| case & (1 << c) != 0;
    // adjacency between crossing edges
    let mut links: Vec<Vec<usize>> = vec![Vec::new(); 12];
    for f in faces() {
        let cross: Vec<usize> = (0..4).filter(|&k| neg(f[k]) != neg(f[(k + 1) % 4])).collect();
        let e = |k: usize| edge_between(f[k], f[(k + 1) % 4]);
        let pairs: Vec<(usize, usize)> = match cross.len() {
            0 => vec![],
            2 => vec![(e(cross[0]), e(cross[1]))],
            4 => {
                // cut off each negative corner: corner k sits between edges k-1 and k
                let first = if neg(f[0]) { 0 } else { 1 };
                let k2 = first + 2;
                vec![(e((first + 3) % 4), e(first)), (e((k2 + 3) % 4), e(k2))]
            }
            _ => unreachable!(),
        };
        for (x, y) in pairs {
            links[x].push(y);
            links[y].push(x);
        }
    }
    let mut seen = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if seen[start] || links[start].is_empty() {
            continue;
        }
        let mut lp = vec![start];
        seen[start] = true;
        let mut prev = start;
        let mut cur = links[start][0];
        while cur != start {
            lp.push(cur);
            seen[cur] = true;
            let next = if links[cur][0] == prev { links[cur][1] } else { links[cur][0] };
            prev = cur;
            cur = next;
        }
        let mid = |e: usize| 0.5 * (corner_offset(EDGE_CORNERS[e][0]) + corner_offset(EDGE_CORNERS[e][1]));
        let mut normal = Vec3::zeros();
        for k in 0..lp.len() {
            normal += mid(lp[k]).cross(&mid(lp[(k + 1) % lp.len()]));
        }
        let mut outward = 0.0;
        for &e in &lp {
            let [c0, c1] = EDGE_CORNERS[e];
            let (p, n) = if neg(c0) { (c1, c0) } else { (c0, c1) };
            outward += (corner_offset(p) - corner_offset(n)).dot(&normal);
        }
        if outward < 0.0 {
            lp.reverse();
        }
        for k in 1..lp.len() - 1 {
            tris.push([lp[0] as u8, lp[k] as u8, lp[k + 1] as u8]);
        }
    }
    tris
}

/// Triangles (as edge triples) for each of the 256 corner-sign cases; bit c
/// of the case index is set when corner c is inside (negative).
pub fn case_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(build_case).collect())
}

/// Smallest accepted grid resolution.
pub const MIN_RESOLUTION: usize = 8;

/// Extracts the zero level set of `field` inside `[lo, hi]` on a grid of
/// `resolution` cells per axis. Triangles face the positive side.
pub fn marching_cubes<F: ScalarField + ?Sized>(
    field: &F,
    lo: &Vec3,
    hi: &Vec3,
    resolution: usize,
) -> Result<TriangleMesh, MeshError> {
    if resolution < MIN_RESOLUTION {
        return Err(MeshError::Resolution(resolution));
    }
    let n = resolution + 1;
    let step = (hi - lo) / resolution as f64;
    let pos = |i: usize, j: usize, k: usize| lo + Vec3::new(i as f64 * step.x, j as f64 * step.y, k as f64 * step.z);
    let slab = |k: usize| {
        let pts: Vec<Vec3> = (0..n * n).map(|q| pos(q % n, q / n, k)).collect();
        field.values(&pts)
    };
    let table = case_table();
    let mut mesh = TriangleMesh::default();
    let mut vmap: HashMap<(usize, usize, usize, usize), u32> = HashMap::new();
    let mut below = slab(0);
    let mut any_neg = below.iter().any(|v| *v < 0.0);
    let mut any_pos = below.iter().any(|v| *v >= 0.0);
    for k in 0..resolution {
        let above = slab(k + 1);
        any_neg |= above.iter().any(|v| *v < 0.0);
        any_pos |= above.iter().any(|v| *v >= 0.0);
        let value = |i: usize, j: usize, kk: usize| if kk == k { below[j * n + i] } else { above[j * n + i] };
        for j in 0..resolution {
            for i in 0..resolution {
                let mut case = 0;
                let mut vals = [0.0; 8];
                for (c, v) in vals.iter_mut().enumerate() {
                    *v = value(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                    if *v < 0.0 {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                for tri in &table[case] {
                    let mut idx = [0u32; 3];
                    for (slot, &e) in idx.iter_mut().zip(tri) {
                        let [c0, c1] = EDGE_CORNERS[e as usize];
                        let g0 = (i + (c0 & 1), j + ((c0 >> 1) & 1), k + ((c0 >> 2) & 1));
                        let axis = e as usize / 4;
                        *slot = *vmap.entry((axis, g0.0, g0.1, g0.2)).or_insert_with(|| {
                            let (v0, v1) = (vals[c0], vals[c1]);
                            let t = v0 / (v0 - v1);
                            let p0 = pos(g0.0, g0.1, g0.2);
                            let mut p1 = p0;
                            p1[axis] += step[axis];
                            mesh.vertices.push(p0 + t * (p1 - p0));
                            (mesh.vertices.len() - 1) as u32
                        });
                    }
                    mesh.triangles.push(idx);
                }
            }
        }
        below = above;
    }
    if !(any_neg && any_pos) || mesh.triangles.is_empty() {
        return Err(MeshError::EmptyField);
    }
    Ok(mesh)
}

/// Area-weighted uniform samples on the surface.
pub fn sample_surface(mesh: &TriangleMesh, n_points: usize, seed: u64) -> Result<Vec<Vec3>, MeshError> {
    if mesh.triangles.is_empty() {
        return Err(MeshError::Empty);
    }
    let mut cum = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cum.push(total);
    }
    if !(total > 0.0) {
        return Err(MeshError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_points)
        .map(|_| {
            let u = rng.gen::<f64>() * total;
            let t = cum.partition_point(|c| *c <= u).min(cum.len() - 1);
            let [a, b, c] = mesh.triangle_points(t);
            let r1 = rng.gen::<f64>().sqrt();
            let r2 = rng.gen::<f64>();
            a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2)
        })
        .collect())
}

/// Uniform-grid nearest-neighbour index over a point cloud.
pub struct PointGrid {
    points: Vec<Vec3>,
    lo: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<u32>,
}

impl PointGrid {
    pub fn new(points: &[Vec3]) -> Self {
        assert!(!points.is_empty(), "empty point cloud");
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let ext = (hi - lo).map(|e| e.max(1e-9));
        let vol = ext.x * ext.y * ext.z;
        let cell = (vol / points.len() as f64).cbrt().max(ext.max() / 1024.0) * 1.5;
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).floor() as usize + 1).min(4096));
        let mut counts = vec![0usize; dims[0] * dims[1] * dims[2] + 1];
        let cells: Vec<usize> = points.iter().map(|p| Self::cell_index(&lo, cell, &dims, p)).collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c]] = i as u32;
            fill[c] += 1;
        }
        Self { points: points.to_vec(), lo, cell, dims, starts: counts, order }
    }

    fn coord(lo: &Vec3, cell: f64, dims: &[usize; 3], p: &Vec3) -> [i64; 3] {
        [0, 1, 2].map(|a| (((p[a] - lo[a]) / cell).floor() as i64).clamp(0, dims[a] as i64 - 1))
    }

    fn cell_index(lo: &Vec3, cell: f64, dims: &[usize; 3], p: &Vec3) -> usize {
        let c = Self::coord(lo, cell, dims, p);
        (c[2] as usize * dims[1] + c[1] as usize) * dims[0] + c[0] as usize
    }

    /// Squared distance to the nearest indexed point.
    pub fn nearest_sq(&self, q: &Vec3) -> f64 {
        let c = Self::coord(&self.lo, self.cell, &self.dims, q);
        // distance from q to the boundary of its own cell box, used to bound rings
        let mut best = f64::INFINITY;
        let max_r = *self.dims.iter().max().unwrap() as i64;
        let outside = [0, 1, 2]
            .map(|a| {
                let lo = self.lo[a];
                let hi = self.lo[a] + self.dims[a] as f64 * self.cell;
                (lo - q[a]).max(q[a] - hi).max(0.0)
            })
            .iter()
            .fold(0.0f64, |m, v| m.max(*v));
        for r in 0..=max_r {
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let (x, y, z) = (c[0] + dx, c[1] + dy, c[2] + dz);
                        if x < 0 || y < 0 || z < 0 {
                            continue;
                        }
                        let (x, y, z) = (x as usize, y as usize, z as usize);
                        if x >= self.dims[0] || y >= self.dims[1] || z >= self.dims[2] {
                            continue;
                        }
                        let id = (z * self.dims[1] + y) * self.dims[0] + x;
                        for &pi in &self.order[self.starts[id]..self.starts[id + 1]] {
                            let d = (self.points[pi as usize] - q).norm_squared();
                            if d < best {
                                best = d;
                            }
                        }
                    }
                }
            }
            // every point beyond ring r is at least r cells (plus any gap to
            // the grid box) away
            let reach = r as f64 * self.cell + outside;
            if best <= reach * reach {
                break;
            }
        }
        best
    }
}

/// Nearest distances from each query to `targets` by exhaustive search.
pub fn nearest_brute_force(queries: &[Vec3], targets: &[Vec3]) -> Vec<f64> {
    queries
        .par_iter()
        .map(|q| targets.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
        .collect()
}

/// Nearest distances via [`PointGrid`].
pub fn nearest_indexed(queries: &[Vec3], targets: &[Vec3]) -> Vec<f64> {
    let grid = PointGrid::new(targets);
    queries.par_iter().map(|q| grid.nearest_sq(q).sqrt()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean distance from reconstruction samples to ground-truth samples.
    pub accuracy: f64,
    /// Mean distance from ground-truth samples to reconstruction samples.
    pub completeness: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub tau: f64,
    pub n_recon_samples: usize,
    pub n_gt_samples: usize,
    pub seed: u64,
    /// How per-sample distances are reduced into accuracy and completeness.
    pub reduction: String,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Default F-score threshold in scene units.
pub const DEFAULT_TAU: f64 = 0.01;
pub const DEFAULT_EVAL_SAMPLES: usize = 100_000;

/// Compares two meshes through `n` area-weighted samples each. Both meshes
/// are sampled with the same seed, so swapping the arguments swaps
/// accuracy/completeness and precision/recall exactly.
pub fn evaluate(recon: &TriangleMesh, gt: &TriangleMesh, tau: f64, n: usize, seed: u64) -> Result<MetricsReport, MeshError> {
    let rs = sample_surface(recon, n, seed)?;
    let gs = sample_surface(gt, n, seed)?;
    let d_rg = nearest_indexed(&rs, &gs);
    let d_gr = nearest_indexed(&gs, &rs);
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let frac = |d: &[f64]| d.iter().filter(|x| **x <= tau).count() as f64 / d.len() as f64;
    let (precision, recall) = (frac(&d_rg), frac(&d_gr));
    Ok(MetricsReport {
        accuracy: mean(&d_rg),
        completeness: mean(&d_gr),
        precision,
        recall,
        f_score: f_score(precision, recall),
        tau,
        n_recon_samples: n,
        n_gt_samples: n,
        seed,
        reduction: "mean".into(),
    })
}
