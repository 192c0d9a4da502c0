//! Marching cubes without case tables.
//!
//! Each cell's isosurface boundary is built face by face: on every cube face
//! the edge crossings are joined into oriented segments (ambiguous faces are
//! resolved with the asymptotic decider), the segments are chained into
//! loops and each loop is fan-triangulated. Both cells sharing a face make
//! the same decision, so the result is watertight on the grid.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use super::DistanceField;
use crate::error::GeometryError;
use crate::math::Vec3;

type V = Vec3<f64>;

pub const MIN_RESOLUTION: usize = 16;
pub const MAX_RESOLUTION: usize = 512;

/// Corner indices `x + 2y + 4z` of each cube face, counter-clockwise when
/// seen from outside the cube.
const FACES: [[usize; 4]; 6] = [
    [0, 4, 6, 2],
    [1, 3, 7, 5],
    [0, 1, 5, 4],
    [2, 6, 7, 3],
    [0, 2, 3, 1],
    [4, 5, 7, 6],
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<V>,
    pub faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    fn corners(&self, f: &[u32; 3]) -> [V; 3] {
        f.map(|i| self.vertices[i as usize])
    }

    /// Unnormalized face normal (twice the area).
    pub fn face_normal(&self, face: usize) -> V {
        let [a, b, c] = self.corners(&self.faces[face]);
        (b - a).cross(c - a)
    }

    pub fn face_centroid(&self, face: usize) -> V {
        let [a, b, c] = self.corners(&self.faces[face]);
        (a + b + c) / 3.0
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|i| 0.5 * self.face_normal(i).norm()).sum()
    }

    /// Area-weighted uniform surface samples.
    pub fn sample_points(&self, count: usize, rng: &mut impl Rng) -> Vec<V> {
        let mut cdf = Vec::with_capacity(self.faces.len());
        let mut total = 0.0;
        for i in 0..self.faces.len() {
            total += 0.5 * self.face_normal(i).norm();
            cdf.push(total);
        }
        if total <= 0.0 {
            return Vec::new();
        }
        (0..count)
            .map(|_| {
                let r = rng.random::<f64>() * total;
                let fi = cdf.partition_point(|&c| c < r).min(cdf.len() - 1);
                let [a, b, c] = self.corners(&self.faces[fi]);
                let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                a + (b - a) * u + (c - a) * v
            })
            .collect()
    }

    pub fn to_obj_string(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 40 + self.faces.len() * 24);
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(self.to_obj_string().as_bytes())?;
        w.flush()
    }

    /// Reads `v` and `f` records; polygons are fan-triangulated and
    /// `v/vt/vn` index forms are accepted.
    pub fn load_obj(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let bad = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidData, msg);
        let mut mesh = TriangleMesh::default();
        let reader = BufReader::new(std::fs::File::open(path)?);
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
                    if c.len() != 3 {
                        return Err(bad(format!("line {}: vertex needs 3 coordinates", lineno + 1)));
                    }
                    mesh.vertices.push(V::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let n = mesh.vertices.len() as i64;
                    let idx: Vec<u32> = it
                        .map(|t| {
                            let first = t.split('/').next().unwrap_or("");
                            let i: i64 = first
                                .parse()
                                .map_err(|_| bad(format!("line {}: bad index {t}", lineno + 1)))?;
                            let i = if i < 0 { n + i } else { i - 1 };
                            if i < 0 || i >= n {
                                return Err(bad(format!("line {}: index out of range", lineno + 1)));
                            }
                            Ok(i as u32)
                        })
                        .collect::<Result<_, _>>()?;
                    if idx.len() < 3 {
                        return Err(bad(format!("line {}: face needs 3 vertices", lineno + 1)));
                    }
                    for k in 1..idx.len() - 1 {
                        mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Ok(mesh)
    }
}

/// Grid sample values for one z-layer, `(n + 1)^2` entries, x fastest.
fn eval_layer(field: &dyn DistanceField, origin: V, h: V, n: usize, k: usize) -> Vec<f64> {
    let m = n + 1;
    let z = origin.z + h.z * k as f64;
    let mut out = vec![0.0; m * m];
    out.par_chunks_mut(m).enumerate().for_each(|(j, row)| {
        let y = origin.y + h.y * j as f64;
        let pts: Vec<V> = (0..m).map(|i| V::new(origin.x + h.x * i as f64, y, z)).collect();
        field.distance_batch(&pts, row);
    });
    out
}

/// Global edge id: lower grid corner plus axis.
fn edge_key(m: u64, i: usize, j: usize, k: usize, axis: usize) -> u64 {
    (((k as u64 * m) + j as u64) * m + i as u64) * 3 + axis as u64
}

/// One cell's polygon loops as lists of edge keys, plus the crossing
/// position for each key.
type CellLoops = Vec<Vec<(u64, V)>>;

fn cell_loops(values: &[f64; 8], pos: &[V; 8], cell: (usize, usize, usize), m: u64) -> CellLoops {
    let inside = values.map(|v| v < 0.0);
    if inside.iter().all(|&b| b) || inside.iter().all(|&b| !b) {
        return Vec::new();
    }
    let crossing = |a: usize, b: usize| -> (u64, V) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let axis = (hi ^ lo).trailing_zeros() as usize;
        let key = edge_key(
            m,
            cell.0 + (lo & 1),
            cell.1 + ((lo >> 1) & 1),
            cell.2 + ((lo >> 2) & 1),
            axis,
        );
        // always interpolate from the lower corner so neighbours agree bitwise
        let t = values[lo] / (values[lo] - values[hi]);
        (key, pos[lo] + (pos[hi] - pos[lo]) * t)
    };

    // segment map: start edge key -> end edge key
    let mut next: Vec<((u64, V), (u64, V))> = Vec::with_capacity(12);
    for face in FACES {
        let mut entries = [0usize; 2];
        let mut exits = [0usize; 2];
        let (mut ne, mut nx) = (0, 0);
        for e in 0..4 {
            let (a, b) = (face[e], face[(e + 1) % 4]);
            if inside[a] != inside[b] {
                if inside[b] {
                    entries[ne] = e;
                    ne += 1;
                } else {
                    exits[nx] = e;
                    nx += 1;
                }
            }
        }
        let edge = |e: usize| crossing(face[e], face[(e + 1) % 4]);
        match ne {
            0 => {}
            1 => next.push((edge(entries[0]), edge(exits[0]))),
            _ => {
                let f = face.map(|c| values[c]);
                let denom = f[0] + f[2] - f[1] - f[3];
                let saddle = if denom.abs() > 0.0 {
                    (f[0] * f[2] - f[1] * f[3]) / denom
                } else {
                    0.25 * (f[0] + f[1] + f[2] + f[3])
                };
                // inside corners joined through the saddle: each entry links to
                // the previous exit in cyclic order, otherwise to the next one
                let join_inside = saddle < 0.0;
                for &en in &entries {
                    let target = exits
                        .iter()
                        .copied()
                        .min_by_key(|&x| {
                            let fwd = (x + 4 - en) % 4;
                            if join_inside {
                                4 - fwd
                            } else {
                                fwd
                            }
                        })
                        .unwrap();
                    next.push((edge(en), edge(target)));
                }
            }
        }
    }

    let mut loops = Vec::new();
    let mut used = vec![false; next.len()];
    for s in 0..next.len() {
        if used[s] {
            continue;
        }
        let mut poly = Vec::new();
        let mut cur = s;
        loop {
            used[cur] = true;
            poly.push(next[cur].0);
            let end = next[cur].1 .0;
            match (0..next.len()).find(|&i| !used[i] && next[i].0 .0 == end) {
                Some(i) => cur = i,
                None => break,
            }
        }
        if poly.len() >= 3 {
            loops.push(poly);
        }
    }
    loops
}

/// Extracts the zero-level set over the field's bounding box with
/// `resolution` cells per axis. Triangles wind counter-clockwise around the
/// outward normal.
pub fn extract_mesh(field: &dyn DistanceField, resolution: usize) -> Result<TriangleMesh, GeometryError> {
    if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&resolution) {
        return Err(GeometryError::InvalidResolution(resolution));
    }
    let n = resolution;
    let m = (n + 1) as u64;
    let bounds = field.bounds();
    let origin = bounds.min;
    let h = bounds.extent() / n as f64;
    let grid = |i: usize, j: usize, k: usize| {
        V::new(
            origin.x + h.x * i as f64,
            origin.y + h.y * j as f64,
            origin.z + h.z * k as f64,
        )
    };

    let mut mesh = TriangleMesh::default();
    let mut index: HashMap<u64, u32> = HashMap::new();
    let mut below = eval_layer(field, origin, h, n, 0);
    for k in 0..n {
        let above = eval_layer(field, origin, h, n, k + 1);
        let slab: Vec<CellLoops> = (0..n * n)
            .into_par_iter()
            .map(|c| {
                let (i, j) = (c % n, c / n);
                let mut vals = [0.0; 8];
                let mut pos = [V::zero(); 8];
                for corner in 0..8 {
                    let (di, dj, dk) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
                    let layer = if dk == 0 { &below } else { &above };
                    vals[corner] = layer[(j + dj) * (n + 1) + i + di];
                    pos[corner] = grid(i + di, j + dj, k + dk);
                }
                cell_loops(&vals, &pos, (i, j, k), m)
            })
            .collect();
        for loops in slab {
            for poly in loops {
                let ids: Vec<u32> = poly
                    .iter()
                    .map(|&(key, p)| {
                        *index.entry(key).or_insert_with(|| {
                            mesh.vertices.push(p);
                            (mesh.vertices.len() - 1) as u32
                        })
                    })
                    .collect();
                for t in 1..ids.len() - 1 {
                    mesh.faces.push([ids[0], ids[t], ids[t + 1]]);
                }
            }
        }
        below = above;
    }
    if mesh.faces.is_empty() {
        return Err(GeometryError::EmptyLevelSet);
    }
    Ok(mesh)
}
