//! Triangle meshes with cached one-ring adjacency and cotangent edge weights.
//!
//! Every mesh handled by the crate shares connectivity with a template, so the
//! adjacency and the weights are computed once at construction and the mesh is
//! immutable afterwards.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub type Vec3 = Vector3<f64>;

/// Angles at or above this value (degrees) are reported as near-degenerate.
const OBTUSE_WARN_DEG: f64 = 179.9;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WeightOptions {
    /// Replace negative cotangent weights by zero. Off by default.
    pub clamp_negative: bool,
}

/// Per-directed-edge cotangent weights stored alongside the one-ring lists.
///
/// `neighbors(i)` is sorted ascending and `weights(i)[k]` is `c_ij` for
/// `j = neighbors(i)[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
}

impl EdgeWeights {
    pub fn n_vertices(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Iterates `(j, c_ij)` over the one-ring of `i`.
    pub fn ring(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.neighbors(i)
            .iter()
            .copied()
            .zip(self.weights(i).iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let ring = self.neighbors(i);
        ring.binary_search(&j)
            .ok()
            .map(|k| self.weights[self.offsets[i] + k])
    }

    /// Number of directed edges.
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n_vertices() {
            for (j, c) in self.ring(i) {
                let back = self.get(j, i).unwrap_or(f64::INFINITY);
                worst = worst.max((c - back).abs());
            }
        }
        worst
    }
}

/// Computes cotangent weights `c_ij = (cot α_ij + cot β_ij) / 2` for every edge.
///
/// Boundary edges keep the single opposite angle, `c_ij = cot α_ij / 2`.
pub fn cotangent_weights(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
    options: WeightOptions,
) -> Result<EdgeWeights> {
    let n = vertices.len();
    // undirected edge (lo, hi) -> (accumulated weight, incident face count)
    let mut edges: HashMap<(usize, usize), (f64, u32)> = HashMap::with_capacity(faces.len() * 3);
    let mut near_flat = 0usize;

    for face in faces {
        for corner in 0..3 {
            let c = face[corner];
            let a = face[(corner + 1) % 3];
            let b = face[(corner + 2) % 3];
            let u = vertices[a] - vertices[c];
            let v = vertices[b] - vertices[c];
            let cross = u.cross(&v).norm();
            let dot = u.dot(&v);
            let scale = u.norm() * v.norm();
            if scale > 0.0 && dot / scale <= (OBTUSE_WARN_DEG.to_radians()).cos() {
                near_flat += 1;
            }
            let cot = if cross > 1e-14 * scale {
                dot / cross
            } else {
                0.0
            };
            let key = (a.min(b), a.max(b));
            let entry = edges.entry(key).or_insert((0.0, 0));
            entry.0 += 0.5 * cot;
        }
        for k in 0..3 {
            let a = face[k];
            let b = face[(k + 1) % 3];
            let entry = edges.get_mut(&(a.min(b), a.max(b))).expect("edge inserted above");
            entry.1 += 1;
            if entry.1 > 2 {
                return Err(Error::NonManifoldEdge(a.min(b), a.max(b)));
            }
        }
    }
    if near_flat > 0 {
        warn!("{near_flat} triangle corners have angles >= {OBTUSE_WARN_DEG} degrees");
    }

    let mut rings: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (&(a, b), &(w, _)) in &edges {
        let w = if options.clamp_negative { w.max(0.0) } else { w };
        rings[a].push((b, w));
        rings[b].push((a, w));
    }
    let mut offsets = Vec::with_capacity(n + 1);
    let mut neighbors = Vec::with_capacity(edges.len() * 2);
    let mut weights = Vec::with_capacity(edges.len() * 2);
    offsets.push(0);
    for mut ring in rings {
        ring.sort_unstable_by_key(|&(j, _)| j);
        for (j, w) in ring {
            neighbors.push(j);
            weights.push(w);
        }
        offsets.push(neighbors.len());
    }
    Ok(EdgeWeights {
        offsets,
        neighbors,
        weights,
    })
}

/// Shared-connectivity triangle mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    weights: EdgeWeights,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        Self::with_options(vertices, faces, WeightOptions::default())
    }

    pub fn with_options(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        options: WeightOptions,
    ) -> Result<Self> {
        if vertices.is_empty() || faces.is_empty() {
            return Err(Error::EmptyMesh);
        }
        for (fi, f) in faces.iter().enumerate() {
            for &index in f {
                if index >= vertices.len() {
                    return Err(Error::IndexOutOfRange {
                        face: fi,
                        index,
                        count: vertices.len(),
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::DegenerateFace { face: fi });
            }
        }
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidInput(format!("vertex {i} is not finite")));
        }
        let weights = cotangent_weights(&vertices, &faces, options)?;
        Ok(Self {
            vertices,
            faces,
            weights,
        })
    }

    /// Same connectivity, new positions. Weights are recomputed.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::SizeMismatch {
                what: "vertices",
                expected: self.vertices.len(),
                actual: vertices.len(),
            });
        }
        Self::new(vertices, self.faces.clone())
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn cot_weights(&self) -> &EdgeWeights {
        &self.weights
    }

    pub fn one_ring(&self, i: usize) -> &[usize] {
        self.weights.neighbors(i)
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(&self.vertices)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        bbox_diagonal(&self.vertices)
    }

    /// Cotangent Laplacian `δ_i = Σ_j c_ij (x_i − x_j)` of arbitrary per-vertex positions.
    pub fn laplacian(&self, positions: &[Vec3]) -> Vec<Vec3> {
        (0..self.n_vertices())
            .map(|i| {
                self.weights
                    .ring(i)
                    .fold(Vec3::zeros(), |acc, (j, c)| acc + c * (positions[i] - positions[j]))
            })
            .collect()
    }

    /// Connected components as a per-vertex label; returns `(labels, count)`.
    pub fn components(&self) -> (Vec<usize>, usize) {
        let n = self.n_vertices();
        let mut label = vec![usize::MAX; n];
        let mut count = 0;
        let mut stack = Vec::new();
        for seed in 0..n {
            if label[seed] != usize::MAX {
                continue;
            }
            label[seed] = count;
            stack.push(seed);
            while let Some(v) = stack.pop() {
                for &u in self.one_ring(v) {
                    if label[u] == usize::MAX {
                        label[u] = count;
                        stack.push(u);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }

    pub fn load_obj(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_obj(&text)
    }

    /// Parses `v` and `f` records; every other record is ignored.
    pub fn parse_obj(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            let mut tokens = line.split_whitespace();
            match tokens.next() {
                Some("v") => {
                    let mut xyz = [0.0; 3];
                    for slot in &mut xyz {
                        let tok = tokens.next().ok_or_else(|| Error::Parse {
                            line: line_no,
                            message: "vertex needs three coordinates".into(),
                        })?;
                        *slot = tok.parse().map_err(|_| Error::Parse {
                            line: line_no,
                            message: format!("bad coordinate {tok:?}"),
                        })?;
                    }
                    vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
                }
                Some("f") => {
                    let mut idx = Vec::with_capacity(3);
                    for tok in tokens {
                        let head = tok.split('/').next().unwrap_or("");
                        let raw: i64 = head.parse().map_err(|_| Error::Parse {
                            line: line_no,
                            message: format!("bad face index {tok:?}"),
                        })?;
                        let resolved = match raw {
                            r if r > 0 => r - 1,
                            r if r < 0 => vertices.len() as i64 + r,
                            _ => -1,
                        };
                        if resolved < 0 {
                            return Err(Error::Parse {
                                line: line_no,
                                message: format!("face index {raw} out of range"),
                            });
                        }
                        idx.push(resolved as usize);
                    }
                    if idx.len() != 3 {
                        return Err(Error::NonTriangularFace {
                            face: faces.len(),
                            count: idx.len(),
                        });
                    }
                    faces.push([idx[0], idx[1], idx[2]]);
                }
                _ => {}
            }
        }
        Self::new(vertices, faces)
    }

    pub fn to_obj_string(&self) -> String {
        obj_string(&self.vertices, &self.faces)
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_obj_string().as_bytes())
    }
}

/// OBJ text for arbitrary positions over a face list. Coordinates use the
/// shortest representation that parses back to the same `f64`.
pub fn obj_string(vertices: &[Vec3], faces: &[[usize; 3]]) -> String {
    let mut out = String::with_capacity(vertices.len() * 48 + faces.len() * 24);
    for v in vertices {
        let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return Vec3::zeros();
    }
    points.iter().sum::<Vec3>() / points.len() as f64
}

pub fn bbox_diagonal(points: &[Vec3]) -> f64 {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    if points.is_empty() {
        0.0
    } else {
        (hi - lo).norm()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn tetrahedron() -> TriMesh {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ];
        let f = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
        TriMesh::new(v, f).unwrap()
    }

    #[test]
    fn single_triangle_obj() {
        let m = TriMesh::parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        assert_eq!(m.n_vertices(), 3);
        assert_eq!(m.n_faces(), 1);
    }

    #[test]
    fn quad_face_rejected() {
        let err = TriMesh::parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap_err();
        assert!(matches!(err, Error::NonTriangularFace { count: 4, .. }));
    }

    #[test]
    fn out_of_range_index_rejected() {
        let err = TriMesh::parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 7\n").unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { index: 6, .. }));
        let err = TriMesh::parse_obj("v 0 0 0\nv 1 0 x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn ignores_normals_texcoords_and_slashes() {
        let text = "mtllib a.mtl\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nvt 0 0\nusemtl x\nf 1/1/1 2/1/1 3//1\n";
        let m = TriMesh::parse_obj(text).unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2]]);
    }

    #[test]
    fn tetrahedron_one_rings() {
        let m = tetrahedron();
        assert_eq!(m.n_vertices(), 4);
        assert_eq!(m.n_faces(), 4);
        for i in 0..4 {
            let expected: Vec<usize> = (0..4).filter(|&j| j != i).collect();
            assert_eq!(m.one_ring(i), expected.as_slice());
        }
    }

    #[test]
    fn equilateral_pair_weight() {
        let h = 3f64.sqrt() / 2.0;
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.5, h, 0.0),
            Vec3::new(0.5, -h, 0.0),
        ];
        let m = TriMesh::new(v, vec![[0, 1, 2], [1, 0, 3]]).unwrap();
        let expected = 1.0 / 3f64.sqrt();
        assert!((m.cot_weights().get(0, 1).unwrap() - expected).abs() < 1e-12);
        assert!((m.cot_weights().get(1, 0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn right_angle_boundary_weight_is_zero() {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let m = TriMesh::new(v, vec![[0, 1, 2]]).unwrap();
        // edge (1, 2) is opposite the right angle at vertex 0
        assert!(m.cot_weights().get(1, 2).unwrap().abs() < 1e-15);
        assert_eq!(m.cot_weights().max_asymmetry(), 0.0);
    }

    #[test]
    fn negative_weights_kept_unless_clamped() {
        // obtuse triangles on both sides of edge (0, 1)
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(4.0, 0.0, 0.0),
            Vec3::new(2.0, 0.3, 0.0),
            Vec3::new(2.0, -0.3, 0.0),
        ];
        let faces = vec![[0, 1, 2], [1, 0, 3]];
        let raw = TriMesh::new(v.clone(), faces.clone()).unwrap();
        assert!(raw.cot_weights().get(0, 1).unwrap() < 0.0);
        let clamped = TriMesh::with_options(
            v,
            faces,
            WeightOptions {
                clamp_negative: true,
            },
        )
        .unwrap();
        assert_eq!(clamped.cot_weights().get(0, 1).unwrap(), 0.0);
    }

    #[test]
    fn non_manifold_edge_rejected() {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ];
        let err = TriMesh::new(v, vec![[0, 1, 2], [1, 0, 3], [0, 1, 4]]).unwrap_err();
        assert!(matches!(err, Error::NonManifoldEdge(0, 1)));
    }

    #[test]
    fn degenerate_and_empty_rejected() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert!(matches!(
            TriMesh::new(v.clone(), vec![[0, 0, 1]]),
            Err(Error::DegenerateFace { face: 0 })
        ));
        assert!(matches!(TriMesh::new(v, vec![]), Err(Error::EmptyMesh)));
        assert!(matches!(TriMesh::parse_obj(""), Err(Error::EmptyMesh)));
    }

    #[test]
    fn planar_interior_laplacian_vanishes() {
        // irregular planar fan around vertex 0, closed one-ring
        let n = 7;
        let mut v = vec![Vec3::new(0.1, -0.05, 0.0)];
        for k in 0..n {
            let a = k as f64 / n as f64 * std::f64::consts::TAU + 0.2 * (k as f64).sin();
            let r = 1.0 + 0.3 * (3.0 * k as f64).cos();
            v.push(Vec3::new(r * a.cos(), r * a.sin(), 0.0));
        }
        let faces: Vec<[usize; 3]> = (0..n).map(|k| [0, 1 + k, 1 + (k + 1) % n]).collect();
        let m = TriMesh::new(v, faces).unwrap();
        let lap = m.laplacian(m.vertices());
        assert!(lap[0].norm() < 1e-9, "{}", lap[0].norm());
    }

    #[test]
    fn obj_round_trip() {
        let m = tetrahedron();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.obj");
        m.save_obj(&path).unwrap();
        let back = TriMesh::load_obj(&path).unwrap();
        assert_eq!(back.faces(), m.faces());
        for (a, b) in back.vertices().iter().zip(m.vertices()) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn components_counted() {
        let v = vec![
            Vec3::zeros(),
            Vec3::x(),
            Vec3::y(),
            Vec3::new(5.0, 0.0, 0.0),
            Vec3::new(6.0, 0.0, 0.0),
            Vec3::new(5.0, 1.0, 0.0),
        ];
        let m = TriMesh::new(v, vec![[0, 1, 2], [3, 4, 5]]).unwrap();
        assert_eq!(m.components().1, 2);
        assert_eq!(tetrahedron().components().1, 1);
    }
}
