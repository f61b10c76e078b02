//! Deformation representation: per-vertex rotation logarithm `r ∈ R³` and
//! symmetric stretch `s ∈ R⁶` relative to a template, plus exemplar blending.

mod format;
mod gradient;
pub mod rotation;

use std::collections::VecDeque;
use std::f64::consts::TAU;

use log::warn;
use nalgebra::Vector6;

use crate::error::{Error, Result};
use crate::mesh::{TriMesh, Vec3};

pub use format::{DR_MAGIC, DR_VERSION};
pub use gradient::local_gradient;
pub use rotation::{exp_rotation, log_rotation, polar_decompose, Mat3, Polar};

pub type Vec6 = Vector6<f64>;

/// Packs the upper triangle `(S11, S12, S13, S22, S23, S33)`.
pub fn pack_symmetric(s: &Mat3) -> Vec6 {
    Vec6::new(s[(0, 0)], s[(0, 1)], s[(0, 2)], s[(1, 1)], s[(1, 2)], s[(2, 2)])
}

pub fn unpack_symmetric(s: &Vec6) -> Mat3 {
    Mat3::new(s[0], s[1], s[2], s[1], s[3], s[4], s[2], s[4], s[5])
}

/// Per-vertex deformation representation, 9 numbers per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformRep {
    r: Vec<Vec3>,
    s: Vec<Vec6>,
}

impl DeformRep {
    pub fn new(r: Vec<Vec3>, s: Vec<Vec6>) -> Result<Self> {
        if r.len() != s.len() {
            return Err(Error::SizeMismatch {
                what: "stretch vectors",
                expected: r.len(),
                actual: s.len(),
            });
        }
        Ok(Self { r, s })
    }

    /// The representation of the undeformed template.
    pub fn identity(n_vertices: usize) -> Self {
        Self {
            r: vec![Vec3::zeros(); n_vertices],
            s: vec![pack_symmetric(&Mat3::identity()); n_vertices],
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.r.len()
    }

    pub fn rotation_logs(&self) -> &[Vec3] {
        &self.r
    }

    pub fn stretch_vectors(&self) -> &[Vec6] {
        &self.s
    }

    pub fn rotation(&self, i: usize) -> Mat3 {
        exp_rotation(&self.r[i])
    }

    pub fn stretch(&self, i: usize) -> Mat3 {
        unpack_symmetric(&self.s[i])
    }

    /// `T_i = exp(r_i) · S_i`.
    pub fn gradient(&self, i: usize) -> Mat3 {
        self.rotation(i) * self.stretch(i)
    }

    pub fn gradients(&self) -> Vec<Mat3> {
        (0..self.n_vertices()).map(|i| self.gradient(i)).collect()
    }

    /// Flattened `(r₁, s₁, r₂, s₂, …)`, length `9 n_v`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(9 * self.n_vertices());
        for (r, s) in self.r.iter().zip(&self.s) {
            out.extend_from_slice(r.as_slice());
            out.extend_from_slice(s.as_slice());
        }
        out
    }

    pub fn from_flat(data: &[f64]) -> Result<Self> {
        if data.len() % 9 != 0 {
            return Err(Error::Format(format!(
                "flat representation length {} is not a multiple of 9",
                data.len()
            )));
        }
        let (r, s) = data
            .chunks_exact(9)
            .map(|c| (Vec3::from_column_slice(&c[..3]), Vec6::from_column_slice(&c[3..])))
            .unzip();
        Ok(Self { r, s })
    }

    /// Largest rotation angle over all vertices.
    pub fn max_rotation_angle(&self) -> f64 {
        self.r.iter().map(|r| r.norm()).fold(0.0, f64::max)
    }
}

/// Blend coefficients `w = (w_R, w_S)` over `n` exemplars.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlendWeights {
    pub rotation: Vec<f64>,
    pub stretch: Vec<f64>,
}

impl BlendWeights {
    pub fn zeros(n: usize) -> Self {
        Self {
            rotation: vec![0.0; n],
            stretch: vec![0.0; n],
        }
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut w = Self::zeros(n);
        w.rotation[k] = 1.0;
        w.stretch[k] = 1.0;
        w
    }

    pub fn len(&self) -> usize {
        self.rotation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotation.is_empty()
    }

    pub fn validate(&self, n_exemplars: usize) -> Result<()> {
        for (what, v) in [("rotation weights", &self.rotation), ("stretch weights", &self.stretch)] {
            if v.len() != n_exemplars {
                return Err(Error::SizeMismatch {
                    what,
                    expected: n_exemplars,
                    actual: v.len(),
                });
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidInput(format!("{what} contain non-finite values")));
            }
        }
        Ok(())
    }
}

/// Encodes `target` against `template`: local gradient → polar decomposition
/// → rotation logarithm, then a greedy branch-consistency pass.
///
/// The consistency pass visits vertices breadth-first from vertex 0. Each
/// nonzero `r_i = θk` may be swapped for its antipodal representative
/// `(θ − 2π)k`; the one closer to the mean of already-visited neighbors wins,
/// with distance to `reference` (when given) added to the cost. Because of the
/// swap, `‖r_i‖` can exceed π for rotations close to a half turn.
pub fn encode(template: &TriMesh, target: &[Vec3], reference: Option<&DeformRep>) -> Result<DeformRep> {
    let n = template.n_vertices();
    if target.len() != n {
        return Err(Error::SizeMismatch {
            what: "target vertices",
            expected: n,
            actual: target.len(),
        });
    }
    if let Some(reference) = reference {
        if reference.n_vertices() != n {
            return Err(Error::SizeMismatch {
                what: "reference vertices",
                expected: n,
                actual: reference.n_vertices(),
            });
        }
    }
    let mut r = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut deficient = 0usize;
    for i in 0..n {
        let (t, flagged) = gradient::fit_local_gradient(template, target, i);
        deficient += flagged as usize;
        let polar = polar_decompose(&t)?;
        r.push(log_rotation(&polar.rotation)?);
        s.push(pack_symmetric(&polar.stretch));
    }
    if deficient > 0 {
        warn!("{deficient} one-rings have a rank-deficient Gram matrix; regularized");
    }
    make_consistent(template, &mut r, reference.map(|d| d.rotation_logs()));
    Ok(DeformRep { r, s })
}

/// Encodes every vertex's gradient from an explicit field (no mesh fit).
pub fn encode_gradients(gradients: &[Mat3]) -> Result<DeformRep> {
    let mut r = Vec::with_capacity(gradients.len());
    let mut s = Vec::with_capacity(gradients.len());
    for t in gradients {
        let polar = polar_decompose(t)?;
        r.push(log_rotation(&polar.rotation)?);
        s.push(pack_symmetric(&polar.stretch));
    }
    Ok(DeformRep { r, s })
}

fn make_consistent(mesh: &TriMesh, r: &mut [Vec3], reference: Option<&[Vec3]>) {
    let n = r.len();
    let mut fixed = vec![false; n];
    let mut queued = vec![false; n];
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if queued[seed] {
            continue;
        }
        queued[seed] = true;
        queue.push_back(seed);
        while let Some(v) = queue.pop_front() {
            let theta = r[v].norm();
            if theta > 1e-6 {
                let alt = r[v] * ((theta - TAU) / theta);
                let mut sum = Vec3::zeros();
                let mut count = 0usize;
                for &j in mesh.one_ring(v) {
                    if fixed[j] {
                        sum += r[j];
                        count += 1;
                    }
                }
                let cost = |c: &Vec3| {
                    let mut total = 0.0;
                    if count > 0 {
                        total += (c - sum / count as f64).norm_squared();
                    }
                    if let Some(reference) = reference {
                        total += (c - reference[v]).norm_squared();
                    }
                    total
                };
                if (count > 0 || reference.is_some()) && cost(&alt) < cost(&r[v]) {
                    r[v] = alt;
                }
            }
            fixed[v] = true;
            for &j in mesh.one_ring(v) {
                if !queued[j] {
                    queued[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
}

/// Blended gradient of one vertex:
/// `T_i(w) = exp(Σ_k w_R,k log R_i^k) · (I + Σ_k w_S,k (S_i^k − I))`.
pub fn blend(exemplars: &[DeformRep], w: &BlendWeights, vertex: usize) -> Result<Mat3> {
    w.validate(exemplars.len())?;
    let mut omega = Vec3::zeros();
    let mut m = Mat3::identity();
    for (k, ex) in exemplars.iter().enumerate() {
        if ex.n_vertices() <= vertex {
            return Err(Error::SizeMismatch {
                what: "exemplar vertices",
                expected: vertex + 1,
                actual: ex.n_vertices(),
            });
        }
        omega += w.rotation[k] * ex.r[vertex];
        m += w.stretch[k] * (ex.stretch(vertex) - Mat3::identity());
    }
    Ok(exp_rotation(&omega) * m)
}

/// Exemplar logs and stretch offsets laid out per vertex for repeated blending.
#[derive(Debug, Clone)]
pub struct ExemplarBasis {
    n_vertices: usize,
    n_exemplars: usize,
    logs: Vec<Vec3>,
    offsets: Vec<Mat3>,
}

impl ExemplarBasis {
    pub fn new(exemplars: &[DeformRep]) -> Result<Self> {
        let Some(first) = exemplars.first() else {
            return Err(Error::InvalidInput("no exemplars".into()));
        };
        let n_vertices = first.n_vertices();
        let n_exemplars = exemplars.len();
        for ex in exemplars {
            if ex.n_vertices() != n_vertices {
                return Err(Error::SizeMismatch {
                    what: "exemplar vertices",
                    expected: n_vertices,
                    actual: ex.n_vertices(),
                });
            }
        }
        let mut logs = Vec::with_capacity(n_vertices * n_exemplars);
        let mut offsets = Vec::with_capacity(n_vertices * n_exemplars);
        for i in 0..n_vertices {
            for ex in exemplars {
                logs.push(ex.r[i]);
                offsets.push(ex.stretch(i) - Mat3::identity());
            }
        }
        Ok(Self {
            n_vertices,
            n_exemplars,
            logs,
            offsets,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn n_exemplars(&self) -> usize {
        self.n_exemplars
    }

    /// `log R_i^k` for every exemplar `k` at vertex `i`.
    pub fn logs(&self, i: usize) -> &[Vec3] {
        &self.logs[i * self.n_exemplars..(i + 1) * self.n_exemplars]
    }

    /// `S_i^k − I` for every exemplar `k` at vertex `i`.
    pub fn stretch_offsets(&self, i: usize) -> &[Mat3] {
        &self.offsets[i * self.n_exemplars..(i + 1) * self.n_exemplars]
    }

    fn factors(&self, w: &BlendWeights, i: usize) -> (Vec3, Mat3) {
        let omega = self
            .logs(i)
            .iter()
            .zip(&w.rotation)
            .fold(Vec3::zeros(), |acc, (l, wk)| acc + *wk * l);
        let m = self
            .stretch_offsets(i)
            .iter()
            .zip(&w.stretch)
            .fold(Mat3::identity(), |acc, (o, wk)| acc + *wk * o);
        (omega, m)
    }

    pub fn blend_vertex(&self, w: &BlendWeights, i: usize) -> Mat3 {
        let (omega, m) = self.factors(w, i);
        exp_rotation(&omega) * m
    }

    pub fn blend_all(&self, w: &BlendWeights) -> Result<Vec<Mat3>> {
        w.validate(self.n_exemplars)?;
        Ok((0..self.n_vertices).map(|i| self.blend_vertex(w, i)).collect())
    }

    /// Analytic derivatives of `T_i(w)`: `(∂T/∂w_R,k, ∂T/∂w_S,k)` for all `k`.
    ///
    /// The rotation factor differentiates as `R [J_r(ω) log R^k]×` with `J_r`
    /// the right Jacobian of the exponential map.
    pub fn blend_derivatives(&self, w: &BlendWeights, i: usize) -> (Vec<Mat3>, Vec<Mat3>) {
        let (omega, m) = self.factors(w, i);
        let rot = exp_rotation(&omega);
        let jr = rotation::right_jacobian(&omega);
        let d_rot = self
            .logs(i)
            .iter()
            .map(|l| rot * rotation::skew(&(jr * l)) * m)
            .collect();
        let d_stretch = self.stretch_offsets(i).iter().map(|o| rot * o).collect();
        (d_rot, d_stretch)
    }
}
