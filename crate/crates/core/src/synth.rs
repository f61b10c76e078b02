//! Synthetic stand-in for a caricature dataset: a parametric head mask with a
//! 68-point landmark layout, seeded smooth deformations for exemplars, and
//! posed samples drawn from a [`ShapeModel`].
//!
//! Model space: x right, y down, the face looks towards −z, lengths in
//! centimetres. A head is about 15 cm wide and 19 cm tall, and the default
//! poses map a centimetre to 16–20 pixels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deform::{encode, exp_rotation, DeformRep, Mat3};
use crate::error::{Error, Result};
use crate::fit::LandmarkMapping;
use crate::mesh::{centroid, TriMesh, Vec3};
use crate::model::ShapeModel;
use crate::pose::{euler_to_matrix, project, LandmarkSet2D, Pose, Vec2};

/// Head width; shapes are laid out on a unit-width head and scaled by this.
pub const UNIT: f64 = 15.0;

const HALF_WIDTH: f64 = 0.5;
const HALF_HEIGHT: f64 = 0.65;
const DEPTH: f64 = 0.45;
const AZIMUTH: f64 = 120.0 * PI / 180.0;
const ROW_EXTENT: f64 = 0.95;

/// Side length of the synthetic image frame in pixels.
pub const FRAME: f64 = 512.0;

/// Normalized layout of landmarks 17–67 (brows, nose, eyes, mouth);
/// x in units of face half-width, y in units of face half-height.
const FRONT_LAYOUT: [(f64, f64); 51] = [
    (-0.78, -0.42), (-0.62, -0.50), (-0.45, -0.52), (-0.28, -0.50), (-0.12, -0.45),
    (0.12, -0.45), (0.28, -0.50), (0.45, -0.52), (0.62, -0.50), (0.78, -0.42),
    (0.0, -0.30), (0.0, -0.18), (0.0, -0.06), (0.0, 0.06),
    (-0.18, 0.16), (-0.09, 0.19), (0.0, 0.21), (0.09, 0.19), (0.18, 0.16),
    (-0.62, -0.28), (-0.52, -0.34), (-0.40, -0.34), (-0.30, -0.27), (-0.40, -0.23), (-0.52, -0.23),
    (0.30, -0.27), (0.40, -0.34), (0.52, -0.34), (0.62, -0.28), (0.52, -0.23), (0.40, -0.23),
    (-0.35, 0.45), (-0.22, 0.38), (-0.09, 0.35), (0.0, 0.36), (0.09, 0.35), (0.22, 0.38),
    (0.35, 0.45), (0.22, 0.54), (0.10, 0.58), (0.0, 0.59), (-0.10, 0.58), (-0.22, 0.54),
    (-0.30, 0.45), (-0.10, 0.42), (0.0, 0.42), (0.10, 0.42), (0.30, 0.45), (0.10, 0.48),
    (0.0, 0.49), (-0.10, 0.48),
];

fn gauss(x: f64, y: f64, cx: f64, cy: f64, sx: f64, sy: f64) -> f64 {
    (-((x - cx) / sx).powi(2) - ((y - cy) / sy).powi(2)).exp()
}

/// Outward relief of facial features at normalized front coordinates.
fn relief(x: f64, y: f64) -> f64 {
    let nose = 0.12 * gauss(x, y, 0.0, 0.05, 0.12, 0.25);
    let brow = 0.03 * (-((y + 0.37) / 0.08).powi(2)).exp() * (-(x / 0.7).powi(4)).exp();
    let eyes = -0.03 * (gauss(x, y, -0.37, -0.19, 0.15, 0.08) + gauss(x, y, 0.37, -0.19, 0.15, 0.08));
    let lips = 0.02 * gauss(x, y, 0.0, 0.43, 0.3, 0.06);
    let chin = 0.03 * gauss(x, y, 0.0, 0.85, 0.25, 0.1);
    nose + brow + eyes + lips + chin
}

fn grid_point(u: f64, y: f64) -> Vec3 {
    let profile = (1.0 - (y / HALF_HEIGHT).powi(2)).max(0.0).sqrt();
    let x = HALF_WIDTH * profile * u.sin();
    let front = u.cos().max(0.0).powi(2);
    let z = -DEPTH * profile * u.cos() - front * relief(x / HALF_WIDTH, y / HALF_HEIGHT);
    Vec3::new(x, y, z)
}

/// A `cols × rows` head mask with its landmark mapping.
///
/// Columns sweep azimuth over ±120°, rows sweep the face from forehead to chin.
/// Cells are split along mirrored diagonals so the connectivity is symmetric.
pub fn head_template(cols: usize, rows: usize) -> Result<(TriMesh, LandmarkMapping)> {
    if cols < 5 || rows < 5 {
        return Err(Error::InvalidInput(format!(
            "head grid must be at least 5×5, got {cols}×{rows}"
        )));
    }
    let azimuth = |c: usize| -AZIMUTH + 2.0 * AZIMUTH * c as f64 / (cols - 1) as f64;
    let height = |r: usize| HALF_HEIGHT * ROW_EXTENT * (-1.0 + 2.0 * r as f64 / (rows - 1) as f64);
    let idx = |c: usize, r: usize| r * cols + c;

    let mut vertices = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            vertices.push(grid_point(azimuth(c), height(r)));
        }
    }
    let mut faces = Vec::with_capacity(2 * (cols - 1) * (rows - 1));
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let (a, b, cc, d) = (idx(c, r), idx(c + 1, r), idx(c + 1, r + 1), idx(c, r + 1));
            if 2 * c + 1 < cols {
                faces.push([a, d, cc]);
                faces.push([a, cc, b]);
            } else {
                faces.push([a, d, b]);
                faces.push([b, d, cc]);
            }
        }
    }

    let fixed = FRONT_LAYOUT
        .iter()
        .map(|&(fx, fy)| {
            let target = (0.8 * HALF_WIDTH * fx, HALF_HEIGHT * (0.05 + 0.85 * fy));
            (0..vertices.len())
                .filter(|&i| azimuth(i % cols).cos() > 0.0)
                .min_by(|&i, &j| {
                    let d = |k: usize| (vertices[k].x - target.0).powi(2) + (vertices[k].y - target.1).powi(2);
                    d(i).total_cmp(&d(j))
                })
                .expect("front-facing vertices exist")
        })
        .collect();

    let mut lines = Vec::with_capacity(17);
    let mut defaults = Vec::with_capacity(17);
    let row_of = |k: usize| {
        let y = HALF_HEIGHT * (-0.2 + (ROW_EXTENT + 0.2) * k as f64 / 8.0);
        (0..rows)
            .min_by(|&a, &b| (height(a) - y).abs().total_cmp(&(height(b) - y).abs()))
            .expect("rows exist")
    };
    for k in 0..17 {
        if k == 8 {
            let c = (0..cols)
                .min_by(|&a, &b| azimuth(a).abs().total_cmp(&azimuth(b).abs()))
                .expect("cols exist");
            lines.push(vec![idx(c, rows - 1)]);
            defaults.push(idx(c, rows - 1));
            continue;
        }
        let (row, left) = if k < 8 { (row_of(k), true) } else { (row_of(16 - k), false) };
        let line: Vec<usize> = (0..cols)
            .filter(|&c| if left { azimuth(c) < 0.0 } else { azimuth(c) > 0.0 })
            .map(|c| idx(c, row))
            .collect();
        let sign = if left { -1.0 } else { 1.0 };
        let default = *line
            .iter()
            .max_by(|&&a, &&b| (sign * vertices[a].x).total_cmp(&(sign * vertices[b].x)).then(b.cmp(&a)))
            .expect("non-empty line");
        lines.push(line);
        defaults.push(default);
    }
    let mesh = TriMesh::new(vertices.iter().map(|p| p * UNIT).collect(), faces)?;
    let mapping = LandmarkMapping::new(fixed, lines, defaults, mesh.n_vertices())?;
    Ok((mesh, mapping))
}

/// A seeded smooth nonlinear deformation: anisotropic scaling, a twist about
/// the vertical axis, a front-to-back bend and a few Gaussian bumps.
pub fn smooth_deformation(vertices: &[Vec3], seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let c = centroid(vertices);
    let scale = Vec3::new(
        1.0 + rng.random_range(-0.15..0.15),
        1.0 + rng.random_range(-0.15..0.15),
        1.0 + rng.random_range(-0.15..0.15),
    );
    let twist = rng.random_range(-0.3..0.3);
    let bend = rng.random_range(-0.2..0.2);
    let bumps: Vec<(Vec3, f64, Vec3)> = (0..3)
        .map(|_| {
            let center = vertices[rng.random_range(0..vertices.len().max(1))];
            let radius = rng.random_range(0.15..0.3);
            let disp = Vec3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            );
            (center, radius, disp)
        })
        .collect();
    vertices
        .iter()
        .map(|p| {
            let mut q = ((p - c) / UNIT).component_mul(&scale);
            q = exp_rotation(&Vec3::new(0.0, twist * q.y, 0.0)) * q;
            q.z += bend * q.y * q.y;
            for (center, radius, disp) in &bumps {
                q += disp * (-((p - center) / UNIT).norm_squared() / (radius * radius)).exp();
            }
            c + q * UNIT
        })
        .collect()
}

/// Encoded exemplars `smooth_deformation(template, seed + k)` for `k < n`.
pub fn exemplars(template: &TriMesh, n: usize, seed: u64) -> Result<Vec<DeformRep>> {
    (0..n as u64)
        .map(|k| encode(template, &smooth_deformation(template.vertices(), seed.wrapping_add(k)), None))
        .collect()
}

/// Template, `n` exemplars and a full-rank PCA (`m = n − 1`).
pub fn demo_model(cols: usize, rows: usize, n: usize, seed: u64) -> Result<ShapeModel> {
    let (template, mapping) = head_template(cols, rows)?;
    let ex = exemplars(&template, n, seed)?;
    ShapeModel::build(template, ex, mapping, n.saturating_sub(1))
}

/// Ranges for random poses, in radians and pixels.
#[derive(Debug, Clone, Copy)]
pub struct PoseRange {
    pub max_yaw: f64,
    pub max_pitch: f64,
    pub max_roll: f64,
    pub scale: (f64, f64),
    pub max_offset: f64,
}

impl Default for PoseRange {
    fn default() -> Self {
        Self {
            max_yaw: 45f64.to_radians(),
            max_pitch: 30f64.to_radians(),
            max_roll: 20f64.to_radians(),
            scale: (240.0 / UNIT, 300.0 / UNIT),
            max_offset: 20.0,
        }
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, m: f64) -> f64 {
    if m > 0.0 {
        rng.random_range(-m..=m)
    } else {
        0.0
    }
}

/// A pose placing `positions` near the centre of the frame.
pub fn random_pose(rng: &mut impl Rng, positions: &[Vec3], range: &PoseRange) -> Pose {
    let pitch = symmetric(rng, range.max_pitch);
    let yaw = symmetric(rng, range.max_yaw);
    let roll = symmetric(rng, range.max_roll);
    let scale = rng.random_range(range.scale.0..=range.scale.1);
    let off = Vec2::new(symmetric(rng, range.max_offset), symmetric(rng, range.max_offset));
    let rc = euler_to_matrix(pitch, yaw, roll) * centroid(positions);
    let t = Vec2::repeat(FRAME / 2.0) + off - scale * Vec2::new(rc.x, rc.y);
    Pose {
        scale,
        pitch,
        yaw,
        roll,
        tx: t.x,
        ty: t.y,
    }
}

/// The vertex of each silhouette line that lies on the visible contour:
/// the one furthest out sideways once pitch and yaw are applied.
pub fn contour_silhouette(mapping: &LandmarkMapping, positions: &[Vec3], pose: &Pose) -> Vec<usize> {
    let r: Mat3 = euler_to_matrix(pose.pitch, pose.yaw, 0.0);
    mapping
        .silhouette_lines()
        .iter()
        .enumerate()
        .map(|(k, line)| {
            let sign = if k < 8 { -1.0 } else { 1.0 };
            *line
                .iter()
                .max_by(|&&a, &&b| {
                    (sign * (r * positions[a]).x)
                        .total_cmp(&(sign * (r * positions[b]).x))
                        .then(b.cmp(&a))
                })
                .expect("non-empty line")
        })
        .collect()
}

/// Projected landmarks with silhouette points taken on the true contour.
pub fn render_landmarks(mapping: &LandmarkMapping, positions: &[Vec3], pose: &Pose) -> Result<LandmarkSet2D> {
    let contour = contour_silhouette(mapping, positions, pose);
    let pts = contour
        .iter()
        .chain(mapping.fixed_indices())
        .map(|&v| project(&positions[v], pose))
        .collect();
    LandmarkSet2D::new(pts)
}

/// One synthetic observation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub coeffs: Vec<f64>,
    pub positions: Vec<Vec3>,
    pub pose: Pose,
    pub landmarks: LandmarkSet2D,
}

/// Draws PCA coefficients uniformly in `±2√λ_j`, decodes them and renders
/// landmarks under a random pose.
pub fn sample(model: &ShapeModel, rng: &mut impl Rng, range: &PoseRange) -> Result<Sample> {
    let coeffs: Vec<f64> = model
        .eigenvalues()
        .iter()
        .map(|&l| {
            let b = 2.0 * l.max(0.0).sqrt();
            if b > 0.0 {
                rng.random_range(-b..=b)
            } else {
                0.0
            }
        })
        .collect();
    let positions = model.decode(&coeffs, model.template().centroid())?;
    let pose = random_pose(rng, &positions, range);
    let landmarks = render_landmarks(model.mapping(), &positions, &pose)?;
    Ok(Sample {
        coeffs,
        positions,
        pose,
        landmarks,
    })
}

/// `count` samples from a single seeded stream.
pub fn samples(model: &ShapeModel, count: usize, seed: u64, range: &PoseRange) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample(model, &mut rng, range)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_is_a_connected_manifold_grid() {
        let (m, map) = head_template(17, 13).unwrap();
        assert_eq!(m.n_vertices(), 17 * 13);
        assert_eq!(m.n_faces(), 2 * 16 * 12);
        assert_eq!(m.components().1, 1);
        assert_eq!(map.fixed_indices().len(), 51);
        assert_eq!(map.silhouette_lines().len(), 17);
    }

    #[test]
    fn full_size_template_has_6144_vertices() {
        let (m, _) = head_template(96, 64).unwrap();
        assert_eq!(m.n_vertices(), 6144);
    }

    #[test]
    fn template_is_left_right_symmetric() {
        let cols = 21;
        let (m, map) = head_template(cols, 15).unwrap();
        let v = m.vertices();
        for (i, p) in v.iter().enumerate() {
            let (r, c) = (i / cols, i % cols);
            let q = v[r * cols + (cols - 1 - c)];
            assert!((p.x + q.x).abs() < 1e-12 && (p.y - q.y).abs() < 1e-12 && (p.z - q.z).abs() < 1e-12);
        }
        for k in 0..8 {
            let a = map.current_silhouette()[k];
            let b = map.current_silhouette()[16 - k];
            assert!((v[a].x + v[b].x).abs() < 1e-12 && v[a].x < 0.0);
        }
    }

    #[test]
    fn frontal_contour_matches_defaults() {
        let (m, map) = head_template(33, 25).unwrap();
        let c = contour_silhouette(&map, m.vertices(), &Pose::default());
        assert_eq!(c, map.current_silhouette());
    }

    #[test]
    fn deformation_is_deterministic_and_smooth() {
        let (m, _) = head_template(17, 13).unwrap();
        let a = smooth_deformation(m.vertices(), 4);
        assert_eq!(a, smooth_deformation(m.vertices(), 4));
        assert_ne!(a, smooth_deformation(m.vertices(), 5));
        let diag = m.bbox_diagonal();
        for (p, q) in a.iter().zip(m.vertices()) {
            assert!((p - q).norm() < 0.5 * diag);
        }
    }
}
