//! Training-loss terms and landmark error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::LandmarkMapping;
use crate::mesh::{bbox_diagonal, centroid, Vec3};
use crate::deform::Mat3;
use crate::pose::{LandmarkSet2D, Pose, Vec2, N_LANDMARKS};

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::SizeMismatch { what, expected, actual });
    }
    Ok(())
}

/// Vertex loss `Σ_i ‖p̂′_i − p′_i‖²`.
pub fn e_ver(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_len("vertices", gt.len(), pred.len())?;
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b).norm_squared()).sum())
}

/// Landmark loss `Σ_l ‖Π̂ R̂ p̂′_l + t̂ − q_l‖²` over the mapping's current landmark vertices.
pub fn e_lan(pred: &[Vec3], pose: &Pose, mapping: &LandmarkMapping, landmarks: &LandmarkSet2D) -> Result<f64> {
    pose.validate()?;
    mapping.validate(pred.len())?;
    Ok(mapping
        .landmark_vertices()
        .iter()
        .zip(landmarks.points())
        .map(|(&v, q)| (pose.project(&pred[v]) - q).norm_squared())
        .sum())
}

/// Projection-parameter loss: the same 3D landmarks projected under both poses.
pub fn e_srt(gt_landmarks3d: &[Vec3], pose_pred: &Pose, pose_gt: &Pose) -> Result<f64> {
    pose_pred.validate()?;
    pose_gt.validate()?;
    Ok(gt_landmarks3d
        .iter()
        .map(|p| (pose_pred.project(p) - pose_gt.project(p)).norm_squared())
        .sum())
}

/// Weights `(λ₁, λ₂, λ₃)` of the vertex, landmark and projection losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub vertex: f64,
    pub landmark: f64,
    pub projection: f64,
}

impl LossWeights {
    /// Weights for the first training phase.
    pub const EARLY: Self = Self {
        vertex: 1.0,
        landmark: 1e-5,
        projection: 1e-5,
    };
    /// Weights once the landmark term is ramped up.
    pub const LATE: Self = Self {
        vertex: 1.0,
        landmark: 1e-3,
        projection: 1e-5,
    };
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::EARLY
    }
}

pub fn total_loss(e_ver: f64, e_lan: f64, e_srt: f64, w: &LossWeights) -> f64 {
    w.vertex * e_ver + w.landmark * e_lan + w.projection * e_srt
}

/// Errors of one image; normalized values are percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkErrors {
    pub mean_error: f64,
    pub nme_interpupil: f64,
    pub nme_interocular: f64,
    pub nme_diagonal: f64,
}

fn mean_point(points: &[Vec2]) -> Vec2 {
    points.iter().sum::<Vec2>() / points.len() as f64
}

/// Mean point-to-point error and its three normalizations: distance between
/// eye centroids (36–41, 42–47), outer eye corners (36, 45), and the diagonal
/// of the ground truth bounding box.
pub fn landmark_errors(pred: &LandmarkSet2D, gt: &LandmarkSet2D) -> LandmarkErrors {
    let p = pred.points();
    let g = gt.points();
    let mean_error = p.iter().zip(g).map(|(a, b)| (a - b).norm()).sum::<f64>() / N_LANDMARKS as f64;
    let pupils = (mean_point(&g[36..42]) - mean_point(&g[42..48])).norm();
    let ocular = (g[36] - g[45]).norm();
    let (lo, hi) = g.iter().fold(
        (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY)),
        |(lo, hi), q| (lo.inf(q), hi.sup(q)),
    );
    let diagonal = (hi - lo).norm();
    let norm = |d: f64| if d > 0.0 { 100.0 * mean_error / d } else { f64::INFINITY };
    LandmarkErrors {
        mean_error,
        nme_interpupil: norm(pupils),
        nme_interocular: norm(ocular),
        nme_diagonal: norm(diagonal),
    }
}

/// Fraction of errors at or below each threshold; the denominator is the
/// total count, so non-finite errors are never counted as covered.
pub fn ced_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(Error::InvalidInput("no errors for CED curve".into()));
    }
    let mut sorted: Vec<f64> = errors.iter().copied().filter(|e| !e.is_nan()).collect();
    sorted.sort_by(f64::total_cmp);
    let total = errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| (t, sorted.partition_point(|&e| e <= t) as f64 / total))
        .collect())
}

pub fn ced_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("threshold,fraction\n");
    for (t, f) in curve {
        out.push_str(&format!("{t},{f}\n"));
    }
    out
}

/// Per-image record in an [`ErrorReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageError {
    pub name: String,
    #[serde(flatten)]
    pub errors: LandmarkErrors,
    /// 3D RMSE after similarity alignment, as a fraction of the ground-truth
    /// bounding-box diagonal, when meshes were available.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vertex_rmse: Option<f64>,
}

/// Averages over images plus the per-image records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub mean_error: f64,
    pub nme_interpupil: f64,
    pub nme_interocular: f64,
    pub nme_diagonal: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vertex_rmse: Option<f64>,
    pub images: Vec<ImageError>,
}

impl ErrorReport {
    pub fn from_images(images: Vec<ImageError>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidInput("no images to report".into()));
        }
        let n = images.len() as f64;
        let avg = |f: fn(&LandmarkErrors) -> f64| images.iter().map(|i| f(&i.errors)).sum::<f64>() / n;
        let vertex: Vec<f64> = images.iter().filter_map(|i| i.vertex_rmse).collect();
        Ok(Self {
            mean_error: avg(|e| e.mean_error),
            nme_interpupil: avg(|e| e.nme_interpupil),
            nme_interocular: avg(|e| e.nme_interocular),
            nme_diagonal: avg(|e| e.nme_diagonal),
            vertex_rmse: (!vertex.is_empty()).then(|| vertex.iter().sum::<f64>() / vertex.len() as f64),
            images,
        })
    }

    pub fn mean_errors(&self) -> Vec<f64> {
        self.images.iter().map(|i| i.errors.mean_error).collect()
    }
}

/// Least-squares similarity `(s, R, t)` taking `source` onto `target`
/// (Umeyama), applied to `source`.
pub fn similarity_align(source: &[Vec3], target: &[Vec3]) -> Result<Vec<Vec3>> {
    check_len("points", target.len(), source.len())?;
    if source.is_empty() {
        return Ok(Vec::new());
    }
    let n = source.len() as f64;
    let (mu_s, mu_t) = (centroid(source), centroid(target));
    let mut cov = Mat3::zeros();
    let mut var_s = 0.0;
    for (a, b) in source.iter().zip(target) {
        let (x, y) = (a - mu_s, b - mu_t);
        cov += y * x.transpose();
        var_s += x.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if var_s <= 0.0 {
        return Err(Error::DegenerateConfiguration("source points coincide".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Vec3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        d.z = -1.0;
    }
    let rot = u * Mat3::from_diagonal(&d) * v_t;
    let scale = svd.singular_values.component_mul(&d).sum() / var_s;
    Ok(source.iter().map(|p| mu_t + scale * (rot * (p - mu_s))).collect())
}

/// RMSE after similarity alignment, divided by the target's bounding-box diagonal.
pub fn aligned_vertex_rmse(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    let aligned = similarity_align(pred, gt)?;
    let sse = e_ver(&aligned, gt)?;
    let diag = bbox_diagonal(gt);
    Ok((sse / gt.len().max(1) as f64).sqrt() / diag)
}
