use crate::deform::rotation::Mat3;
use crate::mesh::{TriMesh, Vec3};

/// Weighted least-squares deformation gradient of one vertex's one-ring:
/// `argmin_T Σ_j c_ij ‖(p'_i − p'_j) − T (p_i − p_j)‖²`.
///
/// Gram eigenvalues with `|λ| ≤ ε = 1e-8 · tr(A) / 3` carry no information.
/// When exactly one direction is missing (planar or valence-2 rings) it is
/// completed from the tangent map: the normal goes to the cross product of
/// the mapped tangents, rescaled by the square root of the area change. Rigid
/// motions and uniform scales are then reproduced exactly. Worse rings fall
/// back to flooring the eigenvalues at ε. `target` must have the template's
/// vertex count.
pub fn local_gradient(template: &TriMesh, target: &[Vec3], vertex: usize) -> Mat3 {
    fit_local_gradient(template, target, vertex).0
}

/// Like [`local_gradient`], also reporting whether the unregularized Gram
/// matrix was numerically rank deficient.
pub(crate) fn fit_local_gradient(template: &TriMesh, target: &[Vec3], vertex: usize) -> (Mat3, bool) {
    let p = template.vertices();
    let mut a = Mat3::zeros();
    let mut b = Mat3::zeros();
    for (j, c) in template.cot_weights().ring(vertex) {
        let e = p[vertex] - p[j];
        let e_t = target[vertex] - target[j];
        a += c * e * e.transpose();
        b += c * e_t * e.transpose();
    }
    let eps = 1e-8 * a.trace() / 3.0;
    if !(eps > 0.0) {
        return (Mat3::identity(), true);
    }
    let eig = a.symmetric_eigen();
    let q = &eig.eigenvectors;
    let good: Vec<usize> = (0..3).filter(|&k| eig.eigenvalues[k].abs() > eps).collect();
    let mut t = Mat3::zeros();
    for k in 0..3 {
        let l = if good.contains(&k) { eig.eigenvalues[k] } else { eps };
        let qk = q.column(k);
        t += (b * qk) * qk.transpose() / l;
    }
    match good.len() {
        3 => (t, false),
        2 => {
            let u1: Vec3 = q.column(good[0]).into();
            let u2: Vec3 = q.column(good[1]).into();
            let n = u1.cross(&u2);
            let tangent = t - (t * n) * n.transpose();
            let c = (tangent * u1).cross(&(tangent * u2));
            let len = c.norm();
            let image = if len > 0.0 { c / len.sqrt() } else { n };
            (tangent + image * n.transpose(), true)
        }
        _ => (t, true),
    }
}
