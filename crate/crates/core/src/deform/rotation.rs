//! Rotation logarithm/exponential and polar decomposition of 3×3 linear maps.

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::mesh::Vec3;

pub type Mat3 = Matrix3<f64>;

/// Cross-product matrix `[v]×`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Axial vector of the skew-symmetric part of `m`.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues' formula. Below `1e-8` rad the second-order series is used.
pub fn exp_rotation(r: &Vec3) -> Mat3 {
    let theta = r.norm();
    let k = skew(r);
    if theta < 1e-8 {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Mat3::identity() + a * k + b * k * k
}

/// Returns `r = θ k` with `θ ∈ [0, π]`.
///
/// At `θ = π` the axis sign is fixed so its first nonzero component is positive.
pub fn log_rotation(rot: &Mat3) -> Result<Vec3> {
    let orth = (rot.transpose() * rot - Mat3::identity()).norm();
    let det = rot.determinant();
    if orth > 1e-6 || det <= 0.0 {
        return Err(Error::NotARotation { error: orth, det });
    }
    let cos = ((rot.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin_axis = vee(rot);
    let sin = sin_axis.norm();
    let theta = sin.atan2(cos);

    if theta < std::f64::consts::PI - 0.1 {
        if sin < 1e-300 {
            return Ok(Vec3::zeros());
        }
        return Ok(sin_axis * (theta / sin));
    }

    // Near π the skew part vanishes; recover the axis from (R + Rᵀ)/2 − cos θ I = (1 − cos θ) k kᵀ.
    let b = 0.5 * (rot + rot.transpose()) - cos * Mat3::identity();
    let j = (0..3)
        .max_by(|&a, &c| b[(a, a)].total_cmp(&b[(c, c)]))
        .unwrap_or(0);
    let mut axis: Vec3 = b.column(j).into_owned();
    axis /= axis.norm();
    if sin > 1e-10 {
        if axis.dot(&sin_axis) < 0.0 {
            axis = -axis;
        }
    } else {
        canonicalize_axis(&mut axis);
    }
    Ok(axis * theta)
}

fn canonicalize_axis(axis: &mut Vec3) {
    if let Some(first) = axis.iter().copied().find(|c| c.abs() > 1e-12) {
        if first < 0.0 {
            *axis = -*axis;
        }
    }
}

/// Right Jacobian of the rotation exponential:
/// `d/dt exp(ω(t)) = exp(ω) [J_r(ω) ω']×`.
pub fn right_jacobian(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < 1e-6 {
        return Mat3::identity() - 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let t2 = theta * theta;
    Mat3::identity() - ((1.0 - theta.cos()) / t2) * k + ((theta - theta.sin()) / (t2 * theta)) * k * k
}

/// `T = R S` with `R` a proper rotation and `S` symmetric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Polar {
    pub rotation: Mat3,
    pub stretch: Mat3,
}

/// Polar decomposition by scaled Newton iteration, with an SVD path for
/// nearly singular input.
///
/// A negative determinant is absorbed into `S` along the direction of the
/// smallest singular value, so `R` is always a proper rotation.
pub fn polar_decompose(t: &Mat3) -> Result<Polar> {
    if !t.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidInput("non-finite matrix".into()));
    }
    let norm = t.norm();
    if norm < 1e-12 {
        return Err(Error::DegenerateGradient);
    }
    let det = t.determinant();
    if det.abs() < 1e-9 * norm * norm * norm {
        return Ok(polar_svd(t));
    }

    let mut x = *t;
    for _ in 0..60 {
        let Some(inv) = x.try_inverse() else {
            return Ok(polar_svd(t));
        };
        let gamma = (inv.norm() / x.norm()).sqrt();
        let next = 0.5 * (gamma * x + inv.transpose() / gamma);
        let delta = (next - x).norm();
        x = next;
        if delta < 1e-12 {
            break;
        }
    }
    // one unscaled step to settle at machine precision
    if let Some(inv) = x.try_inverse() {
        x = 0.5 * (x + inv.transpose());
    }

    let s0 = symmetrize(&(x.transpose() * t));
    if det > 0.0 {
        return Ok(Polar {
            rotation: x,
            stretch: s0,
        });
    }
    // x has det −1: reflect through the eigenvector of the smallest eigenvalue of s0
    let eig = SymmetricEigen::new(s0);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("3 eigenvalues");
    let v = eig.eigenvectors.column(imin).into_owned();
    let h = Mat3::identity() - 2.0 * v * v.transpose();
    Ok(Polar {
        rotation: x * h,
        stretch: symmetrize(&(h * s0)),
    })
}

fn polar_svd(t: &Mat3) -> Polar {
    let svd = t.svd(true, true);
    let mut u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut sigma = svd.singular_values;
    if (u * v_t).determinant() < 0.0 {
        let (imin, _) = sigma
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("3 singular values");
        u.column_mut(imin).neg_mut();
        sigma[imin] = -sigma[imin];
    }
    let v = v_t.transpose();
    Polar {
        rotation: u * v_t,
        stretch: symmetrize(&(v * Mat3::from_diagonal(&sigma) * v_t)),
    }
}

/// `(M + Mᵀ) / 2`, exactly symmetric in floating point.
pub fn symmetrize(m: &Mat3) -> Mat3 {
    let mut out = *m;
    for i in 0..3 {
        for j in (i + 1)..3 {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = avg;
            out[(j, i)] = avg;
        }
    }
    out
}
