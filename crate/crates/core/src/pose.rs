//! Weak-perspective camera: `q = s · (R p)_xy + t`, image origin top-left,
//! x right, y down.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix2x3, Matrix3, SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::deform::Mat3;
use crate::error::{Error, Result};
use crate::io::{read_string, write_atomic};
use crate::mesh::Vec3;

pub type Vec2 = Vector2<f64>;

pub const N_LANDMARKS: usize = 68;

/// Scale (pixels per model unit), Euler angles in radians, translation in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub scale: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Self {
            scale: 1.0,
            pitch: 0.0,
            yaw: 0.0,
            roll: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }
}

impl Pose {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.scale, self.pitch, self.yaw, self.roll, self.tx, self.ty];
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("pose has non-finite parameters".into()));
        }
        if self.scale <= 0.0 {
            return Err(Error::InvalidInput(format!("pose scale {} is not positive", self.scale)));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Mat3 {
        euler_to_matrix(self.pitch, self.yaw, self.roll)
    }

    pub fn translation(&self) -> Vec2 {
        Vec2::new(self.tx, self.ty)
    }

    /// `s · R[0..2, :]`, the linear part of the projection.
    pub fn projection_matrix(&self) -> Matrix2x3<f64> {
        self.scale * self.rotation().fixed_rows::<2>(0).into_owned()
    }

    /// Unit vector along which projection is constant (third row of `R`).
    pub fn view_direction(&self) -> Vec3 {
        self.rotation().row(2).transpose()
    }

    pub fn project(&self, p: &Vec3) -> Vec2 {
        project(p, self)
    }

    /// Wraps angles into (−π, π].
    pub fn normalized(mut self) -> Self {
        self.pitch = wrap_angle(self.pitch);
        self.yaw = wrap_angle(self.yaw);
        self.roll = wrap_angle(self.roll);
        self
    }

    fn to_params(self) -> SVector<f64, 6> {
        SVector::<f64, 6>::from([self.scale, self.pitch, self.yaw, self.roll, self.tx, self.ty])
    }

    fn from_params(p: &SVector<f64, 6>) -> Self {
        Self {
            scale: p[0],
            pitch: p[1],
            yaw: p[2],
            roll: p[3],
            tx: p[4],
            ty: p[5],
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let pose: Pose = serde_json::from_str(text)?;
        pose.validate()?;
        Ok(pose)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read_string(path.as_ref())?)
    }
}

fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut a = a % TAU;
    if a <= -PI {
        a += TAU;
    } else if a > PI {
        a -= TAU;
    }
    a
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

// derivatives of the elementary rotations with respect to their angle
fn d_rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// `R = R_z(roll) · R_y(yaw) · R_x(pitch)`.
pub fn euler_to_matrix(pitch: f64, yaw: f64, roll: f64) -> Mat3 {
    rot_z(roll) * rot_y(yaw) * rot_x(pitch)
}

/// Inverse of [`euler_to_matrix`], returning `(pitch, yaw, roll)`.
pub fn matrix_to_euler(r: &Mat3) -> (f64, f64, f64) {
    let yaw = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    if r[(2, 0)].abs() < 1.0 - 1e-12 {
        let pitch = r[(2, 1)].atan2(r[(2, 2)]);
        let roll = r[(1, 0)].atan2(r[(0, 0)]);
        (pitch, yaw, roll)
    } else {
        // gimbal lock: only pitch ∓ roll is determined; put it all in pitch
        let pitch = (-r[(1, 2)]).atan2(r[(1, 1)]);
        (pitch, yaw, 0.0)
    }
}

pub fn project(p: &Vec3, pose: &Pose) -> Vec2 {
    let q = pose.rotation() * p;
    pose.scale * Vec2::new(q.x, q.y) + pose.translation()
}

pub fn project_all(points: &[Vec3], pose: &Pose) -> Vec<Vec2> {
    let m = pose.projection_matrix();
    let t = pose.translation();
    points.iter().map(|p| m * p + t).collect()
}

/// Sum of squared reprojection distances.
pub fn reprojection_sse(points3d: &[Vec3], points2d: &[Vec2], pose: &Pose) -> f64 {
    let m = pose.projection_matrix();
    let t = pose.translation();
    points3d
        .iter()
        .zip(points2d)
        .map(|(p, q)| (m * p + t - q).norm_squared())
        .sum()
}

pub fn reprojection_rmse(points3d: &[Vec3], points2d: &[Vec2], pose: &Pose) -> f64 {
    if points3d.is_empty() {
        return 0.0;
    }
    (reprojection_sse(points3d, points2d, pose) / points3d.len() as f64).sqrt()
}

/// Closed-form weak-perspective fit followed by safeguarded Gauss–Newton.
pub fn estimate_pose(points3d: &[Vec3], points2d: &[Vec2]) -> Result<Pose> {
    if points3d.len() != points2d.len() {
        return Err(Error::SizeMismatch {
            what: "2D points",
            expected: points3d.len(),
            actual: points2d.len(),
        });
    }
    if points3d.len() < 4 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 4 correspondences, got {}",
            points3d.len()
        )));
    }
    if !points3d.iter().all(|p| p.iter().all(|x| x.is_finite()))
        || !points2d.iter().all(|q| q.iter().all(|x| x.is_finite()))
    {
        return Err(Error::InvalidInput("non-finite correspondence".into()));
    }
    let n = points3d.len() as f64;
    let p_bar = points3d.iter().sum::<Vec3>() / n;
    let q_bar = points2d.iter().sum::<Vec2>() / n;
    let mut xx = Mat3::zeros();
    let mut yx = Matrix2x3::<f64>::zeros();
    for (p, q) in points3d.iter().zip(points2d) {
        let x = p - p_bar;
        let y = q - q_bar;
        xx += x * x.transpose();
        yx += y * x.transpose();
    }
    let eig = xx.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo <= 1e-10 * hi {
        return Err(Error::DegenerateConfiguration(
            "3D points are coplanar or collinear".into(),
        ));
    }
    let a = yx * xx.try_inverse().ok_or_else(|| Error::DegenerateConfiguration("singular scatter".into()))?;
    let svd = a.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let sigma = svd.singular_values;
    let scale = 0.5 * (sigma[0] + sigma[1]);
    if !(scale > 0.0) {
        return Err(Error::DegenerateConfiguration("2D points have no spread".into()));
    }
    let q = u * v_t;
    let r1 = q.row(0).transpose();
    let r2 = q.row(1).transpose();
    let r3 = r1.cross(&r2);
    let rot = Mat3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()]);
    let (pitch, yaw, roll) = matrix_to_euler(&rot);
    let rp = rot * p_bar;
    let t = q_bar - scale * Vec2::new(rp.x, rp.y);
    let init = Pose {
        scale,
        pitch,
        yaw,
        roll,
        tx: t.x,
        ty: t.y,
    };
    Ok(refine_pose(points3d, points2d, init, 10))
}

/// Gauss–Newton on `(s, pitch, yaw, roll, tx, ty)`. A step is taken only when
/// it lowers the residual (halving it up to 30 times), so the residual never
/// increases.
pub fn refine_pose(points3d: &[Vec3], points2d: &[Vec2], init: Pose, max_iters: usize) -> Pose {
    let mut pose = init;
    let mut cost = reprojection_sse(points3d, points2d, &pose);
    for _ in 0..max_iters {
        let (rx, ry, rz) = (rot_x(pose.pitch), rot_y(pose.yaw), rot_z(pose.roll));
        let rot = rz * ry * rx;
        let d_pitch = rz * ry * d_rot_x(pose.pitch);
        let d_yaw = rz * d_rot_y(pose.yaw) * rx;
        let d_roll = d_rot_z(pose.roll) * ry * rx;
        let mut jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut jtr = SVector::<f64, 6>::zeros();
        let t = pose.translation();
        for (p, q) in points3d.iter().zip(points2d) {
            let rp = rot * p;
            let res = pose.scale * Vec2::new(rp.x, rp.y) + t - q;
            let mut j = SMatrix::<f64, 2, 6>::zeros();
            j.set_column(0, &Vec2::new(rp.x, rp.y));
            for (k, d) in [(1, &d_pitch), (2, &d_yaw), (3, &d_roll)] {
                let dp = d * p;
                j.set_column(k, &(pose.scale * Vec2::new(dp.x, dp.y)));
            }
            j[(0, 4)] = 1.0;
            j[(1, 5)] = 1.0;
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let damping = 1e-12 * jtj.trace().max(1e-300);
        let Some(step) = (jtj + SMatrix::<f64, 6, 6>::identity() * damping)
            .cholesky()
            .map(|c| c.solve(&jtr))
        else {
            break;
        };
        let x0 = pose.to_params();
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand = Pose::from_params(&(x0 - alpha * step));
            if cand.scale > 0.0 {
                let c = reprojection_sse(points3d, points2d, &cand);
                if c < cost {
                    pose = cand;
                    cost = c;
                    improved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    pose.normalized()
}

/// 68 image-space landmarks in the standard ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet2D(Vec<Vec2>);

impl LandmarkSet2D {
    pub fn new(points: Vec<Vec2>) -> Result<Self> {
        if points.len() != N_LANDMARKS {
            return Err(Error::SizeMismatch {
                what: "landmarks",
                expected: N_LANDMARKS,
                actual: points.len(),
            });
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidInput(format!("landmark {i} is not finite")));
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[Vec2] {
        &self.0
    }

    pub fn get(&self, i: usize) -> Vec2 {
        self.0[i]
    }

    /// Parses 68 lines of `x y`; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::with_capacity(N_LANDMARKS);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let mut coord = || -> Result<f64> {
                let tok = it.next().ok_or_else(|| Error::Parse {
                    line: lineno + 1,
                    message: "expected two coordinates".into(),
                })?;
                tok.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    message: format!("bad coordinate {tok:?}: {e}"),
                })
            };
            let (x, y) = (coord()?, coord()?);
            if it.next().is_some() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: "expected exactly two coordinates".into(),
                });
            }
            points.push(Vec2::new(x, y));
        }
        Self::new(points)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(N_LANDMARKS * 40);
        for p in &self.0 {
            let _ = writeln!(out, "{} {}", p.x, p.y);
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&read_string(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose {
            scale: rng.random_range(50.0..300.0),
            pitch: rng.random_range(-0.5..0.5),
            yaw: rng.random_range(-0.8..0.8),
            roll: rng.random_range(-0.4..0.4),
            tx: rng.random_range(100.0..400.0),
            ty: rng.random_range(100.0..400.0),
        }
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)))
            .collect()
    }

    #[test]
    fn euler_conventions() {
        assert_eq!(euler_to_matrix(0.0, 0.0, 0.0), Mat3::identity());
        let r = euler_to_matrix(0.0, std::f64::consts::FRAC_PI_2, 0.0);
        assert!((r * Vec3::z() - Vec3::x()).norm() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let r = euler_to_matrix(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0));
            assert!((r.transpose() * r - Mat3::identity()).amax() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let (p, y, r) = (rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0));
            let (p2, y2, r2) = matrix_to_euler(&euler_to_matrix(p, y, r));
            assert!((p - p2).abs() < 1e-9 && (y - y2).abs() < 1e-9 && (r - r2).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_examples() {
        let id = Pose::default();
        assert_eq!(project(&Vec3::new(3.0, 4.0, 5.0), &id), Vec2::new(3.0, 4.0));
        let p = Pose {
            scale: 2.0,
            tx: 10.0,
            ty: 20.0,
            ..Pose::default()
        };
        assert_eq!(project(&Vec3::new(1.0, 1.0, 9.0), &p), Vec2::new(12.0, 22.0));
        let p = Pose {
            yaw: std::f64::consts::FRAC_PI_2,
            ..Pose::default()
        };
        assert!((project(&Vec3::z(), &p) - Vec2::new(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn recovers_exact_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let pts = random_cloud(&mut rng, 68);
            let q = project_all(&pts, &pose);
            let est = estimate_pose(&pts, &q).unwrap();
            assert!(reprojection_rmse(&pts, &q, &est) < 1e-8);
            assert!((est.scale / pose.scale - 1.0).abs() < 1e-8);
            for (a, b) in [(est.pitch, pose.pitch), (est.yaw, pose.yaw), (est.roll, pose.roll)] {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_pose_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = random_cloud(&mut rng, 20);
        let q: Vec<Vec2> = pts.iter().map(|p| Vec2::new(p.x, p.y)).collect();
        let est = estimate_pose(&pts, &q).unwrap();
        for v in [est.scale - 1.0, est.pitch, est.yaw, est.roll, est.tx, est.ty] {
            assert!(v.abs() < 1e-8);
        }
    }

    #[test]
    fn noisy_reprojection_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 1.0).unwrap();
        // per-point euclidean RMSE of pure noise is about sqrt(2) σ, so the
        // bound applies to the Monte-Carlo mean
        let mut total = 0.0;
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let pts = random_cloud(&mut rng, 68);
            let q: Vec<Vec2> = project_all(&pts, &pose)
                .into_iter()
                .map(|q| q + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng)))
                .collect();
            let est = estimate_pose(&pts, &q).unwrap();
            assert!(reprojection_sse(&pts, &q, &est) <= reprojection_sse(&pts, &q, &pose) + 1e-9);
            total += reprojection_rmse(&pts, &q, &est);
        }
        assert!(total / 100.0 <= 1.5, "{}", total / 100.0);
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pose = random_pose(&mut rng);
        let pts = random_cloud(&mut rng, 30);
        let q = project_all(&pts, &pose);
        let d = Vec2::new(13.5, -7.25);
        let shifted: Vec<Vec2> = q.iter().map(|x| x + d).collect();
        let a = estimate_pose(&pts, &q).unwrap();
        let b = estimate_pose(&pts, &shifted).unwrap();
        assert!((b.tx - a.tx - d.x).abs() < 1e-8 && (b.ty - a.ty - d.y).abs() < 1e-8);
        assert!((a.scale - b.scale).abs() < 1e-8 * a.scale);
        assert!((a.yaw - b.yaw).abs() < 1e-9);
    }

    #[test]
    fn refinement_never_increases_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts = random_cloud(&mut rng, 40);
        let q = project_all(&pts, &random_pose(&mut rng));
        let mut pose = random_pose(&mut rng);
        let mut last = reprojection_sse(&pts, &q, &pose);
        for _ in 0..10 {
            pose = refine_pose(&pts, &q, pose, 1);
            let c = reprojection_sse(&pts, &q, &pose);
            assert!(c <= last);
            last = c;
        }
    }

    #[test]
    fn coplanar_points_rejected() {
        let pts: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, (i * i) as f64, 0.0)).collect();
        let q: Vec<Vec2> = pts.iter().map(|p| Vec2::new(p.x, p.y)).collect();
        assert!(matches!(estimate_pose(&pts, &q), Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn landmark_file_round_trip() {
        let pts: Vec<Vec2> = (0..68).map(|i| Vec2::new(i as f64 * 1.5, 0.1 * i as f64)).collect();
        let set = LandmarkSet2D::new(pts).unwrap();
        let text = format!("# header\n{}", set.to_text());
        assert_eq!(LandmarkSet2D::parse(&text).unwrap(), set);
        let short: String = set.to_text().lines().take(67).map(|l| format!("{l}\n")).collect();
        assert!(matches!(LandmarkSet2D::parse(&short), Err(Error::SizeMismatch { actual: 67, .. })));
        assert!(LandmarkSet2D::parse(&text.replacen("0 0", "nan 0", 1)).is_err());
    }

    #[test]
    fn pose_json_round_trip() {
        let p = Pose {
            scale: 2.5,
            pitch: 0.1,
            yaw: -0.2,
            roll: 0.3,
            tx: 4.0,
            ty: 5.0,
        };
        assert_eq!(Pose::from_json(&p.to_json().unwrap()).unwrap(), p);
        assert!(Pose::from_json(r#"{"scale":-1,"pitch":0,"yaw":0,"roll":0,"tx":0,"ty":0}"#).is_err());
    }
}
