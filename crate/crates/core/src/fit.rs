//! Recovering a mesh, blend weights and a weak-perspective pose from 68 image
//! landmarks by alternating minimization of
//!
//! ```text
//! E = Σ_i Σ_j c_ij ‖(p'_i − p'_j) − T_i(w)(p_i − p_j)‖²
//!   + α₁ Σ_l ‖s (R p'_l)_xy + t − q_l‖²
//!   + α₂ Σ_l ‖(L P')_l − (L P)_l‖²
//! ```
//!
//! where `l` runs over the landmark vertices and `L` is the template's
//! cotangent Laplacian.

use std::path::Path;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::deform::{encode, BlendWeights, DeformRep, ExemplarBasis, Mat3, Vec6};
use crate::error::{Error, Result};
use crate::io::{read_string, write_atomic};
use crate::mesh::{centroid, TriMesh, Vec3};
use crate::model::ShapeModel;
use crate::poisson::gradient_rhs;
use crate::pose::{estimate_pose, refine_pose, reprojection_sse, LandmarkSet2D, Pose, Vec2, N_LANDMARKS};
use crate::sparse::{mul_vec, Cholesky, CscMatrix, TripletBuilder};

pub const N_SILHOUETTE: usize = 17;
pub const N_FIXED: usize = N_LANDMARKS - N_SILHOUETTE;

/// Landmark-to-vertex correspondences. Landmarks 17–67 map to fixed vertices;
/// each silhouette landmark 0–16 picks one vertex from its candidate line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkMapping {
    fixed_indices: Vec<usize>,
    silhouette_lines: Vec<Vec<usize>>,
    current_silhouette: Vec<usize>,
}

impl LandmarkMapping {
    pub fn new(
        fixed_indices: Vec<usize>,
        silhouette_lines: Vec<Vec<usize>>,
        current_silhouette: Vec<usize>,
        n_vertices: usize,
    ) -> Result<Self> {
        let m = Self {
            fixed_indices,
            silhouette_lines,
            current_silhouette,
        };
        m.validate(n_vertices)?;
        Ok(m)
    }

    pub fn validate(&self, n_vertices: usize) -> Result<()> {
        if self.fixed_indices.len() != N_FIXED {
            return Err(Error::SizeMismatch {
                what: "fixed landmark indices",
                expected: N_FIXED,
                actual: self.fixed_indices.len(),
            });
        }
        if self.silhouette_lines.len() != N_SILHOUETTE {
            return Err(Error::SizeMismatch {
                what: "silhouette lines",
                expected: N_SILHOUETTE,
                actual: self.silhouette_lines.len(),
            });
        }
        if self.current_silhouette.len() != N_SILHOUETTE {
            return Err(Error::SizeMismatch {
                what: "silhouette indices",
                expected: N_SILHOUETTE,
                actual: self.current_silhouette.len(),
            });
        }
        let all = self
            .fixed_indices
            .iter()
            .chain(self.silhouette_lines.iter().flatten());
        if let Some(&bad) = all.clone().find(|&&v| v >= n_vertices) {
            return Err(Error::InvalidInput(format!(
                "landmark vertex {bad} out of range for {n_vertices} vertices"
            )));
        }
        for (k, (line, cur)) in self.silhouette_lines.iter().zip(&self.current_silhouette).enumerate() {
            if line.is_empty() {
                return Err(Error::InvalidInput(format!("silhouette line {k} is empty")));
            }
            if !line.contains(cur) {
                return Err(Error::InvalidInput(format!(
                    "silhouette landmark {k} uses vertex {cur}, which is not on its line"
                )));
            }
        }
        Ok(())
    }

    pub fn fixed_indices(&self) -> &[usize] {
        &self.fixed_indices
    }

    pub fn silhouette_lines(&self) -> &[Vec<usize>] {
        &self.silhouette_lines
    }

    pub fn current_silhouette(&self) -> &[usize] {
        &self.current_silhouette
    }

    /// Vertex of every landmark 0–67 under the current silhouette choice.
    pub fn landmark_vertices(&self) -> Vec<usize> {
        self.current_silhouette
            .iter()
            .chain(&self.fixed_indices)
            .copied()
            .collect()
    }

    pub fn with_silhouette(&self, current: Vec<usize>) -> Result<Self> {
        let m = Self {
            current_silhouette: current,
            ..self.clone()
        };
        let max = m.silhouette_lines.iter().flatten().chain(&m.fixed_indices).max().copied().unwrap_or(0);
        m.validate(max + 1)?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str, n_vertices: usize) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate(n_vertices)?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>, n_vertices: usize) -> Result<Self> {
        Self::from_json(&read_string(path.as_ref())?, n_vertices)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }
}

/// For each silhouette landmark, the candidate whose projection is nearest to
/// the observed point (ties go to the lowest vertex id).
pub fn update_silhouette(
    mapping: &LandmarkMapping,
    positions: &[Vec3],
    pose: &Pose,
    landmarks: &LandmarkSet2D,
) -> Result<Vec<usize>> {
    let m = pose.projection_matrix();
    let t = pose.translation();
    mapping
        .silhouette_lines()
        .iter()
        .enumerate()
        .map(|(k, line)| {
            let q = landmarks.get(k);
            line.iter()
                .map(|&v| ((m * positions[v] + t - q).norm_squared(), v))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|(_, v)| v)
                .ok_or_else(|| Error::InvalidInput(format!("silhouette line {k} is empty")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Landmark term weight.
    pub alpha1: f64,
    /// Laplacian term weight.
    pub alpha2: f64,
    pub max_outer_iters: usize,
    pub rel_energy_tol: f64,
    /// Re-select silhouette vertices every outer iteration.
    pub update_silhouette: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.01,
            alpha2: 1.0,
            max_outer_iters: 50,
            rel_energy_tol: 1e-6,
            update_silhouette: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha1.is_finite()) || !(self.alpha2 >= 0.0 && self.alpha2.is_finite()) {
            return Err(Error::InvalidInput("term weights must be finite and non-negative".into()));
        }
        if self.max_outer_iters == 0 {
            return Err(Error::InvalidInput("max_outer_iters must be at least 1".into()));
        }
        if !(self.rel_energy_tol >= 0.0) {
            return Err(Error::InvalidInput("rel_energy_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// The three energy terms, unweighted, and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Energy {
    pub deformation: f64,
    pub landmark: f64,
    pub laplacian: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SilhouetteChange {
    pub iteration: usize,
    pub landmark: usize,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub positions: Vec<Vec3>,
    pub weights: BlendWeights,
    pub pose: Pose,
    /// Total energy at the start and after every outer iteration.
    pub energy_trace: Vec<f64>,
    pub silhouette_history: Vec<SilhouetteChange>,
    pub silhouette: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    /// Projections of the fitted landmark vertices.
    pub fn predicted_landmarks(&self, mapping: &LandmarkMapping) -> Result<LandmarkSet2D> {
        let pts = self
            .silhouette
            .iter()
            .chain(mapping.fixed_indices())
            .map(|&v| self.pose.project(&self.positions[v]))
            .collect();
        LandmarkSet2D::new(pts)
    }

    pub fn energy_trace_csv(&self) -> String {
        let mut out = String::from("iteration,energy\n");
        for (i, e) in self.energy_trace.iter().enumerate() {
            out.push_str(&format!("{i},{e}\n"));
        }
        out
    }
}

/// `Σ_i Σ_j c_ij ‖(p'_i − p'_j) − T_i (p_i − p_j)‖²`.
pub fn deformation_energy(template: &TriMesh, positions: &[Vec3], field: &[Mat3]) -> f64 {
    let p = template.vertices();
    let w = template.cot_weights();
    (0..template.n_vertices())
        .map(|i| {
            w.ring(i)
                .map(|(j, c)| c * ((positions[i] - positions[j]) - field[i] * (p[i] - p[j])).norm_squared())
                .sum::<f64>()
        })
        .sum()
}

/// Gradient of `Σ_l ‖s (R p'_{v_l})_xy + t − q_l‖²` with respect to every vertex.
pub fn landmark_gradient(positions: &[Vec3], pose: &Pose, vertices: &[usize], targets: &[Vec2]) -> Vec<Vec3> {
    let m = pose.projection_matrix();
    let t = pose.translation();
    let mut g = vec![Vec3::zeros(); positions.len()];
    for (&v, q) in vertices.iter().zip(targets) {
        g[v] += 2.0 * m.transpose() * (m * positions[v] + t - q);
    }
    g
}

/// Everything the P′ step needs besides the current estimate.
pub struct PositionsProblem<'a> {
    pub template: &'a TriMesh,
    pub field: &'a [Mat3],
    pub pose: &'a Pose,
    pub vertices: &'a [usize],
    pub targets: &'a [Vec2],
    /// `(L P)_v` of the template, indexed by vertex.
    pub template_laplacian: &'a [Vec3],
    pub alpha1: f64,
    pub alpha2: f64,
}

/// Exact minimizer of the energy in P′ for fixed gradients and pose.
///
/// The normal equations (one 3n×3n sparse system) are
/// `2L P′ + α₁ Σ_l MᵀM p′_l + α₂ LᵀSᵀSL P′ = b + α₁ Σ_l Mᵀ(q_l − t) + α₂ LᵀSᵀSL P`
/// with `M = s R[0..2, :]`. The energy is invariant to translating P′ along
/// the view direction (every direction when `α₁ = 0`); those components are
/// pinned at vertex 0 for the solve and then set so the centroid of `previous`
/// is kept. See [`PositionsFactor`] for how the system is solved.
pub fn solve_positions(problem: &PositionsProblem<'_>, previous: &[Vec3]) -> Result<Vec<Vec3>> {
    PositionsFactor::new(problem.template, problem.vertices, problem.alpha2)?.solve(problem, previous)
}

/// Factorizations behind the P′ step, reusable while the landmark vertices
/// and `α₂` stay the same.
///
/// In camera coordinates `y_v = R p′_v` the 3n×3n system splits into one n×n
/// system per axis: `(A₀ + α₁ s² D) y_a = (R rhs)_a` for the two image axes
/// and `A₀ y_z = (R rhs)_z` for depth, with `A₀ = 2L + α₂ LᵀSᵀSL` and `D`
/// counting landmarks per vertex. `A₀` is factored once with vertex 0 pinned;
/// the image-axis factor is redone only when `α₁ s²` changes.
#[derive(Debug, Clone)]
pub struct PositionsFactor {
    vertices: Vec<usize>,
    alpha2: f64,
    base: TripletBuilder,
    pinned: (Cholesky, CscMatrix),
    lateral: Option<(f64, Cholesky, CscMatrix)>,
}

impl PositionsFactor {
    pub fn new(template: &TriMesh, vertices: &[usize], alpha2: f64) -> Result<Self> {
        let n = template.n_vertices();
        let w = template.cot_weights();
        let mut base = TripletBuilder::with_capacity(n, n + w.len() + 64 * vertices.len());
        for i in 0..n {
            let mut diag = 0.0;
            for (j, c) in w.ring(i) {
                base.add(i, j, -2.0 * c);
                diag += c;
            }
            base.add(i, i, 2.0 * diag);
        }
        if alpha2 > 0.0 {
            for &v in vertices {
                let mut row: Vec<(usize, f64)> = w.ring(v).map(|(j, c)| (j, -c)).collect();
                row.push((v, w.weights(v).iter().sum()));
                for &(a, la) in &row {
                    for &(b, lb) in &row {
                        base.add(a, b, alpha2 * la * lb);
                    }
                }
            }
        }
        let mut pinned = base.clone();
        pinned.add(0, 0, mean_diagonal(&base.build()?));
        let matrix = pinned.build()?;
        Ok(Self {
            vertices: vertices.to_vec(),
            alpha2,
            pinned: (Cholesky::factor(&matrix)?, matrix),
            base,
            lateral: None,
        })
    }

    /// Whether this factor was built for `vertices` and `alpha2`.
    pub fn matches(&self, vertices: &[usize], alpha2: f64) -> bool {
        self.vertices == vertices && self.alpha2 == alpha2
    }

    fn ensure_lateral(&mut self, c: f64) -> Result<()> {
        if matches!(&self.lateral, Some((k, _, _)) if *k == c) {
            return Ok(());
        }
        let mut b = self.base.clone();
        for &v in &self.vertices {
            b.add(v, v, c);
        }
        let matrix = b.build()?;
        self.lateral = Some((c, Cholesky::factor(&matrix)?, matrix));
        Ok(())
    }

    pub fn solve(&mut self, problem: &PositionsProblem<'_>, previous: &[Vec3]) -> Result<Vec<Vec3>> {
        if !self.matches(problem.vertices, problem.alpha2) {
            return Err(Error::InvalidInput("positions factor built for other landmark vertices".into()));
        }
        let tm = problem.template;
        let n = tm.n_vertices();
        let weights = tm.cot_weights();
        let mut rhs = gradient_rhs(tm, problem.field);
        if problem.alpha2 > 0.0 {
            for &v in problem.vertices {
                let target = problem.template_laplacian[v];
                for (j, c) in weights.ring(v) {
                    rhs[j] -= problem.alpha2 * c * target;
                }
                rhs[v] += problem.alpha2 * weights.weights(v).iter().sum::<f64>() * target;
            }
        }
        let m = problem.pose.projection_matrix();
        if problem.alpha1 > 0.0 {
            let t = problem.pose.translation();
            for (&v, q) in problem.vertices.iter().zip(problem.targets) {
                rhs[v] += problem.alpha1 * m.transpose() * (q - t);
            }
        }

        let rot = problem.pose.rotation();
        let cam: Vec<Vec3> = rhs.iter().map(|r| rot * r).collect();
        let fixed_in_plane = problem.alpha1 > 0.0 && !problem.vertices.is_empty();
        if fixed_in_plane {
            self.ensure_lateral(problem.alpha1 * problem.pose.scale * problem.pose.scale)?;
        }
        let mut y = vec![Vec3::zeros(); n];
        for axis in 0..3 {
            let (chol, matrix) = match &self.lateral {
                Some((_, chol, matrix)) if fixed_in_plane && axis < 2 => (chol, matrix),
                _ => (&self.pinned.0, &self.pinned.1),
            };
            let b: Vec<f64> = cam.iter().map(|r| r[axis]).collect();
            let mut x = b.clone();
            chol.solve_in_place(&mut x, 1);
            let ax = mul_vec(matrix, &x);
            let r2: f64 = ax.iter().zip(&b).map(|(a, r)| (a - r) * (a - r)).sum();
            let b2: f64 = b.iter().map(|r| r * r).sum();
            if b2 > 0.0 && (r2 / b2).sqrt() >= 1e-8 {
                return Err(Error::Solver(format!(
                    "positions system relative residual {:.3e}",
                    (r2 / b2).sqrt()
                )));
            }
            for (yi, xi) in y.iter_mut().zip(x) {
                yi[axis] = xi;
            }
        }

        let mut out: Vec<Vec3> = y.iter().map(|v| rot.transpose() * v).collect();
        let free: Vec<Vec3> = if fixed_in_plane {
            vec![problem.pose.view_direction()]
        } else {
            vec![Vec3::x(), Vec3::y(), Vec3::z()]
        };
        let shift = centroid(previous) - centroid(&out);
        let correction: Vec3 = free.iter().map(|d| d.dot(&shift) * d).sum();
        out.iter_mut().for_each(|p| *p += correction);
        Ok(out)
    }
}

fn mean_diagonal(a: &CscMatrix) -> f64 {
    let a = a.as_ref();
    let mut s = 0.0;
    for j in 0..a.ncols() {
        for (i, v) in a.row_idx_of_col(j).zip(a.val_of_col(j)) {
            if i == j {
                s += v;
            }
        }
    }
    (s / a.ncols().max(1) as f64).max(f64::MIN_POSITIVE)
}

/// Precomputed Gram factorizations for least-squares weight estimation.
struct WeightSolver {
    gram_r: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    gram_s: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

const RIDGE: f64 = 1e-6;

fn factor_gram(mut g: DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = g.nrows();
    let eig = g.clone().symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 1e-12 * hi.max(0.0)) || hi <= 0.0 {
        let scale = if hi > 0.0 { g.trace() / n as f64 } else { 1.0 };
        warn!("{what} exemplar stack is rank deficient; using ridge {RIDGE:e}");
        for i in 0..n {
            g[(i, i)] += RIDGE * scale;
        }
    }
    g.cholesky()
        .ok_or_else(|| Error::Solver(format!("{what} Gram matrix is not positive definite")))
}

impl WeightSolver {
    fn new(basis: &ExemplarBasis) -> Result<Self> {
        let k = basis.n_exemplars();
        let mut gr = DMatrix::zeros(k, k);
        let mut gs = DMatrix::zeros(k, k);
        for i in 0..basis.n_vertices() {
            let logs = basis.logs(i);
            let offs = basis.stretch_offsets(i);
            for a in 0..k {
                for b in a..k {
                    gr[(a, b)] += logs[a].dot(&logs[b]);
                    gs[(a, b)] += offs[a].dot(&offs[b]);
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                gr[(a, b)] = gr[(b, a)];
                gs[(a, b)] = gs[(b, a)];
            }
        }
        Ok(Self {
            gram_r: factor_gram(gr, "rotation")?,
            gram_s: factor_gram(gs, "stretch")?,
        })
    }

    /// Least-squares `w_R` and `w_S` for the given per-vertex targets.
    fn solve(&self, basis: &ExemplarBasis, target: &DeformRep) -> BlendWeights {
        let k = basis.n_exemplars();
        let mut br = DVector::zeros(k);
        let mut bs = DVector::zeros(k);
        for i in 0..basis.n_vertices() {
            let r = target.rotation_logs()[i];
            let s = target.stretch(i) - Mat3::identity();
            for (a, (l, o)) in basis.logs(i).iter().zip(basis.stretch_offsets(i)).enumerate() {
                br[a] += l.dot(&r);
                bs[a] += o.dot(&s);
            }
        }
        BlendWeights {
            rotation: self.gram_r.solve(&br).iter().copied().collect(),
            stretch: self.gram_s.solve(&bs).iter().copied().collect(),
        }
    }
}

/// State of one fitting run. Each step either minimizes its subproblem
/// exactly or is accepted only when the total energy does not increase.
pub struct FitSession<'a> {
    model: &'a ShapeModel,
    landmarks: &'a LandmarkSet2D,
    config: FitConfig,
    basis: ExemplarBasis,
    solver: WeightSolver,
    template_laplacian: Vec<Vec3>,
    pub positions: Vec<Vec3>,
    pub weights: BlendWeights,
    pub pose: Pose,
    pub silhouette: Vec<usize>,
    field: Vec<Mat3>,
    factor: Option<PositionsFactor>,
    history: Vec<SilhouetteChange>,
    iteration: usize,
}

impl<'a> FitSession<'a> {
    /// Cold start: `w = 0`, P′ = template, pose from the fixed landmarks.
    pub fn new(model: &'a ShapeModel, landmarks: &'a LandmarkSet2D, config: FitConfig) -> Result<Self> {
        config.validate()?;
        let template = model.template();
        let mapping = model.mapping();
        mapping.validate(template.n_vertices())?;
        let basis = ExemplarBasis::new(model.exemplars())?;
        let solver = WeightSolver::new(&basis)?;
        let fixed3d: Vec<Vec3> = mapping.fixed_indices().iter().map(|&v| template.vertices()[v]).collect();
        let pose = estimate_pose(&fixed3d, &landmarks.points()[N_SILHOUETTE..])?;
        let weights = BlendWeights::zeros(basis.n_exemplars());
        let field = basis.blend_all(&weights)?;
        Ok(Self {
            model,
            landmarks,
            config,
            template_laplacian: template.laplacian(template.vertices()),
            positions: template.vertices().to_vec(),
            weights,
            pose,
            silhouette: mapping.current_silhouette().to_vec(),
            field,
            factor: None,
            basis,
            solver,
            history: Vec::new(),
            iteration: 0,
        })
    }

    fn vertices(&self) -> Vec<usize> {
        self.silhouette
            .iter()
            .chain(self.model.mapping().fixed_indices())
            .copied()
            .collect()
    }

    fn laplacian_term(&self, positions: &[Vec3], vertices: &[usize]) -> f64 {
        let w = self.model.template().cot_weights();
        vertices
            .iter()
            .map(|&v| {
                let lap = w.ring(v).fold(Vec3::zeros(), |acc, (j, c)| acc + c * (positions[v] - positions[j]));
                (lap - self.template_laplacian[v]).norm_squared()
            })
            .sum()
    }

    fn evaluate(&self, positions: &[Vec3], field: &[Mat3], pose: &Pose, vertices: &[usize]) -> Energy {
        let deformation = deformation_energy(self.model.template(), positions, field);
        let pts: Vec<Vec3> = vertices.iter().map(|&v| positions[v]).collect();
        let landmark = reprojection_sse(&pts, self.landmarks.points(), pose);
        let laplacian = self.laplacian_term(positions, vertices);
        Energy {
            deformation,
            landmark,
            laplacian,
            total: deformation + self.config.alpha1 * landmark + self.config.alpha2 * laplacian,
        }
    }

    pub fn energy(&self) -> Energy {
        self.evaluate(&self.positions, &self.field, &self.pose, &self.vertices())
    }

    /// Re-estimates the pose; keeps the old one unless the landmark term drops.
    pub fn pose_step(&mut self) {
        let pts: Vec<Vec3> = self.vertices().iter().map(|&v| self.positions[v]).collect();
        let q = self.landmarks.points();
        let mut best = self.pose;
        let mut best_cost = reprojection_sse(&pts, q, &best);
        let refined = refine_pose(&pts, q, self.pose, 10);
        let mut candidates = vec![refined];
        if let Ok(fresh) = estimate_pose(&pts, q) {
            candidates.push(fresh);
        }
        for cand in candidates {
            let c = reprojection_sse(&pts, q, &cand);
            if c < best_cost {
                best = cand;
                best_cost = c;
            }
        }
        self.pose = best;
    }

    /// Moves each silhouette landmark to its nearest-projecting candidate when
    /// that does not raise the landmark's share of the energy.
    pub fn silhouette_step(&mut self) -> Result<()> {
        let mapping = self.model.mapping();
        let proposal = update_silhouette(mapping, &self.positions, &self.pose, self.landmarks)?;
        let m = self.pose.projection_matrix();
        let t = self.pose.translation();
        let w = self.model.template().cot_weights();
        let share = |k: usize, v: usize| {
            let lan = (m * self.positions[v] + t - self.landmarks.get(k)).norm_squared();
            let lap = w
                .ring(v)
                .fold(Vec3::zeros(), |acc, (j, c)| acc + c * (self.positions[v] - self.positions[j]));
            self.config.alpha1 * lan + self.config.alpha2 * (lap - self.template_laplacian[v]).norm_squared()
        };
        for (k, &to) in proposal.iter().enumerate() {
            let from = self.silhouette[k];
            if to != from && share(k, to) <= share(k, from) {
                self.silhouette[k] = to;
                self.history.push(SilhouetteChange {
                    iteration: self.iteration,
                    landmark: k,
                    from,
                    to,
                });
            }
        }
        Ok(())
    }

    /// Least-squares blend weights from the gradients of the current P′,
    /// with a backtracking safeguard on the total energy.
    pub fn weights_step(&mut self) -> Result<()> {
        let n = self.model.template().n_vertices();
        let reference_logs: Vec<Vec3> = (0..n)
            .map(|i| {
                self.basis
                    .logs(i)
                    .iter()
                    .zip(&self.weights.rotation)
                    .fold(Vec3::zeros(), |acc, (l, w)| acc + *w * l)
            })
            .collect();
        let reference = DeformRep::new(reference_logs, vec![Vec6::zeros(); n])?;
        let target = encode(self.model.template(), &self.positions, Some(&reference))?;
        let proposal = self.solver.solve(&self.basis, &target);

        let vertices = self.vertices();
        let current = self.evaluate(&self.positions, &self.field, &self.pose, &vertices).total;
        let mut step = 1.0;
        for _ in 0..6 {
            let cand = BlendWeights {
                rotation: mix(&self.weights.rotation, &proposal.rotation, step),
                stretch: mix(&self.weights.stretch, &proposal.stretch, step),
            };
            let field = self.basis.blend_all(&cand)?;
            let e = self.evaluate(&self.positions, &field, &self.pose, &vertices).total;
            if e <= current {
                self.weights = cand;
                self.field = field;
                return Ok(());
            }
            step *= 0.5;
        }
        debug!("weights step rejected at iteration {}", self.iteration);
        Ok(())
    }

    /// Exact minimization over P′; rejected if round-off would raise the energy.
    pub fn positions_step(&mut self) -> Result<()> {
        let vertices = self.vertices();
        let problem = PositionsProblem {
            template: self.model.template(),
            field: &self.field,
            pose: &self.pose,
            vertices: &vertices,
            targets: self.landmarks.points(),
            template_laplacian: &self.template_laplacian,
            alpha1: self.config.alpha1,
            alpha2: self.config.alpha2,
        };
        let reuse = matches!(&self.factor, Some(f) if f.matches(&vertices, self.config.alpha2));
        if !reuse {
            self.factor = Some(PositionsFactor::new(self.model.template(), &vertices, self.config.alpha2)?);
        }
        let next = self.factor.as_mut().expect("factor just built").solve(&problem, &self.positions)?;
        let before = self.evaluate(&self.positions, &self.field, &self.pose, &vertices).total;
        let after = self.evaluate(&next, &self.field, &self.pose, &vertices).total;
        if after <= before {
            self.positions = next;
        }
        Ok(())
    }

    /// One outer iteration: pose, silhouette, weights, positions.
    pub fn iterate(&mut self) -> Result<f64> {
        self.iteration += 1;
        self.pose_step();
        if self.config.update_silhouette {
            self.silhouette_step()?;
        }
        self.weights_step()?;
        self.positions_step()?;
        Ok(self.energy().total)
    }

    pub fn run(mut self) -> Result<FitResult> {
        let mut trace = vec![self.energy().total];
        let mut converged = false;
        for _ in 0..self.config.max_outer_iters {
            let prev = *trace.last().expect("non-empty trace");
            let e = self.iterate()?;
            if !e.is_finite() {
                return Err(Error::Solver("energy diverged".into()));
            }
            trace.push(e);
            let decrease = prev - e;
            if prev <= 0.0 || decrease <= self.config.rel_energy_tol * prev {
                converged = true;
                break;
            }
        }
        debug!("fit finished after {} iterations, energy {:?}", self.iteration, self.energy());
        Ok(FitResult {
            positions: self.positions,
            weights: self.weights,
            pose: self.pose,
            energy_trace: trace,
            silhouette_history: self.history,
            silhouette: self.silhouette,
            iterations: self.iteration,
            converged,
        })
    }
}

fn mix(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
}

/// Fits `model` to `landmarks`.
pub fn fit(model: &ShapeModel, landmarks: &LandmarkSet2D, config: &FitConfig) -> Result<FitResult> {
    FitSession::new(model, landmarks, *config)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poisson::PoissonSolver;
    use crate::synth;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> ShapeModel {
        synth::demo_model(21, 15, 6, 40).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose {
            scale: rng.random_range(200.0 / synth::UNIT..300.0 / synth::UNIT),
            pitch: rng.random_range(-0.3..0.3),
            yaw: rng.random_range(-0.5..0.5),
            roll: rng.random_range(-0.3..0.3),
            tx: rng.random_range(200.0..300.0),
            ty: rng.random_range(200.0..300.0),
        }
    }

    /// A 5×2 strip of near-equilateral triangles with some relief.
    fn ten_vertex_mesh() -> TriMesh {
        let v = (0..10)
            .map(|i| {
                let (c, r) = ((i % 5) as f64, (i / 5) as f64);
                Vec3::new(c + 0.5 * r, r * 0.9, 0.15 * (c * 1.3 + r).sin())
            })
            .collect();
        let mut f = Vec::new();
        for c in 0..4 {
            f.push([c, c + 5, c + 1]);
            f.push([c + 1, c + 5, c + 6]);
        }
        TriMesh::new(v, f).unwrap()
    }

    /// Dense least squares over the same energy, minimum-norm solution.
    fn dense_system(p: &PositionsProblem<'_>) -> (DMatrix<f64>, DVector<f64>) {
        let tm = p.template;
        let n = tm.n_vertices();
        let pos = tm.vertices();
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for i in 0..n {
            for (j, c) in tm.cot_weights().ring(i) {
                assert!(c > 0.0);
                let target = p.field[i] * (pos[i] - pos[j]);
                for d in 0..3 {
                    let mut r = vec![0.0; 3 * n];
                    r[3 * i + d] = c.sqrt();
                    r[3 * j + d] = -c.sqrt();
                    rows.push((r, c.sqrt() * target[d]));
                }
            }
        }
        let m = p.pose.projection_matrix();
        let t = p.pose.translation();
        for (&v, q) in p.vertices.iter().zip(p.targets) {
            for a in 0..2 {
                let mut r = vec![0.0; 3 * n];
                for d in 0..3 {
                    r[3 * v + d] = p.alpha1.sqrt() * m[(a, d)];
                }
                rows.push((r, p.alpha1.sqrt() * (q[a] - t[a])));
            }
            for d in 0..3 {
                let mut r = vec![0.0; 3 * n];
                for (j, c) in tm.cot_weights().ring(v) {
                    r[3 * v + d] += p.alpha2.sqrt() * c;
                    r[3 * j + d] -= p.alpha2.sqrt() * c;
                }
                rows.push((r, p.alpha2.sqrt() * p.template_laplacian[v][d]));
            }
        }
        let a = DMatrix::from_fn(rows.len(), 3 * n, |i, j| rows[i].0[j]);
        let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
        (a, b)
    }

    fn dense_oracle(p: &PositionsProblem<'_>) -> Vec<Vec3> {
        let n = p.template.n_vertices();
        let (a, b) = dense_system(p);
        // minimum-norm least squares through the eigenpairs of AᵀA
        let eig = (a.transpose() * &a).symmetric_eigen();
        let atb = a.transpose() * b;
        let cut = 1e-10 * eig.eigenvalues.amax();
        let mut x = DVector::zeros(3 * n);
        for (k, &l) in eig.eigenvalues.iter().enumerate() {
            if l > cut {
                let v = eig.eigenvectors.column(k);
                x += v * (v.dot(&atb) / l);
            }
        }
        x.as_slice().chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
    }

    #[test]
    fn positions_step_matches_dense_oracle() {
        let tm = ten_vertex_mesh();
        assert_eq!(tm.n_vertices(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let field: Vec<Mat3> = (0..10)
            .map(|_| Mat3::identity() + Mat3::from_fn(|_, _| rng.random_range(-0.2..0.2)))
            .collect();
        let pose = Pose {
            scale: 3.0,
            pitch: 0.2,
            yaw: -0.4,
            roll: 0.1,
            tx: 5.0,
            ty: -2.0,
        };
        let vertices = [0, 2, 4, 7, 9];
        let targets: Vec<Vec2> = (0..5).map(|_| Vec2::new(rng.random_range(0.0..8.0), rng.random_range(-5.0..3.0))).collect();
        let lap = tm.laplacian(tm.vertices());
        for (a1, a2) in [(0.5, 1.0), (0.0, 1.0), (0.5, 0.0), (0.0, 0.0)] {
            let p = PositionsProblem {
                template: &tm,
                field: &field,
                pose: &pose,
                vertices: &vertices,
                targets: &targets,
                template_laplacian: &lap,
                alpha1: a1,
                alpha2: a2,
            };
            let ours = solve_positions(&p, tm.vertices()).unwrap();
            let oracle = dense_oracle(&p);
            // compare modulo the free translation
            let free: Vec<Vec3> = if a1 > 0.0 { vec![pose.view_direction()] } else { vec![Vec3::x(), Vec3::y(), Vec3::z()] };
            let shift = centroid(&ours) - centroid(&oracle);
            let corr: Vec3 = free.iter().map(|d| d.dot(&shift) * d).sum();
            for (x, y) in ours.iter().zip(&oracle) {
                assert!((x - (y + corr)).norm() < 1e-8, "{a1} {a2}: {}", (x - y - corr).norm());
            }
            // the remaining translation is fixed by the previous centroid
            for d in &free {
                assert!(d.dot(&(centroid(&ours) - tm.centroid())).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn positions_step_without_extra_terms_is_poisson() {
        let (tm, _) = synth::head_template(17, 13).unwrap();
        let target = synth::smooth_deformation(tm.vertices(), 2);
        let rep = encode(&tm, &target, None).unwrap();
        let field = rep.gradients();
        let lap = tm.laplacian(tm.vertices());
        let pose = Pose::default();
        let p = PositionsProblem {
            template: &tm,
            field: &field,
            pose: &pose,
            vertices: &[],
            targets: &[],
            template_laplacian: &lap,
            alpha1: 0.0,
            alpha2: 0.0,
        };
        let ours = solve_positions(&p, tm.vertices()).unwrap();
        let expected = PoissonSolver::new(&tm).unwrap().decode(&rep, tm.centroid()).unwrap();
        for (a, b) in ours.iter().zip(&expected) {
            assert!((a - b).norm() < 1e-9);
        }
        let again = solve_positions(&p, &ours).unwrap();
        for (a, b) in ours.iter().zip(&again) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn landmark_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (tm, _) = synth::head_template(13, 11).unwrap();
        let positions = synth::smooth_deformation(tm.vertices(), 9);
        let pose = random_pose(&mut rng);
        let vertices: Vec<usize> = (0..68).map(|_| rng.random_range(0..positions.len())).collect();
        let targets: Vec<Vec2> = (0..68).map(|_| Vec2::new(rng.random_range(0.0..512.0), rng.random_range(0.0..512.0))).collect();
        let energy = |pos: &[Vec3]| {
            let pts: Vec<Vec3> = vertices.iter().map(|&v| pos[v]).collect();
            reprojection_sse(&pts, &targets, &pose)
        };
        let g = landmark_gradient(&positions, &pose, &vertices, &targets);
        for _ in 0..10 {
            let v = vertices[rng.random_range(0..68)];
            let d = rng.random_range(0..3);
            let h = 1e-6;
            let mut plus = positions.clone();
            let mut minus = positions.clone();
            plus[v][d] += h;
            minus[v][d] -= h;
            let fd = (energy(&plus) - energy(&minus)) / (2.0 * h);
            assert!((fd - g[v][d]).abs() <= 1e-5 * g[v][d].abs().max(1.0), "{fd} vs {}", g[v][d]);
        }
    }

    #[test]
    fn silhouette_selection_rules() {
        let (tm, map) = synth::head_template(33, 25).unwrap();
        let pose = Pose {
            scale: 250.0 / synth::UNIT,
            tx: 256.0,
            ty: 256.0,
            ..Pose::default()
        };
        let lm = synth::render_landmarks(&map, tm.vertices(), &pose).unwrap();
        assert_eq!(update_silhouette(&map, tm.vertices(), &pose, &lm).unwrap(), map.current_silhouette());

        let yawed = Pose { yaw: 30f64.to_radians(), ..pose };
        let lm = synth::render_landmarks(&map, tm.vertices(), &yawed).unwrap();
        let sel = update_silhouette(&map, tm.vertices(), &yawed, &lm).unwrap();
        // exhaustive check: the selection is the nearest projected candidate
        for (k, line) in map.silhouette_lines().iter().enumerate() {
            let d = |v: usize| (yawed.project(&tm.vertices()[v]) - lm.get(k)).norm();
            let best = line.iter().map(|&v| d(v)).fold(f64::INFINITY, f64::min);
            assert_eq!(d(sel[k]), best);
        }
        // positive yaw turns the face: every line's pick moves the same way
        let col = |v: usize| v % 33;
        let moved: Vec<i64> = (0..17)
            .filter(|&k| k != 8)
            .map(|k| col(sel[k]) as i64 - col(map.current_silhouette()[k]) as i64)
            .collect();
        assert!(moved.iter().any(|&m| m != 0));
        assert!(moved.iter().all(|&m| m >= 0) || moved.iter().all(|&m| m <= 0), "{moved:?}");
    }

    #[test]
    fn single_candidate_lines_are_fixed() {
        let (tm, map) = synth::head_template(17, 13).unwrap();
        let lines: Vec<Vec<usize>> = map.current_silhouette().iter().map(|&v| vec![v]).collect();
        let map = LandmarkMapping::new(map.fixed_indices().to_vec(), lines, map.current_silhouette().to_vec(), tm.n_vertices()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pose = random_pose(&mut rng);
        let lm = LandmarkSet2D::new((0..68).map(|_| Vec2::new(rng.random_range(0.0..512.0), rng.random_range(0.0..512.0))).collect()).unwrap();
        assert_eq!(update_silhouette(&map, tm.vertices(), &pose, &lm).unwrap(), map.current_silhouette());
    }

    #[test]
    fn mapping_validation() {
        let (tm, map) = synth::head_template(17, 13).unwrap();
        let n = tm.n_vertices();
        let json = map.to_json().unwrap();
        assert_eq!(LandmarkMapping::from_json(&json, n).unwrap(), map);
        assert!(LandmarkMapping::from_json(&json, 10).is_err());
        let mut bad = map.current_silhouette().to_vec();
        bad[0] = map.fixed_indices()[0];
        assert!(map.with_silhouette(bad).is_err());
    }

    #[test]
    fn weights_step_on_template_gives_zero() {
        let model = small_model();
        let pose = Pose {
            scale: 250.0 / synth::UNIT,
            tx: 256.0,
            ty: 256.0,
            ..Pose::default()
        };
        let lm = synth::render_landmarks(model.mapping(), model.template().vertices(), &pose).unwrap();
        let mut s = FitSession::new(&model, &lm, FitConfig::default()).unwrap();
        s.weights = BlendWeights {
            rotation: vec![0.3; 6],
            stretch: vec![-0.2; 6],
        };
        s.field = s.basis.blend_all(&s.weights).unwrap();
        s.weights_step().unwrap();
        assert!(s.weights.rotation.iter().chain(&s.weights.stretch).all(|w| w.abs() < 1e-6), "{:?}", s.weights);
    }

    #[test]
    fn weights_step_recovers_one_hot() {
        let model = small_model();
        let lm = synth::render_landmarks(
            model.mapping(),
            model.template().vertices(),
            &Pose { scale: 250.0 / synth::UNIT, tx: 256.0, ty: 256.0, ..Pose::default() },
        )
        .unwrap();
        let s = FitSession::new(&model, &lm, FitConfig::default()).unwrap();
        for k in 0..model.exemplars().len() {
            let proposal = s.solver.solve(&s.basis, &model.exemplars()[k]);
            let expected = BlendWeights::one_hot(6, k);
            for (a, b) in proposal.rotation.iter().chain(&proposal.stretch).zip(expected.rotation.iter().chain(&expected.stretch)) {
                assert!((a - b).abs() < 1e-6, "exemplar {k}: {proposal:?}");
            }
        }
    }

    #[test]
    fn self_consistent_landmarks_keep_template() {
        let model = small_model();
        let pose = Pose {
            scale: 300.0 / synth::UNIT,
            tx: 256.0,
            ty: 256.0,
            ..Pose::default()
        };
        let lm = synth::render_landmarks(model.mapping(), model.template().vertices(), &pose).unwrap();
        let res = fit(&model, &lm, &FitConfig::default()).unwrap();
        let pred = res.predicted_landmarks(model.mapping()).unwrap();
        let rmse = (pred.points().iter().zip(lm.points()).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / 68.0).sqrt();
        assert!(rmse < 0.5, "{rmse}");
        assert!(res.weights.rotation.iter().chain(&res.weights.stretch).all(|w| w.abs() < 1e-3));
        let diag = model.template().bbox_diagonal();
        for (a, b) in res.positions.iter().zip(model.template().vertices()) {
            assert!((a - b).norm() < 1e-3 * diag);
        }
    }

    #[test]
    fn energy_trace_is_monotone_and_deterministic() {
        let model = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let sample = synth::sample(&model, &mut rng, &synth::PoseRange::default()).unwrap();
        let cfg = FitConfig {
            max_outer_iters: 15,
            ..FitConfig::default()
        };
        let a = fit(&model, &sample.landmarks, &cfg).unwrap();
        for w in a.energy_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let b = fit(&model, &sample.landmarks, &cfg).unwrap();
        assert_eq!(
            a.energy_trace.iter().map(|e| e.to_bits()).collect::<Vec<_>>(),
            b.energy_trace.iter().map(|e| e.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig { alpha1: -1.0, ..FitConfig::default() }.validate().is_err());
        assert!(FitConfig { max_outer_iters: 0, ..FitConfig::default() }.validate().is_err());
        let c: FitConfig = serde_json::from_str(r#"{"alpha2": 0.5}"#).unwrap();
        assert_eq!(c.alpha1, 0.01);
        assert_eq!(c.alpha2, 0.5);
    }
}
