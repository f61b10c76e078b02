//! Vertex positions from prescribed per-vertex deformation gradients.
//!
//! Minimizing `Σ_i Σ_j c_ij ‖(x_i − x_j) − T_i (p_i − p_j)‖²` leads to
//!
//! ```text
//! 2 Σ_j c_ij (x_i − x_j) = Σ_j c_ij (T_i + T_j)(p_i − p_j)
//! ```
//!
//! whose matrix is twice the cotangent Laplacian. The translation null space
//! is removed by fixing the centroid of the solution.

use crate::deform::{DeformRep, Mat3};
use crate::error::{Error, Result};
use crate::mesh::{centroid, TriMesh, Vec3};
use crate::sparse::{mul_vec, Cholesky, CscMatrix, TripletBuilder};

/// Per-vertex 3×3 linear maps `T̂_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField(Vec<Mat3>);

impl GradientField {
    pub fn new(gradients: Vec<Mat3>) -> Result<Self> {
        if let Some(i) = gradients.iter().position(|t| !t.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidInput(format!("gradient {i} is not finite")));
        }
        Ok(Self(gradients))
    }

    pub fn identity(n: usize) -> Self {
        Self(vec![Mat3::identity(); n])
    }

    pub fn from_rep(rep: &DeformRep) -> Result<Self> {
        Self::new(rep.gradients())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Mat3] {
        &self.0
    }
}

/// `matrix · X = rhs`, with `matrix = 2 L` (zero row sums before anchoring).
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub matrix: CscMatrix,
    pub rhs: Vec<Vec3>,
    components: usize,
}

impl SparseSystem {
    pub fn n(&self) -> usize {
        self.rhs.len()
    }
}

/// `scale · L` with `L_ii = Σ_j c_ij`, `L_ij = −c_ij`.
pub fn laplacian_matrix(mesh: &TriMesh, scale: f64) -> Result<CscMatrix> {
    let w = mesh.cot_weights();
    let n = mesh.n_vertices();
    let mut b = TripletBuilder::with_capacity(n, n + w.len());
    for i in 0..n {
        let mut diag = 0.0;
        for (j, c) in w.ring(i) {
            b.add(i, j, -scale * c);
            diag += c;
        }
        b.add(i, i, scale * diag);
    }
    b.build()
}

/// Right-hand side `b_i = Σ_j c_ij (T_i + T_j)(p_i − p_j)`.
pub fn gradient_rhs(template: &TriMesh, field: &[Mat3]) -> Vec<Vec3> {
    let p = template.vertices();
    let w = template.cot_weights();
    (0..template.n_vertices())
        .map(|i| {
            w.ring(i).fold(Vec3::zeros(), |acc, (j, c)| {
                acc + c * ((field[i] + field[j]) * (p[i] - p[j]))
            })
        })
        .collect()
}

pub fn assemble(template: &TriMesh, field: &GradientField) -> Result<SparseSystem> {
    check_len(template, field.len())?;
    Ok(SparseSystem {
        matrix: laplacian_matrix(template, 2.0)?,
        rhs: gradient_rhs(template, field.as_slice()),
        components: template.components().1,
    })
}

/// Factors the system once and translates the solution onto `anchor`.
pub fn solve(system: &SparseSystem, anchor: Vec3) -> Result<Vec<Vec3>> {
    if system.components > 1 {
        return Err(Error::Disconnected {
            components: system.components,
        });
    }
    let factor = GaugedFactor::new(&system.matrix)?;
    factor.solve(&system.rhs, anchor)
}

/// The anchored Laplacian, factored once per connectivity.
#[derive(Debug, Clone)]
struct GaugedFactor {
    matrix: CscMatrix,
    cholesky: Cholesky,
}

impl GaugedFactor {
    /// Adds `μ e₀ e₀ᵀ` (μ = mean diagonal) to make the matrix definite. For a
    /// consistent right-hand side (entries summing to zero) this pin is inactive
    /// at the solution, which is then shifted to the requested centroid.
    fn new(matrix: &CscMatrix) -> Result<Self> {
        let n = matrix.nrows();
        let m = matrix.as_ref();
        let mut b = TripletBuilder::with_capacity(n, m.compute_nnz() + 1);
        let mut diag_sum = 0.0;
        for j in 0..n {
            for (i, v) in m.row_idx_of_col(j).zip(m.val_of_col(j)) {
                b.add(i, j, *v);
                if i == j {
                    diag_sum += v;
                }
            }
        }
        let mu = if diag_sum > 0.0 { diag_sum / n as f64 } else { 1.0 };
        b.add(0, 0, mu);
        let pinned = b.build()?;
        let cholesky = Cholesky::factor(&pinned)?;
        Ok(Self {
            matrix: matrix.clone(),
            cholesky,
        })
    }

    fn solve(&self, rhs: &[Vec3], anchor: Vec3) -> Result<Vec<Vec3>> {
        let n = rhs.len();
        let mut cols = vec![0.0; 3 * n];
        for (i, b) in rhs.iter().enumerate() {
            for d in 0..3 {
                cols[d * n + i] = b[d];
            }
        }
        // project out the constant component so the system is consistent
        for d in 0..3 {
            let mean = cols[d * n..(d + 1) * n].iter().sum::<f64>() / n as f64;
            cols[d * n..(d + 1) * n].iter_mut().for_each(|x| *x -= mean);
        }
        let projected = cols.clone();
        self.cholesky.solve_in_place(&mut cols, 3);

        let mut b_norm2 = 0.0;
        let mut r_norm2 = 0.0;
        for d in 0..3 {
            let x = &cols[d * n..(d + 1) * n];
            let ax = mul_vec(&self.matrix, x);
            for i in 0..n {
                let b = projected[d * n + i];
                b_norm2 += b * b;
                r_norm2 += (ax[i] - b) * (ax[i] - b);
            }
        }
        if b_norm2 > 0.0 && (r_norm2 / b_norm2).sqrt() >= 1e-8 {
            return Err(Error::Solver(format!(
                "relative residual {:.3e} exceeds 1e-8",
                (r_norm2 / b_norm2).sqrt()
            )));
        }
        let mut out: Vec<Vec3> = (0..n)
            .map(|i| Vec3::new(cols[i], cols[n + i], cols[2 * n + i]))
            .collect();
        let shift = anchor - centroid(&out);
        out.iter_mut().for_each(|p| *p += shift);
        Ok(out)
    }
}

/// Reusable solver: factor `2L` once for a template, then decode any number of
/// gradient fields. Immutable after construction, so it can be shared.
#[derive(Debug, Clone)]
pub struct PoissonSolver {
    template: TriMesh,
    factor: GaugedFactor,
}

impl PoissonSolver {
    pub fn new(template: &TriMesh) -> Result<Self> {
        let (_, components) = template.components();
        if components > 1 {
            return Err(Error::Disconnected { components });
        }
        Ok(Self {
            template: template.clone(),
            factor: GaugedFactor::new(&laplacian_matrix(template, 2.0)?)?,
        })
    }

    pub fn template(&self) -> &TriMesh {
        &self.template
    }

    pub fn solve_field(&self, field: &GradientField, anchor: Vec3) -> Result<Vec<Vec3>> {
        check_len(&self.template, field.len())?;
        let rhs = gradient_rhs(&self.template, field.as_slice());
        self.factor.solve(&rhs, anchor)
    }

    pub fn solve_rhs(&self, rhs: &[Vec3], anchor: Vec3) -> Result<Vec<Vec3>> {
        check_len(&self.template, rhs.len())?;
        self.factor.solve(rhs, anchor)
    }

    /// Decodes a deformation representation into positions centred on `anchor`.
    pub fn decode(&self, rep: &DeformRep, anchor: Vec3) -> Result<Vec<Vec3>> {
        self.solve_field(&GradientField::from_rep(rep)?, anchor)
    }
}

fn check_len(template: &TriMesh, len: usize) -> Result<()> {
    if len != template.n_vertices() {
        return Err(Error::SizeMismatch {
            what: "gradients",
            expected: template.n_vertices(),
            actual: len,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::{encode, exp_rotation};
    use crate::mesh::tests::tetrahedron;
    use crate::synth;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense(m: &CscMatrix) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(m.nrows(), m.ncols());
        let r = m.as_ref();
        for j in 0..m.ncols() {
            for (i, v) in r.row_idx_of_col(j).zip(r.val_of_col(j)) {
                d[(i, j)] += v;
            }
        }
        d
    }

    fn random_field(rng: &mut ChaCha8Rng, n: usize) -> Vec<Mat3> {
        (0..n)
            .map(|_| Mat3::identity() + Mat3::from_fn(|_, _| rng.random_range(-0.3..0.3)))
            .collect()
    }

    #[test]
    fn identity_field_rhs_is_twice_laplacian() {
        let m = synth::head_template(9, 7).unwrap().0;
        let sys = assemble(&m, &GradientField::identity(m.n_vertices())).unwrap();
        let lap = m.laplacian(m.vertices());
        for (b, l) in sys.rhs.iter().zip(&lap) {
            assert!((b - 2.0 * l).norm() < 1e-12);
        }
    }

    #[test]
    fn tetrahedron_matches_hand_assembly() {
        let m = tetrahedron();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let field = random_field(&mut rng, 4);
        let sys = assemble(&m, &GradientField::new(field.clone()).unwrap()).unwrap();
        // brute force: loop over ordered vertex pairs and test adjacency by scanning faces
        let p = m.vertices();
        let cot = |a: usize, b: usize| -> f64 {
            let mut c = 0.0;
            for f in m.faces() {
                if f.contains(&a) && f.contains(&b) {
                    let o = *f.iter().find(|&&x| x != a && x != b).unwrap();
                    let u = p[a] - p[o];
                    let v = p[b] - p[o];
                    c += 0.5 * u.dot(&v) / u.cross(&v).norm();
                }
            }
            c
        };
        let mut expected = DMatrix::zeros(4, 4);
        let mut rhs = vec![Vec3::zeros(); 4];
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    continue;
                }
                let c = cot(i, j);
                expected[(i, i)] += 2.0 * c;
                expected[(i, j)] -= 2.0 * c;
                rhs[i] += c * ((field[i] + field[j]) * (p[i] - p[j]));
            }
        }
        assert!((dense(&sys.matrix) - expected).amax() < 1e-10);
        for (a, b) in sys.rhs.iter().zip(&rhs) {
            assert!((a - b).amax() < 1e-10);
        }
    }

    #[test]
    fn matrix_symmetric_with_zero_row_sums() {
        let m = synth::head_template(11, 9).unwrap().0;
        let d = dense(&laplacian_matrix(&m, 2.0).unwrap());
        assert!((&d - d.transpose()).amax() < 1e-12);
        for i in 0..d.nrows() {
            assert!(d.row(i).sum().abs() < 1e-10);
        }
    }

    #[test]
    fn identity_field_reproduces_template() {
        let m = synth::head_template(21, 15).unwrap().0;
        let solver = PoissonSolver::new(&m).unwrap();
        let out = solver
            .solve_field(&GradientField::identity(m.n_vertices()), m.centroid())
            .unwrap();
        for (a, b) in out.iter().zip(m.vertices()) {
            assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn scaled_field_scales_about_centroid() {
        let m = synth::head_template(21, 15).unwrap().0;
        let field = GradientField::new(vec![2.0 * Mat3::identity(); m.n_vertices()]).unwrap();
        let out = solve(&assemble(&m, &field).unwrap(), Vec3::zeros()).unwrap();
        let c = m.centroid();
        for (a, b) in out.iter().zip(m.vertices()) {
            assert!((a - 2.0 * (b - c)).norm() < 1e-8);
        }
    }

    #[test]
    fn affine_target_round_trips_through_encode() {
        let m = synth::head_template(21, 15).unwrap().0;
        let a = exp_rotation(&Vec3::new(0.2, -0.4, 0.1))
            * Mat3::new(1.3, 0.2, 0.0, 0.0, 0.8, 0.1, 0.05, 0.0, 1.1);
        let target: Vec<Vec3> = m.vertices().iter().map(|p| a * p + Vec3::new(1.0, 2.0, 3.0)).collect();
        let rep = encode(&m, &target, None).unwrap();
        let out = PoissonSolver::new(&m).unwrap().decode(&rep, centroid(&target)).unwrap();
        let diag = m.bbox_diagonal();
        for (x, y) in out.iter().zip(&target) {
            assert!((x - y).norm() < 1e-6 * diag);
        }
    }

    #[test]
    fn translation_gauge_and_linearity() {
        let m = synth::head_template(13, 11).unwrap().0;
        let solver = PoissonSolver::new(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f1 = random_field(&mut rng, m.n_vertices());
        let f2 = random_field(&mut rng, m.n_vertices());
        let a1 = Vec3::new(1.0, -2.0, 0.5);
        let a2 = Vec3::new(-3.0, 0.0, 7.0);
        let g1 = GradientField::new(f1.clone()).unwrap();
        let x1 = solver.solve_field(&g1, a1).unwrap();
        let x2 = solver.solve_field(&g1, a2).unwrap();
        for (p, q) in x1.iter().zip(&x2) {
            assert!((q - p - (a2 - a1)).norm() < 1e-10);
        }
        let (alpha, beta) = (0.7, -1.9);
        let mix: Vec<Mat3> = f1.iter().zip(&f2).map(|(a, b)| alpha * a + beta * b).collect();
        let z = Vec3::zeros();
        let lhs = solver.solve_field(&GradientField::new(mix).unwrap(), z).unwrap();
        let s1 = solver.solve_field(&g1, z).unwrap();
        let s2 = solver.solve_field(&GradientField::new(f2).unwrap(), z).unwrap();
        for i in 0..m.n_vertices() {
            assert!((lhs[i] - (alpha * s1[i] + beta * s2[i])).norm() < 1e-8);
        }
    }

    #[test]
    fn disconnected_mesh_rejected() {
        let v = vec![
            Vec3::zeros(),
            Vec3::x(),
            Vec3::y(),
            Vec3::new(5.0, 0.0, 0.0),
            Vec3::new(6.0, 0.0, 0.0),
            Vec3::new(5.0, 1.0, 0.0),
        ];
        let m = TriMesh::new(v, vec![[0, 1, 2], [3, 4, 5]]).unwrap();
        assert!(matches!(PoissonSolver::new(&m), Err(Error::Disconnected { components: 2 })));
        let sys = assemble(&m, &GradientField::identity(6)).unwrap();
        assert!(matches!(solve(&sys, Vec3::zeros()), Err(Error::Disconnected { .. })));
    }

    #[test]
    fn field_length_checked() {
        let m = tetrahedron();
        assert!(matches!(
            assemble(&m, &GradientField::identity(3)),
            Err(Error::SizeMismatch { .. })
        ));
    }
}
