//! Shape model: template, exemplar representations, a PCA basis over
//! flattened representations, and the landmark mapping.
//!
//! # Container layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic   "CMSM"
//! version u32 (= 1)
//! n_v     u64   template vertices
//! n       u64   exemplars
//! m       u64   principal components
//! crc     u32   CRC-32 of the 32 bytes above
//! then six sections, each  tag[4] | len u64 | payload | crc u32 (of payload)
//!   TMPL  template as OBJ text
//!   EXMP  n × 9 n_v f64
//!   PCAM  9 n_v f64   mean
//!   PCAC  m × 9 n_v f64   components, row-major
//!   PCAS  m f64   singular values of the centered sample matrix
//!   MAPP  landmark mapping as JSON
//! ```

use std::path::Path;
use std::sync::OnceLock;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::deform::DeformRep;
use crate::error::{Error, Result};
use crate::fit::LandmarkMapping;
use crate::io::{read_bytes, write_atomic};
use crate::mesh::{TriMesh, Vec3};
use crate::poisson::PoissonSolver;

pub const MODEL_MAGIC: &[u8; 4] = b"CMSM";
pub const MODEL_VERSION: u32 = 1;

/// Default number of principal components for `n` exemplars.
pub fn default_components(n: usize) -> usize {
    500.min(n.saturating_sub(1))
}

/// Principal components of flattened representations.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `m × D`, orthonormal rows.
    pub components: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// Sample count the basis was built from.
    pub n_samples: usize,
}

impl Pca {
    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Variance along each component, `σ_j² / (n − 1)`.
    pub fn explained_variance(&self) -> Vec<f64> {
        let denom = (self.n_samples.max(2) - 1) as f64;
        self.singular_values.iter().map(|s| s * s / denom).collect()
    }

    pub fn project(&self, flat: &[f64]) -> Result<Vec<f64>> {
        if flat.len() != self.dim() {
            return Err(Error::SizeMismatch {
                what: "representation values",
                expected: self.dim(),
                actual: flat.len(),
            });
        }
        let centered = DVector::from_iterator(flat.len(), flat.iter().zip(&self.mean).map(|(x, m)| x - m));
        Ok((&self.components * centered).iter().copied().collect())
    }

    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.n_components() {
            return Err(Error::SizeMismatch {
                what: "coefficients",
                expected: self.n_components(),
                actual: coeffs.len(),
            });
        }
        let c = DVector::from_column_slice(coeffs);
        let offset = self.components.tr_mul(&c);
        Ok(self.mean.iter().zip(offset.iter()).map(|(m, o)| m + o).collect())
    }
}

/// PCA through the `n × n` Gram matrix of the centered samples.
///
/// Components are sorted by decreasing singular value, re-orthonormalized,
/// and signed so their largest-magnitude entry is positive.
pub fn build_pca(exemplars: &[DeformRep], m: usize) -> Result<Pca> {
    let n = exemplars.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("PCA needs at least 2 samples, got {n}")));
    }
    if m > n - 1 {
        return Err(Error::InvalidInput(format!(
            "{m} components requested but {n} samples support at most {}",
            n - 1
        )));
    }
    let dim = 9 * exemplars[0].n_vertices();
    let mut x = DMatrix::zeros(n, dim);
    for (k, ex) in exemplars.iter().enumerate() {
        let flat = ex.to_flat();
        if flat.len() != dim {
            return Err(Error::SizeMismatch {
                what: "representation values",
                expected: dim,
                actual: flat.len(),
            });
        }
        x.row_mut(k).copy_from_slice(&flat);
    }
    let mean: Vec<f64> = (0..dim).map(|j| x.column(j).sum() / n as f64).collect();
    for k in 0..n {
        for j in 0..dim {
            x[(k, j)] -= mean[j];
        }
    }
    let gram = &x * x.transpose();
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut components = DMatrix::zeros(m, dim);
    let mut singular_values = Vec::with_capacity(m);
    for (row, &idx) in order.iter().take(m).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if !(lambda > 1e-24 * top) || top <= 0.0 {
            return Err(Error::DegenerateConfiguration(format!(
                "samples span only {row} independent directions, {m} requested"
            )));
        }
        let dir = x.tr_mul(&eig.eigenvectors.column(idx));
        components.row_mut(row).copy_from(&dir.transpose());
        singular_values.push(lambda.sqrt());
    }
    // two Gram–Schmidt passes against round-off from the Gram route
    for _ in 0..2 {
        for i in 0..m {
            for j in 0..i {
                let d = components.row(i).dot(&components.row(j));
                for c in 0..dim {
                    components[(i, c)] -= d * components[(j, c)];
                }
            }
            let norm = components.row(i).norm();
            components.row_mut(i).unscale_mut(norm);
        }
    }
    for i in 0..m {
        let row = components.row(i);
        let pivot = row.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if pivot < 0.0 {
            components.row_mut(i).neg_mut();
        }
    }
    Ok(Pca {
        mean,
        components,
        singular_values,
        n_samples: n,
    })
}

/// Immutable after construction; safe to share between threads.
#[derive(Debug, Clone)]
pub struct ShapeModel {
    template: TriMesh,
    exemplars: Vec<DeformRep>,
    pca: Pca,
    mapping: LandmarkMapping,
    solver: OnceLock<PoissonSolver>,
}

impl ShapeModel {
    pub fn new(template: TriMesh, exemplars: Vec<DeformRep>, pca: Pca, mapping: LandmarkMapping) -> Result<Self> {
        let nv = template.n_vertices();
        for ex in &exemplars {
            if ex.n_vertices() != nv {
                return Err(Error::SizeMismatch {
                    what: "exemplar vertices",
                    expected: nv,
                    actual: ex.n_vertices(),
                });
            }
        }
        if exemplars.is_empty() {
            return Err(Error::InvalidInput("model has no exemplars".into()));
        }
        if pca.dim() != 9 * nv || pca.components.ncols() != 9 * nv {
            return Err(Error::SizeMismatch {
                what: "PCA dimension",
                expected: 9 * nv,
                actual: pca.dim(),
            });
        }
        if pca.singular_values.len() != pca.n_components() {
            return Err(Error::SizeMismatch {
                what: "singular values",
                expected: pca.n_components(),
                actual: pca.singular_values.len(),
            });
        }
        mapping.validate(nv)?;
        Ok(Self {
            template,
            exemplars,
            pca,
            mapping,
            solver: OnceLock::new(),
        })
    }

    /// Builds the PCA over `exemplars` with `m` components. Requests beyond
    /// `n − 1` are clamped with a warning.
    pub fn build(template: TriMesh, exemplars: Vec<DeformRep>, mapping: LandmarkMapping, m: usize) -> Result<Self> {
        let n = exemplars.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!("a model needs at least 2 exemplars, got {n}")));
        }
        let m = if m > n - 1 {
            warn!("{m} components requested with {n} exemplars; using {}", n - 1);
            n - 1
        } else {
            m
        };
        let pca = build_pca(&exemplars, m)?;
        Self::new(template, exemplars, pca, mapping)
    }

    pub fn template(&self) -> &TriMesh {
        &self.template
    }

    pub fn exemplars(&self) -> &[DeformRep] {
        &self.exemplars
    }

    pub fn pca(&self) -> &Pca {
        &self.pca
    }

    pub fn mapping(&self) -> &LandmarkMapping {
        &self.mapping
    }

    pub fn n_components(&self) -> usize {
        self.pca.n_components()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.pca.explained_variance()
    }

    /// The template's factored Poisson system, built on first use.
    pub fn solver(&self) -> Result<&PoissonSolver> {
        if let Some(s) = self.solver.get() {
            return Ok(s);
        }
        let s = PoissonSolver::new(&self.template)?;
        Ok(self.solver.get_or_init(|| s))
    }

    /// `mean + componentsᵀ · coeffs` as a representation.
    pub fn decode_rep(&self, coeffs: &[f64]) -> Result<DeformRep> {
        DeformRep::from_flat(&self.pca.reconstruct(coeffs)?)
    }

    pub fn decode(&self, coeffs: &[f64], anchor: Vec3) -> Result<Vec<Vec3>> {
        self.solver()?.decode(&self.decode_rep(coeffs)?, anchor)
    }

    pub fn encode_coeffs(&self, rep: &DeformRep) -> Result<Vec<f64>> {
        if rep.n_vertices() != self.template.n_vertices() {
            return Err(Error::SizeMismatch {
                what: "representation vertices",
                expected: self.template.n_vertices(),
                actual: rep.n_vertices(),
            });
        }
        self.pca.project(&rep.to_flat())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let nv = self.template.n_vertices();
        let n = self.exemplars.len();
        let m = self.pca.n_components();
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        for v in [nv, n, m] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());

        let mut section = |tag: &[u8; 4], payload: &[u8]| {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
            out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
        };
        section(b"TMPL", self.template.to_obj_string().as_bytes());
        let ex: Vec<f64> = self.exemplars.iter().flat_map(|e| e.to_flat()).collect();
        section(b"EXMP", &f64_bytes(&ex));
        section(b"PCAM", &f64_bytes(&self.pca.mean));
        let comps: Vec<f64> = (0..m).flat_map(|i| self.pca.components.row(i).iter().copied().collect::<Vec<_>>()).collect();
        section(b"PCAC", &f64_bytes(&comps));
        section(b"PCAS", &f64_bytes(&self.pca.singular_values));
        section(b"MAPP", self.mapping.to_json()?.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let head = r.take(36)?;
        if &head[..4] != MODEL_MAGIC {
            return Err(Error::Format("not a shape model file".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
        let stored = u32::from_le_bytes(head[32..36].try_into().expect("4 bytes"));
        if crc32fast::hash(&head[..32]) != stored {
            return Err(Error::Checksum("header".into()));
        }
        if version != MODEL_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let count = |i: usize| u64::from_le_bytes(head[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize;
        let (nv, n, m) = (count(0), count(1), count(2));

        let tmpl = r.section(b"TMPL")?;
        let text = std::str::from_utf8(tmpl).map_err(|e| Error::Format(format!("template: {e}")))?;
        let template = TriMesh::parse_obj(text)?;
        if template.n_vertices() != nv {
            return Err(Error::Format(format!(
                "header declares {nv} vertices, template has {}",
                template.n_vertices()
            )));
        }
        let dim = 9 * nv;
        let ex = read_f64s(r.section(b"EXMP")?, n * dim, "exemplars")?;
        let exemplars = ex
            .chunks_exact(dim.max(1))
            .take(n)
            .map(DeformRep::from_flat)
            .collect::<Result<Vec<_>>>()?;
        let mean = read_f64s(r.section(b"PCAM")?, dim, "PCA mean")?;
        let comps = read_f64s(r.section(b"PCAC")?, m * dim, "PCA components")?;
        let singular_values = read_f64s(r.section(b"PCAS")?, m, "singular values")?;
        let mapping_text = std::str::from_utf8(r.section(b"MAPP")?).map_err(|e| Error::Format(format!("mapping: {e}")))?;
        let mapping = LandmarkMapping::from_json(mapping_text, nv)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let pca = Pca {
            mean,
            components: DMatrix::from_row_slice(m, dim, &comps),
            singular_values,
            n_samples: n,
        };
        Self::new(template, exemplars, pca, mapping)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_bytes(path.as_ref())?)
    }
}

pub fn save_model(model: &ShapeModel, path: impl AsRef<Path>) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ShapeModel> {
    ShapeModel::load(path)
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f64s(bytes: &[u8], expected: usize, what: &str) -> Result<Vec<f64>> {
    if bytes.len() != expected * 8 {
        return Err(Error::Format(format!(
            "{what}: expected {} bytes, found {}",
            expected * 8,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checksum(format!("file truncated at byte {}", self.bytes.len())));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<&'a [u8]> {
        let found = self.take(4)?;
        if found != tag {
            return Err(Error::Format(format!(
                "expected section {}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(found)
            )));
        }
        let len = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize;
        let payload = self.take(len)?;
        let stored = u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes"));
        if crc32fast::hash(payload) != stored {
            return Err(Error::Checksum(format!("section {}", String::from_utf8_lossy(tag))));
        }
        Ok(payload)
    }
}
