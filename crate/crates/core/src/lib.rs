//! Nonlinear parametric 3D caricature face model.
//!
//! Meshes share the connectivity of a template. A deformed mesh is encoded as
//! a per-vertex rotation logarithm and symmetric stretch ([`DeformRep`]);
//! representations are blended over exemplars, decoded back to positions by a
//! Poisson solve, and fitted to 68 image landmarks together with a
//! weak-perspective pose.

pub mod deform;
pub mod error;
pub mod fit;
pub mod io;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod poisson;
pub mod pose;
pub mod sparse;
pub mod synth;

pub use deform::{blend, encode, BlendWeights, DeformRep, ExemplarBasis, Mat3};
pub use error::{Error, Result};
pub use fit::{fit, FitConfig, FitResult, LandmarkMapping};
pub use mesh::{TriMesh, Vec3};
pub use model::{load_model, save_model, ShapeModel};
pub use poisson::PoissonSolver;
pub use pose::{estimate_pose, LandmarkSet2D, Pose, Vec2};
