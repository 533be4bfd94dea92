//! Helmholtz scattering data: phantoms, incident fields, the forward
//! solver and dataset builders.

pub mod dataset;
pub mod incident;
pub mod phantom;
pub mod solver;

pub use dataset::{build_dataset, input_planes, Dataset, DatasetHeader, GenerateConfig, Record};
pub use incident::{hankel0, incident_field, Source, SourceKind};
pub use phantom::{permute_exemplar, rasterize_n, sample_ellipses, EllipseParams, PhantomConfig, Regime};
pub use solver::{helmholtz_solve, HelmholtzOperator, HelmholtzSolver};
