//! Neural fast multipole method on 2^L x 2^L grids.
//!
//! The crate holds a small reverse-mode autodiff engine, Morton-ordered
//! quadtree tables, a classical linear FMM used as a reference, the neural
//! block and deep model, losses and metrics, a Helmholtz scattering data
//! generator, the training loop and the binary file formats.

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod quadtree;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use datagen::{build_dataset, Dataset, GenerateConfig, Regime, SourceKind};
pub use error::{Error, Result};
pub use field::GridField;
pub use metrics::MetricReport;
pub use model::{DeepNeuralFmm, ModelConfig, RopeMode};
pub use params::ParamSet;
pub use quadtree::{build_geometry, build_interaction_tables, InteractionTables, TreeGeometry};
pub use tensor::Tensor;
pub use train::{Checkpoint, LossKind, TrainConfig};
