//! Checkpoint arithmetic for instruction residuals.
//!
//! An instruction residual is the element-wise difference between an
//! instruction-tuned checkpoint and the base checkpoint it was tuned from.
//! Adding it to a continually pre-trained copy of the base restores
//! instruction following without repeating instruction tuning.
//!
//! The crate also packs tokenized corpora into fixed-length training
//! sequences and accounts for training compute.

pub mod archive;
pub mod compat;
pub mod diff;
pub mod dtype;
pub mod error;
pub mod flops;
pub mod gate;
pub mod kernel;
pub mod packer;
pub mod policy;
pub mod residual;
pub mod scalar;
pub mod signature;

pub use archive::{write_archive, Archive, ArchiveWriter, ContentHash, TensorInfo, TensorRecord};
pub use compat::{check_compat, CompatVerdict, Mismatch, MismatchKind};
pub use diff::{diff_report, DiffReport, TensorDiff};
pub use dtype::Dtype;
pub use error::{ArchiveError, NonFiniteTensor, ResidualError};
pub use flops::{flops_per_token, flops_ratio, training_flops, FlopsError, FlopsRatio, FlopsSpec, HardwareProfile};
pub use gate::{gate, GateReport, LineageTag, Variant, Verdict, S1_WARNING};
pub use packer::{pack, stats, PackConfig, PackError, PackedSequence, Packer, PackingStats, TokenDoc};
pub use policy::{Accumulation, MergePolicy, MissingTensor, OutputDtype};
pub use residual::{apply_residual, extract_residual, Application, Extraction, Provenance, ResidualSet};
pub use scalar::Scalar;
pub use signature::{ModelSignature, SignatureEntry};

/// Statistics accumulated in single precision.
pub type PairStats32 = kernel::PairStats<f32>;
/// Statistics accumulated in double precision.
pub type PairStats64 = kernel::PairStats<f64>;
