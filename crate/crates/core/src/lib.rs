//! Domain-adaptive semantic segmentation from labelled day scenes to
//! unlabelled night scenes.
//!
//! Training runs in two stages. The warm-up stage closes self-loops: images
//! are encoded, segmented, and reconstructed by decoders whose features are
//! modulated by the predicted class probabilities, both within a domain
//! (inner loop) and across a day/night round trip (outer loop). The
//! self-training stage adds pseudo-label supervision: offline labels from the
//! frozen warm-up model plus an online static-class signal derived from each
//! night image's day-time reference view, gated by a label-overlap ratio on
//! shift-sensitive classes.

pub mod autograd;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod params;
pub mod selftrain;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use nets::{ArchConfig, ModelBundle, ScoreMap, Side};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
pub use types::{
    argmax_labels, onehot, restrict, ClassTaxonomy, Domain, Image, LabelMap, LatentFeature, OneHotMask,
    PairedSample, ProbMap, IGNORE_ID,
};
