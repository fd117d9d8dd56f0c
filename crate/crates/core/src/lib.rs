//! View-guided point cloud completion.
//!
//! A partial point cloud and a single image of the same object are both
//! turned into equal-length token sequences, encoded by one shared
//! transformer stack, passed through a second shared stack whose outputs are
//! tied together by Gram-matrix feature-transfer losses, fused with a single
//! cross-attention layer, and decoded into a complete cloud.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod interaction;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod tokenize;
pub mod train;
pub mod visualize;

pub use checkpoint::Checkpoint;
pub use config::{DataConfig, ModelConfig, OptimConfig, RunConfig, Variant};
pub use error::{Error, Result};
pub use geometry::{MetricReport, PointCloud};
pub use interaction::{GramMatrix, LossBundle};
pub use model::{ablate_variant, CompletionOutput, FusedFeature, Model};
pub use params::{ParamId, ParamStore};
pub use synth::{build_dataset, Manifest, SampleRecord, ShapeFamily, Split};
pub use tensor::Mat;
pub use tokenize::{ImageView, Modality, TokenSequence};
pub use train::{evaluate, EvalTable, MetricLog, Trainer};
pub use visualize::{visualize_attention, AttentionHeatmap};
