//! Two-stage multi-view semantic segmentation over an implicit neural field.
//!
//! Stage 1 fits scene geometry and colour from all RGB views; stage 2 freezes
//! the density network and transfers colour to semantics using sparse labels,
//! foundation-feature pseudo-labels and a transformer fusion head.

pub mod checkpoint;
pub mod error;
pub mod features;
pub mod field;
pub mod fusion;
pub mod hash;
pub mod metrics;
pub mod nn;
pub mod pseudo;
pub mod scene;
pub mod trainer;
pub mod synth;
pub mod tape;
pub mod volume;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use error::{Error, Result};
pub use features::{
    extract_features, FeatureBackend, FeatureCache, FeatureMap, SamBackend, StubBackend,
};
pub use field::{freeze_density, freeze_field, FieldConfig, FieldOutput, NeuralField};
pub use fusion::{FusionConfig, FusionHead};
pub use metrics::{AbsentClassPolicy, ConfusionMatrix, MiouReport};
pub use nn::{Adam, AdamConfig, ParamStore};
pub use pseudo::{
    assign_pseudo_labels, compute_centroids, ClassCentroids, DistanceMetric, PseudoLabelMap,
};
pub use scene::{load_scene, save_scene, CameraModel, Ray, Scene, SplitTag, View, IGNORE_LABEL};
pub use trainer::{loss_rgb, loss_semantic, train_stage1, train_stage2, LossRecord, Stage2Inputs, TrainConfig};
pub use synth::{generate_toy_scene, ground_truth_density, Primitive, PrimitiveShape, ToySceneSpec};
pub use volume::{compute_weights, render_colour, render_semantics, RenderOutput, SampleMode};
