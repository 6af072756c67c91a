//! A small trainable CNN standing in for a P.835 quality predictor.
//!
//! The same type serves as the teacher `f` and the retrained model `g`.

mod bundle;
mod model;
mod score;
mod train;

pub use bundle::{
    decode_bundle, encode_bundle, load_bundle, load_model, save_model, sidecar_path, BundleSidecar, TrainingMetadata,
    WeightBundle, FORMAT_VERSION, MAGIC,
};
pub use model::{architecture_fingerprint, BoundParams, PredictorModel, ARCHITECTURE, FEATURE_EPSILON};
pub use score::{surrogate_label, QualityScore};
pub use train::{train_predictor, TrainConfig, TrainOutcome};

pub(crate) use model::score_of;
pub(crate) use train::{squared_error, FeatureSample, ModelOptimizer};
