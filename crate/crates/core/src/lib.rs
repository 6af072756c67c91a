//! Targeted adversarial perturbations against neural speech-quality (MOS)
//! predictors, and adversarial retraining to harden them.
//!
//! The pipeline, bottom-up:
//!
//! * [`signal`] and [`wav`]: waveforms, dB distortion, tanh-bounded perturbations.
//! * [`diff`]: a small reverse-mode engine with Adam and a finite-difference oracle.
//! * [`spectral`]: a differentiable STFT and the spectral L1 similarity loss.
//! * [`predictor`]: a trainable CNN mapping a waveform to (SIG, BAK, OVRL).
//! * [`attack`]: the targeted attack and the relabeling target rule.
//! * [`defense`]: adversarial datasets, retraining, and robustness metrics.
//! * [`study`]: listening-test statistics.
//! * [`corpus`]: synthetic corpora and directory ingestion.

pub mod attack;
pub mod corpus;
pub mod defense;
pub mod diff;
pub mod error;
pub mod predictor;
pub mod signal;
pub mod spectral;
pub mod study;
pub mod wav;

pub use attack::{AdversarialResult, AttackConfig};
pub use corpus::{Manifest, ManifestEntry, Split, SynthSpec};
pub use defense::{AdvTrainConfig, RobustnessReport};
pub use error::{Error, ErrorKind, Result};
pub use predictor::{PredictorModel, QualityScore};
pub use signal::{Perturbation, Waveform};
pub use spectral::StftConfig;
pub use study::HumanStudyTable;
