//! Adversarial retraining and robustness metrics.
//!
//! Given a teacher `f`, a labeled set `D = {(x_i, f(x_i))}` and its
//! adversarial counterpart `AD = {(x_i + delta_i, f(x_i))}`, the student `g`
//! starts from `f`'s weights and is fit to the teacher labels on `D ∪ AD`.
//! The loss on `AD` corrects adversarial deviation; the loss on `D` measures
//! forgetting.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AdversarialResult, AttackConfig, ClipAttack};
use crate::error::{Error, Result};
use crate::predictor::{squared_error, FeatureSample, ModelOptimizer, PredictorModel, QualityScore};
use crate::signal::{apply, Waveform};

#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub clip_id: String,
    pub waveform: Waveform,
    pub label: QualityScore,
}

#[derive(Debug, Clone)]
pub struct LabeledSet {
    /// Digest of the model whose predictions are the labels; `None` for
    /// externally supplied labels.
    pub teacher_digest: Option<u64>,
    pub clips: Vec<LabeledClip>,
}

impl LabeledSet {
    pub fn with_external_labels(clips: Vec<LabeledClip>) -> Result<Self> {
        if let Some(c) = clips.iter().find(|c| !c.label.is_finite()) {
            return Err(Error::InvalidData(format!("clip {} has non-finite label", c.clip_id)));
        }
        Ok(Self {
            teacher_digest: None,
            clips,
        })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Labels each clip with the teacher's prediction. Clips the teacher cannot
/// score are left out and returned with their error.
pub fn build_labeled(clips: Vec<(String, Waveform)>, teacher: &PredictorModel) -> (LabeledSet, Vec<(String, Error)>) {
    let predictions: Vec<Result<QualityScore>> = clips.par_iter().map(|(_, x)| teacher.predict(x)).collect();
    let mut set = LabeledSet {
        teacher_digest: Some(teacher.weights_digest()),
        clips: Vec::with_capacity(clips.len()),
    };
    let mut failed = Vec::new();
    for ((clip_id, waveform), label) in clips.into_iter().zip(predictions) {
        match label {
            Ok(label) => set.clips.push(LabeledClip {
                clip_id,
                waveform,
                label,
            }),
            Err(e) => {
                log::warn!("cannot label {clip_id}: {e}");
                failed.push((clip_id, e));
            }
        }
    }
    (set, failed)
}

#[derive(Debug, Clone)]
pub struct AdversarialEntry {
    pub clip_id: String,
    /// The source clip's label, never the attack target.
    pub label: QualityScore,
    pub attack: std::result::Result<AdversarialResult, String>,
}

impl AdversarialEntry {
    pub fn success(&self) -> bool {
        self.attack.as_ref().is_ok_and(|r| r.success)
    }

    /// `x + delta`; a failed attack contributes the clean clip.
    pub fn waveform(&self, source: &Waveform) -> Result<Waveform> {
        match &self.attack {
            Ok(r) => r.adversarial(source),
            Err(_) => Ok(source.clone()),
        }
    }
}

/// One entry per source clip, in the source set's order.
#[derive(Debug, Clone)]
pub struct AdversarialSet {
    pub teacher_digest: Option<u64>,
    pub entries: Vec<AdversarialEntry>,
}

impl AdversarialSet {
    /// Pairs precomputed attack results with their source clips by id.
    pub fn from_results(labeled: &LabeledSet, results: Vec<ClipAttack>) -> Result<Self> {
        if results.len() != labeled.len() {
            return Err(Error::InvalidData(format!(
                "{} attack results for {} labeled clips",
                results.len(),
                labeled.len()
            )));
        }
        let entries = labeled
            .clips
            .iter()
            .zip(results)
            .map(|(clip, r)| {
                if r.clip_id != clip.clip_id {
                    return Err(Error::InvalidData(format!(
                        "attack result for '{}' where '{}' was expected",
                        r.clip_id, clip.clip_id
                    )));
                }
                if let Ok(a) = &r.result {
                    if a.perturbation.len() != clip.waveform.len() {
                        return Err(Error::Dimension(format!(
                            "perturbation for '{}' has {} samples, clip has {}",
                            clip.clip_id,
                            a.perturbation.len(),
                            clip.waveform.len()
                        )));
                    }
                }
                Ok(AdversarialEntry {
                    clip_id: clip.clip_id.clone(),
                    label: clip.label,
                    attack: r.result,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            teacher_digest: labeled.teacher_digest,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adversarial waveforms paired with their labels, in source order.
    pub fn pairs(&self, labeled: &LabeledSet) -> Result<Vec<(Waveform, QualityScore)>> {
        self.entries
            .iter()
            .zip(&labeled.clips)
            .map(|(e, c)| Ok((e.waveform(&c.waveform)?, e.label)))
            .collect()
    }
}

/// Attacks every labeled clip with `teacher`. Failed attacks stay in the set,
/// flagged and labeled like the rest.
pub fn build_adversarial_set(
    labeled: &LabeledSet,
    teacher: &PredictorModel,
    cfg: &AttackConfig,
) -> Result<AdversarialSet> {
    cfg.validate()?;
    check_teacher(labeled.teacher_digest, teacher)?;
    let results = labeled
        .clips
        .par_iter()
        .map(|c| ClipAttack {
            clip_id: c.clip_id.clone(),
            result: run_attack(teacher, &c.waveform, cfg).map_err(|e| {
                log::warn!("attack on {} failed: {e}", c.clip_id);
                e.to_string()
            }),
        })
        .collect();
    AdversarialSet::from_results(labeled, results)
}

fn check_teacher(digest: Option<u64>, teacher: &PredictorModel) -> Result<()> {
    match digest {
        Some(d) if d != teacher.weights_digest() => Err(Error::InvalidData(format!(
            "labels come from teacher {d:016x}, but the supplied model is {:016x}",
            teacher.weights_digest()
        ))),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-4,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl AdvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Mean per-clip squared error `||g(.) - y||^2` on each half of the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Over the adversarial set.
    pub adversarial_loss: f64,
    /// Over the clean set.
    pub forgetting_loss: f64,
}

#[derive(Debug, Clone)]
pub struct AdvTrainOutcome {
    pub model: PredictorModel,
    /// Entry 0 is before any update; entry `k` follows epoch `k`.
    pub log: Vec<EpochLog>,
}

fn mean_loss(model: &PredictorModel, samples: &[FeatureSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let losses = samples
        .par_iter()
        .map(|s| squared_error(model, s, false).map(|(l, _)| l))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Fits a copy of `teacher` on `D ∪ AD` with equal weight per clip.
pub fn adv_train(
    teacher: &PredictorModel,
    clean: &LabeledSet,
    adversarial: &AdversarialSet,
    cfg: &AdvTrainConfig,
) -> Result<AdvTrainOutcome> {
    cfg.validate()?;
    if clean.is_empty() {
        return Err(Error::InvalidData("clean set is empty".into()));
    }
    check_teacher(clean.teacher_digest, teacher)?;
    if adversarial.teacher_digest != clean.teacher_digest {
        return Err(Error::InvalidData(
            "clean and adversarial sets come from different teachers".into(),
        ));
    }
    if !adversarial.is_empty() && adversarial.len() != clean.len() {
        return Err(Error::InvalidData(format!(
            "adversarial set has {} entries for {} clean clips",
            adversarial.len(),
            clean.len()
        )));
    }

    let featurize = |pairs: Vec<(Waveform, QualityScore)>| -> Result<Vec<FeatureSample>> {
        pairs
            .par_iter()
            .map(|(x, y)| {
                Ok(FeatureSample {
                    features: teacher.features(x)?,
                    target: *y,
                })
            })
            .collect()
    };
    let d = featurize(clean.clips.iter().map(|c| (c.waveform.clone(), c.label)).collect())?;
    let ad = if adversarial.is_empty() {
        Vec::new()
    } else {
        featurize(adversarial.pairs(clean)?)?
    };

    let mut model = teacher.clone();
    let mut log = vec![EpochLog {
        epoch: 0,
        adversarial_loss: mean_loss(&model, &ad)?,
        forgetting_loss: mean_loss(&model, &d)?,
    }];
    let union: Vec<&FeatureSample> = d.iter().chain(&ad).collect();
    let mut order: Vec<usize> = (0..union.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xad7_7a1e);
    let mut optimizer = ModelOptimizer::new(&model, cfg.learning_rate);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FeatureSample> = chunk.iter().map(|&i| union[i]).collect();
            optimizer.step(&mut model, &batch)?;
        }
        let entry = EpochLog {
            epoch,
            adversarial_loss: mean_loss(&model, &ad)?,
            forgetting_loss: mean_loss(&model, &d)?,
        };
        log::info!(
            "adv_train epoch {epoch}: adversarial {:.5}, forgetting {:.5}",
            entry.adversarial_loss,
            entry.forgetting_loss
        );
        log.push(entry);
    }
    Ok(AdvTrainOutcome { model, log })
}

/// A clean clip and its perturbed version.
#[derive(Debug, Clone)]
pub struct RobustnessPair {
    pub clip_id: String,
    pub clean: Waveform,
    pub adversarial: Waveform,
}

impl RobustnessPair {
    pub fn from_result(clip_id: impl Into<String>, clean: Waveform, result: &AdversarialResult) -> Result<Self> {
        let adversarial = apply(&clean, &result.delta())?;
        Ok(Self {
            clip_id: clip_id.into(),
            clean,
            adversarial,
        })
    }
}

/// Per-subscore deviations of `f` and `g` on perturbed clips, measured
/// against `f` on the clean clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub n: usize,
    /// Mean `|f_j(x + delta) - f_j(x)|`.
    pub e_f: [f64; 3],
    /// Mean `|g_j(x + delta) - f_j(x)|`.
    pub e_g: [f64; 3],
    /// Mean `|g_j(x) - f_j(x)|`.
    pub f_g: [f64; 3],
    /// Clips with `|g_j(x + delta) - f_j(x)| < |f_j(x + delta) - f_j(x)|`.
    pub pass_count: [usize; 3],
    /// Clips passing on all three subscores at once.
    pub pass_all: usize,
}

impl RobustnessReport {
    pub fn pass_rate(&self) -> [f64; 3] {
        self.pass_count.map(|c| c as f64 / self.n as f64)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["subscore", "e_f", "e_g", "f_g", "pass_rate"])?;
        let rates = self.pass_rate();
        for (j, name) in QualityScore::NAMES.iter().enumerate() {
            w.write_record([
                name.to_string(),
                self.e_f[j].to_string(),
                self.e_g[j].to_string(),
                self.f_g[j].to_string(),
                rates[j].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("robustness csv", e))?;
        Ok(())
    }
}

pub fn compute_errors(f: &PredictorModel, g: &PredictorModel, pairs: &[RobustnessPair]) -> Result<RobustnessReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidData(
            "robustness evaluation needs at least one clip".into(),
        ));
    }
    let rows = pairs
        .par_iter()
        .map(|p| {
            Ok((
                f.predict(&p.clean)?.to_array(),
                f.predict(&p.adversarial)?.to_array(),
                g.predict(&p.clean)?.to_array(),
                g.predict(&p.adversarial)?.to_array(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len();
    let mut report = RobustnessReport {
        n,
        e_f: [0.0; 3],
        e_g: [0.0; 3],
        f_g: [0.0; 3],
        pass_count: [0; 3],
        pass_all: 0,
    };
    for (f_x, f_adv, g_x, g_adv) in &rows {
        let mut all = true;
        for j in 0..3 {
            let ef = (f_adv[j] - f_x[j]).abs();
            let eg = (g_adv[j] - f_x[j]).abs();
            report.e_f[j] += ef;
            report.e_g[j] += eg;
            report.f_g[j] += (g_x[j] - f_x[j]).abs();
            if eg < ef {
                report.pass_count[j] += 1;
            } else {
                all = false;
            }
        }
        report.pass_all += usize::from(all);
    }
    for j in 0..3 {
        report.e_f[j] /= n as f64;
        report.e_g[j] /= n as f64;
        report.f_g[j] /= n as f64;
    }
    Ok(report)
}
