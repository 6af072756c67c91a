//! Targeted attack on a quality predictor.
//!
//! The perturbation is `delta = A * tanh(z)`, so `|delta_t| < A` holds for
//! every latent `z` and the loudness bound never needs a penalty term. Adam
//! minimizes
//!
//! ```text
//! sum |STFT(x + delta) - STFT(x)|  +  c * ||f(x + delta) - y_target||_1
//! ```

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{Manifest, ManifestEntry};
use crate::diff::{AdamConfig, AdamState, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::predictor::{score_of, PredictorModel, QualityScore};
use crate::signal::{apply, db_distortion, Perturbation, Waveform};
use crate::spectral::spectral_l1_node;
use crate::wav::save_wav;

/// Largest magnitude the latent may take; `tanh(10)` is already within 5e-9
/// of saturation.
pub const LATENT_LIMIT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub c: f64,
    pub amplitude: f64,
    pub max_iters: usize,
    pub learning_rate: f64,
    pub target_tolerance: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            c: 10.0,
            amplitude: 0.03,
            max_iters: 500,
            learning_rate: 5e-3,
            target_tolerance: 0.1,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("attack c must be positive, got {}", self.c)));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config(format!(
                "attack amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("attack max_iters must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "invalid attack learning rate {}",
                self.learning_rate
            )));
        }
        if self.target_tolerance.is_nan() || self.target_tolerance < 0.0 {
            return Err(Error::Config(format!(
                "invalid target tolerance {}",
                self.target_tolerance
            )));
        }
        Ok(())
    }
}

/// Relabeling rule: each subscore is clamped into `[1, 5]`, then mapped to 5
/// if it is at most 3 and to 1 otherwise.
pub fn target_from_score(y: QualityScore) -> Result<QualityScore> {
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("cannot derive a target from {y}")));
    }
    Ok(QualityScore::from_array(y.to_array().map(|v| {
        if v.clamp(1.0, 5.0) <= 3.0 {
            5.0
        } else {
            1.0
        }
    })))
}

mod neg_inf_as_null {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialResult {
    pub perturbation: Perturbation,
    pub y_orig: QualityScore,
    pub y_target: QualityScore,
    pub y_achieved: QualityScore,
    /// `-inf` (stored as `null`) when the perturbation is identically zero.
    #[serde(with = "neg_inf_as_null")]
    pub db: f64,
    pub iterations_used: usize,
    pub objective_trace: Vec<f64>,
    pub success: bool,
}

impl AdversarialResult {
    pub fn initial_deviation(&self) -> f64 {
        self.y_orig.l1_distance(&self.y_target)
    }

    pub fn deviation(&self) -> f64 {
        self.y_achieved.l1_distance(&self.y_target)
    }

    pub fn delta(&self) -> Vec<f64> {
        self.perturbation.materialize()
    }

    /// Rebuilds `x + delta` from the clean clip.
    pub fn adversarial(&self, x: &Waveform) -> Result<Waveform> {
        apply(x, &self.delta())
    }
}

/// Nodes recorded by [`attack_objective`].
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub objective: Var,
    pub spectral: Var,
    pub deviation: Var,
    pub score: Var,
}

/// Precomputed, iteration-invariant pieces of the objective.
struct AttackProblem<'a> {
    model: &'a PredictorModel,
    x: Tensor,
    reference: Tensor,
    target: Tensor,
    cfg: AttackConfig,
}

impl<'a> AttackProblem<'a> {
    fn new(model: &'a PredictorModel, x: &Waveform, y_target: QualityScore, cfg: &AttackConfig) -> Result<Self> {
        let x = Tensor::vector(x.samples().to_vec())?;
        let reference = {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let s = model.spectrum(&mut g, xv)?;
            g.value(s).clone()
        };
        Ok(Self {
            model,
            x,
            reference,
            target: Tensor::vector(y_target.to_array().to_vec())?,
            cfg: *cfg,
        })
    }

    fn record(&self, g: &mut Graph, z: Var) -> Result<ObjectiveNodes> {
        if g.shape(z) != self.x.shape() {
            return Err(Error::Dimension(format!(
                "latent shape {:?} does not match signal shape {:?}",
                g.shape(z),
                self.x.shape()
            )));
        }
        let x = g.constant(self.x.clone());
        let t = g.tanh(z);
        let delta = g.scale(t, self.cfg.amplitude);
        let perturbed = g.add(x, delta)?;
        let params = self.model.bind(g, false);
        let (spec, score) = self.model.forward(g, perturbed, &params)?;
        let reference = g.constant(self.reference.clone());
        let spectral = spectral_l1_node(g, spec, reference)?;
        let target = g.constant(self.target.clone());
        let gap = g.sub(score, target)?;
        let deviation = g.l1_norm(gap);
        let weighted = g.scale(deviation, self.cfg.c);
        let objective = g.add(spectral, weighted)?;
        Ok(ObjectiveNodes {
            objective,
            spectral,
            deviation,
            score,
        })
    }
}

/// Records the attack objective for latent node `z` (shape `[T]`) on `graph`.
pub fn attack_objective(
    graph: &mut Graph,
    model: &PredictorModel,
    x: &Waveform,
    z: Var,
    y_target: QualityScore,
    cfg: &AttackConfig,
) -> Result<ObjectiveNodes> {
    AttackProblem::new(model, x, y_target, cfg)?.record(graph, z)
}

/// Runs the attack from `z = 0`, keeping the iterate with the smallest
/// target deviation and stopping once it is within tolerance.
///
/// Each of the `iterations_used` iterations evaluates the objective at the
/// current latent; all but a stopping iteration then take one Adam step.
pub fn run_attack(model: &PredictorModel, x: &Waveform, cfg: &AttackConfig) -> Result<AdversarialResult> {
    cfg.validate()?;
    model.stft_config().frames(x.len())?;
    let y_orig = model.predict(x)?;
    let y_target = target_from_score(y_orig)?;
    let problem = AttackProblem::new(model, x, y_target, cfg)?;

    let mut latent = Tensor::zeros(&[x.len()]);
    let mut adam = AdamState::new(x.len(), AdamConfig::with_learning_rate(cfg.learning_rate));
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut best: Option<(f64, Vec<f64>, QualityScore)> = None;

    for step in 0..cfg.max_iters {
        let mut g = Graph::new();
        let z = g.leaf(latent.clone());
        let nodes = problem.record(&mut g, z)?;
        let objective = g.value(nodes.objective).item()?;
        if !objective.is_finite() {
            return Err(Error::Diverged { step, loss: objective });
        }
        trace.push(objective);
        let deviation = g.value(nodes.deviation).item()?;
        let score = score_of(&g, nodes.score)?;
        if best.as_ref().is_none_or(|(d, _, _)| deviation < *d) {
            best = Some((deviation, latent.data().to_vec(), score));
        }
        if deviation <= cfg.target_tolerance || step + 1 == cfg.max_iters {
            break;
        }
        let grads = g.backward(nodes.objective)?;
        let grad = grads
            .get(z)
            .ok_or_else(|| Error::Contract("latent received no gradient".into()))?;
        adam.step_slice(latent.data_mut(), grad);
        for v in latent.data_mut() {
            *v = v.clamp(-LATENT_LIMIT, LATENT_LIMIT);
        }
    }

    let (deviation, best_latent, y_achieved) = best.expect("at least one iteration");
    let perturbation = Perturbation::new(best_latent, cfg.amplitude)?;
    let db = db_distortion(x, &perturbation.materialize())?;
    log::debug!(
        "attack: {y_orig} -> {y_achieved} (target {y_target}), {db:.2} dB, {} iterations",
        trace.len()
    );
    Ok(AdversarialResult {
        perturbation,
        y_orig,
        y_target,
        y_achieved,
        db,
        iterations_used: trace.len(),
        objective_trace: trace,
        success: deviation <= cfg.target_tolerance,
    })
}

/// Outcome of attacking one clip in a batch.
#[derive(Debug, Clone)]
pub struct ClipAttack {
    pub clip_id: String,
    pub result: std::result::Result<AdversarialResult, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub clips: usize,
    pub failed: usize,
    pub success_rate: f64,
    pub mean_db: f64,
    pub mean_initial_deviation: f64,
    pub mean_deviation: f64,
}

/// Attacks each clip independently on the current rayon pool. Results come
/// back in input order; a failing clip is recorded and the rest continue.
pub fn batch_attack(clips: &[(String, Waveform)], model: &PredictorModel, cfg: &AttackConfig) -> Vec<ClipAttack> {
    clips
        .par_iter()
        .map(|(id, x)| {
            let result = run_attack(model, x, cfg).map_err(|e| {
                log::warn!("attack on {id} failed: {e}");
                e.to_string()
            });
            ClipAttack {
                clip_id: id.clone(),
                result,
            }
        })
        .collect()
}

/// Loads and attacks the given manifest entries. Unreadable clips become
/// failed entries.
pub fn batch_attack_manifest<'m>(
    manifest: &Manifest,
    entries: impl IntoIterator<Item = &'m ManifestEntry>,
    model: &PredictorModel,
    cfg: &AttackConfig,
) -> Vec<ClipAttack> {
    let entries: Vec<&ManifestEntry> = entries.into_iter().collect();
    entries
        .par_iter()
        .map(|entry| {
            let result = manifest
                .load_clip(entry)
                .and_then(|x| run_attack(model, &x, cfg))
                .map_err(|e| {
                    log::warn!("attack on {} failed: {e}", entry.clip_id);
                    e.to_string()
                });
            ClipAttack {
                clip_id: entry.clip_id.clone(),
                result,
            }
        })
        .collect()
}

pub fn summarize(items: &[ClipAttack]) -> BatchSummary {
    let ok: Vec<&AdversarialResult> = items.iter().filter_map(|c| c.result.as_ref().ok()).collect();
    let n = ok.len() as f64;
    let mean = |f: &dyn Fn(&AdversarialResult) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / n
        }
    };
    BatchSummary {
        clips: items.len(),
        failed: items.len() - ok.len(),
        success_rate: if items.is_empty() {
            0.0
        } else {
            ok.iter().filter(|r| r.success).count() as f64 / items.len() as f64
        },
        mean_db: mean(&|r| r.db),
        mean_initial_deviation: mean(&|r| r.initial_deviation()),
        mean_deviation: mean(&|r| r.deviation()),
    }
}

const SUMMARY_HEADER: [&str; 15] = [
    "clip_id",
    "sig_orig",
    "bak_orig",
    "ovrl_orig",
    "sig_target",
    "bak_target",
    "ovrl_target",
    "sig_achieved",
    "bak_achieved",
    "ovrl_achieved",
    "db",
    "iters",
    "success",
    "deviation",
    "error",
];

pub fn write_summary_csv<W: std::io::Write>(items: &[ClipAttack], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for item in items {
        let mut row = vec![item.clip_id.clone()];
        match &item.result {
            Ok(r) => {
                for s in [r.y_orig, r.y_target, r.y_achieved] {
                    row.extend(s.to_array().iter().map(|v| v.to_string()));
                }
                row.push(r.db.to_string());
                row.push(r.iterations_used.to_string());
                row.push(r.success.to_string());
                row.push(r.deviation().to_string());
                row.push(String::new());
            }
            Err(e) => {
                row.extend(std::iter::repeat_n(String::new(), 11));
                row.push("false".into());
                row.push(String::new());
                row.push(e.clone());
            }
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("summary csv", e))?;
    Ok(())
}

/// Writes `<clip_id>.adv.wav` and `<clip_id>.adv.json` for one result.
pub fn write_adversarial(dir: &Path, clip_id: &str, x: &Waveform, result: &AdversarialResult) -> Result<()> {
    save_wav(&result.adversarial(x)?, dir.join(format!("{clip_id}.adv.wav")))?;
    let json = dir.join(format!("{clip_id}.adv.json"));
    fs::write(&json, serde_json::to_string(result)?).map_err(|e| Error::io(&json, e))
}

pub fn read_adversarial(path: impl AsRef<Path>) -> Result<AdversarialResult> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
