use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::score_of;
use super::{PredictorModel, QualityScore};
use crate::diff::{AdamConfig, AdamState, Graph, Tensor};
use crate::error::{Error, Result};
use crate::signal::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
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

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PredictorModel,
    /// Mean squared error of each optimizer step's batch, before the step.
    pub loss_trace: Vec<f64>,
}

/// A precomputed feature image and its regression target.
#[derive(Debug, Clone)]
pub(crate) struct FeatureSample {
    pub features: Tensor,
    pub target: QualityScore,
}

/// Squared error `||model(features) - target||^2` and, optionally, its
/// gradient with respect to every parameter.
pub(crate) fn squared_error(
    model: &PredictorModel,
    sample: &FeatureSample,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    let mut g = Graph::new();
    let features = g.constant(sample.features.clone());
    let params = model.bind(&mut g, with_grads);
    let out = model.head(&mut g, features, &params)?;
    score_of(&g, out)?;
    let target = g.constant(Tensor::vector(sample.target.to_array().to_vec())?);
    let diff = g.sub(out, target)?;
    let loss = g.l2_norm_sq(diff);
    let value = g.value(loss).item()?;
    if !with_grads {
        return Ok((value, None));
    }
    let mut grads = g.backward(loss)?;
    let per_param = params
        .vars()
        .iter()
        .zip(model.params())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    Ok((value, Some(per_param)))
}

/// Adam over every parameter tensor of a model, on mean-squared error.
pub(crate) struct ModelOptimizer {
    states: Vec<AdamState>,
}

impl ModelOptimizer {
    pub fn new(model: &PredictorModel, learning_rate: f64) -> Self {
        let cfg = AdamConfig::with_learning_rate(learning_rate);
        Self {
            states: model.params().iter().map(|p| AdamState::new(p.len(), cfg)).collect(),
        }
    }

    /// One step on the batch mean of per-sample squared errors divided by 3.
    /// Returns that mean before the update.
    pub fn step(&mut self, model: &mut PredictorModel, batch: &[&FeatureSample]) -> Result<f64> {
        let mut total = 0.0;
        let mut acc: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        for sample in batch {
            let (loss, grads) = squared_error(model, sample, true)?;
            total += loss;
            for (a, g) in acc.iter_mut().zip(grads.expect("requested gradients")) {
                a.iter_mut().zip(&g).for_each(|(a, g)| *a += g);
            }
        }
        let norm = 3.0 * batch.len() as f64;
        let mean = total / norm;
        if !mean.is_finite() {
            return Err(Error::Diverged {
                step: self.states.first().map_or(0, |s| s.step_count() as usize),
                loss: mean,
            });
        }
        for ((state, param), grad) in self.states.iter_mut().zip(model.params_mut()).zip(acc) {
            let grad: Vec<f64> = grad.into_iter().map(|g| g / norm).collect();
            state.step_slice(param.data_mut(), &grad);
        }
        if model.params().iter().any(|p| !p.all_finite()) {
            return Err(Error::Diverged {
                step: self.states[0].step_count() as usize,
                loss: f64::NAN,
            });
        }
        Ok(mean)
    }
}

/// Fits a freshly initialized predictor to labeled waveforms by minimizing the
/// mean squared error over the three subscores.
pub fn train_predictor(corpus: &[(Waveform, QualityScore)], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidData("training corpus is empty".into()));
    }
    if let Some((_, bad)) = corpus.iter().find(|(_, y)| !y.is_finite()) {
        return Err(Error::InvalidData(format!("non-finite label {bad}")));
    }
    let mut model = PredictorModel::init(cfg.seed)?;
    let samples = corpus
        .iter()
        .map(|(x, y)| {
            Ok(FeatureSample {
                features: model.features(x)?,
                target: *y,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f7a1e);
    let mut optimizer = ModelOptimizer::new(&model, cfg.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut loss_trace = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FeatureSample> = chunk.iter().map(|&i| &samples[i]).collect();
            loss_trace.push(optimizer.step(&mut model, &batch)?);
        }
        log::debug!(
            "epoch {epoch}: last batch mse {:.4}",
            loss_trace.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(TrainOutcome { model, loss_trace })
}
