use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::QualityScore;
use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::signal::Waveform;
use crate::spectral::{StftConfig, StftPlan};

/// Offset inside the log-magnitude features, keeping silent bins finite.
pub const FEATURE_EPSILON: f64 = 1e-8;

/// Parameter tensors in storage order.
pub const ARCHITECTURE: [(&str, &[usize]); 8] = [
    ("conv1.weight", &[16, 1, 3, 3]),
    ("conv1.bias", &[16]),
    ("conv2.weight", &[32, 16, 3, 3]),
    ("conv2.bias", &[32]),
    ("dense.weight", &[32, 32]),
    ("dense.bias", &[32]),
    ("head.weight", &[3, 32]),
    ("head.bias", &[3]),
];

/// Layer shapes identifying the architecture.
pub fn architecture_fingerprint() -> Vec<Vec<usize>> {
    ARCHITECTURE.iter().map(|(_, s)| s.to_vec()).collect()
}

/// Differentiable waveform-to-MOS predictor.
///
/// Features are `log(FEATURE_EPSILON + |STFT(x)|)` laid out as a one-channel
/// `[frames, bins]` image. Two blocks of 3x3 "same" convolution, ReLU and
/// 2x2 mean pooling (16 then 32 channels) feed a global mean over time and
/// frequency, a 32-unit ReLU layer, and an affine three-score head.
#[derive(Debug, Clone)]
pub struct PredictorModel {
    plan: Arc<StftPlan>,
    params: Vec<Tensor>,
}

/// Graph handles for one binding of a model's parameters.
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl PredictorModel {
    /// He-initialized model; the head bias starts at the middle of the MOS
    /// scale.
    pub fn init(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(ARCHITECTURE.len());
        for (name, shape) in ARCHITECTURE {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                let fill = if name == "head.bias" { 3.0 } else { 0.0 };
                vec![fill; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if name == "head.weight" { 1.0 } else { 2.0 };
                let normal =
                    Normal::new(0.0, (gain / fan_in as f64).sqrt()).map_err(|e| Error::Domain(e.to_string()))?;
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            params.push(Tensor::new(shape.to_vec(), data)?);
        }
        Self::from_params(params)
    }

    pub fn from_params(params: Vec<Tensor>) -> Result<Self> {
        if params.len() != ARCHITECTURE.len() {
            return Err(Error::Fingerprint(format!(
                "expected {} parameter tensors, got {}",
                ARCHITECTURE.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in ARCHITECTURE.iter().zip(&params) {
            if p.shape() != *shape {
                return Err(Error::Fingerprint(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self {
            plan: Arc::new(StftPlan::new(StftConfig::default())?),
            params,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn stft_plan(&self) -> &Arc<StftPlan> {
        &self.plan
    }

    pub fn stft_config(&self) -> StftConfig {
        *self.plan.config()
    }

    pub fn fingerprint(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|p| p.shape().to_vec()).collect()
    }

    /// FNV-1a over the bit patterns of every weight.
    pub fn weights_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.params.iter().flat_map(|p| p.data()) {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Places every parameter on `graph`, as leaves when `trainable` and as
    /// constants otherwise.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        graph.leaf(p.clone())
                    } else {
                        graph.constant(p.clone())
                    }
                })
                .collect(),
        )
    }

    /// Records the complex STFT of a `[T]` waveform node.
    pub fn spectrum(&self, graph: &mut Graph, waveform: Var) -> Result<Var> {
        graph.linear_map(waveform, self.plan.clone())
    }

    /// Log-magnitude features `[1, frames, bins]` from a spectrum node.
    pub fn features_from_spectrum(&self, graph: &mut Graph, spectrum: Var) -> Result<Var> {
        let (frames, bins) = match graph.shape(spectrum) {
            [f, b, 2] => (*f, *b),
            s => return Err(Error::Dimension(format!("spectrum node has shape {s:?}"))),
        };
        let magnitude = graph.complex_modulus(spectrum)?;
        let shifted = graph.add_scalar(magnitude, FEATURE_EPSILON);
        let logs = graph.log(shifted)?;
        graph.reshape(logs, &[1, frames, bins])
    }

    /// Scores `[3]` from a feature node.
    pub fn head(&self, graph: &mut Graph, features: Var, params: &BoundParams) -> Result<Var> {
        let p = params.vars();
        let h = graph.conv2d(features, p[0], Some(p[1]))?;
        let h = graph.relu(h);
        let h = graph.mean_pool_2x2(h)?;
        let h = graph.conv2d(h, p[2], Some(p[3]))?;
        let h = graph.relu(h);
        let h = graph.mean_pool_2x2(h)?;
        let h = graph.spatial_mean(h)?;
        let h = graph.reshape(h, &[32, 1])?;
        let h = graph.matmul(p[4], h)?;
        let h = graph.reshape(h, &[32])?;
        let h = graph.add(h, p[5])?;
        let h = graph.relu(h);
        let h = graph.reshape(h, &[32, 1])?;
        let h = graph.matmul(p[6], h)?;
        let h = graph.reshape(h, &[3])?;
        graph.add(h, p[7])
    }

    /// Records the full forward pass from a waveform node. Returns the
    /// spectrum node (for reuse by a spectral loss) and the score node.
    pub fn forward(&self, graph: &mut Graph, waveform: Var, params: &BoundParams) -> Result<(Var, Var)> {
        let spectrum = self.spectrum(graph, waveform)?;
        let features = self.features_from_spectrum(graph, spectrum)?;
        let scores = self.head(graph, features, params)?;
        Ok((spectrum, scores))
    }

    /// Feature image of `x`; independent of the weights.
    pub fn features(&self, x: &Waveform) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = g.constant(Tensor::vector(x.samples().to_vec())?);
        let s = self.spectrum(&mut g, w)?;
        let f = self.features_from_spectrum(&mut g, s)?;
        Ok(g.value(f).clone())
    }

    pub fn predict_features(&self, features: &Tensor) -> Result<QualityScore> {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let params = self.bind(&mut g, false);
        let out = self.head(&mut g, f, &params)?;
        score_of(&g, out)
    }

    pub fn predict(&self, x: &Waveform) -> Result<QualityScore> {
        self.predict_features(&self.features(x)?)
    }
}

pub(crate) fn score_of(g: &Graph, node: Var) -> Result<QualityScore> {
    let s = QualityScore::from_slice(g.value(node).data())
        .ok_or_else(|| Error::Dimension(format!("score node has shape {:?}", g.shape(node))))?;
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("prediction {s}")));
    }
    Ok(s)
}
