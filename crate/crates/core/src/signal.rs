//! Mono waveforms, peak normalization, the dB distortion metric, and
//! tanh-bounded perturbations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A mono sample sequence at a fixed sample rate.
///
/// Samples are dimensionless amplitudes; WAV input is scaled into `[-1, 1]`
/// but nothing here clamps, since adversarial sums may overshoot.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySignal("waveform has no samples".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::InvalidData("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i} is {}", samples[i])));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        peak_abs(&self.samples)
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

pub(crate) fn peak_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Scales `x` so that its largest absolute sample is exactly 1.
pub fn peak_normalize(x: &Waveform) -> Result<Waveform> {
    let peak = x.peak();
    if peak == 0.0 {
        return Err(Error::EmptySignal("cannot normalize an all-zero signal".into()));
    }
    let samples = x.samples.iter().map(|&s| s / peak).collect();
    Ok(Waveform {
        samples,
        sample_rate_hz: x.sample_rate_hz,
    })
}

/// Loudness of `delta` relative to `x` in decibels:
/// `20 log10(max|delta| / max|x|)`.
///
/// An all-zero `delta` yields `f64::NEG_INFINITY`.
pub fn db_distortion(x: &Waveform, delta: &[f64]) -> Result<f64> {
    if delta.len() != x.len() {
        return Err(Error::Dimension(format!(
            "perturbation has {} samples, signal has {}",
            delta.len(),
            x.len()
        )));
    }
    let signal_peak = x.peak();
    if signal_peak == 0.0 {
        return Err(Error::EmptySignal("dB distortion undefined for a silent signal".into()));
    }
    let delta_peak = peak_abs(delta);
    if delta_peak == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(20.0 * (delta_peak / signal_peak).log10())
}

/// A perturbation in latent form: `delta_t = amplitude * tanh(latent_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub latent: Vec<f64>,
    pub amplitude: f64,
}

impl Perturbation {
    pub fn new(latent: Vec<f64>, amplitude: f64) -> Result<Self> {
        if !(amplitude > 0.0 && amplitude.is_finite()) {
            return Err(Error::Domain(format!("amplitude must be positive, got {amplitude}")));
        }
        if latent.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("latent contains NaN".into()));
        }
        Ok(Self { latent, amplitude })
    }

    pub fn zeros(len: usize, amplitude: f64) -> Result<Self> {
        Self::new(vec![0.0; len], amplitude)
    }

    pub fn len(&self) -> usize {
        self.latent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latent.is_empty()
    }

    pub fn materialize(&self) -> Vec<f64> {
        materialize(&self.latent, self.amplitude)
    }
}

/// `amplitude * tanh(z)` elementwise, with `|delta_t| < amplitude` strictly.
///
/// `tanh` rounds to exactly ±1 in double precision once `|z|` exceeds about
/// 19; such samples are pulled back to the largest value below the bound.
pub fn materialize(latent: &[f64], amplitude: f64) -> Vec<f64> {
    let below = f64::from_bits(amplitude.to_bits() - 1);
    latent
        .iter()
        .map(|&z| {
            let d = amplitude * z.tanh();
            if d.abs() >= amplitude {
                below.copysign(d)
            } else {
                d
            }
        })
        .collect()
}

/// Samplewise `x + delta`, unclamped.
pub fn apply(x: &Waveform, delta: &[f64]) -> Result<Waveform> {
    if delta.len() != x.len() {
        return Err(Error::Dimension(format!(
            "perturbation has {} samples, signal has {}",
            delta.len(),
            x.len()
        )));
    }
    let samples = x.samples.iter().zip(delta).map(|(a, b)| a + b).collect();
    Waveform::new(samples, x.sample_rate_hz)
}
