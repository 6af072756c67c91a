//! Short-time Fourier transform and the spectral L1 similarity loss.
//!
//! Framing has no center padding: frame `k` covers samples
//! `[k * hop, k * hop + window_length)` and a trailing partial frame is
//! dropped. The window is the periodic Hann window
//! `w[n] = 0.5 - 0.5 cos(2 pi n / N)`, so `w[N / 2] = 1` exactly.
//! Spectra are one-sided with `n_fft / 2 + 1` bins and are stored as
//! interleaved `(re, im)` pairs, shape `[frames, bins, 2]`.

use std::io::Write;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, LinearMap, Tensor, Var};
use crate::error::{Error, Result};
use crate::signal::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub window_length: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 512,
            window_length: 512,
            hop: 128,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft == 0 || self.hop == 0 || self.window_length == 0 {
            return Err(Error::Config(format!("STFT sizes must be positive: {self:?}")));
        }
        if self.window_length > self.n_fft {
            return Err(Error::Config(format!(
                "window length {} exceeds n_fft {}",
                self.window_length, self.n_fft
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames(&self, len: usize) -> Result<usize> {
        if len < self.window_length {
            return Err(Error::TooShort {
                len,
                min: self.window_length,
            });
        }
        Ok((len - self.window_length) / self.hop + 1)
    }

    /// Number of leading samples that any frame touches; later samples are
    /// ignored by the transform.
    pub fn covered_len(&self, len: usize) -> Result<usize> {
        Ok((self.frames(len)? - 1) * self.hop + self.window_length)
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.window_length as f64;
        (0..self.window_length)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos())
            .collect()
    }
}

/// A planned STFT, reusable across signals of any length.
pub struct StftPlan {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("config", &self.config).finish()
    }
}

impl StftPlan {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            config,
            window: config.window(),
            forward: planner.plan_fft_forward(config.n_fft),
            inverse: planner.plan_fft_inverse(config.n_fft),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let frames = cfg.frames(x.len())?;
        let bins = cfg.bins();
        let mut buf = vec![Complex::new(0.0, 0.0); frames * cfg.n_fft];
        for (k, frame) in buf.chunks_exact_mut(cfg.n_fft).enumerate() {
            let start = k * cfg.hop;
            for (m, (slot, w)) in frame.iter_mut().zip(&self.window).enumerate() {
                slot.re = w * x[start + m];
            }
        }
        self.forward.process(&mut buf);
        let mut out = Vec::with_capacity(frames * bins * 2);
        for frame in buf.chunks_exact(cfg.n_fft) {
            for c in &frame[..bins] {
                out.push(c.re);
                out.push(c.im);
            }
        }
        Ok(out)
    }

    fn transform_adjoint(&self, cotangent: &[f64], len: usize) -> Vec<f64> {
        let cfg = &self.config;
        let bins = cfg.bins();
        let frames = cotangent.len() / (2 * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); frames * cfg.n_fft];
        for (frame, g) in buf.chunks_exact_mut(cfg.n_fft).zip(cotangent.chunks_exact(2 * bins)) {
            for (slot, pair) in frame.iter_mut().zip(g.chunks_exact(2)) {
                *slot = Complex::new(pair[0], pair[1]);
            }
        }
        // Unnormalized inverse: sum_f G[f] e^{+2 pi i f m / N}; its real part
        // is the adjoint of (re, im) of the forward DFT.
        self.inverse.process(&mut buf);
        let mut grad = vec![0.0; len];
        for (k, frame) in buf.chunks_exact(cfg.n_fft).enumerate() {
            let start = k * cfg.hop;
            for (m, (c, w)) in frame.iter().zip(&self.window).enumerate() {
                grad[start + m] += w * c.re;
            }
        }
        grad
    }

    pub fn stft(&self, x: &Waveform) -> Result<Spectrogram> {
        let values = self.transform(x.samples())?;
        Ok(Spectrogram {
            frames: self.config.frames(x.len())?,
            bins: self.config.bins(),
            values,
        })
    }
}

impl LinearMap for StftPlan {
    fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        match input_shape {
            [len] => Ok(vec![self.config.frames(*len)?, self.config.bins(), 2]),
            s => Err(Error::Dimension(format!("stft expects a 1-D signal, got {s:?}"))),
        }
    }

    fn apply(&self, input: &[f64], _input_shape: &[usize]) -> Vec<f64> {
        self.transform(input).expect("length validated by output_shape")
    }

    fn adjoint(&self, cotangent: &[f64], input_shape: &[usize]) -> Vec<f64> {
        self.transform_adjoint(cotangent, input_shape[0])
    }
}

/// One-sided complex STFT, `frames x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    values: Vec<f64>,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn get(&self, frame: usize, bin: usize) -> (f64, f64) {
        let i = 2 * (frame * self.bins + bin);
        (self.values[i], self.values[i + 1])
    }

    pub fn magnitude(&self, frame: usize, bin: usize) -> f64 {
        let (re, im) = self.get(frame, bin);
        re.hypot(im)
    }

    /// Interleaved `(re, im)` values, row-major over `[frames, bins]`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.frames, self.bins, 2], self.values.clone())
    }

    /// Magnitudes as CSV: one row per frame, one column per bin, six
    /// significant digits.
    pub fn write_magnitude_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for frame in 0..self.frames {
            let row: Vec<String> = (0..self.bins)
                .map(|bin| format!("{:.5e}", self.magnitude(frame, bin)))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()
    }
}

pub fn stft(x: &Waveform, cfg: StftConfig) -> Result<Spectrogram> {
    StftPlan::new(cfg)?.stft(x)
}

/// `sum |F(x_tilde) - F(x)|` over every frame and bin, using the complex
/// modulus of each difference.
pub fn spectral_l1(x_tilde: &Waveform, x: &Waveform, cfg: StftConfig) -> Result<f64> {
    if x_tilde.len() != x.len() {
        return Err(Error::Dimension(format!(
            "spectral_l1: lengths {} and {} differ",
            x_tilde.len(),
            x.len()
        )));
    }
    let plan = StftPlan::new(cfg)?;
    let a = plan.stft(x_tilde)?;
    let b = plan.stft(x)?;
    Ok(a.values
        .chunks_exact(2)
        .zip(b.values.chunks_exact(2))
        .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
        .sum())
}

/// Records `sum |spec - reference|` on `graph`, where `spec` is a
/// `[frames, bins, 2]` node and `reference` a node of the same shape.
pub fn spectral_l1_node(graph: &mut Graph, spec: Var, reference: Var) -> Result<Var> {
    let diff = graph.sub(spec, reference)?;
    let modulus = graph.complex_modulus(diff)?;
    Ok(graph.sum(modulus))
}
