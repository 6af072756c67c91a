//! Synthetic SNR-controlled corpora and manifests over WAV directories.
//!
//! A manifest is a JSON-lines file. The first line is a header object
//! `{"corpus_id": .., "seed": ..}`; every following line is one
//! [`ManifestEntry`]. Entry paths are relative to the manifest's directory.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{surrogate_label, QualityScore};
use crate::signal::{peak_normalize, Waveform};
use crate::wav::{decode_wav, load_wav, quantize_pcm16, save_wav};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected train or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub path: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<QualityScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    corpus_id: String,
    seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub corpus_id: String,
    pub seed: Option<u64>,
    pub entries: Vec<ManifestEntry>,
    /// Directory that entry paths are relative to.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(corpus_id: impl Into<String>, seed: Option<u64>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            corpus_id: corpus_id.into(),
            seed,
            entries: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn find(&self, clip_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.clip_id == clip_id)
    }

    /// Loads an entry's audio and peak-normalizes it.
    pub fn load_clip(&self, entry: &ManifestEntry) -> Result<Waveform> {
        peak_normalize(&load_wav(self.resolve(entry))?)
    }

    fn check_unique(&self) -> Result<()> {
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.clip_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidData(format!("duplicate clip id '{}'", w[0])));
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&ManifestHeader {
            corpus_id: self.corpus_id.clone(),
            seed: self.seed,
        })?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::InvalidData("manifest is empty (no header line)".into()))?;
        let header: ManifestHeader =
            serde_json::from_str(first).map_err(|e| Error::InvalidData(format!("manifest header: {e}")))?;
        let mut manifest = Manifest::new(header.corpus_id, header.seed, base_dir);
        for (n, line) in lines {
            let entry: ManifestEntry =
                serde_json::from_str(line).map_err(|e| Error::InvalidData(format!("manifest line {}: {e}", n + 1)))?;
            manifest.entries.push(entry);
        }
        manifest.check_unique()?;
        Ok(manifest)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_jsonl(&text, base)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub corpus_id: String,
    pub n_train: usize,
    pub n_test: usize,
    pub clip_seconds: f64,
    pub sample_rate_hz: u32,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// Fraction of clips whose clean component is the speech-like harmonic
    /// carrier; the rest use a steady inharmonic drone.
    pub speechlike_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            corpus_id: "synth".into(),
            n_train: 64,
            n_test: 16,
            clip_seconds: 2.0,
            sample_rate_hz: 16_000,
            snr_min_db: 0.0,
            snr_max_db: 40.0,
            speechlike_fraction: 0.75,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be at least 1".into()));
        }
        if self.snr_max_db.partial_cmp(&self.snr_min_db) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!(
                "SNR range [{}, {}] is degenerate",
                self.snr_min_db, self.snr_max_db
            )));
        }
        if self.clip_seconds.is_nan() || self.clip_seconds <= 0.0 || self.sample_rate_hz == 0 {
            return Err(Error::Config("clip length and sample rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.speechlike_fraction) {
            return Err(Error::Config("speechlike_fraction must lie in [0, 1]".into()));
        }
        if self.corpus_id.is_empty() || self.corpus_id.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid corpus id '{}'", self.corpus_id)));
        }
        Ok(())
    }

    pub fn clip_len(&self) -> usize {
        (self.clip_seconds * f64::from(self.sample_rate_hz)).round() as usize
    }
}

/// One synthesized clip, already quantized to what its 16-bit WAV holds.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub clip_id: String,
    pub split: Split,
    pub snr_db: f64,
    pub speechlike: bool,
    pub label: QualityScore,
    pub waveform: Waveform,
    /// RMS ratio of the clean and noise components, in dB, as mixed.
    pub achieved_snr_db: f64,
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Harmonic stack with a drifting pitch, crude formant weighting and a
/// syllable-rate amplitude envelope.
fn speechlike_carrier(rng: &mut ChaCha8Rng, len: usize, sr: f64) -> Vec<f64> {
    let f0 = rng.random_range(100.0..220.0);
    let drift_rate = rng.random_range(0.5..3.0);
    let drift_phase = rng.random_range(0.0..2.0 * PI);
    let syllable_rate = rng.random_range(3.0..6.0);
    let env_phase = rng.random_range(0.0..2.0 * PI);
    let formants = [
        rng.random_range(400.0..800.0),
        rng.random_range(1000.0..1800.0),
        rng.random_range(2200.0..3000.0),
    ];
    let n_harm = ((4000.0 / f0) as usize).max(1);
    let gains: Vec<f64> = (1..=n_harm)
        .map(|k| {
            let f = k as f64 * f0;
            let shape: f64 = formants.iter().map(|fc| (-((f - fc) / 250.0).powi(2)).exp()).sum();
            (0.2 + shape) / k as f64
        })
        .collect();
    let mut phase = 0.0;
    (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            let pitch = f0 * (1.0 + 0.08 * (2.0 * PI * drift_rate * t + drift_phase).sin());
            phase += 2.0 * PI * pitch / sr;
            let env = 0.15 + 0.85 * (2.0 * PI * syllable_rate * t + env_phase).sin().max(0.0).powf(1.5);
            let voiced: f64 = gains
                .iter()
                .enumerate()
                .map(|(k, g)| g * ((k + 1) as f64 * phase).sin())
                .sum();
            env * voiced
        })
        .collect()
}

/// Steady sum of unrelated partials without any envelope.
fn drone_carrier(rng: &mut ChaCha8Rng, len: usize, sr: f64) -> Vec<f64> {
    let partials: Vec<(f64, f64)> = (0..5)
        .map(|_| (rng.random_range(150.0..3500.0), rng.random_range(0.0..2.0 * PI)))
        .collect();
    (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            partials.iter().map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum()
        })
        .collect()
}

/// White noise blended with pink noise (Kellett's economy filter).
fn noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let pink_mix = rng.random_range(0.0..1.0);
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    (0..len)
        .map(|_| {
            let white: f64 = StandardNormal.sample(rng);
            b0 = 0.99765 * b0 + white * 0.0990460;
            b1 = 0.96300 * b1 + white * 0.2965164;
            b2 = 0.57000 * b2 + white * 1.0526913;
            let pink = (b0 + b1 + b2 + white * 0.1848) * 0.25;
            (1.0 - pink_mix) * white + pink_mix * pink
        })
        .collect()
}

fn synth_one(spec: &SynthSpec, index: usize, split: Split, local: usize) -> Result<SynthClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let len = spec.clip_len();
    let sr = f64::from(spec.sample_rate_hz);
    let snr_db = rng.random_range(spec.snr_min_db..spec.snr_max_db);
    let speechlike = rng.random_bool(spec.speechlike_fraction);
    let clean = if speechlike {
        speechlike_carrier(&mut rng, len, sr)
    } else {
        drone_carrier(&mut rng, len, sr)
    };
    let raw_noise = noise(&mut rng, len);
    let gain = rms(&clean) / (rms(&raw_noise) * 10f64.powf(snr_db / 20.0));
    let scaled_noise: Vec<f64> = raw_noise.iter().map(|v| v * gain).collect();
    let achieved_snr_db = 20.0 * (rms(&clean) / rms(&scaled_noise)).log10();
    let mixed: Vec<f64> = clean.iter().zip(&scaled_noise).map(|(c, n)| c + n).collect();
    let normalized = peak_normalize(&Waveform::new(mixed, spec.sample_rate_hz)?)?;
    let quantized = normalized
        .samples()
        .iter()
        .map(|&s| f64::from(quantize_pcm16(s)) / 32768.0)
        .collect();
    Ok(SynthClip {
        clip_id: format!("{}_{local:04}", split.as_str()),
        split,
        snr_db,
        speechlike,
        label: surrogate_label(snr_db, speechlike),
        waveform: Waveform::new(quantized, spec.sample_rate_hz)?,
        achieved_snr_db,
    })
}

/// Generates every clip of `spec` in memory, train clips first.
pub fn synth_clips(spec: &SynthSpec) -> Result<Vec<SynthClip>> {
    spec.validate()?;
    let plan: Vec<(usize, Split, usize)> = (0..spec.n_train)
        .map(|i| (i, Split::Train, i))
        .chain((0..spec.n_test).map(|i| (spec.n_train + i, Split::Test, i)))
        .collect();
    plan.par_iter()
        .map(|&(index, split, local)| synth_one(spec, index, split, local))
        .collect()
}

/// Writes `<out_dir>/<corpus_id>/{train,test}/<clip_id>.wav` and the
/// manifest, returning the manifest.
pub fn synth_corpus(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let root = out_dir.as_ref().join(&spec.corpus_id);
    let clips = synth_clips(spec)?;
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut manifest = Manifest::new(spec.corpus_id.clone(), Some(spec.seed), &root);
    for clip in &clips {
        let rel = format!("{}/{}.wav", clip.split.as_str(), clip.clip_id);
        save_wav(&clip.waveform, root.join(&rel))?;
        manifest.entries.push(ManifestEntry {
            clip_id: clip.clip_id.clone(),
            path: rel,
            split: clip.split,
            snr_db: Some(clip.snr_db),
            label: Some(clip.label),
        });
    }
    manifest.write(root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// How ingested files are assigned to splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRule {
    /// Every WAV directly inside the directory gets this split.
    All(Split),
    /// WAVs inside `train/` and `test/` subdirectories.
    BySubdirectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub path: PathBuf,
    pub reason: String,
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        })
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Builds an unlabeled manifest over a directory of WAV files, ordered
/// lexicographically by file name within each split. Unreadable files are
/// skipped and reported.
pub fn ingest_directory(dir: impl AsRef<Path>, rule: SplitRule) -> Result<(Manifest, Vec<Rejection>)> {
    let dir = dir.as_ref();
    let corpus_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("ingested")
        .to_string();
    let groups: Vec<(Split, PathBuf)> = match rule {
        SplitRule::All(split) => vec![(split, dir.to_path_buf())],
        SplitRule::BySubdirectory => [Split::Train, Split::Test]
            .into_iter()
            .map(|s| (s, dir.join(s.as_str())))
            .filter(|(_, d)| d.is_dir())
            .collect(),
    };
    let mut manifest = Manifest::new(corpus_id, None, dir);
    let mut rejected = Vec::new();
    for (split, sub) in groups {
        for path in wav_files(&sub)? {
            let outcome = fs::read(&path)
                .map_err(|e| Error::io(&path, e))
                .and_then(|b| decode_wav(&b))
                .and_then(|w| peak_normalize(&w).map(|_| ()));
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let reason = match outcome {
                Err(e) => Some(e.to_string()),
                Ok(()) if manifest.find(&stem).is_some() => Some(format!("duplicate clip id '{stem}'")),
                Ok(()) => None,
            };
            if let Some(reason) = reason {
                log::warn!("rejecting {}: {reason}", path.display());
                rejected.push(Rejection { path, reason });
                continue;
            }
            let rel = path
                .strip_prefix(dir)
                .unwrap_or(&path)
                .to_string_lossy()
                .replace('\\', "/");
            manifest.entries.push(ManifestEntry {
                clip_id: stem,
                path: rel,
                split,
                snr_db: None,
                label: None,
            });
        }
    }
    if manifest.entries.is_empty() {
        log::warn!("no usable WAV files under {}", dir.display());
    }
    Ok((manifest, rejected))
}

/// Writes rejected paths, one per line, for later inspection.
pub fn write_rejections(path: impl AsRef<Path>, rejected: &[Rejection]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in rejected {
        writeln!(f, "{}\t{}", r.path.display(), r.reason).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Reads the clip ids listed in a rejections file.
pub fn read_rejections(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            l.map(|l| l.split('\t').next().unwrap_or_default().to_string())
                .map_err(|e| Error::io(path, e))
        })
        .collect()
}
