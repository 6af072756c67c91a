//! Fixtures shared by the benchmarks.

use advmos_core::corpus::{synth_clips, SynthSpec};
use advmos_core::Waveform;

/// A deterministic synthetic clip of `seconds` at 16 kHz.
pub fn fixture_clip(seconds: f64) -> Waveform {
    let spec = SynthSpec {
        n_train: 1,
        n_test: 1,
        clip_seconds: seconds,
        seed: 7,
        ..SynthSpec::default()
    };
    synth_clips(&spec)
        .expect("fixture spec is valid")
        .swap_remove(0)
        .waveform
}
