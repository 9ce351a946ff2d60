//! Benchmark fixtures shared by the criterion targets.

use maskbench_core::synth;
use maskbench_core::AudioBuffer;

/// Two seconds of speech-like signal at 16 kHz.
pub fn speech() -> AudioBuffer {
    synth::speech_like(11, 2.0, 16_000).expect("valid synthetic speech")
}

/// White noise matching [`speech`] in length.
pub fn noise() -> AudioBuffer {
    synth::white_noise(12, 32_000, 16_000).expect("valid synthetic noise")
}
