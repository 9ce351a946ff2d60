//! Synthetic WAV corpus for integration tests.

use std::path::{Path, PathBuf};

use maskbench_core::harness::{CorpusEntry, CorpusManifest, NoiseProfile};
use maskbench_core::io::write_wav;
use maskbench_core::synth::{self, NoiseKind};

pub const RATE: u32 = 16_000;

/// `utterances` speech-like clips of `secs` seconds plus one long file per
/// noise kind, written under `dir` with a `corpus.json` manifest.
pub fn write_corpus(dir: &Path, utterances: usize, secs: f64, noises: &[NoiseKind]) -> PathBuf {
    let mut entries = Vec::new();
    for i in 0..utterances {
        let name = format!("utt{i:02}.wav");
        let audio = synth::speech_like(1000 + i as u64, secs, RATE).unwrap();
        write_wav(&dir.join(&name), &audio).unwrap();
        entries.push(CorpusEntry { id: format!("utt{i:02}"), speech_path: name.into() });
    }
    let mut noise_profiles = Vec::new();
    for (j, kind) in noises.iter().enumerate() {
        let name = format!("{}.wav", kind.name());
        let len = (4.0 * secs * RATE as f64) as usize;
        let audio = kind.generate(2000 + j as u64, len, RATE).unwrap();
        write_wav(&dir.join(&name), &audio).unwrap();
        noise_profiles.push(NoiseProfile { name: kind.name().into(), noise_path: name.into() });
    }
    let manifest = CorpusManifest { entries, noise_profiles, sample_rate: RATE };
    let path = dir.join("corpus.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}
