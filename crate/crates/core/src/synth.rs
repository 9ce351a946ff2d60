//! Seeded synthetic signals: a speech-like source (voiced syllables with
//! formants, fricative bursts and pauses) and three noise types. Used by tests,
//! benches and the CLI to build toy corpora without external recordings.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::AudioBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Babble,
    Train,
}

impl NoiseKind {
    pub fn generate(self, seed: u64, len: usize, sample_rate: u32) -> Result<AudioBuffer> {
        match self {
            NoiseKind::White => white_noise(seed, len, sample_rate),
            NoiseKind::Babble => babble(seed, len, sample_rate, 6),
            NoiseKind::Train => train_noise(seed, len, sample_rate),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Babble => "babble",
            NoiseKind::Train => "train",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "babble" => Ok(NoiseKind::Babble),
            "train" => Ok(NoiseKind::Train),
            other => Err(Error::InvalidArgument(format!("unknown noise kind {other:?}"))),
        }
    }
}

fn check_rate(sample_rate: u32) -> Result<f64> {
    if sample_rate < 8_000 {
        return Err(Error::InvalidArgument(format!("sample rate {sample_rate} below 8 kHz")));
    }
    Ok(sample_rate as f64)
}

/// Two-pole resonator at `freq` with bandwidth `bw`, unit gain near the peak.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bw: f64, fs: f64) -> Self {
        let r = (-PI * bw / fs).exp();
        Self { a1: 2.0 * r * (2.0 * PI * freq / fs).cos(), a2: -r * r, gain: 1.0 - r, y1: 0.0, y2: 0.0 }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn normalize_peak(mut x: Vec<f64>, peak: f64) -> Vec<f64> {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        for v in x.iter_mut() {
            *v *= peak / m;
        }
    }
    x
}

fn normalize_rms(mut x: Vec<f64>, rms: f64) -> Vec<f64> {
    let p = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if p > 0.0 {
        for v in x.iter_mut() {
            *v *= rms / p;
        }
    }
    x
}

fn speech_samples(rng: &mut ChaCha8Rng, len: usize, fs: f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let ms = |v: f64| (v * fs / 1000.0) as usize;
    let mut pos = ms(rng.random_range(30.0..150.0));
    while pos < len {
        let dur = ms(rng.random_range(120.0..350.0)).min(len - pos);
        let loudness = rng.random_range(0.3..1.0);
        if rng.random_bool(0.25) {
            // Fricative: differentiated noise with a resonance high in the band.
            let centre = rng.random_range(3000.0..(0.4 * fs).min(6500.0));
            let mut res = Resonator::new(centre, 1500.0, fs);
            let mut prev = 0.0;
            for i in 0..dur {
                let n: f64 = rng.sample(StandardNormal);
                let env = (PI * i as f64 / dur as f64).sin();
                out[pos + i] += 0.4 * loudness * env * res.step(n - prev);
                prev = n;
            }
        } else {
            let f0_start = rng.random_range(90.0..220.0);
            let f0_end = f0_start * rng.random_range(0.8..1.2);
            let formants = [
                (rng.random_range(300.0..850.0), 90.0),
                (rng.random_range(900.0..2300.0), 120.0),
                (rng.random_range(2400.0..3300.0), 180.0),
            ];
            let mut res = formants.map(|(f, bw)| Resonator::new(f, bw, fs));
            let (mut phase, mut glottal) = (0.0, 0.0);
            for i in 0..dur {
                let t = i as f64 / dur as f64;
                phase += (f0_start + (f0_end - f0_start) * t) / fs;
                let pulse = if phase >= 1.0 {
                    phase -= 1.0;
                    1.0
                } else {
                    0.0
                };
                glottal = pulse + 0.92 * glottal;
                let aspiration = 0.02 * rng.sample::<f64, _>(StandardNormal);
                let excitation = glottal + aspiration;
                let y = res.iter_mut().fold(0.0, |acc, r| acc + r.step(excitation));
                let env = (PI * t).sin().powf(0.6);
                out[pos + i] += loudness * env * y;
            }
        }
        pos += dur + ms(rng.random_range(20.0..250.0));
    }
    out
}

/// Speech-like signal of `duration_secs`, peak-normalized to 0.5.
pub fn speech_like(seed: u64, duration_secs: f64, sample_rate: u32) -> Result<AudioBuffer> {
    let fs = check_rate(sample_rate)?;
    let len = (duration_secs * fs).round() as usize;
    if len == 0 {
        return Err(Error::InvalidArgument("duration must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = speech_samples(&mut rng, len, fs);
    AudioBuffer::new(normalize_peak(x, 0.5), sample_rate)
}

/// Gaussian white noise, RMS 0.1.
pub fn white_noise(seed: u64, len: usize, sample_rate: u32) -> Result<AudioBuffer> {
    check_rate(sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..len).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    AudioBuffer::new(x, sample_rate)
}

/// Sum of `talkers` independent speech-like streams, RMS 0.1.
pub fn babble(seed: u64, len: usize, sample_rate: u32, talkers: usize) -> Result<AudioBuffer> {
    let fs = check_rate(sample_rate)?;
    if talkers == 0 {
        return Err(Error::InvalidArgument("babble needs at least one talker".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; len];
    for _ in 0..talkers {
        let mut talker = ChaCha8Rng::seed_from_u64(rng.random());
        let stream = normalize_rms(speech_samples(&mut talker, len, fs), 1.0);
        for (s, v) in sum.iter_mut().zip(stream) {
            *s += v;
        }
    }
    AudioBuffer::new(normalize_rms(sum, 0.1), sample_rate)
}

/// Low-frequency rumble with periodic wheel impacts and a faint squeal, RMS 0.1.
pub fn train_noise(seed: u64, len: usize, sample_rate: u32) -> Result<AudioBuffer> {
    let fs = check_rate(sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = rng.random_range(0.45..0.8) * fs;
    let squeal = rng.random_range(2200.0..3200.0);
    let mut rumble_res = Resonator::new(rng.random_range(60.0..120.0), 80.0, fs);
    let mut body = Resonator::new(rng.random_range(400.0..700.0), 300.0, fs);
    let (mut brown, mut impact) = (0.0, 0.0);
    let mut next_hit = rng.random_range(0.0..period);
    let x: Vec<f64> = (0..len)
        .map(|i| {
            let n: f64 = rng.sample(StandardNormal);
            brown = 0.995 * brown + 0.05 * n;
            if i as f64 >= next_hit {
                impact = rng.random_range(0.5..1.0);
                next_hit += period * rng.random_range(0.9..1.1);
            }
            impact *= 0.9985;
            let t = i as f64 / fs;
            brown
                + 3.0 * rumble_res.step(n)
                + impact * body.step(n) * 8.0
                + 0.02 * (2.0 * PI * squeal * t + 0.3 * (2.0 * PI * 0.7 * t).sin()).sin()
        })
        .collect();
    AudioBuffer::new(normalize_rms(x, 0.1), sample_rate)
}
