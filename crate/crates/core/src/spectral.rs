//! STFT analysis and weighted overlap-add (WOLA) synthesis.
//!
//! Frames start every `hop` samples; each frame is the windowed segment
//! zero-padded to `fft_size`. Analysis and synthesis both use the square root
//! of a periodic Hann window, so the overlapped product of the two windows sums
//! to a constant and unmodified spectra reconstruct the input exactly away from
//! the first half window and the last half window. Samples after the last full
//! window (less than one hop) are not analyzed and come back as zeros.

use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{Error, Result};

/// Mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidAudio("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidAudio(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean-square power over the whole buffer.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn scaled(&self, gain: f64) -> Result<Self> {
        Self::new(self.samples.iter().map(|s| s * gain).collect(), self.sample_rate)
    }

    /// Sample-wise sum. Lengths and rates must agree.
    pub fn add(&self, other: &AudioBuffer) -> Result<Self> {
        if self.sample_rate != other.sample_rate || self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot add {} samples @ {} Hz to {} samples @ {} Hz",
                other.len(),
                other.sample_rate,
                self.len(),
                self.sample_rate
            )));
        }
        let samples = self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect();
        Self::new(samples, self.sample_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi n / N)`.
    #[default]
    Hann,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => {
                (0..len).map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub window_len: usize,
    pub fft_size: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for StftConfig {
    /// 20 ms window at 16 kHz, 512-point transform, 50% overlap.
    fn default() -> Self {
        Self { window_len: 320, fft_size: 512, hop: 160, window: Window::Hann }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 {
            return Err(Error::BadStftConfig("hop must be positive".into()));
        }
        if !(self.hop <= self.window_len && self.window_len <= self.fft_size) {
            return Err(Error::BadStftConfig(format!(
                "need hop <= window_len <= fft_size, got {} / {} / {}",
                self.hop, self.window_len, self.fft_size
            )));
        }
        if !self.window_len.is_multiple_of(self.hop) {
            return Err(Error::BadStftConfig(format!("hop {} must divide window_len {}", self.hop, self.window_len)));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `floor((len - window_len) / hop) + 1`, or zero if `len < window_len`.
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }

    fn sqrt_window(&self) -> Vec<f64> {
        self.window.coefficients(self.window_len).into_iter().map(f64::sqrt).collect()
    }
}

/// Complex STFT holding the non-negative frequency bins of every frame.
///
/// Storage is frame-major; index with `(bin, frame)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    bins: Vec<Complex64>,
    num_bins: usize,
    num_frames: usize,
    config: StftConfig,
    origin_length: usize,
    sample_rate: u32,
}

impl Spectrogram {
    pub fn from_parts(
        bins: Vec<Complex64>,
        config: StftConfig,
        origin_length: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidAudio("sample rate must be positive".into()));
        }
        config.validate()?;
        let num_bins = config.num_bins();
        let num_frames = config.num_frames(origin_length);
        if bins.len() != num_bins * num_frames {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} bins x {} frames",
                bins.len(),
                num_bins,
                num_frames
            )));
        }
        if bins.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite spectrogram entry".into()));
        }
        Ok(Self { bins, num_bins, num_frames, config, origin_length, sample_rate })
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn origin_length(&self) -> usize {
        self.origin_length
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.bins[frame * self.num_bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[Complex64] {
        &self.bins[frame * self.num_bins..(frame + 1) * self.num_bins]
    }

    /// All values, frame-major.
    pub fn values(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn same_shape(&self, other: &Spectrogram) -> bool {
        self.num_bins == other.num_bins
            && self.num_frames == other.num_frames
            && self.origin_length == other.origin_length
            && self.config == other.config
            && self.sample_rate == other.sample_rate
    }

    /// Same shape, new values (frame-major).
    pub(crate) fn with_values(&self, bins: Vec<Complex64>) -> Self {
        debug_assert_eq!(bins.len(), self.bins.len());
        Self {
            bins,
            num_bins: self.num_bins,
            num_frames: self.num_frames,
            config: self.config,
            origin_length: self.origin_length,
            sample_rate: self.sample_rate,
        }
    }
}

/// Forward STFT.
pub fn analyze(audio: &AudioBuffer, config: &StftConfig) -> Result<Spectrogram> {
    config.validate()?;
    let len = audio.len();
    if len < config.window_len {
        return Err(Error::InsufficientSamples { needed: config.window_len, got: len });
    }
    let num_frames = config.num_frames(len);
    let num_bins = config.num_bins();
    let window = config.sqrt_window();
    let fft: Arc<dyn RealToComplex<f64>> = RealFftPlanner::<f64>::new().plan_fft_forward(config.fft_size);

    let mut input = fft.make_input_vec();
    let mut output = fft.make_output_vec();
    let mut scratch = fft.make_scratch_vec();
    let mut bins = Vec::with_capacity(num_frames * num_bins);
    let samples = audio.samples();
    for frame in 0..num_frames {
        let start = frame * config.hop;
        input.fill(0.0);
        for (dst, (s, w)) in input.iter_mut().zip(samples[start..].iter().zip(&window)) {
            *dst = s * w;
        }
        fft.process_with_scratch(&mut input, &mut output, &mut scratch).expect("buffer sizes come from the plan");
        bins.extend_from_slice(&output);
    }
    Ok(Spectrogram {
        bins,
        num_bins,
        num_frames,
        config: *config,
        origin_length: len,
        sample_rate: audio.sample_rate(),
    })
}

/// Inverse STFT by weighted overlap-add; returns `origin_length` samples.
///
/// Samples not covered by any frame (the dropped trailing partial window) are
/// zero.
pub fn synthesize(spec: &Spectrogram) -> Result<AudioBuffer> {
    let config = spec.config;
    config.validate()?;
    if spec.num_bins != config.num_bins()
        || spec.num_frames != config.num_frames(spec.origin_length)
        || spec.bins.len() != spec.num_bins * spec.num_frames
    {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram {}x{} inconsistent with origin length {}",
            spec.num_bins, spec.num_frames, spec.origin_length
        )));
    }

    let window = config.sqrt_window();
    let norm = overlap_normalization(&window, config.hop);
    let ifft: Arc<dyn ComplexToReal<f64>> = RealFftPlanner::<f64>::new().plan_fft_inverse(config.fft_size);
    let mut input = ifft.make_input_vec();
    let mut output = ifft.make_output_vec();
    let mut scratch = ifft.make_scratch_vec();
    let scale = 1.0 / config.fft_size as f64;

    let mut out = vec![0.0; spec.origin_length];
    for frame in 0..spec.num_frames {
        input.copy_from_slice(spec.frame(frame));
        // A real signal has purely real DC and Nyquist bins.
        input[0].im = 0.0;
        if let Some(last) = input.last_mut() {
            last.im = 0.0;
        }
        ifft.process_with_scratch(&mut input, &mut output, &mut scratch).expect("buffer sizes come from the plan");
        let start = frame * config.hop;
        for (n, w) in window.iter().enumerate() {
            out[start + n] += output[n] * scale * w;
        }
    }
    for (n, s) in out.iter_mut().enumerate() {
        let c = norm[n % config.hop];
        *s = if c > 0.0 { *s / c } else { 0.0 };
    }
    AudioBuffer::new(out, spec.sample_rate)
}

/// Sum of analysis x synthesis windows overlapping each phase of the hop.
/// Phases whose sum is negligible are zeroed so they are not amplified.
fn overlap_normalization(window: &[f64], hop: usize) -> Vec<f64> {
    let mut sums = vec![0.0; hop];
    for (n, w) in window.iter().enumerate() {
        sums[n % hop] += w * w;
    }
    let peak = sums.iter().cloned().fold(0.0, f64::max);
    for s in sums.iter_mut() {
        if *s < 1e-3 * peak {
            *s = 0.0;
        }
    }
    sums
}

/// Reconstruction SNR in dB between `reference` and `estimate`, over samples at
/// least `margin` away from both ends.
pub fn interior_snr_db(reference: &[f64], estimate: &[f64], margin: usize) -> f64 {
    let n = reference.len().min(estimate.len());
    if n <= 2 * margin {
        return f64::NAN;
    }
    let (mut sig, mut err) = (0.0, 0.0);
    for i in margin..n - margin {
        sig += reference[i] * reference[i];
        let d = reference[i] - estimate[i];
        err += d * d;
    }
    if err == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (sig / err).log10()
}
