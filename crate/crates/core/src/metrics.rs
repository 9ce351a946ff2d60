//! Objective scoring: normalized covariance metric (NCM), the composite
//! quality/intelligibility distance and ingestion of externally computed
//! quality scores.
//!
//! NCM here splits both signals into fourth-order Butterworth bands with
//! centres equally spaced on the ERB-rate scale, takes the Hilbert envelope of
//! each band, low-passes it at 25 Hz and decimates to 100 Hz. Per band the
//! normalized covariance `r` of the zero-mean envelopes becomes an apparent SNR
//! `10 log10(r^2 / (1 - r^2))`, clipped to [-15, 15] dB and mapped to [0, 1];
//! NCM is the weighted mean over bands.

use std::collections::BTreeMap;
use std::ops::{Add, Mul, Sub};
use std::path::Path;
use std::sync::Arc;

use log::warn;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::AudioBuffer;

const SNR_CLIP_DB: f64 = 15.0;

/// Scores attached to one processed utterance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricScore {
    pub ncm: f64,
    /// PESQ-scale quality, supplied externally.
    pub quality: Option<f64>,
    pub d_p: Option<f64>,
}

impl MetricScore {
    /// Validates ranges and fills `d_p` when quality is present.
    pub fn new(ncm: f64, quality: Option<f64>) -> Result<Self> {
        check_unit("ncm", ncm)?;
        let d_p = match quality {
            Some(q) => Some(composite_dp(ncm, q)?),
            None => None,
        };
        Ok(Self { ncm, quality, d_p })
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("{name} {v} outside [0, 1]")))
    }
}

fn check_quality(q: f64) -> Result<()> {
    if (0.0..=5.0).contains(&q) {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("quality {q} outside [0, 5]")))
    }
}

/// `d_p = ncm^2 + (quality / 5)^2`.
pub fn composite_dp(ncm: f64, quality: f64) -> Result<f64> {
    check_unit("ncm", ncm)?;
    check_quality(quality)?;
    Ok(ncm * ncm + (quality / 5.0).powi(2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcmConfig {
    pub num_bands: usize,
    pub lo_hz: f64,
    pub hi_hz: f64,
    pub envelope_cutoff_hz: f64,
    pub envelope_rate_hz: f64,
    /// Per-band weights; equal weights when `None`.
    pub weights: Option<Vec<f64>>,
}

impl Default for NcmConfig {
    fn default() -> Self {
        Self {
            num_bands: 20,
            lo_hz: 300.0,
            hi_hz: 6000.0,
            envelope_cutoff_hz: 25.0,
            envelope_rate_hz: 100.0,
            weights: None,
        }
    }
}

fn erb_rate(hz: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * hz).log10()
}

fn erb_rate_inv(erb: f64) -> f64 {
    (10f64.powf(erb / 21.4) - 1.0) / 0.00437
}

/// `(low edge, centre, high edge)` of each band in Hz.
pub fn band_edges(cfg: &NcmConfig) -> Vec<(f64, f64, f64)> {
    let (e_lo, e_hi) = (erb_rate(cfg.lo_hz), erb_rate(cfg.hi_hz));
    let n = cfg.num_bands;
    let spacing = if n > 1 { (e_hi - e_lo) / (n - 1) as f64 } else { 1.0 };
    (0..n)
        .map(|i| {
            let e = e_lo + spacing * i as f64;
            (erb_rate_inv(e - 0.5 * spacing), erb_rate_inv(e), erb_rate_inv(e + 0.5 * spacing))
        })
        .collect()
}

/// Direct-form II transposed second-order section.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

/// Running state of one section.
struct Section<T> {
    coeffs: Biquad,
    s1: T,
    s2: T,
}

impl<T> Section<T>
where
    T: Copy + Add<Output = T> + Sub<Output = T> + Mul<f64, Output = T>,
{
    #[inline]
    fn step(&mut self, input: T) -> T {
        let Biquad { b, a } = self.coeffs;
        let y = input * b[0] + self.s1;
        self.s1 = input * b[1] - y * a[0] + self.s2;
        self.s2 = input * b[2] - y * a[1];
        y
    }
}

impl Biquad {
    fn state<T: Default>(&self) -> Section<T> {
        Section { coeffs: *self, s1: T::default(), s2: T::default() }
    }

    fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (1.0 + self.a[0] * z1 + self.a[1] * z2)
    }

    fn lowpass(cutoff_hz: f64, fs: f64) -> Self {
        let k = (std::f64::consts::PI * cutoff_hz / fs).tan();
        let q = std::f64::consts::FRAC_1_SQRT_2;
        let norm = 1.0 / (1.0 + k / q + k * k);
        let b0 = k * k * norm;
        Self { b: [b0, 2.0 * b0, b0], a: [2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm] }
    }
}

/// Fourth-order Butterworth bandpass (second-order lowpass prototype) by
/// bilinear transform with prewarped edges, as two sections normalized to
/// unit gain at the centre frequency.
fn butterworth_bandpass(lo_hz: f64, hi_hz: f64, fs: f64) -> [Biquad; 2] {
    let t = 2.0 * fs;
    let w1 = t * (std::f64::consts::PI * lo_hz / fs).tan();
    let w2 = t * (std::f64::consts::PI * hi_hz / fs).tan();
    let (w0sq, bw) = (w1 * w2, w2 - w1);
    let proto = Complex64::from_polar(1.0, 0.75 * std::f64::consts::PI);
    let disc = (proto * proto * bw * bw - 4.0 * w0sq).sqrt();
    let poles = [(proto * bw + disc) * 0.5, (proto * bw - disc) * 0.5];
    let mut sections = poles.map(|s| {
        let z = (t + s) / (t - s);
        Biquad { b: [1.0, 0.0, -1.0], a: [-2.0 * z.re, z.norm_sqr()] }
    });
    let centre = 2.0 * (w0sq.sqrt() / t).atan();
    let gain = sections.iter().map(|s| s.response(centre).norm()).product::<f64>();
    for b in sections[0].b.iter_mut() {
        *b /= gain;
    }
    sections
}

struct AnalyticPlan {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl AnalyticPlan {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
    }
}

/// Analytic signal (one-sided spectrum, circular).
fn analytic_signal(x: &[f64], plan: &AnalyticPlan) -> Vec<Complex64> {
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    plan.forward.process(&mut buf);
    let half = n / 2;
    for (k, c) in buf.iter_mut().enumerate() {
        let w = if k == 0 || (n.is_multiple_of(2) && k == half) {
            1.0
        } else if k <= (n - 1) / 2 {
            2.0
        } else {
            0.0
        };
        *c *= w;
    }
    plan.inverse.process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter().map(|c| c * scale).collect()
}

struct Band {
    filters: [Biquad; 2],
}

/// Precomputed band envelopes of a clean reference, so that many processed
/// versions of the same utterance can be scored cheaply.
pub struct NcmReference {
    bands: Vec<Band>,
    /// Zero-mean clean envelope per band; `None` for excluded (silent) bands.
    clean: Vec<Option<Vec<f64>>>,
    weights: Vec<f64>,
    smoother: Biquad,
    plan: AnalyticPlan,
    decimation: usize,
    len: usize,
    sample_rate: u32,
}

impl NcmReference {
    pub fn new(clean: &AudioBuffer, cfg: &NcmConfig) -> Result<Self> {
        let fs = clean.sample_rate() as f64;
        if cfg.num_bands == 0 || !(cfg.lo_hz > 0.0 && cfg.lo_hz < cfg.hi_hz) {
            return Err(Error::InvalidArgument("NCM needs >= 1 band and 0 < lo < hi".into()));
        }
        let mut bands = Vec::new();
        let mut weights = Vec::new();
        for (i, (lo, _, hi)) in band_edges(cfg).into_iter().enumerate() {
            if hi >= 0.95 * fs / 2.0 {
                warn!("NCM band {i} ({lo:.0}-{hi:.0} Hz) exceeds Nyquist at {fs} Hz; skipped");
                continue;
            }
            bands.push(Band { filters: butterworth_bandpass(lo, hi, fs) });
            weights.push(match &cfg.weights {
                Some(w) => *w.get(i).ok_or_else(|| {
                    Error::InvalidArgument(format!("{} weights for {} bands", w.len(), cfg.num_bands))
                })?,
                None => 1.0,
            });
        }
        if bands.is_empty() {
            return Err(Error::InvalidArgument(format!("no NCM band fits below Nyquist at {fs} Hz")));
        }
        let decimation = ((fs / cfg.envelope_rate_hz).round() as usize).max(1);
        let mut reference = Self {
            bands,
            clean: Vec::new(),
            weights,
            smoother: Biquad::lowpass(cfg.envelope_cutoff_hz, fs),
            plan: AnalyticPlan::new(clean.len()),
            decimation,
            len: clean.len(),
            sample_rate: clean.sample_rate(),
        };
        let envelopes = reference.envelopes(clean.samples());
        reference.clean = envelopes
            .into_iter()
            .enumerate()
            .map(|(i, env)| {
                let centred = centred(env);
                if variance(&centred) > 0.0 {
                    Some(centred)
                } else {
                    warn!("NCM band {i} is silent in the reference; excluded");
                    None
                }
            })
            .collect();
        if reference.clean.iter().all(Option::is_none) {
            return Err(Error::InvalidAudio("reference is silent in every NCM band".into()));
        }
        Ok(reference)
    }

    /// Band filtering and the Hilbert transform are both linear and
    /// time-invariant, so the analytic signal is formed once and each band
    /// filters it directly. Filtering, magnitude, smoothing and decimation run
    /// in one pass per band.
    fn envelopes(&self, samples: &[f64]) -> Vec<Vec<f64>> {
        let analytic = analytic_signal(samples, &self.plan);
        self.bands
            .iter()
            .map(|band| {
                let mut sections = band.filters.map(|f| f.state::<Complex64>());
                let mut smoother = self.smoother.state::<f64>();
                let mut env = Vec::with_capacity(analytic.len() / self.decimation + 1);
                for (i, &x) in analytic.iter().enumerate() {
                    let y = sections.iter_mut().fold(x, |acc, s| s.step(acc));
                    let e = smoother.step(y.norm_sqr().sqrt());
                    if i % self.decimation == 0 {
                        env.push(e);
                    }
                }
                env
            })
            .collect()
    }

    pub fn score(&self, processed: &AudioBuffer) -> Result<f64> {
        if processed.len() != self.len || processed.sample_rate() != self.sample_rate {
            return Err(Error::ShapeMismatch(format!(
                "processed {} samples @ {} Hz vs clean {} @ {} Hz",
                processed.len(),
                processed.sample_rate(),
                self.len,
                self.sample_rate
            )));
        }
        let envelopes = self.envelopes(processed.samples());
        let (mut total, mut weight_sum) = (0.0, 0.0);
        for ((clean, env), w) in self.clean.iter().zip(envelopes).zip(&self.weights) {
            let Some(clean) = clean else { continue };
            let proc = centred(env);
            let denom = (variance(clean) * variance(&proc)).sqrt();
            let r = if denom > 0.0 { clean.iter().zip(&proc).map(|(a, b)| a * b).sum::<f64>() / denom } else { 0.0 };
            total += w * transmission_index(r);
            weight_sum += w;
        }
        Ok((total / weight_sum).clamp(0.0, 1.0))
    }
}

fn centred(mut x: Vec<f64>) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
    for v in x.iter_mut() {
        *v -= mean;
    }
    x
}

/// Sum of squares (the common `1/n` cancels in the correlation).
fn variance(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn transmission_index(r: f64) -> f64 {
    let r2 = (r * r).min(1.0);
    let snr = if r2 >= 1.0 { SNR_CLIP_DB } else { (10.0 * (r2 / (1.0 - r2)).log10()).clamp(-SNR_CLIP_DB, SNR_CLIP_DB) };
    (snr + SNR_CLIP_DB) / (2.0 * SNR_CLIP_DB)
}

/// NCM of `processed` against `clean` with the default configuration.
pub fn ncm(clean: &AudioBuffer, processed: &AudioBuffer) -> Result<f64> {
    if clean.len() != processed.len() || clean.sample_rate() != processed.sample_rate() {
        return Err(Error::ShapeMismatch(format!(
            "clean {} samples @ {} Hz vs processed {} @ {} Hz",
            clean.len(),
            clean.sample_rate(),
            processed.len(),
            processed.sample_rate()
        )));
    }
    NcmReference::new(clean, &NcmConfig::default())?.score(processed)
}

/// Reads an `id,score` CSV of externally computed quality scores.
pub fn ingest_external_quality(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut reader =
        csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse { path: path.into(), line: 1, msg: format!("{other:?}") },
        })?;
    let parse_err = |line: u64, msg: String| Error::Parse { path: path.into(), line, msg };
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "id" || &headers[1] != "score" {
        return Err(parse_err(1, format!("expected header `id,score`, got {:?}", headers)));
    }
    let mut scores = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 2 {
            return Err(parse_err(line, format!("expected 2 fields, got {}", record.len())));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty id".into()));
        }
        let score: f64 =
            record[1].parse().map_err(|_| parse_err(line, format!("score {:?} is not a number", &record[1])))?;
        check_quality(score).map_err(|e| parse_err(line, e.to_string()))?;
        if scores.insert(id.clone(), score).is_some() {
            return Err(parse_err(line, format!("duplicate id {id:?}")));
        }
    }
    if scores.is_empty() {
        warn!("{} contains no scores", path.display());
    }
    Ok(scores)
}
