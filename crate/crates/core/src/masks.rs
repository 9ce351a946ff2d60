//! Suppression rules, a-priori SNR fields and mask application.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cost::CostParams;
use crate::db;
use crate::error::{Error, Result};
use crate::spectral::Spectrogram;

/// Lower bound applied to every a-priori SNR value.
pub const DEFAULT_SNR_FLOOR: f64 = 1e-12;

/// Denominator guard for oracle SNRs, relative to the frame's peak bin power.
const RELATIVE_DENOMINATOR_GUARD: f64 = 1e-20;

/// A suppression rule. Ratios (`mu0`, `eta`, `mu`) are linear power ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskParams {
    /// Hard mask: 1 where `xi >= mu0`, else 0.
    Binary { mu0: f64 },
    /// `xi / (xi + 1)`.
    Wiener,
    /// `sqrt(xi / (xi + 1))`.
    ConstrainedWiener,
    /// `(xi / (xi + eta))^beta`.
    ParametricWiener { beta: f64, eta: f64 },
    /// `xi^gamma / (xi^gamma + mu^gamma)`.
    Conformable { gamma: f64, mu: f64 },
}

impl MaskParams {
    pub fn binary(mu0: f64) -> Result<Self> {
        Self::Binary { mu0 }.validated()
    }

    pub fn parametric_wiener(beta: f64, eta: f64) -> Result<Self> {
        Self::ParametricWiener { beta, eta }.validated()
    }

    pub fn conformable(gamma: f64, mu: f64) -> Result<Self> {
        Self::Conformable { gamma, mu }.validated()
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidMask(format!("{name} must be finite and > 0, got {v}")))
            }
        };
        match *self {
            MaskParams::Binary { mu0 } => positive("mu0", mu0),
            MaskParams::Wiener | MaskParams::ConstrainedWiener => Ok(()),
            MaskParams::ParametricWiener { beta, eta } => {
                positive("beta", beta)?;
                positive("eta", eta)
            }
            MaskParams::Conformable { gamma, mu } => {
                if !(gamma.is_finite() && gamma >= 0.5) {
                    return Err(Error::InvalidMask(format!("gamma must be >= 1/2, got {gamma}")));
                }
                positive("mu", mu)
            }
        }
    }

    pub fn is_hard(&self) -> bool {
        matches!(self, MaskParams::Binary { .. })
    }

    /// Short family label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            MaskParams::Binary { .. } => "BM",
            MaskParams::Wiener => "WF",
            MaskParams::ConstrainedWiener => "CWF",
            MaskParams::ParametricWiener { .. } => "PW",
            MaskParams::Conformable { .. } => "CM",
        }
    }

    /// Gain for a-priori SNR `xi` (linear). Non-positive or NaN `xi` is treated as 0.
    pub fn gain(&self, xi: f64) -> f64 {
        let xi = if xi > 0.0 { xi } else { 0.0 };
        match *self {
            MaskParams::Binary { mu0 } => {
                if xi >= mu0 {
                    1.0
                } else {
                    0.0
                }
            }
            MaskParams::Wiener => 1.0 / (1.0 + 1.0 / xi),
            MaskParams::ConstrainedWiener => (1.0 / (1.0 + 1.0 / xi)).sqrt(),
            MaskParams::ParametricWiener { beta, eta } => {
                if xi == 0.0 {
                    return 0.0;
                }
                let ratio = eta / xi;
                if beta == 1.0 {
                    1.0 / (1.0 + ratio)
                } else {
                    (-beta * ratio.ln_1p()).exp()
                }
            }
            MaskParams::Conformable { gamma, mu } => {
                if xi == 0.0 {
                    return 0.0;
                }
                logistic(gamma * (xi.ln() - mu.ln()))
            }
        }
    }

    /// Gain at an SNR given in dB.
    pub fn gain_db(&self, xi_db: f64) -> f64 {
        self.gain(db::to_linear(xi_db))
    }

    /// Coordinates on the scale the parameter grids are defined on:
    /// `(ln gamma, mu_dB)`, `(ln beta, eta_dB)` or `(mu0_dB, 0)`.
    pub fn search_coords(&self) -> Option<(f64, f64)> {
        match *self {
            MaskParams::Conformable { gamma, mu } => Some((gamma.ln(), db::to_db(mu))),
            MaskParams::ParametricWiener { beta, eta } => Some((beta.ln(), db::to_db(eta))),
            MaskParams::Binary { mu0 } => Some((db::to_db(mu0), 0.0)),
            MaskParams::Wiener | MaskParams::ConstrainedWiener => None,
        }
    }

    /// The two displayed parameters: `(gamma, mu_dB)`, `(beta, eta_dB)`,
    /// `(mu0_dB, NaN)`; NaN when a slot is unused.
    pub fn display_params(&self) -> (f64, f64) {
        match *self {
            MaskParams::Conformable { gamma, mu } => (gamma, db::to_db(mu)),
            MaskParams::ParametricWiener { beta, eta } => (beta, db::to_db(eta)),
            MaskParams::Binary { mu0 } => (db::to_db(mu0), f64::NAN),
            MaskParams::Wiener | MaskParams::ConstrainedWiener => (f64::NAN, f64::NAN),
        }
    }
}

fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for MaskParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            MaskParams::Binary { mu0 } => write!(f, "binary:mu0={}dB", db::to_db(mu0)),
            MaskParams::Wiener => write!(f, "wiener"),
            MaskParams::ConstrainedWiener => write!(f, "cwiener"),
            MaskParams::ParametricWiener { beta, eta } => {
                write!(f, "pw:beta={beta},eta={}dB", db::to_db(eta))
            }
            MaskParams::Conformable { gamma, mu } => {
                write!(f, "cm:gamma={gamma},mu={}dB", db::to_db(mu))
            }
        }
    }
}

/// Parses `kind[:key=value,...]`, e.g. `cm:gamma=0.5,mu=5dB`, `binary:mu0=0dB`,
/// `pw:beta=0.305,eta=15.9dB`, `wiener`. Ratio values accept a `dB` suffix.
/// Omitted keys default to the Wiener-equivalent value (and `mu0` to 0 dB).
impl FromStr for MaskParams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = match s.split_once(':') {
            Some((k, r)) => (k.trim(), r),
            None => (s.trim(), ""),
        };
        let mut pairs = Vec::new();
        for item in rest.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (k, v) =
                item.split_once('=').ok_or_else(|| Error::InvalidMask(format!("expected key=value, got {item:?}")))?;
            pairs.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
        }
        let mut take = |key: &str, default: f64, ratio: bool| -> Result<f64> {
            match pairs.iter().position(|(k, _)| k == key) {
                Some(i) => {
                    let (_, v) = pairs.remove(i);
                    if ratio {
                        db::parse_ratio(&v)
                    } else {
                        v.parse().map_err(|_| Error::InvalidMask(format!("{key} must be a number, got {v:?}")))
                    }
                }
                None => Ok(default),
            }
        };
        let params = match kind.to_ascii_lowercase().as_str() {
            "binary" | "bm" => MaskParams::Binary { mu0: take("mu0", 1.0, true)? },
            "wiener" | "wf" => MaskParams::Wiener,
            "cwiener" | "cwf" => MaskParams::ConstrainedWiener,
            "pw" => MaskParams::ParametricWiener { beta: take("beta", 1.0, false)?, eta: take("eta", 1.0, true)? },
            "cm" => MaskParams::Conformable { gamma: take("gamma", 1.0, false)?, mu: take("mu", 1.0, true)? },
            other => return Err(Error::InvalidMask(format!("unknown mask kind {other:?}"))),
        };
        if let Some((k, _)) = pairs.first() {
            return Err(Error::InvalidMask(format!("unexpected key {k:?} for {kind}")));
        }
        params.validated()
    }
}

/// Per-bin, per-frame a-priori SNR (linear), floored at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrField {
    xi: Vec<f64>,
    num_bins: usize,
    num_frames: usize,
}

impl SnrField {
    /// Builds a field from frame-major values, applying `floor`.
    pub fn from_values(values: Vec<f64>, num_bins: usize, num_frames: usize, floor: f64) -> Result<Self> {
        check_floor(floor)?;
        if values.len() != num_bins * num_frames {
            return Err(Error::ShapeMismatch(format!("{} values for {num_bins} x {num_frames} field", values.len())));
        }
        let mut xi = values;
        for v in xi.iter_mut() {
            if v.is_nan() || *v == f64::INFINITY {
                return Err(Error::InvalidArgument(format!("non-finite SNR value {v}")));
            }
            *v = v.max(floor);
        }
        Ok(Self { xi, num_bins, num_frames })
    }

    pub fn uniform(value: f64, num_bins: usize, num_frames: usize) -> Result<Self> {
        Self::from_values(vec![value; num_bins * num_frames], num_bins, num_frames, DEFAULT_SNR_FLOOR)
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.xi[frame * self.num_bins + bin]
    }

    pub fn values(&self) -> &[f64] {
        &self.xi
    }
}

fn check_floor(floor: f64) -> Result<()> {
    if floor.is_finite() && floor > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("SNR floor must be finite and > 0, got {floor}")))
    }
}

/// Ideal (oracle) a-priori SNR from separately transformed speech and noise,
/// using single-frame periodograms as the spectral densities.
pub fn oracle_snr(clean: &Spectrogram, noise: &Spectrogram, floor: f64) -> Result<SnrField> {
    check_floor(floor)?;
    if !clean.same_shape(noise) {
        return Err(Error::ShapeMismatch(format!(
            "clean {}x{} vs noise {}x{}",
            clean.num_bins(),
            clean.num_frames(),
            noise.num_bins(),
            noise.num_frames()
        )));
    }
    let mut xi = Vec::with_capacity(clean.values().len());
    for frame in 0..clean.num_frames() {
        let (x, v) = (clean.frame(frame), noise.frame(frame));
        let peak = x.iter().chain(v).map(|c| c.norm_sqr()).fold(0.0, f64::max);
        let guard = (RELATIVE_DENOMINATOR_GUARD * peak).max(f64::MIN_POSITIVE);
        xi.extend(x.iter().zip(v).map(|(x, v)| x.norm_sqr() / v.norm_sqr().max(guard)));
    }
    SnrField::from_values(xi, clean.num_bins(), clean.num_frames(), floor)
}

/// Blind decision-directed a-priori SNR estimate.
///
/// The previous clean estimate is the Wiener-gained noisy frame,
/// `|X_hat(k, l-1)|^2 = W(xi_hat(k, l-1))^2 |Y(k, l-1)|^2`.
pub fn dd_snr(noisy: &Spectrogram, noise_psd: &[f64], smoothing: f64, floor: f64) -> Result<SnrField> {
    check_floor(floor)?;
    if noise_psd.len() != noisy.num_bins() {
        return Err(Error::ShapeMismatch(format!(
            "noise PSD has {} bins, spectrogram {}",
            noise_psd.len(),
            noisy.num_bins()
        )));
    }
    if noise_psd.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(Error::InvalidArgument("noise PSD must be positive in every bin".into()));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument(format!("smoothing must be in [0, 1), got {smoothing}")));
    }
    let bins = noisy.num_bins();
    let mut xi = Vec::with_capacity(noisy.values().len());
    let mut prev_clean = vec![0.0; bins];
    for frame in 0..noisy.num_frames() {
        for (k, y) in noisy.frame(frame).iter().enumerate() {
            let posterior = y.norm_sqr() / noise_psd[k];
            let ml = (posterior - 1.0).max(0.0);
            let estimate =
                if frame == 0 { ml } else { smoothing * prev_clean[k] / noise_psd[k] + (1.0 - smoothing) * ml };
            let estimate = estimate.max(floor);
            let w = MaskParams::Wiener.gain(estimate);
            prev_clean[k] = w * w * y.norm_sqr();
            xi.push(estimate);
        }
    }
    SnrField::from_values(xi, bins, noisy.num_frames(), floor)
}

/// Mean power of the leading `frames` frames, a simple noise PSD estimate for
/// signals that start with a speech pause.
pub fn leading_noise_psd(noisy: &Spectrogram, frames: usize) -> Result<Vec<f64>> {
    let frames = frames.min(noisy.num_frames());
    if frames == 0 {
        return Err(Error::InvalidArgument("no frames to estimate noise from".into()));
    }
    let mut psd = vec![0.0; noisy.num_bins()];
    for frame in 0..frames {
        for (p, y) in psd.iter_mut().zip(noisy.frame(frame)) {
            *p += y.norm_sqr();
        }
    }
    let peak = psd.iter().cloned().fold(0.0, f64::max) / frames as f64;
    let guard = (RELATIVE_DENOMINATOR_GUARD * peak).max(f64::MIN_POSITIVE);
    Ok(psd.into_iter().map(|p| (p / frames as f64).max(guard)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Soft,
    Hard,
}

/// Real gains indexed `(bin, frame)`, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMask {
    gains: Vec<f64>,
    num_bins: usize,
    num_frames: usize,
    kind: MaskKind,
}

impl GainMask {
    pub fn from_values(gains: Vec<f64>, num_bins: usize, num_frames: usize, kind: MaskKind) -> Result<Self> {
        if gains.len() != num_bins * num_frames {
            return Err(Error::ShapeMismatch(format!("{} gains for {num_bins} x {num_frames} mask", gains.len())));
        }
        let ok = match kind {
            MaskKind::Soft => gains.iter().all(|g| (0.0..=1.0).contains(g)),
            MaskKind::Hard => gains.iter().all(|&g| g == 0.0 || g == 1.0),
        };
        if !ok {
            return Err(Error::OutOfRange(format!("gains outside the {kind:?} range")));
        }
        Ok(Self { gains, num_bins, num_frames, kind })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.gains[frame * self.num_bins + bin]
    }

    pub fn values(&self) -> &[f64] {
        &self.gains
    }

    /// One row per bin, one tab-separated column per frame.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for bin in 0..self.num_bins {
            let row: Vec<String> = (0..self.num_frames).map(|f| format!("{}", self.get(bin, f))).collect();
            writeln!(out, "{}", row.join("\t"))?;
        }
        Ok(())
    }
}

pub fn build_mask(params: &MaskParams, snr: &SnrField) -> GainMask {
    let gains = snr.values().iter().map(|&xi| params.gain(xi)).collect();
    let kind = if params.is_hard() { MaskKind::Hard } else { MaskKind::Soft };
    GainMask { gains, num_bins: snr.num_bins, num_frames: snr.num_frames, kind }
}

/// `X_hat = M * Y`, bin by bin; the phase of `Y` is kept.
pub fn apply_mask(mask: &GainMask, noisy: &Spectrogram) -> Result<Spectrogram> {
    if mask.num_bins != noisy.num_bins() || mask.num_frames != noisy.num_frames() {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs spectrogram {}x{}",
            mask.num_bins,
            mask.num_frames,
            noisy.num_bins(),
            noisy.num_frames()
        )));
    }
    let values: Vec<Complex64> = noisy.values().iter().zip(&mask.gains).map(|(y, g)| y * *g).collect();
    Ok(noisy.with_values(values))
}

/// Conformable mask that minimizes the cost with the given trade-off:
/// `gamma = 1 / (2 - 1/alpha)`, `mu = rho^(1/alpha)`.
pub fn cm_from_cost(cost: &CostParams) -> Result<MaskParams> {
    cost.validate()?;
    let (rho, alpha) = (cost.rho(), cost.alpha());
    Ok(MaskParams::Conformable { gamma: 1.0 / (2.0 - 1.0 / alpha), mu: rho.powf(1.0 / alpha) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{analyze, AudioBuffer, StftConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const SOFT: [MaskParams; 4] = [
        MaskParams::Wiener,
        MaskParams::ConstrainedWiener,
        MaskParams::ParametricWiener { beta: 0.4, eta: 3.0 },
        MaskParams::Conformable { gamma: 2.5, mu: 0.3 },
    ];

    fn gaussian(len: usize, seed: u64, sd: f64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..len).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        AudioBuffer::new(s, 16_000).unwrap()
    }

    #[test]
    fn wiener_at_zero_db() {
        assert_eq!(MaskParams::Wiener.gain(1.0), 0.5);
    }

    #[test]
    fn conformable_pivot() {
        for gamma in [0.51, 1.0, 10.0, 1000.0] {
            for mu in [0.01, 1.0, 3.7, 1e4] {
                let cm = MaskParams::conformable(gamma, mu).unwrap();
                assert_eq!(cm.gain(mu), 0.5, "gamma {gamma} mu {mu}");
            }
        }
    }

    #[test]
    fn binary_boundary_is_inclusive() {
        let bm = MaskParams::binary(1.0).unwrap();
        assert_eq!(bm.gain(1.0), 1.0);
        assert_eq!(bm.gain(0.999), 0.0);
        assert_eq!(bm.gain(0.0), 0.0);
    }

    #[test]
    fn family_identities() {
        let cm = MaskParams::conformable(1.0, 1.0).unwrap();
        let pw = MaskParams::parametric_wiener(1.0, 1.0).unwrap();
        for i in 0..=1200 {
            let xi = db::to_linear(-60.0 + 0.1 * i as f64);
            let wf = MaskParams::Wiener.gain(xi);
            assert!((cm.gain(xi) - wf).abs() <= 4.0 * f64::EPSILON, "xi {xi}");
            assert_eq!(pw.gain(xi), wf);
        }
    }

    #[test]
    fn zero_and_infinite_snr() {
        for p in SOFT {
            assert_eq!(p.gain(0.0), 0.0);
            assert_eq!(p.gain(f64::INFINITY), 1.0);
        }
        assert_eq!(MaskParams::Conformable { gamma: 1e4, mu: 1.0 }.gain(1e12), 1.0);
        assert_eq!(MaskParams::Conformable { gamma: 1e4, mu: 1.0 }.gain(1e-12), 0.0);
    }

    #[test]
    fn parameter_validation() {
        assert!(MaskParams::conformable(0.5, 1.0).is_ok());
        assert!(MaskParams::conformable(0.49, 1.0).is_err());
        assert!(MaskParams::conformable(1.0, 0.0).is_err());
        assert!(MaskParams::conformable(f64::NAN, 1.0).is_err());
        assert!(MaskParams::parametric_wiener(0.0, 1.0).is_err());
        assert!(MaskParams::parametric_wiener(1.0, -1.0).is_err());
        assert!(MaskParams::binary(f64::INFINITY).is_err());
    }

    #[test]
    fn parse_literals() {
        let cm: MaskParams = "cm:gamma=0.5,mu=5dB".parse().unwrap();
        match cm {
            MaskParams::Conformable { gamma, mu } => {
                assert_eq!(gamma, 0.5);
                assert!((mu - 3.1622776601683795).abs() < 1e-12);
            }
            _ => panic!(),
        }
        assert_eq!("wiener".parse::<MaskParams>().unwrap(), MaskParams::Wiener);
        assert_eq!("binary".parse::<MaskParams>().unwrap(), MaskParams::Binary { mu0: 1.0 });
        assert_eq!(
            "pw:beta=2,eta=3.5".parse::<MaskParams>().unwrap(),
            MaskParams::ParametricWiener { beta: 2.0, eta: 3.5 }
        );
        assert!("cm:gamma=0.2".parse::<MaskParams>().is_err());
        assert!("cm:beta=2".parse::<MaskParams>().is_err());
        assert!("frob".parse::<MaskParams>().is_err());
        let round: MaskParams = cm.to_string().parse().unwrap();
        let (g, m) = round.display_params();
        assert_eq!(g, 0.5);
        assert!((m - 5.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_snr_ratio_and_guard() {
        let cfg = StftConfig::default();
        let x = gaussian(4000, 1, 1.0);
        let clean = analyze(&x, &cfg).unwrap();
        let xi = oracle_snr(&clean, &clean, DEFAULT_SNR_FLOOR).unwrap();
        for (i, v) in xi.values().iter().enumerate() {
            let p = clean.values()[i].norm_sqr();
            if p > 0.0 {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }

        let doubled = analyze(&x.scaled(2.0).unwrap(), &cfg).unwrap();
        let xi = oracle_snr(&doubled, &clean, DEFAULT_SNR_FLOOR).unwrap();
        assert!((xi.get(10, 3) - 4.0).abs() < 1e-9);

        let silent = analyze(&AudioBuffer::zeros(4000, 16_000).unwrap(), &cfg).unwrap();
        let xi = oracle_snr(&clean, &silent, DEFAULT_SNR_FLOOR).unwrap();
        assert!(xi.values().iter().all(|v| v.is_finite() && *v >= DEFAULT_SNR_FLOOR));
        let xi = oracle_snr(&silent, &silent, DEFAULT_SNR_FLOOR).unwrap();
        assert!(xi.values().iter().all(|&v| v == DEFAULT_SNR_FLOOR));

        let short = analyze(&gaussian(3000, 2, 1.0), &cfg).unwrap();
        assert!(matches!(oracle_snr(&clean, &short, 1e-12), Err(Error::ShapeMismatch(_))));
        assert!(oracle_snr(&clean, &clean, 0.0).is_err());
    }

    #[test]
    fn build_mask_uniform_fields() {
        let field = SnrField::uniform(1.0, 5, 4).unwrap();
        let m = build_mask(&MaskParams::Wiener, &field);
        assert_eq!(m.kind(), MaskKind::Soft);
        assert!(m.values().iter().all(|&g| g == 0.5));

        let mu0 = db::to_linear(3.0);
        let field = SnrField::uniform(mu0, 5, 4).unwrap();
        let m = build_mask(&MaskParams::Binary { mu0 }, &field);
        assert_eq!(m.kind(), MaskKind::Hard);
        assert!(m.values().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn steep_conformable_tracks_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<f64> = (0..64 * 50).map(|_| db::to_linear(rng.random_range(-40.0..40.0))).collect();
        let field = SnrField::from_values(values, 64, 50, DEFAULT_SNR_FLOOR).unwrap();
        let cm = build_mask(&MaskParams::Conformable { gamma: 100.0, mu: 1.0 }, &field);
        let bm = build_mask(&MaskParams::Binary { mu0: 1.0 }, &field);
        for ((g, b), xi) in cm.values().iter().zip(bm.values()).zip(field.values()) {
            assert!((0.0..=1.0).contains(g));
            if db::to_db(*xi).abs() > 1.0 {
                assert!((g - b).abs() < 0.01, "xi {xi}: {g} vs {b}");
            }
        }
    }

    #[test]
    fn apply_mask_identity_zero_and_shape() {
        let cfg = StftConfig::default();
        let y = analyze(&gaussian(4000, 3, 1.0), &cfg).unwrap();
        let ones =
            GainMask::from_values(vec![1.0; y.values().len()], y.num_bins(), y.num_frames(), MaskKind::Hard).unwrap();
        assert_eq!(apply_mask(&ones, &y).unwrap(), y);
        let zeros =
            GainMask::from_values(vec![0.0; y.values().len()], y.num_bins(), y.num_frames(), MaskKind::Soft).unwrap();
        assert!(apply_mask(&zeros, &y).unwrap().values().iter().all(|c| c.norm() == 0.0));
        let wrong = GainMask::from_values(vec![1.0; 10], 5, 2, MaskKind::Soft).unwrap();
        assert!(apply_mask(&wrong, &y).is_err());
    }

    #[test]
    fn phase_is_preserved() {
        let cfg = StftConfig::default();
        let y = analyze(&gaussian(4000, 4, 1.0), &cfg).unwrap();
        let field = SnrField::uniform(0.3, y.num_bins(), y.num_frames()).unwrap();
        let out = apply_mask(&build_mask(&MaskParams::Wiener, &field), &y).unwrap();
        for (a, b) in out.values().iter().zip(y.values()) {
            if b.norm() > 1e-9 {
                assert!((a.arg() - b.arg()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_wiener_reduces_error() {
        let cfg = StftConfig::default();
        let xs = gaussian(16_000, 5, 1.0);
        // Tonal speech proxy: amplitude-modulated tone plus low-level noise.
        let x: Vec<f64> = xs
            .samples()
            .iter()
            .enumerate()
            .map(|(n, s)| {
                let t = n as f64 / 16_000.0;
                (2.0 * std::f64::consts::PI * 440.0 * t).sin() * (1.0 + (6.0 * t).sin()) + 0.05 * s
            })
            .collect();
        let x = AudioBuffer::new(x, 16_000).unwrap();
        let v = gaussian(16_000, 6, 0.7);
        let (sx, sv) = (analyze(&x, &cfg).unwrap(), analyze(&v, &cfg).unwrap());
        let sy = analyze(&x.add(&v).unwrap(), &cfg).unwrap();
        let mask = build_mask(&MaskParams::Wiener, &oracle_snr(&sx, &sv, DEFAULT_SNR_FLOOR).unwrap());
        let est = apply_mask(&mask, &sy).unwrap();
        let err =
            |a: &Spectrogram| -> f64 { a.values().iter().zip(sx.values()).map(|(a, b)| (a - b).norm_sqr()).sum() };
        assert!(err(&est) < err(&sy), "{} vs {}", err(&est), err(&sy));
    }

    #[test]
    fn cost_mapping() {
        let wf = cm_from_cost(&CostParams::new(1.0, 1.0).unwrap()).unwrap();
        assert_eq!(wf, MaskParams::Conformable { gamma: 1.0, mu: 1.0 });
        match cm_from_cost(&CostParams::new(4.0, 2.0).unwrap()).unwrap() {
            MaskParams::Conformable { gamma, mu } => {
                assert!((gamma - 2.0 / 3.0).abs() < 1e-15);
                assert!((mu - 2.0).abs() < 1e-15);
            }
            _ => panic!(),
        }
        match cm_from_cost(&CostParams::new(1.0, 0.5001).unwrap()).unwrap() {
            MaskParams::Conformable { gamma, .. } => assert!(gamma > 1000.0),
            _ => panic!(),
        }
        let err = CostParams::new(1.0, 0.5).unwrap_err();
        assert!(err.to_string().contains("cost not convex"));
    }

    #[test]
    fn dd_noise_only_stays_at_floor() {
        let cfg = StftConfig::default();
        let v = gaussian(48_000, 8, 0.1);
        let spec = analyze(&v, &cfg).unwrap();
        // Exact PSD of windowed white noise: sigma^2 * sum(w^2) = sigma^2 * sum(hann).
        let wsum: f64 = cfg.window.coefficients(cfg.window_len).iter().sum();
        let psd = vec![0.01 * wsum; spec.num_bins()];
        let floor = db::to_linear(-15.0);
        let xi = dd_snr(&spec, &psd, 0.98, floor).unwrap();
        let steady: Vec<f64> = (10..spec.num_frames())
            .flat_map(|f| (1..spec.num_bins() - 1).map(move |k| (k, f)))
            .map(|(k, f)| xi.get(k, f))
            .collect();
        let mut sorted = steady.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        assert!(median < 2.0 * floor, "median {median}");
    }

    #[test]
    fn dd_without_smoothing_is_ml() {
        let cfg = StftConfig::default();
        let spec = analyze(&gaussian(8000, 9, 1.0), &cfg).unwrap();
        let psd = vec![200.0; spec.num_bins()];
        let floor = 1e-3;
        let xi = dd_snr(&spec, &psd, 0.0, floor).unwrap();
        for f in 0..spec.num_frames() {
            for k in 0..spec.num_bins() {
                let ml = (spec.get(k, f).norm_sqr() / 200.0 - 1.0).max(0.0).max(floor);
                assert_eq!(xi.get(k, f), ml);
            }
        }
    }

    #[test]
    fn dd_tone_stands_out() {
        let cfg = StftConfig::default();
        let k0 = 64;
        let f0 = 16_000.0 * k0 as f64 / 512.0;
        let v = gaussian(32_000, 10, 0.1);
        let y: Vec<f64> = v
            .samples()
            .iter()
            .enumerate()
            .map(|(n, s)| s + (2.0 * std::f64::consts::PI * f0 * n as f64 / 16_000.0).sin())
            .collect();
        let spec = analyze(&AudioBuffer::new(y, 16_000).unwrap(), &cfg).unwrap();
        let wsum: f64 = cfg.window.coefficients(cfg.window_len).iter().sum();
        let psd = vec![0.01 * wsum; spec.num_bins()];
        let xi = dd_snr(&spec, &psd, 0.98, 1e-3).unwrap();
        let frame = spec.num_frames() / 2;
        let tone = xi.get(k0, frame);
        let off: f64 = (100..200).map(|k| xi.get(k, frame)).sum::<f64>() / 100.0;
        assert!(tone > 1000.0 * off, "tone {tone} off {off}");
    }

    #[test]
    fn dd_rejects_bad_inputs() {
        let cfg = StftConfig::default();
        let spec = analyze(&gaussian(4000, 11, 1.0), &cfg).unwrap();
        let psd = vec![1.0; spec.num_bins()];
        assert!(dd_snr(&spec, &psd[1..], 0.9, 1e-3).is_err());
        assert!(dd_snr(&spec, &psd, 1.0, 1e-3).is_err());
        let mut bad = psd.clone();
        bad[3] = 0.0;
        assert!(dd_snr(&spec, &bad, 0.9, 1e-3).is_err());
    }

    #[test]
    fn tsv_export_shape() {
        let m = build_mask(&MaskParams::Wiener, &SnrField::uniform(1.0, 3, 2).unwrap());
        let mut buf = Vec::new();
        m.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "0.5\t0.5\n0.5\t0.5\n0.5\t0.5\n");
    }

    proptest! {
        #[test]
        fn soft_gains_monotone_and_bounded(a in -120.0f64..120.0, b in -120.0f64..120.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            for p in SOFT {
                let (gl, gh) = (p.gain_db(lo), p.gain_db(hi));
                prop_assert!((0.0..=1.0).contains(&gl) && (0.0..=1.0).contains(&gh));
                prop_assert!(gl <= gh);
            }
        }

        #[test]
        fn no_nan_for_extreme_inputs(xi_exp in -12.0f64..12.0, gamma in 0.5f64..1e4, mu_db in -60.0f64..60.0) {
            let xi = 10f64.powf(xi_exp).min(1e12);
            let cm = MaskParams::Conformable { gamma, mu: db::to_linear(mu_db) };
            let g = cm.gain(xi);
            prop_assert!(g.is_finite() && (0.0..=1.0).contains(&g));
            let pw = MaskParams::ParametricWiener { beta: gamma, eta: db::to_linear(mu_db) };
            let g = pw.gain(xi);
            prop_assert!(g.is_finite() && (0.0..=1.0).contains(&g));
        }

        #[test]
        fn pivot_slope(gamma in 0.5f64..50.0, mu_db in -60.0f64..60.0) {
            let cm = MaskParams::Conformable { gamma, mu: db::to_linear(mu_db) };
            let h = 1e-4;
            let slope = (cm.gain_db(mu_db + h) - cm.gain_db(mu_db - h)) / (2.0 * h);
            let expected = gamma * std::f64::consts::LN_10 / 40.0;
            prop_assert!((slope - expected).abs() < 1e-3 * expected);
        }
    }
}
