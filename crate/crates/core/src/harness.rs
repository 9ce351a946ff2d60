//! Experiment harness: SNR-controlled mixing, the mask parameter grids,
//! per-utterance exhaustive search with oracle SNR, median mapping onto the
//! grid, and the train/test protocol with CSV/TSV/JSON reports.
//!
//! Mixture SNR uses full-utterance mean-square power of speech and of the
//! selected noise segment. All randomness derives from the plan seed: each
//! (noise, SNR) subgroup and each trial draws from its own ChaCha stream.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::db;
use crate::error::{Error, Result};
use crate::io::{read_wav, write_atomic};
use crate::masks::{apply_mask, build_mask, oracle_snr, MaskParams, SnrField, DEFAULT_SNR_FLOOR};
use crate::metrics::{ingest_external_quality, MetricScore, NcmConfig, NcmReference};
use crate::spectral::{analyze, synthesize, AudioBuffer, Spectrogram, StftConfig};

/// Noisy mixture plus the scaled noise it contains.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub noisy: AudioBuffer,
    pub scaled_noise: AudioBuffer,
}

/// Mixes `speech` with a segment of `noise` taken at a seeded random offset,
/// scaled so that `10 log10(P_speech / P_noise) = snr_db`.
pub fn mix_at_snr(speech: &AudioBuffer, noise: &AudioBuffer, snr_db: f64, seed: u64) -> Result<Mixture> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("SNR must be finite, got {snr_db}")));
    }
    if speech.sample_rate() != noise.sample_rate() {
        return Err(Error::ShapeMismatch(format!(
            "speech @ {} Hz vs noise @ {} Hz",
            speech.sample_rate(),
            noise.sample_rate()
        )));
    }
    if noise.len() < speech.len() {
        return Err(Error::InsufficientSamples { needed: speech.len(), got: noise.len() });
    }
    let offset = ChaCha8Rng::seed_from_u64(seed).random_range(0..=noise.len() - speech.len());
    let segment = AudioBuffer::new(noise.samples()[offset..offset + speech.len()].to_vec(), noise.sample_rate())?;
    let (ps, pn) = (speech.power(), segment.power());
    if ps <= 0.0 {
        return Err(Error::InvalidAudio("speech has zero power".into()));
    }
    if pn <= 0.0 {
        return Err(Error::InvalidAudio(format!("noise segment at offset {offset} has zero power")));
    }
    let gain = (ps / (pn * db::to_linear(snr_db))).sqrt();
    let scaled_noise = segment.scaled(gain)?;
    let noisy = speech.add(&scaled_noise)?;
    Ok(Mixture { noisy, scaled_noise })
}

/// `n` log-spaced values from `lo` to `hi`, endpoints exact.
fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| match i {
            0 => lo,
            i if i == n - 1 => hi,
            i => lo * (hi / lo).powf(i as f64 / (n - 1) as f64),
        })
        .collect()
}

fn db_steps(lo: f64, step: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| lo + step * i as f64).collect()
}

pub fn grid_cm_gammas() -> Vec<f64> {
    let mut g = log_space(0.5, 1.0, 6);
    g.extend(log_space(1.25, 100.0, 6));
    g
}

pub fn grid_pw_betas() -> Vec<f64> {
    let mut b = log_space(0.2, 1.0, 6);
    b.extend(log_space(1.25, 40.0, 4));
    b
}

/// 12 slopes x 25 thresholds (-60..60 dB step 5), slope-major.
pub fn grid_cm() -> Vec<MaskParams> {
    let mus = db_steps(-60.0, 5.0, 25);
    grid_cm_gammas()
        .into_iter()
        .flat_map(|gamma| mus.iter().map(move |&mu| MaskParams::Conformable { gamma, mu: db::to_linear(mu) }))
        .collect()
}

/// 10 exponents x 25 thresholds (-35..25 dB step 2.5), exponent-major.
pub fn grid_pw() -> Vec<MaskParams> {
    let etas = db_steps(-35.0, 2.5, 25);
    grid_pw_betas()
        .into_iter()
        .flat_map(|beta| etas.iter().map(move |&eta| MaskParams::ParametricWiener { beta, eta: db::to_linear(eta) }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Quality,
    #[default]
    Intelligibility,
    Composite,
}

impl Criterion {
    pub fn objective(self, score: &MetricScore) -> Result<f64> {
        let missing = || Error::Experiment(format!("criterion {self:?} needs a quality score"));
        match self {
            Criterion::Intelligibility => Ok(score.ncm),
            Criterion::Quality => score.quality.ok_or_else(missing),
            Criterion::Composite => score.d_p.ok_or_else(missing),
        }
    }

    fn needs_quality(self) -> bool {
        self != Criterion::Intelligibility
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quality" => Ok(Criterion::Quality),
            "intelligibility" => Ok(Criterion::Intelligibility),
            "composite" => Ok(Criterion::Composite),
            other => Err(Error::InvalidArgument(format!("unknown criterion {other:?}"))),
        }
    }
}

/// Identifies one noisy utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialKey {
    pub id: String,
    pub noise: String,
    pub snr_db: f64,
}

impl TrialKey {
    /// `{id}/{noise}/{snr_db}/{mask}`, the key external quality scores use.
    pub fn quality_key(&self, params: &MaskParams) -> String {
        format!("{}/{}/{}/{}", self.id, self.noise, self.snr_db, params)
    }
}

/// Source of quality scores for processed audio.
pub trait QualityScorer: Sync {
    fn quality(
        &self,
        key: &TrialKey,
        params: &MaskParams,
        clean: &AudioBuffer,
        processed: &AudioBuffer,
    ) -> Result<Option<f64>>;
}

/// Quality scores looked up by [`TrialKey::quality_key`].
#[derive(Debug, Clone, Default)]
pub struct CsvQuality {
    scores: BTreeMap<String, f64>,
}

impl CsvQuality {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self { scores: ingest_external_quality(path)? })
    }

    pub fn from_map(scores: BTreeMap<String, f64>) -> Self {
        Self { scores }
    }
}

impl QualityScorer for CsvQuality {
    fn quality(&self, key: &TrialKey, params: &MaskParams, _: &AudioBuffer, _: &AudioBuffer) -> Result<Option<f64>> {
        Ok(self.scores.get(&key.quality_key(params)).copied())
    }
}

/// A mixture with everything the oracle search needs precomputed.
pub struct PreparedTrial {
    pub key: TrialKey,
    clean: AudioBuffer,
    noisy: Spectrogram,
    snr: SnrField,
    reference: NcmReference,
}

impl PreparedTrial {
    pub fn new(key: TrialKey, speech: &AudioBuffer, noise: &AudioBuffer, seed: u64, stft: &StftConfig) -> Result<Self> {
        let mix = mix_at_snr(speech, noise, key.snr_db, seed)?;
        Self::from_parts(key, speech.clone(), &mix.scaled_noise, stft)
    }

    /// From clean speech and the exact additive noise.
    pub fn from_parts(key: TrialKey, clean: AudioBuffer, noise: &AudioBuffer, stft: &StftConfig) -> Result<Self> {
        let noisy_audio = clean.add(noise)?;
        let snr = oracle_snr(&analyze(&clean, stft)?, &analyze(noise, stft)?, DEFAULT_SNR_FLOOR)?;
        let noisy = analyze(&noisy_audio, stft)?;
        let reference = NcmReference::new(&clean, &NcmConfig::default())?;
        Ok(Self { key, clean, noisy, snr, reference })
    }

    pub fn clean(&self) -> &AudioBuffer {
        &self.clean
    }

    /// Oracle mask -> apply -> synthesize.
    pub fn process(&self, params: &MaskParams) -> Result<AudioBuffer> {
        synthesize(&apply_mask(&build_mask(params, &self.snr), &self.noisy)?)
    }

    pub fn evaluate(&self, params: &MaskParams, scorer: Option<&dyn QualityScorer>) -> Result<MetricScore> {
        let processed = self.process(params)?;
        let ncm = self.reference.score(&processed)?;
        let quality = match scorer {
            Some(s) => s.quality(&self.key, params, &self.clean, &processed)?,
            None => None,
        };
        MetricScore::new(ncm, quality)
    }
}

/// Grid point maximizing the criterion on one trial; ties go to the earliest.
pub fn best_params_per_signal(
    trial: &PreparedTrial,
    grid: &[MaskParams],
    criterion: Criterion,
    scorer: Option<&dyn QualityScorer>,
) -> Result<(MaskParams, f64)> {
    let mut best: Option<(MaskParams, f64)> = None;
    for params in grid {
        let value = criterion.objective(&trial.evaluate(params, scorer)?)?;
        if best.is_none_or(|(_, b)| value > b) {
            best = Some((*params, value));
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("empty parameter grid".into()))
}

const SNAP_TIE_TOL: f64 = 1e-9;

fn lower_median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

/// Nearest candidate; ties go to the smaller value.
fn snap(value: f64, candidates: &[f64]) -> f64 {
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        let (d, db) = ((c - value).abs(), (best - value).abs());
        if d < db - SNAP_TIE_TOL || ((d - db).abs() <= SNAP_TIE_TOL && c < best) {
            best = c;
        }
    }
    best
}

fn distinct(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() <= SNAP_TIE_TOL);
    v
}

/// Per-parameter lower median on the search scale (log for slopes/exponents,
/// dB for thresholds), each snapped to the nearest grid value on that scale.
pub fn median_map(best_sets: &[MaskParams], grid: &[MaskParams]) -> Result<MaskParams> {
    let first = grid.first().ok_or_else(|| Error::InvalidArgument("empty parameter grid".into()))?;
    if best_sets.is_empty() {
        return Err(Error::InvalidArgument("median_map needs at least one parameter set".into()));
    }
    let kind = std::mem::discriminant(first);
    let coords = |p: &MaskParams| -> Result<(f64, f64)> {
        if std::mem::discriminant(p) != kind {
            return Err(Error::InvalidArgument(format!("{p} is not of the grid's kind ({first})")));
        }
        p.search_coords().ok_or_else(|| Error::InvalidArgument(format!("{p} has no tunable parameters")))
    };
    let grid_coords = grid.iter().map(coords).collect::<Result<Vec<_>>>()?;
    let set_coords = best_sets.iter().map(coords).collect::<Result<Vec<_>>>()?;
    let m0 = lower_median(set_coords.iter().map(|c| c.0).collect());
    let m1 = lower_median(set_coords.iter().map(|c| c.1).collect());
    let s0 = snap(m0, &distinct(grid_coords.iter().map(|c| c.0).collect()));
    let s1 = snap(m1, &distinct(grid_coords.iter().map(|c| c.1).collect()));
    // Exact match on a Cartesian grid; otherwise the nearest point.
    let dist = |c: &(f64, f64)| (c.0 - s0).hypot(c.1 - s1);
    let mut best = 0;
    for (i, c) in grid_coords.iter().enumerate() {
        if dist(c) < dist(&grid_coords[best]) - SNAP_TIE_TOL {
            best = i;
        }
    }
    Ok(grid[best])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub speech_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub name: String,
    pub noise_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub entries: Vec<CorpusEntry>,
    pub noise_profiles: Vec<NoiseProfile>,
    pub sample_rate: u32,
}

impl CorpusManifest {
    /// Parses JSON; relative paths resolve against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut manifest.entries {
            e.speech_path = base.join(&e.speech_path);
        }
        for n in &mut manifest.noise_profiles {
            n.noise_path = base.join(&n.noise_path);
        }
        manifest.validate()?;
        Ok(manifest)
    }

    /// Unique ids and names, positive rate. Missing speech files only warn;
    /// they become per-entry error rows when the experiment runs.
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::InvalidArgument("manifest sample_rate must be positive".into()));
        }
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate entry id {:?}", e.id)));
            }
            if e.id.contains(['/', ',', '"', '\n']) {
                return Err(Error::InvalidArgument(format!("entry id {:?} contains a reserved character", e.id)));
            }
            if !e.speech_path.is_file() {
                warn!("speech file for {:?} not found: {}", e.id, e.speech_path.display());
            }
        }
        let mut names = HashSet::new();
        for n in &self.noise_profiles {
            if !names.insert(n.name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate noise profile {:?}", n.name)));
            }
            if n.name.contains(['/', ',', '"', '\n']) {
                return Err(Error::InvalidArgument(format!("noise name {:?} contains a reserved character", n.name)));
            }
        }
        if self.sample_rate != 16_000 {
            warn!("sample rate {} Hz; the default STFT configuration assumes 16 kHz", self.sample_rate);
        }
        Ok(())
    }
}

/// Parameter families tuned on the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFamily {
    Cm,
    Pw,
    /// An explicit list of one parametric kind.
    Fixed(Vec<MaskParams>),
}

impl MaskFamily {
    pub fn label(&self) -> &'static str {
        match self {
            MaskFamily::Cm => "CM",
            MaskFamily::Pw => "PW",
            MaskFamily::Fixed(_) => "FIXED",
        }
    }

    pub fn grid(&self) -> Vec<MaskParams> {
        match self {
            MaskFamily::Cm => grid_cm(),
            MaskFamily::Pw => grid_pw(),
            MaskFamily::Fixed(list) => list.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_count: usize,
    pub test_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub snr_levels_db: Vec<f64>,
    /// Noise profile names; empty means every profile in the manifest.
    pub noises: Vec<String>,
    #[serde(alias = "mask_family")]
    pub mask_families: Vec<MaskFamily>,
    pub criterion: Criterion,
    pub split: Split,
    pub seed: u64,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            snr_levels_db: vec![-10.0, 0.0, 5.0],
            noises: Vec::new(),
            mask_families: vec![MaskFamily::Cm, MaskFamily::Pw],
            criterion: Criterion::Intelligibility,
            split: Split { train_count: 100, test_count: 100 },
            seed: 0,
        }
    }
}

impl ExperimentPlan {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: Self = serde_json::from_str(&text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_levels_db.is_empty() || self.snr_levels_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("plan needs finite SNR levels".into()));
        }
        if self.split.train_count == 0 || self.split.test_count == 0 {
            return Err(Error::InvalidArgument("train and test counts must be positive".into()));
        }
        if self.mask_families.is_empty() {
            return Err(Error::InvalidArgument("plan needs at least one mask family".into()));
        }
        let mut labels = HashSet::new();
        for family in &self.mask_families {
            if !labels.insert(family.label()) {
                return Err(Error::InvalidArgument(format!("mask family {} listed twice", family.label())));
            }
            if let MaskFamily::Fixed(list) = family {
                // median_map validates kinds; run it on the list itself.
                median_map(list, list)?;
                for p in list {
                    p.validate()?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Test,
}

/// One per-utterance row of the report.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub phase: Phase,
    pub id: String,
    pub noise: String,
    pub snr_db: f64,
    pub mask: String,
    pub params: Option<MaskParams>,
    pub scores: Option<MetricScore>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    pub noise: String,
    pub snr_db: f64,
    pub mask: String,
    pub params: MaskParams,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub noise: String,
    pub snr_db: f64,
    pub mask: String,
    pub params: MaskParams,
    pub mean_ncm: f64,
    pub mean_quality: Option<f64>,
    pub median_ncm: f64,
    pub q1: f64,
    pub q3: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub params: Vec<ParamRow>,
    pub scores: Vec<ScoreRow>,
    pub trials: Vec<TrialResult>,
    /// `(noise, snr_db, id, phase)`.
    pub split: Vec<(String, f64, String, Phase)>,
}

pub const PARAMS_HEADER: &str = "noise,snr_db,mask,param1,param2,n";
pub const SCORES_HEADER: &str = "noise,snr_db,mask,param1,param2,mean_ncm,mean_quality,median_ncm,q1,q3,n";
pub const TRIALS_HEADER: &str = "phase,id,noise,snr_db,mask,param1,param2,ncm,quality,d_p,error";
pub const SPLIT_HEADER: &str = "noise,snr_db,id,set";

#[derive(Default)]
pub struct RunOptions<'a> {
    pub out_dir: Option<PathBuf>,
    pub quality: Option<&'a dyn QualityScorer>,
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
    pub stft: StftConfig,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn fmt_param(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Per-trial stream: subgroup in the high bits, entry index in the low bits.
fn trial_seed(seed: u64, subgroup: usize, entry: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((subgroup as u64) << 32) | entry as u64);
    rng.random()
}

fn subgroup_split(seed: u64, subgroup: usize, n: usize, split: Split) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((subgroup as u64) << 32) | u64::from(u32::MAX));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let test = order[split.train_count..split.train_count + split.test_count].to_vec();
    order.truncate(split.train_count);
    (order, test)
}

/// Untuned masks evaluated on every test set; the binary threshold is 0 dB.
fn baselines() -> [(&'static str, MaskParams); 2] {
    [("WF", MaskParams::Wiener), ("BM", MaskParams::Binary { mu0: 1.0 })]
}

/// Runs the train/test protocol on every (noise, SNR) subgroup. Writes the
/// report files when `opts.out_dir` is set.
pub fn run_experiment(plan: &ExperimentPlan, manifest: &CorpusManifest, opts: &RunOptions) -> Result<ExperimentReport> {
    plan.validate()?;
    manifest.validate()?;
    opts.stft.validate()?;
    if plan.criterion.needs_quality() && opts.quality.is_none() {
        return Err(Error::Experiment(format!("criterion {:?} needs external quality scores", plan.criterion)));
    }
    let needed = plan.split.train_count + plan.split.test_count;
    if manifest.entries.len() < needed {
        return Err(Error::Experiment(format!(
            "split needs {needed} utterances per subgroup, manifest has {}",
            manifest.entries.len()
        )));
    }
    let noises: Vec<&NoiseProfile> = if plan.noises.is_empty() {
        manifest.noise_profiles.iter().collect()
    } else {
        plan.noises
            .iter()
            .map(|name| {
                manifest
                    .noise_profiles
                    .iter()
                    .find(|n| &n.name == name)
                    .ok_or_else(|| Error::Experiment(format!("noise {name:?} is not in the manifest")))
            })
            .collect::<Result<_>>()?
    };
    if noises.is_empty() {
        return Err(Error::Experiment("manifest has no noise profiles".into()));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::Experiment(format!("thread pool: {e}")))?;
    let load_speech = |e: &CorpusEntry| -> Result<AudioBuffer> {
        let audio = read_wav(&e.speech_path)?;
        if audio.sample_rate() != manifest.sample_rate {
            return Err(Error::InvalidAudio(format!(
                "{}: {} Hz, manifest says {}",
                e.speech_path.display(),
                audio.sample_rate(),
                manifest.sample_rate
            )));
        }
        Ok(audio)
    };
    let speech: Vec<std::result::Result<AudioBuffer, String>> =
        manifest.entries.iter().map(|e| load_speech(e).map_err(|err| err.to_string())).collect();
    let grids: Vec<(&MaskFamily, Vec<MaskParams>)> = plan.mask_families.iter().map(|f| (f, f.grid())).collect();

    let mut report = ExperimentReport::default();
    let mut subgroup = 0;
    for noise_profile in &noises {
        let noise = read_wav(&noise_profile.noise_path)?;
        for &snr_db in &plan.snr_levels_db {
            info!("subgroup {} @ {snr_db} dB", noise_profile.name);
            let (train, test) = subgroup_split(plan.seed, subgroup, manifest.entries.len(), plan.split);
            for (set, phase) in [(&train, Phase::Train), (&test, Phase::Test)] {
                for &i in set {
                    report.split.push((noise_profile.name.clone(), snr_db, manifest.entries[i].id.clone(), phase));
                }
            }
            let prepare = |i: usize| -> std::result::Result<PreparedTrial, String> {
                let audio = speech[i].as_ref().map_err(Clone::clone)?;
                let key = TrialKey { id: manifest.entries[i].id.clone(), noise: noise_profile.name.clone(), snr_db };
                PreparedTrial::new(key, audio, &noise, trial_seed(plan.seed, subgroup, i), &opts.stft)
                    .map_err(|e| e.to_string())
            };
            let error_row = |phase, i: usize, mask: &str, error: String| TrialResult {
                phase,
                id: manifest.entries[i].id.clone(),
                noise: noise_profile.name.clone(),
                snr_db,
                mask: mask.to_string(),
                params: None,
                scores: None,
                error: Some(error),
            };

            // Training: exhaustive search per utterance and family.
            let trained: Vec<Vec<std::result::Result<(MaskParams, MetricScore), String>>> = pool.install(|| {
                train
                    .par_iter()
                    .map(|&i| match prepare(i) {
                        Err(e) => vec![Err(e); grids.len()],
                        Ok(trial) => grids
                            .iter()
                            .map(|(_, grid)| {
                                let (p, _) = best_params_per_signal(&trial, grid, plan.criterion, opts.quality)
                                    .map_err(|e| e.to_string())?;
                                trial.evaluate(&p, opts.quality).map(|s| (p, s)).map_err(|e| e.to_string())
                            })
                            .collect(),
                    })
                    .collect()
            });
            let mut mapped = Vec::new();
            for (f, (family, grid)) in grids.iter().enumerate() {
                let mut best = Vec::new();
                for (&i, rows) in train.iter().zip(&trained) {
                    match &rows[f] {
                        Ok((p, s)) => {
                            best.push(*p);
                            report.trials.push(TrialResult {
                                phase: Phase::Train,
                                id: manifest.entries[i].id.clone(),
                                noise: noise_profile.name.clone(),
                                snr_db,
                                mask: family.label().to_string(),
                                params: Some(*p),
                                scores: Some(*s),
                                error: None,
                            });
                        }
                        Err(e) => report.trials.push(error_row(Phase::Train, i, family.label(), e.clone())),
                    }
                }
                if best.is_empty() {
                    return Err(Error::Experiment(format!(
                        "no usable training utterance for {} @ {snr_db} dB",
                        noise_profile.name
                    )));
                }
                let params = median_map(&best, grid)?;
                report.params.push(ParamRow {
                    noise: noise_profile.name.clone(),
                    snr_db,
                    mask: family.label().to_string(),
                    params,
                    n: best.len(),
                });
                mapped.push((family.label(), params));
            }

            // Testing: baselines plus every tuned family.
            let masks: Vec<(&str, MaskParams)> = baselines().into_iter().chain(mapped).collect();
            let tested: Vec<Vec<std::result::Result<MetricScore, String>>> = pool.install(|| {
                test.par_iter()
                    .map(|&i| match prepare(i) {
                        Err(e) => vec![Err(e); masks.len()],
                        Ok(trial) => masks
                            .iter()
                            .map(|(_, p)| trial.evaluate(p, opts.quality).map_err(|e| e.to_string()))
                            .collect(),
                    })
                    .collect()
            });
            for (m, (label, params)) in masks.iter().enumerate() {
                let mut ncms = Vec::new();
                let mut qualities = Vec::new();
                for (&i, rows) in test.iter().zip(&tested) {
                    match &rows[m] {
                        Ok(s) => {
                            ncms.push(s.ncm);
                            qualities.extend(s.quality);
                            report.trials.push(TrialResult {
                                phase: Phase::Test,
                                id: manifest.entries[i].id.clone(),
                                noise: noise_profile.name.clone(),
                                snr_db,
                                mask: label.to_string(),
                                params: Some(*params),
                                scores: Some(*s),
                                error: None,
                            });
                        }
                        Err(e) => report.trials.push(error_row(Phase::Test, i, label, e.clone())),
                    }
                }
                if ncms.is_empty() {
                    return Err(Error::Experiment(format!(
                        "no usable test utterance for {} @ {snr_db} dB",
                        noise_profile.name
                    )));
                }
                let n = ncms.len();
                let mean_quality = (qualities.len() == n).then(|| qualities.iter().sum::<f64>() / n as f64);
                let mean_ncm = ncms.iter().sum::<f64>() / n as f64;
                ncms.sort_by(f64::total_cmp);
                report.scores.push(ScoreRow {
                    noise: noise_profile.name.clone(),
                    snr_db,
                    mask: label.to_string(),
                    params: *params,
                    mean_ncm,
                    mean_quality,
                    median_ncm: quantile(&ncms, 0.5),
                    q1: quantile(&ncms, 0.25),
                    q3: quantile(&ncms, 0.75),
                    n,
                });
            }
            subgroup += 1;
        }
    }
    if let Some(dir) = &opts.out_dir {
        write_report(&report, plan, &opts.stft, dir)?;
    }
    Ok(report)
}

impl ExperimentReport {
    pub fn params_csv(&self) -> String {
        let mut s = format!("{PARAMS_HEADER}\n");
        for r in &self.params {
            let (p1, p2) = r.params.display_params();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                csv_field(&r.noise),
                r.snr_db,
                r.mask,
                fmt_param(p1),
                fmt_param(p2),
                r.n
            );
        }
        s
    }

    pub fn scores_csv(&self) -> String {
        let mut s = format!("{SCORES_HEADER}\n");
        for r in &self.scores {
            let (p1, p2) = r.params.display_params();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{},{:.6},{:.6},{:.6},{}",
                csv_field(&r.noise),
                r.snr_db,
                r.mask,
                fmt_param(p1),
                fmt_param(p2),
                r.mean_ncm,
                fmt_opt(r.mean_quality),
                r.median_ncm,
                r.q1,
                r.q3,
                r.n
            );
        }
        s
    }

    pub fn trials_csv(&self) -> String {
        let mut s = format!("{TRIALS_HEADER}\n");
        for t in &self.trials {
            let (p1, p2) = t.params.map(|p| p.display_params()).unwrap_or((f64::NAN, f64::NAN));
            let phase = match t.phase {
                Phase::Train => "train",
                Phase::Test => "test",
            };
            let _ = writeln!(
                s,
                "{phase},{},{},{},{},{},{},{},{},{},{}",
                csv_field(&t.id),
                csv_field(&t.noise),
                t.snr_db,
                t.mask,
                fmt_param(p1),
                fmt_param(p2),
                fmt_opt(t.scores.map(|s| s.ncm)),
                fmt_opt(t.scores.and_then(|s| s.quality)),
                fmt_opt(t.scores.and_then(|s| s.d_p)),
                csv_field(t.error.as_deref().unwrap_or(""))
            );
        }
        s
    }

    pub fn split_csv(&self) -> String {
        let mut s = format!("{SPLIT_HEADER}\n");
        for (noise, snr, id, phase) in &self.split {
            let set = if *phase == Phase::Train { "train" } else { "test" };
            let _ = writeln!(s, "{},{snr},{},{set}", csv_field(noise), csv_field(id));
        }
        s
    }

    /// Box-plot summaries per (noise, SNR): one row per mask.
    pub fn boxplot_tsvs(&self) -> Vec<(String, String)> {
        let mut groups: BTreeMap<(String, String), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
        let mut order: Vec<(String, String)> = Vec::new();
        let mut mask_order: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
        for t in self.trials.iter().filter(|t| t.phase == Phase::Test) {
            let Some(scores) = t.scores else { continue };
            let key = (t.noise.clone(), format!("{}", t.snr_db));
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            let masks = mask_order.entry(key.clone()).or_default();
            if !masks.contains(&t.mask) {
                masks.push(t.mask.clone());
            }
            groups.entry(key).or_default().entry(t.mask.clone()).or_default().push(scores.ncm);
        }
        order
            .into_iter()
            .map(|key| {
                let mut s = String::from("mask\tmetric\tmin\tq1\tmedian\tq3\tmax\tn\n");
                for mask in &mask_order[&key] {
                    let mut v = groups[&key][mask].clone();
                    v.sort_by(f64::total_cmp);
                    let _ = writeln!(
                        s,
                        "{mask}\tncm\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                        v[0],
                        quantile(&v, 0.25),
                        quantile(&v, 0.5),
                        quantile(&v, 0.75),
                        v[v.len() - 1],
                        v.len()
                    );
                }
                (format!("boxplot_{}_{}dB.tsv", key.0, key.1), s)
            })
            .collect()
    }
}

fn write_report(report: &ExperimentReport, plan: &ExperimentPlan, stft: &StftConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("params.csv"), report.params_csv().as_bytes())?;
    write_atomic(&dir.join("scores.csv"), report.scores_csv().as_bytes())?;
    write_atomic(&dir.join("trials.csv"), report.trials_csv().as_bytes())?;
    write_atomic(&dir.join("split.csv"), report.split_csv().as_bytes())?;
    for (name, body) in report.boxplot_tsvs() {
        write_atomic(&dir.join(name), body.as_bytes())?;
    }
    let info = serde_json::json!({
        "plan": plan,
        "mixing": "noise scaled so that full-utterance mean-square speech power over noise power equals the target SNR",
        "snr_field": "oracle a-priori SNR from separately transformed speech and scaled noise",
        "median": "per-parameter lower median on the search scale, snapped to the nearest grid value (ties to the smaller)",
        "stft": {
            "window_len": stft.window_len,
            "fft_size": stft.fft_size,
            "hop": stft.hop,
        },
        "ncm": NcmConfig::default(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    let mut text = serde_json::to_string_pretty(&info)?;
    text.push('\n');
    write_atomic(&dir.join("run_info.json"), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn grid_shapes() {
        let cm = grid_cm();
        assert_eq!(cm.len(), 300);
        assert!(cm.contains(&MaskParams::Conformable { gamma: 1.0, mu: 1.0 }));
        assert!(cm.contains(&MaskParams::Conformable { gamma: 100.0, mu: 1.0 }));
        let g = grid_cm_gammas();
        assert_eq!((g[0], g[5], g[6], g[11]), (0.5, 1.0, 1.25, 100.0));
        // Log spacing: constant ratios inside each segment.
        for seg in [&g[..6], &g[6..]] {
            let r = seg[1] / seg[0];
            for w in seg.windows(2) {
                assert!((w[1] / w[0] - r).abs() < 1e-12);
            }
        }
        assert_eq!(cm[0], MaskParams::Conformable { gamma: 0.5, mu: 1e-6 });
        assert_eq!(cm[1], MaskParams::Conformable { gamma: 0.5, mu: db::to_linear(-55.0) });

        let pw = grid_pw();
        assert_eq!(pw.len(), 250);
        let b = grid_pw_betas();
        assert_eq!((b[0], b[5], b[6], b[9]), (0.2, 1.0, 1.25, 40.0));
        assert!(pw.contains(&MaskParams::ParametricWiener { beta: 0.2, eta: 1.0 }));
        // Both axes hit the Wiener point exactly.
        assert!(pw.contains(&MaskParams::ParametricWiener { beta: 1.0, eta: 1.0 }));
        let etas: Vec<f64> = pw[..25].iter().map(|p| p.display_params().1).collect();
        assert!((etas[14]).abs() < 1e-12);
        assert!((etas[0] + 35.0).abs() < 1e-9 && (etas[24] - 25.0).abs() < 1e-9);
    }

    fn unit_noise(seed: u64, len: usize) -> AudioBuffer {
        synth::white_noise(seed, len, 16_000).unwrap().scaled(10.0).unwrap()
    }

    #[test]
    fn mixing_power_and_determinism() {
        let s = synth::speech_like(1, 1.0, 16_000).unwrap();
        let n = unit_noise(2, 40_000);
        let m = mix_at_snr(&s, &n, 0.0, 9).unwrap();
        assert!((s.power() / m.scaled_noise.power() - 1.0).abs() < 1e-12);
        assert_eq!(m, mix_at_snr(&s, &n, 0.0, 9).unwrap());
        assert_ne!(m, mix_at_snr(&s, &n, 0.0, 10).unwrap());
        for snr in [-10.0, 5.0, 17.5] {
            let m = mix_at_snr(&s, &n, snr, 3).unwrap();
            assert!((10.0 * (s.power() / m.scaled_noise.power()).log10() - snr).abs() < 1e-9);
            let sum = s.add(&m.scaled_noise).unwrap();
            assert_eq!(m.noisy, sum);
        }
    }

    #[test]
    fn mixing_gain_for_unit_power_inputs() {
        let unit = |len: usize| {
            AudioBuffer::new((0..len).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(), 16_000).unwrap()
        };
        let m = mix_at_snr(&unit(1000), &unit(1000), 10.0, 0).unwrap();
        let g = m.scaled_noise.samples()[0].abs();
        assert!((g - 10f64.powf(-10.0 / 20.0)).abs() < 1e-12);
    }

    #[test]
    fn mixing_errors() {
        let s = synth::speech_like(1, 1.0, 16_000).unwrap();
        assert!(matches!(mix_at_snr(&s, &unit_noise(1, 100), 0.0, 0), Err(Error::InsufficientSamples { .. })));
        let silent = AudioBuffer::zeros(20_000, 16_000).unwrap();
        assert!(mix_at_snr(&s, &silent, 0.0, 0).is_err());
        assert!(mix_at_snr(&AudioBuffer::zeros(100, 16_000).unwrap(), &unit_noise(1, 200), 0.0, 0).is_err());
        assert!(mix_at_snr(&s, &unit_noise(1, 20_000), f64::NAN, 0).is_err());
    }

    #[test]
    fn median_map_examples() {
        let grid = grid_cm();
        let cm = |g: f64, mu_db: f64| MaskParams::Conformable { gamma: g, mu: db::to_linear(mu_db) };
        let same = vec![grid[37]; 5];
        assert_eq!(median_map(&same, &grid).unwrap(), grid[37]);

        let sets = [cm(1.0, 0.0), cm(1.0, 5.0), cm(1.0, 10.0)];
        let mapped = median_map(&sets, &grid).unwrap();
        assert_eq!(mapped.display_params().0, 1.0);
        assert!((mapped.display_params().1 - 5.0).abs() < 1e-9);

        // Lower median of an even count.
        let sets = [cm(1.0, 0.0), cm(1.0, 5.0), cm(1.0, 10.0), cm(1.0, 15.0)];
        assert!((median_map(&sets, &grid).unwrap().display_params().1 - 5.0).abs() < 1e-9);

        // 1.1 is nearer to 1 than to 1.25 in log scale.
        assert!((1.1f64).ln().abs() < (1.1f64 / 1.25).ln().abs());
        let mapped = median_map(&[cm(1.1, 0.0)], &grid).unwrap();
        assert_eq!(mapped.display_params().0, 1.0);

        // A dB tie snaps to the smaller threshold.
        let mapped = median_map(&[cm(1.0, 2.5)], &grid).unwrap();
        assert!((mapped.display_params().1 - 0.0).abs() < 1e-9);

        assert!(median_map(&[], &grid).is_err());
        assert!(median_map(&[MaskParams::Wiener], &grid).is_err());
        assert!(median_map(&[MaskParams::ParametricWiener { beta: 1.0, eta: 1.0 }], &grid).is_err());
    }

    #[test]
    fn snap_independent_of_candidate_order() {
        assert_eq!(snap(2.5, &[5.0, 0.0]), 0.0);
        assert_eq!(snap(2.5, &[0.0, 5.0]), 0.0);
        assert_eq!(snap(2.6, &[0.0, 5.0]), 5.0);
    }

    fn trial(snr_db: f64, seed: u64) -> PreparedTrial {
        let s = synth::speech_like(seed, 1.0, 16_000).unwrap();
        let n = synth::babble(seed + 100, 24_000, 16_000, 6).unwrap();
        let key = TrialKey { id: format!("u{seed}"), noise: "babble".into(), snr_db };
        PreparedTrial::new(key, &s, &n, seed, &StftConfig::default()).unwrap()
    }

    #[test]
    fn best_params_single_element_and_wiener_bound() {
        let t = trial(-10.0, 1);
        let one = [MaskParams::Conformable { gamma: 3.0, mu: 2.0 }];
        assert_eq!(best_params_per_signal(&t, &one, Criterion::Intelligibility, None).unwrap().0, one[0]);
        assert!(best_params_per_signal(&t, &[], Criterion::Intelligibility, None).is_err());

        let grid: Vec<MaskParams> = grid_cm().into_iter().step_by(7).chain([MaskParams::Wiener]).collect();
        let (_, best) = best_params_per_signal(&t, &grid, Criterion::Intelligibility, None).unwrap();
        let wf = t.evaluate(&MaskParams::Wiener, None).unwrap().ncm;
        assert!(best >= wf);
    }

    #[test]
    fn noise_free_tie_goes_to_first_all_pass() {
        let s = synth::speech_like(4, 1.0, 16_000).unwrap();
        let zero = AudioBuffer::zeros(s.len(), 16_000).unwrap();
        let key = TrialKey { id: "clean".into(), noise: "none".into(), snr_db: f64::INFINITY };
        let t = PreparedTrial::from_parts(key, s, &zero, &StftConfig::default()).unwrap();
        let grid =
            [MaskParams::Binary { mu0: 1.0 }, MaskParams::Wiener, MaskParams::Conformable { gamma: 1.0, mu: 1e-6 }];
        let (p, v) = best_params_per_signal(&t, &grid, Criterion::Intelligibility, None).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(p, grid[0]);
    }

    #[test]
    fn quality_criterion_uses_scorer() {
        let t = trial(0.0, 2);
        let grid = [MaskParams::Wiener, MaskParams::Binary { mu0: 1.0 }];
        assert!(best_params_per_signal(&t, &grid, Criterion::Quality, None).is_err());
        let mut m = BTreeMap::new();
        m.insert(t.key.quality_key(&grid[0]), 1.5);
        m.insert(t.key.quality_key(&grid[1]), 2.5);
        let q = CsvQuality::from_map(m);
        let (p, v) = best_params_per_signal(&t, &grid, Criterion::Quality, Some(&q)).unwrap();
        assert_eq!((p, v), (grid[1], 2.5));
        let (_, v) = best_params_per_signal(&t, &grid, Criterion::Composite, Some(&q)).unwrap();
        assert!(v > 0.25);
        assert_eq!(t.key.quality_key(&grid[0]), "u2/babble/0/wiener");
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let split = Split { train_count: 4, test_count: 3 };
        let (tr, te) = subgroup_split(5, 0, 10, split);
        assert_eq!((tr.len(), te.len()), (4, 3));
        assert!(tr.iter().all(|i| !te.contains(i)));
        assert_eq!((tr.clone(), te.clone()), subgroup_split(5, 0, 10, split));
        assert_ne!(tr, subgroup_split(5, 1, 10, split).0);
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&[7.0], 0.75), 7.0);
    }

    #[test]
    fn plan_json_defaults_and_validation() {
        let plan: ExperimentPlan = serde_json::from_str(r#"{"seed": 3, "mask_family": ["cm"]}"#).unwrap();
        assert_eq!(plan.seed, 3);
        assert_eq!(plan.snr_levels_db, vec![-10.0, 0.0, 5.0]);
        assert_eq!(plan.mask_families, vec![MaskFamily::Cm]);
        plan.validate().unwrap();
        let fixed: ExperimentPlan = serde_json::from_str(
            r#"{"mask_families": [{"fixed": [{"kind": "conformable", "gamma": 2.0, "mu": 1.0}]}]}"#,
        )
        .unwrap();
        fixed.validate().unwrap();
        let mixed =
            ExperimentPlan { mask_families: vec![MaskFamily::Fixed(vec![MaskParams::Wiener])], ..Default::default() };
        assert!(mixed.validate().is_err());
        let twice = ExperimentPlan { mask_families: vec![MaskFamily::Cm, MaskFamily::Cm], ..Default::default() };
        assert!(twice.validate().is_err());
    }
}
