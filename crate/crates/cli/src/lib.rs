//! `maskbench` command-line front end. [`run_with`] is the whole program minus
//! process setup, so tests can drive it in-process.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use serde::Deserialize;

use maskbench_core::cost::{verify_optimum, VerifyGrid};
use maskbench_core::db;
use maskbench_core::harness::{
    grid_cm, grid_pw, mix_at_snr, run_experiment, CorpusManifest, Criterion, CsvQuality, ExperimentPlan, QualityScorer,
    RunOptions,
};
use maskbench_core::io::{read_wav, write_atomic, write_wav};
use maskbench_core::masks::{apply_mask, build_mask, dd_snr, leading_noise_psd, oracle_snr, DEFAULT_SNR_FLOOR};
use maskbench_core::metrics::{composite_dp, ingest_external_quality, ncm, MetricScore};
use maskbench_core::morphology::{
    curve_dump, fit_cm_to_pw, fit_pw_to_cm, mask_rmse, write_curves_tsv, CurveSpec, FitOptions, DEFAULT_RANGE_DB,
    DEFAULT_STEP_DB,
};
use maskbench_core::spectral::{analyze, interior_snr_db, synthesize};
use maskbench_core::{synth, AudioBuffer, Error, MaskParams, StftConfig};

#[derive(Parser, Debug)]
#[command(name = "maskbench", version, about = "Conformable time-frequency masks for speech enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mask a noisy recording: oracle SNR when --clean and --noise are given,
    /// decision-directed otherwise.
    Enhance(EnhanceArgs),
    /// Mix speech with noise at a target SNR.
    Mix(MixArgs),
    /// Print a suppression curve as `xi_db<TAB>gain` rows.
    MaskCurve(MaskCurveArgs),
    /// Curve distances and cross-family fits.
    #[command(subcommand)]
    Morphology(MorphologyCommand),
    /// Compare the closed-form optimum with a numeric minimizer of the cost.
    VerifyOptimum(VerifyArgs),
    /// Objective scores.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// List a parameter grid.
    Grid(GridArgs),
    /// Train/test experiment over a corpus.
    Experiment(ExperimentArgs),
    /// STFT analysis/synthesis round-trip check.
    StftCheck(StftCheckArgs),
}

impl Command {
    fn mask_args(&self) -> Option<&MaskArgs> {
        match self {
            Command::Enhance(a) => Some(&a.mask),
            Command::MaskCurve(a) => Some(&a.mask),
            _ => None,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum MaskKindArg {
    Binary,
    Wiener,
    Cwiener,
    Pw,
    Cm,
}

/// Mask selection shared by several verbs. Ratio flags accept a `dB` suffix.
#[derive(Args, Debug, Clone)]
struct MaskArgs {
    #[arg(long, value_enum)]
    mask: MaskKindArg,
    /// CM threshold (ratio, or dB with suffix).
    #[arg(long, allow_hyphen_values = true)]
    mu: Option<String>,
    /// CM slope.
    #[arg(long)]
    gamma: Option<f64>,
    /// PW exponent.
    #[arg(long)]
    beta: Option<f64>,
    /// PW threshold (ratio, or dB with suffix).
    #[arg(long, allow_hyphen_values = true)]
    eta: Option<String>,
    /// Binary threshold (ratio, or dB with suffix).
    #[arg(long, allow_hyphen_values = true)]
    mu0: Option<String>,
}

impl MaskArgs {
    fn params(&self) -> Result<MaskParams, Error> {
        let ratio = |v: &Option<String>| v.as_deref().map(db::parse_ratio).transpose();
        let unused = |name: &str, present: bool| -> Result<(), Error> {
            if present {
                let kind = self.mask.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
                Err(Error::InvalidArgument(format!("--{name} does not apply to --mask {kind}")))
            } else {
                Ok(())
            }
        };
        let (cm, pw, bm) =
            (self.mu.is_some() || self.gamma.is_some(), self.beta.is_some() || self.eta.is_some(), self.mu0.is_some());
        match self.mask {
            MaskKindArg::Binary => {
                unused("mu/gamma", cm)?;
                unused("beta/eta", pw)?;
                MaskParams::binary(ratio(&self.mu0)?.unwrap_or(1.0))
            }
            MaskKindArg::Wiener | MaskKindArg::Cwiener => {
                unused("mu/gamma", cm)?;
                unused("beta/eta", pw)?;
                unused("mu0", bm)?;
                Ok(if self.mask == MaskKindArg::Wiener { MaskParams::Wiener } else { MaskParams::ConstrainedWiener })
            }
            MaskKindArg::Pw => {
                unused("mu/gamma", cm)?;
                unused("mu0", bm)?;
                MaskParams::parametric_wiener(self.beta.unwrap_or(1.0), ratio(&self.eta)?.unwrap_or(1.0))
            }
            MaskKindArg::Cm => {
                unused("beta/eta", pw)?;
                unused("mu0", bm)?;
                MaskParams::conformable(self.gamma.unwrap_or(1.0), ratio(&self.mu)?.unwrap_or(1.0))
            }
        }
    }
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    #[command(flatten)]
    mask: MaskArgs,
    /// Noisy input; defaults to clean + noise when both are given.
    #[arg(long)]
    noisy: Option<PathBuf>,
    #[arg(long, requires = "noise")]
    clean: Option<PathBuf>,
    /// The additive noise signal (oracle mode).
    #[arg(long, requires = "clean")]
    noise: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the gain mask as TSV (rows = bins).
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Leading frames used to estimate the noise spectrum (blind mode).
    #[arg(long, default_value_t = 6)]
    noise_frames: usize,
    /// Decision-directed smoothing factor (blind mode).
    #[arg(long, default_value_t = 0.98)]
    dd_alpha: f64,
}

#[derive(Args, Debug)]
struct MixArgs {
    #[arg(long)]
    speech: PathBuf,
    #[arg(long)]
    noise: PathBuf,
    /// Target SNR in dB.
    #[arg(long, allow_hyphen_values = true)]
    snr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the scaled noise segment.
    #[arg(long)]
    noise_out: Option<PathBuf>,
}

/// `lo:hi:step` in dB.
#[derive(Debug, Clone, Copy)]
struct DbRange {
    lo: f64,
    hi: f64,
    step: f64,
}

impl std::str::FromStr for DbRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let [lo, hi, step] = parts.as_slice() else {
            return Err(format!("expected lo:hi:step, got {s:?}"));
        };
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("{v:?} is not a number"));
        Ok(DbRange { lo: num(lo)?, hi: num(hi)?, step: num(step)? })
    }
}

impl Default for DbRange {
    fn default() -> Self {
        Self { lo: DEFAULT_RANGE_DB.0, hi: DEFAULT_RANGE_DB.1, step: DEFAULT_STEP_DB }
    }
}

#[derive(Args, Debug)]
struct MaskCurveArgs {
    #[command(flatten)]
    mask: MaskArgs,
    #[arg(long, default_value = "-60:60:1", allow_hyphen_values = true)]
    range: DbRange,
    /// Print an `xi_db<TAB>gain` header line first.
    #[arg(long)]
    header: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum MorphologyCommand {
    /// RMSE between two curves, e.g. --a cm:gamma=0.5,mu=5dB --b wiener.
    Rmse {
        #[arg(long, allow_hyphen_values = true)]
        a: MaskParams,
        #[arg(long, allow_hyphen_values = true)]
        b: MaskParams,
        #[arg(long, allow_hyphen_values = true)]
        range: Option<DbRange>,
    },
    /// Fit the other family to a CM or PW target.
    Fit {
        #[arg(long, allow_hyphen_values = true)]
        target: MaskParams,
        /// Single start from the given `(first, second_dB)` pair.
        #[arg(long, value_delimiter = ',', num_args = 2, allow_hyphen_values = true)]
        init: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0x5eed)]
        seed: u64,
    },
    /// Tabulate several curves side by side.
    Curves {
        #[arg(long = "mask", required = true, allow_hyphen_values = true)]
        masks: Vec<MaskParams>,
        #[arg(long, default_value = "-60:60:0.5", allow_hyphen_values = true)]
        range: DbRange,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum MetricsCommand {
    /// NCM of a processed file against its clean reference.
    Ncm {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        proc: PathBuf,
    },
    /// Score a JSON list of `{id, clean, processed}` as CSV `id,ncm[,quality,d_p]`.
    Batch {
        #[arg(long)]
        manifest: PathBuf,
        /// `id,score` quality scores keyed by the same ids.
        #[arg(long)]
        quality_csv: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Composite distance `ncm^2 + (quality/5)^2`.
    Dp {
        #[arg(long)]
        ncm: f64,
        #[arg(long)]
        quality: f64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum GridKind {
    Cm,
    Pw,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(value_enum)]
    kind: GridKind,
    /// Accepted for interface parity; listing is single-threaded.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the plan seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the plan criterion.
    #[arg(long)]
    criterion: Option<String>,
    #[arg(long)]
    quality_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct StftCheckArgs {
    /// WAV to round-trip; a seeded synthetic clip when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    secs: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minimum interior reconstruction SNR in dB.
    #[arg(long, default_value_t = 60.0)]
    min_snr: f64,
}

/// Runs the CLI. Returns the process exit code: 0 on success, 2 on usage
/// errors, 1 on pipeline errors.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    // Flag combinations are checked before any I/O.
    if let Some(mask) = cli.command.mask_args() {
        if let Err(e) = mask.params() {
            let _ = writeln!(err, "error: {e}\n\nFor more information, try '--help'.");
            return 2;
        }
    }
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn load_wav(path: &Path) -> Result<AudioBuffer, Error> {
    let audio = read_wav(path)?;
    if audio.sample_rate() != 16_000 {
        warn!("{} is {} Hz; the default STFT configuration assumes 16 kHz", path.display(), audio.sample_rate());
    }
    Ok(audio)
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32, Error> {
    match command {
        Command::Enhance(a) => enhance(a, out),
        Command::Mix(a) => {
            let speech = load_wav(&a.speech)?;
            let noise = load_wav(&a.noise)?;
            let mix = mix_at_snr(&speech, &noise, a.snr, a.seed)?;
            write_wav(&a.out, &mix.noisy)?;
            if let Some(p) = &a.noise_out {
                write_wav(p, &mix.scaled_noise)?;
            }
            Ok(0)
        }
        Command::MaskCurve(a) => {
            let params = a.mask.params()?;
            let spec = CurveSpec::with_grid(params, a.range.lo, a.range.hi, a.range.step);
            let mut text = String::new();
            if a.header {
                text.push_str("xi_db\tgain\n");
            }
            for (d, g) in curve_dump(&spec, a.range.step)? {
                let _ = writeln!(text, "{d}\t{g}");
            }
            emit(out, a.out.as_deref(), &text)?;
            Ok(0)
        }
        Command::Morphology(m) => morphology(m, out),
        Command::VerifyOptimum(a) => {
            let report = verify_optimum(&VerifyGrid::default(), a.tol)?;
            let mut csv = Vec::new();
            report.write_csv(&mut csv).map_err(|e| Error::io("<csv>", e))?;
            emit(out, a.out.as_deref(), &String::from_utf8_lossy(&csv))?;
            if report.all_pass() {
                Ok(0)
            } else {
                warn!("{} of {} tuples exceed tol {}", report.failures(), report.rows.len(), a.tol);
                Ok(1)
            }
        }
        Command::Metrics(m) => metrics(m, out),
        Command::Grid(a) => {
            let _ = a.jobs;
            let (grid, names) = match a.kind {
                GridKind::Cm => (grid_cm(), ("gamma", "mu_db")),
                GridKind::Pw => (grid_pw(), ("beta", "eta_db")),
            };
            let mut text = format!("index\t{}\t{}\n", names.0, names.1);
            for (i, p) in grid.iter().enumerate() {
                let (p1, p2) = p.display_params();
                let _ = writeln!(text, "{i}\t{p1}\t{p2}");
            }
            emit(out, None, &text)?;
            Ok(0)
        }
        Command::Experiment(a) => {
            let mut plan = ExperimentPlan::load(&a.plan)?;
            if let Some(seed) = a.seed {
                plan.seed = seed;
            }
            if let Some(c) = &a.criterion {
                plan.criterion = c.parse::<Criterion>()?;
            }
            let manifest = CorpusManifest::load(&a.manifest)?;
            let quality = a.quality_csv.as_deref().map(CsvQuality::load).transpose()?;
            let opts = RunOptions {
                out_dir: Some(a.out.clone()),
                quality: quality.as_ref().map(|q| q as &dyn QualityScorer),
                jobs: a.jobs,
                stft: StftConfig::default(),
            };
            let report = run_experiment(&plan, &manifest, &opts)?;
            let errors = report.trials.iter().filter(|t| t.error.is_some()).count();
            let _ = writeln!(
                out,
                "wrote {} ({} parameter rows, {} score rows, {} trial rows, {errors} errors)",
                a.out.display(),
                report.params.len(),
                report.scores.len(),
                report.trials.len()
            );
            Ok(0)
        }
        Command::StftCheck(a) => {
            let audio = match &a.input {
                Some(p) => load_wav(p)?,
                None => synth::speech_like(a.seed, a.secs, 16_000)?,
            };
            let cfg = StftConfig::default();
            let back = synthesize(&analyze(&audio, &cfg)?)?;
            let snr = interior_snr_db(audio.samples(), back.samples(), cfg.window_len);
            let _ = writeln!(out, "{snr}");
            Ok(if snr >= a.min_snr && back.len() == audio.len() { 0 } else { 1 })
        }
    }
}

fn enhance(a: EnhanceArgs, out: &mut dyn Write) -> Result<i32, Error> {
    let params = a.mask.params()?;
    let cfg = StftConfig::default();
    let oracle = match (&a.clean, &a.noise) {
        (Some(c), Some(n)) => Some((load_wav(c)?, load_wav(n)?)),
        _ => None,
    };
    let noisy = match (&a.noisy, &oracle) {
        (Some(p), _) => load_wav(p)?,
        (None, Some((clean, noise))) => clean.add(noise)?,
        (None, None) => return Err(Error::InvalidArgument("--noisy is required without --clean/--noise".into())),
    };
    let y = analyze(&noisy, &cfg)?;
    let snr = match &oracle {
        Some((clean, noise)) => oracle_snr(&analyze(clean, &cfg)?, &analyze(noise, &cfg)?, DEFAULT_SNR_FLOOR)?,
        None => dd_snr(&y, &leading_noise_psd(&y, a.noise_frames)?, a.dd_alpha, DEFAULT_SNR_FLOOR)?,
    };
    let mask = build_mask(&params, &snr);
    let enhanced = synthesize(&apply_mask(&mask, &y)?)?;
    write_wav(&a.out, &enhanced)?;
    if let Some(p) = &a.mask_out {
        let mut tsv = Vec::new();
        mask.write_tsv(&mut tsv).map_err(|e| Error::io(p, e))?;
        write_atomic(p, &tsv)?;
    }
    let _ = writeln!(out, "{params}: {} samples -> {}", enhanced.len(), a.out.display());
    Ok(0)
}

fn morphology(m: MorphologyCommand, out: &mut dyn Write) -> Result<i32, Error> {
    match m {
        MorphologyCommand::Rmse { a, b, range } => {
            let r = range.unwrap_or_default();
            let v =
                mask_rmse(&CurveSpec::with_grid(a, r.lo, r.hi, r.step), &CurveSpec::with_grid(b, r.lo, r.hi, r.step))?;
            let _ = writeln!(out, "{v}");
        }
        MorphologyCommand::Fit { target, init, seed } => {
            let mut opts = FitOptions { seed, ..Default::default() };
            if let Some(v) = init {
                opts.init = Some((v[0], db::to_linear(v[1])));
                opts.multi_start = false;
            }
            let fit = match target {
                MaskParams::Conformable { .. } => fit_pw_to_cm(&target, &opts)?,
                MaskParams::ParametricWiener { .. } => fit_cm_to_pw(&target, &opts)?,
                other => return Err(Error::InvalidArgument(format!("fit target must be cm or pw, got {other}"))),
            };
            let _ = writeln!(
                out,
                "{}\trmse={}\tconverged={}\titerations={}",
                fit.params, fit.rmse, fit.converged, fit.iterations
            );
        }
        MorphologyCommand::Curves { masks, range, out: path } => {
            let mut tsv = Vec::new();
            write_curves_tsv(&mut tsv, &masks, range.lo, range.hi, range.step)?;
            emit(out, path.as_deref(), &String::from_utf8_lossy(&tsv))?;
        }
    }
    Ok(0)
}

#[derive(Deserialize)]
struct BatchEntry {
    id: String,
    clean: PathBuf,
    processed: PathBuf,
}

fn metrics(m: MetricsCommand, out: &mut dyn Write) -> Result<i32, Error> {
    match m {
        MetricsCommand::Ncm { clean, proc } => {
            let v = ncm(&load_wav(&clean)?, &load_wav(&proc)?)?;
            let _ = writeln!(out, "{v}");
        }
        MetricsCommand::Dp { ncm, quality } => {
            let _ = writeln!(out, "{}", composite_dp(ncm, quality)?);
        }
        MetricsCommand::Batch { manifest, quality_csv, out: path, jobs } => {
            let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            let base = manifest.parent().unwrap_or(Path::new("")).to_path_buf();
            let entries: Vec<BatchEntry> = serde_json::from_str(&text)?;
            let quality = quality_csv.as_deref().map(ingest_external_quality).transpose()?;
            let pool = rayon_pool(jobs)?;
            let scores: Vec<Result<MetricScore, Error>> = pool.install(|| {
                use rayon::prelude::*;
                entries
                    .par_iter()
                    .map(|e| {
                        let v = ncm(&load_wav(&base.join(&e.clean))?, &load_wav(&base.join(&e.processed))?)?;
                        MetricScore::new(v, quality.as_ref().and_then(|q| q.get(&e.id).copied()))
                    })
                    .collect()
            });
            let mut csv = String::from(if quality.is_some() { "id,ncm,quality,d_p\n" } else { "id,ncm\n" });
            for (e, s) in entries.iter().zip(scores) {
                let s = s.map_err(|err| Error::Experiment(format!("{}: {err}", e.id)))?;
                match &quality {
                    Some(_) => {
                        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                        let _ = writeln!(csv, "{},{},{},{}", e.id, s.ncm, opt(s.quality), opt(s.d_p));
                    }
                    None => {
                        let _ = writeln!(csv, "{},{}", e.id, s.ncm);
                    }
                }
            }
            emit(out, path.as_deref(), &csv)?;
        }
    }
    Ok(0)
}

fn rayon_pool(jobs: usize) -> Result<rayon::ThreadPool, Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}
