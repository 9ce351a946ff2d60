//! Shape comparison of suppression curves.
//!
//! Curves are sampled on a uniform SNR grid in dB and compared with
//! `sqrt(integral (G1 - G2)^2 d xi_dB)` evaluated by the trapezoid rule, so
//! RMSE values carry units of sqrt(dB).

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::db;
use crate::error::{Error, Result};
use crate::masks::MaskParams;
use crate::optim::{nelder_mead, NelderMeadOptions};

pub const DEFAULT_RANGE_DB: (f64, f64) = (-60.0, 60.0);
pub const DEFAULT_STEP_DB: f64 = 0.001;

/// Formats with nine significant digits.
pub fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// A suppression curve sampled over `[lo_db, hi_db]` every `step_db`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveSpec {
    pub params: MaskParams,
    pub lo_db: f64,
    pub hi_db: f64,
    pub step_db: f64,
}

impl CurveSpec {
    /// -60..60 dB in 0.001 dB steps.
    pub fn new(params: MaskParams) -> Self {
        Self { params, lo_db: DEFAULT_RANGE_DB.0, hi_db: DEFAULT_RANGE_DB.1, step_db: DEFAULT_STEP_DB }
    }

    pub fn with_grid(params: MaskParams, lo_db: f64, hi_db: f64, step_db: f64) -> Self {
        Self { params, lo_db, hi_db, step_db }
    }

    pub fn grid(&self) -> Result<DbGrid> {
        DbGrid::new(self.lo_db, self.hi_db, self.step_db)
    }
}

/// Uniform dB grid with its linear SNR values cached.
#[derive(Debug, Clone, PartialEq)]
pub struct DbGrid {
    lo_db: f64,
    hi_db: f64,
    step_db: f64,
    db: Vec<f64>,
    xi: Vec<f64>,
}

impl DbGrid {
    pub fn new(lo_db: f64, hi_db: f64, step_db: f64) -> Result<Self> {
        let intervals = check_grid(lo_db, hi_db, step_db)?;
        let db: Vec<f64> = (0..=intervals).map(|i| lo_db + (hi_db - lo_db) * i as f64 / intervals as f64).collect();
        let xi = db.iter().map(|&d| db::to_linear(d)).collect();
        Ok(Self { lo_db, hi_db, step_db, db, xi })
    }

    pub fn len(&self) -> usize {
        self.db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.db.is_empty()
    }

    pub fn db_values(&self) -> &[f64] {
        &self.db
    }

    pub fn gains(&self, params: &MaskParams) -> Vec<f64> {
        self.xi.iter().map(|&x| params.gain(x)).collect()
    }

    fn spacing(&self) -> f64 {
        (self.hi_db - self.lo_db) / (self.len() - 1) as f64
    }

    /// Trapezoid-rule RMSE of `params` against precomputed `target` gains.
    pub fn rmse_against(&self, params: &MaskParams, target: &[f64]) -> f64 {
        debug_assert_eq!(target.len(), self.xi.len());
        let n = self.xi.len();
        let mut acc = 0.0;
        for (i, (&x, &t)) in self.xi.iter().zip(target).enumerate() {
            let d = params.gain(x) - t;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            acc += w * d * d;
        }
        (acc * self.spacing()).sqrt()
    }

    fn same_as(&self, lo: f64, hi: f64, step: f64) -> bool {
        self.lo_db == lo && self.hi_db == hi && self.step_db == step
    }
}

fn check_grid(lo: f64, hi: f64, step: f64) -> Result<usize> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidArgument(format!("need lo < hi, got [{lo}, {hi}]")));
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step}")));
    }
    let ratio = (hi - lo) / step;
    let intervals = ratio.round();
    if intervals < 1.0 || (ratio - intervals).abs() > 1e-6 * intervals.max(1.0) {
        return Err(Error::InvalidArgument(format!("step {step} does not divide [{lo}, {hi}] into whole intervals")));
    }
    Ok(intervals as usize)
}

/// RMSE between two curves sampled on the same grid.
pub fn mask_rmse(a: &CurveSpec, b: &CurveSpec) -> Result<f64> {
    if a.lo_db != b.lo_db || a.hi_db != b.hi_db || a.step_db != b.step_db {
        return Err(Error::InvalidArgument(format!(
            "grid mismatch: [{}, {}] / {} vs [{}, {}] / {}",
            a.lo_db, a.hi_db, a.step_db, b.lo_db, b.hi_db, b.step_db
        )));
    }
    let grid = a.grid()?;
    let target = grid.gains(&b.params);
    Ok(grid.rmse_against(&a.params, &target))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Range and spacing used while searching.
    pub lo_db: f64,
    pub hi_db: f64,
    pub fit_step_db: f64,
    /// Spacing used for the reported RMSE of the winning parameters.
    pub report_step_db: f64,
    pub nelder_mead: NelderMeadOptions,
    /// Starting point in the family's natural parameters (`(beta, eta)` or
    /// `(gamma, mu)`, linear). Added to the starts when given.
    pub init: Option<(f64, f64)>,
    /// When false only one start is used: `init` if given, else the Wiener point.
    pub multi_start: bool,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lo_db: DEFAULT_RANGE_DB.0,
            hi_db: DEFAULT_RANGE_DB.1,
            fit_step_db: 0.01,
            report_step_db: DEFAULT_STEP_DB,
            nelder_mead: NelderMeadOptions::default(),
            init: None,
            multi_start: true,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: MaskParams,
    /// RMSE on the report grid.
    pub rmse: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Clone, Copy)]
enum Family {
    Pw,
    Cm,
}

impl Family {
    /// Search coordinates are `(ln first, second_dB)`.
    fn params(self, coords: &[f64]) -> MaskParams {
        let first = coords[0].exp();
        let second = db::to_linear(coords[1]);
        match self {
            Family::Pw => MaskParams::ParametricWiener { beta: first, eta: second },
            // Conformable masks are only defined for gamma >= 1/2.
            Family::Cm => MaskParams::Conformable { gamma: first.max(0.5), mu: second },
        }
    }
}

/// Fits a parametric Wiener curve to a conformable target.
pub fn fit_pw_to_cm(target: &MaskParams, opts: &FitOptions) -> Result<FitResult> {
    let (gamma, mu) = match *target {
        MaskParams::Conformable { gamma, mu } => (gamma, mu),
        other => return Err(Error::InvalidMask(format!("fit target must be CM, got {other}"))),
    };
    target.validate()?;
    let beta = pw_beta_for_slope(gamma);
    let c = 2f64.powf(-1.0 / beta);
    let heuristic = [beta.ln(), db::to_db(mu * (1.0 - c) / c)];
    fit(Family::Pw, target, heuristic, opts)
}

/// Fits a conformable curve to a parametric Wiener target.
pub fn fit_cm_to_pw(target: &MaskParams, opts: &FitOptions) -> Result<FitResult> {
    let (beta, eta) = match *target {
        MaskParams::ParametricWiener { beta, eta } => (beta, eta),
        other => return Err(Error::InvalidMask(format!("fit target must be PW, got {other}"))),
    };
    target.validate()?;
    // Match the half-gain point and the slope there.
    let c = 2f64.powf(-1.0 / beta);
    let gamma = (2.0 * beta * (1.0 - c)).max(0.5);
    let heuristic = [gamma.ln(), db::to_db(eta * c / (1.0 - c))];
    fit(Family::Cm, target, heuristic, opts)
}

/// PW exponent whose slope at the half-gain point matches a CM of slope
/// `gamma`: solves `beta (1 - 2^(-1/beta)) = gamma / 2`. The left side is
/// bounded by ln 2, so steep targets get a large exponent instead.
fn pw_beta_for_slope(gamma: f64) -> f64 {
    let target = 0.5 * gamma;
    let slope = |b: f64| b * (1.0 - 2f64.powf(-1.0 / b));
    let (mut lo, mut hi) = (1e-3f64, 1e4f64);
    if slope(hi) <= target {
        return hi;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if slope(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

fn fit(family: Family, target: &MaskParams, heuristic: [f64; 2], opts: &FitOptions) -> Result<FitResult> {
    let grid = DbGrid::new(opts.lo_db, opts.hi_db, opts.fit_step_db)?;
    let target_gains = grid.gains(target);
    let objective = |x: &[f64]| grid.rmse_against(&family.params(x), &target_gains);

    let to_coords = |(a, b): (f64, f64)| [a.ln(), db::to_db(b)];
    let wiener = [0.0, 0.0];
    let mut starts: Vec<[f64; 2]> = Vec::new();
    if opts.multi_start {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let random = [heuristic[0] + rng.random_range(-2.0..2.0), heuristic[1] + rng.random_range(-15.0..15.0)];
        starts.extend([wiener, heuristic, random]);
        if let Some(init) = opts.init {
            starts.push(to_coords(init));
        }
    } else {
        starts.push(opts.init.map(to_coords).unwrap_or(wiener));
    }

    let step = [0.25, 2.5];
    let best = starts
        .iter()
        .map(|s| nelder_mead(objective, s, &step, &opts.nelder_mead))
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .expect("at least one start");
    let params = family.params(&best.x);

    let rmse = if grid.same_as(opts.lo_db, opts.hi_db, opts.report_step_db) {
        best.value
    } else {
        let report = DbGrid::new(opts.lo_db, opts.hi_db, opts.report_step_db)?;
        report.rmse_against(&params, &report.gains(target))
    };
    Ok(FitResult { params, rmse, converged: best.converged, iterations: best.iterations })
}

/// Samples a curve every `coarse_step_db` over its range.
pub fn curve_dump(spec: &CurveSpec, coarse_step_db: f64) -> Result<Vec<(f64, f64)>> {
    let grid = DbGrid::new(spec.lo_db, spec.hi_db, coarse_step_db)?;
    Ok(grid.db.iter().zip(grid.gains(&spec.params)).map(|(&d, g)| (d, g)).collect())
}

/// TSV with an `xi_db` column followed by one gain column per curve.
pub fn write_curves_tsv<W: Write>(
    mut out: W,
    curves: &[MaskParams],
    lo_db: f64,
    hi_db: f64,
    step_db: f64,
) -> Result<()> {
    let grid = DbGrid::new(lo_db, hi_db, step_db)?;
    let columns: Vec<Vec<f64>> = curves.iter().map(|p| grid.gains(p)).collect();
    let io = |e| Error::io("<curves>", e);
    let mut header = vec!["xi_db".to_string()];
    header.extend(curves.iter().map(|p| p.to_string()));
    writeln!(out, "{}", header.join("\t")).map_err(io)?;
    for (i, d) in grid.db.iter().enumerate() {
        let mut row = vec![format!("{d}")];
        row.extend(columns.iter().map(|c| sig9(c[i])));
        writeln!(out, "{}", row.join("\t")).map_err(io)?;
    }
    Ok(())
}
