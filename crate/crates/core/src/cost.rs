//! The distortion trade-off cost `J = d_x^alpha + rho * d_v^alpha` and a numeric
//! check that the conformable mask minimizes it.
//!
//! `argmin_numeric` never looks at the closed form: it minimizes the cost with
//! golden-section search, so [`verify_optimum`] compares two independent routes.

use std::io::Write;

use log::warn;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::db;
use crate::error::{Error, Result};
use crate::masks::cm_from_cost;
use crate::optim::golden_section;

/// Bracket width at which the golden-section search stops.
pub const GOLDEN_BRACKET_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    rho: f64,
    alpha: f64,
}

impl CostParams {
    pub fn new(rho: f64, alpha: f64) -> Result<Self> {
        let p = Self { rho, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::InvalidCost(format!("rho must be finite and > 0, got {}", self.rho)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidCost(format!("alpha must be finite, got {}", self.alpha)));
        }
        if self.alpha <= 0.5 {
            return Err(Error::CostNotConvex(self.alpha));
        }
        Ok(())
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Speech-distortion and residual-noise powers of a gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistortionPair {
    pub d_x: f64,
    pub d_v: f64,
}

pub fn distortions(h: f64, sigma_x2: f64, sigma_v2: f64) -> DistortionPair {
    DistortionPair { d_x: (h - 1.0).powi(2) * sigma_x2, d_v: h * h * sigma_v2 }
}

pub fn cost(h: f64, sigma_x2: f64, sigma_v2: f64, params: &CostParams) -> f64 {
    let d = distortions(h, sigma_x2, sigma_v2);
    d.d_x.powf(params.alpha) + params.rho * d.d_v.powf(params.alpha)
}

/// Cost for a complex gain: `|h - 1|^2 sigma_x2` and `|h|^2 sigma_v2` raised to alpha.
pub fn cost_complex(h: Complex64, sigma_x2: f64, sigma_v2: f64, params: &CostParams) -> f64 {
    let d_x = (h - 1.0).norm_sqr() * sigma_x2;
    let d_v = h.norm_sqr() * sigma_v2;
    d_x.powf(params.alpha) + params.rho * d_v.powf(params.alpha)
}

/// Real gain in `[0, 1]` minimizing [`cost`], found by golden-section search.
///
/// Both powers are divided by their maximum first; the cost scales by a
/// constant factor and the minimizer is unchanged, but `alpha`-th powers of
/// large or tiny powers no longer under/overflow.
pub fn argmin_numeric(sigma_x2: f64, sigma_v2: f64, params: &CostParams, tol: f64) -> Result<f64> {
    params.validate()?;
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("tol must be > 0, got {tol}")));
    }
    if !(sigma_x2.is_finite() && sigma_v2.is_finite() && sigma_x2 >= 0.0 && sigma_v2 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "powers must be finite and non-negative, got {sigma_x2}, {sigma_v2}"
        )));
    }
    if sigma_x2 == 0.0 && sigma_v2 == 0.0 {
        warn!("degenerate bin: both powers are zero, returning unit gain");
        return Ok(1.0);
    }
    if sigma_x2 == 0.0 || sigma_v2 == 0.0 {
        return Err(Error::InvalidArgument(format!("powers must be positive, got {sigma_x2}, {sigma_v2}")));
    }
    let scale = sigma_x2.max(sigma_v2);
    let (sx, sv) = (sigma_x2 / scale, sigma_v2 / scale);
    let bracket = tol.min(GOLDEN_BRACKET_TOL);
    Ok(golden_section(|h| cost(h, sx, sv, params), 0.0, 1.0, bracket))
}

/// Exhaustive search of the complex gain plane (`|h| <= radius`) on a polar
/// grid. Returns the best gain found.
pub fn complex_scan(
    sigma_x2: f64,
    sigma_v2: f64,
    params: &CostParams,
    radius: f64,
    magnitude_steps: usize,
    phase_steps: usize,
) -> Complex64 {
    let origin = Complex64::new(0.0, 0.0);
    let mut best = (origin, cost_complex(origin, sigma_x2, sigma_v2, params));
    for m in 1..=magnitude_steps {
        let r = radius * m as f64 / magnitude_steps as f64;
        for p in 0..phase_steps {
            let phi = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * p as f64 / phase_steps as f64;
            let h = Complex64::from_polar(r, phi);
            let c = cost_complex(h, sigma_x2, sigma_v2, params);
            if c < best.1 {
                best = (h, c);
            }
        }
    }
    best.0
}

/// Tuples for [`verify_optimum`].
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyGrid {
    pub xi_db: Vec<f64>,
    pub rho: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Default for VerifyGrid {
    /// xi in -30..30 dB step 3, rho in {0.1, 1, 10}, alpha in {0.6, 1, 2, 5, 20}.
    fn default() -> Self {
        Self {
            xi_db: (0..=20).map(|i| -30.0 + 3.0 * i as f64).collect(),
            rho: vec![0.1, 1.0, 10.0],
            alpha: vec![0.6, 1.0, 2.0, 5.0, 20.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyRow {
    pub xi_db: f64,
    pub rho: f64,
    pub alpha: f64,
    pub h_closed: f64,
    pub h_numeric: f64,
    pub abs_dev: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
    pub tol: f64,
}

impl VerifyReport {
    pub fn max_deviation(&self) -> f64 {
        self.rows.iter().map(|r| r.abs_dev).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.pass).count()
    }

    pub fn all_pass(&self) -> bool {
        self.failures() == 0
    }

    /// CSV with columns `xi_db,rho,alpha,h_closed,h_numeric,abs_dev,pass`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "xi_db,rho,alpha,h_closed,h_numeric,abs_dev,pass")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.15},{:.15},{:.3e},{}",
                r.xi_db, r.rho, r.alpha, r.h_closed, r.h_numeric, r.abs_dev, r.pass
            )?;
        }
        Ok(())
    }
}

/// Compares the closed-form conformable gain with the numeric minimizer of
/// the cost on every `(xi, rho, alpha)` tuple. Failures are reported, not
/// returned as errors; invalid grid values are.
pub fn verify_optimum(grid: &VerifyGrid, tol: f64) -> Result<VerifyReport> {
    let mut tuples = Vec::new();
    for &xi_db in &grid.xi_db {
        for &rho in &grid.rho {
            for &alpha in &grid.alpha {
                tuples.push((xi_db, CostParams::new(rho, alpha)?));
            }
        }
    }
    let rows = tuples
        .par_iter()
        .map(|&(xi_db, params)| {
            let xi = db::to_linear(xi_db);
            let h_closed = cm_from_cost(&params)?.gain(xi);
            let h_numeric = argmin_numeric(xi, 1.0, &params, tol)?;
            let abs_dev = (h_closed - h_numeric).abs();
            Ok(VerifyRow {
                xi_db,
                rho: params.rho(),
                alpha: params.alpha(),
                h_closed,
                h_numeric,
                abs_dev,
                pass: abs_dev < tol,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport { rows, tol })
}
