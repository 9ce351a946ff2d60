//! Power-ratio decibel conventions shared by every module and the CLI.
//!
//! All ratios in this crate (a-priori SNR, `mu`, `eta`, `mu0`) are power
//! ratios, so `linear = 10^(dB / 10)`.

use crate::error::{Error, Result};

pub fn to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

/// Parses a power-ratio literal: `"5dB"`, `"-10 dB"` or a plain linear value
/// such as `"3.162"`.
pub fn parse_ratio(text: &str) -> Result<f64> {
    let t = text.trim();
    let lower = t.to_ascii_lowercase();
    let value = if let Some(num) = lower.strip_suffix("db") {
        let db: f64 = num.trim().parse().map_err(|_| Error::InvalidArgument(format!("not a dB value: {text:?}")))?;
        to_linear(db)
    } else {
        t.parse().map_err(|_| Error::InvalidArgument(format!("not a number: {text:?}")))?
    };
    if !value.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite ratio: {text:?}")));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals() {
        assert!((parse_ratio("5dB").unwrap() - 3.1622776601683795).abs() < 1e-12);
        assert!((parse_ratio("-10 dB").unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(parse_ratio("3.162").unwrap(), 3.162);
        assert_eq!(parse_ratio("0dB").unwrap(), 1.0);
        assert!(parse_ratio("five").is_err());
        assert!(parse_ratio("xdB").is_err());
    }

    #[test]
    fn round_trip() {
        for db in [-60.0, -12.5, 0.0, 3.0, 42.0] {
            assert!((to_db(to_linear(db)) - db).abs() < 1e-12);
        }
    }
}
