//! Metric cells and the fixed decimal rendering used by every export.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Significant digits in exported reals.
pub const SIGNIFICANT_DIGITS: usize = 10;

/// One metric value. Log-ratio metrics with a zero observed share are
/// `NegInfinite`; cells that cannot be computed (beyond the list, empty
/// labeled prefix, empty base set) are `Undefined`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Cell {
    Value(f64),
    Undefined,
    NegInfinite,
}

impl Cell {
    pub fn value(self) -> Option<f64> {
        match self {
            Cell::Value(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_defined(self) -> bool {
        !matches!(self, Cell::Undefined)
    }

    /// Long-format rendering: real literal, `undefined` or `-inf`.
    pub fn render(self) -> String {
        match self {
            Cell::Value(v) => format_real(v),
            Cell::Undefined => "undefined".to_string(),
            Cell::NegInfinite => "-inf".to_string(),
        }
    }

    /// Heatmap rendering: undefined cells are empty.
    pub fn render_matrix(self) -> String {
        match self {
            Cell::Undefined => String::new(),
            other => other.render(),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellParseError(pub String);

impl fmt::Display for CellParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "not a metric cell: `{}`", self.0)
    }
}

impl std::error::Error for CellParseError {}

impl FromStr for Cell {
    type Err = CellParseError;

    /// Accepts both long-format (`undefined`) and matrix (empty) spellings.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "" | "undefined" => Ok(Cell::Undefined),
            "-inf" => Ok(Cell::NegInfinite),
            t => t
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Cell::Value)
                .ok_or_else(|| CellParseError(s.to_string())),
        }
    }
}

/// `%.10g`-style rendering: 10 significant digits, trailing zeros trimmed,
/// scientific notation when the decimal exponent is below -4 or at least 10.
pub fn format_real(v: f64) -> String {
    if v.is_nan() {
        return "nan".to_string();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{:.*e}", SIGNIFICANT_DIGITS - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    let (neg, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => (true, m),
        None => (false, mantissa),
    };
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let sign = if neg { "-" } else { "" };

    if !(-4..10).contains(&exp) {
        let (lead, rest) = digits.split_at(1);
        let rest = rest.trim_end_matches('0');
        let mant = if rest.is_empty() {
            lead.to_string()
        } else {
            format!("{lead}.{rest}")
        };
        let esign = if exp < 0 { '-' } else { '+' };
        return format!("{sign}{mant}e{esign}{:02}", exp.abs());
    }

    let (int_part, frac_part) = if exp >= 0 {
        let split = exp as usize + 1;
        (digits[..split].to_string(), digits[split..].to_string())
    } else {
        let zeros = "0".repeat((-exp - 1) as usize);
        ("0".to_string(), format!("{zeros}{digits}"))
    };
    let frac = frac_part.trim_end_matches('0');
    if frac.is_empty() {
        format!("{sign}{int_part}")
    } else {
        format!("{sign}{int_part}.{frac}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matches_printf_g() {
        let cases = [
            (0.0, "0"),
            (-0.0, "0"),
            (1.0, "1"),
            (0.4, "0.4"),
            (-0.2876820724517809, "-0.2876820725"),
            ((7.0f64 / 6.0).ln(), "0.1541506798"),
            (123456.789, "123456.789"),
            (9_999_999_999.5, "1e+10"),
            (1234567890.0, "1234567890"),
            (12345678901.0, "1.23456789e+10"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (9.99999999995, "10"),
            (-1.5e-300, "-1.5e-300"),
        ];
        for (v, want) in cases {
            assert_eq!(format_real(v), want, "{v}");
        }
    }

    #[test]
    fn cell_round_trip_spellings() {
        assert_eq!("undefined".parse::<Cell>().unwrap(), Cell::Undefined);
        assert_eq!("".parse::<Cell>().unwrap(), Cell::Undefined);
        assert_eq!("-inf".parse::<Cell>().unwrap(), Cell::NegInfinite);
        assert_eq!(" 0.25".parse::<Cell>().unwrap(), Cell::Value(0.25));
        assert!("nan".parse::<Cell>().is_err());
        assert!("x".parse::<Cell>().is_err());
        assert_eq!(Cell::Undefined.render_matrix(), "");
        assert_eq!(Cell::NegInfinite.render_matrix(), "-inf");
    }

    proptest! {
        #[test]
        fn rendering_is_stable_under_reparse(v in prop::num::f64::NORMAL) {
            let s = format_real(v);
            let back: f64 = s.parse().unwrap();
            prop_assert_eq!(format_real(back), s.clone());
            let rel = ((back - v) / v).abs();
            prop_assert!(rel <= 5e-10, "{} -> {} ({})", v, s, rel);
        }
    }
}
