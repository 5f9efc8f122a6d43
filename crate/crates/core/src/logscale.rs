//! Positive reals stored by their natural logarithm.
//!
//! The network constants reach magnitudes like 1e-1400, far outside f64.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogPos {
    pub ln: f64,
}

impl LogPos {
    pub fn from_ln(ln: f64) -> Self {
        Self { ln }
    }

    pub fn new(x: f64) -> Self {
        Self { ln: x.ln() }
    }

    /// Plain value; underflows to 0 or overflows to infinity outside f64 range.
    pub fn value(self) -> f64 {
        self.ln.exp()
    }

    pub fn log10(self) -> f64 {
        self.ln / std::f64::consts::LN_10
    }

    pub fn is_finite(self) -> bool {
        self.ln.is_finite()
    }

    pub fn mul(self, other: Self) -> Self {
        Self::from_ln(self.ln + other.ln)
    }

    pub fn div(self, other: Self) -> Self {
        Self::from_ln(self.ln - other.ln)
    }

    pub fn powf(self, p: f64) -> Self {
        Self::from_ln(self.ln * p)
    }
}

impl fmt::Display for LogPos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.ln.is_finite() {
            return write!(f, "exp({})", self.ln);
        }
        let l10 = self.log10();
        if l10.abs() < 300.0 {
            return write!(f, "{:.6e}", self.value());
        }
        let exp = l10.floor();
        let mant = 10f64.powf(l10 - exp);
        write!(f, "{mant:.6}e{exp:.0}")
    }
}

/// ln(1 - x) for x in [0, 1), accurate for tiny x.
pub fn ln_one_minus(x: f64) -> f64 {
    (-x).ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_beyond_f64_range() {
        let x = LogPos::from_ln(-1500.0 * std::f64::consts::LN_10);
        assert_eq!(x.to_string(), "1.000000e-1500");
        assert_eq!(x.value(), 0.0);
        assert_eq!(LogPos::new(0.25).to_string(), "2.500000e-1");
    }

    #[test]
    fn arithmetic() {
        let a = LogPos::new(3.0);
        let b = LogPos::new(4.0);
        assert!((a.mul(b).value() - 12.0).abs() < 1e-12);
        assert!((b.div(a).value() - 4.0 / 3.0).abs() < 1e-12);
        assert!((a.powf(2.0).value() - 9.0).abs() < 1e-12);
        assert!((ln_one_minus(1e-300) + 1e-300).abs() < 1e-310);
    }
}
