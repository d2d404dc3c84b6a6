//! Scalar payloads and the configurable add/multiply operators.
//!
//! Payloads are 64-bit floats. Integer-valued payloads stay exact up to
//! 2^53; an operation on two integral operands whose result leaves that
//! range is reported as an overflow instead of silently rounding.

use std::fmt;

use serde::{Deserialize, Serialize};

pub type Value = f64;

/// Largest magnitude at which every integer is exactly representable.
pub const EXACT_INT_LIMIT: f64 = 9_007_199_254_740_992.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Plus,
    Times,
    Min,
    Max,
    Or,
    And,
}

impl Op {
    pub fn parse(token: &str) -> Option<Op> {
        match token.trim() {
            "+" | "plus" | "add" => Some(Op::Plus),
            "*" | "·" | "times" | "mul" => Some(Op::Times),
            "min" => Some(Op::Min),
            "max" => Some(Op::Max),
            "or" | "logical-or" | "||" => Some(Op::Or),
            "and" | "logical-and" | "&&" => Some(Op::And),
            _ => None,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Plus => "+",
            Op::Times => "*",
            Op::Min => "min",
            Op::Max => "max",
            Op::Or => "or",
            Op::And => "and",
        }
    }

    fn apply(self, a: Value, b: Value) -> Value {
        match self {
            Op::Plus => a + b,
            Op::Times => a * b,
            Op::Min => a.min(b),
            Op::Max => a.max(b),
            Op::Or => f64::from(a != 0.0 || b != 0.0),
            Op::And => f64::from(a != 0.0 && b != 0.0),
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("integer overflow: {a} {op} {b} leaves the exactly representable range")]
pub struct Overflow {
    pub a: Value,
    pub b: Value,
    pub op: &'static str,
}

/// The pair of operators an Einsum cascade computes with.
///
/// `add` reduces and merges (union co-iteration); `mul` combines
/// intersected operands. Subtraction under ordinary `+` is arithmetic; under
/// any other add it acts as a change filter: `a - b` is `a` when the two
/// differ and the additive identity when they are equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Semiring {
    pub add: Op,
    pub mul: Op,
}

impl Default for Semiring {
    fn default() -> Self {
        Semiring {
            add: Op::Plus,
            mul: Op::Times,
        }
    }
}

fn integral(v: Value) -> bool {
    v.is_finite() && v.fract() == 0.0
}

fn checked(op: &'static str, a: Value, b: Value, r: Value) -> Result<Value, Overflow> {
    if integral(a) && integral(b) && r.is_finite() && r.abs() > EXACT_INT_LIMIT {
        Err(Overflow { a, b, op })
    } else {
        Ok(r)
    }
}

impl Semiring {
    pub fn min_plus() -> Self {
        Semiring {
            add: Op::Min,
            mul: Op::Plus,
        }
    }

    /// Additive identity; also the implicit value of every absent element.
    pub fn zero(&self) -> Value {
        match self.add {
            Op::Plus | Op::Or => 0.0,
            Op::Min => f64::INFINITY,
            Op::Max => f64::NEG_INFINITY,
            Op::Times | Op::And => 1.0,
        }
    }

    pub fn is_zero(&self, v: Value) -> bool {
        v == self.zero()
    }

    pub fn add(&self, a: Value, b: Value) -> Result<Value, Overflow> {
        checked(self.add.symbol(), a, b, self.add.apply(a, b))
    }

    pub fn mul(&self, a: Value, b: Value) -> Result<Value, Overflow> {
        // absent operands annihilate regardless of the operator choice
        if self.is_zero(a) || self.is_zero(b) {
            return Ok(self.zero());
        }
        checked(self.mul.symbol(), a, b, self.mul.apply(a, b))
    }

    pub fn sub(&self, a: Value, b: Value) -> Result<Value, Overflow> {
        match self.add {
            Op::Plus => checked("-", a, b, a - b),
            _ => Ok(if a == b { self.zero() } else { a }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities() {
        assert_eq!(Semiring::default().zero(), 0.0);
        assert_eq!(Semiring::min_plus().zero(), f64::INFINITY);
        let s = Semiring {
            add: Op::Max,
            mul: Op::Times,
        };
        assert_eq!(s.zero(), f64::NEG_INFINITY);
    }

    #[test]
    fn min_plus_annihilates_on_infinity() {
        let s = Semiring::min_plus();
        assert_eq!(s.mul(f64::INFINITY, 3.0).unwrap(), f64::INFINITY);
        assert_eq!(s.mul(2.0, 3.0).unwrap(), 5.0);
        assert_eq!(s.add(2.0, 3.0).unwrap(), 2.0);
    }

    #[test]
    fn change_filter_subtraction() {
        let s = Semiring::min_plus();
        assert_eq!(s.sub(4.0, 4.0).unwrap(), f64::INFINITY);
        assert_eq!(s.sub(1.0, f64::INFINITY).unwrap(), 1.0);
        assert_eq!(Semiring::default().sub(1.0, 4.0).unwrap(), -3.0);
    }

    #[test]
    fn overflow_is_reported() {
        let s = Semiring::default();
        assert!(s.mul(EXACT_INT_LIMIT, 2.0).is_err());
        assert!(s.add(EXACT_INT_LIMIT, 1.0).is_ok());
        assert!(s.mul(0.5, 3.0).is_ok());
    }

    #[test]
    fn parse_tokens() {
        assert_eq!(Op::parse("·"), Some(Op::Times));
        assert_eq!(Op::parse("min"), Some(Op::Min));
        assert_eq!(Op::parse("logical-or"), Some(Op::Or));
        assert_eq!(Op::parse("xor"), None);
    }
}
