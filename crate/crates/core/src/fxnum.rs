//! Fixed-point Q-format arithmetic for the accelerator datapath.
//!
//! Weights, input features and biases are 16-bit two's-complement words with
//! `frac_bits` fractional bits. Products are accumulated exactly in a 48-bit
//! accumulator at scale `2^(-2*frac_bits)`; rounding and saturation happen
//! only when an accumulator is narrowed back to a word.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of the wide accumulator in bits.
pub const ACC_BITS: u32 = 48;

const ACC_MAX: i64 = (1i64 << (ACC_BITS - 1)) - 1;
const ACC_MIN: i64 = -(1i64 << (ACC_BITS - 1));

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FxError {
    #[error("invalid Q format: total_bits={total_bits}, frac_bits={frac_bits}")]
    InvalidFormat { total_bits: u32, frac_bits: u32 },
    #[error("cannot quantize non-finite value {0}")]
    NonFinite(f64),
    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("raw value {raw} does not fit in {total_bits} bits")]
    RawOutOfRange { raw: i64, total_bits: u32 },
}

/// A signed fixed-point word format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawQFormat", into = "RawQFormat")]
pub struct QFormat {
    total_bits: u8,
    frac_bits: u8,
}

#[derive(Serialize, Deserialize)]
struct RawQFormat {
    total_bits: u32,
    frac_bits: u32,
}

impl TryFrom<RawQFormat> for QFormat {
    type Error = FxError;
    fn try_from(r: RawQFormat) -> Result<Self, FxError> {
        QFormat::new(r.total_bits, r.frac_bits)
    }
}

impl From<QFormat> for RawQFormat {
    fn from(q: QFormat) -> Self {
        RawQFormat { total_bits: q.total_bits(), frac_bits: q.frac_bits() }
    }
}

impl QFormat {
    /// 16-bit word, 10 fractional bits: the datapath format.
    pub const Q16_10: QFormat = QFormat { total_bits: 16, frac_bits: 10 };

    pub fn new(total_bits: u32, frac_bits: u32) -> Result<Self, FxError> {
        if frac_bits < 1 || frac_bits >= total_bits || total_bits > 16 {
            return Err(FxError::InvalidFormat { total_bits, frac_bits });
        }
        Ok(QFormat { total_bits: total_bits as u8, frac_bits: frac_bits as u8 })
    }

    pub fn total_bits(self) -> u32 {
        self.total_bits as u32
    }

    pub fn frac_bits(self) -> u32 {
        self.frac_bits as u32
    }

    pub fn raw_min(self) -> i64 {
        -(1i64 << (self.total_bits - 1))
    }

    pub fn raw_max(self) -> i64 {
        (1i64 << (self.total_bits - 1)) - 1
    }

    /// Weight of one least-significant bit.
    pub fn ulp(self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    fn saturate(self, raw: i64) -> i16 {
        raw.clamp(self.raw_min(), self.raw_max()) as i16
    }
}

impl Default for QFormat {
    fn default() -> Self {
        QFormat::Q16_10
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", self.total_bits, self.frac_bits)
    }
}

/// One datapath word: a raw two's-complement count tagged with its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedWord {
    raw: i16,
    format: QFormat,
}

impl FixedWord {
    pub fn from_raw(raw: i16, format: QFormat) -> Result<Self, FxError> {
        let r = raw as i64;
        if r < format.raw_min() || r > format.raw_max() {
            return Err(FxError::RawOutOfRange { raw: r, total_bits: format.total_bits() });
        }
        Ok(FixedWord { raw, format })
    }

    /// Caller guarantees `raw` fits the format; always true for 16-bit formats.
    pub(crate) fn from_raw_unchecked(raw: i16, format: QFormat) -> Self {
        debug_assert!((raw as i64) >= format.raw_min() && (raw as i64) <= format.raw_max());
        FixedWord { raw, format }
    }

    pub fn zero(format: QFormat) -> Self {
        FixedWord { raw: 0, format }
    }

    pub fn raw(self) -> i16 {
        self.raw
    }

    pub fn format(self) -> QFormat {
        self.format
    }

    pub fn to_f64(self) -> f64 {
        dequantize(self)
    }
}

/// Exact wide accumulator holding a raw count at scale `2^(-2*frac_bits)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct WideAcc {
    raw: i64,
}

impl WideAcc {
    pub const ZERO: WideAcc = WideAcc { raw: 0 };

    /// Panics if `raw` does not fit the 48-bit accumulator.
    pub fn from_raw(raw: i64) -> Self {
        check_acc(raw);
        WideAcc { raw }
    }

    pub fn raw(self) -> i64 {
        self.raw
    }

    /// Value at accumulator scale for a given word format.
    pub fn to_f64(self, fmt: QFormat) -> f64 {
        self.raw as f64 * (-2.0 * fmt.frac_bits() as f64).exp2()
    }

    /// Word promoted to accumulator scale without loss.
    pub fn promote(w: FixedWord) -> WideAcc {
        WideAcc { raw: (w.raw as i64) << w.format.frac_bits() }
    }
}

/// Exact sum of two accumulators. Leaving the 48-bit range aborts.
impl std::ops::Add for WideAcc {
    type Output = WideAcc;

    fn add(self, other: WideAcc) -> WideAcc {
        let sum = self.raw.checked_add(other.raw).expect("accumulator overflow");
        WideAcc::from_raw(sum)
    }
}

#[inline]
#[track_caller]
fn check_acc(raw: i64) {
    assert!((ACC_MIN..=ACC_MAX).contains(&raw), "accumulator value {raw} exceeds {ACC_BITS}-bit contract");
}

/// Round-half-to-even quantization with saturation.
pub fn quantize(x: f64, fmt: QFormat) -> Result<FixedWord, FxError> {
    if !x.is_finite() {
        return Err(FxError::NonFinite(x));
    }
    // scaling by a power of two is exact unless it overflows, and then the
    // result saturates anyway
    let scaled = (x * (fmt.frac_bits() as f64).exp2()).round_ties_even();
    let raw = if scaled >= fmt.raw_max() as f64 {
        fmt.raw_max()
    } else if scaled <= fmt.raw_min() as f64 {
        fmt.raw_min()
    } else {
        scaled as i64
    };
    Ok(FixedWord { raw: raw as i16, format: fmt })
}

pub fn dequantize(w: FixedWord) -> f64 {
    w.raw as f64 * w.format.ulp()
}

/// `acc + a*b`, exact. Operands must share a format.
#[inline]
pub fn mac(acc: WideAcc, a: FixedWord, b: FixedWord) -> WideAcc {
    assert_eq!(a.format, b.format, "mac operands use different formats");
    mac_raw(acc, a.raw, b.raw)
}

#[inline]
pub(crate) fn mac_raw(acc: WideAcc, a: i16, b: i16) -> WideAcc {
    acc + WideAcc { raw: a as i64 * b as i64 }
}

/// Narrow an accumulator to a word: shift by `frac_bits` with
/// round-half-to-even, then saturate.
pub fn requantize(acc: WideAcc, fmt: QFormat) -> FixedWord {
    let f = fmt.frac_bits();
    let floor = acc.raw >> f;
    let rem = acc.raw - (floor << f);
    let half = 1i64 << (f - 1);
    let rounded = if rem > half || (rem == half && floor & 1 == 1) { floor + 1 } else { floor };
    FixedWord { raw: fmt.saturate(rounded), format: fmt }
}

/// Upper bound on `|dot(q(x), q(w)) - dot(x, w)|` when both operands are
/// quantized round-to-nearest without saturation.
pub fn dot_error_bound(x: &[f64], w: &[f64], fmt: QFormat) -> Result<f64, FxError> {
    if x.len() != w.len() {
        return Err(FxError::LengthMismatch { left: x.len(), right: w.len() });
    }
    let f = fmt.frac_bits() as f64;
    let half_ulp = (-f - 1.0).exp2();
    let cross = (-2.0 * f - 2.0).exp2();
    Ok(x.iter().zip(w).map(|(xi, wi)| half_ulp * (xi.abs() + wi.abs()) + cross).sum())
}
