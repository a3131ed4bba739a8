//! Lossless text encoding for `f64` values, C99 `%a` style.
//!
//! The on-disk formats in this crate (HRV/1 files, attention traces) must
//! round-trip floating-point values bit-for-bit. Decimal formatting can do
//! that only with care and 17 significant digits; hexadecimal significands
//! make the guarantee structural: `0x1.921fb54442d18p+1` *is* the bit
//! pattern of π, readable by `strtod` and friends. The standard library has
//! no `%a` formatter, so this module provides one, plus the matching parser.
//!
//! Encoding rules (kept narrow on purpose — we parse what we print):
//! - normals:     `[-]0x1.<up to 13 hex digits>p<±exp>` (trailing zeros
//!   trimmed, the `.` omitted when the fraction is zero)
//! - subnormals:  `[-]0x0.<hex digits>p-1022`
//! - zeros:       `0x0p+0` / `-0x0p+0`
//! - specials:    `inf`, `-inf`, `nan`

/// Format a value losslessly. `parse(&format(x))` reproduces `x` exactly,
/// including the sign of zero; every NaN prints as `nan`.
pub fn format_f64(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    let sign = if x.is_sign_negative() { "-" } else { "" };
    if x.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = x.to_bits();
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    if exp_bits == 0 && frac == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_bits == 0 {
        // Subnormal: significand 0.frac, fixed exponent -1022.
        ('0', -1022)
    } else {
        ('1', exp_bits - 1023)
    };
    if frac == 0 {
        format!("{sign}0x{lead}p{exp:+}")
    } else {
        let digits = format!("{frac:013x}");
        let digits = digits.trim_end_matches('0');
        format!("{sign}0x{lead}.{digits}p{exp:+}")
    }
}

/// Parse a value produced by [`format_f64`]. Returns `None` on any
/// malformed input; never panics.
pub fn parse_f64(s: &str) -> Option<f64> {
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    match rest {
        "inf" => {
            return Some(if neg {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            })
        }
        "nan" => return Some(f64::NAN),
        _ => {}
    }
    let rest = rest
        .strip_prefix("0x")
        .or_else(|| rest.strip_prefix("0X"))?;
    let p = rest.find(['p', 'P'])?;
    let (mantissa, exp_str) = (&rest[..p], &rest[p + 1..]);
    let exp: i64 = exp_str.parse().ok()?;

    let (int_part, frac_part) = match mantissa.find('.') {
        Some(dot) => (&mantissa[..dot], &mantissa[dot + 1..]),
        None => (mantissa, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    // Accumulate integer and fraction digits into one integer significand,
    // tracking how many bits the fraction shifted the binary point.
    let mut sig: u64 = 0;
    for c in int_part.chars().chain(frac_part.chars()) {
        let d = c.to_digit(16)? as u64;
        // Outputs of format_f64 carry at most 14 hex digits (53 bits of
        // significand plus the lead digit), so overflow here means the
        // input is not ours — reject rather than silently round.
        if sig > (u64::MAX >> 4) {
            return None;
        }
        sig = (sig << 4) | d;
    }
    let exp = exp.checked_sub(4 * frac_part.len() as i64)?;
    if sig == 0 {
        return Some(if neg { -0.0 } else { 0.0 });
    }
    // sig × 2^exp, both factors exact: sig ≤ 2^56 here and the true value
    // is a valid f64 (we only parse our own encodings), so the single
    // multiply rounds to it exactly.
    let value = sig as f64 * pow2(exp)?;
    if value.is_infinite() {
        return None;
    }
    Some(if neg { -value } else { value })
}

/// Exact power of two from the bit pattern; `None` outside the f64 range.
fn pow2(e: i64) -> Option<f64> {
    match e {
        -1022..=1023 => Some(f64::from_bits(((e + 1023) as u64) << 52)),
        -1074..=-1023 => Some(f64::from_bits(1u64 << (e + 1074))),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_encodings() {
        assert_eq!(format_f64(1.0), "0x1p+0");
        assert_eq!(format_f64(-2.0), "-0x1p+1");
        assert_eq!(format_f64(0.5), "0x1p-1");
        assert_eq!(format_f64(1.5), "0x1.8p+0");
        assert_eq!(format_f64(0.0), "0x0p+0");
        assert_eq!(format_f64(-0.0), "-0x0p+0");
        assert_eq!(format_f64(std::f64::consts::PI), "0x1.921fb54442d18p+1");
        assert_eq!(format_f64(f64::INFINITY), "inf");
        assert_eq!(format_f64(f64::NEG_INFINITY), "-inf");
        assert_eq!(format_f64(f64::NAN), "nan");
    }

    #[test]
    fn extremes_round_trip() {
        for x in [
            f64::MIN_POSITIVE,                   // smallest normal
            f64::from_bits(1),                   // smallest subnormal
            f64::from_bits(0x000fffff_ffffffff), // largest subnormal
            f64::MAX,
            -f64::MAX,
            f64::EPSILON,
        ] {
            let text = format_f64(x);
            let back = parse_f64(&text).unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "round trip failed for {text}");
        }
    }

    #[test]
    fn zero_keeps_its_sign() {
        assert!(parse_f64("0x0p+0").unwrap().is_sign_positive());
        assert!(parse_f64("-0x0p+0").unwrap().is_sign_negative());
    }

    #[test]
    fn garbage_is_rejected() {
        for bad in [
            "",
            "0x",
            "p+0",
            "0xp+0",
            "0x1.gp+0",
            "0x1p",
            "0x1p+",
            "1.5",
            "0x1..5p+0",
            "0x1p+99999999999999999999",
            "0xffffffffffffffffffp+0",
        ] {
            assert!(parse_f64(bad).is_none(), "accepted {bad:?}");
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            let back = parse_f64(&format_f64(x)).unwrap();
            if x.is_nan() {
                prop_assert!(back.is_nan());
            } else {
                prop_assert_eq!(back.to_bits(), x.to_bits());
            }
        }
    }
}
