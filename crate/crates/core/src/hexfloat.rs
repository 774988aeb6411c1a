//! C99-style hexadecimal floating point (`%a`) formatting and parsing.

/// Formats a finite `f64` as `[-]0x1.<hex>p<exp>`; the round trip through
/// [`parse_hex`] is bit-exact.
pub fn format_hex(v: f64) -> String {
    assert!(v.is_finite(), "hex formatting of non-finite value");
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let mantissa = bits & ((1u64 << 52) - 1);
    if exp_bits == 0 && mantissa == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_bits == 0 { (0, -1022) } else { (1, exp_bits - 1023) };
    let mut frac = format!("{mantissa:013x}");
    while frac.ends_with('0') {
        frac.pop();
    }
    if frac.is_empty() {
        format!("{sign}0x{lead}p{exp:+}")
    } else {
        format!("{sign}0x{lead}.{frac}p{exp:+}")
    }
}

/// Parses a hexadecimal float with at most 16 significant hex digits.
pub fn parse_hex(s: &str) -> Option<f64> {
    let (neg, rest) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    let rest = rest.strip_prefix("0x").or_else(|| rest.strip_prefix("0X"))?;
    let p = rest.find(['p', 'P'])?;
    let (mant, exp) = (&rest[..p], &rest[p + 1..]);
    let exp: i64 = exp.parse().ok()?;
    let (int_part, frac_part) = match mant.find('.') {
        Some(dot) => (&mant[..dot], &mant[dot + 1..]),
        None => (mant, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let digits = int_part.len() + frac_part.len();
    if digits > 16 {
        return None;
    }
    let mut m: u64 = 0;
    for c in int_part.chars().chain(frac_part.chars()) {
        m = (m << 4) | c.to_digit(16)? as u64;
    }
    // more than 53 significant bits would need rounding
    if m != 0 && 64 - m.leading_zeros() - m.trailing_zeros() > 53 {
        return None;
    }
    let mut shift = exp - 4 * frac_part.len() as i64;
    let mut v = m as f64;
    // apply the binary exponent in steps that stay exact until the last one
    while shift > 1000 {
        v *= 2f64.powi(1000);
        shift -= 1000;
    }
    while shift < -1000 {
        v *= 2f64.powi(-1000);
        shift += 1000;
    }
    v *= 2f64.powi(shift as i32);
    Some(if neg { -v } else { v })
}

/// Formats with 17 significant decimal digits (exact round trip).
pub fn format_dec17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Accepts either a hexadecimal or a decimal float token.
pub fn parse_number(tok: &str) -> Option<f64> {
    let t = tok.trim_start_matches(['+', '-']);
    if t.starts_with("0x") || t.starts_with("0X") {
        parse_hex(tok)
    } else {
        tok.parse::<f64>().ok().filter(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_values() {
        assert_eq!(format_hex(1.0), "0x1p+0");
        assert_eq!(format_hex(-2.5), "-0x1.4p+1");
        assert_eq!(format_hex(0.0), "0x0p+0");
        assert_eq!(format_hex(-0.0), "-0x0p+0");
        assert_eq!(parse_hex("0x1.8p-1"), Some(0.75));
        assert_eq!(parse_hex("-0x0p+0").map(f64::to_bits), Some((-0.0f64).to_bits()));
        assert_eq!(parse_hex("0x1.0000000000001p+0"), Some(1.0 + f64::EPSILON));
        assert_eq!(parse_number("0.75"), Some(0.75));
        assert_eq!(parse_number("nope"), None);
        assert_eq!(parse_number("inf"), None);
    }

    #[test]
    fn subnormals_round_trip() {
        for v in [f64::MIN_POSITIVE, f64::MIN_POSITIVE / 3.0, 5e-324, f64::MAX, -f64::MAX] {
            assert_eq!(parse_hex(&format_hex(v)).unwrap().to_bits(), v.to_bits());
        }
    }

    proptest! {
        #[test]
        fn hex_round_trip_is_bit_exact(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            prop_assert_eq!(parse_hex(&format_hex(v)).unwrap().to_bits(), bits);
        }

        #[test]
        fn dec17_round_trip_is_bit_exact(v in -1e300f64..1e300) {
            prop_assert_eq!(parse_number(&format_dec17(v)).unwrap().to_bits(), v.to_bits());
        }
    }
}
