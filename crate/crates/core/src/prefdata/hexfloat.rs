//! Exact textual encoding of `f64` as C99-style hexadecimal floats.
//!
//! Normal numbers print as `0x1.<fraction>p<exp>`, subnormals as
//! `0x0.<fraction>p-1022`, zeros as `0x0p+0` (with sign), and the
//! non-finite values as `inf`, `-inf` and `nan`. Trailing zero hex digits of
//! the fraction are dropped.

use crate::error::{Error, Result};

const FRAC_BITS: u32 = 52;
const FRAC_MASK: u64 = (1 << FRAC_BITS) - 1;

pub fn encode(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    let sign = if x.is_sign_negative() { "-" } else { "" };
    if x.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = x.to_bits();
    let exp = ((bits >> FRAC_BITS) & 0x7ff) as i32;
    let frac = bits & FRAC_MASK;
    if exp == 0 && frac == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, e) = if exp == 0 { (0, -1022) } else { (1, exp - 1023) };
    let digits = format!("{frac:013x}");
    let digits = digits.trim_end_matches('0');
    if digits.is_empty() {
        format!("{sign}0x{lead}p{e:+}")
    } else {
        format!("{sign}0x{lead}.{digits}p{e:+}")
    }
}

fn bad(s: &str) -> Error {
    Error::invalid(format!("malformed hex float `{s}`"))
}

pub fn decode(s: &str) -> Result<f64> {
    match s {
        "nan" => return Ok(f64::NAN),
        "inf" => return Ok(f64::INFINITY),
        "-inf" => return Ok(f64::NEG_INFINITY),
        _ => {}
    }
    let (negative, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    let rest = rest.strip_prefix("0x").ok_or_else(|| bad(s))?;
    let (mantissa, exp) = rest.split_once('p').ok_or_else(|| bad(s))?;
    let exp: i32 = exp.parse().map_err(|_| bad(s))?;
    let (lead, digits) = match mantissa.split_once('.') {
        Some((l, d)) if !d.is_empty() => (l, d),
        Some(_) => return Err(bad(s)),
        None => (mantissa, ""),
    };
    if digits.len() > 13 || !digits.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(bad(s));
    }
    let frac = if digits.is_empty() {
        0
    } else {
        u64::from_str_radix(digits, 16).map_err(|_| bad(s))? << (4 * (13 - digits.len()))
    };
    let bits = match lead {
        "1" if (-1022..=1023).contains(&exp) => (((exp + 1023) as u64) << FRAC_BITS) | frac,
        "0" if frac == 0 && exp == 0 => 0,
        "0" if exp == -1022 => frac,
        _ => return Err(bad(s)),
    };
    let sign = if negative { 1u64 << 63 } else { 0 };
    Ok(f64::from_bits(sign | bits))
}

/// Serde adapters for hex-encoded floats and nested float arrays.
pub mod serde_hex {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::encode(*x))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        super::decode(&s).map_err(D::Error::custom)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(xs.iter().map(|x| crate::prefdata::hexfloat::encode(*x)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<String>::deserialize(d)?
                .iter()
                .map(|s| crate::prefdata::hexfloat::decode(s).map_err(D::Error::custom))
                .collect()
        }
    }

    pub mod matrix {
        use super::*;

        pub fn serialize<S: Serializer>(rows: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(rows.iter().map(|r| {
                r.iter()
                    .map(|x| crate::prefdata::hexfloat::encode(*x))
                    .collect::<Vec<_>>()
            }))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
            Vec::<Vec<String>>::deserialize(d)?
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|s| crate::prefdata::hexfloat::decode(s).map_err(D::Error::custom))
                        .collect()
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_encodings() {
        assert_eq!(encode(1.0), "0x1p+0");
        assert_eq!(encode(3.0), "0x1.8p+1");
        assert_eq!(encode(-0.1), "-0x1.999999999999ap-4");
        assert_eq!(encode(0.0), "0x0p+0");
        assert_eq!(encode(-0.0), "-0x0p+0");
        assert_eq!(encode(f64::MIN_POSITIVE), "0x1p-1022");
        assert_eq!(encode(f64::from_bits(1)), "0x0.0000000000001p-1022");
        assert_eq!(encode(f64::MAX), "0x1.fffffffffffffp+1023");
        assert_eq!(encode(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn rejects_malformed_text() {
        for s in [
            "",
            "1.0",
            "0x",
            "0x1.p+0",
            "0x2p+0",
            "0x1.gp+0",
            "0x1p+1024",
            "0x0.1p+3",
            "0x1.00000000000000p+0",
        ] {
            assert!(decode(s).is_err(), "{s}");
        }
    }

    #[test]
    fn special_values() {
        assert!(decode("nan").unwrap().is_nan());
        assert_eq!(decode("-0x0p+0").unwrap().to_bits(), (-0.0f64).to_bits());
        assert_eq!(decode("inf").unwrap(), f64::INFINITY);
    }

    proptest! {
        #[test]
        fn every_bit_pattern_round_trips(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            let back = decode(&encode(x)).unwrap();
            if x.is_nan() {
                prop_assert!(back.is_nan());
            } else {
                prop_assert_eq!(back.to_bits(), bits);
            }
        }
    }
}
