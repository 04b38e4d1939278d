//! Decimal text for floats that must round-trip exactly.

/// 17 significant digits, enough to recover any `f64` bit pattern.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn parse_f64(s: &str) -> Result<f64, String> {
    s.trim().parse::<f64>().map_err(|e| format!("bad float {s:?}: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn decimal_text_round_trips(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(!x.is_nan());
            let back = parse_f64(&format_f64(x)).unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
