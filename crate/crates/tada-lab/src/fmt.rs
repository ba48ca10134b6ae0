//! Locale-free float formatting for CSV output.

/// 17 significant digits, scientific; round-trips any f64 exactly.
pub(crate) fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::sig17;

    #[test]
    fn round_trips() {
        for x in [0.1, -3.5e-7, 1.0 / 3.0, f64::MIN_POSITIVE, 12345.678] {
            assert_eq!(sig17(x).parse::<f64>().unwrap(), x);
        }
    }
}
