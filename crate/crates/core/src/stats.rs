// SPDX-License-Identifier: Apache-2.0

//! Box-plot summary of per-seed metrics.

use serde::Serialize;

/// Quantile of sorted data by linear interpolation between order
/// statistics at position `(n - 1) q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub iqr: f64,
    /// Smallest observation at or above `q1 - 1.5 iqr`, never above `q1`.
    pub whisker_low: f64,
    /// Largest observation at or below `q3 + 1.5 iqr`, never below `q3`.
    pub whisker_high: f64,
    pub span: f64,
}

/// `None` for empty input or any non-finite value.
pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&s, 0.25);
    let median = quantile_sorted(&s, 0.5);
    let q3 = quantile_sorted(&s, 0.75);
    let iqr = q3 - q1;
    let whisker_low = s
        .iter()
        .copied()
        .find(|&v| v >= q1 - 1.5 * iqr)
        .map_or(q1, |v| v.min(q1));
    let whisker_high = s
        .iter()
        .rev()
        .copied()
        .find(|&v| v <= q3 + 1.5 * iqr)
        .map_or(q3, |v| v.max(q3));
    Some(BoxStats {
        q1,
        median,
        q3,
        iqr,
        whisker_low,
        whisker_high,
        span: whisker_high - whisker_low,
    })
}

/// `42, 84, ..., 42 n`.
pub fn default_seeds(n: u64) -> Vec<u64> {
    (1..=n).map(|k| 42 * k).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quartiles_by_hand() {
        // positions 0.75, 1.5, 2.25 over [1, 2, 4, 8]
        let b = box_stats(&[8.0, 1.0, 4.0, 2.0]).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (1.75, 3.0, 5.0));
        assert_eq!(b.iqr, 3.25);
        assert_eq!((b.whisker_low, b.whisker_high), (1.0, 8.0));
        assert_eq!(b.span, 7.0);
    }

    #[test]
    fn outlier_is_outside_whiskers() {
        let b = box_stats(&[1.0, 2.0, 3.0, 4.0, 5.0, 100.0]).unwrap();
        // q1 = 2.25, q3 = 4.75, fence 8.5
        assert_eq!(b.whisker_high, 5.0);
        assert_eq!(b.whisker_low, 1.0);
    }

    #[test]
    fn whisker_never_inside_box() {
        // q3 = 8.4 but every value under the fence is 0
        let b = box_stats(&[0.0, 0.0, 0.0, 33.6]).unwrap();
        assert_eq!(b.whisker_high, b.q3);
        assert_eq!(b.whisker_low, 0.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(box_stats(&[]), None);
        assert_eq!(box_stats(&[1.0, f64::NAN]), None);
        let b = box_stats(&[0.3]).unwrap();
        assert_eq!((b.iqr, b.span), (0.0, 0.0));
    }

    #[test]
    fn default_seed_list() {
        assert_eq!(default_seeds(10), vec![42, 84, 126, 168, 210, 252, 294, 336, 378, 420]);
    }

    proptest! {
        #[test]
        fn ordering_and_bounds(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
            let b = box_stats(&v).unwrap();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= b.whisker_low && b.whisker_low <= b.q1);
            prop_assert!(b.q1 <= b.median && b.median <= b.q3);
            prop_assert!(b.q3 <= b.whisker_high && b.whisker_high <= hi);
            prop_assert!(b.iqr >= 0.0 && b.span >= 0.0);
        }
    }
}
