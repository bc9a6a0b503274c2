use crate::error::{Error, Result};

/// How gaps and reporting glitches are repaired before smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RepairMode {
    /// Linear interpolation between the nearest valid neighbours.
    Interpolate,
    /// Carry the running maximum forward over gaps and decreases.
    CumulativeMax,
    /// Interpolate, then enforce a non-decreasing series.
    #[default]
    Both,
}

impl std::str::FromStr for RepairMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interpolate" => Ok(RepairMode::Interpolate),
            "cumulative_max" | "cummax" => Ok(RepairMode::CumulativeMax),
            "both" => Ok(RepairMode::Both),
            _ => Err(Error::InvalidParameter(format!("unknown repair mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleaningPolicy {
    /// Drop line for the share of missing-or-zero cells after the first positive value.
    pub max_bad_fraction: f64,
    /// Trailing rolling-mean window in days.
    pub window: usize,
    pub repair_mode: RepairMode,
}

impl Default for CleaningPolicy {
    fn default() -> Self {
        CleaningPolicy { max_bad_fraction: 0.10, window: 7, repair_mode: RepairMode::Both }
    }
}

impl CleaningPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_bad_fraction) {
            return Err(Error::InvalidParameter(format!(
                "max_bad_fraction must be in [0, 1], got {}",
                self.max_bad_fraction
            )));
        }
        if self.window == 0 {
            return Err(Error::InvalidParameter("window must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CleanOutcome {
    Cleaned(Vec<f64>),
    Dropped { bad_fraction: f64 },
}

impl CleanOutcome {
    pub fn cleaned(&self) -> Option<&[f64]> {
        match self {
            CleanOutcome::Cleaned(v) => Some(v),
            CleanOutcome::Dropped { .. } => None,
        }
    }
}

/// Fills missing cells by linear interpolation between the nearest valid
/// neighbours. Leading and trailing gaps take the nearest valid value.
pub fn interpolate_missing(series: &[Option<f64>]) -> Result<Vec<f64>> {
    let valid: Vec<usize> = (0..series.len()).filter(|&i| series[i].is_some()).collect();
    let (&first, &last) = match (valid.first(), valid.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::AllMissing),
    };
    let mut out = vec![0.0; series.len()];
    for slot in out.iter_mut().take(first + 1) {
        *slot = series[first].unwrap();
    }
    for pair in valid.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (ya, yb) = (series[a].unwrap(), series[b].unwrap());
        out[a] = ya;
        let span = (b - a) as f64;
        for (k, slot) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let frac = (k - a) as f64 / span;
            *slot = ya + (yb - ya) * frac;
        }
        out[b] = yb;
    }
    for slot in out.iter_mut().skip(last) {
        *slot = series[last].unwrap();
    }
    Ok(out)
}

/// Running maximum: `out[t] = max(input[0..=t])`. NaN cells inherit the running value.
pub fn enforce_monotone(series: &[f64]) -> Vec<f64> {
    let mut best = f64::NEG_INFINITY;
    series
        .iter()
        .map(|&x| {
            if x > best {
                best = x;
            }
            if best == f64::NEG_INFINITY {
                x
            } else {
                best
            }
        })
        .collect()
}

/// Trailing rolling mean; the first `window - 1` days average the available prefix.
pub fn rolling_mean(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..series.len())
        .map(|t| {
            let w = &series[(t + 1).saturating_sub(window)..=t];
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            // Summation error must not push the mean outside the window's range.
            let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            mean.clamp(lo, hi)
        })
        .collect()
}

fn first_positive(series: &[Option<f64>]) -> Option<usize> {
    series.iter().position(|v| matches!(v, Some(x) if *x > 0.0))
}

/// Share of cells at or after the first positive value that are missing or zero.
fn bad_fraction(series: &[Option<f64>]) -> f64 {
    let Some(start) = first_positive(series) else { return 0.0 };
    let tail = &series[start..];
    let bad = tail.iter().filter(|v| matches!(v, None | Some(0.0))).count();
    bad as f64 / tail.len() as f64
}

/// Repairs gaps without smoothing. Zeros after the first positive value are
/// treated as missing.
pub fn repair_series(series: &[Option<f64>], mode: RepairMode) -> Result<Vec<f64>> {
    let start = first_positive(series).unwrap_or(series.len());
    let masked: Vec<Option<f64>> = series
        .iter()
        .enumerate()
        .map(|(t, v)| if t >= start && *v == Some(0.0) { None } else { *v })
        .collect();
    match mode {
        RepairMode::Interpolate => interpolate_missing(&masked),
        RepairMode::Both => interpolate_missing(&masked).map(|s| enforce_monotone(&s)),
        RepairMode::CumulativeMax => {
            let first = masked.iter().flatten().next().copied().ok_or(Error::AllMissing)?;
            let mut carry = first;
            let filled: Vec<f64> = masked
                .iter()
                .map(|v| {
                    if let Some(x) = v {
                        carry = *x;
                    }
                    carry
                })
                .collect();
            Ok(enforce_monotone(&filled))
        }
    }
}

/// Drop-or-repair a daily series, then smooth it with a trailing rolling mean.
pub fn clean_series(series: &[Option<f64>], policy: &CleaningPolicy) -> Result<CleanOutcome> {
    policy.validate()?;
    if series.iter().all(Option::is_none) {
        return Err(Error::AllMissing);
    }
    let bad = bad_fraction(series);
    if bad > policy.max_bad_fraction {
        return Ok(CleanOutcome::Dropped { bad_fraction: bad });
    }
    let repaired = repair_series(series, policy.repair_mode)?;
    Ok(CleanOutcome::Cleaned(rolling_mean(&repaired, policy.window)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn some(v: &[f64]) -> Vec<Option<f64>> {
        v.iter().copied().map(Some).collect()
    }

    #[test]
    fn interpolation_exact_on_line() {
        let s = [Some(0.0), Some(10.0), Some(20.0), None, Some(40.0), Some(50.0)];
        assert_eq!(interpolate_missing(&s).unwrap(), vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0]);
    }

    #[test]
    fn edges_take_nearest_value() {
        let s = [None, Some(2.0), None, Some(4.0), None];
        assert_eq!(interpolate_missing(&s).unwrap(), vec![2.0, 2.0, 3.0, 4.0, 4.0]);
        assert_eq!(interpolate_missing(&[None, None]), Err(Error::AllMissing));
    }

    #[test]
    fn mostly_zero_series_is_dropped() {
        let mut s = vec![Some(1.0), Some(2.0), Some(3.0), Some(4.0)];
        s.extend(std::iter::repeat(Some(0.0)).take(6));
        let out = clean_series(&s, &CleaningPolicy::default()).unwrap();
        assert!(matches!(out, CleanOutcome::Dropped { bad_fraction } if (bad_fraction - 0.6).abs() < 1e-12));
    }

    #[test]
    fn leading_zeros_are_not_bad() {
        let mut s = vec![Some(0.0); 20];
        s.extend((1..=10).map(|x| Some(x as f64)));
        let out = clean_series(&s, &CleaningPolicy::default()).unwrap();
        assert!(out.cleaned().is_some());
    }

    #[test]
    fn drop_rule_boundary() {
        // 30 cells after the first positive value: 3 bad is exactly 10%, 4 is above.
        let mut at = some(&(1..=30).map(|x| x as f64).collect::<Vec<_>>());
        for t in [5, 12, 20] {
            at[t] = None;
        }
        assert!(clean_series(&at, &CleaningPolicy::default()).unwrap().cleaned().is_some());
        let mut above = at.clone();
        above[25] = Some(0.0);
        assert!(matches!(
            clean_series(&above, &CleaningPolicy::default()).unwrap(),
            CleanOutcome::Dropped { .. }
        ));
    }

    #[test]
    fn constant_survives_smoothing() {
        let s = some(&[5.0; 8]);
        assert_eq!(clean_series(&s, &CleaningPolicy::default()).unwrap().cleaned().unwrap(), &[5.0; 8]);
    }

    #[test]
    fn running_max_examples() {
        assert_eq!(enforce_monotone(&[1.0, 2.0, 1.5, 3.0]), vec![1.0, 2.0, 2.0, 3.0]);
        assert_eq!(enforce_monotone(&[5.0, 0.0, 0.0, 6.0]), vec![5.0, 5.0, 5.0, 6.0]);
        assert_eq!(enforce_monotone(&[1.0, 1.0, 4.0]), vec![1.0, 1.0, 4.0]);
    }

    #[test]
    fn trailing_window_prefix() {
        let out = rolling_mean(&[1.0, 2.0, 3.0, 4.0], 3);
        assert_eq!(out, vec![1.0, 1.5, 2.0, 3.0]);
    }

    #[test]
    fn cumulative_max_repair_carries_forward() {
        let s = [Some(1.0), None, Some(0.5), Some(0.0), Some(3.0)];
        assert_eq!(repair_series(&s, RepairMode::CumulativeMax).unwrap(), vec![1.0, 1.0, 1.0, 1.0, 3.0]);
        assert_eq!(repair_series(&s, RepairMode::Both).unwrap(), vec![1.0, 1.0, 1.0, 1.75, 3.0]);
        assert_eq!(
            repair_series(&s, RepairMode::Interpolate).unwrap(),
            vec![1.0, 0.75, 0.5, 1.75, 3.0]
        );
    }

    fn series_strategy() -> impl Strategy<Value = Vec<Option<f64>>> {
        prop::collection::vec(prop::option::weighted(0.95, 0.0f64..100.0), 10..80)
            .prop_filter("needs a valid cell", |s| s.iter().any(Option::is_some))
    }

    proptest! {
        #[test]
        fn repair_is_idempotent(s in series_strategy()) {
            let policy = CleaningPolicy { window: 1, max_bad_fraction: 1.0, repair_mode: RepairMode::Both };
            let once = clean_series(&s, &policy).unwrap();
            let once = once.cleaned().unwrap().to_vec();
            let twice = clean_series(&once.iter().copied().map(Some).collect::<Vec<_>>(), &policy).unwrap();
            prop_assert_eq!(twice.cleaned().unwrap(), once.as_slice());
        }

        #[test]
        fn rolling_mean_stays_in_range(s in prop::collection::vec(-50.0f64..50.0, 1..60), w in 1usize..10) {
            let out = rolling_mean(&s, w);
            let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.iter().all(|&m| m >= lo && m <= hi));
        }

        #[test]
        fn rolling_mean_fixes_constants(c in -50.0f64..50.0, n in 1usize..40, w in 1usize..10) {
            let out = rolling_mean(&vec![c; n], w);
            prop_assert!(out.iter().all(|&m| m == c));
        }

        #[test]
        fn monotone_output(s in prop::collection::vec(-10.0f64..10.0, 0..60)) {
            let out = enforce_monotone(&s);
            prop_assert!(out.windows(2).all(|p| p[0] <= p[1]));
            prop_assert!(out.iter().zip(&s).all(|(o, i)| o >= i));
            prop_assert_eq!(enforce_monotone(&out), out);
        }
    }
}
