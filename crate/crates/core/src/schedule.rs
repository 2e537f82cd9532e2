//! Staggered-start schedule and image-iteration accounting.

use serde::{Deserialize, Serialize};

use crate::error::{DeltError, Result};
use crate::types::RecoveryConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub subbatch_index: usize,
    pub start_iteration: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EarlyLateSchedule {
    pub ipc: usize,
    pub num_subbatches: usize,
    pub subbatch_size: usize,
    pub max_iterations: usize,
    pub round_iterations: usize,
    pub entries: Vec<ScheduleEntry>,
}

/// Sub-batch `b` starts at `b * RI` and runs to `MI`.
pub fn make_schedule(ipc: usize, num_subbatches: usize, max_iterations: usize, round_iterations: usize) -> Result<EarlyLateSchedule> {
    if ipc == 0 || num_subbatches == 0 {
        return Err(DeltError::Config("ipc and num_subbatches must be >= 1".into()));
    }
    if ipc % num_subbatches != 0 {
        return Err(DeltError::Config(format!(
            "ipc {ipc} is not divisible by num_subbatches {num_subbatches}"
        )));
    }
    let consumed = (num_subbatches - 1) * round_iterations;
    if max_iterations <= consumed {
        return Err(DeltError::EmptyLastSubbatch {
            max_iterations,
            consumed,
        });
    }
    let entries = (0..num_subbatches)
        .map(|b| ScheduleEntry {
            subbatch_index: b,
            start_iteration: b * round_iterations,
            length: max_iterations - b * round_iterations,
        })
        .collect();
    Ok(EarlyLateSchedule {
        ipc,
        num_subbatches,
        subbatch_size: ipc / num_subbatches,
        max_iterations,
        round_iterations,
        entries,
    })
}

impl EarlyLateSchedule {
    pub fn from_config(config: &RecoveryConfig) -> Result<Self> {
        make_schedule(
            config.ipc,
            config.num_subbatches,
            config.max_iterations,
            config.round_iterations,
        )
    }

    pub fn subbatch_of(&self, ipc_index: usize) -> usize {
        ipc_index / self.subbatch_size
    }

    /// Sub-batches that have started by iteration `t`.
    pub fn active_subbatches(&self, t: usize) -> Result<Vec<usize>> {
        if t >= self.max_iterations {
            return Err(DeltError::IterationOutOfRange {
                t,
                max_iterations: self.max_iterations,
            });
        }
        Ok(self
            .entries
            .iter()
            .take_while(|e| e.start_iteration <= t)
            .map(|e| e.subbatch_index)
            .collect())
    }

    /// Sub-batches whose start iteration is exactly `t`.
    pub fn joining_at(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .filter(move |e| e.start_iteration == t)
            .map(|e| e.subbatch_index)
    }

    /// Per-class image-iterations: `ipc * MI - k * RI * M (M - 1) / 2`.
    pub fn total_image_iterations(&self) -> u64 {
        let (ipc, m, k) = (self.ipc as u64, self.num_subbatches as u64, self.subbatch_size as u64);
        ipc * self.max_iterations as u64 - k * self.round_iterations as u64 * m * (m - 1) / 2
    }

    /// Image-iterations of the constant-iteration baseline, `ipc * MI`.
    pub fn baseline_image_iterations(&self) -> u64 {
        self.ipc as u64 * self.max_iterations as u64
    }

    /// Fraction of baseline image-iterations saved: `RI (M - 1) / (2 MI)`.
    pub fn savings_ratio(&self) -> f64 {
        (self.round_iterations * (self.num_subbatches - 1)) as f64 / (2 * self.max_iterations) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(s: &EarlyLateSchedule) -> u64 {
        (0..s.max_iterations)
            .map(|t| (s.active_subbatches(t).unwrap().len() * s.subbatch_size) as u64)
            .sum()
    }

    #[test]
    fn eight_subbatches() {
        let s = make_schedule(8, 8, 4000, 500).unwrap();
        let starts: Vec<_> = s.entries.iter().map(|e| e.start_iteration).collect();
        let lengths: Vec<_> = s.entries.iter().map(|e| e.length).collect();
        assert_eq!(starts, (0..8).map(|b| b * 500).collect::<Vec<_>>());
        assert_eq!(lengths, (0..8).map(|b| 4000 - b * 500).collect::<Vec<_>>());
        assert_eq!(*lengths.last().unwrap(), 500);
        assert_eq!(s.total_image_iterations(), 18000);
        assert_eq!(s.savings_ratio(), 0.4375);
        assert_eq!(s.active_subbatches(499).unwrap(), vec![0]);
        assert_eq!(s.active_subbatches(500).unwrap(), vec![0, 1]);
        assert_eq!(s.active_subbatches(3999).unwrap().len(), 8);
        assert!(s.active_subbatches(4000).is_err());
    }

    #[test]
    fn degenerate_single_subbatch() {
        let s = make_schedule(10, 1, 4000, 12345).unwrap();
        assert_eq!(s.entries, vec![ScheduleEntry { subbatch_index: 0, start_iteration: 0, length: 4000 }]);
        assert_eq!(s.total_image_iterations(), 40000);
        assert_eq!(s.savings_ratio(), 0.0);
    }

    #[test]
    fn four_subbatches() {
        let s = make_schedule(4, 4, 4000, 1000).unwrap();
        assert_eq!(s.total_image_iterations(), 10000);
        assert_eq!(s.savings_ratio(), 0.375);
    }

    #[test]
    fn empty_last_subbatch() {
        let err = make_schedule(8, 8, 3000, 500).unwrap_err();
        assert!(err.to_string().starts_with("last sub-batch has no iterations"), "{err}");
        assert!(make_schedule(8, 8, 3500, 500).is_err());
        assert!(make_schedule(8, 8, 3501, 500).is_ok());
    }

    fn valid_schedule() -> impl Strategy<Value = EarlyLateSchedule> {
        (1usize..=8, 1usize..=5, 0usize..=60, 1usize..=40).prop_map(|(m, k, ri, extra)| {
            let mi = (m - 1) * ri + extra;
            make_schedule(m * k, m, mi, ri).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn closed_form_matches_brute_force(s in valid_schedule()) {
            prop_assert_eq!(s.total_image_iterations(), brute_force(&s));
            let ratio = 1.0 - s.total_image_iterations() as f64 / s.baseline_image_iterations() as f64;
            prop_assert!((ratio - s.savings_ratio()).abs() < 1e-12);
            prop_assert!((0.0..1.0).contains(&s.savings_ratio()));
        }

        #[test]
        fn entries_end_together(s in valid_schedule()) {
            prop_assert_eq!(s.entries[0].start_iteration, 0);
            prop_assert_eq!(s.entries[0].length, s.max_iterations);
            for e in &s.entries {
                prop_assert_eq!(e.start_iteration + e.length, s.max_iterations);
                prop_assert!(e.length >= 1);
            }
            for w in s.entries.windows(2) {
                prop_assert_eq!(w[1].start_iteration - w[0].start_iteration, s.round_iterations);
            }
        }

        #[test]
        fn active_count(s in valid_schedule(), frac in 0.0f64..1.0) {
            let t = ((s.max_iterations as f64 * frac) as usize).min(s.max_iterations - 1);
            let active = s.active_subbatches(t).unwrap();
            let expected = if s.round_iterations == 0 {
                s.num_subbatches
            } else {
                s.num_subbatches.min(t / s.round_iterations + 1)
            };
            prop_assert_eq!(active.len(), expected);
            if t + 1 < s.max_iterations {
                prop_assert!(s.active_subbatches(t + 1).unwrap().len() >= active.len());
            }
        }

        #[test]
        fn savings_increase_with_m(m in 2usize..8, ri in 1usize..50, extra in 1usize..50) {
            let mi = m * ri + extra;
            let a = make_schedule(m, m, mi, ri).unwrap();
            let b = make_schedule(m + 1, m + 1, mi, ri).unwrap();
            prop_assert!(b.savings_ratio() > a.savings_ratio());
        }
    }
}
