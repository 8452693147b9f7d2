//! Feasibility of schedules: every entry non-negative and both sequences
//! nonincreasing (plateaus allowed).

use serde::{Deserialize, Serialize};

use crate::dataset::{Schedule, TrialSetup};
use crate::scalar::Scalar;

/// Share of the required weight recorded for a candidate that is refused
/// without being run.
pub const PENALTY_FRACTION: f64 = 0.10;

/// Default repair budget as a fraction of the schedule's Euclidean norm.
pub const DEFAULT_REPAIR_FRACTION: f64 = 0.20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sequence {
    Valve,
    Switch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Negative,
    /// The entry is larger than its predecessor.
    Increase,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub sequence: Sequence,
    pub index: usize,
    pub kind: ViolationKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub nonneg_ok: bool,
    pub valve_monotone_ok: bool,
    pub switch_monotone_ok: bool,
    pub violations: Vec<Violation>,
}

impl ConstraintReport {
    pub fn is_valid(&self) -> bool {
        self.nonneg_ok && self.valve_monotone_ok && self.switch_monotone_ok
    }

    pub fn monotone_ok(&self) -> bool {
        self.valve_monotone_ok && self.switch_monotone_ok
    }

    /// Distinct `(sequence, index)` pairs that break a constraint.
    pub fn violating_indices(&self) -> Vec<(Sequence, usize)> {
        let mut out: Vec<(Sequence, usize)> = Vec::new();
        for v in &self.violations {
            if !out.contains(&(v.sequence, v.index)) {
                out.push((v.sequence, v.index));
            }
        }
        out
    }
}

fn scan(xs: &[f64], seq: Sequence, out: &mut Vec<Violation>) -> (bool, bool) {
    let (mut nonneg, mut mono) = (true, true);
    for (i, &x) in xs.iter().enumerate() {
        if !(x >= 0.0) {
            nonneg = false;
            out.push(Violation {
                sequence: seq,
                index: i,
                kind: ViolationKind::Negative,
            });
        }
        if i > 0 && !(x <= xs[i - 1]) {
            mono = false;
            out.push(Violation {
                sequence: seq,
                index: i,
                kind: ViolationKind::Increase,
            });
        }
    }
    (nonneg, mono)
}

pub fn check(s: &Schedule) -> ConstraintReport {
    let mut violations = Vec::new();
    let (v_nonneg, v_mono) = scan(&s.valve_degrees, Sequence::Valve, &mut violations);
    let (s_nonneg, s_mono) = scan(&s.switching_weights, Sequence::Switch, &mut violations);
    ConstraintReport {
        nonneg_ok: v_nonneg && s_nonneg,
        valve_monotone_ok: v_mono,
        switch_monotone_ok: s_mono,
        violations,
    }
}

/// Least-squares nonincreasing fit by pool-adjacent-violators.
pub fn pav_nonincreasing<T: Scalar>(xs: &[T]) -> Vec<T> {
    // Each block holds (sum, count); merging keeps block means nonincreasing.
    let mut blocks: Vec<(T, usize)> = Vec::with_capacity(xs.len());
    for &x in xs {
        blocks.push((x, 1));
        while blocks.len() > 1 {
            let (s2, n2) = blocks[blocks.len() - 1];
            let (s1, n1) = blocks[blocks.len() - 2];
            let mean1 = s1 / T::from_usize(n1).unwrap();
            let mean2 = s2 / T::from_usize(n2).unwrap();
            if mean2 > mean1 {
                blocks.pop();
                let last = blocks.last_mut().unwrap();
                *last = (s1 + s2, n1 + n2);
            } else {
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(xs.len());
    for (sum, n) in blocks {
        let mean = sum / T::from_usize(n).unwrap();
        out.extend(std::iter::repeat_n(mean, n));
    }
    out
}

/// Euclidean projection of one sequence onto the set of nonincreasing,
/// non-negative sequences.
pub fn project_sequence<T: Scalar>(xs: &[T]) -> Vec<T> {
    pav_nonincreasing(xs)
        .into_iter()
        .map(|x| x.max(T::zero()))
        .collect()
}

/// Projects the valve and switching sequences independently.
pub fn project(s: &Schedule) -> Schedule {
    let v = project_sequence(&s.valve_degrees);
    let w = project_sequence(&s.switching_weights);
    let mut out = s.clone();
    out.valve_degrees.copy_from_slice(&v);
    out.switching_weights.copy_from_slice(&w);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Classification {
    Valid,
    Repairable { projected: Schedule, distance: f64 },
    Reject { distance: f64 },
}

/// Valid, repairable within `max_repair_dist`, or rejected. With `None` the
/// budget is [`DEFAULT_REPAIR_FRACTION`] of the schedule's norm.
pub fn classify(s: &Schedule, max_repair_dist: Option<f64>) -> Classification {
    if check(s).is_valid() {
        return Classification::Valid;
    }
    let flat = s.to_flat();
    let budget = max_repair_dist.unwrap_or(DEFAULT_REPAIR_FRACTION * crate::scalar::norm(&flat));
    let projected = project(s);
    let distance = crate::scalar::distance(&flat, &projected.to_flat());
    if distance <= budget {
        Classification::Repairable { projected, distance }
    } else {
        Classification::Reject { distance }
    }
}

pub fn penalty_error(setup: &TrialSetup) -> f64 {
    PENALTY_FRACTION * setup.required_weight
}
