use crate::data::{Dataset, FittedSpec};
use crate::error::{Error, Result};

/// Risk sets at the distinct visit times of a dataset.
///
/// Membership at event time `s` follows the left-continuous at-risk
/// process: row `(start, end]` with `at_risk` belongs to the risk set iff
/// `start < s <= end`. Members are kept in row order so every sum over a
/// risk set has a fixed summation order.
#[derive(Debug, Clone)]
pub struct RiskSets {
    event_times: Vec<f64>,
    offsets: Vec<usize>,
    members: Vec<usize>,
    /// Event index of each visit, aligned with `Dataset::visit_rows`.
    visit_event: Vec<usize>,
    /// Position in `members` of each visit row at its own event time.
    visit_slot: Vec<usize>,
    n_patients: usize,
}

impl RiskSets {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let mut event_times: Vec<f64> = dataset
            .visit_rows()
            .iter()
            .map(|&r| dataset.interval(r).end)
            .collect();
        event_times.sort_by(f64::total_cmp);
        event_times.dedup();

        let k = event_times.len();
        let span = |start: f64, end: f64| {
            let lo = event_times.partition_point(|&e| e <= start);
            let hi = event_times.partition_point(|&e| e <= end);
            lo..hi
        };
        let mut counts = vec![0usize; k + 1];
        for iv in dataset.intervals() {
            if iv.at_risk {
                for e in span(iv.start, iv.end) {
                    counts[e + 1] += 1;
                }
            }
        }
        for e in 0..k {
            counts[e + 1] += counts[e];
        }
        let offsets = counts;
        let mut cursor = offsets.clone();
        let mut members = vec![0usize; offsets[k]];
        let mut slot_of_row = vec![usize::MAX; dataset.len()];
        for (r, iv) in dataset.intervals().iter().enumerate() {
            if !iv.at_risk {
                continue;
            }
            for e in span(iv.start, iv.end) {
                members[cursor[e]] = r;
                if iv.visit && event_times[e] == iv.end {
                    slot_of_row[r] = cursor[e];
                }
                cursor[e] += 1;
            }
        }
        for e in 0..k {
            if offsets[e + 1] == offsets[e] {
                return Err(Error::EmptyRiskSet(event_times[e]));
            }
        }
        let mut visit_event = Vec::with_capacity(dataset.n_visits());
        let mut visit_slot = Vec::with_capacity(dataset.n_visits());
        for &r in dataset.visit_rows() {
            let end = dataset.interval(r).end;
            visit_event.push(event_times.partition_point(|&x| x < end));
            visit_slot.push(slot_of_row[r]);
        }
        Ok(Self {
            event_times,
            offsets,
            members,
            visit_event,
            visit_slot,
            n_patients: dataset.n_patients(),
        })
    }

    pub fn n_events(&self) -> usize {
        self.event_times.len()
    }

    pub fn event_times(&self) -> &[f64] {
        &self.event_times
    }

    /// Slot range of event `k` in the flattened member list.
    pub fn slots(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn n_slots(&self) -> usize {
        self.members.len()
    }

    pub fn visit_event(&self) -> &[usize] {
        &self.visit_event
    }

    pub fn visit_slot(&self) -> &[usize] {
        &self.visit_slot
    }

    pub fn n_patients(&self) -> usize {
        self.n_patients
    }

    /// Evaluates `spec` for every risk-set slot at that slot's event time.
    /// Row-major, `n_slots x spec.dim()`.
    pub fn evaluate(&self, dataset: &Dataset, spec: &FittedSpec) -> Vec<f64> {
        let p = spec.dim();
        let mut out = vec![0.0; self.members.len() * p];
        if p == 0 {
            return out;
        }
        for k in 0..self.n_events() {
            let t = self.event_times[k];
            for s in self.slots(k) {
                let r = self.members[s];
                spec.eval_into(dataset.covariates_of(r), t, &mut out[s * p..(s + 1) * p]);
            }
        }
        out
    }
}
