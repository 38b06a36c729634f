//! Tree-size planning: maximize expected accepted tokens per unit of estimated iteration time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost_model::CostModel;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub resize_batch_delta: usize,
    pub resize_seqlen_delta: usize,
    pub replan_period: u64,
    pub size_candidates: Vec<usize>,
    /// Score sizes by `(l + 1) / T` instead of `l / T`, crediting the bonus token.
    pub count_bonus_token: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            resize_batch_delta: 1,
            resize_seqlen_delta: 256,
            replan_period: 64,
            size_candidates: vec![1, 2, 4, 8, 16, 32, 64],
            count_bonus_token: false,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.resize_batch_delta == 0 || self.resize_seqlen_delta == 0 || self.replan_period == 0 {
            return Err("scheduler deltas and replan_period must be positive".into());
        }
        if self.size_candidates.is_empty() || self.size_candidates.contains(&0) {
            return Err("size_candidates must be a non-empty list of positive sizes".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeChoice {
    pub size: usize,
    /// `(size, speed)` for every size with a positive time estimate, ascending by size.
    pub speeds: Vec<(usize, f64)>,
}

/// Single scan for `argmax_i l(i) / T_est(i)`; ties go to the smaller size. Falls back to
/// size 1 when no candidate has a positive time estimate.
pub fn choose_size<T: Real>(l_curve: &BTreeMap<usize, T>, cost: &CostModel<T>) -> usize {
    choose_size_detailed(l_curve, cost, false).size
}

pub fn choose_size_detailed<T: Real>(
    l_curve: &BTreeMap<usize, T>,
    cost: &CostModel<T>,
    count_bonus: bool,
) -> SizeChoice {
    let mut best: Option<(usize, T)> = None;
    let mut speeds = Vec::with_capacity(l_curve.len());
    for (&size, &l) in l_curve {
        let t = cost.estimate(size);
        if !(t > T::zero()) || !t.is_finite() {
            continue;
        }
        let gain = if count_bonus { l + T::one() } else { l };
        let v = gain / t;
        speeds.push((size, v.as_f64()));
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((size, v));
        }
    }
    SizeChoice {
        size: best.map_or(1, |(s, _)| s),
        speeds,
    }
}

/// Decode conditions the last plan was made under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlanPoint {
    pub iteration: u64,
    pub batch: usize,
    pub mean_seqlen: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplanTrigger {
    Initial,
    Batch,
    SeqLen,
    Period,
    Warmup,
}

/// Why a replan is due now, if it is.
pub fn should_replan(
    now: &PlanPoint,
    last: Option<&PlanPoint>,
    config: &SchedulerConfig,
) -> Option<ReplanTrigger> {
    let Some(last) = last else {
        return Some(ReplanTrigger::Initial);
    };
    if now.batch.abs_diff(last.batch) >= config.resize_batch_delta {
        Some(ReplanTrigger::Batch)
    } else if (now.mean_seqlen - last.mean_seqlen).abs() >= config.resize_seqlen_delta as f64 {
        Some(ReplanTrigger::SeqLen)
    } else if now.iteration.saturating_sub(last.iteration) >= config.replan_period {
        Some(ReplanTrigger::Period)
    } else {
        None
    }
}
