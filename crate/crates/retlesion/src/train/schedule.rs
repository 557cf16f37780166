//! Patience-based learning-rate schedule. Improvement means a strictly
//! higher validation score. After `lr_patience` non-improving validations
//! since the last reduction the rate is divided by `lr_factor` (the first
//! reduction also switches the segmentation loss to the dual loss); after
//! `stop_patience` consecutive non-improvements training stops.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScheduleState {
    pub lr: f64,
    pub best_score: f64,
    /// Consecutive non-improving validations since the last improvement.
    pub non_improve_count: u32,
    /// Non-improving validations since the last LR reduction.
    pub since_reduction: u32,
    pub lr_reductions: u32,
    pub using_dual: bool,
    pub stopped: bool,
}

impl ScheduleState {
    pub fn new(lr0: f64) -> Self {
        ScheduleState {
            lr: lr0,
            best_score: f64::NEG_INFINITY,
            non_improve_count: 0,
            since_reduction: 0,
            lr_reductions: 0,
            using_dual: false,
            stopped: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleEvent {
    Improved,
    LrReduced,
    LossSwitched,
    Stopped,
}

pub fn schedule_update(
    state: &mut ScheduleState,
    val_score: f64,
    lr_patience: u32,
    stop_patience: u32,
    lr_factor: f64,
) -> Result<Vec<ScheduleEvent>> {
    if !val_score.is_finite() {
        return Err(Error::NonFinite(format!(
            "validation score {val_score} is not finite"
        )));
    }
    if state.stopped {
        return Err(Error::InvalidInput(
            "schedule already stopped".into(),
        ));
    }
    let mut events = Vec::new();
    if val_score > state.best_score {
        state.best_score = val_score;
        state.non_improve_count = 0;
        state.since_reduction = 0;
        events.push(ScheduleEvent::Improved);
        return Ok(events);
    }
    state.non_improve_count += 1;
    state.since_reduction += 1;
    if state.since_reduction >= lr_patience {
        state.lr /= lr_factor;
        state.lr_reductions += 1;
        state.since_reduction = 0;
        events.push(ScheduleEvent::LrReduced);
        if !state.using_dual {
            state.using_dual = true;
            events.push(ScheduleEvent::LossSwitched);
        }
    }
    if state.non_improve_count >= stop_patience {
        state.stopped = true;
        events.push(ScheduleEvent::Stopped);
    }
    Ok(events)
}
