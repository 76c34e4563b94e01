//! Backtesting window assembly and empirical action selection.
//!
//! The window covers the interval between the estimated shift onset (the
//! first warning batch when one preceded the drift signal, otherwise the
//! last `detection_window` batches) and the healing time. Candidates are
//! fitted on data preceding the evaluation slice and scored out of sample;
//! the argmin-risk action wins, with ties broken toward the earlier
//! candidate (no-op first by construction).

use crate::adaptation::{apply, Action};
use crate::datagen::LabeledBatch;
use crate::models::{accuracy, SharedPredictor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Post-onset batches available for fitting and scoring candidates.
#[derive(Debug, Clone)]
pub struct BacktestWindow {
    pub batches: Vec<LabeledBatch>,
}

impl BacktestWindow {
    pub fn rows(&self) -> usize {
        self.batches.iter().map(|b| b.n_rows()).sum()
    }

    /// Chronological split into (fit, eval): the most recent half of the
    /// batches scores candidates, everything before it may be fitted on.
    /// A single-batch window is split at the row level.
    pub fn split_for_eval(&self) -> (Vec<LabeledBatch>, LabeledBatch) {
        if self.batches.len() >= 2 {
            let n_eval = self.batches.len().div_ceil(2);
            let fit = self.batches[..self.batches.len() - n_eval].to_vec();
            let eval = LabeledBatch::concat(&self.batches[self.batches.len() - n_eval..]);
            (fit, eval)
        } else {
            let b = &self.batches[0];
            let half = (b.n_rows() / 2).max(1);
            let d = b.n_cols;
            let fit = LabeledBatch::new(b.x[..half * d].to_vec(), b.y[..half].to_vec(), d, b.t);
            let eval = if b.n_rows() > half {
                LabeledBatch::new(b.x[half * d..].to_vec(), b.y[half..].to_vec(), d, b.t)
            } else {
                fit.clone()
            };
            (vec![fit], eval)
        }
    }
}

/// Assemble the backtesting window from the stream buffers.
///
/// `buffers` holds every batch seen so far, indexed by `t`. The window spans
/// `[warning_time, detection_time]` when a warning preceded the drift, else
/// the last `detection_window` batches ending at `detection_time`; it is then
/// truncated to the `cap` most recent rows. An empty interval falls back to
/// the detection batch alone.
pub fn build_window(
    buffers: &[LabeledBatch],
    warning_time: Option<usize>,
    detection_time: usize,
    detection_window: usize,
    cap: usize,
) -> BacktestWindow {
    let detection_time = detection_time.min(buffers.len().saturating_sub(1));
    let start = match warning_time {
        Some(w) => w.min(detection_time),
        None => detection_time.saturating_sub(detection_window.saturating_sub(1).max(0)),
    };
    let mut batches: Vec<LabeledBatch> = buffers[start..=detection_time].to_vec();
    if batches.is_empty() {
        batches = vec![buffers[detection_time].clone()];
    }
    // trim oldest rows down to the cap
    let mut total: usize = batches.iter().map(|b| b.n_rows()).sum();
    while total > cap.max(1) && !batches.is_empty() {
        let excess = total - cap.max(1);
        let first_rows = batches[0].n_rows();
        if first_rows <= excess {
            total -= first_rows;
            batches.remove(0);
        } else {
            batches[0] = batches[0].tail(first_rows - excess);
            total -= excess;
        }
    }
    BacktestWindow { batches }
}

/// Outcome of evaluating one candidate on the window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionEvaluation {
    pub action: Action,
    /// 1 - accuracy under 0-1 loss; infinity for infeasible candidates.
    #[serde(with = "risk_sentinel")]
    pub risk: f64,
    pub accuracy: f64,
    pub feasible: bool,
}

/// JSON has no infinity; the infeasible sentinel round-trips as the string
/// "inf".
mod risk_sentinel {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            s.serialize_f64(*value)
        } else {
            s.serialize_str("inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Num(v) => v,
            Raw::Text(_) => f64::INFINITY,
        })
    }
}

/// Apply each candidate on the fit buffers, score it on the eval slice, and
/// return the empirical risk minimizer together with all evaluations and the
/// winning predictor. Candidate evaluations run in parallel and join in
/// candidate order, so ties resolve deterministically toward the earlier
/// (no-op first) entry.
pub fn select_best(
    candidates: &[Action],
    model: &SharedPredictor,
    fit_buffers: &[LabeledBatch],
    eval: &LabeledBatch,
    feature_names: &[String],
) -> (Action, Vec<ActionEvaluation>, SharedPredictor) {
    assert!(!candidates.is_empty(), "candidate set must not be empty");
    let results: Vec<(ActionEvaluation, Option<SharedPredictor>)> = candidates
        .par_iter()
        .map(|action| match apply(action, model, fit_buffers, feature_names) {
            Ok(predictor) => {
                let acc = accuracy(predictor.as_ref(), eval);
                (
                    ActionEvaluation {
                        action: action.clone(),
                        risk: 1.0 - acc,
                        accuracy: acc,
                        feasible: true,
                    },
                    Some(predictor),
                )
            }
            Err(e) => {
                log::debug!("candidate {action} infeasible: {e}");
                (
                    ActionEvaluation {
                        action: action.clone(),
                        risk: f64::INFINITY,
                        accuracy: 0.0,
                        feasible: false,
                    },
                    None,
                )
            }
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (i, (eval, predictor)) in results.iter().enumerate() {
        if predictor.is_none() {
            continue;
        }
        if best.map(|(_, r)| eval.risk < r).unwrap_or(true) {
            best = Some((i, eval.risk));
        }
    }
    let evaluations: Vec<ActionEvaluation> = results.iter().map(|(e, _)| e.clone()).collect();
    match best {
        Some((i, _)) => (
            candidates[i].clone(),
            evaluations,
            results[i].1.clone().expect("feasible winner"),
        ),
        // every candidate infeasible: fall back to the incumbent
        None => (Action::NoOp, evaluations, std::sync::Arc::clone(model)),
    }
}
