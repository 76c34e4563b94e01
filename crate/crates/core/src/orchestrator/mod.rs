//! The end-to-end healing loop and the reason-agnostic baseline strategies.
//!
//! Every strategy streams the scenario batches prequentially: predict, score,
//! feed the error to the detector, then react. The self-healing strategy
//! reacts to a drift signal by gathering a detection window, extracting
//! evidence, diagnosing, sampling candidate actions from the policy, scoring
//! them on the backtesting window, and deploying the empirical risk
//! minimizer before resetting the detector.

mod events;
mod experiment;
mod plot;

pub use events::{replay_events, write_events, EventLine};
pub use experiment::{
    corruption_order, diabetes_grid_scenario, run_experiment, run_study, CellResult,
    ExperimentConfig, ExperimentError, ResultTable, StudyName, DEFAULT_OUTLIER_FACTOR,
};
pub use plot::plot_lines;

use crate::adaptation::{self, Action, PolicyConfig};
use crate::backtest::{build_window, select_best, ActionEvaluation};
use crate::datagen::{build_stream, sub_seed, DatagenError, LabeledBatch, ScenarioSpec};
use crate::diagnosis::{
    self, aggregate_mc, DiagnosisConfig, DiagnosisVector, LlmDiagnosisConfig, ReasonSpace,
};
use crate::llm::{CompletionProvider, HttpProvider, ProviderConfig};
use crate::models::{accuracy, fit, SharedPredictor, WeightedEnsemble};
use crate::monitoring::{MonitorConfig, MonitorRecord, MonitorState, MonitorStatus};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error("llm diagnosis failed: {0}")]
    Diagnosis(String),
}

/// Which diagnoser the self-healing strategy runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DiagnoserKind {
    #[default]
    Statistical,
    Llm,
}

/// Component switches for the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    #[default]
    Full,
    /// Never trigger healing.
    NoMonitoring,
    /// Uniform diagnosis with no evidence-instantiated actions.
    NoDiagnosis,
    /// Empty action catalog.
    NoActions,
    /// Deploy the policy's first sampled action without evaluation.
    NoTesting,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfHealingConfig {
    pub diagnoser: DiagnoserKind,
    pub policy: PolicyConfig,
    /// Row cap of the backtesting window.
    pub backtest_cap: usize,
    pub diagnosis: DiagnosisConfig,
    pub ablation: AblationMode,
    /// Monte Carlo diagnosis samples aggregated on the LLM path.
    pub llm_mc_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_provider: Option<ProviderConfig>,
}

impl Default for SelfHealingConfig {
    fn default() -> Self {
        Self {
            diagnoser: DiagnoserKind::Statistical,
            policy: PolicyConfig::default(),
            backtest_cap: 2000,
            diagnosis: DiagnosisConfig::default(),
            ablation: AblationMode::Full,
            llm_mc_samples: 1,
            llm_provider: None,
        }
    }
}

/// The strategies compared by the studies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Strategy {
    NoRetraining,
    PartialUpdating { window: usize },
    NewModelTraining,
    EnsembleDdm,
    SelfHealing(SelfHealingConfig),
}

impl Strategy {
    pub fn self_healing() -> Self {
        Strategy::SelfHealing(SelfHealingConfig::default())
    }

    pub fn name(&self) -> String {
        match self {
            Strategy::NoRetraining => "no-retraining".into(),
            Strategy::PartialUpdating { .. } => "partial-updating".into(),
            Strategy::NewModelTraining => "new-model-training".into(),
            Strategy::EnsembleDdm => "ensemble-ddm".into(),
            Strategy::SelfHealing(cfg) => match cfg.ablation {
                AblationMode::Full => "self-healing".into(),
                AblationMode::NoMonitoring => "self-healing-no-monitoring".into(),
                AblationMode::NoDiagnosis => "self-healing-no-diagnosis".into(),
                AblationMode::NoActions => "self-healing-no-actions".into(),
                AblationMode::NoTesting => "self-healing-no-testing".into(),
            },
        }
    }
}

/// A detector status transition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftEvent {
    pub t: usize,
    pub status: MonitorStatus,
    pub score: f64,
}

/// One healing episode: the diagnosis, the candidate set, the backtest
/// evaluations, and what was deployed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealingEvent {
    pub t: usize,
    pub zeta: DiagnosisVector,
    pub reasons: Vec<String>,
    pub candidates: Vec<Action>,
    pub evaluations: Vec<ActionEvaluation>,
    pub deployed: Action,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub pre_level: f64,
    pub overall_accuracy: f64,
    pub post_intervention_accuracy: f64,
    /// Batches from the true shift onset until accuracy returns within delta
    /// of the pre-shift level; `None` when it never recovers.
    pub recovery_time: Option<usize>,
    pub shift_index: usize,
    pub n_batches: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: String,
    pub seed: u64,
    pub accuracy_series: Vec<f64>,
    pub monitor_log: Vec<MonitorRecord>,
    pub drift_events: Vec<DriftEvent>,
    pub healing_events: Vec<HealingEvent>,
    pub summary: RunSummary,
}

/// Recovery delta: accuracy must return within this of the pre-shift level.
pub const RECOVERY_DELTA: f64 = 0.02;

/// Recovery time and post-intervention accuracy for an accuracy series.
pub fn compute_metrics(
    series: &[f64],
    shift_index: usize,
    pre_level: f64,
    delta: f64,
) -> (Option<usize>, f64) {
    assert!(shift_index < series.len(), "series does not cover the shift");
    let recovery = series[shift_index..]
        .iter()
        .position(|&a| a >= pre_level - delta);
    let post = &series[shift_index..];
    let post_acc = post.iter().sum::<f64>() / post.len() as f64;
    (recovery, post_acc)
}

struct PendingHealing {
    drift_t: usize,
    warning_t: Option<usize>,
}

fn diagnose(
    cfg: &SelfHealingConfig,
    ev: &diagnosis::EvidenceReport,
    space: &ReasonSpace,
    provider: Option<&dyn CompletionProvider>,
) -> Result<DiagnosisVector, PipelineError> {
    match cfg.diagnoser {
        DiagnoserKind::Statistical => diagnosis::diagnose_statistical(ev, space, &cfg.diagnosis)
            .map_err(|e| PipelineError::Diagnosis(e.to_string())),
        DiagnoserKind::Llm => {
            let owned;
            let provider: &dyn CompletionProvider = match provider {
                Some(p) => p,
                None => {
                    owned = HttpProvider::new(cfg.llm_provider.clone().unwrap_or_default());
                    &owned
                }
            };
            let llm_cfg = LlmDiagnosisConfig::default();
            let mut samples = Vec::new();
            for _ in 0..cfg.llm_mc_samples.max(1) {
                match diagnosis::diagnose_llm(ev, space, provider, &llm_cfg) {
                    Ok(z) => samples.push(z),
                    Err(e) if samples.is_empty() => {
                        // surface the failure; the caller degrades to the
                        // statistical diagnoser
                        log::warn!("llm diagnosis failed: {e}; falling back to statistical");
                        return diagnosis::diagnose_statistical(ev, space, &cfg.diagnosis)
                            .map_err(|e| PipelineError::Diagnosis(e.to_string()));
                    }
                    Err(e) => {
                        log::warn!("llm diagnosis sample failed: {e}");
                        break;
                    }
                }
            }
            aggregate_mc(&samples).map_err(|e| PipelineError::Diagnosis(e.to_string()))
        }
    }
}

/// Run one pipeline over the scenario under the given strategy. Deterministic
/// given the scenario seed and `seed` (which drives policy sampling).
pub fn run_pipeline(
    scenario: &ScenarioSpec,
    strategy: &Strategy,
    monitor_cfg: &MonitorConfig,
    batch_size: usize,
    seed: u64,
) -> Result<RunResult, PipelineError> {
    run_pipeline_with_provider(scenario, strategy, monitor_cfg, batch_size, seed, None)
}

/// [`run_pipeline`] with an injected completion provider for the LLM path
/// (tests pass the scripted mock here).
pub fn run_pipeline_with_provider(
    scenario: &ScenarioSpec,
    strategy: &Strategy,
    monitor_cfg: &MonitorConfig,
    batch_size: usize,
    seed: u64,
    provider: Option<&dyn CompletionProvider>,
) -> Result<RunResult, PipelineError> {
    let bundle = build_stream(scenario, batch_size)?;
    let names = bundle.feature_names.clone();
    let space = ReasonSpace::canonical(&names);

    let initial: SharedPredictor = Arc::new(fit(&[bundle.train.clone()])?);
    let mut model: SharedPredictor = Arc::clone(&initial);

    // ensemble strategy state
    let mut members: Vec<SharedPredictor> = vec![Arc::clone(&initial)];
    let mut weights: Vec<f64> = vec![1.0];

    let mut monitor = MonitorState::new(*monitor_cfg);
    let mut buffers: Vec<LabeledBatch> = Vec::new();
    let mut series = Vec::with_capacity(bundle.batches.len());
    let mut monitor_log = Vec::new();
    let mut drift_events = Vec::new();
    let mut healing_events: Vec<HealingEvent> = Vec::new();

    let mut warning_start: Option<usize> = None;
    let mut last_status = MonitorStatus::InControl;
    let mut pending: Option<PendingHealing> = None;

    for batch in &bundle.batches {
        let t = batch.t;
        let acc = accuracy(model.as_ref(), batch);
        series.push(acc);
        let (status, score) = monitor.update(1.0 - acc, batch.n_rows());
        monitor_log.push(monitor.record(t));
        if status == MonitorStatus::Warning && last_status != MonitorStatus::Warning {
            drift_events.push(DriftEvent { t, status, score });
        }
        // a drift signal arriving while an episode is already pending is part
        // of the same episode, not a new event
        if status == MonitorStatus::Drift && last_status != MonitorStatus::Drift && pending.is_none()
        {
            drift_events.push(DriftEvent { t, status, score });
        }
        if status == MonitorStatus::Warning && last_status == MonitorStatus::InControl {
            warning_start = Some(t);
        }
        if status == MonitorStatus::InControl && pending.is_none() {
            warning_start = None;
        }
        last_status = status;

        buffers.push(batch.clone());

        match strategy {
            Strategy::NoRetraining => {}
            Strategy::PartialUpdating { window } => {
                // refit on the sliding buffer every batch
                let start = buffers.len().saturating_sub(*window);
                model = Arc::new(fit(&buffers[start..])?);
            }
            Strategy::NewModelTraining => {
                if status == MonitorStatus::Drift {
                    model = Arc::new(fit(std::slice::from_ref(buffers.last().unwrap()))?);
                    monitor.reset();
                    warning_start = None;
                    last_status = MonitorStatus::InControl;
                }
            }
            Strategy::EnsembleDdm => {
                if status == MonitorStatus::Drift {
                    let member: SharedPredictor =
                        Arc::new(fit(std::slice::from_ref(buffers.last().unwrap()))?);
                    members.push(member);
                    let last = buffers.last().unwrap();
                    weights = members
                        .iter()
                        .map(|m| accuracy(m.as_ref(), last).max(1e-6))
                        .collect();
                    model = Arc::new(WeightedEnsemble::new(members.clone(), weights.clone()));
                    monitor.reset();
                    warning_start = None;
                    last_status = MonitorStatus::InControl;
                }
            }
            Strategy::SelfHealing(cfg) if cfg.ablation != AblationMode::NoMonitoring => {
                if pending.is_none() && status == MonitorStatus::Drift {
                    pending = Some(PendingHealing { drift_t: t, warning_t: warning_start });
                }
                let due = pending
                    .as_ref()
                    .map(|p| t >= p.drift_t + monitor_cfg.detection_window)
                    .unwrap_or(false);
                if due {
                    let p = pending.take().unwrap();
                    let event = heal(
                        cfg,
                        &mut model,
                        &buffers,
                        &bundle.train,
                        &names,
                        &space,
                        p,
                        t,
                        monitor_cfg,
                        sub_seed(seed, 0xAC710 + healing_events.len() as u64),
                        provider,
                    )?;
                    healing_events.push(event);
                    monitor.reset();
                    warning_start = None;
                    last_status = MonitorStatus::InControl;
                }
            }
            Strategy::SelfHealing(_) => {}
        }
    }

    let shift_index = bundle.shift_index;
    let pre_level = if shift_index > 0 {
        series[..shift_index].iter().sum::<f64>() / shift_index as f64
    } else {
        series.iter().sum::<f64>() / series.len() as f64
    };
    let (recovery_time, post_acc) = if shift_index < series.len() {
        compute_metrics(&series, shift_index, pre_level, RECOVERY_DELTA)
    } else {
        (Some(0), pre_level)
    };
    let overall = series.iter().sum::<f64>() / series.len() as f64;

    Ok(RunResult {
        strategy: strategy.name(),
        seed,
        summary: RunSummary {
            pre_level,
            overall_accuracy: overall,
            post_intervention_accuracy: post_acc,
            recovery_time,
            shift_index,
            n_batches: series.len(),
        },
        accuracy_series: series,
        monitor_log,
        drift_events,
        healing_events,
    })
}

#[allow(clippy::too_many_arguments)]
fn heal(
    cfg: &SelfHealingConfig,
    model: &mut SharedPredictor,
    buffers: &[LabeledBatch],
    train: &LabeledBatch,
    names: &[String],
    space: &ReasonSpace,
    pending: PendingHealing,
    t: usize,
    monitor_cfg: &MonitorConfig,
    event_seed: u64,
    provider: Option<&dyn CompletionProvider>,
) -> Result<HealingEvent, PipelineError> {
    let window = build_window(
        buffers,
        pending.warning_t,
        t,
        monitor_cfg.detection_window.max(1),
        cfg.backtest_cap,
    );

    // diagnosis (evidence is skipped entirely under the no-diagnosis ablation)
    let (zeta, evidence) = if cfg.ablation == AblationMode::NoDiagnosis {
        (DiagnosisVector::uniform(space.len()), None)
    } else {
        let ev = diagnosis::extract_evidence(
            std::slice::from_ref(train),
            &window.batches,
            model.as_ref(),
            names,
            None,
        )
        .map_err(|e| PipelineError::Diagnosis(e.to_string()))?;
        let zeta = diagnose(cfg, &ev, space, provider)?;
        (zeta, Some(ev))
    };

    let policy = PolicyConfig { seed: event_seed, ..cfg.policy.clone() };

    // candidate generation
    let candidates = if cfg.ablation == AblationMode::NoActions {
        vec![Action::NoOp]
    } else {
        adaptation::propose_actions(&zeta, space, evidence.as_ref(), &policy)
    };

    let (deployed, evaluations, predictor) = if cfg.ablation == AblationMode::NoTesting {
        // deploy the first raw policy draw unevaluated
        let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(event_seed);
        let action =
            adaptation::sample_action(&zeta, space, evidence.as_ref(), &policy, &mut rng);
        match adaptation::apply(&action, model, &window.batches, names) {
            Ok(p) => (action, Vec::new(), p),
            Err(e) => {
                log::debug!("untested action {action} infeasible: {e}; degrading to no-op");
                (Action::NoOp, Vec::new(), Arc::clone(model))
            }
        }
    } else {
        let (fit_part, eval_part) = window.split_for_eval();
        let (best, evals, evaluated) =
            select_best(&candidates, model, &fit_part, &eval_part, names);
        // deploy the winner refit on the whole window (selection stays
        // out-of-sample; deployment uses all gathered data)
        let final_predictor = if best == Action::NoOp {
            evaluated
        } else {
            match adaptation::apply(&best, model, &window.batches, names) {
                Ok(p) => p,
                Err(_) => evaluated,
            }
        };
        (best, evals, final_predictor)
    };

    *model = predictor;
    Ok(HealingEvent {
        t,
        reasons: space.reasons.iter().map(|r| r.to_string()).collect(),
        zeta,
        candidates,
        evaluations,
        deployed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::diabetes_scenario;

    fn small_scenario(seed: u64) -> ScenarioSpec {
        ScenarioSpec { n_pre: 2000, n_post: 2000, ..diabetes_scenario(None, seed) }
    }

    #[test]
    fn no_retraining_model_is_constant() {
        let scenario = small_scenario(3);
        let result = run_pipeline(
            &scenario,
            &Strategy::NoRetraining,
            &MonitorConfig::default(),
            200,
            0,
        )
        .unwrap();
        assert_eq!(result.healing_events.len(), 0);
        assert_eq!(result.accuracy_series.len(), result.summary.n_batches);
        // identical pre/post is not this scenario; the shift drops accuracy
        assert!(result.summary.post_intervention_accuracy < result.summary.pre_level);
    }

    #[test]
    fn null_scenario_shows_no_drop() {
        let mut scenario = small_scenario(5);
        scenario.post = scenario.pre.clone();
        let result = run_pipeline(
            &scenario,
            &Strategy::NoRetraining,
            &MonitorConfig::default(),
            200,
            0,
        )
        .unwrap();
        assert!(
            (result.summary.post_intervention_accuracy - result.summary.pre_level).abs() < 0.05
        );
    }

    #[test]
    fn metrics_flat_series_recovers_immediately() {
        let series = vec![0.8; 10];
        let (rec, post) = compute_metrics(&series, 5, 0.8, 0.02);
        assert_eq!(rec, Some(0));
        assert!((post - 0.8).abs() < 1e-12);
    }

    #[test]
    fn metrics_step_series_counts_recovery_batches() {
        let mut series = vec![0.8; 5];
        series.extend(vec![0.5; 4]);
        series.extend(vec![0.79; 3]);
        let (rec, _) = compute_metrics(&series, 5, 0.8, 0.02);
        assert_eq!(rec, Some(4));
    }

    #[test]
    fn metrics_never_recovered_is_none() {
        let mut series = vec![0.8; 5];
        series.extend(vec![0.5; 5]);
        let (rec, post) = compute_metrics(&series, 5, 0.8, 0.02);
        assert_eq!(rec, None);
        assert!((post - 0.5).abs() < 1e-12);
    }

    #[test]
    fn self_healing_heals_and_accounts_once_per_drift() {
        let scenario = small_scenario(11);
        let result = run_pipeline(
            &scenario,
            &Strategy::self_healing(),
            &MonitorConfig::default(),
            200,
            7,
        )
        .unwrap();
        let drifts = result
            .drift_events
            .iter()
            .filter(|e| e.status == MonitorStatus::Drift)
            .count();
        assert!(drifts >= 1, "no drift detected");
        assert_eq!(result.healing_events.len(), drifts);
        for ev in &result.healing_events {
            assert!(ev.candidates.contains(&Action::NoOp));
        }
        assert!(result.summary.post_intervention_accuracy > 0.6);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let scenario = small_scenario(13);
        let run = || {
            run_pipeline(
                &scenario,
                &Strategy::self_healing(),
                &MonitorConfig::default(),
                200,
                3,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.accuracy_series, b.accuracy_series);
        assert_eq!(a.healing_events.len(), b.healing_events.len());
        for (x, y) in a.healing_events.iter().zip(&b.healing_events) {
            assert_eq!(x.deployed, y.deployed);
        }
    }

    #[test]
    fn deployed_risk_never_exceeds_noop_risk() {
        let scenario = small_scenario(17);
        let result = run_pipeline(
            &scenario,
            &Strategy::self_healing(),
            &MonitorConfig::default(),
            200,
            1,
        )
        .unwrap();
        for ev in &result.healing_events {
            let noop = ev
                .evaluations
                .iter()
                .find(|e| e.action == Action::NoOp)
                .expect("noop evaluated");
            let deployed = ev
                .evaluations
                .iter()
                .find(|e| e.action == ev.deployed)
                .expect("deployed evaluated");
            assert!(deployed.risk <= noop.risk);
        }
    }
}
