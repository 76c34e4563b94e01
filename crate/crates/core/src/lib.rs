//! Self-healing for deployed classifiers on drifting tabular streams.
//!
//! A deployed binary classifier `f` is paired with a healing mechanism made of
//! four components:
//!
//! 1. **monitoring** — a DDM-style detector over the batch error stream that
//!    emits a degradation score in `[0, 1]` and an
//!    in-control / warning / drift status;
//! 2. **diagnosis** — an evidence extractor plus diagnosers that turn the
//!    before/after evidence into a probability distribution over a finite
//!    space of degradation reasons;
//! 3. **adaptation** — a structured action catalog and a hierarchical,
//!    diagnosis-conditioned policy that samples candidate actions;
//! 4. **backtest** — a backtesting window assembled between estimated shift
//!    onset and detection, on which candidates are scored and the empirical
//!    risk minimizer is deployed.
//!
//! [`orchestrator`] wires the loop end to end, implements four reason-agnostic
//! baseline strategies, and drives the experiment studies. [`datagen`]
//! provides the synthetic diabetes stream the studies run on. [`llm`] is an
//! optional chat-completion backend for the diagnosis step; everything in the
//! test suite runs against its deterministic mock.

pub mod adaptation;
pub mod backtest;
pub mod datagen;
pub mod diagnosis;
pub mod llm;
pub mod models;
pub mod monitoring;
pub mod orchestrator;

pub use adaptation::{Action, PolicyConfig, Predicate};
pub use backtest::{build_window, select_best, ActionEvaluation, BacktestWindow};
pub use datagen::{
    build_stream, CorruptionMode, CorruptionSpec, DgpParams, FeatureSpec, LabeledBatch,
    ScenarioSpec, StreamBundle,
};
pub use diagnosis::{DiagnosisVector, EvidenceReport, Reason, ReasonSpace};
pub use models::{accuracy, fit, LogisticModel, Predictor, WeightedEnsemble};
pub use monitoring::{MonitorConfig, MonitorState, MonitorStatus};
pub use orchestrator::{run_pipeline, RunResult, SelfHealingConfig, Strategy};
