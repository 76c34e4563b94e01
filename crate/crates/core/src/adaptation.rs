//! Structured adaptation actions, the diagnosis-conditioned hierarchical
//! policy, and the interpreter that applies actions to a model and its data
//! buffers.
//!
//! Sampling is hierarchical: a reason is drawn from the diagnosis vector,
//! then an action template from that reason's menu, and the template is
//! instantiated from the evidence report (plausibility-boundary predicates,
//! estimated scale ratios, post-shift window sizes). Without evidence no
//! template beyond no-op can be instantiated, which is exactly the
//! diagnosis-ablation behavior.

use crate::datagen::LabeledBatch;
use crate::diagnosis::{DiagnosisVector, EvidenceReport, Reason, ReasonSpace};
use crate::models::{accuracy, fit, LogisticModel, Predictor, SharedPredictor, WeightedEnsemble};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdaptationError {
    #[error("action infeasible: {0}")]
    Infeasible(String),
    #[error("parse error at {span:?}: {msg}")]
    Parse { span: String, msg: String },
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Cmp {
    Lt,
    Gt,
    Le,
    Ge,
}

impl Cmp {
    pub fn eval(self, value: f64, threshold: f64) -> bool {
        match self {
            Cmp::Lt => value < threshold,
            Cmp::Gt => value > threshold,
            Cmp::Le => value <= threshold,
            Cmp::Ge => value >= threshold,
        }
    }
}

impl fmt::Display for Cmp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cmp::Lt => "<",
            Cmp::Gt => ">",
            Cmp::Le => "<=",
            Cmp::Ge => ">=",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub feature: String,
    pub cmp: Cmp,
    pub threshold: f64,
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // `{}` on f64 is the shortest representation that round-trips
        write!(f, "{} {} {}", self.feature, self.cmp, self.threshold)
    }
}

/// Conjunction of clauses; a row matches when every clause holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub clauses: Vec<Clause>,
}

impl Predicate {
    pub fn single(feature: impl Into<String>, cmp: Cmp, threshold: f64) -> Self {
        Self { clauses: vec![Clause { feature: feature.into(), cmp, threshold }] }
    }

    /// Resolve feature names to column indices; `None` when a name is absent.
    pub fn resolve(&self, feature_names: &[String]) -> Option<Vec<(usize, Cmp, f64)>> {
        self.clauses
            .iter()
            .map(|c| {
                feature_names
                    .iter()
                    .position(|n| n == &c.feature)
                    .map(|j| (j, c.cmp, c.threshold))
            })
            .collect()
    }

    pub fn matches(resolved: &[(usize, Cmp, f64)], row: &[f64]) -> bool {
        resolved.iter().all(|&(j, cmp, thr)| cmp.eval(row[j], thr))
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.clauses.len() == 1 {
            write!(f, "{}", self.clauses[0])
        } else {
            let parts: Vec<String> = self.clauses.iter().map(|c| format!("({c})")).collect();
            f.write_str(&parts.join(" & "))
        }
    }
}

/// The executable action catalog. Windows count batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    NoOp,
    RetrainNew { window: usize },
    PartialUpdate { window: usize },
    AddEnsembleMember { window: usize },
    RemoveSubgroupRetrain { predicates: Vec<Predicate> },
    DecorruptFeature { feature: String, scale: f64 },
    SubgroupModel { predicate: Predicate },
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::NoOp => write!(f, "no-op"),
            Action::RetrainNew { window } => write!(f, "retrain-new(window={window})"),
            Action::PartialUpdate { window } => write!(f, "partial-update(window={window})"),
            Action::AddEnsembleMember { window } => write!(f, "add-ensemble-member(window={window})"),
            Action::RemoveSubgroupRetrain { predicates } => {
                let parts: Vec<String> = predicates.iter().map(|p| p.to_string()).collect();
                write!(f, "remove-subgroup-retrain[{}]", parts.join("; "))
            }
            Action::DecorruptFeature { feature, scale } => {
                write!(f, "decorrupt({feature}, scale={scale:.4})")
            }
            Action::SubgroupModel { predicate } => write!(f, "subgroup-model({predicate})"),
        }
    }
}

/// Menu entry templates, instantiated from evidence at proposal time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionTemplate {
    NoOp,
    RetrainNew,
    PartialUpdate,
    AddEnsembleMember,
    RemoveSubgroupRetrain,
    DecorruptFeature,
    SubgroupModel,
}

/// Reason kinds index the per-reason menus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReasonKind {
    FeatureCorrupted,
    ConceptDrift,
    NoIssue,
}

impl ReasonKind {
    pub fn of(reason: &Reason) -> Self {
        match reason {
            Reason::FeatureCorrupted(_) => ReasonKind::FeatureCorrupted,
            Reason::ConceptDrift => ReasonKind::ConceptDrift,
            Reason::NoIssue => ReasonKind::NoIssue,
        }
    }
}

/// Hierarchical policy configuration: per-reason weighted action menus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Candidate actions sampled per healing event.
    pub m: usize,
    pub menus: BTreeMap<ReasonKind, Vec<(ActionTemplate, f64)>>,
    pub seed: u64,
    /// Window (batches) of the partial-update template.
    pub partial_update_window: usize,
    /// A column counts as flagged when its out-of-range fraction reaches this.
    pub oof_flag_threshold: f64,
    /// Features with a hard nonnegativity bound (domain knowledge).
    pub nonneg_features: Vec<String>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let mut menus = BTreeMap::new();
        menus.insert(
            ReasonKind::FeatureCorrupted,
            vec![
                (ActionTemplate::RemoveSubgroupRetrain, 0.5),
                (ActionTemplate::DecorruptFeature, 0.3),
                (ActionTemplate::SubgroupModel, 0.2),
            ],
        );
        menus.insert(
            ReasonKind::ConceptDrift,
            vec![
                (ActionTemplate::RetrainNew, 0.5),
                (ActionTemplate::PartialUpdate, 0.3),
                (ActionTemplate::AddEnsembleMember, 0.2),
            ],
        );
        menus.insert(ReasonKind::NoIssue, vec![(ActionTemplate::NoOp, 1.0)]);
        Self {
            m: 6,
            menus,
            seed: 0,
            partial_update_window: 4,
            oof_flag_threshold: 0.005,
            nonneg_features: vec!["Insulin".into(), "PhysicalActivity".into()],
        }
    }
}

impl PolicyConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut cdf = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cdf += p;
        if u < cdf {
            return i;
        }
    }
    probs.len() - 1
}

fn sample_template(menu: &[(ActionTemplate, f64)], rng: &mut ChaCha8Rng) -> ActionTemplate {
    let total: f64 = menu.iter().map(|(_, w)| w).sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut cdf = 0.0;
    for (tpl, w) in menu {
        cdf += w;
        if u < cdf {
            return *tpl;
        }
    }
    menu.last().map(|(t, _)| *t).unwrap_or(ActionTemplate::NoOp)
}

/// Boundary predicates for one feature: below the plausibility floor and
/// above the ceiling. Hard-nonnegative features whose pre-shift support was
/// nonnegative also get the domain bound `feature < 0`.
fn boundary_predicates(col: &crate::diagnosis::ColumnEvidence, cfg: &PolicyConfig) -> Vec<Predicate> {
    let mut out = vec![
        Predicate::single(col.name.clone(), Cmp::Lt, col.plausible_lo),
        Predicate::single(col.name.clone(), Cmp::Gt, col.plausible_hi),
    ];
    if cfg.nonneg_features.iter().any(|n| n == &col.name)
        && col.before.min >= 0.0
        && col.plausible_lo < 0.0
    {
        out[0] = Predicate::single(col.name.clone(), Cmp::Lt, 0.0);
    } else if cfg.nonneg_features.iter().any(|n| n == &col.name) && col.before.min >= 0.0 {
        out.push(Predicate::single(col.name.clone(), Cmp::Lt, 0.0));
    }
    out
}

/// Instantiate a template for a reason from the evidence. `None` means the
/// template cannot be grounded (no evidence, or nothing to bind to).
fn instantiate(
    template: ActionTemplate,
    reason: &Reason,
    ev: Option<&EvidenceReport>,
    cfg: &PolicyConfig,
) -> Option<Action> {
    if template == ActionTemplate::NoOp {
        return Some(Action::NoOp);
    }
    let ev = ev?;
    match template {
        ActionTemplate::NoOp => unreachable!(),
        ActionTemplate::RetrainNew => {
            Some(Action::RetrainNew { window: ev.after_window_batches.max(1) })
        }
        ActionTemplate::PartialUpdate => {
            Some(Action::PartialUpdate { window: cfg.partial_update_window.max(1) })
        }
        ActionTemplate::AddEnsembleMember => {
            Some(Action::AddEnsembleMember { window: ev.after_window_batches.max(1) })
        }
        ActionTemplate::RemoveSubgroupRetrain => {
            // bundle: the sampled feature plus every flagged column, so one
            // removal candidate covers all implausible-value subgroups
            let target = match reason {
                Reason::FeatureCorrupted(name) => Some(name.as_str()),
                _ => None,
            };
            let mut predicates = Vec::new();
            for col in &ev.columns {
                if Some(col.name.as_str()) == target
                    || col.out_of_range_frac >= cfg.oof_flag_threshold
                {
                    predicates.extend(boundary_predicates(col, cfg));
                }
            }
            if predicates.is_empty() {
                return None;
            }
            Some(Action::RemoveSubgroupRetrain { predicates })
        }
        ActionTemplate::DecorruptFeature => {
            let name = match reason {
                Reason::FeatureCorrupted(name) => name,
                _ => return None,
            };
            let col = ev.columns.iter().find(|c| &c.name == name)?;
            if col.scale_ratio <= 0.0 {
                return None;
            }
            Some(Action::DecorruptFeature { feature: name.clone(), scale: col.scale_ratio })
        }
        ActionTemplate::SubgroupModel => {
            let name = match reason {
                Reason::FeatureCorrupted(name) => name,
                _ => return None,
            };
            let col = ev.columns.iter().find(|c| &c.name == name)?;
            // route the more-violated side of the plausibility band
            let above = col.after.max - col.plausible_hi;
            let below = col.plausible_lo - col.after.min;
            let predicate = if below > above && below > 0.0 {
                Predicate::single(name.clone(), Cmp::Lt, col.plausible_lo)
            } else {
                Predicate::single(name.clone(), Cmp::Gt, col.plausible_hi)
            };
            Some(Action::SubgroupModel { predicate })
        }
    }
}

/// One hierarchical draw: reason from the diagnosis, template from that
/// reason's menu, instantiated from evidence. Ungroundable draws collapse to
/// no-op so the draw distribution stays well-defined.
pub fn sample_action(
    zeta: &DiagnosisVector,
    space: &ReasonSpace,
    ev: Option<&EvidenceReport>,
    cfg: &PolicyConfig,
    rng: &mut ChaCha8Rng,
) -> Action {
    let reason = &space.reasons[sample_index(&zeta.probs, rng)];
    let menu = cfg.menus.get(&ReasonKind::of(reason)).cloned().unwrap_or_default();
    if menu.is_empty() {
        return Action::NoOp;
    }
    let template = sample_template(&menu, rng);
    instantiate(template, reason, ev, cfg).unwrap_or(Action::NoOp)
}

/// Sample `m` candidates, deduplicate, and guarantee no-op membership. The
/// returned list keeps no-op first so argmin ties prefer it.
pub fn propose_actions(
    zeta: &DiagnosisVector,
    space: &ReasonSpace,
    ev: Option<&EvidenceReport>,
    cfg: &PolicyConfig,
) -> Vec<Action> {
    assert!(zeta.is_valid(), "invalid diagnosis vector");
    assert_eq!(zeta.probs.len(), space.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = vec![Action::NoOp];
    for _ in 0..cfg.m {
        let action = sample_action(zeta, space, ev, cfg, &mut rng);
        if !out.contains(&action) && out.len() < cfg.m.max(1) {
            out.push(action);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Interpreter: composite predictors produced by apply()
// ---------------------------------------------------------------------------

/// Refit model wrapped with value cleaning: at prediction time, entries that
/// fall in a removal region are replaced by the clean-remainder median of
/// their feature before the inner model scores the row.
struct CleansedPredictor {
    inner: LogisticModel,
    /// (column, cmp, threshold) groups, one per predicate.
    rules: Vec<Vec<(usize, Cmp, f64)>>,
    medians: Vec<f64>,
}

impl Predictor for CleansedPredictor {
    fn predict_proba(&self, x: &[f64], n_cols: usize) -> Vec<f64> {
        let n = x.len() / n_cols;
        let mut cleaned = x.to_vec();
        for i in 0..n {
            let row = i * n_cols;
            for rule in &self.rules {
                if Predicate::matches(rule, &cleaned[row..row + n_cols]) {
                    for &(j, _, _) in rule {
                        cleaned[row + j] = self.medians[j];
                    }
                }
            }
        }
        self.inner.predict_proba(&cleaned, n_cols)
    }
}

/// Incumbent wrapped with an input transform dividing one feature by a scale.
struct ScaledInputPredictor {
    inner: SharedPredictor,
    column: usize,
    scale: f64,
}

impl Predictor for ScaledInputPredictor {
    fn predict_proba(&self, x: &[f64], n_cols: usize) -> Vec<f64> {
        let mut transformed = x.to_vec();
        let n = x.len() / n_cols;
        for i in 0..n {
            transformed[i * n_cols + self.column] /= self.scale;
        }
        self.inner.predict_proba(&transformed, n_cols)
    }
}

/// Routes rows matching the predicate to the subgroup model, the rest to the
/// incumbent.
struct RoutedPredictor {
    rule: Vec<(usize, Cmp, f64)>,
    subgroup: LogisticModel,
    fallback: SharedPredictor,
}

impl Predictor for RoutedPredictor {
    fn predict_proba(&self, x: &[f64], n_cols: usize) -> Vec<f64> {
        let n = x.len() / n_cols;
        let fallback = self.fallback.predict_proba(x, n_cols);
        let subgroup = self.subgroup.predict_proba(x, n_cols);
        (0..n)
            .map(|i| {
                if Predicate::matches(&self.rule, &x[i * n_cols..(i + 1) * n_cols]) {
                    subgroup[i]
                } else {
                    fallback[i]
                }
            })
            .collect()
    }
}

fn last_window(buffers: &[LabeledBatch], window: usize) -> &[LabeledBatch] {
    let start = buffers.len().saturating_sub(window.max(1));
    &buffers[start..]
}

fn column_median(x: &[f64], n_cols: usize, j: usize) -> f64 {
    let mut vals: Vec<f64> = (0..x.len() / n_cols).map(|i| x[i * n_cols + j]).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals[vals.len() / 2]
}

/// Apply an action to the incumbent model over the recent buffers, returning
/// a new predictor. The incumbent is never mutated.
pub fn apply(
    action: &Action,
    model: &SharedPredictor,
    buffers: &[LabeledBatch],
    feature_names: &[String],
) -> Result<SharedPredictor, AdaptationError> {
    match action {
        Action::NoOp => Ok(Arc::clone(model)),
        Action::RetrainNew { window } | Action::PartialUpdate { window } => {
            if buffers.is_empty() {
                return Err(AdaptationError::Infeasible("no data buffered for retraining".into()));
            }
            Ok(Arc::new(fit(last_window(buffers, *window))?))
        }
        Action::AddEnsembleMember { window } => {
            if buffers.is_empty() {
                return Err(AdaptationError::Infeasible("no data buffered for a new member".into()));
            }
            let member = Arc::new(fit(last_window(buffers, *window))?);
            let last = buffers.last().expect("nonempty");
            let w_old = accuracy(model.as_ref(), last).max(1e-6);
            let w_new = accuracy(member.as_ref(), last).max(1e-6);
            Ok(Arc::new(WeightedEnsemble::new(
                vec![Arc::clone(model), member],
                vec![w_old, w_new],
            )))
        }
        Action::RemoveSubgroupRetrain { predicates } => {
            if buffers.is_empty() {
                return Err(AdaptationError::Infeasible("no data buffered for retraining".into()));
            }
            let data = LabeledBatch::concat(buffers);
            let d = data.n_cols;
            let mut rules = Vec::new();
            for p in predicates {
                let rule = p.resolve(feature_names).ok_or_else(|| {
                    AdaptationError::Infeasible(format!("unknown feature in predicate {p}"))
                })?;
                rules.push(rule);
            }
            let mut x = Vec::new();
            let mut y = Vec::new();
            for i in 0..data.n_rows() {
                let row = data.row(i);
                if !rules.iter().any(|r| Predicate::matches(r, row)) {
                    x.extend_from_slice(row);
                    y.push(data.y[i]);
                }
            }
            if y.is_empty() {
                return Err(AdaptationError::Infeasible("predicates removed every row".into()));
            }
            let inner = crate::models::fit_rows(&x, &y, d)?;
            let medians = (0..d).map(|j| column_median(&x, d, j)).collect();
            Ok(Arc::new(CleansedPredictor { inner, rules, medians }))
        }
        Action::DecorruptFeature { feature, scale } => {
            if *scale <= 0.0 {
                return Err(AdaptationError::Infeasible("scale must be > 0".into()));
            }
            let column = feature_names
                .iter()
                .position(|n| n == feature)
                .ok_or_else(|| AdaptationError::Infeasible(format!("unknown feature {feature}")))?;
            Ok(Arc::new(ScaledInputPredictor { inner: Arc::clone(model), column, scale: *scale }))
        }
        Action::SubgroupModel { predicate } => {
            if buffers.is_empty() {
                return Err(AdaptationError::Infeasible("no data buffered for a subgroup fit".into()));
            }
            let rule = predicate.resolve(feature_names).ok_or_else(|| {
                AdaptationError::Infeasible(format!("unknown feature in predicate {predicate}"))
            })?;
            let data = LabeledBatch::concat(buffers);
            let d = data.n_cols;
            let mut x = Vec::new();
            let mut y = Vec::new();
            for i in 0..data.n_rows() {
                let row = data.row(i);
                if Predicate::matches(&rule, row) {
                    x.extend_from_slice(row);
                    y.push(data.y[i]);
                }
            }
            if y.is_empty() {
                return Err(AdaptationError::Infeasible("predicate matched no rows".into()));
            }
            let subgroup = crate::models::fit_rows(&x, &y, d)?;
            Ok(Arc::new(RoutedPredictor { rule, subgroup, fallback: Arc::clone(model) }))
        }
    }
}

// ---------------------------------------------------------------------------
// Textual action grammar
// ---------------------------------------------------------------------------

fn parse_clause(text: &str, feature_names: &[String]) -> Result<Clause, AdaptationError> {
    let text = text.trim().trim_start_matches('(').trim_end_matches(')').trim();
    let (cmp, pos, len) = ["<=", ">=", "<", ">"]
        .iter()
        .filter_map(|op| text.find(op).map(|p| (*op, p, op.len())))
        .min_by_key(|&(_, p, _)| p)
        .ok_or_else(|| AdaptationError::Parse {
            span: text.to_string(),
            msg: "no comparator".into(),
        })?;
    let feature = text[..pos].trim();
    let value = text[pos + len..].trim();
    if value.starts_with('<') || value.starts_with('>') || value.starts_with('=') {
        return Err(AdaptationError::Parse {
            span: text.to_string(),
            msg: format!("malformed comparator near {:?}", &text[pos..]),
        });
    }
    if !feature_names.iter().any(|n| n == feature) {
        return Err(AdaptationError::Parse {
            span: feature.to_string(),
            msg: "unknown feature".into(),
        });
    }
    let threshold: f64 = value.parse().map_err(|_| AdaptationError::Parse {
        span: value.to_string(),
        msg: "bad threshold".into(),
    })?;
    let cmp = match cmp {
        "<" => Cmp::Lt,
        ">" => Cmp::Gt,
        "<=" => Cmp::Le,
        ">=" => Cmp::Ge,
        _ => unreachable!(),
    };
    Ok(Clause { feature: feature.to_string(), cmp, threshold })
}

/// Parse one predicate expression: `clause` or `(clause) & (clause) & ...`.
pub fn parse_predicate(text: &str, feature_names: &[String]) -> Result<Predicate, AdaptationError> {
    let clauses: Result<Vec<Clause>, _> = text
        .split('&')
        .map(|part| parse_clause(part, feature_names))
        .collect();
    let clauses = clauses?;
    if clauses.is_empty() {
        return Err(AdaptationError::Parse { span: text.to_string(), msg: "empty predicate".into() });
    }
    Ok(Predicate { clauses })
}

fn strip_subgroup_prefix(line: &str) -> &str {
    let mut rest = line.trim();
    // optional "1." list numbering
    if let Some(dot) = rest.find('.') {
        if rest[..dot].chars().all(|c| c.is_ascii_digit()) && !rest[..dot].is_empty() {
            rest = rest[dot + 1..].trim();
        }
    }
    for prefix in ["Subgroup:", "Individuals with"] {
        if let Some(stripped) = rest.strip_prefix(prefix) {
            rest = stripped.trim();
        }
    }
    // drop a trailing "; Reason: ..." annotation
    if let Some(pos) = rest.find("; Reason:") {
        rest = rest[..pos].trim();
    }
    rest
}

/// Parse subgroup-removal text into an action. Each nonempty line holds one
/// predicate in the documented grammar; the result removes rows matching any
/// of them.
pub fn parse_action_text(text: &str, feature_names: &[String]) -> Result<Action, AdaptationError> {
    let mut predicates = Vec::new();
    for line in text.lines() {
        let body = strip_subgroup_prefix(line);
        if body.is_empty() {
            continue;
        }
        predicates.push(parse_predicate(body, feature_names)?);
    }
    if predicates.is_empty() {
        return Err(AdaptationError::Parse { span: text.to_string(), msg: "no predicates".into() });
    }
    Ok(Action::RemoveSubgroupRetrain { predicates })
}

/// Render an action back into the textual grammar. Inverse of
/// [`parse_action_text`] on its domain.
pub fn render_action(action: &Action) -> String {
    match action {
        Action::RemoveSubgroupRetrain { predicates } => predicates
            .iter()
            .map(|p| format!("Subgroup: Individuals with {p}"))
            .collect::<Vec<_>>()
            .join("\n"),
        other => other.to_string(),
    }
}
