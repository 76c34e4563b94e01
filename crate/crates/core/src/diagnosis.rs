//! Evidence extraction and degradation diagnosis.
//!
//! [`extract_evidence`] compares a pre-degradation window against the
//! post-detection window: per-column summary statistics, out-of-range
//! fractions relative to the pre-shift plausibility band, robust scale
//! ratios, and per-covariate binned model performance on pre-shift quantile
//! edges. Diagnosers map that evidence to a probability vector over a finite
//! reason space: [`diagnose_statistical`] is the deterministic scorer used by
//! the experiment studies, [`diagnose_llm`] drives a chat-completion backend
//! through the prompt templates and parses the hypothesis/probability lines
//! it returns.

use crate::datagen::LabeledBatch;
use crate::llm::{self, CompletionProvider, CompletionRequest, LlmError, TemplateId};
use crate::models::Predictor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("empty window: {0}")]
    EmptyWindow(&'static str),
    #[error("reason space does not cover evidence column {0}")]
    MissingReason(String),
    #[error("empty sample set")]
    EmptySamples,
    #[error("diagnosis parse error: {msg}; raw text: {raw}")]
    Parse { msg: String, raw: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// A candidate reason for model degradation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reason {
    FeatureCorrupted(String),
    ConceptDrift,
    NoIssue,
}

impl std::fmt::Display for Reason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reason::FeatureCorrupted(name) => write!(f, "feature-corrupted:{name}"),
            Reason::ConceptDrift => write!(f, "concept-drift"),
            Reason::NoIssue => write!(f, "no-issue"),
        }
    }
}

/// Ordered finite reason space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonSpace {
    pub reasons: Vec<Reason>,
}

impl ReasonSpace {
    /// One corruption reason per feature plus concept drift and no-issue.
    pub fn canonical(feature_names: &[String]) -> Self {
        let mut reasons: Vec<Reason> = feature_names
            .iter()
            .map(|n| Reason::FeatureCorrupted(n.clone()))
            .collect();
        reasons.push(Reason::ConceptDrift);
        reasons.push(Reason::NoIssue);
        Self { reasons }
    }

    /// Feature-corruption reasons only (the KL-study space).
    pub fn features_only(feature_names: &[String]) -> Self {
        Self {
            reasons: feature_names
                .iter()
                .map(|n| Reason::FeatureCorrupted(n.clone()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.reasons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reasons.is_empty()
    }

    pub fn index_of(&self, reason: &Reason) -> Option<usize> {
        self.reasons.iter().position(|r| r == reason)
    }
}

/// Probability vector over a [`ReasonSpace`]; nonnegative, sums to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisVector {
    pub probs: Vec<f64>,
}

impl DiagnosisVector {
    /// Normalize nonnegative scores into a distribution.
    pub fn from_scores(scores: &[f64]) -> Self {
        assert!(!scores.is_empty());
        assert!(scores.iter().all(|&s| s >= 0.0), "negative score");
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            return Self::uniform(scores.len());
        }
        Self { probs: scores.iter().map(|s| s / total).collect() }
    }

    pub fn uniform(len: usize) -> Self {
        Self { probs: vec![1.0 / len as f64; len] }
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn is_valid(&self) -> bool {
        self.probs.iter().all(|&p| p >= 0.0)
            && (self.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }
}

/// Summary statistics of one column in one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    /// Median absolute deviation around the median.
    pub mad: f64,
}

impl ColumnStats {
    fn from_values(values: &mut Vec<f64>) -> Self {
        let n = values.len();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let q = |frac: f64| -> f64 {
            let pos = frac * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let w = pos - lo as f64;
            values[lo] * (1.0 - w) + values[hi] * w
        };
        let q50 = q(0.5);
        let mut devs: Vec<f64> = values.iter().map(|v| (v - q50).abs()).collect();
        devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = 0.5 * (n - 1) as f64;
        let (lo, hi, w) = (pos.floor() as usize, pos.ceil() as usize, pos - pos.floor());
        let mad = devs[lo] * (1.0 - w) + devs[hi] * w;
        Self {
            mean,
            std: var.sqrt(),
            min: values[0],
            max: values[n - 1],
            q25: q(0.25),
            q50,
            q75: q(0.75),
            mad,
        }
    }
}

/// Evidence for one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnEvidence {
    pub name: String,
    pub before: ColumnStats,
    pub after: ColumnStats,
    /// Pre-shift plausibility band `[min - 3 std, max + 3 std]`.
    pub plausible_lo: f64,
    pub plausible_hi: f64,
    /// Fraction of after-window entries outside the plausibility band.
    pub out_of_range_frac: f64,
    /// after MAD / before MAD.
    pub scale_ratio: f64,
    /// Model accuracy per pre-quantile bin; `None` where the bin is empty.
    pub binned_acc_before: Vec<Option<f64>>,
    pub binned_acc_after: Vec<Option<f64>>,
}

/// Extractor output: how the data and the model's per-slice performance
/// changed between the two windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub columns: Vec<ColumnEvidence>,
    /// Bins per covariate; reduced below 10 when the windows are small.
    pub bins_used: usize,
    pub overall_acc_before: f64,
    pub overall_acc_after: f64,
    /// After-window accuracy restricted to rows inside every plausibility band.
    pub after_acc_plausible: f64,
    /// Number of batches the after window spans.
    pub after_window_batches: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

fn column_values(batches: &[LabeledBatch], j: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for b in batches {
        for i in 0..b.n_rows() {
            out.push(b.x[i * b.n_cols + j]);
        }
    }
    out
}

fn binned_accuracy(
    batch: &LabeledBatch,
    preds: &[u8],
    j: usize,
    edges: &[f64],
    bins: usize,
) -> Vec<Option<f64>> {
    let mut correct = vec![0usize; bins];
    let mut total = vec![0usize; bins];
    for i in 0..batch.n_rows() {
        let v = batch.x[i * batch.n_cols + j];
        // edges are interior cut points; bin = count of edges below v
        let bin = edges.partition_point(|e| *e <= v).min(bins - 1);
        total[bin] += 1;
        if preds[i] == batch.y[i] {
            correct[bin] += 1;
        }
    }
    (0..bins)
        .map(|b| {
            if total[b] == 0 {
                None
            } else {
                Some(correct[b] as f64 / total[b] as f64)
            }
        })
        .collect()
}

/// Build the evidence report for the two windows. Binning uses pre-shift
/// quantile edges for both windows so the slices stay comparable.
pub fn extract_evidence(
    before: &[LabeledBatch],
    after: &[LabeledBatch],
    model: &dyn Predictor,
    feature_names: &[String],
    context: Option<String>,
) -> Result<EvidenceReport, DiagnosisError> {
    if before.is_empty() || before.iter().all(|b| b.n_rows() == 0) {
        return Err(DiagnosisError::EmptyWindow("before"));
    }
    if after.is_empty() || after.iter().all(|b| b.n_rows() == 0) {
        return Err(DiagnosisError::EmptyWindow("after"));
    }
    let before_all = LabeledBatch::concat(before);
    let after_all = LabeledBatch::concat(after);
    let d = before_all.n_cols;

    let n_before = before_all.n_rows();
    let bins = 10usize.min((n_before / 20).max(1));

    let preds_before = model.predict(&before_all.x, d);
    let preds_after = model.predict(&after_all.x, d);
    let acc_of = |preds: &[u8], y: &[u8]| {
        preds.iter().zip(y).filter(|(p, y)| p == y).count() as f64 / y.len() as f64
    };
    let overall_acc_before = acc_of(&preds_before, &before_all.y);
    let overall_acc_after = acc_of(&preds_after, &after_all.y);

    let mut columns = Vec::with_capacity(d);
    let mut plausible = vec![true; after_all.n_rows()];
    for j in 0..d {
        let mut vb = column_values(before, j);
        let mut va = column_values(after, j);
        let sb = ColumnStats::from_values(&mut vb);
        let sa = ColumnStats::from_values(&mut va);
        let lo = sb.min - 3.0 * sb.std;
        let hi = sb.max + 3.0 * sb.std;

        let mut oof = 0usize;
        for i in 0..after_all.n_rows() {
            let v = after_all.x[i * d + j];
            if v < lo || v > hi {
                oof += 1;
                plausible[i] = false;
            }
        }

        // vb is sorted; interior quantile cut points for the bins
        let edges: Vec<f64> = (1..bins)
            .map(|k| {
                let pos = (k as f64 / bins as f64) * (vb.len() - 1) as f64;
                let (l, h, w) = (pos.floor() as usize, pos.ceil() as usize, pos.fract());
                vb[l] * (1.0 - w) + vb[h] * w
            })
            .collect();

        columns.push(ColumnEvidence {
            name: feature_names[j].clone(),
            plausible_lo: lo,
            plausible_hi: hi,
            out_of_range_frac: oof as f64 / after_all.n_rows() as f64,
            scale_ratio: sa.mad / sb.mad.max(1e-12),
            binned_acc_before: binned_accuracy(&before_all, &preds_before, j, &edges, bins),
            binned_acc_after: binned_accuracy(&after_all, &preds_after, j, &edges, bins),
            before: sb,
            after: sa,
        });
    }

    let (mut pc, mut pt) = (0usize, 0usize);
    for i in 0..after_all.n_rows() {
        if plausible[i] {
            pt += 1;
            if preds_after[i] == after_all.y[i] {
                pc += 1;
            }
        }
    }
    let after_acc_plausible = if pt == 0 { overall_acc_after } else { pc as f64 / pt as f64 };

    Ok(EvidenceReport {
        columns,
        bins_used: bins,
        overall_acc_before,
        overall_acc_after,
        after_acc_plausible,
        after_window_batches: after.len(),
        context,
    })
}

/// Weights and temperature of the statistical diagnoser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisConfig {
    pub w_out_of_range: f64,
    pub w_scale: f64,
    pub w_mean_shift: f64,
    pub temperature: f64,
    pub no_issue_floor: f64,
    /// Scale ratios within this factor of 1 are treated as unity (sampling
    /// noise of the MAD estimate).
    pub scale_deadband: f64,
    /// Per-feature scores saturate here, so features whose evidence is
    /// overwhelming stop competing on magnitude and a fully corrupted table
    /// diagnoses uniform.
    pub feature_score_cap: f64,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        Self {
            w_out_of_range: 2.0,
            w_scale: 1.0,
            w_mean_shift: 0.5,
            temperature: 0.5,
            no_issue_floor: 0.05,
            scale_deadband: 1.05,
            feature_score_cap: 1.5,
        }
    }
}

/// Deterministic evidence scorer: per-feature scores from the out-of-range
/// fraction, the log scale ratio, and a robust z of the mean shift; a
/// concept-drift score from the accuracy drop left unexplained by
/// implausible rows; a small floor for no-issue. Softmax normalizes the
/// scores into the diagnosis vector.
pub fn diagnose_statistical(
    ev: &EvidenceReport,
    space: &ReasonSpace,
    cfg: &DiagnosisConfig,
) -> Result<DiagnosisVector, DiagnosisError> {
    for col in &ev.columns {
        if !space
            .reasons
            .iter()
            .any(|r| matches!(r, Reason::FeatureCorrupted(n) if n == &col.name))
        {
            return Err(DiagnosisError::MissingReason(col.name.clone()));
        }
    }
    let mut scores = Vec::with_capacity(space.len());
    for reason in &space.reasons {
        let s = match reason {
            Reason::FeatureCorrupted(name) => {
                let col = ev.columns.iter().find(|c| &c.name == name).expect("covered");
                let robust_scale = (1.4826 * col.before.mad).max(1e-12);
                let z = (col.after.mean - col.before.mean).abs() / robust_scale;
                let scale_term = (col.scale_ratio.max(1e-12).ln().abs()
                    - cfg.scale_deadband.max(1.0).ln())
                .max(0.0);
                (cfg.w_out_of_range * col.out_of_range_frac
                    + cfg.w_scale * scale_term
                    + cfg.w_mean_shift * z)
                    .min(cfg.feature_score_cap)
            }
            Reason::ConceptDrift => (ev.overall_acc_before - ev.after_acc_plausible).max(0.0),
            Reason::NoIssue => cfg.no_issue_floor,
        };
        scores.push(s);
    }
    // softmax with temperature, stabilized by the max score
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - m) / cfg.temperature).exp()).collect();
    Ok(DiagnosisVector::from_scores(&exps))
}

/// Empirical mixture of Monte Carlo diagnosis samples.
pub fn aggregate_mc(samples: &[DiagnosisVector]) -> Result<DiagnosisVector, DiagnosisError> {
    if samples.is_empty() {
        return Err(DiagnosisError::EmptySamples);
    }
    let len = samples[0].probs.len();
    let mut acc = vec![0.0; len];
    for s in samples {
        for (a, p) in acc.iter_mut().zip(&s.probs) {
            *a += p;
        }
    }
    Ok(DiagnosisVector::from_scores(&acc))
}

/// Empirical distribution of reason index draws.
pub fn aggregate_draws(draws: &[usize], space_len: usize) -> Result<DiagnosisVector, DiagnosisError> {
    if draws.is_empty() {
        return Err(DiagnosisError::EmptySamples);
    }
    let mut counts = vec![0.0; space_len];
    for &d in draws {
        counts[d] += 1.0;
    }
    Ok(DiagnosisVector::from_scores(&counts))
}

/// Shannon entropy in nats, with `0 ln 0 := 0`.
pub fn entropy(zeta: &DiagnosisVector) -> f64 {
    -zeta
        .probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// `KL(true || est)` in nats with the estimate floored at `smoothing`;
/// terms with `true(z) = 0` contribute nothing.
pub fn kl_divergence(truth: &DiagnosisVector, est: &DiagnosisVector, smoothing: f64) -> f64 {
    assert_eq!(truth.probs.len(), est.probs.len(), "reason spaces differ");
    truth
        .probs
        .iter()
        .zip(&est.probs)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &e)| t * (t / e.max(smoothing)).ln())
        .sum()
}

pub const KL_SMOOTHING: f64 = 1e-6;

/// Confidence wording used by the hypothesis prompt, mapped to numeric
/// scores before normalization.
pub const CONFIDENCE_WORDS: [(&str, f64); 5] = [
    ("extremely confident", 10.0),
    ("confident", 8.0),
    ("somewhat confident", 6.0),
    ("unsure", 4.0),
    ("completely unsure", 2.0),
];

/// Parse `Hypothesis: [A, B]; Probability: 12.5%` lines into a diagnosis
/// vector. Mass over several features splits equally; hypotheses naming no
/// known feature move their mass to no-issue (with a warning) when the space
/// has one, and are dropped otherwise.
pub fn parse_probability_lines(
    text: &str,
    space: &ReasonSpace,
) -> Result<DiagnosisVector, DiagnosisError> {
    let mut mass = vec![0.0; space.len()];
    let mut found = false;
    for line in text.lines() {
        let line = line.trim();
        let Some(hyp_pos) = line.find("Hypothesis:") else { continue };
        let Some(prob_pos) = line.find("Probability:") else { continue };
        let hyp = line[hyp_pos + "Hypothesis:".len()..].split(';').next().unwrap_or("").trim();
        let prob_str = line[prob_pos + "Probability:".len()..].trim().trim_end_matches('%').trim();
        let p: f64 = prob_str.parse().map_err(|_| DiagnosisError::Parse {
            msg: format!("bad probability {prob_str:?}"),
            raw: text.to_string(),
        })?;
        found = true;
        let names: Vec<&str> = hyp
            .trim_start_matches('[')
            .trim_end_matches(']')
            .split(',')
            .map(|s| s.trim().trim_matches('\'').trim_matches('"'))
            .filter(|s| !s.is_empty())
            .collect();
        let indices: Vec<usize> = names
            .iter()
            .filter_map(|n| space.index_of(&Reason::FeatureCorrupted((*n).to_string())))
            .collect();
        if indices.is_empty() {
            log::warn!("hypothesis {hyp:?} matched no feature reason; reassigning its mass");
            if let Some(i) = space.index_of(&Reason::NoIssue) {
                mass[i] += p;
            }
        } else {
            let share = p / indices.len() as f64;
            for i in indices {
                mass[i] += share;
            }
        }
    }
    if !found {
        return Err(DiagnosisError::Parse {
            msg: "no `Hypothesis: ...; Probability: ...` lines".into(),
            raw: text.to_string(),
        });
    }
    if mass.iter().sum::<f64>() <= 0.0 {
        return Err(DiagnosisError::Parse {
            msg: "all hypothesis mass was zero".into(),
            raw: text.to_string(),
        });
    }
    Ok(DiagnosisVector::from_scores(&mass))
}

/// Fallback parser for `Covariate: X; ...; Strength of belief: <wording>`
/// listings; confidence wording maps through [`CONFIDENCE_WORDS`].
pub fn parse_confidence_lines(
    text: &str,
    space: &ReasonSpace,
) -> Result<DiagnosisVector, DiagnosisError> {
    let mut mass = vec![0.0; space.len()];
    let mut found = false;
    for line in text.lines() {
        let line = line.trim();
        let Some(cov_pos) = line.find("Covariate:") else { continue };
        let name = line[cov_pos + "Covariate:".len()..].split(';').next().unwrap_or("").trim();
        let lower = line.to_lowercase();
        let mut words = CONFIDENCE_WORDS;
        // longest wording first so "somewhat confident" is not read as "confident"
        words.sort_by_key(|(w, _)| std::cmp::Reverse(w.len()));
        let mut score = None;
        for (word, value) in words {
            if lower.contains(word) {
                score = Some(value);
                break;
            }
        }
        let Some(score) = score else { continue };
        found = true;
        match space.index_of(&Reason::FeatureCorrupted(name.to_string())) {
            Some(i) => mass[i] += score,
            None => {
                log::warn!("covariate {name:?} is not in the reason space; reassigning");
                if let Some(i) = space.index_of(&Reason::NoIssue) {
                    mass[i] += score;
                }
            }
        }
    }
    if !found {
        return Err(DiagnosisError::Parse {
            msg: "no parsable covariate confidence lines".into(),
            raw: text.to_string(),
        });
    }
    Ok(DiagnosisVector::from_scores(&mass))
}

/// Settings of the LLM diagnosis path.
#[derive(Debug, Clone)]
pub struct LlmDiagnosisConfig {
    /// Chain-of-thought re-consideration passes over the hypotheses.
    pub reflection_passes: usize,
    /// Sampling temperature of the hypothesis calls.
    pub hypothesis_temperature: f64,
    /// Temperature of the probability summarization call.
    pub probability_temperature: f64,
}

impl Default for LlmDiagnosisConfig {
    fn default() -> Self {
        Self { reflection_passes: 2, hypothesis_temperature: 0.7, probability_temperature: 0.0 }
    }
}

/// Diagnose through a completion provider: render the diagnosis prompt,
/// re-consider it `reflection_passes` times, then ask for per-hypothesis
/// probabilities and parse them back onto the reason space.
pub fn diagnose_llm(
    ev: &EvidenceReport,
    space: &ReasonSpace,
    provider: &dyn CompletionProvider,
    cfg: &LlmDiagnosisConfig,
) -> Result<DiagnosisVector, DiagnosisError> {
    let mut bindings = llm::evidence_bindings(ev);
    bindings.insert("n".into(), space.len().to_string());

    let mut hypotheses = String::new();
    for pass in 0..cfg.reflection_passes.max(1) {
        let mut b = bindings.clone();
        if pass > 0 {
            // self-reflection: feed the previous round back as context
            let prev = format!(
                "{} Previous hypotheses to re-consider: {hypotheses}",
                b.get("context").cloned().unwrap_or_default()
            );
            b.insert("context".into(), prev);
        }
        let prompt = llm::render(TemplateId::CovariateCombinations, &b)?;
        hypotheses = provider.complete(&CompletionRequest {
            template_id: TemplateId::CovariateCombinations,
            prompt,
            temperature: cfg.hypothesis_temperature,
        })?;
    }

    let mut b = bindings.clone();
    b.insert("covariate_guesses".into(), hypotheses.clone());
    let prompt = llm::render(TemplateId::DiagnosisProbability, &b)?;
    let reply = provider.complete(&CompletionRequest {
        template_id: TemplateId::DiagnosisProbability,
        prompt,
        temperature: cfg.probability_temperature,
    })?;

    parse_probability_lines(&reply, space)
        .or_else(|_| parse_confidence_lines(&reply, space))
        .or_else(|_| parse_confidence_lines(&hypotheses, space))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{self, diabetes_features, CorruptionMode, CorruptionSpec, DgpParams};
    use crate::models::fit;

    fn names() -> Vec<String> {
        diabetes_features().iter().map(|f| f.name.clone()).collect()
    }

    fn window(n: usize, seed: u64, corrupt_col: Option<(&str, f64, f64)>) -> LabeledBatch {
        let specs = diabetes_features();
        let x = datagen::generate_features(n, &specs, seed);
        let dgp = DgpParams {
            intercept: 0.0,
            coefficients: datagen::DIABETES_BETA_PRE.to_vec(),
            noise_std: 0.2,
        };
        let y = datagen::generate_labels(&x, specs.len(), &dgp, seed + 1).unwrap();
        let batch = LabeledBatch::new(x, y, specs.len(), 0);
        match corrupt_col {
            None => batch,
            Some((col, tau, factor)) => datagen::corrupt(
                &batch,
                &names(),
                &CorruptionSpec {
                    columns: vec![col.to_string()],
                    fraction: tau,
                    outlier_factor: factor,
                    mode: CorruptionMode::Multiply,
                },
                seed + 2,
            ),
        }
    }

    #[test]
    fn null_comparison_is_quiet() {
        let before = window(2000, 1, None);
        let after = window(2000, 7, None);
        let model = fit(&[before.clone()]).unwrap();
        let ev = extract_evidence(&[before], &[after], &model, &names(), None).unwrap();
        for col in &ev.columns {
            assert!(col.out_of_range_frac < 0.005, "{}: {}", col.name, col.out_of_range_frac);
            assert!((col.scale_ratio - 1.0).abs() < 0.1, "{}: {}", col.name, col.scale_ratio);
            assert!((col.after.mean - col.before.mean).abs() < 0.2 * col.before.std.max(1.0));
        }
        assert_eq!(ev.bins_used, 10);
    }

    #[test]
    fn negative_insulin_is_flagged_out_of_range() {
        // tight positive Insulin pre-window, negative values injected after
        let specs = vec![datagen::FeatureSpec::new("Insulin", 85.0, 5.0)];
        let nm = vec!["Insulin".to_string()];
        let xb = datagen::generate_features(1000, &specs, 3);
        let before = LabeledBatch::new(xb.clone(), vec![0u8; 1000], 1, 0);
        let mut xa = xb;
        for v in xa.iter_mut().take(100) {
            *v = -50.0;
        }
        let after = LabeledBatch::new(xa, vec![0u8; 1000], 1, 1);
        let model = fit(&[LabeledBatch::new(vec![0.0, 1.0], vec![0, 1], 1, 0)]).unwrap();
        let ev = extract_evidence(&[before], &[after], &model, &nm, None).unwrap();
        assert!(ev.columns[0].out_of_range_frac > 0.05);
        assert!(ev.columns[0].after.min < 0.0);
    }

    #[test]
    fn scale_ratio_tracks_column_scaling() {
        let specs = diabetes_features();
        let nm = names();
        let xb = datagen::generate_features(3000, &specs, 11);
        let before = LabeledBatch::new(xb, vec![0u8; 3000], specs.len(), 0);
        let mut after = before.clone();
        let j = nm.iter().position(|n| n == "BMI").unwrap();
        for i in 0..after.n_rows() {
            after.x[i * specs.len() + j] *= 10.0;
        }
        let model = fit(&[before.clone()]).unwrap();
        let ev = extract_evidence(&[before], &[after], &model, &nm, None).unwrap();
        let ratio = ev.columns[j].scale_ratio;
        assert!((ratio - 10.0).abs() / 10.0 < 0.05, "ratio {ratio}");
    }

    #[test]
    fn statistical_diagnosis_null_case_is_no_issue() {
        let before = window(2500, 21, None);
        let after = window(2500, 31, None);
        let model = fit(&[before.clone()]).unwrap();
        let ev = extract_evidence(&[before], &[after], &model, &names(), None).unwrap();
        let space = ReasonSpace::canonical(&names());
        let zeta = diagnose_statistical(&ev, &space, &DiagnosisConfig::default()).unwrap();
        assert!(zeta.is_valid());
        assert_eq!(space.reasons[zeta.argmax()], Reason::NoIssue);
    }

    #[test]
    fn corrupted_column_dominates_feature_reasons() {
        let before = window(2500, 41, None);
        let after = window(2500, 51, Some(("BMI", 0.2, 10.0)));
        let model = fit(&[before.clone()]).unwrap();
        let ev = extract_evidence(&[before], &[after], &model, &names(), None).unwrap();
        let space = ReasonSpace::canonical(&names());
        let zeta = diagnose_statistical(&ev, &space, &DiagnosisConfig::default()).unwrap();
        let bmi = space.index_of(&Reason::FeatureCorrupted("BMI".into())).unwrap();
        for (i, reason) in space.reasons.iter().enumerate() {
            if matches!(reason, Reason::FeatureCorrupted(_)) && i != bmi {
                assert!(zeta.probs[bmi] > zeta.probs[i], "{reason}");
            }
        }
    }

    #[test]
    fn uniform_corruption_gives_near_uniform_feature_mass() {
        let specs = diabetes_features();
        let nm = names();
        let before = window(3000, 61, None);
        let xb = datagen::generate_features(3000, &specs, 71);
        let dgp = DgpParams {
            intercept: 0.0,
            coefficients: datagen::DIABETES_BETA_PRE.to_vec(),
            noise_std: 0.2,
        };
        let y = datagen::generate_labels(&xb, specs.len(), &dgp, 72).unwrap();
        let after = datagen::corrupt(
            &LabeledBatch::new(xb, y, specs.len(), 1),
            &nm,
            &CorruptionSpec {
                columns: nm.clone(),
                fraction: 0.2,
                outlier_factor: 10.0,
                mode: CorruptionMode::Multiply,
            },
            73,
        );
        let model = fit(&[before.clone()]).unwrap();
        let ev = extract_evidence(&[before], &[after], &model, &nm, None).unwrap();
        let space = ReasonSpace::features_only(&nm);
        let zeta = diagnose_statistical(&ev, &space, &DiagnosisConfig::default()).unwrap();
        let max = zeta.probs.iter().cloned().fold(f64::MIN, f64::max);
        let min = zeta.probs.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max - min < 0.02, "spread {}", max - min);
    }

    #[test]
    fn kl_never_increases_with_outlier_factor() {
        let nm = names();
        let space = ReasonSpace::features_only(&nm);
        for seed in 0..5u64 {
            let col = &nm[(seed as usize) % nm.len()];
            let truth = DiagnosisVector::one_hot(
                space.len(),
                space.index_of(&Reason::FeatureCorrupted(col.clone())).unwrap(),
            );
            let before = window(2000, 100 + seed, None);
            let model = fit(&[before.clone()]).unwrap();
            let mut last = f64::INFINITY;
            for factor in [2.0, 5.0, 10.0, 50.0] {
                let after = window(2000, 200 + seed, Some((col, 0.2, factor)));
                let ev =
                    extract_evidence(&[before.clone()], &[after], &model, &nm, None).unwrap();
                let est = diagnose_statistical(&ev, &space, &DiagnosisConfig::default()).unwrap();
                let kl = kl_divergence(&truth, &est, KL_SMOOTHING);
                assert!(kl <= last + 1e-9, "seed {seed} col {col} factor {factor}: {kl} > {last}");
                last = kl;
            }
        }
    }

    #[test]
    fn aggregate_mc_identities() {
        let one = DiagnosisVector::one_hot(3, 1);
        let agg = aggregate_mc(&vec![one.clone(); 5]).unwrap();
        assert_eq!(agg, one);
        let a = DiagnosisVector { probs: vec![1.0, 0.0] };
        let b = DiagnosisVector { probs: vec![0.0, 1.0] };
        let agg = aggregate_mc(&[a, b]).unwrap();
        assert_eq!(agg.probs, vec![0.5, 0.5]);
        assert!(aggregate_mc(&[]).is_err());
    }

    #[test]
    fn aggregate_draws_concentrates() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let zeta = DiagnosisVector { probs: vec![0.5, 0.3, 0.15, 0.05] };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws: Vec<usize> = (0..1000)
            .map(|_| {
                let u: f64 = rng.random();
                let mut cdf = 0.0;
                let mut idx = zeta.probs.len() - 1;
                for (i, p) in zeta.probs.iter().enumerate() {
                    cdf += p;
                    if u < cdf {
                        idx = i;
                        break;
                    }
                }
                idx
            })
            .collect();
        let agg = aggregate_draws(&draws, 4).unwrap();
        for (a, b) in agg.probs.iter().zip(&zeta.probs) {
            assert!((a - b).abs() <= 0.05, "{a} vs {b}");
        }
    }

    #[test]
    fn entropy_identities() {
        assert_eq!(entropy(&DiagnosisVector::one_hot(8, 3)), 0.0);
        let h = entropy(&DiagnosisVector::uniform(8));
        assert!((h - (8.0f64).ln()).abs() < 1e-12);
        let h2 = entropy(&DiagnosisVector { probs: vec![0.5, 0.5] });
        assert!((h2 - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_identities() {
        let p = DiagnosisVector { probs: vec![0.4, 0.3, 0.2, 0.1] };
        assert_eq!(kl_divergence(&p, &p, KL_SMOOTHING), 0.0);
        let one = DiagnosisVector::one_hot(8, 0);
        let uni = DiagnosisVector::uniform(8);
        let kl = kl_divergence(&one, &uni, KL_SMOOTHING);
        assert!((kl - (8.0f64).ln()).abs() < 1e-9);
        // one-hot truth against the worked probability listing: ln(1/0.4)
        let est = DiagnosisVector {
            probs: vec![0.4, 0.2, 0.15, 0.05, 0.05, 0.05, 0.05, 0.05],
        };
        let kl = kl_divergence(&one, &est, KL_SMOOTHING);
        assert!((kl - (1.0f64 / 0.4).ln()).abs() < 1e-12);
    }

    #[test]
    fn parses_uniform_probability_listing() {
        let nm = names();
        let space = ReasonSpace::features_only(&nm);
        let text = nm
            .iter()
            .map(|n| format!("Hypothesis: [{n}]; Probability: 12.5%"))
            .collect::<Vec<_>>()
            .join("\n");
        let zeta = parse_probability_lines(&text, &space).unwrap();
        for p in &zeta.probs {
            assert!((p - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn renormalizes_short_mass_and_splits_combinations() {
        let nm = names();
        let space = ReasonSpace::features_only(&nm);
        let text = "Hypothesis: [Age]; Probability: 60%\nHypothesis: [BMI, Insulin]; Probability: 30%";
        let zeta = parse_probability_lines(text, &space).unwrap();
        assert!(zeta.is_valid());
        let age = space.index_of(&Reason::FeatureCorrupted("Age".into())).unwrap();
        let bmi = space.index_of(&Reason::FeatureCorrupted("BMI".into())).unwrap();
        assert!((zeta.probs[age] - 60.0 / 90.0).abs() < 1e-9);
        assert!((zeta.probs[bmi] - 15.0 / 90.0).abs() < 1e-9);
    }

    #[test]
    fn unknown_feature_mass_goes_to_no_issue() {
        let nm = names();
        let space = ReasonSpace::canonical(&nm);
        let text = "Hypothesis: [Age]; Probability: 50%\nHypothesis: [Bogus]; Probability: 50%";
        let zeta = parse_probability_lines(text, &space).unwrap();
        let ni = space.index_of(&Reason::NoIssue).unwrap();
        assert!((zeta.probs[ni] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn unparseable_reply_is_an_error_with_raw_text() {
        let space = ReasonSpace::features_only(&names());
        let err = parse_probability_lines("no structure here", &space).unwrap_err();
        match err {
            DiagnosisError::Parse { raw, .. } => assert!(raw.contains("no structure")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn confidence_words_map_to_scores() {
        let nm = names();
        let space = ReasonSpace::features_only(&nm);
        let text = "Covariate: Age; Hypothesis: shifted; Strength of belief: Extremely Confident\n\
                    Covariate: BMI; Hypothesis: shifted; Strength of belief: Unsure";
        let zeta = parse_confidence_lines(text, &space).unwrap();
        let age = space.index_of(&Reason::FeatureCorrupted("Age".into())).unwrap();
        let bmi = space.index_of(&Reason::FeatureCorrupted("BMI".into())).unwrap();
        assert!((zeta.probs[age] / zeta.probs[bmi] - 10.0 / 4.0).abs() < 1e-9);
    }
}
