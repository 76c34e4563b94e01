//! Synthetic drifting stream generator.
//!
//! A scenario is a two-phase data generating process over Gaussian features
//! with a time-varying logistic label law and an abrupt parameter shift
//! between the phases. The post-shift phase can additionally be corrupted by
//! multiplying a fraction of entries in selected columns by an outlier
//! factor.
//!
//! All randomness flows through `ChaCha8` (a counter-based generator) seeded
//! from the scenario seed. Independent sub-streams are derived with
//! [`sub_seed`]; the stream tags are listed in [`seeds`]. Identical
//! `ScenarioSpec`s therefore produce bit-identical streams on every platform.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("batch size {batch} exceeds stream length {stream}")]
    BatchTooLarge { batch: usize, stream: usize },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One Gaussian feature of the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub mean: f64,
    /// Must be strictly positive.
    pub std: f64,
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, mean: f64, std: f64) -> Self {
        Self { name: name.into(), mean, std }
    }
}

/// Parameters of the logistic label law for one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpParams {
    pub intercept: f64,
    /// One coefficient per feature, in feature order.
    pub coefficients: Vec<f64>,
    /// Standard deviation of the additive logit noise, >= 0.
    pub noise_std: f64,
}

/// How corrupted entries are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionMode {
    /// Multiply a uniformly chosen `floor(tau * n)` subset of each selected
    /// column by the outlier factor.
    Multiply,
    /// Multiply every entry of the selected columns (test-time corruption).
    ScaleColumn,
}

/// Corruption applied to the post-shift phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Names of the corrupted columns (size k).
    pub columns: Vec<String>,
    /// Fraction of entries corrupted per selected column, in [0, 1].
    pub fraction: f64,
    /// Multiplicative outlier factor, > 0.
    pub outlier_factor: f64,
    pub mode: CorruptionMode,
}

/// A full two-phase drifting scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub features: Vec<FeatureSpec>,
    pub pre: DgpParams,
    pub post: DgpParams,
    pub n_pre: usize,
    pub n_post: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionSpec>,
    /// Fraction of the pre phase used for training, in (0, 1).
    pub split_fraction: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.features.is_empty() {
            return Err(DatagenError::InvalidScenario("no features".into()));
        }
        let mut names: Vec<&str> = self.features.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.features.len() {
            return Err(DatagenError::InvalidScenario("duplicate feature names".into()));
        }
        for f in &self.features {
            if f.std <= 0.0 {
                return Err(DatagenError::InvalidScenario(format!("feature {} has std <= 0", f.name)));
            }
        }
        for (tag, p) in [("pre", &self.pre), ("post", &self.post)] {
            if p.coefficients.len() != self.features.len() {
                return Err(DatagenError::InvalidScenario(format!(
                    "{tag} coefficient count {} != feature count {}",
                    p.coefficients.len(),
                    self.features.len()
                )));
            }
            if p.noise_std < 0.0 {
                return Err(DatagenError::InvalidScenario(format!("{tag} noise_std < 0")));
            }
        }
        if self.n_pre == 0 || self.n_post == 0 {
            return Err(DatagenError::InvalidScenario("n_pre and n_post must be >= 1".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(DatagenError::InvalidScenario("split_fraction must be in (0, 1)".into()));
        }
        if let Some(c) = &self.corruption {
            if !(0.0..=1.0).contains(&c.fraction) {
                return Err(DatagenError::InvalidScenario("corruption fraction outside [0, 1]".into()));
            }
            if c.outlier_factor <= 0.0 {
                return Err(DatagenError::InvalidScenario("outlier_factor must be > 0".into()));
            }
            for col in &c.columns {
                if !self.features.iter().any(|f| &f.name == col) {
                    return Err(DatagenError::InvalidScenario(format!("corrupted column {col} is not a feature")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, DatagenError> {
        let spec: ScenarioSpec =
            serde_json::from_str(s).map_err(|e| DatagenError::InvalidScenario(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Row-major labeled batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    /// Flattened n x d matrix, row major.
    pub x: Vec<f64>,
    pub y: Vec<u8>,
    pub n_cols: usize,
    /// Batch index in the stream.
    pub t: usize,
    /// Parallel to `x`: true where an entry was corrupted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption_mask: Option<Vec<bool>>,
}

impl LabeledBatch {
    pub fn new(x: Vec<f64>, y: Vec<u8>, n_cols: usize, t: usize) -> Self {
        assert_eq!(x.len(), y.len() * n_cols, "x/y dimensions inconsistent");
        Self { x, y, n_cols, t, corruption_mask: None }
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_cols..(i + 1) * self.n_cols]
    }

    /// Concatenate batches into one (the result keeps the first batch's `t`).
    pub fn concat(batches: &[LabeledBatch]) -> LabeledBatch {
        assert!(!batches.is_empty(), "cannot concat zero batches");
        let n_cols = batches[0].n_cols;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for b in batches {
            assert_eq!(b.n_cols, n_cols);
            x.extend_from_slice(&b.x);
            y.extend_from_slice(&b.y);
        }
        LabeledBatch { x, y, n_cols, t: batches[0].t, corruption_mask: None }
    }

    /// The trailing `rows` rows as a new batch.
    pub fn tail(&self, rows: usize) -> LabeledBatch {
        let n = self.n_rows();
        let keep = rows.min(n);
        let start = n - keep;
        LabeledBatch {
            x: self.x[start * self.n_cols..].to_vec(),
            y: self.y[start..].to_vec(),
            n_cols: self.n_cols,
            t: self.t,
            corruption_mask: self
                .corruption_mask
                .as_ref()
                .map(|m| m[start * self.n_cols..].to_vec()),
        }
    }
}

/// Stream-splitting tags for the scenario RNG. Each purpose draws from its
/// own ChaCha stream so sub-streams stay independent and reproducible.
pub mod seeds {
    pub const PRE_FEATURES: u64 = 1;
    pub const PRE_LABELS: u64 = 2;
    pub const POST_FEATURES: u64 = 3;
    pub const POST_LABELS: u64 = 4;
    pub const CORRUPTION: u64 = 5;
}

/// Derive an independent sub-seed from a base seed and a stream tag
/// (SplitMix64 over `seed ^ (tag * golden ratio)`).
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draw an n x d matrix with column j ~ Normal(mean_j, std_j^2), i.i.d. rows.
pub fn generate_features(n: usize, specs: &[FeatureSpec], rng_seed: u64) -> Vec<f64> {
    assert!(n >= 1, "n must be >= 1");
    let d = specs.len();
    let mut rng = rng_from(rng_seed);
    let dists: Vec<Normal<f64>> = specs
        .iter()
        .map(|f| Normal::new(f.mean, f.std).expect("std > 0"))
        .collect();
    // Column by column keeps each feature's draws contiguous in the stream.
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    for dist in &dists {
        cols.push((0..n).map(|_| dist.sample(&mut rng)).collect());
    }
    let mut x = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            x[i * d + j] = cols[j][i];
        }
    }
    x
}

/// Sample Bernoulli labels from the logistic law
/// `logit = intercept + beta . x + eps`, `eps ~ Normal(0, noise_std^2)`.
pub fn generate_labels(
    x: &[f64],
    n_cols: usize,
    dgp: &DgpParams,
    rng_seed: u64,
) -> Result<Vec<u8>, DatagenError> {
    if dgp.coefficients.len() != n_cols {
        return Err(DatagenError::DimensionMismatch(format!(
            "dgp has {} coefficients, matrix has {} columns",
            dgp.coefficients.len(),
            n_cols
        )));
    }
    let n = x.len() / n_cols;
    // Stream 0: logit noise. Stream 1: label uniforms.
    let mut noise_rng = rng_from(rng_seed);
    noise_rng.set_stream(0);
    let mut label_rng = rng_from(rng_seed);
    label_rng.set_stream(1);
    let noise = Normal::new(0.0, dgp.noise_std.max(0.0)).unwrap_or(Normal::new(0.0, f64::MIN_POSITIVE).unwrap());
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x[i * n_cols..(i + 1) * n_cols];
        let mut logit = dgp.intercept;
        for (v, b) in row.iter().zip(&dgp.coefficients) {
            logit += v * b;
        }
        if dgp.noise_std > 0.0 {
            logit += noise.sample(&mut noise_rng);
        }
        let p = 1.0 / (1.0 + (-logit).exp());
        y.push(u8::from(label_rng.random::<f64>() < p));
    }
    Ok(y)
}

/// Apply corruption to a batch, returning a copy with the mask filled in.
///
/// Multiply mode corrupts a without-replacement `floor(tau * n)` subset per
/// selected column (independently across columns); scale mode multiplies every
/// entry of the selected columns. Unselected entries are bit-identical.
pub fn corrupt(
    batch: &LabeledBatch,
    feature_names: &[String],
    spec: &CorruptionSpec,
    rng_seed: u64,
) -> LabeledBatch {
    let n = batch.n_rows();
    let d = batch.n_cols;
    let mut out = batch.clone();
    let mut mask = vec![false; n * d];
    if spec.columns.is_empty() && spec.fraction > 0.0 {
        log::warn!("corruption requested with an empty column set; returning input unchanged");
        out.corruption_mask = Some(mask);
        return out;
    }
    // Canonical column order keeps the draw sequence independent of the
    // order the caller listed the columns in.
    let mut col_indices: Vec<usize> = spec
        .columns
        .iter()
        .filter_map(|c| feature_names.iter().position(|f| f == c))
        .collect();
    col_indices.sort_unstable();
    for (k, &j) in col_indices.iter().enumerate() {
        match spec.mode {
            CorruptionMode::Multiply => {
                let m = ((spec.fraction * n as f64).floor() as usize).min(n);
                let mut rng = rng_from(rng_seed);
                rng.set_stream(k as u64);
                let mut idx: Vec<usize> = (0..n).collect();
                idx.partial_shuffle(&mut rng, m);
                for &i in idx.iter().take(m) {
                    out.x[i * d + j] *= spec.outlier_factor;
                    mask[i * d + j] = true;
                }
            }
            CorruptionMode::ScaleColumn => {
                for i in 0..n {
                    out.x[i * d + j] *= spec.outlier_factor;
                    mask[i * d + j] = true;
                }
            }
        }
    }
    out.corruption_mask = Some(mask);
    out
}

/// The generated stream: a training set, the ordered test batches, and the
/// true shift index (first post-phase batch).
#[derive(Debug, Clone)]
pub struct StreamBundle {
    pub train: LabeledBatch,
    pub batches: Vec<LabeledBatch>,
    pub shift_index: usize,
    pub feature_names: Vec<String>,
}

/// Generate the full stream for a scenario.
///
/// The pre phase is split by `split_fraction` into the training set and the
/// pre-test stream; the post phase (with corruption applied, when configured)
/// is appended. Batches are chunked per phase so the shift falls on a batch
/// boundary; the final chunk of each phase may be partial.
pub fn build_stream(scenario: &ScenarioSpec, batch_size: usize) -> Result<StreamBundle, DatagenError> {
    scenario.validate()?;
    if batch_size == 0 {
        return Err(DatagenError::InvalidScenario("batch_size must be >= 1".into()));
    }
    let d = scenario.features.len();
    let names: Vec<String> = scenario.features.iter().map(|f| f.name.clone()).collect();

    let x_pre = generate_features(scenario.n_pre, &scenario.features, sub_seed(scenario.seed, seeds::PRE_FEATURES));
    let y_pre = generate_labels(&x_pre, d, &scenario.pre, sub_seed(scenario.seed, seeds::PRE_LABELS))?;
    let x_post = generate_features(scenario.n_post, &scenario.features, sub_seed(scenario.seed, seeds::POST_FEATURES));
    let y_post = generate_labels(&x_post, d, &scenario.post, sub_seed(scenario.seed, seeds::POST_LABELS))?;

    let n_train = ((scenario.split_fraction * scenario.n_pre as f64).floor() as usize)
        .clamp(1, scenario.n_pre - 1);
    let train = LabeledBatch::new(x_pre[..n_train * d].to_vec(), y_pre[..n_train].to_vec(), d, 0);

    let pre_stream = LabeledBatch::new(x_pre[n_train * d..].to_vec(), y_pre[n_train..].to_vec(), d, 0);
    let mut post_stream = LabeledBatch::new(x_post, y_post, d, 0);
    if let Some(c) = &scenario.corruption {
        post_stream = corrupt(&post_stream, &names, c, sub_seed(scenario.seed, seeds::CORRUPTION));
    }

    if batch_size > pre_stream.n_rows() + post_stream.n_rows() {
        return Err(DatagenError::BatchTooLarge {
            batch: batch_size,
            stream: pre_stream.n_rows() + post_stream.n_rows(),
        });
    }

    let mut batches = Vec::new();
    let mut t = 0;
    for phase in [&pre_stream, &post_stream] {
        let n = phase.n_rows();
        let mut start = 0;
        while start < n {
            let end = (start + batch_size).min(n);
            let mut b = LabeledBatch::new(
                phase.x[start * d..end * d].to_vec(),
                phase.y[start..end].to_vec(),
                d,
                t,
            );
            b.corruption_mask = phase
                .corruption_mask
                .as_ref()
                .map(|m| m[start * d..end * d].to_vec());
            batches.push(b);
            t += 1;
            start = end;
        }
    }
    let shift_index = pre_stream.n_rows().div_ceil(batch_size);

    Ok(StreamBundle { train, batches, shift_index, feature_names: names })
}

/// The synthetic diabetes features (one Gaussian per covariate).
pub fn diabetes_features() -> Vec<FeatureSpec> {
    vec![
        FeatureSpec::new("HbA1c", 5.7, 0.5),
        FeatureSpec::new("FastingGlucose", 100.0, 15.0),
        FeatureSpec::new("Age", 50.0, 12.0),
        FeatureSpec::new("BMI", 25.0, 4.0),
        FeatureSpec::new("BloodPressure", 120.0, 15.0),
        FeatureSpec::new("Cholesterol", 200.0, 40.0),
        FeatureSpec::new("Insulin", 85.0, 45.0),
        FeatureSpec::new("PhysicalActivity", 3.0, 1.0),
    ]
}

/// Pre-shift logistic coefficients of the diabetes scenario.
pub const DIABETES_BETA_PRE: [f64; 8] = [0.3, 0.0075, -0.01, 0.05, 0.04, -0.03, -0.02, -0.1];
/// Post-shift logistic coefficients of the diabetes scenario.
pub const DIABETES_BETA_POST: [f64; 8] = [-0.3, -0.0075, 0.2, -0.05, -0.015, -0.001, 0.02, -2.0];
/// Logit noise shared by both phases.
pub const DIABETES_NOISE_STD: f64 = 0.2;

/// Desk-scale diabetes scenario: 10^4 rows per phase, 70/30 split, abrupt
/// coefficient shift, optional corruption.
pub fn diabetes_scenario(corruption: Option<CorruptionSpec>, seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        features: diabetes_features(),
        pre: DgpParams { intercept: 0.0, coefficients: DIABETES_BETA_PRE.to_vec(), noise_std: DIABETES_NOISE_STD },
        post: DgpParams { intercept: 0.0, coefficients: DIABETES_BETA_POST.to_vec(), noise_std: DIABETES_NOISE_STD },
        n_pre: 10_000,
        n_post: 10_000,
        corruption,
        split_fraction: 0.7,
        seed,
    }
}

/// Write the stream as CSV (header row, feature columns, `y`, `t`) plus a
/// parallel `<path>.mask.csv` with 0/1 corruption indicators when any batch
/// carries a mask.
pub fn export_stream_csv(bundle: &StreamBundle, path: &Path) -> Result<(), DatagenError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{},y,t", bundle.feature_names.join(","))?;
    for b in &bundle.batches {
        for i in 0..b.n_rows() {
            let row: Vec<String> = b.row(i).iter().map(|v| format!("{v:.9}")).collect();
            writeln!(f, "{},{},{}", row.join(","), b.y[i], b.t)?;
        }
    }
    f.flush()?;
    if bundle.batches.iter().any(|b| b.corruption_mask.is_some()) {
        let mask_path = path.with_extension("mask.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(mask_path)?);
        writeln!(f, "{},t", bundle.feature_names.join(","))?;
        for b in &bundle.batches {
            let d = b.n_cols;
            for i in 0..b.n_rows() {
                let row: Vec<String> = (0..d)
                    .map(|j| {
                        let bit = b
                            .corruption_mask
                            .as_ref()
                            .map(|m| m[i * d + j])
                            .unwrap_or(false);
                        if bit { "1".into() } else { "0".into() }
                    })
                    .collect();
                writeln!(f, "{},{}", row.join(","), b.t)?;
            }
        }
        f.flush()?;
    }
    Ok(())
}

/// Generic CSV stream reader: every column except `y` (and an optional `t`)
/// is a feature; rows are chunked into batches of `batch_size` in file order.
pub fn load_stream_csv(path: &Path, batch_size: usize) -> Result<StreamBundle, DatagenError> {
    let file = std::fs::File::open(path)?;
    let mut reader = std::io::BufReader::new(file);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    let y_idx = cols
        .iter()
        .position(|c| *c == "y")
        .ok_or_else(|| DatagenError::Csv("missing required column 'y'".into()))?;
    let t_idx = cols.iter().position(|c| *c == "t");
    let feat_idx: Vec<usize> = (0..cols.len()).filter(|i| *i != y_idx && Some(*i) != t_idx).collect();
    let names: Vec<String> = feat_idx.iter().map(|&i| cols[i].to_string()).collect();

    let mut x = Vec::new();
    let mut y = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != cols.len() {
            return Err(DatagenError::Csv(format!("row {} has {} fields, expected {}", ln + 2, parts.len(), cols.len())));
        }
        for &i in &feat_idx {
            x.push(parts[i].parse::<f64>().map_err(|e| DatagenError::Csv(format!("row {}: {e}", ln + 2)))?);
        }
        let label: f64 = parts[y_idx].parse().map_err(|e| DatagenError::Csv(format!("row {}: {e}", ln + 2)))?;
        y.push(u8::from(label >= 0.5));
    }
    let d = names.len();
    let n = y.len();
    if n == 0 {
        return Err(DatagenError::Csv("empty stream".into()));
    }
    if batch_size == 0 || batch_size > n {
        return Err(DatagenError::BatchTooLarge { batch: batch_size, stream: n });
    }
    let mut batches = Vec::new();
    let mut t = 0;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        batches.push(LabeledBatch::new(x[start * d..end * d].to_vec(), y[start..end].to_vec(), d, t));
        t += 1;
        start = end;
    }
    Ok(StreamBundle { train: batches[0].clone(), batches, shift_index: 0, feature_names: names })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_sample_mean_matches_spec() {
        let specs = vec![FeatureSpec::new("HbA1c", 5.7, 0.5)];
        let x = generate_features(100_000, &specs, 42);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        assert!((mean - 5.7).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn degenerate_variance_hugs_mean() {
        let specs = vec![FeatureSpec::new("f", 3.0, 1e-9)];
        let x = generate_features(1, &specs, 0);
        assert!((x[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn features_deterministic_given_seed() {
        let specs = diabetes_features();
        let a = generate_features(500, &specs, 7);
        let b = generate_features(500, &specs, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn symmetric_logit_gives_half_rate() {
        let specs = vec![FeatureSpec::new("f", 0.0, 1.0)];
        let x = generate_features(100_000, &specs, 1);
        let dgp = DgpParams { intercept: 0.0, coefficients: vec![0.0], noise_std: 0.0 };
        let y = generate_labels(&x, 1, &dgp, 2).unwrap();
        let rate = y.iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64;
        assert!((rate - 0.5).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn saturated_intercept_forces_labels() {
        let specs = vec![FeatureSpec::new("f", 0.0, 1.0)];
        let x = generate_features(1000, &specs, 3);
        let dgp = DgpParams { intercept: 10.0, coefficients: vec![0.0], noise_std: 0.0 };
        let y = generate_labels(&x, 1, &dgp, 4).unwrap();
        let ones: usize = y.iter().map(|&v| v as usize).sum();
        // sigmoid(10) ~ 1 - 5e-5; binomial tail leaves at most one failure in
        // practice at n = 1000.
        assert!(ones >= 999, "ones {ones}");
    }

    #[test]
    fn label_dimension_mismatch_is_error() {
        let dgp = DgpParams { intercept: 0.0, coefficients: vec![0.0, 1.0], noise_std: 0.0 };
        assert!(generate_labels(&[1.0, 2.0, 3.0], 3, &dgp, 0).is_err());
    }

    #[test]
    fn zero_fraction_corruption_is_identity() {
        let names: Vec<String> = vec!["a".into(), "b".into()];
        let batch = LabeledBatch::new(vec![1.0, 2.0, 3.0, 4.0], vec![0, 1], 2, 0);
        let spec = CorruptionSpec {
            columns: vec!["a".into()],
            fraction: 0.0,
            outlier_factor: 10.0,
            mode: CorruptionMode::Multiply,
        };
        let out = corrupt(&batch, &names, &spec, 0);
        assert_eq!(out.x, batch.x);
        assert!(out.corruption_mask.unwrap().iter().all(|&m| !m));
    }

    #[test]
    fn multiply_mode_masks_exact_count() {
        let specs = diabetes_features();
        let names: Vec<String> = specs.iter().map(|f| f.name.clone()).collect();
        let x = generate_features(400, &specs, 9);
        let y = vec![0u8; 400];
        let batch = LabeledBatch::new(x, y, specs.len(), 0);
        let spec = CorruptionSpec {
            columns: vec!["Age".into(), "BMI".into(), "Insulin".into()],
            fraction: 0.05,
            outlier_factor: 10.0,
            mode: CorruptionMode::Multiply,
        };
        let out = corrupt(&batch, &names, &spec, 11);
        let mask = out.corruption_mask.as_ref().unwrap();
        let d = specs.len();
        for col in ["Age", "BMI", "Insulin"] {
            let j = names.iter().position(|n| n == col).unwrap();
            let count = (0..400).filter(|i| mask[i * d + j]).count();
            assert_eq!(count, 20, "column {col}");
        }
        // untouched entries are bit-identical
        for (i, (&a, &b)) in out.x.iter().zip(&batch.x).enumerate() {
            if !mask[i] {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn scale_column_mode_is_exactly_invertible() {
        let specs = diabetes_features();
        let names: Vec<String> = specs.iter().map(|f| f.name.clone()).collect();
        let x = generate_features(100, &specs, 13);
        let batch = LabeledBatch::new(x, vec![0u8; 100], specs.len(), 0);
        let spec = CorruptionSpec {
            columns: vec!["Cholesterol".into()],
            fraction: 1.0,
            outlier_factor: 5.0,
            mode: CorruptionMode::ScaleColumn,
        };
        let out = corrupt(&batch, &names, &spec, 17);
        let j = names.iter().position(|n| n == "Cholesterol").unwrap();
        let d = specs.len();
        for i in 0..100 {
            let restored = out.x[i * d + j] / 5.0;
            assert!((restored - batch.x[i * d + j]).abs() < 1e-12);
        }
        assert_eq!(
            out.corruption_mask.unwrap().iter().filter(|&&m| m).count(),
            100
        );
    }

    #[test]
    fn stream_split_and_shift_index() {
        let scenario = ScenarioSpec { n_pre: 100_000, n_post: 1000, ..diabetes_scenario(None, 42) };
        let bundle = build_stream(&scenario, 500).unwrap();
        assert_eq!(bundle.train.n_rows(), 70_000);
        let pre_rows: usize = bundle.batches[..bundle.shift_index].iter().map(|b| b.n_rows()).sum();
        assert_eq!(pre_rows, 30_000);
        assert_eq!(bundle.shift_index, 60);
    }

    #[test]
    fn stream_deterministic_given_spec() {
        let scenario = ScenarioSpec { n_pre: 600, n_post: 600, ..diabetes_scenario(None, 5) };
        let a = build_stream(&scenario, 100).unwrap();
        let b = build_stream(&scenario, 100).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.batches, b.batches);
    }

    #[test]
    fn oversized_batch_is_error() {
        let scenario = ScenarioSpec { n_pre: 100, n_post: 100, ..diabetes_scenario(None, 1) };
        assert!(matches!(build_stream(&scenario, 100_000), Err(DatagenError::BatchTooLarge { .. })));
    }

    #[test]
    fn scenario_json_round_trip() {
        let scenario = diabetes_scenario(
            Some(CorruptionSpec {
                columns: vec!["Age".into()],
                fraction: 0.05,
                outlier_factor: 6.0,
                mode: CorruptionMode::Multiply,
            }),
            42,
        );
        let back = ScenarioSpec::from_json(&scenario.to_json()).unwrap();
        assert_eq!(back, scenario);
    }

    #[test]
    fn csv_round_trip_preserves_rows() {
        let scenario = ScenarioSpec { n_pre: 300, n_post: 200, ..diabetes_scenario(None, 3) };
        let bundle = build_stream(&scenario, 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stream.csv");
        export_stream_csv(&bundle, &path).unwrap();
        let loaded = load_stream_csv(&path, 100).unwrap();
        let total: usize = bundle.batches.iter().map(|b| b.n_rows()).sum();
        let loaded_total: usize = loaded.batches.iter().map(|b| b.n_rows()).sum();
        assert_eq!(total, loaded_total);
        assert_eq!(loaded.feature_names, bundle.feature_names);
        for (a, b) in loaded.batches[0].y.iter().zip(&bundle.batches[0].y) {
            assert_eq!(a, b);
        }
    }
}
