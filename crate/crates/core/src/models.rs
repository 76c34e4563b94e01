//! Predictor abstraction and the logistic-regression learner used as the
//! deployed model, plus accuracy-weighted ensembles.
//!
//! Fitting is full-batch gradient descent with Armijo backtracking on the
//! L2-penalized logistic loss over standardized features. It is deterministic
//! given data order, so refits inside the healing loop are reproducible.

use crate::datagen::LabeledBatch;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty training data")]
    EmptyData,
}

/// A trained binary classifier. Implementations must be immutable after fit.
pub trait Predictor: Send + Sync {
    /// P(y = 1) per row of the row-major matrix.
    fn predict_proba(&self, x: &[f64], n_cols: usize) -> Vec<f64>;

    /// Hard labels at the 0.5 threshold.
    fn predict(&self, x: &[f64], n_cols: usize) -> Vec<u8> {
        self.predict_proba(x, n_cols)
            .into_iter()
            .map(|p| u8::from(p >= 0.5))
            .collect()
    }
}

/// Shared handle to a fitted predictor.
pub type SharedPredictor = Arc<dyn Predictor>;

/// Per-feature (mean, std) fitted on training data; zero-variance columns
/// get std 1 so standardization stays defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[f64], n_cols: usize) -> Self {
        let n = x.len() / n_cols;
        let mut means = vec![0.0; n_cols];
        for i in 0..n {
            for j in 0..n_cols {
                means[j] += x[i * n_cols + j];
            }
        }
        for m in &mut means {
            *m /= n as f64;
        }
        let mut vars = vec![0.0; n_cols];
        for i in 0..n {
            for j in 0..n_cols {
                let d = x[i * n_cols + j] - means[j];
                vars[j] += d * d;
            }
        }
        let stds = vars
            .into_iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 { s } else { 1.0 }
            })
            .collect();
        Self { means, stds }
    }

    #[inline]
    pub fn transform_row(&self, row: &[f64], out: &mut [f64]) {
        for j in 0..row.len() {
            out[j] = (row[j] - self.means[j]) / self.stds[j];
        }
    }
}

/// Logistic model over standardized features. A degenerate training set
/// (single class) falls back to a constant-probability model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub standardizer: Standardizer,
    /// Set when the training data contained a single class; holds the
    /// observed class rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<f64>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stable mean logistic loss plus the L2 penalty on the weights.
fn penalized_loss(z: &[f64], y: &[u8], w: &[f64], l2: f64) -> f64 {
    let n = z.len() as f64;
    let mut loss = 0.0;
    for (&zi, &yi) in z.iter().zip(y) {
        // log(1 + e^-|z|) + max(z, 0) - y z
        loss += (-zi.abs()).exp().ln_1p() + zi.max(0.0) - f64::from(yi) * zi;
    }
    loss / n + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Analytic gradient of [`penalized_loss`] at (w, b) over standardized data.
/// Exposed for the finite-difference check in the test suite.
pub fn logistic_gradient(
    z_data: &[f64],
    n_cols: usize,
    y: &[u8],
    w: &[f64],
    b: f64,
    l2: f64,
) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut gw = vec![0.0; n_cols];
    let mut gb = 0.0;
    for i in 0..n {
        let row = &z_data[i * n_cols..(i + 1) * n_cols];
        let mut z = b;
        for (v, wj) in row.iter().zip(w) {
            z += v * wj;
        }
        let r = sigmoid(z) - f64::from(y[i]);
        for (g, v) in gw.iter_mut().zip(row) {
            *g += r * v;
        }
        gb += r;
    }
    for (g, wj) in gw.iter_mut().zip(w) {
        *g = *g / n as f64 + l2 * wj;
    }
    (gw, gb / n as f64)
}

/// Loss at (w, b) over standardized data; the finite-difference oracle in the
/// tests drives this directly.
pub fn logistic_loss(z_data: &[f64], n_cols: usize, y: &[u8], w: &[f64], b: f64, l2: f64) -> f64 {
    let n = y.len();
    let mut z = vec![0.0; n];
    for i in 0..n {
        let row = &z_data[i * n_cols..(i + 1) * n_cols];
        let mut zi = b;
        for (v, wj) in row.iter().zip(w) {
            zi += v * wj;
        }
        z[i] = zi;
    }
    penalized_loss(&z, y, w, l2)
}

pub const L2_PENALTY: f64 = 1e-4;
pub const MAX_ITERS: usize = 500;
pub const GRAD_TOL: f64 = 1e-6;

/// Fit a logistic model on the concatenation of the given batches.
///
/// Single-class data falls back to a constant model at the observed class
/// rate instead of erroring, because post-drift windows can be single-class
/// at small scales.
pub fn fit(batches: &[LabeledBatch]) -> Result<LogisticModel, ModelError> {
    if batches.is_empty() || batches.iter().all(|b| b.n_rows() == 0) {
        return Err(ModelError::EmptyData);
    }
    let data = LabeledBatch::concat(batches);
    fit_rows(&data.x, &data.y, data.n_cols)
}

/// Fit from raw rows. See [`fit`].
pub fn fit_rows(x: &[f64], y: &[u8], n_cols: usize) -> Result<LogisticModel, ModelError> {
    let n = y.len();
    if n == 0 {
        return Err(ModelError::EmptyData);
    }
    let standardizer = Standardizer::fit(x, n_cols);
    let rate = y.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
    if n < 2 || rate == 0.0 || rate == 1.0 {
        return Ok(LogisticModel {
            weights: vec![0.0; n_cols],
            intercept: 0.0,
            standardizer,
            constant: Some(rate),
        });
    }

    let mut z_data = vec![0.0; x.len()];
    for i in 0..n {
        standardizer.transform_row(&x[i * n_cols..(i + 1) * n_cols], &mut z_data[i * n_cols..(i + 1) * n_cols]);
    }

    let mut w = vec![0.0; n_cols];
    let mut b = 0.0;
    let mut step = 1.0f64;
    for _ in 0..MAX_ITERS {
        let (gw, gb) = logistic_gradient(&z_data, n_cols, y, &w, b, L2_PENALTY);
        let gn2: f64 = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
        if gn2.sqrt() <= GRAD_TOL {
            break;
        }
        let l0 = logistic_loss(&z_data, n_cols, y, &w, b, L2_PENALTY);
        let mut t = step;
        let mut accepted = false;
        for _ in 0..40 {
            let wt: Vec<f64> = w.iter().zip(&gw).map(|(wj, g)| wj - t * g).collect();
            let bt = b - t * gb;
            if logistic_loss(&z_data, n_cols, y, &wt, bt, L2_PENALTY) <= l0 - 0.5 * t * gn2 {
                w = wt;
                b = bt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        step = (t * 2.0).min(64.0);
    }

    Ok(LogisticModel { weights: w, intercept: b, standardizer, constant: None })
}

impl Predictor for LogisticModel {
    fn predict_proba(&self, x: &[f64], n_cols: usize) -> Vec<f64> {
        if let Some(rate) = self.constant {
            return vec![rate; x.len() / n_cols.max(1)];
        }
        let n = x.len() / n_cols;
        let mut out = Vec::with_capacity(n);
        let mut zrow = vec![0.0; n_cols];
        for i in 0..n {
            self.standardizer.transform_row(&x[i * n_cols..(i + 1) * n_cols], &mut zrow);
            let mut z = self.intercept;
            for (v, wj) in zrow.iter().zip(&self.weights) {
                z += v * wj;
            }
            out.push(sigmoid(z));
        }
        out
    }
}

impl LogisticModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Fraction of correct predictions on a batch.
pub fn accuracy(model: &dyn Predictor, batch: &LabeledBatch) -> f64 {
    assert!(batch.n_rows() > 0, "accuracy over empty batch");
    let preds = model.predict(&batch.x, batch.n_cols);
    let correct = preds.iter().zip(&batch.y).filter(|(p, y)| p == y).count();
    correct as f64 / batch.n_rows() as f64
}

/// Ensemble voting by weighted average of member probabilities.
#[derive(Clone)]
pub struct WeightedEnsemble {
    pub members: Vec<SharedPredictor>,
    pub weights: Vec<f64>,
}

impl WeightedEnsemble {
    pub fn new(members: Vec<SharedPredictor>, weights: Vec<f64>) -> Self {
        assert!(!members.is_empty(), "ensemble needs at least one member");
        assert_eq!(members.len(), weights.len());
        assert!(weights.iter().all(|w| *w >= 0.0), "weights must be nonnegative");
        Self { members, weights }
    }
}

impl Predictor for WeightedEnsemble {
    fn predict_proba(&self, x: &[f64], n_cols: usize) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        let norm = if total > 0.0 { total } else { self.members.len() as f64 };
        let n = x.len() / n_cols;
        let mut acc = vec![0.0; n];
        for (m, &w) in self.members.iter().zip(&self.weights) {
            let w = if total > 0.0 { w } else { 1.0 };
            for (a, p) in acc.iter_mut().zip(m.predict_proba(x, n_cols)) {
                *a += w * p;
            }
        }
        acc.into_iter().map(|v| v / norm).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{self, diabetes_features, DgpParams, FeatureSpec};

    fn toy_batch(x: Vec<f64>, y: Vec<u8>, d: usize) -> LabeledBatch {
        LabeledBatch::new(x, y, d, 0)
    }

    #[test]
    fn separable_data_is_fit_perfectly() {
        // two clusters along the first feature
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..20 {
            let v = if i < 10 { -2.0 } else { 2.0 };
            x.extend_from_slice(&[v + 0.01 * i as f64, 1.0]);
            y.push(u8::from(i >= 10));
        }
        let batch = toy_batch(x, y, 2);
        let model = fit(&[batch.clone()]).unwrap();
        assert_eq!(accuracy(&model, &batch), 1.0);
    }

    #[test]
    fn single_class_falls_back_to_constant() {
        let batch = toy_batch(vec![1.0, 2.0, 3.0], vec![1, 1, 1], 1);
        let model = fit(&[batch.clone()]).unwrap();
        assert_eq!(model.constant, Some(1.0));
        assert!(model.predict_proba(&batch.x, 1).iter().all(|&p| p == 1.0));
    }

    #[test]
    fn empty_data_is_error() {
        assert!(fit(&[]).is_err());
    }

    #[test]
    fn pre_phase_fit_reaches_attainable_accuracy() {
        let specs = diabetes_features();
        let x = datagen::generate_features(70_000, &specs, 42);
        let dgp = DgpParams {
            intercept: 0.0,
            coefficients: datagen::DIABETES_BETA_PRE.to_vec(),
            noise_std: 0.2,
        };
        let y = datagen::generate_labels(&x, specs.len(), &dgp, 43).unwrap();
        let train = toy_batch(x, y, specs.len());
        let model = fit(&[train]).unwrap();

        let xh = datagen::generate_features(20_000, &specs, 44);
        let yh = datagen::generate_labels(&xh, specs.len(), &dgp, 45).unwrap();
        let held = toy_batch(xh, yh, specs.len());
        let acc = accuracy(&model, &held);
        assert!(acc >= 0.70, "held-out accuracy {acc}");
    }

    #[test]
    fn fit_is_deterministic() {
        let specs = diabetes_features();
        let x = datagen::generate_features(2000, &specs, 8);
        let dgp = DgpParams {
            intercept: 0.0,
            coefficients: datagen::DIABETES_BETA_PRE.to_vec(),
            noise_std: 0.2,
        };
        let y = datagen::generate_labels(&x, specs.len(), &dgp, 9).unwrap();
        let a = fit(&[toy_batch(x.clone(), y.clone(), specs.len())]).unwrap();
        let b = fit(&[toy_batch(x, y, specs.len())]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn standardization_absorbs_column_scaling() {
        let specs = vec![FeatureSpec::new("a", 0.0, 1.0), FeatureSpec::new("b", 5.0, 2.0)];
        let x = datagen::generate_features(800, &specs, 21);
        let dgp = DgpParams { intercept: 0.2, coefficients: vec![1.0, -0.5], noise_std: 0.0 };
        let y = datagen::generate_labels(&x, 2, &dgp, 22).unwrap();
        let m1 = fit(&[toy_batch(x.clone(), y.clone(), 2)]).unwrap();

        let c = 37.5;
        let mut xs = x.clone();
        for i in 0..800 {
            xs[i * 2] *= c;
        }
        let m2 = fit(&[toy_batch(xs.clone(), y, 2)]).unwrap();

        let p1 = m1.predict_proba(&x, 2);
        let p2 = m2.predict_proba(&xs, 2);
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn ensemble_single_member_is_identity() {
        let batch = toy_batch(vec![-1.0, 1.0, 2.0, -2.0], vec![0, 1, 1, 0], 1);
        let m = Arc::new(fit(&[batch.clone()]).unwrap());
        let ens = WeightedEnsemble::new(vec![m.clone()], vec![1.0]);
        assert_eq!(ens.predict(&batch.x, 1), m.predict(&batch.x, 1));
    }

    #[test]
    fn ensemble_degenerate_weight_follows_first() {
        struct Fixed(f64);
        impl Predictor for Fixed {
            fn predict_proba(&self, x: &[f64], n_cols: usize) -> Vec<f64> {
                vec![self.0; x.len() / n_cols]
            }
        }
        let ens = WeightedEnsemble::new(
            vec![Arc::new(Fixed(0.9)), Arc::new(Fixed(0.1))],
            vec![1.0, 0.0],
        );
        assert_eq!(ens.predict(&[0.0], 1), vec![1]);
    }

    #[test]
    fn ensemble_averages_probabilities() {
        struct Fixed(f64);
        impl Predictor for Fixed {
            fn predict_proba(&self, x: &[f64], n_cols: usize) -> Vec<f64> {
                vec![self.0; x.len() / n_cols]
            }
        }
        let ens = WeightedEnsemble::new(
            vec![Arc::new(Fixed(0.9)), Arc::new(Fixed(0.9)), Arc::new(Fixed(0.1))],
            vec![1.0, 1.0, 1.0],
        );
        let p = ens.predict_proba(&[0.0], 1);
        assert!((p[0] - (0.9 + 0.9 + 0.1) / 3.0).abs() < 1e-12);
        assert_eq!(ens.predict(&[0.0], 1), vec![1]);
    }

    #[test]
    fn model_json_round_trip() {
        let batch = toy_batch(vec![-1.0, 1.0, 2.0, -2.0], vec![0, 1, 1, 0], 1);
        let m = fit(&[batch]).unwrap();
        let back = LogisticModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn gradient_matches_central_differences() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..50 {
            let n = rng.random_range(5..40);
            let d = rng.random_range(1..6);
            let z: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: f64 = rng.random_range(-1.0..1.0);
            let (gw, gb) = logistic_gradient(&z, d, &y, &w, b, L2_PENALTY);
            let h = 1e-6;
            for j in 0..d {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[j] += h;
                wm[j] -= h;
                let fd = (logistic_loss(&z, d, &y, &wp, b, L2_PENALTY)
                    - logistic_loss(&z, d, &y, &wm, b, L2_PENALTY))
                    / (2.0 * h);
                let denom = gw[j].abs().max(fd.abs()).max(1e-8);
                assert!(((gw[j] - fd) / denom).abs() <= 1e-5, "dw[{j}]: {0} vs {fd}", gw[j]);
            }
            let fd = (logistic_loss(&z, d, &y, &w, b + h, L2_PENALTY)
                - logistic_loss(&z, d, &y, &w, b - h, L2_PENALTY))
                / (2.0 * h);
            let denom = gb.abs().max(fd.abs()).max(1e-8);
            assert!(((gb - fd) / denom).abs() <= 1e-5, "db: {gb} vs {fd}");
        }
    }
}
