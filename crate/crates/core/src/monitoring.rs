//! DDM-style drift detection over the model's batch error stream.
//!
//! The detector folds batch error rates (weighted by batch size, equivalent
//! to per-sample updates) into a running error mean `p` and deviation
//! `s = sqrt(p (1 - p) / n)`, tracks the best-seen `(p_min, s_min)` pair, and
//! signals Warning / Drift when `p + s` exceeds `p_min` by a sensitivity-
//! scaled multiple of `s_min`. The degradation score is the exceedance over
//! `p_min + s_min` normalized so it reaches 1 exactly at the drift boundary.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MonitorStatus {
    #[default]
    InControl,
    Warning,
    Drift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    /// Warning at `p + s > p_min + sensitivity * warn_mult * s_min`.
    pub warn_mult: f64,
    /// Drift at `p + s > p_min + sensitivity * drift_mult * s_min`.
    pub drift_mult: f64,
    /// Multiplicative sensitivity scaling both multipliers; the threshold
    /// sweep of the monitoring study walks this.
    pub sensitivity: f64,
    /// Updates consumed before any signal can fire.
    pub warm_start: usize,
    /// Post-trigger batches gathered before healing starts.
    pub detection_window: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self { warn_mult: 2.0, drift_mult: 3.0, sensitivity: 1.0, warm_start: 3, detection_window: 2 }
    }
}

impl MonitorConfig {
    pub fn with_sensitivity(sensitivity: f64) -> Self {
        Self { sensitivity, ..Self::default() }
    }
}

/// Running detector state. Single-owner mutable; one per pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonitorState {
    pub config: MonitorConfig,
    pub n_updates: usize,
    pub n_samples: f64,
    /// Running mean error.
    pub p: f64,
    /// Running deviation √(p(1−p)/n).
    pub s: f64,
    pub p_min: f64,
    pub s_min: f64,
    pub status: MonitorStatus,
    /// Degradation score in [0, 1].
    pub score: f64,
}

/// One JSON line per update for the status log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonitorRecord {
    pub t: usize,
    pub p: f64,
    pub s: f64,
    pub p_min: f64,
    pub s_min: f64,
    pub status: MonitorStatus,
    pub score: f64,
}

impl MonitorState {
    pub fn new(config: MonitorConfig) -> Self {
        Self {
            config,
            n_updates: 0,
            n_samples: 0.0,
            p: 0.0,
            s: 0.0,
            p_min: f64::INFINITY,
            s_min: f64::INFINITY,
            status: MonitorStatus::InControl,
            score: 0.0,
        }
    }

    /// Fold one batch error rate (`batch_size` samples at rate `error_rate`)
    /// into the statistics and refresh status and score.
    pub fn update(&mut self, error_rate: f64, batch_size: usize) -> (MonitorStatus, f64) {
        debug_assert!((0.0..=1.0).contains(&error_rate), "error rate outside [0,1]");
        self.n_updates += 1;
        self.n_samples += batch_size as f64;
        self.p += (error_rate - self.p) * batch_size as f64 / self.n_samples;
        self.s = (self.p * (1.0 - self.p) / self.n_samples).max(0.0).sqrt();

        if self.p + self.s < self.p_min + self.s_min {
            self.p_min = self.p;
            self.s_min = self.s;
        }

        if self.n_updates <= self.config.warm_start {
            self.status = MonitorStatus::InControl;
            self.score = 0.0;
            return (self.status, self.score);
        }

        let lam = self.config.sensitivity;
        let drift_thr = self.p_min + lam * self.config.drift_mult * self.s_min;
        let warn_thr = self.p_min + lam * self.config.warn_mult * self.s_min;
        let ps = self.p + self.s;
        self.status = if ps > drift_thr {
            MonitorStatus::Drift
        } else if ps > warn_thr {
            MonitorStatus::Warning
        } else {
            MonitorStatus::InControl
        };

        // Normalized exceedance over (p_min + s_min): 0 at or below it, 1 at
        // the drift boundary and beyond.
        let excess = ps - (self.p_min + self.s_min);
        let denom = (lam * self.config.drift_mult - 1.0) * self.s_min;
        self.score = if excess <= 0.0 {
            0.0
        } else if denom <= 0.0 {
            1.0
        } else {
            (excess / denom).clamp(0.0, 1.0)
        };
        (self.status, self.score)
    }

    /// Clear statistics and re-arm the warm start; the config is kept.
    pub fn reset(&mut self) {
        *self = Self::new(self.config);
    }

    pub fn record(&self, t: usize) -> MonitorRecord {
        MonitorRecord {
            t,
            p: self.p,
            s: self.s,
            p_min: if self.p_min.is_finite() { self.p_min } else { 0.0 },
            s_min: if self.s_min.is_finite() { self.s_min } else { 0.0 },
            status: self.status,
            score: self.score,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn detect_time(errors: &[f64], cfg: MonitorConfig, batch: usize) -> Option<usize> {
        let mut m = MonitorState::new(cfg);
        for (t, &e) in errors.iter().enumerate() {
            let (st, _) = m.update(e, batch);
            if st == MonitorStatus::Drift {
                return Some(t);
            }
        }
        None
    }

    #[test]
    fn stationary_stream_stays_in_control() {
        let mut m = MonitorState::new(MonitorConfig::default());
        for _ in 0..100 {
            let (st, score) = m.update(0.1, 500);
            assert_eq!(st, MonitorStatus::InControl);
            assert_eq!(score, 0.0);
        }
    }

    #[test]
    fn jump_is_detected_within_three_batches() {
        // noise-free batch rates; the jump dwarfs the deviation band
        let mut errors = vec![0.1; 10];
        errors.extend(vec![0.6; 10]);
        let t = detect_time(&errors, MonitorConfig::default(), 500).expect("drift detected");
        assert!(t >= 10 && t < 13, "detected at {t}");
    }

    #[test]
    fn infinite_sensitivity_never_signals() {
        let mut errors = vec![0.1; 10];
        errors.extend(vec![0.9; 20]);
        let cfg = MonitorConfig { sensitivity: f64::INFINITY, ..MonitorConfig::default() };
        let mut m = MonitorState::new(cfg);
        for &e in &errors {
            let (st, score) = m.update(e, 500);
            assert_eq!(st, MonitorStatus::InControl);
            assert_eq!(score, 0.0);
        }
    }

    #[test]
    fn no_signal_before_warm_start_ever() {
        let cfg = MonitorConfig { warm_start: 5, ..MonitorConfig::default() };
        let mut m = MonitorState::new(cfg);
        for i in 0..5 {
            let e = if i < 2 { 0.05 } else { 0.95 };
            let (st, _) = m.update(e, 500);
            assert_eq!(st, MonitorStatus::InControl, "update {i}");
        }
    }

    #[test]
    fn detection_time_is_monotone_in_sensitivity() {
        let mut errors = vec![0.2; 8];
        errors.extend(vec![0.45; 30]);
        let mut last = 0usize;
        for lam in [0.5, 1.0, 1.5, 2.0, 3.0] {
            let cfg = MonitorConfig { sensitivity: lam, ..MonitorConfig::default() };
            let t = detect_time(&errors, cfg, 500).unwrap_or(errors.len());
            assert!(t >= last, "lambda {lam}: {t} < {last}");
            last = t;
        }
    }

    #[test]
    fn score_hits_one_at_drift_boundary() {
        let mut m = MonitorState::new(MonitorConfig::default());
        for _ in 0..10 {
            m.update(0.1, 500);
        }
        let mut st = MonitorStatus::InControl;
        let mut score = 0.0;
        for _ in 0..5 {
            let r = m.update(0.7, 500);
            st = r.0;
            score = r.1;
            if st == MonitorStatus::Drift {
                break;
            }
        }
        assert_eq!(st, MonitorStatus::Drift);
        assert_eq!(score, 1.0);
    }

    #[test]
    fn reset_rearms_warm_start_and_keeps_config() {
        let cfg = MonitorConfig { sensitivity: 2.0, ..MonitorConfig::default() };
        let mut m = MonitorState::new(cfg);
        for _ in 0..10 {
            m.update(0.3, 500);
        }
        m.reset();
        assert_eq!(m.config, cfg);
        assert_eq!(m.n_updates, 0);
        for _ in 0..cfg.warm_start {
            let (st, _) = m.update(0.9, 500);
            assert_eq!(st, MonitorStatus::InControl);
        }
    }

    #[test]
    fn second_drift_detected_after_reset() {
        let mut m = MonitorState::new(MonitorConfig::default());
        let mut detections = 0;
        let mut stream: Vec<f64> = vec![0.1; 8];
        stream.extend(vec![0.5; 4]);
        stream.extend(vec![0.1; 8]); // healed
        stream.extend(vec![0.5; 4]); // second shift
        for &e in &stream {
            let (st, _) = m.update(e, 500);
            if st == MonitorStatus::Drift {
                detections += 1;
                m.reset();
            }
        }
        assert_eq!(detections, 2);
    }
}
