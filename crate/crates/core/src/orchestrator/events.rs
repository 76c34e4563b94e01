//! JSONL event log of a pipeline run, and replay of summaries from it.

use super::{compute_metrics, HealingEvent, RunResult, RunSummary, RECOVERY_DELTA};
use crate::monitoring::MonitorRecord;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// One line of `events.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum EventLine {
    Meta { strategy: String, seed: u64, shift_index: usize, n_batches: usize },
    Batch { t: usize, accuracy: f64, monitor: MonitorRecord },
    Healing(Box<HealingEvent>),
}

/// Write the run as an event log.
pub fn write_events(result: &RunResult, path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let meta = EventLine::Meta {
        strategy: result.strategy.clone(),
        seed: result.seed,
        shift_index: result.summary.shift_index,
        n_batches: result.summary.n_batches,
    };
    writeln!(f, "{}", serde_json::to_string(&meta)?)?;
    for (t, (&acc, rec)) in result
        .accuracy_series
        .iter()
        .zip(&result.monitor_log)
        .enumerate()
    {
        let line = EventLine::Batch { t, accuracy: acc, monitor: rec.clone() };
        writeln!(f, "{}", serde_json::to_string(&line)?)?;
    }
    for ev in &result.healing_events {
        writeln!(f, "{}", serde_json::to_string(&EventLine::Healing(Box::new(ev.clone())))?)?;
    }
    f.flush()
}

/// Rebuild the run summary from a logged event stream without recomputation.
pub fn replay_events(path: &Path) -> std::io::Result<(RunSummary, Vec<HealingEvent>, Vec<f64>)> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut shift_index = 0usize;
    let mut series: Vec<(usize, f64)> = Vec::new();
    let mut healing = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: EventLine = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        match event {
            EventLine::Meta { shift_index: s, .. } => shift_index = s,
            EventLine::Batch { t, accuracy, .. } => series.push((t, accuracy)),
            EventLine::Healing(ev) => healing.push(*ev),
        }
    }
    series.sort_by_key(|(t, _)| *t);
    let series: Vec<f64> = series.into_iter().map(|(_, a)| a).collect();
    if series.is_empty() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "event log holds no batch lines",
        ));
    }
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
    let summary = RunSummary {
        pre_level,
        overall_accuracy: series.iter().sum::<f64>() / series.len() as f64,
        post_intervention_accuracy: post_acc,
        recovery_time,
        shift_index,
        n_batches: series.len(),
    };
    Ok((summary, healing, series))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::diabetes_scenario;
    use crate::monitoring::MonitorConfig;
    use crate::orchestrator::{run_pipeline, Strategy};

    #[test]
    fn replay_reproduces_the_summary() {
        let scenario = crate::datagen::ScenarioSpec {
            n_pre: 1500,
            n_post: 1500,
            ..diabetes_scenario(None, 9)
        };
        let result = run_pipeline(
            &scenario,
            &Strategy::self_healing(),
            &MonitorConfig::default(),
            300,
            2,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        write_events(&result, &path).unwrap();
        let (summary, healing, series) = replay_events(&path).unwrap();
        assert_eq!(series.len(), result.accuracy_series.len());
        assert_eq!(healing.len(), result.healing_events.len());
        assert!((summary.post_intervention_accuracy
            - result.summary.post_intervention_accuracy)
            .abs()
            < 1e-12);
        assert_eq!(summary.recovery_time, result.summary.recovery_time);
    }
}
