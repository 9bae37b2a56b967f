//! Append-only structured training log.
//!
//! One JSON object per line, so a crashed run still leaves every completed
//! step on disk and `report` can plot curves without a custom parser. The
//! log refuses non-finite values: a NaN that reaches the logger is a trainer
//! bug, and silently serializing it as `null` would hide the step where
//! training diverged.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEvent {
    pub step: u64,
    pub epoch: usize,
    /// `denoiser-low`, `denoiser-high`, `stage1`, `stage2`, or a marker like
    /// `stage-transition`.
    pub stage: String,
    /// Loss terms by name; ordered so lines diff cleanly.
    pub losses: BTreeMap<String, f64>,
    /// Wall-clock milliseconds since the Unix epoch.
    pub unix_ms: u64,
}

impl TrainEvent {
    pub fn now(step: u64, epoch: usize, stage: &str, losses: BTreeMap<String, f64>) -> Self {
        let unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Self {
            step,
            epoch,
            stage: stage.to_string(),
            losses,
            unix_ms,
        }
    }
}

pub struct EventLog {
    writer: BufWriter<File>,
}

impl EventLog {
    /// Starts a fresh log, truncating any previous file.
    pub fn create(path: &Path) -> Result<Self, PipelineError> {
        Ok(Self {
            writer: BufWriter::new(File::create(path)?),
        })
    }

    /// Opens an existing log for appending (resumed runs).
    pub fn append(path: &Path) -> Result<Self, PipelineError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            writer: BufWriter::new(file),
        })
    }

    pub fn record(&mut self, event: &TrainEvent) -> Result<(), PipelineError> {
        if let Some((name, &value)) = event
            .losses
            .iter()
            .find(|(_, value)| !value.is_finite())
        {
            return Err(PipelineError::Config(format!(
                "refusing to log non-finite loss `{name}` = {value} at step {}",
                event.step
            )));
        }
        serde_json::to_writer(&mut self.writer, event)?;
        self.writer.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), PipelineError> {
        self.writer.flush()?;
        Ok(())
    }
}

impl Drop for EventLog {
    fn drop(&mut self) {
        let _ = self.writer.flush();
    }
}

/// Reads a whole event log back; malformed lines carry their line number.
pub fn read_events(path: &Path) -> Result<Vec<TrainEvent>, PipelineError> {
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: TrainEvent = serde_json::from_str(&line).map_err(|e| {
            PipelineError::Config(format!(
                "event log {} line {}: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        events.push(event);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn losses(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }

    #[test]
    fn events_round_trip_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let mut log = EventLog::create(&path).unwrap();
        for step in 0..5u64 {
            log.record(&TrainEvent::now(
                step,
                0,
                "stage1",
                losses(&[("total", 1.0 / (step + 1) as f64), ("d_loss", 1.4)]),
            ))
            .unwrap();
        }
        log.flush().unwrap();

        let events = read_events(&path).unwrap();
        assert_eq!(events.len(), 5);
        assert_eq!(events[3].step, 3);
        assert_eq!(events[3].losses["total"], 0.25);
    }

    #[test]
    fn append_extends_an_existing_log() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        {
            let mut log = EventLog::create(&path).unwrap();
            log.record(&TrainEvent::now(0, 0, "stage1", losses(&[("total", 1.0)])))
                .unwrap();
        }
        {
            let mut log = EventLog::append(&path).unwrap();
            log.record(&TrainEvent::now(1, 0, "stage1", losses(&[("total", 0.5)])))
                .unwrap();
        }
        let events = read_events(&path).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(events[1].step, 1);
    }

    #[test]
    fn non_finite_losses_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = EventLog::create(&dir.path().join("events.jsonl")).unwrap();
        let event = TrainEvent::now(7, 0, "stage2", losses(&[("style", f64::NAN)]));
        let err = log.record(&event).unwrap_err();
        assert!(err.to_string().contains("style"), "{err}");
    }

    #[test]
    fn malformed_line_names_its_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        std::fs::write(&path, "{\"step\":0,\"epoch\":0,\"stage\":\"s\",\"losses\":{},\"unix_ms\":0}\nnot json\n").unwrap();
        let err = read_events(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
