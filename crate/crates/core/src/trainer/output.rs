use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{MetricsRecord, SweepRow};
use crate::error::{Error, Result};
use crate::lm::Model;

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.json"))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Header plus one row per record.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    write_rows(path, records)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_rows(path, rows)
}

#[derive(Serialize)]
struct TimingRow {
    step: usize,
    seconds: f64,
}

/// Wall-clock seconds per metrics record, kept apart from the metrics so that
/// those stay reproducible byte for byte.
pub fn write_timing_csv(path: &Path, steps: &[usize], seconds: &[f64]) -> Result<()> {
    let rows: Vec<TimingRow> = steps
        .iter()
        .zip(seconds)
        .map(|(&step, &seconds)| TimingRow { step, seconds })
        .collect();
    write_rows(path, &rows)
}

/// Files of one training run:
///
/// ```text
/// <dir>/config.json
/// <dir>/metrics.csv
/// <dir>/timing.csv
/// <dir>/checkpoints/step_NNNNNN.json
/// ```
#[derive(Clone, Debug)]
pub struct RunWriter {
    dir: PathBuf,
}

impl RunWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        let ckpt = dir.join("checkpoints");
        fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let path = self.dir.join(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn write_checkpoint(&self, step: usize, model: &Model) -> Result<()> {
        model.save(&checkpoint_path(&self.dir, step))
    }

    pub fn write_metrics(&self, records: &[MetricsRecord], wall_clock: &[f64]) -> Result<()> {
        write_metrics_csv(&self.dir.join("metrics.csv"), records)?;
        let steps: Vec<usize> = records.iter().map(|r| r.step).collect();
        write_timing_csv(&self.dir.join("timing.csv"), &steps, wall_clock)
    }
}
