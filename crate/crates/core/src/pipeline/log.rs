use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::SslclMode;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

/// One line of a run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    /// Tasks a stage trains, written before its first step.
    Plan {
        stage: u8,
        run: Option<usize>,
        components: Vec<String>,
        /// 1-based ids of the rotation-mirror transforms in use; empty outside stage 1.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        rm_transforms: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sslcl: Option<SslclMode>,
    },
    Step {
        stage: u8,
        run: Option<usize>,
        episode: usize,
        /// Component name (`fsl`, `rm`, `mr`, `cl`) → value.
        losses: BTreeMap<String, f64>,
        total: f64,
    },
    Eval {
        run: usize,
        episode: usize,
        report: MetricsReport,
    },
    /// End-of-training evaluation when the last episode falls between evaluation points.
    Final {
        run: usize,
        episode: usize,
        report: MetricsReport,
    },
    Timing {
        stage: u8,
        run: Option<usize>,
        train_seconds: f64,
        test_seconds: f64,
    },
    Checkpoint {
        stage: u8,
        run: Option<usize>,
        path: PathBuf,
    },
    Transfer {
        run: usize,
        loaded: Vec<String>,
    },
    Skipped {
        stage: u8,
        reason: String,
    },
}

/// In-memory record list, mirrored line by line to a file when one is attached.
#[derive(Default)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            records: Vec::new(),
            sink: Some((path.to_path_buf(), BufWriter::new(f))),
        })
    }

    pub fn push(&mut self, rec: LogRecord) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            let line = serde_json::to_string(&rec).map_err(|e| Error::json(&*path, e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(&*path, e))?;
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn step(&mut self, stage: u8, run: Option<usize>, episode: usize, losses: BTreeMap<String, f64>) -> Result<f64> {
        let total = losses.values().sum();
        self.push(LogRecord::Step {
            stage,
            run,
            episode,
            losses,
            total,
        })?;
        Ok(total)
    }

    /// Loss records only, which are reproducible across executions.
    pub fn steps(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| matches!(r, LogRecord::Step { .. }))
    }

    pub fn evals(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| matches!(r, LogRecord::Eval { .. }))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}
