//! Per-epoch training metrics as an append-only CSV file.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{GmlpError, Result};

pub const HEADER: &str =
    "epoch,train_loss,ce_loss,entropy_term,val_accuracy,test_accuracy,lr,tau,sparsity_fraction,wall_time";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    pub ce_loss: f64,
    /// Unweighted routing entropy (0 for MLPs).
    pub entropy_term: f64,
    pub val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub lr: f64,
    pub tau: f64,
    pub sparsity_fraction: f64,
    /// Seconds since training started; 0 unless wall-time logging is on.
    pub wall_time: f64,
}

impl EpochRecord {
    fn to_line(&self) -> String {
        let test = self.test_accuracy.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.ce_loss,
            self.entropy_term,
            self.val_accuracy,
            test,
            self.lr,
            self.tau,
            self.sparsity_fraction,
            self.wall_time
        )
    }

    fn from_line(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return None;
        }
        let num = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            epoch: f[0].parse().ok()?,
            train_loss: num(1)?,
            ce_loss: num(2)?,
            entropy_term: num(3)?,
            val_accuracy: num(4)?,
            test_accuracy: if f[5].is_empty() { None } else { Some(num(5)?) },
            lr: num(6)?,
            tau: num(7)?,
            sparsity_fraction: num(8)?,
            wall_time: num(9)?,
        })
    }
}

/// Writes the header on creation and flushes after every record, so a
/// crashed run leaves a valid file holding each completed epoch.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    file: File,
    last_epoch: Option<usize>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| GmlpError::io(path, e))?;
        writeln!(file, "{HEADER}").map_err(|e| GmlpError::io(path, e))?;
        file.flush().map_err(|e| GmlpError::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| GmlpError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            last_epoch: None,
        })
    }

    pub fn append(&mut self, record: &EpochRecord) -> Result<()> {
        if self.last_epoch.is_some_and(|e| record.epoch <= e) {
            return Err(GmlpError::Config(format!(
                "metrics epochs must increase, got {} after {:?}",
                record.epoch, self.last_epoch
            )));
        }
        writeln!(self.file, "{}", record.to_line()).map_err(|e| GmlpError::io(&self.path, e))?;
        self.file.flush().map_err(|e| GmlpError::io(&self.path, e))?;
        self.last_epoch = Some(record.epoch);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = File::open(path).map_err(|e| GmlpError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GmlpError::io(path, e))?;
        if i == 0 {
            if line != HEADER {
                return Err(GmlpError::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    message: "unexpected metrics header".into(),
                });
            }
            continue;
        }
        out.push(EpochRecord::from_line(&line).ok_or_else(|| GmlpError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "malformed metrics row".into(),
        })?);
    }
    Ok(out)
}
