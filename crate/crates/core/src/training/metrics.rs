use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HEADER: &str = "step,epoch,loss,fidelity,prior,psnr_val";

/// One CSV row. Missing values are written as empty fields.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub fidelity: Option<f64>,
    pub prior: Option<f64>,
    pub psnr_val: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.loss,
            opt(self.fidelity),
            opt(self.prior),
            opt(self.psnr_val)
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return None;
        }
        let opt = |s: &str| -> Option<Option<f64>> {
            if s.is_empty() {
                Some(None)
            } else {
                s.parse().ok().map(Some)
            }
        };
        Some(Self {
            step: f[0].parse().ok()?,
            epoch: f[1].parse().ok()?,
            loss: f[2].parse().ok()?,
            fidelity: opt(f[3])?,
            prior: opt(f[4])?,
            psnr_val: opt(f[5])?,
        })
    }
}

/// Append-only CSV log flushed after every row.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "{HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    /// Keeps rows whose `keep` predicate holds and continues appending.
    /// A missing file starts a fresh log.
    pub fn resume(path: impl AsRef<Path>, keep: impl Fn(&MetricsRow) -> bool) -> Result<Self> {
        let path = path.as_ref();
        let kept: Vec<MetricsRow> = match File::open(path) {
            Ok(f) => BufReader::new(f)
                .lines()
                .skip(1)
                .map_while(|l| l.ok())
                .filter_map(|l| MetricsRow::parse(&l))
                .filter(|r| keep(r))
                .collect(),
            Err(_) => Vec::new(),
        };
        let mut log = Self::create(path)?;
        for r in &kept {
            log.append(r)?;
        }
        Ok(log)
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_csv()).and_then(|_| self.file.flush()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
        let path = path.as_ref();
        let f = OpenOptions::new().read(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(BufReader::new(f).lines().skip(1).map_while(|l| l.ok()).filter_map(|l| MetricsRow::parse(&l)).collect())
    }
}
