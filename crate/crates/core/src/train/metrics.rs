//! Append-only per-step metrics CSV.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::StepMetrics;
use crate::error::{Error, Result};

pub fn metrics_header(moe_layers: usize) -> String {
    let mut cols = vec!["step".to_string(), "loss".into(), "grad_norm".into()];
    cols.extend((0..moe_layers).map(|i| format!("load_std_layer_{i}")));
    cols.push("experts_active_fraction".into());
    cols.join(",")
}

pub fn metrics_row(m: &StepMetrics) -> String {
    let mut cols = vec![m.step.to_string(), m.loss.to_string(), m.grad_norm.to_string()];
    cols.extend(m.load_std.iter().map(f64::to_string));
    cols.push(m.experts_active_fraction.to_string());
    cols.join(",")
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    flush_every: u64,
    pending: u64,
}

impl MetricsWriter {
    /// Opens `path` for appending. A new or empty file gets the header; an
    /// existing file must already carry the same header.
    pub fn open(path: &Path, moe_layers: usize, flush_every: u64) -> Result<Self> {
        let header = metrics_header(moe_layers);
        let existing = match File::open(path) {
            Ok(f) => BufReader::new(f).lines().next().transpose().map_err(|e| Error::io(path, e))?,
            Err(_) => None,
        };
        if let Some(line) = &existing {
            if line != &header {
                return Err(Error::Config(format!(
                    "{} has header {line:?}, expected {header:?}",
                    path.display()
                )));
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        if existing.is_none() {
            writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            out,
            flush_every: flush_every.max(1),
            pending: 0,
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.out, "{}", metrics_row(m)).map_err(|e| Error::io(&self.path, e))?;
        self.pending += 1;
        if self.pending >= self.flush_every {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.pending = 0;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}
