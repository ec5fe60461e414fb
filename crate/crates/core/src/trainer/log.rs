use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const LOG_HEADER: &str = "episode,loss,lr,val_acc,checkpoint_id";

/// One training step (or the initial evaluation, which has no loss).
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub episode: usize,
    pub loss: Option<f64>,
    pub lr: f64,
    pub val_acc: Option<f64>,
    pub checkpoint_id: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn push(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.episode <= last.episode {
                return Err(Error::Contract(format!(
                    "log episode {} does not follow {}",
                    rec.episode, last.episode
                )));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    /// Records that carry a checkpoint.
    pub fn checkpoints(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| r.checkpoint_id.is_some())
    }

    /// CSV with [`LOG_HEADER`]; empty fields for absent values. Floats use
    /// the shortest representation that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.episode,
                opt(r.loss.map(|v| v.to_string())),
                r.lr,
                opt(r.val_acc.map(|v| v.to_string())),
                opt(r.checkpoint_id.map(|v| v.to_string()))
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(LOG_HEADER) {
            return Err(Error::Format(format!("training log must start with `{LOG_HEADER}`")));
        }
        let mut log = TrainingLog::default();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| Error::Format(format!("training log line {}: bad {what}", i + 2));
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 5 {
                return Err(bad("field count"));
            }
            fn opt<V: std::str::FromStr>(s: &str) -> std::result::Result<Option<V>, ()> {
                if s.is_empty() { Ok(None) } else { s.parse().map(Some).map_err(|_| ()) }
            }
            log.push(LogRecord {
                episode: f[0].parse().map_err(|_| bad("episode"))?,
                loss: opt(f[1]).map_err(|_| bad("loss"))?,
                lr: f[2].parse().map_err(|_| bad("lr"))?,
                val_acc: opt(f[3]).map_err(|_| bad("val_acc"))?,
                checkpoint_id: opt(f[4]).map_err(|_| bad("checkpoint_id"))?,
            })?;
        }
        Ok(log)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
