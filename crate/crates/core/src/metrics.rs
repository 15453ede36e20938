//! Per-epoch experiment metrics and their CSV form:
//! `epoch,split,metric,value`, one row per (epoch, split, metric).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    Accuracy,
    Xent,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Mse => "mse",
            Metric::Accuracy => "accuracy",
            Metric::Xent => "xent",
        })
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(Error::Data(format!("unknown split {s:?}"))),
    }
}

fn parse_metric(s: &str) -> Result<Metric> {
    match s {
        "mse" => Ok(Metric::Mse),
        "accuracy" => Ok(Metric::Accuracy),
        "xent" => Ok(Metric::Xent),
        _ => Err(Error::Data(format!("unknown metric {s:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: Split,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn new() -> MetricsLog {
        MetricsLog::default()
    }

    /// Append a row; a duplicate (epoch, split, metric) key or a non-finite
    /// value is a caller bug.
    pub fn push(&mut self, epoch: usize, split: Split, metric: Metric, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{metric} at epoch {epoch}")));
        }
        if self
            .rows
            .iter()
            .any(|r| r.epoch == epoch && r.split == split && r.metric == metric)
        {
            return Err(Error::Data(format!(
                "duplicate metrics row ({epoch}, {split}, {metric})"
            )));
        }
        self.rows.push(MetricRow {
            epoch,
            split,
            metric,
            value,
        });
        Ok(())
    }

    pub fn get(&self, epoch: usize, split: Split, metric: Metric) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.epoch == epoch && r.split == split && r.metric == metric)
            .map(|r| r.value)
    }

    /// Value at the highest epoch for the given split/metric.
    pub fn final_value(&self, split: Split, metric: Metric) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .max_by_key(|r| r.epoch)
            .map(|r| r.value)
    }

    pub fn values(&self, split: Split, metric: Metric) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self
            .rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.epoch, r.value))
            .collect();
        v.sort_by_key(|&(e, _)| e);
        v
    }

    /// Distinct metrics present, in first-appearance order.
    pub fn metrics(&self) -> Vec<Metric> {
        let mut out = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.metric) {
                out.push(r.metric);
            }
        }
        out
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("epoch,split,metric,value\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.metric, r.value));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn from_csv_str(s: &str) -> Result<MetricsLog> {
        let mut rows = Vec::new();
        for (i, line) in s.lines().enumerate() {
            if i == 0 {
                if line.trim() != "epoch,split,metric,value" {
                    return Err(Error::Data(format!("bad metrics CSV header {line:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Data(format!("bad metrics CSV row {line:?}")));
            }
            rows.push(MetricRow {
                epoch: fields[0]
                    .parse()
                    .map_err(|_| Error::Data(format!("bad epoch {:?}", fields[0])))?,
                split: parse_split(fields[1])?,
                metric: parse_metric(fields[2])?,
                value: fields[3]
                    .parse()
                    .map_err(|_| Error::Data(format!("bad value {:?}", fields[3])))?,
            });
        }
        Ok(MetricsLog { rows })
    }

    pub fn read_csv(path: &Path) -> Result<MetricsLog> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        MetricsLog::from_csv_str(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip() {
        let mut log = MetricsLog::new();
        log.push(0, Split::Train, Metric::Mse, 0.5).unwrap();
        log.push(0, Split::Test, Metric::Mse, 0.25).unwrap();
        log.push(1, Split::Train, Metric::Mse, 0.125).unwrap();
        let csv = log.to_csv_string();
        let back = MetricsLog::from_csv_str(&csv).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.final_value(Split::Train, Metric::Mse), Some(0.125));
    }

    #[test]
    fn duplicate_row_rejected() {
        let mut log = MetricsLog::new();
        log.push(0, Split::Train, Metric::Mse, 0.5).unwrap();
        assert!(log.push(0, Split::Train, Metric::Mse, 0.4).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let mut log = MetricsLog::new();
        assert!(log.push(0, Split::Train, Metric::Mse, f64::NAN).is_err());
    }

    #[test]
    fn float_format_roundtrips_exactly() {
        let mut log = MetricsLog::new();
        let v = 0.1234567890123456789_f64;
        log.push(3, Split::Test, Metric::Accuracy, v).unwrap();
        let back = MetricsLog::from_csv_str(&log.to_csv_string()).unwrap();
        assert_eq!(back.rows[0].value, v);
    }
}
