//! Append-only metric streams.

use std::fs::File;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(epoch: usize, split: &str, metric: &str, value: f64) -> Self {
        MetricRecord { epoch, split: split.to_string(), metric: metric.to_string(), value }
    }
}

pub trait MetricsSink {
    fn record(&mut self, record: MetricRecord) -> Result<()>;
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: MetricRecord) -> Result<()> {
        Ok(())
    }
}

#[derive(Default)]
pub struct MemorySink {
    pub records: Vec<MetricRecord>,
}

impl MetricsSink for MemorySink {
    fn record(&mut self, record: MetricRecord) -> Result<()> {
        self.records.push(record);
        Ok(())
    }
}

/// Writes `epoch,split,metric,value` rows, flushing after each one.
pub struct CsvSink {
    writer: csv::Writer<File>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(CsvSink { writer: csv::Writer::from_writer(file) })
    }
}

impl MetricsSink for CsvSink {
    fn record(&mut self, record: MetricRecord) -> Result<()> {
        self.writer.serialize(&record)?;
        self.writer.flush().map_err(|e| Error::Csv(e.into()))
    }
}
