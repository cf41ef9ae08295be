//! Metric records and newline-delimited JSON sinks.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// One local meta epoch on a client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    /// Support loss before adaptation.
    pub support_loss: f64,
    /// Query loss of the adapted parameters.
    pub query_loss: f64,
    pub query_acc: f64,
    pub lambda: f64,
    /// Categoricals newly fixed by the pruning check of this epoch.
    pub prune_events: u32,
}

/// Server-side summary of one communication round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub server_acc: f64,
    pub server_loss: f64,
    pub mean_client_query_acc: f64,
    pub lambda: f64,
    pub open_categoricals: usize,
}

/// Client epoch record tagged with its round and client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientEpochRecord {
    pub round: usize,
    pub client: usize,
    #[serde(flatten)]
    pub metrics: EpochMetrics,
}

pub trait MetricsSink {
    fn client_epoch(&mut self, record: &ClientEpochRecord) -> std::io::Result<()>;
    fn round(&mut self, record: &RoundMetrics) -> std::io::Result<()>;
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl MetricsSink for NullSink {
    fn client_epoch(&mut self, _: &ClientEpochRecord) -> std::io::Result<()> {
        Ok(())
    }

    fn round(&mut self, _: &RoundMetrics) -> std::io::Result<()> {
        Ok(())
    }
}

/// Writes `metrics.jsonl` (rounds) and `client_metrics.jsonl` (epochs).
pub struct NdjsonSink {
    rounds: BufWriter<File>,
    clients: BufWriter<File>,
}

pub const ROUND_METRICS_FILE: &str = "metrics.jsonl";
pub const CLIENT_METRICS_FILE: &str = "client_metrics.jsonl";

impl NdjsonSink {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        Ok(Self {
            rounds: BufWriter::new(File::create(dir.join(ROUND_METRICS_FILE))?),
            clients: BufWriter::new(File::create(dir.join(CLIENT_METRICS_FILE))?),
        })
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.rounds.flush()?;
        self.clients.flush()
    }
}

fn write_line<T: Serialize>(w: &mut impl Write, rec: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")
}

impl MetricsSink for NdjsonSink {
    fn client_epoch(&mut self, record: &ClientEpochRecord) -> std::io::Result<()> {
        write_line(&mut self.clients, record)
    }

    fn round(&mut self, record: &RoundMetrics) -> std::io::Result<()> {
        write_line(&mut self.rounds, record)?;
        self.flush()
    }
}
