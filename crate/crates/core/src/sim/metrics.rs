use std::io::Write;

use serde::{Serialize, Serializer};

use super::{Protocol, SimError};

/// One row per dispersed entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub entry_index: u64,
    #[serde(serialize_with = "protocol_name")]
    pub protocol: Protocol,
    /// From the leader starting the entry to the entry being safe against `F` crashes.
    #[serde(serialize_with = "fixed6")]
    pub dispersal_latency_ms: f64,
    pub retransmission_rounds: u32,
    /// Cluster-wide bytes stored when this entry's window closes.
    pub total_storage_bytes: u64,
    pub per_node_max_bytes: u64,
    /// Bytes held for this entry when the run ends.
    pub per_entry_final_storage_bytes: u64,
}

pub const CSV_COLUMNS: [&str; 7] = [
    "entry_index",
    "protocol",
    "dispersal_latency_ms",
    "retransmission_rounds",
    "total_storage_bytes",
    "per_node_max_bytes",
    "per_entry_final_storage_bytes",
];

fn fixed6<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:.6}"))
}

fn protocol_name<S: Serializer>(p: &Protocol, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(p.name())
}

/// Writes records as CSV with the fixed column order.
pub fn write_csv<W: Write>(out: W, records: &[MetricsRecord]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(CSV_COLUMNS).map_err(SimError::csv)?;
    }
    for r in records {
        w.serialize(r).map_err(SimError::csv)?;
    }
    w.flush().map_err(|e| SimError::Io(e.to_string()))
}

/// Headline numbers for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub protocol: Protocol,
    pub entries: usize,
    pub mean_latency_ms: f64,
    pub retransmission_fraction: f64,
    /// Entries that needed more than one retransmission round.
    pub multi_retransmission_fraction: f64,
    pub final_total_storage_bytes: u64,
}

impl Summary {
    pub fn of(records: &[MetricsRecord]) -> Option<Summary> {
        let first = records.first()?;
        let n = records.len() as f64;
        let frac = |pred: &dyn Fn(&MetricsRecord) -> bool| {
            records.iter().filter(|r| pred(r)).count() as f64 / n
        };
        Some(Summary {
            protocol: first.protocol,
            entries: records.len(),
            mean_latency_ms: records.iter().map(|r| r.dispersal_latency_ms).sum::<f64>() / n,
            retransmission_fraction: frac(&|r| r.retransmission_rounds > 0),
            multi_retransmission_fraction: frac(&|r| r.retransmission_rounds > 1),
            final_total_storage_bytes: records
                .iter()
                .map(|r| r.per_entry_final_storage_bytes)
                .sum(),
        })
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "protocol={} entries={} mean_latency_ms={:.6} retransmission_pct={:.3} final_total_storage_bytes={}",
            self.protocol,
            self.entries,
            self.mean_latency_ms,
            self.retransmission_fraction * 100.0,
            self.final_total_storage_bytes
        )
    }
}
