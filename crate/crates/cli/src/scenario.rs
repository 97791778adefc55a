//! Scenario files: a TOML document mapping onto [`ScenarioConfig`], with an
//! optional `[sweep]` table expanding it into several runs.
//!
//! ```toml
//! n_nodes = 5
//! protocol = "eaid"
//! num_entries = 3000
//!
//! [latency]
//! mean_ms = 0.8
//! stddev_ms = 0.15
//!
//! [[partitions]]
//! size = 2            # or `nodes = [3, 4]`, or `size = "max_faults"`
//! start_entry = 0
//! end_entry = 2000
//!
//! [[crashes]]
//! node = "leader"     # or a node id
//! entry = 100
//! recover_entry = 150
//!
//! [sweep]
//! n_nodes = [5, 7, 9, 11]
//! protocol = ["eaid", "proactive"]
//! ```
//!
//! Partitions given by `size` take the highest-numbered nodes, so they never
//! include the dispersal leader at node 0. Swept `n_nodes` derive
//! `max_faults = (n − 1) / 2`; a swept `partition_size` replaces the size of
//! every partition.

use std::ops::Range;
use std::path::Path;

use eaid::protocol::PruneRule;
use eaid::sim::{
    CrashSpec, CrashTarget, LatencyModel, PartitionSpec, Protocol, ScenarioConfig, SimError,
};
use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("{line}:{column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    n_nodes: Option<usize>,
    max_faults: Option<usize>,
    delta: Option<usize>,
    protocol: Option<Spanned<String>>,
    num_entries: Option<u64>,
    message_size_bytes: Option<u32>,
    latency: Option<LatencyDoc>,
    timeout_ms: Option<f64>,
    entry_interval_ms: Option<f64>,
    heartbeat_ms: Option<f64>,
    seed: Option<u64>,
    prune_rule: Option<Spanned<String>>,
    #[serde(default)]
    partitions: Vec<PartitionDoc>,
    #[serde(default)]
    crashes: Vec<CrashDoc>,
    sweep: Option<SweepDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatencyDoc {
    mean_ms: f64,
    stddev_ms: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionDoc {
    nodes: Option<Vec<usize>>,
    size: Option<Spanned<SizeDoc>>,
    start_entry: u64,
    end_entry: u64,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SizeDoc {
    Count(usize),
    Named(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CrashDoc {
    node: Spanned<NodeDoc>,
    entry: u64,
    recover_entry: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum NodeDoc {
    Id(usize),
    Named(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepDoc {
    n_nodes: Option<Vec<usize>>,
    protocol: Option<Vec<Spanned<String>>>,
    partition_size: Option<Vec<usize>>,
}

/// One expanded run with its sort key.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    /// `<protocol>_n<N>[_p<partition size>]`, zero-padded so keys sort numerically.
    pub key: String,
    pub config: ScenarioConfig,
}

/// A parsed scenario file: its runs, sorted by key.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub runs: Vec<ScenarioRun>,
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

struct Source<'a> {
    text: &'a str,
}

impl Source<'_> {
    fn error(&self, span: Range<usize>, message: impl Into<String>) -> ScenarioError {
        let (line, column) = line_column(self.text, span.start);
        ScenarioError::Parse {
            line,
            column,
            message: message.into(),
        }
    }

    fn protocol(&self, s: &Spanned<String>) -> Result<Protocol, ScenarioError> {
        s.get_ref()
            .parse()
            .map_err(|e: String| self.error(s.span(), e))
    }
}

enum PartitionNodes {
    Explicit(Vec<usize>),
    Count(usize),
    MaxFaults,
}

struct PartitionTemplate {
    nodes: PartitionNodes,
    start_entry: u64,
    end_entry: u64,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let doc: Document = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_column(text, s.start));
            ScenarioError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        let src = Source { text };
        expand(&src, doc)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Replaces the seed of every run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        for r in &mut self.runs {
            r.config.seed = seed;
        }
        self
    }
}

fn expand(src: &Source, doc: Document) -> Result<Scenario, ScenarioError> {
    let sweep = doc.sweep.as_ref();
    let n_values: Vec<Option<usize>> = match sweep.and_then(|s| s.n_nodes.as_ref()) {
        Some(ns) => ns.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    let protocols: Vec<Protocol> = match sweep.and_then(|s| s.protocol.as_ref()) {
        Some(ps) => ps
            .iter()
            .map(|p| src.protocol(p))
            .collect::<Result<_, _>>()?,
        None => match &doc.protocol {
            Some(p) => vec![src.protocol(p)?],
            None => return Err(missing("protocol")),
        },
    };
    let sizes: Vec<Option<usize>> = match sweep.and_then(|s| s.partition_size.as_ref()) {
        Some(ks) => ks.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    if n_values.is_empty() || protocols.is_empty() || sizes.is_empty() {
        return Err(invalid("sweep", "sweep lists must not be empty"));
    }
    let prune_rule = match &doc.prune_rule {
        None => PruneRule::Standard,
        Some(s) => match s.get_ref().as_str() {
            "standard" => PruneRule::Standard,
            "one_short" => PruneRule::OneShort,
            other => {
                return Err(src.error(
                    s.span(),
                    format!("unknown prune rule `{other}`, expected `standard` or `one_short`"),
                ))
            }
        },
    };
    let mut partitions = Vec::with_capacity(doc.partitions.len());
    for p in &doc.partitions {
        let nodes = match (&p.nodes, &p.size) {
            (Some(n), None) => PartitionNodes::Explicit(n.clone()),
            (None, Some(s)) => match s.get_ref() {
                SizeDoc::Count(k) => PartitionNodes::Count(*k),
                SizeDoc::Named(name) if name == "max_faults" => PartitionNodes::MaxFaults,
                SizeDoc::Named(name) => {
                    return Err(src.error(
                        s.span(),
                        format!("partition size must be a count or `max_faults`, found `{name}`"),
                    ))
                }
            },
            _ => {
                return Err(invalid(
                    "partitions",
                    "each partition needs exactly one of `nodes` or `size`",
                ))
            }
        };
        partitions.push(PartitionTemplate {
            nodes,
            start_entry: p.start_entry,
            end_entry: p.end_entry,
        });
    }
    if sizes[0].is_some() && partitions.is_empty() {
        return Err(invalid(
            "sweep.partition_size",
            "needs at least one partition",
        ));
    }
    let mut crashes = Vec::with_capacity(doc.crashes.len());
    for c in &doc.crashes {
        let target = match c.node.get_ref() {
            NodeDoc::Id(j) => CrashTarget::Node(*j),
            NodeDoc::Named(name) if name == "leader" => CrashTarget::Leader,
            NodeDoc::Named(name) => {
                return Err(src.error(
                    c.node.span(),
                    format!("crash node must be an id or `leader`, found `{name}`"),
                ))
            }
        };
        crashes.push(CrashSpec {
            target,
            entry: c.entry,
            recover_entry: c.recover_entry,
        });
    }

    let total = n_values.len() * protocols.len() * sizes.len();
    let mut runs = Vec::with_capacity(total);
    for &n in &n_values {
        let n_nodes = n.or(doc.n_nodes).ok_or_else(|| missing("n_nodes"))?;
        let max_faults = match n {
            Some(n) => n.saturating_sub(1) / 2,
            None => doc.max_faults.unwrap_or(n_nodes.saturating_sub(1) / 2),
        };
        for &protocol in &protocols {
            for &size in &sizes {
                let mut cfg = ScenarioConfig::new(n_nodes, max_faults, protocol);
                cfg.delta = doc.delta.unwrap_or(cfg.delta);
                cfg.num_entries = doc.num_entries.unwrap_or(cfg.num_entries);
                cfg.message_size_bytes = doc.message_size_bytes.unwrap_or(cfg.message_size_bytes);
                if let Some(l) = &doc.latency {
                    cfg.latency = LatencyModel {
                        mean_ms: l.mean_ms,
                        stddev_ms: l.stddev_ms,
                    };
                }
                cfg.timeout_ms = doc.timeout_ms.unwrap_or(cfg.timeout_ms);
                cfg.entry_interval_ms = doc.entry_interval_ms.unwrap_or(cfg.entry_interval_ms);
                cfg.heartbeat_ms = doc.heartbeat_ms.unwrap_or(cfg.heartbeat_ms);
                cfg.seed = doc.seed.unwrap_or(cfg.seed);
                cfg.prune_rule = prune_rule;
                cfg.crash_schedule = crashes.clone();
                cfg.partitions = partitions
                    .iter()
                    .map(|p| PartitionSpec {
                        nodes: match (&p.nodes, size) {
                            (_, Some(k)) => top_nodes(n_nodes, k),
                            (PartitionNodes::Explicit(v), None) => v.clone(),
                            (PartitionNodes::Count(k), None) => top_nodes(n_nodes, *k),
                            (PartitionNodes::MaxFaults, None) => top_nodes(n_nodes, max_faults),
                        },
                        start_entry: p.start_entry,
                        end_entry: p.end_entry,
                    })
                    .collect();
                let mut key = format!("{}_n{n_nodes:03}", protocol.name());
                if let Some(k) = size {
                    key.push_str(&format!("_p{k:03}"));
                }
                cfg.validate().map_err(|e| match e {
                    SimError::InvalidConfig { field, reason } => ScenarioError::Invalid {
                        field,
                        reason: if total == 1 {
                            reason
                        } else {
                            format!("{reason} (run {key})")
                        },
                    },
                    other => invalid("scenario", other.to_string()),
                })?;
                runs.push(ScenarioRun { key, config: cfg });
            }
        }
    }
    runs.sort_by(|a, b| a.key.cmp(&b.key));
    if let Some(w) = runs.windows(2).find(|w| w[0].key == w[1].key) {
        return Err(invalid("sweep", format!("duplicate run `{}`", w[0].key)));
    }
    Ok(Scenario { runs })
}

/// The `k` highest-numbered nodes.
fn top_nodes(n_nodes: usize, k: usize) -> Vec<usize> {
    (n_nodes.saturating_sub(k)..n_nodes).collect()
}

fn missing(field: &str) -> ScenarioError {
    invalid(field, "required")
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}
