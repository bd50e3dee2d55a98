// Copyright 2026 The hmvcc Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use hmvcc::engine::EngineMode;
use hmvcc::snapshot::StrategyKind;
use hmvcc::workload::{OlapTemplate, OltpTemplate};
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config file: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Latency,
    Throughput,
    VersionedScan,
    SnapshotCost,
    Scaling,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Latency,
        Experiment::Throughput,
        Experiment::VersionedScan,
        Experiment::SnapshotCost,
        Experiment::Scaling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Latency => "latency",
            Experiment::Throughput => "throughput",
            Experiment::VersionedScan => "versioned-scan",
            Experiment::SnapshotCost => "snapshot-cost",
            Experiment::Scaling => "scaling",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown experiment '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub mode: EngineMode,
    pub threads: usize,
    pub oltp_count: usize,
    pub olap_count: usize,
    pub snapshot_interval: u64,
    /// `None` disables background version collection.
    pub gc_interval: Option<Duration>,
    pub sf: f64,
    pub seed: u64,
    pub backend: StrategyKind,
    pub out: Option<PathBuf>,
    /// One worker, jobs in draw order.
    pub deterministic: bool,
    pub oltp_mix: Vec<OltpTemplate>,
    pub olap_mix: Vec<OlapTemplate>,
    /// Versioned-row fractions for the versioned-scan experiment.
    pub fractions: Vec<f64>,
    /// Table size of the versioned-scan experiment.
    pub scan_rows: usize,
    /// Thread counts for the scaling experiment.
    pub thread_list: Vec<usize>,
    /// Timed repetitions; the median is reported.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mode: EngineMode::HeterogeneousSerializable,
            threads: 4,
            oltp_count: 50_000,
            olap_count: 10,
            snapshot_interval: 1_000,
            gc_interval: Some(Duration::from_millis(10)),
            sf: 0.01,
            seed: 42,
            backend: StrategyKind::VmSnapshot,
            out: None,
            deterministic: false,
            oltp_mix: OltpTemplate::ALL.to_vec(),
            olap_mix: OlapTemplate::ALL.to_vec(),
            fractions: vec![0.0, 0.01, 0.1, 0.25, 0.5, 0.75, 1.0],
            scan_rows: 1_000_000,
            thread_list: vec![1, 2, 4, 8],
            repeats: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        if !(self.sf > 0.0) {
            return bad("sf must be positive");
        }
        if self.snapshot_interval == 0 {
            return bad("snapshot interval must be positive");
        }
        if self.oltp_mix.is_empty() || self.olap_mix.is_empty() {
            return bad("template mix must not be empty");
        }
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("fractions must lie in [0, 1]");
        }
        if self.thread_list.contains(&0) {
            return bad("thread list entries must be at least 1");
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1");
        }
        Ok(())
    }

    /// Worker count actually used.
    pub fn workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads
        }
    }

    /// `key=value` pairs for report headers.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let join = |v: Vec<String>| v.join("|");
        vec![
            ("mode", self.mode.to_string()),
            ("threads", self.threads.to_string()),
            ("oltp_count", self.oltp_count.to_string()),
            ("olap_count", self.olap_count.to_string()),
            ("snapshot_interval", self.snapshot_interval.to_string()),
            (
                "gc_interval_ms",
                self.gc_interval
                    .map_or("off".to_string(), |d| d.as_millis().to_string()),
            ),
            ("sf", self.sf.to_string()),
            ("seed", self.seed.to_string()),
            (
                "backend",
                if self.mode.heterogeneous() {
                    self.backend.to_string()
                } else {
                    "none".to_string()
                },
            ),
            ("deterministic", self.deterministic.to_string()),
            (
                "oltp_mix",
                join(self.oltp_mix.iter().map(|t| t.to_string()).collect()),
            ),
            (
                "olap_mix",
                join(self.olap_mix.iter().map(|t| t.to_string()).collect()),
            ),
            (
                "fractions",
                join(self.fractions.iter().map(|f| f.to_string()).collect()),
            ),
            ("scan_rows", self.scan_rows.to_string()),
            (
                "thread_list",
                join(self.thread_list.iter().map(|t| t.to_string()).collect()),
            ),
            ("repeats", self.repeats.to_string()),
        ]
    }

    /// Applies the keys present in a TOML config file.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_toml(&text)
    }

    pub fn apply_toml(&mut self, text: &str) -> Result<(), ConfigError> {
        let f: FileConfig = toml::from_str(text)?;
        let invalid = ConfigError::Invalid;
        if let Some(m) = f.mode {
            self.mode = m.parse().map_err(invalid)?;
        }
        if let Some(b) = f.backend {
            self.backend = b.parse().map_err(invalid)?;
        }
        if let Some(v) = f.threads {
            self.threads = v;
        }
        if let Some(v) = f.oltp_count {
            self.oltp_count = v;
        }
        if let Some(v) = f.olap_count {
            self.olap_count = v;
        }
        if let Some(v) = f.snapshot_interval {
            self.snapshot_interval = v;
        }
        if let Some(v) = f.gc_interval_ms {
            self.gc_interval = (v > 0).then(|| Duration::from_millis(v));
        }
        if let Some(v) = f.sf {
            self.sf = v;
        }
        if let Some(v) = f.seed {
            self.seed = v;
        }
        if let Some(v) = f.out {
            self.out = Some(v);
        }
        if let Some(v) = f.deterministic {
            self.deterministic = v;
        }
        if let Some(v) = f.oltp_mix {
            self.oltp_mix = parse_list(&v)?;
        }
        if let Some(v) = f.olap_mix {
            self.olap_mix = parse_list(&v)?;
        }
        if let Some(v) = f.fractions {
            self.fractions = v;
        }
        if let Some(v) = f.scan_rows {
            self.scan_rows = v;
        }
        if let Some(v) = f.thread_list {
            self.thread_list = v;
        }
        if let Some(v) = f.repeats {
            self.repeats = v;
        }
        Ok(())
    }
}

fn parse_list<T: FromStr>(names: &[String]) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    names
        .iter()
        .map(|n| {
            n.parse()
                .map_err(|e: T::Err| ConfigError::Invalid(e.to_string()))
        })
        .collect()
}

/// On-disk form; every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    mode: Option<String>,
    threads: Option<usize>,
    oltp_count: Option<usize>,
    olap_count: Option<usize>,
    snapshot_interval: Option<u64>,
    gc_interval_ms: Option<u64>,
    sf: Option<f64>,
    seed: Option<u64>,
    backend: Option<String>,
    out: Option<PathBuf>,
    deterministic: Option<bool>,
    oltp_mix: Option<Vec<String>>,
    olap_mix: Option<Vec<String>>,
    fractions: Option<Vec<f64>>,
    scan_rows: Option<usize>,
    thread_list: Option<Vec<usize>>,
    repeats: Option<usize>,
}
