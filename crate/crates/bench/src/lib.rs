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

//! Experiment harness for the hmvcc engine: OLAP latency under load,
//! throughput, versioned scans, snapshot cost, thread scaling and the
//! snapshot-strategy microbenchmark.

pub mod config;
pub mod driver;
pub mod experiments;
pub mod micro;
pub mod report;

pub use config::{BenchConfig, ConfigError, Experiment};
pub use report::RunReport;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] hmvcc::engine::EngineError),
    #[error(transparent)]
    Workload(#[from] hmvcc::workload::WorkloadError),
    #[error(transparent)]
    Query(#[from] hmvcc::query::QueryError),
    #[error(transparent)]
    Storage(#[from] hmvcc::storage::StorageError),
    #[error(transparent)]
    Snapshot(#[from] hmvcc::snapshot::SnapshotError),
    #[error(transparent)]
    Vm(#[from] hmvcc::vmem::VmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Run(String),
}

impl BenchError {
    pub fn is_config(&self) -> bool {
        matches!(self, BenchError::Config(_))
    }
}

pub type BenchResult<T> = Result<T, BenchError>;

/// Median of `values`; `NaN` when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
