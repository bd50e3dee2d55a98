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

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use hmvcc_bench::experiments::{run, run_all_modes};
use hmvcc_bench::{BenchConfig, ConfigError, Experiment};

/// Runs one experiment and writes its report as CSV.
#[derive(Debug, Parser)]
#[command(name = "bench")]
struct Args {
    /// latency | throughput | versioned-scan | snapshot-cost | scaling
    experiment: String,
    /// TOML file with config keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// homogeneous-si | homogeneous-serializable | heterogeneous-serializable | all
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    sf: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    snapshot_interval: Option<u64>,
    /// physical | rewired | vm_snapshot
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    oltp_count: Option<usize>,
    #[arg(long)]
    olap_count: Option<usize>,
    /// Version collector period in milliseconds, 0 disables it.
    #[arg(long)]
    gc_interval_ms: Option<u64>,
    /// Comma-separated versioned fractions.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    scan_rows: Option<usize>,
    /// Comma-separated thread counts.
    #[arg(long, value_delimiter = ',')]
    thread_list: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// One worker, transactions in draw order.
    #[arg(long)]
    deterministic: bool,
}

fn build(args: &Args) -> Result<(Experiment, BenchConfig, bool), ConfigError> {
    let experiment: Experiment = args.experiment.parse()?;
    let mut cfg = BenchConfig::default();
    if let Some(p) = &args.config {
        cfg.apply_file(p)?;
    }
    let mut all_modes = false;
    match args.mode.as_deref() {
        Some("all") => all_modes = true,
        Some(m) => cfg.mode = m.parse().map_err(ConfigError::Invalid)?,
        None => {}
    }
    if let Some(b) = &args.backend {
        cfg.backend = b.parse().map_err(ConfigError::Invalid)?;
    }
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field.clone() { cfg.$field = v; })*
        };
    }
    set!(
        threads,
        sf,
        seed,
        snapshot_interval,
        oltp_count,
        olap_count,
        fractions,
        scan_rows,
        thread_list,
        repeats
    );
    if let Some(ms) = args.gc_interval_ms {
        cfg.gc_interval = (ms > 0).then(|| Duration::from_millis(ms));
    }
    if args.out.is_some() {
        cfg.out = args.out.clone();
    }
    cfg.deterministic |= args.deterministic;
    cfg.validate()?;
    Ok((experiment, cfg, all_modes))
}

fn main() -> ExitCode {
    let args = Args::parse();
    let (experiment, cfg, all_modes) = match build(&args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("bench: {e}");
            return ExitCode::from(2);
        }
    };
    let result = if all_modes {
        run_all_modes(experiment, &cfg)
    } else {
        run(experiment, &cfg)
    };
    let written = result.and_then(|report| match &cfg.out {
        Some(p) => report.save(p),
        None => report.write_csv(std::io::stdout().lock()),
    });
    match written {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
