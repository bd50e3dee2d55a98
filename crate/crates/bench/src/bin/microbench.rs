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

use clap::{Parser, Subcommand};
use hmvcc_bench::micro::microbench_snapshot;
use hmvcc_bench::BenchConfig;

#[derive(Debug, Parser)]
#[command(name = "microbench")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Second-view cost of each snapshot strategy after w page writes.
    Snapshot {
        /// Comma-separated page-write counts.
        #[arg(long, value_delimiter = ',', required = true)]
        pages_modified: Vec<u64>,
        /// Segment size in pages.
        #[arg(long, default_value_t = 1024)]
        pages: u64,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let Command::Snapshot {
        pages_modified,
        pages,
        repeats,
        out,
    } = Args::parse().command;
    if pages == 0 || repeats == 0 || pages_modified.iter().any(|&w| w > pages) {
        eprintln!(
            "microbench: pages and repeats must be positive and every write count at most pages"
        );
        return ExitCode::from(2);
    }
    let cfg = BenchConfig {
        repeats,
        out: out.clone(),
        ..BenchConfig::default()
    };
    let written = microbench_snapshot(&cfg, pages, &pages_modified).and_then(|r| match &out {
        Some(p) => r.save(p),
        None => r.write_csv(std::io::stdout().lock()),
    });
    match written {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("microbench: {e}");
            ExitCode::from(1)
        }
    }
}
