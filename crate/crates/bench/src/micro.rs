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

//! Snapshot-strategy microbenchmark: one segment, a first view, `w` page
//! writes, then the cost of a second view.

use std::time::Instant;

use hmvcc::snapshot::{allocate_segment, create_view, write_through, SnapshotCost, StrategyKind};
use hmvcc::vmem::{AddressSpace, DEFAULT_PAGE_SIZE};

use crate::config::BenchConfig;
use crate::report::RunReport;
use crate::{median, BenchResult};

#[derive(Debug, Clone, Copy)]
pub struct MicroResult {
    pub kind: StrategyKind,
    pub pages_modified: u64,
    pub cost: SnapshotCost,
    /// Page faults the manual copy-on-write hook served for the writes.
    pub hook_faults: u64,
    pub covering_vmas: u64,
    pub create_ns: f64,
}

/// Pages to write: `w` pages spread evenly, never adjacent while
/// `2w <= pages`.
pub fn spread(pages: u64, w: u64) -> Vec<u64> {
    if w == 0 {
        return Vec::new();
    }
    let stride = (pages / w).max(1);
    (0..w.min(pages))
        .map(|i| (i * stride + stride / 2).min(pages - 1))
        .collect()
}

pub fn measure(kind: StrategyKind, pages: u64, w: u64, repeats: usize) -> BenchResult<MicroResult> {
    let ps = DEFAULT_PAGE_SIZE as u64;
    let len = pages * ps;
    let mut times = Vec::with_capacity(repeats);
    let mut result = None;
    for _ in 0..repeats.max(1) {
        let mut s = AddressSpace::new(DEFAULT_PAGE_SIZE);
        let seg = allocate_segment(kind, &mut s, len)?;
        for p in 0..pages {
            s.vm_write(seg + p * ps, &[1; 8])?;
        }
        create_view(kind, &mut s, seg, len)?;
        let mut hook_faults = 0;
        for p in spread(pages, w) {
            hook_faults += write_through(&mut s, seg + p * ps, &[2; 8])?.hook_faults;
        }
        let covering_vmas = s.vmas_in(seg, len).len() as u64;
        let start = Instant::now();
        let (_, cost) = create_view(kind, &mut s, seg, len)?;
        times.push(start.elapsed().as_nanos() as f64);
        result = Some(MicroResult {
            kind,
            pages_modified: w,
            cost,
            hook_faults,
            covering_vmas,
            create_ns: 0.0,
        });
    }
    let mut r = result.expect("at least one repeat");
    r.create_ns = median(&times);
    Ok(r)
}

pub fn microbench_snapshot(
    cfg: &BenchConfig,
    pages: u64,
    pages_modified: &[u64],
) -> BenchResult<RunReport> {
    let mut report = RunReport::new("microbench-snapshot", cfg);
    for &w in pages_modified {
        for kind in StrategyKind::ALL {
            let r = measure(kind, pages, w, cfg.repeats.max(5))?;
            let (sec, label) = (kind.name(), w.to_string());
            report.count(sec, &label, "invocations", r.cost.invocations_at_create);
            report.count(sec, &label, "bytes_copied", r.cost.bytes_copied_at_create);
            report.count(sec, &label, "protect_calls", r.cost.protect_calls);
            report.count(sec, &label, "covering_vmas", r.covering_vmas);
            report.count(sec, &label, "hook_faults", r.hook_faults);
            report.timing(sec, &label, "create_ns", r.create_ns);
        }
    }
    Ok(report)
}
