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

//! An OLTP stream over all three tables with OLAP plans that read only
//! LINEITEM, in heterogeneous mode.

use hmvcc::engine::{Engine, EngineConfig, EngineMode};
use hmvcc::query::{compile, run_plan};
use hmvcc::storage::DbOptions;
use hmvcc::workload::{generate, GenConfig, OlapTemplate, Workload, LINEITEM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug)]
pub struct LazyReport {
    pub epochs: usize,
    pub lineitem_columns: u64,
    pub other_columns: u64,
    /// VMAs plus PTEs touched by all materializations, per epoch.
    pub snapshot_work_per_epoch: u64,
    pub invocations: u64,
    pub fork_total: u64,
}

pub fn run(sf: f64, seed: u64) -> Result<LazyReport, String> {
    let db =
        generate(&GenConfig::new(sf, seed), DbOptions::default()).map_err(|e| e.to_string())?;
    let w = Workload::new(&db)
        .and_then(|w| {
            w.with_olap_templates(&[
                OlapTemplate::Q1,
                OlapTemplate::Q6,
                OlapTemplate::ScanLineitem,
            ])
        })
        .map_err(|e| e.to_string())?;
    let lineitem = db.table(LINEITEM).map_err(|e| e.to_string())?.columns[0]
        .key
        .table;
    let cfg = EngineConfig::new(EngineMode::HeterogeneousSerializable)
        .snapshot_interval(200)
        .gc_interval(None);
    let e = Engine::new(db, cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epoch_ids = std::collections::BTreeSet::new();
    for i in 0..2000 {
        w.next_oltp(&mut rng).run(&e).map_err(|e| e.to_string())?;
        if i % 250 == 0 {
            let (_, spec) = w.next_olap(&mut rng);
            let plan = compile(&spec, e.db()).map_err(|e| e.to_string())?;
            let mut tx = e.begin_olap(&plan.columns()).map_err(|e| e.to_string())?;
            epoch_ids.extend(tx.epoch_id());
            run_plan(&mut tx, &plan).map_err(|e| e.to_string())?;
            tx.commit().map_err(|e| e.to_string())?;
        }
    }
    let reg = e.registry().ok_or("no registry")?;
    let costs = reg.column_costs();
    let (mut lineitem_columns, mut other_columns, mut work, mut invocations) = (0, 0, 0, 0);
    for (col, n, cost) in &costs {
        if col.table == lineitem {
            lineitem_columns += n;
        } else {
            other_columns += n;
        }
        work += cost.vmas_touched + cost.ptes_touched;
        invocations += cost.invocations_at_create;
    }
    let epochs = epoch_ids.len().max(1);
    Ok(LazyReport {
        epochs,
        lineitem_columns,
        other_columns,
        snapshot_work_per_epoch: work / epochs as u64,
        invocations,
        fork_total: e.db().fork_cost().total(),
    })
}
