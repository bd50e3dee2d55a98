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

//! Random version-chain states and an independent model of what garbage
//! collection may remove.

use hmvcc::storage::{
    cell_i64, i64_cell, ColumnDef, DataType, Database, DbOptions, Schema, Timestamp,
};
use hmvcc::txn::{gc_pass, CommitLog};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Newest version with a timestamp at or below `ts`.
fn visible(versions: &[(i64, Timestamp)], ts: Timestamp) -> Option<i64> {
    versions
        .iter()
        .rev()
        .find(|(_, t)| *t <= ts)
        .map(|(v, _)| *v)
}

/// Builds one random chain state from `seed`, collects below a random
/// oldest-active timestamp and compares against the model.
pub fn check_state(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(1..=20);
    let mut db = Database::new(DbOptions::default());
    db.create_table(
        Schema::new("t", vec![ColumnDef::new("v", DataType::Int64)]),
        rows,
    )
    .unwrap();
    let init: Vec<_> = (0..rows).map(|r| i64_cell(r as i64)).collect();
    db.append_encoded("t", &[init]).unwrap();
    let col = db.resolve("t", "v").unwrap();

    // Oldest first, the in-place value last.
    let mut versions: Vec<Vec<(i64, Timestamp)>> = (0..rows).map(|r| vec![(r as i64, 0)]).collect();
    let mut ts = 0;
    for _ in 0..rng.gen_range(0..80) {
        ts += rng.gen_range(1..=3);
        let row = rng.gen_range(0..rows);
        let value = rng.gen_range(-1000..1000);
        db.column(col)
            .data
            .write()
            .install(row, i64_cell(value), ts)
            .unwrap();
        versions[row].push((value, ts));
    }
    let oldest = rng.gen_range(0..=ts + 1);

    let probe = |db: &Database| -> Vec<Vec<i64>> {
        let data = db.column(col).data.read();
        (0..rows)
            .map(|r| {
                (oldest..=ts + 1)
                    .map(|b| cell_i64(data.read_visible(r, b).unwrap()))
                    .collect()
            })
            .collect()
    };
    let before = probe(&db);
    for (r, seen) in before.iter().enumerate() {
        for (i, v) in seen.iter().enumerate() {
            if Some(*v) != visible(&versions[r], oldest + i as Timestamp) {
                return Err(format!("seed {seed}: read before gc differs at row {r}"));
            }
        }
    }

    // Everything older than the version visible at `oldest` is garbage.
    let floors: Vec<usize> = versions
        .iter()
        .map(|v| v.iter().rposition(|(_, t)| *t <= oldest).unwrap())
        .collect();
    let expected: usize = floors.iter().sum();
    let log = Mutex::new(CommitLog::default());
    let pruned = gc_pass(&db, &log, oldest);
    if pruned != expected {
        return Err(format!("seed {seed}: pruned {pruned}, expected {expected}"));
    }
    if probe(&db) != before {
        return Err(format!("seed {seed}: gc changed a visible read"));
    }
    let data = db.column(col).data.read();
    for r in 0..rows {
        let kept: Vec<(i64, Timestamp)> = data
            .chains()
            .chain(r)
            .map(|n| (cell_i64(n.value), n.commit_ts))
            .collect();
        let last = versions[r].len() - 1;
        let mut want: Vec<_> = versions[r][floors[r]..last].to_vec();
        want.reverse();
        if kept != want {
            return Err(format!(
                "seed {seed}: row {r} keeps {kept:?}, expected {want:?}"
            ));
        }
    }
    Ok(())
}
