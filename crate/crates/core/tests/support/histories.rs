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

//! Random interleaved histories and an exhaustive serial-order oracle.

use std::sync::Arc;

use hmvcc::engine::{CommitOutcome, Engine, EngineConfig, EngineMode, Transaction};
use hmvcc::predicate::Predicate;
use hmvcc::storage::{
    cell_i64, i64_cell, ColumnDef, ColumnRef, DataType, Database, DbOptions, Schema,
};
use hmvcc::txn::TxnKind;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub enum Op {
    Read(usize),
    Write(usize, i64),
    /// Rows whose value lies in `[lo, hi]`.
    Scan(i64, i64),
}

#[derive(Debug, Clone, PartialEq)]
enum Observed {
    Value(i64),
    Rows(Vec<(usize, i64)>),
}

fn engine(mode: EngineMode, rows: usize) -> (Arc<Engine>, ColumnRef) {
    let mut db = Database::new(DbOptions::default());
    db.create_table(
        Schema::new("t", vec![ColumnDef::new("v", DataType::Int64)]),
        rows,
    )
    .unwrap();
    let init: Vec<_> = (0..rows).map(|i| i64_cell(i as i64)).collect();
    db.append_encoded("t", &[init]).unwrap();
    let col = db.resolve("t", "v").unwrap();
    let e = Engine::new(db, EngineConfig::new(mode).gc_interval(None)).unwrap();
    (e, col)
}

fn run_op(tx: &mut Transaction<'_>, col: ColumnRef, rows: usize, op: Op) -> Option<Observed> {
    match op {
        Op::Read(r) => Some(Observed::Value(cell_i64(tx.read(col, r).unwrap()))),
        Op::Write(r, v) => {
            tx.write(col, r, i64_cell(v)).unwrap();
            None
        }
        Op::Scan(lo, hi) => {
            let p = Predicate::int_range(col, lo, hi);
            tx.record_predicate(p.clone());
            let mut found = Vec::new();
            for r in 0..rows {
                let c = tx.read_unlogged(col, r).unwrap();
                if p.matches(c) {
                    found.push((r, cell_i64(c)));
                }
            }
            Some(Observed::Rows(found))
        }
    }
}

/// Serial execution of one transaction on `state`.
fn serial(state: &mut [i64], ops: &[Op]) -> Vec<Observed> {
    let mut out = Vec::new();
    for &op in ops {
        match op {
            Op::Read(r) => out.push(Observed::Value(state[r])),
            Op::Write(r, v) => state[r] = v,
            Op::Scan(lo, hi) => out.push(Observed::Rows(
                state
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| (lo..=hi).contains(*v))
                    .map(|(r, v)| (r, *v))
                    .collect(),
            )),
        }
    }
    out
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

/// Whether some serial order of the committed transactions reproduces
/// their observations and the final state.
fn serializable(
    initial: &[i64],
    txns: &[Vec<Op>],
    observed: &[Vec<Observed>],
    committed: &[usize],
    final_state: &[i64],
) -> bool {
    permutations(committed).into_iter().any(|order| {
        let mut state = initial.to_vec();
        order
            .iter()
            .all(|&t| serial(&mut state, &txns[t]) == observed[t])
            && state == final_state
    })
}

pub struct History {
    pub txns: Vec<Vec<Op>>,
    /// Transaction indices; the k-th occurrence of `t` runs step k of `t`
    /// (begin, its operations, commit).
    pub schedule: Vec<usize>,
}

pub fn random_history(rng: &mut ChaCha8Rng, rows: usize, next_value: &mut i64) -> History {
    let n = rng.gen_range(2..=5);
    let mut txns = Vec::new();
    for _ in 0..n {
        let len = rng.gen_range(1..=4);
        let ops: Vec<Op> = (0..len)
            .map(|_| match rng.gen_range(0..10) {
                0..=3 => Op::Read(rng.gen_range(0..rows)),
                4..=7 => {
                    *next_value += 1;
                    Op::Write(rng.gen_range(0..rows), *next_value)
                }
                _ => {
                    let lo = rng.gen_range(0..rows as i64);
                    Op::Scan(lo, lo + rng.gen_range(0..4))
                }
            })
            .collect();
        txns.push(ops);
    }
    // Each transaction takes len + 2 slots: begin, ops, commit.
    let mut schedule: Vec<usize> = txns
        .iter()
        .enumerate()
        .flat_map(|(t, ops)| std::iter::repeat_n(t, ops.len() + 2))
        .collect();
    schedule.shuffle(rng);
    History { txns, schedule }
}

pub struct Outcome {
    pub serializable: bool,
    pub aborts: usize,
}

pub fn execute(mode: EngineMode, rows: usize, h: &History) -> Outcome {
    let (e, col) = engine(mode, rows);
    let n = h.txns.len();
    let mut live: Vec<Option<Transaction<'_>>> = (0..n).map(|_| None).collect();
    let mut step = vec![0usize; n];
    let mut observed: Vec<Vec<Observed>> = vec![Vec::new(); n];
    let mut committed = Vec::new();
    let mut aborts = 0;
    for &t in &h.schedule {
        let s = step[t];
        step[t] += 1;
        if s == 0 {
            live[t] = Some(e.begin(TxnKind::Oltp));
        } else if s <= h.txns[t].len() {
            let tx = live[t].as_mut().unwrap();
            if let Some(o) = run_op(tx, col, rows, h.txns[t][s - 1]) {
                observed[t].push(o);
            }
        } else {
            match live[t].take().unwrap().commit().unwrap() {
                CommitOutcome::Committed(_) => committed.push(t),
                CommitOutcome::Aborted(_) => aborts += 1,
            }
        }
    }
    let mut check = e.begin(TxnKind::Oltp);
    let final_state: Vec<i64> = (0..rows)
        .map(|r| cell_i64(check.read(col, r).unwrap()))
        .collect();
    check.abort().unwrap();
    let initial: Vec<i64> = (0..rows as i64).collect();
    Outcome {
        serializable: serializable(&initial, &h.txns, &observed, &committed, &final_state),
        aborts,
    }
}

/// x + y >= 1 holds initially; each transaction checks both and zeroes one.
pub fn write_skew(mode: EngineMode) -> Vec<CommitOutcome> {
    let mut db = Database::new(DbOptions::default());
    db.create_table(
        Schema::new("t", vec![ColumnDef::new("v", DataType::Int64)]),
        2,
    )
    .unwrap();
    db.append_encoded("t", &[vec![i64_cell(1), i64_cell(1)]])
        .unwrap();
    let col = db.resolve("t", "v").unwrap();
    let e = Engine::new(db, EngineConfig::new(mode).gc_interval(None)).unwrap();
    let mut t1 = e.begin(TxnKind::Oltp);
    let mut t2 = e.begin(TxnKind::Oltp);
    for (tx, target) in [(&mut t1, 0), (&mut t2, 1)] {
        let sum = cell_i64(tx.read(col, 0).unwrap()) + cell_i64(tx.read(col, 1).unwrap());
        assert_eq!(sum, 2);
        tx.write(col, target, i64_cell(0)).unwrap();
    }
    vec![t1.commit().unwrap(), t2.commit().unwrap()]
}

/// Runs `count` seeded random histories (at most 5 transactions over at
/// most 8 rows) in `mode`. Returns the number that fail the oracle and the
/// total number of aborts.
pub fn sweep(mode: EngineMode, seed: u64, count: usize) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut value = 100;
    let mut failures = 0;
    let mut aborts = 0;
    for _ in 0..count {
        let rows = rng.gen_range(1..=8);
        let h = random_history(&mut rng, rows, &mut value);
        let out = execute(mode, rows, &h);
        failures += usize::from(!out.serializable);
        aborts += out.aborts;
    }
    (failures, aborts)
}
