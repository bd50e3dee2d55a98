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

//! Replay of the six-row example: two OLTP writers, one abort, an OLAP scan
//! pinned to the first snapshot while a later commit and a second snapshot
//! happen, and the reclamation of the first snapshot.

use hmvcc::engine::{Engine, EngineConfig, EngineMode, Transaction};
use hmvcc::query::scan_sum_epoch;
use hmvcc::storage::{i64_cell, ColumnDef, ColumnRef, DataType, Database, DbOptions, Schema};
use hmvcc::txn::TxnKind;

fn column(tx: &mut Transaction<'_>, c: ColumnRef) -> Vec<u64> {
    let mut out = vec![0; 6];
    tx.fill(c, 0, &mut out).unwrap();
    out
}

fn oltp_view(e: &Engine, c: ColumnRef) -> Vec<u64> {
    let mut tx = e.begin(TxnKind::Oltp);
    let v = column(&mut tx, c);
    tx.abort().unwrap();
    v
}

macro_rules! expect {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

pub fn replay() -> Result<(), String> {
    // Step 1: one column of six zeros, no snapshot yet.
    let mut db = Database::new(DbOptions::default());
    db.create_table(
        Schema::new("t", vec![ColumnDef::new("c", DataType::Int64)]),
        6,
    )
    .unwrap();
    db.append_encoded("t", &[vec![i64_cell(0); 6]]).unwrap();
    let c = db.resolve("t", "c").unwrap();
    let cfg = EngineConfig::new(EngineMode::HeterogeneousSerializable)
        .snapshot_interval(u64::MAX)
        .gc_interval(None);
    let e = Engine::new(db, cfg).unwrap();
    let reg = e.registry().unwrap();
    expect!(
        reg.epochs().is_empty(),
        "snapshot before any OLAP transaction"
    );

    // Step 2: local writes.
    let mut t1 = e.begin(TxnKind::Oltp);
    let mut t2 = e.begin(TxnKind::Oltp);
    t1.write(c, 5, 1).unwrap();
    t1.write(c, 1, 2).unwrap();
    t2.write(c, 3, 3).unwrap();
    expect!(oltp_view(&e, c) == [0; 6], "uncommitted writes visible");

    // Step 3: T1 commits, T2 aborts.
    expect!(t1.commit().unwrap().committed(), "T1 aborted");
    expect!(
        oltp_view(&e, c) == [0, 2, 0, 0, 0, 1],
        "C after T1: {:?}",
        oltp_view(&e, c)
    );
    t2.abort().unwrap();
    expect!(
        oltp_view(&e, c) == [0, 2, 0, 0, 0, 1],
        "C after T2 abort: {:?}",
        oltp_view(&e, c)
    );

    // Step 4: T3 takes the first snapshot and scans it.
    let mut t3 = e.begin_olap(&[c]).unwrap();
    let first = t3.epoch_id().ok_or("T3 has no epoch")?;
    let epoch_c = reg.newest().unwrap();
    expect!(epoch_c.id == first, "T3 is not on the newest epoch");
    let s = t3.sum(c).unwrap();
    expect!(s == 3.0, "sum(0 to 5) on C = {s}");
    expect!(
        scan_sum_epoch(e.db(), &epoch_c, c).unwrap() == 3.0,
        "epoch scan on C"
    );
    expect!(
        t3.stats().visibility_checks == 0,
        "epoch scan checked versions"
    );

    // Step 5: T4 reads the OLTP view and writes locally.
    let mut t4 = e.begin(TxnKind::Oltp);
    let r3 = t4.read(c, 3).unwrap();
    expect!(r3 == 0, "r(3) = {r3}");
    t4.write(c, 3, 4).unwrap();
    t4.write(c, 1, 5).unwrap();

    // Step 6: T4 commits during T3's scan.
    expect!(t4.commit().unwrap().committed(), "T4 aborted");
    expect!(
        oltp_view(&e, c) == [0, 5, 0, 4, 0, 1],
        "C' after T4: {:?}",
        oltp_view(&e, c)
    );
    expect!(t3.sum(c).unwrap() == 3.0, "T3 sees T4");

    // Step 7: second snapshot; a new OLAP transaction lands on it.
    let second = e.trigger_snapshot().ok_or("no second snapshot")?;
    let mut t5 = e.begin_olap(&[c]).unwrap();
    expect!(
        t5.epoch_id() == Some(second),
        "new OLAP transaction not on C'"
    );
    expect!(
        column(&mut t5, c) == [0, 5, 0, 4, 0, 1],
        "C' = {:?}",
        column(&mut t5, c)
    );
    expect!(t5.sum(c).unwrap() == 10.0, "sum on C'");
    expect!(t3.sum(c).unwrap() == 3.0, "pinned epoch C changed");
    expect!(
        column(&mut t3, c) == [0, 2, 0, 0, 0, 1],
        "C = {:?}",
        column(&mut t3, c)
    );
    let ids: Vec<u64> = reg.epochs().iter().map(|ep| ep.id).collect();
    expect!(ids == [first, second], "epochs side by side: {ids:?}");

    // Step 8: T3 finishes; C is reclaimed.
    t3.commit().unwrap();
    let ids: Vec<u64> = reg.epochs().iter().map(|ep| ep.id).collect();
    expect!(ids == [second], "C not deleted: {ids:?}");
    expect!(reg.metrics().epochs_reaped == 1, "reap count");
    t5.commit().unwrap();
    expect!(
        oltp_view(&e, c) == [0, 5, 0, 4, 0, 1],
        "OLTP view after step 8"
    );
    Ok(())
}
