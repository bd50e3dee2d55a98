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

//! Transaction state, the commit log and validation.
//!
//! Writes are buffered in the [`TransactionContext`] until commit. At commit
//! time the engine checks first-committer-wins write-write conflicts and, for
//! serializable transactions, validates the logged reads against every
//! commit that happened since the transaction began (precision locking):
//! a concurrent write aborts the reader if it hit a row the reader looked
//! at, or if its old or new value falls inside one of the reader's
//! predicates on that column.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use rustc_hash::{FxHashMap, FxHashSet};

use crate::predicate::Predicate;
use crate::storage::{Cell, ColumnRef, Database, TableId, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TxnKind {
    Oltp,
    Olap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Isolation {
    SnapshotIsolation,
    Serializable,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AbortReason {
    /// A transaction that committed after our begin wrote this row.
    WriteWrite { column: ColumnRef, row: usize },
    /// A concurrent commit intersected our reads.
    Serializability { column: ColumnRef, row: usize },
    /// Aborted by the caller.
    User,
}

impl AbortReason {
    pub fn label(&self) -> &'static str {
        match self {
            AbortReason::WriteWrite { .. } => "ww-conflict",
            AbortReason::Serializability { .. } => "serializability",
            AbortReason::User => "user",
        }
    }
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbortReason::WriteWrite { column, row } => {
                write!(f, "ww-conflict on {column:?} row {row}")
            }
            AbortReason::Serializability { column, row } => {
                write!(f, "serializability violation on {column:?} row {row}")
            }
            AbortReason::User => f.write_str("user abort"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TxnState {
    Active,
    Committed(Timestamp),
    Aborted(AbortReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingWrite {
    pub column: ColumnRef,
    pub row: usize,
    pub value: Cell,
}

#[derive(Debug)]
pub struct TransactionContext {
    pub id: u64,
    pub kind: TxnKind,
    pub isolation: Isolation,
    pub begin_ts: Timestamp,
    writes: Vec<PendingWrite>,
    write_index: FxHashMap<(ColumnRef, usize), usize>,
    read_rows: FxHashSet<(TableId, usize)>,
    predicates: Vec<Predicate>,
    pub state: TxnState,
}

impl TransactionContext {
    pub fn new(id: u64, kind: TxnKind, isolation: Isolation, begin_ts: Timestamp) -> Self {
        TransactionContext {
            id,
            kind,
            isolation,
            begin_ts,
            writes: Vec::new(),
            write_index: FxHashMap::default(),
            read_rows: FxHashSet::default(),
            predicates: Vec::new(),
            state: TxnState::Active,
        }
    }

    pub fn is_active(&self) -> bool {
        self.state == TxnState::Active
    }

    /// Whether reads have to be logged for validation.
    pub fn logs_reads(&self) -> bool {
        self.kind == TxnKind::Oltp && self.isolation == Isolation::Serializable
    }

    pub fn writes(&self) -> &[PendingWrite] {
        &self.writes
    }

    pub fn read_rows(&self) -> &FxHashSet<(TableId, usize)> {
        &self.read_rows
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    pub fn pending(&self, column: ColumnRef, row: usize) -> Option<Cell> {
        self.write_index
            .get(&(column, row))
            .map(|&i| self.writes[i].value)
    }

    /// Buffers a write; a later write to the same cell replaces it.
    pub fn upsert(&mut self, column: ColumnRef, row: usize, value: Cell) {
        match self.write_index.get(&(column, row)) {
            Some(&i) => self.writes[i].value = value,
            None => {
                self.write_index.insert((column, row), self.writes.len());
                self.writes.push(PendingWrite { column, row, value });
            }
        }
    }

    pub fn log_read(&mut self, column: ColumnRef, row: usize) {
        if self.logs_reads() {
            self.read_rows.insert((column.table, row));
        }
    }

    pub fn log_predicate(&mut self, predicate: Predicate) {
        if self.logs_reads() {
            self.predicates.push(predicate);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommittedWrite {
    pub column: ColumnRef,
    pub row: usize,
    pub old: Cell,
    pub new: Cell,
}

#[derive(Debug, Clone)]
pub struct CommitRecord {
    pub commit_ts: Timestamp,
    pub writes: Vec<CommittedWrite>,
}

/// Recently committed transactions, oldest first.
#[derive(Debug, Default)]
pub struct CommitLog {
    records: VecDeque<CommitRecord>,
}

impl CommitLog {
    pub fn push(&mut self, record: CommitRecord) {
        debug_assert!(self
            .records
            .back()
            .is_none_or(|r| r.commit_ts < record.commit_ts));
        self.records.push_back(record);
    }

    /// Records committed after `begin_ts`.
    pub fn since(&self, begin_ts: Timestamp) -> impl Iterator<Item = &CommitRecord> {
        let start = self.records.partition_point(|r| r.commit_ts <= begin_ts);
        self.records.range(start..)
    }

    /// Drops records no active transaction can conflict with, i.e. those
    /// committed at or before `oldest_begin`.
    pub fn prune(&mut self, oldest_begin: Timestamp) -> usize {
        let n = self
            .records
            .partition_point(|r| r.commit_ts <= oldest_begin);
        self.records.drain(..n);
        n
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Precision-locking validation of `ctx` against the commits in `log` that
/// happened after `ctx.begin_ts`.
pub fn validate(ctx: &TransactionContext, log: &CommitLog) -> Result<(), AbortReason> {
    if ctx.read_rows.is_empty() && ctx.predicates.is_empty() {
        return Ok(());
    }
    for record in log.since(ctx.begin_ts) {
        for w in &record.writes {
            let hit_row = ctx.read_rows.contains(&(w.column.table, w.row));
            let hit_pred = ctx
                .predicates
                .iter()
                .any(|p| p.column == w.column && (p.matches(w.old) || p.matches(w.new)));
            if hit_row || hit_pred {
                return Err(AbortReason::Serializability {
                    column: w.column,
                    row: w.row,
                });
            }
        }
    }
    Ok(())
}

/// Commit timestamps. `published` is the newest timestamp whose writes are
/// fully installed; transactions begin there.
#[derive(Debug, Default)]
pub struct Clock {
    next: AtomicU64,
    published: AtomicU64,
}

impl Clock {
    pub fn published(&self) -> Timestamp {
        self.published.load(Ordering::Acquire)
    }

    /// Draws the next commit timestamp. Callers hold the commit section.
    pub fn draw(&self) -> Timestamp {
        self.next.fetch_add(1, Ordering::AcqRel) + 1
    }

    pub fn publish(&self, ts: Timestamp) {
        self.published.store(ts, Ordering::Release);
    }
}

#[derive(Debug, Default)]
struct ActiveInner {
    oltp: BTreeMap<Timestamp, usize>,
    olap: BTreeMap<Timestamp, usize>,
}

/// Begin timestamps of running transactions.
#[derive(Debug, Default)]
pub struct ActiveSet {
    inner: Mutex<ActiveInner>,
}

impl ActiveSet {
    /// Registers a transaction starting now and returns its begin timestamp.
    ///
    /// The timestamp is read under the set's lock, so a concurrent
    /// [`ActiveSet::oldest`] never misses a transaction that began before it.
    pub fn register(&self, kind: TxnKind, clock: &Clock) -> Timestamp {
        let mut inner = self.inner.lock();
        let ts = clock.published();
        let map = match kind {
            TxnKind::Oltp => &mut inner.oltp,
            TxnKind::Olap => &mut inner.olap,
        };
        *map.entry(ts).or_default() += 1;
        ts
    }

    /// Registers a transaction with an explicit begin timestamp.
    pub fn register_at(&self, kind: TxnKind, ts: Timestamp) {
        let mut inner = self.inner.lock();
        let map = match kind {
            TxnKind::Oltp => &mut inner.oltp,
            TxnKind::Olap => &mut inner.olap,
        };
        *map.entry(ts).or_default() += 1;
    }

    pub fn unregister(&self, kind: TxnKind, ts: Timestamp) {
        let mut inner = self.inner.lock();
        let map = match kind {
            TxnKind::Oltp => &mut inner.oltp,
            TxnKind::Olap => &mut inner.olap,
        };
        if let Some(n) = map.get_mut(&ts) {
            *n -= 1;
            if *n == 0 {
                map.remove(&ts);
            }
        }
    }

    /// Oldest begin timestamp of the given kinds, or `None` if none runs.
    pub fn oldest(&self, kinds: &[TxnKind]) -> Option<Timestamp> {
        let inner = self.inner.lock();
        kinds
            .iter()
            .filter_map(|k| match k {
                TxnKind::Oltp => inner.oltp.keys().next(),
                TxnKind::Olap => inner.olap.keys().next(),
            })
            .min()
            .copied()
    }

    /// Oldest begin of any kind, falling back to the published timestamp,
    /// computed under the set's lock.
    pub fn horizon(&self, kinds: &[TxnKind], clock: &Clock) -> Timestamp {
        let inner = self.inner.lock();
        let published = clock.published();
        kinds
            .iter()
            .filter_map(|k| match k {
                TxnKind::Oltp => inner.oltp.keys().next(),
                TxnKind::Olap => inner.olap.keys().next(),
            })
            .min()
            .copied()
            .unwrap_or(published)
    }

    pub fn count(&self) -> usize {
        let inner = self.inner.lock();
        inner.oltp.values().sum::<usize>() + inner.olap.values().sum::<usize>()
    }
}

/// Version garbage collection for the homogeneous model: prunes every chain
/// below the version visible at `oldest_begin` and the commit log up to it.
pub fn gc_pass(db: &Database, log: &Mutex<CommitLog>, oldest_begin: Timestamp) -> usize {
    let mut pruned = 0;
    for table in db.tables() {
        for col in &table.columns {
            pruned += col.data.write().gc(oldest_begin);
        }
    }
    log.lock().prune(oldest_begin);
    pruned
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::f64_cell;

    const C: ColumnRef = ColumnRef {
        table: TableId(0),
        column: 1,
    };

    fn record(ts: Timestamp, row: usize, old: f64, new: f64) -> CommitRecord {
        CommitRecord {
            commit_ts: ts,
            writes: vec![CommittedWrite {
                column: C,
                row,
                old: f64_cell(old),
                new: f64_cell(new),
            }],
        }
    }

    #[test]
    fn last_write_wins_within_a_transaction() {
        let mut t = TransactionContext::new(1, TxnKind::Oltp, Isolation::Serializable, 0);
        t.upsert(C, 3, 1);
        t.upsert(C, 3, 2);
        assert_eq!(t.writes().len(), 1);
        assert_eq!(t.pending(C, 3), Some(2));
    }

    #[test]
    fn predicate_validation_uses_old_and_new_values() {
        let mut t = TransactionContext::new(1, TxnKind::Oltp, Isolation::Serializable, 5);
        t.log_predicate(Predicate::float_range(C, 0.05, 0.07));
        let mut log = CommitLog::default();
        log.push(record(6, 0, 0.20, 0.10));
        assert_eq!(validate(&t, &log), Ok(()));
        log.push(record(7, 1, 0.20, 0.06));
        assert!(validate(&t, &log).is_err());
        let mut moved_out = CommitLog::default();
        moved_out.push(record(6, 2, 0.06, 0.30));
        assert!(validate(&t, &moved_out).is_err());
    }

    #[test]
    fn commits_before_begin_are_ignored() {
        let mut t = TransactionContext::new(1, TxnKind::Oltp, Isolation::Serializable, 5);
        t.log_read(C, 0);
        let mut log = CommitLog::default();
        log.push(record(5, 0, 0.0, 1.0));
        assert_eq!(validate(&t, &log), Ok(()));
        log.push(record(6, 0, 1.0, 2.0));
        assert!(validate(&t, &log).is_err());
    }

    #[test]
    fn si_transactions_log_nothing() {
        let mut t = TransactionContext::new(1, TxnKind::Oltp, Isolation::SnapshotIsolation, 0);
        t.log_read(C, 0);
        t.log_predicate(Predicate::code(C, 1));
        assert!(t.read_rows().is_empty() && t.predicates().is_empty());
    }

    #[test]
    fn log_prune_and_since() {
        let mut log = CommitLog::default();
        for ts in 1..=5 {
            log.push(record(ts, 0, 0.0, 0.0));
        }
        assert_eq!(log.since(3).count(), 2);
        assert_eq!(log.prune(2), 2);
        assert_eq!(log.len(), 3);
    }

    #[test]
    fn active_set_tracks_oldest() {
        let clock = Clock::default();
        let set = ActiveSet::default();
        let a = set.register(TxnKind::Oltp, &clock);
        clock.publish(clock.draw());
        let b = set.register(TxnKind::Olap, &clock);
        assert_eq!((a, b), (0, 1));
        assert_eq!(set.oldest(&[TxnKind::Olap]), Some(1));
        set.unregister(TxnKind::Oltp, a);
        assert_eq!(set.oldest(&[TxnKind::Oltp]), None);
        assert_eq!(set.horizon(&[TxnKind::Oltp], &clock), 1);
    }
}
