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

//! Snapshot epochs for the heterogeneous model.
//!
//! Every `n` commits the registry logs a new epoch timestamp; nothing is
//! copied at that point. The first OLAP transaction that needs a column of
//! the newest epoch materializes it under the column's exclusive lock, which
//! freezes the current segment and hands its chains over to the epoch. OLAP
//! transactions pin the epoch they run on. An epoch that is unpinned and no
//! longer the newest is reaped, and its chains go with it.
//!
//! Lock order: registry, then column lock, then column data. The commit
//! section never waits for the registry while holding column locks.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};
use rustc_hash::{FxHashMap, FxHashSet};

use crate::snapshot::SnapshotCost;
use crate::storage::{ColumnRef, Database, FrozenColumn, StorageError, Timestamp};
use crate::txn::Clock;

/// Default number of commits between two snapshot epochs.
pub const DEFAULT_SNAPSHOT_INTERVAL: u64 = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum HeteroError {
    #[error("epoch {0} released twice")]
    DoubleRelease(u64),
    #[error("epoch {0} is not registered")]
    UnknownEpoch(u64),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriggerPolicy {
    pub commits_per_snapshot: u64,
}

impl TriggerPolicy {
    pub fn every(commits: u64) -> Self {
        assert!(commits > 0, "snapshot interval must be positive");
        TriggerPolicy {
            commits_per_snapshot: commits,
        }
    }
}

impl Default for TriggerPolicy {
    fn default() -> Self {
        TriggerPolicy::every(DEFAULT_SNAPSHOT_INTERVAL)
    }
}

/// Frozen columns of one snapshot timestamp.
#[derive(Debug)]
pub struct SnapshotEpoch {
    pub id: u64,
    pub epoch_ts: Timestamp,
    columns: RwLock<FxHashMap<ColumnRef, Arc<FrozenColumn>>>,
}

impl SnapshotEpoch {
    fn new(id: u64, epoch_ts: Timestamp) -> Self {
        SnapshotEpoch {
            id,
            epoch_ts,
            columns: RwLock::new(FxHashMap::default()),
        }
    }

    pub fn column(&self, key: ColumnRef) -> Option<Arc<FrozenColumn>> {
        self.columns.read().get(&key).cloned()
    }

    pub fn materialized(&self) -> Vec<ColumnRef> {
        let mut cols: Vec<_> = self.columns.read().keys().copied().collect();
        cols.sort();
        cols
    }

    pub fn chain_nodes(&self) -> usize {
        self.columns.read().values().map(|c| c.chain_nodes()).sum()
    }

    fn is_pending(&self) -> bool {
        self.columns.read().is_empty()
    }

    /// Newest install timestamp across the handed-over chain stores.
    fn chain_horizon(&self) -> Timestamp {
        self.columns
            .read()
            .values()
            .map(|c| c.chains.max_install_ts())
            .max()
            .unwrap_or(0)
    }
}

/// A pin on an epoch, returned by [`EpochRegistry::acquire`].
#[derive(Debug)]
pub struct EpochHandle {
    epoch: Arc<SnapshotEpoch>,
    token: u64,
}

impl EpochHandle {
    pub fn epoch(&self) -> &Arc<SnapshotEpoch> {
        &self.epoch
    }
}

/// Per-column update lock: committers hold it shared, materialization
/// exclusively.
#[derive(Debug, Default)]
pub struct ColumnLocks {
    locks: FxHashMap<ColumnRef, RwLock<()>>,
}

impl ColumnLocks {
    pub fn new(db: &Database) -> Self {
        let locks = db
            .tables()
            .iter()
            .flat_map(|t| t.columns.iter())
            .map(|c| (c.key, RwLock::new(())))
            .collect();
        ColumnLocks { locks }
    }

    pub fn shared(&self, key: ColumnRef) -> RwLockReadGuard<'_, ()> {
        self.locks[&key].read()
    }

    pub fn exclusive(&self, key: ColumnRef) -> RwLockWriteGuard<'_, ()> {
        self.locks[&key].write()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HeteroMetrics {
    pub epochs_live: usize,
    pub columns_materialized: u64,
    pub chain_nodes_held: usize,
    pub snapshots_triggered: u64,
    pub snapshots_discarded: u64,
    pub epochs_reaped: u64,
}

#[derive(Debug)]
struct Entry {
    epoch: Arc<SnapshotEpoch>,
    pins: FxHashSet<u64>,
}

#[derive(Debug, Default)]
struct Inner {
    entries: VecDeque<Entry>,
    next_id: u64,
    next_token: u64,
    /// Accumulated materialization cost and count per column.
    costs: FxHashMap<ColumnRef, (u64, SnapshotCost)>,
}

impl Inner {
    fn push_epoch(&mut self, epoch_ts: Timestamp) -> Arc<SnapshotEpoch> {
        self.next_id += 1;
        let epoch = Arc::new(SnapshotEpoch::new(self.next_id, epoch_ts));
        self.entries.push_back(Entry {
            epoch: Arc::clone(&epoch),
            pins: FxHashSet::default(),
        });
        epoch
    }
}

#[derive(Debug)]
pub struct EpochRegistry {
    policy: TriggerPolicy,
    inner: Mutex<Inner>,
    locks: ColumnLocks,
    commits: AtomicU64,
    triggered: AtomicU64,
    discarded: AtomicU64,
    materialized: AtomicU64,
    reaped: AtomicU64,
}

impl EpochRegistry {
    pub fn new(db: &Database, policy: TriggerPolicy) -> Self {
        EpochRegistry {
            policy,
            inner: Mutex::new(Inner::default()),
            locks: ColumnLocks::new(db),
            commits: AtomicU64::new(0),
            triggered: AtomicU64::new(0),
            discarded: AtomicU64::new(0),
            materialized: AtomicU64::new(0),
            reaped: AtomicU64::new(0),
        }
    }

    pub fn policy(&self) -> TriggerPolicy {
        self.policy
    }

    pub fn column_locks(&self) -> &ColumnLocks {
        &self.locks
    }

    /// Counts one commit; every `n`-th one logs a new epoch. Returns whether
    /// an epoch was logged.
    pub fn on_commit(&self, clock: &Clock) -> bool {
        let n = self.commits.fetch_add(1, Ordering::AcqRel) + 1;
        if n.is_multiple_of(self.policy.commits_per_snapshot) {
            self.trigger(clock);
            true
        } else {
            false
        }
    }

    /// Logs a new epoch at the published timestamp. An older epoch that
    /// nobody materialized or pinned is discarded, so at most one pending
    /// epoch exists.
    ///
    /// The timestamp is read under the registry lock, so it is never older
    /// than the state any earlier materialization froze.
    pub fn trigger(&self, clock: &Clock) -> u64 {
        let mut inner = self.inner.lock();
        let epoch_ts = clock.published();
        if let Some(last) = inner.entries.back() {
            if last.pins.is_empty() && last.epoch.is_pending() {
                inner.entries.pop_back();
                self.discarded.fetch_add(1, Ordering::Relaxed);
            }
        }
        self.triggered.fetch_add(1, Ordering::Relaxed);
        inner.push_epoch(epoch_ts).id
    }

    /// Pins the newest epoch (logging one if none exists) and materializes
    /// the requested columns that it lacks.
    pub fn acquire(
        &self,
        db: &Database,
        clock: &Clock,
        columns: &[ColumnRef],
    ) -> Result<EpochHandle, HeteroError> {
        let mut inner = self.inner.lock();
        if inner.entries.is_empty() {
            self.triggered.fetch_add(1, Ordering::Relaxed);
            inner.push_epoch(clock.published());
        }
        let epoch = Arc::clone(&inner.entries.back().expect("non-empty").epoch);
        let mut wanted: Vec<ColumnRef> = columns.to_vec();
        wanted.sort();
        wanted.dedup();
        for key in wanted {
            if epoch.columns.read().contains_key(&key) {
                continue;
            }
            let frozen = {
                let _exclusive = self.locks.exclusive(key);
                let mut data = db.column(key).data.write();
                data.snapshot(epoch.id, epoch.epoch_ts)?
            };
            let slot = inner.costs.entry(key).or_default();
            slot.0 += 1;
            slot.1.add(&frozen.cost);
            epoch.columns.write().insert(key, Arc::new(frozen));
            self.materialized.fetch_add(1, Ordering::Relaxed);
        }
        inner.next_token += 1;
        let token = inner.next_token;
        inner
            .entries
            .back_mut()
            .expect("non-empty")
            .pins
            .insert(token);
        Ok(EpochHandle { epoch, token })
    }

    pub fn release(&self, handle: &EpochHandle) -> Result<(), HeteroError> {
        let mut inner = self.inner.lock();
        let entry = inner
            .entries
            .iter_mut()
            .find(|e| e.epoch.id == handle.epoch.id)
            .ok_or(HeteroError::UnknownEpoch(handle.epoch.id))?;
        if !entry.pins.remove(&handle.token) {
            return Err(HeteroError::DoubleRelease(handle.epoch.id));
        }
        Ok(())
    }

    /// Deletes every unpinned epoch that is not the newest and whose chains
    /// no running OLTP transaction can still need, i.e. whose newest chain
    /// install is not after `oltp_horizon`. Returns the deleted epoch ids.
    pub fn reap(&self, db: &Database, oltp_horizon: Timestamp) -> Result<Vec<u64>, HeteroError> {
        let mut inner = self.inner.lock();
        let newest = match inner.entries.back() {
            Some(e) => e.epoch.id,
            None => return Ok(Vec::new()),
        };
        let mut reaped = Vec::new();
        let mut kept = VecDeque::with_capacity(inner.entries.len());
        let entries = std::mem::take(&mut inner.entries);
        let mut failure = None;
        for entry in entries {
            let droppable = entry.epoch.id != newest
                && entry.pins.is_empty()
                && entry.epoch.chain_horizon() <= oltp_horizon
                && failure.is_none();
            if !droppable {
                kept.push_back(entry);
                continue;
            }
            let frozen: Vec<Arc<FrozenColumn>> = entry
                .epoch
                .columns
                .write()
                .drain()
                .map(|(_, f)| f)
                .collect();
            for f in &frozen {
                if let Err(e) = db.column(f.segment.key).data.write().release_frozen(f) {
                    failure = Some(e);
                }
            }
            reaped.push(entry.epoch.id);
        }
        inner.entries = kept;
        self.reaped
            .fetch_add(reaped.len() as u64, Ordering::Relaxed);
        match failure {
            Some(e) => Err(e.into()),
            None => Ok(reaped),
        }
    }

    pub fn newest(&self) -> Option<Arc<SnapshotEpoch>> {
        self.inner
            .lock()
            .entries
            .back()
            .map(|e| Arc::clone(&e.epoch))
    }

    pub fn epochs(&self) -> Vec<Arc<SnapshotEpoch>> {
        self.inner
            .lock()
            .entries
            .iter()
            .map(|e| Arc::clone(&e.epoch))
            .collect()
    }

    pub fn pins(&self, epoch_id: u64) -> Option<usize> {
        self.inner
            .lock()
            .entries
            .iter()
            .find(|e| e.epoch.id == epoch_id)
            .map(|e| e.pins.len())
    }

    /// Materialization count and accumulated cost per column.
    pub fn column_costs(&self) -> Vec<(ColumnRef, u64, SnapshotCost)> {
        let mut v: Vec<_> = self
            .inner
            .lock()
            .costs
            .iter()
            .map(|(k, (n, c))| (*k, *n, *c))
            .collect();
        v.sort_by_key(|e| e.0);
        v
    }

    pub fn metrics(&self) -> HeteroMetrics {
        let inner = self.inner.lock();
        HeteroMetrics {
            epochs_live: inner.entries.len(),
            columns_materialized: self.materialized.load(Ordering::Relaxed),
            chain_nodes_held: inner.entries.iter().map(|e| e.epoch.chain_nodes()).sum(),
            snapshots_triggered: self.triggered.load(Ordering::Relaxed),
            snapshots_discarded: self.discarded.load(Ordering::Relaxed),
            epochs_reaped: self.reaped.load(Ordering::Relaxed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::{ColumnDef, DataType, Schema, Value};

    fn db() -> Database {
        let mut db = Database::default();
        db.create_table(
            Schema::new(
                "t",
                vec![
                    ColumnDef::new("a", DataType::Int64),
                    ColumnDef::new("b", DataType::Int64),
                ],
            ),
            4,
        )
        .unwrap();
        db.bulk_append("t", &vec![vec![Value::Int(1), Value::Int(2)]; 4])
            .unwrap();
        db
    }

    #[test]
    fn trigger_every_n_commits() {
        let db = db();
        let reg = EpochRegistry::new(&db, TriggerPolicy::every(3));
        let clock = Clock::default();
        let commit = || {
            clock.publish(clock.draw());
            reg.on_commit(&clock)
        };
        assert!(!commit());
        assert!(!commit());
        assert!(commit());
        let e = reg.newest().unwrap();
        assert_eq!(e.epoch_ts, 3);
        assert!(e.materialized().is_empty());
    }

    #[test]
    fn skipped_pending_epoch_is_discarded() {
        let db = db();
        let reg = EpochRegistry::new(&db, TriggerPolicy::every(1));
        let clock = Clock::default();
        for _ in 0..2 {
            clock.publish(clock.draw());
            reg.on_commit(&clock);
        }
        let m = reg.metrics();
        assert_eq!(
            (m.epochs_live, m.snapshots_triggered, m.snapshots_discarded),
            (1, 2, 1)
        );
        assert_eq!(reg.newest().unwrap().epoch_ts, 2);
    }

    #[test]
    fn acquire_materializes_only_requested_columns_once() {
        let db = db();
        let reg = EpochRegistry::new(&db, TriggerPolicy::default());
        let a = db.resolve("t", "a").unwrap();
        let clock = Clock::default();
        let h1 = reg.acquire(&db, &clock, &[a]).unwrap();
        assert_eq!(h1.epoch().materialized(), vec![a]);
        let h2 = reg.acquire(&db, &clock, &[a]).unwrap();
        assert_eq!(reg.metrics().columns_materialized, 1);
        assert_eq!(reg.pins(h1.epoch().id), Some(2));
        reg.release(&h1).unwrap();
        reg.release(&h2).unwrap();
        assert!(matches!(
            reg.release(&h2),
            Err(HeteroError::DoubleRelease(_))
        ));
    }

    #[test]
    fn reap_spares_newest_and_pinned() {
        let db = db();
        let reg = EpochRegistry::new(&db, TriggerPolicy::default());
        let a = db.resolve("t", "a").unwrap();
        let clock = Clock::default();
        let h = reg.acquire(&db, &clock, &[a]).unwrap();
        assert!(reg.reap(&db, 0).unwrap().is_empty());
        reg.trigger(&clock);
        assert!(reg.reap(&db, 0).unwrap().is_empty(), "still pinned");
        reg.release(&h).unwrap();
        assert_eq!(reg.reap(&db, 0).unwrap(), vec![h.epoch().id]);
        assert_eq!(reg.metrics().epochs_live, 1);
    }
}
