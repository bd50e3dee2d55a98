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

//! The transaction engine.
//!
//! An [`Engine`] runs in one of three modes. The homogeneous modes execute
//! every transaction on the versioned store, under snapshot isolation or
//! serializability, with a background thread collecting old versions. The
//! heterogeneous mode routes OLAP transactions to snapshot epochs and leaves
//! version collection to epoch deletion.
//!
//! ```
//! use hmvcc::engine::{Engine, EngineConfig, EngineMode, CommitOutcome};
//! use hmvcc::storage::{ColumnDef, Database, DataType, Schema, Value};
//! use hmvcc::txn::TxnKind;
//!
//! let mut db = Database::default();
//! db.create_table(Schema::new("t", vec![ColumnDef::new("c", DataType::Int64)]), 6).unwrap();
//! db.bulk_append("t", &vec![vec![Value::Int(0)]; 6]).unwrap();
//! let c = db.resolve("t", "c").unwrap();
//! let engine = Engine::new(db, EngineConfig::new(EngineMode::HeterogeneousSerializable)).unwrap();
//!
//! let mut t = engine.begin(TxnKind::Oltp);
//! t.write(c, 5, 1).unwrap();
//! assert!(matches!(t.commit().unwrap(), CommitOutcome::Committed(_)));
//!
//! let mut q = engine.begin_olap(&[c]).unwrap();
//! assert_eq!(q.sum(c).unwrap(), 1.0);
//! q.commit().unwrap();
//! ```

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use rustc_hash::FxHashMap;

use crate::hetero::{
    EpochHandle, EpochRegistry, HeteroError, HeteroMetrics, TriggerPolicy,
    DEFAULT_SNAPSHOT_INTERVAL,
};
use crate::predicate::Predicate;
use crate::storage::{
    Cell, ColumnRef, Database, FrozenColumn, ScanStats, StorageError, Timestamp, BLOCK_ROWS,
};
use crate::txn::{
    gc_pass, validate, AbortReason, ActiveSet, Clock, CommitLog, CommitRecord, CommittedWrite,
    Isolation, TransactionContext, TxnKind, TxnState,
};

/// Commit-log length above which a commit prunes it.
const LOG_PRUNE_THRESHOLD: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Hetero(#[from] HeteroError),
    #[error("OLAP transactions are read-only")]
    ReadOnlyViolation,
    #[error("transaction is no longer active")]
    NotActive,
    #[error("column {0:?} was not declared when the OLAP transaction began")]
    Routing(ColumnRef),
    #[error("configuration: {0}")]
    Config(String),
}

pub type EngineResult<T> = Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EngineMode {
    HomogeneousSi,
    HomogeneousSerializable,
    HeterogeneousSerializable,
}

impl EngineMode {
    pub const ALL: [EngineMode; 3] = [
        EngineMode::HomogeneousSi,
        EngineMode::HomogeneousSerializable,
        EngineMode::HeterogeneousSerializable,
    ];

    pub fn isolation(self) -> Isolation {
        match self {
            EngineMode::HomogeneousSi => Isolation::SnapshotIsolation,
            _ => Isolation::Serializable,
        }
    }

    pub fn heterogeneous(self) -> bool {
        self == EngineMode::HeterogeneousSerializable
    }

    pub fn name(self) -> &'static str {
        match self {
            EngineMode::HomogeneousSi => "homogeneous-si",
            EngineMode::HomogeneousSerializable => "homogeneous-serializable",
            EngineMode::HeterogeneousSerializable => "heterogeneous-serializable",
        }
    }
}

impl fmt::Display for EngineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EngineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EngineMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode '{s}'"))
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub mode: EngineMode,
    /// Commits between snapshot epochs (heterogeneous mode).
    pub snapshot_interval: u64,
    /// Period of the version collector (homogeneous modes); `None` disables
    /// the background thread.
    pub gc_interval: Option<Duration>,
}

impl EngineConfig {
    pub fn new(mode: EngineMode) -> Self {
        EngineConfig {
            mode,
            snapshot_interval: DEFAULT_SNAPSHOT_INTERVAL,
            gc_interval: Some(Duration::from_secs(1)),
        }
    }

    pub fn snapshot_interval(mut self, commits: u64) -> Self {
        self.snapshot_interval = commits;
        self
    }

    pub fn gc_interval(mut self, interval: Option<Duration>) -> Self {
        self.gc_interval = interval;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CommitOutcome {
    Committed(Timestamp),
    Aborted(AbortReasonKind),
}

/// Abort reason without the row details, cheap to copy around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AbortReasonKind {
    WriteWrite,
    Serializability,
    User,
}

impl CommitOutcome {
    pub fn committed(&self) -> bool {
        matches!(self, CommitOutcome::Committed(_))
    }
}

impl From<&AbortReason> for AbortReasonKind {
    fn from(r: &AbortReason) -> Self {
        match r {
            AbortReason::WriteWrite { .. } => AbortReasonKind::WriteWrite,
            AbortReason::Serializability { .. } => AbortReasonKind::Serializability,
            AbortReason::User => AbortReasonKind::User,
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    commits: AtomicU64,
    read_only_commits: AtomicU64,
    aborts_ww: AtomicU64,
    aborts_serializability: AtomicU64,
    aborts_user: AtomicU64,
    olap_visibility_checks: AtomicU64,
    olap_chain_traversals: AtomicU64,
    gc_runs: AtomicU64,
    gc_pruned: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineMetrics {
    pub commits: u64,
    pub read_only_commits: u64,
    pub aborts_ww: u64,
    pub aborts_serializability: u64,
    pub aborts_user: u64,
    pub published_ts: Timestamp,
    pub olap_visibility_checks: u64,
    pub olap_chain_traversals: u64,
    pub gc_runs: u64,
    pub gc_pruned: u64,
    pub chain_nodes_live: usize,
    pub hetero: Option<HeteroMetrics>,
}

pub struct Engine {
    db: Database,
    config: EngineConfig,
    clock: Clock,
    active: ActiveSet,
    /// The commit section.
    log: Mutex<CommitLog>,
    registry: Option<EpochRegistry>,
    next_txn: AtomicU64,
    counters: Counters,
    gc_stop: Mutex<Option<Sender<()>>>,
    gc_thread: Mutex<Option<JoinHandle<()>>>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("mode", &self.config.mode)
            .field("published", &self.clock.published())
            .finish()
    }
}

impl Engine {
    pub fn new(db: Database, config: EngineConfig) -> EngineResult<Arc<Engine>> {
        if config.snapshot_interval == 0 {
            return Err(EngineError::Config(
                "snapshot interval must be positive".into(),
            ));
        }
        let registry = config
            .mode
            .heterogeneous()
            .then(|| EpochRegistry::new(&db, TriggerPolicy::every(config.snapshot_interval)));
        let engine = Arc::new(Engine {
            db,
            config: config.clone(),
            clock: Clock::default(),
            active: ActiveSet::default(),
            log: Mutex::new(CommitLog::default()),
            registry,
            next_txn: AtomicU64::new(0),
            counters: Counters::default(),
            gc_stop: Mutex::new(None),
            gc_thread: Mutex::new(None),
        });
        if let (false, Some(interval)) = (config.mode.heterogeneous(), config.gc_interval) {
            let (tx, rx) = mpsc::channel::<()>();
            let weak: Weak<Engine> = Arc::downgrade(&engine);
            let handle = std::thread::Builder::new()
                .name("hmvcc-gc".into())
                .spawn(move || loop {
                    match rx.recv_timeout(interval) {
                        Err(RecvTimeoutError::Timeout) => match weak.upgrade() {
                            Some(engine) => {
                                engine.collect_garbage();
                            }
                            None => return,
                        },
                        _ => return,
                    }
                })
                .expect("spawn gc thread");
            *engine.gc_stop.lock() = Some(tx);
            *engine.gc_thread.lock() = Some(handle);
        }
        Ok(engine)
    }

    /// Stops the background collector and waits for it.
    pub fn shutdown(&self) {
        self.gc_stop.lock().take();
        if let Some(h) = self.gc_thread.lock().take() {
            let _ = h.join();
        }
    }

    pub fn db(&self) -> &Database {
        &self.db
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn mode(&self) -> EngineMode {
        self.config.mode
    }

    pub fn published(&self) -> Timestamp {
        self.clock.published()
    }

    pub fn registry(&self) -> Option<&EpochRegistry> {
        self.registry.as_ref()
    }

    pub fn active_transactions(&self) -> usize {
        self.active.count()
    }

    pub fn commit_log_len(&self) -> usize {
        self.log.lock().len()
    }

    /// Starts a transaction. OLAP transactions in heterogeneous mode have to
    /// name their columns up front, see [`Engine::begin_olap`].
    pub fn begin(&self, kind: TxnKind) -> Transaction<'_> {
        let begin_ts = self.active.register(kind, &self.clock);
        let id = self.next_txn.fetch_add(1, Ordering::Relaxed) + 1;
        Transaction {
            engine: self,
            ctx: TransactionContext::new(id, kind, self.config.mode.isolation(), begin_ts),
            epoch: None,
            frozen: FxHashMap::default(),
            registered: true,
            stats: ScanStats::default(),
        }
    }

    /// Starts an OLAP transaction reading `columns`.
    ///
    /// In heterogeneous mode this pins the newest epoch (logging the first
    /// one if none exists), materializes the missing columns and reads at
    /// the epoch's timestamp.
    pub fn begin_olap(&self, columns: &[ColumnRef]) -> EngineResult<Transaction<'_>> {
        let Some(registry) = &self.registry else {
            return Ok(self.begin(TxnKind::Olap));
        };
        let handle = registry.acquire(&self.db, &self.clock, columns)?;
        let epoch = Arc::clone(handle.epoch());
        let frozen = columns
            .iter()
            .map(|&c| (c, epoch.column(c).expect("materialized by acquire")))
            .collect();
        let id = self.next_txn.fetch_add(1, Ordering::Relaxed) + 1;
        Ok(Transaction {
            engine: self,
            ctx: TransactionContext::new(
                id,
                TxnKind::Olap,
                Isolation::Serializable,
                epoch.epoch_ts,
            ),
            epoch: Some(handle),
            frozen,
            registered: false,
            stats: ScanStats::default(),
        })
    }

    /// Logs a snapshot epoch at the current published timestamp, outside the
    /// commit-count policy.
    pub fn trigger_snapshot(&self) -> Option<u64> {
        self.registry.as_ref().map(|r| r.trigger(&self.clock))
    }

    fn oltp_horizon(&self) -> Timestamp {
        self.active.horizon(&[TxnKind::Oltp], &self.clock)
    }

    /// Reaps epochs that no transaction can reach anymore.
    pub fn reap_epochs(&self) -> EngineResult<Vec<u64>> {
        match &self.registry {
            Some(r) => Ok(r.reap(&self.db, self.oltp_horizon())?),
            None => Ok(Vec::new()),
        }
    }

    /// One version-collection pass bounded by the oldest running
    /// transaction. Returns the number of chain nodes removed.
    pub fn collect_garbage(&self) -> usize {
        if self.config.mode.heterogeneous() {
            return 0;
        }
        let horizon = self
            .active
            .horizon(&[TxnKind::Oltp, TxnKind::Olap], &self.clock);
        let pruned = gc_pass(&self.db, &self.log, horizon);
        self.counters.gc_runs.fetch_add(1, Ordering::Relaxed);
        self.counters
            .gc_pruned
            .fetch_add(pruned as u64, Ordering::Relaxed);
        pruned
    }

    pub fn metrics(&self) -> EngineMetrics {
        let c = &self.counters;
        EngineMetrics {
            commits: c.commits.load(Ordering::Relaxed),
            read_only_commits: c.read_only_commits.load(Ordering::Relaxed),
            aborts_ww: c.aborts_ww.load(Ordering::Relaxed),
            aborts_serializability: c.aborts_serializability.load(Ordering::Relaxed),
            aborts_user: c.aborts_user.load(Ordering::Relaxed),
            published_ts: self.clock.published(),
            olap_visibility_checks: c.olap_visibility_checks.load(Ordering::Relaxed),
            olap_chain_traversals: c.olap_chain_traversals.load(Ordering::Relaxed),
            gc_runs: c.gc_runs.load(Ordering::Relaxed),
            gc_pruned: c.gc_pruned.load(Ordering::Relaxed),
            chain_nodes_live: self.db.live_chain_nodes(),
            hetero: self.registry.as_ref().map(EpochRegistry::metrics),
        }
    }

    fn count_abort(&self, reason: &AbortReason) {
        let c = match reason {
            AbortReason::WriteWrite { .. } => &self.counters.aborts_ww,
            AbortReason::Serializability { .. } => &self.counters.aborts_serializability,
            AbortReason::User => &self.counters.aborts_user,
        };
        c.fetch_add(1, Ordering::Relaxed);
    }

    /// The commit protocol. Returns the outcome; `ctx.state` is updated.
    fn commit_ctx(&self, ctx: &mut TransactionContext) -> EngineResult<CommitOutcome> {
        if ctx.writes().is_empty() {
            // read-only: nothing to install; validation cannot change any
            // other transaction's outcome
            ctx.state = TxnState::Committed(ctx.begin_ts);
            self.counters
                .read_only_commits
                .fetch_add(1, Ordering::Relaxed);
            return Ok(CommitOutcome::Committed(ctx.begin_ts));
        }
        let mut columns: Vec<ColumnRef> = ctx.writes().iter().map(|w| w.column).collect();
        columns.sort();
        columns.dedup();
        let _shared: Vec<_> = match &self.registry {
            Some(r) => columns
                .iter()
                .map(|&c| r.column_locks().shared(c))
                .collect(),
            None => Vec::new(),
        };
        let mut log = self.log.lock();
        for w in ctx.writes() {
            let data = self.db.column(w.column).data.read();
            if data.ts(w.row)? > ctx.begin_ts {
                let reason = AbortReason::WriteWrite {
                    column: w.column,
                    row: w.row,
                };
                drop(data);
                drop(log);
                return Ok(self.abort_with(ctx, reason));
            }
        }
        if ctx.isolation == Isolation::Serializable {
            if let Err(reason) = validate(ctx, &log) {
                drop(log);
                return Ok(self.abort_with(ctx, reason));
            }
        }
        let commit_ts = self.clock.draw();
        let mut installed = Vec::with_capacity(ctx.writes().len());
        for &col in &columns {
            let mut data = self.db.column(col).data.write();
            for w in ctx.writes().iter().filter(|w| w.column == col) {
                let old = data.cell(w.row)?;
                data.install(w.row, w.value, commit_ts)?;
                installed.push(CommittedWrite {
                    column: col,
                    row: w.row,
                    old,
                    new: w.value,
                });
            }
        }
        if self.config.mode.isolation() == Isolation::Serializable {
            log.push(CommitRecord {
                commit_ts,
                writes: installed,
            });
        }
        self.clock.publish(commit_ts);
        if log.len() > LOG_PRUNE_THRESHOLD {
            let horizon = self.active.horizon(&[TxnKind::Oltp], &self.clock);
            log.prune(horizon);
        }
        drop(log);
        drop(_shared);
        ctx.state = TxnState::Committed(commit_ts);
        self.counters.commits.fetch_add(1, Ordering::Relaxed);
        Ok(CommitOutcome::Committed(commit_ts))
    }

    fn abort_with(&self, ctx: &mut TransactionContext, reason: AbortReason) -> CommitOutcome {
        self.count_abort(&reason);
        let kind = AbortReasonKind::from(&reason);
        ctx.state = TxnState::Aborted(reason);
        CommitOutcome::Aborted(kind)
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.gc_stop.get_mut().take();
    }
}

/// A running transaction. Dropping an active transaction aborts it.
pub struct Transaction<'e> {
    engine: &'e Engine,
    ctx: TransactionContext,
    epoch: Option<EpochHandle>,
    frozen: FxHashMap<ColumnRef, Arc<FrozenColumn>>,
    registered: bool,
    stats: ScanStats,
}

impl fmt::Debug for Transaction<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Transaction")
            .field("id", &self.ctx.id)
            .field("kind", &self.ctx.kind)
            .field("begin_ts", &self.ctx.begin_ts)
            .finish()
    }
}

impl<'e> Transaction<'e> {
    pub fn engine(&self) -> &'e Engine {
        self.engine
    }

    pub fn context(&self) -> &TransactionContext {
        &self.ctx
    }

    pub fn begin_ts(&self) -> Timestamp {
        self.ctx.begin_ts
    }

    pub fn kind(&self) -> TxnKind {
        self.ctx.kind
    }

    /// Visibility work done by this transaction so far.
    pub fn stats(&self) -> ScanStats {
        self.stats
    }

    /// The epoch an OLAP transaction runs on (heterogeneous mode).
    pub fn epoch_id(&self) -> Option<u64> {
        self.epoch.as_ref().map(|h| h.epoch().id)
    }

    fn check_active(&self) -> EngineResult<()> {
        if self.ctx.is_active() {
            Ok(())
        } else {
            Err(EngineError::NotActive)
        }
    }

    fn frozen(&self, column: ColumnRef) -> EngineResult<Option<&Arc<FrozenColumn>>> {
        if self.epoch.is_none() {
            return Ok(None);
        }
        self.frozen
            .get(&column)
            .map(Some)
            .ok_or(EngineError::Routing(column))
    }

    pub fn rows(&self, column: ColumnRef) -> usize {
        self.engine.db.table_by_id(column.table).rows()
    }

    /// Reads one cell and logs the row for validation.
    pub fn read(&mut self, column: ColumnRef, row: usize) -> EngineResult<Cell> {
        let v = self.read_unlogged(column, row)?;
        self.ctx.log_read(column, row);
        Ok(v)
    }

    /// Reads one cell without logging it; callers cover it by a predicate.
    pub fn read_unlogged(&mut self, column: ColumnRef, row: usize) -> EngineResult<Cell> {
        self.check_active()?;
        if let Some(v) = self.ctx.pending(column, row) {
            return Ok(v);
        }
        let col = self.engine.db.column(column);
        if let Some(f) = self.frozen(column)? {
            let mut out = [0];
            col.data.read().fill_frozen(f, row, &mut out);
            return Ok(out[0]);
        }
        let data = col.data.read();
        let ts = data.ts(row)?;
        if ts > self.ctx.begin_ts {
            self.stats.chain_traversals += 1;
        }
        self.stats.visibility_checks += 1;
        Ok(data.read_visible(row, self.ctx.begin_ts)?)
    }

    pub fn record_predicate(&mut self, predicate: Predicate) {
        self.ctx.log_predicate(predicate);
    }

    pub fn write(&mut self, column: ColumnRef, row: usize, value: Cell) -> EngineResult<()> {
        self.check_active()?;
        if self.ctx.kind == TxnKind::Olap {
            return Err(EngineError::ReadOnlyViolation);
        }
        let rows = self.rows(column);
        if row >= rows {
            return Err(StorageError::RowOutOfRange { row, rows }.into());
        }
        self.ctx.upsert(column, row, value);
        Ok(())
    }

    /// Copies the visible cells of rows `[start, start + out.len())`,
    /// including this transaction's own pending writes. Nothing is logged.
    pub fn fill(&mut self, column: ColumnRef, start: usize, out: &mut [Cell]) -> EngineResult<()> {
        self.check_active()?;
        let col = self.engine.db.column(column);
        if let Some(f) = self.frozen(column)? {
            col.data.read().fill_frozen(f, start, out);
            return Ok(());
        }
        col.data
            .read()
            .fill_visible(start, out, self.ctx.begin_ts, &mut self.stats)?;
        if !self.ctx.writes().is_empty() {
            let end = start + out.len();
            for w in self.ctx.writes() {
                if w.column == column && (start..end).contains(&w.row) {
                    out[w.row - start] = w.value;
                }
            }
        }
        Ok(())
    }

    /// Sum over a whole column: a tight loop on an epoch, a marker-guided
    /// versioned scan otherwise. Locks are taken per block.
    pub fn sum(&mut self, column: ColumnRef) -> EngineResult<f64> {
        self.check_active()?;
        let rows = self.rows(column);
        let col = self.engine.db.column(column);
        let frozen = self.frozen(column)?.cloned();
        let mut sum = 0.0;
        let mut start = 0;
        while start < rows {
            let end = (start + BLOCK_ROWS * 16).min(rows);
            let data = col.data.read();
            sum += match &frozen {
                Some(f) => data.sum_frozen(f, start, end),
                None => data.sum_visible(start, end, self.ctx.begin_ts, &mut self.stats)?,
            };
            start = end;
        }
        Ok(sum)
    }

    pub fn commit(mut self) -> EngineResult<CommitOutcome> {
        self.check_active()?;
        let outcome = self.engine.commit_ctx(&mut self.ctx);
        self.finish()?;
        outcome
    }

    pub fn abort(mut self) -> EngineResult<()> {
        self.check_active()?;
        self.engine.abort_with(&mut self.ctx, AbortReason::User);
        self.finish()
    }

    fn finish(&mut self) -> EngineResult<()> {
        if self.registered {
            self.engine
                .active
                .unregister(self.ctx.kind, self.ctx.begin_ts);
            self.registered = false;
        }
        if self.ctx.kind == TxnKind::Olap {
            let c = &self.engine.counters;
            c.olap_visibility_checks
                .fetch_add(self.stats.visibility_checks, Ordering::Relaxed);
            c.olap_chain_traversals
                .fetch_add(self.stats.chain_traversals, Ordering::Relaxed);
        }
        let mut result = Ok(());
        if let Some(handle) = self.epoch.take() {
            self.frozen.clear();
            let registry = self.engine.registry.as_ref().expect("heterogeneous");
            registry.release(&handle)?;
            drop(handle);
            result = self.engine.reap_epochs().map(|_| ());
        } else if let (Some(registry), TxnState::Committed(_)) =
            (&self.engine.registry, &self.ctx.state)
        {
            if self.ctx.kind == TxnKind::Oltp
                && !self.ctx.writes().is_empty()
                && registry.on_commit(&self.engine.clock)
            {
                result = self.engine.reap_epochs().map(|_| ());
            }
        }
        result
    }
}

impl Drop for Transaction<'_> {
    fn drop(&mut self) {
        if self.ctx.is_active() {
            self.engine.abort_with(&mut self.ctx, AbortReason::User);
        }
        if self.registered || self.epoch.is_some() {
            let _ = self.finish();
        }
    }
}
