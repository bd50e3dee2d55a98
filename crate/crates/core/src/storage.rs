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

//! Columnar tables stored in emulated virtual memory.
//!
//! Every column owns an [`AddressSpace`] holding one segment of fixed 8-byte
//! cells (floats bit-cast, dates and dictionary codes widened). Updates are
//! installed in place; the superseded value moves to the row's version chain
//! together with the timestamp that created it. A per-row timestamp array
//! holds the commit timestamp of the in-place value (0 for bulk-loaded data)
//! and [`SyncMarkers`] record which rows of every 1024-row block were ever
//! versioned, so scans can run unchecked tight loops around them.
//!
//! [`ColumnData::snapshot`] freezes the current segment for an epoch: the
//! up-to-date store moves to a virtual duplicate and the chains collected so
//! far are handed over with the frozen segment.

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};

use chrono::{Datelike, NaiveDate};
use parking_lot::RwLock;
use rustc_hash::FxHashMap;
use sha2::{Digest, Sha256};

use crate::snapshot::{
    allocate_segment, create_view, fork_cost, ForkCost, SnapshotCost, SnapshotError, StrategyKind,
};
use crate::vmem::{AddressSpace, VirtAddr, VmError, DEFAULT_PAGE_SIZE};

pub type Timestamp = u64;
pub type Cell = u64;

/// Rows per sync-marker block.
pub const BLOCK_ROWS: usize = 1024;

const CELL_BYTES: u64 = 8;

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("table {table} holds at most {capacity} rows, {requested} requested")]
    Capacity {
        table: String,
        capacity: usize,
        requested: usize,
    },
    #[error("row {row}: commit timestamp {commit_ts} is not newer than {current}")]
    OrderingViolation {
        row: usize,
        commit_ts: Timestamp,
        current: Timestamp,
    },
    #[error("row {row}: no version visible at {begin_ts} is retained")]
    VersionUnavailable { row: usize, begin_ts: Timestamp },
    #[error("row {row} out of range ({rows} rows)")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("unknown table '{0}'")]
    UnknownTable(String),
    #[error("unknown column '{0}'")]
    UnknownColumn(String),
    #[error("duplicate table '{0}'")]
    DuplicateTable(String),
    #[error("type mismatch: column '{column}' holds {expected:?}")]
    TypeMismatch { column: String, expected: DataType },
    #[error("cannot parse '{text}' as {dtype:?}")]
    Parse { text: String, dtype: DataType },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Vm(#[from] VmError),
}

pub type StorageResult<T> = Result<T, StorageError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataType {
    Int64,
    Float64,
    /// Days since 1970-01-01.
    Date,
    /// Dictionary-encoded string.
    Dict,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Date(i32),
    Str(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Date(d) => write!(f, "{}", format_date(*d)),
            Value::Str(s) => f.write_str(s),
        }
    }
}

fn epoch_day() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date")
}

/// Day number of a calendar date.
pub fn date_to_days(year: i32, month: u32, day: u32) -> Option<i32> {
    let d = NaiveDate::from_ymd_opt(year, month, day)?;
    Some((d - epoch_day()).num_days() as i32)
}

pub fn days_to_ymd(days: i32) -> (i32, u32, u32) {
    let d = epoch_day() + chrono::Duration::days(days as i64);
    (d.year(), d.month(), d.day())
}

pub fn format_date(days: i32) -> String {
    let (y, m, d) = days_to_ymd(days);
    format!("{y:04}-{m:02}-{d:02}")
}

pub fn parse_date(text: &str) -> Option<i32> {
    let d = NaiveDate::parse_from_str(text, "%Y-%m-%d").ok()?;
    Some((d - epoch_day()).num_days() as i32)
}

#[inline]
pub fn f64_cell(v: f64) -> Cell {
    v.to_bits()
}

#[inline]
pub fn cell_f64(c: Cell) -> f64 {
    f64::from_bits(c)
}

#[inline]
pub fn i64_cell(v: i64) -> Cell {
    v as u64
}

#[inline]
pub fn cell_i64(c: Cell) -> i64 {
    c as i64
}

#[inline]
pub fn date_cell(days: i32) -> Cell {
    days as i64 as u64
}

#[inline]
pub fn cell_date(c: Cell) -> i32 {
    c as i64 as i32
}

/// Numeric view of a cell, used by sums over any column type.
#[inline]
pub fn cell_as_f64(dtype: DataType, c: Cell) -> f64 {
    match dtype {
        DataType::Float64 => cell_f64(c),
        DataType::Int64 | DataType::Date => cell_i64(c) as f64,
        DataType::Dict => c as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnDef {
    pub name: String,
    pub dtype: DataType,
}

impl ColumnDef {
    pub fn new(name: impl Into<String>, dtype: DataType) -> Self {
        ColumnDef {
            name: name.into(),
            dtype,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub name: String,
    pub columns: Vec<ColumnDef>,
}

impl Schema {
    pub fn new(name: impl Into<String>, columns: Vec<ColumnDef>) -> Self {
        Schema {
            name: name.into(),
            columns,
        }
    }

    pub fn position(&self, column: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == column)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TableId(pub u16);

/// Engine-wide column identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ColumnRef {
    pub table: TableId,
    pub column: u16,
}

impl ColumnRef {
    pub fn new(table: TableId, column: usize) -> Self {
        ColumnRef {
            table,
            column: column as u16,
        }
    }
}

/// Location of a column's cells inside its address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnSegment {
    pub key: ColumnRef,
    pub dtype: DataType,
    pub base: VirtAddr,
    pub row_count: usize,
    pub capacity: usize,
}

impl ColumnSegment {
    fn addr(&self, row: usize) -> VirtAddr {
        self.base + row as u64 * CELL_BYTES
    }
}

/// One superseded version of a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainNode {
    pub value: Cell,
    /// Timestamp of the commit that created this version.
    pub commit_ts: Timestamp,
}

/// Version chains of one column, collected between two snapshots.
///
/// Each row's chain is stored oldest first, so the newest version is the
/// last element and appends are pushes.
#[derive(Debug, Default)]
pub struct ChainStore {
    generation: u64,
    rows: FxHashMap<u32, Vec<ChainNode>>,
    nodes: usize,
    max_install_ts: Timestamp,
}

impl ChainStore {
    pub fn new(generation: u64) -> Self {
        ChainStore {
            generation,
            ..Default::default()
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    /// Newest commit timestamp that pushed a node into this store.
    pub fn max_install_ts(&self) -> Timestamp {
        self.max_install_ts
    }

    /// Versions of `row`, newest first.
    pub fn chain(&self, row: usize) -> impl Iterator<Item = &ChainNode> {
        self.rows
            .get(&(row as u32))
            .into_iter()
            .flat_map(|c| c.iter().rev())
    }

    fn push(&mut self, row: usize, node: ChainNode, install_ts: Timestamp) {
        self.rows.entry(row as u32).or_default().push(node);
        self.nodes += 1;
        self.max_install_ts = self.max_install_ts.max(install_ts);
    }

    fn find(&self, row: usize, begin_ts: Timestamp) -> Option<ChainNode> {
        self.chain(row).find(|n| n.commit_ts <= begin_ts).copied()
    }
}

/// Per-block first and last versioned row.
#[derive(Debug, Clone, Default)]
pub struct SyncMarkers {
    blocks: Vec<(u32, u32)>,
}

const NO_MARK: (u32, u32) = (u32::MAX, 0);

impl SyncMarkers {
    fn mark(&mut self, row: usize) {
        let b = row / BLOCK_ROWS;
        if b >= self.blocks.len() {
            self.blocks.resize(b + 1, NO_MARK);
        }
        let (first, last) = &mut self.blocks[b];
        *first = (*first).min(row as u32);
        *last = (*last).max(row as u32);
    }

    /// Inclusive range of versioned rows in `block`, if any.
    pub fn block(&self, block: usize) -> Option<(usize, usize)> {
        match self.blocks.get(block) {
            Some(&(first, last)) if first != u32::MAX => Some((first as usize, last as usize)),
            _ => None,
        }
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Rows a marker-guided scan has to check.
    pub fn checked_rows(&self) -> u64 {
        (0..self.blocks.len())
            .filter_map(|b| self.block(b))
            .map(|(f, l)| (l - f + 1) as u64)
            .sum()
    }
}

#[derive(Debug, Default, Clone)]
pub struct Dictionary {
    values: Vec<String>,
    codes: HashMap<String, u32>,
}

impl Dictionary {
    pub fn encode(&mut self, s: &str) -> u32 {
        if let Some(&c) = self.codes.get(s) {
            return c;
        }
        let c = self.values.len() as u32;
        self.values.push(s.to_string());
        self.codes.insert(s.to_string(), c);
        c
    }

    pub fn lookup(&self, s: &str) -> Option<u32> {
        self.codes.get(s).copied()
    }

    pub fn decode(&self, code: u32) -> Option<&str> {
        self.values.get(code as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }
}

/// Probe counters of visibility work.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScanStats {
    /// Rows whose timestamp had to be compared.
    pub visibility_checks: u64,
    /// Rows whose visible version came from a chain.
    pub chain_traversals: u64,
}

impl ScanStats {
    pub fn add(&mut self, other: &ScanStats) {
        self.visibility_checks += other.visibility_checks;
        self.chain_traversals += other.chain_traversals;
    }
}

/// A column segment frozen for one snapshot epoch.
#[derive(Debug)]
pub struct FrozenColumn {
    pub epoch_id: u64,
    pub epoch_ts: Timestamp,
    pub segment: ColumnSegment,
    segment_len: u64,
    /// Commit timestamp of every frozen cell.
    pub ts: Vec<Timestamp>,
    /// Chains collected on the up-to-date side until the snapshot.
    pub chains: Arc<ChainStore>,
    pub cost: SnapshotCost,
    /// Cells rolled back to their version at `epoch_ts`.
    pub rows_patched: usize,
}

impl FrozenColumn {
    pub fn chain_nodes(&self) -> usize {
        self.chains.node_count()
    }
}

/// Mutable state of one column.
pub struct ColumnData {
    space: AddressSpace,
    backend: StrategyKind,
    segment: ColumnSegment,
    segment_len: u64,
    ts: Vec<Timestamp>,
    chains: ChainStore,
    /// Handed-over stores, oldest first, still readable while an epoch or an
    /// in-flight reader keeps them alive.
    retired: Vec<Weak<ChainStore>>,
    markers: SyncMarkers,
    next_generation: u64,
}

impl fmt::Debug for ColumnData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ColumnData")
            .field("segment", &self.segment)
            .field("backend", &self.backend)
            .field("chain_nodes", &self.chains.nodes)
            .finish()
    }
}

impl ColumnData {
    fn new(
        key: ColumnRef,
        dtype: DataType,
        capacity: usize,
        backend: StrategyKind,
        page_size: usize,
    ) -> StorageResult<Self> {
        let mut space = AddressSpace::new(page_size);
        let ps = page_size as u64;
        let segment_len = ((capacity as u64 * CELL_BYTES).div_ceil(ps)).max(1) * ps;
        let base = allocate_segment(backend, &mut space, segment_len)?;
        Ok(ColumnData {
            space,
            backend,
            segment: ColumnSegment {
                key,
                dtype,
                base,
                row_count: 0,
                capacity,
            },
            segment_len,
            ts: Vec::new(),
            chains: ChainStore::new(0),
            retired: Vec::new(),
            markers: SyncMarkers::default(),
            next_generation: 1,
        })
    }

    pub fn segment(&self) -> &ColumnSegment {
        &self.segment
    }

    pub fn rows(&self) -> usize {
        self.segment.row_count
    }

    pub fn space(&self) -> &AddressSpace {
        &self.space
    }

    pub fn backend(&self) -> StrategyKind {
        self.backend
    }

    pub fn markers(&self) -> &SyncMarkers {
        &self.markers
    }

    pub fn timestamps(&self) -> &[Timestamp] {
        &self.ts
    }

    pub fn chains(&self) -> &ChainStore {
        &self.chains
    }

    /// Chain nodes reachable from this column, including handed-over stores
    /// that are still alive.
    pub fn live_chain_nodes(&self) -> usize {
        self.chains.nodes
            + self
                .retired
                .iter()
                .filter_map(Weak::upgrade)
                .map(|s| s.nodes)
                .sum::<usize>()
    }

    fn check_row(&self, row: usize) -> StorageResult<()> {
        if row >= self.segment.row_count {
            return Err(StorageError::RowOutOfRange {
                row,
                rows: self.segment.row_count,
            });
        }
        Ok(())
    }

    fn read_at(&self, seg: &ColumnSegment, row: usize) -> Cell {
        let addr = seg.addr(row);
        let words = self.space.page_words(addr).expect("segment mapped");
        let per_page = self.space.page_size() / CELL_BYTES;
        words[((addr / CELL_BYTES) % per_page) as usize]
    }

    /// The in-place cell of `row`.
    pub fn cell(&self, row: usize) -> StorageResult<Cell> {
        self.check_row(row)?;
        Ok(self.read_at(&self.segment, row))
    }

    pub fn ts(&self, row: usize) -> StorageResult<Timestamp> {
        self.check_row(row)?;
        Ok(self.ts[row])
    }

    fn append(&mut self, cells: &[Cell], table: &str) -> StorageResult<()> {
        if cells.is_empty() {
            return Ok(());
        }
        let start = self.segment.row_count;
        if start + cells.len() > self.segment.capacity {
            return Err(StorageError::Capacity {
                table: table.to_string(),
                capacity: self.segment.capacity,
                requested: start + cells.len(),
            });
        }
        self.space
            .vm_write(self.segment.addr(start), bytemuck::cast_slice(cells))?;
        self.segment.row_count += cells.len();
        self.ts.resize(self.segment.row_count, 0);
        if self.markers.block_count() < self.segment.row_count.div_ceil(BLOCK_ROWS) {
            self.markers
                .blocks
                .resize(self.segment.row_count.div_ceil(BLOCK_ROWS), NO_MARK);
        }
        Ok(())
    }

    /// Installs a committed write: the old version moves to the chain and the
    /// new value is written in place.
    pub fn install(&mut self, row: usize, value: Cell, commit_ts: Timestamp) -> StorageResult<()> {
        self.check_row(row)?;
        let current = self.ts[row];
        if commit_ts <= current {
            return Err(StorageError::OrderingViolation {
                row,
                commit_ts,
                current,
            });
        }
        let old = self.read_at(&self.segment, row);
        self.chains.push(
            row,
            ChainNode {
                value: old,
                commit_ts: current,
            },
            commit_ts,
        );
        self.space.write_word(self.segment.addr(row), value)?;
        self.ts[row] = commit_ts;
        self.markers.mark(row);
        Ok(())
    }

    /// The version of `row` visible at `begin_ts` and its timestamp.
    pub fn resolve(&self, row: usize, begin_ts: Timestamp) -> StorageResult<(Cell, Timestamp)> {
        self.check_row(row)?;
        if self.ts[row] <= begin_ts {
            return Ok((self.read_at(&self.segment, row), self.ts[row]));
        }
        self.resolve_chain(row, begin_ts)
    }

    fn resolve_chain(&self, row: usize, begin_ts: Timestamp) -> StorageResult<(Cell, Timestamp)> {
        if let Some(n) = self.chains.find(row, begin_ts) {
            return Ok((n.value, n.commit_ts));
        }
        for store in self.retired.iter().rev() {
            let Some(store) = store.upgrade() else {
                break;
            };
            if let Some(n) = store.find(row, begin_ts) {
                return Ok((n.value, n.commit_ts));
            }
        }
        Err(StorageError::VersionUnavailable { row, begin_ts })
    }

    pub fn read_visible(&self, row: usize, begin_ts: Timestamp) -> StorageResult<Cell> {
        self.resolve(row, begin_ts).map(|(v, _)| v)
    }

    /// Copies the cells of rows `[start, start + out.len())` visible at
    /// `begin_ts` into `out`.
    ///
    /// Rows outside the sync-marker range of their block are copied without
    /// any timestamp check.
    pub fn fill_visible(
        &self,
        start: usize,
        out: &mut [Cell],
        begin_ts: Timestamp,
        stats: &mut ScanStats,
    ) -> StorageResult<()> {
        let end = start + out.len();
        if end > self.segment.row_count {
            return Err(StorageError::RowOutOfRange {
                row: end - 1,
                rows: self.segment.row_count,
            });
        }
        self.copy_cells(&self.segment, start, out);
        let mut block = start / BLOCK_ROWS;
        while block * BLOCK_ROWS < end {
            if let Some((first, last)) = self.markers.block(block) {
                let lo = first.max(start);
                let hi = (last + 1).min(end);
                for row in lo..hi {
                    stats.visibility_checks += 1;
                    if self.ts[row] > begin_ts {
                        stats.chain_traversals += 1;
                        out[row - start] = self.resolve_chain(row, begin_ts)?.0;
                    }
                }
            }
            block += 1;
        }
        Ok(())
    }

    /// Copies frozen cells, no checks at all.
    pub fn fill_frozen(&self, frozen: &FrozenColumn, start: usize, out: &mut [Cell]) {
        assert!(
            start + out.len() <= frozen.segment.row_count,
            "frozen range"
        );
        self.copy_cells(&frozen.segment, start, out);
    }

    fn copy_cells(&self, seg: &ColumnSegment, start: usize, out: &mut [Cell]) {
        let per_page = (self.space.page_size() / CELL_BYTES) as usize;
        let mut done = 0;
        while done < out.len() {
            let row = start + done;
            let addr = seg.addr(row);
            let words = self.space.page_words(addr).expect("segment mapped");
            let off = row % per_page;
            let n = (per_page - off).min(out.len() - done);
            out[done..done + n].copy_from_slice(&words[off..off + n]);
            done += n;
        }
    }

    /// Sum of the frozen cells of rows `[start, end)` in a tight loop.
    pub fn sum_frozen(&self, frozen: &FrozenColumn, start: usize, end: usize) -> f64 {
        let dtype = frozen.segment.dtype;
        let per_page = (self.space.page_size() / CELL_BYTES) as usize;
        let mut sum = 0.0;
        let mut row = start;
        while row < end {
            let words = self
                .space
                .page_words(frozen.segment.addr(row))
                .expect("segment mapped");
            let off = row % per_page;
            let n = (per_page - off).min(end - row);
            sum += sum_cells(dtype, &words[off..off + n]);
            row += n;
        }
        sum
    }

    /// Sum of the cells of rows `[start, end)` visible at `begin_ts`, tight
    /// loop outside the marker ranges.
    pub fn sum_visible(
        &self,
        start: usize,
        end: usize,
        begin_ts: Timestamp,
        stats: &mut ScanStats,
    ) -> StorageResult<f64> {
        let dtype = self.segment.dtype;
        let mut sum = 0.0;
        let mut row = start;
        while row < end {
            let block = row / BLOCK_ROWS;
            let block_end = ((block + 1) * BLOCK_ROWS).min(end);
            match self.markers.block(block) {
                Some((first, last)) if last >= row && first < block_end => {
                    let lo = first.max(row);
                    let hi = (last + 1).min(block_end);
                    sum += self.sum_range(row, lo);
                    for r in lo..hi {
                        stats.visibility_checks += 1;
                        let c = if self.ts[r] <= begin_ts {
                            self.read_at(&self.segment, r)
                        } else {
                            stats.chain_traversals += 1;
                            self.resolve_chain(r, begin_ts)?.0
                        };
                        sum += cell_as_f64(dtype, c);
                    }
                    sum += self.sum_range(hi, block_end);
                }
                _ => sum += self.sum_range(row, block_end),
            }
            row = block_end;
        }
        Ok(sum)
    }

    fn sum_range(&self, start: usize, end: usize) -> f64 {
        let per_page = (self.space.page_size() / CELL_BYTES) as usize;
        let mut sum = 0.0;
        let mut row = start;
        while row < end {
            let words = self
                .space
                .page_words(self.segment.addr(row))
                .expect("segment mapped");
            let off = row % per_page;
            let n = (per_page - off).min(end - row);
            sum += sum_cells(self.segment.dtype, &words[off..off + n]);
            row += n;
        }
        sum
    }

    /// Freezes the current segment for an epoch stamped `epoch_ts`.
    ///
    /// The up-to-date side continues on a virtual duplicate. Cells committed
    /// after `epoch_ts` are rolled back in the frozen copy, so every frozen
    /// cell is the version visible at `epoch_ts`. The chains collected so far
    /// are handed over to the frozen column.
    pub fn snapshot(&mut self, epoch_id: u64, epoch_ts: Timestamp) -> StorageResult<FrozenColumn> {
        let (view, cost) = create_view(
            self.backend,
            &mut self.space,
            self.segment.base,
            self.segment_len,
        )?;
        let frozen_seg = self.segment;
        self.segment.base = view;
        let mut ts = self.ts.clone();
        let mut rows_patched = 0;
        for row in 0..frozen_seg.row_count {
            if ts[row] > epoch_ts {
                let (value, vts) = self.resolve_chain(row, epoch_ts)?;
                self.space.write_word(frozen_seg.addr(row), value)?;
                ts[row] = vts;
                rows_patched += 1;
            }
        }
        let generation = self.next_generation;
        self.next_generation += 1;
        let handed = Arc::new(std::mem::replace(
            &mut self.chains,
            ChainStore::new(generation),
        ));
        self.retired.retain(|w| w.strong_count() > 0);
        self.retired.push(Arc::downgrade(&handed));
        Ok(FrozenColumn {
            epoch_id,
            epoch_ts,
            segment: frozen_seg,
            segment_len: self.segment_len,
            ts,
            chains: handed,
            cost,
            rows_patched,
        })
    }

    /// Unmaps a frozen segment. The caller drops the column afterwards.
    pub fn release_frozen(&mut self, frozen: &FrozenColumn) -> StorageResult<()> {
        debug_assert_ne!(frozen.segment.base, self.segment.base);
        self.space
            .vm_unmap(frozen.segment.base, frozen.segment_len)?;
        self.retired.retain(|w| w.strong_count() > 0);
        Ok(())
    }

    /// Drops every chain node older than the newest version visible at
    /// `oldest_begin`. Returns the number of nodes removed.
    pub fn gc(&mut self, oldest_begin: Timestamp) -> usize {
        let ts = &self.ts;
        let mut pruned = 0;
        self.chains.rows.retain(|&row, chain| {
            let before = chain.len();
            if ts[row as usize] <= oldest_begin {
                // the in-place cell is the floor
                chain.clear();
            } else if let Some(floor) = chain.iter().rposition(|n| n.commit_ts <= oldest_begin) {
                chain.drain(..floor);
            }
            pruned += before - chain.len();
            !chain.is_empty()
        });
        self.chains.nodes -= pruned;
        pruned
    }
}

#[inline]
fn sum_cells(dtype: DataType, words: &[u64]) -> f64 {
    match dtype {
        DataType::Float64 => words.iter().map(|&w| f64::from_bits(w)).sum(),
        DataType::Int64 | DataType::Date => words.iter().map(|&w| w as i64 as f64).sum(),
        DataType::Dict => words.iter().map(|&w| w as f64).sum(),
    }
}

pub struct Column {
    pub key: ColumnRef,
    pub def: ColumnDef,
    pub data: RwLock<ColumnData>,
    pub dict: RwLock<Dictionary>,
}

impl fmt::Debug for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Column")
            .field("key", &self.key)
            .field("def", &self.def)
            .finish()
    }
}

impl Column {
    pub fn dtype(&self) -> DataType {
        self.def.dtype
    }

    pub fn encode(&self, v: &Value) -> StorageResult<Cell> {
        let mismatch = || StorageError::TypeMismatch {
            column: self.def.name.clone(),
            expected: self.def.dtype,
        };
        Ok(match (self.def.dtype, v) {
            (DataType::Int64, Value::Int(i)) => i64_cell(*i),
            (DataType::Float64, Value::Float(f)) => f64_cell(*f),
            (DataType::Float64, Value::Int(i)) => f64_cell(*i as f64),
            (DataType::Date, Value::Date(d)) => date_cell(*d),
            (DataType::Dict, Value::Str(s)) => self.dict.write().encode(s) as Cell,
            _ => return Err(mismatch()),
        })
    }

    pub fn decode(&self, c: Cell) -> Value {
        match self.def.dtype {
            DataType::Int64 => Value::Int(cell_i64(c)),
            DataType::Float64 => Value::Float(cell_f64(c)),
            DataType::Date => Value::Date(cell_date(c)),
            DataType::Dict => Value::Str(
                self.dict
                    .read()
                    .decode(c as u32)
                    .unwrap_or_default()
                    .to_string(),
            ),
        }
    }

    fn parse(&self, text: &str) -> StorageResult<Value> {
        let err = || StorageError::Parse {
            text: text.to_string(),
            dtype: self.def.dtype,
        };
        Ok(match self.def.dtype {
            DataType::Int64 => Value::Int(text.trim().parse().map_err(|_| err())?),
            DataType::Float64 => Value::Float(text.trim().parse().map_err(|_| err())?),
            DataType::Date => Value::Date(parse_date(text.trim()).ok_or_else(err)?),
            DataType::Dict => Value::Str(text.to_string()),
        })
    }
}

#[derive(Debug)]
pub struct Table {
    pub id: TableId,
    pub schema: Schema,
    pub columns: Vec<Arc<Column>>,
    capacity: usize,
    rows: AtomicU64,
}

impl Table {
    pub fn name(&self) -> &str {
        &self.schema.name
    }

    pub fn rows(&self) -> usize {
        self.rows.load(Ordering::Acquire) as usize
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn column(&self, name: &str) -> StorageResult<&Arc<Column>> {
        self.schema
            .position(name)
            .map(|i| &self.columns[i])
            .ok_or_else(|| StorageError::UnknownColumn(format!("{}.{}", self.schema.name, name)))
    }

    pub fn column_ref(&self, name: &str) -> StorageResult<ColumnRef> {
        Ok(self.column(name)?.key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DbOptions {
    pub page_size: usize,
    /// Snapshot strategy the column segments are laid out for.
    pub backend: StrategyKind,
}

impl Default for DbOptions {
    fn default() -> Self {
        DbOptions {
            page_size: DEFAULT_PAGE_SIZE,
            backend: StrategyKind::VmSnapshot,
        }
    }
}

#[derive(Debug, Default)]
pub struct Database {
    options: DbOptions,
    tables: Vec<Arc<Table>>,
}

impl Database {
    pub fn new(options: DbOptions) -> Self {
        Database {
            options,
            tables: Vec::new(),
        }
    }

    pub fn options(&self) -> DbOptions {
        self.options
    }

    pub fn create_table(&mut self, schema: Schema, capacity: usize) -> StorageResult<Arc<Table>> {
        if self.table(&schema.name).is_ok() {
            return Err(StorageError::DuplicateTable(schema.name));
        }
        let id = TableId(self.tables.len() as u16);
        let mut columns = Vec::with_capacity(schema.columns.len());
        for (i, def) in schema.columns.iter().enumerate() {
            let key = ColumnRef::new(id, i);
            let data = ColumnData::new(
                key,
                def.dtype,
                capacity,
                self.options.backend,
                self.options.page_size,
            )?;
            columns.push(Arc::new(Column {
                key,
                def: def.clone(),
                data: RwLock::new(data),
                dict: RwLock::new(Dictionary::default()),
            }));
        }
        let table = Arc::new(Table {
            id,
            schema,
            columns,
            capacity,
            rows: AtomicU64::new(0),
        });
        self.tables.push(Arc::clone(&table));
        Ok(table)
    }

    pub fn tables(&self) -> &[Arc<Table>] {
        &self.tables
    }

    pub fn table(&self, name: &str) -> StorageResult<&Arc<Table>> {
        self.tables
            .iter()
            .find(|t| t.schema.name == name)
            .ok_or_else(|| StorageError::UnknownTable(name.to_string()))
    }

    pub fn table_by_id(&self, id: TableId) -> &Arc<Table> {
        &self.tables[id.0 as usize]
    }

    pub fn column(&self, key: ColumnRef) -> &Arc<Column> {
        &self.tables[key.table.0 as usize].columns[key.column as usize]
    }

    /// Looks up `table.column`.
    pub fn resolve(&self, table: &str, column: &str) -> StorageResult<ColumnRef> {
        self.table(table)?.column_ref(column)
    }

    /// Appends rows given row by row.
    pub fn bulk_append(&self, table: &str, rows: &[Vec<Value>]) -> StorageResult<()> {
        let t = self.table(table)?;
        let mut cols: Vec<Vec<Cell>> = vec![Vec::with_capacity(rows.len()); t.columns.len()];
        for row in rows {
            if row.len() != t.columns.len() {
                return Err(StorageError::UnknownColumn(format!(
                    "{} expects {} values, got {}",
                    table,
                    t.columns.len(),
                    row.len()
                )));
            }
            for (i, v) in row.iter().enumerate() {
                cols[i].push(t.columns[i].encode(v)?);
            }
        }
        self.append_encoded(table, &cols)
    }

    /// Appends rows given as one vector of encoded cells per column.
    pub fn append_encoded(&self, table: &str, columns: &[Vec<Cell>]) -> StorageResult<()> {
        let t = self.table(table)?;
        let n = columns.first().map_or(0, Vec::len);
        if columns.len() != t.columns.len() || columns.iter().any(|c| c.len() != n) {
            return Err(StorageError::UnknownColumn(format!(
                "{table}: ragged column input"
            )));
        }
        if n == 0 {
            return Ok(());
        }
        if t.rows() + n > t.capacity {
            return Err(StorageError::Capacity {
                table: table.to_string(),
                capacity: t.capacity,
                requested: t.rows() + n,
            });
        }
        for (col, cells) in t.columns.iter().zip(columns) {
            col.data.write().append(cells, table)?;
        }
        t.rows.fetch_add(n as u64, Ordering::AcqRel);
        Ok(())
    }

    /// Loads a CSV file with a header row naming the columns.
    pub fn load_csv(&self, table: &str, path: &Path) -> StorageResult<usize> {
        let t = self.table(table)?;
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let order: Vec<usize> = headers
            .iter()
            .map(|h| {
                t.schema
                    .position(h)
                    .ok_or_else(|| StorageError::UnknownColumn(h.to_string()))
            })
            .collect::<StorageResult<_>>()?;
        let mut cols: Vec<Vec<Cell>> = vec![Vec::new(); t.columns.len()];
        for record in reader.records() {
            let record = record?;
            for (field, &i) in record.iter().zip(&order) {
                let col = &t.columns[i];
                cols[i].push(col.encode(&col.parse(field)?)?);
            }
        }
        let n = cols.first().map_or(0, Vec::len);
        self.append_encoded(table, &cols)?;
        Ok(n)
    }

    /// Writes the in-place cells of `table` as CSV.
    pub fn export_csv(&self, table: &str, path: &Path) -> StorageResult<()> {
        let t = self.table(table)?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(t.schema.columns.iter().map(|c| c.name.as_str()))?;
        let guards: Vec<_> = t.columns.iter().map(|c| c.data.read()).collect();
        for row in 0..t.rows() {
            let mut record = Vec::with_capacity(t.columns.len());
            for (col, data) in t.columns.iter().zip(&guards) {
                record.push(col.decode(data.cell(row)?).to_string());
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// SHA-256 over the in-place cells of every table (and the dictionaries),
    /// hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tables {
            h.update(t.schema.name.as_bytes());
            for col in &t.columns {
                let data = col.data.read();
                let mut buf = vec![0u64; BLOCK_ROWS];
                let mut row = 0;
                while row < data.rows() {
                    let n = BLOCK_ROWS.min(data.rows() - row);
                    data.copy_cells(&data.segment, row, &mut buf[..n]);
                    h.update(bytemuck::cast_slice(&buf[..n]));
                    row += n;
                }
                for v in col.dict.read().values() {
                    h.update(v.as_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Modeled cost of duplicating the whole process: every column space
    /// plus the timestamp arrays and chain nodes held outside them.
    pub fn fork_cost(&self) -> ForkCost {
        let mut extra = 0u64;
        let guards: Vec<_> = self
            .tables
            .iter()
            .flat_map(|t| t.columns.iter())
            .map(|c| c.data.read())
            .collect();
        for d in &guards {
            extra += std::mem::size_of_val(d.timestamps()) as u64;
            extra += (d.live_chain_nodes() * std::mem::size_of::<ChainNode>()) as u64;
        }
        fork_cost(
            guards.iter().map(|d| d.space()),
            extra,
            self.options.page_size as u64,
        )
    }

    /// Chain nodes reachable across all columns.
    pub fn live_chain_nodes(&self) -> usize {
        self.tables
            .iter()
            .flat_map(|t| t.columns.iter())
            .map(|c| c.data.read().live_chain_nodes())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1_db(backend: StrategyKind) -> (Database, Arc<Column>) {
        let mut db = Database::new(DbOptions {
            backend,
            ..Default::default()
        });
        db.create_table(
            Schema::new("t", vec![ColumnDef::new("c", DataType::Int64)]),
            6,
        )
        .unwrap();
        db.bulk_append("t", &vec![vec![Value::Int(0)]; 6]).unwrap();
        let col = Arc::clone(&db.table("t").unwrap().columns[0]);
        (db, col)
    }

    fn cells(col: &Column) -> Vec<i64> {
        let d = col.data.read();
        (0..d.rows()).map(|r| d.cell(r).unwrap() as i64).collect()
    }

    #[test]
    fn bulk_load_six_zeros() {
        let (_, col) = fig1_db(StrategyKind::VmSnapshot);
        assert_eq!(cells(&col), vec![0; 6]);
        assert!(col.data.read().timestamps().iter().all(|&t| t == 0));
    }

    #[test]
    fn empty_and_oversized_appends() {
        let (db, _) = fig1_db(StrategyKind::VmSnapshot);
        db.bulk_append("t", &[]).unwrap();
        assert!(matches!(
            db.bulk_append("t", &[vec![Value::Int(1)]]),
            Err(StorageError::Capacity { .. })
        ));
    }

    #[test]
    fn install_moves_old_value_to_chain() {
        let (_, col) = fig1_db(StrategyKind::VmSnapshot);
        let mut d = col.data.write();
        d.install(5, 1, 2).unwrap();
        d.install(1, 2, 2).unwrap();
        drop(d);
        assert_eq!(cells(&col), vec![0, 2, 0, 0, 0, 1]);
        let d = col.data.read();
        for row in [1, 5] {
            let chain: Vec<_> = d.chains().chain(row).copied().collect();
            assert_eq!(
                chain,
                vec![ChainNode {
                    value: 0,
                    commit_ts: 0
                }]
            );
        }
    }

    #[test]
    fn two_installs_build_a_two_node_chain() {
        let (_, col) = fig1_db(StrategyKind::VmSnapshot);
        let mut d = col.data.write();
        d.install(0, 7, 2).unwrap();
        d.install(0, 8, 3).unwrap();
        let chain: Vec<_> = d
            .chains()
            .chain(0)
            .map(|n| (n.value, n.commit_ts))
            .collect();
        assert_eq!(chain, vec![(7, 2), (0, 0)]);
        assert!(matches!(
            d.install(0, 9, 3),
            Err(StorageError::OrderingViolation { .. })
        ));
    }

    #[test]
    fn visibility_picks_newest_not_after_begin() {
        let (_, col) = fig1_db(StrategyKind::VmSnapshot);
        let mut d = col.data.write();
        assert_eq!(d.read_visible(2, 99).unwrap(), 0);
        d.install(3, 1, 10).unwrap();
        assert_eq!(d.read_visible(3, 5).unwrap(), 0);
        assert_eq!(d.read_visible(3, 10).unwrap(), 1);
    }

    #[test]
    fn marker_guided_fill_matches_per_row_reads() {
        let mut db = Database::default();
        db.create_table(
            Schema::new("t", vec![ColumnDef::new("c", DataType::Int64)]),
            2048,
        )
        .unwrap();
        let vals: Vec<Cell> = (0..2048).collect();
        db.append_encoded("t", &[vals]).unwrap();
        let col = Arc::clone(&db.table("t").unwrap().columns[0]);
        let mut d = col.data.write();
        d.install(100, 5000, 3).unwrap();
        d.install(1500, 6000, 4).unwrap();
        let mut out = vec![0; 2048];
        let mut stats = ScanStats::default();
        d.fill_visible(0, &mut out, 3, &mut stats).unwrap();
        assert_eq!(stats.visibility_checks, 2);
        assert_eq!(stats.chain_traversals, 1);
        for (row, v) in out.iter().enumerate() {
            assert_eq!(*v, d.read_visible(row, 3).unwrap());
        }
        let mut stats = ScanStats::default();
        let sum = d.sum_visible(0, 2048, 3, &mut stats).unwrap();
        assert_eq!(sum, out.iter().map(|&c| c as f64).sum::<f64>());
        assert_eq!(d.markers().checked_rows(), 2);
    }

    #[test]
    fn frozen_column_is_isolated_from_later_installs() {
        for backend in StrategyKind::ALL {
            let (_, col) = fig1_db(backend);
            let mut d = col.data.write();
            d.install(5, 1, 2).unwrap();
            d.install(1, 2, 2).unwrap();
            let frozen = d.snapshot(1, 2).unwrap();
            d.install(3, 4, 3).unwrap();
            d.install(1, 5, 3).unwrap();
            assert_eq!(d.sum_frozen(&frozen, 0, 6), 3.0, "{backend}");
            let mut stats = ScanStats::default();
            assert_eq!(d.sum_visible(0, 6, 3, &mut stats).unwrap(), 10.0);
            // older readers still reach handed-over versions
            assert_eq!(d.read_visible(1, 0).unwrap(), 0);
            d.space().check_invariants().unwrap();
        }
    }

    #[test]
    fn late_snapshot_rolls_back_newer_commits() {
        let (_, col) = fig1_db(StrategyKind::VmSnapshot);
        let mut d = col.data.write();
        d.install(0, 1, 2).unwrap();
        d.install(0, 9, 5).unwrap();
        let frozen = d.snapshot(1, 3).unwrap();
        assert_eq!(frozen.rows_patched, 1);
        let mut out = vec![0; 6];
        d.fill_frozen(&frozen, 0, &mut out);
        assert_eq!(out, vec![1, 0, 0, 0, 0, 0]);
        assert_eq!(frozen.ts[0], 2);
    }

    #[test]
    fn untouched_column_snapshots_without_copying() {
        let (_, col) = fig1_db(StrategyKind::VmSnapshot);
        let frozen = col.data.write().snapshot(1, 0).unwrap();
        assert_eq!(frozen.cost.bytes_copied_at_create, 0);
        assert_eq!(frozen.cost.invocations_at_create, 1);
    }

    #[test]
    fn back_to_back_snapshots_are_identical() {
        let (_, col) = fig1_db(StrategyKind::Rewired);
        let mut d = col.data.write();
        d.install(2, 42, 1).unwrap();
        let a = d.snapshot(1, 1).unwrap();
        let b = d.snapshot(2, 1).unwrap();
        let (mut x, mut y) = (vec![0; 6], vec![0; 6]);
        d.fill_frozen(&a, 0, &mut x);
        d.fill_frozen(&b, 0, &mut y);
        assert_eq!(x, y);
    }

    #[test]
    fn releasing_frozen_drops_its_chains() {
        let (_, col) = fig1_db(StrategyKind::VmSnapshot);
        let mut d = col.data.write();
        d.install(0, 1, 1).unwrap();
        d.install(0, 2, 2).unwrap();
        let frozen = d.snapshot(1, 2).unwrap();
        assert_eq!(d.live_chain_nodes(), 2);
        d.release_frozen(&frozen).unwrap();
        drop(frozen);
        assert_eq!(d.live_chain_nodes(), 0);
        d.space().check_invariants().unwrap();
    }

    #[test]
    fn gc_keeps_the_visible_floor() {
        let (_, col) = fig1_db(StrategyKind::VmSnapshot);
        let mut d = col.data.write();
        d.install(0, 1, 5).unwrap();
        d.install(0, 2, 9).unwrap();
        // in place @9, chain [5, 0]
        assert_eq!(d.gc(0), 0);
        assert_eq!(d.gc(6), 1);
        let chain: Vec<_> = d.chains().chain(0).map(|n| n.commit_ts).collect();
        assert_eq!(chain, vec![5]);
        assert_eq!(d.gc(9), 1);
        assert_eq!(d.chains().node_count(), 0);
    }

    #[test]
    fn dictionary_round_trip() {
        let mut dict = Dictionary::default();
        let a = dict.encode("AIR");
        let b = dict.encode("MAIL");
        assert_eq!((a, b, dict.encode("AIR")), (0, 1, 0));
        assert_eq!(dict.decode(b), Some("MAIL"));
    }

    #[test]
    fn dates() {
        assert_eq!(date_to_days(1992, 1, 1), Some(8035));
        assert_eq!(format_date(10561), "1998-12-01");
        assert_eq!(parse_date("1970-01-02"), Some(1));
    }
}
