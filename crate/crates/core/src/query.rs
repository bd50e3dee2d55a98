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

//! Analytical plans over the generated tables.
//!
//! A [`PlanSpec`] is the compact text form used in config files, for
//! example `q6 year=1994 discount=0.06 quantity=24`. [`compile`] resolves
//! it against a [`Database`] into a [`QueryPlan`], and [`run_plan`]
//! executes the plan inside a transaction in blocks of [`BLOCK_ROWS`]
//! rows. Whether the cells come from an epoch or from the versioned store
//! is decided by the transaction.

use std::fmt;
use std::str::FromStr;

use rustc_hash::{FxHashMap, FxHashSet};

use crate::engine::{EngineError, Transaction};
use crate::hetero::SnapshotEpoch;
use crate::predicate::Predicate;
use crate::storage::{
    cell_as_f64, cell_i64, date_to_days, Cell, ColumnRef, DataType, Database, ScanStats,
    StorageError, TableId, Timestamp, BLOCK_ROWS,
};
use crate::txn::{Isolation, TxnKind};

#[derive(Debug, thiserror::Error)]
pub enum QueryError {
    #[error("cannot parse plan '{0}'")]
    Parse(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub type QueryResult<T> = Result<T, QueryError>;

/// Last shipping date in the generated data.
pub const MAX_SHIPDATE: (i32, u32, u32) = (1998, 12, 1);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanSpec {
    /// Pricing summary grouped by return flag and line status.
    Q1 {
        delta_days: i32,
    },
    /// Order count per priority in a three-month window.
    Q4 {
        year: i32,
        month: u32,
    },
    /// Revenue of discounted small shipments in one year. The discount is
    /// given in hundredths.
    Q6 {
        year: i32,
        discount: u32,
        quantity: u32,
    },
    /// Small-quantity revenue for one brand, joined with PART.
    Q17 {
        brand: String,
    },
    Scan {
        table: String,
        column: String,
    },
}

impl PlanSpec {
    pub fn name(&self) -> &'static str {
        match self {
            PlanSpec::Q1 { .. } => "q1",
            PlanSpec::Q4 { .. } => "q4",
            PlanSpec::Q6 { .. } => "q6",
            PlanSpec::Q17 { .. } => "q17",
            PlanSpec::Scan { .. } => "scan",
        }
    }
}

impl fmt::Display for PlanSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanSpec::Q1 { delta_days } => write!(f, "q1 delta={delta_days}"),
            PlanSpec::Q4 { year, month } => write!(f, "q4 date={year:04}-{month:02}"),
            PlanSpec::Q6 {
                year,
                discount,
                quantity,
            } => write!(
                f,
                "q6 year={year} discount={}.{:02} quantity={quantity}",
                discount / 100,
                discount % 100
            ),
            PlanSpec::Q17 { brand } => write!(f, "q17 brand={brand}"),
            PlanSpec::Scan { table, column } => write!(f, "scan table={table} column={column}"),
        }
    }
}

impl FromStr for PlanSpec {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || QueryError::Parse(s.to_string());
        let mut words = s.split_whitespace();
        let head = words.next().ok_or_else(bad)?;
        let mut args = FxHashMap::default();
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(bad)?;
            if args.insert(k, v).is_some() {
                return Err(bad());
            }
        }
        let mut take = |key: &str| args.remove(key).ok_or_else(bad);
        let spec = match head.to_ascii_lowercase().as_str() {
            "q1" => PlanSpec::Q1 {
                delta_days: take("delta")?.parse().map_err(|_| bad())?,
            },
            "q4" => {
                let (y, m) = take("date")?.split_once('-').ok_or_else(bad)?;
                let year = y.parse().map_err(|_| bad())?;
                let month = m.parse().map_err(|_| bad())?;
                if !(1..=12).contains(&month) {
                    return Err(bad());
                }
                PlanSpec::Q4 { year, month }
            }
            "q6" => {
                let year = take("year")?.parse().map_err(|_| bad())?;
                let d: f64 = take("discount")?.parse().map_err(|_| bad())?;
                let quantity = take("quantity")?.parse().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&d) {
                    return Err(bad());
                }
                PlanSpec::Q6 {
                    year,
                    discount: (d * 100.0).round() as u32,
                    quantity,
                }
            }
            "q17" => PlanSpec::Q17 {
                brand: take("brand")?.to_string(),
            },
            "scan" => PlanSpec::Scan {
                table: take("table")?.to_string(),
                column: take("column")?.to_string(),
            },
            _ => return Err(bad()),
        };
        if !args.is_empty() {
            return Err(bad());
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanKind {
    FullScanSum,
    FilterAgg,
    GroupAgg,
    JoinAgg,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregate {
    Count,
    Sum(ColumnRef),
    /// `sum(a * b)`
    SumProduct(ColumnRef, ColumnRef),
    /// `sum(price * (1 - discount))`
    SumDiscounted(ColumnRef, ColumnRef),
}

impl Aggregate {
    fn inputs(&self) -> Vec<ColumnRef> {
        match *self {
            Aggregate::Count => vec![],
            Aggregate::Sum(c) => vec![c],
            Aggregate::SumProduct(a, b) | Aggregate::SumDiscounted(a, b) => vec![a, b],
        }
    }
}

/// Semi-join with a filtered build side, then a threshold on the probe
/// side relative to the per-key average of `measure`.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinSpec {
    pub build_table: TableId,
    pub build_key: ColumnRef,
    pub build_predicates: Vec<Predicate>,
    pub probe_key: ColumnRef,
    pub measure: ColumnRef,
    pub value: ColumnRef,
    /// Probe rows qualify when `measure < fraction * avg(measure)`.
    pub fraction: f64,
    /// Divides the final sum.
    pub divisor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryPlan {
    pub spec: PlanSpec,
    pub kind: PlanKind,
    pub table: TableId,
    pub predicates: Vec<Predicate>,
    pub aggregates: Vec<Aggregate>,
    /// At most two columns.
    pub group_by: Vec<ColumnRef>,
    pub join: Option<JoinSpec>,
    pub output: Vec<&'static str>,
}

impl QueryPlan {
    /// Every column the plan reads, sorted. OLAP transactions declare these
    /// at begin.
    pub fn columns(&self) -> Vec<ColumnRef> {
        let mut cols: Vec<ColumnRef> = self.predicates.iter().map(|p| p.column).collect();
        cols.extend(self.aggregates.iter().flat_map(|a| a.inputs()));
        cols.extend(self.group_by.iter().copied());
        if let Some(j) = &self.join {
            cols.extend([j.build_key, j.probe_key, j.measure, j.value]);
            cols.extend(j.build_predicates.iter().map(|p| p.column));
        }
        cols.sort();
        cols.dedup();
        cols
    }

    /// Tables the plan reads.
    pub fn tables(&self) -> Vec<TableId> {
        let mut t: Vec<TableId> = self.columns().iter().map(|c| c.table).collect();
        t.dedup();
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub group: Vec<Cell>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryOutput {
    /// Sorted by group.
    pub rows: Vec<ResultRow>,
}

impl QueryOutput {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Equal groups and values within a relative tolerance.
    pub fn approx_eq(&self, other: &QueryOutput, rel: f64) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.group == b.group
                    && a.values.len() == b.values.len()
                    && a.values
                        .iter()
                        .zip(&b.values)
                        .all(|(x, y)| (x - y).abs() <= rel * x.abs().max(y.abs()).max(1.0))
            })
    }
}

fn expect_type(db: &Database, c: ColumnRef, want: &[DataType]) -> QueryResult<ColumnRef> {
    let col = db.column(c);
    if want.contains(&col.dtype()) {
        Ok(c)
    } else {
        Err(StorageError::TypeMismatch {
            column: col.def.name.clone(),
            expected: col.dtype(),
        }
        .into())
    }
}

fn numeric(db: &Database, table: &str, column: &str) -> QueryResult<ColumnRef> {
    let c = db.resolve(table, column)?;
    expect_type(db, c, &[DataType::Int64, DataType::Float64])
}

fn typed(db: &Database, table: &str, column: &str, t: DataType) -> QueryResult<ColumnRef> {
    let c = db.resolve(table, column)?;
    expect_type(db, c, &[t])
}

fn day(y: i32, m: u32, d: u32) -> QueryResult<i32> {
    date_to_days(y, m, d).ok_or_else(|| QueryError::Parse(format!("{y}-{m}-{d}")))
}

/// Resolves a spec against the schema of `db`.
pub fn compile(spec: &PlanSpec, db: &Database) -> QueryResult<QueryPlan> {
    let li = "lineitem";
    let base = |kind, table| QueryPlan {
        spec: spec.clone(),
        kind,
        table,
        predicates: vec![],
        aggregates: vec![],
        group_by: vec![],
        join: None,
        output: vec![],
    };
    let plan = match spec {
        PlanSpec::Q1 { delta_days } => {
            let ship = typed(db, li, "l_shipdate", DataType::Date)?;
            let qty = numeric(db, li, "l_quantity")?;
            let price = numeric(db, li, "l_extendedprice")?;
            let disc = numeric(db, li, "l_discount")?;
            let (y, m, d) = MAX_SHIPDATE;
            let cutoff = day(y, m, d)? - delta_days;
            QueryPlan {
                predicates: vec![Predicate::date_range(ship, i32::MIN, cutoff)],
                aggregates: vec![
                    Aggregate::Sum(qty),
                    Aggregate::Sum(price),
                    Aggregate::SumDiscounted(price, disc),
                    Aggregate::Count,
                ],
                group_by: vec![
                    typed(db, li, "l_returnflag", DataType::Dict)?,
                    typed(db, li, "l_linestatus", DataType::Dict)?,
                ],
                output: vec!["sum_qty", "sum_base_price", "sum_disc_price", "count_order"],
                ..base(PlanKind::GroupAgg, ship.table)
            }
        }
        PlanSpec::Q4 { year, month } => {
            let date = typed(db, "orders", "o_orderdate", DataType::Date)?;
            let lo = day(*year, *month, 1)?;
            let (ny, nm) = if *month > 9 {
                (year + 1, month - 9)
            } else {
                (*year, month + 3)
            };
            let hi = day(ny, nm, 1)? - 1;
            QueryPlan {
                predicates: vec![Predicate::date_range(date, lo, hi)],
                aggregates: vec![Aggregate::Count],
                group_by: vec![typed(db, "orders", "o_orderpriority", DataType::Dict)?],
                output: vec!["order_count"],
                ..base(PlanKind::GroupAgg, date.table)
            }
        }
        PlanSpec::Q6 {
            year,
            discount,
            quantity,
        } => {
            let ship = typed(db, li, "l_shipdate", DataType::Date)?;
            let disc = numeric(db, li, "l_discount")?;
            let qty = numeric(db, li, "l_quantity")?;
            let price = numeric(db, li, "l_extendedprice")?;
            let d = *discount as f64;
            QueryPlan {
                predicates: vec![
                    Predicate::date_range(ship, day(*year, 1, 1)?, day(year + 1, 1, 1)? - 1),
                    Predicate::float_range(disc, (d - 1.0) / 100.0, (d + 1.0) / 100.0),
                    Predicate::float_below(qty, *quantity as f64),
                ],
                aggregates: vec![Aggregate::SumProduct(price, disc)],
                output: vec!["revenue"],
                ..base(PlanKind::FilterAgg, ship.table)
            }
        }
        PlanSpec::Q17 { brand } => {
            let brand_col = typed(db, "part", "p_brand", DataType::Dict)?;
            // An unknown brand selects nothing.
            let code = db.column(brand_col).dict.read().lookup(brand);
            let codes = code.into_iter().collect();
            let probe_key = typed(db, li, "l_partkey", DataType::Int64)?;
            QueryPlan {
                join: Some(JoinSpec {
                    build_table: brand_col.table,
                    build_key: typed(db, "part", "p_partkey", DataType::Int64)?,
                    build_predicates: vec![Predicate::codes(brand_col, codes)],
                    probe_key,
                    measure: numeric(db, li, "l_quantity")?,
                    value: numeric(db, li, "l_extendedprice")?,
                    fraction: 0.2,
                    divisor: 7.0,
                }),
                output: vec!["avg_yearly"],
                ..base(PlanKind::JoinAgg, probe_key.table)
            }
        }
        PlanSpec::Scan { table, column } => {
            let c = numeric(db, table, column)?;
            QueryPlan {
                aggregates: vec![Aggregate::Sum(c)],
                output: vec!["sum"],
                ..base(PlanKind::FullScanSum, c.table)
            }
        }
    };
    Ok(plan)
}

/// Sum over a materialized epoch column in a tight loop, no version checks.
pub fn scan_sum_epoch(db: &Database, epoch: &SnapshotEpoch, column: ColumnRef) -> QueryResult<f64> {
    let frozen = epoch.column(column).ok_or(EngineError::Routing(column))?;
    let rows = frozen.segment.row_count;
    let data = db.column(column).data.read();
    Ok(data.sum_frozen(&frozen, 0, rows))
}

/// Sum of the versions visible at `begin_ts` on the up-to-date store,
/// guided by the sync markers.
pub fn scan_sum_versioned(
    db: &Database,
    column: ColumnRef,
    begin_ts: Timestamp,
    stats: &mut ScanStats,
) -> QueryResult<f64> {
    let col = db.column(column);
    let rows = col.data.read().rows();
    let mut sum = 0.0;
    let mut start = 0;
    while start < rows {
        let end = (start + BLOCK_ROWS * 16).min(rows);
        sum += col.data.read().sum_visible(start, end, begin_ts, stats)?;
        start = end;
    }
    Ok(sum)
}

/// Column buffers for one block.
struct Block {
    slots: FxHashMap<ColumnRef, usize>,
    dtypes: Vec<DataType>,
    cells: Vec<Vec<Cell>>,
}

impl Block {
    fn new(db: &Database, cols: &[ColumnRef]) -> Self {
        let mut slots = FxHashMap::default();
        let mut dtypes = Vec::new();
        for &c in cols {
            if !slots.contains_key(&c) {
                slots.insert(c, dtypes.len());
                dtypes.push(db.column(c).dtype());
            }
        }
        let cells = vec![vec![0; BLOCK_ROWS]; dtypes.len()];
        Block {
            slots,
            dtypes,
            cells,
        }
    }

    fn load(&mut self, tx: &mut Transaction<'_>, start: usize, len: usize) -> QueryResult<()> {
        for (&c, &slot) in &self.slots {
            tx.fill(c, start, &mut self.cells[slot][..len])?;
        }
        Ok(())
    }

    fn slot(&self, c: ColumnRef) -> usize {
        self.slots[&c]
    }

    fn num(&self, slot: usize, row: usize) -> f64 {
        cell_as_f64(self.dtypes[slot], self.cells[slot][row])
    }
}

enum BoundAgg {
    Count,
    Sum(usize),
    SumProduct(usize, usize),
    SumDiscounted(usize, usize),
}

fn bind(block: &Block, aggs: &[Aggregate]) -> Vec<BoundAgg> {
    aggs.iter()
        .map(|a| match *a {
            Aggregate::Count => BoundAgg::Count,
            Aggregate::Sum(c) => BoundAgg::Sum(block.slot(c)),
            Aggregate::SumProduct(a, b) => BoundAgg::SumProduct(block.slot(a), block.slot(b)),
            Aggregate::SumDiscounted(a, b) => BoundAgg::SumDiscounted(block.slot(a), block.slot(b)),
        })
        .collect()
}

fn bind_predicates(block: &Block, preds: &[Predicate]) -> Vec<(usize, Predicate)> {
    preds
        .iter()
        .map(|p| (block.slot(p.column), p.clone()))
        .collect()
}

fn qualifies(block: &Block, preds: &[(usize, Predicate)], row: usize) -> bool {
    preds.iter().all(|(s, p)| p.matches(block.cells[*s][row]))
}

/// Covers everything the plan reads for precision-locking validation. Only
/// serializable OLTP transactions log anything.
fn record_reads(tx: &mut Transaction<'_>, plan: &QueryPlan) {
    if tx.kind() != TxnKind::Oltp || tx.engine().mode().isolation() != Isolation::Serializable {
        return;
    }
    let mut filtered = FxHashSet::default();
    let preds = plan
        .predicates
        .iter()
        .chain(plan.join.iter().flat_map(|j| j.build_predicates.iter()));
    for p in preds {
        filtered.insert(p.column);
        tx.record_predicate(p.clone());
    }
    for c in plan.columns() {
        if !filtered.contains(&c) {
            tx.record_predicate(Predicate::all(c));
        }
    }
}

/// Runs `plan` inside `tx`.
pub fn run_plan(tx: &mut Transaction<'_>, plan: &QueryPlan) -> QueryResult<QueryOutput> {
    record_reads(tx, plan);
    match plan.kind {
        PlanKind::FullScanSum => full_scan(tx, plan),
        PlanKind::FilterAgg | PlanKind::GroupAgg => aggregate(tx, plan),
        PlanKind::JoinAgg => join(tx, plan),
    }
}

fn full_scan(tx: &mut Transaction<'_>, plan: &QueryPlan) -> QueryResult<QueryOutput> {
    let Some(&Aggregate::Sum(c)) = plan.aggregates.first() else {
        return Err(QueryError::Parse(plan.spec.to_string()));
    };
    if tx.rows(c) == 0 {
        return Ok(QueryOutput::default());
    }
    Ok(QueryOutput {
        rows: vec![ResultRow {
            group: vec![],
            values: vec![tx.sum(c)?],
        }],
    })
}

fn aggregate(tx: &mut Transaction<'_>, plan: &QueryPlan) -> QueryResult<QueryOutput> {
    assert!(plan.group_by.len() <= 2, "at most two group columns");
    let db = tx.engine().db();
    let block_cols: Vec<ColumnRef> = plan.columns();
    let mut block = Block::new(db, &block_cols);
    let aggs = bind(&block, &plan.aggregates);
    let preds = bind_predicates(&block, &plan.predicates);
    let groups: Vec<usize> = plan.group_by.iter().map(|&c| block.slot(c)).collect();
    let mut acc: FxHashMap<[Cell; 2], Vec<f64>> = FxHashMap::default();
    let rows = db.table_by_id(plan.table).rows();
    let mut start = 0;
    while start < rows {
        let len = BLOCK_ROWS.min(rows - start);
        block.load(tx, start, len)?;
        for row in 0..len {
            if !qualifies(&block, &preds, row) {
                continue;
            }
            let mut key = [0; 2];
            for (k, &s) in groups.iter().enumerate() {
                key[k] = block.cells[s][row];
            }
            let slot = acc.entry(key).or_insert_with(|| vec![0.0; aggs.len()]);
            for (v, a) in slot.iter_mut().zip(&aggs) {
                *v += match *a {
                    BoundAgg::Count => 1.0,
                    BoundAgg::Sum(s) => block.num(s, row),
                    BoundAgg::SumProduct(a, b) => block.num(a, row) * block.num(b, row),
                    BoundAgg::SumDiscounted(p, d) => block.num(p, row) * (1.0 - block.num(d, row)),
                };
            }
        }
        start += len;
    }
    let mut out: Vec<ResultRow> = acc
        .into_iter()
        .map(|(key, values)| ResultRow {
            group: key[..groups.len()].to_vec(),
            values,
        })
        .collect();
    out.sort_by(|a, b| a.group.cmp(&b.group));
    Ok(QueryOutput { rows: out })
}

fn join(tx: &mut Transaction<'_>, plan: &QueryPlan) -> QueryResult<QueryOutput> {
    let j = plan.join.as_ref().expect("join plan");
    let db = tx.engine().db();

    // Build: keys of the qualifying build rows.
    let mut build_cols = vec![j.build_key];
    build_cols.extend(j.build_predicates.iter().map(|p| p.column));
    let mut block = Block::new(db, &build_cols);
    let preds = bind_predicates(&block, &j.build_predicates);
    let key_slot = block.slot(j.build_key);
    let mut stats: FxHashMap<i64, (f64, u64)> = FxHashMap::default();
    let rows = db.table_by_id(j.build_table).rows();
    let mut start = 0;
    while start < rows {
        let len = BLOCK_ROWS.min(rows - start);
        block.load(tx, start, len)?;
        for row in 0..len {
            if qualifies(&block, &preds, row) {
                stats.insert(cell_i64(block.cells[key_slot][row]), (0.0, 0));
            }
        }
        start += len;
    }
    if stats.is_empty() {
        return Ok(QueryOutput::default());
    }

    // Probe, first pass: average measure per key.
    let mut block = Block::new(db, &[j.probe_key, j.measure, j.value]);
    let (k, m, v) = (
        block.slot(j.probe_key),
        block.slot(j.measure),
        block.slot(j.value),
    );
    let rows = db.table_by_id(plan.table).rows();
    let mut start = 0;
    while start < rows {
        let len = BLOCK_ROWS.min(rows - start);
        block.load(tx, start, len)?;
        for row in 0..len {
            if let Some(e) = stats.get_mut(&cell_i64(block.cells[k][row])) {
                e.0 += block.num(m, row);
                e.1 += 1;
            }
        }
        start += len;
    }

    // Second pass: values below the threshold.
    let mut total = 0.0;
    let mut hits = 0u64;
    let mut start = 0;
    while start < rows {
        let len = BLOCK_ROWS.min(rows - start);
        block.load(tx, start, len)?;
        for row in 0..len {
            if let Some(&(sum, n)) = stats.get(&cell_i64(block.cells[k][row])) {
                if block.num(m, row) < j.fraction * (sum / n as f64) {
                    total += block.num(v, row);
                    hits += 1;
                }
            }
        }
        start += len;
    }
    if hits == 0 {
        return Ok(QueryOutput::default());
    }
    Ok(QueryOutput {
        rows: vec![ResultRow {
            group: vec![],
            values: vec![total / j.divisor],
        }],
    })
}
