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

//! Data generator and transaction mix.
//!
//! Three tables in TPC-H row ratios (LINEITEM : ORDERS : PART = 30 : 7.5 : 1)
//! with TPC-H-like value domains, nine small OLTP templates and seven OLAP
//! templates. Everything is driven by seeded ChaCha8 streams, so a fixed
//! `(sf, seed)` gives byte-identical tables and script sequences.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{CommitOutcome, Engine, EngineResult, Transaction};
use crate::predicate::Predicate;
use crate::query::PlanSpec;
use crate::storage::{
    cell_as_f64, cell_date, date_cell, date_to_days, f64_cell, i64_cell, Cell, ColumnDef,
    ColumnRef, DataType, Database, DbOptions, Schema, StorageError, TableId,
};
use crate::txn::TxnKind;

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("scale factor must be positive, got {0}")]
    InvalidScale(f64),
    #[error("unknown template '{0}'")]
    UnknownTemplate(String),
    #[error("empty template mix")]
    EmptyMix,
    #[error(transparent)]
    Storage(#[from] StorageError),
}

pub type WorkloadResult<T> = Result<T, WorkloadError>;

pub const LINEITEM: &str = "lineitem";
pub const ORDERS: &str = "orders";
pub const PART: &str = "part";

pub const PRIORITIES: [&str; 5] = ["1-URGENT", "2-HIGH", "3-MEDIUM", "4-NOT SPECIFIED", "5-LOW"];

/// Lines per order; fixes the LINEITEM:ORDERS ratio at 4.
const LINES_PER_ORDER: usize = 4;

fn days(y: i32, m: u32, d: u32) -> i32 {
    date_to_days(y, m, d).expect("valid date")
}

pub fn start_date() -> i32 {
    days(1992, 1, 1)
}

pub fn end_date() -> i32 {
    days(1998, 12, 31)
}

/// Orders up to here have shipped and may be returned.
pub fn current_date() -> i32 {
    days(1995, 6, 17)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub sf: f64,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(sf: f64, seed: u64) -> Self {
        GenConfig { sf, seed }
    }

    /// `(lineitem, orders, part)` row counts.
    pub fn row_counts(&self) -> WorkloadResult<(usize, usize, usize)> {
        // NaN fails this check too.
        if !(self.sf > 0.0) || !self.sf.is_finite() {
            return Err(WorkloadError::InvalidScale(self.sf));
        }
        let orders = ((1_500_000.0 * self.sf).round() as usize).max(1);
        let part = ((200_000.0 * self.sf).round() as usize).max(1);
        Ok((orders * LINES_PER_ORDER, orders, part))
    }
}

pub fn lineitem_schema() -> Schema {
    Schema::new(
        LINEITEM,
        vec![
            ColumnDef::new("l_orderkey", DataType::Int64),
            ColumnDef::new("l_partkey", DataType::Int64),
            ColumnDef::new("l_quantity", DataType::Float64),
            ColumnDef::new("l_extendedprice", DataType::Float64),
            ColumnDef::new("l_discount", DataType::Float64),
            ColumnDef::new("l_returnflag", DataType::Dict),
            ColumnDef::new("l_linestatus", DataType::Dict),
            ColumnDef::new("l_shipdate", DataType::Date),
        ],
    )
}

pub fn orders_schema() -> Schema {
    Schema::new(
        ORDERS,
        vec![
            ColumnDef::new("o_orderkey", DataType::Int64),
            ColumnDef::new("o_orderdate", DataType::Date),
            ColumnDef::new("o_orderpriority", DataType::Dict),
            ColumnDef::new("o_totalprice", DataType::Float64),
        ],
    )
}

pub fn part_schema() -> Schema {
    Schema::new(
        PART,
        vec![
            ColumnDef::new("p_partkey", DataType::Int64),
            ColumnDef::new("p_brand", DataType::Dict),
            ColumnDef::new("p_retailprice", DataType::Float64),
        ],
    )
}

/// TPC-H retail price of a part key.
fn retail_price(partkey: i64) -> f64 {
    (90_000 + (partkey / 10) % 20_001 + 100 * (partkey % 1_000)) as f64 / 100.0
}

fn cents(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn encode(db: &Database, table: &str, column: &str, s: &str) -> WorkloadResult<Cell> {
    Ok(db.table(table)?.column(column)?.dict.write().encode(s) as Cell)
}

/// Generates the three tables into a fresh database.
pub fn generate(config: &GenConfig, options: DbOptions) -> WorkloadResult<Database> {
    let (n_line, n_orders, n_part) = config.row_counts()?;
    let mut db = Database::new(options);
    db.create_table(lineitem_schema(), n_line)?;
    db.create_table(orders_schema(), n_orders)?;
    db.create_table(part_schema(), n_part)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut part: Vec<Vec<_>> = (0..3).map(|_| Vec::with_capacity(n_part)).collect();
    for i in 0..n_part {
        let key = i as i64 + 1;
        let brand = format!("Brand#{}{}", rng.gen_range(1..=5), rng.gen_range(1..=5));
        part[0].push(i64_cell(key));
        part[1].push(encode(&db, PART, "p_brand", &brand)?);
        part[2].push(f64_cell(retail_price(key)));
    }

    let last_order = end_date() - 151;
    let mut orders: Vec<Vec<_>> = (0..4).map(|_| Vec::with_capacity(n_orders)).collect();
    let mut line: Vec<Vec<_>> = (0..8).map(|_| Vec::with_capacity(n_line)).collect();
    let flags: Vec<Cell> = ["R", "A", "N"]
        .iter()
        .map(|f| encode(&db, LINEITEM, "l_returnflag", f))
        .collect::<WorkloadResult<_>>()?;
    let status: Vec<Cell> = ["O", "F"]
        .iter()
        .map(|s| encode(&db, LINEITEM, "l_linestatus", s))
        .collect::<WorkloadResult<_>>()?;
    let (flag_r, flag_a, flag_n) = (flags[0], flags[1], flags[2]);
    for o in 0..n_orders {
        let orderkey = o as i64 + 1;
        let orderdate = rng.gen_range(start_date()..=last_order);
        let priority = PRIORITIES[rng.gen_range(0..PRIORITIES.len())];
        let mut total = 0.0;
        for _ in 0..LINES_PER_ORDER {
            let partkey = rng.gen_range(1..=n_part as i64);
            let quantity = rng.gen_range(1..=50) as f64;
            let price = cents(quantity * retail_price(partkey));
            let discount = rng.gen_range(0..=10) as f64 / 100.0;
            let shipdate = orderdate + rng.gen_range(1..=121);
            let (flag, st) = if shipdate > current_date() {
                (flag_n, status[0])
            } else {
                (if rng.gen_bool(0.5) { flag_r } else { flag_a }, status[1])
            };
            total += price * (1.0 - discount);
            line[0].push(i64_cell(orderkey));
            line[1].push(i64_cell(partkey));
            line[2].push(f64_cell(quantity));
            line[3].push(f64_cell(price));
            line[4].push(f64_cell(discount));
            line[5].push(flag);
            line[6].push(st);
            line[7].push(date_cell(shipdate));
        }
        orders[0].push(i64_cell(orderkey));
        orders[1].push(date_cell(orderdate));
        orders[2].push(encode(&db, ORDERS, "o_orderpriority", priority)?);
        orders[3].push(f64_cell(cents(total)));
    }

    db.append_encoded(LINEITEM, &line)?;
    db.append_encoded(ORDERS, &orders)?;
    db.append_encoded(PART, &part)?;
    Ok(db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OltpTemplate {
    /// Point update of `l_extendedprice` by ±x%.
    L1,
    /// First line with a given `l_returnflag`; update its `l_discount` by ±x%.
    L2,
    /// First line with a given `l_linestatus`; move its `l_shipdate` by ±x days.
    L3,
    /// Read the discount of two lines, update one of them by ±x%.
    L4,
    /// Point update of `o_totalprice` by ±x%.
    O1,
    /// First order with a given `o_orderpriority`; update its `o_totalprice` by ±x%.
    O2,
    /// Read-only point read of one order.
    O3,
    /// Point update of `p_retailprice` by ±x%.
    P1,
    /// First part with a given `p_brand`; update its `p_retailprice` by ±x%.
    P2,
}

impl OltpTemplate {
    pub const ALL: [OltpTemplate; 9] = [
        OltpTemplate::L1,
        OltpTemplate::L2,
        OltpTemplate::L3,
        OltpTemplate::L4,
        OltpTemplate::O1,
        OltpTemplate::O2,
        OltpTemplate::O3,
        OltpTemplate::P1,
        OltpTemplate::P2,
    ];

    pub fn id(self) -> u8 {
        self as u8 + 1
    }

    pub fn name(self) -> &'static str {
        ["L1", "L2", "L3", "L4", "O1", "O2", "O3", "P1", "P2"][self as usize]
    }

    pub fn table(self) -> &'static str {
        match self {
            OltpTemplate::L1 | OltpTemplate::L2 | OltpTemplate::L3 | OltpTemplate::L4 => LINEITEM,
            OltpTemplate::O1 | OltpTemplate::O2 | OltpTemplate::O3 => ORDERS,
            OltpTemplate::P1 | OltpTemplate::P2 => PART,
        }
    }
}

impl fmt::Display for OltpTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OltpTemplate {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OltpTemplate::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| WorkloadError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OlapTemplate {
    Q1,
    Q4,
    Q6,
    Q17,
    ScanLineitem,
    ScanOrders,
    ScanPart,
}

impl OlapTemplate {
    pub const ALL: [OlapTemplate; 7] = [
        OlapTemplate::Q1,
        OlapTemplate::Q4,
        OlapTemplate::Q6,
        OlapTemplate::Q17,
        OlapTemplate::ScanLineitem,
        OlapTemplate::ScanOrders,
        OlapTemplate::ScanPart,
    ];

    pub fn id(self) -> u8 {
        self as u8 + 1
    }

    pub fn name(self) -> &'static str {
        [
            "q1",
            "q4",
            "q6",
            "q17",
            "scan_lineitem",
            "scan_orders",
            "scan_part",
        ][self as usize]
    }

    /// Draws parameters within the TPC-H bounds.
    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> PlanSpec {
        let scan = |table: &str, column: &str| PlanSpec::Scan {
            table: table.to_string(),
            column: column.to_string(),
        };
        match self {
            OlapTemplate::Q1 => PlanSpec::Q1 {
                delta_days: rng.gen_range(60..=120),
            },
            OlapTemplate::Q4 => {
                // First of a month in 1993-01 ..= 1997-10.
                let m = rng.gen_range(0..58);
                PlanSpec::Q4 {
                    year: 1993 + m / 12,
                    month: (m % 12) as u32 + 1,
                }
            }
            OlapTemplate::Q6 => PlanSpec::Q6 {
                year: rng.gen_range(1993..=1997),
                discount: rng.gen_range(2..=9),
                quantity: rng.gen_range(24..=25),
            },
            OlapTemplate::Q17 => PlanSpec::Q17 {
                brand: format!("Brand#{}{}", rng.gen_range(1..=5), rng.gen_range(1..=5)),
            },
            OlapTemplate::ScanLineitem => scan(LINEITEM, "l_extendedprice"),
            OlapTemplate::ScanOrders => scan(ORDERS, "o_totalprice"),
            OlapTemplate::ScanPart => scan(PART, "p_retailprice"),
        }
    }
}

impl fmt::Display for OlapTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OlapTemplate {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OlapTemplate::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| WorkloadError::UnknownTemplate(s.to_string()))
    }
}

/// Which row a step addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Row(usize),
    /// The row found by the `FindFirst` step with this binding slot.
    Bound(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Change {
    /// Multiply by `1 + p/100`.
    Percent(i32),
    /// Add days to a date.
    Days(i32),
}

impl Change {
    pub fn apply(self, dtype: DataType, cell: Cell) -> Cell {
        match self {
            Change::Percent(p) => f64_cell(cell_as_f64(dtype, cell) * (1.0 + p as f64 / 100.0)),
            Change::Days(d) => date_cell(cell_date(cell) + d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    /// Logged point read.
    Read { column: ColumnRef, row: usize },
    /// Scans from `start`, wrapping, for the first row whose `column` holds
    /// `code`, and records the equality predicate.
    FindFirst {
        column: ColumnRef,
        code: u32,
        start: usize,
        bind: usize,
    },
    /// Reads the current value and writes it back changed.
    Update {
        column: ColumnRef,
        target: Target,
        change: Change,
    },
}

/// One concrete OLTP transaction: begin, the steps, commit.
#[derive(Debug, Clone, PartialEq)]
pub struct OltpScript {
    pub template: OltpTemplate,
    pub steps: Vec<Step>,
}

impl OltpScript {
    pub fn is_read_only(&self) -> bool {
        !self.steps.iter().any(|s| matches!(s, Step::Update { .. }))
    }

    /// Runs the steps inside `tx`. Does not commit.
    pub fn execute(&self, tx: &mut Transaction<'_>) -> EngineResult<()> {
        let mut bound: Vec<Option<usize>> = Vec::new();
        for step in &self.steps {
            match *step {
                Step::Read { column, row } => {
                    tx.read(column, row)?;
                }
                Step::FindFirst {
                    column,
                    code,
                    start,
                    bind,
                } => {
                    tx.record_predicate(Predicate::code(column, code));
                    let rows = tx.rows(column);
                    let mut found = None;
                    for i in 0..rows {
                        let row = (start + i) % rows;
                        if tx.read_unlogged(column, row)? == code as Cell {
                            found = Some(row);
                            break;
                        }
                    }
                    if bound.len() <= bind {
                        bound.resize(bind + 1, None);
                    }
                    bound[bind] = found;
                }
                Step::Update {
                    column,
                    target,
                    change,
                } => {
                    let row = match target {
                        Target::Row(r) => Some(r),
                        Target::Bound(b) => bound.get(b).copied().flatten(),
                    };
                    // No match: nothing to update.
                    let Some(row) = row else { continue };
                    let dtype = tx.engine().db().column(column).dtype();
                    let old = tx.read(column, row)?;
                    tx.write(column, row, change.apply(dtype, old))?;
                }
            }
        }
        Ok(())
    }

    /// Begins an OLTP transaction, runs the script and commits.
    pub fn run(&self, engine: &Engine) -> EngineResult<CommitOutcome> {
        let mut tx = engine.begin(TxnKind::Oltp);
        self.execute(&mut tx)?;
        tx.commit()
    }
}

/// Column handles and domain sizes the draws need.
#[derive(Debug, Clone)]
pub struct Workload {
    lineitem_rows: usize,
    orders_rows: usize,
    part_rows: usize,
    cols: Cols,
    dict_len: [u32; 4],
    oltp: Vec<OltpTemplate>,
    olap: Vec<OlapTemplate>,
}

#[derive(Debug, Clone, Copy)]
struct Cols {
    l_extendedprice: ColumnRef,
    l_discount: ColumnRef,
    l_returnflag: ColumnRef,
    l_linestatus: ColumnRef,
    l_shipdate: ColumnRef,
    o_orderdate: ColumnRef,
    o_orderpriority: ColumnRef,
    o_totalprice: ColumnRef,
    p_brand: ColumnRef,
    p_retailprice: ColumnRef,
}

impl Workload {
    /// Binds to the generated tables with the full template mix.
    pub fn new(db: &Database) -> WorkloadResult<Self> {
        let r = |t: &str, c: &str| db.resolve(t, c);
        let cols = Cols {
            l_extendedprice: r(LINEITEM, "l_extendedprice")?,
            l_discount: r(LINEITEM, "l_discount")?,
            l_returnflag: r(LINEITEM, "l_returnflag")?,
            l_linestatus: r(LINEITEM, "l_linestatus")?,
            l_shipdate: r(LINEITEM, "l_shipdate")?,
            o_orderdate: r(ORDERS, "o_orderdate")?,
            o_orderpriority: r(ORDERS, "o_orderpriority")?,
            o_totalprice: r(ORDERS, "o_totalprice")?,
            p_brand: r(PART, "p_brand")?,
            p_retailprice: r(PART, "p_retailprice")?,
        };
        let dict = |c: ColumnRef| db.column(c).dict.read().len() as u32;
        Ok(Workload {
            lineitem_rows: db.table(LINEITEM)?.rows(),
            orders_rows: db.table(ORDERS)?.rows(),
            part_rows: db.table(PART)?.rows(),
            dict_len: [
                dict(cols.l_returnflag),
                dict(cols.l_linestatus),
                dict(cols.o_orderpriority),
                dict(cols.p_brand),
            ],
            cols,
            oltp: OltpTemplate::ALL.to_vec(),
            olap: OlapTemplate::ALL.to_vec(),
        })
    }

    pub fn with_oltp_templates(mut self, templates: &[OltpTemplate]) -> WorkloadResult<Self> {
        if templates.is_empty() {
            return Err(WorkloadError::EmptyMix);
        }
        self.oltp = templates.to_vec();
        Ok(self)
    }

    pub fn with_olap_templates(mut self, templates: &[OlapTemplate]) -> WorkloadResult<Self> {
        if templates.is_empty() {
            return Err(WorkloadError::EmptyMix);
        }
        self.olap = templates.to_vec();
        Ok(self)
    }

    pub fn oltp_templates(&self) -> &[OltpTemplate] {
        &self.oltp
    }

    pub fn olap_templates(&self) -> &[OlapTemplate] {
        &self.olap
    }

    pub fn table_rows(&self, table: TableId) -> usize {
        [self.lineitem_rows, self.orders_rows, self.part_rows][table.0 as usize]
    }

    pub fn next_oltp<R: Rng + ?Sized>(&self, rng: &mut R) -> OltpScript {
        let t = *self.oltp.choose(rng).expect("non-empty mix");
        self.draw_oltp(t, rng)
    }

    pub fn next_olap<R: Rng + ?Sized>(&self, rng: &mut R) -> (OlapTemplate, PlanSpec) {
        let t = *self.olap.choose(rng).expect("non-empty mix");
        (t, t.draw(rng))
    }

    pub fn draw_oltp<R: Rng + ?Sized>(&self, template: OltpTemplate, rng: &mut R) -> OltpScript {
        let c = &self.cols;
        let pct = |rng: &mut R| {
            let x = rng.gen_range(1..=10);
            Change::Percent(if rng.gen_bool(0.5) { x } else { -x })
        };
        let line = |rng: &mut R| rng.gen_range(0..self.lineitem_rows);
        let order = |rng: &mut R| rng.gen_range(0..self.orders_rows);
        let part = |rng: &mut R| rng.gen_range(0..self.part_rows);
        let find = |column, dict: u32, start, rng: &mut R| Step::FindFirst {
            column,
            code: rng.gen_range(0..dict.max(1)),
            start,
            bind: 0,
        };
        let update = |column, target, change| Step::Update {
            column,
            target,
            change,
        };
        let steps = match template {
            OltpTemplate::L1 => vec![update(c.l_extendedprice, Target::Row(line(rng)), pct(rng))],
            OltpTemplate::L2 => {
                let start = line(rng);
                vec![
                    find(c.l_returnflag, self.dict_len[0], start, rng),
                    update(c.l_discount, Target::Bound(0), pct(rng)),
                ]
            }
            OltpTemplate::L3 => {
                let start = line(rng);
                let f = find(c.l_linestatus, self.dict_len[1], start, rng);
                let x = rng.gen_range(1..=10);
                let d = if rng.gen_bool(0.5) { x } else { -x };
                vec![f, update(c.l_shipdate, Target::Bound(0), Change::Days(d))]
            }
            OltpTemplate::L4 => {
                let (a, b) = (line(rng), line(rng));
                let target = if rng.gen_bool(0.5) { a } else { b };
                vec![
                    Step::Read {
                        column: c.l_discount,
                        row: a,
                    },
                    Step::Read {
                        column: c.l_discount,
                        row: b,
                    },
                    update(c.l_discount, Target::Row(target), pct(rng)),
                ]
            }
            OltpTemplate::O1 => vec![update(c.o_totalprice, Target::Row(order(rng)), pct(rng))],
            OltpTemplate::O2 => {
                let start = order(rng);
                vec![
                    find(c.o_orderpriority, self.dict_len[2], start, rng),
                    update(c.o_totalprice, Target::Bound(0), pct(rng)),
                ]
            }
            OltpTemplate::O3 => {
                let row = order(rng);
                [c.o_orderdate, c.o_orderpriority, c.o_totalprice]
                    .into_iter()
                    .map(|column| Step::Read { column, row })
                    .collect()
            }
            OltpTemplate::P1 => vec![update(c.p_retailprice, Target::Row(part(rng)), pct(rng))],
            OltpTemplate::P2 => {
                let start = part(rng);
                vec![
                    find(c.p_brand, self.dict_len[3], start, rng),
                    update(c.p_retailprice, Target::Bound(0), pct(rng)),
                ]
            }
        };
        OltpScript { template, steps }
    }
}

/// Independent draw stream for one worker.
pub fn worker_rng(seed: u64, worker: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker);
    rng
}
