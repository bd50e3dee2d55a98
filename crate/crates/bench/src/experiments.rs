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

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use hmvcc::engine::{Engine, EngineConfig, EngineMode};
use hmvcc::snapshot::{SnapshotCost, StrategyKind};
use hmvcc::storage::{
    f64_cell, ColumnDef, ColumnRef, DataType, Database, DbOptions, ScanStats, Schema, BLOCK_ROWS,
};
use hmvcc::txn::TxnKind;
use hmvcc::workload::{worker_rng, LINEITEM};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{BenchConfig, ConfigError, Experiment};
use crate::driver::{draw_jobs, interleave, run_job, run_jobs, setup, Job, RunStats};
use crate::report::RunReport;
use crate::{median, BenchError, BenchResult};

/// Seed offsets so the draw streams of one experiment never overlap.
const WARMUP_STREAM: u64 = 0x5741_524d;
const OLAP_STREAM: u64 = 0x4f4c_4150;
const MAIN_STREAM: u64 = 0x4d41_494e;

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn stats_records(report: &mut RunReport, section: &str, label: &str, s: &RunStats) {
    report.count(section, label, "commits", s.commits);
    report.count(section, label, "read_only_commits", s.read_only_commits);
    for kind in ["write_write", "serializability"] {
        let n = s.aborts.get(kind).copied().unwrap_or(0);
        report.count(section, label, &format!("aborts_{kind}"), n);
    }
    report.count(section, label, "olap_runs", s.olap_runs);
    report.count(
        section,
        label,
        "olap_visibility_checks",
        s.olap_scan.visibility_checks,
    );
    report.count(
        section,
        label,
        "olap_chain_traversals",
        s.olap_scan.chain_traversals,
    );
}

pub fn run(experiment: Experiment, cfg: &BenchConfig) -> BenchResult<RunReport> {
    match experiment {
        Experiment::Latency => bench_latency(cfg),
        Experiment::Throughput => bench_throughput(cfg),
        Experiment::VersionedScan => bench_versioned_scan(cfg),
        Experiment::SnapshotCost => bench_snapshot_cost(cfg),
        Experiment::Scaling => bench_scaling(cfg),
    }
}

/// Runs the experiment once per engine mode. Sections are prefixed with the
/// mode; latency and throughput reports also get homogeneous over
/// heterogeneous ratios.
pub fn run_all_modes(experiment: Experiment, cfg: &BenchConfig) -> BenchResult<RunReport> {
    let mut all = RunReport::new(experiment.name(), cfg);
    let mut parts = Vec::new();
    for mode in EngineMode::ALL {
        let c = BenchConfig {
            mode,
            ..cfg.clone()
        };
        let r = run(experiment, &c)?;
        for rec in &r.records {
            let mut rec = rec.clone();
            rec.section = format!("{mode}/{}", rec.section);
            all.records.push(rec);
        }
        parts.push((mode, r));
    }
    let het = &parts[2].1;
    for (mode, r) in &parts[..2] {
        let ratio_label = format!("{mode}_over_heterogeneous");
        match experiment {
            Experiment::Latency => {
                for t in &cfg.olap_mix {
                    let (Some(a), Some(b)) = (
                        r.get_f64("latency", t.name(), "mean_ms"),
                        het.get_f64("latency", t.name(), "mean_ms"),
                    ) else {
                        continue;
                    };
                    all.timing("ratio", t.name(), &ratio_label, a / b);
                }
            }
            Experiment::Throughput => {
                for section in ["pure", "mixed"] {
                    let (Some(a), Some(b)) = (
                        r.get_f64(section, "all", "txn_per_s"),
                        het.get_f64(section, "all", "txn_per_s"),
                    ) else {
                        continue;
                    };
                    all.timing("ratio", section, &ratio_label, a / b);
                }
            }
            _ => {}
        }
    }
    Ok(all)
}

/// OLAP latency under OLTP load: `threads - 1` workers stream OLTP while one
/// thread fires every OLAP template `olap_count` times.
pub fn bench_latency(cfg: &BenchConfig) -> BenchResult<RunReport> {
    cfg.validate()?;
    if cfg.threads < 2 {
        return Err(ConfigError::Invalid("latency needs at least 2 threads".into()).into());
    }
    let s = setup(cfg)?;
    let mut report = RunReport::new(Experiment::Latency.name(), cfg);
    let warmup = cfg.oltp_count.min(cfg.snapshot_interval as usize * 2);
    run_jobs(
        &s.engine,
        &draw_jobs(&s.workload, cfg.seed ^ WARMUP_STREAM, warmup, 0),
        1,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ OLAP_STREAM);
    let plans: Vec<_> = cfg
        .olap_mix
        .iter()
        .flat_map(|&t| (0..cfg.olap_count).map(move |_| t))
        .map(|t| (t, t.draw(&mut rng)))
        .collect();

    let stats = if cfg.deterministic {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ MAIN_STREAM);
        let scripts = (0..cfg.oltp_count)
            .map(|_| s.workload.next_oltp(&mut rng))
            .collect();
        run_jobs(&s.engine, &interleave(scripts, plans), 1)?
    } else {
        let stop = AtomicBool::new(false);
        let olap_result = std::thread::scope(|scope| {
            let workers: Vec<_> = (0..cfg.threads - 1)
                .map(|i| {
                    let (e, w, stop) = (&s.engine, &s.workload, &stop);
                    scope.spawn(move || -> BenchResult<RunStats> {
                        let mut rng = worker_rng(cfg.seed ^ MAIN_STREAM, i as u64);
                        let mut st = RunStats::default();
                        while !stop.load(Ordering::Relaxed) {
                            run_job(e, &Job::Oltp(w.next_oltp(&mut rng)), &mut st)?;
                        }
                        Ok(st)
                    })
                })
                .collect();
            let mut olap = RunStats::default();
            let res = plans.iter().try_for_each(|(t, spec)| {
                run_job(&s.engine, &Job::Olap(*t, spec.clone()), &mut olap)
            });
            stop.store(true, Ordering::Relaxed);
            let mut total = olap;
            let mut first_err = res.err();
            for h in workers {
                match h.join().expect("worker panicked") {
                    Ok(st) => total.merge(st),
                    Err(e) => first_err = first_err.or(Some(e)),
                }
            }
            match first_err {
                Some(e) => Err(e),
                None => Ok(total),
            }
        });
        olap_result?
    };
    for (t, runs) in &stats.olap_latency {
        let mean = runs.iter().map(|d| ms(*d)).sum::<f64>() / runs.len() as f64;
        report.timing("latency", t.name(), "mean_ms", mean);
        report.count("latency", t.name(), "runs", runs.len());
    }
    stats_records(&mut report, "oltp", "all", &stats);
    s.engine.shutdown();
    Ok(report)
}

/// One throughput run on fresh tables: `oltp_count` OLTP scripts with
/// `olap` OLAP plans interleaved. Returns the run and the final checksum.
pub fn throughput_once(cfg: &BenchConfig, olap: usize) -> BenchResult<(RunStats, String)> {
    cfg.validate()?;
    let s = setup(cfg)?;
    let jobs = draw_jobs(&s.workload, cfg.seed ^ MAIN_STREAM, cfg.oltp_count, olap);
    let stats = run_jobs(&s.engine, &jobs, cfg.workers())?;
    s.engine.shutdown();
    Ok((stats, s.engine.db().checksum()))
}

/// Pure OLTP and mixed throughput, median over `repeats` fresh runs.
pub fn bench_throughput(cfg: &BenchConfig) -> BenchResult<RunReport> {
    cfg.validate()?;
    let mut report = RunReport::new(Experiment::Throughput.name(), cfg);
    for (section, olap) in [("pure", 0), ("mixed", cfg.olap_count)] {
        let mut rates = Vec::new();
        let mut last = None;
        for _ in 0..cfg.repeats {
            let (stats, sum) = throughput_once(cfg, olap)?;
            rates.push(stats.per_second());
            last = Some((stats, sum));
        }
        let (stats, sum) = last.expect("repeats >= 1");
        report.timing(section, "all", "txn_per_s", median(&rates));
        report.timing(section, "all", "elapsed_s", stats.elapsed.as_secs_f64());
        stats_records(&mut report, section, "all", &stats);
        report.count(section, "all", "checksum", sum);
    }
    Ok(report)
}

/// Thread scaling of pure and mixed throughput; the one-thread run is the
/// baseline and always included.
pub fn bench_scaling(cfg: &BenchConfig) -> BenchResult<RunReport> {
    cfg.validate()?;
    let mut report = RunReport::new(Experiment::Scaling.name(), cfg);
    let mut threads = cfg.thread_list.clone();
    threads.push(1);
    threads.sort_unstable();
    threads.dedup();
    for (section, olap) in [("pure", 0), ("mixed", cfg.olap_count)] {
        let mut base = None;
        for &t in &threads {
            let c = BenchConfig {
                threads: t,
                deterministic: false,
                ..cfg.clone()
            };
            let rates = (0..cfg.repeats)
                .map(|_| throughput_once(&c, olap).map(|(s, _)| s.per_second()))
                .collect::<BenchResult<Vec<_>>>()?;
            let rate = median(&rates);
            let base = *base.get_or_insert(rate);
            let label = t.to_string();
            report.timing(section, &label, "txn_per_s", rate);
            report.timing(section, &label, "speedup", rate / base);
        }
    }
    Ok(report)
}

/// `round(fraction * rows)` distinct rows drawn uniformly, ascending.
pub fn versioned_rows(rows: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = ((fraction * rows as f64).round() as usize).min(rows);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, rows, k).into_vec();
    v.sort_unstable();
    v
}

/// Rows a marker-guided scan checks: per block, the span from the first to
/// the last versioned row.
pub fn expected_checks(versioned: &[usize]) -> u64 {
    let mut total = 0;
    let mut i = 0;
    while i < versioned.len() {
        let block = versioned[i] / BLOCK_ROWS;
        let first = versioned[i];
        let mut last = first;
        while i < versioned.len() && versioned[i] / BLOCK_ROWS == block {
            last = versioned[i];
            i += 1;
        }
        total += (last - first + 1) as u64;
    }
    total
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScanMeasure {
    pub versioned_rows: usize,
    pub expected_checks: u64,
    /// Per scan of the transaction that began before the updates.
    pub stats: ScanStats,
    /// Per scan of a transaction that began after the updates.
    pub latest_stats: ScanStats,
    pub epoch_stats: ScanStats,
    pub scan_ms: f64,
    pub epoch_ms: f64,
    pub sum: f64,
    pub epoch_sum: f64,
}

fn timed_sums(
    tx: &mut hmvcc::engine::Transaction<'_>,
    col: ColumnRef,
    repeats: usize,
) -> BenchResult<(f64, f64, ScanStats)> {
    let mut times = Vec::with_capacity(repeats);
    let mut sum = 0.0;
    let before = tx.stats();
    for _ in 0..repeats {
        let start = Instant::now();
        sum = std::hint::black_box(tx.sum(col)?);
        times.push(ms(start.elapsed()));
    }
    let after = tx.stats();
    let per = |a: u64, b: u64| (a - b) / repeats as u64;
    Ok((
        median(&times),
        sum,
        ScanStats {
            visibility_checks: per(after.visibility_checks, before.visibility_checks),
            chain_traversals: per(after.chain_traversals, before.chain_traversals),
        },
    ))
}

/// Full scan of a `rows`-row float column with `fraction` of its rows
/// updated after the scanning transaction began, then the same scan on a
/// snapshot epoch.
pub fn versioned_scan_once(
    rows: usize,
    fraction: f64,
    seed: u64,
    backend: StrategyKind,
    repeats: usize,
) -> BenchResult<ScanMeasure> {
    let mut db = Database::new(DbOptions {
        backend,
        ..DbOptions::default()
    });
    db.create_table(
        Schema::new("scan", vec![ColumnDef::new("v", DataType::Float64)]),
        rows,
    )?;
    let cells: Vec<_> = (0..rows).map(|i| f64_cell((i % 1000) as f64)).collect();
    db.append_encoded("scan", &[cells])?;
    let col = db.resolve("scan", "v")?;
    let engine = Engine::new(
        db,
        EngineConfig::new(EngineMode::HeterogeneousSerializable)
            .snapshot_interval(u64::MAX)
            .gc_interval(None),
    )?;
    let versioned = versioned_rows(rows, fraction, seed);
    // Begins before the updates, so every updated row resolves via its chain.
    let mut old = engine.begin(TxnKind::Olap);
    for chunk in versioned.chunks(4096) {
        let mut tx = engine.begin(TxnKind::Oltp);
        for &r in chunk {
            tx.write(col, r, f64_cell((r % 1000) as f64 + 1.0))?;
        }
        if !tx.commit()?.committed() {
            return Err(BenchError::Run("update batch aborted".into()));
        }
    }
    let (scan_ms, sum, stats) = timed_sums(&mut old, col, repeats)?;
    old.commit()?;
    let mut latest = engine.begin(TxnKind::Olap);
    let (_, _, latest_stats) = timed_sums(&mut latest, col, 1)?;
    latest.commit()?;
    engine.trigger_snapshot();
    let mut epoch = engine.begin_olap(&[col])?;
    let (epoch_ms, epoch_sum, epoch_stats) = timed_sums(&mut epoch, col, repeats)?;
    epoch.commit()?;
    Ok(ScanMeasure {
        versioned_rows: versioned.len(),
        expected_checks: expected_checks(&versioned),
        stats,
        latest_stats,
        epoch_stats,
        scan_ms,
        epoch_ms,
        sum,
        epoch_sum,
    })
}

pub fn bench_versioned_scan(cfg: &BenchConfig) -> BenchResult<RunReport> {
    cfg.validate()?;
    let mut report = RunReport::new(Experiment::VersionedScan.name(), cfg);
    let repeats = cfg.repeats.max(5);
    let mut base = None;
    let mut fractions = cfg.fractions.clone();
    if !fractions.contains(&0.0) {
        fractions.insert(0, 0.0);
    }
    for f in fractions {
        let m = versioned_scan_once(cfg.scan_rows, f, cfg.seed, cfg.backend, repeats)?;
        let base = *base.get_or_insert(m.scan_ms);
        let label = f.to_string();
        let sec = "versioned_scan";
        report.count(sec, &label, "versioned_rows", m.versioned_rows);
        report.count(sec, &label, "visibility_checks", m.stats.visibility_checks);
        report.count(sec, &label, "expected_checks", m.expected_checks);
        report.count(sec, &label, "chain_traversals", m.stats.chain_traversals);
        report.count(
            sec,
            &label,
            "epoch_visibility_checks",
            m.epoch_stats.visibility_checks,
        );
        report.timing(sec, &label, "scan_ms", m.scan_ms);
        report.timing(sec, &label, "epoch_ms", m.epoch_ms);
        report.timing(sec, &label, "slowdown", m.scan_ms / base);
    }
    Ok(report)
}

fn cost_totals(costs: &[(ColumnRef, u64, SnapshotCost)]) -> SnapshotCost {
    let mut total = SnapshotCost::default();
    for (_, _, c) in costs {
        total.add(c);
    }
    total
}

fn cost_delta(after: &SnapshotCost, before: &SnapshotCost) -> SnapshotCost {
    SnapshotCost {
        bytes_copied_at_create: after.bytes_copied_at_create - before.bytes_copied_at_create,
        invocations_at_create: after.invocations_at_create - before.invocations_at_create,
        protect_calls: after.protect_calls - before.protect_calls,
        vmas_touched: after.vmas_touched - before.vmas_touched,
        ptes_touched: after.ptes_touched - before.ptes_touched,
    }
}

fn cost_records(report: &mut RunReport, section: &str, label: &str, c: &SnapshotCost) {
    report.count(section, label, "bytes_copied", c.bytes_copied_at_create);
    report.count(section, label, "invocations", c.invocations_at_create);
    report.count(section, label, "protect_calls", c.protect_calls);
    report.count(section, label, "vmas_touched", c.vmas_touched);
    report.count(section, label, "ptes_touched", c.ptes_touched);
}

/// Per-column snapshot cost after an OLTP warm-up, against the modeled cost
/// of duplicating the whole process, plus a backend by column-count grid.
pub fn bench_snapshot_cost(cfg: &BenchConfig) -> BenchResult<RunReport> {
    cfg.validate()?;
    let mut report = RunReport::new(Experiment::SnapshotCost.name(), cfg);
    let warmup = cfg.oltp_count.min(cfg.snapshot_interval as usize * 5);
    let het = |backend| BenchConfig {
        mode: EngineMode::HeterogeneousSerializable,
        snapshot_interval: u64::MAX,
        backend,
        ..cfg.clone()
    };

    let s = setup(&het(cfg.backend))?;
    run_jobs(
        &s.engine,
        &draw_jobs(&s.workload, cfg.seed ^ WARMUP_STREAM, warmup, 0),
        1,
    )?;
    let e = &s.engine;
    let fork = e.db().fork_cost();
    let all: Vec<ColumnRef> = e
        .db()
        .tables()
        .iter()
        .flat_map(|t| t.columns.iter().map(|c| c.key))
        .collect();
    e.trigger_snapshot();
    e.begin_olap(&all)?.commit()?;
    let reg = e.registry().expect("heterogeneous");
    let costs = reg.column_costs();
    for (key, _, c) in &costs {
        let table = e.db().table_by_id(key.table);
        let label = format!(
            "{}.{}",
            table.name(),
            table.schema.columns[key.column as usize].name
        );
        cost_records(&mut report, "per_column", &label, c);
    }
    let total = cost_totals(&costs);
    cost_records(&mut report, "total", "all_columns", &total);
    report.count("fork", "whole_space", "vmas", fork.vmas);
    report.count("fork", "whole_space", "ptes", fork.ptes);
    report.count("fork", "whole_space", "total", fork.total());
    e.shutdown();

    for backend in StrategyKind::ALL {
        let s = setup(&het(backend))?;
        run_jobs(
            &s.engine,
            &draw_jobs(&s.workload, cfg.seed ^ WARMUP_STREAM, warmup, 0),
            1,
        )?;
        let e = &s.engine;
        let cols: Vec<ColumnRef> = e
            .db()
            .table(LINEITEM)?
            .columns
            .iter()
            .map(|c| c.key)
            .collect();
        let reg = e.registry().expect("heterogeneous");
        for k in 1..=cols.len() {
            let before = cost_totals(&reg.column_costs());
            e.trigger_snapshot();
            e.begin_olap(&cols[..k])?.commit()?;
            let delta = cost_delta(&cost_totals(&reg.column_costs()), &before);
            cost_records(
                &mut report,
                &format!("grid/{backend}"),
                &k.to_string(),
                &delta,
            );
            e.reap_epochs()?;
        }
        e.shutdown();
    }
    Ok(report)
}
