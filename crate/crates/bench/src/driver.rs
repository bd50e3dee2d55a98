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

//! Job lists and the worker pool that runs them.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use hmvcc::engine::{AbortReasonKind, CommitOutcome, Engine, EngineConfig};
use hmvcc::query::{compile, run_plan, PlanSpec};
use hmvcc::storage::{DbOptions, ScanStats};
use hmvcc::txn::TxnKind;
use hmvcc::workload::{generate, GenConfig, OlapTemplate, OltpScript, Workload};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::BenchConfig;
use crate::BenchResult;

#[derive(Debug, Clone)]
pub enum Job {
    Oltp(OltpScript),
    Olap(OlapTemplate, PlanSpec),
}

/// Generated tables, the engine over them and the draw rules.
pub struct Setup {
    pub engine: Arc<Engine>,
    pub workload: Workload,
}

pub fn setup(cfg: &BenchConfig) -> BenchResult<Setup> {
    let options = DbOptions {
        backend: cfg.backend,
        ..DbOptions::default()
    };
    let db = generate(&GenConfig::new(cfg.sf, cfg.seed), options)?;
    let workload = Workload::new(&db)?
        .with_oltp_templates(&cfg.oltp_mix)?
        .with_olap_templates(&cfg.olap_mix)?;
    let engine = Engine::new(
        db,
        EngineConfig::new(cfg.mode)
            .snapshot_interval(cfg.snapshot_interval)
            .gc_interval(cfg.gc_interval),
    )?;
    Ok(Setup { engine, workload })
}

/// `oltp` OLTP scripts followed by `olap` OLAP plans, all drawn from one
/// stream seeded by `seed`, then interleaved.
pub fn draw_jobs(w: &Workload, seed: u64, oltp: usize, olap: usize) -> Vec<Job> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scripts = (0..oltp).map(|_| w.next_oltp(&mut rng)).collect();
    let plans = (0..olap).map(|_| w.next_olap(&mut rng)).collect();
    interleave(scripts, plans)
}

/// Spreads the OLAP plans evenly between the OLTP scripts.
pub fn interleave(scripts: Vec<OltpScript>, plans: Vec<(OlapTemplate, PlanSpec)>) -> Vec<Job> {
    let (oltp, olap) = (scripts.len(), plans.len());
    let mut jobs = Vec::with_capacity(oltp + olap);
    let mut plans = plans.into_iter();
    let mut next_olap = 1;
    for (i, script) in scripts.into_iter().enumerate() {
        while next_olap <= olap && i * (olap + 1) >= next_olap * oltp {
            let (t, spec) = plans.next().expect("counted");
            jobs.push(Job::Olap(t, spec));
            next_olap += 1;
        }
        jobs.push(Job::Oltp(script));
    }
    jobs.extend(plans.map(|(t, spec)| Job::Olap(t, spec)));
    jobs
}

#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub elapsed: Duration,
    pub commits: u64,
    pub read_only_commits: u64,
    pub aborts: BTreeMap<&'static str, u64>,
    pub olap_runs: u64,
    pub olap_latency: BTreeMap<OlapTemplate, Vec<Duration>>,
    /// Visibility work done by OLAP plans.
    pub olap_scan: ScanStats,
}

impl RunStats {
    pub fn transactions(&self) -> u64 {
        self.commits + self.aborts.values().sum::<u64>() + self.olap_runs
    }

    pub fn per_second(&self) -> f64 {
        self.transactions() as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }

    pub(crate) fn record(&mut self, outcome: CommitOutcome) {
        match outcome {
            CommitOutcome::Committed(_) => self.commits += 1,
            CommitOutcome::Aborted(kind) => *self.aborts.entry(abort_name(kind)).or_default() += 1,
        }
    }

    pub(crate) fn merge(&mut self, other: RunStats) {
        self.commits += other.commits;
        self.read_only_commits += other.read_only_commits;
        for (k, v) in other.aborts {
            *self.aborts.entry(k).or_default() += v;
        }
        self.olap_runs += other.olap_runs;
        for (t, v) in other.olap_latency {
            self.olap_latency.entry(t).or_default().extend(v);
        }
        self.olap_scan.add(&other.olap_scan);
    }
}

pub fn abort_name(kind: AbortReasonKind) -> &'static str {
    match kind {
        AbortReasonKind::WriteWrite => "write_write",
        AbortReasonKind::Serializability => "serializability",
        AbortReasonKind::User => "user",
    }
}

/// Runs one OLAP plan in its own transaction, routed by the engine mode.
/// Returns the latency from begin to commit and the scan work.
pub fn run_olap(engine: &Engine, spec: &PlanSpec) -> BenchResult<(Duration, ScanStats)> {
    let plan = compile(spec, engine.db())?;
    let start = Instant::now();
    let mut tx = if engine.mode().heterogeneous() {
        engine.begin_olap(&plan.columns())?
    } else {
        engine.begin(TxnKind::Olap)
    };
    run_plan(&mut tx, &plan)?;
    let stats = tx.stats();
    tx.commit()?;
    Ok((start.elapsed(), stats))
}

pub(crate) fn run_job(engine: &Engine, job: &Job, stats: &mut RunStats) -> BenchResult<()> {
    match job {
        Job::Oltp(script) => {
            let outcome = script.run(engine)?;
            if outcome.committed() && script.is_read_only() {
                stats.read_only_commits += 1;
            }
            stats.record(outcome);
        }
        Job::Olap(t, spec) => {
            let (latency, scan) = run_olap(engine, spec)?;
            stats.olap_runs += 1;
            stats.olap_latency.entry(*t).or_default().push(latency);
            stats.olap_scan.add(&scan);
        }
    }
    Ok(())
}

/// Runs `jobs` on `workers` threads that take the next job in list order.
/// With one worker the history is the list itself.
pub fn run_jobs(engine: &Engine, jobs: &[Job], workers: usize) -> BenchResult<RunStats> {
    let next = AtomicUsize::new(0);
    let start = Instant::now();
    let worker = || -> BenchResult<RunStats> {
        let mut stats = RunStats::default();
        loop {
            let i = next.fetch_add(1, Ordering::Relaxed);
            let Some(job) = jobs.get(i) else {
                return Ok(stats);
            };
            run_job(engine, job, &mut stats)?;
        }
    };
    let mut total = RunStats::default();
    if workers <= 1 {
        total.merge(worker()?);
    } else {
        let results: Vec<BenchResult<RunStats>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers).map(|_| s.spawn(&worker)).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        for r in results {
            total.merge(r?);
        }
    }
    total.elapsed = start.elapsed();
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hmvcc::engine::EngineMode;

    fn tiny(mode: EngineMode) -> BenchConfig {
        BenchConfig {
            mode,
            sf: 0.0005,
            seed: 3,
            snapshot_interval: 50,
            gc_interval: None,
            deterministic: true,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn olap_jobs_spread_evenly() {
        let s = setup(&tiny(EngineMode::HomogeneousSi)).unwrap();
        let jobs = draw_jobs(&s.workload, 1, 100, 4);
        assert_eq!(jobs.len(), 104);
        let pos: Vec<usize> = jobs
            .iter()
            .enumerate()
            .filter(|(_, j)| matches!(j, Job::Olap(..)))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(pos, vec![20, 41, 62, 83]);
        assert!(draw_jobs(&s.workload, 1, 0, 2).len() == 2);
    }

    #[test]
    fn serial_run_counts_everything() {
        let s = setup(&tiny(EngineMode::HeterogeneousSerializable)).unwrap();
        let jobs = draw_jobs(&s.workload, 1, 300, 3);
        let stats = run_jobs(&s.engine, &jobs, 1).unwrap();
        assert_eq!(stats.commits, 300);
        assert_eq!(stats.olap_runs, 3);
        assert_eq!(stats.transactions(), 303);
        assert_eq!(stats.olap_scan.visibility_checks, 0);
    }
}
