//! Rolling-window latency samples with nearest-rank quantiles computed from
//! the raw values, plus request counters.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

/// Nearest-rank quantile of ascending `sorted`: the ⌈q·n⌉-th smallest.
pub fn nearest_rank(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct StageSummary {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl StageSummary {
    /// Summary of microsecond samples, in milliseconds.
    pub fn from_micros(values: &[u64]) -> Self {
        if values.is_empty() {
            return StageSummary::default();
        }
        let mut v = values.to_vec();
        v.sort_unstable();
        let ms = |us: u64| us as f64 / 1000.0;
        let sum: u128 = v.iter().map(|&x| x as u128).sum();
        StageSummary {
            count: v.len(),
            mean_ms: sum as f64 / v.len() as f64 / 1000.0,
            p50_ms: ms(nearest_rank(&v, 0.50)),
            p90_ms: ms(nearest_rank(&v, 0.90)),
            p95_ms: ms(nearest_rank(&v, 0.95)),
            p99_ms: ms(nearest_rank(&v, 0.99)),
            max_ms: ms(*v.last().expect("nonempty")),
        }
    }
}

/// Server-side stage timings of one request, microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub t_ret_us: u64,
    pub t_inf_us: u64,
    pub t_tot_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StageBreakdown {
    pub retrieval: StageSummary,
    pub inference: StageSummary,
    pub total: StageSummary,
}

impl StageBreakdown {
    pub fn from_timings<'a, I: IntoIterator<Item = &'a StageTimings>>(samples: I) -> Self {
        let (mut r, mut i, mut t) = (Vec::new(), Vec::new(), Vec::new());
        for s in samples {
            r.push(s.t_ret_us);
            i.push(s.t_inf_us);
            t.push(s.t_tot_us);
        }
        StageBreakdown {
            retrieval: StageSummary::from_micros(&r),
            inference: StageSummary::from_micros(&i),
            total: StageSummary::from_micros(&t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub requests: u64,
    pub budget_violations: u64,
    pub strict_fallbacks: u64,
    pub errors: u64,
    pub kb_epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub window_secs: u64,
    pub tau_ms: f64,
    pub counters: Counters,
    pub stages: StageBreakdown,
}

const SHARDS: usize = 16;

/// Samples are appended to per-thread shards, each in arrival order, and
/// merged when read.
#[derive(Debug)]
pub struct Metrics {
    window: Duration,
    shards: Vec<Mutex<VecDeque<(Instant, StageTimings)>>>,
    requests: AtomicU64,
    budget_violations: AtomicU64,
    strict_fallbacks: AtomicU64,
    errors: AtomicU64,
}

fn shard_index() -> usize {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    std::thread::current().id().hash(&mut h);
    h.finish() as usize % SHARDS
}

impl Metrics {
    pub fn new(window: Duration) -> Self {
        Metrics {
            window,
            shards: (0..SHARDS).map(|_| Mutex::new(VecDeque::new())).collect(),
            requests: AtomicU64::new(0),
            budget_violations: AtomicU64::new(0),
            strict_fallbacks: AtomicU64::new(0),
            errors: AtomicU64::new(0),
        }
    }

    pub fn record(&self, t: StageTimings, budget_exceeded: bool, fallback: bool) {
        self.record_at(Instant::now(), t, budget_exceeded, fallback);
    }

    pub fn record_at(&self, at: Instant, t: StageTimings, budget_exceeded: bool, fallback: bool) {
        self.requests.fetch_add(1, Ordering::Relaxed);
        if budget_exceeded {
            self.budget_violations.fetch_add(1, Ordering::Relaxed);
        }
        if fallback {
            self.strict_fallbacks.fetch_add(1, Ordering::Relaxed);
        }
        let mut shard = self.shards[shard_index()].lock();
        shard.push_back((at, t));
        while shard.front().is_some_and(|(t0, _)| at.duration_since(*t0) > self.window) {
            shard.pop_front();
        }
    }

    pub fn record_error(&self) {
        self.errors.fetch_add(1, Ordering::Relaxed);
    }

    /// Samples within the window ending at `now`, ordered by arrival.
    pub fn window_samples(&self, now: Instant) -> Vec<StageTimings> {
        let mut all: Vec<(Instant, StageTimings)> = Vec::new();
        for shard in &self.shards {
            let mut s = shard.lock();
            while s.front().is_some_and(|(t0, _)| now.saturating_duration_since(*t0) > self.window) {
                s.pop_front();
            }
            all.extend(s.iter().copied());
        }
        all.sort_by_key(|(t, _)| *t);
        all.into_iter().map(|(_, s)| s).collect()
    }

    pub fn report(&self, tau_ms: f64, kb_epoch: u64) -> MetricsReport {
        let samples = self.window_samples(Instant::now());
        MetricsReport {
            window_secs: self.window.as_secs(),
            tau_ms,
            counters: Counters {
                requests: self.requests.load(Ordering::Relaxed),
                budget_violations: self.budget_violations.load(Ordering::Relaxed),
                strict_fallbacks: self.strict_fallbacks.load(Ordering::Relaxed),
                errors: self.errors.load(Ordering::Relaxed),
                kb_epoch,
            },
            stages: StageBreakdown::from_timings(&samples),
        }
    }
}

/// Line-oriented scrape format: `name{labels} value`.
pub fn scrape_text(r: &MetricsReport) -> String {
    let mut s = String::new();
    let c = &r.counters;
    for (name, v) in [
        ("adrag_requests_total", c.requests),
        ("adrag_budget_violations_total", c.budget_violations),
        ("adrag_strict_fallbacks_total", c.strict_fallbacks),
        ("adrag_errors_total", c.errors),
        ("adrag_kb_epoch", c.kb_epoch),
    ] {
        let _ = writeln!(s, "{name} {v}");
    }
    let _ = writeln!(s, "adrag_latency_budget_ms {}", r.tau_ms);
    for (stage, sum) in [
        ("retrieval", &r.stages.retrieval),
        ("inference", &r.stages.inference),
        ("total", &r.stages.total),
    ] {
        let _ = writeln!(s, "adrag_latency_window_count{{stage=\"{stage}\"}} {}", sum.count);
        for (q, v) in [
            ("0.5", sum.p50_ms),
            ("0.9", sum.p90_ms),
            ("0.95", sum.p95_ms),
            ("0.99", sum.p99_ms),
        ] {
            let _ = writeln!(s, "adrag_latency_ms{{stage=\"{stage}\",quantile=\"{q}\"}} {v}");
        }
    }
    s
}
