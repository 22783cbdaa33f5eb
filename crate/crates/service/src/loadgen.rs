//! Open-loop load generation: requests go out on a fixed schedule whether or
//! not earlier ones have returned. The report is a pure function of the
//! sample dump, so it can be recomputed offline byte for byte.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tokio::task::JoinSet;
use tokio::time::Instant;

use crate::metrics::{StageBreakdown, StageSummary, StageTimings};
use crate::state::ClassifyResponse;

/// Achieved rate may fall this far below target before the run counts as
/// saturated.
pub const QPS_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct LoadConfig {
    /// Service base URL, e.g. `http://127.0.0.1:8080`.
    pub url: String,
    pub qps: f64,
    pub duration: Duration,
    pub queries: Vec<String>,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub seq: u64,
    /// Offsets from the run start, microseconds.
    pub scheduled_us: u64,
    pub sent_us: u64,
    /// Client-observed latency; absent when no response arrived.
    pub client_us: Option<u64>,
    /// HTTP status, 0 on transport failure.
    pub status: u16,
    pub server: Option<StageTimings>,
    pub budget_exceeded: bool,
}

/// First line of a sample dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleHeader {
    pub target_qps: f64,
    pub duration_s: f64,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub target_qps: f64,
    pub duration_s: f64,
    pub scheduled: usize,
    pub completed: usize,
    pub errors: usize,
    /// Successful responses per second over the span from start to the
    /// last response (at least the configured duration).
    pub achieved_qps: f64,
    pub saturated: bool,
    pub aborted: bool,
    pub max_send_lag_ms: f64,
    pub budget_exceeded: usize,
    pub client: StageSummary,
    /// Per-stage server timings echoed in the responses.
    pub server: StageBreakdown,
}

pub fn report_from_samples(header: &SampleHeader, samples: &[Sample]) -> LoadReport {
    let ok: Vec<&Sample> = samples.iter().filter(|s| s.status == 200 && s.server.is_some()).collect();
    let end_us = ok
        .iter()
        .filter_map(|s| s.client_us.map(|c| s.sent_us + c))
        .max()
        .unwrap_or(0);
    let span = (end_us as f64 / 1e6).max(header.duration_s);
    let achieved = if span > 0.0 { ok.len() as f64 / span } else { 0.0 };
    let client: Vec<u64> = ok.iter().filter_map(|s| s.client_us).collect();
    let lag = samples
        .iter()
        .map(|s| s.sent_us.saturating_sub(s.scheduled_us))
        .max()
        .unwrap_or(0);
    LoadReport {
        target_qps: header.target_qps,
        duration_s: header.duration_s,
        scheduled: samples.len(),
        completed: ok.len(),
        errors: samples.len() - ok.len(),
        achieved_qps: achieved,
        saturated: header.aborted || achieved < header.target_qps * (1.0 - QPS_TOLERANCE),
        aborted: header.aborted,
        max_send_lag_ms: lag as f64 / 1000.0,
        budget_exceeded: ok.iter().filter(|s| s.budget_exceeded).count(),
        client: StageSummary::from_micros(&client),
        server: StageBreakdown::from_timings(ok.iter().filter_map(|s| s.server.as_ref())),
    }
}

pub fn write_samples(path: &Path, header: &SampleHeader, samples: &[Sample]) -> anyhow::Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "{}", serde_json::to_string(header)?)?;
    for s in samples {
        writeln!(w, "{}", serde_json::to_string(s)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> anyhow::Result<(SampleHeader, Vec<Sample>)> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = BufReader::new(f).lines();
    let header: SampleHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?).context("sample dump header")?,
        None => bail!("{}: empty sample dump", path.display()),
    };
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&line).with_context(|| format!("sample line {}", i + 2))?);
    }
    Ok((header, samples))
}

pub fn write_report(path: &Path, report: &LoadReport) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Reads queries, one per line; JSONL rows contribute their `text` field.
pub fn read_queries(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let queries: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v.get("text").and_then(|t| t.as_str()).map(str::to_string))
                .unwrap_or_else(|| l.to_string())
        })
        .collect();
    if queries.is_empty() {
        bail!("{}: no queries", path.display());
    }
    Ok(queries)
}

/// Runs the schedule. A transport failure stops further sends; the partial
/// run is returned with `aborted` set.
pub async fn run(cfg: &LoadConfig) -> anyhow::Result<(SampleHeader, Vec<Sample>)> {
    if !(cfg.qps > 0.0) || cfg.queries.is_empty() {
        bail!("load generation needs qps > 0 and at least one query");
    }
    let client = reqwest::Client::builder()
        .timeout(cfg.timeout)
        .pool_max_idle_per_host(256)
        .build()?;
    let url = format!("{}/v1/classify", cfg.url.trim_end_matches('/'));
    let total = (cfg.qps * cfg.duration.as_secs_f64()).round() as u64;
    let aborted = Arc::new(AtomicBool::new(false));
    let start = Instant::now();
    let mut tasks = JoinSet::new();
    for seq in 0..total {
        if aborted.load(Ordering::Relaxed) {
            break;
        }
        let offset = Duration::from_secs_f64(seq as f64 / cfg.qps);
        tokio::time::sleep_until(start + offset).await;
        let body = serde_json::json!({ "text": cfg.queries[seq as usize % cfg.queries.len()] });
        let (client, url, aborted) = (client.clone(), url.clone(), Arc::clone(&aborted));
        tasks.spawn(async move {
            let sent = Instant::now();
            let sent_us = sent.duration_since(start).as_micros() as u64;
            let mut sample = Sample {
                seq,
                scheduled_us: offset.as_micros() as u64,
                sent_us,
                client_us: None,
                status: 0,
                server: None,
                budget_exceeded: false,
            };
            match client.post(&url).json(&body).send().await {
                Ok(resp) => {
                    sample.status = resp.status().as_u16();
                    let parsed = resp.json::<ClassifyResponse>().await;
                    sample.client_us = Some(sent.elapsed().as_micros() as u64);
                    if let Ok(r) = parsed {
                        sample.server = Some(StageTimings {
                            t_ret_us: r.timings.t_ret_us,
                            t_inf_us: r.timings.t_inf_us,
                            t_tot_us: r.timings.t_tot_us,
                        });
                        sample.budget_exceeded = r.budget_exceeded;
                    }
                }
                Err(e) => {
                    if e.is_connect() {
                        aborted.store(true, Ordering::Relaxed);
                    }
                }
            }
            sample
        });
    }
    let mut samples = Vec::with_capacity(total as usize);
    while let Some(s) = tasks.join_next().await {
        samples.push(s?);
    }
    samples.sort_by_key(|s| s.seq);
    let header = SampleHeader {
        target_qps: cfg.qps,
        duration_s: cfg.duration.as_secs_f64(),
        aborted: aborted.load(Ordering::Relaxed),
    };
    Ok((header, samples))
}
