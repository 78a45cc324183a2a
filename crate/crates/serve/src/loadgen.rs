//! Open-loop load generator.

use std::path::Path;
use std::time::{Duration, Instant};

use quicktext::latency::{compute_report, open_loop_schedule, LatencyReport, LatencySample, SampleStatus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::api::{PredictRequest, PredictResponse};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug)]
pub struct LoadTestPlan {
    pub rates: Vec<f64>,
    pub duration_sec: f64,
    pub pool: Vec<PredictRequest>,
    pub seed: u64,
    pub window_sec: f64,
    pub request_timeout: Duration,
}

impl LoadTestPlan {
    pub fn validate(&self) -> Result<(), LoadError> {
        if self.rates.is_empty() || self.rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(LoadError::Contract("rates must be positive".into()));
        }
        if self.pool.is_empty() {
            return Err(LoadError::Contract("request pool is empty".into()));
        }
        if !(self.duration_sec > 0.0) || !(self.window_sec > 0.0) {
            return Err(LoadError::Contract("duration and window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RateRun {
    pub rate: f64,
    pub samples: Vec<LatencySample>,
    pub report: LatencyReport,
}

/// Dispatches request `i` at `i / rate` seconds whether or not earlier
/// requests have returned. Each request runs on its own task.
pub async fn run_rate(
    client: &reqwest::Client,
    base_url: &str,
    pool: &[PredictRequest],
    rate: f64,
    duration_sec: f64,
    seed: u64,
) -> Vec<LatencySample> {
    let url = format!("{}/v1/predict", base_url.trim_end_matches('/'));
    let schedule = open_loop_schedule(rate, duration_sec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = schedule.iter().map(|_| rng.random_range(0..pool.len())).collect();
    let start = tokio::time::Instant::now();
    let origin = Instant::now();
    let mut tasks = Vec::with_capacity(schedule.len());
    for (&offset, &pick) in schedule.iter().zip(&picks) {
        tokio::time::sleep_until(start + Duration::from_secs_f64(offset / 1e3)).await;
        let send_ms = origin.elapsed().as_secs_f64() * 1e3;
        let req = client.post(&url).json(&pool[pick]);
        tasks.push(tokio::spawn(async move {
            let t0 = Instant::now();
            let resp = match req.send().await {
                Ok(r) if r.status().is_success() => r.json::<PredictResponse>().await.ok(),
                _ => None,
            };
            match resp {
                Some(body) => LatencySample::ok(
                    offset,
                    send_ms,
                    t0.elapsed().as_secs_f64() * 1e3,
                    Some(body.latency_ms),
                ),
                None => LatencySample::error(offset, send_ms),
            }
        }));
    }
    let mut out = Vec::with_capacity(tasks.len());
    for (t, &offset) in tasks.into_iter().zip(&schedule) {
        out.push(t.await.unwrap_or_else(|_| LatencySample::error(offset, offset)));
    }
    out
}

pub async fn run_load_test(plan: &LoadTestPlan, base_url: &str) -> Result<Vec<RateRun>, LoadError> {
    plan.validate()?;
    let client = reqwest::Client::builder()
        .timeout(plan.request_timeout)
        .build()
        .map_err(|e| LoadError::Contract(e.to_string()))?;
    let mut out = Vec::new();
    for (i, &rate) in plan.rates.iter().enumerate() {
        let samples = run_rate(&client, base_url, &plan.pool, rate, plan.duration_sec, plan.seed.wrapping_add(i as u64)).await;
        let report = compute_report(&samples, rate, plan.duration_sec, plan.window_sec);
        log::info!("rate {rate}: {} sent, {} errors", report.n_sent, report.error_count);
        out.push(RateRun { rate, samples, report });
    }
    Ok(out)
}

#[derive(Serialize)]
struct ReportRow {
    rate: f64,
    avg_ms: Option<f64>,
    peak_1min_avg_ms: Option<f64>,
    p99_ms: Option<f64>,
    max_ms: Option<f64>,
    error_count: usize,
    achieved_rps: f64,
    n_sent: usize,
    server_avg_ms: Option<f64>,
    server_p99_ms: Option<f64>,
    server_max_ms: Option<f64>,
    max_dispatch_drift_ms: f64,
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "rate",
    "avg_ms",
    "peak_1min_avg_ms",
    "p99_ms",
    "max_ms",
    "error_count",
    "achieved_rps",
    "n_sent",
    "server_avg_ms",
    "server_p99_ms",
    "server_max_ms",
    "max_dispatch_drift_ms",
];

/// One row per rate; client-measured latencies first, then server-side.
pub fn write_report_csv(path: &Path, reports: &[LatencyReport]) -> Result<(), LoadError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(ReportRow {
            rate: r.rate,
            avg_ms: r.avg_ms,
            peak_1min_avg_ms: r.peak_window_avg_ms,
            p99_ms: r.p99_ms,
            max_ms: r.max_ms,
            error_count: r.error_count,
            achieved_rps: r.achieved_rps,
            n_sent: r.n_sent,
            server_avg_ms: r.server_avg_ms,
            server_p99_ms: r.server_p99_ms,
            server_max_ms: r.server_max_ms,
            max_dispatch_drift_ms: r.max_dispatch_drift_ms,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Raw samples for offline analysis.
pub fn write_samples_csv(path: &Path, runs: &[RateRun]) -> Result<(), LoadError> {
    #[derive(Serialize)]
    struct Row {
        rate: f64,
        scheduled_ms: f64,
        send_ms: f64,
        status: SampleStatus,
        latency_ms: Option<f64>,
        server_ms: Option<f64>,
    }
    let mut w = csv::Writer::from_path(path)?;
    for run in runs {
        for s in &run.samples {
            w.serialize(Row {
                rate: run.rate,
                scheduled_ms: s.scheduled_ms,
                send_ms: s.send_ms,
                status: s.status,
                latency_ms: s.latency_ms,
                server_ms: s.server_ms,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
