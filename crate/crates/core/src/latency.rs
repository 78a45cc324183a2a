//! Latency aggregation for open-loop load tests.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleStatus {
    Ok,
    Error,
}

/// One dispatched request. Offsets are milliseconds since test start on a
/// monotonic clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub scheduled_ms: f64,
    pub send_ms: f64,
    pub status: SampleStatus,
    /// Client-measured round trip; present iff ok.
    pub latency_ms: Option<f64>,
    /// Server-reported handling time, when the response carried one.
    pub server_ms: Option<f64>,
}

impl LatencySample {
    pub fn ok(scheduled_ms: f64, send_ms: f64, latency_ms: f64, server_ms: Option<f64>) -> Self {
        Self {
            scheduled_ms,
            send_ms,
            status: SampleStatus::Ok,
            latency_ms: Some(latency_ms),
            server_ms,
        }
    }

    pub fn error(scheduled_ms: f64, send_ms: f64) -> Self {
        Self {
            scheduled_ms,
            send_ms,
            status: SampleStatus::Error,
            latency_ms: None,
            server_ms: None,
        }
    }
}

/// Linear interpolation between order statistics: rank `q * (n - 1)` in
/// the sorted sample. `None` for an empty sample.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = q * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub start_sec: f64,
    pub count: usize,
    pub mean_ms: f64,
    pub p99_ms: f64,
}

/// Stats for tumbling windows of `window_sec` aligned to test start,
/// keyed by send time. Windows without ok samples are omitted.
pub fn window_stats(samples: &[LatencySample], window_sec: f64) -> Vec<WindowStats> {
    let mut buckets: std::collections::BTreeMap<u64, Vec<f64>> = Default::default();
    for s in samples {
        if let Some(l) = s.latency_ms {
            let w = (s.send_ms.max(0.0) / 1000.0 / window_sec).floor() as u64;
            buckets.entry(w).or_default().push(l);
        }
    }
    buckets
        .into_iter()
        .map(|(w, v)| WindowStats {
            start_sec: w as f64 * window_sec,
            count: v.len(),
            mean_ms: v.iter().sum::<f64>() / v.len() as f64,
            p99_ms: percentile(&v, 0.99).unwrap_or(f64::NAN),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub rate: f64,
    pub n_sent: usize,
    pub ok_count: usize,
    pub error_count: usize,
    pub achieved_rps: f64,
    pub avg_ms: Option<f64>,
    /// Highest tumbling-window mean.
    pub peak_window_avg_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub max_ms: Option<f64>,
    pub server_avg_ms: Option<f64>,
    pub server_p99_ms: Option<f64>,
    pub server_max_ms: Option<f64>,
    /// Largest gap between scheduled and actual dispatch.
    pub max_dispatch_drift_ms: f64,
}

pub const DEFAULT_WINDOW_SEC: f64 = 60.0;

pub fn compute_report(samples: &[LatencySample], rate: f64, duration_sec: f64, window_sec: f64) -> LatencyReport {
    let ok: Vec<f64> = samples.iter().filter_map(|s| s.latency_ms).collect();
    let server: Vec<f64> = samples.iter().filter_map(|s| s.server_ms).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let max = |v: &[f64]| v.iter().copied().reduce(f64::max);
    LatencyReport {
        rate,
        n_sent: samples.len(),
        ok_count: ok.len(),
        error_count: samples.len() - ok.len(),
        achieved_rps: if duration_sec > 0.0 {
            samples.len() as f64 / duration_sec
        } else {
            0.0
        },
        avg_ms: mean(&ok),
        peak_window_avg_ms: window_stats(samples, window_sec)
            .iter()
            .map(|w| w.mean_ms)
            .reduce(f64::max),
        p99_ms: percentile(&ok, 0.99),
        max_ms: max(&ok),
        server_avg_ms: mean(&server),
        server_p99_ms: percentile(&server, 0.99),
        server_max_ms: max(&server),
        max_dispatch_drift_ms: samples
            .iter()
            .map(|s| (s.send_ms - s.scheduled_ms).abs())
            .fold(0.0, f64::max),
    }
}

/// Scheduled dispatch offsets for an open-loop run: request `i` at
/// `i / rate` seconds, for every `i` with offset below the duration.
pub fn open_loop_schedule(rate: f64, duration_sec: f64) -> Vec<f64> {
    if !(rate > 0.0) || !(duration_sec > 0.0) {
        return Vec::new();
    }
    let n = (duration_sec * rate - 1e-9).ceil().max(0.0) as usize;
    (0..n).map(|i| i as f64 * 1000.0 / rate).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(lat: &[f64]) -> Vec<LatencySample> {
        lat.iter()
            .enumerate()
            .map(|(i, &l)| LatencySample::ok(i as f64 * 100.0, i as f64 * 100.0, l, None))
            .collect()
    }

    #[test]
    fn identical_samples() {
        let r = compute_report(&samples(&[10.0; 100]), 10.0, 10.0, 60.0);
        assert_eq!(r.avg_ms, Some(10.0));
        assert_eq!(r.p99_ms, Some(10.0));
        assert_eq!(r.max_ms, Some(10.0));
        assert_eq!(r.peak_window_avg_ms, Some(10.0));
        assert_eq!(r.achieved_rps, 10.0);
    }

    #[test]
    fn outlier_raises_its_window() {
        let mut lat = vec![10.0; 100];
        lat[70] = 500.0;
        // 100 ms spacing, 2 s windows: sample 70 falls in window 3
        let r = compute_report(&samples(&lat), 10.0, 10.0, 2.0);
        assert_eq!(r.max_ms, Some(500.0));
        let w = window_stats(&samples(&lat), 2.0);
        assert_eq!(w.len(), 5);
        assert!((w[3].mean_ms - (19.0 * 10.0 + 500.0) / 20.0).abs() < 1e-12);
        assert_eq!(r.peak_window_avg_ms, Some(w[3].mean_ms));
    }

    #[test]
    fn errors_only() {
        let s = vec![LatencySample::error(0.0, 0.0); 3];
        let r = compute_report(&s, 1.0, 3.0, 60.0);
        assert_eq!((r.error_count, r.ok_count), (3, 0));
        assert_eq!(r.p99_ms, None);
        assert_eq!(r.peak_window_avg_ms, None);
    }

    #[test]
    fn schedule_arithmetic() {
        assert_eq!(open_loop_schedule(5.0, 60.0).len(), 300);
        assert_eq!(open_loop_schedule(1.0, 2.5).len(), 3);
        let s = open_loop_schedule(10.0, 1.0);
        assert_eq!(s[3], 300.0);
        assert!(open_loop_schedule(0.0, 1.0).is_empty());
    }
}
