use std::time::Duration;

use quicktext::latency::{compute_report, SampleStatus};
use quicktext_serve::api::PredictRequest;
use quicktext_serve::backend::MockBackend;
use quicktext_serve::loadgen::{run_load_test, run_rate, write_report_csv, write_samples_csv, LoadTestPlan, REPORT_COLUMNS};
use quicktext_serve::server::{self, AppState, ServeConfig};
use quicktext_serve::ContextMessage;

fn pool() -> Vec<PredictRequest> {
    (0..20)
        .map(|i| PredictRequest {
            case_id: format!("case-{i}"),
            messages: vec![ContextMessage {
                role: quicktext::corpus::Role::Customer,
                text: format!("message number {i}"),
            }],
            k: None,
        })
        .collect()
}

async fn mock_server(ms: u64) -> String {
    let state = AppState::start(ServeConfig::default(), move || {
        Ok(Box::new(MockBackend {
            service_time: Duration::from_millis(ms),
            catalog_size: 10,
        }))
    })
    .unwrap();
    let addr = server::spawn("127.0.0.1:0".parse().unwrap(), state.clone()).await.unwrap();
    while !state.is_ready() {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    format!("http://{addr}")
}

#[tokio::test(flavor = "multi_thread")]
async fn light_load_sees_the_service_time() {
    let url = mock_server(10).await;
    let client = reqwest::Client::new();
    let samples = run_rate(&client, &url, &pool(), 5.0, 3.0, 1).await;
    assert_eq!(samples.len(), 15);
    assert!(samples.iter().all(|s| s.status == SampleStatus::Ok));
    let report = compute_report(&samples, 5.0, 3.0, 60.0);
    let avg = report.avg_ms.unwrap();
    assert!((10.0..30.0).contains(&avg), "avg {avg}");
    let server = report.server_avg_ms.unwrap();
    assert!((10.0..15.0).contains(&server), "server avg {server}");
    assert!(report.max_dispatch_drift_ms < 5.0, "drift {}", report.max_dispatch_drift_ms);
    assert!((report.achieved_rps - 5.0).abs() <= 0.25);
}

#[tokio::test(flavor = "multi_thread")]
async fn dispatch_does_not_wait_for_responses() {
    // 4 rps against a 400 ms serialized worker: responses fall behind,
    // dispatch must not.
    let url = mock_server(400).await;
    let client = reqwest::Client::new();
    let samples = run_rate(&client, &url, &pool(), 4.0, 2.0, 2).await;
    assert_eq!(samples.len(), 8);
    for s in &samples {
        assert!((s.send_ms - s.scheduled_ms).abs() < 5.0, "{s:?}");
    }
    let lat: Vec<f64> = samples.iter().map(|s| s.latency_ms.unwrap()).collect();
    assert!(lat.last().unwrap() > &(lat[0] + 1000.0), "{lat:?}");
}

#[tokio::test(flavor = "multi_thread")]
async fn unreachable_endpoint_records_errors() {
    let client = reqwest::Client::builder().timeout(Duration::from_millis(500)).build().unwrap();
    let samples = run_rate(&client, "http://127.0.0.1:9", &pool(), 10.0, 0.5, 3).await;
    assert_eq!(samples.len(), 5);
    assert!(samples.iter().all(|s| s.status == SampleStatus::Error && s.latency_ms.is_none()));
    let report = compute_report(&samples, 10.0, 0.5, 60.0);
    assert_eq!(report.error_count, 5);
    assert_eq!(report.p99_ms, None);
}

#[tokio::test(flavor = "multi_thread")]
async fn report_csv_has_one_row_per_rate() {
    let url = mock_server(1).await;
    let plan = LoadTestPlan {
        rates: vec![2.0, 4.0],
        duration_sec: 1.0,
        pool: pool(),
        seed: 5,
        window_sec: 60.0,
        request_timeout: Duration::from_secs(10),
    };
    let runs = run_load_test(&plan, &url).await.unwrap();
    assert_eq!(runs.iter().map(|r| r.samples.len()).collect::<Vec<_>>(), [2, 4]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    write_report_csv(&path, &runs.iter().map(|r| r.report.clone()).collect::<Vec<_>>()).unwrap();
    let mut rd = csv::Reader::from_path(&path).unwrap();
    assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), REPORT_COLUMNS);
    assert_eq!(rd.records().count(), 2);

    let samples = dir.path().join("samples.csv");
    write_samples_csv(&samples, &runs).unwrap();
    let mut rd = csv::Reader::from_path(&samples).unwrap();
    assert_eq!(
        rd.headers().unwrap().iter().collect::<Vec<_>>(),
        ["rate", "scheduled_ms", "send_ms", "status", "latency_ms", "server_ms"]
    );
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| &r[3] == "ok"));

    let bad = LoadTestPlan { pool: vec![], ..plan };
    assert!(run_load_test(&bad, &url).await.is_err());
}
