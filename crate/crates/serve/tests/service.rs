use std::net::SocketAddr;
use std::sync::mpsc as std_mpsc;
use std::time::Duration;

use quicktext::abtest::{Group, PredictionRecord, SelectionEvent};
use quicktext::checkpoint::ClassifierArtifact;
use quicktext::corpus::{build_classification_example, generate_corpus, read_ndjson, TemplateCatalog};
use quicktext::model::{Classifier, ClassifierHead, DecoderModel, Preset};
use quicktext::tokenizer::{Vocab, MIN_VOCAB};
use quicktext_serve::api::{Health, PredictRequest, PredictResponse};
use quicktext_serve::backend::{Backend, BackendError, MockBackend, ModelBackend};
use quicktext_serve::server::{self, AppState, ServeConfig};
use quicktext_serve::ContextMessage;

fn request(case_id: &str, k: Option<usize>) -> PredictRequest {
    PredictRequest {
        case_id: case_id.into(),
        messages: vec![ContextMessage {
            role: quicktext::corpus::Role::Customer,
            text: "my router keeps dropping the connection".into(),
        }],
        k,
    }
}

fn mock(ms: u64, catalog: usize) -> Box<dyn Backend> {
    Box::new(MockBackend {
        service_time: Duration::from_millis(ms),
        catalog_size: catalog,
    })
}

fn artifact(n_classes: usize) -> (ClassifierArtifact, Vocab) {
    let vocab = Vocab::bytes_only();
    let cfg = Preset::Nano.config().with_vocab(MIN_VOCAB).with_context(64);
    let model = DecoderModel::<f32>::init(cfg, 3).unwrap();
    let head = ClassifierHead::<f32>::init(model.config().d_model, n_classes, 4).unwrap();
    let art = ClassifierArtifact {
        classifier: Classifier::new(model, head).unwrap(),
        vocab_hash: vocab.hash(),
        step: 0,
        tokens_seen: 0,
    };
    (art, vocab)
}

async fn start(cfg: ServeConfig, backend: Box<dyn Backend>) -> (SocketAddr, AppState) {
    let state = AppState::start(cfg, move || Ok(backend)).unwrap();
    let addr = server::spawn("127.0.0.1:0".parse().unwrap(), state.clone()).await.unwrap();
    for _ in 0..500 {
        if state.is_ready() {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    (addr, state)
}

async fn post_predict(addr: SocketAddr, req: &PredictRequest) -> reqwest::Response {
    reqwest::Client::new()
        .post(format!("http://{addr}/v1/predict"))
        .json(req)
        .send()
        .await
        .unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn health_reports_loading_until_the_loader_returns() {
    let (tx, rx) = std_mpsc::channel::<()>();
    let state = AppState::start(ServeConfig::default(), move || {
        rx.recv().unwrap();
        Ok(mock(1, 10))
    })
    .unwrap();
    let addr = server::spawn("127.0.0.1:0".parse().unwrap(), state.clone()).await.unwrap();
    let url = format!("http://{addr}/health");
    let r = reqwest::get(&url).await.unwrap();
    assert_eq!(r.status(), 503);
    assert_eq!(post_predict(addr, &request("c", None)).await.status(), 503);

    tx.send(()).unwrap();
    while !state.is_ready() {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let r = reqwest::get(&url).await.unwrap();
    assert_eq!(r.status(), 200);
    let h: Health = r.json().await.unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.catalog_size, Some(10));
    assert_eq!(h.model_version.as_deref(), Some("mock-1ms"));
}

#[tokio::test(flavor = "multi_thread")]
async fn failed_load_stays_unavailable() {
    let state = AppState::start(ServeConfig::default(), || Err(BackendError::Model("boom".into()))).unwrap();
    let addr = server::spawn("127.0.0.1:0".parse().unwrap(), state).await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    let r = reqwest::get(format!("http://{addr}/health")).await.unwrap();
    assert_eq!(r.status(), 503);
    let h: Health = r.json().await.unwrap();
    assert_eq!(h.status, "failed");
}

#[tokio::test(flavor = "multi_thread")]
async fn predict_validates_requests() {
    let (addr, _) = start(ServeConfig::default(), mock(1, 10)).await;
    let r = post_predict(addr, &request("c1", None)).await;
    assert_eq!(r.status(), 200);
    let body: PredictResponse = r.json().await.unwrap();
    assert_eq!(body.template_ids.len(), 5);
    assert!(body.latency_ms >= body.model_ms);

    for k in [Some(0), Some(11)] {
        assert_eq!(post_predict(addr, &request("c1", k)).await.status(), 400);
    }
    let mut empty = request("c1", None);
    empty.messages.clear();
    assert_eq!(post_predict(addr, &empty).await.status(), 400);
    let r = reqwest::Client::new()
        .post(format!("http://{addr}/v1/predict"))
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 400);
}

#[tokio::test(flavor = "multi_thread")]
async fn full_queue_is_rejected_with_429() {
    let cfg = ServeConfig {
        queue_depth: 1,
        ..Default::default()
    };
    let (addr, _) = start(cfg, mock(300, 10)).await;
    let reqs = (0..6).map(|i| {
        let req = request(&format!("c{i}"), None);
        tokio::spawn(async move { post_predict(addr, &req).await.status().as_u16() })
    });
    let mut codes = Vec::new();
    for r in reqs.collect::<Vec<_>>() {
        codes.push(r.await.unwrap());
    }
    assert!(codes.contains(&429), "{codes:?}");
    assert!(codes.contains(&200), "{codes:?}");
}

#[tokio::test(flavor = "multi_thread")]
async fn model_backend_serves_a_normalized_ranking() {
    let (art, vocab) = artifact(12);
    let backend = ModelBackend::new(art, vocab, 64).unwrap();
    let (addr, _) = start(ServeConfig::default(), Box::new(backend)).await;

    let req = request("case-9", Some(12));
    let a: PredictResponse = post_predict(addr, &req).await.json().await.unwrap();
    let b: PredictResponse = post_predict(addr, &req).await.json().await.unwrap();
    assert_eq!((&a.template_ids, &a.probabilities), (&b.template_ids, &b.probabilities));
    assert_eq!(a.model_version, b.model_version);
    let total: f64 = a.probabilities.iter().sum();
    assert!((total - 1.0).abs() < 1e-6, "{total}");
    assert!(a.probabilities.windows(2).all(|w| w[0] >= w[1]));
    assert!(a.probabilities.iter().all(|&p| p > 0.0 && p < 1.0));
    let mut ids = a.template_ids.clone();
    ids.sort_unstable();
    assert_eq!(ids, (0..12).collect::<Vec<u32>>());

    let five: PredictResponse = post_predict(addr, &request("case-9", None)).await.json().await.unwrap();
    assert_eq!(five.template_ids, a.template_ids[..5]);
}

#[test]
fn model_backend_rejects_a_foreign_vocabulary() {
    let (mut art, vocab) = artifact(4);
    art.vocab_hash = "0".repeat(64);
    assert!(ModelBackend::new(art, vocab, 64).is_err());
}

#[test]
fn serving_truncation_matches_training() {
    let (art, vocab) = artifact(16);
    let backend = ModelBackend::new(art, vocab.clone(), 24).unwrap();
    let catalog = TemplateCatalog::synthetic(16).unwrap();
    let transcripts = generate_corpus(11, 200, &catalog, 0.5).unwrap();
    let mut n = 0;
    for t in &transcripts {
        for i in t.labeled_replies() {
            let train = build_classification_example(t, i, 24, &vocab).unwrap();
            let serve = backend.context_ids(&PredictRequest::from_transcript(t, i, None)).unwrap();
            assert_eq!(train.token_ids, serve, "case {} reply {i}", t.case_id);
            n += 1;
        }
    }
    assert!(n >= 400);
}

#[test]
fn overlong_message_is_truncated_not_rejected() {
    let (art, vocab) = artifact(4);
    let mut backend = ModelBackend::new(art, vocab, 16).unwrap();
    let mut req = request("long", Some(4));
    req.messages[0].text = "x".repeat(1000);
    assert_eq!(backend.context_ids(&req).unwrap().len(), 16);
    assert_eq!(backend.predict(&req, 4).unwrap().template_ids.len(), 4);
}

fn event(case_id: &str, group: Group, secs: f64) -> SelectionEvent {
    SelectionEvent {
        case_id: case_id.into(),
        timestamp: "2024-03-04T10:00:00Z".parse().unwrap(),
        group,
        shown_template_ids: if group == Group::Treatment { vec![3, 1, 4] } else { vec![] },
        chosen_template_id: 1,
        selection_time_sec: secs,
        model_version: "v".into(),
    }
}

fn ndjson(events: &[SelectionEvent]) -> String {
    events.iter().map(|e| serde_json::to_string(e).unwrap() + "\n").collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn events_are_validated_and_appended() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("logs/events.ndjson");
    let cfg = ServeConfig {
        event_log: Some(log.clone()),
        ..Default::default()
    };
    let (addr, _) = start(cfg, mock(1, 10)).await;
    let client = reqwest::Client::new();
    let url = format!("http://{addr}/v1/events");

    let good = vec![event("a", Group::Treatment, 4.0), event("b", Group::Holdout, 9.5)];
    let r = client.post(&url).body(ndjson(&good)).send().await.unwrap();
    assert_eq!(r.status(), 200);

    let mut bad = good.clone();
    bad[1].shown_template_ids = vec![2];
    let r = client.post(&url).body(ndjson(&bad)).send().await.unwrap();
    assert_eq!(r.status(), 400);
    let r = client.post(&url).body("{}\n").send().await.unwrap();
    assert_eq!(r.status(), 400);

    let logged: Vec<SelectionEvent> = read_ndjson(&log).unwrap();
    assert_eq!(logged, good);
}

#[tokio::test(flavor = "multi_thread")]
async fn every_prediction_is_logged_with_its_group() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("predictions.ndjson");
    let cfg = ServeConfig {
        prediction_log: Some(log.clone()),
        holdout_fraction: 0.5,
        ..Default::default()
    };
    let (addr, _) = start(cfg.clone(), mock(0, 10)).await;
    let mut groups = Vec::new();
    for i in 0..40 {
        let r: PredictResponse = post_predict(addr, &request(&format!("case-{i}"), None)).await.json().await.unwrap();
        assert_eq!(r.group, quicktext::abtest::assign_group(&r.case_id, 0.5, &cfg.salt));
        groups.push(r.group);
    }
    assert!(groups.contains(&Group::Holdout) && groups.contains(&Group::Treatment));
    let logged: Vec<PredictionRecord> = read_ndjson(&log).unwrap();
    assert_eq!(logged.len(), 40);
    assert_eq!(logged.iter().map(|r| r.group).collect::<Vec<_>>(), groups);
    assert!(logged.iter().all(|r| r.template_ids.len() == 5));
}

#[tokio::test(flavor = "multi_thread")]
async fn model_forward_dominates_server_latency_at_one_rps() {
    let (art, vocab) = artifact(32);
    let backend = ModelBackend::new(art, vocab, 64).unwrap();
    let (addr, _state) = start(ServeConfig::default(), Box::new(backend)).await;
    let mut req = request("c", Some(5));
    req.messages[0].text = "my router keeps dropping the connection every evening ".repeat(4);
    let mut overhead = Vec::new();
    for _ in 0..5 {
        let r: PredictResponse = post_predict(addr, &req).await.json().await.unwrap();
        assert!(r.model_ms <= r.latency_ms);
        overhead.push((r.latency_ms - r.model_ms) / r.latency_ms);
        tokio::time::sleep(Duration::from_secs(1)).await;
    }
    overhead.sort_by(f64::total_cmp);
    assert!(overhead[2] < 0.2, "plumbing share {overhead:?}");
}
