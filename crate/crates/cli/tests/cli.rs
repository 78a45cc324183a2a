use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use quicktext::abtest::Direction;
use quicktext::scaling::{read_points, FITS_FILE, POINTS_FILE};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_quicktext"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn quicktext")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = run(args);
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn tiny_manifest(dir: &Path, presets: &str, extra: &str) -> PathBuf {
    let path = dir.join("run.ini");
    std::fs::write(
        &path,
        format!(
            "[run]\nseed = 3\nout = {}\nrun-id = t\n\
             [corpus]\nn-cases = 160\nn-templates = 8\nambiguity = 0.2\npool-size = 50\n\
             [tokenizer]\nvocab-size = 300\nsample-cases = 50\n\
             [model]\npresets = {presets}\n\
             [adapt]\nmax-position-embeddings = 32\nmax-steps = 10\nsave-steps = 0.2\neval-steps = 0.2\nbatch size = 4\n\
             [finetune]\nbatch size = 8\n{extra}",
            dir.join("runs").display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn invalid_manifest_exits_2_with_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("bad.ini");
    std::fs::write(&m, "[adapt]\nsave-step = 0.1\n").unwrap();
    let (c, err) = code(&["gen-corpus", "-m", m.to_str().unwrap()]);
    assert_eq!(c, 2);
    assert!(err.contains("adapt.save-step"), "{err}");
}

#[test]
fn missing_prerequisite_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_manifest(dir.path(), "nano", "");
    let (c, err) = code(&["train-tokenizer", "-m", m.to_str().unwrap()]);
    assert_eq!(c, 2);
    assert!(err.contains("gen-corpus"), "{err}");
}

#[test]
fn unreadable_input_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let pts = dir.path().join("nope.csv");
    let (c, _) = code(&["scaling-report", "--points", pts.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(c, 4);
}

#[test]
fn staged_pipeline_writes_artifacts_and_stamps() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_manifest(dir.path(), "nano", "");
    let ms = m.to_str().unwrap();
    let root = dir.path().join("runs/t");

    ok(&["gen-corpus", "-m", ms]);
    for f in ["corpus/transcripts.ndjson", "corpus/catalog.csv", "corpus/pool.ndjson", "corpus/stamp-gen-corpus.json"] {
        assert!(root.join(f).exists(), "{f}");
    }
    ok(&["train-tokenizer", "-m", ms]);
    assert!(root.join("tokenizer/vocab.txt").exists());
    let out = ok(&["adapt", "-m", ms]);
    assert_eq!(out.lines().filter(|l| l.starts_with("nano step")).count(), 5, "{out}");
    assert!(root.join("adapt/nano/step-000010.qtc").exists());
    assert!(root.join("adapt/nano/ledger.ndjson").exists());

    ok(&["finetune", "-m", ms]);
    ok(&["finetune", "-m", ms, "--step", "4"]);
    ok(&["finetune", "-m", ms, "--from-init"]);
    for d in ["nano-step000010", "nano-step000004", "nano-init"] {
        let d = root.join("finetune").join(d);
        assert!(d.join("classifier.qtc").exists());
        let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("metrics.json")).unwrap()).unwrap();
        assert!(metrics["metrics"]["cls_loss"].as_f64().unwrap() > 0.0);
        let stamp: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join("stamp-finetune.json")).unwrap()).unwrap();
        assert_eq!(stamp["seed"], 3);
        assert_eq!(stamp["config_hash"].as_str().unwrap().len(), 64);
        assert!(!stamp["inputs"].as_object().unwrap().is_empty());
    }
    let (c, _) = code(&["finetune", "-m", ms, "--step", "7"]);
    assert_eq!(c, 2);
}

#[test]
fn sweep_three_presets_five_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_manifest(dir.path(), "nano, micro, mini", "[sweep]\nworkers = 2\n");
    ok(&["sweep", "-m", m.to_str().unwrap()]);
    let scaling = dir.path().join("runs/t/scaling");
    let points = read_points(&scaling.join(POINTS_FILE)).unwrap();
    assert_eq!(points.len(), 15);
    for w in points.windows(2) {
        assert!((w[0].n_params, w[0].tokens_seen) <= (w[1].n_params, w[1].tokens_seen));
    }
    assert!(scaling.join(FITS_FILE).exists());
    for x in ["flops", "tokens", "lmloss"] {
        assert!(scaling.join(format!("scaling_loss_vs_{x}.svg")).exists());
        assert!(scaling.join(format!("scaling_top5_vs_{x}.svg")).exists());
    }
    assert!(dir.path().join("runs/t/stamp-sweep.json").exists());

    let report = dir.path().join("report");
    let out = ok(&["scaling-report", "--points", scaling.join(POINTS_FILE).to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert!(out.contains("fit all cls_loss vs lm_loss"), "{out}");
    assert_eq!(read_points(&report.join(POINTS_FILE)).unwrap(), points);
}

#[test]
fn sweep_rerun_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let m = tiny_manifest(d.path(), "nano, micro", "[sweep]\nworkers = 1\n");
        ok(&["sweep", "-m", m.to_str().unwrap()]);
    }
    for f in ["scaling/scaling_points.csv", "scaling/scaling_fits.csv", "adapt/nano/step-000010.qtc", "adapt/micro/ledger.ndjson"] {
        let x = std::fs::read(a.path().join("runs/t").join(f)).unwrap();
        let y = std::fs::read(b.path().join("runs/t").join(f)).unwrap();
        assert!(x == y, "{f} differs between reruns");
    }
}

#[test]
fn abtest_subcommands_on_simulated_logs() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let out = ok(&["abtest", "simulate", "--out", &d("sim"), "--sessions", "20000", "--holdout-fraction", "0.1", "--seed", "4"]);
    assert!(out.contains("20000 events"), "{out}");
    let events = d("sim/events.ndjson");

    let out = ok(&["abtest", "summarize", "--events", &events, "--out", &d("sum")]);
    assert_eq!(out.lines().count(), 1 + 8, "{out}");
    assert!(dir.path().join("sum/weekly_selection_time.csv").exists());
    assert!(dir.path().join("sum/weekly_difference.svg").exists());

    ok(&["abtest", "trend", "--events", &events, "--predictions", &d("sim/predictions.ndjson"), "--out", &d("trend")]);
    let trend: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("trend/trend.json")).unwrap()).unwrap();
    let dir_name = serde_json::to_value(Direction::Increasing).unwrap();
    assert_eq!(trend["savings_vs_accuracy"]["direction"], dir_name);
    assert!(dir.path().join("trend/accuracy_vs_savings.csv").exists());

    ok(&["abtest", "compare", "--events", &events, "--out", &d("cmp")]);
    let cmp: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("cmp/compare.json")).unwrap()).unwrap();
    assert!(cmp["p_value"].as_f64().unwrap() < 1e-6);
    assert!(cmp["mean_a"].as_f64().unwrap() > cmp["mean_b"].as_f64().unwrap());

    let (c, err) = code(&["abtest", "compare", "--events", &events, "--by", "model-version", "--out", &d("cmp2")]);
    assert_eq!(c, 2, "{err}");
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn wait_healthy(port: u16) {
    let t0 = Instant::now();
    while t0.elapsed() < Duration::from_secs(30) {
        if let Ok(mut s) = std::net::TcpStream::connect(("127.0.0.1", port)) {
            use std::io::{Read, Write};
            let _ = s.write_all(b"GET /health HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n");
            let mut buf = String::new();
            let _ = s.read_to_string(&mut buf);
            if buf.starts_with("HTTP/1.1 200") {
                return;
            }
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    panic!("server on {port} never became healthy");
}

#[test]
fn serve_and_loadtest_binaries() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_manifest(dir.path(), "nano", "");
    let ms = m.to_str().unwrap();
    ok(&["gen-corpus", "-m", ms]);
    ok(&["train-tokenizer", "-m", ms]);
    ok(&["adapt", "-m", ms]);
    ok(&["finetune", "-m", ms]);
    let root = dir.path().join("runs/t");
    let port = free_port();
    let preds = dir.path().join("logs/predictions.ndjson");
    let _server = Server(
        bin()
            .args([
                "serve",
                "--checkpoint",
                root.join("finetune/nano-step000010/classifier.qtc").to_str().unwrap(),
                "--vocab",
                root.join("tokenizer/vocab.txt").to_str().unwrap(),
                "--catalog",
                root.join("corpus/catalog.csv").to_str().unwrap(),
                "--port",
                &port.to_string(),
                "--prediction-log",
                preds.to_str().unwrap(),
            ])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    wait_healthy(port);
    let report = dir.path().join("lt/report.csv");
    let out = ok(&[
        "loadtest",
        "--rps",
        "2,4",
        "--duration",
        "1.5",
        "--pool",
        root.join("corpus/pool.ndjson").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
        "--url",
        &format!("http://127.0.0.1:{port}"),
    ]);
    assert!(out.starts_with("rate\tavg_ms\tpeak_1min_avg_ms\tp99_ms\tmax_ms"), "{out}");
    let mut rd = csv::Reader::from_path(&report).unwrap();
    let headers: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&headers[..5], ["rate", "avg_ms", "peak_1min_avg_ms", "p99_ms", "max_ms"]);
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(&r[5], "0", "errors in {r:?}");
    }
    assert!(dir.path().join("lt/report.samples.csv").exists());
    assert!(dir.path().join("lt/stamp-loadtest.json").exists());
    let logged = std::fs::read_to_string(&preds).unwrap();
    assert_eq!(logged.lines().count(), 3 + 6);
}

#[test]
fn serve_rejects_a_mismatched_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_manifest(dir.path(), "nano", "");
    let ms = m.to_str().unwrap();
    ok(&["gen-corpus", "-m", ms]);
    ok(&["train-tokenizer", "-m", ms]);
    let root = dir.path().join("runs/t");
    ok(&["finetune", "-m", ms, "--from-init"]);
    let cat = dir.path().join("small.csv");
    quicktext::corpus::TemplateCatalog::synthetic(4).unwrap().write_csv(&cat).unwrap();
    let port = free_port();
    let mut child = Server(
        bin()
            .args([
                "serve",
                "--checkpoint",
                root.join("finetune/nano-init/classifier.qtc").to_str().unwrap(),
                "--vocab",
                root.join("tokenizer/vocab.txt").to_str().unwrap(),
                "--catalog",
                cat.to_str().unwrap(),
                "--port",
                &port.to_string(),
            ])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    std::thread::sleep(Duration::from_millis(800));
    let resp = reqwest_free_health(port);
    assert!(resp.starts_with("HTTP/1.1 503"), "{resp}");
    assert!(resp.contains("failed"), "{resp}");
    let _ = child.0.kill();
}

fn reqwest_free_health(port: u16) -> String {
    use std::io::{Read, Write};
    let mut s = std::net::TcpStream::connect(("127.0.0.1", port)).unwrap();
    s.write_all(b"GET /health HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n").unwrap();
    let mut buf = String::new();
    s.read_to_string(&mut buf).unwrap();
    buf
}
