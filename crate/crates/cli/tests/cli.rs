use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn splatseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatseg"))
        .current_dir(dir)
        .env_remove("SPLATSEG_ADAPTER")
        .env_remove("SPLATSEG_CONFIG")
        .args(args)
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path) {
    let out = splatseg(dir, &["synth", "."]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn synth_then_full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    for step in [&["ingest"][..], &["group"], &["distill"], &["query", "green blob"], &["eval"], &["render", "--query", "green blob"]] {
        let out = splatseg(dir.path(), step);
        assert!(out.status.success(), "{step:?}: {}", stderr(&out));
    }
    let masks = std::fs::read_dir(dir.path().join("out/queries/green-blob")).unwrap().count();
    assert_eq!(masks, 24);
    let query: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/queries/green-blob.json")).unwrap()).unwrap();
    assert_eq!(query["format"], "splatseg.query/1");
    assert_eq!(query["matched"][0]["best_name"], "green blob");
    assert_eq!(query["fallback"], false);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert!(report["selection"]["miou"].as_f64().unwrap() >= 0.9);
    assert_eq!(std::fs::read_dir(dir.path().join("out/renders/green-blob")).unwrap().count(), 24);
}

#[test]
fn corrupt_scene_is_an_input_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    std::fs::write(dir.path().join("scene.ply"), b"ply\nformat ascii 1.0\nend_header\n").unwrap();
    let out = splatseg(dir.path(), &["ingest"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = splatseg(dir.path(), &["group"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("scene.ply"), "{}", stderr(&out));
}

#[test]
fn unreachable_adapter_exits_with_client_code() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    assert!(splatseg(dir.path(), &["ingest"]).status.success());
    assert!(splatseg(dir.path(), &["group"]).status.success());
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let adapter = format!("adapter=tcp://127.0.0.1:{port}");
    let out = splatseg(dir.path(), &["distill", "--set", &adapter, "--set", "retry_backoff_ms=1"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn adapter_endpoint_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    assert!(splatseg(dir.path(), &["ingest"]).status.success());
    assert!(splatseg(dir.path(), &["group"]).status.success());
    let bin = env!("CARGO_BIN_EXE_splatseg");
    let out = Command::new(bin)
        .current_dir(dir.path())
        .env("SPLATSEG_ADAPTER", format!("stdio:{bin} mock-adapter"))
        .arg("distill")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("red blob"));
}

#[test]
fn empty_mask_root_gives_zero_groups() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    std::fs::remove_dir_all(dir.path().join("masks")).unwrap();
    std::fs::create_dir(dir.path().join("masks")).unwrap();
    assert!(splatseg(dir.path(), &["ingest"]).status.success());
    let out = splatseg(dir.path(), &["group"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("0 groups"));
}

#[test]
fn missing_artifact_names_the_command() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = splatseg(dir.path(), &["query", "red blob"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("splatseg distill"), "{}", stderr(&out));
}

#[test]
fn bad_config_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = splatseg(dir.path(), &["ingest", "--set", "entropy_threshold=2.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("entropy_threshold"), "{}", stderr(&out));
    let out = splatseg(dir.path(), &["ingest", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mock_adapter_speaks_ndjson_over_stdio() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_splatseg"))
        .args(["mock-adapter", "--dim", "8"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let mut ask = |request: &str| -> serde_json::Value {
        writeln!(stdin, "{request}").unwrap();
        stdin.flush().unwrap();
        serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap()
    };
    let hello = ask(r#"{"op":"hello"}"#);
    assert_eq!(hello["dim"], 8);
    let embed = ask(r#"{"op":"embed","texts":["a","b"]}"#);
    assert_eq!(embed["vectors"].as_array().unwrap().len(), 2);
    assert_eq!(embed["vectors"][0].as_array().unwrap().len(), 8);
    let bad = ask("not json");
    assert!(bad.get("error").is_some());
    drop(stdin);
    assert!(child.wait().unwrap().success());
}
