use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn metonymy(corpus: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_metonymy"));
    c.arg("--corpus").arg(corpus).env_remove("METONYMY_GATEWAY").env("SOURCE_DATE_EPOCH", "1700000000");
    c
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "stderr: {}\nstdout: {stdout}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn json(out: Output) -> Value {
    serde_json::from_str(&ok(out)).unwrap()
}

fn build_corpus(dir: &Path, seed: &str) {
    let v = json(
        metonymy(dir)
            .args(["filter", "--ratings"])
            .arg(fixture("ratings.csv"))
            .arg("--supersenses")
            .arg(fixture("supersenses.csv"))
            .output()
            .unwrap(),
    );
    assert_eq!(v["concepts"], 13);
    assert_eq!(v["retained"], 10);
    assert_eq!(v["rejected_concreteness"], 2);
    assert_eq!(v["rejected_category"], 1);

    let v = json(metonymy(dir).args(["generate", "--seed", seed]).output().unwrap());
    assert_eq!(v["concepts"], 10);
    assert_eq!(v["new_images"].as_u64().unwrap() + v["new_failures"].as_u64().unwrap(), 20);
}

#[test]
fn full_chain_on_mock_backends() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    build_corpus(dir, "7");

    // Re-running generation resumes instead of redoing work.
    let v = json(metonymy(dir).args(["generate", "--seed", "7"]).output().unwrap());
    assert_eq!(v["new_images"], 0);
    assert_eq!(v["new_failures"], 0);

    let graph = format!("file:{}", fixture("edges.tsv").display());
    let v = json(metonymy(dir).args(["distract", "--graph", &graph]).output().unwrap());
    let built = v["built"].as_u64().unwrap();
    assert!(built > 0, "{v}");
    let v = json(metonymy(dir).args(["distract", "--graph", &graph]).output().unwrap());
    assert_eq!(v["built"], 0);
    assert_eq!(v["already_present"], built);

    let v = json(metonymy(dir).args(["assemble", "--seed", "3"]).output().unwrap());
    assert_eq!(v["items"], built);

    let v = json(metonymy(dir).args(["evaluate", "--model", "mock-vlm"]).output().unwrap());
    assert_eq!(v["items"], built);
    assert!(dir.join("results/mock-vlm.jsonl").exists());

    let md = ok(metonymy(dir).args(["score", "--report", "md"]).output().unwrap());
    assert!(md.contains("| mock-vlm |"), "{md}");
    assert!(md.contains("reference, not reproduced"));
    let v = json(metonymy(dir).args(["score", "--report", "json"]).output().unwrap());
    let overall = &v["results"][0]["overall"];
    assert!(overall["correct"].as_u64().unwrap() <= overall["answered"].as_u64().unwrap());

    let v = json(metonymy(dir).arg("verify").output().unwrap());
    assert_eq!(v["findings"].as_array().unwrap().len(), 0, "{v}");
}

#[test]
fn generation_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_corpus(a.path(), "11");
    build_corpus(b.path(), "11");
    let read = |d: &Path| std::fs::read(d.join("manifest.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn verify_reports_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    build_corpus(dir, "1");
    let png = walk_pngs(&dir.join("images")).into_iter().next().unwrap();
    std::fs::write(&png, b"tampered").unwrap();
    let out = metonymy(dir).arg("verify").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["findings"].as_array().unwrap().iter().any(|f| f["kind"] == "hash_mismatch"), "{v}");
}

fn walk_pngs(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap().flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(walk_pngs(&p));
        } else if p.extension().is_some_and(|x| x == "png") {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = metonymy(tmp.path()).args(["distract", "--graph", "sparql"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--graph"));
    let out = metonymy(tmp.path()).args(["distract", "--mix", "2v2s", "--graph", "file:/nonexistent"]).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("total 3"));
    let out = metonymy(tmp.path()).arg("generate").output().unwrap();
    assert!(!out.status.success());
    let out = metonymy(tmp.path()).args(["generate", "--styles", "cubist"]).output().unwrap();
    assert!(!out.status.success());
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http_get(port: u16, path: &str, token: Option<&str>) -> Option<(u16, String)> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    let auth = token.map(|t| format!("Authorization: Bearer {t}\r\n")).unwrap_or_default();
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\n{auth}Connection: close\r\n\r\n").ok()?;
    let mut buf = String::new();
    s.read_to_string(&mut buf).ok()?;
    let status = buf.split_whitespace().nth(1)?.parse().ok()?;
    let body = buf.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    Some((status, body))
}

fn spawn_server(dir: &Path, extra: &[&str]) -> (Server, u16) {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let server = Server(
        metonymy(dir)
            .args(["annotate", "serve", "--port", &port.to_string()])
            .args(extra)
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    (server, port)
}

fn wait_get(port: u16, path: &str, token: Option<&str>) -> (u16, String) {
    let start = Instant::now();
    loop {
        if let Some(r) = http_get(port, path, token) {
            return r;
        }
        assert!(start.elapsed() < Duration::from_secs(20), "server did not come up");
        std::thread::sleep(Duration::from_millis(50));
    }
}

#[test]
fn annotate_serve_answers_http() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    build_corpus(dir, "5");
    let tokens = dir.join("tokens.txt");
    std::fs::write(&tokens, "secret-1=ann1\n").unwrap();
    let (_server, port) = spawn_server(dir, &["--tokens", tokens.to_str().unwrap()]);
    let (status, body) = wait_get(port, "/tasks/next", Some("secret-1"));
    assert_eq!(status, 200, "{body}");
    assert!(body.contains("\"status\":\"task\""), "{body}");
    assert_eq!(http_get(port, "/tasks/next", None).unwrap().0, 401);
    let (status, body) = http_get(port, "/guidelines", Some("secret-1")).unwrap();
    assert_eq!(status, 200);
    assert!(!body.trim().is_empty());
}

#[test]
fn annotate_serve_sample_limits_the_pool() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    build_corpus(dir, "5");
    let (_server, port) = spawn_server(dir, &["--sample", "3", "--sample-seed", "1"]);
    let (status, body) = wait_get(port, "/tasks/next?annotator=a", None);
    assert_eq!(status, 200, "{body}");
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["task"]["remaining"], 3, "{v}");
}

#[test]
fn partial_gateway_config_falls_back_to_mocks() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = dir.join("gateway.toml");
    std::fs::write(&cfg, "[backends.always-b]\ncapability = \"multimodal\"\nurl = \"mock://constant?answer=B\"\n").unwrap();
    build_corpus(dir, "2");
    let graph = format!("file:{}", fixture("edges.tsv").display());
    ok(metonymy(dir).arg("--gateway").arg(&cfg).args(["distract", "--graph", &graph]).output().unwrap());
    ok(metonymy(dir).args(["assemble", "--seed", "1"]).output().unwrap());
    let v = json(metonymy(dir).arg("--gateway").arg(&cfg).args(["evaluate", "--model", "always-b"]).output().unwrap());
    assert_eq!(v["model"], "always-b");
    let out = metonymy(dir).arg("--gateway").arg(&cfg).args(["evaluate", "--model", "nope"]).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("no backend named nope"));
}
