#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use occ_core::store::write_study_dir;
use occ_core::synth::cohort_study;
use occ_core::StudyBundle;

pub fn occ() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_occ"));
    c.env_remove("OCC_CONFIG")
        .env_remove("OCC_API_KEY")
        .env_remove("OCC_ENDPOINT")
        .env_remove("OCC_MODEL")
        .env_remove("OCC_TEMPERATURE");
    c
}

pub fn run(args: &[&str]) -> Output {
    occ().args(args).output().expect("spawn occ")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "occ {args:?} failed: {}", stderr(&o));
    stdout(&o)
}

/// Writes cohort phantom `i` to `root/<study id>` and returns the bundle.
pub fn cohort_dir(root: &Path, i: usize) -> (PathBuf, StudyBundle) {
    let b = cohort_study(i, 11).unwrap();
    let dir = root.join(&b.study_id);
    write_study_dir(&b, &dir).unwrap();
    (dir, b)
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

/// An `occ serve` child on a free port, killed on drop.
pub struct Server {
    pub child: Child,
    pub base: String,
}

impl Server {
    pub fn start(store: &Path, extra: &[&str]) -> Server {
        Self::start_with_env(store, extra, &[])
    }

    pub fn start_with_env(store: &Path, extra: &[&str], env: &[(&str, &str)]) -> Server {
        let mut cmd = occ();
        cmd.args(["serve", "--store", store.to_str().unwrap(), "--port", "0"])
            .args(extra)
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        for (k, v) in env {
            cmd.env(k, v);
        }
        let mut child = cmd.spawn().expect("spawn occ serve");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected banner `{line}`"))
            .to_string();
        Server { child, base }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    /// SIGKILL, no shutdown hooks.
    pub fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub const BOUNDARY: &str = "occ-test-boundary-7f3a";

/// A multipart/form-data body with one part per `(name, bytes)`.
pub fn multipart(parts: &[(&str, &[u8])]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, bytes) in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        body.extend_from_slice(
            format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\n").as_bytes(),
        );
        body.extend_from_slice(b"Content-Type: application/octet-stream\r\n\r\n");
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

/// Uploads every file of a study directory as a full bundle.
pub fn upload_dir(agent: &ureq::Agent, server: &Server, dir: &Path) -> u16 {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect();
    files.sort();
    let parts: Vec<(&str, &[u8])> = files.iter().map(|(n, b)| (n.as_str(), b.as_slice())).collect();
    agent
        .post(&server.url("/studies"))
        .header("Content-Type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .send(&multipart(&parts)[..])
        .unwrap()
        .status()
        .as_u16()
}
