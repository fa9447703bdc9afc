#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

pub fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/corpus.jsonl")
}

/// A scratch workspace with a config pointing every endpoint kind at `base_url`.
pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new(base_url: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = json!({
            "endpoints": {
                "gen": {"base_url": base_url, "model": "mock-gen", "kind": "generation"},
                "emb": {"base_url": base_url, "model": "mock-emb", "kind": "embedding"},
                "fact": {"base_url": base_url, "model": "mock-fact", "kind": "factuality"},
                "probs-a": {"base_url": base_url, "model": "mock-a", "kind": "token-probs"},
                "probs-b": {"base_url": base_url, "model": "mock-b", "kind": "token-probs"}
            },
            "defaults": {"base_delay_ms": 5, "max_delay_ms": 20, "max_attempts": 2},
            "paths": {"data_dir": "data"}
        });
        std::fs::write(
            dir.path().join("perspectra.config.json"),
            serde_json::to_string_pretty(&config).unwrap(),
        )
        .unwrap();
        Self { dir }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs the binary with this workspace as the working directory.
    pub fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_perspectra"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("PERSPECTRA_API_KEY")
            .output()
            .unwrap()
    }

    pub fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    pub fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.path(name)).unwrap()
    }
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}
