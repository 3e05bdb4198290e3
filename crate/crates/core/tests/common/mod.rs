#![allow(dead_code)]

pub mod oracles;

use std::path::{Path, PathBuf};

use findoc::runner::{BackendKind, RunConfig};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Config for the two-round DSCR scenario with every output under `work`.
pub fn dscr_config(work: &Path) -> RunConfig {
    let dscr = fixtures().join("dscr");
    let mut c = RunConfig::default();
    c.paths.corpus = dscr.join("corpus");
    c.paths.dataset = dscr.join("dataset.jsonl");
    c.paths.output = work.join("runs");
    c.paths.index_dir = work.join("indices");
    c.backend.kind = BackendKind::Scripted;
    c.backend.script = Some(dscr.join("script.json"));
    c.workers = 2;
    c
}

pub fn sha256_file(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}
