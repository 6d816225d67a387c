#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csdmt_core::checkpoint::Checkpoint;
use csdmt_core::facedata::{sample_id, write_synthetic_dataset, Domain};
use csdmt_core::{ArchConfig, ParamSet};

pub const SIZE: usize = 32;

pub fn csdmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csdmt"))
        .args(args)
        .env_remove("CSDMT_CHECKPOINT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("run csdmt")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic dataset and an untrained toy checkpoint.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        write_synthetic_dataset(&data, 5, 3, 3, SIZE).unwrap();
        let checkpoint = dir.path().join("toy.safetensors");
        Checkpoint::new(ParamSet::init(&ArchConfig::toy(2)).unwrap())
            .save(&checkpoint)
            .unwrap();
        Self { dir, data, checkpoint }
    }

    pub fn image(&self, domain: Domain, index: u64) -> PathBuf {
        self.data
            .join("images")
            .join(domain.dir_name())
            .join(format!("{}.png", sample_id(5, domain, index)))
    }

    pub fn parsing(&self, domain: Domain, index: u64) -> PathBuf {
        self.data
            .join("parsing")
            .join(domain.dir_name())
            .join(format!("{}.png", sample_id(5, domain, index)))
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}
