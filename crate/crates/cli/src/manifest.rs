use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    /// Hash a file written under `out`; the recorded path is relative to `out`.
    pub fn of(out: &Path, name: &str) -> Result<Self> {
        let data = std::fs::read(out.join(name))?;
        Ok(Self {
            path: PathBuf::from(name),
            sha256: sha256_hex(&data),
            bytes: data.len() as u64,
        })
    }
}

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub nhflow: &'static str,
    pub nhflow_cli: &'static str,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub experiment: &'static str,
    pub seed: u64,
    /// SHA-256 of the resolved configuration as serialized below.
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub input_file: Option<InputFile>,
    pub versions: Versions,
    pub wall_time_s: f64,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn new(
        cfg: &ExperimentConfig,
        input_file: Option<InputFile>,
        wall_time_s: f64,
        artifacts: Vec<Artifact>,
    ) -> Result<Self> {
        Ok(Self {
            schema_version: nhflow::io::SCHEMA_VERSION,
            experiment: cfg.experiment.name(),
            seed: cfg.seed,
            config_sha256: sha256_hex(&serde_json::to_vec(cfg)?),
            config: cfg.clone(),
            input_file,
            versions: Versions {
                nhflow: nhflow::VERSION,
                nhflow_cli: env!("CARGO_PKG_VERSION"),
            },
            wall_time_s,
            artifacts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
