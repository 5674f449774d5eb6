//! Run manifest: what ran, with what inputs, producing which artifacts.

use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Serialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub bytes: u64,
    /// FNV-1a content fingerprint (hex).
    pub fnv1a: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub scenario_name: String,
    pub seed: u64,
    pub overrides: Vec<String>,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<ArtifactRecord>,
    pub exit_status: i32,
    /// Free-form notes (warnings, shortcuts taken).
    pub notes: Vec<String>,
}

pub struct ManifestBuilder {
    command: String,
    scenario_name: String,
    seed: u64,
    overrides: Vec<String>,
    started: Instant,
    outputs: Vec<ArtifactRecord>,
    notes: Vec<String>,
}

impl ManifestBuilder {
    pub fn new(command: &str, scenario_name: &str, seed: u64, overrides: &[String]) -> Self {
        ManifestBuilder {
            command: command.into(),
            scenario_name: scenario_name.into(),
            seed,
            overrides: overrides.to_vec(),
            started: Instant::now(),
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn note(&mut self, message: impl Into<String>) {
        self.notes.push(message.into());
    }

    /// Writes a file and records it in the manifest.
    pub fn write_artifact(&mut self, path: &Path, contents: &[u8]) -> std::io::Result<()> {
        std::fs::write(path, contents)?;
        self.outputs.push(ArtifactRecord {
            path: path.display().to_string(),
            bytes: contents.len() as u64,
            fnv1a: format!("{:016x}", mfg_core::csvio::fnv1a(contents)),
        });
        Ok(())
    }

    /// Finalizes the manifest; written even on structured failure.
    pub fn finish(self, dir: &Path, exit_status: i32) -> std::io::Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            scenario_name: self.scenario_name,
            seed: self.seed,
            overrides: self.overrides,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs,
            exit_status,
            notes: self.notes,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())?;
        Ok(path)
    }
}
