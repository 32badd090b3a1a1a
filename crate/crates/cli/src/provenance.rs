//! RunManifest bookkeeping shared by all subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use bvae_core::datasets::ImageDataset;
use bvae_core::eval::RunManifest;
use bvae_core::store::{self, write_atomic};
use serde::Serialize;

pub struct Run {
    manifest: RunManifest,
    clock: Instant,
}

impl Run {
    /// `args` is the parsed subcommand; its fields become the manifest
    /// parameters, except `out`, which only locates the results.
    pub fn start(command: &str, argv: &[String], args: &impl Serialize) -> Result<Self> {
        let mut parameters = BTreeMap::new();
        if let serde_json::Value::Object(map) = serde_json::to_value(args)? {
            for (k, v) in map {
                if k == "out" || v.is_null() {
                    continue;
                }
                let text = match v {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                parameters.insert(k, text);
            }
        }
        let mut artifact_versions = BTreeMap::new();
        artifact_versions.insert("bvae".to_string(), env!("CARGO_PKG_VERSION").to_string());
        artifact_versions.insert(
            "container_format".to_string(),
            store::FORMAT_VERSION.to_string(),
        );
        let working_dir = std::env::current_dir()
            .context("reading the working directory")?
            .to_string_lossy()
            .into_owned();
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(Run {
            manifest: RunManifest {
                manifest_id: String::new(),
                command: command.to_string(),
                argv: argv.to_vec(),
                working_dir,
                parameters,
                config_digest: None,
                dataset_digests: BTreeMap::new(),
                seeds: BTreeMap::new(),
                artifact_versions,
                revision: revision(),
                outputs: Vec::new(),
                started_unix,
                elapsed_ms: 0,
            },
            clock: Instant::now(),
        })
    }

    pub fn config(&mut self, digest: String) {
        self.manifest.config_digest = Some(digest);
    }

    pub fn dataset(&mut self, role: &str, ds: &ImageDataset) {
        self.manifest
            .dataset_digests
            .insert(role.to_string(), ds.digest());
    }

    pub fn digest(&mut self, role: &str, digest: String) {
        self.manifest
            .dataset_digests
            .insert(role.to_string(), digest);
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.to_string(), seed);
    }

    /// Id as of now; stable once all inputs are recorded.
    pub fn id(&self) -> String {
        self.manifest.compute_id()
    }

    /// Seals the manifest, writes it to `path` and returns it.
    pub fn finish(mut self, outputs: &[PathBuf], path: &Path) -> Result<RunManifest> {
        self.manifest.outputs = outputs
            .iter()
            .map(|p| p.to_string_lossy().into_owned())
            .collect();
        self.manifest.elapsed_ms = self.clock.elapsed().as_millis() as u64;
        let manifest = self.manifest.seal();
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
        eprintln!(
            "run {} recorded in {}",
            manifest.manifest_id,
            path.display()
        );
        Ok(manifest)
    }
}

/// Sidecar manifest location for a single output file.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn revision() -> String {
    if let Ok(r) = std::env::var("BVAE_REVISION") {
        return r;
    }
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--abbrev=12"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}
