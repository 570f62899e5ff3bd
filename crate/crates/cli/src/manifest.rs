use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliResult, Failure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_ms: u128,
    pub elapsed_ms: f64,
    /// Named stage durations in milliseconds.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stages: BTreeMap<String, f64>,
}

/// Record of one command run: enough to rerun it and check its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub providers: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub timing: Timing,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Collects manifest fields while a command runs.
pub struct Recorder {
    manifest: RunManifest,
    start: Instant,
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or_default();
        Self {
            manifest: RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                argv: std::env::args().collect(),
                config: serde_json::Value::Null,
                inputs: Vec::new(),
                providers: BTreeMap::new(),
                outputs: Vec::new(),
                timing: Timing {
                    started_unix_ms: started,
                    ..Timing::default()
                },
                warnings: Vec::new(),
            },
            start: Instant::now(),
        }
    }

    /// Reads an input file and records its digest.
    pub fn read(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Failure::from(e).context(display(path)))?;
        self.manifest.inputs.push(InputDigest {
            path: display(path),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(bytes)
    }

    pub fn read_string(&mut self, path: &Path) -> CliResult<String> {
        let bytes = self.read(path)?;
        String::from_utf8(bytes).map_err(|_| Failure::new(crate::error::Category::Input, format!("{}: not UTF-8", display(path))))
    }

    /// Records the digest of an input read by someone else.
    pub fn digest(&mut self, path: &Path) -> CliResult<()> {
        self.read(path).map(drop)
    }

    pub fn config(&mut self, config: &impl Serialize) {
        self.manifest.config = serde_json::to_value(config).unwrap_or_default();
    }

    pub fn provider(&mut self, role: &str, name: &str) {
        self.manifest.providers.insert(role.to_string(), name.to_string());
    }

    pub fn stage(&mut self, name: &str, ms: f64) {
        *self.manifest.timing.stages.entry(name.to_string()).or_default() += ms;
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.manifest.warnings.push(message.into());
    }

    /// Refuses to write over any recorded input.
    pub fn check_output(&self, path: &Path) -> CliResult<()> {
        let target = fs::canonicalize(path).ok();
        for input in &self.manifest.inputs {
            let same = match (&target, fs::canonicalize(&input.path).ok()) {
                (Some(a), Some(b)) => *a == b,
                _ => false,
            };
            if same {
                return Err(Failure::usage(format!(
                    "output {} would overwrite an input file",
                    display(path)
                )));
            }
        }
        Ok(())
    }

    /// Writes an output file and records it.
    pub fn write(&mut self, path: &Path, contents: &[u8]) -> CliResult<()> {
        self.check_output(path)?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, contents).map_err(|e| Failure::from(e).context(display(path)))?;
        self.output(path);
        Ok(())
    }

    /// Records an output written by someone else.
    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(display(path));
    }

    /// Finalizes timing and writes the manifest to `path`.
    pub fn finish(mut self, path: &Path) -> CliResult<RunManifest> {
        self.manifest.timing.elapsed_ms = self.start.elapsed().as_secs_f64() * 1e3;
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Failure::from(e).context(display(path)))?;
        tracing::info!(
            command = %self.manifest.command,
            elapsed_ms = self.manifest.timing.elapsed_ms,
            manifest = %path.display(),
            "run complete"
        );
        Ok(self.manifest)
    }
}

/// `<file>.manifest.json` beside a file output.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}
