use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

/// Self-describing record of one command invocation, written next to its
/// primary output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub engine_version: String,
    pub started_at: String,
    pub duration_secs: f64,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_owned(),
                config: serde_json::to_value(config).expect("config serializes"),
                seed: None,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                engine_version: env!("CARGO_PKG_VERSION").to_owned(),
                started_at: chrono::Utc::now().to_rfc3339(),
                duration_secs: 0.0,
            },
            start: Instant::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.manifest.seed = Some(seed);
        self
    }

    pub fn input(&mut self, name: &str, path: &Path) -> &mut Self {
        self.manifest.inputs.insert(name.to_owned(), path.to_owned());
        self
    }

    pub fn output(&mut self, name: &str, path: &Path) -> &mut Self {
        self.manifest.outputs.insert(name.to_owned(), path.to_owned());
        self
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        if let serde_json::Value::Object(map) = &mut self.manifest.config {
            map.insert(key.to_owned(), serde_json::to_value(value).expect("serializable"));
        }
        self
    }

    /// Stamps the duration and writes the manifest beside `primary`.
    pub fn finish(mut self, primary: &Path) -> io::Result<PathBuf> {
        self.manifest.duration_secs = self.start.elapsed().as_secs_f64();
        let path = manifest_path(primary);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&path, json.as_bytes())?;
        Ok(path)
    }
}

/// `<dir>/run.json` for directories, `<file>.run.json` otherwise.
pub fn manifest_path(primary: &Path) -> PathBuf {
    if primary.is_dir() {
        primary.join("run.json")
    } else {
        let mut name = primary.file_name().unwrap_or_default().to_os_string();
        name.push(".run.json");
        primary.with_file_name(name)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(format!(".tmp-{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
