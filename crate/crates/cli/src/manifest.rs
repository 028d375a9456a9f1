//! Run manifests: what ran, with which resolved configuration, over which
//! inputs, producing which artifacts.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Every option after defaults were applied.
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// False when only the manifest was requested.
    pub executed: bool,
}

fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    let mut file = fs::File::open(path)?;
    io::copy(&mut file, &mut hasher)?;
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

impl RunManifest {
    pub fn start(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: timestamp(Utc::now()),
            finished_at: None,
            executed: false,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> io::Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileDigest {
            path: path.to_owned(),
            sha256,
        });
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> io::Result<()> {
        let sha256 = sha256_file(path)?;
        self.outputs.push(FileDigest {
            path: path.to_owned(),
            sha256,
        });
        Ok(())
    }

    pub fn finish(&mut self) {
        self.executed = true;
        self.finished_at = Some(timestamp(Utc::now()));
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut json = serde_json::to_vec_pretty(self).map_err(io::Error::other)?;
        json.push(b'\n');
        write_atomic(path, &json)
    }
}

/// Manifest location for a file output: `<out>.manifest.json`.
pub fn manifest_path_for_file(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Manifest location for a directory output.
pub fn manifest_path_for_dir(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Writes through a sibling temporary file and renames it into place, so
/// readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
