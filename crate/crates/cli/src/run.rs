use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Bad invocation. Maps to exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (see --help)", self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| usage(format!("{flag} is required")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to repeat a run that wrote files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, FileDigest>,
    pub outputs: BTreeMap<String, FileDigest>,
    pub threads: usize,
    pub tool_version: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// SHA-256 of a file, or of every file under a directory in sorted order.
pub fn hash_path(path: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, h: &mut Sha256) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, h)?;
            } else {
                let rel = p.strip_prefix(root).unwrap_or(&p);
                let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
                h.update(rel.to_string_lossy().as_bytes());
                h.update([0]);
                h.update((bytes.len() as u64).to_le_bytes());
                h.update(&bytes);
            }
        }
        Ok(())
    }
    let mut h = Sha256::new();
    if path.is_dir() {
        walk(path, path, &mut h)?;
    } else {
        h.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub struct Run {
    subcommand: String,
    threads: usize,
    started: u64,
    inputs: BTreeMap<String, FileDigest>,
}

impl Run {
    pub fn start(subcommand: &str, threads: usize) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            threads,
            started: now_ms(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let sha256 = hash_path(path)?;
        self.inputs.insert(
            role.to_string(),
            FileDigest {
                path: path.to_path_buf(),
                sha256,
            },
        );
        Ok(())
    }

    /// Writes `<primary>.manifest.json` next to the first output.
    pub fn finish<C: Serialize>(
        self,
        config: &C,
        seed: Option<u64>,
        outputs: &[(&str, &Path)],
    ) -> Result<PathBuf> {
        let mut digests = BTreeMap::new();
        for (role, path) in outputs {
            digests.insert(
                role.to_string(),
                FileDigest {
                    path: path.to_path_buf(),
                    sha256: hash_path(path)?,
                },
            );
        }
        let manifest = RunManifest {
            subcommand: self.subcommand,
            config: serde_json::to_value(config)?,
            seed,
            inputs: self.inputs,
            outputs: digests,
            threads: self.threads,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
        };
        let path = manifest_path(outputs[0].1);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Reads a config file. A run manifest of the same subcommand is accepted
/// too; its config and seed are replayed.
pub fn load_config<T: DeserializeOwned + Default>(
    path: Option<&Path>,
    subcommand: &str,
) -> Result<(T, Option<u64>)> {
    let Some(path) = path else {
        return Ok((T::default(), None));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if value.get("subcommand").is_some() && value.get("tool_version").is_some() {
        let manifest: RunManifest = serde_json::from_value(value)
            .with_context(|| format!("reading run manifest {}", path.display()))?;
        if manifest.subcommand != subcommand {
            anyhow::bail!(
                "{} records a `{}` run, not `{subcommand}`",
                path.display(),
                manifest.subcommand
            );
        }
        let config = serde_json::from_value(manifest.config)
            .with_context(|| format!("config in {}", path.display()))?;
        return Ok((config, manifest.seed));
    }
    let config =
        serde_json::from_value(value).with_context(|| format!("config in {}", path.display()))?;
    Ok((config, None))
}

/// Writes `text` to `out`, or to stdout when no path is given.
pub fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}
