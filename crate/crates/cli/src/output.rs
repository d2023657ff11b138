//! Output staging and provenance.
//!
//! Commands build every artifact in memory, then [`Staged::commit`] writes
//! them atomically. If any write fails, the files already written in that
//! commit are removed, so a failed command leaves no partial output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use topoflow::checkpoint::write_atomic;

use crate::config::RunConfig;

pub const VERSION: &str = env!("TOPOFLOW_VERSION");

/// 64-bit FNV-1a, used to fingerprint input files in provenance records.
pub fn fnv64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Debug, Clone, Serialize)]
pub struct InputRef {
    pub role: String,
    pub file: String,
    pub fnv64: String,
}

impl InputRef {
    pub fn new(role: &str, path: &Path, bytes: &[u8]) -> Self {
        Self {
            role: role.into(),
            file: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            fnv64: format!("{:016x}", fnv64(bytes)),
        }
    }
}

/// Embedded in every artifact: what produced it and from which inputs.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub version: &'static str,
    pub command: String,
    pub config: RunConfig,
    /// The same configuration as `key = value` text, ready to feed back
    /// through `--config`.
    pub config_text: String,
    pub inputs: Vec<InputRef>,
}

impl Provenance {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            version: VERSION,
            command: command.into(),
            config: config.clone(),
            config_text: config.to_text(),
            inputs: Vec::new(),
        }
    }

    pub fn with_input(mut self, input: InputRef) -> Self {
        self.inputs.push(input);
        self
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("provenance serializes")
    }

    /// Single-line `# provenance: {...}` header for CSV files.
    pub fn csv_comment(&self) -> String {
        format!("# provenance: {}\n", serde_json::to_string(self).expect("provenance serializes"))
    }
}

/// CSV text with a provenance comment line first.
pub fn csv_bytes(prov: &Provenance, header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut out = prov.csv_comment().into_bytes();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    out.extend(w.into_inner().context("flushing CSV")?);
    Ok(out)
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

#[derive(Default)]
pub struct Staged {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Staged {
    pub fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    pub fn commit(self) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for (path, bytes) in &self.files {
            let res = path
                .parent()
                .filter(|d| !d.as_os_str().is_empty())
                .map_or(Ok(()), fs::create_dir_all)
                .with_context(|| format!("creating directory for {}", path.display()))
                .and_then(|_| write_atomic(path, bytes).with_context(|| format!("writing {}", path.display())));
            if let Err(e) = res {
                for p in &written {
                    let _ = fs::remove_file(p);
                }
                return Err(e);
            }
            written.push(path.clone());
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn csv_starts_with_provenance() {
        let prov = Provenance::new("eval", &RunConfig::default());
        let bytes = csv_bytes(&prov, &["a", "b"], &[vec!["1".into(), "x,y".into()]]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# provenance: {"));
        assert_eq!(&lines[1..], ["a,b", "1,\"x,y\""]);
    }

    #[test]
    fn failed_commit_removes_earlier_files() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("a.txt");
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let mut s = Staged::default();
        s.add(ok.clone(), b"1".to_vec());
        s.add(blocker.join("b.txt"), b"2".to_vec());
        assert!(s.commit().is_err());
        assert!(!ok.exists());
    }
}
