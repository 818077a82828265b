//! Output-directory bookkeeping: the run lock and per-stage stamps.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use iclp_substrate::checkpoint::{file_sha256, json_hash};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Error, Result};

/// Exclusive hold on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// What a completed stage consumed and produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub config_hash: String,
    pub input_hash: String,
    /// File name to sha256.
    pub outputs: BTreeMap<String, String>,
}

fn stamp_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(".stages").join(format!("{stage}.json"))
}

/// sha256 of a file in `dir`, or `MissingArtifact` naming the stage that
/// produces it.
pub fn artifact_hash(dir: &Path, name: &str, producer: &str) -> Result<String> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::MissingArtifact { path, stage: producer.to_string() });
    }
    Ok(file_sha256(&path)?)
}

/// Hash of a stage's inputs: its config slice and upstream file hashes.
pub fn input_hash(config: &Value, upstream: &BTreeMap<String, String>) -> String {
    json_hash(&serde_json::json!({ "config": config, "upstream": upstream }))
}

/// True when the stamp for `stage` matches `input` and every recorded
/// output is still on disk unchanged.
pub fn is_fresh(dir: &Path, stage: &str, input: &str) -> bool {
    let Ok(text) = fs::read_to_string(stamp_path(dir, stage)) else {
        return false;
    };
    let Ok(stamp) = serde_json::from_str::<Stamp>(&text) else {
        return false;
    };
    stamp.input_hash == input
        && stamp.outputs.iter().all(|(name, sha)| file_sha256(&dir.join(name)).map(|s| &s == sha).unwrap_or(false))
}

pub fn write_stamp(dir: &Path, stage: &str, config_hash: &str, input: &str, outputs: &[String]) -> Result<Stamp> {
    let mut hashes = BTreeMap::new();
    for name in outputs {
        hashes.insert(name.clone(), file_sha256(&dir.join(name))?);
    }
    let stamp = Stamp {
        stage: stage.to_string(),
        config_hash: config_hash.to_string(),
        input_hash: input.to_string(),
        outputs: hashes,
    };
    let path = stamp_path(dir, stage);
    let parent = path.parent().expect("stamp has a parent");
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    fs::write(&path, serde_json::to_string_pretty(&stamp)?).map_err(|e| Error::io(&path, e))?;
    Ok(stamp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Locked(_))));
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn stamp_goes_stale_when_output_changes() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x.csv"), "a\n").unwrap();
        write_stamp(dir.path(), "s", "c", "i", &["x.csv".into()]).unwrap();
        assert!(is_fresh(dir.path(), "s", "i"));
        assert!(!is_fresh(dir.path(), "s", "j"));
        fs::write(dir.path().join("x.csv"), "b\n").unwrap();
        assert!(!is_fresh(dir.path(), "s", "i"));
    }

    #[test]
    fn missing_artifact_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        match artifact_hash(dir.path(), "codec.ckpt", "train-codec") {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "train-codec"),
            other => panic!("{other:?}"),
        }
    }
}
