//! Experiment specs: a key=value config file, command-line overrides on
//! top, and the resolved result snapshotted before a command does any work.

use std::path::{Path, PathBuf};

use dcd_core::kv::KvDoc;
use dcd_core::train::CONFIG_KEYS;
use dcd_core::{Error, Result, TrainConfig};

pub const SPEC_FILE: &str = "spec.txt";

/// Keys a spec may carry besides training hyperparameters.
pub const PLUMBING_KEYS: [&str; 11] = [
    "command",
    "data",
    "teacher",
    "checkpoint",
    "split",
    "grid",
    "seeds",
    "jobs",
    "keep_epochs",
    "instances",
    "tolerance",
];

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub doc: KvDoc,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    /// File values first, then every override that was given.
    pub fn resolve(
        command: &str,
        config: Option<&Path>,
        overrides: &[(&str, Option<String>)],
        out_dir: PathBuf,
    ) -> Result<Self> {
        let mut doc = match config {
            Some(path) => KvDoc::read(path)?,
            None => KvDoc::new(),
        };
        for (key, value) in overrides {
            if let Some(v) = value {
                doc.set(key, v);
            }
        }
        if let Some(c) = doc.get("command") {
            if c != command {
                return Err(Error::Config(format!(
                    "spec is for command {c:?}, not {command:?}"
                )));
            }
        }
        doc.set("command", command);
        Ok(ExperimentSpec { doc, out_dir })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.doc.get(key)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required setting {key:?}")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.require(key).map(PathBuf::from)
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {raw:?}"))),
        }
    }

    /// The training config the spec describes. Unknown keys are config
    /// errors; plumbing keys are skipped.
    pub fn train_config(&self, role_default: &str) -> Result<TrainConfig> {
        let mut doc = KvDoc::new();
        if self.get("role").is_none() {
            doc.set("role", role_default);
        }
        for (k, v) in self.doc.entries() {
            if PLUMBING_KEYS.contains(&k) {
                continue;
            }
            if !CONFIG_KEYS.contains(&k) {
                return Err(Error::Config(format!("unknown setting {k:?}")));
            }
            doc.set(k, v);
        }
        TrainConfig::from_kv(&doc)
    }

    /// Records the resolved spec, with the training config filled in when
    /// there is one, so the file alone reproduces the command.
    pub fn snapshot(&mut self, config: Option<&TrainConfig>) -> Result<()> {
        if let Some(c) = config {
            for (k, v) in c.to_kv().entries() {
                self.doc.set(k, v);
            }
        }
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::Io {
            path: self.out_dir.clone(),
            source: e,
        })?;
        self.doc.write(&self.out_dir.join(SPEC_FILE))
    }
}
