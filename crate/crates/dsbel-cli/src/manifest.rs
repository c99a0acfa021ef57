//! Run manifests: a key=value record written alongside every output
//! artifact so a run can be reproduced from its inputs and seed.

use crate::CliError;
use std::path::Path;

pub struct RunManifest {
    entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64) -> RunManifest {
        let mut m = RunManifest { entries: Vec::new() };
        m.push("subcommand", subcommand);
        m.push("version", env!("CARGO_PKG_VERSION"));
        m.push("seed", seed);
        m.push("deterministic", true);
        m.push(
            "threads",
            std::env::var("DSBEL_THREADS").unwrap_or_else(|_| "1".into()),
        );
        m
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Records a whole key=value block (e.g. the resolved config) under a
    /// dotted prefix.
    pub fn push_block(&mut self, prefix: &str, block: &str) {
        for line in block.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.push(&format!("{prefix}.{k}"), v);
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    /// Writes the manifest with the final wall-clock entry appended.
    pub fn write(mut self, path: &Path, wall_secs: f64) -> Result<(), CliError> {
        self.push("wall_secs", format!("{wall_secs:.3}"));
        std::fs::write(path, self.to_text())
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
    }
}

/// `<artifact>.manifest` for file artifacts.
pub fn sibling_manifest(artifact: &Path) -> std::path::PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    artifact.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_records_core_fields() {
        let mut m = RunManifest::new("train", 7);
        m.push("output", "model.dsbl");
        m.push_block("config", "epochs=20\nmomentum=0.95\n");
        let text = m.to_text();
        for needle in [
            "subcommand=train",
            "seed=7",
            "deterministic=true",
            "config.epochs=20",
            "config.momentum=0.95",
        ] {
            assert!(text.contains(needle), "missing {needle} in:\n{text}");
        }
    }

    #[test]
    fn sibling_manifest_appends_suffix() {
        assert_eq!(
            sibling_manifest(Path::new("/tmp/model.dsbl")),
            Path::new("/tmp/model.dsbl.manifest")
        );
    }
}
