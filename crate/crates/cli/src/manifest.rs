//! Per-run output manifest.
//!
//! Every command that writes into an output directory also drops a
//! `run.json` there: the command name, the exact configuration the run used
//! (after flag overrides), and the list of files it produced. A run is
//! reproducible from this snapshot plus the seed inside it.

use std::path::Path;

use anyhow::{Context, Result};

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full effective configuration, flags already applied.
    pub config: serde_json::Value,
    /// Paths relative to the directory holding this manifest.
    pub produced: Vec<String>,
}

/// Writes `run.json` into `dir`, listing `produced` plus itself.
pub fn write_run_manifest(
    dir: &Path,
    command: &str,
    config: serde_json::Value,
    produced: &[String],
) -> Result<()> {
    let mut files: Vec<String> = produced.to_vec();
    files.push("run.json".to_string());
    files.sort();
    let manifest = RunManifest {
        command: command.to_string(),
        config,
        produced: files,
    };
    let path = dir.join("run.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_itself_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_run_manifest(
            dir.path(),
            "train",
            serde_json::json!({"seed": 7}),
            &["checkpoint.json".into(), "metrics.jsonl".into()],
        )
        .unwrap();
        let text = std::fs::read_to_string(dir.path().join("run.json")).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.command, "train");
        assert_eq!(back.config["seed"], 7);
        assert!(back.produced.contains(&"run.json".to_string()));
        assert!(back.produced.contains(&"checkpoint.json".to_string()));
    }
}
