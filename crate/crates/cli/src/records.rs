use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vimi_core::prompt::MultimodalPrompt;

use crate::CliError;

/// A captioned video. `video` is resolved against the directory of the
/// file the record was read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub caption: String,
    pub video: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    pub id: String,
    pub caption: String,
    pub video: String,
    pub prompt: MultimodalPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub caption: String,
    pub prompt: MultimodalPrompt,
}

/// Reads one JSON value per non-blank line. Errors name the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| CliError::input(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let ctx = || format!("writing {}", path.display());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(ctx(), e))?;
    }
    let file = File::create(path).map_err(|e| CliError::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| CliError::Internal(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| CliError::io(ctx(), e))?;
    }
    w.flush().map_err(|e| CliError::io(ctx(), e))
}

pub fn resolve(list_file: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    list_file.parent().map_or_else(|| p.to_path_buf(), |d| d.join(p))
}

/// Absolute form of `path`, for records that outlive the working directory.
pub fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(path).map_err(|e| CliError::io(format!("resolving {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip_skips_blank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/records.jsonl");
        let recs = vec![
            VideoRecord { id: "a".into(), caption: "x".into(), video: "a.vid".into() },
            VideoRecord { id: "b".into(), caption: "y".into(), video: "/abs/b.vid".into() },
        ];
        write_jsonl(&path, &recs).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.insert(0, '\n');
        std::fs::write(&path, text).unwrap();
        assert_eq!(read_jsonl::<VideoRecord>(&path).unwrap(), recs);
        assert_eq!(resolve(&path, "a.vid"), dir.path().join("sub/a.vid"));
        assert_eq!(resolve(&path, "/abs/b.vid"), PathBuf::from("/abs/b.vid"));
    }

    #[test]
    fn malformed_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"caption\":\"c\",\"video\":\"v\"}\nnot json\n").unwrap();
        let err = read_jsonl::<VideoRecord>(&path).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
