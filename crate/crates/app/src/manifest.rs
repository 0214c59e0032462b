//! JSON-lines corpus manifests.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub authors: Vec<String>,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub venue: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<u16>,
}

/// One corpus instance. Paths are relative to the manifest's directory
/// unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleManifest {
    pub id: String,
    pub text_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_feat_path: Option<PathBuf>,
    pub target: String,
    pub split: Split,
    #[serde(default)]
    pub metadata: Metadata,
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub samples: Vec<SampleManifest>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split_sizes(&self) -> BTreeMap<Split, usize> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            *out.entry(s.split).or_insert(0) += 1;
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.samples)
    }
}

pub fn to_jsonl(samples: &[SampleManifest]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("manifest records serialize"));
        out.push('\n');
    }
    out
}

/// Parses manifest text. Blank lines are ignored.
pub fn parse_manifest(text: &str) -> Result<Vec<SampleManifest>> {
    let mut samples: Vec<SampleManifest> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: SampleManifest =
            serde_json::from_str(line).map_err(|e| AppError::Data(format!("manifest line {}: {e}", i + 1)))?;
        if s.id.is_empty() {
            return Err(AppError::Data(format!("manifest line {}: empty id", i + 1)));
        }
        if s.text_path.as_os_str().is_empty() {
            return Err(AppError::Data(format!("manifest line {}: empty text_path", i + 1)));
        }
        if !seen.insert(s.id.clone()) {
            return Err(AppError::Data(format!("manifest line {}: duplicate id {:?}", i + 1, s.id)));
        }
        samples.push(s);
    }
    Ok(samples)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(format!("reading {}", path.display()), e))?;
    let samples = parse_manifest(&text)?;
    let mut warnings = Vec::new();
    if samples.is_empty() {
        warnings.push(format!("manifest {} has no samples", path.display()));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = Manifest { samples, root, warnings };
    for w in &m.warnings {
        log::warn!("{w}");
    }
    let sizes: Vec<String> = m.split_sizes().iter().map(|(k, v)| format!("{k}={v}")).collect();
    log::info!("loaded {} samples ({})", m.samples.len(), sizes.join(" "));
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_required_field_names_the_line() {
        let err = parse_manifest("\n{\"id\":\"a\",\"target\":\"t\",\"split\":\"train\"}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("text_path"), "{msg}");
    }

    #[test]
    fn unknown_split_is_rejected() {
        let line = r#"{"id":"a","text_path":"a.txt","target":"t","split":"dev"}"#;
        assert!(parse_manifest(line).is_err());
    }
}
