use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CcrError, Result};

use super::{load_features, DatasetRecord, VideoFeatures, Vocab};

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_id: String,
    pub feature_path: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_span: Option<[f64; 2]>,
    pub duration_s: f64,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let body = fs::read_to_string(path).map_err(|e| CcrError::io(path, e))?;
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                CcrError::Format(format!("{}:{}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| CcrError::io(path, e))?;
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entries serialize");
        writeln!(f, "{line}").map_err(|e| CcrError::io(path, e))?;
    }
    Ok(())
}

/// Reads the manifest and every referenced feature file. Relative feature
/// paths resolve against the manifest's directory.
pub fn load_dataset(manifest: &Path, vocab: &Vocab) -> Result<Vec<(DatasetRecord, VideoFeatures)>> {
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    let mut dim = None;
    for entry in read_manifest(manifest)? {
        let path = resolve(&base, &entry.feature_path);
        let features = load_features(&path)?.with_duration(entry.duration_s)?;
        let features = VideoFeatures {
            video_id: entry.video_id.clone(),
            ..features
        };
        match dim {
            None => dim = Some(features.feature_dim()),
            Some(d) if d != features.feature_dim() => {
                return Err(CcrError::Data(format!(
                    "{} has feature dim {}, dataset uses {d}",
                    entry.video_id,
                    features.feature_dim()
                )))
            }
            _ => {}
        }
        let record = DatasetRecord {
            video_id: entry.video_id,
            feature_path: path,
            query: vocab.encode(&entry.query)?,
            gt_span: entry.gt_span,
            duration_s: entry.duration_s,
        };
        record.validate()?;
        out.push((record, features));
    }
    Ok(out)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
