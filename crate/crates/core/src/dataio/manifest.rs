//! Tab-separated dataset manifests.
//!
//! One record per line: `image<TAB>mask[<TAB>second_mask]`, paths relative
//! to the manifest's own directory. Blank lines and lines starting with `#`
//! are skipped.

use std::path::{Path, PathBuf};

use super::{io_err, DataError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub second_mask: Option<PathBuf>,
}

impl ManifestRecord {
    /// File stem of the image, used to name derived outputs.
    pub fn name(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    /// Records with paths already joined onto `base_dir`.
    pub records: Vec<ManifestRecord>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse(&text, &base_dir)?;
    for rec in &manifest.records {
        for p in [Some(&rec.image), Some(&rec.mask), rec.second_mask.as_ref()]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(DataError::MissingFile(p.clone()));
            }
        }
    }
    Ok(manifest)
}

fn parse(text: &str, base_dir: &Path) -> Result<Manifest> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) || fields.iter().any(|f| f.is_empty()) {
            return Err(DataError::BadRecord {
                line: idx + 1,
                fields: fields.len(),
            });
        }
        records.push(ManifestRecord {
            image: base_dir.join(fields[0]),
            mask: base_dir.join(fields[1]),
            second_mask: fields.get(2).map(|f| base_dir.join(f)),
        });
    }
    if records.is_empty() {
        return Err(DataError::EmptyManifest);
    }
    Ok(Manifest {
        base_dir: base_dir.to_path_buf(),
        records,
    })
}
