use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::{read_feature_header, read_features, write_features};
use crate::error::{HasdError, Result};
use crate::mil::SlideBag;

/// One domain at rest: a JSON document listing per-slide feature files.
/// File paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub domain_name: String,
    pub feature_dim: usize,
    pub slides: Vec<SlideEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub slide_id: String,
    pub file_path: String,
    pub n_patches: usize,
    pub label: Option<u8>,
}

impl SlideEntry {
    pub fn label_bool(&self) -> Option<bool> {
        self.label.map(|l| l == 1)
    }
}

fn manifest_err(path: &Path, msg: impl Into<String>) -> HasdError {
    HasdError::Manifest {
        path: path.to_path_buf(),
        message: msg.into(),
    }
}

impl DomainManifest {
    pub fn validate(&self, path: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.slides {
            if !seen.insert(s.slide_id.as_str()) {
                return Err(manifest_err(
                    path,
                    format!("duplicate slide_id {:?}", s.slide_id),
                ));
            }
            if let Some(l) = s.label {
                if l > 1 {
                    return Err(manifest_err(
                        path,
                        format!("slide {:?} has label {l}, expected 0 or 1", s.slide_id),
                    ));
                }
            }
            if s.n_patches == 0 {
                return Err(manifest_err(
                    path,
                    format!("slide {:?} has no patches", s.slide_id),
                ));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HasdError::io(path, e))?;
        let m: DomainManifest =
            serde_json::from_str(&text).map_err(|e| manifest_err(path, e.to_string()))?;
        m.validate(path)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| HasdError::io(path, e))
    }

    pub fn resolve(manifest_path: &Path, file_path: &str) -> PathBuf {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(file_path)
    }

    pub fn labels(&self) -> Vec<Option<bool>> {
        self.slides.iter().map(SlideEntry::label_bool).collect()
    }

    pub fn slide_ids(&self) -> Vec<String> {
        self.slides.iter().map(|s| s.slide_id.clone()).collect()
    }
}

/// Loads every slide of a manifest, checking patch counts and feature width
/// against each file.
pub fn load_bags(manifest_path: &Path) -> Result<(DomainManifest, Vec<SlideBag>)> {
    let manifest = DomainManifest::load(manifest_path)?;
    let mut bags = Vec::with_capacity(manifest.slides.len());
    for s in &manifest.slides {
        let file = DomainManifest::resolve(manifest_path, &s.file_path);
        let (rows, cols) = read_feature_header(&file)?;
        if rows != s.n_patches || cols != manifest.feature_dim {
            return Err(manifest_err(
                manifest_path,
                format!(
                    "slide {:?}: manifest says {}x{}, file header says {rows}x{cols}",
                    s.slide_id, s.n_patches, manifest.feature_dim
                ),
            ));
        }
        let features = read_features(&file)?;
        bags.push(SlideBag::new(s.slide_id.clone(), features, s.label_bool())?);
    }
    Ok((manifest, bags))
}

/// Writes `bags` as `<dir>/<slide_id>.bin` plus `<dir>/manifest.json`.
pub fn write_domain(dir: &Path, name: &str, bags: &[SlideBag]) -> Result<DomainManifest> {
    std::fs::create_dir_all(dir).map_err(|e| HasdError::io(dir, e))?;
    let feature_dim = bags.first().map_or(0, |b| b.dim());
    let mut slides = Vec::with_capacity(bags.len());
    for bag in bags {
        let file = format!("{}.bin", bag.slide_id);
        write_features(&dir.join(&file), &bag.features)?;
        slides.push(SlideEntry {
            slide_id: bag.slide_id.clone(),
            file_path: file,
            n_patches: bag.n_patches(),
            label: bag.label.map(u8::from),
        });
    }
    let manifest = DomainManifest {
        domain_name: name.to_string(),
        feature_dim,
        slides,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
