//! Dataset manifests binding patients, slides, labels and embedding files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{concat_fuse, load_embeddings, resolve, FeatureLayout, SlideEmbeddingSet};
use crate::error::{Error, Result};
use crate::mil::Bag;

pub type PatchKey = (u32, u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub patient_id: String,
    pub slide_id: String,
    pub label: u8,
    /// Embedding sidecar manifest, relative to the dataset manifest.
    pub embeddings: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_manifest: Option<String>,
    /// Keys of instances known to carry signal (synthetic data only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<Vec<PatchKey>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    /// Default extractor order for concatenation.
    pub extractors: Vec<String>,
    pub slides: Vec<SlideEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.slides.is_empty() {
            return Err(Error::Empty("dataset has no slides".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.slides {
            if !seen.insert(s.slide_id.as_str()) {
                return Err(Error::Data(format!("duplicate slide id `{}`", s.slide_id)));
            }
            if s.label > 1 {
                return Err(Error::Data(format!("slide `{}`: label {} is not 0/1", s.slide_id, s.label)));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Bags plus the side information needed to evaluate them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    pub layout: FeatureLayout,
    /// Planted keys per bag, parallel to `bags`.
    pub planted: Vec<Option<Vec<PatchKey>>>,
}

/// Concatenate a slide's extractor matrices in `order` into a bag.
pub fn slide_bag(set: &SlideEmbeddingSet, patient_id: &str, label: u8, order: &[String]) -> Result<Bag> {
    let fused = concat_fuse(set, order)?;
    Bag::new(set.slide_id.clone(), patient_id, label, fused.patch_keys, fused.matrix)
}

fn layout_of(set: &SlideEmbeddingSet, order: &[String]) -> Result<FeatureLayout> {
    let dims = order.iter().map(|n| Ok(set.get(n)?.ncols())).collect::<Result<Vec<_>>>()?;
    FeatureLayout::new(order.to_vec(), dims)
}

/// Load every slide's embeddings and fuse them by concatenation.
/// An empty `order` means the manifest's own extractor list.
pub fn load_dataset(manifest_path: impl AsRef<Path>, order: &[String]) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let order: Vec<String> = if order.is_empty() {
        manifest.extractors.clone()
    } else {
        order.to_vec()
    };
    if order.is_empty() {
        return Err(Error::Config("no extractors selected".into()));
    }

    let mut layout: Option<FeatureLayout> = None;
    let mut bags = Vec::with_capacity(manifest.slides.len());
    let mut planted = Vec::with_capacity(manifest.slides.len());
    for entry in &manifest.slides {
        let path: PathBuf = resolve(base, &entry.embeddings);
        let set = load_embeddings(&path)?;
        if set.slide_id != entry.slide_id {
            return Err(Error::Data(format!(
                "{} holds slide `{}`, manifest expects `{}`",
                path.display(),
                set.slide_id,
                entry.slide_id
            )));
        }
        let this = layout_of(&set, &order)?;
        match &layout {
            Some(l) if *l != this => {
                return Err(Error::DimensionMismatch(format!(
                    "slide `{}` has extractor dims {:?}, expected {:?}",
                    entry.slide_id, this.dims, l.dims
                )))
            }
            Some(_) => {}
            None => layout = Some(this),
        }
        bags.push(slide_bag(&set, &entry.patient_id, entry.label, &order)?);
        planted.push(entry.planted.clone());
    }
    Ok(Dataset {
        bags,
        layout: layout.expect("nonempty dataset"),
        planted,
    })
}
