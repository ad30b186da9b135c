//! Synthetic cohorts with planted signal instances.
//!
//! Every instance starts as isotropic Gaussian noise. In positive bags a
//! random subset of `round(s * K)` instances additionally receives a fixed
//! offset vector of norm `offset_norm`, shared by the whole cohort. Negative
//! bags are pure noise.

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::{slide_bag, Dataset, DatasetManifest, PatchKey, SlideEntry};
use crate::embedding::{save_slide_embeddings, sha256_hex, FeatureLayout, SlideEmbeddingSet};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};

const STREAM_LABELS: u64 = 1;
const STREAM_OFFSET: u64 = 2;
const STREAM_SLIDE_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthExtractor {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub positive_fraction: f64,
    pub bags_per_patient: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub extractors: Vec<SynthExtractor>,
    /// Fraction of instances in a positive bag that carry the offset.
    pub signal_rate: f64,
    pub offset_norm: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_patients: 152,
            positive_fraction: 0.73,
            bags_per_patient: 1,
            min_instances: 200,
            max_instances: 800,
            extractors: vec![
                SynthExtractor { name: "fm_a".into(), dim: 512 },
                SynthExtractor { name: "fm_b".into(), dim: 384 },
            ],
            signal_rate: 0.1,
            offset_norm: 2.0,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad(format!("positive_fraction {} not in (0, 1)", self.positive_fraction));
        }
        if !(0.0..=1.0).contains(&self.signal_rate) {
            return bad(format!("signal_rate {} not in [0, 1]", self.signal_rate));
        }
        if self.n_patients < 2 || self.bags_per_patient == 0 {
            return bad("need at least 2 patients and 1 bag per patient".into());
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return bad(format!(
                "instance range [{}, {}] is empty",
                self.min_instances, self.max_instances
            ));
        }
        if self.extractors.is_empty() || self.extractors.iter().any(|e| e.dim == 0) {
            return bad("extractors must be nonempty with positive dims".into());
        }
        let mut names: Vec<&str> = self.extractors.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("extractor names must be unique".into());
        }
        if !(self.offset_norm.is_finite() && self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return bad("offset_norm and noise_scale must be finite, noise_scale ≥ 0".into());
        }
        Ok(())
    }

    pub fn n_positive(&self) -> usize {
        ((self.n_patients as f64 * self.positive_fraction).round() as usize).clamp(1, self.n_patients - 1)
    }

    pub fn total_dim(&self) -> usize {
        self.extractors.iter().map(|e| e.dim).sum()
    }

    pub fn layout(&self) -> Result<FeatureLayout> {
        FeatureLayout::new(
            self.extractors.iter().map(|e| e.name.clone()).collect(),
            self.extractors.iter().map(|e| e.dim).collect(),
        )
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("spec serializes"))
    }

    /// The shared offset: a Gaussian direction scaled to `offset_norm`.
    pub fn offset(&self) -> Array1<f64> {
        let mut rng = SplitMix64::new(derive_seed(self.seed, STREAM_OFFSET));
        let dir: Array1<f64> = (0..self.total_dim()).map(|_| rng.standard_normal()).collect();
        let norm = dir.dot(&dir).sqrt();
        dir * (self.offset_norm / norm)
    }
}

#[derive(Debug, Clone)]
pub struct SynthSlide {
    pub patient_id: String,
    pub label: u8,
    pub set: SlideEmbeddingSet,
    pub planted: Vec<PatchKey>,
}

/// Generate the cohort in memory. Patient `i` is `P{i:03}`, its slides
/// `P{i:03}_S{j}`; instance keys are `(0, row)`.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthSlide>> {
    spec.validate()?;
    let mut labels = vec![0u8; spec.n_patients];
    labels[..spec.n_positive()].fill(1);
    SplitMix64::new(derive_seed(spec.seed, STREAM_LABELS)).shuffle(&mut labels);
    let offset = spec.offset();
    let m = spec.total_dim();

    let mut slides = Vec::with_capacity(spec.n_patients * spec.bags_per_patient);
    for (p, &label) in labels.iter().enumerate() {
        for j in 0..spec.bags_per_patient {
            let index = (p * spec.bags_per_patient + j) as u64;
            let mut rng = SplitMix64::new(derive_seed(spec.seed, STREAM_SLIDE_BASE + index));
            let k = rng.range_inclusive(spec.min_instances, spec.max_instances);
            let mut x = Array2::<f64>::from_shape_fn((k, m), |_| spec.noise_scale * rng.standard_normal());
            let planted_rows = if label == 1 {
                let n_signal = (spec.signal_rate * k as f64).round() as usize;
                rng.sample_indices(k, n_signal)
            } else {
                Vec::new()
            };
            for &r in &planted_rows {
                let mut row = x.row_mut(r);
                row += &offset;
            }
            let keys: Vec<PatchKey> = (0..k as u32).map(|r| (0, r)).collect();
            let mut set = SlideEmbeddingSet::new(format!("P{p:03}_S{j}"), keys);
            let mut col = 0;
            for e in &spec.extractors {
                let block = x.slice(s![.., col..col + e.dim]).mapv(|v| v as f32);
                set.insert(e.name.clone(), block)?;
                col += e.dim;
            }
            slides.push(SynthSlide {
                patient_id: format!("P{p:03}"),
                label,
                set,
                planted: planted_rows.iter().map(|&r| (0, r as u32)).collect(),
            });
        }
    }
    Ok(slides)
}

/// Concatenated bags in the given extractor order (empty = spec order).
pub fn to_dataset(spec: &SynthSpec, slides: &[SynthSlide], order: &[String]) -> Result<Dataset> {
    let full = spec.layout()?;
    let order: Vec<String> = if order.is_empty() {
        full.extractors.clone()
    } else {
        order.to_vec()
    };
    let dims = order
        .iter()
        .map(|n| {
            full.extractors
                .iter()
                .position(|e| e == n)
                .map(|i| full.dims[i])
                .ok_or_else(|| Error::MissingExtractor(n.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let layout = FeatureLayout::new(order.clone(), dims)?;
    let bags = slides
        .iter()
        .map(|s| slide_bag(&s.set, &s.patient_id, s.label, &order))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        bags,
        layout,
        planted: slides.iter().map(|s| Some(s.planted.clone())).collect(),
    })
}

/// Write WEMB files under `out/embeddings/` and the dataset manifest
/// `out/dataset.json`. Returns the manifest path.
pub fn write_dataset(spec: &SynthSpec, slides: &[SynthSlide], out: impl AsRef<Path>) -> Result<PathBuf> {
    let out = out.as_ref();
    let emb_dir = out.join("embeddings");
    let mut entries = Vec::with_capacity(slides.len());
    for s in slides {
        let sidecar = save_slide_embeddings(&s.set, &emb_dir)?;
        let name = sidecar.file_name().expect("file name").to_string_lossy();
        entries.push(SlideEntry {
            patient_id: s.patient_id.clone(),
            slide_id: s.set.slide_id.clone(),
            label: s.label,
            embeddings: format!("embeddings/{name}"),
            patch_manifest: None,
            planted: Some(s.planted.clone()),
        });
    }
    let manifest = DatasetManifest {
        config_hash: spec.hash(),
        extractors: spec.extractors.iter().map(|e| e.name.clone()).collect(),
        slides: entries,
    };
    manifest.validate()?;
    let path = out.join("dataset.json");
    manifest.save(&path)?;
    Ok(path)
}
