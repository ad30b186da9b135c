//! Subcommand implementations behind the `wsimil` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wsimil::dataset::{DatasetManifest, SlideEntry};
use wsimil::embedding::{
    read_wemb, save_slide_embeddings, validate_specs, ExtractorKind, ExtractorSpec,
    SyntheticExtractor,
};
use wsimil::metrics::{MetricsReport, METRIC_NAMES};
use wsimil::rng::derive_seed;
use wsimil::synth::{generate, write_dataset, SynthSpec};
use wsimil::tiling::{
    extract_patches, segment_tissue_with_threshold, PatchManifest, RasterImage, DEFAULT_MAGNIFICATION,
    DEFAULT_MIN_COVERAGE, DEFAULT_PATCH_SIZE,
};
use wsimil::training::cross_validate;
use wsimil::{load_dataset, Error, Result, SlideEmbeddingSet, TrainConfig};

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generate a synthetic cohort under `out`. Returns the dataset manifest path.
pub fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<PathBuf> {
    create_dir(out)?;
    let slides = generate(spec)?;
    let path = write_dataset(spec, &slides, out)?;
    let toml = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    write(&out.join("synth.toml"), toml)?;
    log::info!("wrote {} slides to {}", slides.len(), out.display());
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileParams {
    pub patch_size: usize,
    pub min_coverage: f64,
    pub magnification: String,
    /// Also write each retained patch as `<slide>_<row>_<col>.png`.
    pub write_patches: bool,
}

impl Default for TileParams {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            min_coverage: DEFAULT_MIN_COVERAGE,
            magnification: DEFAULT_MAGNIFICATION.to_string(),
            write_patches: false,
        }
    }
}

fn slide_id_of(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("cannot derive a slide id from {}", path.display())))
}

/// Tile each image into `out/<slide>.patches.json`.
pub fn cmd_tile(images: &[PathBuf], params: &TileParams, out: &Path) -> Result<Vec<PathBuf>> {
    if images.is_empty() {
        return Err(Error::Empty("no images given".into()));
    }
    create_dir(out)?;
    let mut written = Vec::with_capacity(images.len());
    for path in images {
        let image = RasterImage::open(path)?;
        let slide_id = slide_id_of(path)?;
        let seg = segment_tissue_with_threshold(&image)?;
        let patches = extract_patches(&image, &seg.mask, params.patch_size, params.min_coverage)?;
        if params.write_patches {
            let dir = out.join("patches");
            create_dir(&dir)?;
            for p in &patches {
                p.save_png(dir.join(format!("{slide_id}_{}_{}.png", p.row, p.col)))?;
            }
        }
        let source = std::fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
        let manifest = PatchManifest {
            slide_id: slide_id.clone(),
            image: source.display().to_string(),
            patch_size: params.patch_size,
            min_coverage: params.min_coverage,
            magnification: params.magnification.clone(),
            otsu_threshold: seg.threshold,
            patches: patches.iter().map(|p| p.entry()).collect(),
        };
        let dest = out.join(format!("{slide_id}.patches.json"));
        write(&dest, manifest.to_json()?)?;
        log::info!("{slide_id}: {} patches (threshold {})", patches.len(), seg.threshold);
        written.push(dest);
    }
    Ok(written)
}

/// Extractor list as read from a TOML file of `[[extractors]]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    pub extractors: Vec<ExtractorSpec>,
}

impl EmbedConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        validate_specs(&cfg.extractors)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Keep only the named extractors, in the given order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        if names.is_empty() {
            return Ok(self.clone());
        }
        let extractors = names
            .iter()
            .map(|n| {
                self.extractors
                    .iter()
                    .find(|e| &e.name == n)
                    .cloned()
                    .ok_or_else(|| Error::MissingExtractor(n.clone()))
            })
            .collect::<Result<_>>()?;
        Ok(Self { extractors })
    }

    /// Re-seed synthetic extractors from one base seed.
    pub fn reseed(&mut self, seed: u64) {
        for (i, e) in self.extractors.iter_mut().enumerate() {
            if e.kind == ExtractorKind::Synthetic {
                e.seed = derive_seed(seed, i as u64);
            }
        }
    }
}

/// One CSV row of the optional labels file given to `embed`.
#[derive(Debug, Clone, Deserialize)]
struct LabelRow {
    slide_id: String,
    patient_id: String,
    label: u8,
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, LabelRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize() {
        let row: LabelRow = row?;
        out.insert(row.slide_id.clone(), row);
    }
    Ok(out)
}

/// Embed the patches of every manifest with every configured extractor.
/// Writes one WEMB file per (slide, extractor) plus a sidecar per slide, and
/// `out/dataset.json` when a labels CSV (`slide_id,patient_id,label`) is given.
pub fn cmd_embed(
    manifests: &[PathBuf],
    config: &EmbedConfig,
    labels: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if manifests.is_empty() {
        return Err(Error::Empty("no patch manifests given".into()));
    }
    validate_specs(&config.extractors)?;
    let synthetic: Vec<Option<SyntheticExtractor>> = config
        .extractors
        .iter()
        .map(|s| match s.kind {
            ExtractorKind::Synthetic => SyntheticExtractor::new(s).map(Some),
            ExtractorKind::Imported => Ok(None),
        })
        .collect::<Result<_>>()?;
    let labels = labels.map(read_labels).transpose()?;
    create_dir(out)?;

    let mut sidecars = Vec::with_capacity(manifests.len());
    let mut entries = Vec::new();
    for manifest_path in manifests {
        let manifest = PatchManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let keys: Vec<(u32, u32)> = manifest.patches.iter().map(|p| (p.row as u32, p.col as u32)).collect();
        let mut set = SlideEmbeddingSet::new(manifest.slide_id.clone(), keys.clone());
        let needs_pixels = synthetic.iter().any(Option::is_some);
        let patches = if needs_pixels {
            let image = RasterImage::open(base.join(&manifest.image))?;
            manifest.patches_from(&image)?
        } else {
            Vec::new()
        };
        for (spec, extractor) in config.extractors.iter().zip(&synthetic) {
            let matrix = match extractor {
                Some(x) => x.extract_all(&patches),
                None => {
                    let template = spec.path.as_deref().expect("validated");
                    let file = read_wemb(base.join(template.replace("{slide}", &manifest.slide_id)))?;
                    if file.keys != keys || file.matrix.ncols() != spec.dim {
                        return Err(Error::DimensionMismatch(format!(
                            "imported `{}` for slide `{}` does not match its patch manifest",
                            spec.name, manifest.slide_id
                        )));
                    }
                    file.matrix
                }
            };
            set.insert(spec.name.clone(), matrix)?;
        }
        let sidecar = save_slide_embeddings(&set, out)?;
        if let Some(labels) = &labels {
            let row = labels
                .get(&manifest.slide_id)
                .ok_or_else(|| Error::Data(format!("no label for slide `{}`", manifest.slide_id)))?;
            entries.push(SlideEntry {
                patient_id: row.patient_id.clone(),
                slide_id: row.slide_id.clone(),
                label: row.label,
                embeddings: sidecar.file_name().expect("file name").to_string_lossy().into_owned(),
                patch_manifest: Some(std::fs::canonicalize(manifest_path).map_err(|e| Error::io(manifest_path, e))?.display().to_string()),
                planted: None,
            });
        }
        log::info!("{}: embedded {} patches", manifest.slide_id, set.num_patches());
        sidecars.push(sidecar);
    }
    if labels.is_some() {
        let cfg_json = serde_json::to_vec(config)?;
        let dataset = DatasetManifest {
            config_hash: wsimil::embedding::sha256_hex(&cfg_json),
            extractors: config.extractors.iter().map(|e| e.name.clone()).collect(),
            slides: entries,
        };
        dataset.validate()?;
        dataset.save(out.join("dataset.json"))?;
    }
    Ok(sidecars)
}

/// Files written by `cv`.
#[derive(Debug, Clone)]
pub struct CvOutputs {
    pub report: MetricsReport,
    pub json: PathBuf,
    pub csv: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Cross-validate on a dataset manifest; writes `report.json`,
/// `report.csv` and one `fold<k>.wmil` checkpoint per fold into `out`.
pub fn cmd_cv(manifest: &Path, config: &TrainConfig, out: &Path) -> Result<CvOutputs> {
    config.validate()?;
    let data = load_dataset(manifest, &config.extractors)?;
    let run = cross_validate(&data.bags, &data.layout, config)?;
    create_dir(out)?;
    let json = out.join("report.json");
    let csv = out.join("report.csv");
    write(&json, run.report.to_json()?)?;
    write(&csv, run.report.to_csv()?)?;
    let mut checkpoints = Vec::new();
    for f in &run.folds {
        let path = out.join(format!("fold{}.wmil", f.fold));
        f.training.checkpoint.save(&path)?;
        checkpoints.push(path);
    }
    Ok(CvOutputs {
        report: run.report,
        json,
        csv,
        checkpoints,
    })
}

/// Tabulate several reports: one row per report with every aggregate mean
/// and std. Rows are labeled by the report's parent directory name.
pub fn cmd_report(reports: &[PathBuf]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports given".into()));
    }
    let loaded = reports
        .iter()
        .map(|p| MetricsReport::load_json(p).map(|r| (p, r)))
        .collect::<Result<Vec<_>>>()?;
    let metrics: Vec<&String> = loaded[0].1.aggregate.keys().collect();
    for (path, r) in &loaded[1..] {
        if r.aggregate.keys().collect::<Vec<_>>() != metrics {
            return Err(Error::Data(format!(
                "{} reports metrics {:?}, expected {:?}",
                path.display(),
                r.aggregate.keys().collect::<Vec<_>>(),
                metrics
            )));
        }
    }
    // Fixed column order for the known metrics, then any others.
    let mut ordered: Vec<&str> = METRIC_NAMES.iter().copied().filter(|m| metrics.iter().any(|k| k == m)).collect();
    ordered.extend(metrics.iter().map(|k| k.as_str()).filter(|k| !METRIC_NAMES.contains(k)));

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["configuration".to_string(), "extractors".into(), "fusion".into(), "n_folds".into()];
    for m in &ordered {
        header.push(m.to_string());
        header.push(format!("{m}_std"));
    }
    w.write_record(&header)?;
    for (path, r) in &loaded {
        let label = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let extractors = r.provenance["extractors"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_str()).collect::<Vec<_>>().join("+"))
            .unwrap_or_default();
        let fusion = r.provenance["config"]["fusion"].as_str().unwrap_or("").to_string();
        let mut rec = vec![label, extractors, fusion, r.folds.len().to_string()];
        for m in &ordered {
            let a = r.aggregate[*m];
            rec.push(a.mean.to_string());
            rec.push(a.std.to_string());
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Process exit code for an error: 2 configuration, 3 I/O, 4 bad data.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::MissingExtractor(_) | Error::Toml(_) | Error::TooFewPatients(_) => 2,
        Error::Io { .. } => 3,
        _ => 4,
    }
}

/// One-line category used in stderr messages.
pub fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Config(_) | Error::Toml(_) => "config",
        Error::MissingExtractor(_) => "missing-extractor",
        Error::TooFewPatients(_) => "too-few-patients",
        Error::Io { .. } => "io",
        Error::Format(_) | Error::Length(_) | Error::Json(_) | Error::Csv(_) | Error::Image(_) => "format",
        Error::Checksum(_) => "checksum",
        _ => "data",
    }
}
