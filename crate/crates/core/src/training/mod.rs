//! Class-weighted training of the MIL model and k-fold evaluation.

pub mod config;
pub mod folds;
pub mod optimizer;

use std::borrow::Cow;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::embedding::FeatureLayout;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_fold, FoldMetrics, MetricsReport, Prediction, ScoredCase};
use crate::mil::{Bag, MilModel};
use crate::rng::{derive_seed, hash_str, SplitMix64};

pub use config::{BagUnit, FusionKind, OptimizerConfig, TrainConfig};
pub use folds::{make_folds, FoldSplit};
pub use optimizer::{optimizer_step, OptimizerState};

/// Probabilities are clamped this far from 0 and 1 inside the loss.
pub const PROB_EPS: f64 = 1e-12;

// Stream tags for derived seeds.
const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_SUBSAMPLE: u64 = 3;
const STREAM_FOLDS: u64 = 4;
const STREAM_FOLD_BASE: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w_pos: f64,
    pub w_neg: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights { w_pos: 1.0, w_neg: 1.0 };

    pub fn for_label(&self, y: u8) -> f64 {
        if y == 1 {
            self.w_pos
        } else {
            self.w_neg
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            w_pos: self.w_pos * c,
            w_neg: self.w_neg * c,
        }
    }
}

/// Balanced weights `w_c = N / (2 N_c)`.
pub fn class_weights(labels: &[u8]) -> Result<ClassWeights> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.iter().filter(|&&y| y == 0).count();
    if n_pos + n_neg != labels.len() {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let n = labels.len() as f64;
    Ok(ClassWeights {
        w_pos: n / (2.0 * n_pos as f64),
        w_neg: n / (2.0 * n_neg as f64),
    })
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `-w_y [y ln p + (1 - y) ln(1 - p)]` with `p` clamped to `[ε, 1 - ε]`.
pub fn weighted_bce(probability: f64, y: u8, weights: &ClassWeights) -> f64 {
    let p = clamp_prob(probability);
    let w = weights.for_label(y);
    if y == 1 {
        -w * p.ln()
    } else {
        -w * (1.0 - p).ln()
    }
}

/// `∂ loss / ∂ logit` for `p = sigm(logit)`; zero where the clamp is active.
fn bce_logit_grad(probability: f64, y: u8, weights: &ClassWeights) -> f64 {
    if probability < PROB_EPS || probability > 1.0 - PROB_EPS {
        return 0.0;
    }
    weights.for_label(y) * (probability - y as f64)
}

/// Loss and exact gradients for one bag.
pub fn backward(model: &MilModel, bag: &Bag, weights: &ClassWeights) -> Result<(f64, MilModel)> {
    let trace = model.forward(bag.features.view())?;
    let loss = weighted_bce(trace.probability, bag.label, weights);
    let dlogit = bce_logit_grad(trace.probability, bag.label, weights);
    let mut grads = model.zeros_like();
    model.backward(bag.features.view(), &trace, dlogit, &mut grads);
    Ok((loss, grads))
}

/// Uniform sample of `cap` instances without replacement, original order kept.
pub fn subsample_patches(bag: &Bag, cap: usize, seed: u64) -> Bag {
    capped(bag, cap, seed).into_owned()
}

fn capped(bag: &Bag, cap: usize, seed: u64) -> Cow<'_, Bag> {
    if bag.len() <= cap {
        return Cow::Borrowed(bag);
    }
    let rows = SplitMix64::new(seed).sample_indices(bag.len(), cap);
    Cow::Owned(bag.select_rows(&rows))
}

/// The per-slide subsample seed: independent of bag order.
fn slide_seed(seed: u64, slide_id: &str) -> u64 {
    derive_seed(derive_seed(seed, STREAM_SUBSAMPLE), hash_str(slide_id))
}

#[derive(Debug, Clone)]
pub struct FoldTraining {
    pub checkpoint: Checkpoint,
    /// Mean training loss of each epoch, measured before each step.
    pub epoch_losses: Vec<f64>,
    pub class_weights: ClassWeights,
}

fn check_layout(bags: &[&Bag], layout: &FeatureLayout) -> Result<()> {
    let width = layout.total_dim();
    match bags.iter().find(|b| b.features.ncols() != width) {
        Some(b) => Err(Error::Shape(format!(
            "bag `{}` has {} feature columns, layout expects {width}",
            b.slide_id,
            b.features.ncols()
        ))),
        None => Ok(()),
    }
}

/// The parameters training starts from.
pub fn initial_model(layout: &FeatureLayout, config: &TrainConfig) -> Result<MilModel> {
    MilModel::new(&config.model_shape(&layout.dims), derive_seed(config.seed, STREAM_INIT))
}

/// Train one model: seeded per-epoch shuffle, one optimizer step per bag.
pub fn train_fold(bags: &[Bag], layout: &FeatureLayout, config: &TrainConfig) -> Result<FoldTraining> {
    let refs: Vec<&Bag> = bags.iter().collect();
    train_on(&refs, layout, config)
}

fn train_on(bags: &[&Bag], layout: &FeatureLayout, config: &TrainConfig) -> Result<FoldTraining> {
    config.validate()?;
    if bags.is_empty() {
        return Err(Error::Empty("no training bags".into()));
    }
    check_layout(bags, layout)?;
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    let balanced = class_weights(&labels)?;
    let weights = if config.class_weighting {
        balanced
    } else {
        ClassWeights::UNIT
    };

    let bags: Vec<Cow<'_, Bag>> = bags
        .iter()
        .map(|b| capped(b, config.patches_per_bag, slide_seed(config.seed, &b.slide_id)))
        .collect();

    let mut model = initial_model(layout, config)?;
    let mut state = OptimizerState::new(&model);
    let mut order_rng = SplitMix64::new(derive_seed(config.seed, STREAM_ORDER));
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grads) = backward(&model, &bags[i], &weights)?;
            optimizer_step(&mut state, &mut model, &grads, config);
            total += loss;
        }
        let mean = total / bags.len() as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
    }

    Ok(FoldTraining {
        checkpoint: Checkpoint {
            model,
            layout: layout.clone(),
            config_hash: config.hash(),
        },
        epoch_losses,
        class_weights: weights,
    })
}

/// Concatenate each patient's slides into one bag, in first-seen order.
pub fn merge_by_patient(bags: &[Bag]) -> Result<Vec<Bag>> {
    let mut groups: Vec<(String, Vec<&Bag>)> = Vec::new();
    for b in bags {
        match groups.iter_mut().find(|(p, _)| *p == b.patient_id) {
            Some((_, v)) => v.push(b),
            None => groups.push((b.patient_id.clone(), vec![b])),
        }
    }
    groups
        .into_iter()
        .map(|(patient, members)| {
            let label = members[0].label;
            if members.iter().any(|b| b.label != label) {
                return Err(Error::Data(format!("patient `{patient}` has mixed slide labels")));
            }
            let views: Vec<_> = members.iter().map(|b| b.features.view()).collect();
            let features = ndarray::concatenate(ndarray::Axis(0), &views)
                .map_err(|e| Error::Shape(e.to_string()))?;
            let keys = members.iter().flat_map(|b| b.keys.iter().copied()).collect();
            let slide_id = members
                .iter()
                .map(|b| b.slide_id.as_str())
                .collect::<Vec<_>>()
                .join("+");
            Bag::new(slide_id, patient, label, keys, features)
        })
        .collect()
}

/// Unique patients with their label, in first-seen order.
pub fn patient_labels(bags: &[Bag]) -> Result<Vec<(String, u8)>> {
    let mut out: Vec<(String, u8)> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for b in bags {
        match index.get(b.patient_id.as_str()) {
            Some(&i) if out[i].1 != b.label => {
                return Err(Error::Data(format!(
                    "patient `{}` has mixed slide labels",
                    b.patient_id
                )))
            }
            Some(_) => {}
            None => {
                index.insert(&b.patient_id, out.len());
                out.push((b.patient_id.clone(), b.label));
            }
        }
    }
    Ok(out)
}

/// A slide-level model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideScore {
    pub slide_id: String,
    pub patient_id: String,
    pub label: u8,
    pub probability: f64,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub training: FoldTraining,
    /// Slide ids (or merged patient bags) the model was trained on.
    pub train_slides: Vec<String>,
    pub test_patients: Vec<String>,
    pub slide_scores: Vec<SlideScore>,
    pub metrics: FoldMetrics,
}

#[derive(Debug, Clone)]
pub struct CvRun {
    pub split: FoldSplit,
    pub folds: Vec<FoldOutcome>,
    pub report: MetricsReport,
}

impl CvRun {
    /// Seed-derived config used for fold `f`'s training.
    pub fn fold_config(config: &TrainConfig, fold: usize) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(config.seed, STREAM_FOLD_BASE + fold as u64),
            ..config.clone()
        }
    }
}

/// Score a frozen model on bags, capping each bag as in training.
pub fn score_bags(model: &MilModel, bags: &[&Bag], config: &TrainConfig) -> Result<Vec<SlideScore>> {
    bags.iter()
        .map(|b| {
            let bag = capped(b, config.patches_per_bag, slide_seed(config.seed, &b.slide_id));
            Ok(SlideScore {
                slide_id: b.slide_id.clone(),
                patient_id: b.patient_id.clone(),
                label: b.label,
                probability: model.predict(bag.features.view())?,
            })
        })
        .collect()
}

/// Patient score = mean of that patient's slide probabilities.
fn patient_cases(patients: &[String], scores: &[SlideScore]) -> Vec<ScoredCase> {
    patients
        .iter()
        .filter_map(|p| {
            let mine: Vec<&SlideScore> = scores.iter().filter(|s| &s.patient_id == p).collect();
            (!mine.is_empty()).then(|| ScoredCase {
                id: p.clone(),
                score: mine.iter().map(|s| s.probability).sum::<f64>() / mine.len() as f64,
                label: mine[0].label,
            })
        })
        .collect()
}

/// k models on patient-grouped stratified folds, each scored on its
/// held-out patients.
pub fn cross_validate(bags: &[Bag], layout: &FeatureLayout, config: &TrainConfig) -> Result<CvRun> {
    config.validate()?;
    if bags.is_empty() {
        return Err(Error::Empty("no bags".into()));
    }
    let merged;
    let bags = match config.bag_unit {
        BagUnit::Slide => bags,
        BagUnit::Patient => {
            merged = merge_by_patient(bags)?;
            &merged[..]
        }
    };
    let patients = patient_labels(bags)?;
    let split = make_folds(&patients, config.k, derive_seed(config.seed, STREAM_FOLDS))?;
    let fold_index = split.index();
    let bag_folds: Vec<usize> = bags.iter().map(|b| fold_index[b.patient_id.as_str()]).collect();

    let folds: Vec<FoldOutcome> = (0..config.k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<&Bag> = bags.iter().zip(&bag_folds).filter(|(_, &g)| g != f).map(|(b, _)| b).collect();
            let test: Vec<&Bag> = bags.iter().zip(&bag_folds).filter(|(_, &g)| g == f).map(|(b, _)| b).collect();
            let fold_config = CvRun::fold_config(config, f);
            let training = train_on(&train, layout, &fold_config)?;
            let slide_scores = score_bags(&training.checkpoint.model, &test, &fold_config)?;
            let cases = patient_cases(&split.folds[f], &slide_scores);
            let metrics = evaluate_fold(f, &cases, config.threshold)?;
            log::info!(
                "fold {f}: {} train bags, {} test patients, AUC {:.4}",
                train.len(),
                cases.len(),
                metrics.roc_auc
            );
            Ok(FoldOutcome {
                fold: f,
                training,
                train_slides: train.iter().map(|b| b.slide_id.clone()).collect(),
                test_patients: split.folds[f].clone(),
                slide_scores,
                metrics,
            })
        })
        .collect::<Result<_>>()?;

    let predictions = folds
        .iter()
        .flat_map(|f| {
            patient_cases(&f.test_patients, &f.slide_scores)
                .into_iter()
                .map(move |c| Prediction {
                    fold: f.fold,
                    patient_id: c.id,
                    label: c.label,
                    score: c.score,
                })
        })
        .collect();
    let provenance = serde_json::json!({
        "config": config,
        "config_hash": config.hash(),
        "extractors": layout.extractors,
        "extractor_dims": layout.dims,
        "fold_seeds": (0..config.k).map(|f| CvRun::fold_config(config, f).seed).collect::<Vec<_>>(),
        "n_bags": bags.len(),
        "n_patients": patients.len(),
    });
    let report = MetricsReport::new(folds.iter().map(|f| f.metrics.clone()).collect(), predictions, provenance)?;
    Ok(CvRun { split, folds, report })
}
