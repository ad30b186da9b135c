//! Binary classification metrics and fold aggregation.
//!
//! The positive class is `label == 1`. ROC AUC is the Mann-Whitney rank
//! statistic with midranks for ties, i.e. `P(s+ > s-) + ½ P(s+ = s-)`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRIC_NAMES: [&str; 6] = [
    "roc_auc",
    "f_score",
    "specificity",
    "recall",
    "precision",
    "accuracy",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub id: String,
    pub score: f64,
    pub label: u8,
}

impl ScoredCase {
    pub fn new(id: impl Into<String>, score: f64, label: u8) -> Result<Self> {
        if !(score.is_finite() && (0.0..=1.0).contains(&score)) {
            return Err(Error::Data(format!("score {score} outside [0, 1]")));
        }
        if label > 1 {
            return Err(Error::Data(format!("label {label} is not 0/1")));
        }
        Ok(Self {
            id: id.into(),
            score,
            label,
        })
    }
}

pub fn roc_auc(cases: &[ScoredCase]) -> Result<f64> {
    let n_pos = cases.iter().filter(|c| c.label == 1).count();
    let n_neg = cases.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined(format!(
            "{n_pos} positive and {n_neg} negative cases"
        )));
    }
    if let Some(c) = cases.iter().find(|c| !c.score.is_finite()) {
        return Err(Error::Data(format!("case `{}` has score {}", c.id, c.score)));
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.sort_by(|&a, &b| cases[a].score.total_cmp(&cases[b].score));

    // Sum of 1-based midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && cases[order[j]].score == cases[order[i]].score {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| cases[k].label == 1).count();
        rank_sum += midrank * pos_in_group as f64;
        i = j;
    }
    let np = n_pos as f64;
    let u = rank_sum - np * (np + 1.0) / 2.0;
    Ok(u / (np * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub specificity: f64,
    pub recall: f64,
    pub precision: f64,
    pub f_score: f64,
    pub accuracy: f64,
    /// Names of metrics whose ratio was 0/0 and reported as 0.
    pub undefined: Vec<String>,
}

/// Predict positive iff `score >= threshold`.
pub fn confusion_metrics(cases: &[ScoredCase], threshold: f64) -> Result<ConfusionMetrics> {
    if cases.is_empty() {
        return Err(Error::Empty("no scored cases".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for c in cases {
        match (c.score >= threshold, c.label == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let mut undefined = Vec::new();
    let mut ratio = |num: usize, den: usize, name: &str| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let specificity = ratio(tn, tn + fp, "specificity");
    let recall = ratio(tp, tp + fn_, "recall");
    let precision = ratio(tp, tp + fp, "precision");
    let accuracy = (tp + tn) as f64 / cases.len() as f64;
    let f_score = if precision + recall == 0.0 {
        undefined.push("f_score".into());
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ConfusionMetrics {
        tp,
        fp,
        tn,
        fn_,
        specificity,
        recall,
        precision,
        f_score,
        accuracy,
        undefined,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Arithmetic mean and population standard deviation.
pub fn aggregate(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Empty("nothing to aggregate".into()));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Ok(MeanStd {
            mean: values[0],
            std: 0.0,
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(MeanStd {
        mean,
        std: var.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_cases: usize,
    pub roc_auc: f64,
    pub f_score: f64,
    pub specificity: f64,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    #[serde(default)]
    pub undefined: Vec<String>,
}

impl FoldMetrics {
    pub fn get(&self, metric: &str) -> Option<f64> {
        Some(match metric {
            "roc_auc" => self.roc_auc,
            "f_score" => self.f_score,
            "specificity" => self.specificity,
            "recall" => self.recall,
            "precision" => self.precision,
            "accuracy" => self.accuracy,
            _ => return None,
        })
    }
}

pub fn evaluate_fold(fold: usize, cases: &[ScoredCase], threshold: f64) -> Result<FoldMetrics> {
    let auc = roc_auc(cases)?;
    let cm = confusion_metrics(cases, threshold)?;
    Ok(FoldMetrics {
        fold,
        n_cases: cases.len(),
        roc_auc: auc,
        f_score: cm.f_score,
        specificity: cm.specificity,
        recall: cm.recall,
        precision: cm.precision,
        accuracy: cm.accuracy,
        undefined: cm.undefined,
    })
}

pub fn aggregate_folds(folds: &[FoldMetrics]) -> Result<BTreeMap<String, MeanStd>> {
    METRIC_NAMES
        .iter()
        .map(|&name| {
            let values: Vec<f64> = folds.iter().map(|f| f.get(name).expect("known metric")).collect();
            Ok((name.to_string(), aggregate(&values)?))
        })
        .collect()
}

/// One held-out patient's score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub fold: usize,
    pub patient_id: String,
    pub label: u8,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
    pub aggregate: BTreeMap<String, MeanStd>,
    pub predictions: Vec<Prediction>,
    /// Configuration, seeds and layout the report was produced with.
    pub provenance: serde_json::Value,
}

const CSV_HEADER_LEAD: [&str; 2] = ["row", "n_cases"];

impl MetricsReport {
    pub fn new(folds: Vec<FoldMetrics>, predictions: Vec<Prediction>, provenance: serde_json::Value) -> Result<Self> {
        let aggregate = aggregate_folds(&folds)?;
        Ok(Self {
            folds,
            aggregate,
            predictions,
            provenance,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// One row per fold plus a `mean` row; `<metric>_std` columns are filled
    /// on the aggregate row only.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = CSV_HEADER_LEAD.iter().map(|s| s.to_string()).collect();
        for m in METRIC_NAMES {
            header.push(m.to_string());
            header.push(format!("{m}_std"));
        }
        header.push("undefined".into());
        w.write_record(&header)?;
        for f in &self.folds {
            let mut rec = vec![format!("fold{}", f.fold), f.n_cases.to_string()];
            for m in METRIC_NAMES {
                rec.push(f.get(m).expect("known metric").to_string());
                rec.push(String::new());
            }
            rec.push(f.undefined.join(";"));
            w.write_record(&rec)?;
        }
        let n: usize = self.folds.iter().map(|f| f.n_cases).sum();
        let mut rec = vec!["mean".to_string(), n.to_string()];
        for m in METRIC_NAMES {
            let a = self.aggregate.get(m).ok_or_else(|| Error::Data(format!("missing aggregate `{m}`")))?;
            rec.push(a.mean.to_string());
            rec.push(a.std.to_string());
        }
        rec.push(String::new());
        w.write_record(&rec)?;
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Parse the CSV form back into fold rows and the aggregate.
pub fn read_metrics_csv(text: &str) -> Result<(Vec<FoldMetrics>, BTreeMap<String, MeanStd>)> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("metrics CSV lacks column `{name}`")))
    };
    let row_col = col("row")?;
    let n_col = col("n_cases")?;
    let undef_col = col("undefined")?;
    let metric_cols: Vec<(usize, usize)> = METRIC_NAMES
        .iter()
        .map(|m| Ok((col(m)?, col(&format!("{m}_std"))?)))
        .collect::<Result<_>>()?;
    let num = |s: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::Format(format!("`{s}` is not a number")))
    };

    let mut folds = Vec::new();
    let mut aggregate = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let label = &rec[row_col];
        let values: Vec<f64> = metric_cols.iter().map(|&(c, _)| num(&rec[c])).collect::<Result<_>>()?;
        if label == "mean" {
            for (name, (&(_, sc), mean)) in METRIC_NAMES.iter().zip(metric_cols.iter().zip(&values)) {
                aggregate.insert(name.to_string(), MeanStd { mean: *mean, std: num(&rec[sc])? });
            }
        } else {
            let fold = label
                .strip_prefix("fold")
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad row label `{label}`")))?;
            let undefined = rec[undef_col]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            folds.push(FoldMetrics {
                fold,
                n_cases: rec[n_col].parse().map_err(|_| Error::Format("bad n_cases".into()))?,
                roc_auc: values[0],
                f_score: values[1],
                specificity: values[2],
                recall: values[3],
                precision: values[4],
                accuracy: values[5],
                undefined,
            });
        }
    }
    Ok((folds, aggregate))
}
