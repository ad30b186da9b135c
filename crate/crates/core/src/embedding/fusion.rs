//! Patch-level fusion of several extractors' embeddings.
//!
//! Concatenation keeps every extractor's coordinates side by side in the
//! configured order. Attention fusion projects each extractor's vector to a
//! shared width `D` and mixes them with gated-attention weights computed
//! across the extractors of each patch (the instance-scoring form, applied
//! over extractors instead of instances).

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::SlideEmbeddingSet;
use crate::error::{Error, Result};
use crate::mil::{softmax, Dense, GateCache, GatedAttentionParams};
use crate::rng::SplitMix64;

pub const DEFAULT_FUSED_DIM: usize = 256;
pub const DEFAULT_FUSION_ATTENTION_DIM: usize = 128;

/// `K × M` fused patch features for one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBagFeatures {
    pub patch_keys: Vec<(u32, u32)>,
    pub extractor_order: Vec<String>,
    pub matrix: Array2<f64>,
}

/// Row-wise concatenation in `order`; `M = Σ dim_j`.
pub fn concat_fuse(set: &SlideEmbeddingSet, order: &[impl AsRef<str>]) -> Result<FusedBagFeatures> {
    if order.is_empty() {
        return Err(Error::Config("no extractors named for fusion".into()));
    }
    let blocks = order
        .iter()
        .map(|name| set.get(name.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let k = set.num_patches();
    if let Some((i, b)) = blocks.iter().enumerate().find(|(_, b)| b.nrows() != k) {
        return Err(Error::DimensionMismatch(format!(
            "extractor `{}` has {} rows, expected {k}",
            order[i].as_ref(),
            b.nrows()
        )));
    }
    let total: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut matrix = Array2::zeros((k, total));
    let mut offset = 0;
    for b in &blocks {
        matrix
            .slice_mut(s![.., offset..offset + b.ncols()])
            .assign(&b.mapv(f64::from));
        offset += b.ncols();
    }
    Ok(FusedBagFeatures {
        patch_keys: set.patch_keys.clone(),
        extractor_order: order.iter().map(|n| n.as_ref().to_string()).collect(),
        matrix,
    })
}

/// Learned attention fusion: per-extractor projections to `D` plus a gated
/// scorer over the projected vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionFusionParams {
    /// Input width of each extractor, in fusion order.
    pub dims: Vec<usize>,
    /// `D × dim_j` each.
    pub projections: Vec<Dense>,
    pub gate: GatedAttentionParams,
}

#[derive(Debug, Clone)]
pub struct FusionTrace {
    /// `K × D` per extractor.
    pub projected: Vec<Array2<f64>>,
    pub gates: Vec<GateCache>,
    /// `K × n` mixing weights; rows sum to 1.
    pub weights: Array2<f64>,
    /// `K × D`.
    pub fused: Array2<f64>,
}

impl AttentionFusionParams {
    pub fn new(dims: &[usize], fused_dim: usize, attention_dim: usize, rng: &mut SplitMix64) -> Self {
        let projections = dims.iter().map(|&d| Dense::new(d, fused_dim, rng)).collect();
        let gate = GatedAttentionParams::new(fused_dim, attention_dim, rng);
        Self {
            dims: dims.to_vec(),
            projections,
            gate,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            projections: self
                .projections
                .iter()
                .map(|p| Dense::zeros(p.input_dim(), p.output_dim()))
                .collect(),
            gate: GatedAttentionParams::zeros(self.gate.input_dim(), self.gate.attention_dim()),
        }
    }

    pub fn fused_dim(&self) -> usize {
        self.gate.input_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() != self.projections.len() || self.dims.is_empty() {
            return Err(Error::Shape("fusion needs one projection per extractor".into()));
        }
        for (d, p) in self.dims.iter().zip(&self.projections) {
            if p.input_dim() != *d || p.output_dim() != self.fused_dim() || p.bias.len() != p.output_dim() {
                return Err(Error::Shape("fusion projection shape".into()));
            }
        }
        self.gate.validate()
    }

    /// Column ranges of each extractor in the concatenated layout.
    fn blocks(&self) -> Vec<(usize, usize)> {
        let mut offset = 0;
        self.dims
            .iter()
            .map(|&d| {
                let r = (offset, offset + d);
                offset += d;
                r
            })
            .collect()
    }

    /// Fuse concatenated rows (`K × Σ dim_j`) into `K × D`.
    pub fn forward(&self, features: ArrayView2<f64>) -> Result<FusionTrace> {
        if features.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "fusion expects {} columns, got {}",
                self.input_dim(),
                features.ncols()
            )));
        }
        let k = features.nrows();
        let n = self.dims.len();
        let mut projected = Vec::with_capacity(n);
        let mut gates = Vec::with_capacity(n);
        let mut logits = Array2::zeros((k, n));
        for (j, ((lo, hi), proj)) in self.blocks().into_iter().zip(&self.projections).enumerate() {
            let block = features.slice(s![.., lo..hi]);
            let p = block.dot(&proj.weight.t()) + &proj.bias;
            let cache = self.gate.score(p.view())?;
            logits.column_mut(j).assign(&cache.logits);
            projected.push(p);
            gates.push(cache);
        }
        let mut weights = Array2::zeros((k, n));
        for (mut dst, row) in weights.rows_mut().into_iter().zip(logits.rows()) {
            dst.assign(&softmax(row));
        }
        let mut fused = Array2::zeros((k, self.fused_dim()));
        for (j, p) in projected.iter().enumerate() {
            let wj = weights.column(j).insert_axis(Axis(1));
            fused += &(&wj * p);
        }
        Ok(FusionTrace {
            projected,
            gates,
            weights,
            fused,
        })
    }

    /// Accumulate gradients given `∂/∂fused` (`K × D`).
    pub fn backward(
        &self,
        features: ArrayView2<f64>,
        trace: &FusionTrace,
        dfused: ArrayView2<f64>,
        grad: &mut AttentionFusionParams,
    ) {
        let n = self.dims.len();
        let k = features.nrows();
        // dβ_ij = p_ij · dfused_i
        let mut dweights = Array2::zeros((k, n));
        for (j, p) in trace.projected.iter().enumerate() {
            Zip::from(dweights.column_mut(j))
                .and(p.rows())
                .and(dfused.rows())
                .for_each(|d, pr, dr| *d = pr.dot(&dr));
        }
        // Row-wise softmax Jacobian.
        let mut dlogits = Array2::zeros((k, n));
        Zip::from(dlogits.rows_mut())
            .and(trace.weights.rows())
            .and(dweights.rows())
            .for_each(|mut dl, b, db| {
                let mean = b.dot(&db);
                Zip::from(&mut dl)
                    .and(&b)
                    .and(&db)
                    .for_each(|o, &bv, &dbv| *o = bv * (dbv - mean));
            });
        for (j, (lo, hi)) in self.blocks().into_iter().enumerate() {
            let wj = trace.weights.column(j).insert_axis(Axis(1));
            let mut dp = &wj * &dfused;
            let dgate = self
                .gate
                .backward(
                    trace.projected[j].view(),
                    &trace.gates[j],
                    dlogits.column(j),
                    &mut grad.gate,
                    true,
                )
                .expect("requested input gradient");
            dp += &dgate;
            let block = features.slice(s![.., lo..hi]);
            let g = &mut grad.projections[j];
            g.weight += &dp.t().dot(&block);
            g.bias += &dp.sum_axis(Axis(0));
        }
    }
}

/// Attention-fuse a slide's embeddings; `order` must match `params.dims`.
pub fn attention_fuse(
    set: &SlideEmbeddingSet,
    order: &[impl AsRef<str>],
    params: &AttentionFusionParams,
) -> Result<(FusedBagFeatures, Array2<f64>)> {
    params.validate()?;
    let concat = concat_fuse(set, order)?;
    let dims: Vec<usize> = order
        .iter()
        .map(|n| set.get(n.as_ref()).map(|m| m.ncols()))
        .collect::<Result<_>>()?;
    if dims != params.dims {
        return Err(Error::Shape(format!(
            "extractor widths {dims:?} do not match fusion parameters {:?}",
            params.dims
        )));
    }
    let trace = params.forward(concat.matrix.view())?;
    Ok((
        FusedBagFeatures {
            patch_keys: concat.patch_keys,
            extractor_order: concat.extractor_order,
            matrix: trace.fused,
        },
        trace.weights,
    ))
}

/// One extractor's block of a concatenated matrix.
pub fn extractor_block(fused: &FusedBagFeatures, dims: &[usize], index: usize) -> Array2<f64> {
    let offset: usize = dims[..index].iter().sum();
    fused
        .matrix
        .slice(s![.., offset..offset + dims[index]])
        .to_owned()
}
