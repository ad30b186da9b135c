//! Gated-attention multiple-instance model.
//!
//! For a bag of instance features `h_1..h_K` (rows of a `K × M` matrix):
//!
//! ```text
//! a_i = wᵀ (tanh(V h_i) ⊙ sigm(U h_i))
//! α   = softmax(a)
//! z   = Σ α_i h_i
//! p   = sigm(head(z))
//! ```
//!
//! `head` is a ReLU MLP ending in a single logit. When an attention-fusion
//! stage is configured, it runs first and maps the raw per-extractor columns
//! to the fused instance features.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::embedding::fusion::{AttentionFusionParams, FusionTrace};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const DEFAULT_ATTENTION_DIM: usize = 128;
pub const DEFAULT_HEAD_WIDTHS: [usize; 1] = [256];

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut out = logits.mapv(|x| (x - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
fn init_matrix(rows: usize, cols: usize, fan_in: usize, rng: &mut SplitMix64) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.uniform(-bound, bound))
}

fn check_finite(x: ArrayView2<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Learnable tensors of the gated attention scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedAttentionParams {
    /// `L × M`, tanh branch.
    pub v: Array2<f64>,
    /// `L × M`, sigmoid gate branch.
    pub u: Array2<f64>,
    /// `L`.
    pub w: Array1<f64>,
}

/// Intermediates of one scoring pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GateCache {
    /// `tanh(X Vᵀ)`, `K × L`.
    pub tanh: Array2<f64>,
    /// `sigm(X Uᵀ)`, `K × L`.
    pub gate: Array2<f64>,
    /// Unnormalized attention scores, `K`.
    pub logits: Array1<f64>,
}

impl GatedAttentionParams {
    pub fn new(input_dim: usize, attention_dim: usize, rng: &mut SplitMix64) -> Self {
        let v = init_matrix(attention_dim, input_dim, input_dim, rng);
        let u = init_matrix(attention_dim, input_dim, input_dim, rng);
        let w = init_matrix(1, attention_dim, attention_dim, rng).remove_axis(Axis(0));
        Self { v, u, w }
    }

    pub fn zeros(input_dim: usize, attention_dim: usize) -> Self {
        Self {
            v: Array2::zeros((attention_dim, input_dim)),
            u: Array2::zeros((attention_dim, input_dim)),
            w: Array1::zeros(attention_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn attention_dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (l, m) = self.v.dim();
        if self.u.dim() != (l, m) || self.w.len() != l {
            return Err(Error::Shape(format!(
                "gated attention: V is {l}x{m}, U is {:?}, w has {}",
                self.u.dim(),
                self.w.len()
            )));
        }
        Ok(())
    }

    /// Score every row of `x`.
    pub fn score(&self, x: ArrayView2<f64>) -> Result<GateCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "features have {} columns, attention expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let tanh = x.dot(&self.v.t()).mapv_into(f64::tanh);
        let gate = x.dot(&self.u.t()).mapv_into(sigmoid);
        let logits = (&tanh * &gate).dot(&self.w);
        Ok(GateCache { tanh, gate, logits })
    }

    /// Accumulate parameter gradients for upstream `dlogits` into `grad`;
    /// returns the gradient with respect to `x` when asked.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        cache: &GateCache,
        dlogits: ArrayView1<f64>,
        grad: &mut GatedAttentionParams,
        input_grad: bool,
    ) -> Option<Array2<f64>> {
        let gated = &cache.tanh * &cache.gate;
        grad.w += &gated.t().dot(&dlogits);

        // dG = dlogits ⊗ w, then through both branches.
        let k = x.nrows();
        let dgated = dlogits
            .to_owned()
            .into_shape_with_order((k, 1))
            .expect("column")
            .dot(&self.w.view().insert_axis(Axis(0)));
        let mut d_pre_v = Array2::zeros(dgated.raw_dim());
        let mut d_pre_u = Array2::zeros(dgated.raw_dim());
        Zip::from(&mut d_pre_v)
            .and(&mut d_pre_u)
            .and(&dgated)
            .and(&cache.tanh)
            .and(&cache.gate)
            .for_each(|dv, du, &dg, &t, &s| {
                *dv = dg * s * (1.0 - t * t);
                *du = dg * t * s * (1.0 - s);
            });
        grad.v += &d_pre_v.t().dot(&x);
        grad.u += &d_pre_u.t().dot(&x);
        input_grad.then(|| d_pre_v.dot(&self.v) + d_pre_u.dot(&self.u))
    }
}

/// Attention weights `α` for a bag.
pub fn attention_weights(params: &GatedAttentionParams, features: ArrayView2<f64>) -> Result<Array1<f64>> {
    params.validate()?;
    check_finite(features, "instance features")?;
    let cache = params.score(features)?;
    Ok(softmax(cache.logits.view()))
}

/// `z = Σ α_i h_i`.
pub fn pool(alpha: ArrayView1<f64>, features: ArrayView2<f64>) -> Result<Array1<f64>> {
    if alpha.len() != features.nrows() {
        return Err(Error::Shape(format!(
            "{} attention weights for {} instances",
            alpha.len(),
            features.nrows()
        )));
    }
    Ok(features.t().dot(&alpha))
}

/// Fully connected layer, `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn new(input_dim: usize, output_dim: usize, rng: &mut SplitMix64) -> Self {
        Self {
            weight: init_matrix(output_dim, input_dim, input_dim, rng),
            bias: Array1::zeros(output_dim),
        }
    }

    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((output_dim, input_dim)),
            bias: Array1::zeros(output_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// ReLU MLP ending in one logit. An empty hidden list is a linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHeadParams {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    /// Input to each layer.
    pub inputs: Vec<Array1<f64>>,
    /// Pre-activation of each hidden layer.
    pub hidden_pre: Vec<Array1<f64>>,
    pub logit: f64,
}

impl MlpHeadParams {
    pub fn new(input_dim: usize, hidden: &[usize], rng: &mut SplitMix64) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &width in hidden.iter().chain(std::iter::once(&1)) {
            layers.push(Dense::new(fan_in, width, rng));
            fan_in = width;
        }
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::input_dim)
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len().saturating_sub(1)]
            .iter()
            .map(Dense::output_dim)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::Shape("MLP head has no layers".into()));
        };
        if last.output_dim() != 1 {
            return Err(Error::Shape(format!(
                "MLP head ends in {} outputs, expected 1",
                last.output_dim()
            )));
        }
        for pair in self.layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape("MLP head layer widths do not chain".into()));
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Shape("MLP head bias length".into()));
            }
        }
        Ok(())
    }

    pub fn forward(&self, z: ArrayView1<f64>) -> Result<HeadTrace> {
        if z.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "pooled embedding has {} entries, head expects {}",
                z.len(),
                self.input_dim()
            )));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut hidden_pre = Vec::with_capacity(n - 1);
        let mut x = z.to_owned();
        for layer in &self.layers[..n - 1] {
            let pre = layer.weight.dot(&x) + &layer.bias;
            inputs.push(x);
            x = pre.mapv(|v| v.max(0.0));
            hidden_pre.push(pre);
        }
        let last = &self.layers[n - 1];
        let logit = last.weight.row(0).dot(&x) + last.bias[0];
        inputs.push(x);
        Ok(HeadTrace {
            inputs,
            hidden_pre,
            logit,
        })
    }

    /// Accumulate gradients for upstream `dlogit`; returns `∂/∂z`.
    pub fn backward(&self, trace: &HeadTrace, dlogit: f64, grad: &mut MlpHeadParams) -> Array1<f64> {
        let mut delta = Array1::from_elem(1, dlogit);
        for l in (0..self.layers.len()).rev() {
            let input = &trace.inputs[l];
            let g = &mut grad.layers[l];
            g.weight += &outer(delta.view(), input.view());
            g.bias += &delta;
            let mut dx = self.layers[l].weight.t().dot(&delta);
            if l == 0 {
                return dx;
            }
            Zip::from(&mut dx)
                .and(&trace.hidden_pre[l - 1])
                .for_each(|d, &pre| {
                    if pre <= 0.0 {
                        *d = 0.0;
                    }
                });
            delta = dx;
        }
        unreachable!("head has at least one layer")
    }
}

pub(crate) fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Logit and probability of the head on a pooled embedding.
pub fn mlp_forward(head: &MlpHeadParams, z: ArrayView1<f64>) -> Result<(f64, f64)> {
    head.validate()?;
    let trace = head.forward(z)?;
    Ok((trace.logit, sigmoid(trace.logit)))
}

/// One slide's bag of fused instance features.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    pub patient_id: String,
    pub label: u8,
    /// Patch grid key `(row, col)` for each instance row.
    pub keys: Vec<(u32, u32)>,
    pub features: Array2<f64>,
}

impl Bag {
    pub fn new(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        label: u8,
        keys: Vec<(u32, u32)>,
        features: Array2<f64>,
    ) -> Result<Self> {
        let slide_id = slide_id.into();
        if features.nrows() == 0 {
            return Err(Error::Empty(format!("bag `{slide_id}` has no instances")));
        }
        if keys.len() != features.nrows() {
            return Err(Error::Shape(format!(
                "bag `{slide_id}`: {} keys for {} instances",
                keys.len(),
                features.nrows()
            )));
        }
        if label > 1 {
            return Err(Error::Data(format!("bag `{slide_id}`: label {label} is not 0/1")));
        }
        check_finite(features.view(), &format!("bag `{slide_id}`"))?;
        Ok(Self {
            slide_id,
            patient_id: patient_id.into(),
            label,
            keys,
            features,
        })
    }

    /// Bag whose keys are just the row indices.
    pub fn from_features(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        label: u8,
        features: Array2<f64>,
    ) -> Result<Self> {
        let keys = (0..features.nrows() as u32).map(|i| (0, i)).collect();
        Self::new(slide_id, patient_id, label, keys, features)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    /// Bag restricted to the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Bag {
        Bag {
            slide_id: self.slide_id.clone(),
            patient_id: self.patient_id.clone(),
            label: self.label,
            keys: rows.iter().map(|&r| self.keys[r]).collect(),
            features: self.features.select(Axis(0), rows),
        }
    }
}

/// Layout of a model: raw extractor widths, attention width, head, fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub extractor_dims: Vec<usize>,
    pub attention_dim: usize,
    pub head_widths: Vec<usize>,
    pub fusion: Option<FusionShape>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionShape {
    pub fused_dim: usize,
    pub attention_dim: usize,
}

impl ModelShape {
    pub fn concat(extractor_dims: Vec<usize>) -> Self {
        Self {
            extractor_dims,
            attention_dim: DEFAULT_ATTENTION_DIM,
            head_widths: DEFAULT_HEAD_WIDTHS.to_vec(),
            fusion: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor_dims.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilModel {
    pub fusion: Option<AttentionFusionParams>,
    pub attention: GatedAttentionParams,
    pub head: MlpHeadParams,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub fusion: Option<FusionTrace>,
    pub gate: GateCache,
    pub alpha: Array1<f64>,
    pub pooled: Array1<f64>,
    pub head: HeadTrace,
    pub logit: f64,
    pub probability: f64,
}

impl ForwardTrace {
    pub fn attention_logits(&self) -> &Array1<f64> {
        &self.gate.logits
    }
}

impl MilModel {
    /// Fresh parameters. Weights are uniform in ±1/sqrt(fan_in), biases 0.
    pub fn new(shape: &ModelShape, seed: u64) -> Result<Self> {
        if shape.extractor_dims.is_empty() || shape.extractor_dims.contains(&0) {
            return Err(Error::Config("extractor dims must be nonempty and positive".into()));
        }
        if shape.attention_dim == 0 || shape.head_widths.contains(&0) {
            return Err(Error::Config("attention and head widths must be positive".into()));
        }
        let mut rng = SplitMix64::new(seed);
        let fusion = match shape.fusion {
            Some(f) => {
                if f.fused_dim == 0 || f.attention_dim == 0 {
                    return Err(Error::Config("fusion widths must be positive".into()));
                }
                Some(AttentionFusionParams::new(
                    &shape.extractor_dims,
                    f.fused_dim,
                    f.attention_dim,
                    &mut rng,
                ))
            }
            None => None,
        };
        let pooled_dim = fusion
            .as_ref()
            .map_or(shape.input_dim(), AttentionFusionParams::fused_dim);
        let attention = GatedAttentionParams::new(pooled_dim, shape.attention_dim, &mut rng);
        let head = MlpHeadParams::new(pooled_dim, &shape.head_widths, &mut rng);
        Ok(Self {
            fusion,
            attention,
            head,
        })
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            extractor_dims: match &self.fusion {
                Some(f) => f.dims.clone(),
                None => vec![self.attention.input_dim()],
            },
            attention_dim: self.attention.attention_dim(),
            head_widths: self.head.hidden_widths(),
            fusion: self.fusion.as_ref().map(|f| FusionShape {
                fused_dim: f.fused_dim(),
                attention_dim: f.gate.attention_dim(),
            }),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fusion: self.fusion.as_ref().map(AttentionFusionParams::zeros_like),
            attention: GatedAttentionParams::zeros(
                self.attention.input_dim(),
                self.attention.attention_dim(),
            ),
            head: self.head.zeros_like(),
        }
    }

    /// Width of the raw (concatenated) feature rows the model consumes.
    pub fn input_dim(&self) -> usize {
        match &self.fusion {
            Some(f) => f.input_dim(),
            None => self.attention.input_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(f) = &self.fusion {
            f.validate()?;
            if f.fused_dim() != self.attention.input_dim() {
                return Err(Error::Shape("fusion output does not match attention input".into()));
            }
        }
        self.attention.validate()?;
        self.head.validate()?;
        if self.head.input_dim() != self.attention.input_dim() {
            return Err(Error::Shape("head input does not match pooled width".into()));
        }
        Ok(())
    }

    pub fn forward(&self, features: ArrayView2<f64>) -> Result<ForwardTrace> {
        if features.nrows() == 0 {
            return Err(Error::Empty("bag has no instances".into()));
        }
        if features.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "features have {} columns, model expects {}",
                features.ncols(),
                self.input_dim()
            )));
        }
        check_finite(features, "instance features")?;
        let fusion = match &self.fusion {
            Some(f) => Some(f.forward(features)?),
            None => None,
        };
        let x = fusion.as_ref().map_or(features, |t| t.fused.view());
        let gate = self.attention.score(x)?;
        let alpha = softmax(gate.logits.view());
        let pooled = pool(alpha.view(), x)?;
        let head = self.head.forward(pooled.view())?;
        let logit = head.logit;
        Ok(ForwardTrace {
            fusion,
            gate,
            alpha,
            pooled,
            head,
            logit,
            probability: sigmoid(logit),
        })
    }

    pub fn predict(&self, features: ArrayView2<f64>) -> Result<f64> {
        Ok(self.forward(features)?.probability)
    }

    /// Gradient of the model output logit's upstream `dlogit` with respect
    /// to every parameter, accumulated into `grad`.
    pub fn backward(
        &self,
        features: ArrayView2<f64>,
        trace: &ForwardTrace,
        dlogit: f64,
        grad: &mut MilModel,
    ) {
        let dz = self.head.backward(&trace.head, dlogit, &mut grad.head);
        let x = trace.fusion.as_ref().map_or(features, |t| t.fused.view());

        // Pooling: dα_i = h_i · dz; softmax Jacobian: da = α ⊙ (dα − αᵀdα).
        let dalpha = x.dot(&dz);
        let mean = trace.alpha.dot(&dalpha);
        let dlogits = &trace.alpha * &(dalpha - mean);

        let want_dx = self.fusion.is_some();
        let dx_gate = self
            .attention
            .backward(x, &trace.gate, dlogits.view(), &mut grad.attention, want_dx);

        if let (Some(fusion), Some(ftrace), Some(gfusion)) =
            (&self.fusion, &trace.fusion, grad.fusion.as_mut())
        {
            let mut dx = outer(trace.alpha.view(), dz.view());
            dx += &dx_gate.expect("requested input gradient");
            fusion.backward(features, ftrace, dx.view(), gfusion);
        }
    }

    /// Parameter tensors in a fixed order: fusion, attention, head.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if let Some(f) = &self.fusion {
            for p in &f.projections {
                out.push(slice(&p.weight));
                out.push(p.bias.as_slice().expect("contiguous"));
            }
            push_gate(&mut out, &f.gate);
        }
        push_gate(&mut out, &self.attention);
        for l in &self.head.layers {
            out.push(slice(&l.weight));
            out.push(l.bias.as_slice().expect("contiguous"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some(f) = &mut self.fusion {
            for p in &mut f.projections {
                out.push(p.weight.as_slice_mut().expect("contiguous"));
                out.push(p.bias.as_slice_mut().expect("contiguous"));
            }
            push_gate_mut(&mut out, &mut f.gate);
        }
        push_gate_mut(&mut out, &mut self.attention);
        for l in &mut self.head.layers {
            out.push(l.weight.as_slice_mut().expect("contiguous"));
            out.push(l.bias.as_slice_mut().expect("contiguous"));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Multiply every parameter by `c`.
    pub fn scale(&mut self, c: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= c);
        }
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

fn push_gate<'a>(out: &mut Vec<&'a [f64]>, g: &'a GatedAttentionParams) {
    out.push(slice(&g.v));
    out.push(slice(&g.u));
    out.push(g.w.as_slice().expect("contiguous"));
}

fn push_gate_mut<'a>(out: &mut Vec<&'a mut [f64]>, g: &'a mut GatedAttentionParams) {
    out.push(g.v.as_slice_mut().expect("contiguous"));
    out.push(g.u.as_slice_mut().expect("contiguous"));
    out.push(g.w.as_slice_mut().expect("contiguous"));
}

/// Forward pass over a bag.
pub fn forward(model: &MilModel, bag: &Bag) -> Result<ForwardTrace> {
    model.forward(bag.features.view())
}
