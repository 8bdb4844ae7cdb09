//! Split network with hand-written forward and backward passes.
//!
//! Layout: one feature extractor per input block (a worker's slice of the
//! features), concatenated into the representation `h` of width `d1`, then
//! the first fully connected layer `u = W1^T h + b1` (width `d2`), a sigmoid,
//! and a dense classifier head trained with softmax cross-entropy.
//!
//! Every pass is generic over [`Real`] so that the same code computes ordinary
//! gradients and, with dual-valued parameters, gradient-of-gradient products.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dual::{sigmoid, softmax, Dual, Real};
use crate::error::{LabError, Result};
use crate::tensor::Tensor;

/// One extractor layer. Extractor layers are applied to every block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Identity,
    Dense { out_dim: usize },
    Conv2d { channels: usize, kernel: usize, stride: usize },
    Relu,
    Sigmoid,
}

/// Features consumed by one extractor, with their spatial arrangement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub indices: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Shape3 {
    c: usize,
    h: usize,
    w: usize,
}

impl Shape3 {
    fn len(self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerPlan {
    spec: LayerSpec,
    input: Shape3,
    output: Shape3,
    /// Index of the weight tensor; the bias follows it.
    param: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockPlan {
    indices: Vec<usize>,
    layers: Vec<LayerPlan>,
    out_len: usize,
}

/// Validated architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    input_dim: usize,
    blocks: Vec<BlockPlan>,
    extractor: Vec<LayerSpec>,
    d1: usize,
    d2: usize,
    classes: usize,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    fan_in: Vec<usize>,
    fc1: usize,
}

impl ModelSpec {
    pub fn new(
        input_dim: usize,
        blocks: Vec<FeatureBlock>,
        extractor: Vec<LayerSpec>,
        d2: usize,
        classes: usize,
    ) -> Result<Self> {
        if blocks.is_empty() {
            return Err(LabError::InvalidArgument("model needs at least one block".into()));
        }
        if d2 == 0 || classes < 2 {
            return Err(LabError::InvalidArgument(format!(
                "need d2 >= 1 and at least 2 classes, got d2={d2}, classes={classes}"
            )));
        }
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut fan_in = Vec::new();
        let mut plans = Vec::with_capacity(blocks.len());
        let mut d1 = 0;
        for (b, block) in blocks.iter().enumerate() {
            if block.indices.is_empty() || block.height * block.width != block.indices.len() {
                return Err(LabError::dimension(
                    format!("block {b} spatial layout"),
                    block.indices.len(),
                    block.height * block.width,
                ));
            }
            if let Some(&bad) = block.indices.iter().find(|&&i| i >= input_dim) {
                return Err(LabError::InvalidArgument(format!(
                    "block {b} references feature {bad} outside input width {input_dim}"
                )));
            }
            let mut shape = Shape3 {
                c: 1,
                h: block.height,
                w: block.width,
            };
            let mut layers = Vec::with_capacity(extractor.len());
            for (l, &spec) in extractor.iter().enumerate() {
                let (output, param_shapes, fan) = match spec {
                    LayerSpec::Identity | LayerSpec::Relu | LayerSpec::Sigmoid => (shape, None, 0),
                    LayerSpec::Dense { out_dim } => {
                        if out_dim == 0 {
                            return Err(LabError::InvalidArgument("dense out_dim must be >= 1".into()));
                        }
                        (
                            Shape3 { c: out_dim, h: 1, w: 1 },
                            Some((vec![shape.len(), out_dim], vec![out_dim])),
                            shape.len(),
                        )
                    }
                    LayerSpec::Conv2d {
                        channels,
                        kernel,
                        stride,
                    } => {
                        if channels == 0 || kernel == 0 || stride == 0 {
                            return Err(LabError::InvalidArgument(
                                "conv2d channels, kernel and stride must be >= 1".into(),
                            ));
                        }
                        if kernel > shape.h || kernel > shape.w {
                            return Err(LabError::dimension(
                                format!("conv kernel on block {b}"),
                                format!("<= {}x{}", shape.h, shape.w),
                                kernel,
                            ));
                        }
                        let out = Shape3 {
                            c: channels,
                            h: (shape.h - kernel) / stride + 1,
                            w: (shape.w - kernel) / stride + 1,
                        };
                        (
                            out,
                            Some((vec![channels, shape.c, kernel, kernel], vec![channels])),
                            shape.c * kernel * kernel,
                        )
                    }
                };
                let param = param_shapes.map(|(w, bias)| {
                    let idx = names.len();
                    names.push(format!("extractor.{b}.{l}.weight"));
                    shapes.push(w);
                    fan_in.push(fan);
                    names.push(format!("extractor.{b}.{l}.bias"));
                    shapes.push(bias);
                    fan_in.push(fan);
                    idx
                });
                layers.push(LayerPlan {
                    spec,
                    input: shape,
                    output,
                    param,
                });
                shape = output;
            }
            d1 += shape.len();
            plans.push(BlockPlan {
                indices: block.indices.clone(),
                layers,
                out_len: shape.len(),
            });
        }
        let fc1 = names.len();
        for (name, shape, fan) in [
            ("fc1.weight", vec![d1, d2], d1),
            ("fc1.bias", vec![d2], d1),
            ("head.weight", vec![d2, classes], d2),
            ("head.bias", vec![classes], d2),
        ] {
            names.push(name.to_string());
            shapes.push(shape);
            fan_in.push(fan);
        }
        Ok(Self {
            input_dim,
            blocks: plans,
            extractor,
            d1,
            d2,
            classes,
            names,
            shapes,
            fan_in,
            fc1,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn d1(&self) -> usize {
        self.d1
    }
    pub fn d2(&self) -> usize {
        self.d2
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }
    pub fn extractor(&self) -> &[LayerSpec] {
        &self.extractor
    }
    /// Parameter ids in canonical order.
    pub fn param_ids(&self) -> &[String] {
        &self.names
    }
    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }
    pub fn fc1_weight_index(&self) -> usize {
        self.fc1
    }
    pub fn fc1_bias_index(&self) -> usize {
        self.fc1 + 1
    }
    /// True when the extractor has no parameters and is the identity map.
    pub fn is_identity_extractor(&self) -> bool {
        self.extractor.iter().all(|l| matches!(l, LayerSpec::Identity))
    }
}

/// Named parameter tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Seeded uniform initialisation, `U(-gain/sqrt(fan_in), gain/sqrt(fan_in))`.
    pub fn init(spec: ModelSpec, seed: u64, gain: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = spec
            .shapes
            .iter()
            .zip(&spec.fan_in)
            .map(|(shape, &fan)| {
                let bound = gain / (fan.max(1) as f64).sqrt();
                let len: usize = shape.iter().product();
                let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape.clone(), data).expect("shape product")
            })
            .collect();
        Self { spec, tensors }
    }

    pub fn zeros(spec: ModelSpec) -> Self {
        let tensors = spec.shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        Self { spec, tensors }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }
    pub fn d1(&self) -> usize {
        self.spec.d1
    }
    pub fn d2(&self) -> usize {
        self.spec.d2
    }
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }
    pub fn ids(&self) -> &[String] {
        &self.spec.names
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.spec.names.iter().position(|n| n == id).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Tensor> {
        let i = self.spec.names.iter().position(|n| n == id)?;
        Some(&mut self.tensors[i])
    }

    /// `W1`, shape `(d1, d2)`.
    pub fn fc1_weight(&self) -> &Tensor {
        &self.tensors[self.spec.fc1]
    }
    /// `b1`, length `d2`.
    pub fn fc1_bias(&self) -> &Tensor {
        &self.tensors[self.spec.fc1 + 1]
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn raw(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.data().to_vec()).collect()
    }
}

/// Inputs `K x F` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(LabError::dimension("batch inputs rank", 2, inputs.shape().len()));
        }
        if inputs.rows() == 0 {
            return Err(LabError::InvalidArgument("batch must hold at least one sample".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(LabError::dimension("batch labels", inputs.rows(), labels.len()));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.inputs.row_len() != spec.input_dim {
            return Err(LabError::dimension("batch feature width", spec.input_dim, self.inputs.row_len()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= spec.classes) {
            return Err(LabError::InvalidArgument(format!(
                "label {bad} outside [0, {})",
                spec.classes
            )));
        }
        Ok(())
    }

    fn one_hot(&self, classes: usize) -> Vec<Vec<f64>> {
        self.labels
            .iter()
            .map(|&y| {
                let mut v = vec![0.0; classes];
                v[y] = 1.0;
                v
            })
            .collect()
    }
}

/// Named per-parameter gradients uploaded in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub ids: Vec<String>,
    pub grads: Vec<Tensor>,
    pub round: usize,
}

impl GradientReport {
    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.ids.iter().position(|n| n == id).map(|i| &self.grads[i])
    }

    pub fn same_keys(&self, other: &GradientReport) -> Result<()> {
        if self.ids != other.ids {
            return Err(LabError::KeyMismatch(format!("{:?} vs {:?}", self.ids, other.ids)));
        }
        for (i, (a, b)) in self.grads.iter().zip(&other.grads).enumerate() {
            a.same_shape(b, &self.ids[i])?;
        }
        Ok(())
    }

    /// L2 norm over the concatenation of every tensor.
    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// Everything produced by one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Backward {
    pub loss: f64,
    pub grads: GradientReport,
    /// Row `n` is `dL(batch)/du_n`, carrying the `1/K` batch factor.
    pub du_rows: Tensor,
    /// Row `n` is `dL(batch)/dx_n`.
    pub input_grads: Tensor,
    /// Representations `h_n`, one row per sample.
    pub h_rows: Tensor,
}

pub fn forward_representation(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    if x.len() != params.spec.input_dim {
        return Err(LabError::dimension("input features", params.spec.input_dim, x.len()));
    }
    let raw = params.raw();
    let h = representation(&params.spec, &raw, x.data(), None);
    Ok(Tensor::from_vec(h))
}

pub fn forward_first_fc(params: &ModelParams, h: &Tensor) -> Result<Tensor> {
    if h.len() != params.d1() {
        return Err(LabError::dimension("representation width", params.d1(), h.len()));
    }
    let w = params.fc1_weight().data();
    let b = params.fc1_bias().data();
    Ok(Tensor::from_vec(fc_forward(w, b, h.data(), params.d2())))
}

/// Mean softmax cross-entropy over the batch.
pub fn loss_batch(params: &ModelParams, batch: &LabeledBatch) -> Result<f64> {
    batch.validate(&params.spec)?;
    let raw = params.raw();
    let rows = batch_rows(&batch.inputs);
    let pass = execute(&params.spec, &raw, &rows, &batch.one_hot(params.spec.classes), false, false);
    Ok(pass.loss)
}

pub fn backward_full(params: &ModelParams, batch: &LabeledBatch) -> Result<Backward> {
    batch.validate(&params.spec)?;
    let raw = params.raw();
    let rows = batch_rows(&batch.inputs);
    let pass = execute(&params.spec, &raw, &rows, &batch.one_hot(params.spec.classes), true, true);
    Ok(pass.into_backward(params, 0))
}

/// Representations of every row of `inputs`.
pub fn representations(params: &ModelParams, inputs: &Tensor) -> Result<Tensor> {
    if inputs.row_len() != params.spec.input_dim {
        return Err(LabError::dimension("input features", params.spec.input_dim, inputs.row_len()));
    }
    let raw = params.raw();
    let rows: Vec<Vec<f64>> = (0..inputs.rows())
        .map(|n| representation(&params.spec, &raw, inputs.row(n), None))
        .collect();
    Tensor::from_rows(&rows)
}

/// `J_h(x)^T dh`: pulls a representation cotangent back to the inputs.
pub fn representation_vjp(params: &ModelParams, x: &[f64], dh: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.spec.input_dim || dh.len() != params.d1() {
        return Err(LabError::dimension(
            "representation vjp",
            format!("({}, {})", params.spec.input_dim, params.d1()),
            format!("({}, {})", x.len(), dh.len()),
        ));
    }
    let raw = params.raw();
    let mut cache = Vec::new();
    representation(&params.spec, &raw, x, Some(&mut cache));
    let mut pg: Vec<Vec<f64>> = raw.iter().map(|t| vec![0.0; t.len()]).collect();
    Ok(representation_backward(&params.spec, &raw, &cache, dh, &mut pg, true))
}

/// Loss, gradients and label-gradients for soft targets; the fake side of a
/// gradient-matching objective.
#[derive(Debug, Clone)]
pub struct SoftPass {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub h_rows: Vec<Vec<f64>>,
}

pub(crate) fn soft_pass(params: &ModelParams, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> SoftPass {
    let raw = params.raw();
    let pass = execute(&params.spec, &raw, inputs, targets, false, false);
    SoftPass {
        loss: pass.loss,
        grads: pass.param_grads,
        h_rows: pass.h,
    }
}

/// Input and target cotangents of `<grad_theta L(theta, x, y), direction>`.
///
/// Evaluates the backward pass with dual parameters `theta + eps * direction`;
/// the `eps` parts of the input and target gradients are the exact products.
pub(crate) fn gradient_direction_vjp(
    params: &ModelParams,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    direction: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let dual_params: Vec<Vec<Dual>> = params
        .tensors
        .iter()
        .zip(direction)
        .map(|(t, d)| t.data().iter().zip(d).map(|(&v, &e)| Dual::new(v, e)).collect())
        .collect();
    let lift = |rows: &[Vec<f64>]| -> Vec<Vec<Dual>> {
        rows.iter().map(|r| r.iter().map(|&v| Dual::new(v, 0.0)).collect()).collect()
    };
    let pass = execute(&params.spec, &dual_params, &lift(inputs), &lift(targets), true, false);
    let eps = |rows: Vec<Vec<Dual>>| -> Vec<Vec<f64>> {
        rows.into_iter().map(|r| r.into_iter().map(|d| d.eps).collect()).collect()
    };
    (eps(pass.input_grads), eps(pass.target_grads))
}

fn batch_rows(inputs: &Tensor) -> Vec<Vec<f64>> {
    (0..inputs.rows()).map(|n| inputs.row(n).to_vec()).collect()
}

struct Pass<T> {
    loss: T,
    param_grads: Vec<Vec<T>>,
    input_grads: Vec<Vec<T>>,
    target_grads: Vec<Vec<T>>,
    du: Vec<Vec<T>>,
    h: Vec<Vec<T>>,
}

impl Pass<f64> {
    fn into_backward(self, params: &ModelParams, round: usize) -> Backward {
        let grads = self
            .param_grads
            .into_iter()
            .zip(&params.spec.shapes)
            .map(|(g, s)| Tensor::new(s.clone(), g).expect("gradient shape"))
            .collect();
        Backward {
            loss: self.loss,
            grads: GradientReport {
                ids: params.spec.names.clone(),
                grads,
                round,
            },
            du_rows: Tensor::from_rows(&self.du).expect("du rows"),
            input_grads: Tensor::from_rows(&self.input_grads).expect("input grads"),
            h_rows: Tensor::from_rows(&self.h).expect("h rows"),
        }
    }
}

fn fc_forward<T: Real>(w: &[T], b: &[T], x: &[T], out: usize) -> Vec<T> {
    let mut y = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out..(i + 1) * out];
        for (yj, &wij) in y.iter_mut().zip(row) {
            *yj += wij * xi;
        }
    }
    y
}

/// Accumulates weight and bias gradients, returns the input cotangent.
fn fc_backward<T: Real>(w: &[T], x: &[T], dy: &[T], gw: &mut [T], gb: &mut [T], out: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out..(i + 1) * out];
        let grow = &mut gw[i * out..(i + 1) * out];
        let mut acc = T::zero();
        for j in 0..out {
            grow[j] += xi * dy[j];
            acc += row[j] * dy[j];
        }
        dx[i] = acc;
    }
    for (g, &d) in gb.iter_mut().zip(dy) {
        *g += d;
    }
    dx
}

fn conv_forward<T: Real>(w: &[T], b: &[T], x: &[T], inp: Shape3, out: Shape3, k: usize, stride: usize) -> Vec<T> {
    let mut y = vec![T::zero(); out.len()];
    for o in 0..out.c {
        for r in 0..out.h {
            for c in 0..out.w {
                let mut acc = b[o];
                for i in 0..inp.c {
                    for p in 0..k {
                        for q in 0..k {
                            let wv = w[((o * inp.c + i) * k + p) * k + q];
                            let xv = x[(i * inp.h + r * stride + p) * inp.w + c * stride + q];
                            acc += wv * xv;
                        }
                    }
                }
                y[(o * out.h + r) * out.w + c] = acc;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    w: &[T],
    x: &[T],
    dy: &[T],
    gw: &mut [T],
    gb: &mut [T],
    inp: Shape3,
    out: Shape3,
    k: usize,
    stride: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); inp.len()];
    for o in 0..out.c {
        for r in 0..out.h {
            for c in 0..out.w {
                let d = dy[(o * out.h + r) * out.w + c];
                gb[o] += d;
                for i in 0..inp.c {
                    for p in 0..k {
                        for q in 0..k {
                            let wi = ((o * inp.c + i) * k + p) * k + q;
                            let xi = (i * inp.h + r * stride + p) * inp.w + c * stride + q;
                            gw[wi] += x[xi] * d;
                            dx[xi] += w[wi] * d;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Per-block layer inputs and outputs recorded for the backward pass.
type BlockCache<T> = Vec<Vec<T>>;

fn representation<T: Real>(
    spec: &ModelSpec,
    params: &[Vec<T>],
    x: &[T],
    mut cache: Option<&mut Vec<BlockCache<T>>>,
) -> Vec<T> {
    let mut h = Vec::with_capacity(spec.d1);
    for block in &spec.blocks {
        let mut act: Vec<T> = block.indices.iter().map(|&i| x[i]).collect();
        let mut trace = Vec::with_capacity(block.layers.len() + 1);
        for layer in &block.layers {
            let next = match layer.spec {
                LayerSpec::Identity => act.clone(),
                LayerSpec::Relu => act
                    .iter()
                    .map(|&v| if v.value() > 0.0 { v } else { T::zero() })
                    .collect(),
                LayerSpec::Sigmoid => act.iter().map(|&v| sigmoid(v)).collect(),
                LayerSpec::Dense { out_dim } => {
                    let p = layer.param.expect("dense params");
                    fc_forward(&params[p], &params[p + 1], &act, out_dim)
                }
                LayerSpec::Conv2d { kernel, stride, .. } => {
                    let p = layer.param.expect("conv params");
                    conv_forward(&params[p], &params[p + 1], &act, layer.input, layer.output, kernel, stride)
                }
            };
            trace.push(std::mem::replace(&mut act, next));
        }
        h.extend_from_slice(&act);
        trace.push(act);
        if let Some(c) = cache.as_deref_mut() {
            c.push(trace);
        }
    }
    h
}

/// Backpropagates `dh` through every extractor; returns `dL/dx` when asked.
fn representation_backward<T: Real>(
    spec: &ModelSpec,
    params: &[Vec<T>],
    cache: &[BlockCache<T>],
    dh: &[T],
    pg: &mut [Vec<T>],
    want_input: bool,
) -> Vec<T> {
    let mut dx = if want_input {
        vec![T::zero(); spec.input_dim]
    } else {
        Vec::new()
    };
    let mut offset = 0;
    for (block, trace) in spec.blocks.iter().zip(cache) {
        let mut d = dh[offset..offset + block.out_len].to_vec();
        offset += block.out_len;
        for (l, layer) in block.layers.iter().enumerate().rev() {
            let input = &trace[l];
            let output = &trace[l + 1];
            d = match layer.spec {
                LayerSpec::Identity => d,
                LayerSpec::Relu => d
                    .iter()
                    .zip(input)
                    .map(|(&g, &v)| if v.value() > 0.0 { g } else { T::zero() })
                    .collect(),
                LayerSpec::Sigmoid => d
                    .iter()
                    .zip(output)
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect(),
                LayerSpec::Dense { out_dim } => {
                    let p = layer.param.expect("dense params");
                    let (gw, gb) = split_pair(pg, p);
                    fc_backward(&params[p], input, &d, gw, gb, out_dim)
                }
                LayerSpec::Conv2d { kernel, stride, .. } => {
                    let p = layer.param.expect("conv params");
                    let (gw, gb) = split_pair(pg, p);
                    conv_backward(&params[p], input, &d, gw, gb, layer.input, layer.output, kernel, stride)
                }
            };
        }
        if want_input {
            for (&i, &g) in block.indices.iter().zip(&d) {
                dx[i] += g;
            }
        }
    }
    dx
}

fn split_pair<T>(pg: &mut [Vec<T>], p: usize) -> (&mut [T], &mut [T]) {
    let (a, b) = pg[p..p + 2].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

/// Forward and backward over a batch with soft targets (rows summing to one
/// for real labels; fake labels are softmax outputs and also sum to one).
fn execute<T: Real>(
    spec: &ModelSpec,
    params: &[Vec<T>],
    inputs: &[Vec<T>],
    targets: &[Vec<T>],
    want_input: bool,
    want_rows: bool,
) -> Pass<T> {
    let k = inputs.len();
    let inv_k = 1.0 / k as f64;
    let (d2, classes) = (spec.d2, spec.classes);
    let (w1, b1) = (&params[spec.fc1], &params[spec.fc1 + 1]);
    let (w2, b2) = (&params[spec.fc1 + 2], &params[spec.fc1 + 3]);
    let mut pg: Vec<Vec<T>> = params.iter().map(|t| vec![T::zero(); t.len()]).collect();
    let mut loss = T::zero();
    let mut input_grads = Vec::new();
    let mut target_grads = Vec::with_capacity(k);
    let mut du_rows = Vec::new();
    let mut h_rows = Vec::with_capacity(k);

    for (x, y) in inputs.iter().zip(targets) {
        let mut cache = Vec::with_capacity(spec.blocks.len());
        let h = representation(spec, params, x, Some(&mut cache));
        let u = fc_forward(w1, b1, &h, d2);
        let a: Vec<T> = u.iter().map(|&v| sigmoid(v)).collect();
        let z = fc_forward(w2, b2, &a, classes);

        let m = z.iter().map(|v| v.value()).fold(f64::NEG_INFINITY, f64::max);
        let shift = T::from_f64(m);
        let mut sum = T::zero();
        for &v in &z {
            sum += (v - shift).exp();
        }
        let lse = shift + sum.ln();
        let log_p: Vec<T> = z.iter().map(|&v| v - lse).collect();
        let p = softmax(&z);

        let mut y_sum = T::zero();
        let mut sample_loss = T::zero();
        for (&yc, &lp) in y.iter().zip(&log_p) {
            y_sum += yc;
            sample_loss -= yc * lp;
        }
        loss += sample_loss.scale(inv_k);
        target_grads.push(log_p.iter().map(|&lp| (-lp).scale(inv_k)).collect::<Vec<T>>());

        let dz: Vec<T> = p
            .iter()
            .zip(y)
            .map(|(&pc, &yc)| (pc * y_sum - yc).scale(inv_k))
            .collect();
        let (head_w, rest) = pg[spec.fc1 + 2..].split_at_mut(1);
        let da = fc_backward(w2, &a, &dz, &mut head_w[0], &mut rest[0], classes);
        let du: Vec<T> = da
            .iter()
            .zip(&a)
            .map(|(&g, &av)| g * av * (T::one() - av))
            .collect();
        let (gw1, gb1) = split_pair(&mut pg, spec.fc1);
        let dh = fc_backward(w1, &h, &du, gw1, gb1, d2);
        let dx = representation_backward(spec, params, &cache, &dh, &mut pg, want_input);
        if want_input {
            input_grads.push(dx);
        }
        if want_rows {
            du_rows.push(du);
        }
        h_rows.push(h);
    }
    Pass {
        loss,
        param_grads: pg,
        input_grads,
        target_grads,
        du: du_rows,
        h: h_rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_spec(h: usize, w: usize, extractor: Vec<LayerSpec>, d2: usize, classes: usize) -> ModelSpec {
        let block = FeatureBlock {
            indices: (0..h * w).collect(),
            height: h,
            width: w,
        };
        ModelSpec::new(h * w, vec![block], extractor, d2, classes).unwrap()
    }

    #[test]
    fn identity_extractor_passes_input_through() {
        let spec = image_spec(2, 3, vec![LayerSpec::Identity], 4, 2);
        let p = ModelParams::init(spec, 1, 1.0);
        let x = Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(forward_representation(&p, &x).unwrap(), x);
    }

    #[test]
    fn zero_dense_extractor_gives_zero_representation() {
        let spec = image_spec(2, 2, vec![LayerSpec::Dense { out_dim: 3 }], 2, 2);
        let p = ModelParams::zeros(spec);
        let h = forward_representation(&p, &Tensor::from_vec(vec![1.0, -2.0, 3.0, 4.0])).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let conv = LayerSpec::Conv2d {
            channels: 1,
            kernel: 2,
            stride: 1,
        };
        let spec = image_spec(2, 2, vec![conv], 2, 2);
        let mut p = ModelParams::zeros(spec);
        p.get_mut("extractor.0.0.weight").unwrap().data_mut().fill(1.0);
        let h = forward_representation(&p, &Tensor::from_vec(vec![1.0; 4])).unwrap();
        assert_eq!(h.data(), &[4.0]);
    }

    #[test]
    fn first_fc_hand_example() {
        let spec = image_spec(1, 2, vec![LayerSpec::Identity], 2, 2);
        let mut p = ModelParams::zeros(spec);
        p.get_mut("fc1.weight").unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 2.0]);
        p.get_mut("fc1.bias").unwrap().data_mut().copy_from_slice(&[0.5, -0.5]);
        let u = forward_first_fc(&p, &Tensor::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(u.data(), &[1.5, 1.5]);
    }

    #[test]
    fn first_fc_zero_and_identity() {
        let spec = image_spec(1, 3, vec![LayerSpec::Identity], 3, 2);
        let mut p = ModelParams::zeros(spec);
        let h = Tensor::from_vec(vec![0.3, -1.0, 2.0]);
        assert_eq!(forward_first_fc(&p, &h).unwrap().data(), &[0.0; 3]);
        let w = p.get_mut("fc1.weight").unwrap().data_mut();
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        assert_eq!(forward_first_fc(&p, &h).unwrap(), h);
        assert!(forward_first_fc(&p, &Tensor::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let spec = image_spec(2, 2, vec![LayerSpec::Identity], 3, 5);
        let p = ModelParams::zeros(spec);
        let batch = LabeledBatch::new(Tensor::new(vec![2, 4], vec![0.5; 8]).unwrap(), vec![0, 4]).unwrap();
        let l = loss_batch(&p, &batch).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_errors_are_structured() {
        let spec = image_spec(2, 2, vec![LayerSpec::Identity], 3, 2);
        let p = ModelParams::zeros(spec);
        assert!(matches!(
            forward_representation(&p, &Tensor::from_vec(vec![0.0; 3])),
            Err(LabError::Dimension { .. })
        ));
        let bad = LabeledBatch::new(Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap(), vec![7]).unwrap();
        assert!(loss_batch(&p, &bad).is_err());
        assert!(LabeledBatch::new(Tensor::zeros(vec![0, 4]), vec![]).is_err());
    }

    #[test]
    fn duplicated_sample_matches_single_sample_gradient() {
        let spec = image_spec(2, 2, vec![LayerSpec::Dense { out_dim: 3 }, LayerSpec::Sigmoid], 4, 3);
        let p = ModelParams::init(spec, 9, 1.0);
        let x = vec![0.2, 0.9, 0.4, 0.1];
        let one = LabeledBatch::new(Tensor::new(vec![1, 4], x.clone()).unwrap(), vec![2]).unwrap();
        let many = LabeledBatch::new(Tensor::new(vec![3, 4], x.repeat(3)).unwrap(), vec![2; 3]).unwrap();
        let g1 = backward_full(&p, &one).unwrap();
        let g3 = backward_full(&p, &many).unwrap();
        for (a, b) in g1.grads.grads.iter().zip(&g3.grads.grads) {
            assert!(a.max_abs_diff(b) < 1e-15);
        }
    }
}
