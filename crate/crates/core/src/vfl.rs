//! Vertical federated learning round loop.
//!
//! Workers hold disjoint feature slices of the same samples; the server holds
//! labels, picks the batch indices each round and broadcasts them (data index
//! alignment), and receives the aggregated parameter gradients. Workers are
//! simulated in-process: their slices are scattered back into the full
//! feature vector in worker order, which reproduces `x_n` exactly.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::defense::{AuditRecord, Defense};
use crate::error::{LabError, Result};
use crate::model::{backward_full, Backward, FeatureBlock, GradientReport, LabeledBatch, ModelParams};
use crate::tensor::Tensor;

/// Image dataset with integer labels; row `n` of `inputs` is `x_n` flattened
/// row-major over `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, height: usize, width: usize, classes: usize) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.row_len() != height * width {
            return Err(LabError::dimension(
                "dataset inputs",
                format!("[N, {}]", height * width),
                format!("{:?}", inputs.shape()),
            ));
        }
        if inputs.rows() != labels.len() {
            return Err(LabError::dimension("dataset labels", inputs.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(LabError::InvalidArgument(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            height,
            width,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.height * self.width
    }

    /// Smooth seeded images: one Gaussian blob whose quadrant (row-major over a
    /// 2x2 grid, wrapped modulo `classes`) sets the label, plus a faint
    /// distractor blob.
    pub fn synthetic_blobs(n: usize, height: usize, width: usize, classes: usize, seed: u64) -> Result<Self> {
        if n == 0 || height < 2 || width < 2 || classes < 2 {
            return Err(LabError::InvalidArgument(
                "synthetic data needs n >= 1, images at least 2x2 and >= 2 classes".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * height * width);
        let mut labels = Vec::with_capacity(n);
        let (hh, hw) = (height as f64 / 2.0, width as f64 / 2.0);
        for i in 0..n {
            let label = i % classes;
            let quadrant = label % 4;
            let cy = (quadrant / 2) as f64 * hh + rng.random_range(0.15..0.85) * hh;
            let cx = (quadrant % 2) as f64 * hw + rng.random_range(0.15..0.85) * hw;
            let sigma = rng.random_range(0.9..1.8) * (height.min(width) as f64 / 8.0);
            let amp = rng.random_range(0.65..1.0);
            let dy = rng.random_range(0.0..height as f64);
            let dx = rng.random_range(0.0..width as f64);
            let dsigma = rng.random_range(1.5..3.0) * (height.min(width) as f64 / 8.0);
            let damp = rng.random_range(0.1..0.3);
            for r in 0..height {
                for c in 0..width {
                    let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                    let main = amp * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp();
                    let dist = damp * (-((y - dy).powi(2) + (x - dx).powi(2)) / (2.0 * dsigma * dsigma)).exp();
                    data.push((main + dist).clamp(0.0, 1.0));
                }
            }
            labels.push(label);
        }
        let inputs = Tensor::new(vec![n, height * width], data)?;
        Dataset::new(inputs, labels, height, width, classes)
    }
}

/// How features are split vertically among workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionScheme {
    /// Contiguous row-major feature ranges of near-equal size.
    Even,
    /// Spatial tiles of the image, `rows x cols` workers.
    Grid { rows: usize, cols: usize },
}

impl PartitionScheme {
    /// The 2x2 grid.
    pub const QUADRANT: PartitionScheme = PartitionScheme::Grid { rows: 2, cols: 2 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedDataset {
    pub dataset: Dataset,
    pub blocks: Vec<FeatureBlock>,
}

pub fn partition_dataset(dataset: Dataset, workers: usize, scheme: PartitionScheme) -> Result<PartitionedDataset> {
    let f = dataset.features();
    if workers == 0 {
        return Err(LabError::InvalidArgument("need at least one worker".into()));
    }
    if workers > f {
        return Err(LabError::InvalidArgument(format!(
            "{workers} workers exceed the feature dimension {f}"
        )));
    }
    let (h, w) = (dataset.height, dataset.width);
    let blocks = match scheme {
        PartitionScheme::Even => (0..workers)
            .map(|m| {
                let start = m * f / workers;
                let end = (m + 1) * f / workers;
                let indices: Vec<usize> = (start..end).collect();
                let len = indices.len();
                let (height, width) = if start.is_multiple_of(w) && len.is_multiple_of(w) {
                    (len / w, w)
                } else {
                    (1, len)
                };
                FeatureBlock { indices, height, width }
            })
            .collect(),
        PartitionScheme::Grid { rows, cols } => {
            if rows * cols != workers {
                return Err(LabError::InvalidArgument(format!(
                    "grid {rows}x{cols} does not give {workers} workers"
                )));
            }
            if rows > h || cols > w {
                return Err(LabError::InvalidArgument(format!(
                    "grid {rows}x{cols} finer than the {h}x{w} image"
                )));
            }
            let mut blocks = Vec::with_capacity(workers);
            for gr in 0..rows {
                for gc in 0..cols {
                    let (r0, r1) = (gr * h / rows, (gr + 1) * h / rows);
                    let (c0, c1) = (gc * w / cols, (gc + 1) * w / cols);
                    let indices = (r0..r1).flat_map(|r| (c0..c1).map(move |c| r * w + c)).collect();
                    blocks.push(FeatureBlock {
                        indices,
                        height: r1 - r0,
                        width: c1 - c0,
                    });
                }
            }
            blocks
        }
    };
    Ok(PartitionedDataset { dataset, blocks })
}

impl PartitionedDataset {
    pub fn workers(&self) -> usize {
        self.blocks.len()
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    /// Worker `m`'s slice `x_{n,m}` of sample `n`.
    pub fn worker_slice(&self, m: usize, n: usize) -> Vec<f64> {
        let row = self.dataset.inputs.row(n);
        self.blocks[m].indices.iter().map(|&i| row[i]).collect()
    }

    /// Rebuilds `x_n` from worker slices, scattering in worker order.
    pub fn assemble(&self, slices: &[Vec<f64>]) -> Result<Vec<f64>> {
        if slices.len() != self.blocks.len() {
            return Err(LabError::dimension("worker slices", self.blocks.len(), slices.len()));
        }
        let mut x = vec![0.0; self.dataset.features()];
        for (block, slice) in self.blocks.iter().zip(slices) {
            if slice.len() != block.indices.len() {
                return Err(LabError::dimension("worker slice", block.indices.len(), slice.len()));
            }
            for (&i, &v) in block.indices.iter().zip(slice) {
                x[i] = v;
            }
        }
        Ok(x)
    }

    /// The batch selected by `mask`, in ascending sample order, assembled
    /// from the workers' slices.
    pub fn batch(&self, mask: &BatchMask) -> Result<LabeledBatch> {
        if mask.len() != self.len() {
            return Err(LabError::dimension("batch mask", self.len(), mask.len()));
        }
        let idx = mask.indices();
        let mut rows = Vec::with_capacity(idx.len());
        for &n in &idx {
            let slices: Vec<Vec<f64>> = (0..self.workers()).map(|m| self.worker_slice(m, n)).collect();
            rows.push(self.assemble(&slices)?);
        }
        let labels = idx.iter().map(|&n| self.dataset.labels[n]).collect();
        LabeledBatch::new(Tensor::from_rows(&rows)?, labels)
    }
}

/// Binary selection vector `s` with exactly `k` ones.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BatchMask {
    bits: Vec<bool>,
    k: usize,
}

impl BatchMask {
    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        let k = bits.iter().filter(|&&b| b).count();
        if k == 0 {
            return Err(LabError::InvalidArgument("a batch mask selects at least one sample".into()));
        }
        Ok(Self { bits, k })
    }

    pub fn from_indices(n: usize, idx: &[usize]) -> Result<Self> {
        let mut bits = vec![false; n];
        for &i in idx {
            if i >= n || bits[i] {
                return Err(LabError::InvalidArgument(format!("bad or repeated mask index {i} for N={n}")));
            }
            bits[i] = true;
        }
        Self::from_bits(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_set(&self, n: usize) -> bool {
        self.bits[n]
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// Uniform draw from the `C(N, K)` masks.
pub fn sample_batch_mask<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<BatchMask> {
    if k == 0 || k > n {
        return Err(LabError::InvalidArgument(format!("batch size K={k} must lie in [1, N={n}]")));
    }
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    BatchMask::from_indices(n, &idx)
}

pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Every mask with `k` ones, in lexicographic order of the selected index
/// tuples (`{0,1}, {0,2}, ...`).
pub fn enumerate_masks(n: usize, k: usize, cap: u128) -> Result<Vec<BatchMask>> {
    if k == 0 || k > n {
        return Err(LabError::InvalidArgument(format!("batch size K={k} must lie in [1, N={n}]")));
    }
    let count = binomial(n, k);
    if count > cap {
        return Err(LabError::EnumerationCap { n, k, count, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut combo: Vec<usize> = (0..k).collect();
    loop {
        out.push(BatchMask::from_indices(n, &combo)?);
        let Some(i) = (0..k).rev().find(|&i| combo[i] < n - k + i) else {
            break;
        };
        combo[i] += 1;
        for j in i + 1..k {
            combo[j] = combo[j - 1] + 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub rounds: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// When false the server never updates the parameters (fixed-theta regime).
    pub train: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.lr() >= 0.0) {
            return Err(LabError::Config("learning rate must be non-negative".into()));
        }
        if self.rounds == 0 {
            return Err(LabError::Config("rounds must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(LabError::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Moment estimates for Adam; empty for SGD.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Applies one optimizer step to `params` using `grads`.
pub fn apply_update(params: &mut ModelParams, grads: &GradientReport, opt: &Optimizer, state: &mut OptimizerState) {
    state.step += 1;
    match *opt {
        Optimizer::Sgd { lr } => {
            for (p, g) in params.tensors_mut().iter_mut().zip(&grads.grads) {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
        }
        Optimizer::Adam { lr, beta1, beta2, eps } => {
            if state.m.is_empty() {
                state.m = grads.grads.iter().map(|g| vec![0.0; g.len()]).collect();
                state.v = state.m.clone();
            }
            let t = state.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (i, (p, g)) in params.tensors_mut().iter_mut().zip(&grads.grads).enumerate() {
                let (m, v) = (&mut state.m[i], &mut state.v[i]);
                for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                    *pv -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Gradients of the batch selected by `mask`.
pub fn round_gradients(params: &ModelParams, data: &PartitionedDataset, mask: &BatchMask) -> Result<Backward> {
    let batch = data.batch(mask)?;
    backward_full(params, &batch)
}

/// One undefended round: aggregate gradients and, when training is enabled,
/// update the parameters.
pub fn run_round(
    params: &ModelParams,
    data: &PartitionedDataset,
    mask: &BatchMask,
    config: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<(GradientReport, ModelParams)> {
    let backward = round_gradients(params, data, mask)?;
    let mut updated = params.clone();
    if config.train {
        apply_update(&mut updated, &backward.grads, &config.optimizer, state);
    }
    Ok((backward.grads, updated))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub seed: u64,
}

/// What the honest-but-curious server sees after one round.
#[derive(Debug, Clone)]
pub struct ServerView {
    pub round: usize,
    pub mask: BatchMask,
    /// Parameters at which the gradients were computed.
    pub params: ModelParams,
    /// Uploaded (possibly defended) gradients.
    pub report: GradientReport,
    pub loss: f64,
}

/// Stateful simulation: one training run over a partitioned dataset.
#[derive(Debug, Clone)]
pub struct Simulator {
    data: PartitionedDataset,
    params: ModelParams,
    config: TrainConfig,
    state: OptimizerState,
    mask_rng: ChaCha8Rng,
    defense: Defense,
    defense_rng: ChaCha8Rng,
    round: usize,
    log: Vec<RoundRecord>,
    audit: Vec<AuditRecord>,
}

impl Simulator {
    pub fn new(data: PartitionedDataset, params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.batch_size > data.len() {
            return Err(LabError::Config(format!(
                "batch size {} exceeds dataset size {}",
                config.batch_size,
                data.len()
            )));
        }
        if params.spec().input_dim() != data.dataset.features() {
            return Err(LabError::dimension(
                "model input width",
                data.dataset.features(),
                params.spec().input_dim(),
            ));
        }
        let seed = config.seed;
        Ok(Self {
            data,
            params,
            config,
            state: OptimizerState::default(),
            mask_rng: ChaCha8Rng::seed_from_u64(seed),
            defense: Defense::None,
            defense_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_defe_u64),
            round: 0,
            log: Vec::new(),
            audit: Vec::new(),
        })
    }

    pub fn with_defense(mut self, defense: Defense) -> Self {
        self.defense = defense;
        self
    }

    pub fn data(&self) -> &PartitionedDataset {
        &self.data
    }
    pub fn params(&self) -> &ModelParams {
        &self.params
    }
    pub fn config(&self) -> &TrainConfig {
        &self.config
    }
    pub fn round(&self) -> usize {
        self.round
    }
    pub fn log(&self) -> &[RoundRecord] {
        &self.log
    }
    pub fn audit(&self) -> &[AuditRecord] {
        &self.audit
    }
    pub fn n(&self) -> usize {
        self.data.len()
    }
    pub fn k(&self) -> usize {
        self.config.batch_size
    }

    /// The server's next batch choice.
    pub fn next_mask(&mut self) -> Result<BatchMask> {
        sample_batch_mask(self.data.len(), self.config.batch_size, &mut self.mask_rng)
    }

    /// Runs one round on a server-chosen mask.
    pub fn step(&mut self) -> Result<ServerView> {
        let mask = self.next_mask()?;
        self.run_round(mask)
    }

    /// Runs one round on the given mask: workers compute the true gradients,
    /// the defense (if any) transforms them before upload, and the server
    /// updates the parameters from the uploaded gradients when training.
    pub fn run_round(&mut self, mask: BatchMask) -> Result<ServerView> {
        let backward = round_gradients(&self.params, &self.data, &mask)?;
        let round = self.round;
        let (report, audit) = self.defense.apply(&backward.grads, round, &mut self.defense_rng)?;
        self.audit.extend(audit);
        let mut report = report;
        report.round = round;
        let view = ServerView {
            round,
            mask,
            params: self.params.clone(),
            loss: backward.loss,
            report,
        };
        if self.config.train {
            apply_update(&mut self.params, &view.report, &self.config.optimizer, &mut self.state);
        }
        self.log.push(RoundRecord {
            round,
            loss: backward.loss,
            grad_norm: view.report.global_norm(),
            seed: self.config.seed,
        });
        self.round += 1;
        Ok(view)
    }

    /// Trains for `config.rounds` rounds and returns the per-round losses.
    pub fn train(&mut self) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.config.rounds);
        for _ in 0..self.config.rounds {
            losses.push(self.step()?.loss);
        }
        Ok(losses)
    }

    /// Mean loss over the whole dataset at the current parameters.
    pub fn full_loss(&self) -> Result<f64> {
        let all = BatchMask::from_bits(vec![true; self.data.len()])?;
        crate::model::loss_batch(&self.params, &self.data.batch(&all)?)
    }
}

pub fn write_round_log(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut out = String::from("round,loss,grad_norm,seed\n");
    for r in records {
        out.push_str(&format!("{},{:.12e},{:.12e},{}\n", r.round, r.loss, r.grad_norm, r.seed));
    }
    let mut f = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| LabError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> Dataset {
        Dataset::synthetic_blobs(n, 4, 4, 2, 3).unwrap()
    }

    #[test]
    fn single_worker_holds_everything() {
        let p = partition_dataset(tiny(3), 1, PartitionScheme::Even).unwrap();
        assert_eq!(p.blocks.len(), 1);
        assert_eq!(p.blocks[0].indices, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn even_split_of_four_features() {
        let inputs = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ds = Dataset::new(inputs, vec![0], 1, 4, 2).unwrap();
        let p = partition_dataset(ds, 2, PartitionScheme::Even).unwrap();
        assert_eq!(p.blocks[0].indices, vec![0, 1]);
        assert_eq!(p.blocks[1].indices, vec![2, 3]);
    }

    #[test]
    fn too_many_workers_rejected() {
        let inputs = Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap();
        let ds = Dataset::new(inputs, vec![0], 2, 2, 2).unwrap();
        assert!(partition_dataset(ds, 5, PartitionScheme::Even).is_err());
    }

    #[test]
    fn forced_full_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sample_batch_mask(5, 5, &mut rng).unwrap();
        assert_eq!(m.to_bit_string(), "11111");
        assert!(sample_batch_mask(3, 4, &mut rng).is_err());
    }

    #[test]
    fn seeded_mask_is_reproducible() {
        let a = sample_batch_mask(6, 2, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_batch_mask(6, 2, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.k(), 2);
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(enumerate_masks(4, 2, DEFAULT_ENUMERATION_CAP).unwrap().len(), 6);
        let all = enumerate_masks(3, 3, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].to_bit_string(), "111");
        let first: Vec<String> = enumerate_masks(4, 2, 10)
            .unwrap()
            .iter()
            .map(BatchMask::to_bit_string)
            .collect();
        assert_eq!(first, ["1100", "1010", "1001", "0110", "0101", "0011"]);
        assert!(matches!(
            enumerate_masks(30, 15, DEFAULT_ENUMERATION_CAP),
            Err(LabError::EnumerationCap { .. })
        ));
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(6, 2), 15);
        assert_eq!(binomial(16, 4), 1820);
        assert_eq!(binomial(3, 5), 0);
    }
}
