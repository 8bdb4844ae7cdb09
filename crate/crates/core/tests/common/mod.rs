//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use cafe_lab::model::{backward_full, loss_batch, FeatureBlock, LabeledBatch, LayerSpec, ModelParams, ModelSpec};
use cafe_lab::vfl::{partition_dataset, BatchMask, Dataset, PartitionScheme, PartitionedDataset};
use cafe_lab::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn image_spec(h: usize, w: usize, extractor: Vec<LayerSpec>, d2: usize, classes: usize) -> ModelSpec {
    let block = FeatureBlock {
        indices: (0..h * w).collect(),
        height: h,
        width: w,
    };
    ModelSpec::new(h * w, vec![block], extractor, d2, classes).unwrap()
}

/// Identity-extractor model over `n` synthetic `h x w` images split between
/// `workers` workers.
pub fn identity_instance(
    n: usize,
    h: usize,
    w: usize,
    classes: usize,
    d2: usize,
    workers: usize,
    seed: u64,
) -> (PartitionedDataset, ModelParams) {
    let ds = Dataset::synthetic_blobs(n, h, w, classes, seed).unwrap();
    let pd = partition_dataset(ds, workers, PartitionScheme::Even).unwrap();
    let spec = ModelSpec::new(h * w, pd.blocks.clone(), vec![], d2, classes).unwrap();
    let params = ModelParams::init(spec, seed + 100, 1.0);
    (pd, params)
}

/// One of several small seeded architectures (all under 500 parameters),
/// with a random batch to differentiate.
pub fn random_toy(seed: u64) -> (ModelParams, LabeledBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = if rng.random_bool(0.5) { (3, 3) } else { (4, 4) };
    let classes = rng.random_range(2..=4);
    let d2 = rng.random_range(2..=6);
    let extractor = match seed % 4 {
        0 => vec![],
        1 => vec![LayerSpec::Dense { out_dim: 3 }, LayerSpec::Sigmoid],
        2 => vec![
            LayerSpec::Conv2d {
                channels: 2,
                kernel: 2,
                stride: 1,
            },
            LayerSpec::Sigmoid,
        ],
        _ => vec![LayerSpec::Conv2d {
            channels: 1,
            kernel: 2,
            stride: 2,
        }],
    };
    let spec = image_spec(h, w, extractor, d2, classes);
    let params = ModelParams::init(spec, seed, 1.5);
    let k = rng.random_range(1..=3);
    let inputs: Vec<f64> = (0..k * h * w).map(|_| rng.random::<f64>()).collect();
    let labels = (0..k).map(|_| rng.random_range(0..classes)).collect();
    let batch = LabeledBatch::new(Tensor::new(vec![k, h * w], inputs).unwrap(), labels).unwrap();
    (params, batch)
}

/// Entrywise relative error `|a - b| / max(|a| + |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(floor)
}

/// Largest relative error between `backward_full` and central differences
/// over every parameter and every input entry.
pub fn finite_difference_error(params: &ModelParams, batch: &LabeledBatch, step: f64) -> f64 {
    let analytic = backward_full(params, batch).unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..params.tensors().len() {
        for j in 0..params.tensors()[t].len() {
            let mut p = params.clone();
            let x0 = p.tensors()[t].data()[j];
            p.tensors_mut()[t].data_mut()[j] = x0 + step;
            let up = loss_batch(&p, batch).unwrap();
            p.tensors_mut()[t].data_mut()[j] = x0 - step;
            let down = loss_batch(&p, batch).unwrap();
            let fd = (up - down) / (2.0 * step);
            worst = worst.max(rel_err(analytic.grads.grads[t].data()[j], fd, 1e-7));
        }
    }
    for j in 0..batch.inputs.len() {
        let mut b = batch.clone();
        let x0 = b.inputs.data()[j];
        b.inputs.data_mut()[j] = x0 + step;
        let up = loss_batch(params, &b).unwrap();
        b.inputs.data_mut()[j] = x0 - step;
        let down = loss_batch(params, &b).unwrap();
        let fd = (up - down) / (2.0 * step);
        worst = worst.max(rel_err(analytic.input_grads.data()[j], fd, 1e-7));
    }
    worst
}

/// `V*`: row `n` is `(1/K) dL_n/du_n`, built from a full-batch pass where the
/// rows carry `1/N`.
pub fn v_star(params: &ModelParams, data: &PartitionedDataset, k: usize) -> Tensor {
    let n = data.len();
    let all = BatchMask::from_bits(vec![true; n]).unwrap();
    let b = backward_full(params, &data.batch(&all).unwrap()).unwrap();
    b.du_rows.scale(n as f64 / k as f64)
}

/// The representation matrix `H` (one row per sample).
pub fn h_matrix(params: &ModelParams, data: &PartitionedDataset) -> Tensor {
    cafe_lab::model::representations(params, &data.dataset.inputs).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}
