use cafe_lab::attack::tv_truncated;
use cafe_lab::defense::{fake_project, gen_fake_pool, DefenseConfig};
use cafe_lab::io::{load_png_grid, save_png_grid};
use cafe_lab::metrics::psnr;
use cafe_lab::model::GradientReport;
use cafe_lab::vfl::{partition_dataset, sample_batch_mask, Dataset, PartitionScheme};
use cafe_lab::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_have_exactly_k_ones(n in 1usize..40, frac in 0.0f64..1.0, seed: u64) {
        let k = 1 + ((n - 1) as f64 * frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = sample_batch_mask(n, k, &mut rng).unwrap();
        prop_assert_eq!(m.bits().iter().filter(|&&b| b).count(), k);
        prop_assert_eq!(m.k(), k);
    }

    #[test]
    fn worker_slices_reassemble(h in 2usize..9, w in 2usize..9, workers in 1usize..5, seed in 0u64..1000) {
        let ds = Dataset::synthetic_blobs(3, h, w, 2, seed).unwrap();
        let workers = workers.min(h * w);
        let pd = partition_dataset(ds.clone(), workers, PartitionScheme::Even).unwrap();
        let mut covered = vec![0usize; h * w];
        for b in &pd.blocks {
            prop_assert!(!b.indices.is_empty());
            for &i in &b.indices {
                covered[i] += 1;
            }
        }
        prop_assert!(covered.iter().all(|&c| c == 1));
        for n in 0..3 {
            let slices: Vec<Vec<f64>> = (0..workers).map(|m| pd.worker_slice(m, n)).collect();
            prop_assert_eq!(pd.assemble(&slices).unwrap(), ds.inputs.row(n).to_vec());
        }
    }

    #[test]
    fn png_grid_round_trips_quantized_pixels(count in 1usize..6, h in 1usize..6, w in 1usize..6, cols in 1usize..4, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..count * h * w).map(|_| rng.random_range(-0.2..1.2)).collect();
        let images = Tensor::new(vec![count, h * w], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.png");
        save_png_grid(&images, h, w, 1, cols, &path).unwrap();
        let back = load_png_grid(&path, h, w, count).unwrap();
        for (a, b) in images.data().iter().zip(back.data()) {
            let q = (255.0 * a.clamp(0.0, 1.0)).round() / 255.0;
            prop_assert_eq!(q, *b);
        }
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed: u64, base in 1e-3f64..1e-2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let real = Tensor::new(vec![4, 16], (0..64).map(|_| rng.random::<f64>()).collect()).unwrap();
        let noise: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for scale in [1.0, 2.0, 4.0, 8.0] {
            let fake = Tensor::new(vec![4, 16], real.data().iter().zip(&noise).map(|(r, e)| r + base * scale * e).collect()).unwrap();
            let p = psnr(&real, &fake, 1.0).unwrap().psnr_db;
            prop_assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn fake_gradients_stay_in_envelope_and_keep_sign(seed: u64, lens in prop::collection::vec(1usize..12, 1..4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = GradientReport {
            ids: (0..lens.len()).map(|i| format!("t{i}")).collect(),
            grads: lens.iter().map(|&l| Tensor::from_vec((0..l).map(|_| rng.random_range(-0.05..0.05)).collect())).collect(),
            round: 0,
        };
        let cfg = DefenseConfig { nu: 6, sigma2: 1e-3, tau: 10.0, max_regenerations: 10 };
        let pool = gen_fake_pool(&lens, cfg.nu, cfg.sigma2, &mut rng).unwrap();
        let p = fake_project(&truth, pool, &cfg, &mut rng).unwrap();
        let envelope = p.report.grads.iter().map(|t| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
        for ((t, g), env) in truth.grads.iter().zip(&p.report.grads).zip(envelope) {
            for (&x, &y) in t.data().iter().zip(g.data()) {
                prop_assert!(x * y >= 0.0);
                prop_assert!(y.abs() <= x.abs());
                if y.abs() < x.abs() {
                    // Clamped entries sit on their surrogate magnitude.
                    prop_assert!(y.abs() <= env);
                }
            }
        }
    }

    #[test]
    fn truncated_tv_is_zero_or_plain(seed: u64, xi in 0.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::new(vec![2, 16], (0..32).map(|_| rng.random::<f64>()).collect()).unwrap();
        let plain = tv_truncated(&img, 4, 4, None, 0.0).unwrap();
        let cut = tv_truncated(&img, 4, 4, None, xi).unwrap();
        prop_assert!(plain >= 0.0);
        prop_assert!(cut == 0.0 || cut == plain);
        prop_assert_eq!(cut == 0.0, plain < xi);
    }
}
