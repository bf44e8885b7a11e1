//! Optimiser, sampling, schedule and run reproducibility.

use fdiwn_core::data::{sample_batch, Dataset};
use fdiwn_core::synth::synthetic_dataset;
use fdiwn_core::train::{preset, Adam, RunOptions, TrainConfig, Trainer};
use fdiwn_core::weights::{self, decode, encode};
use fdiwn_core::{ModelParams, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn single(values: &[f32]) -> ModelParams<f32> {
    let mut p = ModelParams::new();
    let t = Tensor::new(Shape::new(1, values.len(), 1, 1), values.to_vec()).unwrap();
    p.insert("w", vec![values.len()], t).unwrap();
    p
}

fn values(p: &ModelParams<f32>) -> Vec<f32> {
    p.iter().next().unwrap().1.tensor.data().to_vec()
}

fn grad(values: &[f32]) -> Vec<Tensor<f32>> {
    vec![Tensor::new(Shape::new(1, values.len(), 1, 1), values.to_vec()).unwrap()]
}

#[test]
fn adam_first_step_moves_each_weight_by_the_learning_rate() {
    let mut p = single(&[1.0, -2.0, 0.5, 3.0]);
    let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
    adam.step(&mut p, &grad(&[0.3, -5.0, 1e-3, 40.0]), 0.01).unwrap();
    let expect = [0.99, -1.99, 0.49, 2.99];
    for (a, b) in values(&p).iter().zip(expect) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
    assert_eq!(adam.t, 1);
}

#[test]
fn adam_ignores_zero_gradients() {
    let start = [0.25, -1.5, 7.0];
    let mut p = single(&start);
    let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
    for _ in 0..5 {
        adam.step(&mut p, &grad(&[0.0; 3]), 0.1).unwrap();
    }
    assert_eq!(values(&p), start);
}

#[test]
fn adam_first_update_is_invariant_to_gradient_scale() {
    let g = [0.02, -0.7, 1.3, 0.001];
    let mut a = single(&[0.0; 4]);
    let mut b = single(&[0.0; 4]);
    Adam::new(&a, 0.9, 0.999, 1e-8).step(&mut a, &grad(&g), 1e-3).unwrap();
    let scaled: Vec<f32> = g.iter().map(|v| v * 1000.0).collect();
    Adam::new(&b, 0.9, 0.999, 1e-8).step(&mut b, &grad(&scaled), 1e-3).unwrap();
    for (x, y) in values(&a).iter().zip(values(&b)) {
        assert!((x - y).abs() <= 0.01 * x.abs(), "{x} vs {y}");
    }
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let start: Vec<f32> = (0..16).map(|i| ((i * 37 % 17) as f32 / 8.5) - 1.0).collect();
    let norm = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>().sqrt();
    let mut p = single(&start);
    let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
    for _ in 0..100 {
        let g: Vec<f32> = values(&p).iter().map(|w| 2.0 * w).collect();
        adam.step(&mut p, &grad(&g), 0.05).unwrap();
    }
    assert!(norm(&values(&p)) < 0.1 * norm(&start), "{} vs {}", norm(&values(&p)), norm(&start));
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut p = single(&[1.0, 2.0]);
    let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
    assert!(adam.step(&mut p, &grad(&[1.0, 2.0, 3.0]), 0.1).is_err());
    assert!(adam.step(&mut p, &[], 0.1).is_err());
}

#[test]
fn learning_rate_halves_every_decay_period() {
    let cfg = TrainConfig { lr: 2e-4, steps_per_epoch: 10, decay_epochs: 3, ..TrainConfig::default() };
    assert_eq!(cfg.lr_at(0), 2e-4);
    assert_eq!(cfg.lr_at(29), 2e-4);
    assert_eq!(cfg.lr_at(30), 1e-4);
    assert_eq!(cfg.lr_at(60), 5e-5);
    assert_eq!(cfg.lr_at(95), 2.5e-5);
    let flat = TrainConfig { decay_epochs: 0, ..cfg };
    assert_eq!(flat.lr_at(1_000_000), 2e-4);
    let default = TrainConfig::default();
    assert_eq!(default.lr_at(200_000), 1e-4);
    assert_eq!(default.total_steps(), 1_000_000);
}

#[test]
fn invalid_hyper_parameters_are_rejected() {
    for bad in [
        TrainConfig { batch: 0, ..TrainConfig::default() },
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { beta2: 1.0, ..TrainConfig::default() },
        TrainConfig { eps: -1.0, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

fn x4_dataset() -> Dataset {
    Dataset::from_images(synthetic_dataset(5, 2, 200, 204), 4).unwrap()
}

#[test]
fn batches_have_training_shapes() {
    let ds = x4_dataset();
    assert_eq!(ds.lr[0].shape(), Shape::new(1, 3, 50, 51));
    let (lr, hr) = sample_batch(&ds, 16, 48, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(lr.shape(), Shape::new(16, 3, 48, 48));
    assert_eq!(hr.shape(), Shape::new(16, 3, 192, 192));
    assert!(sample_batch(&ds, 2, 51, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn fixed_seed_gives_identical_batches() {
    let ds = x4_dataset();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3).map(|_| sample_batch(&ds, 4, 12, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(7), draw(7));
    assert_ne!(draw(7), draw(8));
}

#[test]
fn batch_pairs_stay_aligned() {
    // LR patches are cropped from the bicubic-downsampled image, so a
    // downsampled HR patch agrees with its LR patch away from the crop edge.
    let ds = x4_dataset();
    let (lr, hr) = sample_batch(&ds, 6, 16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let down = fdiwn_core::ops::bicubic_downsample(&hr, 4).unwrap();
    let mut worst = 0.0f32;
    for n in 0..6 {
        for c in 0..3 {
            for y in 2..14 {
                for x in 2..14 {
                    worst = worst.max((down.at(n, c, y, x) - lr.at(n, c, y, x)).abs());
                }
            }
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn resume_continues_bit_exactly() {
    let p = preset("smoke", 2).unwrap();
    let ds = p.dataset().unwrap();
    let mut straight = Trainer::new(p.model, p.train).unwrap();
    let straight_losses = straight.run(&ds, 8, RunOptions::default()).unwrap();

    let mut first = Trainer::new(p.model, p.train).unwrap();
    let mut losses = first.run(&ds, 5, RunOptions::default()).unwrap();
    let bytes = encode(&p.model, &first.params, Some(&first.training_state()));
    let mut resumed = Trainer::resume(decode(&bytes).unwrap(), p.train).unwrap();
    assert_eq!(resumed.step, 5);
    assert_eq!(resumed.adam, first.adam);
    losses.extend(resumed.run(&ds, 8, RunOptions::default()).unwrap());

    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&losses), bits(&straight_losses));
    assert_eq!(resumed.params, straight.params);
    assert_eq!(resumed.adam, straight.adam);
    assert_eq!(resumed.step, straight.step);
}

#[test]
fn plain_weights_cannot_resume() {
    let p = preset("smoke", 2).unwrap();
    let t = Trainer::new(p.model, p.train).unwrap();
    let file = decode(&weights::serialize_params(&p.model, &t.params)).unwrap();
    assert!(Trainer::resume(file, p.train).is_err());
}

fn logged_run(steps: u64) -> (Vec<u8>, Vec<f32>) {
    let p = preset("smoke", 2).unwrap();
    let ds = p.dataset().unwrap();
    let mut t = Trainer::new(p.model, p.train).unwrap();
    let mut log = Vec::new();
    let losses = t.run(&ds, steps, RunOptions { log: Some(&mut log), ..RunOptions::default() }).unwrap();
    (log, losses)
}

#[test]
fn loss_log_is_reproducible_and_finite() {
    let (a, losses) = logged_run(25);
    let (b, _) = logged_run(25);
    assert_eq!(a, b);
    assert!(losses.iter().all(|l| l.is_finite() && *l > 0.0));
    let text = String::from_utf8(a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,loss,lr");
    assert_eq!(lines.len(), 26);
    assert!(lines[1].starts_with("1,"));
}

#[test]
fn different_seeds_train_differently() {
    let p = preset("smoke", 2).unwrap();
    let ds = p.dataset().unwrap();
    let run = |seed| {
        let mut t = Trainer::new(p.model, TrainConfig { seed, ..p.train }).unwrap();
        t.run(&ds, 3, RunOptions::default()).unwrap()
    };
    assert_ne!(run(1), run(2));
}

#[test]
fn checkpoints_land_on_schedule() {
    let p = preset("smoke", 2).unwrap();
    let ds = p.dataset().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(p.model, p.train).unwrap();
    let opts = RunOptions { checkpoint_dir: Some(dir.path().join("ck")), checkpoint_every: 3, ..RunOptions::default() };
    t.run(&ds, 7, opts).unwrap();
    let mut names: Vec<String> =
        std::fs::read_dir(dir.path().join("ck")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["step0000003.fdwn", "step0000006.fdwn"]);
    let file = weights::load(&dir.path().join("ck/step0000006.fdwn")).unwrap();
    assert_eq!(file.training.unwrap().step, 6);
}

#[test]
fn zero_time_limit_stops_immediately() {
    let p = preset("smoke", 2).unwrap();
    let ds = p.dataset().unwrap();
    let mut t = Trainer::new(p.model, p.train).unwrap();
    let opts = RunOptions { time_limit: Some(std::time::Duration::ZERO), ..RunOptions::default() };
    assert!(t.run(&ds, 10, opts).unwrap().is_empty());
    assert_eq!(t.step, 0);
}

#[test]
fn scale_mismatch_is_rejected() {
    let p = preset("smoke", 2).unwrap();
    let mut t = Trainer::new(p.model, p.train).unwrap();
    assert!(t.step_once(&x4_dataset()).is_err());
}
