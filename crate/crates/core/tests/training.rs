use std::collections::BTreeMap;

use spformer::model::{Model, ModelConfig};
use spformer::params::ParamStore;
use spformer::tensor::Tensor;
use spformer::training::*;
use spformer::Error;

/// Reference AdamW in f64, rounding the parameter to f32 after every step
/// like the stored tensor does.
struct ScalarAdamW {
    x: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdamW {
    fn step(&mut self, g: f64, lr: f64, wd: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let m_hat = self.m / (1.0 - b1.powi(self.t));
        let v_hat = self.v / (1.0 - b2.powi(self.t));
        let decayed = self.x - lr * wd * self.x;
        self.x = (decayed - lr * m_hat / (v_hat.sqrt() + eps)) as f32 as f64;
    }
}

#[test]
fn adamw_matches_a_scalar_reference_for_100_steps() {
    let mut params = ParamStore::new();
    params.insert("w", Tensor::new(&[1, 1], vec![0.5]).unwrap());
    params.insert("b", Tensor::new(&[1], vec![-1.0]).unwrap());
    let mut opt = AdamW::new(0.05);
    let mut w_ref = ScalarAdamW {
        x: 0.5,
        m: 0.0,
        v: 0.0,
        t: 0,
    };
    let mut b_ref = ScalarAdamW {
        x: -1.0,
        m: 0.0,
        v: 0.0,
        t: 0,
    };
    for step in 0..100 {
        let lr = cosine_lr(step + 1, 10, 100, 0.05);
        // gradients of (w - 3)² and (b + 2)²
        let w = params.get("w").unwrap().data()[0] as f64;
        let b = params.get("b").unwrap().data()[0] as f64;
        let (gw, gb) = (2.0 * (w - 3.0), 2.0 * (b + 2.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(&[1, 1], vec![gw as f32]).unwrap());
        grads.insert("b".to_string(), Tensor::new(&[1], vec![gb as f32]).unwrap());
        opt.update(&mut params, &grads, lr).unwrap();
        w_ref.step(gw as f32 as f64, lr, 0.05);
        b_ref.step(gb as f32 as f64, lr, 0.0);
        let w = params.get("w").unwrap().data()[0] as f64;
        let b = params.get("b").unwrap().data()[0] as f64;
        assert!(
            (w - w_ref.x).abs() <= 1e-6 * w_ref.x.abs().max(1.0),
            "step {step}: {w} vs {}",
            w_ref.x
        );
        assert!(
            (b - b_ref.x).abs() <= 1e-6 * b_ref.x.abs().max(1.0),
            "step {step}: {b} vs {}",
            b_ref.x
        );
    }
    assert_eq!(opt.step, 100);
    assert!((params.get("b").unwrap().data()[0] + 2.0).abs() < 0.1);
}

#[test]
fn adamw_rejects_non_finite_gradients_and_shape_mismatches() {
    let mut params = ParamStore::new();
    params.insert("w", Tensor::zeros(&[2, 2]));
    let before = params.clone();
    let mut opt = AdamW::new(0.0);
    let mut grads = BTreeMap::new();
    grads.insert(
        "w".to_string(),
        Tensor::new(&[2, 2], vec![0.0, f32::NAN, 0.0, 0.0]).unwrap(),
    );
    assert!(matches!(
        opt.update(&mut params, &grads, 0.1),
        Err(Error::NonFinite { .. })
    ));
    grads.insert("w".to_string(), Tensor::zeros(&[4]));
    assert!(opt.update(&mut params, &grads, 0.1).is_err());
    assert_eq!(params, before);
    assert_eq!(opt.step, 0);
}

#[test]
fn weight_decay_skips_vectors_and_position_embeddings() {
    assert!(decays("blocks.0.mlp.fc1.weight", 2));
    assert!(decays("stem.conv0.weight", 4));
    assert!(!decays("blocks.0.mlp.fc1.bias", 1));
    assert!(!decays("sca0.gamma_s", 1));
    assert!(!decays("pos_embed", 2));
}

#[test]
fn cosine_schedule_shape() {
    assert_eq!(cosine_lr(0, 10, 100, 1.0), 0.0);
    assert!((cosine_lr(5, 10, 100, 1.0) - 0.5).abs() < 1e-12);
    assert!((cosine_lr(10, 10, 100, 1.0) - 1.0).abs() < 1e-12);
    assert!((cosine_lr(55, 10, 100, 1.0) - 0.5).abs() < 1e-12);
    assert!(cosine_lr(100, 10, 100, 1.0).abs() < 1e-12);
    let lrs: Vec<f64> = (10..=100).map(|s| cosine_lr(s, 10, 100, 1.0)).collect();
    assert!(lrs.windows(2).all(|p| p[1] <= p[0]));
}

fn eval_loss(model: &Model, batch: &[SynthSample]) -> f64 {
    batch
        .iter()
        .map(|s| {
            let logits = model.logits(&s.tensor()).unwrap();
            let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = logits.iter().map(|&l| (l as f64 - max).exp()).sum();
            max + z.ln() - logits[s.label] as f64
        })
        .sum::<f64>()
        / batch.len() as f64
}

#[test]
fn fixed_batch_loss_descends_over_ten_steps() {
    let mut curves = Vec::new();
    for seed in 0..5u64 {
        let batch = synth_generate(8, 32, 32, 4, 40 + seed).unwrap();
        let mut cfg = ModelConfig::toy();
        cfg.stochastic_depth_rate = 0.0;
        let mut model = Model::init(cfg, seed).unwrap();
        let mut opt = AdamW::new(0.05);
        let mut curve = vec![eval_loss(&model, &batch)];
        for _ in 0..10 {
            let mut sum: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            for s in &batch {
                let r = sample_gradients(&model, &s.tensor(), s.label, 0.0, 0, false).unwrap();
                for (name, g) in r.grads {
                    let acc = sum.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v / batch.len() as f32;
                    }
                }
            }
            opt.update(&mut model.params, &sum, 1e-3).unwrap();
            curve.push(eval_loss(&model, &batch));
        }
        curves.push(curve);
    }
    let median: Vec<f64> = (0..=10)
        .map(|t| {
            let mut v: Vec<f64> = curves.iter().map(|c| c[t]).collect();
            v.sort_by(f64::total_cmp);
            v[2]
        })
        .collect();
    for pair in median.windows(2) {
        assert!(pair[1] < pair[0], "median losses {median:?}");
    }
}

fn small_run(threads: usize) -> TrainOutcome {
    let train_set = synth_generate(12, 32, 32, 4, 1).unwrap();
    let val_set = synth_generate(4, 32, 32, 4, 2).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        check_associations: true,
        threads,
        ..TrainConfig::default()
    };
    train(&cfg, &train_set, &val_set, None).unwrap()
}

#[test]
fn training_is_deterministic_and_checks_every_association() {
    let a = small_run(1);
    let b = small_run(2);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.log, b.log);
    // 2 modules × 2 iterations × 2 heads × 256 pixels, per sample per epoch
    assert_eq!(a.association_rows_checked, 2 * 2 * 2 * 256 * 12 * 2);
    assert_eq!(a.log.len(), 2);
    assert!(a
        .log
        .iter()
        .all(|r| r.loss.is_finite() && (0.0..=1.0).contains(&r.val_acc)));
}

#[test]
fn training_writes_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let train_set = synth_generate(8, 32, 32, 4, 3).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        checkpoint_every: 1,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &train_set, &[], Some(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("metrics.log")).unwrap();
    assert_eq!(log, format_log(&out.log));
    for name in ["epoch_001.spxf", "epoch_002.spxf", "final.spxf"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let back = spformer::checkpoint::load(&dir.path().join("final.spxf")).unwrap();
    assert_eq!(back.params, out.model.params);
}

#[test]
fn synthetic_data_is_balanced_deterministic_and_consistent() {
    let a = synth_generate(40, 32, 32, 4, 9).unwrap();
    assert_eq!(a, synth_generate(40, 32, 32, 4, 9).unwrap());
    assert_ne!(a, synth_generate(40, 32, 32, 4, 10).unwrap());
    let mut per_class = [0usize; 4];
    for s in &a {
        per_class[s.label] += 1;
        let area = s.mask.iter().filter(|&&m| m != 0).count();
        assert!(area * 20 >= 32 * 32, "shape covers {area} pixels");
        assert!(s.mask.iter().all(|&m| m == 0 || m == s.label as u32 + 1));
        assert!(is_connected(&s.mask, 32, 32));
    }
    assert_eq!(per_class, [10; 4]);
    assert!(synth_generate(4, 32, 32, 1, 0).is_err());
    assert!(synth_generate(4, 8, 8, 4, 0).is_err());
}

#[test]
fn datasets_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_generate(6, 24, 20, 3, 4).unwrap();
    save_dataset(&samples, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), samples);
}

#[test]
fn config_text_rejects_unknown_keys() {
    let cfg = TrainConfig::from_kv("epochs = 3\nlr=0.01\nchannels=16\n").unwrap();
    assert_eq!((cfg.epochs, cfg.lr, cfg.model.channels), (3, 0.01, 16));
    assert!(TrainConfig::from_kv("epochz=3\n").is_err());
    assert!(TrainConfig::from_kv("batch_size=0\n").is_err());
}

#[test]
fn diverging_runs_stop_with_a_numeric_error_and_keep_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let train_set = synth_generate(8, 32, 32, 4, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        lr: 1e30,
        warmup_epochs: 0,
        ..TrainConfig::default()
    };
    let err = train(&cfg, &train_set, &[], Some(dir.path()))
        .err()
        .expect("training must fail");
    assert!(
        matches!(err, Error::NonFinite { .. } | Error::DegenerateRow { .. }),
        "{err}"
    );
    assert!(dir.path().join("last_good.spxf").exists());
}

#[test]
fn adamw_first_step_and_zero_gradient_cases() {
    let mut params = ParamStore::new();
    params.insert("w", Tensor::new(&[1, 1], vec![2.0]).unwrap());
    let mut opt = AdamW::new(0.0);
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), Tensor::new(&[1, 1], vec![0.0]).unwrap());
    opt.update(&mut params, &grads, 0.1).unwrap();
    assert_eq!(params.get("w").unwrap().data()[0], 2.0);

    let mut opt = AdamW::new(0.0);
    grads.insert("w".to_string(), Tensor::new(&[1, 1], vec![1.0]).unwrap());
    opt.update(&mut params, &grads, 0.1).unwrap();
    // bias-corrected m/sqrt(v) is exactly 1 after one step
    assert!((params.get("w").unwrap().data()[0] - 1.9).abs() < 1e-6);
}

#[test]
fn thousand_samples_are_balanced_within_ten_percent() {
    let mut per_class = [0usize; 4];
    for s in synth_generate(1000, 16, 16, 4, 77).unwrap() {
        per_class[s.label] += 1;
    }
    assert!(per_class.iter().all(|&n| (225..=275).contains(&n)), "{per_class:?}");
}

#[test]
fn zero_epochs_return_the_initial_model() {
    let train_set = synth_generate(4, 32, 32, 4, 6).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &train_set, &[], None).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.model, Model::init(cfg.model.clone(), cfg.seed).unwrap());
}
