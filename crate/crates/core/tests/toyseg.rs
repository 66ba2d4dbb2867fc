use hanet_core::posenc::PeMode;
use hanet_core::scenestats::{region_report, Bands, LabelMap, IGNORE};
use hanet_core::toyseg::checkpoint;
use hanet_core::toyseg::eval::{argmax_maps, predict, score};
use hanet_core::toyseg::model::parse_layers;
use hanet_core::toyseg::synth::{generating_bands, image_batch};
use hanet_core::toyseg::{evaluate, poly_lr, synth_banded, train, Dataset, Layer, ToySeg, ToySegConfig, TrainConfig};
use hanet_core::verify::{check_model, tiny_model_config, MODEL_TOLERANCE};
use hanet_tensor::{GradcheckOptions, ParamGroup};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(layers: &str) -> ToySegConfig {
    let mut cfg = ToySegConfig { hanet_layers: parse_layers(layers).unwrap(), ..ToySegConfig::default() };
    cfg.hanet.coarse_height = 4;
    cfg
}

#[test]
fn full_model_gradients() {
    for mode in [PeMode::None, PeMode::Sinusoidal, PeMode::Learnable] {
        let cfg = tiny_model_config(mode, 3);
        let opts = GradcheckOptions { tolerance: MODEL_TOLERANCE, ..Default::default() };
        let report = check_model(&cfg, 4, opts).unwrap();
        assert!(report.passed(), "{mode}: {report}");
    }
}

#[test]
fn logits_cover_the_input() {
    let model = ToySeg::build(small_config("L1-L4")).unwrap();
    for (h, w) in [(16, 16), (24, 8), (32, 20)] {
        let data = synth_banded(1, 2, h, w, 6, 0.5).unwrap();
        let imgs: Vec<_> = data.samples.iter().map(|s| &s.image).collect();
        let (logits, maps) = model.infer(image_batch(&imgs).unwrap()).unwrap();
        assert_eq!(logits.shape(), &[2, 6, h, w]);
        assert_eq!(maps.len(), 4);
    }
    assert!(model.check_input(18, 16).is_err());
    assert!(model.check_input(12, 16).is_err());
}

#[test]
fn attaching_a_module_adds_its_closed_form_count() {
    let base = ToySeg::build(small_config("none")).unwrap();
    for layer in Layer::ALL {
        let cfg = small_config(&layer.to_string());
        let one = ToySeg::build(cfg.clone()).unwrap();
        assert!(one.param_count() > base.param_count());
        assert_eq!(one.param_count() - base.param_count(), cfg.hanet_config(layer).param_count());
    }
    let l5 = ToySeg::build(small_config("L5")).unwrap();
    assert_eq!(l5.hanet(Layer::L5).unwrap().config().out_channels, 6);
}

#[test]
fn single_image_overfits() {
    let data = synth_banded(5, 1, 32, 32, 6, 0.5).unwrap();
    let mut model = ToySeg::build(small_config("L1-L4")).unwrap();
    let cfg = TrainConfig { max_iteration: 300, batch_size: 1, crop: (32, 32), ..TrainConfig::default() };
    train(&mut model, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let report = evaluate(&model, &data).unwrap();
    assert!(report.pixel_accuracy > 0.99, "pixel accuracy {}", report.pixel_accuracy);
}

#[test]
fn training_is_deterministic_and_logs_the_schedule() {
    let data = synth_banded(7, 4, 16, 16, 6, 1.0).unwrap();
    let cfg = TrainConfig { max_iteration: 6, batch_size: 2, crop: (16, 12), ..TrainConfig::default() };
    let run = || {
        let mut model = ToySeg::build(small_config("L1-L5")).unwrap();
        let out = train(&mut model, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        (model, out)
    };
    let (a, out) = run();
    let (b, _) = run();
    assert_eq!(a.store, b.store);
    for row in &out.log.rows {
        assert_eq!(row.lr, poly_lr(row.iteration, &cfg).unwrap());
        assert!(row.loss.is_finite());
    }
    assert_eq!(out.optimizer.weight_decay(ParamGroup::Attention), 1e-4);
    assert_eq!(out.optimizer.weight_decay(ParamGroup::Main), 5e-4);
    assert_eq!(out.optimizer.weight_decay(ParamGroup::Buffer), 0.0);
    assert_ne!(a.store, ToySeg::build(small_config("L1-L5")).unwrap().store);
}

#[test]
fn checkpoint_reproduces_evaluation() {
    let data = synth_banded(9, 4, 16, 16, 6, 1.0).unwrap();
    let mut model = ToySeg::build(small_config("L1-L5")).unwrap();
    let cfg = TrainConfig { max_iteration: 4, batch_size: 2, crop: (16, 16), ..TrainConfig::default() };
    train(&mut model, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let (a, b) = (evaluate(&model, &data).unwrap(), evaluate(&loaded, &data).unwrap());
    assert_eq!(a.miou.to_bits(), b.miou.to_bits());
    assert_eq!(a, b);
}

#[test]
fn untrained_model_is_near_chance() {
    let data = synth_banded(11, 4, 32, 16, 6, 1.0).unwrap();
    let model = ToySeg::build(small_config("L1-L4")).unwrap();
    let r = evaluate(&model, &data).unwrap();
    assert!((0.0..=0.35).contains(&r.miou), "miou {}", r.miou);
    assert!(r.per_region_miou.iter().flatten().all(|m| (0.0..=1.0).contains(m)));
}

#[test]
fn synthetic_bands_are_degenerate_without_noise() {
    let data = synth_banded(12, 3, 30, 10, 6, 0.0).unwrap();
    let report = region_report(&data.labels(), 6, &Bands::equal(6).unwrap()).unwrap();
    assert!(report.band_entropy.iter().all(|e| *e == Some(0.0)));
    let bands = generating_bands(30, 6);
    for (c, &(a, b)) in bands.iter().enumerate() {
        assert_eq!(b - a, 5, "class {c}");
    }
}

#[test]
fn synthetic_bands_reduce_entropy() {
    for noise in [0.0, 0.5, 1.0] {
        let data = synth_banded(13, 10, 96, 16, 6, noise).unwrap();
        let r = region_report(&data.labels(), 6, &Bands::equal(3).unwrap()).unwrap();
        assert!(r.unconditional_entropy - r.average_conditional_entropy >= 0.2, "noise {noise}: {r:?}");
    }
}

#[test]
fn predictions_feed_the_scorer() {
    let data = synth_banded(14, 3, 16, 16, 6, 0.5).unwrap();
    let model = ToySeg::build(small_config("none")).unwrap();
    let preds = predict(&model, &data).unwrap();
    let imgs: Vec<_> = data.samples.iter().map(|s| &s.image).collect();
    let (logits, _) = model.infer(image_batch(&imgs).unwrap()).unwrap();
    assert_eq!(
        preds.iter().map(|p| &p.ids).collect::<Vec<_>>(),
        argmax_maps(&logits).iter().map(|p| &p.ids).collect::<Vec<_>>()
    );
    assert_eq!(score(&preds, &data.labels(), 6).unwrap(), evaluate(&model, &data).unwrap());
}

#[test]
fn empty_training_set_rejected() {
    let mut model = ToySeg::build(small_config("none")).unwrap();
    let err = train(&mut model, &Dataset::default(), &TrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(err.is_err());
}

fn oracle_iou(pred: &[u8], truth: &[u8], k: usize) -> Vec<Option<f64>> {
    (0..k as u8)
        .map(|c| {
            let valid = || pred.iter().zip(truth).filter(|(_, &t)| t != IGNORE);
            let tp = valid().filter(|(&p, &t)| p == c && t == c).count();
            let fp = valid().filter(|(&p, &t)| p == c && t != c).count();
            let fn_ = valid().filter(|(&p, &t)| p != c && t == c).count();
            (tp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64)
        })
        .collect()
}

proptest! {
    #[test]
    fn scorer_matches_scalar_oracle(
        (w, h, pred, truth) in (1usize..6, 1usize..6).prop_flat_map(|(w, h)| {
            let n = w * h;
            (Just(w), Just(h), prop::collection::vec(0u8..4, n), prop::collection::vec(prop_oneof![0u8..4, Just(IGNORE)], n))
        })
    ) {
        let p = LabelMap::new(w, h, pred.clone()).unwrap();
        let t = LabelMap::new(w, h, truth.clone()).unwrap();
        match score(&[p], &[t], 4) {
            Ok(r) => {
                let want = oracle_iou(&pred, &truth, 4);
                prop_assert_eq!(&r.per_class_iou, &want);
                let present: Vec<f64> = want.iter().flatten().copied().collect();
                prop_assert!((r.miou - present.iter().sum::<f64>() / present.len() as f64).abs() < 1e-15);
                prop_assert!((0.0..=1.0).contains(&r.miou));
            }
            Err(_) => prop_assert!(truth.iter().all(|&t| t == IGNORE)),
        }
    }
}
