use hanet_core::hanet::{self, Hanet, HanetConfig};
use hanet_core::posenc::PeMode;
use hanet_core::verify::{check_module, check_store, ModuleCase};
use hanet_tensor::{GradcheckOptions, Graph, Mode, ParamStore, PoolMode, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build(cfg: HanetConfig, seed: u64) -> (ParamStore, Hanet) {
    let mut store = ParamStore::new();
    let h = Hanet::new(&mut store, "h", cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, h)
}

fn randomize(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in store.entries_mut() {
        if e.group.is_trainable() {
            let n = e.value.numel();
            let t = Tensor::uniform(vec![n], -scale, scale, &mut rng).unwrap();
            e.value.data_mut().copy_from_slice(t.data());
        }
    }
}

fn coarse_of(h: &Hanet, store: &ParamStore, x_l: &Tensor, mode: Mode) -> Tensor {
    let mut g = Graph::new();
    let s = x_l.shape();
    let l = g.input(x_l.clone().reshape(vec![1, s[0], s[1], s[2]]).unwrap());
    let hi = g.input(Tensor::zeros(vec![1, h.config().out_channels, h.config().coarse_height, 1]).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = h.forward_graph(&mut g, store, l, hi, mode, &mut rng).unwrap();
    g.value(out.coarse).clone()
}

#[test]
fn full_pipeline_gradients() {
    for pe_mode in [PeMode::None, PeMode::Sinusoidal, PeMode::Learnable] {
        let mut cfg = HanetConfig::new(8, 16);
        cfg.coarse_height = 4;
        cfg.reduction = 2;
        cfg.pe_mode = pe_mode;
        let (store, h) = build(cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x_l = Tensor::uniform(vec![1, 8, 12, 10], -1.0, 1.0, &mut rng).unwrap();
        let x_h = Tensor::uniform(vec![1, 16, 12, 10], -1.0, 1.0, &mut rng).unwrap();
        let report = check_store(&store, &[x_l, x_h], 13, GradcheckOptions::default(), |g, st, v, r| {
            let out = h.forward_graph(g, st, v[0], v[1], Mode::Train, r)?;
            Ok(g.mean(out.gated))
        })
        .unwrap();
        assert!(report.passed(), "{pe_mode}: {report}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_module_gradients(seed in any::<u64>()) {
        let case = ModuleCase::random(&mut ChaCha8Rng::seed_from_u64(seed));
        let report = check_module(&case, seed, GradcheckOptions::default()).unwrap();
        prop_assert!(report.passed(), "{}: {}", case.label(), report);
    }

    #[test]
    fn attention_strictly_inside_unit_interval(seed in any::<u64>(), scale in 0.1f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = HanetConfig::new(8, 6);
        cfg.reduction = 2;
        cfg.coarse_height = 4;
        let (mut store, h) = build(cfg, seed);
        randomize(&mut store, scale, seed ^ 1);
        let x_l = Tensor::uniform(vec![8, 9, 5], -3.0, 3.0, &mut rng).unwrap();
        let x_h = Tensor::uniform(vec![6, 7, 3], -5.0, 5.0, &mut rng).unwrap();
        for mode in [Mode::Eval, Mode::Train] {
            let (_, a) = h.forward(&store, &x_l, &x_h, mode, &mut rng).unwrap();
            prop_assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn column_permutation_leaves_attention_unchanged(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = HanetConfig::new(4, 4);
        cfg.reduction = 2;
        cfg.coarse_height = 4;
        let (mut store, h) = build(cfg, seed);
        randomize(&mut store, 1.0, seed ^ 2);
        let (c, rows, w) = (4, 8, 7);
        let x_l = Tensor::uniform(vec![c, rows, w], -1.0, 1.0, &mut rng).unwrap();
        let mut permuted = x_l.clone();
        for ch in 0..c {
            for r in 0..rows {
                let mut cols: Vec<usize> = (0..w).collect();
                cols.shuffle(&mut rng);
                for (dst, &src) in cols.iter().enumerate() {
                    permuted.data_mut()[(ch * rows + r) * w + dst] = x_l.data()[(ch * rows + r) * w + src];
                }
            }
        }
        let a = coarse_of(&h, &store, &x_l, Mode::Eval);
        let b = coarse_of(&h, &store, &permuted, Mode::Eval);
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn row_changes_stay_within_receptive_field(seed in any::<u64>(), j in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = HanetConfig::new(4, 3);
        cfg.reduction = 2;
        cfg.coarse_height = 8;
        cfg.pool_mode = PoolMode::Max;
        let (mut store, h) = build(cfg, seed);
        randomize(&mut store, 1.0, seed ^ 3);
        let x_l = Tensor::uniform(vec![4, 16, 3], -1.0, 1.0, &mut rng).unwrap();
        let mut changed = x_l.clone();
        // coarse row j pools rows 2j and 2j+1
        for ch in 0..4 {
            for r in [2 * j, 2 * j + 1] {
                for x in 0..3 {
                    changed.data_mut()[(ch * 16 + r) * 3 + x] += 3.0;
                }
            }
        }
        let a = coarse_of(&h, &store, &x_l, Mode::Eval);
        let b = coarse_of(&h, &store, &changed, Mode::Eval);
        let radius = cfg.receptive_radius();
        for row in 0usize..8 {
            if row.abs_diff(j) > radius {
                for ch in 0..3 {
                    prop_assert_eq!(a.at(&[0, ch, row]), b.at(&[0, ch, row]));
                }
            }
        }
    }
}

#[test]
fn positional_encoding_breaks_row_symmetry() {
    // zero padding makes border rows differ; rows further than the receptive
    // radius from both borders see identical neighborhoods
    let mut cfg = HanetConfig::new(4, 3);
    cfg.reduction = 2;
    cfg.coarse_height = 12;
    let radius = cfg.receptive_radius();
    let x_l = Tensor::from_fn(vec![4, 12, 5], |i| (i / 60) as f64 * 0.7 - 1.0).unwrap();
    let interior = radius..12 - radius;
    let spread = |a: &Tensor| -> f64 {
        (0..3)
            .flat_map(|c| interior.clone().map(move |r| (c, r)))
            .map(|(c, r)| (a.at(&[0, c, r]) - a.at(&[0, c, radius])).abs())
            .fold(0.0, f64::max)
    };
    cfg.pe_mode = PeMode::None;
    let (mut store, h) = build(cfg, 5);
    randomize(&mut store, 1.0, 6);
    assert_eq!(spread(&coarse_of(&h, &store, &x_l, Mode::Eval)), 0.0);
    cfg.pe_mode = PeMode::Sinusoidal;
    let (mut store, h) = build(cfg, 5);
    randomize(&mut store, 1.0, 6);
    assert!(spread(&coarse_of(&h, &store, &x_l, Mode::Eval)) > 1e-3);
}

#[test]
fn eval_forward_is_bitwise_deterministic() {
    let mut cfg = HanetConfig::new(8, 4);
    cfg.reduction = 2;
    cfg.coarse_height = 4;
    cfg.pe_mode = PeMode::Learnable;
    let (mut store, h) = build(cfg, 8);
    randomize(&mut store, 1.0, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x_l = Tensor::uniform(vec![8, 10, 4], -1.0, 1.0, &mut rng).unwrap();
    let x_h = Tensor::uniform(vec![4, 20, 4], -1.0, 1.0, &mut rng).unwrap();
    let first = h.forward(&store, &x_l, &x_h, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let second = h.forward(&store, &x_l, &x_h, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(first, second);
}

fn conv_same(x: &[Vec<f64>], w: &[f64], b: &[f64], out: usize, k: usize) -> Vec<Vec<f64>> {
    let (cin, len) = (x.len(), x[0].len());
    let pad = (k / 2) as isize;
    (0..out)
        .map(|o| {
            (0..len)
                .map(|p| {
                    let mut acc = b[o];
                    for i in 0..cin {
                        for t in 0..k {
                            let q = p as isize + t as isize - pad;
                            if q >= 0 && (q as usize) < len {
                                acc += w[(o * cin + i) * k + t] * x[i][q as usize];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn norm_relu(x: Vec<Vec<f64>>, store: &ParamStore, prefix: &str) -> Vec<Vec<f64>> {
    let get = |n: &str| store.get(store.id(&format!("{prefix}.{n}")).unwrap()).data().to_vec();
    let (gamma, beta, mean, var) = (get("gamma"), get("beta"), get("running_mean"), get("running_var"));
    x.into_iter()
        .enumerate()
        .map(|(c, row)| {
            row.into_iter().map(|v| (gamma[c] * (v - mean[c]) / (var[c] + 1e-5).sqrt() + beta[c]).max(0.0)).collect()
        })
        .collect()
}

#[test]
fn coarse_attention_matches_scalar_composition() {
    let mut cfg = HanetConfig::new(6, 5);
    cfg.reduction = 2;
    cfg.coarse_height = 7;
    let (mut store, h) = build(cfg, 21);
    randomize(&mut store, 0.8, 22);
    for e in store.entries_mut() {
        if e.name.ends_with("running_var") {
            e.value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.5 + 0.1 * i as f64);
        }
        if e.name.ends_with("running_mean") {
            e.value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * i as f64 - 0.1);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let z = Tensor::uniform(vec![6, 7], -1.0, 1.0, &mut rng).unwrap();
    let got = h.attention_from_context(&store, &z, Mode::Eval, &mut rng).unwrap();

    let p = |n: &str| store.get(store.id(&format!("h.{n}")).unwrap()).data().to_vec();
    let rows: Vec<Vec<f64>> = (0..6).map(|c| z.data()[c * 7..(c + 1) * 7].to_vec()).collect();
    let q = norm_relu(conv_same(&rows, &p("conv1.weight"), &p("conv1.bias"), 3, 3), &store, "h.norm1");
    let table = hanet_core::posenc::sinusoidal_table(7, 3).unwrap();
    let q: Vec<Vec<f64>> = q
        .into_iter()
        .enumerate()
        .map(|(c, r)| r.iter().enumerate().map(|(i, v)| v + table.values().at(&[i, c])).collect())
        .collect();
    let q = norm_relu(conv_same(&q, &p("conv2.weight"), &p("conv2.bias"), 6, 3), &store, "h.norm2");
    let logits = conv_same(&q, &p("conv3.weight"), &p("conv3.bias"), 5, 3);
    for c in 0..5 {
        for r in 0..7 {
            let want = 1.0 / (1.0 + (-logits[c][r]).exp());
            assert!((got.at(&[c, r]) - want).abs() < 1e-12, "({c}, {r}): {} vs {want}", got.at(&[c, r]));
        }
    }
}

#[test]
fn adaptive_coarsening_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let z = Tensor::uniform(vec![8, 32], -1.0, 1.0, &mut rng).unwrap();
    for target in [1, 3, 5, 7, 16, 32] {
        let got = hanet::coarsen(&z, target).unwrap();
        for c in 0..8 {
            for j in 0..target {
                let start = j * 32 / target;
                let end = ((j + 1) * 32).div_ceil(target);
                let want = (start..end).map(|r| z.at(&[c, r])).sum::<f64>() / (end - start) as f64;
                assert!((got.at(&[c, j]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn expansion_and_gating_match_formulas() {
    let a_hat = Tensor::new(vec![2, 2], vec![0.2, 0.6, 1.0, 0.0]).unwrap();
    let a = hanet::expand_attention(&a_hat, 4).unwrap();
    // output row y samples source position (y + 0.5) / 2 - 0.5
    for (y, t) in [0.0, 0.25, 0.75, 1.0].into_iter().enumerate() {
        for c in 0..2 {
            let want = (1.0 - t) * a_hat.at(&[c, 0]) + t * a_hat.at(&[c, 1]);
            assert!((a.at(&[c, y]) - want).abs() < 1e-15);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let gate = Tensor::uniform(vec![3, 5], 0.0, 1.0, &mut rng).unwrap();
    let x = Tensor::uniform(vec![3, 5, 4], -2.0, 2.0, &mut rng).unwrap();
    let out = hanet::apply(&gate, &x).unwrap();
    for c in 0..3 {
        for r in 0..5 {
            for w in 0..4 {
                assert_eq!(out.at(&[c, r, w]), gate.at(&[c, r]) * x.at(&[c, r, w]));
            }
        }
    }
    let ones = Tensor::full(vec![3, 5], 1.0).unwrap();
    assert_eq!(hanet::apply(&ones, &x).unwrap(), x);
    assert_eq!(hanet::expand_attention(&gate, 5).unwrap(), gate);
}

#[test]
fn width_pool_matches_tensor_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let x = Tensor::uniform(vec![3, 6, 9], -1.0, 1.0, &mut rng).unwrap();
    for mode in [PoolMode::Avg, PoolMode::Max] {
        let ours = hanet::width_pool(&x, mode).unwrap();
        let theirs = hanet_tensor::pool_width(&x.clone().reshape(vec![1, 3, 6, 9]).unwrap(), mode).unwrap();
        assert_eq!(ours.data(), theirs.data());
    }
}
