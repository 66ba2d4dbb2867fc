use hanet_tensor::{conv1d, pool_width, resample_height, ConvParams1D, Graph, Mode, PoolMode, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn dims3() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..4, 1usize..6, 1usize..7)
}

proptest! {
    #[test]
    fn conv1d_is_linear_in_input(
        (ci, co, len) in (1usize..4, 1usize..4, 1usize..8),
        seed in any::<u64>(),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = Tensor::uniform(vec![co, ci, 3], -1.0, 1.0, &mut rng).unwrap();
        let p = ConvParams1D::new(k, Tensor::zeros(vec![co]).unwrap()).unwrap();
        let x = Tensor::uniform(vec![ci, len], -1.0, 1.0, &mut rng).unwrap();
        let y = Tensor::uniform(vec![ci, len], -1.0, 1.0, &mut rng).unwrap();
        let mix = Tensor::from_fn(vec![ci, len], |i| a * x.data()[i] + b * y.data()[i]).unwrap();
        let lhs = conv1d(&mix, &p).unwrap();
        let cx = conv1d(&x, &p).unwrap();
        let cy = conv1d(&y, &p).unwrap();
        for i in 0..lhs.numel() {
            prop_assert!((lhs.data()[i] - (a * cx.data()[i] + b * cy.data()[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_kernel_gives_constant_bias(len in 1usize..9, bias in -5.0f64..5.0) {
        let p = ConvParams1D::new(Tensor::zeros(vec![1, 2, 3]).unwrap(), Tensor::full(vec![1], bias).unwrap()).unwrap();
        let x = Tensor::full(vec![2, len], 1.7).unwrap();
        prop_assert!(conv1d(&x, &p).unwrap().data().iter().all(|&v| v == bias));
    }

    #[test]
    fn avg_pool_is_uniform_matrix_product(x in dims3().prop_flat_map(|(c, h, w)| tensor(vec![c, h, w]))) {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let ones = vec![1.0 / w as f64; w];
        let pooled = pool_width(&x, PoolMode::Avg).unwrap();
        prop_assert_eq!(pooled.shape(), &[c, h, 1]);
        for ch in 0..c {
            for r in 0..h {
                let dot: f64 = (0..w).map(|k| x.at(&[ch, r, k]) * ones[k]).sum();
                prop_assert!((pooled.at(&[ch, r, 0]) - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_pool_matches_scalar_loop(x in dims3().prop_flat_map(|(c, h, w)| tensor(vec![c, h, w]))) {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let pooled = pool_width(&x, PoolMode::Max).unwrap();
        for ch in 0..c {
            for r in 0..h {
                let mut m = f64::NEG_INFINITY;
                for k in 0..w {
                    m = m.max(x.at(&[ch, r, k]));
                }
                prop_assert_eq!(pooled.at(&[ch, r, 0]), m);
            }
        }
    }

    #[test]
    fn resampling_round_trip_keeps_constants(
        c in 1usize..4, h in 1usize..40, coarse in 1usize..20, v in -10.0f64..10.0
    ) {
        let x = Tensor::full(vec![c, h], v).unwrap();
        let down = resample_height(&x, coarse).unwrap();
        let back = resample_height(&down, h).unwrap();
        prop_assert!(back.data().iter().all(|&t| t == v));
    }

    #[test]
    fn activations_stay_in_range(x in tensor(vec![64]).prop_map(|t| {
        Tensor::from_fn(vec![64], |i| t.data()[i] * 40.0).unwrap()
    })) {
        let mut g = Graph::new();
        let v = g.input(x);
        let s = g.sigmoid(v);
        let r = g.relu(v);
        prop_assert!(g.value(s).data().iter().all(|&t| t > 0.0 && t < 1.0 || t == 0.0 || t == 1.0));
        prop_assert!(g.value(r).data().iter().all(|&t| t >= 0.0));
    }

    #[test]
    fn dropout_eval_is_identity(x in tensor(vec![2, 3, 4]), seed in any::<u64>()) {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = g.dropout(v, 0.5, Mode::Eval, &mut rng).unwrap();
        prop_assert_eq!(g.value(d), &x);
    }
}

#[test]
fn sigmoid_strictly_inside_unit_interval_for_moderate_inputs() {
    let x = Tensor::from_fn(vec![401], |i| (i as f64 - 200.0) / 6.0).unwrap();
    let mut g = Graph::new();
    let v = g.input(x);
    let s = g.sigmoid(v);
    assert!(g.value(s).data().iter().all(|&t| t > 0.0 && t < 1.0));
}

#[test]
fn dropout_train_scales_kept_entries() {
    let x = Tensor::full(vec![1000], 1.0).unwrap();
    let mut g = Graph::new();
    let v = g.input(x);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = g.dropout(v, 0.25, Mode::Train, &mut rng).unwrap();
    let vals = g.value(d).data();
    assert!(vals.iter().all(|&t| t == 0.0 || (t - 1.0 / 0.75).abs() < 1e-15));
    let dropped = vals.iter().filter(|&&t| t == 0.0).count();
    assert!((180..320).contains(&dropped), "{dropped}");
}
