//! Every differentiable primitive against central finite differences, 100 random
//! trials each.

use hanet_tensor::gradcheck::{gradcheck, Evaluation, GradcheckOptions};
use hanet_tensor::layers::{BatchNorm, Conv2d, Conv2dSpec};
use hanet_tensor::{Graph, Mode, ParamGroup, ParamStore, PoolMode, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 100;

/// Runs `build` on leaves made from `theta` and differentiates `mse(output, target)`.
fn check<F>(theta: Vec<Tensor>, target_seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut target: Option<Tensor> = None;
    let f = |t: &[Tensor], want: bool| -> Result<Evaluation> {
        let mut g = Graph::new();
        let vars: Vec<Var> = t.iter().map(|x| g.variable(x.clone())).collect();
        let out = build(&mut g, &vars)?;
        let tgt = target.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(target_seed);
            Tensor::uniform(g.shape(out).to_vec(), -1.0, 1.0, &mut rng).unwrap()
        });
        let loss = g.mse(out, tgt)?;
        let value = g.value(loss).data()[0];
        if !want {
            return Ok(Evaluation { loss: value, grads: None });
        }
        g.backward(loss)?;
        let grads =
            vars.iter().map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).numel()]));
        Ok(Evaluation { loss: value, grads: Some(grads.collect()) })
    };
    let report = gradcheck(f, &theta, GradcheckOptions::default()).unwrap();
    assert!(report.passed(), "{report}");
    report.max_rel_error
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng).unwrap()
}

fn for_trials(seed: u64, mut body: impl FnMut(&mut ChaCha8Rng, u64)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..TRIALS {
        body(&mut rng, trial);
    }
}

#[test]
fn relu_sigmoid_add() {
    for_trials(1, |rng, t| {
        let a = rand_t(rng, &[2, 3, 4]);
        let b = rand_t(rng, &[2, 3, 4]);
        check(vec![a, b], t, |g, v| {
            let r = g.relu(v[0]);
            let s = g.sigmoid(v[1]);
            g.add(r, s)
        });
    });
}

#[test]
fn conv1d_all_operands() {
    for_trials(2, |rng, t| {
        let (n, ci, co, len) =
            (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..7));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let theta = vec![rand_t(rng, &[n, ci, len]), rand_t(rng, &[co, ci, k]), rand_t(rng, &[co])];
        check(theta, t, |g, v| g.conv1d_with(v[0], v[1], v[2]));
    });
}

#[test]
fn conv2d_strided_dilated() {
    for_trials(3, |rng, t| {
        let spec = Conv2dSpec::new(rng.random_range(1..3), rng.random_range(1..3), [1, 3][rng.random_range(0..2)])
            .stride(rng.random_range(1..3))
            .dilation(rng.random_range(1..3));
        let mut store = ParamStore::new();
        let layer = Conv2d::new(&mut store, "c", ParamGroup::Main, spec, rng).unwrap();
        let x = rand_t(rng, &[2, spec.in_channels, 5, 6]);
        let w = store.get(layer.weight).clone();
        let b = store.get(layer.bias.unwrap()).clone();
        check(vec![x, w, b], t, |g, v| {
            g.conv2d_with(v[0], v[1], Some(v[2]), layer.stride, layer.padding, layer.dilation)
        });
    });
}

#[test]
fn gate_rows_and_pooling() {
    for_trials(4, |rng, t| {
        let shape = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..6)];
        let x = rand_t(rng, &shape);
        let gate = rand_t(rng, &shape[..3]);
        let mode = if t % 2 == 0 { PoolMode::Avg } else { PoolMode::Max };
        check(vec![gate, x], t, move |g, v| {
            let y = g.gate_rows(v[0], v[1])?;
            let p = g.pool_width(y, mode)?;
            let s = g.sigmoid(p);
            g.gate_rows(s, y)
        });
    });
}

#[test]
fn batch_norm_train_and_eval() {
    for_trials(5, |rng, t| {
        let (n, c, l) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(2..6));
        let mode = if t % 2 == 0 { Mode::Train } else { Mode::Eval };
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", ParamGroup::Main, c).unwrap();
        store.set_data(bn.running_mean, &rand_t(rng, &[c]).into_data()).unwrap();
        store.set_data(bn.running_var, &vec![0.7; c]).unwrap();
        let theta = vec![rand_t(rng, &[n, c, l]), rand_t(rng, &[c]), rand_t(rng, &[c])];
        check(theta, t, |g, v| g.batch_norm_with(v[0], v[1], v[2], &bn, &store, mode));
    });
}

#[test]
fn dropout_resample_concat() {
    for_trials(6, |rng, t| {
        let (n, c, h, w) =
            (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..7), rng.random_range(1..5));
        let a = rand_t(rng, &[n, c, h, w]);
        let b = rand_t(rng, &[n, c + 1, h, w]);
        let (th, tw) = (rng.random_range(1..9), rng.random_range(1..7));
        check(vec![a, b], t, move |g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(t);
            let d = g.dropout(v[0], 0.3, Mode::Train, &mut r)?;
            let cat = g.concat_channels(&[d, v[1]])?;
            g.resize(cat, th, tw)
        });
    });
}

#[test]
fn positional_add_and_cross_entropy() {
    for_trials(7, |rng, t| {
        let (n, c, len, rows) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..6), 6);
        let q = rand_t(rng, &[n, c, len]);
        let table = rand_t(rng, &[rows, c]);
        let index: Vec<usize> = (0..n * len).map(|_| rng.random_range(0..rows)).collect();
        check(vec![q, table], t, |g, v| g.add_positional(v[0], v[1], index.clone()));

        let k = rng.random_range(2..5);
        let logits = rand_t(rng, &[n, k, 2, 3]);
        let labels: Vec<u8> =
            (0..n * 6).map(|_| if rng.random::<f64>() < 0.2 { 255 } else { rng.random_range(0..k) as u8 }).collect();
        let mut f = |th: &[Tensor], want: bool| -> Result<Evaluation> {
            let mut g = Graph::new();
            let v = g.variable(th[0].clone());
            let loss = g.cross_entropy(v, &labels, 255)?;
            let value = g.value(loss).data()[0];
            if want {
                g.backward(loss)?;
            }
            Ok(Evaluation { loss: value, grads: want.then(|| vec![g.grad(v).unwrap().to_vec()]) })
        };
        let r = gradcheck(&mut f, &[logits], GradcheckOptions::default()).unwrap();
        assert!(r.passed(), "{r}");
    });
}
