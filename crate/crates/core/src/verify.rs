//! Gradient suites for the attention module and the full segmenter.
//!
//! Every check differentiates a scalar loss in train mode. Dropout masks and PE
//! jitter are drawn from a generator re-seeded at each evaluation, so the checked
//! function is deterministic.

use std::fmt::Write as _;

use hanet_tensor::{
    gradcheck, Evaluation, GradcheckOptions, GradcheckReport, Graph, Mode, ParamId, ParamStore, PoolMode, Tensor,
    TensorError, Var,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::hanet::{Hanet, HanetConfig};
use crate::kv::derive_seed;
use crate::posenc::PeMode;
use crate::scenestats::IGNORE;
use crate::toyseg::model::{Layer, ToySeg, ToySegConfig};

pub const MODULE_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Gradcheck of `build`'s scalar output with respect to every trainable tensor in
/// `store` followed by `inputs`.
pub fn check_store<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    seed: u64,
    opts: GradcheckOptions,
    build: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &ParamStore, &[Var], &mut dyn RngCore) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.entry(id).group.is_trainable()).collect();
    let mut theta: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
    theta.extend(inputs.iter().cloned());
    let mut base = store.clone();
    base.clear_grads();
    let f = |t: &[Tensor], want: bool| -> hanet_tensor::Result<Evaluation> {
        let mut local = base.clone();
        for (k, &id) in ids.iter().enumerate() {
            local.set_data(id, t[k].data())?;
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = t[ids.len()..].iter().map(|x| g.variable(x.clone())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loss = build(&mut g, &local, &vars, &mut rng).map_err(|e| match e {
            CoreError::Tensor(te) => te,
            other => TensorError::InvalidArgument { op: "verify", detail: other.to_string() },
        })?;
        let value = g.value(loss).data()[0];
        if !want {
            return Ok(Evaluation { loss: value, grads: None });
        }
        g.backward(loss)?;
        g.accumulate_param_grads(&mut local)?;
        let mut grads: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| {
                let p = local.get(id);
                p.grad().map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec)
            })
            .collect();
        for &v in &vars {
            grads.push(g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec));
        }
        Ok(Evaluation { loss: value, grads: Some(grads) })
    };
    Ok(gradcheck(f, &theta, opts)?)
}

/// Shapes of one attention-module check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModuleCase {
    pub config: HanetConfig,
    pub batch: usize,
    pub low_height: usize,
    pub high_height: usize,
    pub width: usize,
}

impl ModuleCase {
    /// Draws `C_l ∈ {4, 8, 16}`, `r ∈ {2, 4}`, `Ĥ ∈ {2, 4, 8}` and a PE mode, plus
    /// pooling, PE position and map sizes.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let cl = [4, 8, 16][rng.random_range(0..3)];
        let coarse = [2, 4, 8][rng.random_range(0..3)];
        let mut config = HanetConfig::new(cl, rng.random_range(2..=6));
        config.reduction = [2, 4][rng.random_range(0..2)];
        config.coarse_height = coarse;
        config.pe_mode = [PeMode::None, PeMode::Sinusoidal, PeMode::Learnable][rng.random_range(0..3)];
        config.pe_layer = rng.random_range(1..=3);
        config.pool_mode = if rng.random_bool(0.5) { PoolMode::Avg } else { PoolMode::Max };
        ModuleCase {
            config,
            batch: 2,
            low_height: rng.random_range(coarse..=coarse + 6),
            high_height: rng.random_range(coarse..=coarse + 6),
            width: rng.random_range(2..=5),
        }
    }

    pub fn label(&self) -> String {
        let c = &self.config;
        format!(
            "C_l={} C_h={} r={} coarse={} pe={}@{} pool={} x_l={}x{} x_h={}x{}",
            c.in_channels,
            c.out_channels,
            c.reduction,
            c.coarse_height,
            c.pe_mode,
            c.pe_layer,
            crate::hanet::pool_mode_name(c.pool_mode),
            self.low_height,
            self.width,
            self.high_height,
            self.width
        )
    }
}

/// `mse(gated, target)` against all module parameters and both inputs.
pub fn check_module(case: &ModuleCase, seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let c = &case.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let module = Hanet::new(&mut store, "hanet", *c, &mut rng)?;
    let n = case.batch;
    let x_l = Tensor::uniform(vec![n, c.in_channels, case.low_height, case.width], -1.0, 1.0, &mut rng)?;
    let x_h = Tensor::uniform(vec![n, c.out_channels, case.high_height, case.width], -1.0, 1.0, &mut rng)?;
    let target = Tensor::uniform(x_h.shape().to_vec(), -1.0, 1.0, &mut rng)?;
    let eval_seed = derive_seed(seed, "evaluation");
    check_store(&store, &[x_l, x_h], eval_seed, opts, |g, st, v, r| {
        let out = module.forward_graph(g, st, v[0], v[1], Mode::Train, r)?;
        Ok(g.mse(out.gated, &target)?)
    })
}

/// A segmenter small enough to check entry by entry, with attention at every layer.
pub fn tiny_model_config(pe_mode: PeMode, seed: u64) -> ToySegConfig {
    let mut cfg = ToySegConfig {
        widths: [4, 4, 4],
        num_classes: 3,
        hanet_layers: Layer::ALL.into_iter().collect(),
        seed,
        ..ToySegConfig::default()
    };
    cfg.hanet.coarse_height = 2;
    cfg.hanet.reduction = 2;
    cfg.hanet.pe_mode = pe_mode;
    cfg
}

/// Cross-entropy of the full segmenter on a random `8x8` batch against every trainable tensor.
pub fn check_model(config: &ToySegConfig, seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let model = ToySeg::build(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, h, w) = (2, 8, 8);
    let image = Tensor::uniform(vec![n, config.in_channels, h, w], -2.0, 2.0, &mut rng)?;
    let k = config.num_classes as u8;
    let labels: Vec<u8> =
        (0..n * h * w).map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..k) }).collect();
    let eval_seed = derive_seed(seed, "evaluation");
    check_store(&model.store, &[], eval_seed, opts, |g, st, _, r| {
        let x = g.input(image.clone());
        let mut m = model.clone();
        m.store = st.clone();
        let out = m.forward(g, x, Mode::Train, r)?;
        Ok(g.cross_entropy(out.logits, &labels, IGNORE)?)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub module_cases: usize,
    pub seed: u64,
    pub epsilon: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { module_cases: 50, seed: 0, epsilon: hanet_tensor::gradcheck::DEFAULT_EPSILON }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub module: Vec<(String, GradcheckReport)>,
    pub model: Vec<(String, GradcheckReport)>,
}

impl SuiteReport {
    pub fn module_max(&self) -> f64 {
        self.module.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn model_max(&self) -> f64 {
        self.model.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.module.iter().chain(&self.model).all(|(_, r)| r.passed())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, r) in &self.module {
            let _ = writeln!(out, "module {name}: {r}");
        }
        for (name, r) in &self.model {
            let _ = writeln!(out, "model {name}: {r}");
        }
        let _ =
            writeln!(out, "module max relative error = {:.3e} (tolerance {MODULE_TOLERANCE:.0e})", self.module_max());
        let _ = writeln!(out, "model max relative error = {:.3e} (tolerance {MODEL_TOLERANCE:.0e})", self.model_max());
        let _ = writeln!(out, "{}", if self.passed() { "PASS" } else { "FAIL" });
        out
    }
}

/// Random module cases followed by the tiny segmenter under each PE mode.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "cases"));
    let module_opts = GradcheckOptions { epsilon: cfg.epsilon, tolerance: MODULE_TOLERANCE, ..Default::default() };
    let model_opts = GradcheckOptions { tolerance: MODEL_TOLERANCE, ..module_opts };
    let mut module = Vec::with_capacity(cfg.module_cases);
    for i in 0..cfg.module_cases {
        let case = ModuleCase::random(&mut rng);
        let report = check_module(&case, derive_seed(cfg.seed, &format!("module{i}")), module_opts)?;
        module.push((case.label(), report));
    }
    let mut model = Vec::new();
    for mode in [PeMode::None, PeMode::Sinusoidal, PeMode::Learnable] {
        let seed = derive_seed(cfg.seed, &format!("model-{mode}"));
        let report = check_model(&tiny_model_config(mode, seed), seed, model_opts)?;
        model.push((format!("L1-L5 pe={mode}"), report));
    }
    Ok(SuiteReport { module, model })
}
