use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::{ParamGroup, ParamStore};

/// SGD with heavy-ball momentum and per-group L2 weight decay:
/// `v = momentum * v + (g + decay * w)`, `w -= lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    momentum: f64,
    decay: BTreeMap<ParamGroup, f64>,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, decay_main: f64, decay_attention: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || decay_main < 0.0 || decay_attention < 0.0 {
            return Err(TensorError::invalid(
                "Sgd::new",
                format!("momentum {momentum}, decays {decay_main}/{decay_attention}"),
            ));
        }
        let decay = BTreeMap::from([(ParamGroup::Main, decay_main), (ParamGroup::Attention, decay_attention)]);
        Ok(Sgd { momentum, decay, velocity: Vec::new() })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Decay applied to a group; buffers are never decayed.
    pub fn weight_decay(&self, group: ParamGroup) -> f64 {
        self.decay.get(&group).copied().unwrap_or(0.0)
    }

    pub fn velocity(&self, index: usize) -> Option<&[f64]> {
        self.velocity.get(index).and_then(|v| v.as_deref())
    }

    /// Applies one update from the gradients stored in `store`. Entries without a
    /// gradient buffer are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(TensorError::invalid("Sgd::step", format!("learning rate {lr}")));
        }
        self.velocity.resize(store.len(), None);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if !entry.group.is_trainable() {
                continue;
            }
            let wd = self.decay.get(&entry.group).copied().unwrap_or(0.0);
            let Some(g) = entry.value.grad().map(|g| g.to_vec()) else { continue };
            let v = self.velocity[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let w = entry.value.data_mut();
            for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = self.momentum * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn momentum_accumulates_and_groups_decay_separately() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Main, Tensor::full(vec![1], 1.0).unwrap()).unwrap();
        let b = store.add("b", ParamGroup::Attention, Tensor::full(vec![1], 1.0).unwrap()).unwrap();
        let c = store.add("c", ParamGroup::Buffer, Tensor::full(vec![1], 1.0).unwrap()).unwrap();
        let mut sgd = Sgd::new(0.9, 0.5, 0.1).unwrap();
        for id in [a, b, c] {
            store.get_mut(id).accumulate_grad(&[1.0]).unwrap();
        }
        sgd.step(&mut store, 0.1).unwrap();
        // v = 1 + 0.5 * 1 = 1.5 ; w = 1 - 0.15
        assert!((store.get(a).data()[0] - 0.85).abs() < 1e-15);
        assert!((store.get(b).data()[0] - 0.89).abs() < 1e-15);
        assert_eq!(store.get(c).data()[0], 1.0);
        sgd.step(&mut store, 0.1).unwrap();
        // v = 0.9 * 1.5 + 1 + 0.5 * 0.85 = 2.775
        assert!((store.get(a).data()[0] - (0.85 - 0.2775)).abs() < 1e-12);
        assert_eq!(sgd.weight_decay(ParamGroup::Buffer), 0.0);
    }
}
