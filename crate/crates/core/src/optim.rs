//! Adam, plateau learning-rate decay and early stopping.

use crate::autograd::Grads;
use crate::params::{EntryKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable tensor that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (id, g) in grads.params() {
            if store.kind(id) != EntryKind::Param {
                continue;
            }
            let slot = id.0;
            let m = self.m[slot].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[slot].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id).data_mut();
            for (((pi, gi), mi), vi) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *pi -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs pass without a strict new minimum of the monitored loss, then
/// starts counting again.
#[derive(Clone, Debug)]
pub struct PlateauDecay {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauDecay {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self { factor, patience, best: f64::INFINITY, stale: 0 }
    }

    /// Returns the factor to apply to the learning rate after this epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            return 1.0;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            return self.factor;
        }
        1.0
    }
}

/// Signals a stop after `patience` consecutive epochs without a strict new minimum.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, stale: 0 }
    }

    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn stale_epochs(&self) -> usize {
        self.stale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add_param("w", Tensor::new([2], vec![1.0, -1.0]));
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let l = tape.sum(w);
        let grads = tape.backward(l);
        let mut opt = Adam::new(0.1);
        opt.step(&mut store, &grads);
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-8 && (p[1] + 1.1).abs() < 1e-8);
    }

    #[test]
    fn plateau_decays_once_per_five_stale_epochs() {
        let mut s = PlateauDecay::new(0.8, 5);
        let losses = [5.0, 4.0, 4.0, 4.5, 4.0, 4.2, 4.1, 4.0, 4.0, 4.0, 4.0, 4.0, 3.0];
        let factors: Vec<f64> = losses.iter().map(|&l| s.observe(l)).collect();
        assert_eq!(factors, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.8, 1.0, 1.0, 1.0, 1.0, 0.8, 1.0]);
    }

    #[test]
    fn early_stop_after_twenty() {
        let mut e = EarlyStopping::new(20);
        assert!(!e.observe(1.0));
        for i in 0..19 {
            assert!(!e.observe(1.0 + i as f64), "stopped early at {i}");
        }
        assert!(e.observe(1.0));
    }
}
