//! The full network: backbone, optional decoupling branch, dual aggregator and
//! the final age regressor, plus the combined training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{AggregatorConfig, DualAggregator};
use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::bagging::Bag;
use crate::disentangle::{loss_decp1, loss_decp2, loss_mse0, Decoupler, Decp2Pairing, PreliminaryHead};
use crate::error::{Error, Result};
use crate::nn::{Ctx, RegressionHead};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub spatial: bool,
    pub instance: bool,
    pub disentangle: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const FULL: Self = Self { spatial: true, instance: true, disentangle: true };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub aggregator: AggregatorConfig,
    /// Instances per bag.
    pub bag_size: usize,
    /// Instance image size `[H, W]`.
    pub input_size: [usize; 2],
    pub head_hidden: usize,
    pub use_disentangle: bool,
    pub decp2_pairing: Decp2Pairing,
    pub decp2_squared: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            aggregator: AggregatorConfig::default(),
            bag_size: 16,
            input_size: [24, 24],
            head_hidden: 32,
            use_disentangle: true,
            decp2_pairing: Decp2Pairing::SameIndex,
            decp2_squared: false,
        }
    }
}

impl ModelConfig {
    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.aggregator.use_spatial = a.spatial;
        self.aggregator.use_instance = a.instance;
        self.use_disentangle = a.disentangle;
        self
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            spatial: self.aggregator.use_spatial,
            instance: self.aggregator.use_instance,
            disentangle: self.use_disentangle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.backbone.output_size(self.input_size)?;
        if self.bag_size == 0 || self.head_hidden == 0 {
            return Err(Error::config("bag size and head width must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mse0: f64,
    pub decp1: f64,
    pub decp2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mse0: 0.1, decp1: 0.05, decp2: 1.0 }
    }
}

/// `L = L_MSE + λ2 L_MSE0 + λ3 L_decp1 + λ4 L_decp2`.
pub fn total_loss(mse: f64, mse0: f64, decp1: f64, decp2: f64, w: &LossWeights) -> f64 {
    mse + w.mse0 * mse0 + w.decp1 * decp1 + w.decp2 * decp2
}

pub struct ForwardOutput {
    /// Final predictions `[b]`.
    pub pred: Var,
    /// Preliminary predictions `[b]`, when disentangling.
    pub y0: Option<Var>,
    pub e_stru: Option<Var>,
    pub z_age: Var,
    pub z_stru: Option<Var>,
    /// `[b·k]`.
    pub instance_scores: Var,
    /// `[b·k·h'·w']`.
    pub spatial_maps: Var,
    pub batch: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub mse0: f64,
    pub decp1: f64,
    pub decp2: f64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub decoupler: Option<Decoupler>,
    pub preliminary: Option<PreliminaryHead>,
    pub aggregator: DualAggregator,
    pub head: RegressionHead,
}

impl Model {
    /// Builds a freshly initialized model whose regressors start at `mean_age`.
    pub fn new(cfg: &ModelConfig, mean_age: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, "backbone", &cfg.backbone, cfg.input_size, &mut rng)?;
        let c = cfg.backbone.out_channels();
        let (decoupler, preliminary) = if cfg.use_disentangle {
            (
                Some(Decoupler::new(&mut store, "decoupler", c, &mut rng)),
                Some(PreliminaryHead::new(&mut store, "preliminary", c, cfg.head_hidden, mean_age, &mut rng)),
            )
        } else {
            (None, None)
        };
        let aggregator = DualAggregator::new(&mut store, "aggregator", c, &cfg.aggregator, &mut rng)?;
        let head = RegressionHead::new(&mut store, "head", c, cfg.head_hidden, mean_age, &mut rng);
        Ok(Self { cfg: cfg.clone(), store, backbone, decoupler, preliminary, aggregator, head })
    }

    pub fn feature_size(&self) -> [usize; 2] {
        self.backbone.output_size()
    }

    /// Stacks bags into `[b·k, m, H, W]`.
    pub fn batch_tensor(&self, bags: &[&Bag]) -> Result<Tensor> {
        let k = self.cfg.bag_size;
        let [h, w] = self.cfg.input_size;
        let m = self.cfg.backbone.in_channels;
        let mut data = Vec::with_capacity(bags.len() * k * m * h * w);
        for bag in bags {
            if bag.shape() != [k, m, h, w] {
                return Err(Error::shape([k, m, h, w], bag.shape()));
            }
            data.extend(bag.data.iter().map(|&v| v as f64));
        }
        Ok(Tensor::new([bags.len() * k, m, h, w], data))
    }

    /// Runs the network on `x [b·k, m, H, W]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<ForwardOutput> {
        let k = self.cfg.bag_size;
        let n = ctx.value(x).dim(0);
        if n == 0 || !n.is_multiple_of(k) {
            return Err(Error::shape(format!("[b*{k}, ...]"), ctx.value(x).shape()));
        }
        let batch = n / k;
        let e = self.backbone.forward(ctx, x)?;
        let (e_age, e_stru, y0) = match (&self.decoupler, &self.preliminary) {
            (Some(d), Some(p)) => {
                let (age, stru) = d.forward(ctx, e);
                let y0 = p.forward(ctx, age, k);
                (age, Some(stru), Some(y0))
            }
            _ => (e, None, None),
        };
        let age = self.aggregator.forward(ctx, e_age, k)?;
        let z_stru = match e_stru {
            Some(s) => Some(self.aggregator.forward(ctx, s, k)?.z),
            None => None,
        };
        let pred = self.head.forward(ctx, age.z);
        Ok(ForwardOutput {
            pred,
            y0,
            e_stru,
            z_age: age.z,
            z_stru,
            instance_scores: age.instance_scores,
            spatial_maps: age.spatial_maps,
            batch,
        })
    }

    /// Combined loss for one batch. `partners` pairs bags for the
    /// structure-similarity term (and the random decp2 pairing).
    pub fn loss(&self, tape: &mut Tape, out: &ForwardOutput, ages: &[f64], partners: &[usize], w: &LossWeights) -> (Var, LossParts) {
        let mse = tape.mse(out.pred, ages);
        let mut parts = LossParts { mse: tape.value(mse).item(), ..Default::default() };
        let mut terms = vec![(mse, 1.0)];
        if let (Some(y0), Some(e_stru), Some(z_stru)) = (out.y0, out.e_stru, out.z_stru) {
            let l0 = loss_mse0(tape, y0, ages);
            let l1 = loss_decp1(tape, e_stru, self.cfg.bag_size, partners);
            let l2 = loss_decp2(tape, z_stru, out.z_age, self.cfg.decp2_pairing, partners, self.cfg.decp2_squared);
            parts.mse0 = tape.value(l0).item();
            parts.decp1 = tape.value(l1).item();
            parts.decp2 = tape.value(l2).item();
            terms.extend([(l0, w.mse0), (l1, w.decp1), (l2, w.decp2)]);
        }
        let total = tape.weighted_sum(&terms);
        parts.total = tape.value(total).item();
        (total, parts)
    }

    /// Inference-mode predictions for a set of bags, in chunks of `batch`.
    pub fn predict(&self, bags: &[&Bag], batch: usize) -> Result<Vec<f64>> {
        let mut preds = Vec::with_capacity(bags.len());
        for chunk in bags.chunks(batch.max(1)) {
            let mut ctx = Ctx::new(&self.store, false);
            let x = ctx.tape.constant(self.batch_tensor(chunk)?);
            let out = self.forward(&mut ctx, x)?;
            preds.extend_from_slice(ctx.value(out.pred).data());
        }
        Ok(preds)
    }

    /// Number of trainable values in the aggregator.
    pub fn aggregator_param_count(&self) -> usize {
        self.store.param_count_with_prefix("aggregator.")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn micro_cfg() -> ModelConfig {
        let mut cfg = ModelConfig {
            backbone: BackboneConfig { channels: vec![4, 4], post_blocks: 1, ..BackboneConfig::desk() },
            bag_size: 4,
            input_size: [8, 8],
            head_hidden: 4,
            ..Default::default()
        };
        cfg.aggregator.spatial.heads = 2;
        cfg.aggregator.instance.heads = 2;
        cfg
    }

    #[test]
    fn loss_combination() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 2.0, -1.0, 0.5, &w) - 1.65).abs() < 1e-12);
        let zero = LossWeights { mse0: 0.0, decp1: 0.0, decp2: 0.0 };
        assert_eq!(total_loss(3.0, 2.0, -1.0, 0.5, &zero), 3.0);
    }

    #[test]
    fn fresh_model_predicts_mean_age() {
        let model = Model::new(&micro_cfg(), 61.5, 3).unwrap();
        let mut ctx = Ctx::new(&model.store, false);
        let x = ctx.tape.constant(crate::params::sample_normal(&[8, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(0)));
        let out = model.forward(&mut ctx, x).unwrap();
        for &p in ctx.value(out.pred).data() {
            assert!((p - 61.5).abs() < 1e-12);
        }
    }

    #[test]
    fn training_loss_is_finite_and_decomposes() {
        let model = Model::new(&micro_cfg(), 60.0, 4).unwrap();
        let mut ctx = Ctx::new(&model.store, true);
        let x = ctx.tape.constant(crate::params::sample_normal(&[8, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let out = model.forward(&mut ctx, x).unwrap();
        let w = LossWeights::default();
        let (l, parts) = model.loss(&mut ctx.tape, &out, &[55.0, 70.0], &[1, 0], &w);
        assert!(parts.total.is_finite());
        assert!((parts.total - total_loss(parts.mse, parts.mse0, parts.decp1, parts.decp2, &w)).abs() < 1e-9);
        let grads = ctx.tape.backward(l);
        assert!(!grads.params().is_empty());
    }

    #[test]
    fn ablated_model_has_no_aggregator_parameters() {
        let cfg = micro_cfg().with_ablation(Ablation { spatial: false, instance: false, disentangle: false });
        let model = Model::new(&cfg, 60.0, 0).unwrap();
        assert_eq!(model.aggregator_param_count(), 0);
        assert!(model.store.param_count_with_prefix("decoupler.") == 0);
        let full = Model::new(&micro_cfg(), 60.0, 0).unwrap();
        assert!(full.aggregator_param_count() > 0);
    }
}
