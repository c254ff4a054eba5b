//! Training loop: Adam with plateau decay, early stopping on the training
//! loss, best-validation-MAE model selection and a per-epoch run record.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bagging::{make_bag, Bag, BagConfig};
use crate::checkpoint::save_checkpoint;
use crate::disentangle::draw_partners;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{LossParts, LossWeights, Model, ModelConfig};
use crate::nn::{apply_bn_updates, Ctx};
use crate::optim::{Adam, EarlyStopping, PlateauDecay};
use crate::volume::{DatasetManifest, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub decay_factor: f64,
    pub decay_patience: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub param_seed: u64,
    pub data_seed: u64,
    pub pairing_seed: u64,
    /// Batch size used for validation and inference.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            weights: LossWeights::default(),
            decay_factor: 0.8,
            decay_patience: 5,
            max_epochs: 120,
            early_stop_patience: 20,
            param_seed: 0,
            data_seed: 1,
            pairing_seed: 2,
            eval_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.decay_factor > 0.0) {
            return Err(Error::config("learning rate and decay factor must be positive"));
        }
        if self.batch_size == 0 || self.eval_batch == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch sizes and epoch cap must be positive"));
        }
        if self.decay_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::config("patience values must be positive"));
        }
        Ok(())
    }

    /// Same run with every seed shifted by `offset`.
    pub fn reseeded(&self, offset: u64) -> Self {
        Self {
            param_seed: self.param_seed.wrapping_add(offset),
            data_seed: self.data_seed.wrapping_add(offset),
            pairing_seed: self.pairing_seed.wrapping_add(offset),
            ..self.clone()
        }
    }
}

/// Bags for every split, loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Bag>,
    pub val: Vec<Bag>,
    pub test: Vec<Bag>,
    pub manifest_hash: String,
    pub bag: BagConfig,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, bag: &BagConfig) -> Result<Self> {
        let load = |split| {
            manifest.split(split).map(|e| manifest.load(e).and_then(|v| make_bag(&v, bag))).collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            train: load(Split::Train)?,
            val: load(Split::Val)?,
            test: load(Split::Test)?,
            manifest_hash: manifest.content_hash(),
            bag: bag.clone(),
        })
    }

    pub fn split(&self, split: Split) -> &[Bag] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn train_mean_age(&self) -> f64 {
        self.train.iter().map(|b| b.age).sum::<f64>() / self.train.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossParts,
    pub val: LossParts,
    pub val_mae: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub manifest_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
    pub wall_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    /// `key=value` text; one line per epoch with space-separated fields.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "manifest_hash={}", self.manifest_hash);
        let _ = writeln!(s, "spatial_edge_mode={}", self.model.aggregator.spatial.edge_mode.as_str());
        let _ = writeln!(s, "instance_edge_mode={}", self.model.aggregator.instance.edge_mode.as_str());
        let _ = writeln!(s, "pairing_seed={}", self.train.pairing_seed);
        let _ = writeln!(s, "early_stop_monitor=train_loss");
        let _ = writeln!(s, "model_config={}", json(&self.model));
        let _ = writeln!(s, "train_config={}", json(&self.train));
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "epoch={} lr={:e} train_total={} train_mse={} train_mse0={} train_decp1={} train_decp2={} \
                 val_total={} val_mse={} val_mse0={} val_decp1={} val_decp2={} val_mae={} wall_secs={:.3}",
                e.epoch,
                e.lr,
                e.train.total,
                e.train.mse,
                e.train.mse0,
                e.train.decp1,
                e.train.decp2,
                e.val.total,
                e.val.mse,
                e.val.mse0,
                e.val.decp1,
                e.val.decp2,
                e.val_mae,
                e.wall_secs
            );
        }
        let _ = writeln!(s, "best_epoch={}", self.best_epoch);
        let _ = writeln!(s, "best_val_mae={}", self.best_val_mae);
        let _ = writeln!(s, "stopped={}", if self.stopped_early { "early" } else { "epoch_cap" });
        let _ = writeln!(s, "wall_secs={:.3}", self.wall_secs);
        if let Some(p) = &self.checkpoint {
            let _ = writeln!(s, "checkpoint={}", p.display());
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_default()
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MAE.
    pub model: Model,
    pub record: RunRecord,
}

#[derive(Default)]
struct Accum {
    sum: LossParts,
    n: usize,
}

impl Accum {
    fn add(&mut self, p: &LossParts, n: usize) {
        let w = n as f64;
        self.sum.total += w * p.total;
        self.sum.mse += w * p.mse;
        self.sum.mse0 += w * p.mse0;
        self.sum.decp1 += w * p.decp1;
        self.sum.decp2 += w * p.decp2;
        self.n += n;
    }

    fn mean(&self) -> LossParts {
        let w = 1.0 / self.n.max(1) as f64;
        LossParts {
            total: self.sum.total * w,
            mse: self.sum.mse * w,
            mse0: self.sum.mse0 * w,
            decp1: self.sum.decp1 * w,
            decp2: self.sum.decp2 * w,
        }
    }
}

/// Loss components over `bags` in inference mode, with a fixed pairing.
pub fn eval_losses(model: &Model, bags: &[Bag], batch: usize, weights: &LossWeights, seed: u64) -> Result<LossParts> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Accum::default();
    let refs: Vec<&Bag> = bags.iter().collect();
    for chunk in refs.chunks(batch.max(1)) {
        let mut ctx = Ctx::new(&model.store, false);
        let x = ctx.tape.constant(model.batch_tensor(chunk)?);
        let out = model.forward(&mut ctx, x)?;
        let ages: Vec<f64> = chunk.iter().map(|b| b.age).collect();
        let partners = draw_partners(chunk.len(), &mut rng);
        let (_, parts) = model.loss(&mut ctx.tape, &out, &ages, &partners, weights);
        acc.add(&parts, chunk.len());
    }
    Ok(acc.mean())
}

pub fn train(cfg: &TrainConfig, model_cfg: &ModelConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::config("training needs non-empty train and val splits"));
    }
    let started = Instant::now();
    let mut model = Model::new(model_cfg, data.train_mean_age(), cfg.param_seed)?;
    let mut opt = Adam::new(cfg.lr);
    let mut plateau = PlateauDecay::new(cfg.decay_factor, cfg.decay_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let mut pair_rng = ChaCha8Rng::seed_from_u64(cfg.pairing_seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let val_refs: Vec<&Bag> = data.val.iter().collect();

    let mut record = RunRecord {
        model: model_cfg.clone(),
        train: cfg.clone(),
        manifest_hash: data.manifest_hash.clone(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_mae: f64::INFINITY,
        stopped_early: false,
        wall_secs: 0.0,
        checkpoint: None,
    };
    let mut best = model.store.clone();
    let mut last_finite = model.store.clone();

    for epoch in 1..=cfg.max_epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut order_rng);
        let mut acc = Accum::default();
        for idx in order.chunks(cfg.batch_size) {
            let bags: Vec<&Bag> = idx.iter().map(|&i| &data.train[i]).collect();
            let ages: Vec<f64> = bags.iter().map(|b| b.age).collect();
            let partners = draw_partners(bags.len(), &mut pair_rng);
            let (grads, parts, bn) = {
                let mut ctx = Ctx::new(&model.store, true);
                let x = ctx.tape.constant(model.batch_tensor(&bags)?);
                let out = model.forward(&mut ctx, x)?;
                let (loss, parts) = model.loss(&mut ctx.tape, &out, &ages, &partners, &cfg.weights);
                if !parts.total.is_finite() {
                    return Err(diverged(epoch, &model, &last_finite, &mut record, &data.bag, started, out_dir));
                }
                let grads = ctx.tape.backward(loss);
                (grads, parts, ctx.take_bn_updates())
            };
            opt.step(&mut model.store, &grads);
            apply_bn_updates(&mut model.store, bn);
            acc.add(&parts, bags.len());
        }
        let train_loss = acc.mean();
        if !model.store.entries().iter().all(|e| e.value.is_finite()) {
            return Err(diverged(epoch, &model, &last_finite, &mut record, &data.bag, started, out_dir));
        }
        last_finite = model.store.clone();

        let val = eval_losses(&model, &data.val, cfg.eval_batch, &cfg.weights, cfg.pairing_seed ^ 0x5eed)?;
        let val_mae = evaluate(&model, &val_refs, cfg.eval_batch)?.mae;
        record.epochs.push(EpochRecord {
            epoch,
            lr: opt.lr,
            train: train_loss,
            val,
            val_mae,
            wall_secs: epoch_start.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: lr {:.2e} train {:.4} (mse {:.3}) val mae {:.3}",
            opt.lr,
            train_loss.total,
            train_loss.mse,
            val_mae
        );
        if val_mae < record.best_val_mae {
            record.best_val_mae = val_mae;
            record.best_epoch = epoch;
            best = model.store.clone();
        }
        opt.lr *= plateau.observe(train_loss.total);
        if stopper.observe(train_loss.total) {
            record.stopped_early = true;
            break;
        }
    }

    model.store = best;
    record.wall_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let ckpt = dir.join("checkpoint.ckpt");
        save_checkpoint(&model, &checkpoint_meta(&record, &data.bag), &ckpt)?;
        record.checkpoint = Some(ckpt);
        record.write(&dir.join("run_record.txt"))?;
    }
    Ok(TrainOutcome { model, record })
}

fn checkpoint_meta(record: &RunRecord, bag: &BagConfig) -> serde_json::Value {
    serde_json::json!({
        "epoch": record.best_epoch,
        "best_val_mae": record.best_val_mae,
        "manifest_hash": record.manifest_hash,
        "train": record.train,
        "bag": bag,
    })
}

fn diverged(
    epoch: usize,
    model: &Model,
    last_finite: &crate::params::ParamStore,
    record: &mut RunRecord,
    bag: &BagConfig,
    started: Instant,
    out_dir: Option<&Path>,
) -> Error {
    record.wall_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        let mut saved = model.clone();
        saved.store = last_finite.clone();
        let ckpt = dir.join("checkpoint_last_finite.ckpt");
        let written = std::fs::create_dir_all(dir)
            .map_err(Error::from)
            .and_then(|_| save_checkpoint(&saved, &checkpoint_meta(record, bag), &ckpt))
            .and_then(|_| {
                record.checkpoint = Some(ckpt);
                record.write(&dir.join("run_record.txt"))
            });
        if let Err(e) = written {
            log::error!("could not save last finite state: {e}");
        }
    }
    Error::Divergence { epoch, msg: "non-finite loss or parameters".into() }
}
