//! Module ablations: the full model against variants with the aggregators
//! replaced by average pooling and/or the decoupling branch removed.

use std::fmt::Write as _;
use std::path::Path;

use crate::bagging::Bag;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::{Ablation, ModelConfig};
use crate::train::{train, Dataset, RunRecord, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// No spatial aggregator, no instance aggregator, no decoupling.
    WithoutAll,
    /// No spatial aggregator, no decoupling.
    WithoutSpatialDisentangle,
    WithoutDisentangle,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::WithoutAll, Variant::WithoutSpatialDisentangle, Variant::WithoutDisentangle, Variant::Full];

    pub fn ablation(self) -> Ablation {
        match self {
            Variant::WithoutAll => Ablation { spatial: false, instance: false, disentangle: false },
            Variant::WithoutSpatialDisentangle => Ablation { spatial: false, instance: true, disentangle: false },
            Variant::WithoutDisentangle => Ablation { spatial: true, instance: true, disentangle: false },
            Variant::Full => Ablation::FULL,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::WithoutAll => "wo-all",
            Variant::WithoutSpatialDisentangle => "wo-spatial-dis",
            Variant::WithoutDisentangle => "wo-dis",
            Variant::Full => "full",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?} (expected wo-all|wo-spatial-dis|wo-dis|full)")))
    }
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed_offset: u64,
    pub record: RunRecord,
    pub test: EvalReport,
    pub aggregator_params: usize,
}

/// Trains every variant for every seed offset on the same data and reports
/// test metrics. Runs of one seed share all seeds across variants.
pub fn ablate(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &Dataset,
    variants: &[Variant],
    seed_offsets: &[u64],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRun>> {
    if data.test.is_empty() {
        return Err(Error::config("ablation needs a non-empty test split"));
    }
    let test: Vec<&Bag> = data.test.iter().collect();
    let mut runs = Vec::new();
    for &seed in seed_offsets {
        for &variant in variants {
            let cfg = train_cfg.reseeded(seed);
            let mcfg = model_cfg.clone().with_ablation(variant.ablation());
            let dir = out_dir.map(|d| d.join(format!("{}_seed{seed}", variant.as_str())));
            let outcome = train(&cfg, &mcfg, data, dir.as_deref())?;
            let report = evaluate(&outcome.model, &test, cfg.eval_batch)?;
            log::info!("ablation {} seed {seed}: test mae {:.3}", variant.as_str(), report.mae);
            runs.push(AblationRun {
                variant,
                seed_offset: seed,
                aggregator_params: outcome.model.aggregator_param_count(),
                record: outcome.record,
                test: report,
            });
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), ablation_csv(&runs))?;
    }
    Ok(runs)
}

pub fn ablation_csv(runs: &[AblationRun]) -> String {
    let mut s = String::from("variant,seed,epochs,best_epoch,val_mae,test_mae,test_rmse,test_pcc,aggregator_params\n");
    for r in runs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.variant.as_str(),
            r.seed_offset,
            r.record.epochs.len(),
            r.record.best_epoch,
            r.record.best_val_mae,
            r.test.mae,
            r.test.rmse,
            r.test.pcc,
            r.aggregator_params
        );
    }
    s
}
