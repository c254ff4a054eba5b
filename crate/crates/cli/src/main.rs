//! `dgamil`: phantom synthesis, bagging, training, evaluation, attention
//! export, ablations and σ-profiles.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use dgamil_core::ablate::{ablate, Variant};
use dgamil_core::bagging::{make_bag, write_bag, BagConfig, Normalization};
use dgamil_core::checkpoint::load_checkpoint;
use dgamil_core::eval::{attention_records, evaluate, localization_rate, sigma_csv, write_attention, EvalReport};
use dgamil_core::gat::EdgeMode;
use dgamil_core::disentangle::Decp2Pairing;
use dgamil_core::model::{LossWeights, ModelConfig};
use dgamil_core::train::{train, Dataset, TrainConfig};
use dgamil_core::volume::{synth_dataset, DatasetManifest, GeneratorConfig, Split, SplitFractions};
use dgamil_core::Error;

#[derive(Parser, Debug)]
#[command(name = "dgamil", version, about = "Bag-of-slices brain-age regression with dual graph-attention pooling")]
struct Cli {
    /// Root for outputs of commands run without --out.
    #[arg(long, env = "DGAMIL_OUT", default_value = "runs", global = true)]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a phantom dataset: one volume per subject plus a manifest.
    Synth(SynthArgs),
    /// Cut every volume of a manifest into a bag file.
    Bag(BagArgs),
    /// Train a model; writes a checkpoint and a run record.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Export instance scores and spatial maps for one split.
    Attention(AttentionArgs),
    /// Train the ablation variants over several seeds.
    Ablate(AblateArgs),
    /// σ per true-age bin from a predictions CSV.
    Sigma(SigmaArgs),
}

fn list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',').map(|t| t.trim().parse::<T>().map_err(|e| format!("{t:?}: {e}"))).collect()
}

fn shape3(s: &str) -> Result<[usize; 3], String> {
    list::<usize>(s)?.try_into().map_err(|_| "expected DX,DY,DZ".to_string())
}

fn fractions(s: &str) -> Result<SplitFractions, String> {
    let v = list::<f64>(s)?;
    match v[..] {
        [a, b, c] => Ok(SplitFractions::new(a, b, c)),
        _ => Err("expected TRAIN,VAL,TEST".into()),
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, value_parser = shape3, default_value = "24,48,24")]
    shape: [usize; 3],
    #[arg(long, default_value_t = 44.0)]
    age_min: f64,
    #[arg(long, default_value_t = 82.0)]
    age_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise std as a fraction of the template's dynamic range.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    axis: usize,
    /// Slices per instance; the signal slab is aligned to it.
    #[arg(long, default_value_t = 3)]
    m: usize,
    /// Intensity multiplier inside the signal region.
    #[arg(long, default_value_t = 0.6)]
    contrast: f64,
    /// Peak amplitude of each per-subject perturbation blob.
    #[arg(long, default_value_t = 0.3)]
    perturbation: f64,
    #[arg(long, default_value_t = 6)]
    blobs: usize,
    #[arg(long, value_parser = fractions, default_value = "0.7,0.1,0.2")]
    split: SplitFractions,
}

#[derive(Args, Debug, Clone)]
struct BagFlags {
    /// Slices per instance.
    #[arg(long, default_value_t = 3)]
    m: usize,
    /// Instances per bag (default: as many as fit).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 1)]
    axis: usize,
    #[arg(long, default_value = "zscore-nonzero")]
    norm: String,
    #[arg(long, default_value_t = 1)]
    pad_multiple: usize,
    /// Crop to the nonzero bounding box before bagging.
    #[arg(long)]
    crop: bool,
}

impl BagFlags {
    fn config(&self) -> anyhow::Result<BagConfig> {
        let norm: Normalization = self.norm.parse()?;
        let cfg = BagConfig { m: self.m, k: self.k, axis: self.axis, norm, pad_multiple: self.pad_multiple, crop: self.crop };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct BagArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    bag: BagFlags,
}

#[derive(Args, Debug, Clone)]
struct ModelFlags {
    /// Backbone stage widths; the instance size must be divisible by 2^stages.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    channels: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    blocks_per_stage: usize,
    #[arg(long, default_value_t = 2)]
    post_blocks: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    /// Similarity-selected incoming edges per node.
    #[arg(long, default_value_t = 8)]
    n_edges: usize,
    #[arg(long, default_value = "lowest")]
    edge_mode: String,
    #[arg(long, default_value_t = 32)]
    head_hidden: usize,
    /// Replace the spatial aggregator by global average pooling.
    #[arg(long)]
    no_spatial: bool,
    /// Replace the instance aggregator by the mean over instances.
    #[arg(long)]
    no_instance: bool,
    #[arg(long)]
    no_disentangle: bool,
    #[arg(long, default_value = "same-index")]
    decp2_pairing: String,
    #[arg(long)]
    decp2_squared: bool,
}

impl ModelFlags {
    /// Model config fitted to the bags of `data`.
    fn config(&self, data: &Dataset) -> anyhow::Result<ModelConfig> {
        let first = data.train.first().ok_or_else(|| Error::Config("empty train split".into()))?;
        let edge_mode: EdgeMode = self.edge_mode.parse().map_err(Error::Config)?;
        let decp2_pairing = match self.decp2_pairing.as_str() {
            "same-index" => Decp2Pairing::SameIndex,
            "random-partner" => Decp2Pairing::RandomPartner,
            other => return Err(Error::Config(format!("unknown pairing {other:?} (expected same-index|random-partner)")).into()),
        };
        let mut cfg = ModelConfig {
            bag_size: first.k,
            input_size: [first.height, first.width],
            head_hidden: self.head_hidden,
            use_disentangle: !self.no_disentangle,
            decp2_pairing,
            decp2_squared: self.decp2_squared,
            ..Default::default()
        };
        cfg.backbone.channels = self.channels.clone();
        cfg.backbone.blocks_per_stage = self.blocks_per_stage;
        cfg.backbone.post_blocks = self.post_blocks;
        cfg.backbone.in_channels = first.m;
        for g in [&mut cfg.aggregator.spatial, &mut cfg.aggregator.instance] {
            g.heads = self.heads;
            g.n_edges = self.n_edges;
            g.edge_mode = edge_mode;
        }
        cfg.aggregator.use_spatial = !self.no_spatial;
        cfg.aggregator.use_instance = !self.no_instance;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lambda_mse0: f64,
    #[arg(long, default_value_t = 0.05)]
    lambda_decp1: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_decp2: f64,
    #[arg(long, default_value_t = 0.8)]
    decay_factor: f64,
    #[arg(long, default_value_t = 5)]
    decay_patience: usize,
    #[arg(long, default_value_t = 40)]
    max_epochs: usize,
    #[arg(long, default_value_t = 20)]
    early_stop_patience: usize,
    #[arg(long, default_value_t = 0)]
    param_seed: u64,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    #[arg(long, default_value_t = 2)]
    pairing_seed: u64,
    #[arg(long, default_value_t = 16)]
    eval_batch: usize,
}

impl TrainFlags {
    fn config(&self) -> anyhow::Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            weights: LossWeights { mse0: self.lambda_mse0, decp1: self.lambda_decp1, decp2: self.lambda_decp2 },
            decay_factor: self.decay_factor,
            decay_patience: self.decay_patience,
            max_epochs: self.max_epochs,
            early_stop_patience: self.early_stop_patience,
            param_seed: self.param_seed,
            data_seed: self.data_seed,
            pairing_seed: self.pairing_seed,
            eval_batch: self.eval_batch,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    bag: BagFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Also write σ per age bin of this width.
    #[arg(long, default_value_t = 5.0)]
    bin_width: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Report how often this many top-scoring instances fall in the signal slab.
    #[arg(long, default_value_t = 2)]
    top: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "wo-all,wo-spatial-dis,wo-dis,full")]
    variants: Vec<String>,
    /// Seed offsets added to every seed of the base configuration.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[command(flatten)]
    bag: BagFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct SigmaArgs {
    /// Predictions CSV written by `eval`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    bin_width: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn out_dir(explicit: &Option<PathBuf>, root: &Path, name: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| root.join(name))
}

fn load_data(manifest: &Path, bag: &BagConfig) -> anyhow::Result<Dataset> {
    let m = DatasetManifest::read(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    Ok(Dataset::load(&m, bag)?)
}

fn bag_config_from(meta: &serde_json::Value) -> anyhow::Result<BagConfig> {
    match meta.get("bag") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| anyhow!(Error::Config(format!("checkpoint bag config: {e}")))),
        None => Ok(BagConfig::default()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let dir = out_dir(&a.out, &cli.out_root, "synth");
            let cfg = GeneratorConfig {
                shape: a.shape,
                axis: a.axis,
                instance_size: a.m,
                age_min: a.age_min,
                age_max: a.age_max,
                noise: a.noise,
                perturbation: a.perturbation,
                perturbation_blobs: a.blobs,
                signal_contrast: a.contrast,
                ..Default::default()
            };
            let manifest = synth_dataset(&cfg, a.n, a.split, a.seed, &dir)?;
            println!(
                "wrote {} subjects ({} train / {} val / {} test) to {}",
                manifest.entries.len(),
                manifest.split_len(Split::Train),
                manifest.split_len(Split::Val),
                manifest.split_len(Split::Test),
                dir.display()
            );
        }
        Command::Bag(a) => {
            let cfg = a.bag.config()?;
            let dir = out_dir(&a.out, &cli.out_root, "bags");
            let manifest = DatasetManifest::read(&a.manifest)?;
            std::fs::create_dir_all(&dir)?;
            let mut index = String::from("bag\tsplit\tage\n");
            for entry in &manifest.entries {
                let bag = make_bag(&manifest.load(entry)?, &cfg)?;
                let stem = entry.path.file_stem().and_then(|s| s.to_str()).unwrap_or("subject");
                let name = format!("{stem}.bag");
                write_bag(&bag, &dir.join(&name))?;
                index.push_str(&format!("{name}\t{}\t{}\n", entry.split.as_str(), entry.age));
            }
            std::fs::write(dir.join("bags.tsv"), index)?;
            println!("wrote {} bags to {}", manifest.entries.len(), dir.display());
        }
        Command::Train(a) => {
            let data = load_data(&a.manifest, &a.bag.config()?)?;
            let model_cfg = a.model.config(&data)?;
            let train_cfg = a.train.config()?;
            let dir = out_dir(&a.out, &cli.out_root, "train");
            let outcome = train(&train_cfg, &model_cfg, &data, Some(&dir))?;
            println!(
                "best epoch {} of {}: val MAE {:.3}; checkpoint {}",
                outcome.record.best_epoch,
                outcome.record.epochs.len(),
                outcome.record.best_val_mae,
                dir.join("checkpoint.ckpt").display()
            );
        }
        Command::Eval(a) => {
            let (model, meta) = load_checkpoint(&a.checkpoint)?;
            let split: Split = a.split.parse()?;
            let data = load_data(&a.manifest, &bag_config_from(&meta)?)?;
            let bags: Vec<_> = data.split(split).iter().collect();
            let report = evaluate(&model, &bags, a.batch)?;
            let dir = out_dir(&a.out, &cli.out_root, "eval");
            report.write(&dir, split.as_str())?;
            std::fs::write(dir.join(format!("{}_sigma.csv", split.as_str())), sigma_csv(&report.sigma_profile(a.bin_width)?))?;
            println!(
                "{} subjects: MAE {:.3} RMSE {:.3} PCC {:.4} (fit slope {:.3}, intercept {:.3})",
                report.subjects.len(),
                report.mae,
                report.rmse,
                report.pcc,
                report.slope,
                report.intercept
            );
        }
        Command::Attention(a) => {
            let (model, meta) = load_checkpoint(&a.checkpoint)?;
            let split: Split = a.split.parse()?;
            let data = load_data(&a.manifest, &bag_config_from(&meta)?)?;
            let bags: Vec<_> = data.split(split).iter().collect();
            let records = attention_records(&model, &bags, a.batch)?;
            let dir = out_dir(&a.out, &cli.out_root, "attention");
            write_attention(&records, &dir)?;
            println!(
                "{} bags; top-{} inside signal slab for {:.1}%; wrote {}",
                records.len(),
                a.top,
                100.0 * localization_rate(&records, a.top),
                dir.join("attention.att").display()
            );
        }
        Command::Ablate(a) => {
            let data = load_data(&a.manifest, &a.bag.config()?)?;
            let model_cfg = a.model.config(&data)?;
            let train_cfg = a.train.config()?;
            let variants = a.variants.iter().map(|v| v.parse::<Variant>()).collect::<Result<Vec<_>, _>>()?;
            let dir = out_dir(&a.out, &cli.out_root, "ablate");
            let runs = ablate(&train_cfg, &model_cfg, &data, &variants, &a.seeds, Some(&dir))?;
            for v in &variants {
                let maes: Vec<f64> = runs.iter().filter(|r| r.variant == *v).map(|r| r.test.mae).collect();
                println!("{:<15} mean test MAE {:.3} over {} seeds", v.as_str(), maes.iter().sum::<f64>() / maes.len() as f64, maes.len());
            }
            println!("wrote {}", dir.join("ablation.csv").display());
        }
        Command::Sigma(a) => {
            let report = EvalReport::read_predictions(&a.predictions)?;
            let bins = report.sigma_profile(a.bin_width)?;
            let dir = out_dir(&a.out, &cli.out_root, "sigma");
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("sigma.csv"), sigma_csv(&bins))?;
            println!("{} bins; wrote {}", bins.len(), dir.join("sigma.csv").display());
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Divergence { .. }) => 3,
        Some(Error::Config(_) | Error::Shape { .. } | Error::Degenerate(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
