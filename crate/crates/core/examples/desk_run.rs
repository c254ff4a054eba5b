//! End-to-end run on a freshly synthesized phantom set. Knobs via env vars:
//! LR, EPOCHS, N, SEED, RUNSEED, VARIANT, CONTRAST, NOISE, PERT, BLOBS.

use dgamil_core::bagging::BagConfig;
use dgamil_core::eval::{attention_records, evaluate, localization_rate};
use dgamil_core::metrics::sample_std;
use dgamil_core::ablate::Variant;
use dgamil_core::model::ModelConfig;
use dgamil_core::train::{train, Dataset, TrainConfig};
use dgamil_core::volume::{synth_dataset, DatasetManifest, GeneratorConfig, SplitFractions};

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() -> dgamil_core::Result<()> {
    env_logger::init();
    let dir = tempfile::tempdir()?;
    let gen = GeneratorConfig {
        signal_contrast: env("CONTRAST", 0.6),
        noise: env("NOISE", 0.1),
        perturbation: env("PERT", 0.3),
        perturbation_blobs: env("BLOBS", 6usize),
        ..Default::default()
    };
    let n = env("N", 200usize);
    let manifest: DatasetManifest = synth_dataset(&gen, n, SplitFractions::new(0.7, 0.1, 0.2), env("SEED", 7u64), dir.path())?;
    let data = Dataset::load(&manifest, &BagConfig::default())?;
    let variant: Variant = std::env::var("VARIANT").unwrap_or("full".into()).parse()?;
    let mcfg = ModelConfig::default().with_ablation(variant.ablation());
    let tcfg = TrainConfig { lr: env("LR", 1e-3), max_epochs: env("EPOCHS", 40usize), ..Default::default() }.reseeded(env("RUNSEED", 0u64));
    let t = std::time::Instant::now();
    let out = train(&tcfg, &mcfg, &data, None)?;
    let test: Vec<_> = data.test.iter().collect();
    let rep = evaluate(&out.model, &test, 16)?;
    let ages: Vec<f64> = test.iter().map(|b| b.age).collect();
    let recs = attention_records(&out.model, &test, 16)?;
    println!(
        "secs {:.1} epochs {} mae {:.3} std {:.3} pcc {:.3} loc2 {:.3}",
        t.elapsed().as_secs_f64(),
        out.record.epochs.len(),
        rep.mae,
        sample_std(&ages).unwrap_or(0.0),
        rep.pcc,
        localization_rate(&recs, 2)
    );
    Ok(())
}
