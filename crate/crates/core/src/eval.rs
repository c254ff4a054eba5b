//! Evaluation reports and attention export.

use std::fmt::Write as _;
use std::path::Path;

use crate::bagging::Bag;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::metrics::{mae, pcc, regression_line, rmse, sigma_profile, SigmaBin};
use crate::model::Model;
use crate::nn::Ctx;

pub const ATTENTION_MAGIC: &str = "DGAATT1";

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectPrediction {
    pub subject_id: u64,
    pub age: f64,
    pub pred: f64,
}

impl SubjectPrediction {
    pub fn error(&self) -> f64 {
        self.pred - self.age
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub pcc: f64,
    /// Fit of predicted on true age.
    pub slope: f64,
    pub intercept: f64,
    pub subjects: Vec<SubjectPrediction>,
}

impl EvalReport {
    pub fn from_predictions(subjects: Vec<SubjectPrediction>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::config("cannot evaluate an empty split"));
        }
        let truth: Vec<f64> = subjects.iter().map(|s| s.age).collect();
        let pred: Vec<f64> = subjects.iter().map(|s| s.pred).collect();
        let (slope, intercept) = regression_line(&pred, &truth);
        Ok(Self { mae: mae(&pred, &truth), rmse: rmse(&pred, &truth), pcc: pcc(&pred, &truth), slope, intercept, subjects })
    }

    pub fn truth(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.age).collect()
    }

    pub fn predictions(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.pred).collect()
    }

    pub fn sigma_profile(&self, bin_width: f64) -> Result<Vec<SigmaBin>> {
        sigma_profile(&self.truth(), &self.predictions(), bin_width)
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "n,mae,rmse,pcc,slope,intercept\n{},{},{},{},{},{}\n",
            self.subjects.len(),
            self.mae,
            self.rmse,
            self.pcc,
            self.slope,
            self.intercept
        )
    }

    pub fn predictions_csv(&self) -> String {
        let mut s = String::from("subject_id,age,pred,error\n");
        for p in &self.subjects {
            let _ = writeln!(s, "{},{},{},{}", p.subject_id, p.age, p.pred, p.error());
        }
        s
    }

    /// Writes `<prefix>_summary.csv` and `<prefix>_predictions.csv` into `dir`.
    pub fn write(&self, dir: &Path, prefix: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{prefix}_summary.csv")), self.summary_csv())?;
        std::fs::write(dir.join(format!("{prefix}_predictions.csv")), self.predictions_csv())?;
        Ok(())
    }

    /// Parses a predictions CSV as written by [`EvalReport::predictions_csv`].
    pub fn read_predictions(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut subjects = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 3 {
                return Err(Error::format("predictions", format!("line {}: expected subject_id,age,pred", i + 1)));
            }
            let f = |s: &str| s.parse::<f64>().map_err(|e| Error::format("predictions", format!("line {}: {e}", i + 1)));
            subjects.push(SubjectPrediction {
                subject_id: cols[0].parse().map_err(|_| Error::format("predictions", format!("line {}: bad id", i + 1)))?,
                age: f(cols[1])?,
                pred: f(cols[2])?,
            });
        }
        Self::from_predictions(subjects)
    }
}

pub fn sigma_csv(bins: &[SigmaBin]) -> String {
    let opt = |v: Option<f64>| v.map_or("null".to_string(), |x| x.to_string());
    let mut s = String::from("age_lo,age_hi,count,sigma_pred,sigma_error\n");
    for b in bins {
        let _ = writeln!(s, "{},{},{},{},{}", b.lo, b.hi, b.count, opt(b.sigma_pred), opt(b.sigma_error));
    }
    s
}

/// Inference-mode predictions and metrics for `bags`.
pub fn evaluate(model: &Model, bags: &[&Bag], batch: usize) -> Result<EvalReport> {
    let preds = model.predict(bags, batch)?;
    let subjects = bags
        .iter()
        .zip(preds)
        .map(|(b, pred)| SubjectPrediction { subject_id: b.subject_id, age: b.age, pred })
        .collect();
    EvalReport::from_predictions(subjects)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub subject_id: u64,
    pub age: f64,
    pub pred: f64,
    /// One score per instance, summing to one.
    pub instance_scores: Vec<f64>,
    /// `[K, h, w]` spatial score maps, each summing to one.
    pub spatial_maps: Vec<f64>,
    pub map_size: [usize; 2],
    pub signal_instances: Option<(usize, usize)>,
}

impl AttentionRecord {
    /// Instance indices by descending score (ties by index).
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.instance_scores.len()).collect();
        idx.sort_by(|&a, &b| self.instance_scores[b].total_cmp(&self.instance_scores[a]).then(a.cmp(&b)));
        idx
    }

    /// Whether all of the `top` highest-scoring instances lie in the signal range.
    pub fn top_in_signal(&self, top: usize) -> Option<bool> {
        let (a, b) = self.signal_instances?;
        Some(self.ranking().iter().take(top).all(|&j| j >= a && j <= b))
    }
}

pub fn attention_records(model: &Model, bags: &[&Bag], batch: usize) -> Result<Vec<AttentionRecord>> {
    let k = model.cfg.bag_size;
    let size = model.feature_size();
    let p = size[0] * size[1];
    let mut out = Vec::with_capacity(bags.len());
    for chunk in bags.chunks(batch.max(1)) {
        let mut ctx = Ctx::new(&model.store, false);
        let x = ctx.tape.constant(model.batch_tensor(chunk)?);
        let fw = model.forward(&mut ctx, x)?;
        let scores = ctx.value(fw.instance_scores).data();
        let maps = ctx.value(fw.spatial_maps).data();
        let preds = ctx.value(fw.pred).data();
        for (i, bag) in chunk.iter().enumerate() {
            out.push(AttentionRecord {
                subject_id: bag.subject_id,
                age: bag.age,
                pred: preds[i],
                instance_scores: scores[i * k..(i + 1) * k].to_vec(),
                spatial_maps: maps[i * k * p..(i + 1) * k * p].to_vec(),
                map_size: size,
                signal_instances: bag.signal_instances,
            });
        }
    }
    Ok(out)
}

/// Fraction of records whose `top` highest-scoring instances all lie in the
/// planted signal range; records without signal metadata are skipped.
pub fn localization_rate(records: &[AttentionRecord], top: usize) -> f64 {
    let hits: Vec<bool> = records.iter().filter_map(|r| r.top_in_signal(top)).collect();
    hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64
}

/// Writes `attention.att` (scores and maps) and `attention.csv` into `dir`.
pub fn write_attention(records: &[AttentionRecord], dir: &Path) -> Result<()> {
    let Some(first) = records.first() else {
        return Err(Error::config("no attention records to write"));
    };
    std::fs::create_dir_all(dir)?;
    let k = first.instance_scores.len();
    let [h, w] = first.map_size;
    let mut payload = Vec::with_capacity(records.len() * k * (1 + h * w));
    for r in records {
        payload.extend(r.instance_scores.iter().map(|&v| v as f32));
    }
    for r in records {
        payload.extend(r.spatial_maps.iter().map(|&v| v as f32));
    }
    // scores block [B, K] followed by maps block [B, K, h, w]
    Container::new(ATTENTION_MAGIC, vec![payload.len()], payload)
        .with("bags", records.len())
        .with("instances", k)
        .with("map_h", h)
        .with("map_w", w)
        .with("layout", "scores[B,K];maps[B,K,h,w]")
        .write(&dir.join("attention.att"))?;

    let mut csv = String::from("subject_id,age,pred,signal_first,signal_last,top1,top2");
    for j in 0..k {
        let _ = write!(csv, ",s{j}");
    }
    csv.push('\n');
    for r in records {
        let (a, b) = r.signal_instances.map_or(("".to_string(), "".to_string()), |(a, b)| (a.to_string(), b.to_string()));
        let rank = r.ranking();
        let _ = write!(csv, "{},{},{},{a},{b},{},{}", r.subject_id, r.age, r.pred, rank[0], rank.get(1).copied().unwrap_or(rank[0]));
        for s in &r.instance_scores {
            let _ = write!(csv, ",{s}");
        }
        csv.push('\n');
    }
    std::fs::write(dir.join("attention.csv"), csv)?;
    Ok(())
}

/// Reads back `attention.att`: per-bag instance scores and spatial maps.
pub fn read_attention(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let c = Container::read(path, ATTENTION_MAGIC)?;
    let b: usize = c.parse_field("bags")?;
    let k: usize = c.parse_field("instances")?;
    let p = c.parse_field::<usize>("map_h")? * c.parse_field::<usize>("map_w")?;
    if c.payload.len() != b * k * (1 + p) {
        return Err(Error::format("shape", "payload does not match bags x instances x map size"));
    }
    let (s, m) = c.payload.split_at(b * k);
    let scores = s.chunks(k).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let maps = m.chunks(k * p).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    Ok((scores, maps))
}
