//! Regression metrics and the per-age-bin spread profile.

use crate::error::{Error, Result};

pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    (pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64).sqrt()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson correlation; 0 when either side is constant.
pub fn pcc(pred: &[f64], truth: &[f64]) -> f64 {
    let (mp, mt) = (mean(pred), mean(truth));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        sxy += (p - mp) * (t - mt);
        sxx += (p - mp) * (p - mp);
        syy += (t - mt) * (t - mt);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Least-squares line `pred ≈ slope · truth + intercept`.
pub fn regression_line(pred: &[f64], truth: &[f64]) -> (f64, f64) {
    let (mp, mt) = (mean(pred), mean(truth));
    let sxy: f64 = pred.iter().zip(truth).map(|(p, t)| (p - mp) * (t - mt)).sum();
    let sxx: f64 = truth.iter().map(|t| (t - mt) * (t - mt)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    (slope, mp - slope * mt)
}

/// Sample standard deviation (n − 1); `None` below two values.
pub fn sample_std(x: &[f64]) -> Option<f64> {
    if x.len() < 2 {
        return None;
    }
    let m = mean(x);
    Some((x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigmaBin {
    /// Inclusive lower edge.
    pub lo: f64,
    /// Exclusive upper edge.
    pub hi: f64,
    pub count: usize,
    pub sigma_pred: Option<f64>,
    pub sigma_error: Option<f64>,
}

/// Groups subjects into true-age bins `[lo, lo + width)` aligned to multiples of
/// `width` and reports the spread of predictions and of errors in each.
pub fn sigma_profile(truth: &[f64], pred: &[f64], width: f64) -> Result<Vec<SigmaBin>> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::config(format!("bin width must be positive, got {width}")));
    }
    if truth.len() != pred.len() {
        return Err(Error::shape(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Ok(Vec::new());
    }
    let bin = |t: f64| (t / width).floor() as i64;
    let first = truth.iter().map(|&t| bin(t)).min().unwrap_or(0);
    let last = truth.iter().map(|&t| bin(t)).max().unwrap_or(0);
    Ok((first..=last)
        .map(|b| {
            let members: Vec<usize> = (0..truth.len()).filter(|&i| bin(truth[i]) == b).collect();
            let p: Vec<f64> = members.iter().map(|&i| pred[i]).collect();
            let e: Vec<f64> = members.iter().map(|&i| pred[i] - truth[i]).collect();
            SigmaBin {
                lo: b as f64 * width,
                hi: (b + 1) as f64 * width,
                count: members.len(),
                sigma_pred: sample_std(&p),
                sigma_error: sample_std(&e),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_predictions() {
        let y = [50.0, 60.0, 71.0];
        assert_eq!(mae(&y, &y), 0.0);
        assert_eq!(rmse(&y, &y), 0.0);
        assert!((pcc(&y, &y) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_absolute_errors() {
        let (p, t) = ([62.0, 68.0], [60.0, 70.0]);
        assert_eq!(mae(&p, &t), 2.0);
        assert_eq!(rmse(&p, &t), 2.0);
    }

    #[test]
    fn sigma_examples() {
        let bins = sigma_profile(&[60.5, 61.0, 62.0], &[1.0, 3.0, 9.0], 2.0).unwrap();
        assert_eq!(bins.len(), 2);
        assert!((bins[0].sigma_pred.unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(bins[1].sigma_pred, None);
        let flat = sigma_profile(&[60.0, 61.0], &[5.0, 5.0], 5.0).unwrap();
        assert_eq!(flat[0].sigma_pred, Some(0.0));
    }

    #[test]
    fn line_fit() {
        let t = [1.0, 2.0, 3.0];
        let p = [3.0, 5.0, 7.0];
        let (s, i) = regression_line(&p, &t);
        assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12);
    }
}
