//! Score- and label-level metrics: ROC/AUC, F1, and the effective
//! (detection-penalized) fidelity scores.

use crate::error::{LabError, Result};

/// Area under the ROC curve by the trapezoidal rule, with tied scores
/// grouped into single threshold steps. Invariant under strictly monotone
/// transformations of the scores.
pub fn roc_auc(scores: &[f32], labels: &[bool]) -> Result<f32> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(LabError::Invalid(format!(
            "auc needs matched nonempty scores/labels, got {}/{}",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(LabError::Invalid("auc needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut auc = 0.0f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        // consume the whole tie group at this threshold
        let here = scores[order[i]];
        while i < order.len() && scores[order[i]] == here {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(auc as f32)
}

/// F1 of the positive class.
pub fn f1_score(predictions: &[bool], labels: &[bool]) -> Result<f32> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(LabError::Invalid("f1 needs matched nonempty inputs".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in predictions.iter().zip(labels.iter()) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f32 / (2.0 * tp as f32 + fp as f32 + fn_ as f32))
}

/// Fidelity metrics penalized by residual concept detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveMetrics {
    /// `lpips / (1 - ddr)`; undefined when every output still shows the
    /// concept (`ddr = 1`).
    pub eff_lpips: Option<f32>,
    /// `(1 - ddr) * ssim`.
    pub eff_ssim: f32,
    /// `(1 - ddr) * psnr`.
    pub eff_psnr: f32,
}

pub fn effective_metrics(
    raw_lpips_proxy: f32,
    raw_ssim: f32,
    raw_psnr: f32,
    ddr: f32,
) -> Result<EffectiveMetrics> {
    if !(0.0..=1.0).contains(&ddr) {
        return Err(LabError::Invalid(format!("ddr {ddr} outside [0, 1]")));
    }
    let keep = 1.0 - ddr;
    Ok(EffectiveMetrics {
        eff_lpips: if keep == 0.0 { None } else { Some(raw_lpips_proxy / keep) },
        eff_ssim: keep * raw_ssim,
        eff_psnr: keep * raw_psnr,
    })
}

/// Mean and (population) standard deviation.
pub fn mean_sd(values: &[f32]) -> (f32, f32) {
    let n = values.len() as f32;
    let mean = values.iter().sum::<f32>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use steerlab_nn::Rng;

    #[test]
    fn perfectly_separated_scores_give_auc_one() {
        let scores = vec![0.9, 0.8, 0.7, 0.2, 0.1];
        let labels = vec![true, true, true, false, false];
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&scores, &labels.iter().map(|l| !l).collect::<Vec<_>>()).unwrap(), 0.0);
    }

    #[test]
    fn shuffled_labels_give_auc_near_half() {
        let mut rng = Rng::new(5, 0);
        let n = 4000;
        let scores: Vec<f32> = (0..n).map(|_| rng.uniform_f64() as f32).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 0.05, "auc {auc}");
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = Rng::new(9, 0);
        let scores: Vec<f32> = (0..200).map(|_| rng.uniform_f64() as f32).collect();
        let labels: Vec<bool> = (0..200).map(|_| rng.below(3) == 0).collect();
        let a = roc_auc(&scores, &labels).unwrap();
        let squashed: Vec<f32> = scores.iter().map(|&s| (4.0 * s - 1.0).tanh()).collect();
        let b = roc_auc(&squashed, &labels).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn auc_handles_ties() {
        // all scores equal: the ROC is the diagonal
        let scores = vec![0.5; 6];
        let labels = vec![true, false, true, false, true, false];
        assert!((roc_auc(&scores, &labels).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn f1_basics() {
        let preds = vec![true, true, false, false];
        let labels = vec![true, false, true, false];
        assert!((f1_score(&preds, &labels).unwrap() - 0.5).abs() < 1e-6);
        assert_eq!(f1_score(&[false, false], &[true, true]).unwrap(), 0.0);
    }

    #[test]
    fn effective_metrics_formulas() {
        let e = effective_metrics(0.2, 0.9, 20.0, 0.0).unwrap();
        assert_eq!(e.eff_lpips, Some(0.2));
        assert_eq!(e.eff_ssim, 0.9);
        assert_eq!(e.eff_psnr, 20.0);

        // reconstructed from the published dye row: 0.87787 * (1 - 0.25)
        let e = effective_metrics(0.152, 0.87787, 20.76, 0.25).unwrap();
        assert!((e.eff_ssim - 0.6584).abs() < 1e-4);

        let e = effective_metrics(0.3, 0.8, 15.0, 1.0).unwrap();
        assert_eq!(e.eff_lpips, None);
        assert_eq!(e.eff_ssim, 0.0);
        assert_eq!(e.eff_psnr, 0.0);

        assert!(effective_metrics(0.1, 0.5, 10.0, 1.5).is_err());
        assert!(effective_metrics(0.1, 0.5, 10.0, -0.1).is_err());
    }

    #[test]
    fn effective_metrics_monotone_in_ddr() {
        let mut prev = effective_metrics(0.2, 0.9, 20.0, 0.0).unwrap();
        for i in 1..100 {
            let ddr = i as f32 / 101.0;
            let e = effective_metrics(0.2, 0.9, 20.0, ddr).unwrap();
            assert!(e.eff_ssim < prev.eff_ssim);
            assert!(e.eff_psnr < prev.eff_psnr);
            assert!(e.eff_lpips.unwrap() > prev.eff_lpips.unwrap());
            prev = e;
        }
    }
}
