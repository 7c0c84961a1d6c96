//! Tracking metrics.
//!
//! * `P`: percentage of frames whose center location error is below 20 px.
//! * `P_norm`: center error normalized by the ground-truth box size; the
//!   success curve over thresholds in `[0, 0.5]` is integrated and scaled by
//!   200 so a perfect tracker scores 100.
//! * `AUC`: success rate `IoU > t` averaged over the 21 thresholds
//!   `t = 0, 0.05, …, 1`. Because the comparison is strict, even perfect
//!   boxes fail at `t = 1`, capping the score at `2000/21 ≈ 95.24`.

use crate::error::{contract, Result};
use crate::motion::BoundingBox;

pub const P_THRESHOLD_PX: f64 = 20.0;
pub const PNORM_MAX: f64 = 0.5;
pub const AUC_STEPS: usize = 20;

/// Highest AUC any tracker can reach under the strict-inequality rule.
pub const AUC_CEILING: f64 = 100.0 * AUC_STEPS as f64 / (AUC_STEPS + 1) as f64;

pub fn center_error(pred: (f64, f64), gt: (f64, f64)) -> f64 {
    ((pred.0 - gt.0).powi(2) + (pred.1 - gt.1).powi(2)).sqrt()
}

/// Percentage of frames with center error below `threshold` pixels.
pub fn metric_p(pred: &[(f64, f64)], gt: &[(f64, f64)], threshold: f64) -> Result<f64> {
    contract!(!pred.is_empty(), "precision of an empty sequence");
    contract!(pred.len() == gt.len(), "{} predictions for {} frames", pred.len(), gt.len());
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| center_error(**p, **g) < threshold)
        .count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Size-normalized center error `‖(Δx/w, Δy/h)‖`.
pub fn normalized_error(pred: (f64, f64), gt: &BoundingBox) -> f64 {
    let (gx, gy) = gt.center();
    (((pred.0 - gx) / gt.w).powi(2) + ((pred.1 - gy) / gt.h).powi(2)).sqrt()
}

/// Area under the normalized-precision curve on `[0, 0.5]`, ×200.
///
/// A frame with normalized error `e` succeeds for every threshold above `e`,
/// so it contributes `max(0, 0.5 − e)` to the integral.
pub fn metric_pnorm(pred: &[(f64, f64)], gt: &[BoundingBox]) -> Result<f64> {
    contract!(!pred.is_empty(), "normalized precision of an empty sequence");
    contract!(pred.len() == gt.len(), "{} predictions for {} frames", pred.len(), gt.len());
    contract!(
        gt.iter().all(|b| b.w > 0.0 && b.h > 0.0),
        "ground-truth boxes must have positive size"
    );
    let area: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (PNORM_MAX - normalized_error(*p, g)).max(0.0))
        .sum();
    Ok(200.0 * area / pred.len() as f64)
}

/// Success-plot AUC over 21 IoU thresholds, strict `>`.
pub fn metric_auc(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<f64> {
    contract!(!pred.is_empty(), "AUC of an empty sequence");
    contract!(pred.len() == gt.len(), "{} predictions for {} frames", pred.len(), gt.len());
    contract!(
        gt.iter().all(|b| b.w > 0.0 && b.h > 0.0),
        "ground-truth boxes must have positive size"
    );
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let mut total = 0.0;
    for k in 0..=AUC_STEPS {
        let t = k as f64 / AUC_STEPS as f64;
        let success = ious.iter().filter(|&&iou| iou > t).count();
        total += success as f64 / ious.len() as f64;
    }
    Ok(100.0 * total / (AUC_STEPS + 1) as f64)
}

/// Summary of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub frames: usize,
    pub auc: f64,
    pub p: f64,
    pub p_norm: f64,
    pub cle_mean_px: f64,
    pub cle_std_px: f64,
    pub cle_mean_mm: f64,
    pub cle_std_mm: f64,
}

pub const REPORT_HEADER: &str = "regime,frames,auc,p_norm,p,cle_mean_px,cle_std_px,cle_mean_mm,cle_std_mm";

impl MetricsReport {
    pub fn compute(pred: &[BoundingBox], gt: &[BoundingBox], mm_per_px: f64) -> Result<Self> {
        contract!(mm_per_px > 0.0, "mm_per_px must be positive");
        let pc: Vec<(f64, f64)> = pred.iter().map(BoundingBox::center).collect();
        let gc: Vec<(f64, f64)> = gt.iter().map(BoundingBox::center).collect();
        let cle: Vec<f64> = pc.iter().zip(&gc).map(|(p, g)| center_error(*p, *g)).collect();
        let n = cle.len() as f64;
        let mean = cle.iter().sum::<f64>() / n;
        let std = (cle.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self {
            frames: cle.len(),
            auc: metric_auc(pred, gt)?,
            p: metric_p(&pc, &gc, P_THRESHOLD_PX)?,
            p_norm: metric_pnorm(&pc, gt)?,
            cle_mean_px: mean,
            cle_std_px: std,
            cle_mean_mm: mean * mm_per_px,
            cle_std_mm: std * mm_per_px,
        })
    }

    /// Unweighted mean of several reports (frame counts are summed).
    pub fn mean(reports: &[MetricsReport]) -> Result<Self> {
        contract!(!reports.is_empty(), "mean of no reports");
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            frames: reports.iter().map(|r| r.frames).sum(),
            auc: avg(|r| r.auc),
            p: avg(|r| r.p),
            p_norm: avg(|r| r.p_norm),
            cle_mean_px: avg(|r| r.cle_mean_px),
            cle_std_px: avg(|r| r.cle_std_px),
            cle_mean_mm: avg(|r| r.cle_mean_mm),
            cle_std_mm: avg(|r| r.cle_std_mm),
        })
    }

    pub fn csv_row(&self, regime: &str) -> String {
        format!(
            "{regime},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.frames,
            self.auc,
            self.p_norm,
            self.p,
            self.cle_mean_px,
            self.cle_std_px,
            self.cle_mean_mm,
            self.cle_std_mm
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(x: f64, y: f64) -> BoundingBox {
        BoundingBox::centered(x, y, 10.0, 10.0).unwrap()
    }

    #[test]
    fn precision_counts() {
        let gt = vec![(0.0, 0.0); 4];
        let pred = vec![(5.0, 0.0), (25.0, 0.0), (0.0, 15.0), (100.0, 0.0)];
        assert_eq!(metric_p(&pred, &gt, 20.0).unwrap(), 50.0);
        assert_eq!(metric_p(&gt, &gt, 20.0).unwrap(), 100.0);
        assert!(metric_p(&[], &[], 20.0).is_err());
    }

    #[test]
    fn pnorm_quarter_error_is_fifty() {
        let gt = vec![boxed(0.0, 0.0); 3];
        let pred = vec![(2.5, 0.0); 3];
        assert!((metric_pnorm(&pred, &gt).unwrap() - 50.0).abs() < 1e-12);
        let exact: Vec<_> = gt.iter().map(BoundingBox::center).collect();
        assert_eq!(metric_pnorm(&exact, &gt).unwrap(), 100.0);
    }

    #[test]
    fn auc_hand_values() {
        let a = boxed(0.0, 0.0);
        let far = boxed(100.0, 100.0);
        let v = metric_auc(&[a, far], &[a, a]).unwrap();
        assert!((v - 1000.0 / 21.0).abs() < 1e-12);
        assert!((metric_auc(&[a], &[a]).unwrap() - AUC_CEILING).abs() < 1e-12);
        assert_eq!(metric_auc(&[far], &[a]).unwrap(), 0.0);
    }

    #[test]
    fn report_mm_scaling() {
        let gt = vec![boxed(0.0, 0.0), boxed(5.0, 5.0)];
        let pred = vec![boxed(3.0, 4.0), boxed(5.0, 5.0)];
        let r = MetricsReport::compute(&pred, &gt, 2.0).unwrap();
        assert_eq!(r.cle_mean_px, 2.5);
        assert_eq!(r.cle_std_px, 2.5);
        assert_eq!(r.cle_mean_mm, 5.0);
        assert_eq!(r.cle_std_mm, 5.0);
    }
}
