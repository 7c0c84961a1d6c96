//! Tracking loop and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::harness::dataset::SequenceSource;
use crate::harness::metrics::{center_error, MetricsReport, REPORT_HEADER};
use crate::harness::synth::SequenceSample;
use crate::harness::train::template_crop;
use crate::motion::{BoundingBox, MotionQueue};
use crate::net::{CropTransform, TrackerNet};
use crate::Float;

/// Predicts boxes for frames `1..n` of a sequence, given the first box.
pub trait Tracker {
    fn name(&self) -> &str;

    fn track(&self, seq: &SequenceSample) -> Result<Vec<BoundingBox>>;
}

/// The trained network, run frame by frame on its own predictions.
pub struct NetTracker {
    pub net: TrackerNet<Float>,
}

impl Tracker for NetTracker {
    fn name(&self) -> &str {
        "net"
    }

    fn track(&self, seq: &SequenceSample) -> Result<Vec<BoundingBox>> {
        let cfg = self.net.config();
        let template = template_crop(seq, cfg.template_size)?;
        let mut queue = MotionQueue::new(cfg.t);
        let mut prev = seq.gt_boxes[0];
        let mut out = Vec::with_capacity(seq.len().saturating_sub(1));
        for frame in &seq.frames[1..] {
            let (px, py) = prev.center();
            let crop = CropTransform::centered(px, py, cfg.search_size, 1.0);
            let search = crop.crop(frame)?.cast();
            let (score, reg) = self.net.forward(&search, &template, &queue.as_sequence())?;
            let pred = self.net.decode(&score, &reg, &crop);
            queue.push(cfg.motion.entry(&prev, &pred));
            out.push(pred);
            prev = pred;
        }
        Ok(out)
    }
}

/// Returns the ground truth; calibrates the metric ceiling.
pub struct GtTracker;

impl Tracker for GtTracker {
    fn name(&self) -> &str {
        "gt"
    }

    fn track(&self, seq: &SequenceSample) -> Result<Vec<BoundingBox>> {
        Ok(seq.gt_boxes[1..].to_vec())
    }
}

/// Uniformly random centers with the first box's size.
pub struct RandomTracker {
    pub seed: u64,
}

impl Tracker for RandomTracker {
    fn name(&self) -> &str {
        "random"
    }

    fn track(&self, seq: &SequenceSample) -> Result<Vec<BoundingBox>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ seq.meta.seed);
        let (h, w) = seq.frame_size();
        let b = seq.gt_boxes[0];
        (1..seq.len())
            .map(|_| {
                let cx = rng.random_range(0.0..w as f64);
                let cy = rng.random_range(0.0..h as f64);
                BoundingBox::centered(cx, cy, b.w, b.h)
            })
            .collect()
    }
}

/// One evaluated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub sequence: String,
    pub frame: usize,
    pub pred: BoundingBox,
    pub gt: BoundingBox,
    pub visible: bool,
    pub mm_per_px: f64,
}

impl FrameRecord {
    pub fn cle_px(&self) -> f64 {
        center_error(self.pred.center(), self.gt.center())
    }
}

pub const FRAMES_HEADER: &str = "sequence,frame,pred_cx,pred_cy,gt_cx,gt_cy,cle_px,cle_mm,visible";

/// Per-regime reports and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub frames: Vec<FrameRecord>,
    pub regimes: Vec<(String, MetricsReport)>,
    pub aggregate: MetricsReport,
}

impl EvalResult {
    pub fn report_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for (name, r) in &self.regimes {
            let _ = writeln!(s, "{}", r.csv_row(name));
        }
        let _ = writeln!(s, "{}", self.aggregate.csv_row("mean"));
        s
    }

    pub fn frames_csv(&self) -> String {
        let mut s = String::from(FRAMES_HEADER);
        s.push('\n');
        for f in &self.frames {
            let (pc, gc) = (f.pred.center(), f.gt.center());
            let cle = f.cle_px();
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
                f.sequence,
                f.frame,
                pc.0,
                pc.1,
                gc.0,
                gc.1,
                cle,
                cle * f.mm_per_px,
                u8::from(f.visible)
            );
        }
        s
    }
}

/// Regime label of a sequence (its insertion angle).
pub fn regime(seq: &SequenceSample) -> String {
    format!("angle_{}", seq.meta.angle_deg)
}

/// Tracks every sequence and scores frames `1..n`, grouped by regime.
pub fn evaluate(tracker: &dyn Tracker, source: &dyn SequenceSource) -> Result<EvalResult> {
    contract!(!source.is_empty(), "evaluation needs at least one sequence");
    let mut frames = Vec::new();
    let mut groups: BTreeMap<String, (Vec<BoundingBox>, Vec<BoundingBox>, f64)> = BTreeMap::new();
    for i in 0..source.len() {
        let seq = source.get(i)?;
        if seq.len() < 2 {
            log::warn!("{}: fewer than two frames, skipped", source.name(i));
            continue;
        }
        let preds = tracker.track(&seq)?;
        contract!(
            preds.len() == seq.len() - 1,
            "tracker {} returned {} boxes for {} frames",
            tracker.name(),
            preds.len(),
            seq.len() - 1
        );
        let g = groups
            .entry(regime(&seq))
            .or_insert_with(|| (Vec::new(), Vec::new(), seq.meta.mm_per_px));
        for (k, pred) in preds.into_iter().enumerate() {
            let t = k + 1;
            g.0.push(pred);
            g.1.push(seq.gt_boxes[t]);
            frames.push(FrameRecord {
                sequence: source.name(i),
                frame: t,
                pred,
                gt: seq.gt_boxes[t],
                visible: seq.visibility[t],
                mm_per_px: seq.meta.mm_per_px,
            });
        }
    }
    let regimes = groups
        .into_iter()
        .map(|(name, (pred, gt, mm))| Ok((name, MetricsReport::compute(&pred, &gt, mm)?)))
        .collect::<Result<Vec<_>>>()?;
    contract!(!regimes.is_empty(), "no sequence had two or more frames");
    let reports: Vec<MetricsReport> = regimes.iter().map(|(_, r)| r.clone()).collect();
    Ok(EvalResult {
        frames,
        aggregate: MetricsReport::mean(&reports)?,
        regimes,
    })
}

/// Path of the per-frame CSV written next to a report.
pub fn frames_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    report.with_file_name(format!("{stem}_frames.csv"))
}

/// Loads a checkpoint, evaluates it and writes the report and per-frame CSVs.
pub fn run_eval(ckpt: &Path, source: &dyn SequenceSource, report: &Path) -> Result<EvalResult> {
    let tracker = NetTracker {
        net: TrackerNet::load(ckpt)?,
    };
    let result = evaluate(&tracker, source)?;
    write_eval(&result, report)?;
    Ok(result)
}

pub fn write_eval(result: &EvalResult, report: &Path) -> Result<()> {
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(report, result.report_csv())?;
    fs::write(frames_path(report), result.frames_csv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::MemorySource;
    use crate::harness::metrics::AUC_CEILING;
    use crate::harness::synth::{generate, GenConfig};
    use crate::net::NetConfig;

    fn source() -> MemorySource {
        let mut sequences = Vec::new();
        for (i, angle) in [0.0, 30.0].into_iter().enumerate() {
            let cfg = GenConfig {
                height: 48,
                width: 80,
                frames: 5,
                angle_deg: angle,
                ..GenConfig::default()
            };
            sequences.push(generate(&cfg, i as u64).unwrap());
        }
        MemorySource { sequences }
    }

    #[test]
    fn gt_tracker_hits_ceiling() {
        let r = evaluate(&GtTracker, &source()).unwrap();
        assert_eq!(r.regimes.len(), 2);
        assert_eq!(r.aggregate.p, 100.0);
        assert!((r.aggregate.auc - AUC_CEILING).abs() < 1e-9);
        assert!(r.report_csv().starts_with(REPORT_HEADER));
    }

    #[test]
    fn net_tracker_cold_start() {
        let cfg = NetConfig {
            c_feat: 4,
            n_heads: 1,
            state_dim: 2,
            search_size: 32,
            template_size: 16,
            backbone_stride: 4,
            ..NetConfig::default()
        };
        let tracker = NetTracker {
            net: TrackerNet::new(cfg, 0).unwrap(),
        };
        let src = source();
        let a = evaluate(&tracker, &src).unwrap();
        let b = evaluate(&tracker, &src).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames.len(), 8);
    }
}
