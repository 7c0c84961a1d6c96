//! Trains and evaluates every network variant on one shared split.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::harness::dataset::{list_sequences, read_sequence, DiskSource, SequenceSource};
use crate::harness::eval::{evaluate, NetTracker};
use crate::harness::metrics::MetricsReport;
use crate::harness::synth::SequenceSample;
use crate::harness::train::{train_to_end, TrainConfig, Trainer};
use crate::net::{NetConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: MetricsReport,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Whether the baseline beats (or ties) a variant on AUC.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionCheck {
    pub variant: Variant,
    pub baseline_auc: f64,
    pub variant_auc: f64,
}

impl DirectionCheck {
    /// `baseline − variant` AUC.
    pub fn margin(&self) -> f64 {
        self.baseline_auc - self.variant_auc
    }

    pub fn holds(&self) -> bool {
        self.margin() >= 0.0
    }
}

/// Variants the baseline is expected to match or beat.
pub const CHECKED_VARIANTS: [Variant; 2] = [Variant::V4, Variant::V3];

pub const ABLATION_HEADER: &str = "variant,description,auc,p_norm,p,delta_auc,final_loss,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub checks: Vec<DirectionCheck>,
}

impl AblationResult {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let base = self.row(Variant::Baseline).map_or(f64::NAN, |r| r.report.auc);
        let mut s = String::from(ABLATION_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},\"{}\",{:.4},{:.4},{:.4},{:.4},{:.6},{:.1}",
                r.variant,
                r.variant.description(),
                r.report.auc,
                r.report.p_norm,
                r.report.p,
                r.report.auc - base,
                r.final_loss,
                r.seconds
            );
        }
        s
    }

    /// One line per direction check.
    pub fn checks_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "baseline AUC {:.2} {} {} AUC {:.2} (margin {:+.2})",
                c.baseline_auc,
                if c.holds() { ">=" } else { "<" },
                c.variant,
                c.variant_auc,
                c.margin()
            );
        }
        s
    }
}

/// Trains each variant from the same seed and data, then evaluates it.
pub fn run_ablation_on(
    base: &TrainConfig,
    variants: &[Variant],
    train: &[SequenceSample],
    test: &dyn SequenceSource,
) -> Result<AblationResult> {
    let mut rows = Vec::new();
    for &v in variants {
        let start = Instant::now();
        let cfg = TrainConfig {
            net: NetConfig::for_variant(&base.net, v),
            ..base.clone()
        };
        log::info!("training {v}");
        let outcome = train_to_end(Trainer::new(cfg)?, train)?;
        let final_loss = outcome.epoch_losses.last().copied().unwrap_or(f64::NAN);
        let tracker = NetTracker {
            net: outcome.trainer.net,
        };
        let report = evaluate(&tracker, test)?.aggregate;
        let seconds = start.elapsed().as_secs_f64();
        log::info!("{v}: AUC {:.2}, P_norm {:.2}, P {:.2} ({seconds:.0} s)", report.auc, report.p_norm, report.p);
        rows.push(AblationRow {
            variant: v,
            report,
            final_loss,
            seconds,
        });
    }
    let auc = |v: Variant| rows.iter().find(|r| r.variant == v).map(|r| r.report.auc);
    let checks = match auc(Variant::Baseline) {
        Some(b) => CHECKED_VARIANTS
            .iter()
            .filter_map(|&v| {
                auc(v).map(|a| DirectionCheck {
                    variant: v,
                    baseline_auc: b,
                    variant_auc: a,
                })
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(AblationResult { rows, checks })
}

/// Train and test sequence directories: `DIR/train` and `DIR/test` when
/// both exist, otherwise a 7:1:2 train/val/test split of the sorted
/// sequences (every tenth block of ten).
pub fn split_dataset(dir: &Path) -> Result<(Vec<std::path::PathBuf>, Vec<std::path::PathBuf>)> {
    if dir.join("train").is_dir() && dir.join("test").is_dir() {
        return Ok((list_sequences(&dir.join("train"))?, list_sequences(&dir.join("test"))?));
    }
    let all = list_sequences(dir)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, d) in all.into_iter().enumerate() {
        match i % 10 {
            0..=6 => train.push(d),
            7 => {}
            _ => test.push(d),
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "{} holds too few sequences for a train/test split",
            dir.display()
        )));
    }
    Ok((train, test))
}

/// Runs every variant on a dataset directory and writes the table.
pub fn run_ablation(base: &TrainConfig, data: &Path, out: &Path) -> Result<AblationResult> {
    let (train_dirs, test_dirs) = split_dataset(data)?;
    log::info!("{} training / {} test sequences", train_dirs.len(), test_dirs.len());
    let train = train_dirs.iter().map(|d| read_sequence(d)).collect::<Result<Vec<_>>>()?;
    let test = DiskSource { dirs: test_dirs };
    let result = run_ablation_on(base, &Variant::ALL, &train, &test)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, result.to_csv())?;
    Ok(result)
}
