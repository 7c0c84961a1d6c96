//! Synthetic ultrasound-like needle insertion sequences.
//!
//! A bright Gaussian tip advances in a straight line at a fixed angle and
//! speed, trailed by a dimmer shaft. The background is static multiplicative
//! speckle with per-frame fluctuation and occasional bright horizontal streaks.
//! During occlusion bursts only the tip blob disappears; the ground-truth box
//! keeps following the true tip.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Geometric, StandardNormal};

use crate::error::{Error, Result};
use crate::motion::BoundingBox;
use crate::tensor::Tensor;

/// Allowed insertion angles, in degrees.
pub const ANGLES: [f64; 3] = [0.0, 30.0, 60.0];

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    /// Frames before truncation at the frame border.
    pub frames: usize,
    pub angle_deg: f64,
    /// Tip speed, pixels per frame.
    pub velocity: f64,
    /// Long-run fraction of frames with the tip hidden.
    pub occlusion_rate: f64,
    /// Mean occlusion burst length, frames.
    pub burst_len: f64,
    /// Tip blob standard deviation, pixels.
    pub tip_sigma: f64,
    pub tip_intensity: f64,
    pub shaft_intensity: f64,
    /// Distance between the tip center and the shaft end, pixels.
    pub shaft_gap: f64,
    /// Mean background level.
    pub tissue_level: f64,
    /// Relative per-frame speckle fluctuation.
    pub speckle_flicker: f64,
    /// Probability of a streak artifact per frame.
    pub streak_rate: f64,
    pub mm_per_px: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 224,
            frames: 48,
            angle_deg: 30.0,
            velocity: 2.0,
            occlusion_rate: 0.0,
            burst_len: 6.0,
            tip_sigma: 2.0,
            tip_intensity: 0.8,
            shaft_intensity: 0.25,
            shaft_gap: 6.0,
            tissue_level: 0.25,
            speckle_flicker: 0.3,
            streak_rate: 0.1,
            mm_per_px: 260.0 / 224.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !ANGLES.contains(&self.angle_deg) {
            return Err(Error::Config(format!(
                "angle must be one of 0, 30, 60 degrees, got {}",
                self.angle_deg
            )));
        }
        if !(self.velocity > 0.0 && self.velocity.is_finite()) {
            return Err(Error::Config(format!("velocity must be positive, got {}", self.velocity)));
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return Err(Error::Config(format!(
                "occlusion_rate must lie in [0, 1), got {}",
                self.occlusion_rate
            )));
        }
        if self.burst_len < 1.0 || self.tip_sigma <= 0.0 || self.mm_per_px <= 0.0 {
            return Err(Error::Config(
                "burst_len must be >= 1, tip_sigma and mm_per_px positive".into(),
            ));
        }
        if self.height < 16 || self.width < 16 || self.frames == 0 {
            return Err(Error::Config(format!(
                "frame size {}x{} or length {} too small",
                self.height, self.width, self.frames
            )));
        }
        Ok(())
    }

    /// Ground-truth box side: the tip blob's ±2σ extent.
    pub fn box_side(&self) -> f64 {
        4.0 * self.tip_sigma
    }

    /// `key=value` settings; every field is addressable.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("frames", self.frames.to_string()),
            ("angle", self.angle_deg.to_string()),
            ("velocity", self.velocity.to_string()),
            ("occlusion_rate", self.occlusion_rate.to_string()),
            ("burst_len", self.burst_len.to_string()),
            ("tip_sigma", self.tip_sigma.to_string()),
            ("tip_intensity", self.tip_intensity.to_string()),
            ("shaft_intensity", self.shaft_intensity.to_string()),
            ("shaft_gap", self.shaft_gap.to_string()),
            ("tissue_level", self.tissue_level.to_string()),
            ("speckle_flicker", self.speckle_flicker.to_string()),
            ("streak_rate", self.streak_rate.to_string()),
            ("mm_per_px", self.mm_per_px.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one setting; `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let float = || -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
        };
        let int = || -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
        };
        match key {
            "height" => self.height = int()?,
            "width" => self.width = int()?,
            "frames" => self.frames = int()?,
            "angle" => self.angle_deg = float()?,
            "velocity" => self.velocity = float()?,
            "occlusion_rate" => self.occlusion_rate = float()?,
            "burst_len" => self.burst_len = float()?,
            "tip_sigma" => self.tip_sigma = float()?,
            "tip_intensity" => self.tip_intensity = float()?,
            "shaft_intensity" => self.shaft_intensity = float()?,
            "shaft_gap" => self.shaft_gap = float()?,
            "tissue_level" => self.tissue_level = float()?,
            "speckle_flicker" => self.speckle_flicker = float()?,
            "streak_rate" => self.streak_rate = float()?,
            "mm_per_px" => self.mm_per_px = float()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Per-sequence metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMeta {
    pub angle_deg: f64,
    pub velocity: f64,
    pub seed: u64,
    pub occlusion_rate: f64,
    pub mm_per_px: f64,
}

/// One synthetic insertion video.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    /// `[1×H×W]` frames with values in `[0, 1]`.
    pub frames: Vec<Tensor<f32>>,
    pub gt_boxes: Vec<BoundingBox>,
    pub visibility: Vec<bool>,
    pub meta: SequenceMeta,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_size(&self) -> (usize, usize) {
        self.frames
            .first()
            .map_or((0, 0), |f| (f.shape()[1], f.shape()[2]))
    }

    pub fn occluded_fraction(&self) -> f64 {
        let hidden = self.visibility.iter().filter(|v| !**v).count();
        hidden as f64 / self.visibility.len().max(1) as f64
    }
}

/// Occlusion schedule with geometric bursts; frame 0 is always visible.
fn visibility_schedule(cfg: &GenConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut vis = vec![true; n];
    if cfg.occlusion_rate == 0.0 {
        return vis;
    }
    let rate = cfg.occlusion_rate;
    let start_p = (rate / ((1.0 - rate) * cfg.burst_len)).min(1.0);
    let burst = Geometric::new(1.0 / cfg.burst_len).expect("burst_len >= 1");
    let mut remaining = 0u64;
    for v in vis.iter_mut().skip(1) {
        if remaining == 0 && rng.random::<f64>() < start_p {
            remaining = burst.sample(rng) + 1;
        }
        if remaining > 0 {
            *v = false;
            remaining -= 1;
        }
    }
    vis
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Generates one sequence; identical `(config, seed)` give bit-identical output.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<SequenceSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let (hf, wf) = (h as f64, w as f64);
    let theta = cfg.angle_deg.to_radians();
    let dir = (theta.cos(), theta.sin());
    let margin = cfg.box_side();
    let x0 = rng.random_range(margin..(0.2 * wf).max(margin + 1.0));
    let y0 = if cfg.angle_deg == 0.0 {
        rng.random_range(0.3 * hf..0.7 * hf)
    } else {
        rng.random_range(margin..(0.3 * hf).max(margin + 1.0))
    };
    // Needle enters from the left or top border.
    let back = (x0 / dir.0.max(1e-9)).min(if dir.1 > 1e-9 { y0 / dir.1 } else { f64::INFINITY });
    let entry = (x0 - back * dir.0, y0 - back * dir.1);

    let mut tips = Vec::new();
    for t in 0..cfg.frames {
        let p = (x0 + t as f64 * cfg.velocity * dir.0, y0 + t as f64 * cfg.velocity * dir.1);
        if p.0 < 0.0 || p.1 < 0.0 || p.0 >= wf || p.1 >= hf {
            break;
        }
        tips.push(p);
    }
    let n = tips.len();
    let visibility = visibility_schedule(cfg, n, &mut rng);

    // Static speckle: exponential intensities, 3×3 box smoothed.
    let raw: Vec<f64> = (0..h * w).map(|_| Exp1.sample(&mut rng)).collect();
    let mut speckle = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for rr in r.saturating_sub(1)..(r + 2).min(h) {
                for cc in c.saturating_sub(1)..(c + 2).min(w) {
                    acc += raw[rr * w + cc];
                    cnt += 1.0;
                }
            }
            speckle[r * w + c] = acc / cnt;
        }
    }

    let side = cfg.box_side();
    let two_var = 2.0 * cfg.tip_sigma * cfg.tip_sigma;
    let reach = (4.0 * cfg.tip_sigma).ceil() as isize;
    let mut frames = Vec::with_capacity(n);
    let mut gt_boxes = Vec::with_capacity(n);
    for (t, &(tx, ty)) in tips.iter().enumerate() {
        let mut img = vec![0.0f64; h * w];
        for (i, v) in img.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = cfg.tissue_level * speckle[i] * (1.0 + cfg.speckle_flicker * z).max(0.0);
        }
        if rng.random::<f64>() < cfg.streak_rate {
            let row = rng.random_range(0..h);
            let c0 = rng.random_range(0..w / 2);
            let len = rng.random_range(w / 4..w / 2);
            let level = rng.random_range(0.4..0.7);
            for r in row..(row + 2).min(h) {
                for c in c0..(c0 + len).min(w) {
                    img[r * w + c] += level;
                }
            }
        }
        let shaft_end = (tx - cfg.shaft_gap * dir.0, ty - cfg.shaft_gap * dir.1);
        let (lo_r, hi_r) = (entry.1.min(shaft_end.1) - 3.0, entry.1.max(shaft_end.1) + 3.0);
        let (lo_c, hi_c) = (entry.0.min(shaft_end.0) - 3.0, entry.0.max(shaft_end.0) + 3.0);
        for r in (lo_r.max(0.0) as usize)..(hi_r.min(hf - 1.0).max(0.0) as usize + 1) {
            for c in (lo_c.max(0.0) as usize)..(hi_c.min(wf - 1.0).max(0.0) as usize + 1) {
                let d = segment_distance(c as f64 + 0.5, r as f64 + 0.5, entry, shaft_end);
                if d < 3.0 {
                    img[r * w + c] += cfg.shaft_intensity * (-d * d / (2.0 * 0.8 * 0.8)).exp();
                }
            }
        }
        if visibility[t] {
            let (cr, cc) = (ty as isize, tx as isize);
            for r in (cr - reach).max(0)..(cr + reach + 1).min(h as isize) {
                for c in (cc - reach).max(0)..(cc + reach + 1).min(w as isize) {
                    let d2 = (c as f64 + 0.5 - tx).powi(2) + (r as f64 + 0.5 - ty).powi(2);
                    img[r as usize * w + c as usize] += cfg.tip_intensity * (-d2 / two_var).exp();
                }
            }
        }
        let data = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
        frames.push(Tensor::new(&[1, h, w], data)?);
        gt_boxes.push(BoundingBox::centered(tx, ty, side, side)?);
    }
    Ok(SequenceSample {
        frames,
        gt_boxes,
        visibility,
        meta: SequenceMeta {
            angle_deg: cfg.angle_deg,
            velocity: cfg.velocity,
            seed,
            occlusion_rate: cfg.occlusion_rate,
            mm_per_px: cfg.mm_per_px,
        },
    })
}

/// Velocities cycled through by [`benchmark_configs`], pixels per frame.
pub const BENCHMARK_VELOCITIES: [f64; 3] = [1.0, 2.0, 3.0];

/// `n` generator settings cycling through every angle and velocity, with
/// per-sequence seeds derived from `seed`.
pub fn benchmark_configs(base: &GenConfig, n: usize, seed: u64) -> Vec<(GenConfig, u64)> {
    (0..n)
        .map(|i| {
            let cfg = GenConfig {
                angle_deg: ANGLES[i % 3],
                velocity: BENCHMARK_VELOCITIES[(i / 3) % 3],
                ..base.clone()
            };
            (cfg, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            height: 48,
            width: 80,
            frames: 20,
            ..GenConfig::default()
        }
    }

    #[test]
    fn horizontal_tip_advances_by_velocity() {
        let cfg = GenConfig {
            angle_deg: 0.0,
            velocity: 1.5,
            ..small()
        };
        let s = generate(&cfg, 3).unwrap();
        for t in 1..s.len() {
            let (a, b) = (s.gt_boxes[t - 1].center(), s.gt_boxes[t].center());
            assert!((b.0 - a.0 - 1.5).abs() < 1e-12);
            assert_eq!(b.1, a.1);
        }
    }

    #[test]
    fn no_occlusion_means_all_visible() {
        let s = generate(&small(), 1).unwrap();
        assert!(s.visibility.iter().all(|&v| v));
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = GenConfig {
            occlusion_rate: 0.4,
            ..small()
        };
        assert_eq!(generate(&cfg, 7).unwrap(), generate(&cfg, 7).unwrap());
        assert_ne!(generate(&cfg, 7).unwrap().frames, generate(&cfg, 8).unwrap().frames);
    }

    #[test]
    fn truncates_at_exit() {
        let cfg = GenConfig {
            angle_deg: 0.0,
            velocity: 10.0,
            frames: 100,
            ..small()
        };
        let s = generate(&cfg, 2).unwrap();
        assert!(s.len() < 100);
        let (x, _) = s.gt_boxes.last().unwrap().center();
        assert!(x < 80.0 && x + 10.0 >= 80.0);
    }

    #[test]
    fn occlusion_rate_is_respected_on_average() {
        let cfg = GenConfig {
            occlusion_rate: 0.35,
            frames: 4000,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vis = visibility_schedule(&cfg, 40_000, &mut rng);
        let frac = vis.iter().filter(|v| !**v).count() as f64 / vis.len() as f64;
        assert!((frac - 0.35).abs() < 0.03, "occluded fraction {frac}");
        assert!(vis[0]);
    }

    #[test]
    fn rejects_bad_settings() {
        for cfg in [
            GenConfig {
                angle_deg: 45.0,
                ..small()
            },
            GenConfig {
                velocity: 0.0,
                ..small()
            },
            GenConfig {
                occlusion_rate: 1.0,
                ..small()
            },
        ] {
            assert!(matches!(generate(&cfg, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn values_in_unit_range() {
        let s = generate(&small(), 4).unwrap();
        assert!(s.frames.iter().all(|f| f.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }
}
