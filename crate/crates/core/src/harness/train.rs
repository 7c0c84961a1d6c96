//! Training loop: sample construction, augmentation, AdamW and resumable state.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::harness::dataset::{list_sequences, read_sequence};
use crate::harness::synth::SequenceSample;
use crate::motion::{augment, BoundingBox, MotionQueue};
use crate::net::{loss_graph, Checkpoint, CropTransform, NetConfig, Params, Target, TrackerNet};
use crate::tensor::Tensor;
use crate::Float;

/// Optimization and augmentation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate multiplier for backbone parameters.
    pub backbone_lr_scale: f64,
    pub weight_decay: f64,
    /// First epoch trained at a tenth of the learning rate; `None` puts it at
    /// 4/7 of the run.
    pub decay_epoch: Option<usize>,
    /// Std of the Gaussian noise added to motion sequences, pixels.
    pub motion_noise: f64,
    /// Std of the simulated prediction error, pixels (clipped at three std).
    pub shift_sigma: f64,
    /// Lag-one correlation of the simulated prediction error.
    pub shift_corr: f64,
    /// Std of the extra search-crop offset, pixels (clipped at three std).
    pub crop_shift: f64,
    /// Probability of applying the extra crop offset.
    pub crop_shift_prob: f64,
    /// Search-crop scale drawn uniformly from `1 ± scale_jitter`.
    pub scale_jitter: f64,
    pub blur_prob: f64,
    pub seed: u64,
    /// Repeat one fixed, unaugmented batch every step.
    pub overfit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            epochs: 14,
            steps_per_epoch: 40,
            batch_size: 8,
            lr: 3e-4,
            backbone_lr_scale: 0.1,
            weight_decay: 1e-4,
            decay_epoch: None,
            motion_noise: 0.5,
            shift_sigma: 8.0,
            shift_corr: 0.8,
            crop_shift: 8.0,
            crop_shift_prob: 0.0,
            scale_jitter: 0.1,
            blur_prob: 0.2,
            seed: 0,
            overfit: false,
        }
    }
}

impl TrainConfig {
    pub fn decay_epoch(&self) -> usize {
        self.decay_epoch
            .unwrap_or_else(|| ((4 * self.epochs) as f64 / 7.0).round() as usize)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch() {
            self.lr * 0.1
        } else {
            self.lr
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = self.net.to_pairs();
        let own = [
            ("epochs", self.epochs.to_string()),
            ("steps_per_epoch", self.steps_per_epoch.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("backbone_lr_scale", self.backbone_lr_scale.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("motion_noise", self.motion_noise.to_string()),
            ("shift_sigma", self.shift_sigma.to_string()),
            ("shift_corr", self.shift_corr.to_string()),
            ("crop_shift", self.crop_shift.to_string()),
            ("crop_shift_prob", self.crop_shift_prob.to_string()),
            ("scale_jitter", self.scale_jitter.to_string()),
            ("blur_prob", self.blur_prob.to_string()),
            ("seed", self.seed.to_string()),
            ("overfit", self.overfit.to_string()),
        ];
        out.extend(own.into_iter().map(|(k, v)| (k.to_string(), v)));
        if let Some(e) = self.decay_epoch {
            out.push(("decay_epoch".into(), e.to_string()));
        }
        out
    }

    /// Applies one setting (network keys included); `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        if self.net.set(key, value)? {
            return Ok(true);
        }
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
            "epochs" => self.epochs = int()?,
            "steps_per_epoch" => self.steps_per_epoch = int()?,
            "batch_size" => self.batch_size = int()?,
            "lr" => self.lr = float()?,
            "backbone_lr_scale" => self.backbone_lr_scale = float()?,
            "weight_decay" => self.weight_decay = float()?,
            "decay_epoch" => self.decay_epoch = Some(int()?),
            "motion_noise" => self.motion_noise = float()?,
            "shift_sigma" => self.shift_sigma = float()?,
            "shift_corr" => self.shift_corr = float()?,
            "crop_shift" => self.crop_shift = float()?,
            "crop_shift_prob" => self.crop_shift_prob = float()?,
            "scale_jitter" => self.scale_jitter = float()?,
            "blur_prob" => self.blur_prob = float()?,
            "seed" => {
                self.seed = v
                    .parse()
                    .map_err(|_| Error::Config(format!("seed: expected an integer, got {v:?}")))?
            }
            "overfit" => {
                self.overfit = v
                    .parse()
                    .map_err(|_| Error::Config(format!("overfit: expected true/false, got {v:?}")))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, steps_per_epoch and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.motion_noise < 0.0 || self.shift_sigma < 0.0
            || self.crop_shift < 0.0
        {
            return Err(Error::Config("lr must be positive; decay, noise and shift non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.scale_jitter)
            || !(0.0..=1.0).contains(&self.blur_prob)
            || !(0.0..=1.0).contains(&self.shift_corr)
            || !(0.0..=1.0).contains(&self.crop_shift_prob)
        {
            return Err(Error::Config(
                "scale_jitter must lie in [0, 1); blur_prob, shift_corr and crop_shift_prob in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Tensor<Float>>,
    pub v: Vec<Tensor<Float>>,
}

impl AdamW {
    pub fn new(params: &Params<Float>, weight_decay: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with a per-parameter learning rate.
    pub fn step(&mut self, params: &mut [Tensor<Float>], grads: &[Tensor<Float>], lrs: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = lrs[i];
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i].data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
    }
}

/// One supervised example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub search: Tensor<Float>,
    pub template: Tensor<Float>,
    pub motion: Tensor<Float>,
    pub target: Target<Float>,
}

/// Template crop around the first ground-truth box.
pub fn template_crop(seq: &SequenceSample, size: usize) -> Result<Tensor<Float>> {
    let (cx, cy) = seq.gt_boxes[0].center();
    Ok(CropTransform::centered(cx, cy, size, 1.0).crop(&seq.frames[0])?.cast())
}

/// Motion queue after frames `0..t` using ground-truth boxes.
pub fn teacher_queue(seq: &SequenceSample, cfg: &NetConfig, t: usize) -> MotionQueue {
    let mut q = MotionQueue::new(cfg.t);
    for j in 1..t {
        q.push(cfg.motion.entry(&seq.gt_boxes[j - 1], &seq.gt_boxes[j]));
    }
    q
}

fn blur3(img: &Tensor<Float>) -> Tensor<Float> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let k = [0.25, 0.5, 0.25];
    let pass = |src: &[Float], horizontal: bool| -> Vec<Float> {
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let (rr, cc) = if horizontal {
                        (r as isize, c as isize + j as isize - 1)
                    } else {
                        (r as isize + j as isize - 1, c as isize)
                    };
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        acc += kv * src[rr as usize * w + cc as usize];
                        norm += kv;
                    }
                }
                out[r * w + c] = acc / norm;
            }
        }
        out
    };
    let data = pass(&pass(img.data(), true), false);
    Tensor::new(img.shape(), data).expect("same shape")
}

/// Builds the example for frame `t ≥ 1`; `None` when the target leaves the
/// search region. With `rng = None` no augmentation is applied.
///
/// With augmentation, earlier predictions are simulated as ground truth plus
/// an AR(1) center error (std `shift_sigma`, lag-one correlation
/// `shift_corr`, clipped at three std). The motion queue is built from those
/// simulated boxes and the search crop is centered on the last one, as in
/// closed-loop tracking. With probability `crop_shift_prob` the crop is
/// moved by a further Gaussian offset (std `crop_shift`).
pub fn make_sample(
    seq: &SequenceSample,
    t: usize,
    cfg: &TrainConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Option<Sample>> {
    let net = &cfg.net;
    let template = template_crop(seq, net.template_size)?;
    let (crop, blur, motion) = match rng {
        Some(rng) => {
            let clip = 3.0 * cfg.shift_sigma;
            let rho = cfg.shift_corr;
            let innov = cfg.shift_sigma * (1.0 - rho * rho).sqrt();
            let first = t.saturating_sub(net.t + 1);
            let mut err = (0.0, 0.0);
            let mut pred = Vec::with_capacity(t - first);
            for j in first..t {
                if j == 0 {
                    pred.push(seq.gt_boxes[0]);
                    continue;
                }
                let mut step = |e: f64| {
                    let z: f64 = StandardNormal.sample(rng);
                    let fresh = if j == first { cfg.shift_sigma * z } else { rho * e + innov * z };
                    fresh.clamp(-clip, clip)
                };
                err = (step(err.0), step(err.1));
                let g = seq.gt_boxes[j];
                pred.push(BoundingBox { cx: g.cx + err.0, cy: g.cy + err.1, ..g });
            }
            let mut queue = MotionQueue::new(net.t);
            for w in pred.windows(2) {
                queue.push(net.motion.entry(&w[0], &w[1]));
            }
            let (mut px, mut py) = pred[pred.len() - 1].center();
            if rng.random::<f64>() < cfg.crop_shift_prob {
                let c = 3.0 * cfg.crop_shift;
                let (zx, zy): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
                px += (cfg.crop_shift * zx).clamp(-c, c);
                py += (cfg.crop_shift * zy).clamp(-c, c);
            }
            let scale = if cfg.scale_jitter > 0.0 {
                rng.random_range(1.0 - cfg.scale_jitter..1.0 + cfg.scale_jitter)
            } else {
                1.0
            };
            let blur = rng.random::<f64>() < cfg.blur_prob;
            let motion = augment(&queue.as_sequence(), cfg.motion_noise, rng)?;
            (CropTransform::centered(px, py, net.search_size, scale), blur, motion)
        }
        None => {
            let (px, py) = seq.gt_boxes[t - 1].center();
            let motion = teacher_queue(seq, net, t).as_sequence();
            (CropTransform::centered(px, py, net.search_size, 1.0), false, motion)
        }
    };
    let Some(target) = encode(&seq.gt_boxes[t], &crop, net) else {
        log::warn!("frame {t}: ground truth outside the search region, sample skipped");
        return Ok(None);
    };
    let mut search: Tensor<Float> = crop.crop(&seq.frames[t])?.cast();
    if blur {
        search = blur3(&search);
    }
    Ok(Some(Sample {
        search,
        template,
        motion,
        target,
    }))
}

fn encode(gt: &BoundingBox, crop: &CropTransform, net: &NetConfig) -> Option<Target<Float>> {
    crate::net::encode_target(gt, crop, net.backbone_stride, net.search_feat())
}

/// Mixes a run seed and a step index into an independent stream seed.
pub fn batch_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Network, optimizer and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: TrackerNet<Float>,
    pub opt: AdamW,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = TrackerNet::new(cfg.net.clone(), cfg.seed)?;
        let opt = AdamW::new(&net.params, cfg.weight_decay);
        Ok(Self { cfg, net, opt, step: 0 })
    }

    pub fn epoch(&self) -> usize {
        (self.step / self.cfg.steps_per_epoch as u64) as usize
    }

    pub fn is_done(&self) -> bool {
        self.epoch() >= self.cfg.epochs
    }

    /// Draws the batch for the current step.
    pub fn batch(&self, data: &[SequenceSample]) -> Result<Vec<Sample>> {
        let usable: Vec<usize> = (0..data.len()).filter(|&i| data[i].len() >= 2).collect();
        if usable.is_empty() {
            return Err(Error::Config("training needs at least one sequence with two frames".into()));
        }
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        if self.cfg.overfit {
            let seq = &data[usable[0]];
            let mut t = 1;
            while out.len() < self.cfg.batch_size {
                if let Some(s) = make_sample(seq, t, &self.cfg, None)? {
                    out.push(s);
                }
                t = t % (seq.len() - 1) + 1;
                if t == 1 && out.is_empty() {
                    return Err(Error::Config("overfit sequence has no usable frame".into()));
                }
            }
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(self.cfg.seed, self.step));
        let mut attempts = 0;
        while out.len() < self.cfg.batch_size {
            attempts += 1;
            if attempts > 100 * self.cfg.batch_size {
                return Err(Error::Config("could not draw a training batch inside the search region".into()));
            }
            let seq = &data[usable[rng.random_range(0..usable.len())]];
            let t = rng.random_range(1..seq.len());
            if let Some(s) = make_sample(seq, t, &self.cfg, Some(&mut rng))? {
                out.push(s);
            }
        }
        Ok(out)
    }

    /// Mean loss of a batch and its gradients (in parameter order).
    pub fn loss_and_grads(&self, batch: &[Sample]) -> Result<(f64, Vec<Tensor<Float>>)> {
        let g = Graph::new();
        let b = self.net.bind(&g, true);
        let mut total = None;
        for s in batch {
            let m = g.constant(self.net.motion_input(&s.motion));
            let out = self
                .net
                .forward_graph(&b, g.constant(s.search.clone()), g.constant(s.template.clone()), m, None)?;
            let l = loss_graph(&out, &s.target)?;
            total = Some(match total {
                None => l,
                Some(acc) => l.add(acc)?,
            });
        }
        let loss = total
            .ok_or_else(|| Error::Contract("empty batch".into()))?
            .scale(1.0 / batch.len() as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        let mut grads = g.backward(loss)?;
        let gs = b.vars().iter().map(|&v| grads.take(v)).collect();
        Ok((value, gs))
    }

    /// Loss of the next batch without updating anything.
    pub fn peek_loss(&self, data: &[SequenceSample]) -> Result<f64> {
        Ok(self.loss_and_grads(&self.batch(data)?)?.0)
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn train_step(&mut self, data: &[SequenceSample]) -> Result<f64> {
        let batch = self.batch(data)?;
        let (loss, grads) = self.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            let seed = batch_seed(self.cfg.seed, self.step);
            log::error!(
                "non-finite loss at epoch {}, step {}; batch seed {seed:#018x}",
                self.epoch(),
                self.step
            );
            return Err(Error::Diverged(format!(
                "loss {loss} at epoch {}, step {} (batch seed {seed:#018x})",
                self.epoch(),
                self.step
            )));
        }
        let lr = self.cfg.lr_at(self.epoch());
        let lrs: Vec<f64> = self
            .net
            .params
            .names()
            .iter()
            .map(|n| if TrackerNet::<Float>::is_backbone(n) { lr * self.cfg.backbone_lr_scale } else { lr })
            .collect();
        self.opt.step(self.net.params.tensors_mut(), &grads, &lrs);
        self.step += 1;
        Ok(loss)
    }

    /// Trains one epoch and returns its mean batch loss.
    pub fn train_epoch(&mut self, data: &[SequenceSample]) -> Result<f64> {
        let mut sum = 0.0;
        for _ in 0..self.cfg.steps_per_epoch {
            sum += self.train_step(data)?;
        }
        Ok(sum / self.cfg.steps_per_epoch as f64)
    }

    /// Network weights, optimizer moments and schedule position.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.net.to_checkpoint();
        ck.config = self.cfg.to_pairs();
        ck.set_setting("state.step", self.step.to_string());
        ck.set_setting("state.adam_t", self.opt.t.to_string());
        for (i, name) in self.net.params.names().iter().enumerate() {
            ck.push(&format!("opt.m.{name}"), &self.opt.m[i]);
            ck.push(&format!("opt.v.{name}"), &self.opt.v[i]);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut net_pairs = Vec::new();
        for (k, v) in &ck.config {
            if k.starts_with("state.") {
                continue;
            }
            if NetConfig::KEYS.contains(&k.as_str()) {
                net_pairs.push((k.as_str(), v.as_str()));
            } else if !cfg.set(k, v)? {
                return Err(Error::Format(format!("unknown checkpoint setting {k:?}")));
            }
        }
        cfg.net = NetConfig::from_pairs(net_pairs)?;
        let net = TrackerNet::from_checkpoint(ck)?;
        let mut opt = AdamW::new(&net.params, cfg.weight_decay);
        let parse = |k: &str| -> Result<u64> {
            ck.setting(k)
                .unwrap_or("0")
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint setting {k} is not an integer")))
        };
        opt.t = parse("state.adam_t")?;
        for (i, name) in net.params.names().iter().enumerate() {
            if let Some(m) = ck.tensor(&format!("opt.m.{name}")) {
                opt.m[i] = m?;
            }
            if let Some(v) = ck.tensor(&format!("opt.v.{name}")) {
                opt.v[i] = v?;
            }
        }
        Ok(Self {
            cfg,
            net,
            opt,
            step: parse("state.step")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    /// Mean loss per epoch trained in this run.
    pub epoch_losses: Vec<f64>,
}

pub const LOSS_HEADER: &str = "epoch,loss,lr";

/// Trains until the configured number of epochs, starting from `trainer`.
pub fn train_to_end(mut trainer: Trainer, data: &[SequenceSample]) -> Result<TrainOutcome> {
    let mut epoch_losses = Vec::new();
    while !trainer.is_done() {
        let epoch = trainer.epoch();
        let loss = trainer.train_epoch(data)?;
        log::info!("epoch {epoch}: loss {loss:.6}");
        epoch_losses.push(loss);
    }
    Ok(TrainOutcome { trainer, epoch_losses })
}

/// Training sequences of a dataset directory: `DIR/train` when present,
/// otherwise every sequence in `DIR`.
pub fn load_training_set(dir: &Path) -> Result<Vec<SequenceSample>> {
    let root = if dir.join("train").is_dir() { dir.join("train") } else { dir.to_path_buf() };
    let dirs = list_sequences(&root)?;
    if dirs.is_empty() {
        return Err(Error::Config(format!("no sequences under {}", root.display())));
    }
    dirs.iter().map(|d| read_sequence(d)).collect()
}

/// Path of the loss curve written next to a checkpoint.
pub fn loss_curve_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".loss.csv");
    ckpt.with_file_name(name)
}

/// Trains (or resumes when `resume` is given), writes the checkpoint and the
/// per-epoch loss CSV.
pub fn run_training(cfg: &TrainConfig, data_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let data = load_training_set(data_dir)?;
    let (trainer, first_epoch) = match resume {
        Some(p) => {
            let t = Trainer::load(p)?;
            let e = t.epoch();
            (t, e)
        }
        None => (Trainer::new(cfg.clone())?, 0),
    };
    let outcome = train_to_end(trainer, &data)?;
    outcome.trainer.save(out)?;
    let mut csv = String::from(LOSS_HEADER);
    csv.push('\n');
    for (i, loss) in outcome.epoch_losses.iter().enumerate() {
        let epoch = first_epoch + i;
        let _ = writeln!(csv, "{epoch},{loss},{}", outcome.trainer.cfg.lr_at(epoch));
    }
    fs::write(loss_curve_path(out), csv)?;
    Ok(outcome)
}
