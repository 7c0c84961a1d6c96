//! The tracker network.
//!
//! ```text
//! search crop ─ backbone ─ x ─┬─ head 1 ─ head 2 ─ … ─ prediction head ─ (score, w/h/dx/dy)
//! template    ─ backbone ─ z ─┤    ▲         ▲
//! motion queue ───────────── m ─┴────┴─────────┘   (z, m reach every head unchanged)
//! ```
//!
//! Each head runs a per-stream pre-stack (layer norm, linear to `2C`, 3×3
//! conv, SiLU; the motion stream uses a width-3 temporal conv instead and no
//! norm), correlates the streams and adds the result back onto `x`.
//!
//! The backbone is a small convolutional stand-in, and the prediction head and
//! loss are reconstructions: an anchor-free center map with size/offset
//! regression, trained with BCE against a Gaussian target plus L1.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{contract, dim_check, Error, Result};
use crate::kernels::Pad2d;
use crate::motion::{BoundingBox, MotionMode};
use crate::scalar::Scalar;
use crate::ssm::{SelectiveVars, SelectiveWeights};
use crate::tensor::Tensor;
use crate::xcorr::{same_padding, ssmx_corr_tokens, CorrPlan, ScanOrder, WindowGrid};

/// Ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Variant {
    #[default]
    Baseline,
    /// Motion tokens moved between template and search pairs.
    V1,
    /// No interleaving: `[m, z, x]`.
    V2,
    /// Convolutional cross-correlation instead of the SSM.
    V3,
    /// Motion branch fed zeros.
    V4,
    /// Absolute positions instead of displacements.
    V5,
    /// `T = 120`.
    V6,
    /// `T = 30`.
    V7,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Baseline,
        Variant::V1,
        Variant::V2,
        Variant::V3,
        Variant::V4,
        Variant::V5,
        Variant::V6,
        Variant::V7,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::V4 => "v4",
            Variant::V5 => "v5",
            Variant::V6 => "v6",
            Variant::V7 => "v7",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::Baseline => "CIS [m, z, x_i], SSMX-Corr, displacement motion, T=60",
            Variant::V1 => "w/ CIS [z, m, x_i]",
            Variant::V2 => "w/o CIS, simply cat [m, z, x]",
            Variant::V3 => "w/o SSMX-Corr, w/ ConvX-Corr",
            Variant::V4 => "w/o m",
            Variant::V5 => "w/ m, but raw motion",
            Variant::V6 => "w/ m, T=120",
            Variant::V7 => "w/ m, T=30",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Which operator correlates template and search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorrKind {
    Ssm,
    Conv,
}

/// Network hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub c_feat: usize,
    pub n_heads: usize,
    /// SSM state size `N`.
    pub state_dim: usize,
    /// Motion queue length `T`.
    pub t: usize,
    pub search_size: usize,
    pub template_size: usize,
    pub backbone_stride: usize,
    pub variant: Variant,
    pub scan_order: ScanOrder,
    pub corr: CorrKind,
    pub motion: MotionMode,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            c_feat: 16,
            n_heads: 2,
            state_dim: 8,
            t: 60,
            search_size: 64,
            template_size: 32,
            backbone_stride: 8,
            variant: Variant::Baseline,
            scan_order: ScanOrder::Interleaved,
            corr: CorrKind::Ssm,
            motion: MotionMode::Displacement,
        }
    }
}

/// Channels of the three backbone blocks.
const BACKBONE_CHANNELS: [usize; 3] = [8, 16, 32];
const LN_EPS: f64 = 1e-5;
/// Width of the Gaussian score target, in feature cells.
pub const TARGET_SIGMA_CELLS: f64 = 1.0;

impl NetConfig {
    /// Baseline settings with exactly one dimension changed per variant.
    pub fn for_variant(base: &NetConfig, variant: Variant) -> NetConfig {
        let mut c = NetConfig {
            variant,
            scan_order: ScanOrder::Interleaved,
            corr: CorrKind::Ssm,
            motion: MotionMode::Displacement,
            ..base.clone()
        };
        match variant {
            Variant::Baseline => {}
            Variant::V1 => c.scan_order = ScanOrder::MotionMiddle,
            Variant::V2 => c.scan_order = ScanOrder::Concat,
            Variant::V3 => c.corr = CorrKind::Conv,
            Variant::V4 => c.motion = MotionMode::Off,
            Variant::V5 => c.motion = MotionMode::Raw,
            Variant::V6 => c.t = 120,
            Variant::V7 => c.t = 30,
        }
        c
    }

    /// Hidden width `D = 2C` of the heads.
    pub fn d_inner(&self) -> usize {
        2 * self.c_feat
    }

    pub fn search_feat(&self) -> usize {
        self.search_size / self.backbone_stride
    }

    pub fn template_feat(&self) -> usize {
        self.template_size / self.backbone_stride
    }

    pub fn grid(&self) -> Result<WindowGrid> {
        let (x, z) = (self.search_feat(), self.template_feat());
        WindowGrid::new(x, x, z, z)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.backbone_stride;
        if self.c_feat == 0 || self.n_heads == 0 || self.state_dim == 0 || self.t == 0 {
            return Err(Error::Config(format!(
                "c_feat, n_heads, state_dim and t must be positive (got {}, {}, {}, {})",
                self.c_feat, self.n_heads, self.state_dim, self.t
            )));
        }
        if !(s.is_power_of_two() && (2..=8).contains(&s)) {
            return Err(Error::Config(format!("backbone_stride must be 2, 4 or 8, got {s}")));
        }
        if self.search_size != 2 * self.template_size {
            return Err(Error::Config(format!(
                "search_size ({}) must be twice template_size ({})",
                self.search_size, self.template_size
            )));
        }
        if self.search_size % s != 0 || self.template_size % s != 0 {
            return Err(Error::Config(format!(
                "search {} and template {} must be divisible by backbone stride {s}",
                self.search_size, self.template_size
            )));
        }
        self.grid()?;
        Ok(())
    }

    pub const KEYS: [&'static str; 11] = [
        "c_feat",
        "n_heads",
        "state_dim",
        "t",
        "search_size",
        "template_size",
        "backbone_stride",
        "variant",
        "scan_order",
        "corr",
        "motion",
    ];

    /// `key=value` view; every field is addressable.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let order = match self.scan_order {
            ScanOrder::Interleaved => "interleaved",
            ScanOrder::MotionMiddle => "motion-middle",
            ScanOrder::Concat => "concat",
        };
        let corr = match self.corr {
            CorrKind::Ssm => "ssm",
            CorrKind::Conv => "conv",
        };
        let motion = match self.motion {
            MotionMode::Displacement => "displacement",
            MotionMode::Raw => "raw",
            MotionMode::Off => "off",
        };
        [
            ("c_feat", self.c_feat.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("state_dim", self.state_dim.to_string()),
            ("t", self.t.to_string()),
            ("search_size", self.search_size.to_string()),
            ("template_size", self.template_size.to_string()),
            ("backbone_stride", self.backbone_stride.to_string()),
            ("variant", self.variant.name().to_string()),
            ("scan_order", order.to_string()),
            ("corr", corr.to_string()),
            ("motion", motion.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one `key=value` setting. Returns `false` for unknown keys.
    ///
    /// Setting `variant` resets the variant-controlled fields from the
    /// current baseline values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num(key: &str, v: &str) -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
        }
        match key {
            "c_feat" => self.c_feat = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "state_dim" => self.state_dim = num(key, value)?,
            "t" => self.t = num(key, value)?,
            "search_size" => self.search_size = num(key, value)?,
            "template_size" => self.template_size = num(key, value)?,
            "backbone_stride" => self.backbone_stride = num(key, value)?,
            "variant" => {
                let v: Variant = value.trim().parse()?;
                let base = NetConfig {
                    t: if matches!(self.variant, Variant::V6 | Variant::V7) { 60 } else { self.t },
                    ..self.clone()
                };
                *self = NetConfig::for_variant(&base, v);
            }
            "scan_order" => {
                self.scan_order = match value.trim() {
                    "interleaved" => ScanOrder::Interleaved,
                    "motion-middle" => ScanOrder::MotionMiddle,
                    "concat" => ScanOrder::Concat,
                    v => return Err(Error::Config(format!("unknown scan_order {v:?}"))),
                }
            }
            "corr" => {
                self.corr = match value.trim() {
                    "ssm" => CorrKind::Ssm,
                    "conv" => CorrKind::Conv,
                    v => return Err(Error::Config(format!("unknown corr {v:?}"))),
                }
            }
            "motion" => {
                self.motion = match value.trim() {
                    "displacement" => MotionMode::Displacement,
                    "raw" => MotionMode::Raw,
                    "off" => MotionMode::Off,
                    v => return Err(Error::Config(format!("unknown motion mode {v:?}"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = NetConfig::default();
        let mut explicit = Vec::new();
        for (k, v) in pairs {
            if k == "variant" {
                c.set(k, v)?;
            } else {
                explicit.push((k, v));
            }
        }
        for (k, v) in explicit {
            if !c.set(k, v)? {
                return Err(Error::Config(format!("unknown network key {k:?}")));
            }
        }
        Ok(c)
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for Params<S> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<S: Scalar> Params<S> {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = value,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(value);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters of a [`TrackerNet`] attached to one graph.
pub struct Bound<'g, S> {
    vars: Vec<Var<'g, S>>,
    index: HashMap<String, usize>,
}

impl<'g, S: Scalar> Bound<'g, S> {
    pub fn vars(&self) -> &[Var<'g, S>] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, S>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("no parameter named {name:?}")))
    }

    /// Substitutes the variable used for one parameter.
    pub fn replace(&mut self, name: &str, var: Var<'g, S>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name:?}")))?;
        dim_check!(
            var.shape() == self.vars[i].shape(),
            "{name}: replacement {:?} for {:?}",
            var.shape(),
            self.vars[i].shape()
        );
        self.vars[i] = var;
        Ok(())
    }
}

/// Maps crop-local pixel coordinates to frame coordinates:
/// `global = origin + scale · local`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    pub x0: f64,
    pub y0: f64,
    pub scale: f64,
    /// Side of the square crop, in crop pixels.
    pub size: usize,
}

impl CropTransform {
    /// Crop of `size` output pixels covering `size · scale` frame pixels around `(cx, cy)`.
    /// At unit scale the origin snaps to whole pixels so cropping is an exact copy.
    pub fn centered(cx: f64, cy: f64, size: usize, scale: f64) -> Self {
        let half = scale * size as f64 / 2.0;
        let (mut x0, mut y0) = (cx - half, cy - half);
        if scale == 1.0 {
            x0 = x0.round();
            y0 = y0.round();
        }
        Self { x0, y0, scale, size }
    }

    pub fn to_global(&self, x: f64, y: f64) -> (f64, f64) {
        (self.x0 + self.scale * x, self.y0 + self.scale * y)
    }

    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) / self.scale, (y - self.y0) / self.scale)
    }

    /// Samples a `[1×size×size]` crop of a `[1×H×W]` frame, zero outside.
    pub fn crop<S: Scalar>(&self, frame: &Tensor<S>) -> Result<Tensor<S>> {
        dim_check!(
            frame.ndim() == 3 && frame.shape()[0] == 1,
            "expected a [1×H×W] frame, got {:?}",
            frame.shape()
        );
        let (h, w) = (frame.shape()[1] as isize, frame.shape()[2] as isize);
        let n = self.size;
        let data = frame.data();
        let pix = |r: isize, c: isize| -> S {
            if r < 0 || c < 0 || r >= h || c >= w {
                S::zero()
            } else {
                data[(r * w + c) as usize]
            }
        };
        let mut out = Vec::with_capacity(n * n);
        if self.scale == 1.0 && self.x0.fract() == 0.0 && self.y0.fract() == 0.0 {
            let (ox, oy) = (self.x0 as isize, self.y0 as isize);
            for i in 0..n as isize {
                for j in 0..n as isize {
                    out.push(pix(oy + i, ox + j));
                }
            }
        } else {
            for i in 0..n {
                for j in 0..n {
                    let (gx, gy) = self.to_global(j as f64 + 0.5, i as f64 + 0.5);
                    let (u, v) = (gx - 0.5, gy - 0.5);
                    let (c0, r0) = (u.floor(), v.floor());
                    let (fx, fy) = (S::c(u - c0), S::c(v - r0));
                    let (c0, r0) = (c0 as isize, r0 as isize);
                    let top = pix(r0, c0) * (S::one() - fx) + pix(r0, c0 + 1) * fx;
                    let bot = pix(r0 + 1, c0) * (S::one() - fx) + pix(r0 + 1, c0 + 1) * fx;
                    out.push(top * (S::one() - fy) + bot * fy);
                }
            }
        }
        Tensor::new(&[1, n, n], out)
    }
}

/// Supervision for one search crop.
#[derive(Clone, Debug, PartialEq)]
pub struct Target<S> {
    /// `[1×H×W]` Gaussian heat map.
    pub heat: Tensor<S>,
    /// Flat index of the cell holding the box center.
    pub cell: usize,
    /// `(w, h, dx, dy)` in feature cells at `cell`.
    pub reg: [S; 4],
}

/// Network output for one search crop.
#[derive(Clone, Copy)]
pub struct Output<'g, S> {
    /// `[1×H×W]` center logits.
    pub score: Var<'g, S>,
    /// `[4×H×W]`: `w, h, dx, dy` in feature cells.
    pub reg: Var<'g, S>,
}

/// Inputs each head received, captured during a forward pass.
#[derive(Clone, Debug)]
pub struct HeadTrace<S> {
    pub x: Tensor<S>,
    pub z: Tensor<S>,
    pub m: Tensor<S>,
}

/// Tracker network with its parameters.
#[derive(Clone, Debug)]
pub struct TrackerNet<S> {
    config: NetConfig,
    pub params: Params<S>,
    plan: Option<Rc<CorrPlan>>,
}

fn randn<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl<S: Scalar> TrackerNet<S> {
    /// Freshly initialized network; same `(config, seed)` gives the same weights.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::default();
        let mut c_in = 1;
        for (i, &c_out) in BACKBONE_CHANNELS.iter().enumerate() {
            p.insert(format!("backbone.conv{i}.w"), randn(&[c_out, c_in, 3, 3], c_in * 9, &mut rng));
            p.insert(format!("backbone.conv{i}.b"), Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        let (c, d) = (config.c_feat, config.d_inner());
        p.insert("backbone.proj.w", randn(&[c_in, c], c_in, &mut rng));
        p.insert("backbone.proj.b", Tensor::zeros(&[c]));
        let (sx, sz) = (config.search_feat(), config.template_feat());
        p.insert("pos.search", Tensor::randn(&[sx * sx, c], 0.02, &mut rng));
        p.insert("pos.template", Tensor::randn(&[sz * sz, c], 0.02, &mut rng));
        for k in 0..config.n_heads {
            let h = format!("head{k}");
            p.insert(format!("{h}.ln.g"), Tensor::ones(&[c]));
            p.insert(format!("{h}.ln.b"), Tensor::zeros(&[c]));
            p.insert(format!("{h}.in.w"), randn(&[c, d], c, &mut rng));
            p.insert(format!("{h}.in.b"), Tensor::zeros(&[d]));
            p.insert(format!("{h}.conv.w"), randn(&[d, d, 3, 3], d * 9, &mut rng));
            p.insert(format!("{h}.conv.b"), Tensor::zeros(&[d]));
            p.insert(format!("{h}.m.w"), randn(&[2, d], 2, &mut rng));
            p.insert(format!("{h}.m.b"), Tensor::zeros(&[d]));
            p.insert(format!("{h}.mconv.w"), randn(&[d, d, 3], d * 3, &mut rng));
            p.insert(format!("{h}.mconv.b"), Tensor::zeros(&[d]));
            if config.corr == CorrKind::Ssm {
                for dir in 0..4 {
                    let w = SelectiveWeights::<S>::init(d, config.state_dim, &mut rng);
                    let s = format!("{h}.ssm{dir}");
                    p.insert(format!("{s}.w_b"), w.w_b);
                    p.insert(format!("{s}.w_c"), w.w_c);
                    p.insert(format!("{s}.w_delta"), w.w_delta);
                    p.insert(format!("{s}.delta_bias"), w.delta_bias);
                    p.insert(format!("{s}.a_log"), w.a_log);
                }
            }
            p.insert(format!("{h}.out.w"), Tensor::randn(&[d, c], 0.5 / (d as f64).sqrt(), &mut rng));
        }
        p.insert("pred.conv.w", randn(&[c, c, 3, 3], c * 9, &mut rng));
        p.insert("pred.conv.b", Tensor::zeros(&[c]));
        p.insert("pred.out.w", Tensor::randn(&[5, c, 3, 3], 0.1 / ((c * 9) as f64).sqrt(), &mut rng));
        p.insert("pred.out.b", Tensor::zeros(&[5]));
        Self::with_params(config, p)
    }

    /// Wraps existing parameters; names and shapes must match the config.
    pub fn with_params(config: NetConfig, params: Params<S>) -> Result<Self> {
        config.validate()?;
        let plan = match config.corr {
            CorrKind::Ssm => Some(Rc::new(CorrPlan::new(config.grid()?, config.scan_order, config.t))),
            CorrKind::Conv => None,
        };
        Ok(Self { config, params, plan })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Whether a parameter belongs to the backbone (trained at a reduced rate).
    pub fn is_backbone(name: &str) -> bool {
        name.starts_with("backbone.")
    }

    /// Attaches all parameters to `g`, as trainable leaves or as constants.
    pub fn bind<'g>(&self, g: &'g Graph<S>, trainable: bool) -> Bound<'g, S> {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound {
            vars,
            index: self.params.index.clone(),
        }
    }

    /// `[1×H×W]` image to `[H/s·W/s × C]` feature tokens.
    pub fn backbone_tokens<'g>(&self, b: &Bound<'g, S>, image: Var<'g, S>) -> Result<Var<'g, S>> {
        let shape = image.shape();
        let s = self.config.backbone_stride;
        if shape.len() != 3 || shape[0] != 1 || shape[1] % s != 0 || shape[2] % s != 0 {
            return Err(Error::Config(format!(
                "backbone input {shape:?} must be [1×H×W] with H, W divisible by stride {s}"
            )));
        }
        let strided = s.trailing_zeros() as usize;
        let mut x = image;
        for i in 0..BACKBONE_CHANNELS.len() {
            let w = b.get(&format!("backbone.conv{i}.w"))?;
            let bias = b.get(&format!("backbone.conv{i}.b"))?;
            x = if i < strided {
                // Even input, stride 2: pad one pixel at the far edges only.
                let pad = Pad2d {
                    top: 0,
                    left: 0,
                    bottom: 1,
                    right: 1,
                };
                x.conv2d_padded(w, Some(bias), 2, pad)?
            } else {
                x.conv2d(w, Some(bias), 1, 1)?
            }
            .silu();
        }
        let ch = x.shape();
        let tokens = x.reshape(&[ch[0], ch[1] * ch[2]])?.t()?;
        tokens
            .matmul(b.get("backbone.proj.w")?)?
            .add_bias(b.get("backbone.proj.b")?)
    }

    /// Backbone features as a `[C×H/s×W/s]` map.
    pub fn backbone(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        let tok = self.backbone_tokens(&b, g.constant(image.clone()))?;
        let s = self.config.backbone_stride;
        let (h, w) = (image.shape()[1] / s, image.shape()[2] / s);
        let c = self.config.c_feat;
        tok.t()?.value().into_shape(&[c, h, w])
    }

    fn pre_stack<'g>(&self, b: &Bound<'g, S>, k: usize, tokens: Var<'g, S>, side: usize) -> Result<Var<'g, S>> {
        let h = format!("head{k}");
        let d = self.config.d_inner();
        let y = tokens
            .layernorm(b.get(&format!("{h}.ln.g"))?, b.get(&format!("{h}.ln.b"))?, S::c(LN_EPS))?
            .matmul(b.get(&format!("{h}.in.w"))?)?
            .add_bias(b.get(&format!("{h}.in.b"))?)?;
        let map = y.t()?.reshape(&[d, side, side])?.conv2d(
            b.get(&format!("{h}.conv.w"))?,
            Some(b.get(&format!("{h}.conv.b"))?),
            1,
            1,
        )?;
        Ok(map.reshape(&[d, side * side])?.t()?.silu())
    }

    fn motion_stack<'g>(&self, b: &Bound<'g, S>, k: usize, m: Var<'g, S>) -> Result<Var<'g, S>> {
        let h = format!("head{k}");
        let y = m
            .scale(S::c(1.0 / self.config.template_size as f64))
            .matmul(b.get(&format!("{h}.m.w"))?)?
            .add_bias(b.get(&format!("{h}.m.b"))?)?
            .conv1d(b.get(&format!("{h}.mconv.w"))?, Some(b.get(&format!("{h}.mconv.b"))?))?;
        Ok(y.silu())
    }

    /// One head: `x + proj(corr(pre(z), pre(x), pre_m(m)))`.
    ///
    /// `x` is `[H_x·W_x × C]`, `z` is `[H_z·W_z × C]`, `m` is the raw `[T×2]`
    /// motion sequence in pixels.
    pub fn mamba_head<'g>(
        &self,
        b: &Bound<'g, S>,
        k: usize,
        x: Var<'g, S>,
        z: Var<'g, S>,
        m: Var<'g, S>,
    ) -> Result<Var<'g, S>> {
        contract!(k < self.config.n_heads, "head {k} of {}", self.config.n_heads);
        let (sx, sz) = (self.config.search_feat(), self.config.template_feat());
        let d = self.config.d_inner();
        let xp = self.pre_stack(b, k, x, sx)?;
        let zp = self.pre_stack(b, k, z, sz)?;
        let corr = match self.config.corr {
            CorrKind::Ssm => {
                let mp = self.motion_stack(b, k, m)?;
                let dirs = (0..4)
                    .map(|dir| {
                        let s = format!("head{k}.ssm{dir}");
                        Ok(SelectiveVars {
                            w_b: b.get(&format!("{s}.w_b"))?,
                            w_c: b.get(&format!("{s}.w_c"))?,
                            w_delta: b.get(&format!("{s}.w_delta"))?,
                            delta_bias: b.get(&format!("{s}.delta_bias"))?,
                            a_log: b.get(&format!("{s}.a_log"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let plan = self.plan.as_ref().ok_or_else(|| Error::Contract("missing scan plan".into()))?;
                ssmx_corr_tokens(zp, xp, mp, &dirs, plan)?
            }
            CorrKind::Conv => {
                let kernel = zp.t()?.reshape(&[1, d, sz, sz])?;
                let xmap = xp.t()?.reshape(&[d, sx, sx])?;
                let sim = xmap
                    .conv2d_padded(kernel, None, 1, same_padding(sz, sz))?
                    .reshape(&[sx * sx])?
                    .scale(S::c(1.0 / (d * sz * sz) as f64));
                xp.mul_rows(sim)?
            }
        };
        x.add(corr.matmul(b.get(&format!("head{k}.out.w"))?)?)
    }

    /// Center logits and regression maps from search tokens.
    pub fn prediction_head<'g>(&self, b: &Bound<'g, S>, x: Var<'g, S>) -> Result<Output<'g, S>> {
        let (c, side) = (self.config.c_feat, self.config.search_feat());
        let y = x
            .t()?
            .reshape(&[c, side, side])?
            .conv2d(b.get("pred.conv.w")?, Some(b.get("pred.conv.b")?), 1, 1)?
            .silu()
            .conv2d(b.get("pred.out.w")?, Some(b.get("pred.out.b")?), 1, 1)?;
        let plane = side * side;
        let score: Rc<[usize]> = (0..plane).collect();
        let reg: Rc<[usize]> = (plane..5 * plane).collect();
        Ok(Output {
            score: y.gather(score)?.reshape(&[1, side, side])?,
            reg: y.gather(reg)?.reshape(&[4, side, side])?,
        })
    }

    /// Motion sequence actually fed to the heads for a queue snapshot.
    pub fn motion_input(&self, m: &Tensor<S>) -> Tensor<S> {
        match self.config.motion {
            MotionMode::Off => Tensor::zeros(&[self.config.t, 2]),
            _ => m.clone(),
        }
    }

    /// Full forward pass on graph `g`.
    pub fn forward_graph<'g>(
        &self,
        b: &Bound<'g, S>,
        search: Var<'g, S>,
        template: Var<'g, S>,
        motion: Var<'g, S>,
        mut trace: Option<&mut Vec<HeadTrace<S>>>,
    ) -> Result<Output<'g, S>> {
        dim_check!(
            search.shape() == [1, self.config.search_size, self.config.search_size]
                && template.shape() == [1, self.config.template_size, self.config.template_size],
            "search {:?} / template {:?} for sizes {} / {}",
            search.shape(),
            template.shape(),
            self.config.search_size,
            self.config.template_size
        );
        dim_check!(
            motion.shape() == [self.config.t, 2],
            "motion sequence {:?}, expected [{}, 2]",
            motion.shape(),
            self.config.t
        );
        // Learned per-position offsets: the shallow backbone alone carries
        // almost no absolute position.
        let mut x = self.backbone_tokens(b, search)?.add(b.get("pos.search")?)?;
        let z = self.backbone_tokens(b, template)?.add(b.get("pos.template")?)?;
        for k in 0..self.config.n_heads {
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(HeadTrace {
                    x: x.value(),
                    z: z.value(),
                    m: motion.value(),
                });
            }
            x = self.mamba_head(b, k, x, z, motion)?;
        }
        self.prediction_head(b, x)
    }

    /// Inference: `(score [1×H×W], reg [4×H×W])` for one search crop.
    pub fn forward(&self, search: &Tensor<S>, template: &Tensor<S>, motion: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        let m = g.constant(self.motion_input(motion));
        let out = self.forward_graph(&b, g.constant(search.clone()), g.constant(template.clone()), m, None)?;
        Ok((out.score.value(), out.reg.value()))
    }

    /// Like [`forward`](Self::forward), also returning what every head received.
    #[allow(clippy::type_complexity)]
    pub fn forward_traced(
        &self,
        search: &Tensor<S>,
        template: &Tensor<S>,
        motion: &Tensor<S>,
    ) -> Result<((Tensor<S>, Tensor<S>), Vec<HeadTrace<S>>)> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        let m = g.constant(self.motion_input(motion));
        let mut trace = Vec::new();
        let out = self.forward_graph(
            &b,
            g.constant(search.clone()),
            g.constant(template.clone()),
            m,
            Some(&mut trace),
        )?;
        Ok(((out.score.value(), out.reg.value()), trace))
    }

    /// Supervision for a ground-truth box seen through `crop`; `None` when the
    /// box center falls outside the search region.
    pub fn encode(&self, gt: &BoundingBox, crop: &CropTransform) -> Option<Target<S>> {
        encode_target(gt, crop, self.config.backbone_stride, self.config.search_feat())
    }

    pub fn decode(&self, score: &Tensor<S>, reg: &Tensor<S>, crop: &CropTransform) -> BoundingBox {
        decode(score, reg, crop, self.config.backbone_stride)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            config: self.config.to_pairs(),
            tensors: Vec::new(),
        };
        for (name, t) in self.params.iter() {
            ck.push(name, t);
        }
        ck
    }

    /// Rebuilds a network; parameter names and shapes are checked against a
    /// fresh network of the embedded config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = NetConfig::from_pairs(
            ck.config
                .iter()
                .filter(|(k, _)| NetConfig::KEYS.contains(&k.as_str()))
                .map(|(k, v)| (k.as_str(), v.as_str())),
        )?;
        let mut net = Self::new(config, 0)?;
        for i in 0..net.params.len() {
            let name = net.params.names[i].clone();
            let t = ck
                .tensor::<S>(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name:?}")))??;
            if t.shape() != net.params.tensors[i].shape() {
                return Err(Error::Format(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    net.params.tensors[i].shape()
                )));
            }
            net.params.tensors[i] = t;
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Training loss for one sample: mean BCE of the center logits against the
/// Gaussian heat map plus the L1 norm of the regression error at the center cell.
pub fn loss_graph<'g, S: Scalar>(out: &Output<'g, S>, target: &Target<S>) -> Result<Var<'g, S>> {
    let bce = out.score.bce_with_logits(&target.heat)?;
    let plane = target.heat.numel();
    let idx: Rc<[usize]> = (0..4).map(|k| k * plane + target.cell).collect();
    let g = out.reg.graph();
    let t = g.constant(Tensor::new(&[4], target.reg.to_vec())?);
    let l1 = out.reg.gather(idx)?.sub(t)?.abs().sum();
    bce.add(l1)
}

/// Loss value for given output maps.
pub fn loss<S: Scalar>(score: &Tensor<S>, reg: &Tensor<S>, target: &Target<S>) -> Result<S> {
    let g = Graph::new();
    let out = Output {
        score: g.constant(score.clone()),
        reg: g.constant(reg.clone()),
    };
    Ok(loss_graph(&out, target)?.item())
}

pub fn encode_target<S: Scalar>(
    gt: &BoundingBox,
    crop: &CropTransform,
    stride: usize,
    side: usize,
) -> Option<Target<S>> {
    let (gx, gy) = gt.center();
    let (lx, ly) = crop.to_local(gx, gy);
    let s = stride as f64;
    let (u, v) = (lx / s, ly / s);
    if !(u >= 0.0 && v >= 0.0 && u < side as f64 && v < side as f64) {
        return None;
    }
    let (c, r) = (u.floor() as usize, v.floor() as usize);
    let two_var = 2.0 * TARGET_SIGMA_CELLS * TARGET_SIGMA_CELLS;
    let heat = Tensor::from_fn(&[1, side, side], |i| {
        let (rr, cc) = ((i / side) as f64 + 0.5, (i % side) as f64 + 0.5);
        S::c((-((cc - u).powi(2) + (rr - v).powi(2)) / two_var).exp())
    });
    let cell_scale = s * crop.scale;
    Some(Target {
        heat,
        cell: r * side + c,
        reg: [
            S::c(gt.w / cell_scale),
            S::c(gt.h / cell_scale),
            S::c(u - (c as f64 + 0.5)),
            S::c(v - (r as f64 + 0.5)),
        ],
    })
}

/// Smallest box side a decoded prediction may have, in frame pixels.
pub const MIN_BOX_SIDE: f64 = 1.0;

/// Argmax cell (ties: lowest row, then lowest column) plus its regressed
/// offset and size, mapped to frame coordinates.
pub fn decode<S: Scalar>(score: &Tensor<S>, reg: &Tensor<S>, crop: &CropTransform, stride: usize) -> BoundingBox {
    let side = score.shape()[score.ndim() - 1];
    let plane = score.numel();
    let mut best = 0;
    for (i, &v) in score.data().iter().enumerate() {
        if v > score.data()[best] {
            best = i;
        }
    }
    let (r, c) = (best / side, best % side);
    let at = |k: usize| reg.data()[k * plane + best].as_f64();
    let s = stride as f64;
    let lx = (c as f64 + 0.5 + at(2)) * s;
    let ly = (r as f64 + 0.5 + at(3)) * s;
    let (gx, gy) = crop.to_global(lx, ly);
    let w = (at(0) * s * crop.scale).max(MIN_BOX_SIDE);
    let h = (at(1) * s * crop.scale).max(MIN_BOX_SIDE);
    BoundingBox {
        w,
        h,
        cx: gx - w / 2.0,
        cy: gy - h / 2.0,
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SSMXTRK1";

/// Serialized weights: named f32 arrays plus `key=value` settings.
///
/// File layout: the magic `SSMXTRK1`, a little-endian `u32` manifest length,
/// the manifest text, then the little-endian f32 blob. The manifest holds
/// `# key=value` lines followed by one `name shape offset` line per array,
/// with `shape` written as `d0xd1x…` and `offset` in bytes into the blob.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn push<S: Scalar>(&mut self, name: &str, t: &Tensor<S>) {
        let data = t.data().iter().map(|v| v.as_f64() as f32).collect();
        self.tensors.push((name.to_string(), t.shape().to_vec(), data));
    }

    pub fn setting(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_setting(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.config.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.config.push((key.to_string(), value)),
        }
    }

    pub fn tensor<S: Scalar>(&self, name: &str) -> Option<Result<Tensor<S>>> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, shape, data)| Tensor::new(shape, data.iter().map(|&v| S::c(v as f64)).collect()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        for (k, v) in &self.config {
            contract!(
                !k.contains(['=', '\n']) && !v.contains('\n'),
                "setting {k:?}={v:?} cannot be stored"
            );
            manifest.push_str(&format!("# {k}={v}\n"));
        }
        let mut offset = 0usize;
        for (name, shape, data) in &self.tensors {
            contract!(
                !name.is_empty() && !name.contains(char::is_whitespace),
                "tensor name {name:?} cannot be stored"
            );
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            manifest.push_str(&format!("{name} {} {offset}\n", dims.join("x")));
            offset += 4 * data.len();
        }
        let mlen = u32::try_from(manifest.len()).map_err(|_| Error::Format("manifest too large".into()))?;
        let mut out = Vec::with_capacity(12 + manifest.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&mlen.to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing SSMXTRK1 header"));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let manifest = bytes
            .get(12..12 + mlen)
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;
        let blob = &bytes[12 + mlen..];
        let mut ck = Checkpoint::default();
        let mut expected = 0usize;
        for line in manifest.lines() {
            if let Some(setting) = line.strip_prefix("# ") {
                let (k, v) = setting.split_once('=').ok_or_else(|| bad("malformed setting line"))?;
                ck.config.push((k.to_string(), v.to_string()));
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            let [name, shape, offset] = parts[..] else {
                return Err(bad(&format!("malformed manifest line {line:?}")));
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(&format!("bad shape in {line:?}"))))
                .collect::<Result<_>>()?;
            let offset: usize = offset.parse().map_err(|_| bad(&format!("bad offset in {line:?}")))?;
            if offset != expected {
                return Err(bad(&format!("{name}: offset {offset}, expected {expected}")));
            }
            let n: usize = shape.iter().product();
            let raw = blob
                .get(offset..offset + 4 * n)
                .ok_or_else(|| bad(&format!("{name}: blob too short")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            expected = offset + 4 * n;
            ck.tensors.push((name.to_string(), shape, data));
        }
        if expected != blob.len() {
            return Err(bad(&format!(
                "manifest covers {expected} blob bytes, file has {}",
                blob.len()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            c_feat: 4,
            n_heads: 2,
            state_dim: 2,
            t: 3,
            search_size: 16,
            template_size: 8,
            backbone_stride: 4,
            ..NetConfig::default()
        }
    }

    #[test]
    fn shapes_for_desk_config() {
        let net = TrackerNet::<f64>::new(NetConfig::default(), 1).unwrap();
        let s = Tensor::full(&[1, 64, 64], 0.3);
        let z = Tensor::full(&[1, 32, 32], 0.3);
        assert_eq!(net.backbone(&s).unwrap().shape(), &[16, 8, 8]);
        assert_eq!(net.backbone(&z).unwrap().shape(), &[16, 4, 4]);
        let (score, reg) = net.forward(&s, &z, &Tensor::zeros(&[60, 2])).unwrap();
        assert_eq!(score.shape(), &[1, 8, 8]);
        assert_eq!(reg.shape(), &[4, 8, 8]);
    }

    #[test]
    fn config_validation() {
        let mut c = NetConfig::default();
        c.search_size = 60;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let net = TrackerNet::<f64>::new(tiny(), 0).unwrap();
        assert!(matches!(
            net.backbone(&Tensor::zeros(&[1, 18, 16])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_pairs_round_trip() {
        for v in Variant::ALL {
            let c = NetConfig::for_variant(&NetConfig::default(), v);
            let pairs = c.to_pairs();
            let back = NetConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn decode_one_hot_and_ties() {
        let crop = CropTransform::centered(100.0, 50.0, 64, 1.0);
        let mut score = Tensor::<f64>::zeros(&[1, 8, 8]);
        score.set(&[0, 2, 5], 3.0);
        let reg = Tensor::zeros(&[4, 8, 8]);
        let b = decode(&score, &reg, &crop, 8);
        let (x, y) = b.center();
        assert_eq!((x, y), (crop.x0 + 44.0, crop.y0 + 20.0));

        let flat = Tensor::<f64>::full(&[1, 8, 8], 0.7);
        let (x, y) = decode(&flat, &reg, &crop, 8).center();
        assert_eq!((x, y), (crop.x0 + 4.0, crop.y0 + 4.0));
    }

    #[test]
    fn encode_outside_is_none() {
        let crop = CropTransform::centered(32.0, 32.0, 64, 1.0);
        let far = BoundingBox::centered(200.0, 10.0, 8.0, 8.0).unwrap();
        assert!(encode_target::<f64>(&far, &crop, 8, 8).is_none());
    }

    #[test]
    fn crop_is_exact_copy_at_unit_scale() {
        let frame = Tensor::<f64>::from_fn(&[1, 10, 12], |i| i as f64);
        let crop = CropTransform::centered(6.0, 5.0, 4, 1.0);
        let out = crop.crop(&frame).unwrap();
        assert_eq!(out.at(&[0, 0, 0]), frame.at(&[0, 3, 4]));
        let edge = CropTransform::centered(0.0, 0.0, 4, 1.0).crop(&frame).unwrap();
        assert_eq!(edge.at(&[0, 0, 0]), 0.0);
        assert_eq!(edge.at(&[0, 2, 2]), 0.0);
        // Fractional origin: bilinear between neighbours.
        let half = CropTransform {
            x0: 3.5,
            y0: 3.0,
            scale: 1.0,
            size: 2,
        };
        let v = half.crop(&frame).unwrap().at(&[0, 0, 0]);
        assert!((v - (frame.at(&[0, 3, 3]) + frame.at(&[0, 3, 4])) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let net = TrackerNet::<f64>::new(tiny(), 3).unwrap();
        let mut bytes = net.to_checkpoint().to_bytes().unwrap();
        bytes.pop();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }
}
