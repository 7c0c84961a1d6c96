//! Self-checks runnable from the command line, each against a brute-force
//! reference computed here with plain loops.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{concat_rows, grad_check, Var};
use crate::error::{Error, Result};
use crate::harness::metrics::{metric_auc, metric_p, metric_pnorm, AUC_CEILING, AUC_STEPS};
use crate::motion::BoundingBox;
use crate::net::{loss_graph, CorrKind, NetConfig, Target, TrackerNet};
use crate::ssm::{
    discretize, kernel_apply, lti_kernel, recurrent_scan, SelectiveParams, SelectiveVars, SelectiveWeights, StateMatrix,
};
use crate::tensor::Tensor;
use crate::xcorr::{
    cis_inverse, cis_scan, conv_xcorr, fold, unfold, Direction, ScanLayout, ScanOrder, Segment, WindowGrid,
};
use crate::Pad2d;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    ScanEquiv,
    Grad,
    Cis,
    Fold,
    Xcorr,
    Metrics,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 7] = ["scan-equiv", "grad", "cis", "fold", "xcorr", "metrics", "all"];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "scan-equiv" => Suite::ScanEquiv,
            "grad" => Suite::Grad,
            "cis" => Suite::Cis,
            "fold" => Suite::Fold,
            "xcorr" => Suite::Xcorr,
            "metrics" => Suite::Metrics,
            "all" => Suite::All,
            _ => {
                return Err(Error::Config(format!(
                    "unknown suite {s:?}; expected one of {}",
                    Suite::NAMES.join(", ")
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn outcome(name: &str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult {
            name: name.into(),
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name: name.into(),
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run_suite(suite: Suite) -> Vec<CheckResult> {
    match suite {
        Suite::ScanEquiv => vec![outcome("lti scan vs kernel", scan_equiv(100, 7))],
        Suite::Grad => grad_suite(),
        Suite::Cis => vec![
            outcome("cis bijection", cis_bijection()),
            outcome("cis tag counts", cis_tags()),
        ],
        Suite::Fold => vec![
            outcome("fold of unfold", fold_identity()),
            outcome("fold weights sum to one", fold_weights()),
        ],
        Suite::Xcorr => vec![outcome("conv xcorr vs loops", xcorr_oracle(50, 11))],
        Suite::Metrics => vec![
            outcome("metric recount", metrics_oracle(100, 13)),
            outcome("ground-truth calibration", calibration()),
        ],
        Suite::All => [
            Suite::ScanEquiv,
            Suite::Grad,
            Suite::Cis,
            Suite::Fold,
            Suite::Xcorr,
            Suite::Metrics,
        ]
        .into_iter()
        .flat_map(run_suite)
        .collect(),
    }
}

/// Random time-invariant systems: recurrence against the unrolled kernel.
pub fn scan_equiv(trials: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(1..=16);
        let d = rng.random_range(1..=4);
        let l = rng.random_range(1..=64);
        let a = StateMatrix::new(Tensor::uniform(&[d, n], -2.0, 1.5, &mut rng))?;
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let delta: Vec<f64> = (0..d).map(|_| rng.random_range(0.001..0.5)).collect();
        let params = SelectiveParams::constant(&b, &c, &delta, l)?;
        let sys = discretize(&a, &params)?;
        let u = Tensor::randn(&[l, d], 1.0, &mut rng);
        let y = recurrent_scan(&sys, &params, &u, None)?;
        let k = lti_kernel(&sys, &params, l)?;
        let yk = kernel_apply(&k, &u)?;
        let mut direct = 0.0f64;
        for t in 0..l {
            for ch in 0..d {
                let mut acc = 0.0;
                for j in 0..=t {
                    acc += k.data()[j * d + ch] * u.data()[(t - j) * d + ch];
                }
                direct = direct.max((acc - yk.data()[t * d + ch]).abs());
            }
        }
        worst = worst.max(y.max_abs_diff(&yk)).max(direct);
    }
    Ok((worst < 1e-9, format!("{trials} systems, max |diff| {worst:.3e}")))
}

fn cis_shapes() -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for h in 1..=8 {
        for w in 1..=8 {
            for &t in &[0, 1, 60] {
                out.push((h, w, t));
            }
        }
    }
    out
}

pub fn cis_bijection() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut cases = 0;
    for (h, w, t) in cis_shapes() {
        let c = rng.random_range(1..=3);
        let z = Tensor::<f64>::randn(&[c, h, w], 1.0, &mut rng);
        let x = Tensor::randn(&[c, h, w], 1.0, &mut rng);
        let m = Tensor::randn(&[t, c], 1.0, &mut rng);
        for dir in Direction::ALL {
            for order in [ScanOrder::Interleaved, ScanOrder::MotionMiddle, ScanOrder::Concat] {
                let layout = ScanLayout::new(dir, order, h, w, t);
                let seq = cis_scan(&z, &x, &m, &layout)?;
                let (zh, xh, mh) = cis_inverse(&seq, &layout)?;
                let same = |a: &Tensor<f64>, b: &Tensor<f64>| {
                    a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits())
                };
                if !(same(&zh, &z) && same(&xh, &x) && (t == 0 || same(&mh, &m))) {
                    return Ok((false, format!("{dir:?}/{order:?} {h}x{w} T={t} is not inverted exactly")));
                }
                cases += 1;
            }
        }
    }
    Ok((true, format!("{cases} layouts inverted bit-exactly")))
}

pub fn cis_tags() -> Result<(bool, String)> {
    for (h, w, t) in cis_shapes() {
        for dir in Direction::ALL {
            let layout = ScanLayout::new(dir, ScanOrder::Interleaved, h, w, t);
            let tags = layout.segment_tags();
            let count = |s: Segment| tags.iter().filter(|&&x| x == s).count();
            let p = h * w;
            let ok = tags.len() == t + 2 * p
                && count(Segment::Motion) == t
                && count(Segment::Template) == p
                && count(Segment::Search) == p
                && tags[..t].iter().all(|&s| s == Segment::Motion)
                && tags[t..]
                    .chunks(2)
                    .all(|pair| pair == [Segment::Template, Segment::Search]);
            if !ok {
                return Ok((false, format!("{dir:?} {h}x{w} T={t}: wrong tag pattern")));
            }
        }
    }
    Ok((true, "motion prefix then alternating template/search in every layout".into()))
}

/// Search/template sizes used by the network and its tests.
pub const FOLD_GRIDS: [(usize, usize); 5] = [(8, 4), (16, 8), (4, 2), (6, 4), (12, 4)];

pub fn fold_identity() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for (hx, hz) in FOLD_GRIDS {
        let grid = WindowGrid::new(hx, hx, hz, hz)?;
        let x = Tensor::<f64>::randn(&[3, hx, hx], 1.0, &mut rng);
        let back = fold(&unfold(&x, &grid)?, &grid)?;
        let diff = back.max_abs_diff(&x);
        if diff > 1e-12 {
            return Ok((false, format!("{hx}/{hz}: fold(unfold(x)) differs by {diff:.3e}")));
        }
    }
    let n9 = WindowGrid::new(8, 8, 4, 4)?.len();
    Ok((n9 == 9, format!("identity on {} grids; 2x template grid has {n9} windows", FOLD_GRIDS.len())))
}

pub fn fold_weights() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for (hx, hz) in FOLD_GRIDS {
        let grid = WindowGrid::new(hx, hx, hz, hz)?;
        let cover = grid.coverage();
        let mut sums = vec![0.0f64; hx * hx];
        for k in 0..grid.len() {
            for p in 0..hz * hz {
                let src = grid.source_pixel(k, p);
                sums[src] += 1.0 / cover[src] as f64;
            }
        }
        worst = sums.iter().fold(worst, |w, s| w.max((s - 1.0).abs()));
    }
    Ok((worst < 1e-12, format!("max |sum - 1| {worst:.3e}")))
}

/// Loop-based `Σ_c Σ_i Σ_j z[c,i,j]·x[c,r+i,s+j]`.
pub fn xcorr_reference(z: &Tensor<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let (c, hz, wz) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let (hx, wx) = (x.shape()[1], x.shape()[2]);
    let (ho, wo) = (hx - hz + 1, wx - wz + 1);
    let mut out = Tensor::zeros(&[1, ho, wo]);
    for r in 0..ho {
        for s in 0..wo {
            let mut acc = 0.0;
            for ch in 0..c {
                for i in 0..hz {
                    for j in 0..wz {
                        acc += z.at(&[ch, i, j]) * x.at(&[ch, r + i, s + j]);
                    }
                }
            }
            out.set(&[0, r, s], acc);
        }
    }
    out
}

pub fn xcorr_oracle(trials: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let c = rng.random_range(1..=4);
        let (hz, wz) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let (hx, wx) = (hz + rng.random_range(0..=6), wz + rng.random_range(0..=6));
        let z = Tensor::randn(&[c, hz, wz], 1.0, &mut rng);
        let x = Tensor::randn(&[c, hx, wx], 1.0, &mut rng);
        worst = worst.max(conv_xcorr(&z, &x)?.max_abs_diff(&xcorr_reference(&z, &x)));
    }
    Ok((worst < 1e-12, format!("{trials} pairs, max |diff| {worst:.3e}")))
}

fn recount_auc(pred: &[BoundingBox], gt: &[BoundingBox]) -> f64 {
    let mut total = 0.0;
    for k in 0..=AUC_STEPS {
        let t = k as f64 / AUC_STEPS as f64;
        let mut hits = 0usize;
        for i in 0..pred.len() {
            let (a, b) = (&pred[i], &gt[i]);
            let ix = ((a.cx + a.w).min(b.cx + b.w) - a.cx.max(b.cx)).max(0.0);
            let iy = ((a.cy + a.h).min(b.cy + b.h) - a.cy.max(b.cy)).max(0.0);
            let inter = ix * iy;
            let iou = (inter / (a.w * a.h + b.w * b.h - inter)).min(1.0);
            if iou > t {
                hits += 1;
            }
        }
        total += hits as f64 / pred.len() as f64;
    }
    100.0 * total / (AUC_STEPS + 1) as f64
}

pub fn metrics_oracle(trials: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let n = rng.random_range(1..=30);
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for _ in 0..n {
            let g = BoundingBox::new(
                rng.random_range(2.0..20.0),
                rng.random_range(2.0..20.0),
                rng.random_range(0.0..100.0),
                rng.random_range(0.0..100.0),
            )?;
            let p = BoundingBox::new(
                rng.random_range(2.0..20.0),
                rng.random_range(2.0..20.0),
                g.cx + rng.random_range(-30.0..30.0),
                g.cy + rng.random_range(-30.0..30.0),
            )?;
            pred.push(p);
            gt.push(g);
        }
        let pc: Vec<(f64, f64)> = pred.iter().map(|b| (b.cx + b.w / 2.0, b.cy + b.h / 2.0)).collect();
        let gc: Vec<(f64, f64)> = gt.iter().map(|b| (b.cx + b.w / 2.0, b.cy + b.h / 2.0)).collect();
        let mut hits = 0usize;
        let mut area = 0.0;
        for i in 0..n {
            let (dx, dy) = (pc[i].0 - gc[i].0, pc[i].1 - gc[i].1);
            if (dx * dx + dy * dy).sqrt() < 20.0 {
                hits += 1;
            }
            let e = ((dx / gt[i].w).powi(2) + (dy / gt[i].h).powi(2)).sqrt();
            if e < 0.5 {
                area += 0.5 - e;
            }
        }
        let p_ref = 100.0 * hits as f64 / n as f64;
        let pn_ref = 200.0 * area / n as f64;
        let auc_ref = recount_auc(&pred, &gt);
        let (p, pn, auc) = (metric_p(&pc, &gc, 20.0)?, metric_pnorm(&pc, &gt)?, metric_auc(&pred, &gt)?);
        if p != p_ref || pn != pn_ref || auc != auc_ref {
            return Ok((
                false,
                format!("instance {trial}: P {p} vs {p_ref}, P_norm {pn} vs {pn_ref}, AUC {auc} vs {auc_ref}"),
            ));
        }
    }
    Ok((true, format!("{trials} instances match exactly")))
}

pub fn calibration() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let gt: Vec<BoundingBox> = (0..50)
        .map(|_| BoundingBox::new(8.0, 8.0, rng.random_range(0.0..200.0), rng.random_range(0.0..100.0)))
        .collect::<Result<_>>()?;
    let centers: Vec<(f64, f64)> = gt.iter().map(BoundingBox::center).collect();
    let p = metric_p(&centers, &centers, 20.0)?;
    let auc = metric_auc(&gt, &gt)?;
    Ok((
        p == 100.0 && (auc - AUC_CEILING).abs() < 1e-9,
        format!("P {p:.2}, AUC {auc:.4} (ceiling {AUC_CEILING:.4})"),
    ))
}

/// Largest relative error allowed between tape and finite-difference gradients.
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;

type GradCase = (&'static str, Result<f64>);

/// Elementwise product with a fixed random probe, so sums see every output.
fn weigh<'g>(v: Var<'g, f64>, p: &Tensor<f64>) -> Result<Var<'g, f64>> {
    v.mul(v.graph().constant(p.clone()))
}

fn tiny_net(corr: CorrKind) -> Result<TrackerNet<f64>> {
    let cfg = NetConfig {
        c_feat: 4,
        n_heads: 1,
        state_dim: 3,
        t: 3,
        search_size: 16,
        template_size: 8,
        backbone_stride: 2,
        corr,
        ..NetConfig::default()
    };
    let mut net = TrackerNet::new(cfg, 5)?;
    // Unit-scale output projection: the checked gradients then sit well above
    // finite-difference round-off.
    let w = net.params.get_mut("head0.out.w").expect("head projection");
    *w = Tensor::randn(w.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(9));
    Ok(net)
}

/// Finite-difference checks of every differentiable operation and of the
/// composite network pieces.
pub fn grad_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut r = |shape: &[usize]| Tensor::<f64>::randn(shape, 1.0, &mut rng);
    let h = GRAD_STEP;
    let mut out: Vec<GradCase> = Vec::new();
    let x23 = r(&[2, 3]);
    let w34 = r(&[3, 4]);
    let probe = r(&[2, 4]);

    let p23 = r(&[2, 3]);
    macro_rules! unary {
        ($name:expr, $($call:tt)+) => {{
            let p = p23.clone();
            out.push(($name, grad_check(|_, v| Ok(weigh(v.$($call)+, &p)?.sum()), &x23, h)));
        }};
    }
    unary!("exp", exp());
    unary!("neg", neg());
    unary!("scale", scale(1.7));
    unary!("abs", abs());
    unary!("square", square());
    unary!("sigmoid", sigmoid());
    unary!("silu", silu());
    unary!("softplus", softplus());

    let other = r(&[2, 3]);
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let o = other.clone();
        let p = p23.clone();
        out.push((
            name,
            grad_check(
                |g, v| {
                    let c = g.constant(o.clone());
                    let y = match op {
                        0 => v.add(c)?,
                        1 => c.sub(v)?,
                        _ => v.mul(c)?,
                    };
                    Ok(weigh(y, &p)?.sum())
                },
                &x23,
                h,
            ),
        ));
    }
    let bias = r(&[3]);
    let p = p23.clone();
    out.push((
        "add_bias",
        grad_check(|g, v| Ok(weigh(g.constant(x23.clone()).add_bias(v)?, &p)?.sum()), &bias, h),
    ));
    let rows = r(&[2]);
    let p = p23.clone();
    let x = x23.clone();
    out.push((
        "mul_rows",
        grad_check(|g, v| Ok(weigh(g.constant(x.clone()).mul_rows(v)?, &p)?.sum()), &rows, h),
    ));
    out.push(("mean", grad_check(|_, v| Ok(v.square().mean()), &x23, h)));
    let p = probe.clone();
    let w = w34.clone();
    out.push((
        "matmul",
        grad_check(|g, v| Ok(weigh(v.matmul(g.constant(w.clone()))?, &p)?.sum()), &x23, h),
    ));
    let p32 = r(&[3, 2]);
    out.push((
        "transpose+reshape",
        grad_check(|_, v| Ok(weigh(v.t()?.reshape(&[3, 2])?, &p32)?.sum()), &x23, h),
    ));

    let img = r(&[2, 5, 7]);
    let kern = r(&[3, 2, 3, 3]);
    let kb = r(&[3]);
    let p_conv = r(&[3, 3, 4]);
    {
        let (k, b, p) = (kern.clone(), kb.clone(), p_conv.clone());
        out.push((
            "conv2d input",
            grad_check(
                |g, v| {
                    let y = v.conv2d_padded(g.constant(k.clone()), Some(g.constant(b.clone())), 2, Pad2d::uniform(1))?;
                    Ok(weigh(y, &p)?.sum())
                },
                &img,
                h,
            ),
        ));
        let (i, b, p) = (img.clone(), kb.clone(), p_conv.clone());
        out.push((
            "conv2d weight",
            grad_check(
                |g, v| {
                    let y = g
                        .constant(i.clone())
                        .conv2d_padded(v, Some(g.constant(b.clone())), 2, Pad2d::uniform(1))?;
                    Ok(weigh(y, &p)?.sum())
                },
                &kern,
                h,
            ),
        ));
        let (i, k, p) = (img.clone(), kern.clone(), p_conv.clone());
        out.push((
            "conv2d bias",
            grad_check(
                |g, v| {
                    let y = g
                        .constant(i.clone())
                        .conv2d_padded(g.constant(k.clone()), Some(v), 2, Pad2d::uniform(1))?;
                    Ok(weigh(y, &p)?.sum())
                },
                &kb,
                h,
            ),
        ));
    }
    let seq = r(&[5, 3]);
    let k1 = r(&[3, 3, 3]);
    let p1 = r(&[5, 3]);
    {
        let (k, p) = (k1.clone(), p1.clone());
        out.push((
            "conv1d input",
            grad_check(|g, v| Ok(weigh(v.conv1d(g.constant(k.clone()), None)?, &p)?.sum()), &seq, h),
        ));
        let (s, p) = (seq.clone(), p1.clone());
        out.push((
            "conv1d weight",
            grad_check(|g, v| Ok(weigh(g.constant(s.clone()).conv1d(v, None)?, &p)?.sum()), &k1, h),
        ));
    }
    let gamma = r(&[3]);
    let beta = r(&[3]);
    {
        let (gm, bt, p) = (gamma.clone(), beta.clone(), p23.clone());
        out.push((
            "layernorm input",
            grad_check(
                |g, v| {
                    let y = v.layernorm(g.constant(gm.clone()), g.constant(bt.clone()), 1e-5)?;
                    Ok(weigh(y, &p)?.sum())
                },
                &x23,
                h,
            ),
        ));
        let (x, bt, p) = (x23.clone(), beta.clone(), p23.clone());
        out.push((
            "layernorm gain",
            grad_check(
                |g, v| {
                    let y = g.constant(x.clone()).layernorm(v, g.constant(bt.clone()), 1e-5)?;
                    Ok(weigh(y, &p)?.sum())
                },
                &gamma,
                h,
            ),
        ));
    }
    let heat = Tensor::uniform(&[2, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(31));
    out.push(("bce_with_logits", grad_check(|_, v| v.bce_with_logits(&heat), &x23, h)));
    let idx: Rc<[usize]> = Rc::from(vec![4, 0, 0, 2]);
    out.push(("gather", grad_check(|_, v| Ok(v.gather(idx.clone())?.square().sum()), &x23, h)));
    let ridx: Rc<[usize]> = Rc::from(vec![1, 1, 0]);
    let p33 = r(&[3, 3]);
    out.push((
        "gather_rows",
        grad_check(|_, v| Ok(weigh(v.gather_rows(ridx.clone())?, &p33)?.sum()), &x23, h),
    ));
    let p43 = r(&[4, 3]);
    {
        let o = other.clone();
        out.push((
            "concat_rows",
            grad_check(
                |g, v| Ok(weigh(concat_rows(&[v, g.constant(o.clone())])?, &p43)?.sum()),
                &x23,
                h,
            ),
        ));
    }
    {
        let grid = WindowGrid::new(8, 8, 4, 4).expect("valid grid");
        let p64 = r(&[64, 2]);
        let x = r(&[9 * 16, 2]);
        out.push((
            "fold (mix_rows)",
            grad_check(
                |_, v| {
                    let parts: Vec<_> = (0..9)
                        .map(|k| v.gather_rows((k * 16..(k + 1) * 16).collect()))
                        .collect::<Result<_>>()?;
                    Ok(weigh(crate::xcorr::fold_tokens(&parts, &grid)?, &p64)?.sum())
                },
                &x,
                h,
            ),
        ));
    }

    // Selective scan: input and every parameter, with a shared motion prefix.
    let (d, n, l) = (3, 4, 7);
    let weights = SelectiveWeights::<f64>::init(d, n, &mut ChaCha8Rng::seed_from_u64(37));
    let xs = r(&[l, d]);
    let ps = r(&[l, d]);
    {
        let (wt, p) = (weights.clone(), ps.clone());
        out.push((
            "selective_scan input",
            grad_check(|g, v| Ok(weigh(wt.attach_constant(g).scan(v, l)?, &p)?.sum()), &xs, h),
        ));
    }
    for field in ["w_b", "w_c", "w_delta", "delta_bias", "a_log"] {
        let (wt, x, p) = (weights.clone(), xs.clone(), ps.clone());
        let init = match field {
            "w_b" => weights.w_b.clone(),
            "w_c" => weights.w_c.clone(),
            "w_delta" => weights.w_delta.clone(),
            "delta_bias" => weights.delta_bias.clone(),
            _ => weights.a_log.clone(),
        };
        let name: &'static str = match field {
            "w_b" => "selective_scan w_b",
            "w_c" => "selective_scan w_c",
            "w_delta" => "selective_scan w_delta",
            "delta_bias" => "selective_scan delta_bias",
            _ => "selective_scan a_log",
        };
        out.push((
            name,
            grad_check(
                |g, v| {
                    let mut sv: SelectiveVars<'_, f64> = wt.attach_constant(g);
                    match field {
                        "w_b" => sv.w_b = v,
                        "w_c" => sv.w_c = v,
                        "w_delta" => sv.w_delta = v,
                        "delta_bias" => sv.delta_bias = v,
                        _ => sv.a_log = v,
                    }
                    Ok(weigh(sv.scan_shared(g.constant(x.clone()), 3, 2)?, &p)?.sum())
                },
                &init,
                h,
            ),
        ));
    }

    // Network pieces on a tiny configuration.
    for (label_head, label_loss, corr) in [
        ("mamba_head (ssm)", "full loss (ssm)", CorrKind::Ssm),
        ("mamba_head (conv)", "full loss (conv)", CorrKind::Conv),
    ] {
        let net = match tiny_net(corr) {
            Ok(n) => n,
            Err(e) => {
                out.push((label_head, Err(e)));
                continue;
            }
        };
        let cfg = net.config().clone();
        let (sx, sz, c) = (cfg.search_feat(), cfg.template_feat(), cfg.c_feat);
        let xt = r(&[sx * sx, c]);
        let zt = r(&[sz * sz, c]);
        let mt = r(&[cfg.t, 2]);
        let ph = r(&[sx * sx, c]);
        {
            let (z, m, p) = (zt.clone(), mt.clone(), ph.clone());
            let net = &net;
            out.push((
                label_head,
                grad_check(
                    |g, v| {
                        let b = net.bind(g, false);
                        let y = net.mamba_head(&b, 0, v, g.constant(z.clone()), g.constant(m.clone()))?;
                        Ok(weigh(y, &p)?.sum())
                    },
                    &xt,
                    h,
                ),
            ));
        }
        let search = Tensor::uniform(&[1, cfg.search_size, cfg.search_size], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(41));
        let template = Tensor::uniform(&[1, cfg.template_size, cfg.template_size], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(43));
        let heat = Tensor::uniform(&[1, sx, sx], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(47));
        let target = Target {
            heat,
            cell: 5,
            reg: [0.3, -0.2, 2.0, 1.5],
        };
        let probe_param = if corr == CorrKind::Ssm { "head0.ssm1.a_log" } else { "head0.in.w" };
        let init = net.params.get(probe_param).cloned().expect("parameter exists");
        let net = &net;
        out.push((
            label_loss,
            grad_check(
                |g, v| {
                    let mut b = net.bind(g, false);
                    b.replace(probe_param, v)?;
                    let o = net.forward_graph(
                        &b,
                        g.constant(search.clone()),
                        g.constant(template.clone()),
                        g.constant(mt.clone()),
                        None,
                    )?;
                    loss_graph(&o, &target)
                },
                &init,
                h,
            ),
        ));
    }
    out
}

fn grad_suite() -> Vec<CheckResult> {
    grad_cases()
        .into_iter()
        .map(|(name, r)| outcome(name, r.map(|e| (e.is_finite() && e < GRAD_TOL, format!("relative error {e:.3e}")))))
        .collect()
}
