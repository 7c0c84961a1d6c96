//! Spatial plumbing for both cross-correlation operators.
//!
//! The search map is cut into template-sized windows with a half-template
//! stride ([`WindowGrid`]). Each window is interleaved pixel-by-pixel with the
//! template, prefixed by the motion sequence ([`ScanLayout`]), scanned by a
//! selective SSM in four directions and mapped back. Overlapping windows are
//! averaged when folded.
//!
//! The four pixel orders are a reconstruction of the figure-only description:
//! row-major forward/backward and column-major forward/backward. Template
//! pixels precede search pixels at each location.
//!
//! Maps are `[C×H×W]` tensors in the public API. Inside the network the same
//! data travels as `[H·W × C]` token matrices, which is what the `*_tokens`
//! functions operate on.

use std::rc::Rc;

use crate::autograd::{concat_rows, Graph, RowMix, Var};
use crate::error::{contract, dim_check, Error, Result};
use crate::kernels::{self, Pad2d};
use crate::scalar::Scalar;
use crate::ssm::{SelectiveVars, SelectiveWeights};
use crate::tensor::Tensor;

/// Template-sized windows over the search map with stride `(H_z/2, W_z/2)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub hx: usize,
    pub wx: usize,
    pub hz: usize,
    pub wz: usize,
    pub stride: (usize, usize),
    pub rows: usize,
    pub cols: usize,
    /// Top-left `(row, col)` of every window, row-major.
    pub offsets: Vec<(usize, usize)>,
}

impl WindowGrid {
    pub fn new(hx: usize, wx: usize, hz: usize, wz: usize) -> Result<Self> {
        let err = || {
            Error::Config(format!(
                "search {hx}x{wx} cannot be tiled by template {hz}x{wz} windows at half-template stride \
                 (H_x={hx}, W_x={wx}, H_z={hz}, W_z={wz})"
            ))
        };
        let axis = |x: usize, z: usize| -> Option<(usize, usize)> {
            if z == 0 || z > x {
                return None;
            }
            if x == z {
                return Some((z.max(2) / 2, 1));
            }
            if z % 2 != 0 || (x - z) % (z / 2) != 0 {
                return None;
            }
            Some((z / 2, (x - z) / (z / 2) + 1))
        };
        let (sr, rows) = axis(hx, hz).ok_or_else(err)?;
        let (sc, cols) = axis(wx, wz).ok_or_else(err)?;
        let offsets = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r * sr, c * sc)))
            .collect();
        Ok(Self {
            hx,
            wx,
            hz,
            wz,
            stride: (sr, sc),
            rows,
            cols,
            offsets,
        })
    }

    /// Number of windows `n`.
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// How many windows cover each search pixel, row-major.
    pub fn coverage(&self) -> Vec<usize> {
        let mut cov = vec![0; self.hx * self.wx];
        for &(r0, c0) in &self.offsets {
            for r in r0..r0 + self.hz {
                for c in c0..c0 + self.wz {
                    cov[r * self.wx + c] += 1;
                }
            }
        }
        cov
    }

    /// Search-map pixel index of pixel `p` (row-major) of window `i`.
    #[inline]
    pub fn source_pixel(&self, window: usize, p: usize) -> usize {
        let (r0, c0) = self.offsets[window];
        (r0 + p / self.wz) * self.wx + c0 + p % self.wz
    }

    /// Averaging map from stacked window tokens (`n·H_z·W_z` rows) to search tokens.
    pub fn fold_mix<S: Scalar>(&self) -> RowMix<S> {
        let cov = self.coverage();
        let pz = self.hz * self.wz;
        let mut rows = vec![Vec::new(); self.hx * self.wx];
        for i in 0..self.len() {
            for p in 0..pz {
                let q = self.source_pixel(i, p);
                rows[q].push((i * pz + p, S::one() / S::c(cov[q] as f64)));
            }
        }
        RowMix { rows }
    }
}

/// Extracts the windows of a `[C×H_x×W_x]` map, row-major over offsets.
pub fn unfold<S: Scalar>(x: &Tensor<S>, grid: &WindowGrid) -> Result<Vec<Tensor<S>>> {
    dim_check!(
        x.ndim() == 3 && x.shape()[1] == grid.hx && x.shape()[2] == grid.wx,
        "unfold of {:?} with a {}x{} grid",
        x.shape(),
        grid.hx,
        grid.wx
    );
    let c = x.shape()[0];
    let out = grid
        .offsets
        .iter()
        .map(|&(r0, c0)| {
            Tensor::from_fn(&[c, grid.hz, grid.wz], |i| {
                let ch = i / (grid.hz * grid.wz);
                let r = (i / grid.wz) % grid.hz;
                let col = i % grid.wz;
                x.at(&[ch, r0 + r, c0 + col])
            })
        })
        .collect();
    Ok(out)
}

/// Reassembles windows into a `[C×H_x×W_x]` map, averaging overlaps.
pub fn fold<S: Scalar>(submaps: &[Tensor<S>], grid: &WindowGrid) -> Result<Tensor<S>> {
    contract!(
        submaps.len() == grid.len(),
        "fold got {} submaps for a grid of {}",
        submaps.len(),
        grid.len()
    );
    let c = submaps.first().map(|t| t.shape()[0]).unwrap_or(0);
    for s in submaps {
        contract!(
            s.shape() == [c, grid.hz, grid.wz],
            "submap {:?}, expected [{}, {}, {}]",
            s.shape(),
            c,
            grid.hz,
            grid.wz
        );
    }
    let mut out = Tensor::zeros(&[c, grid.hx, grid.wx]);
    let cov = grid.coverage();
    let plane = grid.hx * grid.wx;
    let pz = grid.hz * grid.wz;
    for (i, s) in submaps.iter().enumerate() {
        for ch in 0..c {
            for p in 0..pz {
                let q = grid.source_pixel(i, p);
                let o = &mut out.data_mut()[ch * plane + q];
                *o = *o + s.data()[ch * pz + p] / S::c(cov[q] as f64);
            }
        }
    }
    Ok(out)
}

/// Token-layout unfold: `[H_x·W_x × C]` into `n` windows of `[H_z·W_z × C]`.
pub fn unfold_tokens<'g, S: Scalar>(x: Var<'g, S>, grid: &WindowGrid) -> Result<Vec<Var<'g, S>>> {
    let pz = grid.hz * grid.wz;
    (0..grid.len())
        .map(|i| {
            let idx: Rc<[usize]> = (0..pz).map(|p| grid.source_pixel(i, p)).collect();
            x.gather_rows(idx)
        })
        .collect()
}

/// Token-layout fold with overlap averaging.
pub fn fold_tokens<'g, S: Scalar>(submaps: &[Var<'g, S>], grid: &WindowGrid) -> Result<Var<'g, S>> {
    contract!(
        submaps.len() == grid.len(),
        "fold got {} submaps for a grid of {}",
        submaps.len(),
        grid.len()
    );
    concat_rows(submaps)?.mix_rows(Rc::new(grid.fold_mix()))
}

/// Pixel traversal order of one scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowForward,
        Direction::RowBackward,
        Direction::ColForward,
        Direction::ColBackward,
    ];

    /// Row-major pixel indices of an `h×w` map in traversal order.
    pub fn pixel_order(self, h: usize, w: usize) -> Vec<usize> {
        let row_major: Vec<usize> = (0..h * w).collect();
        let col_major: Vec<usize> = (0..w).flat_map(|c| (0..h).map(move |r| r * w + c)).collect();
        match self {
            Direction::RowForward => row_major,
            Direction::RowBackward => row_major.into_iter().rev().collect(),
            Direction::ColForward => col_major,
            Direction::ColBackward => col_major.into_iter().rev().collect(),
        }
    }
}

/// How template, search and motion tokens are arranged in a scan sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanOrder {
    /// `[m, z₁, x₁, z₂, x₂, …]`
    Interleaved,
    /// Interleaved pairs with `m` inserted halfway: `[…z/x…, m, …z/x…]`.
    MotionMiddle,
    /// No interleaving: `[m, z…, x…]`.
    Concat,
}

/// Which map a sequence slot comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Motion,
    Template,
    Search,
}

/// One sequence slot: the source map and the row-major pixel (or queue) index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub segment: Segment,
    pub index: usize,
}

/// Cross-map scan permutation for one direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanLayout {
    pub direction: Direction,
    pub order: ScanOrder,
    pub hz: usize,
    pub wz: usize,
    /// Motion prefix length.
    pub t: usize,
    slots: Vec<Slot>,
    /// `forward_index[slot]` is the row of the stacked source `[m; z; x]`.
    forward_index: Vec<usize>,
    /// `inverse_index[source row]` is its slot.
    inverse_index: Vec<usize>,
}

impl ScanLayout {
    pub fn new(direction: Direction, order: ScanOrder, hz: usize, wz: usize, t: usize) -> Self {
        let pixels = direction.pixel_order(hz, wz);
        let motion = (0..t).map(|i| Slot {
            segment: Segment::Motion,
            index: i,
        });
        let pair = |p: usize| {
            [
                Slot {
                    segment: Segment::Template,
                    index: p,
                },
                Slot {
                    segment: Segment::Search,
                    index: p,
                },
            ]
        };
        let slots: Vec<Slot> = match order {
            ScanOrder::Interleaved => motion.chain(pixels.iter().flat_map(|&p| pair(p))).collect(),
            ScanOrder::MotionMiddle => {
                let half = pixels.len() / 2;
                pixels[..half]
                    .iter()
                    .flat_map(|&p| pair(p))
                    .chain(motion)
                    .chain(pixels[half..].iter().flat_map(|&p| pair(p)))
                    .collect()
            }
            ScanOrder::Concat => motion
                .chain(pixels.iter().map(|&p| Slot {
                    segment: Segment::Template,
                    index: p,
                }))
                .chain(pixels.iter().map(|&p| Slot {
                    segment: Segment::Search,
                    index: p,
                }))
                .collect(),
        };
        let pz = hz * wz;
        let forward_index: Vec<usize> = slots
            .iter()
            .map(|s| match s.segment {
                Segment::Motion => s.index,
                Segment::Template => t + s.index,
                Segment::Search => t + pz + s.index,
            })
            .collect();
        let mut inverse_index = vec![0; forward_index.len()];
        for (slot, &src) in forward_index.iter().enumerate() {
            inverse_index[src] = slot;
        }
        Self {
            direction,
            order,
            hz,
            wz,
            t,
            slots,
            forward_index,
            inverse_index,
        }
    }

    /// Sequence length `T + 2·H_z·W_z`.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn segment_tags(&self) -> Vec<Segment> {
        self.slots.iter().map(|s| s.segment).collect()
    }

    pub fn forward_index(&self) -> &[usize] {
        &self.forward_index
    }

    pub fn inverse_index(&self) -> &[usize] {
        &self.inverse_index
    }

    /// Slot holding search pixel `p`.
    pub fn search_slot(&self, p: usize) -> usize {
        self.inverse_index[self.t + self.hz * self.wz + p]
    }
}

fn chw_to_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn(&[h * w, c], |i| x.data()[(i % c) * h * w + i / c])
}

fn rows_to_chw<S: Scalar>(x: &[S], c: usize, h: usize, w: usize) -> Tensor<S> {
    Tensor::from_fn(&[c, h, w], |i| x[(i % (h * w)) * c + i / (h * w)])
}

/// Builds the scan sequence `[(T + 2·H_z·W_z) × C]` for one template, one
/// search window and the motion tokens (`[T×C]`).
pub fn cis_scan<S: Scalar>(z: &Tensor<S>, x_i: &Tensor<S>, m: &Tensor<S>, layout: &ScanLayout) -> Result<Tensor<S>> {
    contract!(
        z.ndim() == 3 && z.shape() == x_i.shape() && z.shape()[1] == layout.hz && z.shape()[2] == layout.wz,
        "template {:?} and window {:?} for a {}x{} layout",
        z.shape(),
        x_i.shape(),
        layout.hz,
        layout.wz
    );
    let c = z.shape()[0];
    contract!(
        m.ndim() == 2 && m.shape()[0] == layout.t && (layout.t == 0 || m.shape()[1] == c),
        "motion tokens {:?}, expected [{}, {}]",
        m.shape(),
        layout.t,
        c
    );
    let mut source = Vec::with_capacity(layout.len() * c);
    source.extend_from_slice(m.data());
    source.extend_from_slice(chw_to_rows(z).data());
    source.extend_from_slice(chw_to_rows(x_i).data());
    let mut seq = Vec::with_capacity(source.len());
    for &src in layout.forward_index() {
        seq.extend_from_slice(&source[src * c..(src + 1) * c]);
    }
    Tensor::new(&[layout.len(), c], seq)
}

/// Splits a scan sequence back into `(ẑ, x̂_i, m̂)`.
#[allow(clippy::type_complexity)]
pub fn cis_inverse<S: Scalar>(seq: &Tensor<S>, layout: &ScanLayout) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    contract!(
        seq.ndim() == 2 && seq.shape()[0] == layout.len(),
        "sequence {:?} for a layout of length {}",
        seq.shape(),
        layout.len()
    );
    let c = seq.shape()[1];
    let mut source = vec![S::zero(); seq.numel()];
    for (src, &slot) in layout.inverse_index().iter().enumerate() {
        source[src * c..(src + 1) * c].copy_from_slice(&seq.data()[slot * c..(slot + 1) * c]);
    }
    let pz = layout.hz * layout.wz;
    let t = layout.t;
    let m_hat = if t == 0 {
        Tensor::new(&[0, c], Vec::new())?
    } else {
        Tensor::new(&[t, c], source[..t * c].to_vec())?
    };
    let z_hat = rows_to_chw(&source[t * c..(t + pz) * c], c, layout.hz, layout.wz);
    let x_hat = rows_to_chw(&source[(t + pz) * c..], c, layout.hz, layout.wz);
    Ok((z_hat, x_hat, m_hat))
}

/// Plain convolutional cross-correlation: `z` slides over `x` as one
/// `[1×C×H_z×W_z]` kernel, stride 1, no padding.
pub fn conv_xcorr<S: Scalar>(z: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    contract!(
        z.ndim() == 3 && x.ndim() == 3 && z.shape()[0] == x.shape()[0],
        "template {:?} and search {:?} must be [C×H×W] with equal C",
        z.shape(),
        x.shape()
    );
    contract!(
        z.shape()[1] <= x.shape()[1] && z.shape()[2] <= x.shape()[2],
        "template {:?} larger than search {:?}",
        z.shape(),
        x.shape()
    );
    let wshape = [1, z.shape()[0], z.shape()[1], z.shape()[2]];
    let geom = crate::autograd::conv_geom(x.shape(), &wshape, 1, Pad2d::uniform(0))?;
    let data = kernels::conv2d_forward(x.data(), z.data(), None, &geom);
    Tensor::new(&[1, geom.ho, geom.wo], data)
}

/// Zero padding that keeps a `k`-wide correlation output the size of its input.
pub fn same_padding(kh: usize, kw: usize) -> Pad2d {
    Pad2d {
        top: kh / 2,
        left: kw / 2,
        bottom: (kh - 1) - kh / 2,
        right: (kw - 1) - kw / 2,
    }
}

/// Precomputed index maps of one SSM cross-correlation configuration.
///
/// When every layout starts with the motion tokens, the windows share that
/// prefix and it is scanned once (see [`scan_op_shared`]).
///
/// [`scan_op_shared`]: crate::ssm::scan_op_shared
#[derive(Clone, Debug)]
pub struct CorrPlan {
    pub grid: WindowGrid,
    pub layouts: Vec<ScanLayout>,
    /// Rows scanned once and shared by all windows.
    pub prefix: usize,
    /// Rows scanned per window after the prefix.
    pub body: usize,
    /// Per direction: rows of `[m; z; x]` forming `[prefix; body₁; …; bodyₙ]`.
    gathers: Vec<Rc<[usize]>>,
    /// Per direction: scan rows that hold each window's search tokens.
    pickups: Vec<Rc<[usize]>>,
}

impl CorrPlan {
    pub fn new(grid: WindowGrid, order: ScanOrder, t: usize) -> Self {
        let layouts: Vec<ScanLayout> = Direction::ALL
            .iter()
            .map(|&d| ScanLayout::new(d, order, grid.hz, grid.wz, t))
            .collect();
        let pz = grid.hz * grid.wz;
        let prefix = match order {
            ScanOrder::Interleaved | ScanOrder::Concat => t,
            ScanOrder::MotionMiddle => 0,
        };
        let body = layouts[0].len() - prefix;
        let mut gathers = Vec::new();
        let mut pickups = Vec::new();
        for layout in &layouts {
            let mut gather: Vec<usize> = (0..prefix).collect();
            let mut pickup = Vec::with_capacity(grid.len() * pz);
            for i in 0..grid.len() {
                for s in &layout.slots()[prefix..] {
                    gather.push(match s.segment {
                        Segment::Motion => s.index,
                        Segment::Template => t + s.index,
                        Segment::Search => t + pz + grid.source_pixel(i, s.index),
                    });
                }
                for p in 0..pz {
                    pickup.push(prefix + i * body + layout.search_slot(p) - prefix);
                }
            }
            gathers.push(gather.into());
            pickups.push(pickup.into());
        }
        Self {
            grid,
            layouts,
            prefix,
            body,
            gathers,
            pickups,
        }
    }
}

/// SSM cross-correlation in token layout.
///
/// `z` is `[H_z·W_z × C]`, `x` is `[H_x·W_x × C]`, `m` is `[T×C]`; one set of
/// selective weights per direction. Returns `[H_x·W_x × C]`: for every
/// direction the windows are scanned independently, the search tokens are
/// picked out (template and motion outputs dropped), directions are summed and
/// windows folded with overlap averaging.
pub fn ssmx_corr_tokens<'g, S: Scalar>(
    z: Var<'g, S>,
    x: Var<'g, S>,
    m: Var<'g, S>,
    directions: &[SelectiveVars<'g, S>],
    plan: &CorrPlan,
) -> Result<Var<'g, S>> {
    contract!(
        directions.len() == plan.layouts.len(),
        "{} direction weight sets for {} scan directions",
        directions.len(),
        plan.layouts.len()
    );
    let grid = &plan.grid;
    dim_check!(
        z.shape()[0] == grid.hz * grid.wz && x.shape()[0] == grid.hx * grid.wx && m.shape()[0] == plan.layouts[0].t,
        "token counts z {:?}, x {:?}, m {:?} for grid {}x{} / {}x{}",
        z.shape(),
        x.shape(),
        m.shape(),
        grid.hz,
        grid.wz,
        grid.hx,
        grid.wx
    );
    let parts: Vec<Var<'g, S>> = if plan.layouts[0].t == 0 { vec![z, x] } else { vec![m, z, x] };
    let source = concat_rows(&parts)?;
    let fold = Rc::new(grid.fold_mix::<S>());
    let mut merged: Option<Var<'g, S>> = None;
    for (k, w) in directions.iter().enumerate() {
        let seq = source.gather_rows(plan.gathers[k].clone())?;
        let y = w.scan_shared(seq, plan.prefix, plan.body)?;
        let windows = y.gather_rows(plan.pickups[k].clone())?;
        merged = Some(match merged {
            None => windows,
            Some(acc) => acc.add(windows)?,
        });
    }
    merged
        .ok_or_else(|| Error::Contract("no scan directions".into()))?
        .mix_rows(fold)
}

/// SSM cross-correlation on `[C×H×W]` maps with motion tokens `[T×C]`.
pub fn ssmx_corr<S: Scalar>(
    z: &Tensor<S>,
    x: &Tensor<S>,
    m: &Tensor<S>,
    directions: &[SelectiveWeights<S>],
    order: ScanOrder,
) -> Result<Tensor<S>> {
    contract!(
        z.ndim() == 3 && x.ndim() == 3 && z.shape()[0] == x.shape()[0],
        "template {:?} and search {:?}",
        z.shape(),
        x.shape()
    );
    let (c, hx, wx) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let grid = WindowGrid::new(hx, wx, z.shape()[1], z.shape()[2])?;
    let plan = CorrPlan::new(grid, order, m.shape()[0]);
    let g = Graph::new();
    let vars: Vec<SelectiveVars<'_, S>> = directions
        .iter()
        .map(|w| w.attach_constant(&g))
        .collect();
    let out = ssmx_corr_tokens(
        g.constant(chw_to_rows(z)),
        g.constant(chw_to_rows(x)),
        g.constant(m.clone()),
        &vars,
        &plan,
    )?;
    Ok(rows_to_chw(out.value().data(), c, hx, wx))
}

/// `[C×H×W]` to `[H·W × C]`.
pub fn to_tokens<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    dim_check!(x.ndim() == 3, "expected a [C×H×W] map, got {:?}", x.shape());
    Ok(chw_to_rows(x))
}

/// `[H·W × C]` to `[C×H×W]`.
pub fn from_tokens<S: Scalar>(x: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    dim_check!(
        x.ndim() == 2 && x.shape()[0] == h * w,
        "{:?} tokens for a {}x{} map",
        x.shape(),
        h,
        w
    );
    Ok(rows_to_chw(x.data(), x.shape()[1], h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_counts() {
        let g = WindowGrid::new(4, 4, 2, 2).unwrap();
        assert_eq!((g.stride, g.len()), ((1, 1), 9));
        let g = WindowGrid::new(24, 24, 12, 12).unwrap();
        assert_eq!((g.stride, g.len()), ((6, 6), 9));
        let g = WindowGrid::new(5, 5, 5, 5).unwrap();
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn inexact_tiling_names_all_dimensions() {
        let msg = WindowGrid::new(7, 8, 4, 4).unwrap_err().to_string();
        for needle in ["H_x=7", "W_x=8", "H_z=4", "W_z=4"] {
            assert!(msg.contains(needle), "{msg}");
        }
        assert!(WindowGrid::new(8, 8, 3, 3).is_err());
    }

    #[test]
    fn degenerate_unfold_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[3, 4, 6], 1.0, &mut rng);
        let g = WindowGrid::new(4, 6, 4, 6).unwrap();
        let subs = unfold(&x, &g).unwrap();
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0], x);
    }

    #[test]
    fn fold_averages_overlap() {
        let g = WindowGrid::new(2, 4, 2, 2).unwrap();
        assert_eq!(g.len(), 3);
        let subs = vec![
            Tensor::<f64>::zeros(&[1, 2, 2]),
            Tensor::full(&[1, 2, 2], 2.0),
            Tensor::full(&[1, 2, 2], 2.0),
        ];
        let out = fold(&subs, &g).unwrap();
        // Column 1 is covered by windows 0 (zeros) and 1 (twos).
        assert_eq!(out.at(&[0, 0, 1]), 1.0);
        assert_eq!(out.at(&[0, 1, 0]), 0.0);
        assert_eq!(out.at(&[0, 1, 3]), 2.0);
    }

    #[test]
    fn fold_rejects_wrong_count() {
        let g = WindowGrid::new(4, 4, 2, 2).unwrap();
        assert!(matches!(
            fold(&[Tensor::<f64>::zeros(&[1, 2, 2])], &g),
            Err(Error::Contract(_))
        ));
    }

    fn numbered(c: usize, h: usize, w: usize, base: f64) -> Tensor<f64> {
        Tensor::from_fn(&[c, h, w], |i| base + i as f64)
    }

    #[test]
    fn interleave_row_forward() {
        let z = numbered(1, 2, 2, 1.0); // z1..z4
        let x = numbered(1, 2, 2, 101.0); // a1..a4
        let m = Tensor::new(&[2, 1], vec![-1.0, -2.0]).unwrap();
        let l = ScanLayout::new(Direction::RowForward, ScanOrder::Interleaved, 2, 2, 2);
        let seq = cis_scan(&z, &x, &m, &l).unwrap();
        assert_eq!(
            seq.data(),
            &[-1.0, -2.0, 1.0, 101.0, 2.0, 102.0, 3.0, 103.0, 4.0, 104.0]
        );
        let lb = ScanLayout::new(Direction::RowBackward, ScanOrder::Interleaved, 2, 2, 2);
        let back = cis_scan(&z, &x, &m, &lb).unwrap();
        assert_eq!(
            back.data(),
            &[-1.0, -2.0, 4.0, 104.0, 3.0, 103.0, 2.0, 102.0, 1.0, 101.0]
        );
        let lc = ScanLayout::new(Direction::ColForward, ScanOrder::Interleaved, 2, 2, 0);
        let col = cis_scan(&z, &x, &Tensor::new(&[0, 1], vec![]).unwrap(), &lc).unwrap();
        assert_eq!(col.data(), &[1.0, 101.0, 3.0, 103.0, 2.0, 102.0, 4.0, 104.0]);
    }

    #[test]
    fn alternative_orders() {
        let z = numbered(1, 2, 2, 1.0);
        let x = numbered(1, 2, 2, 101.0);
        let m = Tensor::new(&[1, 1], vec![-1.0]).unwrap();
        let mid = ScanLayout::new(Direction::RowForward, ScanOrder::MotionMiddle, 2, 2, 1);
        assert_eq!(
            cis_scan(&z, &x, &m, &mid).unwrap().data(),
            &[1.0, 101.0, 2.0, 102.0, -1.0, 3.0, 103.0, 4.0, 104.0]
        );
        let cat = ScanLayout::new(Direction::RowForward, ScanOrder::Concat, 2, 2, 1);
        assert_eq!(
            cis_scan(&z, &x, &m, &cat).unwrap().data(),
            &[-1.0, 1.0, 2.0, 3.0, 4.0, 101.0, 102.0, 103.0, 104.0]
        );
    }

    #[test]
    fn tags_and_lengths() {
        let l = ScanLayout::new(Direction::ColBackward, ScanOrder::Interleaved, 3, 2, 4);
        assert_eq!(l.len(), 4 + 12);
        let tags = l.segment_tags();
        assert!(tags[..4].iter().all(|&t| t == Segment::Motion));
        for (k, t) in tags[4..].iter().enumerate() {
            let expect = if k % 2 == 0 { Segment::Template } else { Segment::Search };
            assert_eq!(*t, expect);
        }
    }

    #[test]
    fn conv_xcorr_autocorrelation_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut rng);
        let mut x = Tensor::<f64>::zeros(&[2, 5, 5]);
        for ch in 0..2 {
            for r in 0..3 {
                for c in 0..3 {
                    x.set(&[ch, r + 1, c + 1], z.at(&[ch, r, c]));
                }
            }
        }
        let y = conv_xcorr(&z, &x).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        let energy: f64 = z.data().iter().map(|v| v * v).sum();
        assert!((y.at(&[0, 1, 1]) - energy).abs() < 1e-12);

        let ones = Tensor::<f64>::ones(&[2, 2, 2]);
        let flat = Tensor::<f64>::full(&[2, 4, 4], 1.5);
        let y = conv_xcorr(&ones, &flat).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5 * 8.0));
        assert!(conv_xcorr(&flat, &ones).is_err());
    }

    #[test]
    fn zero_weights_zero_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::<f64>::randn(&[4, 2, 2], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[4, 4, 4], 1.0, &mut rng);
        let m = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let dirs = vec![SelectiveWeights::zeroed(4, 3); 4];
        let y = ssmx_corr(&z, &x, &m, &dirs, ScanOrder::Interleaved).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_padding_even_kernel() {
        let p = same_padding(4, 4);
        assert_eq!((p.top, p.bottom), (2, 1));
        assert_eq!(
            crate::kernels::ConvGeom::out_len(8, p.top, p.bottom, 4, 1),
            Some(8)
        );
    }
}
