//! Bounding boxes and the low-level motion descriptor.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Axis-aligned box: size `(w, h)` and top-left corner `(cx, cy)`, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub w: f64,
    pub h: f64,
    pub cx: f64,
    pub cy: f64,
}

impl BoundingBox {
    pub fn new(w: f64, h: f64, cx: f64, cy: f64) -> Result<Self> {
        contract!(
            w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite(),
            "box size must be positive, got {w}x{h}"
        );
        Ok(Self { w, h, cx, cy })
    }

    /// Box of size `(w, h)` whose center is `(x, y)`.
    pub fn centered(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(w, h, x - w / 2.0, y - h / 2.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.cx + self.w / 2.0, self.cy + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.cx + self.w).min(other.cx + other.w) - self.cx.max(other.cx);
        let iy = (self.cy + self.h).min(other.cy + other.h) - self.cy.max(other.cy);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        // Corner arithmetic can round the overlap above either area.
        (inter / (self.area() + other.area() - inter)).min(1.0)
    }
}

/// Corner step `(cx_t − cx_{t−1}, cy_t − cy_{t−1})`.
pub fn displacement(prev: &BoundingBox, curr: &BoundingBox) -> (f64, f64) {
    (curr.cx - prev.cx, curr.cy - prev.cy)
}

/// What the motion queue is fed with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum MotionMode {
    /// Per-frame corner displacement.
    #[default]
    Displacement,
    /// Absolute corner position `(cx, cy)`.
    Raw,
    /// Motion branch ablated: an all-zero sequence.
    Off,
}

impl MotionMode {
    /// Queue entry for the step `prev → curr`.
    pub fn entry(self, prev: &BoundingBox, curr: &BoundingBox) -> (f64, f64) {
        match self {
            MotionMode::Displacement => displacement(prev, curr),
            MotionMode::Raw => (curr.cx, curr.cy),
            MotionMode::Off => (0.0, 0.0),
        }
    }
}

/// FIFO of the last `T` motion entries, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionQueue {
    capacity: usize,
    entries: VecDeque<(f64, f64)>,
}

impl MotionQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.entries.iter().copied()
    }

    /// Appends `d`, evicting the oldest entry when full.
    pub fn push(&mut self, d: (f64, f64)) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(d);
    }

    /// `[T×2]` snapshot, front-padded with zeros when underfull.
    pub fn as_sequence(&self) -> Tensor<f64> {
        let pad = self.capacity - self.entries.len();
        let mut data = vec![0.0; 2 * pad];
        for (dx, dy) in &self.entries {
            data.push(*dx);
            data.push(*dy);
        }
        Tensor::new(&[self.capacity, 2], data).unwrap_or_else(|_| Tensor::zeros(&[0, 2]))
    }
}

/// Adds i.i.d. `N(0, sigma²)` noise to every entry of a motion sequence.
pub fn augment<R: Rng + ?Sized>(seq: &Tensor<f64>, sigma: f64, rng: &mut R) -> Result<Tensor<f64>> {
    contract!(sigma >= 0.0 && sigma.is_finite(), "noise sigma must be >= 0, got {sigma}");
    if sigma == 0.0 {
        return Ok(seq.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let data = seq.data().iter().map(|&v| v + normal.sample(rng)).collect();
    Tensor::new(seq.shape(), data)
}
