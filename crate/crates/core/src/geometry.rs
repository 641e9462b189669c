//! Axis-aligned box geometry shared by the environment and every solver.
//!
//! Boxes are always three-dimensional. A 2D problem is the same code path
//! with every box's depth `l` equal to the bin depth and rotations limited
//! to swapping width and height, so `y` is always zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Problem dimensionality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dim {
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
}

impl Dim {
    pub fn from_int(d: u32) -> Result<Self> {
        match d {
            2 => Ok(Dim::Two),
            3 => Ok(Dim::Three),
            _ => Err(Error::Config(format!("dimension must be 2 or 3, got {d}"))),
        }
    }

    pub fn as_int(self) -> u32 {
        match self {
            Dim::Two => 2,
            Dim::Three => 3,
        }
    }

    pub fn rotation_count(self) -> usize {
        match self {
            Dim::Two => 2,
            Dim::Three => 6,
        }
    }
}

/// Side lengths of a box: width (x), length (y) and height (z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDims {
    pub w: f64,
    pub l: f64,
    pub h: f64,
}

impl BoxDims {
    pub const fn new(w: f64, l: f64, h: f64) -> Self {
        BoxDims { w, l, h }
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.w, self.l, self.h]
    }

    pub fn is_valid(&self) -> bool {
        [self.w, self.l, self.h].iter().all(|s| s.is_finite() && *s > 0.0)
    }
}

/// Axis permutations, in the order they are indexed by [`Rotation`].
///
/// Entry `k` lists which source side lands on (w, l, h). The first two entries
/// are the 2D rotations: identity and the width/height swap.
const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2], // (w, l, h)
    [2, 1, 0], // (h, l, w)
    [1, 0, 2], // (l, w, h)
    [0, 2, 1], // (w, h, l)
    [1, 2, 0], // (l, h, w)
    [2, 0, 1], // (h, w, l)
];

/// Index of an axis permutation. Valid range is `[0, dim.rotation_count())`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rotation(pub u8);

impl Rotation {
    pub const IDENTITY: Rotation = Rotation(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_valid_for(self, dim: Dim) -> bool {
        self.index() < dim.rotation_count()
    }
}

/// All rotations for `dim`, identity first.
pub fn enumerate_rotations(dim: Dim) -> Vec<Rotation> {
    (0..dim.rotation_count() as u8).map(Rotation).collect()
}

pub fn rotate(d: BoxDims, r: Rotation) -> BoxDims {
    let src = d.as_array();
    let p = PERMUTATIONS[r.index()];
    BoxDims::new(src[p[0]], src[p[1]], src[p[2]])
}

/// Fixed bin cross-section and the resolution of the position action grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub width: f64,
    pub length: f64,
    pub slots: usize,
    pub dim: Dim,
}

impl BinSpec {
    pub fn new(width: f64, length: f64, slots: usize, dim: Dim) -> Result<Self> {
        let bin = BinSpec { width, length, slots, dim };
        bin.validate()?;
        Ok(bin)
    }

    /// Square 3D bin with side `side`.
    pub fn cube(side: f64, slots: usize) -> Self {
        BinSpec { width: side, length: side, slots, dim: Dim::Three }
    }

    /// 2D strip of width `width`. The depth is a unit slab.
    pub fn strip(width: f64, slots: usize) -> Self {
        BinSpec { width, length: 1.0, slots, dim: Dim::Two }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::Config(format!("bin width must be positive, got {}", self.width)));
        }
        if !(self.length.is_finite() && self.length > 0.0) {
            return Err(Error::Config(format!("bin length must be positive, got {}", self.length)));
        }
        if self.slots < 2 {
            return Err(Error::Config(format!("slot count must be at least 2, got {}", self.slots)));
        }
        Ok(())
    }

    pub fn base_area(&self) -> f64 {
        self.width * self.length
    }

    /// Whether `d` (already rotated) fits the bin footprint.
    pub fn fits(&self, d: &BoxDims) -> bool {
        let fits_w = d.w <= self.width;
        match self.dim {
            // the depth of a 2D box must be the slab depth
            Dim::Two => fits_w && (d.l - self.length).abs() <= 1e-9 * self.length.max(1.0),
            Dim::Three => fits_w && d.l <= self.length,
        }
    }

    /// Rotations of `d` whose footprint fits the bin.
    pub fn feasible_rotations(&self, d: &BoxDims) -> Vec<Rotation> {
        enumerate_rotations(self.dim)
            .into_iter()
            .filter(|r| self.fits(&rotate(*d, *r)))
            .collect()
    }

    pub fn slot_width(&self) -> f64 {
        self.width / self.slots as f64
    }

    pub fn slot_length(&self) -> f64 {
        self.length / self.slots as f64
    }
}

/// Left edge of slot `index` when `extent` is cut into `slots` equal slots.
pub fn slot_to_coord(index: usize, extent: f64, slots: usize) -> Result<f64> {
    if index >= slots {
        return Err(Error::InvalidInput(format!("slot {index} out of range 0..{slots}")));
    }
    Ok(index as f64 * extent / slots as f64)
}

/// Smallest slot index whose left edge is at or beyond `coord`, saturated to
/// the last slot. The last slot clamps to the bin border anyway.
pub fn coord_to_slot_ceil(coord: f64, extent: f64, slots: usize) -> usize {
    if coord <= 0.0 {
        return 0;
    }
    let raw = coord * slots as f64 / extent;
    let mut idx = raw.ceil() as usize;
    // the division above can land an ulp on either side of an exact boundary
    if idx > 0 && (idx - 1) as f64 * extent / slots as f64 >= coord {
        idx -= 1;
    }
    while idx < slots && (idx as f64 * extent / slots as f64) < coord {
        idx += 1;
    }
    idx.min(slots - 1)
}

/// A box with its left-front-bottom corner inside the bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub dims: BoxDims,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Placement {
    pub fn top(&self) -> f64 {
        self.z + self.dims.h
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.dims.w, self.dims.l, self.dims.h, self.x, self.y, self.z]
    }
}

/// Push a placement that crosses the right or back border onto the border.
pub fn clamp_into_bin(p: Placement, bin: &BinSpec) -> Placement {
    Placement {
        x: p.x.min(bin.width - p.dims.w),
        y: p.y.min(bin.length - p.dims.l),
        ..p
    }
}

/// Strict footprint overlap: touching edges do not overlap.
pub fn footprints_overlap(a: &Placement, b: &Placement) -> bool {
    a.x < b.x + b.dims.w && b.x < a.x + a.dims.w && a.y < b.y + b.dims.l && b.y < a.y + a.dims.l
}

/// Strict 3D interior intersection.
pub fn boxes_intersect(a: &Placement, b: &Placement) -> bool {
    footprints_overlap(a, b) && a.z < b.z + b.dims.h && b.z < a.z + a.dims.h
}
