//! MAXRECTS with the bottom-left rule over the 2D strip cross-section.
//!
//! The free space of the strip (width `W`, unbounded height) is kept as the
//! set of maximal empty rectangles. Under gravity only rectangles that are
//! open to the sky above the box can actually receive it, so a candidate is
//! kept only when the environment's drop height equals the rectangle bottom.

use crate::env::{Mode, PackAction, PackingEnv};
use crate::error::{Error, Result};
use crate::geometry::{coord_to_slot_ceil, enumerate_rotations, rotate, BinSpec, BoxDims, Dim, Placement, Rotation};

use super::{lowest_slot, solver_env_config};

const EPS: f64 = 1e-9;

/// Empty rectangle in the (x, z) cross-section. `h` may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeRect {
    pub x: f64,
    pub z: f64,
    pub w: f64,
    pub h: f64,
}

impl FreeRect {
    fn right(&self) -> f64 {
        self.x + self.w
    }

    fn top(&self) -> f64 {
        self.z + self.h
    }

    fn contains(&self, o: &FreeRect) -> bool {
        o.x >= self.x - EPS && o.z >= self.z - EPS && o.right() <= self.right() + EPS && o.top() <= self.top() + EPS
    }

    /// Strict interior intersection with a placed box.
    pub fn intersects(&self, p: &Placement) -> bool {
        self.x < p.x + p.dims.w - EPS
            && p.x < self.right() - EPS
            && self.z < p.top() - EPS
            && p.z < self.top() - EPS
    }
}

/// Maximal free rectangles of the strip.
#[derive(Debug, Clone)]
pub struct FreeRectStore {
    rects: Vec<FreeRect>,
}

impl FreeRectStore {
    pub fn new(width: f64) -> Self {
        FreeRectStore { rects: vec![FreeRect { x: 0.0, z: 0.0, w: width, h: f64::INFINITY }] }
    }

    pub fn rects(&self) -> &[FreeRect] {
        &self.rects
    }

    /// Remove the area of `p` from the free space: split every rectangle it
    /// cuts into up to four maximal pieces, then prune contained ones.
    pub fn place(&mut self, p: &Placement) {
        let mut next = Vec::with_capacity(self.rects.len() + 4);
        for r in &self.rects {
            if !r.intersects(p) {
                next.push(*r);
                continue;
            }
            let (px0, px1, pz0, pz1) = (p.x, p.x + p.dims.w, p.z, p.top());
            if px0 > r.x + EPS {
                next.push(FreeRect { w: px0 - r.x, ..*r });
            }
            if px1 < r.right() - EPS {
                next.push(FreeRect { x: px1, w: r.right() - px1, ..*r });
            }
            if pz0 > r.z + EPS {
                next.push(FreeRect { h: pz0 - r.z, ..*r });
            }
            if pz1 < r.top() - EPS {
                next.push(FreeRect { z: pz1, h: r.top() - pz1, ..*r });
            }
        }
        self.rects = prune(next);
    }
}

fn prune(mut rects: Vec<FreeRect>) -> Vec<FreeRect> {
    let mut keep = vec![true; rects.len()];
    for i in 0..rects.len() {
        if !keep[i] {
            continue;
        }
        for j in 0..rects.len() {
            if i != j && keep[j] && rects[i].contains(&rects[j]) {
                keep[j] = false;
            }
        }
    }
    let mut k = keep.into_iter();
    rects.retain(|_| k.next().unwrap());
    rects
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    top: f64,
    x: f64,
    select: usize,
    rotation: Rotation,
    pos_x: usize,
}

impl Candidate {
    fn better_than(&self, o: &Candidate) -> bool {
        (self.top, self.x) < (o.top, o.x)
    }
}

/// Offline packing order: decreasing long side, ties by decreasing area,
/// then input order.
pub fn descending_long_side(boxes: &[BoxDims]) -> Vec<usize> {
    let key = |d: &BoxDims| (d.w.max(d.h), d.w * d.h);
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (key(&boxes[a]), key(&boxes[b]));
        kb.0.total_cmp(&ka.0).then(kb.1.total_cmp(&ka.1)).then(a.cmp(&b))
    });
    order
}

/// Offline MAXRECTS-BL on a 2D strip. Boxes are taken in decreasing long-side
/// order; each goes to the (rotation, free rectangle) whose placed top edge
/// is lowest, ties to the left.
pub fn maxrects_bl(boxes: &[BoxDims], bin: BinSpec) -> Result<Vec<PackAction>> {
    if bin.dim != Dim::Two {
        return Err(Error::Config("MAXRECTS-BL packs the 2D strip only".into()));
    }
    // every box is visible, so slot i holds box i for the whole episode
    let mut env = PackingEnv::reset(boxes, solver_env_config(bin, Mode::Offline, boxes.len()))?;
    let mut store = FreeRectStore::new(bin.width);
    let mut actions = Vec::with_capacity(boxes.len());

    for slot in descending_long_side(boxes) {
        let d = boxes[slot];
        let mut best: Option<Candidate> = None;
        for r in enumerate_rotations(Dim::Two) {
            let dims = rotate(d, r);
            if !bin.fits(&dims) {
                continue;
            }
            for fr in store.rects() {
                if fr.w + EPS < dims.w || fr.h + EPS < dims.h {
                    continue;
                }
                let pos_x = coord_to_slot_ceil(fr.x, bin.width, bin.slots);
                let x = (pos_x as f64 * bin.slot_width()).min(bin.width - dims.w);
                if x + dims.w > fr.right() + EPS || x + EPS < fr.x {
                    continue;
                }
                let cand = Candidate { top: fr.z + dims.h, x, select: slot, rotation: r, pos_x };
                if best.map_or(false, |b| !cand.better_than(&b)) {
                    continue;
                }
                // reachable from above only if nothing overhangs it
                if (env.drop_height(x, 0.0, dims) - fr.z).abs() > EPS {
                    continue;
                }
                best = Some(cand);
            }
        }
        let action = match best {
            Some(c) => PackAction { select: c.select, rotation: c.rotation, pos_x: c.pos_x, pos_y: 0 },
            None => fallback(&env, &bin, slot),
        };
        let out = env.step(&action)?;
        store.place(&out.placement);
        actions.push(action);
    }
    Ok(actions)
}

/// Lowest-top placement of the box in `slot`, used if grid rounding leaves no
/// free rectangle usable.
fn fallback(env: &PackingEnv, bin: &BinSpec, slot: usize) -> PackAction {
    let d = env.candidate(slot).expect("box not packed yet");
    let mut best: Option<(f64, PackAction)> = None;
    for r in bin.feasible_rotations(&d) {
        let c = lowest_slot(env.history(), bin, rotate(d, r));
        let top = c.placement.top();
        if best.map_or(true, |(t, _)| top < t) {
            best = Some((top, PackAction { select: slot, rotation: r, pos_x: c.pos_x, pos_y: c.pos_y }));
        }
    }
    best.expect("instance validated").1
}
