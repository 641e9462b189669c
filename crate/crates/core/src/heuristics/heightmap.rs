//! Height-map bottom-left heuristic for 3D, offline and online.
//!
//! Candidate positions are the corners of the height map (origin, far edges
//! of placed boxes, border-clamped slots). A placement is scored by its top
//! surface, then by the base area left hanging over lower cells, then by x
//! and y.

use crate::env::{Mode, PackAction, PackingEnv};
use crate::error::{Error, Result};
use crate::geometry::{footprints_overlap, rotate, BinSpec, BoxDims, Dim, Placement};

use super::{for_each_corner, solver_env_config};

const EPS: f64 = 1e-9;

/// Footprint area of `p` that does not rest on a box top at `p.z`.
pub fn wasted_base_area(history: &[Placement], p: &Placement) -> f64 {
    let area = p.dims.w * p.dims.l;
    if p.z <= EPS {
        return 0.0;
    }
    let (x0, x1, y0, y1) = (p.x, p.x + p.dims.w, p.y, p.y + p.dims.l);
    let rects: Vec<(f64, f64, f64, f64)> = history
        .iter()
        .filter(|b| footprints_overlap(p, b) && (b.top() - p.z).abs() <= EPS)
        .map(|b| (b.x.max(x0), (b.x + b.dims.w).min(x1), b.y.max(y0), (b.y + b.dims.l).min(y1)))
        .collect();
    area - union_area(&rects)
}

fn union_area(rects: &[(f64, f64, f64, f64)]) -> f64 {
    let mut xs: Vec<f64> = rects.iter().flat_map(|r| [r.0, r.1]).collect();
    let mut ys: Vec<f64> = rects.iter().flat_map(|r| [r.2, r.3]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut total = 0.0;
    for xi in xs.windows(2) {
        for yi in ys.windows(2) {
            let (cx, cy) = ((xi[0] + xi[1]) / 2.0, (yi[0] + yi[1]) / 2.0);
            if rects.iter().any(|r| r.0 <= cx && cx <= r.1 && r.2 <= cy && cy <= r.3) {
                total += (xi[1] - xi[0]) * (yi[1] - yi[0]);
            }
        }
    }
    total
}

#[derive(Debug, Clone, Copy)]
struct Scored {
    top: f64,
    wasted: f64,
    x: f64,
    y: f64,
    action: PackAction,
}

impl Scored {
    fn better_than(&self, o: &Scored) -> bool {
        if self.top < o.top - EPS {
            return true;
        }
        if self.top > o.top + EPS {
            return false;
        }
        (self.wasted, self.x, self.y) < (o.wasted, o.x, o.y)
    }
}

/// Offline packing order: decreasing volume, ties in input order.
pub fn descending_volume(boxes: &[BoxDims]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].volume().total_cmp(&boxes[a].volume()).then(a.cmp(&b)));
    order
}

/// 3D bottom-left heuristic. Offline, boxes are packed in decreasing volume
/// order; online, in arrival order.
pub fn heuristic_3d(boxes: &[BoxDims], bin: BinSpec, mode: Mode) -> Result<Vec<PackAction>> {
    if bin.dim != Dim::Three {
        return Err(Error::Config("the height-map heuristic packs 3D bins only".into()));
    }
    let mut env = PackingEnv::reset(boxes, solver_env_config(bin, mode, boxes.len()))?;
    let mut actions = Vec::with_capacity(boxes.len());
    let order = match mode {
        Mode::Offline => descending_volume(boxes),
        Mode::Online => vec![0; boxes.len()],
    };
    for slot in order {
        let mut best: Option<Scored> = None;
        {
            let d = env.candidate(slot).expect("box not packed yet");
            for r in bin.feasible_rotations(&d) {
                let dims = rotate(d, r);
                for_each_corner(env.history(), &bin, dims, |kx, ky, x, y, z| {
                    let top = z + dims.h;
                    if best.map_or(false, |b| top > b.top + EPS) {
                        return true;
                    }
                    let p = Placement { dims, x, y, z };
                    let s = Scored {
                        top,
                        wasted: wasted_base_area(env.history(), &p),
                        x,
                        y,
                        action: PackAction { select: slot, rotation: r, pos_x: kx, pos_y: ky },
                    };
                    if best.map_or(true, |b| s.better_than(&b)) {
                        best = Some(s);
                    }
                    true
                });
            }
        }
        let action = best.expect("a feasible placement exists").action;
        env.step(&action)?;
        actions.push(action);
    }
    Ok(actions)
}
