//! SKYLINE with the bottom-left rule for online 2D packing.

use crate::env::{Mode, PackAction, PackingEnv};
use crate::error::{Error, Result};
use crate::geometry::{coord_to_slot_ceil, rotate, BinSpec, BoxDims, Dim, Placement};

use super::solver_env_config;

/// Upper envelope of the packed boxes as `(x, width, height)` segments that
/// partition `[0, W]` from left to right.
#[derive(Debug, Clone, PartialEq)]
pub struct SkylineProfile {
    segments: Vec<(f64, f64, f64)>,
}

impl SkylineProfile {
    pub fn new(width: f64) -> Self {
        SkylineProfile { segments: vec![(0.0, width, 0.0)] }
    }

    pub fn segments(&self) -> &[(f64, f64, f64)] {
        &self.segments
    }

    /// Highest segment strictly overlapping `[x, x + w]`.
    pub fn height_under(&self, x: f64, w: f64) -> f64 {
        self.segments
            .iter()
            .filter(|(sx, sw, _)| *sx < x + w && x < sx + sw)
            .map(|s| s.2)
            .fold(0.0, f64::max)
    }

    /// Raise `[x, x + w]` to `top`.
    pub fn place(&mut self, x: f64, w: f64, top: f64) {
        let x1 = x + w;
        let mut next = Vec::with_capacity(self.segments.len() + 2);
        for &(sx, sw, sh) in &self.segments {
            let sx1 = sx + sw;
            if sx1 <= x || sx >= x1 {
                next.push((sx, sw, sh));
                continue;
            }
            if sx < x {
                next.push((sx, x - sx, sh));
            }
            if sx1 > x1 {
                next.push((x1, sx1 - x1, sh));
            }
        }
        next.push((x, w, top));
        next.sort_by(|a, b| a.0.total_cmp(&b.0));
        // merge equal neighbours
        let mut merged: Vec<(f64, f64, f64)> = Vec::with_capacity(next.len());
        for s in next {
            match merged.last_mut() {
                Some(last) if last.2 == s.2 => last.1 = s.0 + s.1 - last.0,
                _ => merged.push(s),
            }
        }
        self.segments = merged;
    }
}

/// Online SKYLINE-BL on a 2D strip: every arriving box goes to the
/// segment-aligned position and rotation with the lowest resulting top,
/// ties to the left.
pub fn skyline_bl(stream: &[BoxDims], bin: BinSpec) -> Result<Vec<PackAction>> {
    if bin.dim != Dim::Two {
        return Err(Error::Config("SKYLINE-BL packs the 2D strip only".into()));
    }
    let mut env = PackingEnv::reset(stream, solver_env_config(bin, Mode::Online, stream.len()))?;
    let mut profile = SkylineProfile::new(bin.width);
    let mut actions = Vec::with_capacity(stream.len());

    while !env.is_done() {
        let d = env.candidate(0).expect("online candidate");
        let mut best: Option<(f64, f64, PackAction)> = None;
        for r in bin.feasible_rotations(&d) {
            let dims = rotate(d, r);
            let mut starts: Vec<usize> = profile
                .segments()
                .iter()
                .map(|s| coord_to_slot_ceil(s.0, bin.width, bin.slots))
                .collect();
            starts.push(coord_to_slot_ceil(bin.width - dims.w, bin.width, bin.slots));
            for pos_x in starts {
                let x = (pos_x as f64 * bin.slot_width()).min(bin.width - dims.w);
                let top = profile.height_under(x, dims.w) + dims.h;
                let better = best.map_or(true, |(t, bx, _)| (top, x) < (t, bx));
                if better {
                    best = Some((top, x, PackAction { select: 0, rotation: r, pos_x, pos_y: 0 }));
                }
            }
        }
        let (_, _, action) = best.expect("at least one feasible rotation");
        let out = env.step(&action)?;
        let p: Placement = out.placement;
        profile.place(p.x, p.dims.w, p.top());
        actions.push(action);
    }
    Ok(actions)
}
