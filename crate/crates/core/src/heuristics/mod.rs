//! Constructive baselines.
//!
//! Every heuristic emits a sequence of [`PackAction`]s on the slot grid; the
//! environment replays them and is the only scorer. Offline heuristics see the
//! whole instance, so they run the environment with one candidate slot per
//! box.

mod heightmap;
mod maxrects;
mod skyline;

pub use heightmap::{descending_volume, heuristic_3d, wasted_base_area};
pub use maxrects::{descending_long_side, maxrects_bl, FreeRect, FreeRectStore};
pub use skyline::{skyline_bl, SkylineProfile};

use crate::dataset::Instance;
use crate::env::{EnvConfig, Mode, PackAction, PackingEnv};
use crate::error::Result;
use crate::geometry::{coord_to_slot_ceil, BinSpec, BoxDims, Dim, Placement};

/// Environment configuration used by the classical solvers.
pub fn solver_env_config(bin: BinSpec, mode: Mode, n_boxes: usize) -> EnvConfig {
    let cfg = EnvConfig::new(bin, mode);
    match mode {
        Mode::Offline => cfg.with_capacities(cfg.packed_capacity, n_boxes.max(1)),
        Mode::Online => cfg,
    }
}

/// Replay `actions` from a fresh episode.
pub fn replay(boxes: &[BoxDims], config: EnvConfig, actions: &[PackAction]) -> Result<PackingEnv> {
    let mut env = PackingEnv::reset(boxes, config)?;
    for a in actions {
        env.step(a)?;
    }
    Ok(env)
}

/// Which heuristic to run for a given setting: MAXRECTS-BL for offline 2D,
/// SKYLINE-BL for online 2D and the height-map heuristic in 3D.
pub fn heuristic(instance: &Instance, bin: BinSpec, mode: Mode) -> Result<Vec<PackAction>> {
    match (bin.dim, mode) {
        (Dim::Two, Mode::Offline) => maxrects_bl(&instance.boxes, bin),
        (Dim::Two, Mode::Online) => skyline_bl(&instance.boxes, bin),
        (Dim::Three, _) => heuristic_3d(&instance.boxes, bin, mode),
    }
}

/// A grid position and the placement the environment would produce there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotChoice {
    pub pos_x: usize,
    pub pos_y: usize,
    pub placement: Placement,
}

fn clamped_coord(slot: usize, extent: f64, slots: usize, side: f64) -> f64 {
    (slot as f64 * extent / slots as f64).min(extent - side)
}

/// Slot indices worth probing along one axis: zero, the first slot past each
/// far edge in `edges`, and the first slot that clamps to the border.
fn axis_candidates(edges: impl Iterator<Item = f64>, extent: f64, slots: usize, side: f64) -> Vec<usize> {
    let mut out = vec![0, coord_to_slot_ceil(extent - side, extent, slots)];
    out.extend(edges.map(|e| coord_to_slot_ceil(e, extent, slots)));
    out.sort_unstable();
    out.dedup();
    out
}

/// Visit every grid position that can be the lowest-drop position for `dims`
/// together with its drop height, in increasing `(pos_x, pos_y)` order.
///
/// Moving a box towards the origin never raises its drop height until one
/// of its edges crosses the far edge of a placed box, so the lexicographically
/// first minimizer over the whole grid is always among these positions.
pub fn for_each_corner(
    history: &[Placement],
    bin: &BinSpec,
    dims: BoxDims,
    mut visit: impl FnMut(usize, usize, f64, f64, f64) -> bool,
) {
    let xs = axis_candidates(history.iter().map(|b| b.x + b.dims.w), bin.width, bin.slots, dims.w);
    let mut near: Vec<&Placement> = Vec::with_capacity(history.len());
    for kx in xs {
        let x = clamped_coord(kx, bin.width, bin.slots, dims.w);
        near.clear();
        near.extend(history.iter().filter(|b| x < b.x + b.dims.w && b.x < x + dims.w));
        let ys = match bin.dim {
            Dim::Two => vec![0],
            Dim::Three => axis_candidates(near.iter().map(|b| b.y + b.dims.l), bin.length, bin.slots, dims.l),
        };
        for ky in ys {
            let y = match bin.dim {
                Dim::Two => 0.0,
                Dim::Three => clamped_coord(ky, bin.length, bin.slots, dims.l),
            };
            let z = near
                .iter()
                .filter(|b| y < b.y + b.dims.l && b.y < y + dims.l)
                .map(|b| b.top())
                .fold(0.0, f64::max);
            if !visit(kx, ky, x, y, z) {
                return;
            }
        }
    }
}

/// Lowest drop position for `dims` (already rotated), ties broken by the
/// smallest x slot then the smallest y slot.
pub fn lowest_slot(history: &[Placement], bin: &BinSpec, dims: BoxDims) -> SlotChoice {
    let mut best: Option<SlotChoice> = None;
    for_each_corner(history, bin, dims, |kx, ky, x, y, z| {
        if best.map_or(true, |b| z < b.placement.z) {
            best = Some(SlotChoice { pos_x: kx, pos_y: ky, placement: Placement { dims, x, y, z } });
        }
        // nothing beats the floor
        z > 0.0
    });
    best.expect("at least one candidate position")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::drop_height;
    use crate::geometry::{clamp_into_bin, rotate, slot_to_coord, Rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive scan of every grid slot.
    fn lowest_slot_scan(history: &[Placement], bin: &BinSpec, dims: BoxDims) -> (usize, usize, f64) {
        let ny = if bin.dim == Dim::Two { 1 } else { bin.slots };
        let mut best = (0, 0, f64::INFINITY);
        for kx in 0..bin.slots {
            for ky in 0..ny {
                let x = slot_to_coord(kx, bin.width, bin.slots).unwrap();
                let y = if bin.dim == Dim::Two { 0.0 } else { slot_to_coord(ky, bin.length, bin.slots).unwrap() };
                let p = clamp_into_bin(Placement { dims, x, y, z: 0.0 }, bin);
                let z = drop_height(history, p.x, p.y, dims);
                if z < best.2 {
                    best = (kx, ky, z);
                }
            }
        }
        best
    }

    #[test]
    fn corner_search_matches_full_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..60 {
            let dim = if trial % 3 == 0 { Dim::Two } else { Dim::Three };
            let bin = match dim {
                Dim::Two => BinSpec::strip(10.0, 32),
                Dim::Three => BinSpec::cube(10.0, 24),
            };
            let mut history: Vec<Placement> = Vec::new();
            for _ in 0..25 {
                let mut d = BoxDims::new(rng.gen_range(0.3..4.0), rng.gen_range(0.3..4.0), rng.gen_range(0.3..4.0));
                if dim == Dim::Two {
                    d.l = bin.length;
                }
                let d = rotate(d, Rotation(rng.gen_range(0..dim.rotation_count() as u8)));
                let fast = lowest_slot(&history, &bin, d);
                let (kx, ky, z) = lowest_slot_scan(&history, &bin, d);
                assert_eq!((fast.pos_x, fast.pos_y), (kx, ky));
                assert_eq!(fast.placement.z, z);
                // place somewhere random to build an uneven surface
                let x = slot_to_coord(rng.gen_range(0..bin.slots), bin.width, bin.slots).unwrap();
                let y = if dim == Dim::Two { 0.0 } else { slot_to_coord(rng.gen_range(0..bin.slots), bin.length, bin.slots).unwrap() };
                let p = clamp_into_bin(Placement { dims: d, x, y, z: 0.0 }, &bin);
                let z = drop_height(&history, p.x, p.y, d);
                history.push(Placement { z, ..p });
            }
        }
    }
}
