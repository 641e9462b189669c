//! The packing MDP.
//!
//! State is split in two: a FIFO window of the most recent placements (the
//! packed context) and a fixed number of candidate slots holding boxes not
//! yet packed (the unpacked context). Every step removes the chosen
//! candidate, refills its slot from the pending queue, drops the box under
//! gravity and pushes the placement into the packed FIFO.
//!
//! The reward of a step is the decrease of the volume gap
//! `g_t = W * L * H_t - sum of placed volumes`, so an episode's rewards sum to
//! `-W * L * H_n + sum of volumes`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    boxes_intersect, clamp_into_bin, footprints_overlap, rotate, slot_to_coord, BinSpec, BoxDims,
    Dim, Placement, Rotation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Offline,
    Online,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(Mode::Offline),
            "online" => Ok(Mode::Online),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub bin: BinSpec,
    /// Capacity of the packed FIFO (`n_p`).
    pub packed_capacity: usize,
    /// Number of candidate slots (`n_u`). Online mode always shows one.
    pub unpacked_capacity: usize,
    pub mode: Mode,
}

impl EnvConfig {
    pub fn new(bin: BinSpec, mode: Mode) -> Self {
        EnvConfig { bin, packed_capacity: 20, unpacked_capacity: 20, mode }
    }

    pub fn with_capacities(mut self, packed: usize, unpacked: usize) -> Self {
        self.packed_capacity = packed;
        self.unpacked_capacity = unpacked;
        self
    }

    /// Candidate slots actually exposed.
    pub fn visible_slots(&self) -> usize {
        match self.mode {
            Mode::Offline => self.unpacked_capacity,
            Mode::Online => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bin.validate()?;
        if self.packed_capacity == 0 || self.unpacked_capacity == 0 {
            return Err(Error::Config("context capacities must be positive".into()));
        }
        Ok(())
    }
}

/// One packing action. `select` is ignored online and `pos_y` is ignored in 2D.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PackAction {
    pub select: usize,
    pub rotation: Rotation,
    pub pos_x: usize,
    pub pos_y: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub new_height: f64,
    pub done: bool,
    pub placement: Placement,
}

#[derive(Debug, Clone)]
pub struct EnvState {
    pub packed: VecDeque<Placement>,
    pub unpacked: Vec<Option<BoxDims>>,
    pub pending: VecDeque<BoxDims>,
    pub history: Vec<Placement>,
    pub height: f64,
    pub gap: f64,
    pub placed_volume: f64,
}

impl EnvState {
    pub fn mask(&self) -> Vec<bool> {
        self.unpacked.iter().map(Option::is_some).collect()
    }
}

/// Which sub-action the observation is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Select,
    Rotate { selected: usize },
    Position { selected: usize, rotation: Rotation },
}

/// Normalized model inputs. Horizontal coordinates map the bin footprint to
/// `[-1, 1]`; lengths, `z` and heights are scaled by `2 / W`.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Select { packed: Vec<[f64; 6]>, unpacked: Vec<[f64; 3]>, mask: Vec<bool> },
    Rotate { packed: Vec<[f64; 6]>, current: [f64; 3] },
    Position { packed: Vec<[f64; 6]>, current: [f64; 3] },
}

impl Observation {
    pub fn packed(&self) -> &[[f64; 6]] {
        match self {
            Observation::Select { packed, .. }
            | Observation::Rotate { packed, .. }
            | Observation::Position { packed, .. } => packed,
        }
    }
}

pub fn normalize_dims(d: &BoxDims, bin: &BinSpec) -> [f64; 3] {
    [2.0 * d.w / bin.width, 2.0 * d.l / bin.length, 2.0 * d.h / bin.width]
}

pub fn normalize_placement(p: &Placement, bin: &BinSpec) -> [f64; 6] {
    let [w, l, h] = normalize_dims(&p.dims, bin);
    [
        w,
        l,
        h,
        2.0 * p.x / bin.width - 1.0,
        2.0 * p.y / bin.length - 1.0,
        2.0 * p.z / bin.width,
    ]
}

/// Check an instance against the bin before an episode starts.
pub fn validate_instance(instance: &[BoxDims], bin: &BinSpec) -> Result<()> {
    if instance.is_empty() {
        return Err(Error::InvalidInput("instance has no boxes".into()));
    }
    for (index, d) in instance.iter().enumerate() {
        if !d.is_valid() {
            return Err(Error::InstanceInvalid { index, reason: format!("has non-positive side {d:?}") });
        }
        if bin.feasible_rotations(d).is_empty() {
            return Err(Error::InstanceInvalid {
                index,
                reason: format!("{d:?} does not fit the bin footprint in any rotation"),
            });
        }
    }
    Ok(())
}

/// Gravity drop: the top of the highest placed box whose footprint strictly
/// overlaps the candidate, or the floor.
pub fn drop_height(history: &[Placement], x: f64, y: f64, dims: BoxDims) -> f64 {
    let probe = Placement { dims, x, y, z: 0.0 };
    history
        .iter()
        .filter(|b| footprints_overlap(&probe, b))
        .map(Placement::top)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct PackingEnv {
    config: EnvConfig,
    state: EnvState,
    total_boxes: usize,
}

impl PackingEnv {
    pub fn reset(instance: &[BoxDims], config: EnvConfig) -> Result<Self> {
        config.validate()?;
        validate_instance(instance, &config.bin)?;
        let slots = config.visible_slots();
        let mut pending: VecDeque<BoxDims> = instance.iter().copied().collect();
        let unpacked = (0..slots).map(|_| pending.pop_front()).collect();
        Ok(PackingEnv {
            config,
            state: EnvState {
                packed: VecDeque::with_capacity(config.packed_capacity),
                unpacked,
                pending,
                history: Vec::with_capacity(instance.len()),
                height: 0.0,
                gap: 0.0,
                placed_volume: 0.0,
            },
            total_boxes: instance.len(),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn bin(&self) -> &BinSpec {
        &self.config.bin
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn history(&self) -> &[Placement] {
        &self.state.history
    }

    pub fn total_boxes(&self) -> usize {
        self.total_boxes
    }

    pub fn is_done(&self) -> bool {
        self.state.history.len() == self.total_boxes
    }

    pub fn mask(&self) -> Vec<bool> {
        self.state.mask()
    }

    /// Box in candidate slot `slot`, if any.
    pub fn candidate(&self, slot: usize) -> Option<BoxDims> {
        self.state.unpacked.get(slot).copied().flatten()
    }

    /// Rotations of the candidate in `slot` that fit the bin footprint.
    pub fn rotation_mask(&self, slot: usize) -> Vec<bool> {
        let dim = self.config.bin.dim;
        let n = dim.rotation_count();
        match self.candidate(slot) {
            Some(d) => (0..n).map(|r| self.config.bin.fits(&rotate(d, Rotation(r as u8)))).collect(),
            None => vec![false; n],
        }
    }

    pub fn drop_height(&self, x: f64, y: f64, dims: BoxDims) -> f64 {
        drop_height(&self.state.history, x, y, dims)
    }

    /// Where `action` would put the box, without changing the state.
    pub fn preview(&self, action: &PackAction) -> Result<Placement> {
        let bin = &self.config.bin;
        let select = match self.config.mode {
            Mode::Offline => action.select,
            Mode::Online => 0,
        };
        let dims = self.candidate(select).ok_or_else(|| {
            if self.is_done() {
                Error::EpisodeComplete
            } else {
                Error::InvalidAction(format!("slot {select} is masked"))
            }
        })?;
        if !action.rotation.is_valid_for(bin.dim) {
            return Err(Error::InvalidAction(format!("rotation {} invalid for {:?}", action.rotation.0, bin.dim)));
        }
        let dims = rotate(dims, action.rotation);
        if !bin.fits(&dims) {
            return Err(Error::InvalidAction(format!("rotation {} does not fit the bin", action.rotation.0)));
        }
        let x = slot_to_coord(action.pos_x, bin.width, bin.slots)?;
        let y = match bin.dim {
            Dim::Two => 0.0,
            Dim::Three => slot_to_coord(action.pos_y, bin.length, bin.slots)?,
        };
        let p = clamp_into_bin(Placement { dims, x, y, z: 0.0 }, bin);
        let z = self.drop_height(p.x, p.y, p.dims);
        Ok(Placement { z, ..p })
    }

    pub fn step(&mut self, action: &PackAction) -> Result<StepOutcome> {
        let placement = self.preview(action)?;
        let slot = match self.config.mode {
            Mode::Offline => action.select,
            Mode::Online => 0,
        };
        let bin = self.config.bin;
        let st = &mut self.state;

        if st.packed.len() == self.config.packed_capacity {
            st.packed.pop_front();
        }
        st.packed.push_back(placement);
        st.history.push(placement);
        st.unpacked[slot] = st.pending.pop_front();

        let prev_gap = st.gap;
        st.height = st.height.max(placement.top());
        st.placed_volume += placement.dims.volume();
        st.gap = bin.base_area() * st.height - st.placed_volume;
        Ok(StepOutcome {
            reward: prev_gap - st.gap,
            new_height: st.height,
            done: self.is_done(),
            placement,
        })
    }

    pub fn gap_ratio(&self) -> Result<f64> {
        gap_ratio(&self.config.bin, &self.state.history)
    }

    pub fn observe(&self, phase: Phase) -> Result<Observation> {
        let bin = &self.config.bin;
        let packed = self.state.packed.iter().map(|p| normalize_placement(p, bin)).collect();
        let current = |slot: usize| {
            self.candidate(slot).ok_or_else(|| Error::InvalidAction(format!("slot {slot} is masked")))
        };
        Ok(match phase {
            Phase::Select => Observation::Select {
                packed,
                unpacked: self
                    .state
                    .unpacked
                    .iter()
                    .map(|d| d.map(|d| normalize_dims(&d, bin)).unwrap_or([0.0; 3]))
                    .collect(),
                mask: self.mask(),
            },
            Phase::Rotate { selected } => {
                Observation::Rotate { packed, current: normalize_dims(&current(selected)?, bin) }
            }
            Phase::Position { selected, rotation } => Observation::Position {
                packed,
                current: normalize_dims(&rotate(current(selected)?, rotation), bin),
            },
        })
    }
}

/// Bin gap ratio in percent: `(1 - placed volume / (W * L * H)) * 100`.
pub fn gap_ratio(bin: &BinSpec, placements: &[Placement]) -> Result<f64> {
    if placements.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    let height = placements.iter().map(Placement::top).fold(0.0, f64::max);
    let volume: f64 = placements.iter().map(|p| p.dims.volume()).sum();
    Ok((1.0 - volume / (bin.base_area() * height)) * 100.0)
}

/// Full physical check of a finished packing: containment, pairwise
/// non-intersection and gravity support.
pub fn validate_packing(bin: &BinSpec, placements: &[Placement]) -> Result<()> {
    let eps = 1e-9 * bin.width.max(bin.length);
    for (i, p) in placements.iter().enumerate() {
        if !(p.x >= -eps && p.y >= -eps && p.z >= -eps)
            || p.x + p.dims.w > bin.width + eps
            || p.y + p.dims.l > bin.length + eps
        {
            return Err(Error::Infeasible(format!("containment: placement {i} leaves the bin")));
        }
        let supported = p.z.abs() <= eps
            || placements[..i]
                .iter()
                .any(|b| footprints_overlap(p, b) && (p.z - b.top()).abs() <= eps);
        if !supported {
            return Err(Error::Infeasible(format!("support: placement {i} floats at z={}", p.z)));
        }
        // interiors shrunk by eps so exact contact is allowed
        let shrink = |q: &Placement| Placement {
            dims: BoxDims::new(q.dims.w - 2.0 * eps, q.dims.l - 2.0 * eps, q.dims.h - 2.0 * eps),
            x: q.x + eps,
            y: q.y + eps,
            z: q.z + eps,
        };
        if let Some(j) = placements[..i].iter().position(|b| boxes_intersect(&shrink(p), &shrink(b))) {
            return Err(Error::Infeasible(format!("no-overlap: placements {j} and {i} intersect")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> BoxDims {
        BoxDims::new(1.0, 1.0, 1.0)
    }

    fn bin2x2() -> BinSpec {
        BinSpec::cube(2.0, 2)
    }

    fn act(select: usize, x: usize, y: usize) -> PackAction {
        PackAction { select, rotation: Rotation::IDENTITY, pos_x: x, pos_y: y }
    }

    #[test]
    fn reset_fills_candidates_and_masks_shortfall() {
        let bin = BinSpec::cube(10.0, 128);
        let cfg = EnvConfig::new(bin, Mode::Offline);
        let env = PackingEnv::reset(&vec![unit(); 40], cfg).unwrap();
        assert_eq!(env.state().unpacked.iter().flatten().count(), 20);
        assert_eq!(env.state().pending.len(), 20);

        let env = PackingEnv::reset(&vec![unit(); 5], cfg).unwrap();
        let mask = env.mask();
        assert_eq!(mask.iter().filter(|m| **m).count(), 5);
        assert_eq!(mask.iter().filter(|m| !**m).count(), 15);

        let online = EnvConfig::new(bin, Mode::Online);
        let env = PackingEnv::reset(&vec![unit(); 5], online).unwrap();
        assert_eq!(env.mask(), vec![true]);
        assert_eq!(env.state().height, 0.0);
        assert_eq!(env.state().gap, 0.0);
    }

    #[test]
    fn reset_rejects_unplaceable_box() {
        let bin = BinSpec::cube(2.0, 4);
        let err = PackingEnv::reset(&[BoxDims::new(3.0, 3.0, 1.0)], EnvConfig::new(bin, Mode::Offline));
        assert!(matches!(err, Err(Error::InstanceInvalid { index: 0, .. })));
        // a tall box that fits after rotation is fine
        assert!(PackingEnv::reset(&[BoxDims::new(3.0, 1.0, 1.0)], EnvConfig::new(bin, Mode::Offline)).is_ok());
    }

    #[test]
    fn drop_height_examples() {
        let base = Placement { dims: BoxDims::new(2.0, 2.0, 1.0), x: 0.0, y: 0.0, z: 0.0 };
        assert_eq!(drop_height(&[], 0.0, 0.0, unit()), 0.0);
        assert_eq!(drop_height(&[base], 1.0, 1.0, unit()), 1.0);
        assert_eq!(drop_height(&[base], 2.0, 0.0, unit()), 0.0);
    }

    #[test]
    fn reward_examples_on_small_bin() {
        let cfg = EnvConfig::new(bin2x2(), Mode::Offline);
        let mut env = PackingEnv::reset(&[unit(), unit()], cfg).unwrap();
        let out = env.step(&act(0, 0, 0)).unwrap();
        assert_eq!(env.state().gap, 3.0);
        assert_eq!(out.reward, -3.0);
        assert!(!out.done);
        let out = env.step(&act(1, 1, 0)).unwrap();
        assert_eq!(out.new_height, 1.0);
        assert_eq!(env.state().gap, 2.0);
        assert_eq!(out.reward, 1.0);
        assert!(out.done);
    }

    #[test]
    fn masked_selection_is_an_error() {
        let cfg = EnvConfig::new(bin2x2(), Mode::Offline);
        let mut env = PackingEnv::reset(&[unit()], cfg).unwrap();
        assert!(matches!(env.step(&act(3, 0, 0)), Err(Error::InvalidAction(_))));
        env.step(&act(0, 0, 0)).unwrap();
        assert!(matches!(env.step(&act(0, 0, 0)), Err(Error::EpisodeComplete)));
    }

    #[test]
    fn online_ignores_select() {
        let cfg = EnvConfig::new(bin2x2(), Mode::Online);
        let mut env = PackingEnv::reset(&[unit(), BoxDims::new(2.0, 1.0, 1.0)], cfg).unwrap();
        env.step(&act(7, 0, 0)).unwrap();
        assert_eq!(env.candidate(0), Some(BoxDims::new(2.0, 1.0, 1.0)));
    }

    #[test]
    fn selected_slot_is_refilled_in_place() {
        let cfg = EnvConfig::new(BinSpec::cube(10.0, 8), Mode::Offline).with_capacities(2, 2);
        let boxes: Vec<BoxDims> = (1..=4).map(|i| BoxDims::new(i as f64, 1.0, 1.0)).collect();
        let mut env = PackingEnv::reset(&boxes, cfg).unwrap();
        env.step(&act(0, 0, 0)).unwrap();
        assert_eq!(env.candidate(0).unwrap().w, 3.0);
        assert_eq!(env.candidate(1).unwrap().w, 2.0);
        env.step(&act(0, 0, 0)).unwrap();
        env.step(&act(0, 0, 0)).unwrap();
        assert_eq!(env.mask(), vec![false, true]);
        // FIFO keeps the two most recent placements
        let widths: Vec<f64> = env.state().packed.iter().map(|p| p.dims.w).collect();
        assert_eq!(widths, vec![3.0, 4.0]);
    }

    #[test]
    fn gap_ratio_examples() {
        let bin = bin2x2();
        let mut cubes = Vec::new();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    cubes.push(Placement { dims: unit(), x: x as f64, y: y as f64, z: z as f64 });
                }
            }
        }
        assert!(gap_ratio(&bin, &cubes).unwrap().abs() < 1e-12);
        assert_eq!(gap_ratio(&bin, &cubes[..1]).unwrap(), 75.0);
        assert!(matches!(gap_ratio(&bin, &[]), Err(Error::UndefinedMetric)));
    }

    #[test]
    fn observation_phases() {
        let bin = BinSpec::cube(10.0, 128);
        let cfg = EnvConfig::new(bin, Mode::Offline).with_capacities(3, 3);
        let env = PackingEnv::reset(&[BoxDims::new(1.0, 2.0, 3.0), unit()], cfg).unwrap();
        match env.observe(Phase::Select).unwrap() {
            Observation::Select { mask, unpacked, packed } => {
                assert_eq!(mask, vec![true, true, false]);
                assert_eq!(unpacked[2], [0.0; 3]);
                assert!(packed.is_empty());
            }
            o => panic!("unexpected {o:?}"),
        }
        match env.observe(Phase::Rotate { selected: 0 }).unwrap() {
            Observation::Rotate { current, .. } => assert_eq!(current, [0.2, 0.4, 0.6]),
            o => panic!("unexpected {o:?}"),
        }
        let r = Rotation(1);
        match env.observe(Phase::Position { selected: 0, rotation: r }).unwrap() {
            Observation::Position { current, .. } => {
                assert_eq!(current, normalize_dims(&rotate(BoxDims::new(1.0, 2.0, 3.0), r), &bin))
            }
            o => panic!("unexpected {o:?}"),
        }
    }

    #[test]
    fn validation_catches_overlap_and_floating() {
        let bin = bin2x2();
        let a = Placement { dims: unit(), x: 0.0, y: 0.0, z: 0.0 };
        let b = Placement { x: 0.5, ..a };
        assert!(validate_packing(&bin, &[a, b]).is_err());
        let c = Placement { z: 0.5, x: 1.0, ..a };
        assert!(validate_packing(&bin, &[a, c]).is_err());
        let d = Placement { z: 1.0, x: 0.5, ..a };
        assert!(validate_packing(&bin, &[a, d]).is_ok());
    }
}
