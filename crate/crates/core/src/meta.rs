//! Genetic algorithm and simulated annealing over (order, rotation) genomes.
//!
//! A genome fixes the packing order and the rotation of every box. The
//! decoder drops each box in that order at the lowest grid position, so the
//! environment's physics are the only scorer.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Mode, PackAction, PackingEnv};
use crate::error::{Error, Result};
use crate::geometry::{rotate, BinSpec, BoxDims, Rotation};
use crate::heuristics::{descending_volume, lowest_slot, solver_env_config};

/// `order` is a permutation of box indices; `rotations[i]` belongs to box `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Genome {
    pub order: Vec<usize>,
    pub rotations: Vec<Rotation>,
}

impl Genome {
    pub fn is_valid(&self, boxes: &[BoxDims], bin: &BinSpec) -> bool {
        let mut seen = vec![false; boxes.len()];
        self.order.len() == boxes.len()
            && self.rotations.len() == boxes.len()
            && self.order.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
            && self.rotations.iter().zip(boxes).all(|(r, d)| r.is_valid_for(bin.dim) && bin.fits(&rotate(*d, *r)))
    }

    /// Decreasing volume, each box with its lowest feasible profile.
    pub fn constructive(boxes: &[BoxDims], bin: &BinSpec) -> Genome {
        let rotations = boxes
            .iter()
            .map(|d| {
                bin.feasible_rotations(d)
                    .into_iter()
                    .min_by(|a, b| rotate(*d, *a).h.total_cmp(&rotate(*d, *b).h))
                    .expect("instance validated")
            })
            .collect();
        Genome { order: descending_volume(boxes), rotations }
    }

    pub fn random(boxes: &[BoxDims], bin: &BinSpec, rng: &mut impl Rng) -> Genome {
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        order.shuffle(rng);
        let rotations = boxes.iter().map(|d| random_rotation(d, bin, rng)).collect();
        Genome { order, rotations }
    }
}

fn random_rotation(d: &BoxDims, bin: &BinSpec, rng: &mut impl Rng) -> Rotation {
    *bin.feasible_rotations(d).choose(rng).expect("instance validated")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub ga_population: usize,
    pub ga_generations: usize,
    pub ga_tournament: usize,
    /// Probability that a child gets one random swap in its order.
    pub ga_swap_rate: f64,
    /// Per-box probability of resampling the rotation.
    pub ga_rotation_rate: f64,
    pub sa_iterations: usize,
    /// `None` calibrates so uphill moves start out accepted with
    /// probability 0.8.
    pub sa_initial_temperature: Option<f64>,
    pub sa_cooling_rate: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            ga_population: 120,
            ga_generations: 200,
            ga_tournament: 3,
            ga_swap_rate: 0.1,
            ga_rotation_rate: 0.1,
            sa_iterations: 5000,
            sa_initial_temperature: None,
            sa_cooling_rate: 0.999,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |p: f64| (0.0..=1.0).contains(&p);
        if self.ga_population < 2 || self.ga_generations == 0 || self.ga_tournament == 0 || self.sa_iterations == 0 {
            return Err(Error::Config("GA/SA sizes must be positive (population at least 2)".into()));
        }
        if !rate(self.ga_swap_rate) || !rate(self.ga_rotation_rate) {
            return Err(Error::Config("mutation rates must lie in [0, 1]".into()));
        }
        if !(self.sa_cooling_rate > 0.0 && self.sa_cooling_rate <= 1.0) {
            return Err(Error::Config("sa_cooling_rate must lie in (0, 1]".into()));
        }
        if self.sa_initial_temperature.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("sa_initial_temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub genome: Genome,
    pub score: f64,
    pub actions: Vec<PackAction>,
    /// Incumbent score after initialization and after every generation or
    /// iteration.
    pub trace: Vec<f64>,
    pub decodes: usize,
}

/// Pack the boxes in genome order, each at its lowest drop position.
pub fn decode(genome: &Genome, boxes: &[BoxDims], bin: &BinSpec) -> Result<(Vec<PackAction>, f64)> {
    let mut env = PackingEnv::reset(boxes, solver_env_config(*bin, Mode::Offline, boxes.len()))?;
    let mut actions = Vec::with_capacity(boxes.len());
    for &i in &genome.order {
        let r = genome.rotations[i];
        let c = lowest_slot(env.history(), bin, rotate(boxes[i], r));
        let a = PackAction { select: i, rotation: r, pos_x: c.pos_x, pos_y: c.pos_y };
        env.step(&a)?;
        actions.push(a);
    }
    Ok((actions, env.gap_ratio()?))
}

fn score(genome: &Genome, boxes: &[BoxDims], bin: &BinSpec) -> f64 {
    decode(genome, boxes, bin).expect("valid genome decodes").1
}

/// Order crossover: keep a slice of `a`, fill the rest in `b`'s order.
pub fn order_crossover(a: &[usize], b: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    let n = a.len();
    let (mut i, mut j) = (rng.gen_range(0..n), rng.gen_range(0..n));
    if i > j {
        std::mem::swap(&mut i, &mut j);
    }
    let mut child = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for k in i..=j {
        child[k] = a[k];
        used[a[k]] = true;
    }
    let mut fill = b.iter().cycle().skip(j + 1).filter(|g| !used[**g]);
    for k in (j + 1..n).chain(0..i) {
        child[k] = *fill.next().expect("enough genes left");
    }
    child
}

fn tournament<'a>(pop: &'a [(Genome, f64)], k: usize, rng: &mut impl Rng) -> &'a Genome {
    let mut best = &pop[rng.gen_range(0..pop.len())];
    for _ in 1..k {
        let c = &pop[rng.gen_range(0..pop.len())];
        if c.1 < best.1 {
            best = c;
        }
    }
    &best.0
}

pub fn ga_solve(boxes: &[BoxDims], bin: &BinSpec, cfg: &SearchConfig) -> Result<SearchResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let evaluate = |gs: Vec<Genome>| -> Vec<(Genome, f64)> {
        gs.into_par_iter().map(|g| { let s = score(&g, boxes, bin); (g, s) }).collect()
    };
    let init: Vec<Genome> = (0..cfg.ga_population).map(|_| Genome::random(boxes, bin, &mut rng)).collect();
    let mut pop = evaluate(init);
    let mut decodes = pop.len();
    let elite = |pop: &[(Genome, f64)]| -> (Genome, f64) {
        pop.iter().min_by(|a, b| a.1.total_cmp(&b.1)).cloned().expect("non-empty population")
    };
    let mut best = elite(&pop);
    let mut trace = vec![best.1];

    for _ in 0..cfg.ga_generations {
        let mut children = Vec::with_capacity(cfg.ga_population);
        while children.len() < cfg.ga_population {
            let (pa, pb) = (tournament(&pop, cfg.ga_tournament, &mut rng), tournament(&pop, cfg.ga_tournament, &mut rng));
            let mut order = order_crossover(&pa.order, &pb.order, &mut rng);
            let mut rotations: Vec<Rotation> =
                (0..boxes.len()).map(|i| if rng.gen::<bool>() { pa.rotations[i] } else { pb.rotations[i] }).collect();
            if boxes.len() > 1 && rng.gen::<f64>() < cfg.ga_swap_rate {
                let (i, j) = (rng.gen_range(0..boxes.len()), rng.gen_range(0..boxes.len()));
                order.swap(i, j);
            }
            for (i, r) in rotations.iter_mut().enumerate() {
                if rng.gen::<f64>() < cfg.ga_rotation_rate {
                    *r = random_rotation(&boxes[i], bin, &mut rng);
                }
            }
            children.push(Genome { order, rotations });
        }
        decodes += children.len();
        let mut next = evaluate(children);
        // elitism: the incumbent replaces the worst child
        let worst = (0..next.len()).max_by(|&a, &b| next[a].1.total_cmp(&next[b].1)).expect("non-empty");
        if next[worst].1 > best.1 {
            next[worst] = best.clone();
        }
        pop = next;
        let gen_best = elite(&pop);
        if gen_best.1 < best.1 {
            best = gen_best;
        }
        trace.push(best.1);
    }
    let (actions, score) = decode(&best.0, boxes, bin)?;
    Ok(SearchResult { genome: best.0, score, actions, trace, decodes })
}

fn neighbour(g: &Genome, boxes: &[BoxDims], bin: &BinSpec, rng: &mut impl Rng) -> Genome {
    let mut n = g.clone();
    let n_boxes = boxes.len();
    if n_boxes > 1 && rng.gen::<bool>() {
        let i = rng.gen_range(0..n_boxes);
        let j = (i + rng.gen_range(1..n_boxes)) % n_boxes;
        n.order.swap(i, j);
    } else {
        let i = rng.gen_range(0..n_boxes);
        n.rotations[i] = random_rotation(&boxes[i], bin, rng);
    }
    n
}

/// Temperature at which the mean uphill move of `samples` random
/// neighbours of `start` is accepted with probability 0.8.
fn calibrate_temperature(start: &Genome, start_score: f64, boxes: &[BoxDims], bin: &BinSpec, rng: &mut impl Rng) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for _ in 0..100 {
        let d = score(&neighbour(start, boxes, bin, rng), boxes, bin) - start_score;
        if d > 0.0 {
            sum += d;
            count += 1;
        }
    }
    if count == 0 {
        return 1.0;
    }
    -(sum / count as f64) / 0.8f64.ln()
}

pub fn sa_solve(boxes: &[BoxDims], bin: &BinSpec, cfg: &SearchConfig) -> Result<SearchResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = Genome::constructive(boxes, bin);
    let mut current_score = score(&current, boxes, bin);
    let mut decodes = 1;
    let mut temperature = match cfg.sa_initial_temperature {
        Some(t) => t,
        None => {
            decodes += 100;
            calibrate_temperature(&current, current_score, boxes, bin, &mut rng)
        }
    };
    let mut best = (current.clone(), current_score);
    let mut trace = vec![current_score];

    for _ in 0..cfg.sa_iterations {
        let cand = neighbour(&current, boxes, bin, &mut rng);
        let s = score(&cand, boxes, bin);
        decodes += 1;
        if accept(s - current_score, temperature, rng.gen()) {
            current = cand;
            current_score = s;
            if s < best.1 {
                best = (current.clone(), s);
            }
        }
        temperature *= cfg.sa_cooling_rate;
        trace.push(best.1);
    }
    let (actions, score) = decode(&best.0, boxes, bin)?;
    Ok(SearchResult { genome: best.0, score, actions, trace, decodes })
}

/// Metropolis rule with a uniform draw `u` in `[0, 1)`.
pub fn accept(delta: f64, temperature: f64, u: f64) -> bool {
    delta <= 0.0 || (temperature > 0.0 && u < (-delta / temperature).exp())
}
