//! Solving, scoring, solution files, layout rendering and benchmarks.
//!
//! Every solver returns actions; the environment replays them, the finished
//! packing is checked with [`validate_packing`] and only then scored. A
//! solution file holds one JSON record per line:
//!
//! ```text
//! {"bin": {"W": 10, "L": 10}, "boxes": [[w, l, h], ...], "dim": 3, "method": "heuristic",
//!  "placements": [[w, l, h, x, y, z], ...], "gap_ratio": 41.2}
//! ```
//!
//! Placements carry the rotated dimensions and appear in packing order.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    format_bin_and_boxes, format_row, generate_dataset, read_instances, validate_dims, BinRecord, Distribution,
    Instance, DEFAULT_BIN_SIDE,
};
use crate::env::{gap_ratio, validate_packing, Mode, PackingEnv};
use crate::error::{Error, Result};
use crate::geometry::{BinSpec, BoxDims, Dim, Placement};
use crate::heuristics::{heuristic, replay, solver_env_config};
use crate::meta::{ga_solve, sa_solve, SearchConfig};
use crate::model::{load_checkpoint, run_episode, Choice, Model};
use crate::train::random_action;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Heuristic,
    Ga,
    Sa,
    Rcql,
    /// Uniformly random valid actions.
    Random,
}

impl Method {
    pub fn is_learned(self) -> bool {
        self == Method::Rcql
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Heuristic => "heuristic",
            Method::Ga => "ga",
            Method::Sa => "sa",
            Method::Rcql => "rcql",
            Method::Random => "random",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heuristic" => Ok(Method::Heuristic),
            "ga" => Ok(Method::Ga),
            "sa" => Ok(Method::Sa),
            "rcql" => Ok(Method::Rcql),
            "random" => Ok(Method::Random),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    Greedy,
    Sample,
}

/// Instances generated on the fly when no dataset file is given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSpec {
    pub count: usize,
    pub n_boxes: usize,
    pub distribution: Distribution,
    pub bin_side: f64,
    pub seed: u64,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        GenerateSpec { count: 16, n_boxes: 40, distribution: Distribution::Hard, bin_side: DEFAULT_BIN_SIDE, seed: 0 }
    }
}

/// Everything `solve` needs. Loadable from TOML; the command line overrides
/// single fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub dim: u32,
    pub method: Method,
    /// Instance file; when absent `generate` describes the instances.
    pub dataset: Option<PathBuf>,
    pub generate: GenerateSpec,
    pub checkpoint: Option<PathBuf>,
    /// Slot grid resolution for the classical solvers. Learned models use
    /// their own.
    pub slots: usize,
    pub seed: u64,
    /// Worker threads for instance-level parallelism; 0 picks automatically.
    pub workers: usize,
    /// Inference runs per instance for learned methods.
    pub runs: usize,
    pub decoding: Decoding,
    pub search: SearchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Offline,
            dim: 3,
            method: Method::Heuristic,
            dataset: None,
            generate: GenerateSpec::default(),
            checkpoint: None,
            slots: 128,
            seed: 0,
            workers: 0,
            runs: 4,
            decoding: Decoding::Greedy,
            search: SearchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn dimension(&self) -> Result<Dim> {
        Dim::from_int(self.dim).map_err(|_| Error::Config(format!("dim must be 2 or 3, got {}", self.dim)))
    }

    pub fn validate(&self) -> Result<()> {
        self.dimension()?;
        if matches!(self.method, Method::Ga | Method::Sa) && self.mode == Mode::Online {
            return Err(Error::Config(format!("{} needs the whole instance and has no online mode", self.method)));
        }
        if self.method == Method::Rcql && self.checkpoint.is_none() {
            return Err(Error::Config("method rcql needs a checkpoint".into()));
        }
        if self.slots < 2 || self.runs == 0 {
            return Err(Error::Config("slots must be at least 2 and runs at least 1".into()));
        }
        if self.dataset.is_none() && (self.generate.count == 0 || self.generate.n_boxes == 0) {
            return Err(Error::Config("generate.count and generate.n_boxes must be positive".into()));
        }
        self.search.validate()
    }

    fn generation_bin(&self) -> Result<BinSpec> {
        Ok(match self.dimension()? {
            Dim::Three => BinSpec::cube(self.generate.bin_side, self.slots),
            Dim::Two => BinSpec::strip(self.generate.bin_side, self.slots),
        })
    }

    /// The instances and a short label for reports.
    pub fn load_dataset(&self) -> Result<(String, Vec<Instance>)> {
        match &self.dataset {
            Some(path) => {
                let id = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
                Ok((id, read_instances(path)?))
            }
            None => {
                let g = &self.generate;
                let bin = self.generation_bin()?;
                let id = format!("{}-{}d-{}-s{}", g.distribution, self.dim, g.n_boxes, g.seed);
                Ok((id, generate_dataset(g.count, g.n_boxes, g.distribution, bin, g.seed)?))
            }
        }
    }
}

/// A finished, validated packing.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub width: f64,
    pub length: f64,
    pub dim: Dim,
    pub method: Method,
    pub boxes: Vec<BoxDims>,
    pub placements: Vec<Placement>,
    pub gap_ratio: f64,
}

impl Solution {
    /// Check the packing and recompute its gap ratio from the placements.
    pub fn validated(width: f64, length: f64, dim: Dim, method: Method, boxes: Vec<BoxDims>, placements: Vec<Placement>) -> Result<Self> {
        let bin = BinSpec { width, length, slots: 2, dim };
        if placements.len() != boxes.len() {
            return Err(Error::Infeasible(format!("completeness: {} placements for {} boxes", placements.len(), boxes.len())));
        }
        for (i, p) in placements.iter().enumerate() {
            if !p.dims.is_valid() {
                return Err(Error::Infeasible(format!("placement {i} has a non-positive side")));
            }
        }
        if !same_volumes(&boxes, &placements) {
            return Err(Error::Infeasible("completeness: placements are not a rotation of the boxes".into()));
        }
        validate_packing(&bin, &placements)?;
        let gap = gap_ratio(&bin, &placements)?;
        Ok(Solution { width, length, dim, method, boxes, placements, gap_ratio: gap })
    }

    pub fn from_env(env: &PackingEnv, method: Method, boxes: &[BoxDims]) -> Result<Self> {
        let bin = env.bin();
        Solution::validated(bin.width, bin.length, bin.dim, method, boxes.to_vec(), env.history().to_vec())
    }

    pub fn height(&self) -> f64 {
        self.placements.iter().map(Placement::top).fold(0.0, f64::max)
    }

    pub fn to_line(&self) -> String {
        let rows: Vec<String> = self.placements.iter().map(|p| format_row(&p.as_array())).collect();
        format!(
            "{{{}, \"dim\": {}, \"method\": \"{}\", \"placements\": [{}], \"gap_ratio\": {}}}",
            format_bin_and_boxes(self.width, self.length, &self.boxes),
            self.dim.as_int(),
            self.method,
            rows.join(", "),
            crate::dataset::format_float(self.gap_ratio)
        )
    }
}

/// Placements must use each box exactly once up to rotation; compared by
/// sorted side triples.
fn same_volumes(boxes: &[BoxDims], placements: &[Placement]) -> bool {
    let key = |d: &BoxDims| {
        let mut s = d.as_array();
        s.sort_by(f64::total_cmp);
        s
    };
    let mut a: Vec<[f64; 3]> = boxes.iter().map(key).collect();
    let mut b: Vec<[f64; 3]> = placements.iter().map(|p| key(&p.dims)).collect();
    let cmp = |x: &[f64; 3], y: &[f64; 3]| x.iter().zip(y).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal);
    a.sort_by(cmp);
    b.sort_by(cmp);
    a.iter().zip(&b).all(|(x, y)| x.iter().zip(y).all(|(p, q)| (p - q).abs() <= 1e-9 * p.abs().max(1.0)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolutionRecord {
    bin: BinRecord,
    boxes: Vec<[f64; 3]>,
    dim: u32,
    method: Method,
    placements: Vec<[f64; 6]>,
    #[allow(dead_code)]
    gap_ratio: Option<f64>,
}

pub fn write_solutions(path: impl AsRef<Path>, solutions: &[Solution]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for s in solutions {
        writeln!(out, "{}", s.to_line())?;
    }
    out.flush()?;
    Ok(())
}

/// Parse and re-validate every record. The stored gap ratio is ignored and
/// recomputed.
pub fn parse_solutions(reader: impl BufRead) -> Result<Vec<Solution>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SolutionRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        let dim = Dim::from_int(rec.dim).map_err(|_| Error::Validation { line: line_no, message: format!("dim {}", rec.dim) })?;
        let boxes = validate_dims(line_no, rec.bin.w, rec.bin.l, &rec.boxes)?;
        let placements = rec
            .placements
            .iter()
            .map(|p| Placement { dims: BoxDims::new(p[0], p[1], p[2]), x: p[3], y: p[4], z: p[5] })
            .collect();
        let s = Solution::validated(rec.bin.w, rec.bin.l, dim, rec.method, boxes, placements)
            .map_err(|e| Error::Validation { line: line_no, message: e.to_string() })?;
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::Parse { line: 1, message: "no solution records".into() });
    }
    Ok(out)
}

pub fn read_solutions(path: impl AsRef<Path>) -> Result<Vec<Solution>> {
    parse_solutions(BufReader::new(fs::File::open(path)?))
}

/// Per-instance gap ratios and their worst, best, mean and spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub dataset: String,
    pub dim: u32,
    pub mode: Mode,
    /// Gap ratio per instance in percent; for learned methods the mean over
    /// the inference runs.
    pub gap_ratios: Vec<f64>,
    pub worst: f64,
    pub best: f64,
    pub average: f64,
    /// Population variance over instances, or over per-run averages for
    /// learned methods.
    pub variance: f64,
    /// Wall time per instance in seconds.
    pub seconds: Vec<f64>,
}

fn population_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

impl EvalReport {
    /// `runs[r][i]` is the gap ratio of run `r` on instance `i`.
    pub fn from_runs(method: Method, dataset: String, dim: u32, mode: Mode, runs: &[Vec<f64>], seconds: Vec<f64>) -> Self {
        let n = runs[0].len();
        let gap_ratios: Vec<f64> = (0..n).map(|i| runs.iter().map(|r| r[i]).sum::<f64>() / runs.len() as f64).collect();
        let average = gap_ratios.iter().sum::<f64>() / n as f64;
        let variance = if runs.len() > 1 {
            let means: Vec<f64> = runs.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
            population_variance(&means)
        } else {
            population_variance(&gap_ratios)
        };
        EvalReport {
            method,
            dataset,
            dim,
            mode,
            worst: gap_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            best: gap_ratios.iter().copied().fold(f64::INFINITY, f64::min),
            average,
            variance,
            gap_ratios,
            seconds,
        }
    }

    pub fn mean_seconds(&self) -> f64 {
        self.seconds.iter().sum::<f64>() / self.seconds.len().max(1) as f64
    }
}

/// Play one episode with uniformly random valid actions.
fn random_episode(boxes: &[BoxDims], bin: BinSpec, mode: Mode, seed: u64) -> Result<PackingEnv> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = PackingEnv::reset(boxes, solver_env_config(bin, mode, boxes.len()))?;
    while !env.is_done() {
        let a = random_action(&env, &mut rng);
        env.step(&a)?;
    }
    Ok(env)
}

/// Run one method on one instance. `run` separates the seeds of repeated
/// inference runs.
pub fn solve_instance(cfg: &RunConfig, model: Option<&Model>, inst: &Instance, index: usize, run: usize) -> Result<Solution> {
    let dim = cfg.dimension()?;
    let seed = cfg.seed.wrapping_add(index as u64).wrapping_add((run as u64) << 32);
    let env = match cfg.method {
        Method::Heuristic => {
            let bin = inst.bin(cfg.slots, dim);
            let actions = heuristic(inst, bin, cfg.mode)?;
            replay(&inst.boxes, solver_env_config(bin, cfg.mode, inst.boxes.len()), &actions)?
        }
        Method::Ga | Method::Sa => {
            let bin = inst.bin(cfg.slots, dim);
            let search = SearchConfig { seed, ..cfg.search };
            let result =
                if cfg.method == Method::Ga { ga_solve(&inst.boxes, &bin, &search)? } else { sa_solve(&inst.boxes, &bin, &search)? };
            replay(&inst.boxes, solver_env_config(bin, Mode::Offline, inst.boxes.len()), &result.actions)?
        }
        Method::Random => random_episode(&inst.boxes, inst.bin(cfg.slots, dim), cfg.mode, seed)?,
        Method::Rcql => {
            let model = model.ok_or_else(|| Error::Config("method rcql needs a checkpoint".into()))?;
            let bin = inst.bin(model.config.n_s, dim);
            let (_, env) = match cfg.decoding {
                Decoding::Greedy => run_episode(model, &inst.boxes, bin, cfg.mode, Choice::Greedy)?,
                Decoding::Sample => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    run_episode(model, &inst.boxes, bin, cfg.mode, Choice::Sample(&mut rng))?
                }
            };
            env
        }
    };
    Solution::from_env(&env, cfg.method, &inst.boxes)
}

/// Load the model a run config points at, if its method needs one.
pub fn load_model(cfg: &RunConfig) -> Result<Option<Model>> {
    if cfg.method != Method::Rcql {
        return Ok(None);
    }
    let path = cfg.checkpoint.as_ref().ok_or_else(|| Error::Config("method rcql needs a checkpoint".into()))?;
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} not found", path.display())));
    }
    let model = load_checkpoint(path)?.model;
    if model.config.dim != cfg.dim {
        return Err(Error::Config(format!("checkpoint is {}D but the run is {}D", model.config.dim, cfg.dim)));
    }
    Ok(Some(model))
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// Solve every instance of `instances`. Returns the report and the solutions
/// of the first run.
pub fn solve_instances(cfg: &RunConfig, model: Option<&Model>, dataset: String, instances: &[Instance]) -> Result<(EvalReport, Vec<Solution>)> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::InvalidInput("no instances".into()));
    }
    let runs = if cfg.method.is_learned() { cfg.runs } else { 1 };
    let results: Vec<Result<(Solution, f64)>> = with_workers(cfg.workers, || {
        (0..runs * instances.len())
            .into_par_iter()
            .map(|k| {
                let (run, i) = (k / instances.len(), k % instances.len());
                let start = Instant::now();
                let s = solve_instance(cfg, model, &instances[i], i, run)?;
                Ok((s, start.elapsed().as_secs_f64()))
            })
            .collect()
    })?;
    let results: Vec<(Solution, f64)> = results.into_iter().collect::<Result<_>>()?;
    let n = instances.len();
    let gaps: Vec<Vec<f64>> = results.chunks(n).map(|c| c.iter().map(|(s, _)| s.gap_ratio).collect()).collect();
    let seconds: Vec<f64> = (0..n).map(|i| (0..runs).map(|r| results[r * n + i].1).sum::<f64>() / runs as f64).collect();
    let report = EvalReport::from_runs(cfg.method, dataset, cfg.dim, cfg.mode, &gaps, seconds);
    let solutions = results.into_iter().take(n).map(|(s, _)| s).collect();
    Ok((report, solutions))
}

/// Load the dataset and model named by `cfg` and solve.
pub fn solve(cfg: &RunConfig) -> Result<(EvalReport, Vec<Solution>)> {
    cfg.validate()?;
    let model = load_model(cfg)?;
    let (id, instances) = cfg.load_dataset()?;
    solve_instances(cfg, model.as_ref(), id, &instances)
}

/// Score existing solutions; each is re-validated on the way in.
pub fn report_from_solutions(dataset: String, mode: Mode, solutions: &[Solution]) -> Result<EvalReport> {
    let first = solutions.first().ok_or_else(|| Error::InvalidInput("no solutions".into()))?;
    let gaps: Vec<f64> = solutions.iter().map(|s| s.gap_ratio).collect();
    Ok(EvalReport::from_runs(first.method, dataset, first.dim.as_int(), mode, &[gaps], vec![0.0; solutions.len()]))
}

/// Columns of the benchmark CSV, in order.
pub const BENCH_COLUMNS: [&str; 11] =
    ["method", "dataset", "dim", "mode", "n_boxes", "instances", "worst", "best", "average", "variance", "mean_seconds"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n_boxes: usize,
    pub report: EvalReport,
}

/// Every method on every dataset, one row per (method, dataset, box count).
pub fn bench(base: &RunConfig, methods: &[Method], datasets: &[(String, Vec<Instance>)]) -> Result<Vec<BenchRow>> {
    if methods.is_empty() || datasets.is_empty() {
        return Err(Error::Config("bench needs at least one method and one dataset".into()));
    }
    let mut rows = Vec::new();
    for &method in methods {
        let cfg = RunConfig { method, ..base.clone() };
        cfg.validate()?;
        let model = load_model(&cfg)?;
        for (id, instances) in datasets {
            let mut counts: Vec<usize> = instances.iter().map(|i| i.boxes.len()).collect();
            counts.sort_unstable();
            counts.dedup();
            for n in counts {
                let group: Vec<Instance> = instances.iter().filter(|i| i.boxes.len() == n).cloned().collect();
                let (report, _) = solve_instances(&cfg, model.as_ref(), id.clone(), &group)?;
                rows.push(BenchRow { n_boxes: n, report });
            }
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = BENCH_COLUMNS.join(",");
    out.push('\n');
    for row in rows {
        let r = &row.report;
        let mode = match r.mode {
            Mode::Offline => "offline",
            Mode::Online => "online",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.6},{:.6}",
            r.method,
            r.dataset,
            r.dim,
            mode,
            row.n_boxes,
            r.gap_ratios.len(),
            r.worst,
            r.best,
            r.average,
            r.variance,
            r.mean_seconds()
        );
    }
    out
}

/// Fill colour of the `i`-th placement: golden-angle hue steps.
fn colour(i: usize, shade: f64) -> String {
    let hue = (i as f64 * 137.507_764) % 360.0;
    format!("hsl({hue:.1},65%,{:.0}%)", 60.0 * shade)
}

/// SVG drawing of a solution: the x-z cross-section in 2D, an isometric view
/// in 3D. Colours follow placement order, so output is deterministic.
pub fn render_svg(s: &Solution) -> String {
    match s.dim {
        Dim::Two => render_2d(s),
        Dim::Three => render_3d(s),
    }
}

fn render_2d(s: &Solution) -> String {
    let scale = 400.0 / s.width;
    let (pad, h) = (10.0, s.height() * scale);
    let (w_px, h_px) = (s.width * scale + 2.0 * pad, h + 2.0 * pad);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w_px:.2}\" height=\"{h_px:.2}\" viewBox=\"0 0 {w_px:.2} {h_px:.2}\">\n"
    );
    let _ = writeln!(
        out,
        "<rect x=\"{pad}\" y=\"{pad}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"none\" stroke=\"black\"/>",
        s.width * scale
    );
    for (i, p) in s.placements.iter().enumerate() {
        let _ = writeln!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\" stroke=\"black\" stroke-width=\"0.5\"/>",
            pad + p.x * scale,
            pad + h - (p.z + p.dims.h) * scale,
            p.dims.w * scale,
            p.dims.h * scale,
            colour(i, 1.0)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn render_3d(s: &Solution) -> String {
    let scale = 300.0 / s.width.max(s.length);
    let (c, sn) = (30f64.to_radians().cos(), 0.5);
    // viewer sits at +x, +y, +z
    let project = |x: f64, y: f64, z: f64| ((x - y) * c * scale, (-z - (x + y) * sn) * scale);
    let corners: Vec<(f64, f64)> = s
        .placements
        .iter()
        .flat_map(|p| {
            [(p.x, p.y, p.z), (p.x + p.dims.w, p.y + p.dims.l, p.z + p.dims.h), (p.x + p.dims.w, p.y, p.z), (p.x, p.y + p.dims.l, p.z)]
        })
        .chain([(0.0, 0.0, 0.0), (s.width, 0.0, 0.0), (0.0, s.length, 0.0), (s.width, s.length, 0.0)])
        .map(|(x, y, z)| project(x, y, z))
        .collect();
    let min_x = corners.iter().map(|p| p.0).fold(f64::INFINITY, f64::min) - 10.0;
    let max_x = corners.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max) + 10.0;
    let min_y = corners.iter().map(|p| p.1).fold(f64::INFINITY, f64::min) - 10.0;
    let max_y = corners.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max) + 10.0;
    let pt = |x: f64, y: f64, z: f64| {
        let (u, v) = project(x, y, z);
        format!("{:.2},{:.2}", u - min_x, v - min_y)
    };
    let (w_px, h_px) = (max_x - min_x, max_y - min_y);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w_px:.2}\" height=\"{h_px:.2}\" viewBox=\"0 0 {w_px:.2} {h_px:.2}\">\n"
    );
    let _ = writeln!(
        out,
        "<polygon points=\"{} {} {} {}\" fill=\"#eeeeee\" stroke=\"black\"/>",
        pt(0.0, 0.0, 0.0),
        pt(s.width, 0.0, 0.0),
        pt(s.width, s.length, 0.0),
        pt(0.0, s.length, 0.0)
    );
    // far boxes first
    let mut order: Vec<usize> = (0..s.placements.len()).collect();
    order.sort_by(|&a, &b| {
        let k = |p: &Placement| p.x + p.y + p.z;
        k(&s.placements[a]).total_cmp(&k(&s.placements[b])).then(a.cmp(&b))
    });
    for i in order {
        let p = &s.placements[i];
        let (x0, y0, z0) = (p.x, p.y, p.z);
        let (x1, y1, z1) = (p.x + p.dims.w, p.y + p.dims.l, p.z + p.dims.h);
        let faces = [
            ([pt(x0, y0, z1), pt(x1, y0, z1), pt(x1, y1, z1), pt(x0, y1, z1)], 1.0),
            ([pt(x1, y0, z0), pt(x1, y1, z0), pt(x1, y1, z1), pt(x1, y0, z1)], 0.8),
            ([pt(x0, y1, z0), pt(x1, y1, z0), pt(x1, y1, z1), pt(x0, y1, z1)], 0.65),
        ];
        for (poly, shade) in faces {
            let _ = writeln!(
                out,
                "<polygon points=\"{}\" fill=\"{}\" stroke=\"black\" stroke-width=\"0.5\"/>",
                poly.join(" "),
                colour(i, shade)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Render the `index`-th solution of a file. The file is parsed and
/// validated first; nothing is written when that fails.
pub fn render_layout(solutions: impl AsRef<Path>, index: usize, output: impl AsRef<Path>) -> Result<()> {
    let all = read_solutions(solutions)?;
    let s = all.get(index).ok_or_else(|| Error::InvalidInput(format!("no solution {index}; file has {}", all.len())))?;
    fs::write(output, render_svg(s))?;
    Ok(())
}
