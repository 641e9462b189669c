//! Seeded random instances and the line-delimited instance file format.
//!
//! Each line of an instance file is one JSON record:
//!
//! ```text
//! {"bin": {"W": 10, "L": 10}, "boxes": [[w, l, h], ...]}
//! ```
//!
//! Floats are written with at most 9 significant digits. Generated sides are
//! quantized to the same precision so a write/read cycle is exact.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BinSpec, BoxDims, Dim};

/// Side-length distribution. `Plain` draws from `(eps, L_b]`, `Hard` from
/// `(eps, L_b / 4]`, where `L_b` is the bin width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Plain,
    Hard,
}

impl std::str::FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Distribution::Plain),
            "hard" => Ok(Distribution::Hard),
            _ => Err(Error::Config(format!("unknown distribution {s:?}"))),
        }
    }
}

impl std::fmt::Display for Distribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Distribution::Plain => "plain",
            Distribution::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceSpec {
    pub n_boxes: usize,
    pub distribution: Distribution,
    pub bin: BinSpec,
    pub seed: u64,
}

/// Lower bound of sampled sides as a fraction of `L_b`.
pub const MIN_SIDE_FRACTION: f64 = 1e-3;

/// Bin side used for generated instances. Results are scale invariant.
pub const DEFAULT_BIN_SIDE: f64 = 10.0;

/// Boxes plus the bin footprint they were generated for.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub width: f64,
    pub length: f64,
    pub boxes: Vec<BoxDims>,
}

impl Instance {
    pub fn bin(&self, slots: usize, dim: Dim) -> BinSpec {
        BinSpec { width: self.width, length: self.length, slots, dim }
    }
}

/// Round to 9 significant digits.
pub fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

/// Shortest decimal string of `round_sig9(v)`.
pub fn format_float(v: f64) -> String {
    format!("{}", round_sig9(v))
}

pub fn generate_instance(spec: &InstanceSpec) -> Result<Instance> {
    if spec.n_boxes == 0 {
        return Err(Error::InvalidInput("an instance needs at least one box".into()));
    }
    spec.bin.validate()?;
    let side = spec.bin.width;
    let upper = match spec.distribution {
        Distribution::Plain => side,
        Distribution::Hard => side / 4.0,
    };
    let lower = MIN_SIDE_FRACTION * side;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // maps [0, 1) onto (lower, upper]
    let mut draw = || round_sig9(upper - rng.gen::<f64>() * (upper - lower)).clamp(lower.next_up(), upper);
    let boxes = (0..spec.n_boxes)
        .map(|_| match spec.bin.dim {
            Dim::Three => {
                let (w, l, h) = (draw(), draw(), draw());
                BoxDims::new(w, l, h)
            }
            Dim::Two => {
                let (w, h) = (draw(), draw());
                BoxDims::new(w, spec.bin.length, h)
            }
        })
        .collect();
    Ok(Instance { width: spec.bin.width, length: spec.bin.length, boxes })
}

/// `count` instances with seeds `base_seed, base_seed + 1, ...`.
pub fn generate_dataset(
    count: usize,
    n_boxes: usize,
    distribution: Distribution,
    bin: BinSpec,
    base_seed: u64,
) -> Result<Vec<Instance>> {
    (0..count as u64)
        .map(|i| {
            generate_instance(&InstanceSpec { n_boxes, distribution, bin, seed: base_seed.wrapping_add(i) })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct BinRecord {
    #[serde(rename = "W")]
    pub w: f64,
    #[serde(rename = "L")]
    pub l: f64,
}

#[derive(Debug, Deserialize)]
struct InstanceRecord {
    bin: BinRecord,
    boxes: Vec<[f64; 3]>,
}

pub(crate) fn format_row(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format_float(*v)).collect();
    format!("[{}]", parts.join(", "))
}

pub(crate) fn format_bin_and_boxes(width: f64, length: f64, boxes: &[BoxDims]) -> String {
    let rows: Vec<String> = boxes.iter().map(|b| format_row(&b.as_array())).collect();
    format!(
        "\"bin\": {{\"W\": {}, \"L\": {}}}, \"boxes\": [{}]",
        format_float(width),
        format_float(length),
        rows.join(", ")
    )
}

pub fn format_instance(inst: &Instance) -> String {
    format!("{{{}}}", format_bin_and_boxes(inst.width, inst.length, &inst.boxes))
}

pub fn write_instances(path: impl AsRef<Path>, instances: &[Instance]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for inst in instances {
        writeln!(out, "{}", format_instance(inst))?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn validate_dims(line: usize, width: f64, length: f64, rows: &[[f64; 3]]) -> Result<Vec<BoxDims>> {
    if !(width > 0.0 && length > 0.0 && width.is_finite() && length.is_finite()) {
        return Err(Error::Validation { line, message: format!("bin {width} x {length} is not positive") });
    }
    if rows.is_empty() {
        return Err(Error::Validation { line, message: "instance has no boxes".into() });
    }
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let d = BoxDims::new(r[0], r[1], r[2]);
            if d.is_valid() {
                Ok(d)
            } else {
                Err(Error::Validation { line, message: format!("box {i} has non-positive side {r:?}") })
            }
        })
        .collect()
}

pub fn parse_instances(reader: impl BufRead) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    let mut last_line = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        let boxes = validate_dims(line_no, rec.bin.w, rec.bin.l, &rec.boxes)?;
        out.push(Instance { width: rec.bin.w, length: rec.bin.l, boxes });
    }
    if out.is_empty() {
        return Err(Error::Parse { line: last_line.max(1), message: "no instance records".into() });
    }
    Ok(out)
}

pub fn read_instances(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    parse_instances(BufReader::new(fs::File::open(path)?))
}
