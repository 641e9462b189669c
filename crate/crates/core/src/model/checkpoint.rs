//! Binary checkpoints with a JSON manifest.
//!
//! Layout, little endian:
//!
//! ```text
//! magic "RCQLCKPT" | version u32 | header length u64 | header JSON
//! tensor count u64 | per tensor: name length u32, name, rows u64, cols u64, rows*cols f64
//! ```
//!
//! Tensors are the model parameters in construction order, then the running
//! batch-norm statistics (`bn.<i>.mean`, `bn.<i>.var`), then any extra
//! tensors such as optimizer moments. The manifest next to the blob
//! (`<file>.manifest.json`) lists every tensor shape and the SHA-256 of the
//! blob. Both files are written to a temporary name and renamed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::autograd::Mat;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RCQLCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    /// Hash of the training configuration, empty outside training.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
    pub bytes: u64,
    pub sha256: String,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    /// Tensors that are neither parameters nor batch-norm statistics.
    pub extra: Vec<(String, Mat)>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, meta: &CheckpointMeta, extra: &[(String, Mat)]) -> Result<Manifest> {
    let path = path.as_ref();
    let mut tensors: Vec<(String, Mat)> = model.params.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
    for (i, s) in model.bn.iter().enumerate() {
        tensors.push((format!("bn.{i}.mean"), s.mean.clone().insert_axis(ndarray::Axis(0))));
        tensors.push((format!("bn.{i}.var"), s.var.clone().insert_axis(ndarray::Axis(0))));
    }
    tensors.extend(extra.iter().cloned());

    let header = serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: "rcql-checkpoint".into(),
        version: VERSION,
        meta: meta.clone(),
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: [t.nrows(), t.ncols()] }).collect(),
        bytes: buf.len() as u64,
        sha256: hex(&Sha256::digest(&buf)),
    };
    write_atomic(path, &buf)?;
    let mut line = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    line.push(b'\n');
    write_atomic(&manifest_path(path), &line)?;
    Ok(manifest)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mpath = manifest_path(path);
    if mpath.exists() {
        let text = fs::read_to_string(&mpath)?;
        let manifest: Manifest = serde_json::from_str(text.trim()).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.sha256 != hex(&Sha256::digest(&buf)) {
            return Err(Error::Checkpoint(format!("{} does not match its manifest hash", path.display())));
        }
    }
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = r.len()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut model = Model::new(meta.model.clone())?;
    let mut extra = Vec::new();
    let mut seen = vec![false; model.params.len()];
    for _ in 0..r.len()? {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let (rows, cols) = (r.len()?, r.len()?);
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Array2::from_shape_vec((rows, cols), data).expect("length checked");
        if let Some(id) = model.params.find(&name) {
            if model.params.get(id).dim() != t.dim() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?} does not match the config", t.dim())));
            }
            *model.params.get_mut(id) = t;
            seen[id] = true;
        } else if let Some(rest) = name.strip_prefix("bn.") {
            let (idx, field) = rest.split_once('.').ok_or_else(|| Error::Checkpoint(format!("bad tensor name {name}")))?;
            let i: usize = idx.parse().map_err(|_| Error::Checkpoint(format!("bad tensor name {name}")))?;
            let stats = model.bn.get_mut(i).ok_or_else(|| Error::Checkpoint(format!("{name}: no such layer")))?;
            let row: Array1<f64> = t.row(0).to_owned();
            if t.nrows() != 1 || row.len() != stats.mean.len() {
                return Err(Error::Checkpoint(format!("{name}: wrong shape")));
            }
            match field {
                "mean" => stats.mean = row,
                "var" => stats.var = row,
                _ => return Err(Error::Checkpoint(format!("bad tensor name {name}"))),
            }
        } else {
            extra.push((name, t));
        }
    }
    if let Some(id) = seen.iter().position(|s| !s) {
        return Err(Error::Checkpoint(format!("missing tensor {}", model.params.name(id))));
    }
    Ok(Checkpoint { meta, model, extra })
}
