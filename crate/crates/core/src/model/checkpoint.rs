//! Checkpoint files.
//!
//! A JSON header line
//! `{"format":"tmlab-ckpt","version":1,"dims":{..},"classes":[..],"posenc":{..},"records":R,"optimizer":{..}|null}`
//! followed by `R` binary records, each
//! `u32 name length | name | u8 dtype length | "f32" | u32 rank | u64 x rank shape | f32 payload`,
//! all little-endian. Records cover every weight tensor, the running
//! statistics of both domains (`norm.<domain>.<stat>`) and, when present,
//! the Adam moments (`adam.m.<tensor>`, `adam.v.<tensor>`).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{CosineSchedule, OptimizerState};
use super::params::{DomainNorms, DomainTag, ModelDims, ModelParams, NormStats, Tensor, Weights};
use super::posenc::PosEncConfig;
use crate::error::{Error, Result};

pub const CKPT_FORMAT: &str = "tmlab-ckpt";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dims: ModelDims,
    classes: Vec<String>,
    posenc: PosEncConfig,
    records: usize,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    schedule: CosineSchedule,
}

fn norm_name(tag: DomainTag, stat: &str) -> String {
    format!("norm.{}.{stat}", tag.name())
}

const TAGS: [DomainTag; 2] = [DomainTag::Source, DomainTag::Target];

/// Serializes a checkpoint to bytes.
pub fn checkpoint_bytes(params: &ModelParams<f32>, optimizer: Option<&OptimizerState<f32>>) -> Vec<u8> {
    let mut records: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
    for (name, t) in params.weights.tensors() {
        records.push((name.to_string(), t.shape.clone(), &t.data));
    }
    for tag in TAGS {
        for (stat, v) in NormStats::<f32>::NAMES.iter().zip(params.norms.get(tag).vectors()) {
            records.push((norm_name(tag, stat), vec![v.len()], v));
        }
    }
    if let Some(opt) = optimizer {
        for (prefix, w) in [("adam.m", &opt.m), ("adam.v", &opt.v)] {
            for (name, t) in w.tensors() {
                records.push((format!("{prefix}.{name}"), t.shape.clone(), &t.data));
            }
        }
    }
    let header = Header {
        format: CKPT_FORMAT.into(),
        version: CKPT_VERSION,
        dims: params.dims,
        classes: params.classes.clone(),
        posenc: params.posenc,
        records: records.len(),
        optimizer: optimizer.map(|o| OptimizerHeader {
            step: o.step,
            schedule: o.schedule,
        }),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for (name, shape, data) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(3);
        out.extend_from_slice(b"f32");
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for s in shape {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(
    params: &ModelParams<f32>,
    optimizer: Option<&OptimizerState<f32>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(&checkpoint_bytes(params, optimizer)).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams<f32>, Option<OptimizerState<f32>>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelParams<f32>, Option<OptimizerState<f32>>)> {
    let bad = |m: String| Error::Checkpoint(m);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("malformed header: {e}")))?;
    if header.format != CKPT_FORMAT || header.version != CKPT_VERSION {
        return Err(bad(format!(
            "unsupported format {:?} version {}",
            header.format, header.version
        )));
    }
    header.dims.validate()?;
    header.posenc.validate()?;
    if header.classes.len() != header.dims.classes || header.posenc.dim != header.dims.embed {
        return Err(Error::Dimension("checkpoint header is inconsistent".into()));
    }

    let mut cur = Cursor {
        bytes,
        pos: nl + 1,
    };
    let mut records: HashMap<String, Tensor<f32>> = HashMap::new();
    for _ in 0..header.records {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| bad("record name is not UTF-8".into()))?;
        let dlen = cur.take(1)?[0] as usize;
        let dtype = cur.take(dlen)?;
        if dtype != b"f32" {
            return Err(bad(format!("record {name}: unsupported dtype")));
        }
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let payload = cur.take(count.checked_mul(4).ok_or_else(|| bad("record too large".into()))?)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        records.insert(name, Tensor { shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes after the last record".into()));
    }

    // shapes come from a freshly initialized model of the declared size
    let template = ModelParams::<f32>::init(
        header.dims,
        header.posenc,
        header.classes.clone(),
        &mut crate::rng::rng_from(0),
    )?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let t = records
            .remove(name)
            .ok_or_else(|| bad(format!("missing record {name}")))?;
        if t.shape != shape {
            return Err(Error::Dimension(format!(
                "record {name} has shape {:?}, expected {:?}",
                t.shape, shape
            )));
        }
        Ok(t)
    };
    let mut weights = template.weights.clone();
    for (name, t) in weights.tensors_mut() {
        *t = take(name, &t.shape.clone())?;
    }
    let mut norms = DomainNorms {
        source: NormStats::initial(header.dims.hidden, header.dims.embed),
        target: NormStats::initial(header.dims.hidden, header.dims.embed),
    };
    for tag in TAGS {
        for (stat, v) in NormStats::<f32>::NAMES.iter().zip(norms.get_mut(tag).vectors_mut()) {
            *v = take(&norm_name(tag, stat), &[v.len()])?.data;
        }
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(h) => {
            let mut moments = |prefix: &str| -> Result<Weights<f32>> {
                let mut w = template.weights.zeros_like();
                for (name, t) in w.tensors_mut() {
                    *t = take(&format!("{prefix}.{name}"), &t.shape.clone())?;
                }
                Ok(w)
            };
            let m = moments("adam.m")?;
            let v = moments("adam.v")?;
            Some(OptimizerState {
                m,
                v,
                step: h.step,
                schedule: h.schedule,
            })
        }
    };
    if let Some(extra) = records.keys().next() {
        return Err(bad(format!("unexpected record {extra}")));
    }
    let params = ModelParams {
        dims: header.dims,
        posenc: header.posenc,
        classes: header.classes,
        weights,
        norms,
    };
    Ok((params, optimizer))
}
