//! Little-endian binary checkpoints.
//!
//! ```text
//! "BOXREC01"
//! u32 d, u32 L, u32 N, u32 M, u32 mode tag, u32 item count
//! repeated until EOF:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, u32 extent × rank
//!   f32 payload (row-major)
//!   u64 FNV-1a checksum of the payload bytes
//! ```
//!
//! Scoring settings that the header does not carry are stored as one-element
//! tensors whose names start with `meta.`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Ablation, EncoderConfig, EncoderParams, Model, Pooling};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{BoxMode, DistanceParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BOXREC01";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn io_err(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn put_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes()).map_err(io_err)?;
    put_u32(w, t.rank() as u32)?;
    for &e in t.shape() {
        put_u32(w, e as u32)?;
    }
    let mut payload = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload).map_err(io_err)?;
    w.write_all(&fnv1a(&payload).to_le_bytes()).map_err(io_err)
}

fn meta_entries(model: &Model<f32>) -> Vec<(&'static str, f32)> {
    let c = &model.config;
    vec![
        ("meta.pooling", c.pooling.tag() as f32),
        ("meta.ablation", c.ablation.tag() as f32),
        ("meta.freeze_offsets", c.freeze_offsets as u8 as f32),
        ("meta.dropout", c.dropout as f32),
        ("meta.gamma", model.distance.gamma as f32),
        ("meta.alpha", model.distance.alpha as f32),
        ("meta.use_additional", model.distance.use_additional as u8 as f32),
    ]
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &Model<f32>) -> Result<()> {
    let c = &model.config;
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    for v in [
        c.dim,
        c.window,
        c.memory_slots,
        c.boxes,
        c.mode.tag() as usize,
        model.n_items(),
    ] {
        put_u32(w, v as u32)?;
    }
    for (name, t) in model.params.named() {
        put_tensor(w, &name, t)?;
    }
    for (name, v) in meta_entries(model) {
        put_tensor(w, name, &Tensor::new(vec![1], vec![v])?)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, model)?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Model<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io_err)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let dim = cur.u32()? as usize;
    let window = cur.u32()? as usize;
    let memory_slots = cur.u32()? as usize;
    let boxes = cur.u32()? as usize;
    let mode_tag = cur.u32()?;
    let n_items = cur.u32()? as usize;
    let mode = BoxMode::from_tag(mode_tag)
        .ok_or_else(|| Error::Checkpoint(format!("unknown mode tag {mode_tag}")))?;

    let mut tensors = Vec::new();
    let mut meta = std::collections::BTreeMap::new();
    while !cur.done() {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let payload = cur.take(count * 4)?;
        let checksum = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        if fnv1a(payload) != checksum {
            return Err(Error::Checkpoint(format!("checksum mismatch in tensor `{name}`")));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data)?;
        if let Some(key) = name.strip_prefix("meta.") {
            meta.insert(key.to_string(), t.data()[0]);
        } else {
            tensors.push((name, t));
        }
    }

    let get = |key: &str| {
        meta.get(key)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing meta.{key}")))
    };
    let pooling = Pooling::from_tag(get("pooling")? as u32)
        .ok_or_else(|| Error::Checkpoint("bad pooling tag".into()))?;
    let ablation = Ablation::from_tag(get("ablation")? as u32)
        .ok_or_else(|| Error::Checkpoint("bad ablation tag".into()))?;
    let config = EncoderConfig {
        dim,
        window,
        boxes,
        mode,
        memory_slots,
        pooling,
        dropout: get("dropout")? as f64,
        ablation,
        freeze_offsets: get("freeze_offsets")? != 0.0,
        ..EncoderConfig::default()
    };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let distance = DistanceParams {
        gamma: get("gamma")? as f64,
        alpha: get("alpha")? as f64,
        use_additional: get("use_additional")? != 0.0,
    };

    let expected: Vec<String> = {
        // Names must appear in the canonical order.
        let probe = EncoderParams::<f32>::from_tensors(
            &config,
            tensors.iter().map(|(_, t)| t.clone()).collect(),
        )?;
        probe.named().into_iter().map(|(n, _)| n).collect()
    };
    for ((name, _), want) in tensors.iter().zip(&expected) {
        if name != want {
            return Err(Error::Checkpoint(format!("unexpected tensor `{name}`, wanted `{want}`")));
        }
    }
    let params = EncoderParams::from_tensors(&config, tensors.into_iter().map(|(_, t)| t).collect())?;
    if params.n_items() != n_items {
        return Err(Error::Checkpoint(format!(
            "header says {n_items} items, embedding table has {}",
            params.n_items()
        )));
    }
    Ok(Model {
        config,
        distance,
        params,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}
