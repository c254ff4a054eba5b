//! Model checkpoints: a text header (magic, JSON config line, one line per
//! named tensor) closed by `end`, followed by little-endian `f64` values of
//! every tensor in header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::EntryKind;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "DGACKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
}

pub fn save_checkpoint(model: &Model, meta: &serde_json::Value, path: &Path) -> Result<()> {
    let header = Header { model: model.cfg.clone(), meta: meta.clone() };
    let json = serde_json::to_string(&header).map_err(|e| Error::format("config", e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    writeln!(w, "{json}")?;
    for e in model.store.entries() {
        let kind = match e.kind {
            EntryKind::Param => "param",
            EntryKind::Buffer => "buffer",
        };
        let shape = e.value.shape().iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        writeln!(w, "tensor {} {kind} {shape}", e.name)?;
    }
    writeln!(w, "end")?;
    for e in model.store.entries() {
        for v in e.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_header(r: &mut impl BufRead) -> Result<(Header, Vec<TensorInfo>)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(Error::format("magic", format!("expected {CHECKPOINT_MAGIC}, found {:?}", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| Error::format("config", e.to_string()))?;
    let mut tensors = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::format("header", "missing end marker"));
        }
        let t = line.trim_end();
        if t == "end" {
            break;
        }
        let parts: Vec<&str> = t.split(' ').collect();
        if parts.len() != 4 || parts[0] != "tensor" {
            return Err(Error::format("tensor", format!("malformed line {t:?}")));
        }
        let kind = match parts[2] {
            "param" => EntryKind::Param,
            "buffer" => EntryKind::Buffer,
            other => return Err(Error::format("tensor", format!("unknown kind {other:?}"))),
        };
        let shape = if parts[3].is_empty() {
            Vec::new()
        } else {
            parts[3]
                .split(',')
                .map(|s| s.parse::<usize>().map_err(|e| Error::format("tensor", e.to_string())))
                .collect::<Result<_>>()?
        };
        tensors.push(TensorInfo { name: parts[1].to_string(), kind, shape });
    }
    Ok((header, tensors))
}

/// Tensor manifest of a checkpoint without reading its payload.
pub fn checkpoint_manifest(path: &Path) -> Result<(ModelConfig, Vec<TensorInfo>)> {
    let mut r = BufReader::new(File::open(path)?);
    let (h, t) = read_header(&mut r)?;
    Ok((h.model, t))
}

/// Rebuilds the model stored at `path`; returns it with the saved metadata.
pub fn load_checkpoint(path: &Path) -> Result<(Model, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let (header, tensors) = read_header(&mut r)?;
    let mut model = Model::new(&header.model, 0.0, 0)?;
    let expected: usize = tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let mut bytes = Vec::with_capacity(expected * 8);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != expected * 8 {
        return Err(Error::Truncated { expected, found: bytes.len() / 8 });
    }
    if tensors.len() != model.store.len() {
        return Err(Error::format("tensor", format!("{} tensors stored, model has {}", tensors.len(), model.store.len())));
    }
    let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for info in &tensors {
        let n = info.shape.iter().product();
        let t = Tensor::new(info.shape.clone(), values.by_ref().take(n).collect());
        if model.store.id(&info.name).is_none() {
            return Err(Error::format("tensor", format!("unexpected tensor {}", info.name)));
        }
        model.store.set(&info.name, t).map_err(|msg| Error::format("tensor", msg))?;
    }
    Ok((model, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    #[test]
    fn round_trip_preserves_every_tensor() {
        let mut cfg = ModelConfig {
            backbone: BackboneConfig { channels: vec![4], post_blocks: 1, ..BackboneConfig::desk() },
            bag_size: 2,
            input_size: [4, 4],
            head_hidden: 3,
            ..Default::default()
        };
        cfg.aggregator.spatial.heads = 2;
        cfg.aggregator.instance.heads = 2;
        let model = Model::new(&cfg, 57.0, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&model, &serde_json::json!({"epoch": 3}), &p).unwrap();
        let (back, meta) = load_checkpoint(&p).unwrap();
        assert_eq!(meta["epoch"], 3);
        assert_eq!(back.cfg, model.cfg);
        for (a, b) in model.store.entries().iter().zip(back.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let (_, manifest) = checkpoint_manifest(&p).unwrap();
        assert_eq!(manifest.len(), model.store.len());

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Truncated { .. })));
    }
}
