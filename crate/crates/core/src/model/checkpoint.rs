//! Checkpoint files: a text header (`mamr-ckpt 1`, `config.*` and `meta.*`
//! key=value lines, `tensors N`) followed by binary tensor records
//! `u32 name_len, name, u32 ndim, u32 dims…, f32 data…`, all little-endian.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;

use super::{Model, ModelConfig, ModelError, ModelParams};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &str = "mamr-ckpt 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: IndexMap<String, String>,
    pub tensors: IndexMap<String, Tensor<f32>>,
}

impl<F: Scalar> Model<F> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            meta: IndexMap::new(),
            tensors: self
                .params
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Rebuilds a model from the schema tensors of a checkpoint; other
    /// tensors (optimizer state) are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let mut tensors = IndexMap::new();
        for (name, _) in ckpt.config.schema() {
            let t = ckpt
                .tensors
                .get(&name)
                .ok_or_else(|| ModelError::BadParameter(name.clone()))?;
            tensors.insert(name, Arc::new(t.cast()));
        }
        Model::from_params(ckpt.config.clone(), ModelParams { tensors })
    }
}

fn malformed(msg: impl Into<String>) -> ModelError {
    ModelError::MalformedCheckpoint(msg.into())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    let mut header = format!("{MAGIC}\n");
    for line in ckpt.config.to_kv().lines() {
        header.push_str("config.");
        header.push_str(line);
        header.push('\n');
    }
    for (k, v) in &ckpt.meta {
        header.push_str(&format!("meta.{k}={v}\n"));
    }
    header.push_str(&format!("tensors {}\n", ckpt.tensors.len()));
    out.extend_from_slice(header.as_bytes());
    for (name, t) in &ckpt.tensors {
        out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.write_u32::<LittleEndian>(t.shape().len() as u32).unwrap();
        for &d in t.shape() {
            out.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for &x in t.data() {
            out.write_f32::<LittleEndian>(x).unwrap();
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    let mut cur = Cursor::new(bytes);
    let read_line = |cur: &mut Cursor<&[u8]>| -> Result<String, ModelError> {
        let start = cur.position() as usize;
        let rest = &bytes[start..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| malformed("truncated header"))?;
        cur.set_position((start + end + 1) as u64);
        String::from_utf8(rest[..end].to_vec()).map_err(|_| malformed("header is not UTF-8"))
    };
    if read_line(&mut cur)? != MAGIC {
        return Err(malformed("bad magic line"));
    }
    let mut config_lines = Vec::new();
    let mut meta = IndexMap::new();
    let count = loop {
        let line = read_line(&mut cur)?;
        if let Some(n) = line.strip_prefix("tensors ") {
            break n.parse::<usize>().map_err(|_| malformed("bad tensor count"))?;
        } else if let Some(kv) = line.strip_prefix("config.") {
            config_lines.push(kv.to_string());
        } else if let Some(kv) = line.strip_prefix("meta.") {
            let (k, v) = kv.split_once('=').ok_or_else(|| malformed(format!("bad meta line `{line}`")))?;
            meta.insert(k.to_string(), v.to_string());
        } else {
            return Err(malformed(format!("unexpected header line `{line}`")));
        }
    };
    let config = ModelConfig::from_kv(config_lines.iter().map(String::as_str))?;
    let eof = |_| malformed("truncated tensor data");
    let mut tensors = IndexMap::new();
    for _ in 0..count {
        let n = cur.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let mut name = vec![0u8; n];
        cur.read_exact(&mut name).map_err(eof)?;
        let name = String::from_utf8(name).map_err(|_| malformed("tensor name is not UTF-8"))?;
        let ndim = cur.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let shape = (0..ndim)
            .map(|_| cur.read_u32::<LittleEndian>().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()
            .map_err(eof)?;
        let len: usize = shape.iter().product();
        if len > bytes.len() {
            return Err(malformed(format!("tensor `{name}` larger than file")));
        }
        let mut data = vec![0f32; len];
        cur.read_f32_into::<LittleEndian>(&mut data).map_err(eof)?;
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(malformed("trailing bytes"));
    }
    Ok(Checkpoint { config, meta, tensors })
}

/// Writes through a temporary file and a rename, so an interrupted write
/// never clobbers an existing checkpoint.
pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode_checkpoint(ckpt))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ModelError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    #[test]
    fn round_trip() {
        let model = Model::<f32>::build(ModelConfig::preset(Preset::Toy, 40, 30), 3).unwrap();
        let mut ckpt = model.to_checkpoint();
        ckpt.meta.insert("step".into(), "17".into());
        ckpt.tensors.insert("adam.m.x".into(), Tensor::filled(vec![2], 0.5));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(Model::<f32>::from_checkpoint(&back).unwrap(), model);
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::<f32>::build(ModelConfig::preset(Preset::Toy, 10, 10), 1).unwrap();
        let bytes = encode_checkpoint(&model.to_checkpoint());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint(b"nope\n").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
