//! Self-describing model container.
//!
//! Layout:
//!
//! ```text
//! WAVESENSE-CKPT 1\n
//! <header byte length>\n
//! <JSON header>
//! <little-endian f64 arrays, back to back, at the offsets the header lists>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelConfig};
use crate::sensing::PrototypeMeta;
use crate::tensor::ParamSet;
use crate::training::TrainSummary;
use crate::{Error, Result};

pub const MAGIC: &str = "WAVESENSE-CKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayGroup {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub group: ArrayGroup,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    /// Feature map length `K` and width `C` for the configured input.
    pub feature_len: usize,
    pub channels: usize,
    pub prototype_meta: Vec<PrototypeMeta>,
    pub training: Option<TrainSummary>,
    pub arrays: Vec<ArrayEntry>,
}

pub struct Checkpoint {
    pub model: Model,
    pub training: Option<TrainSummary>,
}

pub fn encode(model: &Model, training: Option<&TrainSummary>) -> Result<Vec<u8>> {
    let (k, c) = model.cfg.feature_shape()?;
    let mut arrays = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    for (group, set) in [(ArrayGroup::Param, &model.params), (ArrayGroup::Buffer, &model.buffers)] {
        for t in set.tensors() {
            arrays.push(ArrayEntry {
                name: t.name.clone(),
                group,
                dtype: "f64le".into(),
                shape: t.shape.clone(),
                offset: data.len(),
            });
            for v in &t.data {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        model: model.cfg.clone(),
        feature_len: k,
        channels: c,
        prototype_meta: model.proto_meta.clone(),
        training: training.cloned(),
        arrays,
    };
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut out = format!("{MAGIC} {VERSION}\n{}\n", json.len()).into_bytes();
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn save(path: &Path, model: &Model, training: Option<&TrainSummary>) -> Result<()> {
    let bytes = encode(model, training)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format("truncated checkpoint preamble".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("checkpoint preamble is not UTF-8".into()))
}

fn fill(set: &mut ParamSet, entry: &ArrayEntry, data: &[u8]) -> Result<()> {
    let id = set
        .find(&entry.name)
        .ok_or_else(|| Error::Format(format!("checkpoint array {} does not belong to this architecture", entry.name)))?;
    let t = set.tensor(id);
    if t.shape != entry.shape {
        return Err(Error::Format(format!("array {}: shape {:?}, expected {:?}", entry.name, entry.shape, t.shape)));
    }
    let n = t.data.len();
    let bytes = data
        .get(entry.offset..entry.offset + 8 * n)
        .ok_or_else(|| Error::Format(format!("array {} runs past the end of the file", entry.name)))?;
    let dst = set.get_mut(id);
    for (d, chunk) in dst.iter_mut().zip(bytes.chunks_exact(8)) {
        *d = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    let magic = next_line(bytes, &mut pos)?;
    let version = magic
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| Error::Format("not a checkpoint file (bad magic)".into()))?;
    if version != VERSION.to_string() {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len: usize = next_line(bytes, &mut pos)?
        .trim()
        .parse()
        .map_err(|_| Error::Format("bad header length".into()))?;
    let json = bytes.get(pos..pos + len).ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let data = &bytes[pos + len..];
    let mut model = Model::new(&header.model, 0)?;
    let expected = model.params.tensors().len() + model.buffers.tensors().len();
    if header.arrays.len() != expected {
        return Err(Error::Format(format!("checkpoint has {} arrays, architecture needs {expected}", header.arrays.len())));
    }
    for entry in &header.arrays {
        if entry.dtype != "f64le" {
            return Err(Error::Format(format!("array {}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        match entry.group {
            ArrayGroup::Param => fill(&mut model.params, entry, data)?,
            ArrayGroup::Buffer => fill(&mut model.buffers, entry, data)?,
        }
    }
    if header.prototype_meta.len() != model.num_prototypes() {
        return Err(Error::Format("prototype metadata count does not match M".into()));
    }
    model.proto_meta = header.prototype_meta;
    Ok(Checkpoint { model, training: header.training })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
