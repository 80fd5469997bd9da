//! Versioned binary checkpoint container: a JSON header describing the
//! tensors, followed by raw little-endian values in header order. Model and
//! LoRA adapters use the same container and are composable at load.

use crate::error::{ClozeError, Result};
use crate::flownet::lora::{LoraAdapter, LoraLayer};
use crate::flownet::{FlowParams, ModelConfig};
use crate::linalg::Mat;
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CLZCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    dtype: String,
    step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lora: Option<LoraMeta>,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LoraMeta {
    rank: usize,
    alpha: f64,
    layers: Vec<String>,
}

fn dtype_of<S: Scalar>() -> &'static str {
    match std::mem::size_of::<S>() {
        4 => "f32",
        8 => "f64",
        _ => unreachable!(),
    }
}

fn write_values<S: Scalar, W: Write>(w: &mut W, values: &[S]) -> Result<()> {
    match std::mem::size_of::<S>() {
        4 => {
            for v in values {
                w.write_all(&(v.to_f64s() as f32).to_le_bytes())?;
            }
        }
        _ => {
            for v in values {
                w.write_all(&v.to_f64s().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_values<S: Scalar, R: Read>(r: &mut R, dtype: &str, len: usize) -> Result<Vec<S>> {
    let mut out = Vec::with_capacity(len);
    match dtype {
        "f32" => {
            let mut buf = [0u8; 4];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                out.push(S::from_f64(f32::from_le_bytes(buf) as f64));
            }
        }
        "f64" => {
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                out.push(S::from_f64(f64::from_le_bytes(buf)));
            }
        }
        other => return Err(ClozeError::Checkpoint(format!("unknown dtype `{other}`"))),
    }
    Ok(out)
}

fn write_container<S: Scalar>(path: &Path, header: &Header, tensors: &[(String, &[S])]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let header_json = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, values) in tensors {
        write_values(&mut buf, values)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_header(bytes: &[u8], path: &Path) -> Result<(Header, usize)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(ClozeError::Checkpoint(format!(
            "{}: not a checkpoint (bad magic; expected container version {FORMAT_VERSION})",
            path.display()
        )));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(ClozeError::Checkpoint(format!("{}: truncated header", path.display())));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| {
        ClozeError::Checkpoint(format!("{}: corrupt header ({e})", path.display()))
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(ClozeError::Checkpoint(format!(
            "{}: container version {} unsupported (expected {FORMAT_VERSION})",
            path.display(),
            header.format_version
        )));
    }
    Ok((header, 12 + hlen))
}

/// Optimizer moments stored alongside the parameters for exact resumption.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Vec<S>,
    pub v: Vec<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(n: usize) -> Self {
        AdamState { step: 0, m: vec![S::ZERO; n], v: vec![S::ZERO; n] }
    }
}

pub fn save_model<S: Scalar>(
    path: &Path,
    params: &FlowParams<S>,
    opt: Option<&AdamState<S>>,
    step: u64,
) -> Result<()> {
    let mut tensors: Vec<(String, &[S])> = params.visit();
    if let Some(opt) = opt {
        tensors.push(("opt.m".into(), &opt.m));
        tensors.push(("opt.v".into(), &opt.v));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: "model".into(),
        dtype: dtype_of::<S>().into(),
        step: if let Some(o) = opt { o.step } else { step },
        model: Some(params.config),
        lora: None,
        tensors: tensors.iter().map(|(n, v)| TensorMeta { name: n.clone(), len: v.len() }).collect(),
    };
    write_container(path, &header, &tensors)
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<(FlowParams<S>, Option<AdamState<S>>, u64)> {
    let bytes = std::fs::read(path)?;
    let (header, offset) = read_header(&bytes, path)?;
    if header.kind != "model" {
        return Err(ClozeError::Checkpoint(format!("{}: not a model checkpoint", path.display())));
    }
    let config = header
        .model
        .ok_or_else(|| ClozeError::Checkpoint("missing model config".into()))?;
    // build a zero skeleton with the right shapes
    let mut params: FlowParams<S> = FlowParams::init(config, &mut rng_from_seed(0))
        .map_err(|e| ClozeError::Checkpoint(format!("bad config: {e}")))?;
    let mut loaded: BTreeMap<String, Vec<S>> = BTreeMap::new();
    let mut cursor = std::io::Cursor::new(&bytes[offset..]);
    for meta in &header.tensors {
        let values = read_values::<S, _>(&mut cursor, &header.dtype, meta.len)?;
        loaded.insert(meta.name.clone(), values);
    }
    for (name, slot) in params.visit_mut() {
        let values = loaded
            .remove(&name)
            .ok_or_else(|| ClozeError::Checkpoint(format!("missing tensor `{name}`")))?;
        if values.len() != slot.len() {
            return Err(ClozeError::Checkpoint(format!(
                "tensor `{name}`: expected {} values, found {}",
                slot.len(),
                values.len()
            )));
        }
        slot.copy_from_slice(&values);
    }
    let opt = match (loaded.remove("opt.m"), loaded.remove("opt.v")) {
        (Some(m), Some(v)) => Some(AdamState { step: header.step, m, v }),
        _ => None,
    };
    Ok((params, opt, header.step))
}

pub fn save_lora<S: Scalar>(path: &Path, adapter: &LoraAdapter<S>, step: u64) -> Result<()> {
    let tensors: Vec<(String, &[S])> = adapter.visit();
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: "lora".into(),
        dtype: dtype_of::<S>().into(),
        step,
        model: None,
        lora: Some(LoraMeta {
            rank: adapter.rank,
            alpha: adapter.alpha,
            layers: adapter.layers.keys().cloned().collect(),
        }),
        tensors: tensors.iter().map(|(n, v)| TensorMeta { name: n.clone(), len: v.len() }).collect(),
    };
    write_container(path, &header, &tensors)
}

pub fn load_lora<S: Scalar>(path: &Path) -> Result<LoraAdapter<S>> {
    let bytes = std::fs::read(path)?;
    let (header, offset) = read_header(&bytes, path)?;
    if header.kind != "lora" {
        return Err(ClozeError::Checkpoint(format!("{}: not a lora checkpoint", path.display())));
    }
    let meta = header.lora.ok_or_else(|| ClozeError::Checkpoint("missing lora metadata".into()))?;
    let mut cursor = std::io::Cursor::new(&bytes[offset..]);
    let mut flat: BTreeMap<String, Vec<S>> = BTreeMap::new();
    for tm in &header.tensors {
        flat.insert(tm.name.clone(), read_values::<S, _>(&mut cursor, &header.dtype, tm.len)?);
    }
    let mut layers = BTreeMap::new();
    for name in &meta.layers {
        let down = flat
            .remove(&format!("lora.{name}.down"))
            .ok_or_else(|| ClozeError::Checkpoint(format!("missing lora.{name}.down")))?;
        let up = flat
            .remove(&format!("lora.{name}.up"))
            .ok_or_else(|| ClozeError::Checkpoint(format!("missing lora.{name}.up")))?;
        let r = meta.rank;
        if down.len() % r != 0 || up.len() % r != 0 {
            return Err(ClozeError::Checkpoint(format!("lora tensor `{name}` size mismatch")));
        }
        layers.insert(
            name.clone(),
            LoraLayer {
                down: Mat::from_vec(down.len() / r, r, down),
                up: Mat::from_vec(r, up.len() / r, up),
            },
        );
    }
    Ok(LoraAdapter { rank: meta.rank, alpha: meta.alpha, layers })
}
