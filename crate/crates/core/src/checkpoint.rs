//! Binary checkpoint container: a JSON meta blob plus named f64 tensors,
//! written atomically and encoded deterministically so identical state
//! produces identical bytes.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TMDC" | version u32 | meta_len u64 | meta JSON | count u64
//! per tensor: name_len u64 | name | ndim u64 | dims u64* | offset u64 | len u64
//! data: concatenated f64 payloads (offset in bytes, len in elements)
//! ```

use crate::baseline::{BaselineConfig, DiscriminativeModel};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::lora::{attach_lora, hex_string, LoraSpec};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 4] = b"TMDC";
const VERSION: u32 = 1;

/// Ordered named tensors plus a JSON meta document.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f64>) -> Result<()> {
        let name = name.into();
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::invalid("checkpoint", format!("duplicate tensor {}", name)));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing tensor {}", name)))
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            offset += (t.len() * 8) as u64;
        }
        for (_, t) in &self.tensors {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Write atomically: encode, write a sibling temp file, then rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        decode(&bytes).map_err(|detail| Error::CheckpointFormat {
            path: path.display().to_string(),
            detail,
        })
    }
}

/// Write `bytes` to `path` through a temp file in the same directory so a
/// crash can never leave a half-written file at the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid("write_atomic", format!("bad path {}", path.display())))?;
    let tmp = match dir {
        Some(d) => d.join(format!(".{}.{}.tmp", file_name, std::process::id())),
        None => Path::new(&format!(".{}.{}.tmp", file_name, std::process::id())).to_path_buf(),
    };
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path.display().to_string(), e)
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated while reading {}", what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err("bad magic".to_string());
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported version {}", version));
    }
    let meta_len = cur.u64("meta length")? as usize;
    let meta: serde_json::Value =
        serde_json::from_slice(cur.take(meta_len, "meta")?).map_err(|e| format!("meta: {}", e))?;
    let count = cur.u64("tensor count")? as usize;
    let mut manifest = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = cur.u64("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| format!("tensor {} name: {}", i, e))?
            .to_string();
        let ndim = cur.u64("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u64("dim")? as usize);
        }
        let offset = cur.u64("offset")? as usize;
        let len = cur.u64("len")? as usize;
        if dims.iter().product::<usize>() != len {
            return Err(format!("tensor {} dims {:?} disagree with len {}", name, dims, len));
        }
        manifest.push((name, dims, offset, len));
    }
    let data_start = cur.pos;
    let mut ck = Checkpoint::new(meta);
    for (name, dims, offset, len) in manifest {
        let lo = data_start + offset;
        let hi = lo + len * 8;
        if hi > bytes.len() {
            return Err(format!("tensor {} data out of bounds", name));
        }
        let mut data = Vec::with_capacity(len);
        for chunk in bytes[lo..hi].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let t = Tensor::new(dims, data).map_err(|e| format!("tensor {}: {}", name, e))?;
        ck.push(name, t).map_err(|e| e.to_string())?;
    }
    Ok(ck)
}

/// SHA-256 of a file's bytes as lowercase hex.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file
            .read(&mut buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

#[derive(Serialize, Deserialize)]
struct DenoiserMeta {
    kind: String,
    config: DenoiserConfig,
    lora: Option<LoraSpec>,
}

#[derive(Serialize, Deserialize)]
struct BaselineMeta {
    kind: String,
    config: BaselineConfig,
}

const BASE_TENSORS: [&str; 7] = [
    "class_emb",
    "l1.weight",
    "l1.bias",
    "l2.weight",
    "l2.bias",
    "l3.weight",
    "l3.bias",
];

/// Save a denoiser, adapters included when attached.
pub fn save_denoiser(model: &Denoiser, path: &Path) -> Result<()> {
    let lora = model.l1.adapter.as_ref().map(|ad| LoraSpec {
        rank: ad.rank,
        alpha: ad.alpha,
    });
    let meta = DenoiserMeta {
        kind: "denoiser".to_string(),
        config: model.cfg,
        lora,
    };
    let mut ck = Checkpoint::new(serde_json::to_value(&meta)?);
    ck.push("class_emb", model.class_emb.value().clone())?;
    for (i, layer) in model.layers().into_iter().enumerate() {
        ck.push(format!("l{}.weight", i + 1), layer.weight.value().clone())?;
        ck.push(format!("l{}.bias", i + 1), layer.bias.value().clone())?;
        if let Some(ad) = &layer.adapter {
            ck.push(format!("l{}.lora_a", i + 1), ad.a.value().clone())?;
            ck.push(format!("l{}.lora_b", i + 1), ad.b.value().clone())?;
        }
    }
    ck.write(path)
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    let ck = Checkpoint::read(path)?;
    let meta: DenoiserMeta = serde_json::from_value(ck.meta.clone())?;
    if meta.kind != "denoiser" {
        return Err(Error::CheckpointFormat {
            path: path.display().to_string(),
            detail: format!("expected a denoiser checkpoint, found {}", meta.kind),
        });
    }
    let mut model = Denoiser::new(meta.config, &mut RngStream::new(0, 0))?;
    model.class_emb.set_value(ck.tensor("class_emb")?.clone())?;
    for (i, layer) in model.layers_mut().into_iter().enumerate() {
        layer.weight.set_value(ck.tensor(&format!("l{}.weight", i + 1))?.clone())?;
        layer.bias.set_value(ck.tensor(&format!("l{}.bias", i + 1))?.clone())?;
    }
    if let Some(spec) = meta.lora {
        attach_lora(&mut model, &spec, &mut RngStream::new(0, 0))?;
        for (i, layer) in model.layers_mut().into_iter().enumerate() {
            let ad = layer.adapter.as_mut().expect("just attached");
            ad.a.set_value(ck.tensor(&format!("l{}.lora_a", i + 1))?.clone())?;
            ad.b.set_value(ck.tensor(&format!("l{}.lora_b", i + 1))?.clone())?;
        }
    }
    Ok(model)
}

pub fn save_baseline(model: &DiscriminativeModel, path: &Path) -> Result<()> {
    let meta = BaselineMeta {
        kind: "baseline".to_string(),
        config: model.cfg,
    };
    let mut ck = Checkpoint::new(serde_json::to_value(&meta)?);
    for (i, layer) in model.layers().into_iter().enumerate() {
        ck.push(format!("l{}.weight", i + 1), layer.weight.value().clone())?;
        ck.push(format!("l{}.bias", i + 1), layer.bias.value().clone())?;
    }
    ck.write(path)
}

pub fn load_baseline(path: &Path) -> Result<DiscriminativeModel> {
    let ck = Checkpoint::read(path)?;
    let meta: BaselineMeta = serde_json::from_value(ck.meta.clone())?;
    if meta.kind != "baseline" {
        return Err(Error::CheckpointFormat {
            path: path.display().to_string(),
            detail: format!("expected a baseline checkpoint, found {}", meta.kind),
        });
    }
    let mut model = DiscriminativeModel::new(meta.config, &mut RngStream::new(0, 0))?;
    for (i, layer) in model.layers_mut().into_iter().enumerate() {
        layer.weight.set_value(ck.tensor(&format!("l{}.weight", i + 1))?.clone())?;
        layer.bias.set_value(ck.tensor(&format!("l{}.bias", i + 1))?.clone())?;
    }
    Ok(model)
}

/// The seven base tensors a denoiser checkpoint always carries, in order.
pub fn base_tensor_names() -> &'static [&'static str] {
    &BASE_TENSORS
}
