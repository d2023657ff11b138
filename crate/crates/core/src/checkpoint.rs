//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "OPLC"  u32 version  u64 header_len  header (UTF-8 JSON)
//! u32 n_arrays, then per array:
//!   u32 name_len  name  u32 ndim  u64 × ndim dims  f64 × prod(dims)
//! ```
//!
//! The header carries the model config, the mask metadata, the fusion
//! system in its text form and a free-form `meta` object. The mask matrix
//! is stored as the array named `mask`; the rest are policy weights in
//! parameter order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionSystem;
use crate::numcore::Tensor;
use crate::policy::{ModelConfig, PolicyParams};
use crate::topomask::{MaskMode, TopoMask};

pub const MAGIC: &[u8; 4] = b"OPLC";
pub const VERSION: u32 = 1;
const MASK_ARRAY: &str = "mask";

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    mask_mode: MaskMode,
    mask_tol: f64,
    forbidden: Vec<bool>,
    fusion: String,
    meta: serde_json::Value,
}

/// Everything needed to sample from a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: PolicyParams,
    pub mask: TopoMask,
    pub fusion: FusionSystem,
    pub meta: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
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
        usize::try_from(self.u64()?).map_err(|_| bad("length overflows usize"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            mask_mode: self.mask.mode(),
            mask_tol: self.mask.tol(),
            forbidden: self.mask.forbidden().to_vec(),
            fusion: self.fusion.to_text(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);

        let arrays: Vec<(&str, &Tensor)> = std::iter::once((MASK_ARRAY, self.mask.matrix()))
            .chain(self.params.names().iter().map(String::as_str).zip(self.params.tensors()))
            .collect();
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, t) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
        }
        let hlen = r.len()?;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n);
        for _ in 0..n {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| bad("array name is not UTF-8"))?.to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| bad("shape overflow"))?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| bad("shape overflow"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
        }

        let mask_at = arrays.iter().position(|(n, _)| n == MASK_ARRAY).ok_or_else(|| bad("missing mask array"))?;
        let (_, m) = arrays.remove(mask_at);
        let mask = TopoMask::from_parts(m, header.forbidden, header.mask_tol, header.mask_mode)?;
        let fusion = FusionSystem::parse(&header.fusion)?;
        if fusion.n_types() != mask.n() {
            return Err(bad(format!("mask over {} types, fusion system over {}", mask.n(), fusion.n_types())));
        }
        let params = PolicyParams::from_named(&header.model, arrays)?;
        Ok(Self { model: header.model, params, mask, fusion, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_bytes(&buf)
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Contract(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}
