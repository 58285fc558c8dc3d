//! WMUC binary checkpoints.
//!
//! Layout, all integers little-endian: magic `WMUC`, version `u16`, tensor count `u32`, then
//! per tensor a `u16` name length, UTF-8 name, `u8` rank, `rank` x `u32` dims and the `f32`
//! payload.

use std::fs;
use std::path::Path;

use crate::backbone::{ArchConfig, BackboneKind, SegNetwork};
use crate::error::{Result, WmuError};
use crate::tensor::TensorGrid;

pub const MAGIC: &[u8; 4] = b"WMUC";
pub const VERSION: u16 = 1;
/// Architecture record: `[nets, kind codes.., image_size, classes, width, patch, window, d_state]`.
pub const META_ARCH: &str = "meta.arch";
/// Selection record: `[best validation dice, iteration]`.
pub const META_VAL: &str = "meta.val";

pub type NamedTensor = (String, TensorGrid<f32>);

pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| WmuError::Checkpoint("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| WmuError::Checkpoint(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| WmuError::Checkpoint(format!("dimension too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            WmuError::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(WmuError::Checkpoint("bad magic (not a WMUC file)".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(WmuError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| WmuError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| WmuError::Checkpoint(format!("{name}: shape overflow")))?;
        let payload = r.take(numel.checked_mul(4).unwrap_or(usize::MAX), &name)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = TensorGrid::new(&shape, data).map_err(|e| WmuError::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(WmuError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode(tensors)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| WmuError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| WmuError::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).map_err(|e| WmuError::io(path, e))?;
    decode(&bytes)
}

/// A set of networks sharing one architecture, as stored in a checkpoint.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub nets: Vec<SegNetwork<f32>>,
    /// `(best validation dice, iteration)` if recorded.
    pub val: Option<(f64, usize)>,
}

pub fn ensemble_tensors(nets: &[SegNetwork<f32>], val: Option<(f64, usize)>) -> Vec<NamedTensor> {
    let arch = nets[0].arch;
    let mut meta = vec![nets.len() as f32];
    meta.extend(nets.iter().map(|n| n.kind.code() as f32));
    meta.extend(
        [arch.image_size, arch.num_classes, arch.width, arch.patch, arch.window, arch.d_state].map(|v| v as f32),
    );
    let mut out = vec![(META_ARCH.to_string(), TensorGrid::from_vec(&[meta.len()], meta))];
    if let Some((dice, iter)) = val {
        out.push((META_VAL.to_string(), TensorGrid::from_vec(&[2], vec![dice as f32, iter as f32])));
    }
    for (i, net) in nets.iter().enumerate() {
        for p in net.params.iter() {
            out.push((format!("net{}.{}", i + 1, p.name), p.value.clone()));
        }
    }
    out
}

pub fn save_ensemble(path: &Path, nets: &[SegNetwork<f32>], val: Option<(f64, usize)>) -> Result<()> {
    write(path, &ensemble_tensors(nets, val))
}

pub fn load_ensemble(path: &Path) -> Result<Ensemble> {
    let tensors = read(path)?;
    let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let bad = |msg: String| WmuError::Checkpoint(format!("{}: {msg}", path.display()));
    let meta = find(META_ARCH).ok_or_else(|| bad(format!("missing {META_ARCH}")))?.data();
    let count = *meta.first().ok_or_else(|| bad("empty arch record".into()))? as usize;
    if count == 0 || meta.len() != 1 + count + 6 {
        return Err(bad(format!("malformed arch record {meta:?}")));
    }
    let [image_size, num_classes, width, patch, window, d_state] =
        std::array::from_fn(|i| meta[1 + count + i] as usize);
    let arch = ArchConfig { image_size, num_classes, width, patch, window, d_state };
    let mut nets = Vec::with_capacity(count);
    for i in 0..count {
        let kind = BackboneKind::from_code(meta[1 + i] as u8)
            .ok_or_else(|| bad(format!("unknown backbone code {}", meta[1 + i])))?;
        // seed is irrelevant: every parameter is overwritten below
        let mut net = SegNetwork::<f32>::build(kind, arch, 0)?;
        for p in net.params.iter_mut() {
            let key = format!("net{}.{}", i + 1, p.name);
            let t = find(&key).ok_or_else(|| bad(format!("missing tensor {key}")))?;
            if t.shape() != p.value.shape() {
                return Err(bad(format!("{key}: shape {:?}, expected {:?}", t.shape(), p.value.shape())));
            }
            p.value = t.clone();
        }
        nets.push(net);
    }
    let val = find(META_VAL).map(|t| (t.data()[0] as f64, t.data()[1] as usize));
    Ok(Ensemble { nets, val })
}
