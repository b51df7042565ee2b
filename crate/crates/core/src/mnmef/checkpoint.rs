use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::model::{Mnmef, MnmefConfig};
use super::params::Partition;
use crate::dynamics::SystemSpec;
use crate::error::{Error, Result};
use crate::numerics::{lit, Real};
use crate::settransformer::ENCODING_DIM;

const MAGIC: &[u8; 8] = b"MNMEFCKP";
const VERSION: u32 = 1;

/// Fixed-size fields preceding the parameter arrays.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub system: String,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub encoding_dim: usize,
    pub partition_sizes: [usize; 4],
}

/// Text sidecar path next to a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn put_u64(out: &mut Vec<u8>, x: usize) {
    out.extend_from_slice(&(x as u64).to_le_bytes());
}

/// Writes the binary checkpoint and its config sidecar.
pub fn save_checkpoint<T: Real>(model: &Mnmef<T>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let name = model.spec.name.as_str().as_bytes();
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name);
    put_u64(&mut out, model.state_dim());
    put_u64(&mut out, model.obs_dim());
    put_u64(&mut out, ENCODING_DIM);
    for size in model.params.sizes() {
        put_u64(&mut out, size);
    }
    for p in Partition::ALL {
        for x in model.params.get(p).flatten() {
            out.extend_from_slice(&x.to_f64().unwrap_or(f64::NAN).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&out)?;
    fs::write(sidecar_path(path), model.config.to_text())?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_header(c: &mut Cursor<'_>) -> Result<CheckpointHeader> {
    if c.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = c.u32()? as usize;
    let system = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::Format("system name is not UTF-8".into()))?;
    let state_dim = c.u64()?;
    let obs_dim = c.u64()?;
    let encoding_dim = c.u64()?;
    let mut partition_sizes = [0; 4];
    for s in &mut partition_sizes {
        *s = c.u64()?;
    }
    Ok(CheckpointHeader { version, system, state_dim, obs_dim, encoding_dim, partition_sizes })
}

/// Reads only the header.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    read_header(&mut Cursor { buf: &buf, pos: 0 })
}

/// Rebuilds a model for `spec` from a checkpoint and its sidecar.
pub fn load_checkpoint<T: Real>(path: &Path, spec: Arc<SystemSpec<T>>) -> Result<Mnmef<T>> {
    let config = MnmefConfig::from_text(&fs::read_to_string(sidecar_path(path))?)?;
    let buf = fs::read(path)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let header = read_header(&mut c)?;
    if header.system != spec.name.as_str()
        || header.state_dim != spec.state_dim()
        || header.obs_dim != spec.obs_dim()
        || header.encoding_dim != ENCODING_DIM
    {
        return Err(Error::Format(format!(
            "checkpoint is for {} (d_v={}, d_y={}), requested {} (d_v={}, d_y={})",
            header.system,
            header.state_dim,
            header.obs_dim,
            spec.name,
            spec.state_dim(),
            spec.obs_dim()
        )));
    }
    let mut model = Mnmef::new(spec, config, 0)?;
    if model.params.sizes() != header.partition_sizes {
        return Err(Error::Format("partition sizes do not match the configured architecture".into()));
    }
    for p in Partition::ALL {
        let n = header.partition_sizes[p.index()];
        let flat = (0..n).map(|_| c.f64().map(lit::<T>)).collect::<Result<Vec<T>>>()?;
        model.params.get_mut(p).assign_flat(&flat)?;
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after the parameter arrays".into()));
    }
    Ok(model)
}
