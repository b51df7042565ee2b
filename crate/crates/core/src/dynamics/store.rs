//! On-disk trajectory store: one binary record per trajectory plus a
//! key=value manifest.
//!
//! Record layout (little-endian): 8-byte magic, `u32` version, `u64` d_v,
//! `u64` d_y, `u64` J, `f64` dt, `u64` seed, then `(J+1) d_v` state values
//! followed by `J d_y` observation values, all `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::system::{SystemName, SystemSpec};
use super::truth::{DatasetMode, TruthRun};
use crate::error::{Error, Result};
use crate::numerics::{lit, to_f64, Matrix, Real};

pub const TRAJ_MAGIC: &[u8; 8] = b"ENSTRAJ\0";
pub const TRAJ_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Flat key=value description of a trajectory directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn for_dataset<T: Real>(spec: &SystemSpec<T>, count: usize, steps: usize, seed: u64, mode: DatasetMode) -> Self {
        let mut entries: BTreeMap<String, String> = spec.describe().into_iter().collect();
        entries.insert("count".into(), count.to_string());
        entries.insert("steps".into(), steps.to_string());
        entries.insert("seed".into(), seed.to_string());
        entries.insert("mode".into(), mode.to_string());
        entries.insert("burn_in".into(), format!("{:?}", spec.burn_in));
        Self { entries }
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("manifest is missing `{key}`")))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("manifest value for `{key}` does not parse")))
    }

    pub fn system(&self) -> Result<SystemName> {
        self.get("system")?.parse().map_err(|_| Error::Format("unknown system in manifest".into()))
    }

    pub fn count(&self) -> Result<usize> {
        self.parse("count")
    }

    /// Rebuilds the system preset recorded in the manifest.
    pub fn system_spec<T: Real>(&self) -> Result<SystemSpec<T>> {
        let spec = SystemSpec::preset(self.system()?, self.parse("sigma_y")?, self.parse("sigma_v")?)?;
        let stride: usize = self.parse("obs_stride")?;
        let offset: usize = self.parse("obs_offset")?;
        if stride != spec.obs.stride || offset != spec.obs.offset {
            let obs = super::system::ObsOperator::every(spec.state_dim(), stride, offset)?;
            return spec.with_obs(obs);
        }
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line {} lacks `=`", n + 1)))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }
}

pub fn trajectory_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("traj_{index:06}.bin"))
}

pub fn write_trajectory<T: Real>(path: &Path, run: &TruthRun<T>, dt: f64) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(TRAJ_MAGIC)?;
    w.write_all(&TRAJ_VERSION.to_le_bytes())?;
    w.write_all(&(run.states.cols() as u64).to_le_bytes())?;
    w.write_all(&(run.obs.cols() as u64).to_le_bytes())?;
    w.write_all(&(run.steps() as u64).to_le_bytes())?;
    w.write_all(&dt.to_le_bytes())?;
    w.write_all(&run.seed.to_le_bytes())?;
    for &x in run.states.as_slice().iter().chain(run.obs.as_slice()) {
        w.write_all(&to_f64(x).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Header of a trajectory record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajHeader {
    pub state_dim: usize,
    pub obs_dim: usize,
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
}

fn read_array<const K: usize>(r: &mut impl Read) -> Result<[u8; K]> {
    let mut buf = [0u8; K];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("trajectory record is truncated".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r)?))
}

fn read_matrix<T: Real>(r: &mut impl Read, rows: usize, cols: usize) -> Result<Matrix<T>> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(lit(read_f64(r)?));
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn read_trajectory<T: Real>(path: &Path, stream: u64) -> Result<(TrajHeader, TruthRun<T>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    if &read_array::<8>(&mut r)? != TRAJ_MAGIC {
        return Err(Error::Format(format!("{} is not a trajectory record", path.display())));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != TRAJ_VERSION {
        return Err(Error::Format(format!("unsupported trajectory version {version}")));
    }
    let to_usize = |x: u64| usize::try_from(x).map_err(|_| Error::Format("dimension overflow".into()));
    let state_dim = to_usize(read_u64(&mut r)?)?;
    let obs_dim = to_usize(read_u64(&mut r)?)?;
    let steps = to_usize(read_u64(&mut r)?)?;
    let dt = read_f64(&mut r)?;
    let seed = read_u64(&mut r)?;
    if state_dim == 0 || obs_dim == 0 || steps == 0 || state_dim > 1 << 20 || steps > 1 << 28 {
        return Err(Error::Format("implausible trajectory header".into()));
    }
    let states = read_matrix(&mut r, steps + 1, state_dim)?;
    let obs = read_matrix(&mut r, steps, obs_dim)?;
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after trajectory record".into()));
    }
    let header = TrajHeader { state_dim, obs_dim, steps, dt, seed };
    Ok((header, TruthRun { states, obs, seed, stream }))
}

/// Writes every trajectory and the manifest into `dir`, creating it if needed.
pub fn save_dataset<T: Real>(dir: &Path, manifest: &Manifest, runs: &[TruthRun<T>], dt: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (m, run) in runs.iter().enumerate() {
        write_trajectory(&trajectory_path(dir, m), run, dt)?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(())
}

/// Loads the manifest and all trajectories, checking them against each other.
pub fn load_dataset<T: Real>(dir: &Path) -> Result<(Manifest, Vec<TruthRun<T>>)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest = Manifest::from_text(&text)?;
    let count = manifest.count()?;
    let d_v: usize = manifest.parse("state_dim")?;
    let d_y: usize = manifest.parse("obs_dim")?;
    let mut runs = Vec::with_capacity(count);
    for m in 0..count {
        let (h, run) = read_trajectory(&trajectory_path(dir, m), m as u64)?;
        if h.state_dim != d_v || h.obs_dim != d_y {
            return Err(Error::Format(format!("trajectory {m} dimensions disagree with the manifest")));
        }
        runs.push(run);
    }
    Ok((manifest, runs))
}
