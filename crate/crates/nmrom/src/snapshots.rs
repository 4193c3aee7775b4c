//! Snapshot datasets: parameter sweeps of full-order trajectories,
//! channel-wise normalization, and a checksummed binary file format.
//!
//! Columns are ordered parameter-major, time-minor, and that ordering is
//! part of the on-disk contract.

use std::io::{Read, Write};
use std::path::Path;

use crate::fvm::{fom_rollout, DiscreteProblem, ProblemId};
use crate::grid::Field;
use crate::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"NMSNAP1\n";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Parameter- and time-indexed state matrix (one snapshot per column).
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    problem: ProblemId,
    nx: usize,
    ny: usize,
    channels: usize,
    params: Vec<f64>,
    /// Stored times per parameter.
    times: Vec<Vec<f64>>,
    /// `d x N` column-major.
    data: Vec<f64>,
    dt: f64,
    stride: u32,
}

impl SnapshotSet {
    pub fn from_series(
        problem: ProblemId,
        nx: usize,
        ny: usize,
        series: Vec<crate::fvm::SnapshotSeries>,
        dt: f64,
        stride: u32,
    ) -> Result<Self> {
        let channels = problem.channels();
        let d = channels * nx * ny;
        let mut params = Vec::new();
        let mut times = Vec::new();
        let mut data = Vec::new();
        for s in series {
            params.push(s.mu);
            times.push(s.times.clone());
            for state in &s.states {
                if state.len() != d {
                    return Err(Error::Shape(format!(
                        "snapshot has {} values, expected {d}",
                        state.len()
                    )));
                }
                data.extend_from_slice(state.values());
            }
        }
        Ok(Self {
            problem,
            nx,
            ny,
            channels,
            params,
            times,
            data,
            dt,
            stride,
        })
    }

    pub fn problem(&self) -> ProblemId {
        self.problem
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Degrees of freedom per snapshot.
    pub fn dof(&self) -> usize {
        self.channels * self.nx * self.ny
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_times(&self, param: usize) -> usize {
        self.times[param].len()
    }

    pub fn times(&self, param: usize) -> &[f64] {
        &self.times[param]
    }

    /// Total number of columns.
    pub fn n_columns(&self) -> usize {
        self.times.iter().map(|t| t.len()).sum()
    }

    fn column_offset(&self, param: usize, t: usize) -> usize {
        let before: usize = self.times[..param].iter().map(|v| v.len()).sum();
        before + t
    }

    pub fn column(&self, param: usize, t: usize) -> &[f64] {
        let col = self.column_offset(param, t);
        &self.data[col * self.dof()..(col + 1) * self.dof()]
    }

    pub fn column_flat(&self, col: usize) -> &[f64] {
        &self.data[col * self.dof()..(col + 1) * self.dof()]
    }

    pub fn column_as_field(&self, param: usize, t: usize) -> Field {
        Field::from_values(self.channels, self.n_cells(), self.column(param, t).to_vec())
            .expect("stored column has the right length")
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Dense copy of the snapshot matrix for decompositions.
    pub fn matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_column_slice(self.dof(), self.n_columns(), &self.data)
    }

    /// Drops the leading snapshots of every parameter up to (excluding) the
    /// first time `>= t0`. Stored times stay absolute.
    pub fn cut_leading(&self, t0: f64) -> Result<SnapshotSet> {
        if t0 <= 0.0 {
            return Ok(self.clone());
        }
        let d = self.dof();
        let mut params = Vec::new();
        let mut times = Vec::new();
        let mut data = Vec::new();
        for p in 0..self.n_params() {
            let keep_from = self.times[p]
                .iter()
                .position(|&t| t >= t0 - 1e-12)
                .ok_or_else(|| {
                    Error::Argument(format!("cut time {t0} is past the last stored time"))
                })?;
            params.push(self.params[p]);
            times.push(self.times[p][keep_from..].to_vec());
            for t in keep_from..self.times[p].len() {
                let col = self.column_offset(p, t);
                data.extend_from_slice(&self.data[col * d..(col + 1) * d]);
            }
        }
        Ok(SnapshotSet {
            problem: self.problem,
            nx: self.nx,
            ny: self.ny,
            channels: self.channels,
            params,
            times,
            data,
            dt: self.dt,
            stride: self.stride,
        })
    }
}

/// Runs the factory at equispaced parameter values (endpoints included) and
/// concatenates the sampled trajectories.
pub fn build_training_set(
    factory: &(dyn Fn(f64) -> Result<Box<dyn DiscreteProblem>> + Sync),
    mu_range: (f64, f64),
    n_params: usize,
    sample_every: usize,
    threads: usize,
) -> Result<SnapshotSet> {
    if n_params < 2 {
        return Err(Error::Argument("need at least 2 parameters".into()));
    }
    let mus: Vec<f64> = (0..n_params)
        .map(|i| mu_range.0 + (mu_range.1 - mu_range.0) * i as f64 / (n_params - 1) as f64)
        .collect();
    let series = sweep(factory, &mus, sample_every, threads)?;
    let first = factory(mus[0])?;
    let (nx, ny) = (first.grid().nx(), first.grid().ny());
    SnapshotSet::from_series(
        first.id(),
        nx,
        ny,
        series,
        first.dt(),
        sample_every as u32,
    )
}

/// Runs the factory at explicit parameter values.
pub fn build_set_at(
    factory: &(dyn Fn(f64) -> Result<Box<dyn DiscreteProblem>> + Sync),
    mus: &[f64],
    sample_every: usize,
    threads: usize,
) -> Result<SnapshotSet> {
    if mus.is_empty() {
        return Err(Error::Argument("need at least 1 parameter".into()));
    }
    let series = sweep(factory, mus, sample_every, threads)?;
    let first = factory(mus[0])?;
    let (nx, ny) = (first.grid().nx(), first.grid().ny());
    SnapshotSet::from_series(
        first.id(),
        nx,
        ny,
        series,
        first.dt(),
        sample_every as u32,
    )
}

fn sweep(
    factory: &(dyn Fn(f64) -> Result<Box<dyn DiscreteProblem>> + Sync),
    mus: &[f64],
    sample_every: usize,
    threads: usize,
) -> Result<Vec<crate::fvm::SnapshotSeries>> {
    let threads = threads.max(1).min(mus.len());
    let mut results: Vec<Option<Result<crate::fvm::SnapshotSeries>>> =
        (0..mus.len()).map(|_| None).collect();
    if threads == 1 {
        for (i, &mu) in mus.iter().enumerate() {
            results[i] = Some(run_one(factory, mu, sample_every));
        }
    } else {
        let chunk = mus.len().div_ceil(threads);
        std::thread::scope(|scope| {
            for (slot_chunk, mu_chunk) in results.chunks_mut(chunk).zip(mus.chunks(chunk)) {
                scope.spawn(move || {
                    for (slot, &mu) in slot_chunk.iter_mut().zip(mu_chunk) {
                        *slot = Some(run_one(factory, mu, sample_every));
                    }
                });
            }
        });
    }
    results
        .into_iter()
        .map(|r| r.expect("sweep slot filled"))
        .collect()
}

fn run_one(
    factory: &(dyn Fn(f64) -> Result<Box<dyn DiscreteProblem>> + Sync),
    mu: f64,
    sample_every: usize,
) -> Result<crate::fvm::SnapshotSeries> {
    let problem = factory(mu)?;
    fom_rollout(problem.as_ref(), sample_every)
        .map_err(|e| Error::Domain(format!("trajectory at mu = {mu} failed: {e}")))
}

/// Centering and scaling fitted on a training set: per-DOF mean, per-channel
/// min/max of the centered data.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Channels whose centered data is constant; their scale is forced to 1.
    pub degenerate: Vec<bool>,
    pub channels: usize,
}

impl NormalizationStats {
    pub fn scale(&self, ch: usize) -> f64 {
        if self.degenerate[ch] {
            1.0
        } else {
            0.5 * (self.max[ch] - self.min[ch])
        }
    }

    pub fn shift(&self, ch: usize) -> f64 {
        0.5 * (self.min[ch] + self.max[ch])
    }
}

/// Fits normalization so the training set maps into `[-1, 1]` per channel
/// with the extrema attained.
pub fn fit_normalization(train: &SnapshotSet) -> Result<NormalizationStats> {
    let n = train.n_columns();
    if n == 0 {
        return Err(Error::Argument("cannot fit normalization on an empty set".into()));
    }
    let d = train.dof();
    let cells = train.n_cells();
    let mut mean = vec![0.0; d];
    for col in 0..n {
        for (m, v) in mean.iter_mut().zip(train.column_flat(col)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let c = train.channels();
    let mut min = vec![f64::INFINITY; c];
    let mut max = vec![f64::NEG_INFINITY; c];
    for col in 0..n {
        let data = train.column_flat(col);
        for ch in 0..c {
            for i in 0..cells {
                let centered = data[ch * cells + i] - mean[ch * cells + i];
                min[ch] = min[ch].min(centered);
                max[ch] = max[ch].max(centered);
            }
        }
    }
    let degenerate: Vec<bool> = (0..c).map(|ch| !(max[ch] > min[ch])).collect();
    for (ch, &deg) in degenerate.iter().enumerate() {
        if deg {
            log::warn!("channel {ch} is degenerate (max == min), scale forced to 1");
        }
    }
    Ok(NormalizationStats {
        mean,
        min,
        max,
        degenerate,
        channels: c,
    })
}

/// Maps raw values into the normalized range:
/// `2/(max-min) * (u - mean - (min+max)/2)` per channel.
pub fn normalize(values: &[f64], stats: &NormalizationStats) -> Result<Vec<f64>> {
    let d = stats.mean.len();
    if values.len() != d {
        return Err(Error::Shape(format!(
            "expected {d} values, got {}",
            values.len()
        )));
    }
    let cells = d / stats.channels;
    let mut out = vec![0.0; d];
    for ch in 0..stats.channels {
        let scale = stats.scale(ch);
        let shift = stats.shift(ch);
        for i in 0..cells {
            let k = ch * cells + i;
            out[k] = (values[k] - stats.mean[k] - shift) / scale;
        }
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(values: &[f64], stats: &NormalizationStats) -> Result<Vec<f64>> {
    let d = stats.mean.len();
    if values.len() != d {
        return Err(Error::Shape(format!(
            "expected {d} values, got {}",
            values.len()
        )));
    }
    let cells = d / stats.channels;
    let mut out = vec![0.0; d];
    for ch in 0..stats.channels {
        let scale = stats.scale(ch);
        let shift = stats.shift(ch);
        for i in 0..cells {
            let k = ch * cells + i;
            out[k] = values[k] * scale + shift + stats.mean[k];
        }
    }
    Ok(out)
}

// --- binary format ---------------------------------------------------------

struct CountingWriter<W: Write> {
    inner: W,
    hasher: crc32fast::Hasher,
}

impl<W: Write> CountingWriter<W> {
    fn new(inner: W) -> Self {
        Self {
            inner,
            hasher: crc32fast::Hasher::new(),
        }
    }

    fn write_all(&mut self, buf: &[u8]) -> Result<()> {
        self.hasher.update(buf);
        self.inner.write_all(buf)?;
        Ok(())
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.write_all(&v.to_le_bytes())
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        self.write_all(&v.to_le_bytes())
    }
}

struct CheckedReader<R: Read> {
    inner: R,
    hasher: crc32fast::Hasher,
}

impl<R: Read> CheckedReader<R> {
    fn new(inner: R) -> Self {
        Self {
            inner,
            hasher: crc32fast::Hasher::new(),
        }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
        self.hasher.update(buf);
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}

/// Writes the set in the `NMSNAP v1` layout with a trailing CRC32.
pub fn save_snapshots(set: &SnapshotSet, path: &Path) -> Result<()> {
    if set.n_columns() == 0 {
        return Err(Error::Argument("refusing to save an empty snapshot set".into()));
    }
    let file = std::fs::File::create(path)?;
    let mut w = CountingWriter::new(std::io::BufWriter::new(file));
    w.write_all(SNAPSHOT_MAGIC)?;
    w.u32(SNAPSHOT_VERSION)?;
    w.u32(set.channels as u32)?;
    w.u32(set.nx as u32)?;
    w.u32(set.ny as u32)?;
    w.u32(set.params.len() as u32)?;
    for t in &set.times {
        w.u32(t.len() as u32)?;
    }
    w.f64(set.dt)?;
    w.u32(set.stride)?;
    for &mu in &set.params {
        w.f64(mu)?;
    }
    for &v in &set.data {
        w.f64(v)?;
    }
    let crc = w.hasher.clone().finalize();
    w.inner.write_all(&crc.to_le_bytes())?;
    w.inner.flush()?;
    Ok(())
}

/// Reads a `NMSNAP v1` file, verifying magic, version, and checksum. Stored
/// times are reconstructed as `index * stride * dt`.
pub fn load_snapshots(path: &Path) -> Result<SnapshotSet> {
    let file = std::fs::File::open(path)?;
    let mut r = CheckedReader::new(std::io::BufReader::new(file));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::Format("bad magic, not a snapshot file".into()));
    }
    let version = r.u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {version}")));
    }
    let channels = r.u32()? as usize;
    let nx = r.u32()? as usize;
    let ny = r.u32()? as usize;
    let n_params = r.u32()? as usize;
    let problem = match channels {
        2 => ProblemId::Ncl,
        3 => ProblemId::Swe,
        other => {
            return Err(Error::Format(format!(
                "cannot infer problem from {other} channels"
            )))
        }
    };
    let mut counts = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        counts.push(r.u32()? as usize);
    }
    let dt = r.f64()?;
    let stride = r.u32()?;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(r.f64()?);
    }
    let d = channels * nx * ny;
    let n: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(d * n);
    for _ in 0..d * n {
        data.push(r.f64()?);
    }
    let computed = r.hasher.clone().finalize();
    let mut crc_bytes = [0u8; 4];
    r.inner
        .read_exact(&mut crc_bytes)
        .map_err(|e| Error::Format(format!("missing checksum: {e}")))?;
    let stored = u32::from_le_bytes(crc_bytes);
    if stored != computed {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    let times: Vec<Vec<f64>> = counts
        .iter()
        .map(|&c| (0..c).map(|k| k as f64 * stride as f64 * dt).collect())
        .collect();
    Ok(SnapshotSet {
        problem,
        nx,
        ny,
        channels,
        params,
        times,
        data,
        dt,
        stride,
    })
}
