//! Binary sample shards.
//!
//! One file per split and task. Layout (little-endian):
//!
//! ```text
//! b"PEMVSHRD"                 magic
//! u32 version, u32 task (0 = op_pol, 1 = op_op), u32 l, u32 D, u64 count
//! f64 mean[D], f64 std[D]     normalization statistics
//! count records of:
//!   u64 cycle_index, u64 window_offset, u64 dec_offset, u64 valid_len
//!   f32 x_enc[l*D], f32 x_dec[l*D], f32 y[l]
//! ```
//!
//! `data.json` next to the shards records the split, the statistics, the
//! pairing options and the sample counts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NormStats, PairOptions, PairedSample, SplitPlan, Task, N_CHANNELS, SEQ_LEN};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PEMVSHRD";
pub const SHARD_VERSION: u32 = 1;
const DATA_MANIFEST: &str = "data.json";

/// The four sample sets of one run plus everything needed to rebuild them.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train_op_pol: Vec<PairedSample>,
    pub train_op_op: Vec<PairedSample>,
    pub val_op_pol: Vec<PairedSample>,
    pub val_op_op: Vec<PairedSample>,
    pub stats: NormStats,
    pub plan: SplitPlan,
    pub options: PairOptions,
}

#[derive(Debug, Serialize, Deserialize)]
struct DataManifest {
    version: u32,
    seq_len: usize,
    channels: usize,
    stats: NormStats,
    plan: SplitPlan,
    options: PairOptions,
    counts: Counts,
}

#[derive(Debug, Serialize, Deserialize)]
struct Counts {
    train_op_pol: usize,
    train_op_op: usize,
    val_op_pol: usize,
    val_op_op: usize,
}

fn task_code(t: Task) -> u32 {
    match t {
        Task::OpPol => 0,
        Task::OpOp => 1,
    }
}

pub fn write_shard(path: &Path, task: Task, stats: &NormStats, samples: &[PairedSample]) -> Result<()> {
    let rec = 32 + 4 * (2 * SEQ_LEN * N_CHANNELS + SEQ_LEN);
    let mut b = Vec::with_capacity(64 + samples.len() * rec);
    b.extend_from_slice(MAGIC);
    for x in [SHARD_VERSION, task_code(task), SEQ_LEN as u32, N_CHANNELS as u32] {
        b.extend_from_slice(&x.to_le_bytes());
    }
    b.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for x in stats.mean.iter().chain(&stats.std) {
        b.extend_from_slice(&x.to_le_bytes());
    }
    for s in samples {
        if s.task != task {
            return Err(Error::Data(format!("{} sample in a {} shard", s.task.name(), task.name())));
        }
        for x in [s.cycle_index, s.window_offset as u64, s.dec_offset as u64, s.valid_len as u64] {
            b.extend_from_slice(&x.to_le_bytes());
        }
        for x in s.x_enc.iter().chain(&s.x_dec).chain(&s.y) {
            b.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, b).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::format(self.path, "truncated shard"))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Reads a shard, returning its task, statistics and samples.
pub fn read_shard(path: &Path) -> Result<(Task, NormStats, Vec<PairedSample>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, at: 0, path };
    if c.take(8)? != MAGIC {
        return Err(Error::format(path, "not a sample shard"));
    }
    let version = c.u32()?;
    if version != SHARD_VERSION {
        return Err(Error::format(path, format!("unsupported shard version {version}")));
    }
    let task = match c.u32()? {
        0 => Task::OpPol,
        1 => Task::OpOp,
        t => return Err(Error::format(path, format!("unknown task code {t}"))),
    };
    let (l, d) = (c.u32()? as usize, c.u32()? as usize);
    if l != SEQ_LEN || d != N_CHANNELS {
        return Err(Error::format(path, format!("shard has l={l}, D={d}; expected {SEQ_LEN}, {N_CHANNELS}")));
    }
    let count = c.u64()? as usize;
    let mean = [c.f64()?, c.f64()?];
    let std = [c.f64()?, c.f64()?];
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let cycle_index = c.u64()?;
        let window_offset = c.u64()? as usize;
        let dec_offset = c.u64()? as usize;
        let valid_len = c.u64()? as usize;
        if valid_len == 0 || valid_len > l {
            return Err(Error::format(path, format!("invalid valid_len {valid_len}")));
        }
        samples.push(PairedSample {
            task,
            x_enc: c.f32s(l * d)?,
            x_dec: c.f32s(l * d)?,
            y: c.f32s(l)?,
            valid_len,
            cycle_index,
            window_offset,
            dec_offset,
        });
    }
    if c.at != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last sample"));
    }
    Ok((task, NormStats { mean, std }, samples))
}

const FILES: [(&str, Task); 4] = [
    ("train_op_pol.bin", Task::OpPol),
    ("train_op_op.bin", Task::OpOp),
    ("val_op_pol.bin", Task::OpPol),
    ("val_op_op.bin", Task::OpOp),
];

impl PreparedData {
    fn sets(&self) -> [&Vec<PairedSample>; 4] {
        [&self.train_op_pol, &self.train_op_op, &self.val_op_pol, &self.val_op_op]
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for ((file, task), set) in FILES.iter().zip(self.sets()) {
            write_shard(&dir.join(file), *task, &self.stats, set)?;
        }
        let manifest = DataManifest {
            version: SHARD_VERSION,
            seq_len: SEQ_LEN,
            channels: N_CHANNELS,
            stats: self.stats,
            plan: self.plan.clone(),
            options: self.options,
            counts: Counts {
                train_op_pol: self.train_op_pol.len(),
                train_op_op: self.train_op_op.len(),
                val_op_pol: self.val_op_pol.len(),
                val_op_op: self.val_op_op.len(),
            },
        };
        let path = dir.join(DATA_MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(DATA_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DataManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut sets = Vec::with_capacity(4);
        for (file, task) in FILES {
            let p = dir.join(file);
            let (t, stats, samples) = read_shard(&p)?;
            if t != task || stats != m.stats {
                return Err(Error::format(&p, "shard disagrees with data.json"));
            }
            sets.push(samples);
        }
        let expected = [m.counts.train_op_pol, m.counts.train_op_op, m.counts.val_op_pol, m.counts.val_op_op];
        if sets.iter().map(Vec::len).ne(expected) {
            return Err(Error::format(&path, "sample counts disagree with shards"));
        }
        let mut it = sets.into_iter();
        let mut next = || it.next().expect("four sets");
        Ok(Self {
            train_op_pol: next(),
            train_op_op: next(),
            val_op_pol: next(),
            val_op_op: next(),
            stats: m.stats,
            plan: m.plan,
            options: m.options,
        })
    }
}
