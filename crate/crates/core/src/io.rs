//! Binary dataset and checkpoint containers, little-endian throughout.
//!
//! Dataset (`NFMM-DS1`):
//!
//! ```text
//! magic[8] version:u32 case:u8 regime:u8 source_kind:u8 split:u8
//! k0:f64 resolution:u32 domain_side:f64 seed:u64 config_hash[32]
//! plane_count:u32 { name_len:u32 name[name_len] }*
//! input_count:u32 { plane:u32 }* target_count:u32 { plane:u32 }*
//! meta_count:u32 sample_count:u64 stride:u64
//! sample_count x { plane_count x resolution^2 x f32, meta_count x f32 }
//! ```
//!
//! Checkpoint (`NFMM-CK1`):
//!
//! ```text
//! magic[8] version:u32 config_len:u32 config_toml[config_len]
//! fingerprint[32] step:u64 epoch:u64 metric:f64
//! mean_count:u32 f64* std_count:u32 f64* output_scale:f64
//! adam_step:u64 weight_decay:f64 beta1:f64 beta2:f64 epsilon:f64
//! param_count:u32 { name_len:u32 name ndim:u32 dims:u64* data:f64* }*
//! { first_moment:f64* }* { second_moment:f64* }*
//! ```

use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::datagen::dataset::FORMAT_VERSION;
use crate::datagen::{Dataset, DatasetHeader, Record, Regime, SourceKind};
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::{Checkpoint, Normalizer, TrainConfig};

pub const DATASET_MAGIC: &[u8; 8] = b"NFMM-DS1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NFMM-CK1";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
    fn len_u32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }
    fn str(&mut self, s: &str) {
        self.len_u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: needed {n} bytes at offset {}, {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    /// Length prefix, bounded by the bytes left so corrupt input cannot
    /// trigger huge allocations.
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("length {n} at offset {} exceeds the file", self.pos - 4)));
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn check_magic(r: &mut Reader, magic: &[u8; 8], what: &str) -> Result<()> {
    let got = r.take(8).map_err(|_| Error::Format(format!("too short to be a {what}")))?;
    if got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(got),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let h = &ds.header;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(DATASET_MAGIC);
    w.u32(h.version);
    w.u8(h.case);
    w.u8(h.regime.code() as u8);
    w.u8(h.source_kind.code() as u8);
    w.u8(h.split);
    w.f64(h.k0);
    w.u32(h.resolution);
    w.f64(h.domain_side);
    w.u64(h.seed);
    w.0.extend_from_slice(&h.config_hash);
    w.len_u32(h.planes.len());
    for p in &h.planes {
        w.str(p);
    }
    for list in [&h.input_planes, &h.target_planes] {
        w.len_u32(list.len());
        for &i in list {
            w.len_u32(i);
        }
    }
    w.len_u32(h.meta_count);
    w.u64(ds.records.len() as u64);
    let npix = (h.resolution as usize).pow(2);
    w.u64(((h.planes.len() * npix + h.meta_count) * 4) as u64);
    for r in &ds.records {
        for plane in &r.planes {
            for &v in plane {
                w.0.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &v in &r.meta {
            w.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.0
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    check_magic(&mut r, DATASET_MAGIC, "dataset")?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}, expected {FORMAT_VERSION}")));
    }
    let case = r.u8()?;
    if !(1..=3).contains(&case) {
        return Err(Error::Format(format!("case {case} out of range")));
    }
    let regime = Regime::from_code(r.u8()? as u32).ok_or_else(|| Error::Format("unknown regime code".into()))?;
    let source_kind =
        SourceKind::from_code(r.u8()? as u32).ok_or_else(|| Error::Format("unknown source kind code".into()))?;
    let split = r.u8()?;
    let k0 = r.f64()?;
    let resolution = r.u32()?;
    if resolution == 0 || resolution > 1 << 12 {
        return Err(Error::Format(format!("resolution {resolution} out of range")));
    }
    let domain_side = r.f64()?;
    let seed = r.u64()?;
    let config_hash = r.arr::<32>()?;
    let plane_count = r.len(4)?;
    let planes = (0..plane_count).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let mut lists = [Vec::new(), Vec::new()];
    for list in &mut lists {
        let n = r.len(4)?;
        for _ in 0..n {
            let i = r.u32()? as usize;
            if i >= plane_count {
                return Err(Error::Format(format!("plane index {i} out of range")));
            }
            list.push(i);
        }
    }
    let [input_planes, target_planes] = lists;
    let meta_count = r.u32()? as usize;
    let count = r.u64()?;
    let stride = r.u64()?;
    let npix = (resolution as usize).pow(2);
    let expected = ((plane_count * npix + meta_count) * 4) as u64;
    if stride != expected {
        return Err(Error::Format(format!("record stride {stride}, layout implies {expected}")));
    }
    let remaining = (bytes.len() - r.pos) as u64;
    if count.checked_mul(stride) != Some(remaining) {
        return Err(Error::Format(format!(
            "header promises {count} records of {stride} bytes, file holds {remaining} bytes"
        )));
    }
    let f32s = |r: &mut Reader, n: usize| -> Result<Vec<f32>> {
        Ok(r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    };
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let planes = (0..plane_count).map(|_| f32s(&mut r, npix)).collect::<Result<Vec<_>>>()?;
        let meta = f32s(&mut r, meta_count)?;
        records.push(Record { planes, meta });
    }
    r.finish()?;
    Ok(Dataset {
        header: DatasetHeader {
            version,
            case,
            regime,
            source_kind,
            split,
            k0,
            resolution,
            domain_side,
            seed,
            config_hash,
            planes,
            input_planes,
            target_planes,
            meta_count,
        },
        records,
    })
}

/// SHA-256 of the encoded dataset.
pub fn dataset_fingerprint(ds: &Dataset) -> [u8; 32] {
    Sha256::digest(encode_dataset(ds)).into()
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&ck.config.to_toml());
    w.0.extend_from_slice(&ck.fingerprint);
    w.u64(ck.step);
    w.u64(ck.epoch);
    w.f64(ck.metric);
    for v in [&ck.normalizer.input_mean, &ck.normalizer.input_std] {
        w.len_u32(v.len());
        w.f64s(v);
    }
    w.f64(ck.normalizer.output_scale);
    let o = &ck.optimizer;
    w.u64(o.step);
    w.f64s(&[o.weight_decay, o.beta1, o.beta2, o.epsilon]);
    w.len_u32(ck.params.len());
    for (name, t) in ck.params.iter() {
        w.str(name);
        w.len_u32(t.shape().len());
        for &d in t.shape() {
            w.u64(d as u64);
        }
        w.f64s(t.data());
    }
    for m in o.first_moment.iter().chain(&o.second_moment) {
        w.f64s(m);
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    check_magic(&mut r, CHECKPOINT_MAGIC, "checkpoint")?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let config = TrainConfig::from_toml(&r.str()?).map_err(|e| Error::Incompatible(e.to_string()))?;
    let fingerprint = r.arr::<32>()?;
    let step = r.u64()?;
    let epoch = r.u64()?;
    let metric = r.f64()?;
    let n = r.len(8)?;
    let input_mean = r.f64s(n)?;
    let n = r.len(8)?;
    let input_std = r.f64s(n)?;
    let output_scale = r.f64()?;
    let adam_step = r.u64()?;
    let hyper = r.f64s(4)?;
    let count = r.len(1)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = r.str()?;
        if params.find(&name).is_some() {
            return Err(Error::Format(format!("parameter {name} appears twice")));
        }
        let ndim = r.len(8)?;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.filter(|&k| k.saturating_mul(8) <= bytes.len() - r.pos);
        let numel = numel.ok_or_else(|| Error::Format(format!("parameter {name} shape {shape:?} exceeds the file")))?;
        params.add(name, Tensor::new(shape, r.f64s(numel)?)?);
    }
    let mut moments = Vec::with_capacity(2 * count);
    for k in 0..2 * count {
        moments.push(r.f64s(params.get(k % count).numel())?);
    }
    r.finish()?;
    let second_moment = moments.split_off(count);
    let ck = Checkpoint {
        config,
        params,
        optimizer: OptimizerState {
            first_moment: moments,
            second_moment,
            step: adam_step,
            weight_decay: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            epsilon: hyper[3],
        },
        step,
        epoch,
        metric,
        normalizer: Normalizer {
            input_mean,
            input_std,
            output_scale,
        },
        fingerprint,
    };
    ck.model()?;
    Ok(ck)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Writes `bytes` to a temporary sibling and renames it over `path`, under
/// an exclusive lock on `path.lock`. A concurrent writer gets
/// `ErrorKind::WouldBlock`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let lock_path = sibling(path, ".lock");
    let lock = OpenOptions::new().create(true).truncate(false).write(true).open(&lock_path)?;
    match lock.try_lock() {
        Ok(()) => {}
        Err(TryLockError::WouldBlock) => {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::WouldBlock,
                format!("{} is locked by another writer", path.display()),
            )))
        }
        Err(TryLockError::Error(e)) => return Err(e.into()),
    }
    let tmp = sibling(path, &format!(".tmp.{}", std::process::id()));
    let result = (|| -> Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    let _ = fs::remove_file(&lock_path);
    drop(lock);
    result
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, &encode_dataset(ds))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
