//! `PYFL1` tensor container and the model/template/optimizer layouts stored in it.
//!
//! Layout (little-endian): magic `PYFL1\0`, version `u16`, count `u32`, then
//! per tensor a `u16`-prefixed UTF-8 name, dtype `u8` (0 = f32, 1 = f64),
//! ndim `u8`, `u32` dims and the raw payload; finally a CRC32 of every
//! preceding byte.

use std::path::Path;

use pyramidflow::flow::VnAxis;
use pyramidflow::model::{ModelConfig, NamedTensor, PyramidFlowModel};
use pyramidflow::pyramid::PyramidStack;
use pyramidflow::tensor::{Shape4, Tensor4};
use pyramidflow::train::{AdamConfig, LatentTemplate, OptimizerState};
use pyramidflow::Scalar;

use crate::error::{CliError, CliResult};
use crate::fsio::write_atomic;

pub const MAGIC: &[u8; 6] = b"PYFL1\0";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            Self::F32(_) => 0,
            Self::F64(_) => 1,
        }
    }

    /// Exact when the stored dtype is `T`; otherwise a checkpoint error.
    pub fn to_vec<T: Scalar>(&self) -> CliResult<Vec<T>> {
        if self.dtype() != T::DTYPE {
            return Err(bad(format!("expected {} tensor", T::NAME)));
        }
        Ok(match self {
            Self::F32(v) => v.iter().map(|&x| T::c(x as f64)).collect(),
            Self::F64(v) => v.iter().map(|&x| T::c(x)).collect(),
        })
    }

    fn from_scalars<T: Scalar>(data: &[T]) -> Self {
        if T::DTYPE == 0 {
            Self::F32(data.iter().map(|v| v.to_f64_lossy() as f32).collect())
        } else {
            Self::F64(data.iter().map(|v| v.to_f64_lossy()).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

pub fn encode(records: &[Record]) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {}", r.name)))?;
        if r.dims.iter().product::<usize>() != r.data.len() {
            return Err(bad(format!("{}: dims {:?} do not match {} values", r.name, r.dims, r.data.len())));
        }
        let ndim = u8::try_from(r.dims.len()).map_err(|_| bad(format!("{}: too many dims", r.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(r.data.dtype());
        out.push(ndim);
        for &d in &r.dims {
            let d = u32::try_from(d).map_err(|_| bad(format!("{}: dim {d} too large", r.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &r.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> CliResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> CliResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> CliResult<Vec<Record>> {
    if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
        return Err(bad("file too short"));
    }
    if &bytes[..6] != MAGIC {
        return Err(bad("bad magic"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(bad(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut c = Cursor { bytes: body, pos: 6 };
    let version = c.u16()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let dtype = c.u8()?;
        let ndim = c.u8()? as usize;
        let dims = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<CliResult<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("dims overflow"))?;
        let data = match dtype {
            0 => TensorData::F32(
                c.take(n.checked_mul(4).ok_or_else(|| bad("size overflow"))?)?
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect(),
            ),
            1 => TensorData::F64(
                c.take(n.checked_mul(8).ok_or_else(|| bad("size overflow"))?)?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            ),
            other => return Err(bad(format!("{name}: unknown dtype {other}"))),
        };
        records.push(Record { name, dims, data });
    }
    if c.pos != body.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(records)
}

pub fn save(path: &Path, records: &[Record]) -> CliResult<()> {
    write_atomic(path, &encode(records)?)
}

pub fn load(path: &Path) -> CliResult<Vec<Record>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        CliError::Checkpoint(m) => CliError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn find<'a>(records: &'a [Record], name: &str) -> CliResult<&'a Record> {
    records.iter().find(|r| r.name == name).ok_or_else(|| bad(format!("missing tensor {name:?}")))
}

fn record<T: Scalar>(t: &NamedTensor<T>) -> Record {
    Record {
        name: t.name.clone(),
        dims: t.dims.clone(),
        data: TensorData::from_scalars(&t.data),
    }
}

pub const META: &str = "meta.config";

fn vn_code(vn: Option<VnAxis>) -> f64 {
    match vn {
        None => 0.0,
        Some(VnAxis::Channel) => 1.0,
        Some(VnAxis::Spatial) => 2.0,
    }
}

/// Model configuration and stored precision (`f32`/`f64` dtype code).
pub fn read_meta(records: &[Record]) -> CliResult<(ModelConfig, u8)> {
    let meta = find(records, META)?.data.to_vec::<f64>()?;
    if meta.len() != 6 {
        return Err(bad("meta.config must hold 6 values"));
    }
    let as_usize = |v: f64, what: &str| -> CliResult<usize> {
        if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
            Ok(v as usize)
        } else {
            Err(bad(format!("bad {what} in meta.config")))
        }
    };
    let vn = match meta[4] as i64 {
        0 => None,
        1 => Some(VnAxis::Channel),
        2 => Some(VnAxis::Spatial),
        _ => return Err(bad("bad vn code in meta.config")),
    };
    let dtype = match meta[5] as i64 {
        0 => 0,
        1 => 1,
        _ => return Err(bad("bad precision in meta.config")),
    };
    Ok((
        ModelConfig {
            levels: as_usize(meta[0], "L")?,
            depth: as_usize(meta[1], "D")?,
            channels: as_usize(meta[2], "C")?,
            c_in: as_usize(meta[3], "c_in")?,
            vn,
            seed: 0,
        },
        dtype,
    ))
}

/// `meta.config`, the model state and optionally the optimizer moments.
pub fn model_records<T: Scalar>(model: &PyramidFlowModel<T>, opt: Option<&OptimizerState<T>>) -> Vec<Record> {
    let c = &model.config;
    let mut out = vec![Record {
        name: META.into(),
        dims: vec![6],
        data: TensorData::F64(vec![
            c.levels as f64,
            c.depth as f64,
            c.channels as f64,
            c.c_in as f64,
            vn_code(c.vn),
            T::DTYPE as f64,
        ]),
    }];
    out.extend(model.state().iter().map(record));
    if let Some(opt) = opt {
        out.extend(opt.to_tensors().iter().map(record));
    }
    out
}

fn named<T: Scalar>(records: &[Record], keep: impl Fn(&str) -> bool) -> CliResult<Vec<NamedTensor<T>>> {
    records
        .iter()
        .filter(|r| keep(&r.name))
        .map(|r| {
            Ok(NamedTensor {
                name: r.name.clone(),
                dims: r.dims.clone(),
                data: r.data.to_vec()?,
            })
        })
        .collect()
}

/// Rebuild a model (and optimizer state, if stored) from records. Any tensor
/// outside the documented inventory is rejected.
pub fn model_from_records<T: Scalar>(
    records: &[Record],
    adam: AdamConfig,
) -> CliResult<(PyramidFlowModel<T>, Option<OptimizerState<T>>)> {
    let (config, dtype) = read_meta(records)?;
    if dtype != T::DTYPE {
        return Err(bad(format!("checkpoint precision does not match {}", T::NAME)));
    }
    let mut model = PyramidFlowModel::<T>::build(config)?;
    let state = named::<T>(records, |n| n != META && !n.starts_with("opt."))?;
    model.load_state(&state).map_err(|e| bad(e.to_string()))?;
    let opt_tensors = named::<T>(records, |n| n.starts_with("opt."))?;
    let opt = if opt_tensors.is_empty() {
        None
    } else {
        Some(OptimizerState::from_tensors(adam, &opt_tensors)?)
    };
    Ok((model, opt))
}

/// `template.count` then `template.level{d}`.
pub fn template_records<T: Scalar>(t: &LatentTemplate<T>) -> Vec<Record> {
    let mut out = vec![Record {
        name: "template.count".into(),
        dims: vec![1],
        data: TensorData::F64(vec![t.sample_count as f64]),
    }];
    for (d, level) in t.means.levels().iter().enumerate() {
        out.push(Record {
            name: format!("template.level{d}"),
            dims: level.shape().as_array().to_vec(),
            data: TensorData::from_scalars(level.data()),
        });
    }
    out
}

pub fn template_from_records<T: Scalar>(records: &[Record]) -> CliResult<LatentTemplate<T>> {
    let count = find(records, "template.count")?.data.to_vec::<f64>()?;
    let sample_count = count.first().copied().unwrap_or(0.0) as usize;
    if sample_count == 0 {
        return Err(bad("template has no samples"));
    }
    let mut levels = Vec::new();
    while let Ok(r) = find(records, &format!("template.level{}", levels.len())) {
        let dims: [usize; 4] = r.dims.as_slice().try_into().map_err(|_| bad(format!("{} must be 4-d", r.name)))?;
        levels.push(Tensor4::from_vec(Shape4::new(dims[0], dims[1], dims[2], dims[3]), r.data.to_vec()?)?);
    }
    if levels.is_empty() || records.len() != levels.len() + 1 {
        return Err(bad("template levels are missing or interleaved with unknown tensors"));
    }
    Ok(LatentTemplate {
        means: PyramidStack::new(levels)?,
        sample_count,
    })
}
