//! Model checkpoints: named 32-bit float arrays in a flat binary file.
//!
//! Layout: magic "PUPCKPT1", u32 array count; per array a u16 name length,
//! the UTF-8 name, u8 dtype (0 = f32), u8 ndim, ndim u32 extents, then the
//! payload little-endian. The model's template, switches, and step counter
//! travel as meta/ arrays so one file restores a runnable model.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::puppet::{BnState, Mode, Model, PuppetTemplate};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PUPCKPT1";
const DTYPE_F32: u8 = 0;

/// One named array with the byte offset of its header (0 when built in
/// memory rather than parsed).
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub tensor: Tensor,
    pub offset: usize,
}

/// Serializable view of a model: named arrays in writing order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
}

fn scalar_array(name: &str, value: f64) -> NamedArray {
    NamedArray {
        name: name.to_string(),
        tensor: Tensor::new(vec![1], vec![value]).expect("scalar"),
        offset: 0,
    }
}

impl Checkpoint {
    /// Snapshot every stored tensor plus metadata.
    pub fn from_model(model: &Model) -> Self {
        let t = &model.template;
        let mut arrays = vec![
            NamedArray {
                name: "meta/channels".to_string(),
                tensor: Tensor::new(
                    vec![t.channels.len()],
                    t.channels.iter().map(|c| *c as f64).collect(),
                )
                .expect("sizes agree"),
                offset: 0,
            },
            scalar_array("meta/kernel", t.kernel as f64),
            scalar_array("meta/num_classes", t.num_classes as f64),
            scalar_array("meta/in_channels", t.in_channels as f64),
            scalar_array("meta/mode", t.mode.code() as f64),
            scalar_array("meta/depth", model.depth as f64),
            scalar_array("meta/depth_adapt", model.depth_adapt as u8 as f64),
            scalar_array("meta/param_adapt", model.param_adapt as u8 as f64),
            scalar_array("meta/d_max", model.bn.d_max as f64),
            scalar_array("meta/step", model.step as f64),
        ];
        for (name, tensor) in model.param_entries() {
            arrays.push(NamedArray {
                name,
                tensor: tensor.clone(),
                offset: 0,
            });
        }
        for (s, stage) in model.bn.stages.iter().enumerate() {
            for (l, slot) in stage.iter().enumerate() {
                arrays.push(NamedArray {
                    name: format!("bn/stage{s}/slot{l}/mean"),
                    tensor: Tensor::new(vec![slot.mean.len()], slot.mean.clone())
                        .expect("sizes agree"),
                    offset: 0,
                });
                arrays.push(NamedArray {
                    name: format!("bn/stage{s}/slot{l}/var"),
                    tensor: Tensor::new(vec![slot.var.len()], slot.var.clone())
                        .expect("sizes agree"),
                    offset: 0,
                });
            }
        }
        Checkpoint { arrays }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for arr in &self.arrays {
            let name = arr.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(DTYPE_F32);
            out.push(arr.tensor.shape().len() as u8);
            for e in arr.tensor.shape() {
                out.extend_from_slice(&(*e as u32).to_le_bytes());
            }
            for v in arr.tensor.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor {
            path,
            bytes,
            pos: 0,
        };
        if cur.take(8)? != MAGIC {
            return Err(Error::format(path, 0, "bad checkpoint magic"));
        }
        let count = cur.read_u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let offset = cur.pos;
            let name_len = cur.read_u16()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::format(path, offset + 2, "array name is not UTF-8"))?;
            let dtype = cur.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::format(
                    path,
                    cur.pos - 1,
                    format!("unsupported dtype {dtype}"),
                ));
            }
            let ndim = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.read_u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = cur
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            arrays.push(NamedArray {
                name,
                tensor: Tensor::new(shape, data)
                    .map_err(|e| Error::format(path, offset, format!("bad array: {e}")))?,
                offset,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(
                path,
                cur.pos,
                format!(
                    "{} trailing bytes after the declared arrays",
                    bytes.len() - cur.pos
                ),
            ));
        }
        Ok(Checkpoint { arrays })
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                self.pos,
                format!(
                    "need {n} more bytes but only {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn read_u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn read_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, Checkpoint::from_model(model).to_bytes()).map_err(|e| Error::io(path, e))
}

fn read_scalar(map: &mut Vec<NamedArray>, path: &Path, name: &str) -> Result<(f64, usize)> {
    let idx = map
        .iter()
        .position(|a| a.name == name)
        .ok_or_else(|| Error::format(path, 0, format!("missing array '{name}'")))?;
    let arr = map.remove(idx);
    if arr.tensor.numel() != 1 {
        return Err(Error::format(
            path,
            arr.offset,
            format!("'{name}' must hold exactly one value"),
        ));
    }
    Ok((arr.tensor.data()[0], arr.offset))
}

fn read_usize(map: &mut Vec<NamedArray>, path: &Path, name: &str) -> Result<usize> {
    let (v, offset) = read_scalar(map, path, name)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::format(
            path,
            offset,
            format!("'{name}' must be a non-negative integer, got {v}"),
        ));
    }
    Ok(v as usize)
}

fn read_bool(map: &mut Vec<NamedArray>, path: &Path, name: &str) -> Result<bool> {
    match read_usize(map, path, name)? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(Error::format(
            path,
            0,
            format!("'{name}' must be 0 or 1, got {other}"),
        )),
    }
}

/// Rebuild a runnable model from a checkpoint file. Every array must be
/// consumed; unknown names are rejected like unknown config keys.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(path, &bytes)?;
    let mut arrays = ckpt.arrays;

    let channels_idx = arrays
        .iter()
        .position(|a| a.name == "meta/channels")
        .ok_or_else(|| Error::format(path, 0, "missing array 'meta/channels'"))?;
    let channels_arr = arrays.remove(channels_idx);
    let mut channels = Vec::with_capacity(channels_arr.tensor.numel());
    for v in channels_arr.tensor.data() {
        if *v < 1.0 || v.fract() != 0.0 {
            return Err(Error::format(
                path,
                channels_arr.offset,
                format!("channel counts must be positive integers, got {v}"),
            ));
        }
        channels.push(*v as usize);
    }
    let kernel = read_usize(&mut arrays, path, "meta/kernel")?;
    let num_classes = read_usize(&mut arrays, path, "meta/num_classes")?;
    let in_channels = read_usize(&mut arrays, path, "meta/in_channels")?;
    let (mode_code, mode_off) = read_scalar(&mut arrays, path, "meta/mode")?;
    let mode = Mode::from_code(mode_code as u8)
        .filter(|_| mode_code.fract() == 0.0 && (0.0..=255.0).contains(&mode_code))
        .ok_or_else(|| {
            Error::format(path, mode_off, format!("unknown mode code {mode_code}"))
        })?;
    let depth = read_usize(&mut arrays, path, "meta/depth")?;
    let depth_adapt = read_bool(&mut arrays, path, "meta/depth_adapt")?;
    let param_adapt = read_bool(&mut arrays, path, "meta/param_adapt")?;
    let d_max = read_usize(&mut arrays, path, "meta/d_max")?;
    let step = read_usize(&mut arrays, path, "meta/step")? as u64;

    let template = PuppetTemplate::new(channels, kernel, num_classes, in_channels, mode)
        .map_err(|e| Error::format(path, channels_arr.offset, format!("bad template: {e}")))?;
    let mut model = Model::new(template, depth, depth_adapt, param_adapt, d_max, 0)
        .map_err(|e| Error::format(path, 0, format!("bad model config: {e}")))?;
    model.step = step;

    for (name, tensor) in model.param_entries_mut() {
        let idx = arrays
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::format(path, 0, format!("missing array '{name}'")))?;
        let arr = arrays.remove(idx);
        if arr.tensor.shape() != tensor.shape() {
            return Err(Error::format(
                path,
                arr.offset,
                format!(
                    "'{name}' has shape {:?}, expected {:?}",
                    arr.tensor.shape(),
                    tensor.shape()
                ),
            ));
        }
        *tensor = arr.tensor;
    }
    let mut bn = BnState::init(&model.template, d_max);
    for (s, stage) in bn.stages.iter_mut().enumerate() {
        for (l, slot) in stage.iter_mut().enumerate() {
            for (field, dest) in [("mean", &mut slot.mean), ("var", &mut slot.var)] {
                let name = format!("bn/stage{s}/slot{l}/{field}");
                let idx = arrays
                    .iter()
                    .position(|a| a.name == name)
                    .ok_or_else(|| Error::format(path, 0, format!("missing array '{name}'")))?;
                let arr = arrays.remove(idx);
                if arr.tensor.numel() != dest.len() {
                    return Err(Error::format(
                        path,
                        arr.offset,
                        format!(
                            "'{name}' holds {} values, expected {}",
                            arr.tensor.numel(),
                            dest.len()
                        ),
                    ));
                }
                *dest = arr.tensor.data().to_vec();
            }
        }
    }
    model.bn = bn;
    if let Some(extra) = arrays.first() {
        return Err(Error::format(
            path,
            extra.offset,
            format!("unknown array '{}'", extra.name),
        ));
    }
    Ok(model)
}

/// The model as it would come back from disk: every stored value rounded
/// through 32-bit precision. Used to make logged validation metrics match
/// a later evaluation of the saved checkpoint exactly.
pub fn quantize_f32(model: &Model) -> Model {
    let mut out = model.clone();
    for (_, tensor) in out.param_entries_mut() {
        for v in tensor.data_mut() {
            *v = *v as f32 as f64;
        }
    }
    for stage in &mut out.bn.stages {
        for slot in stage {
            for v in slot.mean.iter_mut().chain(slot.var.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }
    out
}
