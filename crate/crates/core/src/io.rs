//! Binary tensor files, model checkpoints and PGM/PPM images.
//!
//! Tensor record: `TEA1`, u8 dtype tag (0 = f32, 1 = f64), u8 rank,
//! little-endian u32 dims, little-endian payload.
//!
//! Checkpoint: `TEAC`, then a length-prefixed (u32) config text, a
//! length-prefixed manifest with one `name<TAB>dtype<TAB>d0,d1,..` line per
//! tensor, and the tensor records in manifest order.

use std::fs;
use std::path::Path;

use crate::error::{Result, TeaError};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"TEA1";
const CHECKPOINT_MAGIC: &[u8; 4] = b"TEAC";

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TeaError::Format(msg.into()))
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return fmt_err(format!("rank {} too large", t.rank()));
    }
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::DTYPE.tag());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| TeaError::Format(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return fmt_err(format!("truncated {what} at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| TeaError::Format(format!("{what} is not UTF-8")))
    }

    /// One tensor record, converted to `T`; also returns the stored dtype.
    fn tensor<T: Scalar>(&mut self) -> Result<(Tensor<T>, DType)> {
        if self.take(4, "magic")? != TENSOR_MAGIC {
            return fmt_err("bad tensor magic (expected TEA1)");
        }
        let head = self.take(2, "header")?;
        let dtype = DType::from_tag(head[0]).ok_or_else(|| TeaError::Format(format!("unknown dtype tag {}", head[0])))?;
        let rank = head[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("dims")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(bytes) = n.and_then(|n| n.checked_mul(dtype.size())) else {
            return fmt_err(format!("shape {shape:?} overflows"));
        };
        let payload = self.take(bytes, "payload")?;
        let data = match dtype {
            DType::F32 => payload.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => payload.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        Ok((Tensor::new(shape, data)?, dtype))
    }
}

/// Decodes one tensor record that must span all of `bytes`.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader { bytes, pos: 0 };
    let (t, _) = r.tensor()?;
    if r.pos != bytes.len() {
        return fmt_err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(t)
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut out = Vec::new();
    encode_tensor(t, &mut out)?;
    fs::write(path, out)?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_tensor(&fs::read(path)?)
}

/// Manifest line for one parameter.
fn manifest_line(name: &str, dtype: DType, shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("{name}\t{}\t{}\n", dtype.name(), dims.join(","))
}

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    let push_text = |out: &mut Vec<u8>, s: &str| {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    };
    push_text(&mut out, &model.cfg.to_kv());
    let manifest: String = model
        .params
        .iter()
        .map(|(n, t)| manifest_line(n, T::DTYPE, t.shape()))
        .collect();
    push_text(&mut out, &manifest);
    for (_, t) in model.params.iter() {
        encode_tensor(t, &mut out)?;
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return fmt_err("bad checkpoint magic (expected TEAC)");
    }
    let cfg = ModelConfig::from_kv(r.text("config")?)?;
    let manifest = r.text("manifest")?;
    let mut params = ParamStore::new();
    for line in manifest.lines() {
        let parts: Vec<&str> = line.split('\t').collect();
        let [name, dtype, dims] = parts[..] else {
            return fmt_err(format!("bad manifest line {line:?}"));
        };
        let want_dtype = DType::parse(dtype).ok_or_else(|| TeaError::Format(format!("unknown dtype {dtype:?}")))?;
        let shape: Vec<usize> = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',')
                .map(|d| d.parse().map_err(|_| TeaError::Format(format!("bad dims {dims:?}"))))
                .collect::<Result<_>>()?
        };
        let (t, got_dtype) = r.tensor::<T>()?;
        if got_dtype != want_dtype || t.shape() != shape.as_slice() {
            return fmt_err(format!("record for {name} does not match its manifest entry"));
        }
        params.insert(name, t)?;
    }
    if r.pos != bytes.len() {
        return fmt_err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Model::from_parts(cfg, params)
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &Model<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Parses a binary PGM (`P5`, one channel) or PPM (`P6`, three channels)
/// into `[H, W, C]` with values scaled to `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return fmt_err("not a binary PGM/PPM (expected P5 or P6)"),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return fmt_err("truncated image header"),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TeaError::Format(format!("bad image header field at byte {start}")))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return fmt_err(format!("bad image header {w}x{h} maxval {maxval}"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return fmt_err("missing whitespace after image header");
    }
    pos += 1;
    let width = if maxval > 255 { 2 } else { 1 };
    let n = h * w * channels;
    let payload = bytes.get(pos..pos + n * width).ok_or_else(|| TeaError::Format("truncated image data".into()))?;
    let scale = 1.0 / maxval as f64;
    let data = if width == 1 {
        payload.iter().map(|&b| b as f64 * scale).collect()
    } else {
        payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale).collect()
    };
    Tensor::new(vec![h, w, channels], data)
}

/// Encodes `[H, W, 1]` as PGM or `[H, W, 3]` as PPM with 8-bit samples;
/// values are clamped to `[0, 1]`.
pub fn encode_pnm(img: &Tensor<f64>) -> Result<Vec<u8>> {
    let (h, w, c) = img.dims3("encode_pnm")?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return fmt_err(format!("{c} channels cannot be written as PGM/PPM")),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    decode_pnm(&fs::read(path)?)
}

pub fn write_pnm(path: impl AsRef<Path>, img: &Tensor<f64>) -> Result<()> {
    fs::write(path, encode_pnm(img)?)?;
    Ok(())
}
