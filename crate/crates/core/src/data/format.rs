//! Binary dataset container.
//!
//! ```text
//! magic    8 bytes  "UVFDATA\0"
//! version  u32
//! spec     7 x u32: canvas, min_count, max_count, min_size, max_size, margin, text_len
//! count    u64
//! records  count x fixed stride:
//!            pixels  3*S*S f32
//!            tokens  text_len u32
//!            truth   u8 object count, then max_count slots of
//!                    (u8 shape, u8 color, u16 x, u16 y, u16 size)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::scene::{CaptionedImage, Color, GroundTruth, SceneObject, SceneSpec, ShapeKind, CHANNELS};

pub const MAGIC: &[u8; 8] = b"UVFDATA\0";
pub const VERSION: u32 = 1;

const SLOT: usize = 8;
const PREAMBLE: usize = 8 + 4 + 7 * 4 + 8;

fn stride(spec: &SceneSpec) -> usize {
    spec.pixels_per_image() * 4 + spec.text_len * 4 + 1 + spec.max_count * SLOT
}

pub fn to_bytes(spec: &SceneSpec, data: &[CaptionedImage]) -> Result<Vec<u8>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(PREAMBLE + data.len() * stride(spec));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        spec.canvas,
        spec.min_count,
        spec.max_count,
        spec.min_size,
        spec.max_size,
        spec.margin,
        spec.text_len,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for (i, rec) in data.iter().enumerate() {
        let bad = |what: &str| Error::Data(format!("record {i}: {what} does not fit the spec"));
        if rec.pixels.shape() != [CHANNELS, spec.canvas, spec.canvas] {
            return Err(bad("pixel shape"));
        }
        if rec.tokens.len() != spec.text_len {
            return Err(bad("token length"));
        }
        if rec.truth.objects.len() > spec.max_count {
            return Err(bad("object count"));
        }
        for v in rec.pixels.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in &rec.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.push(rec.truth.objects.len() as u8);
        for slot in 0..spec.max_count {
            match rec.truth.objects.get(slot) {
                Some(o) => {
                    out.push(o.shape.code());
                    out.push(o.color.code());
                    for v in [o.x, o.y, o.size] {
                        out.extend_from_slice(&(v as u16).to_le_bytes());
                    }
                }
                None => out.extend_from_slice(&[0u8; SLOT]),
            }
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
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("file truncated while reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn fail<T>(&self, at: usize, message: String) -> Result<T> {
        Err(Error::Format {
            offset: at as u64,
            message,
        })
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(SceneSpec, Vec<CaptionedImage>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return r.fail(0, "bad magic bytes".into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return r.fail(8, format!("unsupported dataset version {version}"));
    }
    let mut field = |name: &str| r.u32(name).map(|v| v as usize);
    let spec = SceneSpec {
        canvas: field("canvas")?,
        min_count: field("min_count")?,
        max_count: field("max_count")?,
        min_size: field("min_size")?,
        max_size: field("max_size")?,
        margin: field("margin")?,
        text_len: field("text_len")?,
    };
    spec.validate().map_err(|e| Error::Format {
        offset: 12,
        message: format!("invalid spec block: {e}"),
    })?;
    let count = r.u64("record count")? as usize;
    let need = stride(&spec)
        .checked_mul(count)
        .and_then(|n| n.checked_add(PREAMBLE));
    match need {
        Some(n) if n == bytes.len() => {}
        Some(n) if n > bytes.len() => {
            return r.fail(
                bytes.len(),
                format!("file truncated: {count} records need {n} bytes, found {}", bytes.len()),
            )
        }
        _ => return r.fail(PREAMBLE, format!("{count} records do not match the file size")),
    }

    let n_px = spec.pixels_per_image();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = r.pos;
        let px: Vec<f32> = r
            .take(n_px * 4, "pixels")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tokens = (0..spec.text_len)
            .map(|_| r.u32("tokens"))
            .collect::<Result<Vec<u32>>>()?;
        let n_obj = r.u8("object count")? as usize;
        if n_obj > spec.max_count {
            return r.fail(r.pos - 1, format!("record {i} claims {n_obj} objects"));
        }
        let mut objects = Vec::with_capacity(n_obj);
        for slot in 0..spec.max_count {
            let at = r.pos;
            let (s, c) = (r.u8("shape")?, r.u8("color")?);
            let (x, y, size) = (r.u16("x")?, r.u16("y")?, r.u16("size")?);
            if slot >= n_obj {
                continue;
            }
            let (Some(shape), Some(color)) = (ShapeKind::from_code(s), Color::from_code(c)) else {
                return r.fail(at, format!("record {i} has bad shape/color codes {s}/{c}"));
            };
            objects.push(SceneObject {
                shape,
                color,
                x: x as usize,
                y: y as usize,
                size: size as usize,
            });
        }
        let pixels = Tensor::new(vec![CHANNELS, spec.canvas, spec.canvas], px).map_err(|e| {
            Error::Format {
                offset: start as u64,
                message: e.to_string(),
            }
        })?;
        out.push(CaptionedImage {
            pixels,
            tokens,
            truth: GroundTruth { objects },
        });
    }
    Ok((spec, out))
}

pub fn save_dataset(path: &Path, spec: &SceneSpec, data: &[CaptionedImage]) -> Result<()> {
    let bytes = to_bytes(spec, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<(SceneSpec, Vec<CaptionedImage>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
