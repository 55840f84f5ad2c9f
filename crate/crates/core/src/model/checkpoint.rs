//! Binary model checkpoint.
//!
//! Layout, little-endian:
//!
//! ```text
//! "TJKW" | u32 version=1
//! u8 backbone | u8 attention | u8 head | u32 K | u32 S | u32 C
//! u32 base_width | u32 window | u32 heads | f64 output_scale | f64 λ_nll | f64 λ_ade | f64 λ_fde
//! tensors: { u16 name_len | name | u8 rank | rank × u32 extent | f32 data }*
//! u32 CRC-32 of all preceding bytes
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::{BackbonePreset, HeadKind, LossWeights, ModelConfig};
use super::Model;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TJKW";
pub const CHECKPOINT_VERSION: u32 = 1;

fn u32_field(name: &str, v: usize) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("{name} {v} does not fit in u32")))
}

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let c = &model.cfg;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&[c.backbone.id(), c.attention as u8, c.head.id()]);
    for (name, v) in [
        ("hidden", c.hidden),
        ("raster_size", c.raster_size),
        ("channels", c.channels),
        ("base_width", c.base_width),
        ("window", c.window),
        ("heads", c.heads),
    ] {
        out.extend_from_slice(&u32_field(name, v)?);
    }
    for v in [c.output_scale, c.loss.nll, c.loss.ade, c.loss.fde] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in model.params.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {}", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.value.rank() as u8);
        for &e in p.value.shape() {
            out.extend_from_slice(&u32_field("extent", e)?);
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated checkpoint while reading {what}")));
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

    fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!("truncated checkpoint: {} bytes", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Magic {
            found: magic,
            expected: CHECKPOINT_MAGIC,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Format("truncated checkpoint: missing checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
    }

    let mut r = Reader { bytes: body, pos: 8 };
    let backbone = BackbonePreset::from_id(r.u8("backbone")?)?;
    let attention = match r.u8("attention")? {
        0 => false,
        1 => true,
        v => return Err(Error::Format(format!("bad attention flag {v}"))),
    };
    let head = HeadKind::from_id(r.u8("head")?)?;
    let cfg = ModelConfig {
        backbone,
        attention,
        head,
        hidden: r.usize("hidden")?,
        raster_size: r.usize("raster_size")?,
        channels: r.usize("channels")?,
        base_width: r.usize("base_width")?,
        window: r.usize("window")?,
        heads: r.usize("heads")?,
        output_scale: r.f64("output_scale")?,
        loss: LossWeights {
            nll: r.f64("lambda_nll")?,
            ade: r.f64("lambda_ade")?,
            fde: r.f64("lambda_fde")?,
        },
    };
    cfg.validate().map_err(|e| Error::Format(format!("invalid stored config: {e}")))?;

    let mut named = Vec::new();
    while r.pos < body.len() {
        let len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.usize("extent")).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let numel = numel
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= body.len()))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` extents {shape:?} exceed file size")))?;
        let raw = r.take(4 * numel, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        named.push((name, t));
    }

    let mut model = Model::new(cfg, 0)?;
    model.params.load(named).map_err(|e| match e {
        Error::Shape { lhs, rhs, .. } => Error::Format(format!("tensor shape {rhs:?} does not match architecture {lhs:?}")),
        e => e,
    })?;
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}
