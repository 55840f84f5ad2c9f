//! Binary scene dataset.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "TRJK" | u32 version=1 | u32 C | u32 S | u32 T | u32 N
//! N × { u64 scene_id | u8 split_tag | C·S·S f32 raster | T·2 f32 future }
//! ```

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{SceneSample, SplitTag};

pub const DATASET_MAGIC: [u8; 4] = *b"TRJK";
pub const DATASET_VERSION: u32 = 1;
const HEADER_BYTES: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub channels: u32,
    pub size: u32,
    pub horizon: u32,
    pub count: u32,
}

impl DatasetHeader {
    pub fn record_bytes(&self) -> usize {
        let (c, s, t) = (self.channels as u128, self.size as u128, self.horizon as u128);
        usize::try_from(9 + 4 * c * s * s + 8 * t).unwrap_or(usize::MAX)
    }

    /// Saturates instead of overflowing on hostile headers.
    pub fn file_bytes(&self) -> usize {
        (self.count as usize).saturating_mul(self.record_bytes()).saturating_add(HEADER_BYTES)
    }
}

pub fn encode_dataset<W: Write>(samples: &[SceneSample], mut w: W) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Format("cannot write an empty dataset".into()))?;
    let shape = first.raster.shape().to_vec();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::shape("write_dataset", &shape, &[0, 0, 0]));
    }
    let horizon = first.future.len();
    let header = DatasetHeader {
        channels: shape[0] as u32,
        size: shape[1] as u32,
        horizon: horizon as u32,
        count: u32::try_from(samples.len()).map_err(|_| Error::Format("too many samples".into()))?,
    };
    w.write_all(&DATASET_MAGIC)?;
    for v in [DATASET_VERSION, header.channels, header.size, header.horizon, header.count] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(header.record_bytes());
    for s in samples {
        if s.raster.shape() != shape.as_slice() {
            return Err(Error::shape("write_dataset", &shape, s.raster.shape()));
        }
        if s.future.len() != horizon {
            return Err(Error::shape("write_dataset", &[horizon, 2], &[s.future.len(), 2]));
        }
        buf.clear();
        buf.extend_from_slice(&s.scene_id.to_le_bytes());
        buf.push(s.split.as_u8());
        for v in s.raster.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for p in &s.future {
            buf.extend_from_slice(&p[0].to_le_bytes());
            buf.extend_from_slice(&p[1].to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn decode_header(bytes: &[u8]) -> Result<DatasetHeader> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format(format!(
            "truncated header: {} of {HEADER_BYTES} bytes",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != DATASET_MAGIC {
        return Err(Error::Magic {
            found: magic,
            expected: DATASET_MAGIC,
        });
    }
    let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if u(0) != DATASET_VERSION {
        return Err(Error::Version {
            found: u(0),
            expected: DATASET_VERSION,
        });
    }
    let header = DatasetHeader {
        channels: u(1),
        size: u(2),
        horizon: u(3),
        count: u(4),
    };
    if header.channels == 0 || header.size == 0 || header.horizon == 0 {
        return Err(Error::Format(format!("degenerate header {header:?}")));
    }
    Ok(header)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SceneSample>> {
    let header = decode_header(bytes)?;
    let expected = header.file_bytes();
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{} dataset: expected {expected} bytes for {} records, found {}",
            if bytes.len() < expected { "truncated" } else { "oversized" },
            header.count,
            bytes.len()
        )));
    }
    let (c, s, t) = (header.channels as usize, header.size as usize, header.horizon as usize);
    let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let mut out = Vec::with_capacity(header.count as usize);
    let mut off = HEADER_BYTES;
    for _ in 0..header.count {
        let scene_id = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let split = SplitTag::from_u8(bytes[off + 8])?;
        off += 9;
        let raster: Vec<f32> = (0..c * s * s).map(|i| f32_at(off + 4 * i)).collect();
        off += 4 * c * s * s;
        let future = (0..t)
            .map(|i| [f32_at(off + 8 * i), f32_at(off + 8 * i + 4)])
            .collect();
        off += 8 * t;
        out.push(SceneSample {
            scene_id,
            split,
            raster: Tensor::new(&[c, s, s], raster)?,
            future,
        });
    }
    Ok(out)
}

pub fn write_dataset(samples: &[SceneSample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    encode_dataset(samples, BufWriter::new(file))
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneSample>> {
    decode_dataset(&std::fs::read(path)?)
}
