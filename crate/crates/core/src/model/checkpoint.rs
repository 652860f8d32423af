//! Model checkpoint container.
//!
//! ```text
//! magic "DCMK" | u32 version | u32 L | L x u32 widths | P x f64 parameters
//! ```
//!
//! `widths` lists the generator widths (input, hidden..., feature) followed by
//! the class count. Parameters follow [`Model::to_flat`] order. Little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{Dense, Model};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DCMK";

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let mut widths: Vec<u32> = vec![model.input_dim() as u32];
    widths.extend(model.generator.iter().map(|l| l.fan_out as u32));
    widths.push(model.num_classes() as u32);

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for w in &widths {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    for v in model.to_flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    write_atomic(path.as_ref(), &buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let u32_at = |off: usize, what: &str| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::format(off as u64, format!("unexpected end of file reading {what}")))
    };
    if bytes.get(..4) != Some(MAGIC) {
        return Err(Error::format(0, "bad magic, not a checkpoint"));
    }
    let version = u32_at(4, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = u32_at(8, "width count")? as usize;
    if !(3..=64).contains(&count) {
        return Err(Error::format(8, format!("implausible width count {count}")));
    }
    let mut widths = Vec::with_capacity(count);
    for i in 0..count {
        let w = u32_at(12 + 4 * i, "width")? as usize;
        if w == 0 {
            return Err(Error::format((12 + 4 * i) as u64, "zero width"));
        }
        widths.push(w);
    }
    let classes = widths.pop().unwrap();
    let generator: Vec<Dense> = widths.windows(2).map(|p| Dense::zeros(p[0], p[1])).collect();
    let feature = *widths.last().unwrap();
    let mut model = Model {
        generator,
        head_s: Dense::zeros(feature, classes),
        head_t: Dense::zeros(feature, classes),
    };

    let start = 12 + 4 * count;
    let expected = model.parameter_count() * 8;
    let body = &bytes[start.min(bytes.len())..];
    if body.len() != expected {
        return Err(Error::format(
            (start + body.len().min(expected)) as u64,
            format!("parameter block is {} bytes, expected {expected}", body.len()),
        ));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    model.set_flat(&values)?;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
