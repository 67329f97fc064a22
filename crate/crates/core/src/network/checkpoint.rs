//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic  b"SDCK"          version u32
//! levels u32              channels u32 * levels
//! num_classes u32         d_max_fraction f64
//! height u32              width u32
//! records u32
//! record: name_len u16, name utf-8, dims u32 * 4, values f32 * numel,
//!         crc32 u32 over name, dims and values bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"SDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(reason: impl Into<String>) -> Error {
    Error::Checkpoint(reason.into())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| bad(format!("truncated file ({e})")))?;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.bytes(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.bytes(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.bytes(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn write_checkpoint<W: Write>(w: &mut W, params: &ModelParams) -> std::io::Result<()> {
    let cfg = params.config();
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(cfg.num_levels() as u32).to_le_bytes())?;
    for &c in &cfg.encoder_channels {
        w.write_all(&(c as u32).to_le_bytes())?;
    }
    w.write_all(&(cfg.num_classes as u32).to_le_bytes())?;
    w.write_all(&cfg.d_max_fraction.to_le_bytes())?;
    w.write_all(&(cfg.height as u32).to_le_bytes())?;
    w.write_all(&(cfg.width as u32).to_le_bytes())?;
    w.write_all(&(params.tensors().len() as u32).to_le_bytes())?;
    for (name, t) in params.named() {
        let mut rec = Vec::with_capacity(name.len() + 16 + 4 * t.numel());
        rec.extend_from_slice(name.as_bytes());
        for d in t.shape().0 {
            rec.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(&rec)?;
        w.write_all(&crc32fast::hash(&rec).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<ModelParams> {
    let mut c = Cursor { inner: r };
    if c.bytes(4)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let levels = c.u32()? as usize;
    if levels == 0 || levels > 16 {
        return Err(bad(format!("implausible level count {levels}")));
    }
    let mut encoder_channels = Vec::with_capacity(levels);
    for _ in 0..levels {
        encoder_channels.push(c.u32()? as usize);
    }
    let cfg = ModelConfig {
        encoder_channels,
        num_classes: c.u32()? as usize,
        d_max_fraction: c.f64()?,
        height: c.u32()? as usize,
        width: c.u32()? as usize,
    };
    cfg.validate()
        .map_err(|e| bad(format!("stored config: {e}")))?;
    let expected = super::layer_table(&cfg);
    let count = c.u32()? as usize;
    if count != 2 * expected.len() {
        return Err(bad(format!(
            "{count} records, config implies {}",
            2 * expected.len()
        )));
    }

    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let spec = &expected[i / 2];
        let (want_name, want_shape) = if i % 2 == 0 {
            (format!("{}.weight", spec.name), spec.weight_shape())
        } else {
            (format!("{}.bias", spec.name), spec.bias_shape())
        };
        let name_len = c.u16()? as usize;
        let name_bytes = c.bytes(name_len)?;
        let dims_bytes = c.bytes(16)?;
        let mut dims = [0usize; 4];
        for (k, d) in dims.iter_mut().enumerate() {
            *d = u32::from_le_bytes(dims_bytes[4 * k..4 * k + 4].try_into().expect("4 bytes"))
                as usize;
        }
        let shape = Shape(dims);
        let name = String::from_utf8_lossy(&name_bytes);
        if name != want_name || shape != want_shape {
            return Err(bad(format!(
                "record {i}: found {name} {shape}, expected {want_name} {want_shape}"
            )));
        }
        let values = c.bytes(4 * shape.numel())?;
        let stored = c.u32()?;
        let mut h = crc32fast::Hasher::new();
        h.update(&name_bytes);
        h.update(&dims_bytes);
        h.update(&values);
        if h.finalize() != stored {
            return Err(bad(format!("record {name}: checksum mismatch")));
        }
        let data = values
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::from_vec(shape, data)?);
    }
    let mut tail = [0u8; 1];
    if c.inner.read(&mut tail).map_err(|e| bad(e.to_string()))? != 0 {
        return Err(bad("trailing bytes after last record"));
    }
    ModelParams::from_tensors(cfg, tensors)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, params)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file)).map_err(|e| match e {
        Error::Checkpoint(reason) => Error::Checkpoint(format!("{}: {reason}", path.display())),
        other => other,
    })
}
