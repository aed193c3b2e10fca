//! Weight file format (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "A2C2NN\0\0"
//! 8       2     version (u16) = 1
//! 10      4     layer count L (u32)
//! 14      9·L   per layer: fan_in u32, fan_out u32, has_norm u8
//! ...           per layer, in order: weight (fan_in·fan_out f32, row-major
//!               fan_in × fan_out), bias (fan_out f32), and when has_norm:
//!               gain (fan_out f32), shift (fan_out f32)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::mlp::{Dense, LayerNorm, MlpWeights};
use crate::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"A2C2NN\0\0";
pub const WEIGHTS_VERSION: u16 = 1;

pub fn write_weights_to<W: Write>(w: &MlpWeights, out: &mut W) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * w.num_params());
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(w.layers().len() as u32).to_le_bytes());
    for l in w.layers() {
        buf.extend_from_slice(&(l.fan_in as u32).to_le_bytes());
        buf.extend_from_slice(&(l.fan_out as u32).to_le_bytes());
        buf.push(l.norm.is_some() as u8);
    }
    for p in w.params() {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_weights_from<R: Read>(input: &mut R) -> Result<MlpWeights> {
    const CTX: &str = "weight file";
    let mut head = [0u8; 14];
    read_exact(input, &mut head, 0, CTX)?;
    if &head[..8] != WEIGHTS_MAGIC {
        return Err(Error::format(CTX, "bad magic"));
    }
    let version = u16::from_le_bytes([head[8], head[9]]);
    if version != WEIGHTS_VERSION {
        return Err(Error::format(CTX, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(head[10..14].try_into().unwrap()) as usize;
    if count == 0 || count > 1 << 16 {
        return Err(Error::format(CTX, format!("implausible layer count {count}")));
    }
    let mut dims = vec![0u8; 9 * count];
    read_exact(input, &mut dims, 14, CTX)?;
    let mut layers = Vec::with_capacity(count);
    let mut offset = 14 + dims.len() as u64;
    for c in dims.chunks_exact(9) {
        let fan_in = u32::from_le_bytes(c[0..4].try_into().unwrap()) as usize;
        let fan_out = u32::from_le_bytes(c[4..8].try_into().unwrap()) as usize;
        let has_norm = c[8] != 0;
        let mut take = |n: usize| -> Result<Vec<f32>> {
            let mut raw = vec![0u8; n * 4];
            read_exact(input, &mut raw, offset, CTX)?;
            offset += raw.len() as u64;
            Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
        };
        let weight = take(fan_in * fan_out)?;
        let bias = take(fan_out)?;
        let norm = if has_norm {
            Some(LayerNorm {
                gain: take(fan_out)?,
                shift: take(fan_out)?,
            })
        } else {
            None
        };
        layers.push(Dense {
            fan_in,
            fan_out,
            weight,
            bias,
            norm,
        });
    }
    MlpWeights::from_layers(layers)
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], offset: u64, context: &'static str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Truncated {
                    context,
                    expected: offset + buf.len() as u64,
                    actual: offset + filled as u64,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub fn write_weights(w: &MlpWeights, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_weights_to(w, &mut f).map_err(|e| match e {
        Error::Stream(io) => Error::io(path, io),
        other => other,
    })
}

pub fn read_weights(path: &Path) -> Result<MlpWeights> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_weights_from(&mut std::io::BufReader::new(&mut f))
}
