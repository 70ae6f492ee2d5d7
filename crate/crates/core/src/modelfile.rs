//! Versioned binary model files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   4 bytes  b"ALM1"
//! version u16      currently 1
//! input   3 x u32  channels, height, width
//! layers  u32      layer count, then per layer:
//!   tag   u8       0 conv2d, 1 relu, 2 avg-pool, 3 flatten, 4 dense
//!   conv2d:   out_c, in_c, kh, kw, stride_h, stride_w (u32 each),
//!             then out_c*in_c*kh*kw weight f64, then out_c bias f64
//!   avg-pool: window_h, window_w (u32 each)
//!   dense:    out, in (u32 each), then out*in weight f64, then out bias f64
//! ```
//!
//! Parameter blobs are raw IEEE-754 bit patterns, so save/load round-trips
//! are exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Layer, LayerStack};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ALM1";
const VERSION: u16 = 1;

/// Writes a model to `path` in the binary format above.
pub fn save_model(model: &LayerStack, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for &d in model.input_shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(model.layers().len() as u32).to_le_bytes())?;
    for layer in model.layers() {
        match layer {
            Layer::Conv2d {
                weight,
                bias,
                stride,
            } => {
                w.write_all(&[0u8])?;
                for &d in weight.shape() {
                    w.write_all(&(d as u32).to_le_bytes())?;
                }
                w.write_all(&(stride.0 as u32).to_le_bytes())?;
                w.write_all(&(stride.1 as u32).to_le_bytes())?;
                write_f64s(&mut w, weight.data())?;
                write_f64s(&mut w, bias)?;
            }
            Layer::Relu => w.write_all(&[1u8])?,
            Layer::AvgPool { window } => {
                w.write_all(&[2u8])?;
                w.write_all(&(window.0 as u32).to_le_bytes())?;
                w.write_all(&(window.1 as u32).to_le_bytes())?;
            }
            Layer::Flatten => w.write_all(&[3u8])?,
            Layer::Dense { weight, bias } => {
                w.write_all(&[4u8])?;
                for &d in weight.shape() {
                    w.write_all(&(d as u32).to_le_bytes())?;
                }
                write_f64s(&mut w, weight.data())?;
                write_f64s(&mut w, bias)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a model written by [`save_model`], re-validating layer composition.
pub fn load_model(path: &Path) -> Result<LayerStack> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::ModelFile(format!(
            "bad magic {:02x?} in {}",
            magic,
            path.display()
        )));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(Error::ModelFile(format!(
            "unsupported version {version} in {}",
            path.display()
        )));
    }
    let input = [read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?];
    let n_layers = read_u32(&mut r)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let layer = match tag[0] {
            0 => {
                let shape = [
                    read_u32(&mut r)?,
                    read_u32(&mut r)?,
                    read_u32(&mut r)?,
                    read_u32(&mut r)?,
                ];
                let stride = (read_u32(&mut r)?, read_u32(&mut r)?);
                let weight = Tensor::from_vec(
                    &shape,
                    read_f64s(&mut r, shape.iter().product())?,
                )?;
                let bias = read_f64s(&mut r, shape[0])?;
                Layer::Conv2d {
                    weight,
                    bias,
                    stride,
                }
            }
            1 => Layer::Relu,
            2 => Layer::AvgPool {
                window: (read_u32(&mut r)?, read_u32(&mut r)?),
            },
            3 => Layer::Flatten,
            4 => {
                let shape = [read_u32(&mut r)?, read_u32(&mut r)?];
                let weight = Tensor::from_vec(
                    &shape,
                    read_f64s(&mut r, shape[0] * shape[1])?,
                )?;
                let bias = read_f64s(&mut r, shape[0])?;
                Layer::Dense { weight, bias }
            }
            t => {
                return Err(Error::ModelFile(format!(
                    "unknown layer tag {t} in {}",
                    path.display()
                )))
            }
        };
        layers.push(layer);
    }
    LayerStack::new(input, layers)
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf) as usize)
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}
