//! Lossless PNG image I/O and dataset directories.
//!
//! Reading maps 8-bit samples to `[0, 1]` via `v / 255`; writing inverts
//! with `round(v * 255)` after clamping, so `read(write(x))` equals the
//! 8-bit quantization of `x` exactly. Only 1-channel (grayscale) and
//! 3-channel (RGB) images are supported.
//!
//! A dataset directory is a set of PNG files plus a `manifest.json` mapping
//! each file to its label and echoing the generator spec.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Dataset, DatasetSpec};
use crate::tensor::Tensor;

/// Reads a PNG into a `[c, h, w]` tensor with entries in `[0, 1]`.
pub fn image_read(path: &Path) -> Result<Tensor> {
    let file = File::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| {
        Error::Image(format!("{}: output size overflow", path.display()))
    })?];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image(format!(
            "{}: only 8-bit PNGs supported",
            path.display()
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Image(format!(
                "{}: unsupported color type {other:?}",
                path.display()
            )))
        }
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = vec![0.0; channels * h * w];
    for i in 0..h {
        for j in 0..w {
            for c in 0..channels {
                data[(c * h + i) * w + j] =
                    buf[(i * w + j) * channels + c] as f64 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[channels, h, w], data)
}

/// Writes a `[c, h, w]` tensor as an 8-bit PNG (grayscale or RGB).
pub fn image_write(x: &Tensor, path: &Path) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    encode_png(x, BufWriter::new(file))
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Encodes an image to in-memory PNG bytes, for the remote vision backend.
pub fn image_to_png_bytes(x: &Tensor) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    encode_png(x, &mut bytes)?;
    Ok(bytes)
}

fn encode_png(x: &Tensor, sink: impl std::io::Write) -> Result<()> {
    if x.shape().len() != 3 {
        return Err(Error::Image(format!(
            "expected [c, h, w] tensor, got {:?}",
            x.shape()
        )));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        other => {
            return Err(Error::Image(format!(
                "unsupported channel count {other}"
            )))
        }
    };
    let mut buf = vec![0u8; c * h * w];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let v = (x.at3(ch, i, j).clamp(0.0, 1.0) * 255.0).round();
                buf[(i * w + j) * c + ch] = v as u8;
            }
        }
    }
    let mut encoder = png::Encoder::new(sink, w as u32, h as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Image(format!("png header: {e}")))?;
    writer
        .write_image_data(&buf)
        .map_err(|e| Error::Image(format!("png data: {e}")))?;
    Ok(())
}

/// 8-bit quantization of an image, the exact result of a write/read trip.
pub fn quantized(x: &Tensor) -> Tensor {
    x.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// One manifest row.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub label: u8,
}

/// `manifest.json` alongside the images of a dataset directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec: DatasetSpec,
    pub images: Vec<ManifestEntry>,
}

/// Writes every image as `img_NNNN.png` plus the manifest.
pub fn export_dataset(data: &Dataset, spec: &DatasetSpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(data.images.len());
    for (i, (img, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        let name = format!("img_{i:04}.png");
        image_write(img, &dir.join(&name))?;
        entries.push(ManifestEntry { file: name, label });
    }
    let manifest = DatasetManifest {
        version: 1,
        spec: spec.clone(),
        images: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Image(format!("manifest encode: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Loads a dataset directory written by [`export_dataset`]. Images come
/// back 8-bit quantized.
pub fn import_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest_path = dir.join("manifest.json");
    let json = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Image(format!("{}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&json)
        .map_err(|e| Error::Image(format!("{}: {e}", manifest_path.display())))?;
    let mut images = Vec::with_capacity(manifest.images.len());
    let mut labels = Vec::with_capacity(manifest.images.len());
    for entry in &manifest.images {
        images.push(image_read(&dir.join(&entry.file))?);
        labels.push(entry.label);
    }
    Ok((Dataset { images, labels }, manifest))
}

/// PNG files of a directory in lexicographic order.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
