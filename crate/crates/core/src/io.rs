//! On-disk formats: the tensor container used for weights and raw image
//! sidecars, PNG frames, and the dataset manifest.
//!
//! Tensor container layout (all integers little-endian):
//!
//! ```text
//! "NTWT" | version u8 = 1 | repeated until EOF:
//!     name_len u16 | name (UTF-8) | dtype u8 | rank u8 | dims u32 × rank | data
//! ```
//!
//! dtype 1 is f32, 2 is f64. Tensors appear in ascending name order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::preprocess::{NormalizationConfig, TipPosition};
use crate::simulate::{Dataset, OpticsConfig, SampleRecord};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"NTWT";
pub const FORMAT_VERSION: u8 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const RAW_TENSOR_NAME: &str = "image";

pub fn encode_tensors<T: Element>(params: &ParameterSet<T>) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::with_capacity(5 + params.param_count() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    for (name, tensor) in params.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| format!("name `{name}` too long"))?;
        let rank = u8::try_from(tensor.rank()).map_err(|_| format!("`{name}` rank too large"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        out.push(rank);
        for &d in tensor.shape() {
            let d = u32::try_from(d).map_err(|_| format!("`{name}` dimension {d} too large"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match T::DTYPE {
            DType::F32 => tensor
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes())),
            DType::F64 => tensor
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.as_f64().to_le_bytes())),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated while reading {what} at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, String> {
        Ok(self.take(1, what)?[0])
    }
}

/// Decodes a tensor container, converting every tensor to `T`.
pub fn decode_tensors<T: Element>(bytes: &[u8]) -> std::result::Result<ParameterSet<T>, String> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err("bad magic, not a NTWT file".into());
    }
    let version = cur.u8("version")?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let mut params = ParameterSet::new();
    let mut last: Option<String> = None;
    while cur.pos < bytes.len() {
        let name_len = u16::from_le_bytes(cur.take(2, "name length")?.try_into().unwrap());
        let name = std::str::from_utf8(cur.take(name_len as usize, "name")?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        if last.as_ref().is_some_and(|prev| *prev >= name) {
            return Err(format!("tensor `{name}` is out of order or duplicated"));
        }
        let code = cur.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| format!("`{name}`: unknown dtype {code}"))?;
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u32::from_le_bytes(cur.take(4, "dimension")?.try_into().unwrap());
            shape.push(d as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format!("`{name}`: shape {shape:?} overflows"))?;
        let raw = cur.take(
            count.checked_mul(dtype.size()).ok_or("size overflow")?,
            "tensor data",
        )?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        let tensor = Tensor::new(shape, data).map_err(|e| format!("`{name}`: {e}"))?;
        params.insert(name.clone(), tensor);
        last = Some(name);
    }
    Ok(params)
}

pub fn save_tensors<T: Element>(path: &Path, params: &ParameterSet<T>) -> Result<()> {
    let bytes = encode_tensors(params).map_err(|m| Error::format(path, m))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensors<T: Element>(path: &Path) -> Result<ParameterSet<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes).map_err(|m| Error::format(path, m))
}

// ---------------------------------------------------------------------------
// PNG frames
// ---------------------------------------------------------------------------

/// Writes a `[1, H, W]` or `[H, W]` count image as grayscale PNG: 8-bit when
/// `max_count <= 255`, 16-bit otherwise.
pub fn write_png(path: &Path, image: &Tensor<f32>, max_count: f64) -> Result<()> {
    let (h, w) = match *image.shape() {
        [1, h, w] | [h, w] => (h, w),
        _ => {
            return Err(Error::format(
                path,
                format!("expected a single-plane image, got {:?}", image.shape()),
            ))
        }
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    let (depth, bytes) = if max_count <= 255.0 {
        let data = image.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
        (png::BitDepth::Eight, data)
    } else {
        let data = image
            .data()
            .iter()
            .flat_map(|&v| (v.round().clamp(0.0, 65535.0) as u16).to_be_bytes())
            .collect::<Vec<u8>>();
        (png::BitDepth::Sixteen, data)
    };
    enc.set_depth(depth);
    let png_err = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads a grayscale or RGB PNG into `[C, H, W]` counts (C = 1 or 3).
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let png_err = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let samples: Vec<f32> = match info.bit_depth {
        png::BitDepth::Eight => buf[..info.buffer_size()].iter().map(|&b| b as f32).collect(),
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32)
            .collect(),
        other => return Err(Error::format(path, format!("unsupported bit depth {other:?}"))),
    };
    let (channels, stride) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (1, 2),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (3, 4),
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    // interleaved → planar, alpha dropped
    let mut planar = vec![0.0f32; channels * h * w];
    for (i, px) in samples.chunks_exact(stride).enumerate() {
        for c in 0..channels {
            planar[c * h * w + i] = px[c];
        }
    }
    Tensor::new(vec![channels, h, w], planar).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_raw_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let mut set = ParameterSet::new();
    set.insert(RAW_TENSOR_NAME, image.clone());
    save_tensors(path, &set)
}

pub fn read_raw_image(path: &Path) -> Result<Tensor<f32>> {
    let mut set = load_tensors::<f32>(path)?;
    if set.len() != 1 {
        return Err(Error::format(path, "raw image file must hold exactly one tensor"));
    }
    set.remove(RAW_TENSOR_NAME)
        .ok_or_else(|| Error::format(path, format!("missing tensor `{RAW_TENSOR_NAME}`")))
}

// ---------------------------------------------------------------------------
// Dataset directory
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    /// Tip position in cm.
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub count: usize,
    pub optics: OpticsConfig,
    pub normalization: NormalizationConfig,
    pub records: Vec<ManifestRecord>,
}

fn image_name(i: usize) -> String {
    format!("img_{i:05}.png")
}

fn raw_name(i: usize) -> String {
    format!("img_{i:05}.ntwt")
}

pub fn write_dataset(dir: &Path, dataset: &Dataset, raw_sidecar: bool) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(dataset.records.len());
    for (i, rec) in dataset.records.iter().enumerate() {
        let image = image_name(i);
        write_png(&dir.join(&image), &rec.image, dataset.optics.max_count)?;
        let raw = if raw_sidecar {
            let name = raw_name(i);
            write_raw_image(&dir.join(&name), &rec.image)?;
            Some(name)
        } else {
            None
        };
        let TipPosition { x, y, z } = rec.ground_truth;
        records.push(ManifestRecord { image, raw, x, y, z });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        count: records.len(),
        optics: dataset.optics.clone(),
        normalization: dataset.normalization.clone(),
        records,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = read_json(&path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    if manifest.count != manifest.records.len() {
        return Err(Error::format(
            &path,
            format!(
                "count is {} but {} records are listed",
                manifest.count,
                manifest.records.len()
            ),
        ));
    }
    manifest
        .optics
        .validate()
        .and_then(|_| manifest.normalization.validate())
        .map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(manifest)
}

/// Loads a dataset directory, preferring raw sidecars over PNGs when listed.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let side = manifest.optics.image_side;
    let mut records = Vec::with_capacity(manifest.count);
    for rec in &manifest.records {
        let path: PathBuf = dir.join(rec.raw.as_ref().unwrap_or(&rec.image));
        let image = if rec.raw.is_some() {
            read_raw_image(&path)?
        } else {
            read_png(&path)?
        };
        let image = match *image.shape() {
            [1, h, w] | [h, w] if h == side && w == side => {
                image.reshape(vec![1, side, side]).expect("same element count")
            }
            _ => {
                return Err(Error::format(
                    &path,
                    format!("expected a {side}x{side} grayscale frame, got {:?}", image.shape()),
                ))
            }
        };
        records.push(SampleRecord {
            image,
            ground_truth: TipPosition::new(rec.x, rec.y, rec.z),
        });
    }
    Ok(Dataset {
        optics: manifest.optics,
        normalization: manifest.normalization,
        records,
    })
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))
}
