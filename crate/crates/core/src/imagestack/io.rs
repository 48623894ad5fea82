//! Raster and float-array persistence.
//!
//! Float arrays use a small self-describing container: one ASCII header
//! line `PFAF1 <ndim> <d0> ... <dn-1> <f32|f64> LE` terminated by `\n`,
//! followed by the row-major little-endian payload.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{convert_range, ColorSpace, Image, PhiMap, Shape, ValueRange};
use crate::degradations::Mask;
use crate::error::{Error, Result};

const MAGIC: &str = "PFAF1";

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

/// Reads an 8-bit gray or RGB raster as a `Raw` image.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes)
        .map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, space, interleaved) = match decoded {
        image::DynamicImage::ImageLuma8(buf) => (1, ColorSpace::Gray, buf.into_raw()),
        image::DynamicImage::ImageRgb8(buf) => (3, ColorSpace::Rgb, buf.into_raw()),
        other => {
            let n = other.color().channel_count() as usize;
            return Err(match n {
                1 | 3 => Error::Decode {
                    path: path.to_path_buf(),
                    reason: format!("unsupported sample format {:?}", other.color()),
                },
                _ => Error::UnsupportedChannels(n),
            });
        }
    };
    let shape = Shape::new(channels, h, w);
    let mut data = vec![0.0; shape.len()];
    let plane = shape.plane();
    for (i, px) in interleaved.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + i] = f64::from(v);
        }
    }
    Image::new(shape, data, ValueRange::Raw, space)
}

/// Writes an RGB or gray image as an 8-bit PNG. Non-raw ranges are
/// converted first; values are clamped and rounded.
pub fn save_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    if img.space() == ColorSpace::Lab {
        return Err(Error::InvalidArgument("convert Lab images to RGB before saving a raster".into()));
    }
    let raw = convert_range(img, ValueRange::Raw)?;
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let plane = h * w;
    let mut interleaved = vec![0u8; c * plane];
    for i in 0..plane {
        for ch in 0..c {
            interleaved[i * c + ch] = raw.data()[ch * plane + i].round().clamp(0.0, 255.0) as u8;
        }
    }
    let color = if c == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    ensure_parent(path)?;
    image::save_buffer_with_format(path, &interleaved, w as u32, h as u32, color, image::ImageFormat::Png)
        .map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })
}

/// Channel-averaged φ rendered through a viridis-like ramp.
pub fn save_phi_heatmap(path: impl AsRef<Path>, phi: &PhiMap) -> Result<()> {
    const STOPS: [[f64; 3]; 5] = [
        [0.267, 0.005, 0.329],
        [0.230, 0.322, 0.546],
        [0.128, 0.567, 0.551],
        [0.369, 0.789, 0.383],
        [0.993, 0.906, 0.144],
    ];
    let avg = phi.channel_average();
    let shape = phi.shape();
    let plane = shape.plane();
    let mut data = vec![0.0; 3 * plane];
    for (i, &v) in avg.iter().enumerate() {
        let t = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
        let k = (t.floor() as usize).min(STOPS.len() - 2);
        let f = t - k as f64;
        for c in 0..3 {
            data[c * plane + i] = STOPS[k][c] * (1.0 - f) + STOPS[k + 1][c] * f;
        }
    }
    let img = Image::new(Shape::new(3, shape.height, shape.width), data, ValueRange::Unit, ColorSpace::Rgb)?;
    save_image(path, &img)
}

/// 1-bit grayscale PNG, white = masked.
pub fn save_mask_raster(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let (h, w) = (mask.height(), mask.width());
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for y in 0..h {
        for x in 0..w {
            if mask.is_masked(y, x) {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::One);
    let to_err = |e: png::EncodingError| Error::Decode { path: path.to_path_buf(), reason: e.to_string() };
    let mut writer = encoder.write_header().map_err(to_err)?;
    writer.write_image_data(&packed).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

pub fn load_mask_raster(path: impl AsRef<Path>) -> Result<Mask> {
    let img = load_image(path)?;
    if img.channels() != 1 {
        return Err(Error::UnsupportedChannels(img.channels()));
    }
    let bits = img.data().iter().map(|&v| u8::from(v > 127.0)).collect();
    Mask::new(img.height(), img.width(), bits)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }
}

/// An n-dimensional row-major float grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl FloatArray {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!("{expected} values for shape {shape:?}"), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, ArrayData::F64(data))
    }

    pub fn from_image(img: &Image) -> Self {
        let s = img.shape();
        Self { shape: vec![s.channels, s.height, s.width], data: ArrayData::F64(img.data().to_vec()) }
    }

    pub fn from_phi(phi: &PhiMap) -> Self {
        let s = phi.shape();
        Self { shape: vec![s.channels, s.height, s.width], data: ArrayData::F64(phi.data().to_vec()) }
    }

    fn image_shape(&self) -> Result<Shape> {
        match self.shape[..] {
            [c, h, w] => Ok(Shape::new(c, h, w)),
            _ => Err(Error::shape("3-d array (channels, height, width)", format!("{:?}", self.shape))),
        }
    }

    pub fn into_image(self, range: ValueRange, space: ColorSpace) -> Result<Image> {
        let shape = self.image_shape()?;
        Image::new(shape, self.data.to_f64(), range, space)
    }

    pub fn into_phi(self) -> Result<PhiMap> {
        let shape = self.image_shape()?;
        PhiMap::new(shape, self.data.to_f64())
    }
}

pub fn save_array(path: impl AsRef<Path>, array: &FloatArray) -> Result<()> {
    let path = path.as_ref();
    let finite = match &array.data {
        ArrayData::F32(v) => v.iter().all(|x| x.is_finite()),
        ArrayData::F64(v) => v.iter().all(|x| x.is_finite()),
    };
    if !finite {
        return Err(Error::NonFinite(format!("array destined for {}", path.display())));
    }
    let mut header = format!("{MAGIC} {}", array.shape.len());
    for d in &array.shape {
        header.push_str(&format!(" {d}"));
    }
    header.push_str(&format!(" {} LE\n", array.data.dtype()));

    let mut bytes = header.into_bytes();
    match &array.data {
        ArrayData::F32(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        ArrayData::F64(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
    }
    ensure_parent(path)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_array(path: impl AsRef<Path>) -> Result<FloatArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::ArrayHeader(format!("{}: no header line", path.display())))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::ArrayHeader(format!("{}: header is not ASCII", path.display())))?;
    let tokens: Vec<&str> = header.split(' ').collect();
    let bad = |why: &str| Error::ArrayHeader(format!("{}: {why} in `{header}`", path.display()));
    if tokens.first() != Some(&MAGIC) {
        return Err(bad("bad magic"));
    }
    let ndim: usize = tokens.get(1).and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad ndim"))?;
    if tokens.len() != ndim + 4 {
        return Err(bad("token count does not match ndim"));
    }
    let shape = tokens[2..2 + ndim]
        .iter()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| bad("bad dimension"))?;
    if tokens[ndim + 3] != "LE" {
        return Err(bad("unsupported endianness"));
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[newline + 1..];
    let data = match tokens[ndim + 2] {
        "f32" => {
            if payload.len() != count * 4 {
                return Err(bad("payload length mismatch"));
            }
            ArrayData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect(),
            )
        }
        "f64" => {
            if payload.len() != count * 8 {
                return Err(bad("payload length mismatch"));
            }
            ArrayData::F64(
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect(),
            )
        }
        _ => return Err(bad("unsupported dtype")),
    };
    FloatArray::new(shape, data)
}
