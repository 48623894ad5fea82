//! Image containers, value-range conventions, color conversion and persistence.
//!
//! Pixel data is stored planar, `(channels, height, width)` in row-major
//! order, as `f64`. The [`ValueRange`] tag records the coordinate
//! convention the values are expressed in. Containment in that range is
//! checked at the conversion boundaries that need it ([`normalize`],
//! [`rgb_to_lab`], ...) rather than on every construction, because noisy
//! observations legitimately leave the nominal interval.

pub(crate) mod color;
mod io;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use color::{
    centered_to_lab, lab_to_centered, lab_to_rgb, lab_to_srgb_pixel, luminance_with_gradient, rgb_to_lab,
    srgb_to_lab_pixel, D65_WHITE,
};
pub use io::{
    load_array, load_image, load_mask_raster, save_array, save_image, save_mask_raster, save_phi_heatmap, ArrayData,
    FloatArray,
};

/// Coordinate convention of the stored values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueRange {
    /// 8-bit intensities in `[0, 255]`.
    Raw,
    /// `[0, 1]`.
    Unit,
    /// `[-0.5, 0.5]`, the network-facing convention.
    Centered,
    /// Conventional CIELAB scales: L in `[0, 100]`, a and b in `[-128, 127]`.
    Lab,
}

impl ValueRange {
    fn bounds(self, channel: usize) -> (f64, f64) {
        match self {
            ValueRange::Raw => (0.0, 255.0),
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Centered => (-0.5, 0.5),
            ValueRange::Lab if channel == 0 => (0.0, 100.0),
            ValueRange::Lab => (-128.0, 127.0),
        }
    }
}

impl fmt::Display for ValueRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueRange::Raw => "raw-[0,255]",
            ValueRange::Unit => "unit-[0,1]",
            ValueRange::Centered => "centered-[-0.5,0.5]",
            ValueRange::Lab => "lab",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorSpace {
    Rgb,
    Lab,
    Gray,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
    range: ValueRange,
    space: ColorSpace,
}

impl Image {
    /// Builds an image, rejecting non-finite data, channel counts other
    /// than 1 or 3, and a buffer length that disagrees with `shape`.
    pub fn new(shape: Shape, data: Vec<f64>, range: ValueRange, space: ColorSpace) -> Result<Self> {
        if shape.channels != 1 && shape.channels != 3 {
            return Err(Error::UnsupportedChannels(shape.channels));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(format!("{} values for {shape}", shape.len()), data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image value at index {i}")));
        }
        Ok(Self { shape, data, range, space })
    }

    pub fn filled(shape: Shape, value: f64, range: ValueRange, space: ColorSpace) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()], range, space)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    /// Same pixels, new buffer. The closure must keep values finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.shape, self.data.iter().map(|&v| f(v)).collect(), self.range, self.space)
    }

    pub(crate) fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.shape, data, self.range, self.space)
    }

    pub fn retag(mut self, range: ValueRange, space: ColorSpace) -> Self {
        self.range = range;
        self.space = space;
        self
    }

    /// Checks that every value lies inside the declared range.
    pub fn check_range(&self) -> Result<()> {
        let plane = self.shape.plane().max(1);
        for (i, &v) in self.data.iter().enumerate() {
            let (lo, hi) = self.range.bounds(i / plane);
            if v < lo || v > hi {
                return Err(Error::OutOfRange(format!("{v} at index {i} outside {} bounds [{lo}, {hi}]", self.range)));
            }
        }
        Ok(())
    }

    pub fn require_range(&self, expected: ValueRange) -> Result<()> {
        if self.range != expected {
            return Err(Error::WrongRange { expected: expected.to_string(), found: self.range.to_string() });
        }
        Ok(())
    }

    pub fn require_shape(&self, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(expected, self.shape));
        }
        Ok(())
    }
}

/// Per-pixel, per-channel fusion weights, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiMap {
    shape: Shape,
    data: Vec<f64>,
}

impl PhiMap {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!("{} values for {shape}", shape.len()), data.len()));
        }
        if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("phi value {v} at index {i} outside [0, 1]")));
        }
        Ok(Self { shape, data })
    }

    pub fn constant(shape: Shape, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Average over channels, one value per pixel.
    pub fn channel_average(&self) -> Vec<f64> {
        let p = self.shape.plane();
        let c = self.shape.channels.max(1) as f64;
        (0..p).map(|i| (0..self.shape.channels).map(|ch| self.data[ch * p + i]).sum::<f64>() / c).collect()
    }
}

/// Raw 8-bit intensities to the zero-centered network range.
pub fn normalize(img: &Image) -> Result<Image> {
    img.require_range(ValueRange::Raw)?;
    img.check_range()?;
    Ok(img.map(|v| v / 255.0 - 0.5)?.retag(ValueRange::Centered, img.space))
}

/// Inverse of [`normalize`]. Values are not clamped.
pub fn denormalize(img: &Image) -> Result<Image> {
    img.require_range(ValueRange::Centered)?;
    Ok(img.map(|v| (v + 0.5) * 255.0)?.retag(ValueRange::Raw, img.space))
}

/// Affine conversion between the three intensity conventions.
pub fn convert_range(img: &Image, target: ValueRange) -> Result<Image> {
    let to_unit = |range: ValueRange| -> Result<(f64, f64)> {
        match range {
            ValueRange::Raw => Ok((1.0 / 255.0, 0.0)),
            ValueRange::Unit => Ok((1.0, 0.0)),
            ValueRange::Centered => Ok((1.0, 0.5)),
            ValueRange::Lab => {
                Err(Error::InvalidArgument("Lab values need rgb_to_lab/lab_to_rgb, not an affine range change".into()))
            }
        }
    };
    let (scale_in, shift_in) = to_unit(img.range)?;
    let (scale_out, shift_out) = to_unit(target)?;
    if img.range == target {
        return Ok(img.clone());
    }
    Ok(img.map(|v| (v * scale_in + shift_in - shift_out) / scale_out)?.retag(target, img.space))
}
