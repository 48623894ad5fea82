//! sRGB <-> CIELAB under the D65 white point.
//!
//! The companding and `f` functions are extended past their nominal
//! domains (linear segment below zero, power law above one) so that the
//! luminance map stays differentiable for unbounded generator outputs.

use super::{ColorSpace, Image, ValueRange};
use crate::error::{Error, Result};

/// Reference white, `Y` normalized to 1.
pub const D65_WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];

const EPSILON: f64 = 216.0 / 24_389.0; // (6/29)^3
const KAPPA_INV: f64 = 108.0 / 841.0; // 3 (6/29)^2

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn srgb_to_linear_deriv(c: f64) -> f64 {
    if c <= 0.040_45 {
        1.0 / 12.92
    } else {
        2.4 / 1.055 * ((c + 0.055) / 1.055).powf(1.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        t / KAPPA_INV + 4.0 / 29.0
    }
}

fn lab_f_deriv(t: f64) -> f64 {
    if t > EPSILON {
        1.0 / (3.0 * t.cbrt().powi(2))
    } else {
        1.0 / KAPPA_INV
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > 6.0 / 29.0 {
        t * t * t
    } else {
        KAPPA_INV * (t - 4.0 / 29.0)
    }
}

/// One sRGB pixel in `[0, 1]` to `(L, a, b)`.
pub fn srgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    for (row, out) in RGB_TO_XYZ.iter().zip(xyz.iter_mut()) {
        *out = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let fx = lab_f(xyz[0] / D65_WHITE[0]);
    let fy = lab_f(xyz[1] / D65_WHITE[1]);
    let fz = lab_f(xyz[2] / D65_WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// `(L, a, b)` to sRGB, clamped to `[0, 1]`.
pub fn lab_to_srgb_pixel(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [D65_WHITE[0] * lab_f_inv(fx), D65_WHITE[1] * lab_f_inv(fy), D65_WHITE[2] * lab_f_inv(fz)];
    let mut rgb = [0.0; 3];
    for (row, out) in XYZ_TO_RGB.iter().zip(rgb.iter_mut()) {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        *out = linear_to_srgb(lin).clamp(0.0, 1.0);
    }
    rgb
}

/// CIELAB lightness of an sRGB pixel and its gradient with respect to
/// the three sRGB components.
pub fn luminance_with_gradient(rgb: [f64; 3]) -> (f64, [f64; 3]) {
    let w = RGB_TO_XYZ[1];
    let y = w[0] * srgb_to_linear(rgb[0]) + w[1] * srgb_to_linear(rgb[1]) + w[2] * srgb_to_linear(rgb[2]);
    let l = 116.0 * lab_f(y) - 16.0;
    let dl_dy = 116.0 * lab_f_deriv(y);
    let grad = [
        dl_dy * w[0] * srgb_to_linear_deriv(rgb[0]),
        dl_dy * w[1] * srgb_to_linear_deriv(rgb[1]),
        dl_dy * w[2] * srgb_to_linear_deriv(rgb[2]),
    ];
    (l, grad)
}

/// Gray sRGB intensity whose lightness is `l`.
pub(crate) fn gray_for_lightness(l: f64) -> f64 {
    let row_sum: f64 = RGB_TO_XYZ[1].iter().sum();
    linear_to_srgb(lab_f_inv((l + 16.0) / 116.0) / row_sum).clamp(0.0, 1.0)
}

pub fn rgb_to_lab(img: &Image) -> Result<Image> {
    if img.space() != ColorSpace::Rgb || img.channels() != 3 {
        return Err(Error::InvalidArgument(format!(
            "rgb_to_lab needs a 3-channel RGB image, got {:?} with {} channels",
            img.space(),
            img.channels()
        )));
    }
    img.require_range(ValueRange::Unit)?;
    img.check_range()?;
    let p = img.shape().plane();
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for i in 0..p {
        let lab = srgb_to_lab_pixel([src[i], src[p + i], src[2 * p + i]]);
        out[i] = lab[0];
        out[p + i] = lab[1];
        out[2 * p + i] = lab[2];
    }
    Image::new(img.shape(), out, ValueRange::Lab, ColorSpace::Lab)
}

pub fn lab_to_rgb(img: &Image) -> Result<Image> {
    if img.space() != ColorSpace::Lab || img.channels() != 3 {
        return Err(Error::InvalidArgument(format!(
            "lab_to_rgb needs a 3-channel Lab image, got {:?} with {} channels",
            img.space(),
            img.channels()
        )));
    }
    img.require_range(ValueRange::Lab)?;
    img.check_range()?;
    let p = img.shape().plane();
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for i in 0..p {
        let rgb = lab_to_srgb_pixel([src[i], src[p + i], src[2 * p + i]]);
        out[i] = rgb[0];
        out[p + i] = rgb[1];
        out[2 * p + i] = rgb[2];
    }
    Image::new(img.shape(), out, ValueRange::Unit, ColorSpace::Rgb)
}

/// Lab to the network-facing scale `(L/100 - 0.5, a/256, b/256)`, which
/// keeps every channel inside `[-0.5, 0.5]`.
pub fn lab_to_centered(img: &Image) -> Result<Image> {
    require_lab_space(img)?;
    img.require_range(ValueRange::Lab)?;
    Ok(rescale_lab(img, |c, v| if c == 0 { v / 100.0 - 0.5 } else { v / 256.0 })?
        .retag(ValueRange::Centered, ColorSpace::Lab))
}

/// Inverse of [`lab_to_centered`].
pub fn centered_to_lab(img: &Image) -> Result<Image> {
    require_lab_space(img)?;
    img.require_range(ValueRange::Centered)?;
    Ok(rescale_lab(img, |c, v| if c == 0 { (v + 0.5) * 100.0 } else { v * 256.0 })?
        .retag(ValueRange::Lab, ColorSpace::Lab))
}

fn require_lab_space(img: &Image) -> Result<()> {
    if img.space() != ColorSpace::Lab || img.channels() != 3 {
        return Err(Error::InvalidArgument(format!(
            "expected a 3-channel Lab image, got {:?} with {} channels",
            img.space(),
            img.channels()
        )));
    }
    Ok(())
}

fn rescale_lab(img: &Image, f: impl Fn(usize, f64) -> f64) -> Result<Image> {
    let p = img.shape().plane();
    let data = img.data().iter().enumerate().map(|(i, &v)| f(i / p, v)).collect();
    img.with_data(data)
}
