//! Forward degradation models paired with their bijective companions.
//!
//! Every task exposes the degradation `f` (used by the prior inversion,
//! see [`ForwardModel`]) and the information-preserving lift `g⁻¹` that
//! maps an observation back into output space without any learned content.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagestack::{
    color::gray_for_lightness, luminance_with_gradient, rgb_to_lab, ColorSpace, Image, Shape, ValueRange,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Colorization,
    Inpainting,
    Awgn,
}

/// Binary `(height, width)` grid; 1 = masked (unobserved), 0 = observed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!("{height}x{width} mask"), bits.len()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        if !bits.is_empty() && bits.iter().all(|&b| b == 1) {
            return Err(Error::InvalidArgument("mask must leave at least one observed pixel".into()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_masked(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.bits.len() as f64
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(b)).collect()
    }
}

/// Axis-aligned rectangle `[top, top+height) x [left, left+width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Parameters of the randomized-mask sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomMaskParams {
    pub min_patches: usize,
    pub max_patches: usize,
    pub size_mean: f64,
    pub size_std: f64,
    pub min_side: usize,
}

impl Default for RandomMaskParams {
    fn default() -> Self {
        Self { min_patches: 2, max_patches: 4, size_mean: 64.0, size_std: 32.0, min_side: 9 }
    }
}

impl RandomMaskParams {
    /// Scales the size distribution for images smaller than 256 pixels,
    /// keeping the minimum side.
    pub fn scaled_to(side: usize) -> Self {
        let k = side as f64 / 256.0;
        Self { size_mean: 64.0 * k, size_std: 32.0 * k, ..Self::default() }
    }
}

/// A task descriptor: the degradation `f` and its companion `g⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub enum DegradationSpec {
    Colorization,
    Inpainting {
        mask: Mask,
    },
    /// `sigma` in 8-bit intensity units.
    Awgn {
        sigma: f64,
    },
}

impl DegradationSpec {
    pub fn task(&self) -> Task {
        match self {
            DegradationSpec::Colorization => Task::Colorization,
            DegradationSpec::Inpainting { .. } => Task::Inpainting,
            DegradationSpec::Awgn { .. } => Task::Awgn,
        }
    }

    pub fn awgn(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative noise level {sigma}")));
        }
        Ok(DegradationSpec::Awgn { sigma })
    }

    /// The degradation as used by the inversion, in centered coordinates.
    pub fn forward_model(&self) -> ForwardModel {
        match self {
            DegradationSpec::Colorization => ForwardModel::Luminance,
            DegradationSpec::Inpainting { mask } => ForwardModel::Mask(mask.clone()),
            DegradationSpec::Awgn { .. } => ForwardModel::Identity,
        }
    }

    pub fn g_inverse(&self) -> GInverse {
        match self {
            DegradationSpec::Colorization => GInverse::GrayToRgb,
            _ => GInverse::Identity,
        }
    }
}

/// The bijective lift `g⁻¹` of an observation into output space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GInverse {
    Identity,
    GrayToRgb,
}

impl GInverse {
    pub fn apply(&self, y: &Image) -> Result<Image> {
        match self {
            GInverse::Identity => Ok(g_inverse_identity(y)),
            GInverse::GrayToRgb => g_inverse_colorization(y),
        }
    }
}

/// Degradation `f` on centered tensors, with its vector-Jacobian product.
#[derive(Debug, Clone, PartialEq)]
pub enum ForwardModel {
    Identity,
    /// Masked pixels are replaced by the range midpoint (zero).
    Mask(Mask),
    /// CIELAB lightness rescaled to the centered range: `L(x + 0.5)/100 - 0.5`.
    Luminance,
}

impl ForwardModel {
    pub fn output_shape(&self, input: Shape) -> Shape {
        match self {
            ForwardModel::Luminance => Shape::new(1, input.height, input.width),
            _ => input,
        }
    }

    fn check(&self, input: Shape, len: usize) -> Result<()> {
        if input.len() != len {
            return Err(Error::shape(input, len));
        }
        match self {
            ForwardModel::Mask(m) if (m.height, m.width) != (input.height, input.width) => {
                Err(Error::shape(format!("{}x{} mask", input.height, input.width), format!("{}x{}", m.height, m.width)))
            }
            ForwardModel::Luminance if input.channels != 3 => Err(Error::shape("3-channel input for luminance", input)),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, input: Shape, x: &[f64]) -> Result<Vec<f64>> {
        self.check(input, x.len())?;
        let plane = input.plane();
        Ok(match self {
            ForwardModel::Identity => x.to_vec(),
            ForwardModel::Mask(m) => {
                x.iter().enumerate().map(|(i, &v)| if m.bits[i % plane] == 1 { 0.0 } else { v }).collect()
            }
            ForwardModel::Luminance => (0..plane)
                .map(|i| {
                    let rgb = [x[i] + 0.5, x[plane + i] + 0.5, x[2 * plane + i] + 0.5];
                    luminance_with_gradient(rgb).0 / 100.0 - 0.5
                })
                .collect(),
        })
    }

    pub fn vjp(&self, input: Shape, x: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
        self.check(input, x.len())?;
        let out = self.output_shape(input);
        if grad_out.len() != out.len() {
            return Err(Error::shape(out, grad_out.len()));
        }
        let plane = input.plane();
        Ok(match self {
            ForwardModel::Identity => grad_out.to_vec(),
            ForwardModel::Mask(m) => {
                grad_out.iter().enumerate().map(|(i, &g)| if m.bits[i % plane] == 1 { 0.0 } else { g }).collect()
            }
            ForwardModel::Luminance => {
                let mut g = vec![0.0; x.len()];
                for i in 0..plane {
                    let rgb = [x[i] + 0.5, x[plane + i] + 0.5, x[2 * plane + i] + 0.5];
                    let (_, d) = luminance_with_gradient(rgb);
                    for c in 0..3 {
                        g[c * plane + i] = grad_out[i] * d[c] / 100.0;
                    }
                }
                g
            }
        })
    }
}

/// Lightness channel of a unit-range RGB image, as a 1-channel image on
/// the Lab scale.
pub fn degrade_colorization(x: &Image) -> Result<Image> {
    if x.space() != ColorSpace::Rgb {
        return Err(Error::InvalidArgument(format!("colorization needs an RGB image, got {:?}", x.space())));
    }
    let lab = rgb_to_lab(x)?;
    let s = x.shape();
    Image::new(Shape::new(1, s.height, s.width), lab.channel(0).to_vec(), ValueRange::Lab, ColorSpace::Gray)
}

/// Duplicates the gray channel over R, G and B. A lightness input (Lab
/// scale) is first mapped to the gray sRGB intensity with that lightness.
pub fn g_inverse_colorization(y: &Image) -> Result<Image> {
    if y.channels() != 1 {
        return Err(Error::InvalidArgument(format!("colorization lift needs a 1-channel image, got {}", y.channels())));
    }
    let (gray, range): (Vec<f64>, ValueRange) = match y.range() {
        ValueRange::Lab => (y.data().iter().map(|&l| gray_for_lightness(l)).collect(), ValueRange::Unit),
        r => (y.data().to_vec(), r),
    };
    let s = y.shape();
    let mut data = Vec::with_capacity(3 * gray.len());
    for _ in 0..3 {
        data.extend_from_slice(&gray);
    }
    Image::new(Shape::new(3, s.height, s.width), data, range, ColorSpace::Rgb)
}

pub fn g_inverse_identity(y: &Image) -> Image {
    y.clone()
}

/// A `patch`x`patch` block of ones centered in the image.
pub fn central_mask(height: usize, width: usize, patch: usize) -> Result<Mask> {
    if patch > height.min(width) {
        return Err(Error::InvalidArgument(format!("patch {patch} larger than {height}x{width} image")));
    }
    let top = (height - patch) / 2;
    let left = (width - patch) / 2;
    let mut bits = vec![0u8; height * width];
    for y in top..top + patch {
        bits[y * width + left..y * width + left + patch].fill(1);
    }
    Mask::new(height, width, bits)
}

fn draw_side(rng: &mut impl Rng, normal: &Normal<f64>, min_side: usize) -> usize {
    loop {
        let v = normal.sample(rng);
        if v >= min_side as f64 {
            return v.round() as usize;
        }
    }
}

/// Draws the patch set of the randomized-mask protocol. A patch that
/// overflows the image is re-drawn entirely (corner and size).
pub fn sample_random_patches(
    height: usize,
    width: usize,
    params: &RandomMaskParams,
    rng: &mut impl Rng,
) -> Result<Vec<Patch>> {
    if height < params.min_side || width < params.min_side {
        return Err(Error::InvalidArgument(format!(
            "{height}x{width} image is smaller than the minimum patch side {}",
            params.min_side
        )));
    }
    if params.min_patches == 0 || params.min_patches > params.max_patches {
        return Err(Error::InvalidArgument("invalid patch count range".into()));
    }
    let normal = Normal::new(params.size_mean, params.size_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let count = rng.random_range(params.min_patches..=params.max_patches);
    let mut patches = Vec::with_capacity(count);
    for _ in 0..count {
        loop {
            let top = rng.random_range(0..height);
            let left = rng.random_range(0..width);
            let ph = draw_side(rng, &normal, params.min_side);
            let pw = draw_side(rng, &normal, params.min_side);
            if top + ph <= height && left + pw <= width {
                patches.push(Patch { top, left, height: ph, width: pw });
                break;
            }
        }
    }
    Ok(patches)
}

fn rasterize(height: usize, width: usize, patches: &[Patch]) -> Vec<u8> {
    let mut bits = vec![0u8; height * width];
    for p in patches {
        for y in p.top..p.top + p.height {
            bits[y * width + p.left..y * width + p.left + p.width].fill(1);
        }
    }
    bits
}

/// Randomized inpainting mask: the union of 2 to 4 random patches. A
/// draw whose union hides every pixel is discarded and re-drawn.
pub fn sample_random_masks(height: usize, width: usize, rng: &mut impl Rng) -> Result<Mask> {
    sample_random_masks_with(height, width, &RandomMaskParams::default(), rng)
}

pub fn sample_random_masks_with(
    height: usize,
    width: usize,
    params: &RandomMaskParams,
    rng: &mut impl Rng,
) -> Result<Mask> {
    loop {
        let patches = sample_random_patches(height, width, params, rng)?;
        let bits = rasterize(height, width, &patches);
        if bits.contains(&0) {
            return Mask::new(height, width, bits);
        }
    }
}

fn midpoint(range: ValueRange, channel: usize) -> f64 {
    match range {
        ValueRange::Raw => 127.5,
        ValueRange::Unit => 0.5,
        ValueRange::Centered => 0.0,
        ValueRange::Lab if channel == 0 => 50.0,
        ValueRange::Lab => 0.0,
    }
}

/// Replaces masked pixels, in every channel, with the range midpoint.
pub fn apply_mask(x: &Image, m: &Mask) -> Result<Image> {
    if (x.height(), x.width()) != (m.height, m.width) {
        return Err(Error::shape(format!("{}x{}", x.height(), x.width()), format!("{}x{} mask", m.height, m.width)));
    }
    let plane = x.shape().plane();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if m.bits[i % plane] == 1 { midpoint(x.range(), i / plane) } else { v })
        .collect();
    x.with_data(data)
}

/// `y = x + n`, `n ~ N(0, sigma)` i.i.d., with `sigma` in 8-bit units and
/// rescaled to the image's range. No clipping.
pub fn add_awgn(x: &Image, sigma: f64, rng: &mut impl Rng) -> Result<Image> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative noise level {sigma}")));
    }
    let std = match x.range() {
        ValueRange::Raw => sigma,
        ValueRange::Unit | ValueRange::Centered => sigma / 255.0,
        ValueRange::Lab => return Err(Error::InvalidArgument("AWGN is defined on intensity images".into())),
    };
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let data = x.data().iter().map(|&v| v + normal.sample(rng)).collect();
    x.with_data(data)
}

/// Blind noise level, uniform on `[5, 50]`.
pub fn sample_blind_sigma(rng: &mut impl Rng) -> f64 {
    Uniform::new_inclusive(5.0, 50.0).expect("static bounds").sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagestack::srgb_to_lab_pixel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rgb(h: usize, w: usize, rng: &mut impl Rng) -> Image {
        let s = Shape::new(3, h, w);
        let data = (0..s.len()).map(|_| rng.random::<f64>()).collect();
        Image::new(s, data, ValueRange::Unit, ColorSpace::Rgb).unwrap()
    }

    #[test]
    fn colorization_white_and_gray() {
        let white = Image::filled(Shape::new(3, 2, 2), 1.0, ValueRange::Unit, ColorSpace::Rgb).unwrap();
        let l = degrade_colorization(&white).unwrap();
        assert!(l.data().iter().all(|&v| (v - 100.0).abs() < 1e-3));

        let gray = Image::filled(Shape::new(3, 2, 3), 0.37, ValueRange::Unit, ColorSpace::Rgb).unwrap();
        let lifted = g_inverse_colorization(&degrade_colorization(&gray).unwrap()).unwrap();
        for (a, b) in lifted.data().iter().zip(gray.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn colorization_matches_lab_lightness() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = unit_rgb(4, 5, &mut rng);
        let l = degrade_colorization(&img).unwrap();
        let p = img.shape().plane();
        for i in 0..p {
            let lab = srgb_to_lab_pixel([img.data()[i], img.data()[p + i], img.data()[2 * p + i]]);
            assert!((l.data()[i] - lab[0]).abs() < 1e-6);
        }
        let gray = img.clone().retag(ValueRange::Unit, ColorSpace::Gray);
        assert!(degrade_colorization(&gray).is_err());
    }

    #[test]
    fn colorization_lift_duplicates() {
        let y = Image::filled(Shape::new(1, 3, 3), 0.3, ValueRange::Unit, ColorSpace::Gray).unwrap();
        let rgb = g_inverse_colorization(&y).unwrap();
        assert_eq!(rgb.channels(), 3);
        assert!(rgb.data().iter().all(|&v| v == 0.3));
        assert_eq!(rgb.channel(0), rgb.channel(1));
        assert_eq!(rgb.channel(1), rgb.channel(2));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = Image::new(
            Shape::new(1, 4, 4),
            (0..16).map(|_| rng.random::<f64>() * 100.0).collect(),
            ValueRange::Lab,
            ColorSpace::Gray,
        )
        .unwrap();
        let back = degrade_colorization(&g_inverse_colorization(&y).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-3);
        }
        let rgb_in = unit_rgb(2, 2, &mut rng);
        assert!(g_inverse_colorization(&rgb_in).is_err());
    }

    #[test]
    fn central_mask_geometry() {
        let m = central_mask(256, 256, 64).unwrap();
        assert_eq!(m.masked_count(), 64 * 64);
        assert!((m.masked_fraction() - 1.0 / 16.0).abs() < 1e-12);
        assert!(m.is_masked(96, 96) && m.is_masked(159, 159));
        assert!(!m.is_masked(95, 96) && !m.is_masked(160, 159));

        let odd = central_mask(11, 10, 3).unwrap();
        assert_eq!(odd.masked_count(), 9);
        assert!(odd.is_masked(4, 3) && odd.is_masked(6, 5));

        assert_eq!(central_mask(8, 8, 0).unwrap().masked_count(), 0);
        assert!(central_mask(8, 8, 9).is_err());
    }

    #[test]
    fn random_patches_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = RandomMaskParams::default();
        for _ in 0..500 {
            let patches = sample_random_patches(256, 256, &params, &mut rng).unwrap();
            assert!((2..=4).contains(&patches.len()));
            for p in patches {
                assert!(p.height >= 9 && p.width >= 9);
                assert!(p.top + p.height <= 256 && p.left + p.width <= 256);
            }
        }
        assert!(sample_random_masks(8, 256, &mut rng).is_err());
    }

    #[test]
    fn random_masks_are_seed_deterministic() {
        let a = sample_random_masks(64, 64, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = sample_random_masks(64, 64, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.masked_count() > 0 && a.masked_count() < 64 * 64);
    }

    #[test]
    fn apply_mask_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = unit_rgb(5, 4, &mut rng);
        let none = Mask::new(5, 4, vec![0; 20]).unwrap();
        assert_eq!(apply_mask(&x, &none).unwrap(), x);

        let mut bits = vec![1u8; 20];
        bits[7] = 0;
        let one = Mask::new(5, 4, bits).unwrap();
        let y = apply_mask(&x, &one).unwrap();
        for c in 0..3 {
            assert_eq!(y.channel(c)[7].to_bits(), x.channel(c)[7].to_bits());
            assert!(y.channel(c).iter().enumerate().all(|(i, &v)| i == 7 || v == 0.5));
        }

        let m = central_mask(5, 4, 2).unwrap();
        let y = apply_mask(&x, &m).unwrap();
        let p = 20;
        for i in 0..x.data().len() {
            if m.bits()[i % p] == 0 {
                assert_eq!(y.data()[i].to_bits(), x.data()[i].to_bits());
            }
        }
        assert!(apply_mask(&x, &central_mask(4, 4, 2).unwrap()).is_err());
        assert!(Mask::new(2, 2, vec![1; 4]).is_err());
    }

    #[test]
    fn awgn_statistics() {
        let x = Image::filled(Shape::new(1, 256, 256), 0.0, ValueRange::Centered, ColorSpace::Gray).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(add_awgn(&x, 0.0, &mut rng).unwrap(), x);
        assert!(add_awgn(&x, -1.0, &mut rng).is_err());

        let sigma = 25.0;
        let y = add_awgn(&x, sigma, &mut rng).unwrap();
        let n = y.data();
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        let var = n.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.len() - 1) as f64;
        assert!((var.sqrt() / (sigma / 255.0) - 1.0).abs() < 0.02);

        // lag-1 autocorrelation along rows
        let mut num = 0.0;
        for row in n.chunks_exact(256) {
            for w in row.windows(2) {
                num += (w[0] - mean) * (w[1] - mean);
            }
        }
        let lag1 = num / (256.0 * 255.0) / var;
        assert!(lag1.abs() < 0.02, "lag-1 autocorrelation {lag1}");

        let a = add_awgn(&x, sigma, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = add_awgn(&x, sigma, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blind_sigma_support_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let draws: Vec<f64> = (0..10_000).map(|_| sample_blind_sigma(&mut rng)).collect();
        assert!(draws.iter().all(|&s| (5.0..=50.0).contains(&s)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 27.5).abs() < 0.5, "mean {mean}");
        let a = sample_blind_sigma(&mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_blind_sigma(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn identity_lift() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let y = unit_rgb(3, 3, &mut rng);
        let once = g_inverse_identity(&y);
        assert_eq!(once, y);
        assert_eq!(g_inverse_identity(&once), once);
        assert!(once.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn forward_model_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let shape = Shape::new(3, 3, 4);
        let x: Vec<f64> = (0..shape.len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let models =
            [ForwardModel::Identity, ForwardModel::Mask(central_mask(3, 4, 2).unwrap()), ForwardModel::Luminance];
        for model in models {
            let out_shape = model.output_shape(shape);
            let w: Vec<f64> = (0..out_shape.len()).map(|_| rng.random::<f64>() - 0.5).collect();
            let dot = |v: &[f64]| v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let g = model.vjp(shape, &x, &w).unwrap();
            for i in 0..x.len() {
                let h = 1e-6;
                let mut p = x.clone();
                let mut m = x.clone();
                p[i] += h;
                m[i] -= h;
                let fd = (dot(&model.apply(shape, &p).unwrap()) - dot(&model.apply(shape, &m).unwrap())) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6, "{model:?} entry {i}: {fd} vs {}", g[i]);
            }
        }
    }
}
