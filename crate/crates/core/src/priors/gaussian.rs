use crate::error::{Error, Result};
use crate::imagestack::{Image, PhiMap};

/// Independent per-pixel Gaussian prior `N(x̄_i, σ_{x_i}²)`.
///
/// `std` and `sigma_n` arguments are expressed in the units of the mean
/// image's values.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPixelPrior {
    mean: Image,
    std: Vec<f64>,
}

impl GaussianPixelPrior {
    pub fn new(mean: Image, std: Vec<f64>) -> Result<Self> {
        if std.len() != mean.data().len() {
            return Err(Error::shape(mean.shape(), format!("{} std entries", std.len())));
        }
        if let Some(v) = std.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::OutOfRange(format!("prior std must be finite and nonnegative, found {v}")));
        }
        Ok(Self { mean, std })
    }

    /// Pixel-wise sample mean and (population) standard deviation.
    pub fn fit(images: &[Image]) -> Result<Self> {
        let first =
            images.first().ok_or_else(|| Error::InsufficientData("no images to fit a Gaussian prior".into()))?;
        let n = images.len() as f64;
        let mut mean = vec![0.0; first.data().len()];
        for img in images {
            img.require_shape(first.shape())?;
            for (m, v) in mean.iter_mut().zip(img.data()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; mean.len()];
        for img in images {
            for ((s, v), m) in var.iter_mut().zip(img.data()).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let mean = Image::new(first.shape(), mean, first.range(), first.space())?;
        Self::new(mean, var.into_iter().map(f64::sqrt).collect())
    }

    pub fn mean(&self) -> &Image {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    fn snr(&self, sigma_n: f64) -> Result<impl Iterator<Item = f64> + '_> {
        if !(sigma_n > 0.0 && sigma_n.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise level must be positive and finite (got {sigma_n}); sigma_n = 0 is the pure-data regime"
            )));
        }
        let inv = 1.0 / (sigma_n * sigma_n);
        Ok(self.std.iter().map(move |s| s * s * inv))
    }
}

/// `φ_i = 1 / (1 + S_i)` with `S_i = σ_{x_i}² / σ_n²`.
pub fn gaussian_phi(prior: &GaussianPixelPrior, sigma_n: f64) -> Result<PhiMap> {
    let phi = prior.snr(sigma_n)?.map(|s| 1.0 / (1.0 + s)).collect();
    PhiMap::new(prior.mean.shape(), phi)
}

/// Closed-form posterior mode `y S/(1+S) + x̄/(1+S)`.
pub fn gaussian_map_estimate(y: &Image, prior: &GaussianPixelPrior, sigma_n: f64) -> Result<Image> {
    y.require_shape(prior.mean.shape())?;
    let data = prior
        .snr(sigma_n)?
        .zip(y.data())
        .zip(prior.mean.data())
        .map(|((s, yi), mi)| yi * (s / (1.0 + s)) + mi / (1.0 + s))
        .collect();
    Image::new(y.shape(), data, y.range(), y.space())
}
