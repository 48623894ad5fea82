//! Per-pixel convex fusion of the lifted observation with the prior.

use std::fmt;

use crate::degradations::GInverse;
use crate::error::{Error, Result};
use crate::imagestack::{ColorSpace, Image, PhiMap, ValueRange};

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone)]
pub struct FusionInput<'a> {
    pub observation: &'a Image,
    pub phi: &'a PhiMap,
    pub prior: &'a Image,
    pub g_inv: GInverse,
}

/// `x̂ = (1-φ)⊙g⁻¹(y) + φ⊙prior`.
pub fn fuse(inp: &FusionInput<'_>) -> Result<Image> {
    fuse_lifted(&inp.g_inv.apply(inp.observation)?, inp.phi, inp.prior)
}

/// [`fuse`] with `g⁻¹(y)` already applied.
pub fn fuse_lifted(fidelity: &Image, phi: &PhiMap, prior: &Image) -> Result<Image> {
    if fidelity.shape() != phi.shape() {
        return Err(Error::shape(phi.shape(), fidelity.shape()));
    }
    prior.require_shape(fidelity.shape())?;
    if prior.range() != fidelity.range() {
        return Err(Error::WrongRange {
            expected: format!("{:?}", fidelity.range()),
            found: format!("{:?}", prior.range()),
        });
    }
    let data =
        fidelity.data().iter().zip(prior.data()).zip(phi.data()).map(|((&g, &q), &p)| (1.0 - p) * g + p * q).collect();
    Image::new(fidelity.shape(), data, fidelity.range(), fidelity.space())
}

/// Colorization output on the Lab scale: L is copied verbatim from the
/// observed lightness, a and b are `φ⊙prior` (the lifted gray observation
/// is achromatic, so its a and b are zero). Only the a and b planes of
/// `phi` are used.
pub fn fuse_colorization(lightness: &Image, phi: &PhiMap, prior_lab: &Image) -> Result<Image> {
    if lightness.channels() != 1 {
        return Err(Error::shape("1-channel lightness", lightness.shape()));
    }
    lightness.require_range(ValueRange::Lab)?;
    prior_lab.require_range(ValueRange::Lab)?;
    if prior_lab.space() != ColorSpace::Lab || prior_lab.channels() != 3 {
        return Err(Error::InvalidArgument("colorization prior must be a 3-channel Lab image".into()));
    }
    if phi.shape() != prior_lab.shape() {
        return Err(Error::shape(prior_lab.shape(), phi.shape()));
    }
    let plane = lightness.data().len();
    if prior_lab.shape().plane() != plane {
        return Err(Error::shape(lightness.shape(), prior_lab.shape()));
    }
    let mut data = lightness.data().to_vec();
    data.extend(prior_lab.data()[plane..].iter().zip(&phi.data()[plane..]).map(|(&q, &p)| p * q));
    Image::new(prior_lab.shape(), data, ValueRange::Lab, ColorSpace::Lab)
}

/// How much of an output is prior-derived.
#[derive(Debug, Clone, PartialEq)]
pub struct HallucinationReport {
    pub mean: f64,
    pub channel_means: Vec<f64>,
    /// Counts over `[0, 1]` in equal bins; 1.0 falls in the last bin.
    pub histogram: Vec<usize>,
    pub fraction_above_half: f64,
}

pub fn hallucination_report(phi: &PhiMap) -> HallucinationReport {
    let s = phi.shape();
    let mut histogram = vec![0; HISTOGRAM_BINS];
    for &v in phi.data() {
        histogram[((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)] += 1;
    }
    let n = phi.data().len().max(1) as f64;
    HallucinationReport {
        mean: phi.mean(),
        channel_means: (0..s.channels)
            .map(|c| {
                let ch = phi.channel(c);
                ch.iter().sum::<f64>() / ch.len().max(1) as f64
            })
            .collect(),
        histogram,
        fraction_above_half: phi.data().iter().filter(|&&v| v > 0.5).count() as f64 / n,
    }
}

impl fmt::Display for HallucinationReport {
    /// `key = value` lines.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mean_phi = {:.6}", self.mean)?;
        let means: Vec<String> = self.channel_means.iter().map(|m| format!("{m:.6}")).collect();
        writeln!(f, "channel_means = [{}]", means.join(", "))?;
        writeln!(f, "fraction_above_half = {:.6}", self.fraction_above_half)?;
        let hist: Vec<String> = self.histogram.iter().map(usize::to_string).collect();
        writeln!(f, "histogram = [{}]", hist.join(", "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagestack::Shape;
    use proptest::prelude::*;

    fn img(data: Vec<f64>) -> Image {
        Image::new(Shape::new(1, 1, data.len()), data, ValueRange::Centered, ColorSpace::Gray).unwrap()
    }

    fn phi(data: Vec<f64>) -> PhiMap {
        PhiMap::new(Shape::new(1, 1, data.len()), data).unwrap()
    }

    #[test]
    fn endpoints_and_midpoint() {
        let y = img(vec![0.2, -0.1, 0.3]);
        let q = img(vec![0.6, 0.4, -0.2]);
        let zero =
            fuse(&FusionInput { observation: &y, phi: &phi(vec![0.0; 3]), prior: &q, g_inv: GInverse::Identity })
                .unwrap();
        assert_eq!(zero.data(), y.data());
        let one = fuse_lifted(&y, &phi(vec![1.0; 3]), &q).unwrap();
        assert_eq!(one.data(), q.data());
        let mid = fuse_lifted(&img(vec![0.2]), &phi(vec![0.5]), &img(vec![0.6])).unwrap();
        assert!((mid.data()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        assert!(fuse_lifted(&img(vec![0.0; 3]), &phi(vec![0.5; 2]), &img(vec![0.0; 3])).is_err());
        assert!(fuse_lifted(&img(vec![0.0; 3]), &phi(vec![0.5; 3]), &img(vec![0.0; 2])).is_err());
    }

    #[test]
    fn colorization_keeps_lightness_bit_exact() {
        let l = Image::new(Shape::new(1, 1, 2), vec![37.123456789, 81.5], ValueRange::Lab, ColorSpace::Gray).unwrap();
        let prior =
            Image::new(Shape::new(3, 1, 2), vec![10.0, 90.0, 20.0, -30.0, 5.0, 8.0], ValueRange::Lab, ColorSpace::Lab)
                .unwrap();
        let p = PhiMap::new(Shape::new(3, 1, 2), vec![0.3, 0.9, 0.5, 1.0, 0.0, 0.25]).unwrap();
        let out = fuse_colorization(&l, &p, &prior).unwrap();
        assert_eq!(&out.data()[..2], l.data());
        assert_eq!(&out.data()[2..], &[10.0, -30.0, 0.0, 2.0]);
    }

    #[test]
    fn report_cases() {
        let r = hallucination_report(&PhiMap::constant(Shape::new(3, 4, 4), 0.47).unwrap());
        assert!((r.mean - 0.47).abs() < 1e-12);
        assert_eq!(r.channel_means.len(), 3);
        assert_eq!(r.histogram.iter().sum::<usize>(), 48);
        let z = hallucination_report(&PhiMap::constant(Shape::new(1, 2, 2), 0.0).unwrap());
        assert_eq!(z.mean, 0.0);
        assert_eq!(z.histogram[HISTOGRAM_BINS - 1], 0);
        assert_eq!(z.fraction_above_half, 0.0);
        let o = hallucination_report(&PhiMap::constant(Shape::new(1, 2, 2), 1.0).unwrap());
        assert_eq!(o.histogram[HISTOGRAM_BINS - 1], 4);
        assert!(o.to_string().contains("mean_phi = 1.000000"));
    }

    proptest! {
        #[test]
        fn convex_symmetric_and_monotone(
            vals in prop::collection::vec((-0.5..0.5f64, -0.5..0.5f64, 0.0..=1.0f64, 0.0..=1.0f64), 1..20)
        ) {
            let g = img(vals.iter().map(|v| v.0).collect());
            let q = img(vals.iter().map(|v| v.1).collect());
            let p = phi(vals.iter().map(|v| v.2).collect());
            let out = fuse_lifted(&g, &p, &q).unwrap();
            let flipped = fuse_lifted(&q, &phi(vals.iter().map(|v| 1.0 - v.2).collect()), &g).unwrap();
            for (i, v) in vals.iter().enumerate() {
                let o = out.data()[i];
                prop_assert!(o >= v.0.min(v.1) - 1e-15 && o <= v.0.max(v.1) + 1e-15);
                prop_assert!((o - flipped.data()[i]).abs() < 1e-12);
            }
            // raising one entry moves that pixel toward the prior
            let mut raised = p.data().to_vec();
            raised[0] = raised[0].max(vals[0].3);
            let r = fuse_lifted(&g, &phi(raised), &q).unwrap();
            prop_assert!((q.data()[0] - r.data()[0]).abs() <= (q.data()[0] - out.data()[0]).abs() + 1e-15);
        }
    }
}
