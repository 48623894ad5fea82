use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagestack::{load_array, save_array, ColorSpace, FloatArray, Image, Shape, ValueRange};
use crate::nn::{Adam, Conv2d, ConvTranspose2d, Dense, Layer, Sequential, Tensor};

/// Architecture recipe of a generator backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorArch {
    /// `x = W₂ (α ⊙ (W₁ z)) + b₂` with `W₁` orthogonal and `W₂` having
    /// orthonormal columns; split after the first map, one feature channel
    /// per latent entry.
    Linear { latent_dim: usize, channels: usize, height: usize, width: usize },
    /// Dense stem to a 4x4 grid, then one stride-2 transposed convolution
    /// per doubling up to `side`, a 3x3 output convolution and `0.5 tanh`.
    TinyConv { latent_dim: usize, channels: usize, side: usize, base_width: usize },
}

impl GeneratorArch {
    pub fn latent_dim(&self) -> usize {
        match *self {
            GeneratorArch::Linear { latent_dim, .. } | GeneratorArch::TinyConv { latent_dim, .. } => latent_dim,
        }
    }

    pub fn output_shape(&self) -> Shape {
        match *self {
            GeneratorArch::Linear { channels, height, width, .. } => Shape::new(channels, height, width),
            GeneratorArch::TinyConv { channels, side, .. } => Shape::new(channels, side, side),
        }
    }

    fn default_split(&self) -> usize {
        match self {
            GeneratorArch::Linear { .. } => 1,
            GeneratorArch::TinyConv { .. } => 4,
        }
    }

    fn validate(&self) -> Result<()> {
        let s = self.output_shape();
        if self.latent_dim() == 0 || !(s.channels == 1 || s.channels == 3) {
            return Err(Error::InvalidArgument(format!("bad generator architecture {self:?}")));
        }
        match *self {
            GeneratorArch::Linear { latent_dim, .. } if latent_dim > s.len() => Err(Error::InvalidArgument(format!(
                "linear generator latent {latent_dim} exceeds {} output values",
                s.len()
            ))),
            GeneratorArch::TinyConv { side, base_width, .. }
                if side < 8 || !side.is_power_of_two() || base_width == 0 =>
            {
                Err(Error::InvalidArgument(format!(
                    "tiny-conv generator needs a power-of-two side >= 8 and positive width, got side {side}"
                )))
            }
            _ => Ok(()),
        }
    }

    fn build(&self, rng: &mut ChaCha8Rng) -> Sequential {
        match *self {
            GeneratorArch::Linear { latent_dim, .. } => {
                let out = self.output_shape();
                let w1 = orthonormal_columns(latent_dim, latent_dim, rng);
                let w2 = orthonormal_columns(out.len(), latent_dim, rng);
                let mut d1 = Dense::new(latent_dim, Shape::new(latent_dim, 1, 1), rng);
                d1.weight = row_major(&w1);
                d1.bias.fill(0.0);
                let mut d2 = Dense::new(latent_dim, out, rng);
                d2.weight = row_major(&w2);
                d2.bias = (0..out.len())
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(rng);
                        0.05 * v
                    })
                    .collect();
                Sequential::new(vec![Layer::Dense(d1), Layer::Dense(d2)])
            }
            GeneratorArch::TinyConv { latent_dim, channels, side, base_width } => {
                let blocks = (side / 4).trailing_zeros() as usize;
                let width = |b: usize| (base_width >> b).max(8.min(base_width));
                let mut layers =
                    vec![Layer::Dense(Dense::new(latent_dim, Shape::new(width(0), 4, 4), rng)), Layer::LeakyRelu(0.2)];
                for b in 0..blocks {
                    layers.push(Layer::ConvTranspose2d(ConvTranspose2d::new(width(b), width(b + 1), rng)));
                    layers.push(Layer::LeakyRelu(0.2));
                }
                let mut head = Conv2d::new(width(blocks), channels, 3, rng);
                head.scale_weights(0.5);
                layers.push(Layer::Conv2d(head));
                layers.push(Layer::Tanh(0.5));
                Sequential::new(layers)
            }
        }
    }
}

fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// A frozen generator split into `G₁ = layers[..split]` and
/// `G₂ = layers[split..]`. Parameters are only reachable by shared
/// reference, so they cannot change after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCodeGenerator {
    arch: GeneratorArch,
    net: Sequential,
    split: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct GeneratorHeader {
    arch: GeneratorArch,
    split_layer: usize,
    latent_dim: usize,
    seed: u64,
    tensors: usize,
}

impl MultiCodeGenerator {
    /// Randomly initialized generator.
    pub fn new(arch: GeneratorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = arch.build(&mut rng);
        Ok(Self { arch, net, split: arch.default_split(), seed })
    }

    /// Same parameters, different split layer.
    pub fn with_split(mut self, split: usize) -> Result<Self> {
        self.check_split(split)?;
        self.split = split;
        Ok(self)
    }

    pub(crate) fn check_split(&self, split: usize) -> Result<()> {
        if split == 0 || split >= self.net.len() {
            return Err(Error::InvalidArgument(format!(
                "split layer {split} outside 1..{} for this generator",
                self.net.len()
            )));
        }
        Ok(())
    }

    pub fn arch(&self) -> GeneratorArch {
        self.arch
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim()
    }

    pub fn network(&self) -> &Sequential {
        &self.net
    }

    pub fn layer_count(&self) -> usize {
        self.net.len()
    }

    pub fn output_shape(&self) -> Shape {
        self.arch.output_shape()
    }

    /// Shape of the `G₁` output at the given split.
    pub fn feature_shape_at(&self, split: usize) -> Shape {
        self.net.output_shape(0..split, self.latent_shape())
    }

    pub fn feature_shape(&self) -> Shape {
        self.feature_shape_at(self.split)
    }

    pub(crate) fn latent_shape(&self) -> Shape {
        Shape::new(self.latent_dim(), 1, 1)
    }

    pub(crate) fn latent_tensor(&self, z: &[f64]) -> Result<Tensor> {
        if z.len() != self.latent_dim() {
            return Err(Error::shape(format!("latent of length {}", self.latent_dim()), z.len()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent code".into()));
        }
        Ok(Tensor::new(self.latent_shape(), z.to_vec()))
    }

    pub(crate) fn image_from(&self, data: Vec<f64>) -> Result<Image> {
        let space = if self.output_shape().channels == 3 { ColorSpace::Rgb } else { ColorSpace::Gray };
        Image::new(self.output_shape(), data, ValueRange::Centered, space)
    }

    /// Plain single-code output `G₂(G₁(z))`.
    pub fn generate(&self, z: &[f64]) -> Result<Image> {
        let t = self.net.forward(&self.latent_tensor(z)?);
        self.image_from(t.data)
    }

    pub fn stage1(&self, z: &[f64]) -> Result<Tensor> {
        Ok(self.net.forward_span(0..self.split, &self.latent_tensor(z)?))
    }

    pub fn stage2(&self, features: &Tensor) -> Result<Image> {
        if features.shape != self.feature_shape() {
            return Err(Error::shape(self.feature_shape(), features.shape));
        }
        let t = self.net.forward_span(self.split..self.net.len(), features);
        self.image_from(t.data)
    }

    /// Hash of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        self.net.checksum()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let state = self.net.state();
        let header = GeneratorHeader {
            arch: self.arch,
            split_layer: self.split,
            latent_dim: self.latent_dim(),
            seed: self.seed,
            tensors: state.len(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Manifest(e.to_string()))?;
        let path = dir.join("generator.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
        for (i, t) in state.into_iter().enumerate() {
            save_array(dir.join(format!("tensor_{i:03}.pfaf")), &FloatArray::f64(vec![t.len()], t)?)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("generator.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let h: GeneratorHeader =
            toml::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let mut gen = Self::new(h.arch, h.seed)?.with_split(h.split_layer)?;
        let state = (0..h.tensors)
            .map(|i| load_array(dir.join(format!("tensor_{i:03}.pfaf"))).map(|a| a.data.to_f64()))
            .collect::<Result<Vec<_>>>()?;
        gen.net.load_state(&state).map_err(Error::ArrayHeader)?;
        Ok(gen)
    }
}

/// `G₂(Σ_n α_n ⊙ G₁(z_n))`, each `α_n` scaling one feature channel.
pub fn compose(gen: &MultiCodeGenerator, codes: &[Vec<f64>], alphas: &[Vec<f64>]) -> Result<Image> {
    compose_at(gen, gen.split, codes, alphas)
}

pub(crate) fn compose_at(
    gen: &MultiCodeGenerator,
    split: usize,
    codes: &[Vec<f64>],
    alphas: &[Vec<f64>],
) -> Result<Image> {
    gen.check_split(split)?;
    let fs = gen.feature_shape_at(split);
    if codes.is_empty() || codes.len() != alphas.len() {
        return Err(Error::shape(format!("{} alpha vectors", codes.len()), alphas.len()));
    }
    let mut mixed = Tensor::zeros(fs);
    for (z, a) in codes.iter().zip(alphas) {
        if a.len() != fs.channels {
            return Err(Error::shape(format!("alpha of length {}", fs.channels), a.len()));
        }
        let f = gen.net.forward_span(0..split, &gen.latent_tensor(z)?);
        mix_into(&mut mixed, &f, a);
    }
    let t = gen.net.forward_span(split..gen.net.len(), &mixed);
    gen.image_from(t.data)
}

pub(crate) fn mix_into(acc: &mut Tensor, f: &Tensor, alpha: &[f64]) {
    let plane = f.shape.plane();
    for (c, &a) in alpha.iter().enumerate() {
        for (o, v) in acc.data[c * plane..(c + 1) * plane].iter_mut().zip(&f.data[c * plane..(c + 1) * plane]) {
            *o += a * v;
        }
    }
}

/// Autoencoder pretraining schedule for a generator used as the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the `mean(z²)` penalty keeping codes near unit scale.
    pub latent_penalty: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 16, lr: 2e-3, latent_penalty: 1e-3, seed: 0 }
    }
}

/// Trains `arch` as the decoder of a linear-encoder autoencoder on
/// centered images and returns the frozen decoder with the per-epoch mean
/// reconstruction error.
pub fn pretrain_autoencoder(
    arch: GeneratorArch,
    images: &[Image],
    cfg: &PretrainConfig,
) -> Result<(MultiCodeGenerator, Vec<f64>)> {
    if images.is_empty() || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InsufficientData("autoencoder pretraining needs images, epochs and a batch size".into()));
    }
    let mut gen = MultiCodeGenerator::new(arch, cfg.seed)?;
    let out = gen.output_shape();
    for img in images {
        img.require_shape(out)?;
        img.require_range(ValueRange::Centered)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ae);
    let latent = gen.latent_dim();
    let mut enc = Sequential::new(vec![Layer::Dense(Dense::new(out.len(), Shape::new(latent, 1, 1), &mut rng))]);
    let mut dec_opt = Adam::new(&gen.net.params().iter().map(|p| p.len()).collect::<Vec<_>>());
    let mut enc_opt = Adam::new(&enc.params().iter().map(|p| p.len()).collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let px = out.len() as f64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let n = batch.len() as f64;
            let xs: Vec<Tensor> = batch.iter().map(|&i| Tensor::new(out, images[i].data().to_vec())).collect();
            let (zs, enc_trace) = enc.forward_traced(0..1, xs.clone());
            let (recon, dec_trace) = gen.net.forward_traced(0..gen.net.len(), zs.clone());
            let mut g_out = Vec::with_capacity(batch.len());
            for (r, x) in recon.iter().zip(&xs) {
                let err: f64 = r.data.iter().zip(&x.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / px;
                total += err;
                g_out.push(r.zip_map(x, |a, b| 2.0 * (a - b) / (px * n)));
            }
            if !total.is_finite() {
                return Err(Error::Divergence { stage: "generator pretraining", at: format!("epoch {epoch}") });
            }
            let mut dec_grads = gen.net.zero_grads();
            let mut g_z = gen.net.backward(&dec_trace, g_out, Some(&mut dec_grads));
            for (g, z) in g_z.iter_mut().zip(&zs) {
                let lat = latent as f64;
                g.data.iter_mut().zip(&z.data).for_each(|(gv, zv)| *gv += cfg.latent_penalty * 2.0 * zv / (lat * n));
            }
            let mut enc_grads = enc.zero_grads();
            enc.backward(&enc_trace, g_z, Some(&mut enc_grads));
            dec_opt.step(gen.net.params_mut(), &dec_grads, cfg.lr);
            enc_opt.step(enc.params_mut(), &enc_grads, cfg.lr);
        }
        history.push(total / images.len() as f64);
    }
    Ok((gen, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn linear() -> MultiCodeGenerator {
        MultiCodeGenerator::new(GeneratorArch::Linear { latent_dim: 6, channels: 1, height: 4, width: 4 }, 3).unwrap()
    }

    fn tiny() -> MultiCodeGenerator {
        MultiCodeGenerator::new(GeneratorArch::TinyConv { latent_dim: 8, channels: 3, side: 16, base_width: 16 }, 5)
            .unwrap()
    }

    fn code(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn tiny_conv_layout_supports_the_reference_splits() {
        let g = tiny();
        assert_eq!(g.layer_count(), 8);
        assert_eq!(g.output_shape(), Shape::new(3, 16, 16));
        assert_eq!(g.feature_shape_at(4), Shape::new(8, 8, 8));
        assert!(g.clone().with_split(6).is_ok());
        assert!(g.clone().with_split(0).is_err());
        assert!(g.with_split(8).is_err());
    }

    #[test]
    fn single_code_with_unit_alpha_is_plain_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in [linear(), tiny()] {
            let z = code(g.latent_dim(), &mut rng);
            let c = g.feature_shape().channels;
            let a = compose(&g, std::slice::from_ref(&z), &[vec![1.0; c]]).unwrap();
            let b = g.generate(&z).unwrap();
            let d = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(d < 1e-6);
        }
    }

    #[test]
    fn zero_alphas_give_stage2_of_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = tiny();
        let c = g.feature_shape().channels;
        let codes: Vec<_> = (0..3).map(|_| code(g.latent_dim(), &mut rng)).collect();
        let a = compose(&g, &codes, &vec![vec![0.0; c]; 3]).unwrap();
        let b = g.stage2(&Tensor::zeros(g.feature_shape())).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_compose_matches_matrix_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = linear();
        let Layer::Dense(d1) = &g.network().layers[0] else { panic!() };
        let Layer::Dense(d2) = &g.network().layers[1] else { panic!() };
        let w1 = DMatrix::from_row_slice(6, 6, &d1.weight);
        let w2 = DMatrix::from_row_slice(16, 6, &d2.weight);
        let b2 = nalgebra::DVector::from_column_slice(&d2.bias);
        let codes: Vec<_> = (0..3).map(|_| code(6, &mut rng)).collect();
        let alphas: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut h = nalgebra::DVector::zeros(6);
        for (z, a) in codes.iter().zip(&alphas) {
            let f = &w1 * nalgebra::DVector::from_column_slice(z);
            h += f.component_mul(&nalgebra::DVector::from_column_slice(a));
        }
        let expected = &w2 * h + b2;
        let got = compose(&g, &codes, &alphas).unwrap();
        for (e, v) in expected.iter().zip(got.data()) {
            assert!((e - v).abs() < 1e-6);
        }
        // orthonormal columns
        assert!((w2.tr_mul(&w2) - DMatrix::identity(6, 6)).abs().max() < 1e-10);
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let g = linear();
        assert!(compose(&g, &[vec![0.0; 5]], &[vec![1.0; 6]]).is_err());
        assert!(compose(&g, &[vec![0.0; 6]], &[vec![1.0; 5]]).is_err());
        assert!(compose(&g, &[vec![0.0; 6]], &[]).is_err());
        assert!(compose(&g, &[], &[]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let g = tiny().with_split(6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        g.save(dir.path()).unwrap();
        let back = MultiCodeGenerator::load(dir.path()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.checksum(), g.checksum());
    }

    #[test]
    fn pretraining_reduces_reconstruction_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = GeneratorArch::TinyConv { latent_dim: 8, channels: 1, side: 8, base_width: 8 };
        let images: Vec<Image> = (0..32)
            .map(|_| {
                let (a, b) = (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
                let data = (0..64).map(|i| if i % 8 < 4 { a } else { b }).collect();
                Image::new(Shape::new(1, 8, 8), data, ValueRange::Centered, ColorSpace::Gray).unwrap()
            })
            .collect();
        let cfg = PretrainConfig { epochs: 40, batch_size: 8, ..Default::default() };
        let (g, hist) = pretrain_autoencoder(arch, &images, &cfg).unwrap();
        assert!(hist.last().unwrap() < &(0.5 * hist[0]), "{hist:?}");
        let (g2, hist2) = pretrain_autoencoder(arch, &images, &cfg).unwrap();
        assert_eq!(g.checksum(), g2.checksum());
        assert_eq!(hist, hist2);
    }
}
