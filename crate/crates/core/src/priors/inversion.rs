use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::generator::{compose_at, mix_into, MultiCodeGenerator};
use crate::degradations::ForwardModel;
use crate::error::{Error, Result};
use crate::imagestack::{Image, Shape};
use crate::nn::Tensor;

/// Weights of the two inversion loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Squared-ℓ2 pixel term.
    pub pixel: f64,
    /// ℓ1 distance between forward-difference image gradients.
    pub gradient: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pixel: 1.0, gradient: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub num_codes: usize,
    pub iterations: usize,
    pub step_size: f64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the generator's own split layer.
    #[serde(default)]
    pub split_layer: Option<usize>,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            num_codes: 4,
            iterations: 200,
            step_size: 0.05,
            loss_weights: LossWeights::default(),
            seed: 0,
            split_layer: None,
        }
    }
}

/// Named presets: the reference configurations plus a desk-scale one.
pub const INVERSION_PRESETS: &[&str] = &["colorization-paper", "inpainting-paper", "denoising-paper", "toy"];

impl InversionConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let reference =
            |split, num_codes, iterations| Self { num_codes, iterations, split_layer: Some(split), ..Self::default() };
        match name {
            "colorization-paper" => Ok(reference(6, 20, 1500)),
            "inpainting-paper" | "denoising-paper" => Ok(reference(4, 30, 3000)),
            "toy" => Ok(Self::default()),
            other => Err(Error::InvalidArgument(format!(
                "unknown inversion preset {other:?}; known: {}",
                INVERSION_PRESETS.join(", ")
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_codes == 0 || self.iterations == 0 {
            return Err(Error::InvalidArgument("inversion needs at least one code and one iteration".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {}", self.step_size)));
        }
        if !(self.loss_weights.pixel >= 0.0 && self.loss_weights.gradient >= 0.0) {
            return Err(Error::InvalidArgument("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub codes: Vec<Vec<f64>>,
    pub alphas: Vec<Vec<f64>>,
    /// Split layer the codes and alphas refer to.
    pub split_layer: usize,
    /// `compose(codes, alphas)`, recomputed from the stored values.
    pub projection: Image,
    pub final_loss: f64,
    pub initial_loss: f64,
}

/// Loss of the degraded candidate `fx` against the observation `y`, and
/// its gradient with respect to `fx`.
pub fn observation_loss(fx: &[f64], y: &[f64], shape: Shape, w: LossWeights) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; fx.len()];
    if w.pixel > 0.0 {
        for ((g, a), b) in grad.iter_mut().zip(fx).zip(y) {
            let d = a - b;
            loss += w.pixel * d * d;
            *g += 2.0 * w.pixel * d;
        }
    }
    if w.gradient > 0.0 {
        let (h, wd) = (shape.height, shape.width);
        let mut term = |i: usize, j: usize| {
            let d = (fx[j] - fx[i]) - (y[j] - y[i]);
            loss += w.gradient * d.abs();
            let s = w.gradient
                * if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            grad[j] += s;
            grad[i] -= s;
        };
        for c in 0..shape.channels {
            let base = c * h * wd;
            for r in 0..h {
                for col in 0..wd {
                    let i = base + r * wd + col;
                    if col + 1 < wd {
                        term(i, i + 1);
                    }
                    if r + 1 < h {
                        term(i, i + wd);
                    }
                }
            }
        }
    }
    (loss, grad)
}

/// Inversion objective at `(codes, alphas)` with gradients for both.
pub struct ObjectiveEval {
    pub loss: f64,
    pub grad_codes: Vec<Vec<f64>>,
    pub grad_alphas: Vec<Vec<f64>>,
}

pub fn inversion_objective(
    gen: &MultiCodeGenerator,
    split: usize,
    y: &Image,
    f: &ForwardModel,
    codes: &[Vec<f64>],
    alphas: &[Vec<f64>],
    w: LossWeights,
) -> Result<ObjectiveEval> {
    gen.check_split(split)?;
    let net = gen.network();
    let out_shape = gen.output_shape();
    let obs_shape = f.output_shape(out_shape);
    y.require_shape(obs_shape)?;
    let fs = gen.feature_shape_at(split);
    if codes.len() != alphas.len() || alphas.iter().any(|a| a.len() != fs.channels) {
        return Err(Error::shape(format!("{} alpha vectors of length {}", codes.len(), fs.channels), alphas.len()));
    }

    let zs = codes.iter().map(|z| gen.latent_tensor(z)).collect::<Result<Vec<_>>>()?;
    let (feats, trace1) = net.forward_traced(0..split, zs);
    let mut mixed = Tensor::zeros(fs);
    for (f_n, a) in feats.iter().zip(alphas) {
        mix_into(&mut mixed, f_n, a);
    }
    let (x, trace2) = net.forward_traced(split..net.len(), vec![mixed]);
    let x = &x[0];
    let fx = f.apply(out_shape, &x.data)?;
    let (loss, g_fx) = observation_loss(&fx, y.data(), obs_shape, w);
    if !loss.is_finite() {
        return Ok(ObjectiveEval { loss, grad_codes: vec![], grad_alphas: vec![] });
    }
    let g_x = f.vjp(out_shape, &x.data, &g_fx)?;
    let g_mixed = net.backward(&trace2, vec![Tensor::new(out_shape, g_x)], None).remove(0);

    let plane = fs.plane();
    let mut grad_alphas = Vec::with_capacity(alphas.len());
    let mut g_feats = Vec::with_capacity(alphas.len());
    for (f_n, a) in feats.iter().zip(alphas) {
        let mut ga = vec![0.0; fs.channels];
        let mut gf = vec![0.0; fs.len()];
        for c in 0..fs.channels {
            let r = c * plane..(c + 1) * plane;
            ga[c] = g_mixed.data[r.clone()].iter().zip(&f_n.data[r.clone()]).map(|(g, v)| g * v).sum();
            for (o, g) in gf[r.clone()].iter_mut().zip(&g_mixed.data[r]) {
                *o = a[c] * g;
            }
        }
        grad_alphas.push(ga);
        g_feats.push(Tensor::new(fs, gf));
    }
    let grad_codes = net.backward(&trace1, g_feats, None).into_iter().map(|t| t.data).collect();
    Ok(ObjectiveEval { loss, grad_codes, grad_alphas })
}

/// Projects the observation `y` onto the generator's range through the
/// forward model `f`, by plain gradient descent over the codes and channel
/// weights from `z ~ N(0, I)`, `α = 1/N`. Returns the best iterate.
pub fn invert(gen: &MultiCodeGenerator, y: &Image, f: &ForwardModel, cfg: &InversionConfig) -> Result<InversionResult> {
    cfg.validate()?;
    let split = cfg.split_layer.unwrap_or(gen.split());
    gen.check_split(split)?;
    let channels = gen.feature_shape_at(split).channels;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.num_codes;
    let mut codes: Vec<Vec<f64>> =
        (0..n).map(|_| (0..gen.latent_dim()).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let mut alphas = vec![vec![1.0 / n as f64; channels]; n];

    let mut best = (f64::INFINITY, codes.clone(), alphas.clone());
    let mut initial_loss = f64::NAN;
    for it in 0..=cfg.iterations {
        let eval = inversion_objective(gen, split, y, f, &codes, &alphas, cfg.loss_weights)?;
        if !eval.loss.is_finite() {
            return Err(Error::Divergence { stage: "inversion", at: format!("iteration {it}") });
        }
        if it == 0 {
            initial_loss = eval.loss;
        }
        if eval.loss < best.0 {
            best = (eval.loss, codes.clone(), alphas.clone());
        }
        if it == cfg.iterations {
            break;
        }
        for (z, g) in codes.iter_mut().zip(&eval.grad_codes) {
            z.iter_mut().zip(g).for_each(|(v, gv)| *v -= cfg.step_size * gv);
        }
        for (a, g) in alphas.iter_mut().zip(&eval.grad_alphas) {
            a.iter_mut().zip(g).for_each(|(v, gv)| *v -= cfg.step_size * gv);
        }
    }
    let (final_loss, codes, alphas) = best;
    let projection = compose_at(gen, split, &codes, &alphas)?;
    Ok(InversionResult { codes, alphas, split_layer: split, projection, final_loss, initial_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::GeneratorArch;
    use rand::Rng;

    fn tiny() -> MultiCodeGenerator {
        MultiCodeGenerator::new(GeneratorArch::TinyConv { latent_dim: 6, channels: 3, side: 8, base_width: 8 }, 11)
            .unwrap()
    }

    fn observation(gen: &MultiCodeGenerator, f: &ForwardModel, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..gen.latent_dim()).map(|_| rng.sample(StandardNormal)).collect();
        let x = gen.generate(&z).unwrap();
        let shape = f.output_shape(x.shape());
        let data =
            f.apply(x.shape(), x.data()).unwrap().into_iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
        Image::new(shape, data, x.range(), x.space()).unwrap()
    }

    #[test]
    fn presets() {
        let c = InversionConfig::preset("colorization-paper").unwrap();
        assert_eq!((c.split_layer, c.num_codes, c.iterations), (Some(6), 20, 1500));
        for name in ["inpainting-paper", "denoising-paper"] {
            let c = InversionConfig::preset(name).unwrap();
            assert_eq!((c.split_layer, c.num_codes, c.iterations), (Some(4), 30, 3000));
        }
        assert!(InversionConfig::preset("nope").is_err());
    }

    #[test]
    fn gradient_term_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = Shape::new(2, 3, 4);
        let fx: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let y: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let w = LossWeights { pixel: 0.7, gradient: 0.3 };
        let (_, g) = observation_loss(&fx, &y, shape, w);
        for i in 0..shape.len() {
            let h = 1e-7;
            let mut p = fx.clone();
            let mut m = fx.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (observation_loss(&p, &y, shape, w).0 - observation_loss(&m, &y, shape, w).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5, "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let gen = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = gen.feature_shape().channels;
        let mut codes: Vec<Vec<f64>> = (0..2).map(|_| (0..6).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let mut alphas: Vec<Vec<f64>> = (0..2).map(|_| (0..c).map(|_| rng.random_range(0.2..0.8)).collect()).collect();
        for f in [ForwardModel::Identity, ForwardModel::Luminance] {
            let y = observation(&gen, &f, 3);
            let w = LossWeights { pixel: 1.0, gradient: 0.0 };
            let eval = inversion_objective(&gen, gen.split(), &y, &f, &codes, &alphas, w).unwrap();
            let loss_at = |codes: &[Vec<f64>], alphas: &[Vec<f64>]| {
                inversion_objective(&gen, gen.split(), &y, &f, codes, alphas, w).unwrap().loss
            };
            let h = 1e-6;
            for (n, i) in [(0, 0), (1, 3), (0, 5)] {
                let base = codes[n][i];
                codes[n][i] = base + h;
                let lp = loss_at(&codes, &alphas);
                codes[n][i] = base - h;
                let lm = loss_at(&codes, &alphas);
                codes[n][i] = base;
                let fd = (lp - lm) / (2.0 * h);
                let an = eval.grad_codes[n][i];
                assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6), "z {fd} vs {an}");
            }
            for (n, i) in [(0, 0), (1, c - 1)] {
                let base = alphas[n][i];
                alphas[n][i] = base + h;
                let lp = loss_at(&codes, &alphas);
                alphas[n][i] = base - h;
                let lm = loss_at(&codes, &alphas);
                alphas[n][i] = base;
                let fd = (lp - lm) / (2.0 * h);
                let an = eval.grad_alphas[n][i];
                assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6), "alpha {fd} vs {an}");
            }
        }
    }

    #[test]
    fn invert_is_deterministic_and_never_worse_than_start() {
        let gen = tiny();
        let before = gen.checksum();
        let f = ForwardModel::Identity;
        let y = observation(&gen, &f, 4);
        let cfg = InversionConfig { num_codes: 3, iterations: 60, seed: 9, ..Default::default() };
        let a = invert(&gen, &y, &f, &cfg).unwrap();
        let b = invert(&gen, &y, &f, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.final_loss <= a.initial_loss);
        assert_eq!(gen.checksum(), before);
        let again = compose_at(&gen, a.split_layer, &a.codes, &a.alphas).unwrap();
        let d = again.data().iter().zip(a.projection.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(d <= 1e-6);
        let longer = invert(&gen, &y, &f, &InversionConfig { iterations: 180, ..cfg.clone() }).unwrap();
        assert!(longer.final_loss <= a.final_loss);
    }

    #[test]
    fn divergence_names_the_iteration() {
        let gen = MultiCodeGenerator::new(GeneratorArch::Linear { latent_dim: 4, channels: 1, height: 4, width: 4 }, 1)
            .unwrap();
        let f = ForwardModel::Identity;
        let y = observation(&gen, &f, 5);
        let cfg = InversionConfig { num_codes: 1, iterations: 5000, step_size: 10.0, ..Default::default() };
        match invert(&gen, &y, &f, &cfg) {
            Err(Error::Divergence { stage: "inversion", at }) => assert!(at.starts_with("iteration ")),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let gen = tiny();
        let y = observation(&gen, &ForwardModel::Luminance, 6);
        assert!(invert(&gen, &y, &ForwardModel::Identity, &InversionConfig::default()).is_err());
        let bad = InversionConfig { num_codes: 0, ..Default::default() };
        assert!(invert(&gen, &y, &ForwardModel::Luminance, &bad).is_err());
    }
}
