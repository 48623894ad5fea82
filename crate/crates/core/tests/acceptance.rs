//! End-to-end acceptance checks. Runs without the libtest harness and
//! prints one PASS/FAIL line per criterion; exits nonzero if any fail.

use std::time::{Duration, Instant};

use priorfuse::degradations::{sample_random_patches, ForwardModel, Mask, RandomMaskParams};
use priorfuse::experiments::{
    fidelity_bias_experiment, load_eval_records, load_items, run_all, FidelityBiasConfig, RunDir, RunManifest, Split,
};
use priorfuse::fusion::{fuse, FusionInput};
use priorfuse::imagestack::{ColorSpace, Image, Shape, ValueRange};
use priorfuse::metrics::{auc_colorization, AbGrid};
use priorfuse::phinet::{PhiNet, PhiNetConfig, TrainConfig, TrainSample, Trainer};
use priorfuse::priors::{
    compose, gaussian_map_estimate, gaussian_phi, inversion_objective, invert, GaussianPixelPrior, GeneratorArch,
    InversionConfig, LossWeights, MultiCodeGenerator,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn img(shape: Shape, data: Vec<f64>) -> Image {
    Image::new(shape, data, ValueRange::Centered, ColorSpace::Gray).unwrap()
}

fn map_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let y: f64 = rng.random_range(-0.5..0.5);
        let mean: f64 = rng.random_range(-0.5..0.5);
        let sx: f64 = rng.random_range(0.01..0.5);
        let sn: f64 = rng.random_range(0.01..0.5);
        // the mode lies between y and the prior mean
        let (lo, hi) = (y.min(mean), y.max(mean));
        let log_post = |x: f64| -(y - x).powi(2) / (2.0 * sn * sn) - (x - mean).powi(2) / (2.0 * sx * sx);
        let steps = ((hi - lo) / 1e-4).ceil() as usize;
        let mut best = (f64::NEG_INFINITY, lo);
        for k in 0..=steps {
            let x = (lo + k as f64 * 1e-4).min(hi);
            let v = log_post(x);
            if v > best.0 {
                best = (v, x);
            }
        }
        let s = Shape::new(1, 1, 1);
        let prior = GaussianPixelPrior::new(img(s, vec![mean]), vec![sx]).unwrap();
        let est = gaussian_map_estimate(&img(s, vec![y]), &prior, sn).unwrap().data()[0];
        worst = worst.max((est - best.1).abs());
    }
    let t = start.elapsed();
    check(worst < 1e-3 && t < Duration::from_secs(60), format!("max |closed form - grid| = {worst:.2e} in {t:.1?}"))
}

fn fusion_matches_map() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let s = Shape::new(3, rng.random_range(1..12), rng.random_range(1..12));
        let rand_img = |rng: &mut ChaCha8Rng| img(s, (0..s.len()).map(|_| rng.random_range(-0.5..0.5)).collect());
        let y = rand_img(&mut rng);
        let mean = rand_img(&mut rng);
        let std: Vec<f64> = (0..s.len()).map(|_| rng.random_range(0.001..0.5)).collect();
        let sn: f64 = rng.random_range(0.001..0.5);
        let prior = GaussianPixelPrior::new(mean.clone(), std).unwrap();
        let phi = gaussian_phi(&prior, sn).unwrap();
        let fused = fuse(&FusionInput {
            observation: &y,
            phi: &phi,
            prior: &mean,
            g_inv: priorfuse::degradations::GInverse::Identity,
        })
        .unwrap();
        let map = gaussian_map_estimate(&y, &prior, sn).unwrap();
        for (a, b) in fused.data().iter().zip(map.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst < 1e-6, format!("max |fuse - MAP| = {worst:.2e} over 100 images"))
}

fn linear_inversion_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let gen = MultiCodeGenerator::new(
            GeneratorArch::Linear { latent_dim: 6, channels: 1, height: 6, width: 6 },
            100 + seed,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = gen.output_shape();
        let y = img(s, (0..s.len()).map(|_| rng.random_range(-0.5..0.5)).collect());
        // closed form: b + W Wᵀ (y - b) for the last dense layer x = W h + b
        let zero = compose(&gen, &[vec![0.0; 6]], &[vec![1.0; 6]]).unwrap();
        let b = zero.data().to_vec();
        let basis: Vec<Vec<f64>> = (0..6)
            .map(|j| {
                let mut h = vec![0.0; 6];
                h[j] = 1.0;
                let stage = gen.stage1(&h).unwrap();
                gen.stage2(&stage).unwrap().data().iter().zip(&b).map(|(v, bb)| v - bb).collect()
            })
            .collect();
        // stage1 is orthogonal, so the images of unit codes span the range; solve the normal equations
        let gram =
            nalgebra::DMatrix::from_fn(6, 6, |i, j| basis[i].iter().zip(&basis[j]).map(|(a, c)| a * c).sum::<f64>());
        let rhs = nalgebra::DVector::from_fn(6, |i, _| {
            basis[i].iter().zip(y.data()).zip(&b).map(|((a, yy), bb)| a * (yy - bb)).sum::<f64>()
        });
        let coef = gram.cholesky().unwrap().solve(&rhs);
        let ls: Vec<f64> = (0..s.len()).map(|p| b[p] + (0..6).map(|j| coef[j] * basis[j][p]).sum::<f64>()).collect();

        let cfg = InversionConfig {
            num_codes: 1,
            iterations: 3000,
            step_size: 0.05,
            loss_weights: LossWeights { pixel: 1.0, gradient: 0.0 },
            seed,
            split_layer: None,
        };
        let res = invert(&gen, &y, &ForwardModel::Identity, &cfg).unwrap();
        let num: f64 = res.projection.data().iter().zip(&ls).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
        let den: f64 = ls.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    let t = start.elapsed();
    check(
        worst < 1e-3 && t < Duration::from_secs(120),
        format!("max relative error {worst:.2e} over 20 targets in {t:.1?}"),
    )
}

fn composition_and_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gens = [
        MultiCodeGenerator::new(GeneratorArch::Linear { latent_dim: 5, channels: 3, height: 4, width: 4 }, 1).unwrap(),
        MultiCodeGenerator::new(GeneratorArch::TinyConv { latent_dim: 8, channels: 3, side: 16, base_width: 16 }, 2)
            .unwrap(),
    ];
    let mut worst_compose: f64 = 0.0;
    for g in &gens {
        let z: Vec<f64> = (0..g.latent_dim()).map(|_| rng.sample(StandardNormal)).collect();
        let c = g.feature_shape().channels;
        let a = compose(g, std::slice::from_ref(&z), &[vec![1.0; c]]).unwrap();
        let b = g.generate(&z).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            worst_compose = worst_compose.max((u - v).abs());
        }
    }
    let g = &gens[1];
    let split = g.split();
    let c = g.feature_shape_at(split).channels;
    let bits: Vec<u8> = (0..256).map(|i| u8::from((i / 16) % 5 == 1)).collect();
    let f = ForwardModel::Mask(Mask::new(16, 16, bits).unwrap());
    let s = g.output_shape();
    let y = Image::new(
        s,
        (0..s.len()).map(|_| rng.random_range(-0.5..0.5)).collect(),
        ValueRange::Centered,
        ColorSpace::Rgb,
    )
    .unwrap();
    let codes: Vec<Vec<f64>> =
        (0..2).map(|_| (0..g.latent_dim()).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let alphas: Vec<Vec<f64>> = (0..2).map(|_| (0..c).map(|_| rng.random_range(0.2..0.8)).collect()).collect();
    let w = LossWeights { pixel: 1.0, gradient: 0.0 };
    let eval = inversion_objective(g, split, &y, &f, &codes, &alphas, w).unwrap();
    let loss = |cs: &[Vec<f64>], al: &[Vec<f64>]| inversion_objective(g, split, &y, &f, cs, al, w).unwrap().loss;
    let h = 1e-5;
    let mut worst_grad: f64 = 0.0;
    let rel = |fd: f64, an: f64| (fd - an).abs() / an.abs().max(1e-3);
    for (n, i) in [(0, 0), (0, 3), (1, 7)] {
        let (mut p, mut m) = (codes.clone(), codes.clone());
        p[n][i] += h;
        m[n][i] -= h;
        worst_grad = worst_grad.max(rel((loss(&p, &alphas) - loss(&m, &alphas)) / (2.0 * h), eval.grad_codes[n][i]));
    }
    for (n, i) in [(0, 0), (1, c - 1)] {
        let (mut p, mut m) = (alphas.clone(), alphas.clone());
        p[n][i] += h;
        m[n][i] -= h;
        worst_grad = worst_grad.max(rel((loss(&codes, &p) - loss(&codes, &m)) / (2.0 * h), eval.grad_alphas[n][i]));
    }
    check(
        worst_compose < 1e-6 && worst_grad < 1e-3,
        format!("compose vs generate {worst_compose:.2e}, gradient relative error {worst_grad:.2e}"),
    )
}

fn run_preset(name: &str, seed: u64) -> Result<(RunManifest, RunDir, tempfile::TempDir), String> {
    let mut m = RunManifest::preset(name).map_err(|e| e.to_string())?;
    m.seed = seed;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = RunDir::new(tmp.path().join("run"));
    run_all(&m, &run).map_err(|e| format!("{name} seed {seed}: {e}"))?;
    Ok((m, run, tmp))
}

fn inpainting_phi_recovery() -> Outcome {
    let start = Instant::now();
    let (_, run, _tmp) = run_preset("toy-inpainting", 0)?;
    let items = load_items(&run).map_err(|e| e.to_string())?;
    let n_train = items.iter().filter(|i| i.split == Split::Train).count();
    let records = load_eval_records(&run).map_err(|e| e.to_string())?;
    let ious: Vec<f64> = records.iter().filter_map(|r| r.mask_iou).collect();
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    check(
        n_train >= 500 && ious.len() >= 100 && mean >= 0.90,
        format!("{n_train} train / {} test, mean IoU {mean:.4} in {:.0?}", ious.len(), start.elapsed()),
    )
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Criteria 6 and 7 share the blind-AWGN runs.
fn awgn_runs() -> Result<Vec<Vec<priorfuse::experiments::EvalRecord>>, String> {
    (0..3u64)
        .map(|seed| {
            let (_, run, _tmp) = run_preset("toy-awgn", seed)?;
            load_eval_records(&run).map_err(|e| e.to_string())
        })
        .collect()
}

fn awgn_direction(runs: &[Vec<priorfuse::experiments::EvalRecord>]) -> Outcome {
    let r = &runs[0];
    let fused = mean(r.iter().map(|x| x.psnr));
    let prior = mean(r.iter().map(|x| x.prior_psnr));
    let noisy = mean(r.iter().map(|x| x.fidelity_psnr));
    check(
        r.len() >= 100 && fused >= prior && fused >= noisy,
        format!("{} images: fused {fused:.3} dB, prior {prior:.3} dB, noisy {noisy:.3} dB", r.len()),
    )
}

fn awgn_correlation(runs: &[Vec<priorfuse::experiments::EvalRecord>]) -> Outcome {
    let rs: Vec<f64> = runs
        .iter()
        .map(|r| {
            let phi: Vec<f64> = r.iter().map(|x| x.mean_phi).collect();
            let sigma: Vec<f64> = r.iter().map(|x| x.sigma.unwrap()).collect();
            priorfuse::metrics::pearson(&phi, &sigma).unwrap()
        })
        .collect();
    check(rs.iter().all(|&r| r >= 0.3), format!("r(mean phi, sigma) per seed = {rs:.4?}"))
}

fn fidelity_bias() -> Outcome {
    let start = Instant::now();
    let base = FidelityBiasConfig::default();
    let with =
        fidelity_bias_experiment(&FidelityBiasConfig { train: TrainConfig { rho: 1e-5, ..base.train }, ..base }, 0)
            .map_err(|e| e.to_string())?;
    let without =
        fidelity_bias_experiment(&FidelityBiasConfig { train: TrainConfig { rho: 0.0, ..base.train }, ..base }, 0)
            .map_err(|e| e.to_string())?;
    let (a, b) = (*with.last().unwrap(), *without.last().unwrap());
    check(a < 0.1 && b > 0.4, format!("mean phi {a:.4} with rho = 1e-5, {b:.4} with rho = 0 ({:.0?})", start.elapsed()))
}

fn mask_sampler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = RandomMaskParams::default();
    let mut counts = [0usize; 5];
    let mut bad = 0;
    for _ in 0..10_000 {
        let patches = sample_random_patches(256, 256, &params, &mut rng).map_err(|e| e.to_string())?;
        counts[patches.len().min(4)] += 1;
        bad += patches
            .iter()
            .filter(|p| p.height < 9 || p.width < 9 || p.top + p.height > 256 || p.left + p.width > 256)
            .count();
    }
    let freq: Vec<f64> = counts[2..].iter().map(|&c| c as f64 / 10_000.0).collect();
    let off = freq.iter().map(|f| (f - 1.0 / 3.0).abs()).fold(0.0, f64::max);
    check(
        off <= 0.03 && bad == 0 && counts[0] + counts[1] == 0,
        format!("patch-count frequencies {freq:.4?}, {bad} invalid patches"),
    )
}

fn auc_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    let mut perfect = true;
    for _ in 0..50 {
        let grid = |rng: &mut ChaCha8Rng| {
            let v = |rng: &mut ChaCha8Rng| (0..256).map(|_| rng.random_range(-128.0..127.0)).collect::<Vec<f64>>();
            AbGrid::new(16, 16, v(rng), v(rng)).unwrap()
        };
        let (p, g) = (grid(&mut rng), grid(&mut rng));
        let fast = auc_colorization(&p, &g).unwrap();
        let mut total = 0.0;
        for t in 0..=150 {
            let mut hits = 0;
            for i in 0..256 {
                let e = ((p.a[i] - g.a[i]).powi(2) + (p.b[i] - g.b[i]).powi(2)).sqrt();
                if e <= t as f64 {
                    hits += 1;
                }
            }
            total += hits as f64 / 256.0;
        }
        worst = worst.max((fast.auc - 100.0 * total / 151.0).abs());
        perfect &= auc_colorization(&g, &g).unwrap().auc == 100.0;
    }
    check(
        worst < 1e-9 && perfect,
        format!("max |fast - brute force| = {worst:.2e}, identical inputs score 100: {perfect}"),
    )
}

fn schedule_conformance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = Shape::new(1, 4, 4);
    let data: Vec<TrainSample> = (0..10)
        .map(|_| {
            let v = |rng: &mut ChaCha8Rng| img(s, (0..16).map(|_| rng.random_range(-0.5..0.5)).collect());
            let (x, y, p) = (v(&mut rng), v(&mut rng), v(&mut rng));
            TrainSample::new(y.clone(), y, p, x).unwrap()
        })
        .collect();
    let net = PhiNet::new(PhiNetConfig { depth: 3, width: 4, kernel: 3, in_channels: 1, out_channels: 1 }, 0).unwrap();
    let cfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
    let mut trainer = Trainer::new(net, cfg).map_err(|e| e.to_string())?;
    trainer.run(&data, |_| Ok(())).map_err(|e| e.to_string())?;
    let trace = &trainer.history().lr_trace;
    let per_epoch = 3;
    let period = 4 * per_epoch;
    let mut worst: f64 = 0.0;
    let mut restarts = Vec::new();
    for (k, &lr) in trace.iter().enumerate() {
        let t = (k % period) as f64 / period as f64;
        worst = worst.max((lr - 0.005 * (1.0 + (std::f64::consts::PI * t).cos())).abs());
        if lr == 0.01 {
            restarts.push(k / per_epoch);
        }
    }
    let expected: Vec<usize> = (0..25).step_by(4).collect();
    check(
        trace.len() == 25 * per_epoch && restarts == expected && worst < 1e-9,
        format!("{} steps, restarts at epochs {restarts:?}, max deviation {worst:.2e}", trace.len()),
    )
}

fn determinism() -> Outcome {
    let mut details = Vec::new();
    for name in ["smoke", "toy-generator"] {
        let (_, a, _ta) = run_preset(name, 5)?;
        let (_, b, _tb) = run_preset(name, 5)?;
        let ta = std::fs::read(a.metrics()).map_err(|e| e.to_string())?;
        let tb = std::fs::read(b.metrics()).map_err(|e| e.to_string())?;
        if ta != tb {
            return Err(format!("{name}: metric tables differ"));
        }
        details.push(format!("{name}: {} identical bytes", ta.len()));
    }
    Ok(details.join(", "))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| match &outcome {
        Ok(d) => println!("PASS [{n:>2}] {name}: {d}"),
        Err(d) => {
            failed += 1;
            println!("FAIL [{n:>2}] {name}: {d}");
        }
    };
    report(1, "MAP closed form vs grid search", map_oracle());
    report(2, "Gaussian fusion equals MAP estimate", fusion_matches_map());
    report(3, "linear inversion reaches least squares", linear_inversion_oracle());
    report(4, "multi-code composition and gradient", composition_and_gradient());
    report(5, "inpainting phi recovers the mask", inpainting_phi_recovery());
    match awgn_runs() {
        Ok(runs) => {
            report(6, "blind AWGN fused PSNR improves", awgn_direction(&runs));
            report(7, "blind AWGN phi-sigma correlation", awgn_correlation(&runs));
        }
        Err(e) => {
            report(6, "blind AWGN fused PSNR improves", Err(e.clone()));
            report(7, "blind AWGN phi-sigma correlation", Err(e));
        }
    }
    report(8, "l1 term biases phi toward the data", fidelity_bias());
    report(9, "random mask sampler distribution", mask_sampler());
    report(10, "AuC exactness", auc_exactness());
    report(11, "warm-restart schedule", schedule_conformance());
    report(12, "end-to-end determinism", determinism());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 12 acceptance criteria passed");
}
