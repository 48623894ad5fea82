use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_slices, phi_gradient};
use super::{PhiNet, PhiNetConfig};
use crate::error::{Error, Result};
use crate::imagestack::{load_array, save_array, FloatArray, Image, ValueRange};
use crate::nn::{Sgd, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub rho: f64,
    pub epochs: usize,
    /// Warm-restart period, in epochs.
    pub restart_epochs: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 8, lr0: 0.01, rho: 1e-5, epochs: 25, restart_epochs: 4, momentum: 0.9, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.restart_epochs == 0 {
            return Err(Error::InvalidArgument("batch size, epochs and restart period must be positive".into()));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho must be nonnegative, got {}", self.rho)));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("lr0 must be positive and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts: `lr0 (1 + cos(π t/P)) / 2` with
/// `t = step mod P`.
pub fn cosine_warm_restart_lr(lr0: f64, step: usize, period_steps: usize) -> f64 {
    let t = (step % period_steps) as f64 / period_steps as f64;
    0.5 * lr0 * (1.0 + (PI * t).cos())
}

/// One training example, every image already in loss space.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// Network input (centered).
    pub input: Image,
    /// `g⁻¹(y)`.
    pub fidelity: Image,
    /// Frozen prior projection.
    pub prior: Image,
    pub target: Image,
}

impl TrainSample {
    pub fn new(input: Image, fidelity: Image, prior: Image, target: Image) -> Result<Self> {
        input.require_range(ValueRange::Centered)?;
        prior.require_shape(fidelity.shape())?;
        target.require_shape(fidelity.shape())?;
        let (a, b) = (input.shape(), fidelity.shape());
        if (a.height, a.width) != (b.height, b.width) {
            return Err(Error::shape(b, a));
        }
        Ok(Self { input, fidelity, prior, target })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean per-sample training loss of each completed epoch.
    pub epoch_loss: Vec<f64>,
    /// Learning rate used at every optimizer step.
    pub lr_trace: Vec<f64>,
}

/// Metadata stored next to the tensors of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub phinet: PhiNetConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    /// ChaCha word position of the shuffling stream, as decimal text.
    pub rng_word_pos: String,
    pub network_tensors: usize,
    pub epoch_loss: Vec<f64>,
}

/// Resumable SGD-with-momentum training of a [`PhiNet`].
pub struct Trainer {
    net: PhiNet,
    cfg: TrainConfig,
    opt: Sgd,
    rng: ChaCha8Rng,
    epoch: usize,
    history: TrainHistory,
}

impl Trainer {
    pub fn new(net: PhiNet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Sgd::new(cfg.momentum, &net.param_sizes());
        Ok(Self { net, cfg, opt, rng: ChaCha8Rng::seed_from_u64(cfg.seed), epoch: 0, history: TrainHistory::default() })
    }

    pub fn net(&self) -> &PhiNet {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn into_parts(self) -> (PhiNet, TrainHistory) {
        (self.net, self.history)
    }

    pub fn run_epoch(&mut self, data: &[TrainSample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InsufficientData("empty training set".into()));
        }
        let out_shape = self.net.output_shape(data[0].input.shape());
        if data[0].fidelity.shape() != out_shape {
            return Err(Error::shape(out_shape, data[0].fidelity.shape()));
        }
        let bs = self.cfg.batch_size;
        let steps_per_epoch = data.len().div_ceil(bs);
        let period = self.cfg.restart_epochs * steps_per_epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for (k, batch) in order.chunks(bs).enumerate() {
            let lr = cosine_warm_restart_lr(self.cfg.lr0, self.epoch * steps_per_epoch + k, period);
            let inputs: Vec<Tensor> =
                batch.iter().map(|&i| Tensor::new(data[i].input.shape(), data[i].input.data().to_vec())).collect();
            let (phis, trace) = self.net.forward_train(inputs);
            let n = batch.len() as f64;
            let mut grad_phi = Vec::with_capacity(batch.len());
            let mut batch_total = 0.0;
            for (phi, &i) in phis.iter().zip(batch) {
                let s = &data[i];
                if phi.shape != s.fidelity.shape() {
                    return Err(Error::shape(s.fidelity.shape(), phi.shape));
                }
                let (f, p, x) = (s.fidelity.data(), s.prior.data(), s.target.data());
                batch_total += loss_slices(&phi.data, f, p, x, self.cfg.rho);
                let g = phi_gradient(&phi.data, f, p, x, self.cfg.rho).into_iter().map(|v| v / n).collect();
                grad_phi.push(Tensor::new(phi.shape, g));
            }
            if !batch_total.is_finite() {
                return Err(Error::Divergence { stage: "training", at: format!("epoch {} step {k}", self.epoch) });
            }
            total += batch_total;
            let mut grads = self.net.zero_grads();
            self.net.backward(&trace, &phis, grad_phi, &mut grads);
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { stage: "training", at: format!("epoch {} step {k}", self.epoch) });
            }
            self.opt.step(self.net.params_mut(), &grads, lr);
            self.history.lr_trace.push(lr);
        }
        let mean = total / data.len() as f64;
        self.history.epoch_loss.push(mean);
        self.epoch += 1;
        log::debug!("epoch {} loss {mean:.6}", self.epoch);
        Ok(mean)
    }

    /// Runs the remaining epochs, calling `after_epoch` after each one.
    pub fn run(&mut self, data: &[TrainSample], mut after_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            self.run_epoch(data)?;
            after_epoch(self)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let state = self.net.state();
        let meta = Checkpoint {
            phinet: self.net.config(),
            train: self.cfg,
            epoch: self.epoch,
            rng_word_pos: self.rng.get_word_pos().to_string(),
            network_tensors: state.len(),
            epoch_loss: self.history.epoch_loss.clone(),
        };
        for (i, t) in state.into_iter().enumerate() {
            save_array(dir.join(format!("net_{i:03}.pfaf")), &FloatArray::f64(vec![t.len()], t)?)?;
        }
        for (i, v) in self.opt.velocity.iter().enumerate() {
            save_array(dir.join(format!("velocity_{i:03}.pfaf")), &FloatArray::f64(vec![v.len()], v.clone())?)?;
        }
        let lr = &self.history.lr_trace;
        save_array(dir.join("lr_trace.pfaf"), &FloatArray::f64(vec![lr.len()], lr.clone())?)?;
        let text = toml::to_string(&meta).map_err(|e| Error::Manifest(e.to_string()))?;
        // metadata last: its presence marks a complete checkpoint
        let path = dir.join("checkpoint.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("checkpoint.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Checkpoint =
            toml::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let mut net = PhiNet::new(meta.phinet, 0)?;
        let state = (0..meta.network_tensors)
            .map(|i| load_array(dir.join(format!("net_{i:03}.pfaf"))).map(|a| a.data.to_f64()))
            .collect::<Result<Vec<_>>>()?;
        net.load_state(&state)?;
        let mut trainer = Trainer::new(net, meta.train)?;
        for (i, v) in trainer.opt.velocity.iter_mut().enumerate() {
            let a = load_array(dir.join(format!("velocity_{i:03}.pfaf")))?.data.to_f64();
            if a.len() != v.len() {
                return Err(Error::ArrayHeader(format!(
                    "velocity {i}: expected {} values, found {}",
                    v.len(),
                    a.len()
                )));
            }
            *v = a;
        }
        let pos: u128 = meta
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Manifest(format!("bad rng position {:?}", meta.rng_word_pos)))?;
        trainer.rng.set_word_pos(pos);
        trainer.epoch = meta.epoch;
        trainer.history = TrainHistory {
            epoch_loss: meta.epoch_loss,
            lr_trace: load_array(dir.join("lr_trace.pfaf"))?.data.to_f64(),
        };
        Ok(trainer)
    }
}

/// Trains `net` for `cfg.epochs` epochs from scratch.
pub fn train(net: PhiNet, data: &[TrainSample], cfg: &TrainConfig) -> Result<(PhiNet, TrainHistory)> {
    let mut trainer = Trainer::new(net, *cfg)?;
    trainer.run(data, |_| Ok(()))?;
    Ok(trainer.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagestack::{ColorSpace, Shape};
    use rand::Rng;

    fn tiny_cfg() -> PhiNetConfig {
        PhiNetConfig { depth: 3, width: 4, kernel: 3, in_channels: 1, out_channels: 1 }
    }

    fn samples(n: usize, seed: u64) -> Vec<TrainSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(1, 6, 6);
        let im = |rng: &mut ChaCha8Rng| {
            Image::new(
                s,
                (0..36).map(|_| rng.random_range(-0.5..0.5)).collect(),
                ValueRange::Centered,
                ColorSpace::Gray,
            )
            .unwrap()
        };
        (0..n)
            .map(|_| {
                let x = im(&mut rng);
                let y = im(&mut rng);
                TrainSample::new(y.clone(), y, x.clone(), x).unwrap()
            })
            .collect()
    }

    #[test]
    fn schedule_closed_form() {
        assert_eq!(cosine_warm_restart_lr(0.01, 0, 8), 0.01);
        assert!((cosine_warm_restart_lr(0.01, 4, 8) - 0.005).abs() < 1e-15);
        assert_eq!(cosine_warm_restart_lr(0.01, 8, 8), 0.01);
        assert!(cosine_warm_restart_lr(0.01, 99, 100) < 1e-4);
    }

    #[test]
    fn history_and_trace_bookkeeping() {
        let data = samples(10, 1);
        let cfg = TrainConfig { epochs: 5, batch_size: 4, restart_epochs: 2, ..Default::default() };
        let (_, h) = train(PhiNet::new(tiny_cfg(), 1).unwrap(), &data, &cfg).unwrap();
        assert_eq!(h.epoch_loss.len(), 5);
        assert_eq!(h.lr_trace.len(), 15);
        for (s, &lr) in h.lr_trace.iter().enumerate() {
            assert!((lr - cosine_warm_restart_lr(0.01, s, 6)).abs() < 1e-15);
        }
        assert_eq!(h.lr_trace[6], 0.01);
        assert_eq!(h.lr_trace[12], 0.01);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let data = samples(9, 2);
        let cfg = TrainConfig { epochs: 4, batch_size: 4, rho: 0.01, seed: 5, ..Default::default() };
        let (a, ha) = train(PhiNet::new(tiny_cfg(), 3).unwrap(), &data, &cfg).unwrap();
        let (b, hb) = train(PhiNet::new(tiny_cfg(), 3).unwrap(), &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);

        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(PhiNet::new(tiny_cfg(), 3).unwrap(), cfg).unwrap();
        t.run_epoch(&data).unwrap();
        t.run_epoch(&data).unwrap();
        t.save(dir.path()).unwrap();
        let mut resumed = Trainer::load(dir.path()).unwrap();
        assert_eq!(resumed.epoch(), 2);
        resumed.run(&data, |_| Ok(())).unwrap();
        let (c, hc) = resumed.into_parts();
        assert_eq!(c, a);
        assert_eq!(hc, ha);
    }

    #[test]
    fn prior_images_are_untouched() {
        let data = samples(6, 3);
        let before = data.clone();
        train(PhiNet::new(tiny_cfg(), 4).unwrap(), &data, &TrainConfig { epochs: 2, ..Default::default() }).unwrap();
        assert_eq!(data, before);
    }

    #[test]
    fn empty_dataset_and_divergence() {
        let net = PhiNet::new(tiny_cfg(), 5).unwrap();
        assert!(matches!(train(net.clone(), &[], &TrainConfig::default()), Err(Error::InsufficientData(_))));
        let mut data = samples(4, 4);
        let big = Image::filled(data[0].target.shape(), 1e200, ValueRange::Centered, ColorSpace::Gray).unwrap();
        data[0].target = big.clone();
        data[0].prior = big.map(|v| -v).unwrap();
        match train(net, &data, &TrainConfig { epochs: 1, ..Default::default() }) {
            Err(Error::Divergence { stage: "training", at }) => assert!(at.contains("epoch 0")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        // stub with a handful of parameters
        let cfg = PhiNetConfig { depth: 2, width: 1, kernel: 1, in_channels: 1, out_channels: 1 };
        let mut net = PhiNet::new(cfg, 6).unwrap();
        for (i, p) in net.params_mut().into_iter().enumerate() {
            p.iter_mut().for_each(|v| *v = 0.3 + 0.2 * i as f64);
        }
        assert_eq!(net.param_sizes().iter().sum::<usize>(), 6);
        let data = samples(2, 7);
        let rho = 0.05;
        let loss_of = |net: &PhiNet| -> f64 {
            let mut probe = net.clone();
            let inputs = data.iter().map(|s| Tensor::new(s.input.shape(), s.input.data().to_vec())).collect();
            let (phis, _) = probe.forward_train(inputs);
            phis.iter()
                .zip(&data)
                .map(|(p, s)| loss_slices(&p.data, s.fidelity.data(), s.prior.data(), s.target.data(), rho))
                .sum::<f64>()
                / data.len() as f64
        };
        let mut probe = net.clone();
        let inputs = data.iter().map(|s| Tensor::new(s.input.shape(), s.input.data().to_vec())).collect();
        let (phis, trace) = probe.forward_train(inputs);
        let gphi = phis
            .iter()
            .zip(&data)
            .map(|(p, s)| {
                let g = phi_gradient(&p.data, s.fidelity.data(), s.prior.data(), s.target.data(), rho);
                Tensor::new(p.shape, g.into_iter().map(|v| v / 2.0).collect())
            })
            .collect();
        let mut grads = net.zero_grads();
        net.backward(&trace, &phis, gphi, &mut grads);
        let h = 1e-6;
        for t in 0..grads.len() {
            for i in 0..grads[t].len() {
                let base = net.params_mut()[t][i];
                net.params_mut()[t][i] = base + h;
                let lp = loss_of(&net);
                net.params_mut()[t][i] = base - h;
                let lm = loss_of(&net);
                net.params_mut()[t][i] = base;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[t][i];
                assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-8), "{t}/{i}: {fd} vs {an}");
            }
        }
    }
}
