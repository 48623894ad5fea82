use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::stream_seed;
use super::toy::toy_scene;
use crate::error::Result;
use crate::imagestack::{convert_range, ValueRange};
use crate::phinet::{PhiNet, PhiNetConfig, TrainConfig, TrainSample, Trainer};

/// Setup where prior, observation and target coincide, so the squared
/// term of the training loss is identically zero and only `ρ‖φ‖₁` moves φ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelityBiasConfig {
    pub images: usize,
    pub side: usize,
    pub phinet: PhiNetConfig,
    pub train: TrainConfig,
}

impl Default for FidelityBiasConfig {
    fn default() -> Self {
        Self {
            images: 256,
            side: 64,
            phinet: PhiNetConfig { depth: 4, width: 12, kernel: 3, in_channels: 3, out_channels: 3 },
            train: TrainConfig::default(),
        }
    }
}

/// Trains on the identity setup and returns the mean predicted φ over the
/// training scenes after each epoch.
pub fn fidelity_bias_experiment(cfg: &FidelityBiasConfig, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "fidelity-bias/scenes"));
    let mut data = Vec::with_capacity(cfg.images);
    for _ in 0..cfg.images {
        let x = convert_range(&toy_scene(cfg.side, &mut rng)?, ValueRange::Centered)?;
        data.push(TrainSample::new(x.clone(), x.clone(), x.clone(), x)?);
    }
    let net = PhiNet::new(cfg.phinet, stream_seed(seed, "fidelity-bias/init"))?;
    let train = TrainConfig { seed: stream_seed(seed, "fidelity-bias/shuffle"), ..cfg.train };
    let mut trainer = Trainer::new(net, train)?;
    let mut means = Vec::with_capacity(train.epochs);
    trainer.run(&data, |t| {
        let mut total = 0.0;
        for s in &data {
            total += t.net().predict_phi(&s.input)?.mean();
        }
        means.push(total / data.len() as f64);
        Ok(())
    })?;
    Ok(means)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn without_regularizer_phi_stays_put() {
        let cfg = FidelityBiasConfig {
            images: 8,
            side: 16,
            phinet: PhiNetConfig { depth: 3, width: 4, kernel: 3, in_channels: 3, out_channels: 3 },
            train: TrainConfig { epochs: 2, rho: 0.0, batch_size: 4, ..TrainConfig::default() },
        };
        let means = fidelity_bias_experiment(&cfg, 1).unwrap();
        assert_eq!(means.len(), 2);
        // the loss gradient is exactly zero, so only the BN statistics move
        assert!((means[0] - means[1]).abs() < 0.05);
        assert!(means[1] > 0.4);
    }
}
