//! The fusion-map estimator, its training loss and the training loop.

mod loss;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{batch_loss, fusion_loss, fusion_loss_lifted, phi_gradient};
pub use train::{cosine_warm_restart_lr, train, Checkpoint, TrainConfig, TrainHistory, TrainSample, Trainer};

use crate::error::{Error, Result};
use crate::imagestack::{Image, PhiMap, Shape, ValueRange};
use crate::nn::{sigmoid, BatchNorm2d, Conv2d, Layer, Sequential, Tensor, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiNetConfig {
    /// Number of convolutions, first and last included.
    pub depth: usize,
    pub width: usize,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl PhiNetConfig {
    /// Full-size residual denoiser layout.
    pub fn reference(channels: usize) -> Self {
        Self { depth: 17, width: 64, kernel: 3, in_channels: channels, out_channels: channels }
    }

    pub fn desk(channels: usize) -> Self {
        Self { depth: 8, width: 32, kernel: 3, in_channels: channels, out_channels: channels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2
            || self.width == 0
            || self.kernel.is_multiple_of(2)
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::InvalidArgument(format!(
                "invalid phi network config {self:?}: depth >= 2, odd kernel and nonzero widths required"
            )));
        }
        Ok(())
    }
}

/// `φ = sigmoid(trunk(y) + skip(y))`: a conv/BN/ReLU trunk plus a 1x1
/// residual head from the input, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiNet {
    config: PhiNetConfig,
    trunk: Sequential,
    skip: Sequential,
}

pub(crate) struct PhiTrace {
    trunk: Trace,
    skip: Trace,
}

impl PhiNet {
    pub fn new(config: PhiNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let PhiNetConfig { depth, width, kernel, in_channels, out_channels } = config;
        let mut layers = vec![Layer::Conv2d(Conv2d::new(in_channels, width, kernel, &mut rng)), Layer::Relu];
        for _ in 0..depth - 2 {
            layers.push(Layer::Conv2d(Conv2d::new(width, width, kernel, &mut rng)));
            layers.push(Layer::BatchNorm2d(BatchNorm2d::new(width)));
            layers.push(Layer::Relu);
        }
        let mut last = Conv2d::new(width, out_channels, kernel, &mut rng);
        // small logits: φ starts close to 0.5
        last.scale_weights(0.1);
        layers.push(Layer::Conv2d(last));
        let mut skip = Conv2d::new(in_channels, out_channels, 1, &mut rng);
        skip.scale_weights(0.0);
        Ok(Self { config, trunk: Sequential::new(layers), skip: Sequential::new(vec![Layer::Conv2d(skip)]) })
    }

    /// Zeroes the output convolution and the residual head: every logit is
    /// then exactly zero and φ exactly 0.5.
    pub fn zero_head(&mut self) {
        if let Some(Layer::Conv2d(c)) = self.trunk.layers.last_mut() {
            c.weight.fill(0.0);
            c.bias.fill(0.0);
        }
        for p in self.skip.params_mut() {
            p.fill(0.0);
        }
    }

    pub fn config(&self) -> PhiNetConfig {
        self.config
    }

    fn check_input(&self, y: &Image) -> Result<()> {
        y.require_range(ValueRange::Centered)?;
        if y.channels() != self.config.in_channels {
            return Err(Error::shape(format!("{} input channels", self.config.in_channels), y.shape()));
        }
        Ok(())
    }

    pub(crate) fn output_shape(&self, input: Shape) -> Shape {
        Shape::new(self.config.out_channels, input.height, input.width)
    }

    /// Inference-mode fusion map (batch norm uses running statistics).
    pub fn predict_phi(&self, y: &Image) -> Result<PhiMap> {
        self.check_input(y)?;
        let x = Tensor::new(y.shape(), y.data().to_vec());
        let a = self.trunk.forward(&x);
        let b = self.skip.forward(&x);
        let phi = a.data.iter().zip(&b.data).map(|(u, v)| sigmoid(u + v)).collect();
        PhiMap::new(a.shape, phi)
    }

    /// Training-mode forward pass over a batch.
    pub(crate) fn forward_train(&mut self, ys: Vec<Tensor>) -> (Vec<Tensor>, PhiTrace) {
        let (b, skip) = self.skip.forward_traced(0..1, ys.clone());
        let (a, trunk) = self.trunk.forward_train(ys);
        let phi = a.iter().zip(&b).map(|(u, v)| u.zip_map(v, |p, q| sigmoid(p + q))).collect();
        (phi, PhiTrace { trunk, skip })
    }

    /// Accumulates parameter gradients given `dL/dφ`; `grads` follows
    /// [`PhiNet::params_mut`] order.
    pub(crate) fn backward(&self, trace: &PhiTrace, phis: &[Tensor], grad_phi: Vec<Tensor>, grads: &mut [Vec<f64>]) {
        let g_logit: Vec<Tensor> =
            phis.iter().zip(grad_phi).map(|(p, g)| p.zip_map(&g, |pv, gv| gv * pv * (1.0 - pv))).collect();
        let n_trunk = self.trunk.params().len();
        let (gt, gs) = grads.split_at_mut(n_trunk);
        self.trunk.backward(&trace.trunk, g_logit.clone(), Some(gt));
        self.skip.backward(&trace.skip, g_logit, Some(gs));
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.trunk.params_mut();
        v.extend(self.skip.params_mut());
        v
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.trunk.params().iter().chain(self.skip.params().iter()).map(|p| p.len()).collect()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.param_sizes().into_iter().map(|n| vec![0.0; n]).collect()
    }

    /// Trunk state followed by skip state.
    pub fn state(&self) -> Vec<Vec<f64>> {
        let mut s = self.trunk.state();
        s.extend(self.skip.state());
        s
    }

    pub fn load_state(&mut self, state: &[Vec<f64>]) -> Result<()> {
        let n = self.trunk.state().len();
        if state.len() < n {
            return Err(Error::ArrayHeader(format!("expected at least {n} network tensors, found {}", state.len())));
        }
        self.trunk.load_state(&state[..n]).map_err(Error::ArrayHeader)?;
        self.skip.load_state(&state[n..]).map_err(Error::ArrayHeader)
    }

    pub fn checksum(&self) -> u64 {
        self.trunk.checksum() ^ self.skip.checksum().rotate_left(1)
    }
}
