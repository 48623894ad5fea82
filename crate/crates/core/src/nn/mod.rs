//! Minimal dense CPU network toolkit: batched forward passes with cached
//! activations, reverse-mode gradients, and two optimizers.

mod layers;
mod optim;

use std::hash::{DefaultHasher, Hash, Hasher};
use std::ops::Range;

pub use layers::{sigmoid, BatchNorm2d, Conv2d, ConvTranspose2d, Dense, Layer};
pub use optim::{Adam, Sgd};

use layers::LayerCache;

use crate::imagestack::Shape;

/// A single `(c, h, w)` activation, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(shape.len(), data.len(), "tensor data length");
        Self { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::new(shape, vec![0.0; shape.len()])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shapes");
        Self::new(self.shape, self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect())
    }
}

/// Activations recorded by a forward pass over a span of layers.
pub struct Trace {
    span: Range<usize>,
    inputs: Vec<Vec<Tensor>>,
    caches: Vec<LayerCache>,
}

/// An ordered stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn output_shape(&self, span: Range<usize>, input: Shape) -> Shape {
        self.layers[span].iter().fold(input, |s, l| l.output_shape(s))
    }

    /// Inference pass over all layers (batch norm uses running statistics).
    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_span(0..self.layers.len(), x)
    }

    pub fn forward_span(&self, span: Range<usize>, x: &Tensor) -> Tensor {
        self.layers[span].iter().fold(x.clone(), |acc, l| l.forward_eval(&acc))
    }

    /// Inference pass that records what [`Sequential::backward`] needs.
    pub fn forward_traced(&self, span: Range<usize>, xs: Vec<Tensor>) -> (Vec<Tensor>, Trace) {
        let mut inputs = Vec::with_capacity(span.len());
        let mut caches = Vec::with_capacity(span.len());
        let mut cur = xs;
        for layer in &self.layers[span.clone()] {
            let next = cur.iter().map(|x| layer.forward_eval(x)).collect();
            inputs.push(std::mem::replace(&mut cur, next));
            caches.push(LayerCache::None);
        }
        (cur, Trace { span, inputs, caches })
    }

    /// Training pass: batch norm normalizes with batch statistics and
    /// updates its running estimates.
    pub fn forward_train(&mut self, xs: Vec<Tensor>) -> (Vec<Tensor>, Trace) {
        let span = 0..self.layers.len();
        let mut inputs = Vec::with_capacity(span.len());
        let mut caches = Vec::with_capacity(span.len());
        let mut cur = xs;
        for layer in &mut self.layers {
            let (next, cache) = layer.forward_batch(&cur, true);
            inputs.push(std::mem::replace(&mut cur, next));
            caches.push(cache);
        }
        (cur, Trace { span, inputs, caches })
    }

    /// Propagates `grads_out` back through the traced span. When `grads` is
    /// given, parameter gradients are accumulated into it in
    /// [`Sequential::params`] order (whole network, not just the span).
    pub fn backward(&self, trace: &Trace, grads_out: Vec<Tensor>, mut grads: Option<&mut [Vec<f64>]>) -> Vec<Tensor> {
        let offsets = self.param_offsets();
        let mut g = grads_out;
        for (k, idx) in trace.span.clone().enumerate().rev() {
            let layer = &self.layers[idx];
            let n = layer.params().len();
            let slot = grads.as_deref_mut().map(|all| &mut all[offsets[idx]..offsets[idx] + n]);
            g = layer.backward_batch(&trace.inputs[k], &trace.caches[k], &g, slot);
        }
        g
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = acc;
                acc += l.params().len();
                o
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Parameters followed by buffers, in a fixed order.
    pub fn state(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.params().into_iter().map(<[f64]>::to_vec).collect();
        out.extend(self.layers.iter().flat_map(|l| l.buffers()).map(<[f64]>::to_vec));
        out
    }

    /// Inverse of [`Sequential::state`]; lengths must match exactly.
    pub fn load_state(&mut self, state: &[Vec<f64>]) -> Result<(), String> {
        let mut slots: Vec<&mut Vec<f64>> = Vec::new();
        let mut buffers: Vec<&mut Vec<f64>> = Vec::new();
        for l in &mut self.layers {
            let Layer::BatchNorm2d(bn) = l else {
                slots.extend(l.params_mut());
                continue;
            };
            slots.push(&mut bn.gamma);
            slots.push(&mut bn.beta);
            buffers.push(&mut bn.running_mean);
            buffers.push(&mut bn.running_var);
        }
        slots.extend(buffers);
        if slots.len() != state.len() {
            return Err(format!("expected {} state tensors, found {}", slots.len(), state.len()));
        }
        for (i, (slot, src)) in slots.into_iter().zip(state).enumerate() {
            if slot.len() != src.len() {
                return Err(format!("state tensor {i}: expected {} values, found {}", slot.len(), src.len()));
            }
            slot.copy_from_slice(src);
        }
        Ok(())
    }

    /// Order-sensitive hash of every parameter and buffer bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in self.state() {
            t.len().hash(&mut h);
            for v in t {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}
