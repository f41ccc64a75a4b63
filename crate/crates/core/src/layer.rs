//! Network building blocks behind a single enum, plus the tape of cached
//! activations that pairs each forward pass with its backward.

use crate::batchnorm::{BnCache, BnLayerState, Mode};
use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ConvLayer<S = f32> {
    pub weight: Tensor<S>, // Cout×Cin×kh×kw
    pub bias: Option<Vec<S>>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub enum Layer<S = f32> {
    Conv(ConvLayer<S>),
    Bn(BnLayerState<S>),
    Relu,
    Upsample { scale: usize },
}

/// Per-layer activations cached for the backward pass.
pub enum LayerCache<S> {
    Conv { input: Tensor<S> },
    Bn(BnCache<S>),
    Relu { input: Tensor<S> },
    Upsample { input_shape: Vec<usize> },
}

/// Parameter gradients produced by one layer's backward pass, in the same
/// order as [`Layer::param_slices`].
pub enum LayerGrads<S> {
    Conv { d_weight: Tensor<S>, d_bias: Option<Vec<S>> },
    Bn { d_gamma: Vec<S>, d_beta: Vec<S> },
    None,
}

impl<S: Scalar> Layer<S> {
    /// Inference forward: batchnorm uses running statistics, nothing mutates.
    pub fn forward_eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            Layer::Conv(c) => ops::conv2d(&x.clone(), &c.weight, c.bias.as_deref(), c.stride, c.pad),
            Layer::Bn(bn) => bn.forward_eval(x),
            Layer::Relu => Ok(ops::relu(x)),
            Layer::Upsample { scale } => ops::upsample_bilinear(x, *scale),
        }
    }

    /// Forward that records a cache for backward. Batchnorm behaves per its
    /// current mode and updates running statistics in train mode.
    pub fn forward_cached(&mut self, x: &Tensor<S>) -> Result<(Tensor<S>, LayerCache<S>)> {
        match self {
            Layer::Conv(c) => {
                let y = ops::conv2d(x, &c.weight, c.bias.as_deref(), c.stride, c.pad)?;
                Ok((y, LayerCache::Conv { input: x.clone() }))
            }
            Layer::Bn(bn) => {
                let (y, cache) = bn.forward_cached(x)?;
                Ok((y, LayerCache::Bn(cache)))
            }
            Layer::Relu => Ok((ops::relu(x), LayerCache::Relu { input: x.clone() })),
            Layer::Upsample { scale } => {
                let y = ops::upsample_bilinear(x, *scale)?;
                Ok((y, LayerCache::Upsample { input_shape: x.shape().to_vec() }))
            }
        }
    }

    pub fn backward(&self, cache: &LayerCache<S>, d_out: &Tensor<S>) -> Result<(Tensor<S>, LayerGrads<S>)> {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Conv { input }) => {
                let (dx, dw, db) = ops::conv2d_backward(input, &c.weight, c.stride, c.pad, d_out)?;
                let d_bias = c.bias.as_ref().map(|_| db);
                Ok((dx, LayerGrads::Conv { d_weight: dw, d_bias }))
            }
            (Layer::Bn(bn), LayerCache::Bn(cache)) => {
                let (dx, dg, db) = bn.backward(cache, d_out)?;
                Ok((dx, LayerGrads::Bn { d_gamma: dg, d_beta: db }))
            }
            (Layer::Relu, LayerCache::Relu { input }) => {
                Ok((ops::relu_backward(input, d_out)?, LayerGrads::None))
            }
            (Layer::Upsample { scale }, LayerCache::Upsample { input_shape }) => Ok((
                ops::upsample_bilinear_backward(input_shape, *scale, d_out)?,
                LayerGrads::None,
            )),
            _ => Err(Error::tape("cache kind does not match layer kind".to_string())),
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        if let Layer::Bn(bn) = self {
            bn.mode = mode;
        }
    }

    /// Learnable parameter blocks of this layer, in checkpoint order.
    pub fn param_slices(&self) -> Vec<&[S]> {
        match self {
            Layer::Conv(c) => {
                let mut v = vec![c.weight.data()];
                if let Some(b) = &c.bias {
                    v.push(b.as_slice());
                }
                v
            }
            Layer::Bn(bn) => vec![bn.gamma.as_slice(), bn.beta.as_slice()],
            _ => Vec::new(),
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        match self {
            Layer::Conv(c) => {
                let mut v = vec![c.weight.data_mut()];
                if let Some(b) = &mut c.bias {
                    v.push(b.as_mut_slice());
                }
                v
            }
            Layer::Bn(bn) => vec![bn.gamma.as_mut_slice(), bn.beta.as_mut_slice()],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }
}

impl<S: Scalar> LayerGrads<S> {
    /// Gradient blocks in the same order as [`Layer::param_slices`].
    pub fn blocks(&self) -> Vec<&[S]> {
        match self {
            LayerGrads::Conv { d_weight, d_bias } => {
                let mut v = vec![d_weight.data()];
                if let Some(b) = d_bias {
                    v.push(b.as_slice());
                }
                v
            }
            LayerGrads::Bn { d_gamma, d_beta } => vec![d_gamma.as_slice(), d_beta.as_slice()],
            LayerGrads::None => Vec::new(),
        }
    }
}

/// Cached activations for one full forward pass through a network.
pub struct Tape<S> {
    caches: Vec<LayerCache<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { caches: Vec::new() }
    }

    pub fn record(&mut self, cache: LayerCache<S>) {
        self.caches.push(cache);
    }

    pub fn clear(&mut self) {
        self.caches.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }

    pub fn caches(&self) -> &[LayerCache<S>] {
        &self.caches
    }

    pub fn take_error_if_empty(&self, context: &str) -> Result<()> {
        if self.caches.is_empty() {
            return Err(Error::tape(format!("{context}: backward called before forward")));
        }
        Ok(())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}
