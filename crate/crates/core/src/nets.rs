//! Toy teacher and student segmentation networks: layer descriptors, seeded
//! He initialization, a statistics-capturing forward pass, and the parameter
//! enumeration used by the optimizer and the checkpoint format.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batchnorm::{BnLayerState, Mode, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::error::{Error, Result};
use crate::layer::{ConvLayer, Layer, Tape};
use crate::optim::sgd_update;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerDesc {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, bias: bool },
    BatchNorm { channels: usize },
    Relu,
    Upsample { scale: usize },
}

/// Architecture description. The network must map C×H×W input to
/// K×H×W per-pixel logits at the input resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub role: Role,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub layers: Vec<LayerDesc>,
}

impl NetworkSpec {
    /// Walk the layer list and verify shape consistency; returns the output
    /// (C, H, W).
    pub fn validate(&self) -> Result<(usize, usize, usize)> {
        if self.class_count == 0 {
            return Err(Error::invalid("class count must be >= 1"));
        }
        let (mut c, mut h, mut w) = (self.in_channels, self.height, self.width);
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                LayerDesc::Conv { in_ch, out_ch, kernel, stride, pad, .. } => {
                    if *in_ch != c {
                        return Err(Error::shape(format!(
                            "layer {i}: conv expects {in_ch} channels, gets {c}"
                        )));
                    }
                    if *stride == 0 || *kernel == 0 {
                        return Err(Error::invalid(format!("layer {i}: zero kernel or stride")));
                    }
                    let padded_h = h + 2 * pad;
                    let padded_w = w + 2 * pad;
                    if *kernel > padded_h || *kernel > padded_w {
                        return Err(Error::shape(format!(
                            "layer {i}: kernel {kernel} exceeds padded extent"
                        )));
                    }
                    h = (padded_h - kernel) / stride + 1;
                    w = (padded_w - kernel) / stride + 1;
                    c = *out_ch;
                }
                LayerDesc::BatchNorm { channels } => {
                    if *channels != c {
                        return Err(Error::shape(format!(
                            "layer {i}: batchnorm over {channels} channels, gets {c}"
                        )));
                    }
                }
                LayerDesc::Relu => {}
                LayerDesc::Upsample { scale } => {
                    if *scale == 0 {
                        return Err(Error::invalid(format!("layer {i}: zero upsample scale")));
                    }
                    h *= scale;
                    w *= scale;
                }
            }
        }
        if c != self.class_count || h != self.height || w != self.width {
            return Err(Error::shape(format!(
                "network output {c}×{h}×{w} must be {}×{}×{} (classes at input resolution)",
                self.class_count, self.height, self.width
            )));
        }
        Ok((c, h, w))
    }

    /// SHA-256 of the canonical JSON serialization; identifies the
    /// architecture in checkpoints.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let out = Sha256::digest(&json);
        let mut d = [0u8; 32];
        d.copy_from_slice(&out);
        d
    }

    pub fn bn_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerDesc::BatchNorm { .. }))
            .count()
    }
}

/// Default teacher: six conv+BN blocks with one 2× downsample/upsample pair.
pub fn teacher_spec() -> NetworkSpec {
    NetworkSpec {
        role: Role::Teacher,
        in_channels: 3,
        height: 32,
        width: 32,
        class_count: 4,
        layers: vec![
            LayerDesc::Conv { in_ch: 3, out_ch: 16, kernel: 3, stride: 1, pad: 1, bias: false },
            LayerDesc::BatchNorm { channels: 16 },
            LayerDesc::Relu,
            LayerDesc::Conv { in_ch: 16, out_ch: 32, kernel: 3, stride: 2, pad: 1, bias: false },
            LayerDesc::BatchNorm { channels: 32 },
            LayerDesc::Relu,
            LayerDesc::Conv { in_ch: 32, out_ch: 32, kernel: 3, stride: 1, pad: 1, bias: false },
            LayerDesc::BatchNorm { channels: 32 },
            LayerDesc::Relu,
            LayerDesc::Conv { in_ch: 32, out_ch: 32, kernel: 3, stride: 1, pad: 1, bias: false },
            LayerDesc::BatchNorm { channels: 32 },
            LayerDesc::Relu,
            LayerDesc::Upsample { scale: 2 },
            LayerDesc::Conv { in_ch: 32, out_ch: 16, kernel: 3, stride: 1, pad: 1, bias: false },
            LayerDesc::BatchNorm { channels: 16 },
            LayerDesc::Relu,
            LayerDesc::Conv { in_ch: 16, out_ch: 16, kernel: 3, stride: 1, pad: 1, bias: false },
            LayerDesc::BatchNorm { channels: 16 },
            LayerDesc::Relu,
            LayerDesc::Conv { in_ch: 16, out_ch: 4, kernel: 1, stride: 1, pad: 0, bias: true },
        ],
    }
}

/// Default student: three conv+BN blocks, a fraction of the teacher's size.
pub fn student_spec() -> NetworkSpec {
    NetworkSpec {
        role: Role::Student,
        in_channels: 3,
        height: 32,
        width: 32,
        class_count: 4,
        layers: vec![
            LayerDesc::Conv { in_ch: 3, out_ch: 10, kernel: 3, stride: 1, pad: 1, bias: false },
            LayerDesc::BatchNorm { channels: 10 },
            LayerDesc::Relu,
            LayerDesc::Conv { in_ch: 10, out_ch: 10, kernel: 3, stride: 1, pad: 1, bias: false },
            LayerDesc::BatchNorm { channels: 10 },
            LayerDesc::Relu,
            LayerDesc::Conv { in_ch: 10, out_ch: 10, kernel: 3, stride: 1, pad: 1, bias: false },
            LayerDesc::BatchNorm { channels: 10 },
            LayerDesc::Relu,
            LayerDesc::Conv { in_ch: 10, out_ch: 4, kernel: 1, stride: 1, pad: 0, bias: true },
        ],
    }
}

/// Per-sample, per-BN-layer feature statistics captured at each BN layer's
/// input: channelwise mean and population variance over the spatial grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub layers: Vec<LayerFeatureStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFeatureStats {
    /// Index of the BN layer in the spec's layer list.
    pub layer_index: usize,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Flat gradient storage aligned with the network's parameter enumeration.
#[derive(Debug)]
pub struct Grads {
    pub blocks: Vec<Vec<f32>>,
}

/// Momentum buffers aligned with the network's parameter enumeration.
pub struct SgdState {
    velocity: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer<f32>>,
    init_seed: u64,
}

/// Seeded He fan-in initialization; deterministic per (spec, seed).
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, desc) in spec.layers.iter().enumerate() {
        match desc {
            LayerDesc::Conv { in_ch, out_ch, kernel, stride, pad, bias } => {
                let mut rng = Rng::new(derive_seed(seed, &format!("init/conv{i}")));
                let fan_in = in_ch * kernel * kernel;
                let std = (2.0 / fan_in as f64).sqrt();
                let len = out_ch * in_ch * kernel * kernel;
                let data: Vec<f32> = (0..len).map(|_| (rng.normal() * std) as f32).collect();
                let weight = Tensor::from_vec(&[*out_ch, *in_ch, *kernel, *kernel], data)?;
                let bias = bias.then(|| vec![0.0f32; *out_ch]);
                layers.push(Layer::Conv(ConvLayer { weight, bias, stride: *stride, pad: *pad }));
            }
            LayerDesc::BatchNorm { channels } => {
                layers.push(Layer::Bn(BnLayerState::new(
                    *channels,
                    DEFAULT_MOMENTUM as f32,
                    DEFAULT_EPS as f32,
                )?));
            }
            LayerDesc::Relu => layers.push(Layer::Relu),
            LayerDesc::Upsample { scale } => layers.push(Layer::Upsample { scale: *scale }),
        }
    }
    Ok(Network { spec: spec.clone(), layers, init_seed: seed })
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub(crate) fn set_init_seed(&mut self, seed: u64) {
        self.init_seed = seed;
    }

    pub fn mode(&self) -> Mode {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Bn(bn) => Some(bn.mode),
                _ => None,
            })
            .unwrap_or(Mode::Eval)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for l in &mut self.layers {
            l.set_mode(mode);
        }
    }

    pub fn layers(&self) -> &[Layer<f32>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<f32>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Inference forward using running statistics; never mutates.
    pub fn forward_eval(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward_eval(&cur)?;
        }
        Ok(cur)
    }

    /// Forward that records caches onto `tape` for a later backward pass.
    /// BatchNorm layers follow their current mode.
    pub fn forward_cached(&mut self, x: &Tensor<f32>, tape: &mut Tape<f32>) -> Result<Tensor<f32>> {
        tape.clear();
        let mut cur = x.clone();
        for l in &mut self.layers {
            let (y, cache) = l.forward_cached(&cur)?;
            tape.record(cache);
            cur = y;
        }
        Ok(cur)
    }

    /// Backward through the caches recorded by [`Network::forward_cached`].
    pub fn backward(&self, tape: &Tape<f32>, d_logits: &Tensor<f32>) -> Result<Grads> {
        tape.take_error_if_empty("network backward")?;
        if tape.caches().len() != self.layers.len() {
            return Err(Error::tape(format!(
                "tape has {} caches for {} layers",
                tape.caches().len(),
                self.layers.len()
            )));
        }
        let mut blocks_rev: Vec<Vec<Vec<f32>>> = Vec::with_capacity(self.layers.len());
        let mut d = d_logits.clone();
        for (layer, cache) in self.layers.iter().zip(tape.caches().iter()).rev() {
            let (dx, grads) = layer.backward(cache, &d)?;
            blocks_rev.push(grads.blocks().iter().map(|b| b.to_vec()).collect());
            d = dx;
        }
        let mut blocks = Vec::new();
        for layer_blocks in blocks_rev.into_iter().rev() {
            blocks.extend(layer_blocks);
        }
        Ok(Grads { blocks })
    }

    /// Accumulate `other` into `grads` (same enumeration), scaled by `scale`.
    pub fn accumulate_grads(grads: &mut Grads, other: &Grads, scale: f32) {
        debug_assert_eq!(grads.blocks.len(), other.blocks.len());
        for (dst, src) in grads.blocks.iter_mut().zip(&other.blocks) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * *s;
            }
        }
    }

    pub fn zero_grads_like(&self) -> Grads {
        Grads {
            blocks: self
                .layers
                .iter()
                .flat_map(|l| l.param_slices().into_iter().map(|s| vec![0.0f32; s.len()]))
                .collect(),
        }
    }

    pub fn sgd_state(&self) -> SgdState {
        SgdState {
            velocity: self
                .layers
                .iter()
                .flat_map(|l| l.param_slices().into_iter().map(|s| vec![0.0f32; s.len()]))
                .collect(),
        }
    }

    /// One SGD step over the full parameter set; aborts on any non-finite
    /// gradient with a diagnostic naming the parameter block.
    pub fn sgd_step(
        &mut self,
        grads: &Grads,
        state: &mut SgdState,
        lr: f32,
        momentum: f32,
    ) -> Result<()> {
        let mut idx = 0;
        for (li, layer) in self.layers.iter_mut().enumerate() {
            for (bi, param) in layer.param_slices_mut().into_iter().enumerate() {
                let g = grads
                    .blocks
                    .get(idx)
                    .ok_or_else(|| Error::shape("gradient enumeration too short".to_string()))?;
                let v = &mut state.velocity[idx];
                sgd_update(param, g, v, lr, momentum, &format!("layer{li}.param{bi}"))?;
                idx += 1;
            }
        }
        if idx != grads.blocks.len() {
            return Err(Error::shape("gradient enumeration too long".to_string()));
        }
        Ok(())
    }

    /// Logits plus per-BN-layer input statistics for a single sample.
    /// Requires eval mode so the pass cannot disturb running statistics.
    pub fn forward_with_stats(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, FeatureStats)> {
        if self.mode() != Mode::Eval {
            return Err(Error::invalid(
                "forward_with_stats requires an eval-mode network (stats capture must not touch running statistics)",
            ));
        }
        let (n, _, _, _) = x.dims4()?;
        if n != 1 {
            return Err(Error::invalid(format!(
                "forward_with_stats expects a single-sample batch, got N={n}"
            )));
        }
        let mut cur = x.clone();
        let mut layers_stats = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Layer::Bn(_) = l {
                layers_stats.push(spatial_stats(&cur, i)?);
            }
            cur = l.forward_eval(&cur)?;
        }
        cur.ensure_finite("forward_with_stats logits")?;
        Ok((cur, FeatureStats { layers: layers_stats }))
    }

    /// Visit every parameter block in enumeration order.
    pub fn for_each_param(&self, mut f: impl FnMut(&[f32])) {
        for l in &self.layers {
            for s in l.param_slices() {
                f(s);
            }
        }
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut [f32])) {
        for l in &mut self.layers {
            for s in l.param_slices_mut() {
                f(s);
            }
        }
    }

    /// BN layers in order with their spec indices.
    pub fn bn_layers(&self) -> Vec<(usize, &BnLayerState<f32>)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Bn(bn) => Some((i, bn)),
                _ => None,
            })
            .collect()
    }

    pub fn bn_layers_mut(&mut self) -> Vec<(usize, &mut BnLayerState<f32>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Bn(bn) => Some((i, bn)),
                _ => None,
            })
            .collect()
    }
}

/// Channelwise mean and population variance of a 1×C×H×W tensor over H×W.
fn spatial_stats(x: &Tensor<f32>, layer_index: usize) -> Result<LayerFeatureStats> {
    let (n, c, h, w) = x.dims4()?;
    debug_assert_eq!(n, 1);
    let plane = h * w;
    let data = x.data();
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let base = ch * plane;
        let mut sum = 0.0f64;
        for v in &data[base..base + plane] {
            sum += *v as f64;
        }
        let m = sum / plane as f64;
        let mut sq = 0.0f64;
        for v in &data[base..base + plane] {
            let d = *v as f64 - m;
            sq += d * d;
        }
        mean[ch] = m as f32;
        var[ch] = (sq / plane as f64) as f32;
    }
    Ok(LayerFeatureStats { layer_index, mean, var })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_bytes(net: &Network) -> Vec<u8> {
        let mut out = Vec::new();
        net.for_each_param(|s| {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
        out
    }

    fn bn_state_bytes(net: &Network) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, bn) in net.bn_layers() {
            for v in bn.running_mean.iter().chain(bn.running_var.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    #[test]
    fn default_specs_validate() {
        teacher_spec().validate().unwrap();
        student_spec().validate().unwrap();
    }

    #[test]
    fn teacher_has_at_least_five_bn_layers() {
        assert!(teacher_spec().bn_layer_count() >= 5);
    }

    #[test]
    fn teacher_outweighs_student() {
        let t = build_network(&teacher_spec(), 1).unwrap();
        let s = build_network(&student_spec(), 1).unwrap();
        assert!(
            t.param_count() > s.param_count(),
            "teacher {} <= student {}",
            t.param_count(),
            s.param_count()
        );
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = build_network(&teacher_spec(), 42).unwrap();
        let b = build_network(&teacher_spec(), 42).unwrap();
        assert_eq!(param_bytes(&a), param_bytes(&b));
        let c = build_network(&teacher_spec(), 43).unwrap();
        assert_ne!(param_bytes(&a), param_bytes(&c));
    }

    #[test]
    fn zero_input_forward_is_finite() {
        let net = build_network(&teacher_spec(), 7).unwrap();
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        let y = net.forward_eval(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 32, 32]);
        y.ensure_finite("zero-input logits").unwrap();
    }

    #[test]
    fn forward_with_stats_is_deterministic_and_shape_stable() {
        let spec = NetworkSpec { height: 16, width: 16, ..teacher_spec() };
        let mut net = build_network(&spec, 3).unwrap();
        net.set_mode(Mode::Eval);
        let x = Tensor::full(&[1, 3, 16, 16], 0.25f32);
        let (_, s1) = net.forward_with_stats(&x).unwrap();
        let (_, s2) = net.forward_with_stats(&x).unwrap();
        assert_eq!(s1, s2);

        // Doubling the spatial size keeps the per-layer channel dimensions.
        let spec2 = NetworkSpec { height: 32, width: 32, ..teacher_spec() };
        let mut net2 = build_network(&spec2, 3).unwrap();
        net2.set_mode(Mode::Eval);
        let x2 = Tensor::full(&[1, 3, 32, 32], 0.25f32);
        let (_, s3) = net2.forward_with_stats(&x2).unwrap();
        assert_eq!(s1.layers.len(), s3.layers.len());
        for (a, b) in s1.layers.iter().zip(&s3.layers) {
            assert_eq!(a.mean.len(), b.mean.len());
            assert_eq!(a.var.len(), b.var.len());
        }
    }

    #[test]
    fn forward_with_stats_matches_two_pass_scalar_oracle() {
        let mut net = build_network(&student_spec(), 11).unwrap();
        net.set_mode(Mode::Eval);
        let mut rng = crate::rng::Rng::new(5);
        let data: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.next_f32()).collect();
        let x = Tensor::from_vec(&[1, 3, 32, 32], data).unwrap();
        let (_, stats) = net.forward_with_stats(&x).unwrap();

        // Recompute the first BN layer's input by hand: it is the first conv.
        let conv_out = net.layers()[0].forward_eval(&x).unwrap();
        let (_, c, h, w) = conv_out.dims4().unwrap();
        let plane = h * w;
        for ch in 0..c {
            let vals = &conv_out.data()[ch * plane..(ch + 1) * plane];
            let mean: f64 = vals.iter().map(|v| *v as f64).sum::<f64>() / plane as f64;
            let var: f64 =
                vals.iter().map(|v| (*v as f64 - mean) * (*v as f64 - mean)).sum::<f64>()
                    / plane as f64;
            assert!((stats.layers[0].mean[ch] as f64 - mean).abs() < 1e-5);
            assert!((stats.layers[0].var[ch] as f64 - var).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_with_stats_refuses_train_mode_and_batches() {
        let mut net = build_network(&student_spec(), 1).unwrap();
        net.set_mode(Mode::Train);
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        assert!(net.forward_with_stats(&x).is_err());
        net.set_mode(Mode::Eval);
        let batch = Tensor::zeros(&[2, 3, 32, 32]);
        assert!(net.forward_with_stats(&batch).is_err());
    }

    #[test]
    fn forward_with_stats_never_touches_running_statistics() {
        let mut net = build_network(&student_spec(), 9).unwrap();
        net.set_mode(Mode::Eval);
        let before = bn_state_bytes(&net);
        let mut rng = crate::rng::Rng::new(8);
        let data: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.next_f32()).collect();
        let x = Tensor::from_vec(&[1, 3, 32, 32], data).unwrap();
        net.forward_with_stats(&x).unwrap();
        assert_eq!(before, bn_state_bytes(&net));
    }

    #[test]
    fn backward_before_forward_is_a_tape_error() {
        let net = build_network(&student_spec(), 1).unwrap();
        let tape = Tape::new();
        let d = Tensor::zeros(&[1, 4, 32, 32]);
        let err = net.backward(&tape, &d).unwrap_err();
        assert!(err.to_string().contains("backward called before forward"));
    }

    #[test]
    fn spec_digests_distinguish_architectures() {
        assert_ne!(teacher_spec().digest(), student_spec().digest());
        assert_eq!(teacher_spec().digest(), teacher_spec().digest());
    }
}
