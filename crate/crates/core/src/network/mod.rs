//! U-Net backbone and the full model: U-Net, optional learnable Wiener
//! refinement, then a clamp to `[0, 1]`.
//!
//! Layer recipe for depth `D` and base width `B` (`c_l = B * 2^l`):
//!
//! | stage              | layers                                        | parameters                |
//! |--------------------|-----------------------------------------------|---------------------------|
//! | encoder `l < D`    | 3x3 conv `in_l -> c_l`, ReLU, 3x3 conv, ReLU  | `9 in_l c_l + 9 c_l^2 + 2 c_l` |
//! | downsample         | 2x2 max pool, stride 2                        | 0                         |
//! | bottleneck         | double conv `c_{D-1} -> c_D`                  | `9 c_{D-1} c_D + 9 c_D^2 + 2 c_D` |
//! | upsample `l < D`   | 2x2 stride-2 transposed conv `c_{l+1} -> c_l` | `4 c_{l+1} c_l + c_l`     |
//! | decoder `l < D`    | concat skip, double conv `2 c_l -> c_l`       | `18 c_l^2 + 9 c_l^2 + 2 c_l` |
//! | head               | 1x1 conv `c_0 -> 3`                           | `3 c_0 + 3`               |
//!
//! with `in_0 = 3` and `in_l = c_{l-1}`. The Wiener stage adds `3 k^2 + 1`.

mod checkpoint;

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for_resume, save_checkpoint, Checkpoint,
    FORMAT_VERSION,
};

use crate::error::{Error, Result};
use crate::image::{check_spatial, ImageBatch, CHANNELS};
use crate::ops::{
    concat_channels, max_pool2, max_pool2_backward, relu, relu_backward, split_channels, Conv2d, ConvTranspose2x2,
    Parameters,
};
use crate::wiener::{wiener_backward, wiener_forward_cached, WienerInit, WienerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub activation: Activation,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 32,
            activation: Activation::Relu,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.depth) {
            return Err(Error::Config(format!(
                "U-Net depth must be in 1..=6, got {}",
                self.depth
            )));
        }
        if self.base_channels == 0 || self.base_channels > 512 {
            return Err(Error::Config(format!(
                "U-Net base channels must be in 1..=512, got {}",
                self.base_channels
            )));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Closed-form parameter count of the U-Net (without the Wiener stage).
    pub fn parameter_count(&self) -> usize {
        let double = |a: usize, b: usize| 9 * a * b + 9 * b * b + 2 * b;
        let mut total = 0;
        for l in 0..self.depth {
            let input = if l == 0 { CHANNELS } else { self.width(l - 1) };
            total += double(input, self.width(l));
            total += 4 * self.width(l + 1) * self.width(l) + self.width(l);
            total += double(2 * self.width(l), self.width(l));
        }
        total += double(self.width(self.depth - 1), self.width(self.depth));
        total + CHANNELS * self.width(0) + CHANNELS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoubleConv {
    pub first: Conv2d,
    pub second: Conv2d,
}

struct DoubleConvCache {
    input: Array4<f64>,
    pre1: Array4<f64>,
    hidden: Array4<f64>,
    pre2: Array4<f64>,
}

impl DoubleConv {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Self {
        Self {
            first: Conv2d::new(rng, cin, cout, 3, 1, 1),
            second: Conv2d::new(rng, cout, cout, 3, 1, 1),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            first: self.first.zeros_like(),
            second: self.second.zeros_like(),
        }
    }

    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        relu(&self.second.forward(&relu(&self.first.forward(x))))
    }

    fn forward_cached(&self, x: Array4<f64>) -> (Array4<f64>, DoubleConvCache) {
        let pre1 = self.first.forward(&x);
        let hidden = relu(&pre1);
        let pre2 = self.second.forward(&hidden);
        let out = relu(&pre2);
        (
            out,
            DoubleConvCache {
                input: x,
                pre1,
                hidden,
                pre2,
            },
        )
    }

    fn backward(&self, cache: &DoubleConvCache, dy: &Array4<f64>, grad: &mut DoubleConv) -> Array4<f64> {
        let d = relu_backward(&cache.pre2, dy);
        let d = self.second.backward(&cache.hidden, &d, Some(&mut grad.second));
        let d = relu_backward(&cache.pre1, &d);
        self.first.backward(&cache.input, &d, Some(&mut grad.first))
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.first.tensors();
        v.extend(self.second.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.first.tensors_mut();
        v.extend(self.second.tensors_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    pub encoders: Vec<DoubleConv>,
    pub bottleneck: DoubleConv,
    /// Indexed by level; `ups[l]` maps `c_{l+1}` to `c_l`.
    pub ups: Vec<ConvTranspose2x2>,
    pub decoders: Vec<DoubleConv>,
    pub head: Conv2d,
}

impl UNet {
    fn new(cfg: &UNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.depth;
        let encoders = (0..d)
            .map(|l| {
                let input = if l == 0 { CHANNELS } else { cfg.width(l - 1) };
                DoubleConv::new(rng, input, cfg.width(l))
            })
            .collect();
        let bottleneck = DoubleConv::new(rng, cfg.width(d - 1), cfg.width(d));
        let ups = (0..d)
            .map(|l| ConvTranspose2x2::new(rng, cfg.width(l + 1), cfg.width(l)))
            .collect();
        let decoders = (0..d)
            .map(|l| DoubleConv::new(rng, 2 * cfg.width(l), cfg.width(l)))
            .collect();
        let mut head = Conv2d::new(rng, cfg.width(0), CHANNELS, 1, 1, 0);
        head.bias.fill(0.5);
        Self {
            encoders,
            bottleneck,
            ups,
            decoders,
            head,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            encoders: self.encoders.iter().map(DoubleConv::zeros_like).collect(),
            bottleneck: self.bottleneck.zeros_like(),
            ups: self.ups.iter().map(ConvTranspose2x2::zeros_like).collect(),
            decoders: self.decoders.iter().map(DoubleConv::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    pub fn depth(&self) -> usize {
        self.encoders.len()
    }
}

impl Parameters for UNet {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        for e in &self.encoders {
            v.extend(e.tensors());
        }
        v.extend(self.bottleneck.tensors());
        for (u, d) in self.ups.iter().zip(&self.decoders) {
            v.extend(u.tensors());
            v.extend(d.tensors());
        }
        v.extend(self.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        for e in &mut self.encoders {
            v.extend(e.tensors_mut());
        }
        v.extend(self.bottleneck.tensors_mut());
        for (u, d) in self.ups.iter_mut().zip(self.decoders.iter_mut()) {
            v.extend(u.tensors_mut());
            v.extend(d.tensors_mut());
        }
        v.extend(self.head.tensors_mut());
        v
    }
}

/// All trainable weights of one model variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: UNetConfig,
    pub unet: UNet,
    pub wiener: Option<WienerParams>,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            unet: self.unet.zeros_like(),
            wiener: self.wiener.as_ref().map(WienerParams::zeros_like),
        }
    }

    pub fn has_wiener(&self) -> bool {
        self.wiener.is_some()
    }

    /// Same weights with the Wiener stage removed.
    pub fn without_wiener(&self) -> Self {
        Self {
            wiener: None,
            ..self.clone()
        }
    }

    /// Bitwise equality of every parameter (distinguishes `0.0` from `-0.0`).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.has_wiener() == other.has_wiener()
            && self
                .flatten()
                .iter()
                .map(|v| v.to_bits())
                .eq(other.flatten().iter().map(|v| v.to_bits()))
    }
}

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.unet.tensors();
        if let Some(w) = &self.wiener {
            v.extend(w.tensors());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.unet.tensors_mut();
        if let Some(w) = &mut self.wiener {
            v.extend(w.tensors_mut());
        }
        v
    }
}

/// Deterministic initialization. The U-Net draws from its own seeded stream,
/// so toggling the Wiener stage leaves U-Net weights unchanged.
pub fn build_model(cfg: &UNetConfig, with_wiener: Option<&WienerInit>, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unet = UNet::new(cfg, &mut rng);
    let wiener = with_wiener.map(|init| init.build(CHANNELS)).transpose()?;
    Ok(ModelParams {
        config: *cfg,
        unet,
        wiener,
    })
}

fn check_input(params: &ModelParams, x: &Array4<f64>) -> Result<()> {
    let (_, c, h, w) = x.dim();
    if c != CHANNELS {
        return Err(Error::Dimension(format!("model expects {CHANNELS} channels, got {c}")));
    }
    check_spatial((h, w), params.config.depth)
}

/// Argmax routing of one pooling step and the pooled shape.
type PoolCache = (ndarray::Array4<u8>, (usize, usize, usize, usize));

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    encoders: Vec<DoubleConvCache>,
    pools: Vec<PoolCache>,
    bottleneck: DoubleConvCache,
    up_inputs: Vec<Array4<f64>>,
    decoders: Vec<DoubleConvCache>,
    head_input: Array4<f64>,
    unet_out: Array4<f64>,
    wiener_signal: Option<Array4<f64>>,
    pre_clamp: Array4<f64>,
    /// Number of skip concatenations performed.
    pub skips: usize,
}

fn unet_forward_cached(net: &UNet, x: &Array4<f64>) -> ForwardCache {
    let depth = net.depth();
    let mut encoders = Vec::with_capacity(depth);
    let mut pools = Vec::with_capacity(depth);
    let mut skips_out = Vec::with_capacity(depth);
    let mut h = x.clone();
    for enc in &net.encoders {
        let (out, cache) = enc.forward_cached(h);
        let (pooled, arg) = max_pool2(&out);
        pools.push((arg, out.dim()));
        skips_out.push(out);
        encoders.push(cache);
        h = pooled;
    }
    let (mut h, bottleneck) = net.bottleneck.forward_cached(h);
    let mut up_inputs = vec![Array4::zeros((0, 0, 0, 0)); depth];
    let mut decoders: Vec<Option<DoubleConvCache>> = (0..depth).map(|_| None).collect();
    let mut skips = 0;
    for l in (0..depth).rev() {
        let up = net.ups[l].forward(&h);
        let cat = concat_channels(&skips_out[l], &up);
        skips += 1;
        up_inputs[l] = h;
        let (out, cache) = net.decoders[l].forward_cached(cat);
        decoders[l] = Some(cache);
        h = out;
    }
    let unet_out = net.head.forward(&h);
    ForwardCache {
        encoders,
        pools,
        bottleneck,
        up_inputs,
        decoders: decoders.into_iter().map(|c| c.expect("every level decoded")).collect(),
        head_input: h,
        pre_clamp: unet_out.clone(),
        unet_out,
        wiener_signal: None,
        skips,
    }
}

/// Raw U-Net output (no Wiener stage, no clamp).
pub fn unet_forward(params: &ModelParams, x: &ImageBatch) -> Result<Array4<f64>> {
    unet_forward_raw(params, x.data())
}

pub(crate) fn unet_forward_raw(params: &ModelParams, x: &Array4<f64>) -> Result<Array4<f64>> {
    check_input(params, x)?;
    let net = &params.unet;
    let mut skips = Vec::with_capacity(net.depth());
    let mut h = x.clone();
    for enc in &net.encoders {
        let out = enc.forward(&h);
        h = max_pool2(&out).0;
        skips.push(out);
    }
    h = net.bottleneck.forward(&h);
    for l in (0..net.depth()).rev() {
        let up = net.ups[l].forward(&h);
        h = net.decoders[l].forward(&concat_channels(&skips[l], &up));
    }
    Ok(net.head.forward(&h))
}

/// Full forward pass with caches, returning the clamped output.
pub fn model_forward_cached(params: &ModelParams, x: &Array4<f64>) -> Result<(Array4<f64>, ForwardCache)> {
    check_input(params, x)?;
    let mut cache = unet_forward_cached(&params.unet, x);
    if let Some(w) = &params.wiener {
        let (out, s) = wiener_forward_cached(w, &cache.unet_out)?;
        cache.pre_clamp = out;
        cache.wiener_signal = Some(s);
    }
    let out = cache.pre_clamp.mapv(|v| v.clamp(0.0, 1.0));
    Ok((out, cache))
}

pub fn model_forward_raw(params: &ModelParams, x: &Array4<f64>) -> Result<Array4<f64>> {
    let y = unet_forward_raw(params, x)?;
    let y = match &params.wiener {
        Some(w) => crate::wiener::wiener_forward(w, &y)?,
        None => y,
    };
    Ok(y.mapv(|v| v.clamp(0.0, 1.0)))
}

/// `clamp(wiener(unet(x)))`, or `clamp(unet(x))` without the Wiener stage.
pub fn model_forward(params: &ModelParams, x: &ImageBatch) -> Result<ImageBatch> {
    ImageBatch::new(model_forward_raw(params, x.data())?)
}

/// Parameter gradients given `dout`, the gradient at the clamped output.
pub fn model_backward(params: &ModelParams, cache: &ForwardCache, dout: &Array4<f64>) -> ModelParams {
    let mut grad = params.zeros_like();
    let mut d = dout.clone();
    ndarray::Zip::from(&mut d).and(&cache.pre_clamp).for_each(|d, &z| {
        if !(z > 0.0 && z < 1.0) {
            *d = 0.0;
        }
    });
    if let (Some(w), Some(s)) = (&params.wiener, &cache.wiener_signal) {
        let (dx, gw) = wiener_backward(w, &cache.unet_out, s, &d);
        grad.wiener = Some(gw);
        d = dx;
    }
    let net = &params.unet;
    let g = &mut grad.unet;
    let mut d = net.head.backward(&cache.head_input, &d, Some(&mut g.head));
    let mut skip_grads: Vec<Array4<f64>> = Vec::with_capacity(net.depth());
    for l in 0..net.depth() {
        let dcat = net.decoders[l].backward(&cache.decoders[l], &d, &mut g.decoders[l]);
        let width = params.config.width(l);
        let (dskip, dup) = split_channels(&dcat, width);
        skip_grads.push(dskip);
        d = net.ups[l].backward(&cache.up_inputs[l], &dup, Some(&mut g.ups[l]));
    }
    d = net.bottleneck.backward(&cache.bottleneck, &d, &mut g.bottleneck);
    for l in (0..net.depth()).rev() {
        let (arg, dim) = &cache.pools[l];
        let mut de = max_pool2_backward(arg, &d, *dim);
        de += &skip_grads[l];
        d = net.encoders[l].backward(&cache.encoders[l], &de, &mut g.encoders[l]);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_parameters;
    use crate::losses::{
        compound_loss, compound_loss_with_grad, make_extractor, ExtractorMode, LayerTag, LossConfig, LossWeights,
    };
    use crate::metrics::SsimConfig;
    use rand::seq::index::sample;
    use rand::Rng;
    use std::sync::Arc;

    fn small() -> UNetConfig {
        UNetConfig {
            depth: 3,
            base_channels: 4,
            ..Default::default()
        }
    }

    fn random_input(seed: u64, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(dim, || rng.random())
    }

    #[test]
    fn determinism_and_wiener_toggle() {
        let a = build_model(&small(), Some(&WienerInit::default()), 3).unwrap();
        let b = build_model(&small(), Some(&WienerInit::default()), 3).unwrap();
        assert!(a.bitwise_eq(&b));
        let plain = build_model(&small(), None, 3).unwrap();
        assert!(plain.wiener.is_none());
        assert!(plain.bitwise_eq(&a.without_wiener()));
        assert!(matches!(
            build_model(&UNetConfig { depth: 0, ..small() }, None, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn parameter_count_matches_layer_table() {
        let cfg = UNetConfig::default();
        // depth 3, base 32, hand-expanded
        let enc =
            (9 * 3 * 32 + 9 * 32 * 32 + 64) + (9 * 32 * 64 + 9 * 64 * 64 + 128) + (9 * 64 * 128 + 9 * 128 * 128 + 256);
        let bottleneck = 9 * 128 * 256 + 9 * 256 * 256 + 512;
        let ups = (4 * 64 * 32 + 32) + (4 * 128 * 64 + 64) + (4 * 256 * 128 + 128);
        let dec = (9 * 64 * 32 + 9 * 32 * 32 + 64)
            + (9 * 128 * 64 + 9 * 64 * 64 + 128)
            + (9 * 256 * 128 + 9 * 128 * 128 + 256);
        let head = 32 * 3 + 3;
        let expected = enc + bottleneck + ups + dec + head;
        assert_eq!(expected, 1_925_667);
        assert_eq!(cfg.parameter_count(), expected);
        let model = build_model(&cfg, None, 0).unwrap();
        assert_eq!(model.parameter_count(), expected);
        let with = build_model(&cfg, Some(&WienerInit::default()), 0).unwrap();
        assert_eq!(with.parameter_count(), expected + 3 * 25 + 1);
    }

    #[test]
    fn shapes_and_errors() {
        let p = build_model(&small(), Some(&WienerInit::default()), 1).unwrap();
        let x = ImageBatch::new(random_input(1, (1, 3, 64, 64))).unwrap();
        let y = unet_forward(&p, &x).unwrap();
        assert_eq!(y.dim(), (1, 3, 64, 64));
        assert!(y.iter().all(|v| v.is_finite()));
        let (_, cache) = model_forward_cached(&p, x.data()).unwrap();
        assert_eq!(cache.skips, 3);
        let bad = ImageBatch::new(random_input(2, (1, 3, 50, 50))).unwrap();
        let err = unet_forward(&p, &bad).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(err.to_string().contains("divisible by 2^3"));
    }

    #[test]
    fn output_clamped_and_composes() {
        let p = build_model(&small(), None, 5).unwrap();
        let x = ImageBatch::new(random_input(3, (2, 3, 16, 16))).unwrap();
        let out = model_forward(&p, &x).unwrap();
        let raw = unet_forward(&p, &x).unwrap().mapv(|v| v.clamp(0.0, 1.0));
        assert_eq!(out.data(), &raw);
        let full = build_model(&small(), Some(&WienerInit::default()), 5).unwrap();
        let out = model_forward(&full, &x).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let bypassed = model_forward(&full.without_wiener(), &x).unwrap();
        assert_eq!(bypassed, model_forward(&p, &x).unwrap());
    }

    #[test]
    fn cached_forward_matches_plain() {
        let p = build_model(&small(), Some(&WienerInit::default()), 2).unwrap();
        let x = random_input(4, (2, 3, 16, 16));
        let (a, _) = model_forward_cached(&p, &x).unwrap();
        assert_eq!(a, model_forward_raw(&p, &x).unwrap());
    }

    #[test]
    fn end_to_end_gradients_on_sampled_parameters() {
        let p = build_model(&small(), Some(&WienerInit::default()), 8).unwrap();
        let x = random_input(5, (1, 3, 8, 8));
        let target = random_input(6, (1, 3, 8, 8));
        let cfg = LossConfig {
            weights: LossWeights::default(),
            ssim: SsimConfig {
                window_size: 7,
                ..Default::default()
            },
            extractor: Arc::new(make_extractor(ExtractorMode::FixedRandom, LayerTag::Block3, 0, None).unwrap()),
        };
        let (out, cache) = model_forward_cached(&p, &x).unwrap();
        let (_, dout) = compound_loss_with_grad(&cfg, &out, &target).unwrap();
        let grad = model_backward(&p, &cache, &dout).flatten();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut idx = sample(&mut rng, grad.len(), 49).into_vec();
        idx.push(grad.len() - 1); // sigma2_raw
        let r = check_parameters(&p, &idx, 1e-6, &grad, |q| {
            let out = model_forward_raw(q, &x).unwrap();
            compound_loss(&cfg, &out, &target).unwrap().total
        });
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
