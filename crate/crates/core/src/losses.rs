//! Training losses: pixel MSE, SSIM complement and perceptual feature loss,
//! combined as a weighted sum.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array1, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mse_raw, ssim_raw, ssim_with_grad, SsimConfig};
use crate::ops::{max_pool2, max_pool2_backward, relu, relu_backward, Conv2d};

/// Environment variable naming a safetensors file with VGG16 weights.
pub const VGG16_WEIGHTS_ENV: &str = "ULW_VGG16_WEIGHTS";

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorMode {
    Pretrained,
    FixedRandom,
}

/// Tap point: output of the n-th convolutional block, after its activation.
/// For VGG16 these are relu1_2, relu2_2 and relu3_3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerTag {
    Block1,
    Block2,
    Block3,
}

impl LayerTag {
    fn block(self) -> usize {
        match self {
            LayerTag::Block1 => 1,
            LayerTag::Block2 => 2,
            LayerTag::Block3 => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Stage {
    Conv(Conv2d),
    Relu,
    MaxPool,
    /// Marks the end of a block.
    Tap,
}

/// Frozen convolutional feature extractor. Holds only the stages up to
/// its tap point.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    mode: ExtractorMode,
    tap: LayerTag,
    stages: Vec<Stage>,
    normalize: bool,
}

enum Cached {
    Input(Array4<f64>),
    Pool(Array4<u8>, (usize, usize, usize, usize)),
    None,
}

impl FeatureExtractor {
    pub fn mode(&self) -> ExtractorMode {
        self.mode
    }

    pub fn tap(&self) -> LayerTag {
        self.tap
    }

    /// Channel count of the tapped feature map.
    pub fn feature_channels(&self) -> usize {
        self.stages
            .iter()
            .rev()
            .find_map(|s| match s {
                Stage::Conv(c) => Some(c.out_channels()),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// All frozen weights, flattened.
    pub fn weights(&self) -> Vec<f64> {
        use crate::ops::Parameters;
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Conv(c) => Some(c.flatten()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    fn downsamples(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| match s {
                Stage::Conv(c) => c.stride > 1,
                Stage::MaxPool => true,
                _ => false,
            })
            .count()
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let need = 1usize << self.downsamples();
        if c != 3 || h < need || w < need {
            return Err(Error::Dimension(format!(
                "feature extractor tap {:?} needs 3-channel input of at least {need}x{need}, got {c}x{h}x{w}",
                self.tap
            )));
        }
        Ok(())
    }

    fn normalized(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut x = x.clone();
        if self.normalize {
            for (c, mut plane) in x.axis_iter_mut(Axis(1)).enumerate() {
                plane.mapv_inplace(|v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
            }
        }
        x
    }

    pub fn features(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        self.check_input(x)?;
        let mut h = self.normalized(x);
        for stage in &self.stages {
            h = match stage {
                Stage::Conv(c) => c.forward(&h),
                Stage::Relu => relu(&h),
                Stage::MaxPool => max_pool2(&h).0,
                Stage::Tap => h,
            };
        }
        Ok(h)
    }

    /// Features of `x` and a closure-free backward: returns the features
    /// and the gradient of `<dfeat, features>` with respect to `x`.
    fn features_with_backward(
        &self,
        x: &Array4<f64>,
        grad_fn: impl FnOnce(&Array4<f64>) -> Array4<f64>,
    ) -> Result<Array4<f64>> {
        self.check_input(x)?;
        let mut h = self.normalized(x);
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (next, cache) = match stage {
                Stage::Conv(c) => (c.forward(&h), Cached::Input(h)),
                Stage::Relu => (relu(&h), Cached::Input(h)),
                Stage::MaxPool => {
                    let dim = h.dim();
                    let (y, arg) = max_pool2(&h);
                    (y, Cached::Pool(arg, dim))
                }
                Stage::Tap => (h, Cached::None),
            };
            h = next;
            caches.push(cache);
        }
        let mut g = grad_fn(&h);
        for (stage, cache) in self.stages.iter().zip(caches.iter()).rev() {
            g = match (stage, cache) {
                (Stage::Conv(c), Cached::Input(input)) => c.backward(input, &g, None),
                (Stage::Relu, Cached::Input(input)) => relu_backward(input, &g),
                (Stage::MaxPool, Cached::Pool(arg, dim)) => max_pool2_backward(arg, &g, *dim),
                _ => g,
            };
        }
        if self.normalize {
            for (c, mut plane) in g.axis_iter_mut(Axis(1)).enumerate() {
                plane.mapv_inplace(|v| v / IMAGENET_STD[c]);
            }
        }
        Ok(g)
    }
}

/// Builds the frozen extractor. `weights` overrides [`VGG16_WEIGHTS_ENV`]
/// in pretrained mode; `seed` drives fixed-random initialization.
pub fn make_extractor(
    mode: ExtractorMode,
    tap: LayerTag,
    seed: u64,
    weights: Option<&Path>,
) -> Result<FeatureExtractor> {
    match mode {
        ExtractorMode::FixedRandom => Ok(fixed_random_extractor(tap, seed)),
        ExtractorMode::Pretrained => {
            let path = weights
                .map(Path::to_path_buf)
                .or_else(|| std::env::var_os(VGG16_WEIGHTS_ENV).map(PathBuf::from))
                .filter(|p| p.is_file())
                .ok_or_else(|| {
                    Error::Environment(format!(
                        "pretrained VGG16 weights are not available on this host; point {VGG16_WEIGHTS_ENV} \
                         at a safetensors file or use the `fixed-random` extractor mode"
                    ))
                })?;
            load_vgg16(&path, tap)
        }
    }
}

const FIXED_RANDOM_WIDTHS: [usize; 3] = [16, 32, 64];

fn fixed_random_extractor(tap: LayerTag, seed: u64) -> FeatureExtractor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stages = Vec::new();
    let mut cin = 3;
    for &cout in &FIXED_RANDOM_WIDTHS[..tap.block()] {
        stages.push(Stage::Conv(Conv2d::new(&mut rng, cin, cout, 3, 2, 1)));
        stages.push(Stage::Relu);
        stages.push(Stage::Tap);
        cin = cout;
    }
    FeatureExtractor {
        mode: ExtractorMode::FixedRandom,
        tap,
        stages,
        normalize: false,
    }
}

/// VGG16 `features` layout up to relu3_3: (torchvision index, in, out).
pub const VGG16_CONVS: [(usize, usize, usize); 7] = [
    (0, 3, 64),
    (2, 64, 64),
    (5, 64, 128),
    (7, 128, 128),
    (10, 128, 256),
    (12, 256, 256),
    (14, 256, 256),
];
const VGG16_BLOCK_ENDS: [usize; 3] = [1, 3, 6];

fn load_vgg16(path: &Path, tap: LayerTag) -> Result<FeatureExtractor> {
    use safetensors::{Dtype, SafeTensors};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Environment(format!("cannot parse VGG16 weights {}: {e}", path.display())))?;
    let read = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let view = tensors
            .tensor(name)
            .map_err(|e| Error::Environment(format!("VGG16 weights missing `{name}`: {e}")))?;
        if view.shape() != shape {
            return Err(Error::Environment(format!(
                "VGG16 tensor `{name}` has shape {:?}, expected {shape:?}",
                view.shape()
            )));
        }
        let data = view.data();
        Ok(match view.dtype() {
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect(),
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect(),
            other => {
                return Err(Error::Environment(format!(
                    "VGG16 tensor `{name}` has unsupported dtype {other:?}"
                )))
            }
        })
    };
    let last = VGG16_BLOCK_ENDS[tap.block() - 1];
    let mut stages = Vec::new();
    for (i, &(idx, cin, cout)) in VGG16_CONVS.iter().enumerate().take(last + 1) {
        let weight = Array4::from_shape_vec(
            (cout, cin, 3, 3),
            read(&format!("features.{idx}.weight"), &[cout, cin, 3, 3])?,
        )
        .expect("shape checked");
        let bias = Array1::from(read(&format!("features.{idx}.bias"), &[cout])?);
        stages.push(Stage::Conv(Conv2d {
            weight,
            bias,
            stride: 1,
            padding: 1,
        }));
        stages.push(Stage::Relu);
        if let Some(block) = VGG16_BLOCK_ENDS.iter().position(|&e| e == i) {
            stages.push(Stage::Tap);
            if block + 1 < tap.block() {
                stages.push(Stage::MaxPool);
            }
        }
    }
    Ok(FeatureExtractor {
        mode: ExtractorMode::Pretrained,
        tap,
        stages,
        normalize: true,
    })
}

/// `1 - SSIM(pred, target)`.
pub fn ssim_loss(pred: &Array4<f64>, target: &Array4<f64>, cfg: &SsimConfig) -> Result<f64> {
    Ok(1.0 - ssim_raw(pred, target, cfg)?)
}

pub fn ssim_loss_with_grad(pred: &Array4<f64>, target: &Array4<f64>, cfg: &SsimConfig) -> Result<(f64, Array4<f64>)> {
    let (s, g) = ssim_with_grad(pred, target, cfg)?;
    Ok((1.0 - s, -g))
}

/// Mean squared difference of tapped features.
pub fn perceptual_loss(extractor: &FeatureExtractor, pred: &Array4<f64>, target: &Array4<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Dimension(format!(
            "perceptual loss shape mismatch: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    mse_raw(&extractor.features(pred)?, &extractor.features(target)?)
}

pub fn perceptual_loss_with_grad(
    extractor: &FeatureExtractor,
    pred: &Array4<f64>,
    target: &Array4<f64>,
) -> Result<(f64, Array4<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::Dimension(format!(
            "perceptual loss shape mismatch: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let ft = extractor.features(target)?;
    let mut value = 0.0;
    let grad = extractor.features_with_backward(pred, |fp| {
        let n = fp.len() as f64;
        let diff = fp - &ft;
        value = diff.iter().map(|d| d * d).sum::<f64>() / n;
        diff * (2.0 / n)
    })?;
    Ok((value, grad))
}

fn mse_with_grad(pred: &Array4<f64>, target: &Array4<f64>) -> Result<(f64, Array4<f64>)> {
    let value = mse_raw(pred, target)?;
    let grad = (pred - target) * (2.0 / pred.len() as f64);
    Ok((value, grad))
}

/// Per-term weights. `None` omits the term from the configuration; a zero
/// weight is treated identically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perceptual: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: Some(1.0),
            ssim: Some(1.0),
            perceptual: Some(0.01),
        }
    }
}

fn active(w: Option<f64>) -> Option<f64> {
    w.filter(|&w| w != 0.0)
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("mse", self.mse), ("ssim", self.ssim), ("perceptual", self.perceptual)] {
            if let Some(w) = w {
                if !(w.is_finite() && w >= 0.0) {
                    return Err(Error::Config(format!(
                        "loss weight `{name}` must be finite and >= 0, got {w}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Training needs at least one positive weight.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        if [self.mse, self.ssim, self.perceptual]
            .iter()
            .all(|w| active(*w).is_none())
        {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            mse: self.mse.map(|w| w * factor),
            ssim: self.ssim.map(|w| w * factor),
            perceptual: self.perceptual.map(|w| w * factor),
        }
    }
}

/// Serializable choice of perceptual feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSpec {
    pub mode: ExtractorMode,
    pub layer: LayerTag,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self {
            mode: ExtractorMode::FixedRandom,
            layer: LayerTag::Block3,
            seed: 0,
            weights: None,
        }
    }
}

impl ExtractorSpec {
    pub fn build(&self) -> Result<FeatureExtractor> {
        make_extractor(self.mode, self.layer, self.seed, self.weights.as_deref())
    }
}

/// Compound loss: weights, SSIM settings and a shared frozen extractor.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub ssim: SsimConfig,
    pub extractor: Arc<FeatureExtractor>,
}

/// Unweighted loss components; `None` where a term was not evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossComponents {
    pub mse: Option<f64>,
    pub ssim: Option<f64>,
    pub perceptual: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossValue {
    pub total: f64,
    pub components: LossComponents,
}

/// `total = w_mse * mse + w_ssim * (1 - ssim) + w_perc * perceptual`,
/// skipping terms whose weight is absent or zero.
pub fn compound_loss(cfg: &LossConfig, pred: &Array4<f64>, target: &Array4<f64>) -> Result<LossValue> {
    Ok(compound_impl(cfg, pred, target, false)?.0)
}

/// [`compound_loss`] plus the gradient with respect to `pred`.
pub fn compound_loss_with_grad(
    cfg: &LossConfig,
    pred: &Array4<f64>,
    target: &Array4<f64>,
) -> Result<(LossValue, Array4<f64>)> {
    let (v, g) = compound_impl(cfg, pred, target, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn compound_impl(
    cfg: &LossConfig,
    pred: &Array4<f64>,
    target: &Array4<f64>,
    want_grad: bool,
) -> Result<(LossValue, Option<Array4<f64>>)> {
    cfg.weights.validate()?;
    if pred.dim() != target.dim() {
        return Err(Error::Dimension(format!(
            "loss shape mismatch: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let mut total = 0.0;
    let mut components = LossComponents::default();
    let mut grad = want_grad.then(|| Array4::zeros(pred.raw_dim()));
    let mut accumulate = |w: f64, value: f64, g: Option<Array4<f64>>| {
        total += w * value;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.scaled_add(w, &g);
        }
    };
    if let Some(w) = active(cfg.weights.mse) {
        let (v, g) = if want_grad {
            let (v, g) = mse_with_grad(pred, target)?;
            (v, Some(g))
        } else {
            (mse_raw(pred, target)?, None)
        };
        components.mse = Some(v);
        accumulate(w, v, g);
    }
    if let Some(w) = active(cfg.weights.ssim) {
        let (v, g) = if want_grad {
            let (v, g) = ssim_loss_with_grad(pred, target, &cfg.ssim)?;
            (v, Some(g))
        } else {
            (ssim_loss(pred, target, &cfg.ssim)?, None)
        };
        components.ssim = Some(v);
        accumulate(w, v, g);
    }
    if let Some(w) = active(cfg.weights.perceptual) {
        let (v, g) = if want_grad {
            let (v, g) = perceptual_loss_with_grad(&cfg.extractor, pred, target)?;
            (v, Some(g))
        } else {
            (perceptual_loss(&cfg.extractor, pred, target)?, None)
        };
        components.perceptual = Some(v);
        accumulate(w, v, g);
    }
    Ok((LossValue { total, components }, grad))
}
