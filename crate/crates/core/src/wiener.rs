//! Learnable Wiener filter layer.
//!
//! The layer smooths its input with a trainable depthwise kernel, `s = k * x`,
//! then applies the soft gate `p / (p + sigma^2 + eps)` with `p = s^2`:
//!
//! ```text
//! out = s * s^2 / (s^2 + sigma^2 + eps)
//! ```
//!
//! `sigma^2 = softplus(sigma2_raw)` keeps the noise variance positive while
//! the raw parameter is optimized unconstrained.

use ndarray::{Array3, Array4, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{check_parameters, GradcheckReport};
use crate::ops::{
    depthwise_reflect, depthwise_reflect_backward, gaussian_2d, sigmoid, softplus, softplus_inverse, Parameters,
};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct WienerParams {
    /// Depthwise kernel, `(channels, k, k)`.
    pub kernel: Array3<f64>,
    pub sigma2_raw: f64,
    pub epsilon: f64,
}

/// Initialization settings, as stored in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WienerInit {
    pub kernel_size: usize,
    pub gaussian_std: f64,
    pub sigma2_init: f64,
}

impl Default for WienerInit {
    fn default() -> Self {
        Self {
            kernel_size: 5,
            gaussian_std: 1.0,
            sigma2_init: 0.01,
        }
    }
}

impl WienerInit {
    pub fn build(&self, channels: usize) -> Result<WienerParams> {
        init_wiener(self.kernel_size, channels, self.gaussian_std, self.sigma2_init)
    }
}

pub fn init_wiener(kernel_size: usize, channels: usize, gaussian_std: f64, sigma2_init: f64) -> Result<WienerParams> {
    if kernel_size < 3 || kernel_size.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "Wiener kernel size must be odd and >= 3, got {kernel_size}"
        )));
    }
    if !(gaussian_std > 0.0) || !(sigma2_init > 0.0) || channels == 0 {
        return Err(Error::Parameter(format!(
            "Wiener init requires positive std, sigma^2 and channels (std {gaussian_std}, sigma^2 {sigma2_init}, channels {channels})"
        )));
    }
    let g = gaussian_2d(kernel_size, gaussian_std);
    let mut kernel = Array3::zeros((channels, kernel_size, kernel_size));
    for mut k in kernel.outer_iter_mut() {
        k.assign(&g);
    }
    Ok(WienerParams {
        kernel,
        sigma2_raw: softplus_inverse(sigma2_init),
        epsilon: DEFAULT_EPSILON,
    })
}

impl WienerParams {
    pub fn sigma2(&self) -> f64 {
        softplus(self.sigma2_raw)
    }

    pub fn channels(&self) -> usize {
        self.kernel.dim().0
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.dim().1
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kernel: Array3::zeros(self.kernel.raw_dim()),
            sigma2_raw: 0.0,
            epsilon: self.epsilon,
        }
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.channels() {
            return Err(Error::Dimension(format!(
                "Wiener layer has {} channels, input has {c}",
                self.channels()
            )));
        }
        let r = self.kernel_size() / 2;
        if h <= r || w <= r {
            return Err(Error::Dimension(format!(
                "input {h}x{w} too small for reflect padding of {r}"
            )));
        }
        Ok(())
    }
}

impl Parameters for WienerParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.kernel.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.sigma2_raw),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.kernel.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.sigma2_raw),
        ]
    }
}

/// Smoothed signal `s` for input `x`.
pub fn wiener_signal(params: &WienerParams, x: &Array4<f64>) -> Result<Array4<f64>> {
    params.check_input(x)?;
    Ok(depthwise_reflect(x, &params.kernel))
}

/// Gate `p / (p + sigma^2 + eps)` for input `x`.
pub fn wiener_gate(params: &WienerParams, x: &Array4<f64>) -> Result<Array4<f64>> {
    let c = params.sigma2() + params.epsilon;
    Ok(wiener_signal(params, x)?.mapv(|s| {
        let p = s * s;
        p / (p + c)
    }))
}

fn apply_gate(s: &Array4<f64>, noise: f64) -> Array4<f64> {
    s.mapv(|s| {
        let p = s * s;
        s * (p / (p + noise))
    })
}

pub fn wiener_forward(params: &WienerParams, x: &Array4<f64>) -> Result<Array4<f64>> {
    let s = wiener_signal(params, x)?;
    Ok(apply_gate(&s, params.sigma2() + params.epsilon))
}

/// Forward pass that keeps the smoothed signal for [`wiener_backward`].
pub(crate) fn wiener_forward_cached(params: &WienerParams, x: &Array4<f64>) -> Result<(Array4<f64>, Array4<f64>)> {
    let s = wiener_signal(params, x)?;
    let out = apply_gate(&s, params.sigma2() + params.epsilon);
    Ok((out, s))
}

/// Returns `(d loss / d x, parameter gradients)` given `dout`.
pub fn wiener_backward(
    params: &WienerParams,
    x: &Array4<f64>,
    s: &Array4<f64>,
    dout: &Array4<f64>,
) -> (Array4<f64>, WienerParams) {
    let c = params.sigma2() + params.epsilon;
    let mut ds = Array4::zeros(s.raw_dim());
    let mut dsigma2 = 0.0;
    Zip::from(&mut ds).and(s).and(dout).for_each(|ds, &s, &g| {
        let p = s * s;
        let den = p + c;
        *ds = g * p * (p + 3.0 * c) / (den * den);
        dsigma2 -= g * s * p / (den * den);
    });
    let (dx, dkernel) = depthwise_reflect_backward(x, &params.kernel, &ds);
    let grad = WienerParams {
        kernel: dkernel,
        sigma2_raw: dsigma2 * sigmoid(params.sigma2_raw),
        epsilon: params.epsilon,
    };
    (dx, grad)
}

/// Checks kernel and `sigma2_raw` gradients of `sum(probe * out)` against
/// central differences with step 1e-4.
pub fn wiener_gradcheck(params: &WienerParams, x: &Array4<f64>, probe: &Array4<f64>) -> Result<GradcheckReport> {
    if probe.dim() != x.dim() {
        return Err(Error::Dimension("probe must match the input shape".into()));
    }
    let (_, s) = wiener_forward_cached(params, x)?;
    let (_, grad) = wiener_backward(params, x, &s, probe);
    let analytic = grad.flatten();
    let indices: Vec<usize> = (0..analytic.len()).collect();
    Ok(check_parameters(params, &indices, 1e-4, &analytic, |p| {
        (&wiener_forward(p, x).expect("validated input") * probe).sum()
    }))
}

/// Seeded probe weights for gradient checks.
pub fn random_probe(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0))
}
