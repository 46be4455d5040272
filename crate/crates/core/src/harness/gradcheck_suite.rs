//! Finite-difference checks of every differentiable stage on 8x8 inputs.

use std::sync::Arc;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{check_input, check_parameters, GradcheckReport};
use crate::losses::{
    compound_loss, compound_loss_with_grad, make_extractor, perceptual_loss, perceptual_loss_with_grad, ssim_loss,
    ssim_loss_with_grad, ExtractorMode, LayerTag, LossConfig, LossWeights,
};
use crate::metrics::SsimConfig;
use crate::network::{build_model, model_backward, model_forward_cached, model_forward_raw, UNetConfig};
use crate::ops::Parameters;
use crate::wiener::{random_probe, wiener_gradcheck, WienerInit};

pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
const SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub name: &'static str,
    pub report: GradcheckReport,
}

fn uniform(seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((1, 3, SIDE, SIDE), || rng.random())
}

/// An 11-pixel window does not fit an 8x8 image, so the checks use 7.
fn ssim_cfg() -> SsimConfig {
    SsimConfig {
        window_size: 7,
        ..Default::default()
    }
}

/// Runs the wiener, ssim_loss, perceptual and full_model checks.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradcheckEntry>> {
    let x = uniform(seed);
    let y = uniform(seed.wrapping_add(1));
    let all: Vec<usize> = (0..x.len()).collect();
    let reshape = |v: &[f64]| Array4::from_shape_vec(x.dim(), v.to_vec()).expect("same length");

    let wiener = WienerInit::default().build(3)?;
    let wiener_report = wiener_gradcheck(&wiener, &x, &random_probe(x.dim(), seed.wrapping_add(2)))?;

    let ssim = ssim_cfg();
    let (_, g) = ssim_loss_with_grad(&x, &y, &ssim)?;
    let ssim_report = check_input(
        x.as_slice().expect("contiguous"),
        &all,
        1e-5,
        g.as_slice().expect("contiguous"),
        |v| ssim_loss(&reshape(v), &y, &ssim).expect("valid shapes"),
    );

    let extractor = Arc::new(make_extractor(
        ExtractorMode::FixedRandom,
        LayerTag::Block3,
        seed,
        None,
    )?);
    let (_, g) = perceptual_loss_with_grad(&extractor, &x, &y)?;
    let perceptual_report = check_input(
        x.as_slice().expect("contiguous"),
        &all,
        1e-6,
        g.as_slice().expect("contiguous"),
        |v| perceptual_loss(&extractor, &reshape(v), &y).expect("valid shapes"),
    );

    let unet = UNetConfig {
        depth: 2,
        base_channels: 4,
        ..Default::default()
    };
    let params = build_model(&unet, Some(&WienerInit::default()), seed)?;
    let cfg = LossConfig {
        weights: LossWeights::default(),
        ssim,
        extractor,
    };
    let (out, cache) = model_forward_cached(&params, &x)?;
    let (_, dout) = compound_loss_with_grad(&cfg, &out, &y)?;
    let grad = model_backward(&params, &cache, &dout).flatten();
    let indices: Vec<usize> = (0..params.parameter_count()).collect();
    // Some weights have gradients near 1e-8; smaller steps drown them in
    // roundoff of the O(1) loss.
    let model_report = check_parameters(&params, &indices, 1e-5, &grad, |p| {
        let out = model_forward_raw(p, &x).expect("valid shapes");
        compound_loss(&cfg, &out, &y).expect("valid shapes").total
    });

    Ok(vec![
        GradcheckEntry {
            name: "wiener",
            report: wiener_report,
        },
        GradcheckEntry {
            name: "ssim_loss",
            report: ssim_report,
        },
        GradcheckEntry {
            name: "perceptual",
            report: perceptual_report,
        },
        GradcheckEntry {
            name: "full_model",
            report: model_report,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let entries = gradcheck_suite(0).unwrap();
        let names: Vec<_> = entries.iter().map(|e| e.name).collect();
        assert_eq!(names, ["wiener", "ssim_loss", "perceptual", "full_model"]);
        for e in &entries {
            assert!(e.report.passes(GRADCHECK_TOLERANCE), "{}: {:?}", e.name, e.report);
            assert!(e.report.checked > 0);
        }
    }
}
