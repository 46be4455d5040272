//! Gaussian-windowed SSIM over the valid region, with its gradient.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::gaussian_1d;

/// Dynamic range of the intensity domain.
pub const DYNAMIC_RANGE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimConfig {
    pub window_size: usize,
    pub window_std: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window_size: 11,
            window_std: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "SSIM window size must be odd and >= 3, got {}",
                self.window_size
            )));
        }
        if !(self.window_std > 0.0) {
            return Err(Error::Parameter("SSIM window std must be positive".into()));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::Parameter("SSIM constants K1, K2 must be positive".into()));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * DYNAMIC_RANGE).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * DYNAMIC_RANGE).powi(2)
    }

    /// Separable window factor; the 2-D window is its outer product.
    pub fn window_1d(&self) -> Array1<f64> {
        gaussian_1d(self.window_size, self.window_std)
    }

    pub fn window_2d(&self) -> Array2<f64> {
        let g = self.window_1d();
        let col = g.view().insert_axis(ndarray::Axis(1));
        let row = g.view().insert_axis(ndarray::Axis(0));
        col.dot(&row)
    }
}

/// Valid-region separable filter of one plane.
fn filter_valid(plane: ArrayView2<f64>, g: &Array1<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    let g = g.as_slice().expect("owned window");
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let plane = plane.as_standard_layout();
    let src = plane.as_slice().expect("standard layout");
    let mut horiz = vec![0.0; h * wo];
    for (src_row, dst_row) in src.chunks_exact(w).zip(horiz.chunks_exact_mut(wo)) {
        for (x, d) in dst_row.iter_mut().enumerate() {
            *d = g.iter().zip(&src_row[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for (y, dst_row) in out.chunks_exact_mut(wo).enumerate() {
        for (i, gi) in g.iter().enumerate() {
            let src_row = &horiz[(y + i) * wo..(y + i + 1) * wo];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += gi * s;
            }
        }
    }
    Array2::from_shape_vec((ho, wo), out).expect("sized above")
}

/// Adjoint of [`filter_valid`]: scatters a valid-region map back to `(h, w)`.
fn filter_valid_adjoint(map: &Array2<f64>, g: &Array1<f64>, h: usize, w: usize) -> Array2<f64> {
    let (ho, wo) = map.dim();
    let g = g.as_slice().expect("owned window");
    let src = map.as_slice().expect("owned map");
    let mut horiz = vec![0.0; h * wo];
    for (y, src_row) in src.chunks_exact(wo).enumerate() {
        for (i, gi) in g.iter().enumerate() {
            let dst_row = &mut horiz[(y + i) * wo..(y + i + 1) * wo];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += gi * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for (src_row, dst_row) in horiz.chunks_exact(wo).zip(out.chunks_exact_mut(w)) {
        for (x, v) in src_row.iter().enumerate() {
            for (d, gj) in dst_row[x..x + g.len()].iter_mut().zip(g) {
                *d += gj * v;
            }
        }
    }
    debug_assert_eq!(ho + g.len() - 1, h);
    Array2::from_shape_vec((h, w), out).expect("sized above")
}

fn check_shapes(x: &Array4<f64>, y: &Array4<f64>, cfg: &SsimConfig) -> Result<()> {
    cfg.validate()?;
    if x.dim() != y.dim() {
        return Err(Error::Dimension(format!(
            "SSIM shape mismatch: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    let (_, _, h, w) = x.dim();
    if h < cfg.window_size || w < cfg.window_size {
        return Err(Error::Dimension(format!(
            "image {h}x{w} is smaller than the {0}x{0} SSIM window",
            cfg.window_size
        )));
    }
    Ok(())
}

/// Mean SSIM over every valid window position, channel and batch item.
pub fn ssim_raw(x: &Array4<f64>, y: &Array4<f64>, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_impl(x, y, cfg, false)?.0)
}

/// Mean SSIM and its gradient with respect to `x`.
pub fn ssim_with_grad(x: &Array4<f64>, y: &Array4<f64>, cfg: &SsimConfig) -> Result<(f64, Array4<f64>)> {
    let (v, g) = ssim_impl(x, y, cfg, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn ssim_impl(
    x: &Array4<f64>,
    y: &Array4<f64>,
    cfg: &SsimConfig,
    want_grad: bool,
) -> Result<(f64, Option<Array4<f64>>)> {
    check_shapes(x, y, cfg)?;
    let (n, c, h, w) = x.dim();
    let g = cfg.window_1d();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let k = cfg.window_size;
    let count = (n * c * (h - k + 1) * (w - k + 1)) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Array4::zeros(x.dim()));
    for b in 0..n {
        for ch in 0..c {
            let xp = x.slice(s![b, ch, .., ..]);
            let yp = y.slice(s![b, ch, .., ..]);
            let mx = filter_valid(xp, &g);
            let my = filter_valid(yp, &g);
            let exx = filter_valid((&xp * &xp).view(), &g);
            let eyy = filter_valid((&yp * &yp).view(), &g);
            let exy = filter_valid((&xp * &yp).view(), &g);

            let dims = mx.raw_dim();
            let mut gm = Array2::<f64>::zeros(dims);
            let mut gxx = Array2::<f64>::zeros(dims);
            let mut gxy = Array2::<f64>::zeros(dims);
            let stats = [&mx, &my, &exx, &eyy, &exy].map(|a| a.as_slice().expect("owned map"));
            let (gm_s, gxx_s, gxy_s) = (
                gm.as_slice_mut().expect("owned map"),
                gxx.as_slice_mut().expect("owned map"),
                gxy.as_slice_mut().expect("owned map"),
            );
            for i in 0..stats[0].len() {
                let (mx, my, exx, eyy, exy) = (stats[0][i], stats[1][i], stats[2][i], stats[3][i], stats[4][i]);
                let sxx = exx - mx * mx;
                let syy = eyy - my * my;
                let sxy = exy - mx * my;
                let a1 = 2.0 * mx * my + c1;
                let a2 = 2.0 * sxy + c2;
                let b1 = mx * mx + my * my + c1;
                let b2 = sxx + syy + c2;
                let ssim = (a1 * a2) / (b1 * b2);
                total += ssim;
                if want_grad {
                    let den = b1 * b2;
                    gm_s[i] = (2.0 * my * (a2 - a1)) / den - ssim * (2.0 * mx / b1 - 2.0 * mx / b2);
                    gxx_s[i] = -ssim / b2;
                    gxy_s[i] = 2.0 * a1 / den;
                }
            }
            if let Some(grad) = grad.as_mut() {
                let dm = filter_valid_adjoint(&gm, &g, h, w);
                let dxx = filter_valid_adjoint(&gxx, &g, h, w);
                let dxy = filter_valid_adjoint(&gxy, &g, h, w);
                let mut dst = grad.slice_mut(s![b, ch, .., ..]);
                Zip::from(&mut dst)
                    .and(&xp)
                    .and(&yp)
                    .and(&dm)
                    .and(&dxx)
                    .and(&dxy)
                    .for_each(|d, &xv, &yv, &dm, &dxx, &dxy| {
                        *d = (dm + 2.0 * xv * dxx + yv * dxy) / count;
                    });
            }
        }
    }
    Ok((total / count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_separable() {
        let cfg = SsimConfig::default();
        let w = cfg.window_2d();
        assert_eq!(w.dim(), (11, 11));
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!(cfg.c1() > 0.0 && cfg.c2() > 0.0);
    }

    #[test]
    fn separable_filter_matches_2d_window() {
        let cfg = SsimConfig {
            window_size: 5,
            ..Default::default()
        };
        let plane = Array2::from_shape_fn((9, 8), |(y, x)| ((3 * y + 7 * x) % 11) as f64 / 10.0);
        let fast = filter_valid(plane.view(), &cfg.window_1d());
        let w2 = cfg.window_2d();
        for ((y, x), v) in fast.indexed_iter() {
            let direct = (&plane.slice(s![y..y + 5, x..x + 5]) * &w2).sum();
            assert!((v - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn adjoint_identity() {
        let g = SsimConfig {
            window_size: 3,
            ..Default::default()
        }
        .window_1d();
        let a = Array2::from_shape_fn((6, 7), |(y, x)| (y as f64 - x as f64).sin());
        let m = Array2::from_shape_fn((4, 5), |(y, x)| (y as f64 * 0.3 + x as f64).cos());
        let lhs = (&filter_valid(a.view(), &g) * &m).sum();
        let rhs = (&a * &filter_valid_adjoint(&m, &g, 6, 7)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn rejects_even_window_and_small_images() {
        let x = Array4::zeros((1, 3, 8, 8));
        let bad = SsimConfig {
            window_size: 4,
            ..Default::default()
        };
        assert!(matches!(ssim_raw(&x, &x, &bad), Err(Error::Parameter(_))));
        assert!(matches!(
            ssim_raw(&x, &x, &SsimConfig::default()),
            Err(Error::Dimension(_))
        ));
    }
}
