//! sRGB to CIELAB (D65, 2° observer) and the CIEDE2000 color difference.

use ndarray::{Array3, Array4};

/// sRGB (linear) to XYZ, D65.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// Reference white: XYZ of sRGB (1, 1, 1), so neutral grays map to a* = b* = 0.
fn white() -> [f64; 3] {
    RGB_TO_XYZ.map(|row| row.iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LabColor {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabColor {
    pub const fn new(l: f64, a: f64, b: f64) -> Self {
        Self { l, a, b }
    }
}

fn srgb_decode(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Converts one sRGB triple in `[0, 1]` to CIELAB.
pub fn rgb_to_lab(rgb: [f64; 3]) -> LabColor {
    let lin = rgb.map(srgb_decode);
    let white = white();
    let xyz: [f64; 3] =
        std::array::from_fn(|i| RGB_TO_XYZ[i].iter().zip(lin.iter()).map(|(m, v)| m * v).sum::<f64>() / white[i]);
    let [fx, fy, fz] = xyz.map(lab_f);
    LabColor {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

/// Per-pixel CIELAB of an `(n, 3, h, w)` batch, shaped `(n, h, w)`.
pub fn srgb_to_lab(batch: &Array4<f64>) -> Array3<LabColor> {
    let (n, _, h, w) = batch.dim();
    Array3::from_shape_fn((n, h, w), |(b, y, x)| {
        rgb_to_lab([batch[[b, 0, y, x]], batch[[b, 1, y, x]], batch[[b, 2, y, x]]])
    })
}

fn hue_degrees(b: f64, a: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        return 0.0;
    }
    let h = b.atan2(a).to_degrees();
    if h < 0.0 {
        h + 360.0
    } else {
        h
    }
}

/// CIEDE2000 difference with kL = kC = kH = 1.
pub fn ciede2000(c1: LabColor, c2: LabColor) -> f64 {
    const POW25_7: f64 = 6_103_515_625.0;
    let chroma1 = c1.a.hypot(c1.b);
    let chroma2 = c2.a.hypot(c2.b);
    let mean_c = (chroma1 + chroma2) / 2.0;
    let mean_c7 = mean_c.powi(7);
    let g = 0.5 * (1.0 - (mean_c7 / (mean_c7 + POW25_7)).sqrt());

    let a1p = (1.0 + g) * c1.a;
    let a2p = (1.0 + g) * c2.a;
    let c1p = a1p.hypot(c1.b);
    let c2p = a2p.hypot(c2.b);
    let h1p = hue_degrees(c1.b, a1p);
    let h2p = hue_degrees(c2.b, a2p);

    let dl = c2.l - c1.l;
    let dc = c2p - c1p;
    let chroma_product = c1p * c2p;
    let dh = if chroma_product == 0.0 {
        0.0
    } else {
        let d = h2p - h1p;
        if d > 180.0 {
            d - 360.0
        } else if d < -180.0 {
            d + 360.0
        } else {
            d
        }
    };
    let dh_big = 2.0 * chroma_product.sqrt() * (dh.to_radians() / 2.0).sin();

    let mean_l = (c1.l + c2.l) / 2.0;
    let mean_cp = (c1p + c2p) / 2.0;
    let hue_sum = h1p + h2p;
    let mean_h = if chroma_product == 0.0 {
        hue_sum
    } else if (h1p - h2p).abs() <= 180.0 {
        hue_sum / 2.0
    } else if hue_sum < 360.0 {
        (hue_sum + 360.0) / 2.0
    } else {
        (hue_sum - 360.0) / 2.0
    };

    let cos_deg = |d: f64| d.to_radians().cos();
    let t = 1.0 - 0.17 * cos_deg(mean_h - 30.0) + 0.24 * cos_deg(2.0 * mean_h) + 0.32 * cos_deg(3.0 * mean_h + 6.0)
        - 0.20 * cos_deg(4.0 * mean_h - 63.0);
    let d_theta = 30.0 * (-((mean_h - 275.0) / 25.0).powi(2)).exp();
    let mean_cp7 = mean_cp.powi(7);
    let rc = 2.0 * (mean_cp7 / (mean_cp7 + POW25_7)).sqrt();
    let l50 = (mean_l - 50.0).powi(2);
    let sl = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let sc = 1.0 + 0.045 * mean_cp;
    let sh = 1.0 + 0.015 * mean_cp * t;
    let rt = -(2.0 * d_theta).to_radians().sin() * rc;

    let tl = dl / sl;
    let tc = dc / sc;
    let th = dh_big / sh;
    (tl * tl + tc * tc + th * th + rt * tc * th).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_black_and_gray() {
        let w = rgb_to_lab([1.0; 3]);
        assert!((w.l - 100.0).abs() < 1e-3 && w.a.abs() < 1e-3 && w.b.abs() < 1e-3);
        assert_eq!(rgb_to_lab([0.0; 3]), LabColor::new(0.0, 0.0, 0.0));
        let g = rgb_to_lab([0.5; 3]);
        assert!(g.a.abs() < 1e-6 && g.b.abs() < 1e-6);
        // scikit-image rgb2lab reference values
        assert!((g.l - 53.388_964_7).abs() < 1e-3, "{g:?}");
        let c = rgb_to_lab([0.2, 0.4, 0.6]);
        assert!((c.l - 42.008_000_6).abs() < 1e-3);
        assert!((c.a - -0.154_041_2).abs() < 1e-2);
        assert!((c.b - -32.842_897_4).abs() < 1e-2);
    }

    #[test]
    fn published_pair() {
        let d = ciede2000(
            LabColor::new(50.0, 2.6772, -79.7751),
            LabColor::new(50.0, 0.0, -82.7485),
        );
        assert!((d - 2.0425).abs() < 1e-4, "{d}");
    }

    #[test]
    fn achromatic_pair_uses_lightness_only() {
        let d = ciede2000(LabColor::new(40.0, 0.0, 0.0), LabColor::new(60.0, 0.0, 0.0));
        let sl = 1.0 + 0.015 * 0.0 / 20f64.sqrt();
        assert!((d - 20.0 / sl).abs() < 1e-12);
    }
}
