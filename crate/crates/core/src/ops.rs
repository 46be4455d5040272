//! Tensor kernels with their backward passes. All tensors are NCHW `f64`.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Flat views over every trainable tensor of a parameter container, in a
/// fixed order shared by gradients and optimizer state.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Copies every parameter, in order, into one vector.
    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}

fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

fn slice_of_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

/// 2-D convolution with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out_channels, in_channels, k, k)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = Array4::from_shape_simple_fn((cout, cin, k, k), || normal.sample(rng));
        Self {
            weight,
            bias: Array1::zeros(cout),
            stride,
            padding,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            ..*self
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (co, ci, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("contiguous weight")
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channel mismatch");
        let (ho, wo) = self.output_size(h, w);
        let co = self.out_channels();
        let wm = self.weight_matrix();
        let x = x.as_standard_layout();
        let mut out = Array4::zeros((n, co, ho, wo));
        for rows in row_tiles(n * ho, wo) {
            let cols = gather_rows(&x, self.kernel(), self.stride, self.padding, rows.clone(), (ho, wo));
            let y = wm.dot(&cols);
            for (t, r) in rows.enumerate() {
                let (b, oy) = (r / ho, r % ho);
                for o in 0..co {
                    let src = y.slice(s![o, t * wo..(t + 1) * wo]);
                    let bias = self.bias[o];
                    out.slice_mut(s![b, o, oy, ..]).zip_mut_with(&src, |d, v| *d = v + bias);
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns
    /// the gradient with respect to `x`.
    pub fn backward(&self, x: &Array4<f64>, dy: &Array4<f64>, mut grad: Option<&mut Conv2d>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (_, co, ho, wo) = dy.dim();
        let k = self.kernel();
        let wt = self.weight_matrix().reversed_axes();
        let x = x.as_standard_layout();
        let mut dx = Array4::zeros((n, c, h, w));
        for rows in row_tiles(n * ho, wo) {
            let mut dyt = Array2::zeros((co, rows.len() * wo));
            for (t, r) in rows.clone().enumerate() {
                let (b, oy) = (r / ho, r % ho);
                dyt.slice_mut(s![.., t * wo..(t + 1) * wo])
                    .assign(&dy.slice(s![b, .., oy, ..]));
            }
            if let Some(g) = grad.as_deref_mut() {
                let cols = gather_rows(&x, k, self.stride, self.padding, rows.clone(), (ho, wo));
                let mut gw = g
                    .weight
                    .view_mut()
                    .into_shape_with_order((co, c * k * k))
                    .expect("contiguous");
                ndarray::linalg::general_mat_mul(1.0, &dyt, &cols.t(), 1.0, &mut gw);
                g.bias += &dyt.sum_axis(Axis(1));
            }
            let dcols = wt.dot(&dyt);
            scatter_rows_add(&dcols, &mut dx, k, self.stride, self.padding, rows, (ho, wo));
        }
        dx
    }
}

/// Output rows (flattened over batch and height) per im2col tile, sized so a
/// tile holds about 1024 output pixels.
fn row_tiles(total_rows: usize, wo: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let per = (1024 / wo.max(1)).max(1);
    (0..total_rows).step_by(per).map(move |r| r..(r + per).min(total_rows))
}

/// im2col restricted to a range of flattened output rows: `(C*k*k, R*Wo)`.
fn gather_rows(
    x: &ndarray::ArrayRef4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    rows: std::ops::Range<usize>,
    (ho, wo): (usize, usize),
) -> Array2<f64> {
    let (_, c, h, w) = x.dim();
    let src = x.as_slice().expect("standard layout");
    let width = rows.len() * wo;
    let mut cols = vec![0.0; c * k * k * width];
    for (t, r) in rows.enumerate() {
        let (b, oy) = (r / ho, r % ho);
        for ky in 0..k {
            let iy = (oy * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for ci in 0..c {
                let base = ((b * c + ci) * h + iy as usize) * w;
                let src_row = &src[base..base + w];
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * width + t * wo..row * width + (t + 1) * wo];
                    copy_row(src_row, dst, kx, stride, pad);
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, width), cols).expect("sized above")
}

/// Adjoint of [`gather_rows`], accumulating into `dx`.
fn scatter_rows_add(
    dcols: &Array2<f64>,
    dx: &mut Array4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    rows: std::ops::Range<usize>,
    (ho, wo): (usize, usize),
) {
    let (_, c, h, w) = dx.dim();
    let width = rows.len() * wo;
    let src = dcols.as_slice().expect("owned product");
    let dst = dx.as_slice_mut().expect("owned gradient");
    for (t, r) in rows.enumerate() {
        let (b, oy) = (r / ho, r % ho);
        for ky in 0..k {
            let iy = (oy * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for ci in 0..c {
                let base = ((b * c + ci) * h + iy as usize) * w;
                let dst_row = &mut dst[base..base + w];
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let col = &src[row * width + t * wo..row * width + (t + 1) * wo];
                    for (ox, v) in col.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// One output row of patch values for kernel column `kx`.
fn copy_row(src_row: &[f64], dst_row: &mut [f64], kx: usize, stride: usize, pad: usize) {
    let w = src_row.len();
    if stride == 1 {
        // valid ox range: 0 <= ox + kx - pad < w
        let lo = pad.saturating_sub(kx);
        let hi = (w + pad - kx).min(dst_row.len());
        if lo < hi {
            dst_row[lo..hi].copy_from_slice(&src_row[lo + kx - pad..hi + kx - pad]);
        }
    } else {
        for (ox, d) in dst_row.iter_mut().enumerate() {
            let ix = (ox * stride + kx) as isize - pad as isize;
            if ix >= 0 && ix < w as isize {
                *d = src_row[ix as usize];
            }
        }
    }
}

impl Parameters for Conv2d {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![slice_of(&self.weight), slice_of(&self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice_of_mut(&mut self.weight), slice_of_mut(&mut self.bias)]
    }
}

/// Unfolds `(C, H, W)` into `(C*k*k, Ho*Wo)` patch columns.
pub fn im2col(x: ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut cols = vec![0.0; c * k * k * ho * wo];
    im2col_into(x, k, stride, pad, &mut cols, ho * wo, 0);
    Array2::from_shape_vec((c * k * k, ho * wo), cols).expect("sized above")
}

/// Writes patch rows of `x` into `cols` (row-major, `row_len` wide),
/// starting at column `offset`. Padding positions are left untouched.
fn im2col_into(
    x: ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
    row_len: usize,
    offset: usize,
) {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * row_len + offset..row * row_len + offset + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    copy_row(src_row, &mut dst[oy * wo..(oy + 1) * wo], kx, stride, pad);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds patch columns back, accumulating into `dx`.
pub fn col2im_add(cols: &Array2<f64>, mut dx: ndarray::ArrayViewMut3<f64>, k: usize, stride: usize, pad: usize) {
    let (c, h, w) = dx.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let dst = dx.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col = &src[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ix as usize] += col[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2x2, stride-2 transposed convolution (exact 2x upsampling).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2x2 {
    /// `(in_channels, out_channels, 2, 2)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvTranspose2x2 {
    pub fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize) -> Self {
        let std = (2.0 / cin as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            weight: Array4::from_shape_simple_fn((cin, cout, 2, 2), || normal.sample(rng)),
            bias: Array1::zeros(cout),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, ci, h, w) = x.dim();
        let co = self.weight.dim().1;
        let mut out = Array4::zeros((n, co, 2 * h, 2 * w));
        for b in 0..n {
            let xb = x
                .index_axis(Axis(0), b)
                .to_owned()
                .into_shape_with_order((ci, h * w))
                .expect("contiguous");
            for a in 0..2usize {
                for c in 0..2usize {
                    let m = self.weight.slice(s![.., .., a, c]);
                    let z = m.t().dot(&xb).into_shape_with_order((co, h, w)).expect("contiguous");
                    let mut dst = out.slice_mut(s![b, .., a..;2, c..;2]);
                    dst.assign(&z);
                }
            }
            for (o, mut plane) in out.index_axis_mut(Axis(0), b).outer_iter_mut().enumerate() {
                plane += self.bias[o];
            }
        }
        out
    }

    pub fn backward(&self, x: &Array4<f64>, dy: &Array4<f64>, mut grad: Option<&mut ConvTranspose2x2>) -> Array4<f64> {
        let (n, ci, h, w) = x.dim();
        let co = self.weight.dim().1;
        let mut dx = Array4::zeros((n, ci, h, w));
        for b in 0..n {
            let xb = x
                .index_axis(Axis(0), b)
                .to_owned()
                .into_shape_with_order((ci, h * w))
                .expect("contiguous");
            let mut dxb = Array2::<f64>::zeros((ci, h * w));
            for a in 0..2usize {
                for c in 0..2usize {
                    let dz = dy
                        .slice(s![b, .., a..;2, c..;2])
                        .to_owned()
                        .into_shape_with_order((co, h * w))
                        .expect("owned");
                    let m = self.weight.slice(s![.., .., a, c]);
                    dxb += &m.dot(&dz);
                    if let Some(g) = grad.as_deref_mut() {
                        let mut gm = g.weight.slice_mut(s![.., .., a, c]);
                        gm += &xb.dot(&dz.t());
                    }
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                for (o, plane) in dy.index_axis(Axis(0), b).outer_iter().enumerate() {
                    g.bias[o] += plane.sum();
                }
            }
            dx.index_axis_mut(Axis(0), b)
                .assign(&dxb.into_shape_with_order((ci, h, w)).expect("contiguous"));
        }
        dx
    }
}

impl Parameters for ConvTranspose2x2 {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![slice_of(&self.weight), slice_of(&self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice_of_mut(&mut self.weight), slice_of_mut(&mut self.bias)]
    }
}

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of ReLU given its *input* `x`.
pub fn relu_backward(x: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// 2x2 max pooling, stride 2. Returns the pooled map and the winning
/// offset (0..4, row-major in the window) for each output.
pub fn max_pool2(x: &Array4<f64>) -> (Array4<f64>, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array4::zeros((n, c, ho, wo));
    let mut arg = Array4::zeros((n, c, ho, wo));
    for ((b, ch, y, xo), o) in out.indexed_iter_mut() {
        let mut best = f64::NEG_INFINITY;
        let mut best_i = 0u8;
        for i in 0..4u8 {
            let v = x[[b, ch, 2 * y + (i / 2) as usize, 2 * xo + (i % 2) as usize]];
            if v > best {
                best = v;
                best_i = i;
            }
        }
        *o = best;
        arg[[b, ch, y, xo]] = best_i;
    }
    (out, arg)
}

pub fn max_pool2_backward(arg: &Array4<u8>, dy: &Array4<f64>, input_dim: (usize, usize, usize, usize)) -> Array4<f64> {
    let mut dx = Array4::zeros(input_dim);
    for ((b, ch, y, xo), &i) in arg.indexed_iter() {
        dx[[b, ch, 2 * y + (i / 2) as usize, 2 * xo + (i % 2) as usize]] += dy[[b, ch, y, xo]];
    }
    dx
}

pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(d: &Array4<f64>, first: usize) -> (Array4<f64>, Array4<f64>) {
    (
        d.slice(s![.., ..first, .., ..]).to_owned(),
        d.slice(s![.., first.., .., ..]).to_owned(),
    )
}

/// Mirror index without edge repetition (`dcb|abcd|cba`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Depthwise, same-size correlation with reflect padding.
/// `kernel` is `(channels, k, k)` with odd `k`.
pub fn depthwise_reflect(x: &Array4<f64>, kernel: &Array3<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let k = kernel.dim().1;
    let r = (k / 2) as isize;
    let mut out = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            let plane = x.slice(s![b, ch, .., ..]);
            let kern = kernel.index_axis(Axis(0), ch);
            let mut dst = out.slice_mut(s![b, ch, .., ..]);
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for i in 0..k {
                        let sy = reflect_index(y as isize + i as isize - r, h);
                        for j in 0..k {
                            let sx = reflect_index(xx as isize + j as isize - r, w);
                            acc += kern[[i, j]] * plane[[sy, sx]];
                        }
                    }
                    dst[[y, xx]] = acc;
                }
            }
        }
    }
    out
}

/// Backward of [`depthwise_reflect`]: returns `(dx, dkernel)`.
pub fn depthwise_reflect_backward(
    x: &Array4<f64>,
    kernel: &Array3<f64>,
    dy: &Array4<f64>,
) -> (Array4<f64>, Array3<f64>) {
    let (n, c, h, w) = x.dim();
    let k = kernel.dim().1;
    let r = (k / 2) as isize;
    let mut dx = Array4::zeros((n, c, h, w));
    let mut dk = Array3::zeros(kernel.raw_dim());
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let g = dy[[b, ch, y, xx]];
                    if g == 0.0 {
                        continue;
                    }
                    for i in 0..k {
                        let sy = reflect_index(y as isize + i as isize - r, h);
                        for j in 0..k {
                            let sx = reflect_index(xx as isize + j as isize - r, w);
                            dk[[ch, i, j]] += g * x[[b, ch, sy, sx]];
                            dx[[b, ch, sy, sx]] += g * kernel[[ch, i, j]];
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Normalized 1-D Gaussian of odd length `size`.
pub fn gaussian_1d(size: usize, std: f64) -> Array1<f64> {
    let r = (size / 2) as f64;
    let g = Array1::from_shape_fn(size, |i| (-((i as f64 - r).powi(2)) / (2.0 * std * std)).exp());
    let total = g.sum();
    g / total
}

/// Normalized, sampled 2-D Gaussian of odd side `size`.
pub fn gaussian_2d(size: usize, std: f64) -> Array2<f64> {
    let r = (size / 2) as f64;
    let g = Array2::from_shape_fn((size, size), |(i, j)| {
        let d2 = (i as f64 - r).powi(2) + (j as f64 - r).powi(2);
        (-d2 / (2.0 * std * std)).exp()
    });
    let total = g.sum();
    g / total
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
