//! Image I/O, paired datasets, synthetic smoke and dataset splitting.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, ImageReader, RgbImage};
use ndarray::{s, Array2, Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const MIN_SIDE: usize = 16;

/// A batch of sRGB images laid out as `(batch, channel, height, width)` with
/// intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch(Array4<f64>);

impl ImageBatch {
    /// Wraps `data`, checking channel count and that every element is a
    /// finite intensity in `[0, 1]`.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (_, c, _, _) = data.dim();
        if c != CHANNELS {
            return Err(Error::Dimension(format!(
                "image batch must have {CHANNELS} channels, found {c}"
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Parameter(format!("image intensity {v} outside [0, 1]")));
        }
        Ok(Self(data))
    }

    /// Wraps arbitrary model output by clamping into `[0, 1]`.
    pub fn from_clamped(mut data: Array4<f64>) -> Result<Self> {
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self::new(data)
    }

    pub fn filled(batch: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array4::from_elem((batch, CHANNELS, height, width), value))
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.0.dim()
    }

    pub fn len(&self) -> usize {
        self.0.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial size `(height, width)`.
    pub fn spatial(&self) -> (usize, usize) {
        let (_, _, h, w) = self.0.dim();
        (h, w)
    }

    /// Single image `index` as a batch of one.
    pub fn item(&self, index: usize) -> ImageBatch {
        ImageBatch(self.0.slice(s![index..index + 1, .., .., ..]).to_owned())
    }

    /// Stacks single-or-multi image batches of identical spatial size.
    pub fn stack(parts: &[&ImageBatch]) -> Result<ImageBatch> {
        let views: Vec<_> = parts.iter().map(|b| b.0.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Dimension(format!("cannot stack batches: {e}")))?;
        Ok(ImageBatch(data))
    }

    /// Checks the spatial-size constraint of a U-Net with `depth` levels.
    pub fn check_divisible(&self, depth: usize) -> Result<()> {
        check_spatial(self.spatial(), depth)
    }
}

pub(crate) fn check_spatial((h, w): (usize, usize), depth: usize) -> Result<()> {
    let factor = 1usize << depth;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!(
            "spatial size {h}x{w} must be divisible by 2^{depth} = {factor}"
        )));
    }
    Ok(())
}

/// Loads an 8-bit RGB image as a batch of one; value `v` maps to `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBatch> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })?;
    let rgb = match decoded {
        DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            let color = other.color();
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: describe_color_mismatch(color),
            });
        }
    };
    Ok(ImageBatch(rgb_to_array(&rgb)))
}

fn describe_color_mismatch(color: ColorType) -> String {
    let channels = color.channel_count();
    let bits = color.bytes_per_pixel() as usize * 8 / channels as usize;
    if channels as usize != CHANNELS {
        format!("channel count: expected {CHANNELS}, found {channels}")
    } else {
        format!("bit depth: expected 8, found {bits}")
    }
}

fn rgb_to_array(rgb: &RgbImage) -> Array4<f64> {
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = Array4::zeros((1, CHANNELS, h, w));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..CHANNELS {
            data[[0, c, y as usize, x as usize]] = f64::from(px[c]) / 255.0;
        }
    }
    data
}

/// Quantizes one `(channel, height, width)` image to 8 bits.
pub fn to_rgb8(image: ArrayView3<f64>) -> RgbImage {
    let (_, h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| quantize(image[[c, y as usize, x as usize]]);
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the first image of `batch` as an 8-bit PNG.
pub fn save_image(batch: &ImageBatch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let rgb = to_rgb8(batch.data().index_axis(Axis(0), 0));
    rgb.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                path: path.to_path_buf(),
                detail: other.to_string(),
            },
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub smoky: ImageBatch,
    pub clean: ImageBatch,
}

impl PairedSample {
    pub fn new(id: impl Into<String>, smoky: ImageBatch, clean: ImageBatch) -> Result<Self> {
        let id = id.into();
        if smoky.dim() != clean.dim() || smoky.len() != 1 {
            return Err(Error::Pairing {
                id,
                detail: format!(
                    "smoky shape {:?} does not match clean shape {:?}",
                    smoky.dim(),
                    clean.dim()
                ),
            });
        }
        Ok(Self { id, smoky, clean })
    }
}

/// Ordered, nonempty collection of uniquely identified image pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    samples: Vec<PairedSample>,
    manifest_path: String,
}

impl PairedDataset {
    pub fn new(samples: Vec<PairedSample>, manifest_path: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dataset("dataset must be nonempty".into()));
        }
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(Self {
            samples,
            manifest_path: manifest_path.into(),
        })
    }

    pub fn samples(&self) -> &[PairedSample] {
        &self.samples
    }

    pub fn manifest_path(&self) -> &str {
        &self.manifest_path
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    /// Stable digest over ids and pixel data.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for s in &self.samples {
            hasher.update(s.id.as_bytes());
            hasher.update([0u8]);
            for img in [&s.smoky, &s.clean] {
                for d in [img.dim().2, img.dim().3] {
                    hasher.update((d as u64).to_le_bytes());
                }
                for v in img.data().iter() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Stacks the samples at `indices` into `(smoky, clean)` batches.
    pub fn batch(&self, indices: &[usize]) -> Result<(ImageBatch, ImageBatch)> {
        let smoky: Vec<_> = indices.iter().map(|&i| &self.samples[i].smoky).collect();
        let clean: Vec<_> = indices.iter().map(|&i| &self.samples[i].clean).collect();
        Ok((ImageBatch::stack(&smoky)?, ImageBatch::stack(&clean)?))
    }
}

/// One manifest record: `id <TAB> smoky_path <TAB> clean_path`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub smoky: PathBuf,
    pub clean: PathBuf,
}

/// Parses manifest text. Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path, manifest: &Path) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Manifest {
                path: manifest.to_path_buf(),
                detail: format!(
                    "line {}: expected 3 tab-separated fields, found {}",
                    lineno + 1,
                    fields.len()
                ),
            });
        }
        let id = fields[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Manifest {
                path: manifest.to_path_buf(),
                detail: format!("line {}: duplicate id `{id}`", lineno + 1),
            });
        }
        records.push(ManifestRecord {
            id,
            smoky: base.join(fields[1]),
            clean: base.join(fields[2]),
        });
    }
    Ok(records)
}

pub fn load_paired_dataset(manifest: impl AsRef<Path>) -> Result<PairedDataset> {
    let manifest = manifest.as_ref();
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let records = parse_manifest(&text, base, manifest)?;
    let samples = records
        .into_iter()
        .map(|r| {
            let smoky = load_image(&r.smoky)?;
            let clean = load_image(&r.clean)?;
            PairedSample::new(r.id, smoky, clean)
        })
        .collect::<Result<Vec<_>>>()?;
    PairedDataset::new(samples, manifest.display().to_string())
}

/// Writes `ds` as PNG pairs under `dir/{smoky,clean}/` plus `dir/manifest.tsv`.
pub fn write_paired_dataset(ds: &PairedDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["smoky", "clean"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = String::from("# id\tsmoky\tclean\n");
    for s in ds.samples() {
        let smoky = format!("smoky/{}.png", s.id);
        let clean = format!("clean/{}.png", s.id);
        save_image(&s.smoky, dir.join(&smoky))?;
        save_image(&s.clean, dir.join(&clean))?;
        manifest.push_str(&format!("{}\t{smoky}\t{clean}\n", s.id));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Parameters of the haze composite `t * I + (1 - t) * A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmokeParams {
    pub atmospheric_color: [f64; 3],
    pub transmittance_range: (f64, f64),
    /// Grid spacing of the value-noise lattice, in pixels.
    pub noise_scale: usize,
    pub seed: u64,
}

impl SmokeParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.transmittance_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Parameter(format!(
                "transmittance range ({lo}, {hi}) must satisfy 0 <= t_min <= t_max <= 1"
            )));
        }
        if self.atmospheric_color.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Parameter(format!(
                "atmospheric color {:?} must lie in [0, 1]",
                self.atmospheric_color
            )));
        }
        if self.noise_scale == 0 {
            return Err(Error::Parameter("noise_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Smooth random field in `[0, 1]`: lattice values every `scale` pixels,
/// bilinearly interpolated.
fn value_noise(rng: &mut ChaCha8Rng, height: usize, width: usize, scale: usize) -> Array2<f64> {
    let gh = height.div_ceil(scale) + 1;
    let gw = width.div_ceil(scale) + 1;
    let lattice = Array2::from_shape_simple_fn((gh, gw), || rng.random::<f64>());
    Array2::from_shape_fn((height, width), |(y, x)| {
        let fy = y as f64 / scale as f64;
        let fx = x as f64 / scale as f64;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = lattice[[y0, x0]] * (1.0 - tx) + lattice[[y0, x0 + 1]] * tx;
        let bottom = lattice[[y0 + 1, x0]] * (1.0 - tx) + lattice[[y0 + 1, x0 + 1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Transmittance field in `[t_min, t_max]` for one image.
pub fn transmittance_field(params: &SmokeParams, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (lo, hi) = params.transmittance_range;
    value_noise(rng, height, width, params.noise_scale).mapv(|u| (lo + u * (hi - lo)).clamp(lo, hi))
}

/// Degrades `clean` with a seeded haze composite. Each image in the batch
/// draws its own transmittance field from the same seeded stream.
pub fn synth_smoke(clean: &ImageBatch, params: &SmokeParams) -> Result<ImageBatch> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (n, _, h, w) = clean.dim();
    let mut out = clean.data().clone();
    for b in 0..n {
        let t = transmittance_field(params, h, w, &mut rng);
        for c in 0..CHANNELS {
            let a = params.atmospheric_color[c];
            let mut plane = out.slice_mut(s![b, c, .., ..]);
            ndarray::Zip::from(&mut plane)
                .and(&t)
                .for_each(|v, &t| *v = (t * *v + (1.0 - t) * a).clamp(0.0, 1.0));
        }
    }
    ImageBatch::new(out)
}

/// Procedural tissue-like clean image: warm base color, soft blobs and
/// fine sinusoidal texture. Deterministic per seed.
pub fn synth_clean(height: usize, width: usize, seed: u64) -> Result<ImageBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = [
        rng.random_range(0.45..0.75),
        rng.random_range(0.15..0.35),
        rng.random_range(0.15..0.35),
    ];
    let mut data = Array4::zeros((1, CHANNELS, height, width));
    for (c, &v) in base.iter().enumerate() {
        data.slice_mut(s![0, c, .., ..]).fill(v);
    }
    let blobs = rng.random_range(4..9);
    for _ in 0..blobs {
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let radius = rng.random_range(0.08..0.3) * height.min(width) as f64;
        let tint = [
            rng.random_range(-0.35..0.35),
            rng.random_range(-0.2..0.3),
            rng.random_range(-0.2..0.3),
        ];
        for y in 0..height {
            for x in 0..width {
                let d2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (radius * radius);
                let wgt = (-0.5 * d2).exp();
                for c in 0..CHANNELS {
                    data[[0, c, y, x]] += tint[c] * wgt;
                }
            }
        }
    }
    // vessel-like stripes
    let freq = rng.random_range(0.15..0.6);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.04..0.12);
    let (sa, ca) = angle.sin_cos();
    for y in 0..height {
        for x in 0..width {
            let v = amp * (freq * (x as f64 * ca + y as f64 * sa) + phase).sin();
            data[[0, 0, y, x]] += v;
            data[[0, 1, y, x]] -= 0.5 * v;
            data[[0, 2, y, x]] -= 0.5 * v;
        }
    }
    ImageBatch::from_clamped(data)
}

/// Settings for generating a synthetic paired dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub pairs: usize,
    pub size: usize,
    pub transmittance_range: (f64, f64),
    pub atmosphere_range: (f64, f64),
    pub noise_scale: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            pairs: 32,
            size: 64,
            transmittance_range: (0.35, 0.85),
            atmosphere_range: (0.75, 0.95),
            noise_scale: 16,
            seed: 0,
        }
    }
}

pub fn synth_dataset(spec: &SyntheticSpec) -> Result<PairedDataset> {
    if spec.size < MIN_SIDE {
        return Err(Error::Parameter(format!(
            "synthetic image size {} below minimum {MIN_SIDE}",
            spec.size
        )));
    }
    let (alo, ahi) = spec.atmosphere_range;
    if !(0.0..=1.0).contains(&alo) || !(0.0..=1.0).contains(&ahi) || alo > ahi {
        return Err(Error::Parameter(format!(
            "atmosphere range ({alo}, {ahi}) must be an ordered subrange of [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let samples = (0..spec.pairs)
        .map(|i| {
            let clean = synth_clean(spec.size, spec.size, rng.random())?;
            let gray = rng.random_range(alo..=ahi);
            let params = SmokeParams {
                atmospheric_color: [
                    gray,
                    (gray + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0),
                    (gray + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0),
                ],
                transmittance_range: spec.transmittance_range,
                noise_scale: spec.noise_scale,
                seed: rng.random(),
            };
            let smoky = synth_smoke(&clean, &params)?;
            PairedSample::new(format!("synth_{i:04}"), smoky, clean)
        })
        .collect::<Result<Vec<_>>>()?;
    PairedDataset::new(samples, format!("synthetic:seed={}", spec.seed))
}

/// Seeded disjoint split into `(train, val, test)`.
pub fn split_dataset(
    ds: &PairedDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(PairedDataset, PairedDataset, PairedDataset)> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !f.is_finite() || *f <= 0.0) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "split fractions ({ft}, {fv}, {fs}) must be positive and sum to 1"
        )));
    }
    let n = ds.len();
    let n_train = (ft * n as f64 + 1e-9).floor() as usize;
    let n_val = (fv * n as f64 + 1e-9).floor() as usize;
    let n_test = n.saturating_sub(n_train + n_val);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Parameter(format!(
            "split of {n} samples by ({ft}, {fv}, {fs}) leaves an empty partition"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize], tag: &str| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        let samples = idx.iter().map(|&i| ds.samples[i].clone()).collect();
        PairedDataset::new(samples, format!("{}#{tag}", ds.manifest_path))
    };
    Ok((
        take(&order[..n_train], "train")?,
        take(&order[n_train..n_train + n_val], "val")?,
        take(&order[n_train + n_val..], "test")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_png(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
        RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y))).save(path).unwrap();
    }

    #[test]
    fn load_maps_bytes_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, 16, 16, |x, _| if x == 0 { [255, 128, 0] } else { [0, 0, 0] });
        let b = load_image(&p).unwrap();
        assert_eq!(b.dim(), (1, 3, 16, 16));
        assert_eq!(b.data()[[0, 0, 0, 0]], 1.0);
        assert_eq!(b.data()[[0, 1, 0, 0]], 128.0 / 255.0);
        assert!((b.data()[[0, 1, 0, 0]] - 0.50196).abs() < 1e-5);
        assert_eq!(b.data()[[0, 2, 0, 0]], 0.0);
        assert!(b.data().slice(s![.., .., .., 1..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_rejects_wrong_channel_count_and_depth() {
        let dir = tempfile::tempdir().unwrap();
        let rgba = dir.path().join("rgba.png");
        image::RgbaImage::new(16, 16).save(&rgba).unwrap();
        let err = load_image(&rgba).unwrap_err().to_string();
        assert!(err.contains("channel count"), "{err}");

        let deep = dir.path().join("deep.png");
        image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(16, 16)
            .save(&deep)
            .unwrap();
        let err = load_image(&deep).unwrap_err().to_string();
        assert!(err.contains("bit depth"), "{err}");

        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn manifest_loading_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        write_png(&d.join("s1.png"), 32, 32, |_, _| [10, 20, 30]);
        write_png(&d.join("c1.png"), 32, 32, |_, _| [40, 50, 60]);
        write_png(&d.join("s2.png"), 32, 32, |_, _| [1, 2, 3]);
        write_png(&d.join("c2.png"), 32, 32, |_, _| [4, 5, 6]);
        write_png(&d.join("big.png"), 64, 64, |_, _| [0, 0, 0]);

        let m = d.join("m.tsv");
        fs::write(&m, "# comment\nb\ts2.png\tc2.png\na\ts1.png\tc1.png\n").unwrap();
        let ds = load_paired_dataset(&m).unwrap();
        assert_eq!(ds.ids().collect::<Vec<_>>(), ["b", "a"]);

        fs::write(&m, "bad\ts1.png\tbig.png\n").unwrap();
        match load_paired_dataset(&m) {
            Err(Error::Pairing { id, .. }) => assert_eq!(id, "bad"),
            other => panic!("expected pairing error, got {other:?}"),
        }

        fs::write(&m, "a\ts1.png\tc1.png\na\ts2.png\tc2.png\n").unwrap();
        assert!(matches!(load_paired_dataset(&m), Err(Error::Manifest { .. })));

        fs::write(&m, "# only comments\n").unwrap();
        assert!(matches!(load_paired_dataset(&m), Err(Error::Dataset(_))));
    }

    fn gradient_image(n: usize) -> ImageBatch {
        let data = Array4::from_shape_fn((1, 3, n, n), |(_, c, y, x)| ((x + 2 * y + 5 * c) % 17) as f64 / 20.0);
        ImageBatch::new(data).unwrap()
    }

    fn smoke(a: f64, lo: f64, hi: f64, seed: u64) -> SmokeParams {
        SmokeParams {
            atmospheric_color: [a; 3],
            transmittance_range: (lo, hi),
            noise_scale: 4,
            seed,
        }
    }

    #[test]
    fn smoke_identity_and_full_occlusion() {
        let clean = gradient_image(16);
        assert_eq!(synth_smoke(&clean, &smoke(0.9, 1.0, 1.0, 3)).unwrap(), clean);
        let params = SmokeParams {
            atmospheric_color: [0.2, 0.5, 0.7],
            ..smoke(0.0, 0.0, 0.0, 3)
        };
        let out = synth_smoke(&clean, &params).unwrap();
        for c in 0..3 {
            assert!(out
                .data()
                .slice(s![0, c, .., ..])
                .iter()
                .all(|&v| v == params.atmospheric_color[c]));
        }
    }

    #[test]
    fn white_smoke_brightens() {
        let clean = gradient_image(16);
        let out = synth_smoke(&clean, &smoke(1.0, 0.3, 0.9, 11)).unwrap();
        let mean = |b: &ImageBatch| {
            let mut sum = 0.0;
            for v in b.data().iter() {
                sum += v;
            }
            sum / b.data().len() as f64
        };
        assert!(mean(&clean) < 1.0);
        assert!(mean(&out) > mean(&clean));
    }

    #[test]
    fn smoke_rejects_bad_params() {
        let clean = gradient_image(16);
        assert!(matches!(
            synth_smoke(&clean, &smoke(0.5, 0.8, 0.2, 0)),
            Err(Error::Parameter(_))
        ));
        assert!(synth_smoke(&clean, &smoke(0.5, -0.1, 0.2, 0)).is_err());
    }

    #[test]
    fn transmittance_stays_in_range() {
        let p = smoke(0.5, 0.25, 0.6, 9);
        let t = transmittance_field(&p, 40, 24, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(t.iter().all(|&v| (0.25..=0.6).contains(&v)));
    }

    fn tiny_dataset(n: usize) -> PairedDataset {
        let img = ImageBatch::filled(1, 16, 16, 0.5).unwrap();
        let samples = (0..n)
            .map(|i| PairedSample::new(format!("s{i}"), img.clone(), img.clone()).unwrap())
            .collect();
        PairedDataset::new(samples, "mem").unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = tiny_dataset(10);
        let (a, b, c) = split_dataset(&ds, (0.8, 0.1, 0.1), 4).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let again = split_dataset(&ds, (0.8, 0.1, 0.1), 4).unwrap();
        assert_eq!((a, b, c), again);
        assert!(split_dataset(&ds, (0.8, 0.1, 0.2), 4).is_err());
        assert!(split_dataset(&ds, (1.0, 0.0, 0.0), 4).is_err());
    }

    #[test]
    fn synthetic_dataset_is_deterministic() {
        let spec = SyntheticSpec {
            pairs: 3,
            size: 16,
            ..Default::default()
        };
        let a = synth_dataset(&spec).unwrap();
        let b = synth_dataset(&spec).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let other = synth_dataset(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.fingerprint(), other.fingerprint());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn smoke_output_stays_in_unit_range(
            seed in any::<u64>(),
            a in prop::array::uniform3(0.0f64..=1.0),
            t0 in 0.0f64..=1.0,
            t1 in 0.0f64..=1.0,
            scale in 1usize..12,
        ) {
            let params = SmokeParams {
                atmospheric_color: a,
                transmittance_range: (t0.min(t1), t0.max(t1)),
                noise_scale: scale,
                seed,
            };
            let out = synth_smoke(&gradient_image(16), &params).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn split_is_a_partition(n in 3usize..60, seed in any::<u64>(), ft in 0.1f64..0.8, fv in 0.05f64..0.15) {
            let fs = 1.0 - ft - fv;
            let ds = tiny_dataset(n);
            if let Ok((a, b, c)) = split_dataset(&ds, (ft, fv, fs), seed) {
                let mut ids: Vec<String> = a.ids().chain(b.ids()).chain(c.ids()).map(String::from).collect();
                prop_assert_eq!(ids.len(), n);
                ids.sort();
                ids.dedup();
                let mut orig: Vec<String> = ds.ids().map(String::from).collect();
                orig.sort();
                prop_assert_eq!(ids, orig);
            }
        }

        #[test]
        fn png_round_trip_is_bit_exact(bytes in prop::collection::vec(any::<u8>(), 16 * 16 * 3)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("x.png");
            let img = RgbImage::from_raw(16, 16, bytes.clone()).unwrap();
            img.save(&p).unwrap();
            let loaded = load_image(&p).unwrap();
            let q = dir.path().join("y.png");
            save_image(&loaded, &q).unwrap();
            let back = image::open(&q).unwrap().into_rgb8().into_raw();
            prop_assert_eq!(back, bytes);
        }
    }
}
