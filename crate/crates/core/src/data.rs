//! Synthetic domain-shift datasets and the weak/strong augmentation pair.
//!
//! Images are 3-channel, channel-major, with values in `[0, 1]`. Generated
//! images are quantised to multiples of 1/255 so a PNG cache is lossless.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square RGB image, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let mut data = vec![0.0; 3 * size * size];
        for (c, v) in rgb.iter().enumerate() {
            data[c * size * size..(c + 1) * size * size].fill(*v);
        }
        Self { size, data }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.size + y) * self.size + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let s = self.size;
        self.data[(c * s + y) * s + x] = v;
    }

    pub fn clamp(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn quantize(mut self) -> Self {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        self
    }
}

/// Labeled images with a fixed label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> Option<usize> {
        self.images.first().map(|i| i.size)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn check_labels(&self) -> Result<()> {
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Writes `NNNNN.png` files plus `labels.csv` (`file,label`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut csv = String::from("file,label\n");
        for (i, (img, y)) in self.images.iter().zip(&self.labels).enumerate() {
            let name = format!("{i:05}.png");
            let s = img.size;
            let mut buf = image::RgbImage::new(s as u32, s as u32);
            for yy in 0..s {
                for xx in 0..s {
                    let px = [0, 1, 2].map(|c| (img.get(c, yy, xx) * 255.0).round() as u8);
                    buf.put_pixel(xx as u32, yy as u32, image::Rgb(px));
                }
            }
            buf.save(dir.join(&name))?;
            csv.push_str(&format!("{name},{y}\n"));
        }
        let meta = format!("{}\n", self.num_classes);
        fs::write(dir.join("num_classes"), meta).map_err(|e| Error::io(dir, e))?;
        fs::write(dir.join("labels.csv"), csv).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        let num_classes: usize = read("num_classes")?
            .trim()
            .parse()
            .map_err(|e| Error::Data(format!("bad num_classes file: {e}")))?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in read("labels.csv")?.lines().enumerate().skip(1) {
            let (file, label) = line
                .split_once(',')
                .ok_or_else(|| Error::Data(format!("labels.csv:{}: malformed row", lineno + 1)))?;
            let label: usize = label
                .trim()
                .parse()
                .map_err(|e| Error::Data(format!("labels.csv:{}: {e}", lineno + 1)))?;
            let rgb = image::open(dir.join(file))?.to_rgb8();
            let s = rgb.width() as usize;
            let mut img = Image::filled(s, [0.0; 3]);
            for (x, y, px) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    img.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
                }
            }
            images.push(img);
            labels.push(label);
        }
        let ds = Dataset {
            images,
            labels,
            num_classes,
        };
        ds.check_labels()?;
        Ok(ds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseSet {
    /// Filled and outlined geometric shapes.
    Shapes,
    /// 3x5 bitmap digits.
    Digits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Contrast loss, per-image color cast and channel mixing.
    ColorJitter,
    /// Gaussian blur (sigma `1.5 * severity` px) plus additive noise (std `0.05 * severity`).
    BlurNoise,
    /// In-plane rotation.
    Rotation,
}

/// Recipe for a source/target pair that differ only by a shift transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShiftSpec {
    pub base: BaseSet,
    pub shift: ShiftKind,
    pub severity: f64,
    pub classes: usize,
    pub per_class_count: usize,
    pub image_size: usize,
    pub seed: u64,
}

pub const MAX_CLASSES: usize = 10;

impl DomainShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.classes > MAX_CLASSES {
            return Err(Error::Config(format!(
                "the synthetic generators provide at most {MAX_CLASSES} classes, got {}",
                self.classes
            )));
        }
        if self.per_class_count == 0 || self.image_size < 8 {
            return Err(Error::Config(
                "per_class_count must be positive and image_size at least 8".into(),
            ));
        }
        if !(self.severity >= 0.0) {
            return Err(Error::Config(format!(
                "severity must be >= 0, got {}",
                self.severity
            )));
        }
        Ok(())
    }
}

/// Deterministic RNG for one named consumer of a run seed.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_SOURCE: u64 = 11;
const STREAM_TARGET: u64 = 12;

/// Generates `(source, target)`; target labels are kept for evaluation only.
pub fn make_synthetic_shift(spec: &DomainShiftSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let source = generate_domain(spec, STREAM_SOURCE, 0.0)?;
    let target = generate_domain(spec, STREAM_TARGET, spec.severity)?;
    Ok((source, target))
}

/// One domain: clean renders, then the shift at `severity`.
pub fn generate_domain(spec: &DomainShiftSpec, stream: u64, severity: f64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = substream(spec.seed, stream);
    let mut images = Vec::with_capacity(spec.classes * spec.per_class_count);
    let mut labels = Vec::with_capacity(images.capacity());
    // Interleave classes so any prefix is roughly balanced.
    for _ in 0..spec.per_class_count {
        for class in 0..spec.classes {
            let clean = render(spec.base, class, spec.image_size, &mut rng);
            let shifted = apply_shift(&clean, spec.shift, severity, &mut rng);
            images.push(shifted.quantize());
            labels.push(class);
        }
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: spec.classes,
    })
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i.rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

const DIGITS: [[u8; 15]; 10] = [
    [1, 1, 1, 1, 0, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1],
    [0, 1, 0, 1, 1, 0, 0, 1, 0, 0, 1, 0, 1, 1, 1],
    [1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 0, 0, 1, 1, 1],
    [1, 1, 1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 1, 1],
    [1, 0, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1, 0, 0, 1],
    [1, 1, 1, 1, 0, 0, 1, 1, 1, 0, 0, 1, 1, 1, 1],
    [1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, 1, 1, 0, 0, 1, 0, 1, 0, 0, 1, 0, 0, 1, 0],
    [1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, 1, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1, 1, 1, 1],
];

/// Whether shape-space point `(x, y)` (roughly `[-1, 1]^2`, y down) is inside class `class`.
fn inside(base: BaseSet, class: usize, x: f32, y: f32) -> bool {
    match base {
        BaseSet::Shapes => {
            let r = (x * x + y * y).sqrt();
            let m = x.abs().max(y.abs());
            match class {
                0 => r < 0.9,
                1 => m < 0.8,
                2 => y > -0.85 && y < 0.75 && x.abs() < 0.55 * (y + 0.85),
                3 => (x.abs() < 0.28 && y.abs() < 0.9) || (y.abs() < 0.28 && x.abs() < 0.9),
                4 => r > 0.55 && r < 0.95,
                5 => ((x - y).abs() < 0.38 || (x + y).abs() < 0.38) && m < 0.85,
                6 => x.abs() + y.abs() < 0.95,
                7 => m < 0.9 && m > 0.55,
                8 => x.abs() < 0.85 && ((y - 0.45).abs() < 0.2 || (y + 0.45).abs() < 0.2),
                _ => y.abs() < 0.85 && ((x - 0.45).abs() < 0.2 || (x + 0.45).abs() < 0.2),
            }
        }
        BaseSet::Digits => {
            if x.abs() >= 0.6 || y.abs() >= 1.0 {
                return false;
            }
            let col = (((x + 0.6) / 1.2) * 3.0).floor().clamp(0.0, 2.0) as usize;
            let row = (((y + 1.0) / 2.0) * 5.0).floor().clamp(0.0, 4.0) as usize;
            DIGITS[class][row * 3 + col] == 1
        }
    }
}

/// Draws one clean sample of `class` with random placement, scale, tilt and colors.
fn render(base: BaseSet, class: usize, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let fg = hsv_to_rgb(rng.random(), rng.random_range(0.6..1.0), rng.random_range(0.75..1.0));
    let bg = hsv_to_rgb(rng.random(), rng.random_range(0.0..0.6), rng.random_range(0.05..0.3));
    let cx: f32 = rng.random_range(-0.15..0.15);
    let cy: f32 = rng.random_range(-0.15..0.15);
    let scale: f32 = rng.random_range(0.5..0.75);
    let tilt: f32 = rng.random_range(-0.2..0.2);
    let (sin, cos) = tilt.sin_cos();
    let noise = Normal::new(0.0f32, 0.03).expect("valid std");
    let mut img = Image::filled(size, [0.0; 3]);
    let sub = [0.25f32, 0.75];
    for py in 0..size {
        for px in 0..size {
            let mut cover = 0.0f32;
            for sy in sub {
                for sx in sub {
                    let u = ((px as f32 + sx) / size as f32) * 2.0 - 1.0 - cx;
                    let v = ((py as f32 + sy) / size as f32) * 2.0 - 1.0 - cy;
                    let xr = (cos * u + sin * v) / scale;
                    let yr = (-sin * u + cos * v) / scale;
                    if inside(base, class, xr, yr) {
                        cover += 0.25;
                    }
                }
            }
            let n = noise.sample(rng);
            for c in 0..3 {
                img.set(c, py, px, bg[c] * (1.0 - cover) + fg[c] * cover + n);
            }
        }
    }
    img.clamp()
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i32;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i32;
    let s = img.size as i32;
    let mut tmp = img.clone();
    let mut out = img.clone();
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let acc: f32 = k
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * img.get(c, y as usize, (x + i as i32 - r).clamp(0, s - 1) as usize))
                    .sum();
                tmp.set(c, y as usize, x as usize, acc);
            }
        }
        for y in 0..s {
            for x in 0..s {
                let acc: f32 = k
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * tmp.get(c, (y + i as i32 - r).clamp(0, s - 1) as usize, x as usize))
                    .sum();
                out.set(c, y as usize, x as usize, acc);
            }
        }
    }
    out
}

fn rotate(img: &Image, angle: f32) -> Image {
    let s = img.size;
    let half = (s as f32 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let mut out = img.clone();
    for y in 0..s {
        for x in 0..s {
            let dx = x as f32 - half;
            let dy = y as f32 - half;
            let sx = (cos * dx + sin * dy + half).clamp(0.0, s as f32 - 1.0);
            let sy = (-sin * dx + cos * dy + half).clamp(0.0, s as f32 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(s - 1), (y0 + 1).min(s - 1));
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            for c in 0..3 {
                let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
                let bot = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
                out.set(c, y, x, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Applies the domain shift; `severity == 0` is the identity.
pub fn apply_shift(img: &Image, shift: ShiftKind, severity: f64, rng: &mut ChaCha8Rng) -> Image {
    let s = severity as f32;
    // Draw the per-image randomness unconditionally so the source and
    // target streams consume the RNG identically.
    let cast: [f32; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let sign: f32 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let noise_seed: u64 = rng.random();
    if severity == 0.0 {
        return img.clone();
    }
    match shift {
        ShiftKind::ColorJitter => {
            let contrast = (1.0 - 0.6 * s).max(0.05);
            let n = img.size * img.size;
            let mut out = img.clone();
            for i in 0..n {
                let px = [img.data[i], img.data[n + i], img.data[2 * n + i]];
                let gray = (px[0] + px[1] + px[2]) / 3.0;
                for c in 0..3 {
                    // Rotate channels partially and wash out toward gray.
                    let mixed = (1.0 - 0.5 * s.min(1.0)) * px[c] + 0.5 * s.min(1.0) * px[(c + 1) % 3];
                    let washed = gray + (mixed - gray) * (1.0 - 0.5 * s.min(1.0));
                    out.data[c * n + i] = 0.5 + (washed - 0.5) * contrast + 0.3 * s * cast[c];
                }
            }
            out.clamp()
        }
        ShiftKind::BlurNoise => {
            let mut out = gaussian_blur(img, 1.5 * s);
            let mut nrng = ChaCha8Rng::seed_from_u64(noise_seed);
            let noise = Normal::new(0.0f32, 0.05 * s).expect("valid std");
            for v in &mut out.data {
                *v += noise.sample(&mut nrng);
            }
            out.clamp()
        }
        ShiftKind::Rotation => rotate(img, sign * s * std::f32::consts::FRAC_PI_4).clamp(),
    }
}

/// Magnitudes of the strong augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrongAugConfig {
    /// Probability of applying color jitter.
    pub jitter_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from `[1 - j, 1 + j]`.
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    /// Blur sigma drawn from `[0.1, blur_sigma_max]` pixels.
    pub blur_sigma_max: f64,
    pub noise_prob: f64,
    /// Additive noise std drawn from `[0, noise_std_max]`.
    pub noise_std_max: f64,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        Self {
            jitter_prob: 0.8,
            jitter_strength: 0.4,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma_max: 1.0,
            noise_prob: 0.5,
            noise_std_max: 0.05,
        }
    }
}

/// Random translation by up to `size / 8` pixels (edge padding) and a horizontal flip.
pub fn weak_augment<R: Rng>(img: &Image, rng: &mut R) -> Image {
    let s = img.size as i32;
    let pad = (s / 8).max(1);
    let dx = rng.random_range(-pad..=pad);
    let dy = rng.random_range(-pad..=pad);
    let flip = rng.random_bool(0.5);
    let mut out = img.clone();
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let sx0 = if flip { s - 1 - x } else { x };
                let sx = (sx0 + dx).clamp(0, s - 1);
                let sy = (y + dy).clamp(0, s - 1);
                out.set(c, y as usize, x as usize, img.get(c, sy as usize, sx as usize));
            }
        }
    }
    out
}

/// Weak augmentation followed by color jitter, grayscale, blur and noise.
pub fn strong_augment<R: Rng>(img: &Image, rng: &mut R, cfg: &StrongAugConfig) -> Image {
    let mut out = weak_augment(img, rng);
    let n = out.size * out.size;
    if rng.random_bool(cfg.jitter_prob) {
        let j = cfg.jitter_strength;
        let lo = (1.0 - j).max(0.0);
        let bright = rng.random_range(lo..=1.0 + j) as f32;
        let contrast = rng.random_range(lo..=1.0 + j) as f32;
        let sat = rng.random_range(lo..=1.0 + j) as f32;
        let mean = out.data.iter().sum::<f32>() / out.data.len() as f32;
        for i in 0..n {
            let px = [out.data[i], out.data[n + i], out.data[2 * n + i]];
            let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            for c in 0..3 {
                let mut v = px[c] * bright;
                v = mean + (v - mean) * contrast;
                v = gray * bright + (v - gray * bright) * sat;
                out.data[c * n + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    if rng.random_bool(cfg.grayscale_prob) {
        for i in 0..n {
            let g = 0.299 * out.data[i] + 0.587 * out.data[n + i] + 0.114 * out.data[2 * n + i];
            for c in 0..3 {
                out.data[c * n + i] = g;
            }
        }
    }
    if rng.random_bool(cfg.blur_prob) {
        let sigma = rng.random_range(0.1..=cfg.blur_sigma_max.max(0.1)) as f32;
        out = gaussian_blur(&out, sigma);
    }
    if rng.random_bool(cfg.noise_prob) && cfg.noise_std_max > 0.0 {
        let std = rng.random_range(0.0..=cfg.noise_std_max) as f32;
        if std > 0.0 {
            let noise = Normal::new(0.0f32, std).expect("valid std");
            for v in &mut out.data {
                *v += noise.sample(rng);
            }
        }
    }
    out.clamp()
}

/// Stacks images into `[B, 3, H, W]`, mapping `[0, 1]` to `[-1, 1]`.
pub fn images_to_tensor(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let size = images
        .first()
        .map(|i| i.size)
        .ok_or_else(|| Error::Input("empty image batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        if img.size != size {
            return Err(Error::Input("images in a batch must share one size".into()));
        }
        data.extend(img.data.iter().map(|v| v * 2.0 - 1.0));
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, size, size), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Deterministic subsample of `ceil(ratio * n)` (at least one) indices.
pub fn subsample_indices(n: usize, ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("data_ratio must lie in (0, 1], got {ratio}")));
    }
    let take = ((ratio * n as f64).ceil() as usize).clamp(1, n.max(1)).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut substream(seed, 21));
    idx.truncate(take);
    idx.sort_unstable();
    Ok(idx)
}

/// Random `(train, validation)` split with `train_frac` of the samples in train.
pub fn split_train_val(n: usize, train_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut substream(seed, 22));
    let n_train = ((n as f64) * train_frac).round() as usize;
    let n_train = n_train.clamp(1.min(n), n);
    let val = idx.split_off(n_train);
    (idx, val)
}
