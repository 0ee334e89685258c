//! RGB rasters, the aerial-to-panorama polar transform, and the two
//! augmentation families: layout simulation (geometric, applied to both views
//! in lockstep) and semantic augmentation (photometric, per image).
//!
//! Polar convention: for a square aerial of side `S` with centre
//! `c = (S-1)/2` in pixel-centre coordinates, output row `h` of an
//! `Ht x Wt` panorama samples radius `(S/2)(Ht-h)/Ht` (row 0 is the outer
//! ring) and column `w` samples azimuth `2πw/Wt`, clockwise from image-up.
//! Under this convention
//!
//! * `polar(rotate_aerial(A, θ)) == shift_panorama(polar(A), -θ·Wt/360)`
//! * `polar(flip_aerial(A)) == flip_panorama(polar(A))`

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Aerial,
    Panorama,
}

impl View {
    fn name(self) -> &'static str {
        match self {
            View::Aerial => "aerial",
            View::Panorama => "panorama",
        }
    }
}

/// `height x width x 3` raster, row-major with interleaved channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub view: View,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>, view: View) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "{}x{}x3 image needs {} values, got {}",
                height,
                width,
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0,1]")));
        }
        if view == View::Aerial && height != width {
            return Err(Error::invalid(format!("aerial image must be square, got {height}x{width}")));
        }
        Ok(Image { height, width, data, view })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3], view: View) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image { height, width, data, view }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-planar `[3, height, width]` copy for the backbone.
    pub fn to_chw(&self) -> Tensor {
        let p = self.height * self.width;
        let mut data = vec![0.0; 3 * p];
        for i in 0..p {
            for c in 0..3 {
                data[c * p + i] = self.data[i * 3 + c];
            }
        }
        Tensor { shape: vec![3, self.height, self.width], data }
    }

    /// 8-bit quantized RGB bytes (the PNG payload and the dedup hash input).
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8], view: View) -> Result<Self> {
        Image::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect(), view)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    pub fn load_png(path: &Path, view: View) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Image::from_rgb8(h as usize, w as usize, img.as_raw(), view)
    }

    pub fn max_diff(&self, other: &Image) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn expect_view(&self, view: View) -> Result<()> {
        if self.view != view {
            return Err(Error::View { expected: view.name(), got: self.view.name() });
        }
        Ok(())
    }

    fn expect_square_aerial(&self) -> Result<()> {
        self.expect_view(View::Aerial)?;
        if self.height != self.width {
            return Err(Error::invalid(format!(
                "aerial image must be square, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn bilinear(img: &Image, y: f64, x: f64) -> [f64; 3] {
    let max_y = (img.height - 1) as f64;
    let max_x = (img.width - 1) as f64;
    let y = y.clamp(0.0, max_y);
    let x = x.clamp(0.0, max_x);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
    let mut out = [0.0; 3];
    for k in 0..3 {
        let top = a[k] * (1.0 - fx) + b[k] * fx;
        let bot = c[k] * (1.0 - fx) + d[k] * fx;
        out[k] = top * (1.0 - fy) + bot * fy;
    }
    out
}

/// Resamples a square aerial image into a `target_height x target_width` panorama.
pub fn polar_transform(aerial: &Image, target_height: usize, target_width: usize) -> Result<Image> {
    aerial.expect_square_aerial()?;
    if target_height < 2 || target_width < 2 {
        return Err(Error::invalid(format!(
            "polar target size must be at least 2x2, got {target_height}x{target_width}"
        )));
    }
    let s = aerial.width as f64;
    let centre = (s - 1.0) / 2.0;
    let (ht, wt) = (target_height as f64, target_width as f64);
    let mut out = Image::filled(target_height, target_width, [0.0; 3], View::Panorama);
    let trig: Vec<(f64, f64)> = (0..target_width)
        .map(|w| (2.0 * std::f64::consts::PI * w as f64 / wt).sin_cos())
        .collect();
    for h in 0..target_height {
        let radius = s / 2.0 * (ht - h as f64) / ht;
        for (w, &(sin, cos)) in trig.iter().enumerate() {
            let x = centre + radius * sin;
            let y = centre - radius * cos;
            out.set_pixel(h, w, bilinear(aerial, y, x));
        }
    }
    Ok(out)
}

/// Counter-clockwise rotation by a multiple of 90 degrees.
pub fn rotate_aerial(aerial: &Image, theta: u32) -> Result<Image> {
    aerial.expect_square_aerial()?;
    let turns = match theta {
        90 => 1,
        180 => 2,
        270 => 3,
        _ => return Err(Error::invalid(format!("rotation must be 90, 180 or 270 degrees, got {theta}"))),
    };
    let n = aerial.width;
    let mut cur = aerial.clone();
    for _ in 0..turns {
        let mut next = cur.clone();
        for i in 0..n {
            for j in 0..n {
                next.set_pixel(i, j, cur.pixel(j, n - 1 - i));
            }
        }
        cur = next;
    }
    Ok(cur)
}

/// Left-right mirror.
pub fn flip_aerial(aerial: &Image) -> Result<Image> {
    aerial.expect_view(View::Aerial)?;
    let mut out = aerial.clone();
    for i in 0..aerial.height {
        for j in 0..aerial.width {
            out.set_pixel(i, j, aerial.pixel(i, aerial.width - 1 - j));
        }
    }
    Ok(out)
}

fn permute_columns(pano: &Image, src: impl Fn(usize) -> usize) -> Image {
    let mut out = pano.clone();
    for h in 0..pano.height {
        for w in 0..pano.width {
            out.set_pixel(h, w, pano.pixel(h, src(w)));
        }
    }
    out
}

/// Circular column shift: output column `w` is input column `(w - s) mod W`.
pub fn shift_panorama(pano: &Image, s: i64) -> Result<Image> {
    pano.expect_view(View::Panorama)?;
    let w = pano.width as i64;
    Ok(permute_columns(pano, |c| (c as i64 - s).rem_euclid(w) as usize))
}

/// Azimuth reversal keeping column 0 fixed: output `w` is input `(W - w) mod W`.
pub fn flip_panorama(pano: &Image) -> Result<Image> {
    pano.expect_view(View::Panorama)?;
    let w = pano.width;
    Ok(permute_columns(pano, |c| (w - c) % w))
}

/// Panorama shift that corresponds to rotating the aerial by `theta` degrees
/// counter-clockwise.
pub fn rotation_shift(theta: u32, width: usize) -> Result<i64> {
    if (theta as usize * width) % 360 != 0 {
        return Err(Error::invalid(format!(
            "panorama width {width} cannot represent a {theta} degree rotation exactly"
        )));
    }
    Ok(-((theta as usize * width / 360) as i64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    #[default]
    None,
    Weak,
    Strong,
}

impl std::str::FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Level::None),
            "weak" => Ok(Level::Weak),
            "strong" => Ok(Level::Strong),
            other => Err(Error::invalid(format!("unknown level {other:?} (none|weak|strong)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub layout_level: Level,
    pub semantic_level: Level,
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    pub posterize_prob: f64,
    pub posterize_bits: u8,
    /// Empty means no blur.
    pub blur_kernel_choices: Vec<usize>,
    pub blur_sigma_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig::with_levels(Level::Strong, Level::Strong, 0)
    }
}

impl AugmentConfig {
    /// Photometric parameters implied by a semantic level.
    pub fn with_levels(layout_level: Level, semantic_level: Level, seed: u64) -> Self {
        let base = AugmentConfig {
            layout_level,
            semantic_level,
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
            posterize_prob: 0.0,
            posterize_bits: 4,
            blur_kernel_choices: Vec::new(),
            blur_sigma_range: (0.1, 5.0),
            seed,
        };
        match semantic_level {
            Level::None => base,
            Level::Weak => AugmentConfig { jitter_strength: 0.1, grayscale_prob: 0.1, ..base },
            Level::Strong => AugmentConfig {
                jitter_strength: 0.3,
                grayscale_prob: 0.2,
                posterize_prob: 0.2,
                blur_kernel_choices: vec![1, 3, 5],
                ..base
            },
        }
    }

    /// Re-derives the photometric parameters after a level change.
    pub fn set_semantic_level(&mut self, level: Level) {
        *self = Self::with_levels(self.layout_level, level, self.seed);
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0,1], got {p}")))
            }
        };
        prob("grayscale_prob", self.grayscale_prob)?;
        prob("posterize_prob", self.posterize_prob)?;
        if !(0.0..1.0).contains(&self.jitter_strength) {
            return Err(Error::Config(format!("jitter_strength must be in [0,1), got {}", self.jitter_strength)));
        }
        if !(1..=8).contains(&self.posterize_bits) {
            return Err(Error::Config(format!("posterize_bits must be in [1,8], got {}", self.posterize_bits)));
        }
        if let Some(k) = self.blur_kernel_choices.iter().find(|k| **k % 2 == 0) {
            return Err(Error::Config(format!("blur kernel sizes must be odd, got {k}")));
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("invalid blur sigma range ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// One draw of the layout simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutDraw {
    pub flip: bool,
    /// Counter-clockwise degrees; 0 for no rotation.
    pub rotation: u32,
}

pub fn sample_layout<R: Rng + ?Sized>(level: Level, rng: &mut R) -> LayoutDraw {
    match level {
        Level::None => LayoutDraw { flip: false, rotation: 0 },
        Level::Weak => LayoutDraw { flip: rng.random_bool(0.5), rotation: 0 },
        Level::Strong => {
            let flip = rng.random_bool(0.5);
            let rotation = [90, 180, 270][rng.random_range(0..3)];
            LayoutDraw { flip, rotation }
        }
    }
}

/// Applies a layout draw to a matched pair: flip then rotate the aerial, and
/// the corresponding flip then shift to the panorama.
pub fn apply_layout(draw: LayoutDraw, aerial: &Image, ground: &Image) -> Result<(Image, Image)> {
    aerial.expect_square_aerial()?;
    ground.expect_view(View::Panorama)?;
    let (mut a, mut g) = (aerial.clone(), ground.clone());
    if draw.flip {
        a = flip_aerial(&a)?;
        g = flip_panorama(&g)?;
    }
    if draw.rotation != 0 {
        let shift = rotation_shift(draw.rotation, g.width)?;
        a = rotate_aerial(&a, draw.rotation)?;
        g = shift_panorama(&g, shift)?;
    }
    Ok((a, g))
}

pub fn layout_simulate<R: Rng + ?Sized>(
    aerial: &Image,
    ground: &Image,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Image, Image)> {
    apply_layout(sample_layout(cfg.layout_level, rng), aerial, ground)
}

/// Gaussian weights for an odd kernel, normalized to sum to one.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &Image, size: usize, sigma: f64) -> Image {
    if size <= 1 {
        return img.clone();
    }
    let k = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (i, kw) in k.iter().enumerate() {
                let sx = (x + i as isize - r).clamp(0, w - 1);
                let p = img.pixel(y as usize, sx as usize);
                (0..3).for_each(|c| acc[c] += kw * p[c]);
            }
            tmp.set_pixel(y as usize, x as usize, acc);
        }
    }
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (i, kw) in k.iter().enumerate() {
                let sy = (y + i as isize - r).clamp(0, h - 1);
                let p = tmp.pixel(sy as usize, x as usize);
                (0..3).for_each(|c| acc[c] += kw * p[c]);
            }
            out.set_pixel(y as usize, x as usize, acc);
        }
    }
    out
}

/// Keeps the `bits` most significant bits of the 8-bit value.
pub fn posterize_u8(v: u8, bits: u8) -> u8 {
    let mask = !(0xffu8.checked_shr(bits as u32).unwrap_or(0));
    v & mask
}

pub fn grayscale(img: &Image) -> Image {
    let mut out = img.clone();
    for px in out.data.chunks_mut(3) {
        let l = luma([px[0], px[1], px[2]]);
        px.fill(l);
    }
    out
}

fn clamp_all(img: &mut Image) {
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Photometric augmentation: brightness, contrast and saturation jitter (in
/// that order), then optional grayscale, posterize and Gaussian blur.
///
/// Every draw is consumed regardless of which steps fire, so the stream
/// position after the call depends only on the config.
pub fn semantic_augment<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    if cfg.semantic_level == Level::None {
        return img.clone();
    }
    let j = cfg.jitter_strength;
    let mut factor = || if j > 0.0 { rng.random_range(1.0 - j..=1.0 + j) } else { 1.0 };
    let (brightness, contrast, saturation) = (factor(), factor(), factor());
    let gray = rng.random::<f64>() < cfg.grayscale_prob;
    let poster = rng.random::<f64>() < cfg.posterize_prob;
    let blur = if cfg.blur_kernel_choices.is_empty() {
        None
    } else {
        let k = cfg.blur_kernel_choices[rng.random_range(0..cfg.blur_kernel_choices.len())];
        let (lo, hi) = cfg.blur_sigma_range;
        Some((k, rng.random_range(lo..=hi)))
    };

    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v *= brightness);
    clamp_all(&mut out);

    let mean = out.data.chunks(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f64>() / (out.height * out.width) as f64;
    out.data.iter_mut().for_each(|v| *v = contrast * *v + (1.0 - contrast) * mean);
    clamp_all(&mut out);

    for px in out.data.chunks_mut(3) {
        let l = luma([px[0], px[1], px[2]]);
        px.iter_mut().for_each(|v| *v = saturation * *v + (1.0 - saturation) * l);
    }
    clamp_all(&mut out);

    if gray {
        out = grayscale(&out);
    }
    if poster {
        out.data
            .iter_mut()
            .for_each(|v| *v = posterize_u8(to_u8(*v), cfg.posterize_bits) as f64 / 255.0);
    }
    if let Some((k, sigma)) = blur {
        out = gaussian_blur(&out, k, sigma);
    }
    clamp_all(&mut out);
    out
}
