//! Synthetic OOD unit-test images.
//!
//! Every image is a pure function of `(recipe, width, height, base_seed,
//! index, source images)`. Image `i` draws from a xoshiro256++ stream seeded
//! with `splitmix64(base_seed ^ i)`. Draw order within a recipe is fixed:
//! recipe-level parameters first (σ, δ, colour, orientation, stripe count),
//! then per-pixel values in row-major order, channels R, G, B.
//!
//! Primitive draws:
//! - uniform: `(next_u64 >> 11) · 2⁻⁵³`, in `[0, 1)`
//! - choice from `k` options: index `⌊uniform · k⌋`
//! - Bernoulli(p): `uniform < p`
//! - standard normal: Box–Muller, `√(−2 ln(1 − u₁)) · cos(2π u₂)`, two uniforms per draw
//!
//! Gaussian filtering treats the recipe's "size σ" as the kernel standard
//! deviation in pixels, truncates the kernel at radius `⌈4σ⌉` and mirrors at
//! the borders (`d c b a | a b c d | d c b a`).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder};
use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fitstats::quantile_sorted;
use crate::{Error, Result};

/// Bumped whenever any draw order or recipe detail changes.
pub const GENERATOR_VERSION: u32 = 1;
pub const DEFAULT_SIZE: usize = 224;
pub const DEFAULT_COUNT: usize = 400;
pub const MANIFEST_NAME: &str = "manifest.json";

const GAUSSIAN_SIGMAS: [f64; 7] = [0.05, 0.075, 0.1, 0.15, 0.2, 0.3, 0.5];
const STRIPE_COUNTS: [usize; 6] = [4, 5, 7, 10, 15, 20];
const SMOOTH_SIGMAS: [f64; 6] = [10.0, 15.0, 25.0, 40.0, 60.0, 85.0];
const SMOOTH_PERM_SIGMAS: [f64; 7] = [1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0];
const BLOB_SIGMAS: [f64; 6] = [1.5, 2.0, 2.5, 3.0, 3.5, 4.0];
const BLOB_ON_PROBABILITY: f64 = 0.7;
const BLOB_CUTOFF: f64 = 0.75;
const SMOOTH_COLOR_QUANTILES: (f64, f64) = (0.025, 0.975);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Uniform,
    Gaussian,
    Rademacher,
    PixelPerm,
    Black,
    White,
    Grey,
    Monochrome,
    Tricolour,
    TricolourPrimary,
    Hstripes,
    Vstripes,
    Smooth,
    SmoothPlus,
    SmoothColor,
    SmoothPixelPerm,
    Blobs,
}

impl Recipe {
    pub const ALL: [Recipe; 17] = [
        Recipe::Uniform,
        Recipe::Gaussian,
        Recipe::Rademacher,
        Recipe::PixelPerm,
        Recipe::Black,
        Recipe::White,
        Recipe::Grey,
        Recipe::Monochrome,
        Recipe::Tricolour,
        Recipe::TricolourPrimary,
        Recipe::Hstripes,
        Recipe::Vstripes,
        Recipe::Smooth,
        Recipe::SmoothPlus,
        Recipe::SmoothColor,
        Recipe::SmoothPixelPerm,
        Recipe::Blobs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Uniform => "uniform",
            Recipe::Gaussian => "gaussian",
            Recipe::Rademacher => "rademacher",
            Recipe::PixelPerm => "pixel_perm",
            Recipe::Black => "black",
            Recipe::White => "white",
            Recipe::Grey => "grey",
            Recipe::Monochrome => "monochrome",
            Recipe::Tricolour => "tricolour",
            Recipe::TricolourPrimary => "tricolour_primary",
            Recipe::Hstripes => "hstripes",
            Recipe::Vstripes => "vstripes",
            Recipe::Smooth => "smooth",
            Recipe::SmoothPlus => "smooth_plus",
            Recipe::SmoothColor => "smooth_color",
            Recipe::SmoothPixelPerm => "smooth_pixel_perm",
            Recipe::Blobs => "blobs",
        }
    }

    pub fn needs_sources(self) -> bool {
        matches!(self, Recipe::PixelPerm | Recipe::SmoothPixelPerm)
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown unit-test recipe '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecipeSpec {
    pub recipe: Recipe,
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub base_seed: u64,
    pub source_dir: Option<PathBuf>,
}

impl RecipeSpec {
    pub fn new(recipe: Recipe) -> Self {
        Self {
            recipe,
            width: DEFAULT_SIZE,
            height: DEFAULT_SIZE,
            count: DEFAULT_COUNT,
            base_seed: 0,
            source_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::Usage(format!(
                "image size {}x{} below the 8x8 minimum",
                self.width, self.height
            )));
        }
        if self.count == 0 {
            return Err(Error::Usage("count must be at least 1".into()));
        }
        if self.recipe.needs_sources() && self.source_dir.is_none() {
            return Err(Error::Usage(format!("recipe '{}' requires a source directory", self.recipe)));
        }
        Ok(())
    }
}

/// Row-major RGB image with real channel values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    fn clip(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn image_seed(base_seed: u64, index: usize) -> u64 {
    splitmix64(base_seed ^ index as u64)
}

/// Random stream of one image.
pub struct ImageRng(Xoshiro256PlusPlus);

impl ImageRng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn index(&mut self, k: usize) -> usize {
        ((self.uniform() * k as f64) as usize).min(k - 1)
    }

    pub fn choose<T: Copy>(&mut self, options: &[T]) -> T {
        options[self.index(options.len())]
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn rgb(&mut self) -> [f64; 3] {
        [self.uniform(), self.uniform(), self.uniform()]
    }

    fn primary(&mut self) -> [f64; 3] {
        let mut bit = || if self.bernoulli(0.5) { 1.0 } else { 0.0 };
        [bit(), bit(), bit()]
    }
}

/// Normalized Gaussian kernel with standard deviation `sigma`, radius `⌈4σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let total = crate::reduce::pairwise_sum(&w);
    w.into_iter().map(|x| x / total).collect()
}

/// Mirror index into `[0, n)` with period `2n`.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Horizontal pass over one row. Taps are accumulated in kernel order for
/// every output, so each output is the same left-to-right dot product.
fn convolve_row(line: &[f64], kernel: &[f64], padded: &mut Vec<f64>, out: &mut [f64]) {
    let n = line.len();
    let radius = (kernel.len() / 2) as isize;
    padded.clear();
    padded.extend((-radius..n as isize + radius).map(|i| line[reflect(i, n)]));
    out.fill(0.0);
    for (j, &k) in kernel.iter().enumerate() {
        for (o, &p) in out.iter_mut().zip(&padded[j..j + n]) {
            *o += k * p;
        }
    }
}

/// Separable Gaussian blur of every channel.
pub fn gaussian_filter(img: &ImageBuffer, sigma: f64) -> ImageBuffer {
    let (w, h) = (img.width, img.height);
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut out = img.clone();
    let mut padded = Vec::new();
    let mut tmp = vec![0.0; w * h];
    let mut acc = vec![0.0; w];
    for c in 0..3 {
        let plane = img.channel(c);
        for y in 0..h {
            convolve_row(&plane[y * w..(y + 1) * w], &kernel, &mut padded, &mut tmp[y * w..(y + 1) * w]);
        }
        // vertical pass, whole rows at a time
        for y in 0..h {
            acc.fill(0.0);
            for (j, &k) in kernel.iter().enumerate() {
                let src = reflect(y as isize + j as isize - radius, h);
                for (a, &t) in acc.iter_mut().zip(&tmp[src * w..(src + 1) * w]) {
                    *a += k * t;
                }
            }
            for (x, &a) in acc.iter().enumerate() {
                out.data[3 * (y * w + x) + c] = a;
            }
        }
    }
    out
}

fn rescale_global(img: &mut ImageBuffer) {
    let lo = img.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    img.data
        .iter_mut()
        .for_each(|v| *v = if span > 0.0 { (*v - lo) / span } else { 0.0 });
}

fn rescale_per_channel(img: &mut ImageBuffer) {
    for c in 0..3 {
        let ch = img.channel(c);
        let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for v in img.data.iter_mut().skip(c).step_by(3) {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }
}

/// Per channel, maps the 2.5th percentile to `c − δ` and the 97.5th to `c + δ`.
fn rescale_to_colour(img: &mut ImageBuffer, colour: [f64; 3], delta: f64) {
    for (c, &centre) in colour.iter().enumerate() {
        let mut ch = img.channel(c);
        ch.sort_unstable_by(f64::total_cmp);
        let q_lo = quantile_sorted(&ch, SMOOTH_COLOR_QUANTILES.0);
        let q_hi = quantile_sorted(&ch, SMOOTH_COLOR_QUANTILES.1);
        let span = q_hi - q_lo;
        for v in img.data.iter_mut().skip(c).step_by(3) {
            *v = if span > 0.0 {
                centre - delta + (*v - q_lo) * (2.0 * delta) / span
            } else {
                centre
            };
        }
    }
}

fn uniform_noise(w: usize, h: usize, rng: &mut ImageRng) -> ImageBuffer {
    let data = (0..w * h * 3).map(|_| rng.uniform()).collect();
    ImageBuffer { width: w, height: h, data }
}

/// Stripe `k` of `s` covers `[⌊kL/s⌋, ⌊(k+1)L/s⌋)`.
pub fn stripe_of(pos: usize, len: usize, stripes: usize) -> usize {
    // largest k with ⌊kL/s⌋ ≤ pos
    let mut k = (pos * stripes) / len;
    while k + 1 < stripes && (k + 1) * len / stripes <= pos {
        k += 1;
    }
    while k > 0 && k * len / stripes > pos {
        k -= 1;
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Stripes stacked top to bottom (rows partitioned).
    Horizontal,
    /// Stripes side by side (columns partitioned).
    Vertical,
}

fn striped(w: usize, h: usize, orientation: Orientation, colours: &[[f64; 3]]) -> ImageBuffer {
    let mut img = ImageBuffer::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let k = match orientation {
                Orientation::Horizontal => stripe_of(y, h, colours.len()),
                Orientation::Vertical => stripe_of(x, w, colours.len()),
            };
            img.set_pixel(x, y, colours[k]);
        }
    }
    img
}

/// Parameters drawn for one image, for inspection and testing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DrawnParams {
    pub sigma: Option<f64>,
    pub delta: Option<f64>,
    pub colour: Option<[f64; 3]>,
    pub orientation: Option<Orientation>,
    pub stripes: Option<usize>,
    pub source: Option<PathBuf>,
}

/// Lexically sorted source images for the pixel-permutation recipes.
#[derive(Debug, Clone)]
pub struct SourcePool {
    files: Vec<PathBuf>,
}

impl SourcePool {
    pub fn open(dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| e.to_ascii_lowercase());
            if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                files.push(path);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "no PNG/JPEG source images in {}",
                dir.display()
            )));
        }
        Ok(Self { files })
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    /// Source for image `index`: files are used cyclically.
    pub fn pick(&self, index: usize) -> &Path {
        &self.files[index % self.files.len()]
    }
}

/// Decodes a source image, centre-crops it to a square and resizes it
/// (bilinear) to `width × height`.
pub fn prepare_source(path: &Path, width: usize, height: usize) -> Result<ImageBuffer> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("cannot decode image: {e}")))?
        .to_rgb8();
    let side = img.width().min(img.height());
    let x0 = (img.width() - side) / 2;
    let y0 = (img.height() - side) / 2;
    let square = image::imageops::crop_imm(&img, x0, y0, side, side).to_image();
    let resized = image::imageops::resize(
        &square,
        width as u32,
        height as u32,
        image::imageops::FilterType::Triangle,
    );
    Ok(ImageBuffer {
        width,
        height,
        data: resized.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

fn shuffle_pixels(img: &mut ImageBuffer, rng: &mut ImageRng) {
    let n = img.width * img.height;
    for i in (1..n).rev() {
        let j = rng.index(i + 1);
        for c in 0..3 {
            img.data.swap(3 * i + c, 3 * j + c);
        }
    }
}

pub fn generate_image(spec: &RecipeSpec, index: usize, sources: Option<&SourcePool>) -> Result<ImageBuffer> {
    generate_image_with_params(spec, index, sources).map(|(img, _)| img)
}

/// Generates image `index` of a suite and reports the parameters drawn.
pub fn generate_image_with_params(
    spec: &RecipeSpec,
    index: usize,
    sources: Option<&SourcePool>,
) -> Result<(ImageBuffer, DrawnParams)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ImageRng::new(image_seed(spec.base_seed, index));
    let mut params = DrawnParams::default();

    let permuted_source = |rng: &mut ImageRng, params: &mut DrawnParams| -> Result<ImageBuffer> {
        let pool = sources.ok_or_else(|| {
            Error::Usage(format!("recipe '{}' requires a source directory", spec.recipe))
        })?;
        let path = pool.pick(index);
        let mut img = prepare_source(path, w, h)?;
        shuffle_pixels(&mut img, rng);
        params.source = Some(path.to_path_buf());
        Ok(img)
    };

    let mut img = match spec.recipe {
        Recipe::Uniform => uniform_noise(w, h, &mut rng),
        Recipe::Gaussian => {
            let sigma = rng.choose(&GAUSSIAN_SIGMAS);
            params.sigma = Some(sigma);
            let data = (0..w * h * 3).map(|_| 0.5 + sigma * rng.standard_normal()).collect();
            ImageBuffer { width: w, height: h, data }
        }
        Recipe::Rademacher => {
            let data = (0..w * h * 3)
                .map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 })
                .collect();
            ImageBuffer { width: w, height: h, data }
        }
        Recipe::PixelPerm => permuted_source(&mut rng, &mut params)?,
        Recipe::Black => ImageBuffer::filled(w, h, [0.0; 3]),
        Recipe::White => ImageBuffer::filled(w, h, [1.0; 3]),
        Recipe::Grey => {
            let v = rng.uniform();
            ImageBuffer::filled(w, h, [v; 3])
        }
        Recipe::Monochrome => {
            let colour = rng.rgb();
            params.colour = Some(colour);
            ImageBuffer::filled(w, h, colour)
        }
        Recipe::Tricolour | Recipe::TricolourPrimary => {
            let orientation = if rng.bernoulli(0.5) {
                Orientation::Horizontal
            } else {
                Orientation::Vertical
            };
            params.orientation = Some(orientation);
            params.stripes = Some(3);
            let colours: Vec<[f64; 3]> = (0..3)
                .map(|_| {
                    if spec.recipe == Recipe::Tricolour {
                        rng.rgb()
                    } else {
                        rng.primary()
                    }
                })
                .collect();
            striped(w, h, orientation, &colours)
        }
        Recipe::Hstripes | Recipe::Vstripes => {
            let stripes = rng.choose(&STRIPE_COUNTS);
            params.stripes = Some(stripes);
            let orientation = if spec.recipe == Recipe::Hstripes {
                Orientation::Horizontal
            } else {
                Orientation::Vertical
            };
            params.orientation = Some(orientation);
            let colours: Vec<[f64; 3]> = (0..stripes).map(|_| rng.rgb()).collect();
            striped(w, h, orientation, &colours)
        }
        Recipe::Smooth | Recipe::SmoothPlus => {
            let sigma = rng.choose(&SMOOTH_SIGMAS);
            params.sigma = Some(sigma);
            let mut img = gaussian_filter(&uniform_noise(w, h, &mut rng), sigma);
            if spec.recipe == Recipe::Smooth {
                rescale_global(&mut img);
            } else {
                rescale_per_channel(&mut img);
            }
            img
        }
        Recipe::SmoothColor => {
            let sigma = rng.choose(&SMOOTH_SIGMAS);
            let delta = 0.1 + 0.2 * rng.uniform();
            let colour = rng.rgb();
            params.sigma = Some(sigma);
            params.delta = Some(delta);
            params.colour = Some(colour);
            let mut img = gaussian_filter(&uniform_noise(w, h, &mut rng), sigma);
            rescale_to_colour(&mut img, colour, delta);
            img
        }
        Recipe::SmoothPixelPerm => {
            let sigma = rng.choose(&SMOOTH_PERM_SIGMAS);
            params.sigma = Some(sigma);
            gaussian_filter(&permuted_source(&mut rng, &mut params)?, sigma)
        }
        Recipe::Blobs => {
            let sigma = rng.choose(&BLOB_SIGMAS);
            params.sigma = Some(sigma);
            let data = (0..w * h * 3)
                .map(|_| if rng.bernoulli(BLOB_ON_PROBABILITY) { 1.0 } else { 0.0 })
                .collect();
            let mut img = gaussian_filter(&ImageBuffer { width: w, height: h, data }, sigma);
            img.data.iter_mut().for_each(|v| {
                if *v < BLOB_CUTOFF {
                    *v = 0.0
                }
            });
            img
        }
    };
    img.clip();
    Ok((img, params))
}

/// `round(255·v)` (half away from zero), clamped to `[0, 255]`.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

/// 8-bit RGB, non-interlaced PNG.
pub fn quantize_and_encode(img: &ImageBuffer) -> Vec<u8> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Fast, FilterType::Adaptive)
        .write_image(&bytes, img.width as u32, img.height as u32, ExtendedColorType::Rgb8)
        .expect("in-memory PNG encoding of a well-formed RGB buffer");
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub recipe: Recipe,
    pub seed: u64,
    pub dims: Dims,
    pub generator_version: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<String>,
    pub files: Vec<FileEntry>,
}

pub fn file_name(recipe: Recipe, index: usize) -> String {
    format!("{}_{index:05}.png", recipe.name())
}

/// Renders every image of a suite to PNG bytes, in index order.
pub fn render_suite(spec: &RecipeSpec) -> Result<Vec<(String, Vec<u8>)>> {
    spec.validate()?;
    let pool = match (&spec.source_dir, spec.recipe.needs_sources()) {
        (Some(dir), true) => Some(SourcePool::open(dir)?),
        _ => None,
    };
    (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let img = generate_image(spec, i, pool.as_ref())?;
            Ok((file_name(spec.recipe, i), quantize_and_encode(&img)))
        })
        .collect()
}

/// Writes `count` PNGs and a `manifest.json` into `out_dir`.
pub fn generate_suite(spec: &RecipeSpec, out_dir: &Path) -> Result<SuiteManifest> {
    let rendered = render_suite(spec)?;
    let sources = match (&spec.source_dir, spec.recipe.needs_sources()) {
        (Some(dir), true) => SourcePool::open(dir)?
            .files()
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
        _ => Vec::new(),
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::with_capacity(rendered.len());
    for (name, bytes) in rendered {
        let path = out_dir.join(&name);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.push(FileEntry {
            name,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = SuiteManifest {
        recipe: spec.recipe,
        seed: spec.base_seed,
        dims: Dims {
            width: spec.width,
            height: spec.height,
        },
        generator_version: GENERATOR_VERSION,
        sources,
        files,
    };
    let path = out_dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
