//! Synthetic ultrasound-phantom dataset: bright bar (femur, class FL=1) and
//! elliptical shell (cranium, class FB=2) structures on a dark background,
//! with multiplicative speckle and additive Gaussian noise, plus PNG and
//! manifest I/O.
//!
//! Every sample carries its generating geometry, so masks can be
//! re-rasterized bit-exactly from the metadata. Per-sample RNG streams are
//! derived from the master seed by `sample_seed`, making generation
//! order-independent and parallelizable.

use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FamError, Result};

pub const CLASS_BG: u8 = 0;
pub const CLASS_FL: u8 = 1;
pub const CLASS_FB: u8 = 2;
pub const NUM_CLASSES: usize = 3;

/// Palette colors for mask visualization: FL red, FB green, BG black.
pub const PALETTE: [[u8; 3]; 3] = [[0, 0, 0], [220, 30, 30], [30, 200, 30]];

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Bar {
    pub cx: f64,
    pub cy: f64,
    pub half_len: f64,
    pub half_thick: f64,
    pub angle: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct EllipseShell {
    pub cx: f64,
    pub cy: f64,
    /// Outer semi-axes.
    pub a: f64,
    pub b: f64,
    pub angle: f64,
    pub thickness: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SampleMeta {
    pub seed: u64,
    pub femur: Option<Bar>,
    pub cranium: Option<EllipseShell>,
}

#[derive(Clone, Debug)]
pub struct SegmentationSample {
    /// `[3,H,W]` intensities in [0,1]; the three channels are identical.
    pub image: Vec<f64>,
    /// `H·W` class indices.
    pub mask: Vec<u8>,
    pub h: usize,
    pub w: usize,
    pub meta: Option<SampleMeta>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub femur_len: (f64, f64),
    pub femur_thick: (f64, f64),
    /// Outer axis lengths (diameters) of the cranium shell.
    pub cranium_axes: (f64, f64),
    pub shell_thick: (f64, f64),
    /// Speckle strength range; additive noise scales with it.
    pub speckle: (f64, f64),
    /// Background base intensity jitter half-width.
    pub contrast_jitter: f64,
    /// Class-mix weights (femur only, cranium only, both).
    pub mix: (f64, f64, f64),
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 64,
            femur_len: (8.0, 24.0),
            femur_thick: (2.0, 4.0),
            cranium_axes: (10.0, 24.0),
            shell_thick: (2.0, 3.0),
            speckle: (0.05, 0.2),
            contrast_jitter: 0.05,
            mix: (0.25, 0.375, 0.375),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(FamError::Data(format!("image_size {} must be a positive multiple of 32", self.image_size)));
        }
        let fits = |r: (f64, f64)| r.0 > 0.0 && r.0 <= r.1;
        if !fits(self.femur_len) || !fits(self.femur_thick) || !fits(self.cranium_axes) || !fits(self.shell_thick) {
            return Err(FamError::Data("phantom ranges must be positive and ordered".into()));
        }
        // largest structure must leave a 2 px border
        let max_extent = (self.femur_len.1).max(self.cranium_axes.1);
        if max_extent + 4.0 > self.image_size as f64 {
            return Err(FamError::Data(format!(
                "structures up to {max_extent} px cannot fit a {} px frame",
                self.image_size
            )));
        }
        if self.speckle.0 < 0.0 || self.speckle.0 > self.speckle.1 {
            return Err(FamError::Data("speckle range must be 0 <= lo <= hi".into()));
        }
        let total = self.mix.0 + self.mix.1 + self.mix.2;
        if self.mix.0 < 0.0 || self.mix.1 < 0.0 || self.mix.2 < 0.0 || total <= 0.0 {
            return Err(FamError::Data("mix weights must be non-negative and not all zero".into()));
        }
        Ok(())
    }
}

/// Deterministic per-sample seed derived from the master seed (splitmix64
/// finalizer of `master ^ i*golden`).
pub fn sample_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Exact rasterization of the generating geometry at pixel centers.
/// The cranium (FB) is drawn first; the femur (FL) overwrites on overlap.
pub fn rasterize(meta: &SampleMeta, size: usize) -> Vec<u8> {
    let mut mask = vec![CLASS_BG; size * size];
    if let Some(e) = &meta.cranium {
        let (sin, cos) = e.angle.sin_cos();
        let (ia, ib) = ((e.a - e.thickness).max(0.0), (e.b - e.thickness).max(0.0));
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - e.cx;
                let dy = y as f64 + 0.5 - e.cy;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                let outer = (u / e.a).powi(2) + (v / e.b).powi(2) <= 1.0;
                let inner = ia > 0.0 && ib > 0.0 && (u / ia).powi(2) + (v / ib).powi(2) <= 1.0;
                if outer && !inner {
                    mask[y * size + x] = CLASS_FB;
                }
            }
        }
    }
    if let Some(bar) = &meta.femur {
        let (sin, cos) = bar.angle.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - bar.cx;
                let dy = y as f64 + 0.5 - bar.cy;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                if u.abs() <= bar.half_len && v.abs() <= bar.half_thick {
                    mask[y * size + x] = CLASS_FL;
                }
            }
        }
    }
    mask
}

fn draw_bar(rng: &mut ChaCha8Rng, spec: &PhantomSpec) -> Bar {
    let size = spec.image_size as f64;
    let len = rng.gen_range(spec.femur_len.0..=spec.femur_len.1);
    let thick = rng.gen_range(spec.femur_thick.0..=spec.femur_thick.1);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    // bounding radius keeps the rotated bar fully inside with a 2 px border
    let r = 0.5 * (len * len + thick * thick).sqrt();
    let margin = r + 2.0;
    Bar {
        cx: rng.gen_range(margin..size - margin),
        cy: rng.gen_range(margin..size - margin),
        half_len: len / 2.0,
        half_thick: thick / 2.0,
        angle,
    }
}

fn draw_shell(rng: &mut ChaCha8Rng, spec: &PhantomSpec) -> EllipseShell {
    let size = spec.image_size as f64;
    let a = rng.gen_range(spec.cranium_axes.0..=spec.cranium_axes.1) / 2.0;
    let b = rng.gen_range(spec.cranium_axes.0..=spec.cranium_axes.1) / 2.0;
    let thickness = rng.gen_range(spec.shell_thick.0..=spec.shell_thick.1);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let margin = a.max(b) + 2.0;
    EllipseShell {
        cx: rng.gen_range(margin..size - margin),
        cy: rng.gen_range(margin..size - margin),
        a,
        b,
        angle,
        thickness,
    }
}

/// Foreground fraction bounds enforced at generation time.
const FG_FRACTION: (f64, f64) = (0.005, 0.25);

/// 5×5 binomial blur of the foreground indicator, used for the halo outside
/// structures. Returns values in [0,1].
fn indicator_blur(mask: &[u8], size: usize) -> Vec<f64> {
    const K: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (i, kv) in K.iter().enumerate() {
                let sx = x as i64 + i as i64 - 2;
                if sx >= 0 && (sx as usize) < size && mask[y * size + sx as usize] != CLASS_BG {
                    acc += kv;
                }
            }
            tmp[y * size + x] = acc / 16.0;
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (i, kv) in K.iter().enumerate() {
                let sy = y as i64 + i as i64 - 2;
                if sy >= 0 && (sy as usize) < size {
                    acc += kv * tmp[sy as usize * size + x];
                }
            }
            out[y * size + x] = acc / 16.0;
        }
    }
    out
}

/// Generate one sample from its own seed. Geometry is rejection-sampled
/// until the foreground fraction lands inside `FG_FRACTION`.
pub fn generate_one(spec: &PhantomSpec, seed: u64) -> Result<SegmentationSample> {
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = (size * size) as f64;
    let mut attempt = 0;
    let (meta, mask) = loop {
        attempt += 1;
        if attempt > 200 {
            return Err(FamError::Data("could not sample geometry satisfying the foreground bounds".into()));
        }
        let mix_total = spec.mix.0 + spec.mix.1 + spec.mix.2;
        let u = rng.gen_range(0.0..mix_total);
        let (want_femur, want_cranium) = if u < spec.mix.0 {
            (true, false)
        } else if u < spec.mix.0 + spec.mix.1 {
            (false, true)
        } else {
            (true, true)
        };
        // cranium drawn first so an overlapping femur overwrites it
        let meta = SampleMeta {
            seed,
            femur: want_femur.then(|| draw_bar(&mut rng, spec)),
            cranium: want_cranium.then(|| draw_shell(&mut rng, spec)),
        };
        let mask = rasterize(&meta, size);
        let fg = mask.iter().filter(|&&v| v != CLASS_BG).count() as f64 / total;
        if fg >= FG_FRACTION.0 && fg <= FG_FRACTION.1 {
            break (meta, mask);
        }
    };

    // intensity: background base + per-structure margin; foreground pixels
    // sit at base + margin, background picks up a halo capped at 0.7*margin
    // so foreground stays strictly brighter at zero noise
    let base = 0.15 + rng.gen_range(-spec.contrast_jitter..=spec.contrast_jitter);
    let margin = rng.gen_range(0.35..=0.5);
    let sigma = rng.gen_range(spec.speckle.0..=spec.speckle.1);
    let halo = indicator_blur(&mask, size);
    let mut gray = vec![0.0; size * size];
    for i in 0..size * size {
        gray[i] = if mask[i] != CLASS_BG {
            base + margin
        } else {
            base + 0.7 * margin * halo[i].min(1.0)
        };
    }
    // multiplicative Rayleigh-like speckle (mean one) plus additive Gaussian
    let rayleigh_scale = (2.0 / std::f64::consts::PI).sqrt();
    for g in gray.iter_mut() {
        if sigma > 0.0 {
            let u: f64 = rng.gen_range(1e-12..1.0);
            let r = rayleigh_scale * (-2.0 * u.ln()).sqrt();
            let speckle = 1.0 - sigma + sigma * r;
            let gauss: f64 = {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                (-2.0 * u1.ln()).sqrt() * u2.cos()
            };
            *g = (*g * speckle + 0.25 * sigma * gauss).clamp(0.0, 1.0);
        } else {
            *g = g.clamp(0.0, 1.0);
        }
    }
    let mut image = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        image.extend_from_slice(&gray);
    }
    Ok(SegmentationSample { image, mask, h: size, w: size, meta: Some(meta) })
}

/// Deterministic dataset of `n` samples.
pub fn generate(spec: &PhantomSpec, n: usize, seed: u64) -> Result<Vec<SegmentationSample>> {
    if n == 0 {
        return Err(FamError::Data("dataset size must be >= 1".into()));
    }
    spec.validate()?;
    (0..n).map(|i| generate_one(spec, sample_seed(seed, i as u64))).collect()
}

/// Deterministic, disjoint, covering split by shuffled indices. Sizes are
/// floor(n*ratio) for train and val; the remainder goes to test.
pub fn split(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(FamError::Data(format!("split ratios sum to {sum}, expected 1")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = (n as f64 * ratios.0).floor() as usize;
    let n_val = (n as f64 * ratios.1).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(FamError::Data(format!("split of {n} samples leaves an empty part")));
    }
    let train = idx[..n_train].to_vec();
    let val = idx[n_train..n_train + n_val].to_vec();
    let test = idx[n_train + n_val..].to_vec();
    Ok((train, val, test))
}

// ---------------------------------------------------------------------------
// PNG + manifest I/O

pub fn save_image_png(path: &Path, image: &[f64], h: usize, w: usize) -> Result<()> {
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (image[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Mask as single-channel 8-bit PNG of raw class indices (lossless).
pub fn save_mask_png(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<()> {
    let buf = image::GrayImage::from_raw(w as u32, h as u32, mask.to_vec())
        .ok_or_else(|| FamError::Data("mask buffer does not match size".into()))?;
    buf.save(path)?;
    Ok(())
}

/// Color-palette visualization of a mask: FL red, FB green, background black.
pub fn save_palette_png(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<()> {
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let cls = mask[y * w + x] as usize;
            let color = PALETTE.get(cls).copied().unwrap_or([255, 255, 255]);
            buf.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Load an image/mask PNG pair. The mask must be single-channel with class
/// indices below `num_classes` and match the image size.
pub fn load_png_pair(image_path: &Path, mask_path: &Path, num_classes: usize) -> Result<SegmentationSample> {
    let img = image::open(image_path)?.into_luma8();
    let msk = image::open(mask_path)?.into_luma8();
    if img.dimensions() != msk.dimensions() {
        return Err(FamError::Data(format!(
            "image {:?} and mask {:?} sizes differ: {:?} vs {:?}",
            image_path,
            mask_path,
            img.dimensions(),
            msk.dimensions()
        )));
    }
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let gray: Vec<f64> = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    let mask: Vec<u8> = msk.as_raw().clone();
    if let Some(&bad) = mask.iter().find(|&&v| (v as usize) >= num_classes) {
        return Err(FamError::Data(format!(
            "mask {:?} contains class {bad}, out of range for {num_classes} classes",
            mask_path
        )));
    }
    let mut image = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        image.extend_from_slice(&gray);
    }
    Ok(SegmentationSample { image, mask, h, w, meta: None })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: String,
}

/// Write a dataset directory: `images/*.png`, `masks/*.png`, and a
/// line-delimited `manifest.tsv` (image, mask, split).
pub fn write_dataset(dir: &Path, samples: &[SegmentationSample], splits: &(Vec<usize>, Vec<usize>, Vec<usize>)) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let tag_of = |i: usize| -> &'static str {
        if splits.0.contains(&i) {
            "train"
        } else if splits.1.contains(&i) {
            "val"
        } else {
            "test"
        }
    };
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = PathBuf::from(format!("images/{i:05}.png"));
        let mask = PathBuf::from(format!("masks/{i:05}.png"));
        // grayscale channel 0 is the full image (channels identical)
        save_image_png(&dir.join(&image), &s.image[..s.h * s.w], s.h, s.w)?;
        save_mask_png(&dir.join(&mask), &s.mask, s.h, s.w)?;
        entries.push(ManifestEntry { image, mask, split: tag_of(i).to_string() });
    }
    let mut manifest = String::new();
    for e in &entries {
        manifest.push_str(&format!("{}\t{}\t{}\n", e.image.display(), e.mask.display(), e.split));
    }
    fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(dir.join("manifest.tsv"))
        .map_err(|e| FamError::Data(format!("cannot read manifest in {dir:?}: {e}")))?;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(FamError::Data(format!("manifest line {}: expected 3 tab-separated fields", ln + 1)));
        }
        entries.push(ManifestEntry {
            image: PathBuf::from(parts[0]),
            mask: PathBuf::from(parts[1]),
            split: parts[2].to_string(),
        });
    }
    if entries.is_empty() {
        return Err(FamError::Data("manifest is empty".into()));
    }
    Ok(entries)
}

/// Load every manifest entry with the given split tag (or all when None).
pub fn load_dataset(dir: &Path, split_tag: Option<&str>, num_classes: usize) -> Result<Vec<SegmentationSample>> {
    let entries = read_manifest(dir)?;
    let mut out = Vec::new();
    for e in entries {
        if split_tag.map(|t| t == e.split).unwrap_or(true) {
            out.push(load_png_pair(&dir.join(&e.image), &dir.join(&e.mask), num_classes)?);
        }
    }
    if out.is_empty() {
        return Err(FamError::Data(format!("no samples for split {split_tag:?} in {dir:?}")));
    }
    Ok(out)
}
