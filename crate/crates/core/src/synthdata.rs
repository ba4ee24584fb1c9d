//! Procedural shapes benchmark.
//!
//! Every sample is a pure function of `(config, index)`: the per-sample
//! stream is seeded with `splitmix64(seed + (index + 1) * 0x9E3779B97F4A7C15)`
//! and all geometry uses `+ - * /` and `sqrt` only, so regenerated datasets
//! are bit-identical across runs and platforms.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::schedule::{ClassId, SegSample, MAX_CLASSES};

/// Index offset for the held-out split so it never collides with training indices.
pub const TEST_INDEX_OFFSET: u64 = 1 << 32;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub image_size: usize,
    /// Inclusive `[min, max]` number of shapes drawn per image.
    pub shapes_per_image: [usize; 2],
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            image_size: 64,
            shapes_per_image: [2, 5],
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
            return Err(Error::Argument(format!(
                "num_classes must be in 2..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Argument(format!(
                "image_size must be at least 16, got {}",
                self.image_size
            )));
        }
        let [lo, hi] = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::Argument(format!(
                "shapes_per_image must be a non-empty range starting at 1 or more, got [{lo}, {hi}]"
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std < 0.5) {
            return Err(Error::Argument(format!(
                "noise_std must be in [0, 0.5), got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Bar,
    Ellipse,
}

const SHAPES: [ShapeKind; 8] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Cross,
    ShapeKind::Ring,
    ShapeKind::Diamond,
    ShapeKind::Bar,
    ShapeKind::Ellipse,
];

const PALETTE: [[f64; 3]; 12] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.90, 0.10],
    [0.90, 0.15, 0.85],
    [0.10, 0.85, 0.90],
    [0.98, 0.55, 0.05],
    [0.50, 0.10, 0.70],
    [0.55, 0.95, 0.55],
    [0.60, 0.35, 0.15],
    [0.98, 0.70, 0.80],
    [0.05, 0.40, 0.40],
];

/// Appearance of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub shape: ShapeKind,
    pub color: [f64; 3],
    /// Stripe texture offset in `[0, 1)`.
    pub texture_phase: f64,
}

/// Appearance of class ids `1..=K`; shapes cycle every 8 ids and colors every
/// 12, with a brightness step per 24 ids so that no two ids share a style.
pub fn class_style(class: ClassId) -> ClassStyle {
    let k = usize::from(class.max(1)) - 1;
    let cycle = (k / 24) as f64;
    let base = PALETTE[k % PALETTE.len()];
    let scale = 1.0 - 0.07 * cycle;
    ClassStyle {
        shape: SHAPES[k % SHAPES.len()],
        color: [base[0] * scale, base[1] * scale, base[2] * scale],
        texture_phase: (k % 5) as f64 / 5.0,
    }
}

pub fn class_palette(num_classes: usize) -> Vec<ClassStyle> {
    (1..=num_classes).map(|c| class_style(c as ClassId)).collect()
}

/// SplitMix64 generator; also used as the per-index seed hash.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(state: u64) -> Self {
        Self { state }
    }

    /// Seeds the stream of sample `index`.
    pub fn for_index(seed: u64, index: u64) -> Self {
        let mut mixer = Self::new(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        Self::new(mixer.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        let span = (hi - lo + 1) as u64;
        lo + (self.next_u64() % span) as usize
    }

    /// Approximately standard normal: centred Irwin-Hall sum of four uniforms.
    pub fn next_gaussian(&mut self) -> f64 {
        const SQRT_3: f64 = 1.732_050_807_568_877_2;
        let s = self.next_f64() + self.next_f64() + self.next_f64() + self.next_f64();
        (s - 2.0) * SQRT_3
    }
}

fn inside(shape: ShapeKind, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => ax <= r * 0.85 && ay <= r * 0.85,
        ShapeKind::Triangle => dy >= -r && dy <= r && ax <= (dy + r) * 0.5,
        ShapeKind::Cross => (ax <= r && ay <= r * 0.3) || (ay <= r && ax <= r * 0.3),
        ShapeKind::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= r * r * 0.36
        }
        ShapeKind::Diamond => ax + ay <= r,
        ShapeKind::Bar => ax <= r && ay <= r * 0.35,
        ShapeKind::Ellipse => {
            let ry = r * 0.55;
            (dx * dx) / (r * r) + (dy * dy) / (ry * ry) <= 1.0
        }
    }
}

fn stripe(style: &ClassStyle, x: usize, y: usize) -> f64 {
    const PERIOD: usize = 4;
    let offset = (style.texture_phase * (2 * PERIOD) as f64) as usize;
    if ((x + y + offset) / PERIOD).is_multiple_of(2) {
        1.0
    } else {
        0.85
    }
}

/// Renders sample `index`. Later shapes occlude earlier ones.
pub fn generate_sample(config: &SynthConfig, index: u64) -> SegSample {
    let size = config.image_size;
    let mut rng = SplitMix64::for_index(config.seed, index);

    let gray = 0.35 + 0.25 * rng.next_f64();
    let tint: Vec<f64> = (0..3).map(|_| gray + 0.1 * (rng.next_f64() - 0.5)).collect();

    let mut color = Array3::<f64>::zeros((3, size, size));
    for ch in 0..3 {
        color.index_axis_mut(ndarray::Axis(0), ch).fill(tint[ch]);
    }
    let mut label = Array2::<ClassId>::zeros((size, size));

    let [lo, hi] = config.shapes_per_image;
    let count = rng.range(lo, hi);
    let min_r = size as f64 / 10.0;
    let max_r = size as f64 / 4.0;
    for _ in 0..count {
        let class = rng.range(1, config.num_classes) as ClassId;
        let style = class_style(class);
        let cx = rng.next_f64() * size as f64;
        let cy = rng.next_f64() * size as f64;
        let r = min_r + (max_r - min_r) * rng.next_f64();
        for y in 0..size {
            let dy = y as f64 + 0.5 - cy;
            if dy.abs() > r {
                continue;
            }
            for x in 0..size {
                let dx = x as f64 + 0.5 - cx;
                if inside(style.shape, dx, dy, r) {
                    label[[y, x]] = class;
                    let s = stripe(&style, x, y);
                    for ch in 0..3 {
                        color[[ch, y, x]] = style.color[ch] * s;
                    }
                }
            }
        }
    }

    let image = color.mapv(|v| {
        let noisy = v + config.noise_std * rng.next_gaussian();
        noisy.clamp(0.0, 1.0) as f32
    });
    SegSample {
        image,
        label,
        sample_id: index,
    }
}

/// Samples `0..n`.
pub fn generate_dataset(config: &SynthConfig, n: usize) -> Vec<SegSample> {
    generate_range(config, 0, n)
}

/// Samples `start..start + n`.
pub fn generate_range(config: &SynthConfig, start: u64, n: usize) -> Vec<SegSample> {
    (0..n as u64).map(|i| generate_sample(config, start + i)).collect()
}

pub fn generate_test_split(config: &SynthConfig, n: usize) -> Vec<SegSample> {
    generate_range(config, TEST_INDEX_OFFSET, n)
}

/// Order-sensitive SHA-256 over ids, shapes, pixels and labels.
pub fn dataset_digest(samples: &[SegSample]) -> String {
    let mut hasher = Sha256::new();
    for s in samples {
        hasher.update(s.sample_id.to_le_bytes());
        hasher.update((s.height() as u32).to_le_bytes());
        hasher.update((s.width() as u32).to_le_bytes());
        for v in s.image.iter() {
            hasher.update(v.to_le_bytes());
        }
        for &l in s.label.iter() {
            hasher.update([l]);
        }
    }
    hex::encode(hasher.finalize())
}

/// Mirror along the width axis.
pub fn hflip(sample: &SegSample) -> SegSample {
    let mut image = sample.image.clone();
    image.invert_axis(ndarray::Axis(2));
    let mut label = sample.label.clone();
    label.invert_axis(ndarray::Axis(1));
    SegSample {
        image: image.as_standard_layout().to_owned(),
        label: label.as_standard_layout().to_owned(),
        sample_id: sample.sample_id,
    }
}

/// Window `[top..top+h, left..left+w]`.
pub fn crop(sample: &SegSample, top: usize, left: usize, h: usize, w: usize) -> Result<SegSample> {
    if top + h > sample.height() || left + w > sample.width() || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "crop {h}x{w} at ({top}, {left}) outside {}x{}",
            sample.height(),
            sample.width()
        )));
    }
    use ndarray::s;
    Ok(SegSample {
        image: sample.image.slice(s![.., top..top + h, left..left + w]).to_owned(),
        label: sample.label.slice(s![top..top + h, left..left + w]).to_owned(),
        sample_id: sample.sample_id,
    })
}

/// Manifest written next to an exported dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetSpec,
    /// Digest of the training split followed by the test split.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub synth: SynthConfig,
    pub train_size: usize,
    pub test_size: usize,
}

impl DatasetSpec {
    pub fn train(&self) -> Vec<SegSample> {
        generate_dataset(&self.synth, self.train_size)
    }

    pub fn test(&self) -> Vec<SegSample> {
        generate_test_split(&self.synth, self.test_size)
    }

    pub fn digest(&self) -> String {
        let mut all = self.train();
        all.extend(self.test());
        dataset_digest(&all)
    }
}

/// Writes `<id>_image.png` / `<id>_label.png` pairs. Label pixels hold the class id.
pub fn export_png_pairs(dir: &Path, samples: &[SegSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        let (h, w) = (s.height() as u32, s.width() as u32);
        let rgb = RgbImage::from_fn(w, h, |x, y| {
            let px = |ch: usize| (s.image[[ch, y as usize, x as usize]] * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        });
        let gray = GrayImage::from_fn(w, h, |x, y| Luma([s.label[[y as usize, x as usize]]]));
        rgb.save(dir.join(format!("{:012}_image.png", s.sample_id)))?;
        gray.save(dir.join(format!("{:012}_label.png", s.sample_id)))?;
    }
    Ok(())
}

/// Reads pairs written by [`export_png_pairs`], ordered by sample id.
pub fn load_png_pairs(dir: &Path) -> Result<Vec<SegSample>> {
    let mut ids: Vec<u64> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().into_string().ok()?;
            name.strip_suffix("_label.png")?.parse().ok()
        })
        .collect();
    ids.sort_unstable();
    ids.into_iter()
        .map(|id| {
            let rgb = image::open(dir.join(format!("{id:012}_image.png")))?.to_rgb8();
            let gray = image::open(dir.join(format!("{id:012}_label.png")))?.to_luma8();
            if rgb.dimensions() != gray.dimensions() {
                return Err(Error::Shape(format!("sample {id}: image and label sizes differ")));
            }
            let (w, h) = rgb.dimensions();
            let (w, h) = (w as usize, h as usize);
            let image = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
                f32::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0
            });
            let label = Array2::from_shape_fn((h, w), |(y, x)| gray.get_pixel(x as u32, y as u32)[0]);
            Ok(SegSample {
                image,
                label,
                sample_id: id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = SynthConfig {
            seed: 17,
            ..Default::default()
        };
        let a = generate_sample(&cfg, 5);
        let b = generate_sample(&cfg, 5);
        assert_eq!(a, b);
        assert_ne!(a, generate_sample(&cfg, 6));
    }

    #[test]
    fn single_shape_single_class() {
        let cfg = SynthConfig {
            num_classes: 2,
            shapes_per_image: [1, 1],
            ..Default::default()
        };
        for i in 0..20 {
            assert_eq!(generate_sample(&cfg, i).present_classes().len(), 1);
        }
    }

    #[test]
    fn ranges_hold() {
        let cfg = SynthConfig {
            noise_std: 0.3,
            ..Default::default()
        };
        for s in generate_dataset(&cfg, 20) {
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.label.iter().all(|&l| usize::from(l) <= cfg.num_classes));
        }
    }

    #[test]
    fn palette_styles_are_distinct() {
        let styles = class_palette(MAX_CLASSES);
        for i in 0..styles.len() {
            for j in i + 1..styles.len() {
                assert!(
                    styles[i].shape != styles[j].shape || styles[i].color != styles[j].color,
                    "classes {} and {} share a style",
                    i + 1,
                    j + 1
                );
            }
        }
    }

    #[test]
    fn digest_examples() {
        let cfg = SynthConfig::default();
        let data = generate_dataset(&cfg, 3);
        assert_eq!(generate_dataset(&cfg, 1), vec![generate_sample(&cfg, 0)]);
        assert_eq!(dataset_digest(&data), dataset_digest(&generate_dataset(&cfg, 3)));
        let mut permuted = data.clone();
        permuted.swap(0, 2);
        assert_ne!(dataset_digest(&data), dataset_digest(&permuted));
        assert_eq!(dataset_digest(&data[..1]), dataset_digest(&[data[0].clone()]));
    }

    #[test]
    fn config_validation() {
        let ok = SynthConfig::default();
        ok.validate().unwrap();
        for bad in [
            SynthConfig {
                num_classes: 1,
                ..ok.clone()
            },
            SynthConfig {
                image_size: 8,
                ..ok.clone()
            },
            SynthConfig {
                noise_std: 0.5,
                ..ok.clone()
            },
            SynthConfig {
                shapes_per_image: [3, 2],
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = generate_sample(&SynthConfig::default(), 3);
        let f = hflip(&s);
        assert_ne!(f, s);
        assert_eq!(hflip(&f), s);
        let c = crop(&s, 8, 4, 16, 32).unwrap();
        assert_eq!(c.label.dim(), (16, 32));
        assert_eq!(c.label[[0, 0]], s.label[[8, 4]]);
        assert!(crop(&s, 60, 0, 16, 16).is_err());
    }
}
