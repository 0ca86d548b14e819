//! Dataset manifests, training crops, evaluation resizing and image I/O.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use image::{DynamicImage, Rgb, RgbImage};
use log::warn;
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::message::{self, BitMessage};
use crate::tensor::ImageBatch;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_CROP: usize = 128;
const IMAGE_EXTENSIONS: [&str; 8] = ["png", "jpg", "jpeg", "bmp", "gif", "tif", "tiff", "webp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub root: PathBuf,
    pub seed: u64,
    pub counts: SplitCounts,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn path_of(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn validate(&self) -> Result<()> {
        let lists = [&self.train, &self.val, &self.test];
        let expected = [self.counts.train, self.counts.val, self.counts.test];
        for (list, n) in lists.iter().zip(expected) {
            if list.len() != n {
                return Err(Error::Config(format!(
                    "manifest split has {} ids but its count says {n}",
                    list.len()
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for id in lists.iter().flat_map(|l| l.iter()) {
            if !seen.insert(id) {
                return Err(Error::Config(format!("image `{id}` appears in more than one split")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        if manifest.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported manifest version {}", manifest.format_version),
            ));
        }
        manifest.validate().map_err(|e| Error::format(path, e))?;
        Ok(manifest)
    }
}

/// Files that could not be decoded while building a manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SkippedFiles(pub Vec<(String, String)>);

/// Shuffles the decodable images under `image_dir` with `seed` and assigns
/// the first `counts.train` to train, the next `counts.val` to val, and so on.
pub fn build_splits(
    image_dir: &Path,
    counts: SplitCounts,
    seed: u64,
) -> Result<(DatasetManifest, SkippedFiles)> {
    let mut names = Vec::new();
    for entry in fs::read_dir(image_dir).map_err(|e| Error::io(image_dir, e))? {
        let entry = entry.map_err(|e| Error::io(image_dir, e))?;
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_image {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();

    let mut skipped = SkippedFiles::default();
    let mut usable = Vec::with_capacity(names.len());
    for name in names {
        match image::open(image_dir.join(&name)) {
            Ok(_) => usable.push(name),
            Err(e) => {
                warn!("skipping undecodable image {name}: {e}");
                skipped.0.push((name, e.to_string()));
            }
        }
    }
    if usable.len() < counts.total() {
        return Err(Error::InsufficientImages {
            dir: image_dir.to_path_buf(),
            needed: counts.total(),
            found: usable.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    usable.shuffle(&mut rng);
    let mut it = usable.into_iter();
    let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
    let manifest = DatasetManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        root: image_dir.to_path_buf(),
        seed,
        counts,
        train: take(counts.train),
        val: take(counts.val),
        test: take(counts.test),
    };
    Ok((manifest, skipped))
}

/// Decodes any supported still image to RGB; grayscale is replicated and
/// alpha dropped.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

/// `(1, 3, h, w)` tensor in [-1, 1].
pub fn image_to_tensor(img: &RgbImage) -> ImageBatch {
    let (w, h) = img.dimensions();
    Array4::from_shape_fn((1, 3, h as usize, w as usize), |(_, c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 127.5 - 1.0
    })
}

/// Quantizes item `index` of a batch to 8-bit RGB.
pub fn tensor_to_image(batch: &ImageBatch, index: usize) -> Result<RgbImage> {
    crate::tensor::ensure_rgb(batch)?;
    let (n, _, h, w) = batch.dim();
    if index >= n {
        return Err(Error::Shape(format!("batch has {n} images, index {index}")));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = batch[[index, c, y as usize, x as usize]];
            ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    }))
}

pub fn save_image(path: &Path, batch: &ImageBatch) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    tensor_to_image(batch, 0)?
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Random training crops drawn from the train split.
///
/// Decoded images are kept in memory up to `cache_bytes`.
pub struct TrainingLoader {
    manifest: DatasetManifest,
    crop: usize,
    message_length: usize,
    cache: HashMap<String, Arc<RgbImage>>,
    cache_bytes: usize,
    cached_bytes: usize,
}

/// Decode failures tolerated before a batch request gives up.
const MAX_RESAMPLES: usize = 64;

impl TrainingLoader {
    pub fn new(manifest: DatasetManifest, crop: usize, message_length: usize) -> Result<Self> {
        if manifest.train.is_empty() {
            return Err(Error::Config("train split is empty".into()));
        }
        if crop == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        Ok(TrainingLoader {
            manifest,
            crop,
            message_length,
            cache: HashMap::new(),
            cache_bytes: 1 << 30,
            cached_bytes: 0,
        })
    }

    pub fn with_cache_limit(mut self, bytes: usize) -> Self {
        self.cache_bytes = bytes;
        self
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn image(&mut self, id: &str) -> Result<Arc<RgbImage>> {
        if let Some(img) = self.cache.get(id) {
            return Ok(img.clone());
        }
        let img = Arc::new(upscale_to_cover(load_rgb(&self.manifest.path_of(id))?, self.crop));
        let size = img.as_raw().len();
        if self.cached_bytes + size <= self.cache_bytes {
            self.cached_bytes += size;
            self.cache.insert(id.to_string(), img.clone());
        }
        Ok(img)
    }

    /// Random crops in [-1, 1] with fresh uniform messages as 0/1 rows.
    pub fn batch<R: Rng + ?Sized>(
        &mut self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<(ImageBatch, Array2<f32>)> {
        let c = self.crop;
        let mut out = Array4::<f32>::zeros((batch_size, 3, c, c));
        let mut failures = 0;
        let mut i = 0;
        while i < batch_size {
            let id = self.manifest.train[rng.random_range(0..self.manifest.train.len())].clone();
            let img = match self.image(&id) {
                Ok(img) => img,
                Err(e) => {
                    warn!("skipping unreadable training image {id}: {e}");
                    failures += 1;
                    if failures >= MAX_RESAMPLES {
                        return Err(e);
                    }
                    continue;
                }
            };
            let (w, h) = img.dimensions();
            let top = rng.random_range(0..=(h as usize - c));
            let left = rng.random_range(0..=(w as usize - c));
            for y in 0..c {
                for x in 0..c {
                    let p = img.get_pixel((left + x) as u32, (top + y) as u32);
                    for ch in 0..3 {
                        out[[i, ch, y, x]] = p[ch] as f32 / 127.5 - 1.0;
                    }
                }
            }
            i += 1;
        }
        let messages: Vec<BitMessage> = (0..batch_size)
            .map(|_| random_message(self.message_length, rng))
            .collect();
        Ok((out, message::to_array(&messages)?))
    }
}

/// Bilinearly enlarges `img` so both sides are at least `min_side`.
fn upscale_to_cover(img: RgbImage, min_side: usize) -> RgbImage {
    let (w, h) = img.dimensions();
    if w as usize >= min_side && h as usize >= min_side {
        return img;
    }
    let scale = (min_side as f64 / w as f64).max(min_side as f64 / h as f64);
    let nw = ((w as f64 * scale).ceil() as u32).max(min_side as u32);
    let nh = ((h as f64 * scale).ceil() as u32).max(min_side as u32);
    image::imageops::resize(&img, nw, nh, FilterType::Triangle)
}

/// Test-split style loader: every image of `split`, bilinearly resized to
/// `size × size`, in manifest order.
pub fn eval_images(
    manifest: &DatasetManifest,
    split: Split,
    size: usize,
) -> impl Iterator<Item = Result<(String, ImageBatch)>> + '_ {
    manifest.split(split).iter().map(move |id| {
        let img = load_rgb(&manifest.path_of(id))?;
        let resized = image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
        Ok((id.clone(), image_to_tensor(&resized)))
    })
}

pub fn random_message<R: Rng + ?Sized>(len: usize, rng: &mut R) -> BitMessage {
    BitMessage::random(len, rng)
}

/// Procedural image with smooth shading, a few flat shapes, a low-frequency
/// texture and mild sensor noise.
pub fn synthetic_image<R: Rng + ?Sized>(width: u32, height: u32, rng: &mut R) -> RgbImage {
    let mut base = [[0f32; 3]; 2];
    for corner in &mut base {
        for v in corner.iter_mut() {
            *v = rng.random_range(0.1..0.9);
        }
    }
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());

    struct Shape {
        cx: f32,
        cy: f32,
        rx: f32,
        ry: f32,
        color: [f32; 3],
        ellipse: bool,
    }
    let shapes: Vec<Shape> = (0..rng.random_range(2..6))
        .map(|_| Shape {
            cx: rng.random_range(0.0..1.0),
            cy: rng.random_range(0.0..1.0),
            rx: rng.random_range(0.08..0.35),
            ry: rng.random_range(0.08..0.35),
            color: [rng.random(), rng.random(), rng.random()],
            ellipse: rng.random_bool(0.6),
        })
        .collect();
    let freq = [rng.random_range(2.0..9.0f32), rng.random_range(2.0..9.0f32)];
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let texture = rng.random_range(0.02..0.08f32);
    let noise = rand_distr::Normal::new(0.0f32, 0.01).expect("valid std");

    let mut img = RgbImage::new(width, height);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let u = x as f32 / width as f32;
        let v = y as f32 / height as f32;
        let t = ((u - 0.5) * ca + (v - 0.5) * sa + 0.5).clamp(0.0, 1.0);
        let mut rgb = [0f32; 3];
        for c in 0..3 {
            rgb[c] = base[0][c] * (1.0 - t) + base[1][c] * t;
        }
        for s in &shapes {
            let dx = (u - s.cx) / s.rx;
            let dy = (v - s.cy) / s.ry;
            let inside = if s.ellipse {
                dx * dx + dy * dy <= 1.0
            } else {
                dx.abs() <= 1.0 && dy.abs() <= 1.0
            };
            if inside {
                rgb = s.color;
            }
        }
        let wave = texture * (freq[0] * std::f32::consts::TAU * u + phase).sin()
            * (freq[1] * std::f32::consts::TAU * v).cos();
        for (c, value) in rgb.iter().enumerate() {
            let n: f32 = rand_distr::Distribution::sample(&noise, rng);
            px[c] = ((value + wave + n).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img
}

/// Writes `count` synthetic PNGs named `img_00000.png`, ... into `dir`.
pub fn write_synthetic_corpus(dir: &Path, count: usize, size: u32, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let path = dir.join(format!("img_{i:05}.png"));
            DynamicImage::ImageRgb8(synthetic_image(size, size, &mut rng))
                .save(&path)
                .map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(count: usize, size: u32) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_corpus(dir.path(), count, size, 5).unwrap();
        dir
    }

    const TOY: SplitCounts = SplitCounts {
        train: 8,
        val: 2,
        test: 2,
    };

    #[test]
    fn toy_splits_are_disjoint_and_exhaustive() {
        let dir = corpus(12, 24);
        let (m, skipped) = build_splits(dir.path(), TOY, 1).unwrap();
        assert!(skipped.0.is_empty());
        m.validate().unwrap();
        let mut all: Vec<_> = m.train.iter().chain(&m.val).chain(&m.test).cloned().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 12);
    }

    #[test]
    fn splits_are_seeded() {
        let dir = corpus(12, 24);
        let a = build_splits(dir.path(), TOY, 3).unwrap().0;
        let b = build_splits(dir.path(), TOY, 3).unwrap().0;
        let c = build_splits(dir.path(), TOY, 4).unwrap().0;
        assert_eq!(a.to_json(), b.to_json());
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn insufficient_and_undecodable() {
        let dir = corpus(11, 24);
        fs::write(dir.path().join("broken.png"), b"not an image").unwrap();
        fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        match build_splits(dir.path(), TOY, 1) {
            Err(Error::InsufficientImages { needed, found, .. }) => assert_eq!((needed, found), (12, 11)),
            other => panic!("unexpected {other:?}"),
        }
        let (_, skipped) = build_splits(dir.path(), SplitCounts { train: 9, val: 1, test: 1 }, 1).unwrap();
        assert_eq!(skipped.0.len(), 1);
        assert_eq!(skipped.0[0].0, "broken.png");
    }

    #[test]
    fn manifest_file_round_trips() {
        let dir = corpus(12, 24);
        let (m, _) = build_splits(dir.path(), TOY, 1).unwrap();
        let path = dir.path().join("out/manifest.json");
        m.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded, m);
        loaded.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn batches_are_normalized_and_shaped() {
        let dir = corpus(12, 40);
        let (m, _) = build_splits(dir.path(), TOY, 1).unwrap();
        let mut loader = TrainingLoader::new(m, 32, 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (imgs, bits) = loader.batch(4, &mut rng).unwrap();
        assert_eq!(imgs.dim(), (4, 3, 32, 32));
        assert_eq!(bits.dim(), (4, 30));
        assert!(imgs.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(bits.iter().all(|&b| b == 0.0 || b == 1.0));
    }

    #[test]
    fn crop_equal_to_image_is_whole_image() {
        let dir = corpus(1, 20);
        let m = build_splits(dir.path(), SplitCounts { train: 1, val: 0, test: 0 }, 1).unwrap().0;
        let whole = image_to_tensor(&load_rgb(&m.path_of(&m.train[0])).unwrap());
        let mut loader = TrainingLoader::new(m, 20, 4).unwrap();
        let (imgs, _) = loader.batch(1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(imgs, whole);
    }

    #[test]
    fn small_images_are_upscaled() {
        let dir = corpus(1, 12);
        let m = build_splits(dir.path(), SplitCounts { train: 1, val: 0, test: 0 }, 1).unwrap().0;
        let mut loader = TrainingLoader::new(m, 32, 4).unwrap();
        let (imgs, _) = loader.batch(2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(imgs.dim(), (2, 3, 32, 32));
    }

    #[test]
    fn training_batches_never_touch_test_ids() {
        let dir = corpus(12, 24);
        let (m, _) = build_splits(dir.path(), TOY, 9).unwrap();
        // poison every non-train image: any read would fail the batch
        for id in m.val.iter().chain(&m.test) {
            fs::write(m.path_of(id), b"poison").unwrap();
        }
        let mut loader = TrainingLoader::new(m, 16, 4).unwrap().with_cache_limit(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            loader.batch(4, &mut rng).unwrap();
        }
    }

    #[test]
    fn eval_images_resize_in_order() {
        let dir = corpus(12, 30);
        let (m, _) = build_splits(dir.path(), TOY, 1).unwrap();
        let items: Vec<_> = eval_images(&m, Split::Test, 64).map(|r| r.unwrap()).collect();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].0, m.test[0]);
        assert_eq!(items[0].1.dim(), (1, 3, 64, 64));
        let again: Vec<_> = eval_images(&m, Split::Test, 64).map(|r| r.unwrap()).collect();
        assert_eq!(items[1].1, again[1].1);
    }

    #[test]
    fn tensor_image_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = synthetic_image(17, 9, &mut rng);
        let t = image_to_tensor(&img);
        assert_eq!(t.dim(), (1, 3, 9, 17));
        assert_eq!(tensor_to_image(&t, 0).unwrap(), img);
    }

    #[test]
    fn grayscale_sources_become_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        image::GrayAlphaImage::from_pixel(5, 4, image::LumaA([77, 10])).save(&path).unwrap();
        let img = load_rgb(&path).unwrap();
        assert_eq!(img.get_pixel(0, 0), &Rgb([77, 77, 77]));
    }
}
