//! Synthetic RGB-thermal scenes, on-disk datasets, augmentation and
//! batching.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::check_divisible;
use crate::error::{Error, Result};
use crate::supervision::{LabelMap, SupervisionTargets};
use crate::tensor::{Scalar, Tensor};

pub const NIGHT_DIMMING: f32 = 0.2;
pub const CROP_FRACTION: f64 = 0.75;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// One aligned RGB-thermal pair with labels. Pixel values lie in `[0, 1]`
/// and are multiples of 1/255, so a PNG round trip is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub height: usize,
    pub width: usize,
    /// Planar, channel-major.
    pub rgb: Vec<f32>,
    pub thermal: Vec<f32>,
    pub labels: LabelMap,
    pub night: bool,
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub night_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_classes: 4,
            night_fraction: 0.3,
        }
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Base colour of a class: muted green-grey for background, evenly spaced
/// saturated hues for objects.
pub fn class_color(class: usize, n_classes: usize) -> [f32; 3] {
    if class == 0 {
        return [0.38, 0.42, 0.34];
    }
    let hue = (class - 1) as f32 / (n_classes - 1) as f32;
    let h6 = hue * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    let (r, g, b) = match h6 as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * b]
}

/// Mean thermal intensity of a class; every object is warmer than the
/// background.
pub fn class_heat(class: usize, n_classes: usize) -> f32 {
    if class == 0 {
        0.2
    } else {
        let span = (n_classes - 2).max(1) as f32;
        0.45 + 0.45 * (class - 1) as f32 / span
    }
}

pub fn gen_synthetic_scene(seed: u64, cfg: &SynthConfig) -> Result<SceneSample> {
    let (h, w, n) = (cfg.height, cfg.width, cfg.n_classes);
    if n < 3 {
        return Err(Error::Config(format!("synthetic scenes need at least 3 classes, got {n}")));
    }
    if n > 255 {
        return Err(Error::Config("at most 255 classes fit in 8-bit labels".into()));
    }
    check_divisible(h, w).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = vec![0u8; h * w];
    let side = h.min(w) as f64;
    let (lo, hi) = (0.28 * side, 0.56 * side);
    let n_objects = rng.gen_range(2..=4);
    for _ in 0..n_objects {
        let class = rng.gen_range(1..n) as u8;
        let oh = rng.gen_range(lo..=hi);
        let ow = rng.gen_range(lo..=hi);
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ellipse = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / (oh / 2.0);
                let dx = (x as f64 + 0.5 - cx) / (ow / 2.0);
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    ids[y * w + x] = class;
                }
            }
        }
    }
    if ids.iter().all(|&c| c == ids[0]) {
        // an object covered everything or fell off-frame: punch a background hole
        let fill = if ids[0] == 0 { 1 } else { 0 };
        for y in h / 4..h / 2 {
            for x in w / 4..w / 2 {
                ids[y * w + x] = fill;
            }
        }
    }
    let night = rng.gen_bool(cfg.night_fraction);
    let rgb_noise = Normal::new(0.0f32, 0.06).expect("valid deviation");
    let th_noise = Normal::new(0.0f32, 0.05).expect("valid deviation");
    let mut rgb = vec![0f32; 3 * h * w];
    let mut thermal = vec![0f32; h * w];
    for p in 0..h * w {
        let c = ids[p] as usize;
        let base = class_color(c, n);
        for ch in 0..3 {
            let mut v = base[ch];
            if night {
                v *= NIGHT_DIMMING;
            }
            rgb[ch * h * w + p] = quantize(v + rgb_noise.sample(&mut rng));
        }
        thermal[p] = quantize(class_heat(c, n) + th_noise.sample(&mut rng));
    }
    Ok(SceneSample {
        height: h,
        width: w,
        rgb,
        thermal,
        labels: LabelMap::new(h, w, ids)?,
        night,
    })
}

/// `count` scenes with seeds `seed, seed + 1, ...`.
pub fn gen_synthetic_set(seed: u64, count: usize, cfg: &SynthConfig) -> Result<Vec<SceneSample>> {
    (0..count).map(|i| gen_synthetic_scene(seed.wrapping_add(i as u64), cfg)).collect()
}

/// Disjoint train and validation scenes: seeds `seed..seed + n_train`, then
/// the next `n_val` seeds.
pub fn synthetic_splits(seed: u64, n_train: usize, n_val: usize, cfg: &SynthConfig) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    Ok((
        gen_synthetic_set(seed, n_train, cfg)?,
        gen_synthetic_set(seed.wrapping_add(n_train as u64), n_val, cfg)?,
    ))
}

impl SceneSample {
    pub fn flip_horizontal(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let flip = |plane: &[f32]| -> Vec<f32> {
            let mut out = Vec::with_capacity(plane.len());
            for row in plane.chunks(w) {
                out.extend(row.iter().rev());
            }
            out
        };
        let mut rgb = Vec::with_capacity(3 * h * w);
        for ch in 0..3 {
            rgb.extend(flip(&self.rgb[ch * h * w..(ch + 1) * h * w]));
        }
        Self {
            rgb,
            thermal: flip(&self.thermal),
            labels: self.labels.flip_horizontal(),
            ..self.clone()
        }
    }

    /// Crops the window at `(top, left)` of size `ch x cw` and resizes it
    /// back to full size: bilinear for images, nearest for labels.
    pub fn crop_resize(&self, top: usize, left: usize, ch: usize, cw: usize) -> Self {
        let (h, w) = (self.height, self.width);
        let sy = ch as f64 / h as f64;
        let sx = cw as f64 / w as f64;
        let sample = |plane: &[f32], y: usize, x: usize| -> f32 {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(ch - 1), (x0 + 1).min(cw - 1));
            let (ty, tx) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
            let at = |yy: usize, xx: usize| plane[(top + yy) * w + left + xx];
            let a = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
            let b = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
            a * (1.0 - ty) + b * ty
        };
        let mut rgb = vec![0f32; 3 * h * w];
        let mut thermal = vec![0f32; h * w];
        let mut ids = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    rgb[c * h * w + y * w + x] = sample(&self.rgb[c * h * w..(c + 1) * h * w], y, x);
                }
                thermal[y * w + x] = sample(&self.thermal, y, x);
                let ly = ((y as f64 + 0.5) * sy) as usize;
                let lx = ((x as f64 + 0.5) * sx) as usize;
                ids[y * w + x] = self.labels.at(top + ly.min(ch - 1), left + lx.min(cw - 1));
            }
        }
        Self {
            rgb,
            thermal,
            labels: LabelMap {
                height: h,
                width: w,
                ids,
            },
            ..self.clone()
        }
    }

    /// Random 0.75-side crop resized back, then a horizontal flip with
    /// probability one half.
    pub fn augment<R: Rng>(&self, rng: &mut R) -> Self {
        self.augment_with(rng, true, true)
    }

    pub fn augment_with<R: Rng>(&self, rng: &mut R, crop: bool, flip: bool) -> Self {
        let mut out = self.clone();
        if crop {
            let ch = ((self.height as f64 * CROP_FRACTION).round() as usize).max(1);
            let cw = ((self.width as f64 * CROP_FRACTION).round() as usize).max(1);
            let top = rng.gen_range(0..=self.height - ch);
            let left = rng.gen_range(0..=self.width - cw);
            out = out.crop_resize(top, left, ch, cw);
        }
        if flip && rng.gen_bool(0.5) {
            out = out.flip_horizontal();
        }
        out
    }

    pub fn with_thermal_zeroed(&self) -> Self {
        Self {
            thermal: vec![0.0; self.thermal.len()],
            ..self.clone()
        }
    }
}

/// Stacked network inputs for a batch.
#[derive(Clone, Debug)]
pub struct Batch<S> {
    pub rgb: Tensor<S>,
    pub thermal: Tensor<S>,
    pub targets: Vec<SupervisionTargets>,
}

pub fn make_batch<S: Scalar>(samples: &[&SceneSample]) -> Result<Batch<S>> {
    let first = samples.first().ok_or_else(|| Error::contract("empty batch"))?;
    let (h, w) = (first.height, first.width);
    if samples.iter().any(|s| (s.height, s.width) != (h, w)) {
        return Err(Error::contract("batch samples differ in size"));
    }
    let b = samples.len();
    let mut rgb = Vec::with_capacity(b * 3 * h * w);
    let mut thermal = Vec::with_capacity(b * h * w);
    for s in samples {
        rgb.extend(s.rgb.iter().map(|&v| S::of(v as f64)));
        thermal.extend(s.thermal.iter().map(|&v| S::of(v as f64)));
    }
    Ok(Batch {
        rgb: Tensor::new(&[b, 3, h, w], rgb)?,
        thermal: Tensor::new(&[b, 1, h, w], thermal)?,
        targets: samples.iter().map(|s| SupervisionTargets::from_labels(&s.labels)).collect(),
    })
}

/// Directory dataset: `rgb/`, `thermal/`, `labels/` PNGs with matching
/// basenames, optional `train.txt`/`val.txt`/`test.txt` split lists and an
/// optional `night.txt`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub n_classes: usize,
    /// Lexicographic.
    pub names: Vec<String>,
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                out.push(s.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an RGB image and a thermal image of equal size as planar `[0, 1]`
/// values: `(height, width, rgb, thermal)`.
pub fn read_image_pair(rgb_path: &Path, thermal_path: &Path) -> Result<(usize, usize, Vec<f32>, Vec<f32>)> {
    read_image_pair_sized(rgb_path, thermal_path, None)
}

/// As `read_image_pair`, resizing both images bilinearly to `size`
/// `(height, width)` when given and different.
pub fn read_image_pair_sized(
    rgb_path: &Path,
    thermal_path: &Path,
    size: Option<(usize, usize)>,
) -> Result<(usize, usize, Vec<f32>, Vec<f32>)> {
    let mut rgb = open_image(rgb_path)?.to_rgb8();
    let mut th = open_image(thermal_path)?.to_luma8();
    if let Some((h, w)) = size {
        let (w, h) = (w as u32, h as u32);
        if rgb.dimensions() != (w, h) {
            rgb = imageops::resize(&rgb, w, h, FilterType::Triangle);
        }
        if th.dimensions() != (w, h) {
            th = imageops::resize(&th, w, h, FilterType::Triangle);
        }
    }
    if th.dimensions() != rgb.dimensions() {
        return Err(Error::Dataset(format!(
            "{} and {} differ in size",
            rgb_path.display(),
            thermal_path.display()
        )));
    }
    let (w, h) = rgb.dimensions();
    let (h, w) = (h as usize, w as usize);
    let mut planar = vec![0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    let thermal = th.pixels().map(|p| p[0] as f32 / 255.0).collect();
    Ok((h, w, planar, thermal))
}

pub fn load_dataset(root: &Path, n_classes: usize) -> Result<Dataset> {
    let names = png_stems(&root.join("rgb"))?;
    if names.is_empty() {
        return Err(Error::Dataset(format!("no samples under {}", root.display())));
    }
    for sub in ["thermal", "labels"] {
        let have = png_stems(&root.join(sub))?;
        if let Some(missing) = names.iter().find(|n| have.binary_search(n).is_err()) {
            return Err(Error::Dataset(format!("sample `{missing}` has no {sub} image")));
        }
    }
    for n in png_stems(&root.join("labels"))? {
        if names.binary_search(&n).is_err() {
            return Err(Error::Dataset(format!("sample `{n}` has labels but no rgb image")));
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        n_classes,
        names,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn read_list(&self, file: &str) -> Result<Option<Vec<String>>> {
        let p = self.root.join(file);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(p)?;
        Ok(Some(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect(),
        ))
    }

    /// Basenames listed in `<split>.txt`; `all` yields every sample.
    pub fn split(&self, split: &str) -> Result<Vec<String>> {
        if split == "all" {
            return Ok(self.names.clone());
        }
        let list = self
            .read_list(&format!("{split}.txt"))?
            .ok_or_else(|| Error::Dataset(format!("split file {split}.txt not found in {}", self.root.display())))?;
        for n in &list {
            if self.names.binary_search(n).is_err() {
                return Err(Error::Dataset(format!("split {split} lists unknown sample `{n}`")));
            }
        }
        Ok(list)
    }

    pub fn load(&self, name: &str) -> Result<SceneSample> {
        let night = self.read_list("night.txt")?.is_some_and(|l| l.iter().any(|n| n == name));
        let dir = |sub: &str| self.root.join(sub).join(format!("{name}.png"));
        let (h, w, planar, thermal) = read_image_pair(&dir("rgb"), &dir("thermal"))?;
        let lab = open_image(&dir("labels"))?.to_luma8();
        if lab.dimensions() != (w as u32, h as u32) {
            return Err(Error::Dataset(format!("sample `{name}`: image sizes differ")));
        }
        let ids: Vec<u8> = lab.pixels().map(|p| p[0]).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.n_classes) {
            return Err(Error::Dataset(format!(
                "sample `{name}`: label id {bad} >= {} classes",
                self.n_classes
            )));
        }
        Ok(SceneSample {
            height: h,
            width: w,
            rgb: planar,
            thermal,
            labels: LabelMap::new(h, w, ids)?,
            night,
        })
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<SceneSample>> {
        self.split(split)?.iter().map(|n| self.load(n)).collect()
    }
}

/// Display colours of class ids 0..16; ids past the end wrap around.
pub const PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [64, 0, 128],
    [64, 64, 0],
    [0, 128, 192],
    [0, 0, 192],
    [128, 128, 0],
    [64, 64, 128],
    [192, 128, 128],
    [192, 64, 0],
    [0, 192, 64],
    [192, 192, 192],
    [255, 255, 0],
    [0, 255, 255],
    [255, 0, 255],
    [128, 0, 0],
    [255, 255, 255],
];

pub fn palette_color(id: u8) -> [u8; 3] {
    PALETTE[id as usize % PALETTE.len()]
}

pub fn colorize(labels: &LabelMap) -> RgbImage {
    RgbImage::from_fn(labels.width as u32, labels.height as u32, |x, y| {
        image::Rgb(palette_color(labels.at(y as usize, x as usize)))
    })
}

pub fn label_image(labels: &LabelMap) -> GrayImage {
    GrayImage::from_fn(labels.width as u32, labels.height as u32, |x, y| {
        image::Luma([labels.at(y as usize, x as usize)])
    })
}

/// Resizes a label map with nearest-neighbour sampling.
pub fn resize_labels(labels: &LabelMap, height: usize, width: usize) -> Result<LabelMap> {
    if (labels.height, labels.width) == (height, width) {
        return Ok(labels.clone());
    }
    let img = imageops::resize(&label_image(labels), width as u32, height as u32, FilterType::Nearest);
    LabelMap::new(height, width, img.into_raw())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_sample(root: &Path, name: &str, s: &SceneSample) -> Result<()> {
    let (h, w) = (s.height, s.width);
    let save = |img: std::result::Result<(), image::ImageError>, path: PathBuf| {
        img.map_err(|source| Error::Image { path, source })
    };
    let mut rgb = RgbImage::new(w as u32, h as u32);
    for (i, px) in rgb.pixels_mut().enumerate() {
        *px = image::Rgb([0, 1, 2].map(|c| to_u8(s.rgb[c * h * w + i])));
    }
    let th = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(s.thermal[y as usize * w + x as usize])]));
    let lab = label_image(&s.labels);
    for sub in ["rgb", "thermal", "labels"] {
        fs::create_dir_all(root.join(sub))?;
    }
    let file = format!("{name}.png");
    save(rgb.save(root.join("rgb").join(&file)), root.join("rgb").join(&file))?;
    save(th.save(root.join("thermal").join(&file)), root.join("thermal").join(&file))?;
    save(lab.save(root.join("labels").join(&file)), root.join("labels").join(&file))?;
    Ok(())
}

/// Writes `count` synthetic scenes as a directory dataset: the first 80%
/// form `train.txt`, the rest `val.txt`, and night scenes are listed in
/// `night.txt`.
pub fn write_synthetic_dataset(root: &Path, count: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<String>> {
    if count == 0 {
        return Err(Error::Config("synthetic dataset needs at least one sample".into()));
    }
    fs::create_dir_all(root)?;
    let width = count.to_string().len().max(4);
    let mut names = Vec::with_capacity(count);
    let mut night = String::new();
    for i in 0..count {
        let name = format!("{:0width$}", i);
        let s = gen_synthetic_scene(seed.wrapping_add(i as u64), cfg)?;
        save_sample(root, &name, &s)?;
        if s.night {
            night.push_str(&name);
            night.push('\n');
        }
        names.push(name);
    }
    let n_train = ((count as f64) * 0.8).round() as usize;
    let n_train = n_train.clamp(1, count);
    let join = |xs: &[String]| xs.iter().map(|n| format!("{n}\n")).collect::<String>();
    fs::write(root.join("train.txt"), join(&names[..n_train]))?;
    fs::write(root.join("val.txt"), join(&names[n_train..]))?;
    fs::write(root.join("night.txt"), night)?;
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_background_renders_palette_zero() {
        let img = colorize(&LabelMap::filled(8, 12, 0));
        assert_eq!(img.dimensions(), (12, 8));
        assert!(img.pixels().all(|p| p.0 == PALETTE[0]));
    }

    #[test]
    fn palette_entries_are_distinct() {
        for (i, a) in PALETTE.iter().enumerate() {
            assert!(PALETTE[i + 1..].iter().all(|b| a != b));
        }
        assert_eq!(palette_color(17), PALETTE[1]);
    }

    #[test]
    fn label_resize_is_nearest() {
        let m = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let big = resize_labels(&m, 4, 4).unwrap();
        assert_eq!(big.at(0, 0), 0);
        assert_eq!(big.at(0, 3), 1);
        assert_eq!(big.at(3, 0), 2);
        assert_eq!(big.at(3, 3), 3);
        assert!(big.max_id() == 3 && big.distinct() == 4);
    }

    #[test]
    fn generator_is_deterministic_and_valid() {
        let cfg = SynthConfig::default();
        let a = gen_synthetic_scene(11, &cfg).unwrap();
        let b = gen_synthetic_scene(11, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.labels.distinct() >= 2);
        assert!(a.rgb.iter().chain(&a.thermal).all(|v| (0.0..=1.0).contains(v)));
        assert!(gen_synthetic_scene(1, &SynthConfig { n_classes: 2, ..cfg.clone() }).is_err());
        assert!(gen_synthetic_scene(1, &SynthConfig { height: 48, ..cfg }).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = gen_synthetic_scene(3, &SynthConfig::default()).unwrap();
        assert_eq!(s.flip_horizontal().flip_horizontal(), s);
        let f = s.flip_horizontal();
        assert_eq!(f.labels.at(5, 0), s.labels.at(5, 63));
        assert_eq!(f.thermal[5 * 64], s.thermal[5 * 64 + 63]);
    }

    #[test]
    fn full_window_crop_is_identity() {
        let s = gen_synthetic_scene(4, &SynthConfig::default()).unwrap();
        assert_eq!(s.crop_resize(0, 0, 64, 64), s);
    }

    #[test]
    fn disk_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::default();
        let names = write_synthetic_dataset(dir.path(), 5, 20, &cfg).unwrap();
        let ds = load_dataset(dir.path(), cfg.n_classes).unwrap();
        assert_eq!(ds.names, names);
        assert_eq!(ds.split("train").unwrap().len(), 4);
        for (i, n) in names.iter().enumerate() {
            assert_eq!(ds.load(n).unwrap(), gen_synthetic_scene(20 + i as u64, &cfg).unwrap());
        }
    }
}
