//! Synthetic fundus-like samples, the on-disk dataset layout, k-fold
//! plans and nested fraction subsampling.
//!
//! A dataset directory holds
//!
//! ```text
//! images/NNNN.pgm     8-bit gray image
//! masks/NNNN.pgm      0/255 optic-disc mask (segmentation sets only)
//! centroids.csv       header `id,x,y`, disc centre in pixel coordinates
//! manifest.txt        `key = value` record of the generating spec
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{format_err, param_err, Error, Result};
use crate::image::RawImage;
use crate::preprocess::{preprocess, resize_nearest, PreprocessConfig};
use crate::train::{LocalizationData, SegmentationData};

/// Disc centre in pixel coordinates of the image it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentroidLabel {
    pub x: f64,
    pub y: f64,
}

/// Binary mask with at least one foreground pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskLabel {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl MaskLabel {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(format_err!(
                "{width}x{height} mask needs {} values, got {}",
                width * height,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("mask value {v} is not 0 or 1")));
        }
        if !data.contains(&1) {
            return Err(Error::Validation("mask has no foreground pixel".into()));
        }
        Ok(MaskLabel {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Mean (x, y) of the foreground pixels.
    pub fn center_of_mass(&self) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (i, _) in self.data.iter().enumerate().filter(|(_, &v)| v == 1) {
            sx += (i % self.width) as f64;
            sy += (i / self.width) as f64;
            n += 1.0;
        }
        (sx / n, sy / n)
    }

    /// Inclusive `(x0, y0, x1, y1)` of the foreground.
    pub fn bounding_box(&self) -> (usize, usize, usize, usize) {
        let mut b = (usize::MAX, usize::MAX, 0, 0);
        for (i, _) in self.data.iter().enumerate().filter(|(_, &v)| v == 1) {
            let (x, y) = (i % self.width, i / self.width);
            b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
        }
        b
    }

    fn to_image(&self) -> RawImage {
        let px = self.data.iter().map(|&v| v * 255).collect();
        RawImage::gray(self.width, self.height, px).expect("mask dimensions are positive")
    }
}

/// Knobs of the synthetic generator. Intensities are fractions of full scale,
/// radii fractions of the image side.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub size: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub disc_min: f64,
    pub disc_max: f64,
    pub background_min: f64,
    pub background_max: f64,
    pub texture: f64,
    pub vessels: usize,
    pub vessel_width: f64,
    /// Bright blobs that look like the disc but are smaller and fuzzier.
    pub distractors: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            size: 64,
            radius_min: 0.08,
            radius_max: 0.14,
            disc_min: 0.7,
            disc_max: 0.9,
            background_min: 0.25,
            background_max: 0.45,
            texture: 0.12,
            vessels: 6,
            vessel_width: 1.0,
            distractors: 2,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(param_err!("{name} must lie in [0, 1], got {v}"))
            }
        };
        if self.size < 8 {
            return Err(param_err!("size must be at least 8, got {}", self.size));
        }
        if !(self.radius_min > 0.0 && self.radius_min < 0.5) {
            return Err(param_err!(
                "radius_min must lie in (0, 0.5), got {}",
                self.radius_min
            ));
        }
        if !(self.radius_max > 0.0 && self.radius_max < 0.5) {
            return Err(param_err!(
                "radius_max must lie in (0, 0.5), got {}",
                self.radius_max
            ));
        }
        if self.radius_min > self.radius_max {
            return Err(param_err!("radius_min exceeds radius_max"));
        }
        if self.radius_min * (self.size as f64) < 1.0 {
            return Err(param_err!(
                "radius_min is below one pixel at size {}",
                self.size
            ));
        }
        for (name, v) in [
            ("disc_min", self.disc_min),
            ("disc_max", self.disc_max),
            ("background_min", self.background_min),
            ("background_max", self.background_max),
            ("texture", self.texture),
        ] {
            unit(name, v)?;
        }
        if self.disc_min > self.disc_max {
            return Err(param_err!("disc_min exceeds disc_max"));
        }
        if self.background_min > self.background_max {
            return Err(param_err!("background_min exceeds background_max"));
        }
        if !(self.vessel_width > 0.0 && self.vessel_width.is_finite()) {
            return Err(param_err!("vessel_width must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(param_err!("noise_sigma must be non-negative"));
        }
        Ok(())
    }

    /// `key = value` lines describing the spec.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "size = {}", self.size);
        let _ = writeln!(s, "radius_min = {}", self.radius_min);
        let _ = writeln!(s, "radius_max = {}", self.radius_max);
        let _ = writeln!(s, "disc_min = {}", self.disc_min);
        let _ = writeln!(s, "disc_max = {}", self.disc_max);
        let _ = writeln!(s, "background_min = {}", self.background_min);
        let _ = writeln!(s, "background_max = {}", self.background_max);
        let _ = writeln!(s, "texture = {}", self.texture);
        let _ = writeln!(s, "vessels = {}", self.vessels);
        let _ = writeln!(s, "vessel_width = {}", self.vessel_width);
        let _ = writeln!(s, "distractors = {}", self.distractors);
        let _ = writeln!(s, "noise_sigma = {}", self.noise_sigma);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RawImage,
    pub centroid: CentroidLabel,
    pub mask: MaskLabel,
}

/// Distance from `p` to the segment `a`–`b`.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// One image: textured background, bright axis-aligned elliptic disc,
/// dark curved vessels radiating from it, fuzzy bright distractors and
/// Gaussian noise. The mask is the exact ellipse interior, sampled at pixel
/// centres, and the centroid is the ellipse centre.
pub fn generate_sample<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Sample> {
    spec.validate()?;
    let s = spec.size;
    let sf = s as f64;
    let rx = rng.random_range(spec.radius_min..=spec.radius_max) * sf;
    let ry = rng.random_range(spec.radius_min..=spec.radius_max) * sf;
    let cx = rng.random_range(rx..=sf - 1.0 - rx);
    let cy = rng.random_range(ry..=sf - 1.0 - ry);
    let disc = rng.random_range(spec.disc_min..=spec.disc_max);
    let bg = rng.random_range(spec.background_min..=spec.background_max);

    // Low-frequency texture from a few random plane waves.
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(1.0..4.0) * std::f64::consts::TAU / sf;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (angle.cos() * freq, angle.sin() * freq, phase)
        })
        .collect();
    // Bright fuzzy blobs away from the disc.
    let mut blobs = Vec::with_capacity(spec.distractors);
    for _ in 0..spec.distractors {
        let sigma = rng.random_range(0.35..0.7) * spec.radius_min * sf;
        let mut pos = (0.0, 0.0);
        for _ in 0..32 {
            pos = (rng.random_range(0.0..sf), rng.random_range(0.0..sf));
            if ((pos.0 - cx) / rx).powi(2) + ((pos.1 - cy) / ry).powi(2) > 4.0 {
                break;
            }
        }
        let peak = rng.random_range(spec.disc_min..=spec.disc_max) - bg;
        blobs.push((pos, sigma, peak));
    }
    // Vessels: polylines leaving the disc with a gentle bend.
    let mut vessels = Vec::with_capacity(spec.vessels);
    for _ in 0..spec.vessels {
        let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
        let bend = rng.random_range(-0.08..0.08);
        let mut p = (cx, cy);
        let mut line = vec![p];
        for _ in 0..(s / 3) {
            p = (p.0 + 2.0 * angle.cos(), p.1 + 2.0 * angle.sin());
            angle += bend;
            line.push(p);
        }
        let depth = rng.random_range(0.1..0.25);
        vessels.push((line, depth));
    }

    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma is finite and non-negative");
    let mut pixels = Vec::with_capacity(s * s);
    let mut mask = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let (xf, yf) = (x as f64, y as f64);
            let wave: f64 = waves
                .iter()
                .map(|&(kx, ky, ph)| (kx * xf + ky * yf + ph).sin())
                .sum();
            let mut v = bg + spec.texture * wave / 4.0;
            let r2 = ((xf - cx) / rx).powi(2) + ((yf - cy) / ry).powi(2);
            let inside = r2 <= 1.0;
            if inside {
                v = disc;
            } else {
                // thin soft rim so the edge is not a pure step
                v += (disc - v) * (-(r2.sqrt() - 1.0) * 6.0).exp() * 0.5;
            }
            for &((bx, by), sigma, peak) in &blobs {
                let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
                v += peak * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            for (line, depth) in &vessels {
                let d = line
                    .windows(2)
                    .map(|w| segment_distance((xf, yf), w[0], w[1]))
                    .fold(f64::INFINITY, f64::min);
                if d < spec.vessel_width * 1.5 {
                    v -= depth * (1.0 - d / (spec.vessel_width * 1.5));
                }
            }
            v += noise.sample(rng);
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            mask.push(inside as u8);
        }
    }
    Ok(Sample {
        image: RawImage::gray(s, s, pixels)?,
        centroid: CentroidLabel { x: cx, y: cy },
        mask: MaskLabel::new(s, s, mask)?,
    })
}

/// splitmix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed from a base seed and a tuple of tags.
pub fn mix_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

/// `count` samples; sample `i` uses its own stream so samples can be
/// generated independently.
pub fn generate_samples(spec: &SyntheticSpec, stream: u64, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &[stream, i as u64]));
            generate_sample(spec, &mut rng)
        })
        .collect()
}

/// Images with centroid labels and, for segmentation sets, masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<RawImage>,
    pub centroids: Vec<CentroidLabel>,
    pub masks: Option<Vec<MaskLabel>>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>, with_masks: bool) -> Self {
        let mut d = Dataset {
            images: Vec::with_capacity(samples.len()),
            centroids: Vec::with_capacity(samples.len()),
            masks: with_masks.then(Vec::new),
        };
        for s in samples {
            d.images.push(s.image);
            d.centroids.push(s.centroid);
            if let Some(m) = &mut d.masks {
                m.push(s.mask);
            }
        }
        d
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn id_name(i: usize) -> String {
    format!("{i:04}")
}

/// Writes the dataset layout into `dir` (created if missing); `manifest`
/// goes to `manifest.txt` verbatim.
pub fn write_dataset(data: &Dataset, dir: &Path, manifest: &str) -> Result<()> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::file(p, e));
    mkdir(&dir.join("images"))?;
    let mut csv = String::from("id,x,y\n");
    for (i, (img, c)) in data.images.iter().zip(&data.centroids).enumerate() {
        img.write(&dir.join("images").join(format!("{}.pgm", id_name(i))))?;
        let _ = writeln!(csv, "{},{},{}", id_name(i), c.x, c.y);
    }
    if let Some(masks) = &data.masks {
        mkdir(&dir.join("masks"))?;
        for (i, m) in masks.iter().enumerate() {
            m.to_image()
                .write(&dir.join("masks").join(format!("{}.pgm", id_name(i))))?;
        }
    }
    let path = dir.join("centroids.csv");
    fs::write(&path, csv).map_err(|e| Error::file(&path, e))?;
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::file(&path, e))
}

fn parse_centroids(text: &str) -> Result<Vec<(String, CentroidLabel)>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("id,x,y") {
        return Err(format_err!(
            "centroids.csv must start with the header `id,x,y`"
        ));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let [id, x, y] = f[..] else {
                return Err(format_err!(
                    "centroids.csv row {l:?} does not have 3 fields"
                ));
            };
            let num = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format_err!("bad coordinate {s:?} in centroids.csv"))
            };
            Ok((
                id.to_string(),
                CentroidLabel {
                    x: num(x)?,
                    y: num(y)?,
                },
            ))
        })
        .collect()
}

/// Parses one `id,x,y` row.
pub fn parse_centroid_row(row: &str) -> Result<(String, CentroidLabel)> {
    parse_centroids(&format!("id,x,y\n{row}"))?
        .pop()
        .ok_or_else(|| format_err!("empty centroid row"))
}

/// Loads and validates a dataset directory. Masks are read when `masks/` exists.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let csv_path = dir.join("centroids.csv");
    if !dir.is_dir() {
        return Err(Error::file(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let text = fs::read_to_string(&csv_path).map_err(|e| Error::file(&csv_path, e))?;
    let rows = parse_centroids(&text)?;
    let mask_dir = dir.join("masks");
    let with_masks = mask_dir.is_dir();
    let mut data = Dataset {
        images: Vec::with_capacity(rows.len()),
        centroids: Vec::with_capacity(rows.len()),
        masks: with_masks.then(Vec::new),
    };
    for (id, c) in rows {
        let img_path = dir.join("images").join(format!("{id}.pgm"));
        if !img_path.is_file() {
            return Err(format_err!(
                "image {} listed in centroids.csv is missing",
                img_path.display()
            ));
        }
        let img = RawImage::read(&img_path)?;
        let (w, h) = (img.width() as f64, img.height() as f64);
        if !(0.0..w).contains(&c.x) || !(0.0..h).contains(&c.y) {
            return Err(Error::Validation(format!(
                "centroid ({}, {}) of {id} lies outside the {w}x{h} image",
                c.x, c.y
            )));
        }
        if let Some(masks) = &mut data.masks {
            let path = mask_dir.join(format!("{id}.pgm"));
            if !path.is_file() {
                return Err(format_err!("mask {} is missing", path.display()));
            }
            let m = RawImage::read(&path)?;
            if m.channels() != 1 || m.width() != img.width() || m.height() != img.height() {
                return Err(format_err!(
                    "mask {} is {}x{}x{}, image is {}x{}x1",
                    path.display(),
                    m.width(),
                    m.height(),
                    m.channels(),
                    img.width(),
                    img.height()
                ));
            }
            if let Some(v) = m.data().iter().find(|&&v| v != 0 && v != 255) {
                return Err(Error::Validation(format!(
                    "mask {} holds value {v}; only 0 and 255 are allowed",
                    path.display()
                )));
            }
            let bits = m.data().iter().map(|&v| (v == 255) as u8).collect();
            let mask = MaskLabel::new(m.width(), m.height(), bits)
                .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
            masks.push(mask);
        }
        data.images.push(img);
        data.centroids.push(c);
    }
    if data.is_empty() {
        return Err(format_err!("dataset {} is empty", dir.display()));
    }
    Ok(data)
}

/// Preprocesses every image; centroids are rescaled to the output frame.
pub fn localization_data(data: &Dataset, cfg: &PreprocessConfig) -> Result<LocalizationData> {
    let mut out = LocalizationData {
        size: cfg.size,
        images: Vec::with_capacity(data.len()),
        centroids: Vec::with_capacity(data.len()),
    };
    for (img, c) in data.images.iter().zip(&data.centroids) {
        out.images.push(preprocess(img, cfg)?.data().to_vec());
        out.centroids.push([
            c.x * cfg.size as f64 / img.width() as f64,
            c.y * cfg.size as f64 / img.height() as f64,
        ]);
    }
    Ok(out)
}

/// Preprocesses every image and resizes masks with the same nearest-neighbour map.
pub fn segmentation_data(data: &Dataset, cfg: &PreprocessConfig) -> Result<SegmentationData> {
    let masks = data
        .masks
        .as_ref()
        .ok_or_else(|| format_err!("dataset has no masks"))?;
    let mut out = SegmentationData {
        size: cfg.size,
        images: Vec::with_capacity(data.len()),
        masks: Vec::with_capacity(data.len()),
    };
    for (img, m) in data.images.iter().zip(masks) {
        out.images.push(preprocess(img, cfg)?.data().to_vec());
        let resized = resize_nearest(&m.to_image(), cfg.size, cfg.size)?;
        out.masks
            .push(resized.data().iter().map(|&v| (v / 255) as f64).collect());
    }
    Ok(out)
}

/// Assignment of samples to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold id of every sample.
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    /// Members of fold `f` in ascending order (the validation set of run `f`).
    pub fn fold(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == f)
            .collect()
    }

    /// Everything outside fold `f`, ascending.
    pub fn train(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != f)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.k).map(|f| self.fold(f).len()).collect()
    }
}

/// Shuffled round-robin: fold sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || n < k {
        return Err(param_err!("cannot split {n} samples into {k} folds"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (j, &i) in order.iter().enumerate() {
        assignment[i] = j % k;
    }
    Ok(FoldPlan { k, assignment })
}

/// The first ⌈fraction·n/100⌉ ids of one seeded shuffle, returned in their
/// original order. Larger fractions therefore contain smaller ones.
pub fn subsample_fraction(ids: &[usize], fraction: u32, seed: u64) -> Result<Vec<usize>> {
    if !(10..=100).contains(&fraction) || !fraction.is_multiple_of(10) {
        return Err(param_err!(
            "fraction must be one of 10, 20, …, 100, got {fraction}"
        ));
    }
    let take = (fraction as usize * ids.len()).div_ceil(100);
    let mut pos: Vec<usize> = (0..ids.len()).collect();
    pos.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = pos[..take].to_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|p| ids[p]).collect())
}

/// Seeded 80/10/10 split into (train, validation, test), each ascending.
pub fn split_train_val_test(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if n < 3 {
        return Err(param_err!(
            "need at least 3 samples for a train/val/test split, got {n}"
        ));
    }
    let held = ((n as f64 * 0.1).round() as usize).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = order[..held].to_vec();
    let mut test = order[held..2 * held].to_vec();
    let mut train = order[2 * held..].to_vec();
    val.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, val, test))
}
