//! Grayscale conversion, resizing, CLAHE, min-max normalization and gamma
//! correction, chained into the single preprocessing pipeline applied before
//! both training phases.

use crate::error::{format_err, param_err, Result};
use crate::image::RawImage;

/// Single-channel float image with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl PreprocessedImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width * height != data.len() || data.is_empty() {
            return Err(format_err!(
                "{width}x{height} image needs {} values, got {}",
                width * height,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(format_err!("preprocessed value {v} outside [0, 1]"));
        }
        Ok(PreprocessedImage {
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Little-endian `f64` dump of the pixel values, row-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Order of the contrast stages. CLAHE needs 8-bit input, so normalizing
/// first means stretching to the full 8-bit range before equalizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StageOrder {
    /// grayscale → resize → CLAHE → min-max → gamma
    #[default]
    ClaheFirst,
    /// grayscale → resize → min-max stretch (8-bit) → CLAHE → scale to [0,1] → gamma
    NormalizeFirst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    /// Output side length; images are resized to `size × size`.
    pub size: usize,
    /// CLAHE grid is `tiles × tiles`.
    pub tiles: usize,
    /// Histogram clip height as a multiple of the uniform bin height.
    pub clip_limit: f64,
    pub gamma: f64,
    pub order: StageOrder,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            size: 64,
            tiles: 8,
            clip_limit: 2.0,
            gamma: 1.2,
            order: StageOrder::ClaheFirst,
        }
    }
}

/// Luma `0.299 R + 0.587 G + 0.114 B`, rounded half up. Gray input passes through.
pub fn to_grayscale(img: &RawImage) -> Result<RawImage> {
    match img.channels() {
        1 => Ok(img.clone()),
        3 => {
            let data = img
                .data()
                .chunks_exact(3)
                .map(|p| {
                    let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                    (y + 0.5).floor().min(255.0) as u8
                })
                .collect();
            RawImage::gray(img.width(), img.height(), data)
        }
        c => Err(format_err!("expected 1 or 3 channels, got {c}")),
    }
}

/// Nearest-neighbour resize: output pixel `(x, y)` copies source pixel
/// `(x·W/w, y·H/h)` (integer division).
pub fn resize_nearest(img: &RawImage, width: usize, height: usize) -> Result<RawImage> {
    if width == 0 || height == 0 {
        return Err(param_err!(
            "resize target must be positive, got {width}x{height}"
        ));
    }
    let c = img.channels();
    let mut data = Vec::with_capacity(width * height * c);
    for y in 0..height {
        let sy = y * img.height() / height;
        for x in 0..width {
            let sx = x * img.width() / width;
            let at = (sy * img.width() + sx) * c;
            data.extend_from_slice(&img.data()[at..at + c]);
        }
    }
    RawImage::new(width, height, c, data)
}

/// `(v - min) / (max - min)`; a constant image maps to all zeros.
pub fn normalize_minmax(img: &RawImage) -> Result<PreprocessedImage> {
    if img.channels() != 1 {
        return Err(format_err!("normalize expects a gray image"));
    }
    let lo = *img.data().iter().min().expect("images are non-empty") as f64;
    let hi = *img.data().iter().max().expect("images are non-empty") as f64;
    let data = if hi > lo {
        img.data()
            .iter()
            .map(|&v| (v as f64 - lo) / (hi - lo))
            .collect()
    } else {
        vec![0.0; img.data().len()]
    };
    Ok(PreprocessedImage {
        width: img.width(),
        height: img.height(),
        data,
    })
}

/// `v ↦ v^gamma` for every pixel.
pub fn gamma_correct(img: &PreprocessedImage, gamma: f64) -> Result<PreprocessedImage> {
    if gamma.is_nan() || gamma <= 0.0 || gamma.is_infinite() {
        return Err(param_err!(
            "gamma must be a positive finite exponent, got {gamma}"
        ));
    }
    Ok(PreprocessedImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|v| v.powf(gamma)).collect(),
    })
}

/// Equalization lookup table of one tile from its 256-bin histogram.
///
/// Bins above `clip_limit · pixels / 256` are cut to that height and the
/// clipped mass is spread evenly over all 256 bins; the table maps each
/// level to `round(255 · cdf(level) / pixels)`.
pub fn tile_lut(hist: &[u32; 256], pixels: usize, clip_limit: f64) -> [u8; 256] {
    let limit = clip_limit * pixels as f64 / 256.0;
    let mut bins = [0.0f64; 256];
    let mut excess = 0.0;
    for (bin, &count) in bins.iter_mut().zip(hist) {
        let c = count as f64;
        if c > limit {
            excess += c - limit;
            *bin = limit;
        } else {
            *bin = c;
        }
    }
    let share = excess / 256.0;
    let mut lut = [0u8; 256];
    let mut cdf = 0.0;
    for (out, bin) in lut.iter_mut().zip(bins) {
        cdf += bin + share;
        *out = round_u8(cdf * 255.0 / pixels as f64);
    }
    lut
}

/// Lower tile index, upper tile index and weight of the upper one, for a
/// pixel coordinate along an axis with `tiles` tiles of `span` pixels.
/// Tile centres sit at `(i + 0.5)·span - 0.5`; beyond the outer centres the
/// nearest tile is used alone.
pub fn tile_neighbours(coord: usize, span: usize, tiles: usize) -> (usize, usize, f64) {
    let g = (coord as f64 + 0.5) / span as f64 - 0.5;
    if g <= 0.0 {
        (0, 0, 0.0)
    } else if g >= (tiles - 1) as f64 {
        (tiles - 1, tiles - 1, 0.0)
    } else {
        let lo = g.floor();
        (lo as usize, lo as usize + 1, g - lo)
    }
}

/// Bilinear blend of four tile mappings, rounded half up.
pub fn blend(
    top_left: u8,
    top_right: u8,
    bottom_left: u8,
    bottom_right: u8,
    wx: f64,
    wy: f64,
) -> u8 {
    let top = (1.0 - wx) * top_left as f64 + wx * top_right as f64;
    let bottom = (1.0 - wx) * bottom_left as f64 + wx * bottom_right as f64;
    round_u8((1.0 - wy) * top + wy * bottom)
}

fn round_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Contrast limited adaptive histogram equalization on a `tiles × tiles` grid.
///
/// Images whose sides are not multiples of `tiles` are padded by edge
/// replication for the tile statistics and cropped back afterwards.
pub fn clahe(img: &RawImage, tiles: usize, clip_limit: f64) -> Result<RawImage> {
    if img.channels() != 1 {
        return Err(format_err!("CLAHE expects a gray image"));
    }
    if tiles == 0 || tiles > img.width() || tiles > img.height() {
        return Err(param_err!(
            "CLAHE grid {tiles} does not fit a {}x{} image",
            img.width(),
            img.height()
        ));
    }
    if clip_limit.is_nan() || clip_limit < 1.0 {
        return Err(param_err!(
            "CLAHE clip limit must be at least 1, got {clip_limit}"
        ));
    }
    let (w, h) = (img.width(), img.height());
    let tw = w.div_ceil(tiles);
    let th = h.div_ceil(tiles);
    let px = |x: usize, y: usize| img.at(x.min(w - 1), y.min(h - 1));

    let mut luts = Vec::with_capacity(tiles * tiles);
    for ty in 0..tiles {
        for tx in 0..tiles {
            let mut hist = [0u32; 256];
            for y in ty * th..(ty + 1) * th {
                for x in tx * tw..(tx + 1) * tw {
                    hist[px(x, y) as usize] += 1;
                }
            }
            luts.push(tile_lut(&hist, tw * th, clip_limit));
        }
    }

    let cols: Vec<_> = (0..w).map(|x| tile_neighbours(x, tw, tiles)).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (r0, r1, wy) = tile_neighbours(y, th, tiles);
        for (x, &(c0, c1, wx)) in cols.iter().enumerate() {
            let v = img.at(x, y) as usize;
            out.push(blend(
                luts[r0 * tiles + c0][v],
                luts[r0 * tiles + c1][v],
                luts[r1 * tiles + c0][v],
                luts[r1 * tiles + c1][v],
                wx,
                wy,
            ));
        }
    }
    RawImage::gray(w, h, out)
}

/// The full chain, in the order `cfg.order` selects.
pub fn preprocess(img: &RawImage, cfg: &PreprocessConfig) -> Result<PreprocessedImage> {
    let gray = to_grayscale(img)?;
    let sized = resize_nearest(&gray, cfg.size, cfg.size)?;
    let unit = match cfg.order {
        StageOrder::ClaheFirst => {
            let eq = clahe(&sized, cfg.tiles, cfg.clip_limit)?;
            normalize_minmax(&eq)?
        }
        StageOrder::NormalizeFirst => {
            let stretched = normalize_minmax(&sized)?;
            let bytes = stretched.data.iter().map(|v| round_u8(v * 255.0)).collect();
            let eq = clahe(
                &RawImage::gray(cfg.size, cfg.size, bytes)?,
                cfg.tiles,
                cfg.clip_limit,
            )?;
            PreprocessedImage {
                width: cfg.size,
                height: cfg.size,
                data: eq.data().iter().map(|&v| v as f64 / 255.0).collect(),
            }
        }
    };
    gamma_correct(&unit, cfg.gamma)
}
