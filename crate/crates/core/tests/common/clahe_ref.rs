//! Straight-line CLAHE reference and global histogram equalization, written
//! without the library's tile helpers.

use discseg::image::RawImage;

/// Per pixel: rebuild the histograms of the four surrounding tiles, derive
/// each tile's clipped-CDF value for this pixel's level, and blend them.
/// Requires sides divisible by `tiles`.
pub fn clahe_brute_force(img: &RawImage, tiles: usize, clip_limit: f64) -> Vec<u8> {
    let (w, h) = (img.width(), img.height());
    assert!(w % tiles == 0 && h % tiles == 0);
    let (tw, th) = (w / tiles, h / tiles);
    let pixels = tw * th;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let level = img.at(x, y) as usize;

            let gy = (y as f64 + 0.5) / th as f64 - 0.5;
            let (ty0, ty1, wy) = if gy <= 0.0 {
                (0, 0, 0.0)
            } else if gy >= (tiles - 1) as f64 {
                (tiles - 1, tiles - 1, 0.0)
            } else {
                (
                    gy.floor() as usize,
                    gy.floor() as usize + 1,
                    gy - gy.floor(),
                )
            };
            let gx = (x as f64 + 0.5) / tw as f64 - 0.5;
            let (tx0, tx1, wx) = if gx <= 0.0 {
                (0, 0, 0.0)
            } else if gx >= (tiles - 1) as f64 {
                (tiles - 1, tiles - 1, 0.0)
            } else {
                (
                    gx.floor() as usize,
                    gx.floor() as usize + 1,
                    gx - gx.floor(),
                )
            };

            let mapped = |ty: usize, tx: usize| -> f64 {
                let mut hist = [0usize; 256];
                for yy in ty * th..(ty + 1) * th {
                    for xx in tx * tw..(tx + 1) * tw {
                        hist[img.at(xx, yy) as usize] += 1;
                    }
                }
                let limit = clip_limit * pixels as f64 / 256.0;
                let mut excess = 0.0;
                for &c in hist.iter() {
                    if c as f64 > limit {
                        excess += c as f64 - limit;
                    }
                }
                let share = excess / 256.0;
                let mut cdf = 0.0;
                for &c in hist.iter().take(level + 1) {
                    let clipped = if c as f64 > limit { limit } else { c as f64 };
                    cdf += clipped + share;
                }
                (cdf * 255.0 / pixels as f64 + 0.5)
                    .floor()
                    .clamp(0.0, 255.0)
            };

            let a = mapped(ty0, tx0);
            let b = mapped(ty0, tx1);
            let c = mapped(ty1, tx0);
            let d = mapped(ty1, tx1);
            let top = (1.0 - wx) * a + wx * b;
            let bottom = (1.0 - wx) * c + wx * d;
            let v = (1.0 - wy) * top + wy * bottom;
            out.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Plain global histogram equalization with integer counts.
pub fn global_equalize(img: &RawImage) -> Vec<u8> {
    let mut hist = [0u64; 256];
    for &v in img.data() {
        hist[v as usize] += 1;
    }
    let n = img.data().len() as f64;
    let mut lut = [0u8; 256];
    let mut cdf = 0u64;
    for (level, &c) in hist.iter().enumerate() {
        cdf += c;
        lut[level] = (cdf as f64 * 255.0 / n + 0.5).floor() as u8;
    }
    img.data().iter().map(|&v| lut[v as usize]).collect()
}
