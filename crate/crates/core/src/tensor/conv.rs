//! im2col convolution kernels on top of a row-major GEMM.

use std::cell::RefCell;

/// `c = op(a) * op(b) + beta * c` with `op(a)` of size m×k and `op(b)` k×n,
/// all row-major. A transposed operand is stored in its untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the assert above bounds every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1, zero-padded convolution over one image.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// A 1×1 kernel without padding needs no unfolding: the image is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

pub(crate) fn im2col(img: &[f64], g: ConvGeom, col: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_range(kx, g.pad, g.w, ow);
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy + ky).wrapping_sub(g.pad);
                    if iy >= g.h || lo >= hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[lo..hi].copy_from_slice(&src[lo + kx - g.pad..hi + kx - g.pad]);
                    line[hi..].fill(0.0);
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ox + kx - pad` lies inside the image.
fn valid_range(kx: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(ow);
    let hi = (w + pad).saturating_sub(kx).min(ow);
    (lo, hi.max(lo))
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im_add(col: &[f64], g: ConvGeom, img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_range(kx, g.pad, g.w, ow);
                for oy in 0..oh {
                    let iy = (oy + ky).wrapping_sub(g.pad);
                    if iy >= g.h || lo >= hi {
                        continue;
                    }
                    let dst = &mut plane[iy * g.w + lo + kx - g.pad..iy * g.w + hi + kx - g.pad];
                    for (d, s) in dst.iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

thread_local! {
    /// Reused column buffers; im2col and a `beta = 0` GEMM overwrite every
    /// entry, so stale contents never leak into results.
    static SCRATCH: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

fn with_scratch<T>(len: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> T) -> T {
    SCRATCH.with(|s| {
        let (a, b) = &mut *s.borrow_mut();
        if a.len() < len {
            a.resize(len, 0.0);
            b.resize(len, 0.0);
        }
        f(&mut a[..len], &mut b[..len])
    })
}

/// Cross-correlation of a `[B, Cin, H, W]` batch with `[Cout, Cin, k, k]` weights.
pub(crate) fn conv_forward(
    x: &[f64],
    batch: usize,
    g: ConvGeom,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
) -> Vec<f64> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![0.0; batch * cout * cols];
    let scratch = if g.is_pointwise() { 0 } else { rows * cols };
    with_scratch(scratch, |col, _| {
        for b in 0..batch {
            let img = &x[b * in_len..(b + 1) * in_len];
            let dst = &mut out[b * cout * cols..(b + 1) * cout * cols];
            for (co, chunk) in dst.chunks_mut(cols).enumerate() {
                chunk.fill(bias[co]);
            }
            let col_ref: &[f64] = if g.is_pointwise() {
                img
            } else {
                im2col(img, g, col);
                col
            };
            gemm(cout, rows, cols, weight, false, col_ref, false, dst, 1.0);
        }
    });
    out
}

/// Gradients of [`conv_forward`]; each output buffer is accumulated into when present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    batch: usize,
    g: ConvGeom,
    weight: &[f64],
    cout: usize,
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_len = g.cin * g.h * g.w;
    let scratch = if g.is_pointwise() { 0 } else { rows * cols };
    with_scratch(scratch, |col, dcol| {
        for b in 0..batch {
            let dy_b = &dy[b * cout * cols..(b + 1) * cout * cols];
            if let Some(db) = db.as_deref_mut() {
                for (co, chunk) in dy_b.chunks(cols).enumerate() {
                    db[co] += chunk.iter().sum::<f64>();
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                let img = &x[b * in_len..(b + 1) * in_len];
                let col_ref: &[f64] = if g.is_pointwise() {
                    img
                } else {
                    im2col(img, g, col);
                    col
                };
                gemm(cout, cols, rows, dy_b, false, col_ref, true, dw, 1.0);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dimg = &mut dx[b * in_len..(b + 1) * in_len];
                if g.is_pointwise() {
                    gemm(rows, cout, cols, weight, true, dy_b, false, dimg, 1.0);
                } else {
                    gemm(rows, cout, cols, weight, true, dy_b, false, dcol, 0.0);
                    col2im_add(dcol, g, dimg);
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_layouts() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive_gemm(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, a_t) in [(&a, false), (&at, true)] {
            for (bb, b_t) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, a_t, bb, b_t, &mut c, 0.0);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            cin: 2,
            h: 4,
            w: 3,
            k: 3,
            pad: 1,
        };
        let img: Vec<f64> = (0..2 * 4 * 3).map(|i| i as f64 - 5.0).collect();
        let colv: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| ((i * 7) % 11) as f64)
            .collect();
        let mut col = vec![0.0; colv.len()];
        im2col(&img, g, &mut col);
        let lhs: f64 = col.iter().zip(&colv).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        col2im_add(&colv, g, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
