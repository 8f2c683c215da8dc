//! Dense row-major kernels. Every reduction accumulates in f64 and rounds
//! once on store, so results do not depend on blocking or loop order.

/// Column-block width that keeps a block of f64 accumulators around 256 KiB.
fn block_width(rows: usize, n: usize) -> usize {
    (32 * 1024 / rows.max(1)).clamp(16, 1024).min(n.max(1))
}

/// `out[m×n] (+)= a[m×k] · b[k×n]`
pub fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let nb = 512.min(n.max(1));
    let mut row = vec![0f64; nb];
    for j0 in (0..n).step_by(nb) {
        let w = nb.min(n - j0);
        for i in 0..m {
            let row = &mut row[..w];
            row.iter_mut().for_each(|r| *r = 0.0);
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &aip) in a_row.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let aip = aip as f64;
                let b_row = &b[p * n + j0..p * n + j0 + w];
                for (r, &bv) in row.iter_mut().zip(b_row) {
                    *r += aip * bv as f64;
                }
            }
            store(&mut out[i * n + j0..i * n + j0 + w], row, acc);
        }
    }
}

/// `out[m×n] (+)= a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let mut sums = vec![0f64; m * n];
    let kb = 256.min(k.max(1));
    for p0 in (0..k).step_by(kb) {
        let p1 = (p0 + kb).min(k);
        for i in 0..m {
            let a_blk = &a[i * k + p0..i * k + p1];
            for j in 0..n {
                sums[i * n + j] += dot(a_blk, &b[j * k + p0..j * k + p1]);
            }
        }
    }
    store(out, &sums, acc);
}

/// `out[k×n] (+)= a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let nb = block_width(k, n);
    let mut buf = vec![0f64; k * nb];
    for j0 in (0..n).step_by(nb) {
        let w = nb.min(n - j0);
        buf.iter_mut().for_each(|r| *r = 0.0);
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let b_row = &b[i * n + j0..i * n + j0 + w];
            for (p, &ap) in a_row.iter().enumerate() {
                if ap == 0.0 {
                    continue;
                }
                let ap = ap as f64;
                for (r, &bv) in buf[p * w..(p + 1) * w].iter_mut().zip(b_row) {
                    *r += ap * bv as f64;
                }
            }
        }
        for p in 0..k {
            store(&mut out[p * n + j0..p * n + j0 + w], &buf[p * w..(p + 1) * w], acc);
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    // independent lanes so the f64 sum vectorizes
    let mut lanes = [0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut tail = 0f64;
    for (x, y) in ta.iter().zip(tb) {
        tail += *x as f64 * *y as f64;
    }
    lanes.iter().sum::<f64>() + tail
}

fn store(out: &mut [f32], vals: &[f64], acc: bool) {
    if acc {
        for (o, &v) in out.iter_mut().zip(vals) {
            *o = (*o as f64 + v) as f32;
        }
    } else {
        for (o, &v) in out.iter_mut().zip(vals) {
            *o = v as f32;
        }
    }
}

/// Geometry of a 2-D convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Output columns `ox` whose input column `ox·stride + k − padding` lies inside `[0, len)`.
fn valid_range(len: usize, out: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k).div_ceil(stride).min(out);
    let hi = if len + padding > k {
        ((len + padding - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfold one `C×H×W` image into a `(C·kh·kw) × (H'·W')` patch matrix.
///
/// Patch row `r` is written to `cols[r * row_stride + offset ..][..H'·W']`, which
/// lets a batch share one wide matrix with each image in its own column block.
pub fn im2col(img: &[f32], g: &ConvGeom, cols: &mut [f32], row_stride: usize, offset: usize) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.channels {
        let src = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let start = row * row_stride + offset;
                let dst = &mut cols[start..start + plane];
                let (lo, hi) = valid_range(g.width, ow, kj, g.stride, g.padding);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo < hi {
                        let ix0 = lo * g.stride + kj - g.padding;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src_row[ix0..ix0 + hi - lo]);
                        } else {
                            for (n, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src_row[ix0 + n * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto a `C×H×W` image.
pub fn col2im(cols: &[f32], g: &ConvGeom, img: &mut [f32], row_stride: usize, offset: usize) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.channels {
        let dst = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let start = row * row_stride + offset;
                let src = &cols[start..start + plane];
                let (lo, hi) = valid_range(g.width, ow, kj, g.stride, g.padding);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * g.stride + kj - g.padding;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * ow + lo..oy * ow + hi];
                    for (n, &v) in line.iter().enumerate() {
                        dst_row[ix0 + n * g.stride] += v;
                    }
                }
            }
        }
    }
}
