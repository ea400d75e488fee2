//! Raw numeric kernels over flat row-major buffers.

use super::strides;

/// `c (+)= op(a) · op(b)` for row-major `op(a): [m, k]`, `op(b): [k, n]`.
///
/// `trans_a` means `a` is stored as `[k, m]`; likewise `trans_b` for `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n prefixes
    // whose lengths were asserted on entry.
    unsafe {
        matrixmultiply::sgemm(
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

/// Reorder `data` of `shape` so that output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(data: &[f32], shape: &[usize], axes: &[usize]) -> Vec<f32> {
    let ndim = shape.len();
    if ndim == 0 {
        return data.to_vec();
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // stride in the input buffer for a unit step along each output axis
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let last = ndim - 1;
    let inner_len = out_shape[last];
    let inner_step = step[last];
    let mut index = vec![0usize; ndim];
    let mut base = 0usize;
    loop {
        if inner_step == 1 {
            out.extend_from_slice(&data[base..base + inner_len]);
        } else {
            let mut off = base;
            for _ in 0..inner_len {
                out.push(data[off]);
                off += inner_step;
            }
        }
        // advance the multi-index over all but the innermost axis
        let mut axis = last;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            index[axis] += 1;
            base += step[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            base -= step[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Cyclic shift of an `[n, h, w, c]` buffer: `out[y][x] = in[y - sh][x - sw]`.
pub(crate) fn roll_nhwc(data: &[f32], shape: &[usize], shift_h: isize, shift_w: isize) -> Vec<f32> {
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let sh = shift_h.rem_euclid(h.max(1) as isize) as usize;
    let sw = shift_w.rem_euclid(w.max(1) as isize) as usize;
    let mut out = vec![0.0; data.len()];
    for b in 0..n {
        for y in 0..h {
            let src_y = (y + h - sh) % h;
            for x in 0..w {
                let src_x = (x + w - sw) % w;
                let dst = ((b * h + y) * w + x) * c;
                let src = ((b * h + src_y) * w + src_x) * c;
                out[dst..dst + c].copy_from_slice(&data[src..src + c]);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one `[c_in, h, w]` image into `[c_in*kh*kw, out_h*out_w]`.
pub(crate) fn im2col(image: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let p = g.cols();
    for c in 0..g.c_in {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[c_in, h, w]` image.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeometry, image: &mut [f32]) {
    let p = g.cols();
    for c in 0..g.c_in {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Split `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_for_all_transpose_flags() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32).sin()).collect();
        let mut expected = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expected[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let at = permute(&a, &[m, k], &[1, 0]);
        let bt = permute(&b, &[k, n], &[1, 0]);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&expected) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn permute_3d() {
        let data: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let out = permute(&data, &[2, 3, 4], &[2, 0, 1]);
        // out[k][i][j] = in[i][j][k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(out[(k * 2 + i) * 3 + j], data[(i * 3 + j) * 4 + k]);
                }
            }
        }
        let back = permute(&out, &[4, 2, 3], &inverse_permutation(&[2, 0, 1]));
        assert_eq!(back, data);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            c_in: 2,
            h: 5,
            w: 6,
            kh: 3,
            kw: 2,
            stride: 2,
            pad: 1,
            out_h: 3,
            out_w: 4,
        };
        let x: Vec<f32> = (0..60).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
        let y: Vec<f32> = (0..g.rows() * g.cols()).map(|i| ((i * 3) % 5) as f32).collect();
        let mut cols = vec![0.0; g.rows() * g.cols()];
        im2col(&x, &g, &mut cols);
        let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 60];
        col2im(&y, &g, &mut back);
        let rhs: f32 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3);
    }
}
