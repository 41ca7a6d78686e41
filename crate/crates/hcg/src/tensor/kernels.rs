//! Dense kernels shared by forward and backward passes. All matmul variants
//! accumulate into `out`, which callers zero-initialize for forward use and
//! pass as the running gradient buffer in backward.

use super::{ConvSpec, Real};

#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    let mut s = R::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul_nn<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub fn matmul_nt<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
pub fn matmul_tn<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Expand an [h*w, c] activation map into conv patch rows; zero padding.
pub fn im2col<R: Real>(a: &[R], spec: &ConvSpec, out: &mut [R]) {
    let (oh, ow) = (spec.out_h(), spec.out_w());
    let cols = spec.k * spec.k * spec.c;
    let mut row = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            let base = row * cols;
            let mut col = 0;
            for ky in 0..spec.k {
                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                for kx in 0..spec.k {
                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    if iy >= 0 && (iy as usize) < spec.h && ix >= 0 && (ix as usize) < spec.w {
                        let src = (iy as usize * spec.w + ix as usize) * spec.c;
                        out[base + col..base + col + spec.c]
                            .copy_from_slice(&a[src..src + spec.c]);
                    }
                    col += spec.c;
                }
            }
            row += 1;
        }
    }
}

/// Scatter-add of im2col's gradient back onto the input map.
pub fn col2im<R: Real>(g: &[R], spec: &ConvSpec, out: &mut [R]) {
    let (oh, ow) = (spec.out_h(), spec.out_w());
    let cols = spec.k * spec.k * spec.c;
    let mut row = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            let base = row * cols;
            let mut col = 0;
            for ky in 0..spec.k {
                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                for kx in 0..spec.k {
                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    if iy >= 0 && (iy as usize) < spec.h && ix >= 0 && (ix as usize) < spec.w {
                        let dst = (iy as usize * spec.w + ix as usize) * spec.c;
                        for ch in 0..spec.c {
                            out[dst + ch] += g[base + col + ch];
                        }
                    }
                    col += spec.c;
                }
            }
            row += 1;
        }
    }
}
