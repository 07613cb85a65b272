//! Raw kernels shared by the tape ops: GEMM wrappers and im2col convolution.

use rayon::prelude::*;

use super::Real;

/// Below this many multiply-adds a single GEMM call beats splitting rows.
const PAR_MATMUL_WORK: usize = 1 << 18;

/// `c[m×n] = a[m×k] · b[k×n]` on row-major slices. Rows of `c` are computed
/// independently, so splitting them across threads never changes results.
pub fn matmul_into<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let threads = rayon::current_num_threads();
    if threads > 1 && m * k * n >= PAR_MATMUL_WORK && m >= 2 * threads {
        let rows = m.div_ceil(threads);
        c[..m * n].par_chunks_mut(rows * n).enumerate().for_each(|(i, chunk)| {
            let r = chunk.len() / n;
            let a_rows = &a[i * rows * k..(i * rows + r) * k];
            gemm_rows(a_rows, b, chunk, r, k, n);
        });
    } else {
        gemm_rows(a, b, c, m, k, n);
    }
}

fn gemm_rows<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        T::zero(),
        c,
        n as isize,
        1,
    );
}

/// Geometry of a stride-1 convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_px(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let opx = g.out_px();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * opx..(row + 1) * opx];
                for oy in 0..g.ho {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let opx = g.out_px();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * opx..(row + 1) * opx];
                for oy in 0..g.ho {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        let d = &mut dx[(c * g.h + iy as usize) * g.w + ix as usize];
                        *d = *d + src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, n: usize, x: &[T], kern: &[T]) -> Vec<T> {
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * g.out_px();
    let mut out = vec![T::zero(); n * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each_init(
        || vec![T::zero(); g.patch() * g.out_px()],
        |cols, (i, y)| {
            im2col(g, &x[i * in_sz..(i + 1) * in_sz], cols);
            gemm_rows(kern, cols, y, g.o, g.patch(), g.out_px());
        },
    );
    out
}

/// Returns `(d_input, d_kernel)` for upstream gradient `gy`.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    kern: &[T],
    gy: &[T],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * g.out_px();
    let patch = g.patch();
    let opx = g.out_px();

    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); n * in_sz];
        dx.par_chunks_mut(in_sz).enumerate().for_each_init(
            || vec![T::zero(); patch * opx],
            |dcols, (i, dxi)| {
                // dcols[patch×opx] = kernᵀ[patch×o] · gy_i[o×opx]
                T::gemm(
                    patch,
                    g.o,
                    opx,
                    T::one(),
                    kern,
                    1,
                    patch as isize,
                    &gy[i * out_sz..(i + 1) * out_sz],
                    opx as isize,
                    1,
                    T::zero(),
                    dcols,
                    opx as isize,
                    1,
                );
                col2im_add(g, dcols, dxi);
            },
        );
        dx
    });

    let dk = need_kernel.then(|| {
        let mut dk = vec![T::zero(); g.o * patch];
        let mut cols = vec![T::zero(); patch * opx];
        // Sequential accumulation keeps the summation order fixed.
        for i in 0..n {
            im2col(g, &x[i * in_sz..(i + 1) * in_sz], &mut cols);
            // dk[o×patch] += gy_i[o×opx] · colsᵀ[opx×patch]
            T::gemm(
                g.o,
                opx,
                patch,
                T::one(),
                &gy[i * out_sz..(i + 1) * out_sz],
                opx as isize,
                1,
                &cols,
                1,
                opx as isize,
                T::one(),
                &mut dk,
                patch as isize,
                1,
            );
        }
        dk
    });

    (dx, dk)
}

pub(crate) fn conv_geom(input: &[usize], kernel: &[usize], same: bool) -> Result<ConvGeom, String> {
    if input.len() != 4 || kernel.len() != 4 {
        return Err(format!(
            "conv2d expects N×C×H×W input and O×C×k×k kernels, got {input:?} and {kernel:?}"
        ));
    }
    let (c, h, w) = (input[1], input[2], input[3]);
    let (o, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
    if kc != c {
        return Err(format!("channel mismatch: input has {c}, kernels expect {kc}"));
    }
    if kh != kw {
        return Err(format!("kernels must be square, got {kh}×{kw}"));
    }
    let k = kh;
    let (pad, ho, wo) = if same {
        if k % 2 == 0 {
            return Err(format!("same padding needs an odd kernel, got {k}"));
        }
        (k / 2, h, w)
    } else {
        if k > h || k > w {
            return Err(format!("kernel {k} larger than input {h}×{w}"));
        }
        (0, h - k + 1, w - k + 1)
    };
    Ok(ConvGeom {
        c,
        h,
        w,
        o,
        k,
        pad,
        ho,
        wo,
    })
}
