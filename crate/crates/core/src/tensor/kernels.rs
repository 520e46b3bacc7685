//! Raw numeric kernels over flat row-major buffers.

/// `c = a' * b' + beta * c` where `a'` is `m x k` and `b'` is `k x n`.
///
/// `a_t` means `a` is stored as `k x m` (so `a'` is its transpose); likewise
/// `b_t` means `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can produce.
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

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.h_out * self.w_out
    }
}

/// Unfolds `[B, C, H, W]` into `[C*k*k, B*Ho*Wo]` patch columns (zero padded).
pub fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw_out = g.h_out * g.w_out;
    let ncols = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ncols];
    for c in 0..g.c_in {
        for m in 0..g.k {
            for n in 0..g.k {
                let row = (c * g.k + m) * g.k + n;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &input[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[b * hw_out..(b + 1) * hw_out];
                    for i in 0..g.h_out {
                        let ii = (i * g.stride + m) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let src = &plane[ii as usize * g.w..][..g.w];
                        let out = &mut dst[i * g.w_out..(i + 1) * g.w_out];
                        for (j, o) in out.iter_mut().enumerate() {
                            let jj = (j * g.stride + n) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                *o = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back into `[B, C, H, W]`.
pub fn col2im_add(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let hw_out = g.h_out * g.w_out;
    let ncols = g.col_cols();
    for c in 0..g.c_in {
        for m in 0..g.k {
            for n in 0..g.k {
                let row = (c * g.k + m) * g.k + n;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &mut out[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[b * hw_out..(b + 1) * hw_out];
                    for i in 0..g.h_out {
                        let ii = (i * g.stride + m) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ii as usize * g.w..][..g.w];
                        for j in 0..g.w_out {
                            let jj = (j * g.stride + n) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                dst[jj as usize] += src[i * g.w_out + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[C, B, S]` <-> `[B, C, S]` block transpose.
pub fn swap_outer(src: &[f64], outer: usize, mid: usize, inner: usize) -> Vec<f64> {
    let mut dst = vec![0.0; src.len()];
    for a in 0..outer {
        for b in 0..mid {
            let s = (a * mid + b) * inner;
            let d = (b * outer + a) * inner;
            dst[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    dst
}

/// Numerically stable softmax over consecutive rows of length `len`, in place.
pub fn softmax_rows(data: &mut [f64], len: usize) {
    for row in data.chunks_mut(len) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// `log(1 + exp(z))` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
