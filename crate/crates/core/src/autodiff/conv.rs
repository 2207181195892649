use crate::error::{ensure, Result};

/// Geometry of a 2-D cross-correlation `[ci, hi, wi] -> [co, ho, wo]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub ci: usize,
    pub hi: usize,
    pub wi: usize,
    pub co: usize,
    pub ho: usize,
    pub wo: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.ci * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// `floor((n + 2·padding - k) / stride) + 1`.
pub fn conv_output_size(n: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    ensure!(stride >= 1, InvalidArgument, "stride must be >= 1");
    ensure!(k % 2 == 1, InvalidArgument, "kernel size {} must be odd", k);
    ensure!(
        n + 2 * padding >= k,
        DimensionMismatch,
        "input extent {} with padding {} is smaller than kernel {}",
        n,
        padding,
        k
    );
    Ok((n + 2 * padding - k) / stride + 1)
}

/// `(n - 1)·stride - 2·padding + k + output_padding`, the input extent of the matching conv.
pub fn conv_transpose_output_size(
    n: usize,
    k: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<usize> {
    ensure!(stride >= 1, InvalidArgument, "stride must be >= 1");
    ensure!(
        output_padding < stride,
        InvalidArgument,
        "output padding {} must be smaller than stride {}",
        output_padding,
        stride
    );
    let full = (n.max(1) - 1) * stride + k + output_padding;
    ensure!(
        full > 2 * padding,
        DimensionMismatch,
        "transposed conv output would be empty"
    );
    let out = full - 2 * padding;
    ensure!(
        conv_output_size(out, k, stride, padding)? == n,
        DimensionMismatch,
        "transposed geometry {} -> {} does not invert a conv",
        n,
        out
    );
    Ok(out)
}

pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let npix = g.out_pixels();
    let mut cols = vec![0.0; g.patch() * npix];
    for c in 0..g.ci {
        let plane = &input[c * g.hi * g.wi..(c + 1) * g.hi * g.wi];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * npix..][..npix];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= g.hi as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.wi..][..g.wi];
                    let dst = &mut row[oy * g.wo..][..g.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < g.wi as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back onto the input grid.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let npix = g.out_pixels();
    let mut out = vec![0.0; g.ci * g.hi * g.wi];
    for c in 0..g.ci {
        let plane = &mut out[c * g.hi * g.wi..(c + 1) * g.hi * g.wi];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * npix..][..npix];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= g.hi as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.wi..][..g.wi];
                    let src = &row[oy * g.wo..][..g.wo];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < g.wi as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `C (m x n) = beta·C + op(A)·op(B)` with row-major storage; `*_t` marks operands
/// stored transposed (`A` as `k x m`, `B` as `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
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
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index matrixmultiply touches for
    // these strides, and `c` does not alias `a` or `b`.
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
