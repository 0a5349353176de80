//! Dense kernels behind the graph ops. All activations are `[C, N, L]`.

/// Matrix operand: a row-major buffer with logical shape `rows × cols`,
/// optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a · b` (or `c += a · b` when `accumulate`). `c` is row-major `m × n`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, c: &mut [f64], accumulate: bool) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(c.len(), m * n, "output buffer has wrong size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the shapes and strides above address exactly the `m×k`, `k×n`
    // and `m×n` elements of the three buffers, whose lengths were checked.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `x: [cin, n, len]` into `[cin·k, n·len]` for a stride-1 convolution
/// with `pad` zeros on each side.
pub(crate) fn im2col(x: &[f64], cin: usize, n: usize, len: usize, k: usize, pad: usize) -> Vec<f64> {
    let nl = n * len;
    let mut col = vec![0.0; cin * k * nl];
    for ci in 0..cin {
        for kk in 0..k {
            let row = &mut col[(ci * k + kk) * nl..(ci * k + kk + 1) * nl];
            let off = kk as isize - pad as isize;
            let (lo, hi) = valid_range(len, off);
            for s in 0..n {
                let src = &x[(ci * n + s) * len..(ci * n + s + 1) * len];
                let dst = &mut row[s * len..(s + 1) * len];
                for l in lo..hi {
                    dst[l] = src[(l as isize + off) as usize];
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx`.
pub(crate) fn col2im(col: &[f64], dx: &mut [f64], cin: usize, n: usize, len: usize, k: usize, pad: usize) {
    let nl = n * len;
    for ci in 0..cin {
        for kk in 0..k {
            let row = &col[(ci * k + kk) * nl..(ci * k + kk + 1) * nl];
            let off = kk as isize - pad as isize;
            let (lo, hi) = valid_range(len, off);
            for s in 0..n {
                let src = &row[s * len..(s + 1) * len];
                let dst = &mut dx[(ci * n + s) * len..(ci * n + s + 1) * len];
                for l in lo..hi {
                    dst[(l as isize + off) as usize] += src[l];
                }
            }
        }
    }
}

/// Output positions `l` for which `l + off` lies in `0..len`.
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}
