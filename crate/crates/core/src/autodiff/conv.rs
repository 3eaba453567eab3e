//! im2col-based 2-D convolution kernels (zero padding, square kernels).

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for ci in 0..g.in_channels {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *out = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for ci in 0..g.in_channels {
        let plane = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = iy as usize * g.in_w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            plane[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co]` -> `[N, Co, Ho, Wo]`.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * ncols;
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..batch {
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = b {
            for (co, chunk) in dst.chunks_mut(ncols).enumerate() {
                chunk.fill(b[co]);
            }
        }
        T::gemm(
            g.out_channels,
            rows,
            ncols,
            T::one(),
            w,
            rows as isize,
            1,
            &cols,
            ncols as isize,
            1,
            T::one(),
            dst,
            ncols as isize,
            1,
        );
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * ncols;
    let mut dx = need.0.then(|| vec![T::zero(); batch * in_len]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut db = need.2.then(|| vec![T::zero(); g.out_channels]);
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..batch {
        let go = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in go.chunks(ncols).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
            // dw[Co, rows] += go[Co, ncols] * cols^T[ncols, rows]
            T::gemm(
                g.out_channels,
                ncols,
                rows,
                T::one(),
                go,
                ncols as isize,
                1,
                &cols,
                1,
                ncols as isize,
                T::one(),
                dw,
                rows as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[rows, ncols] = w^T[rows, Co] * go[Co, ncols]
            T::gemm(
                rows,
                g.out_channels,
                ncols,
                T::one(),
                w,
                1,
                rows as isize,
                go,
                ncols as isize,
                1,
                T::zero(),
                &mut cols,
                ncols as isize,
                1,
            );
            col2im(g, &cols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    ConvGrads { dx, dw, db }
}
