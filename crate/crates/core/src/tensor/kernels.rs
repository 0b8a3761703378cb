//! Raw array kernels behind the graph operations. No shape validation here;
//! callers in `graph` check extents first.

use super::Real;

/// Geometry of a stride-1 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn out_sample(&self) -> usize {
        self.k * self.out_area()
    }
}

/// Unfolds one sample `[C,H,W]` into `[C*kh*kw, out_h*out_w]`.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let area = g.out_area();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * area..(row + 1) * area];
                for oy in 0..g.out_h {
                    let iy = oy as isize + i as isize - g.pad_h as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + j as isize - g.pad_w as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx` (one sample).
pub(crate) fn col2im_add<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let area = g.out_area();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * area..(row + 1) * area];
                for oy in 0..g.out_h {
                    let iy = oy as isize + i as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = ox as isize + j as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + *v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward conv for the whole batch. When `cols_out` is provided the
/// unfolded inputs are kept for the backward pass.
pub(crate) fn conv_forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
    mut cols_out: Option<&mut Vec<T>>,
) {
    let rows = g.col_rows();
    let area = g.out_area();
    let mut scratch = Vec::new();
    if let Some(cols) = cols_out.as_deref_mut() {
        cols.resize(g.n * rows * area, T::zero());
    } else {
        scratch.resize(rows * area, T::zero());
    }
    for n in 0..g.n {
        let xs = &x[n * g.in_sample()..(n + 1) * g.in_sample()];
        let col: &mut [T] = match cols_out.as_deref_mut() {
            Some(cols) => &mut cols[n * rows * area..(n + 1) * rows * area],
            None => &mut scratch,
        };
        im2col(g, xs, col);
        let os = &mut out[n * g.out_sample()..(n + 1) * g.out_sample()];
        match bias {
            Some(b) => {
                for (k, chunk) in os.chunks_mut(area).enumerate() {
                    chunk.fill(b[k]);
                }
            }
            None => os.fill(T::zero()),
        }
        T::gemm(g.k, rows, area, T::one(), kernel, rows as isize, 1, col, area as isize, 1, T::one(), os, area as isize, 1);
    }
}

pub(crate) struct ConvGrads<'a, T> {
    pub dx: Option<&'a mut [T]>,
    pub dkernel: Option<&'a mut [T]>,
    pub dbias: Option<&'a mut [T]>,
}

pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    kernel: &[T],
    cols: &[T],
    dout: &[T],
    grads: ConvGrads<'_, T>,
) {
    let rows = g.col_rows();
    let area = g.out_area();
    let ConvGrads { mut dx, mut dkernel, mut dbias } = grads;
    let mut dcol = if dx.is_some() { vec![T::zero(); rows * area] } else { Vec::new() };
    for n in 0..g.n {
        let dos = &dout[n * g.out_sample()..(n + 1) * g.out_sample()];
        let col = &cols[n * rows * area..(n + 1) * rows * area];
        if let Some(dk) = dkernel.as_deref_mut() {
            // dK[K, rows] += dout[K, area] · col^T
            T::gemm(g.k, area, rows, T::one(), dos, area as isize, 1, col, 1, area as isize, T::one(), dk, rows as isize, 1);
        }
        if let Some(db) = dbias.as_deref_mut() {
            for (k, chunk) in dos.chunks(area).enumerate() {
                db[k] = db[k] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dxs) = dx.as_deref_mut() {
            // dcol[rows, area] = K^T · dout
            T::gemm(rows, g.k, area, T::one(), kernel, 1, rows as isize, dos, area as isize, 1, T::zero(), &mut dcol, area as isize, 1);
            col2im_add(g, &dcol, &mut dxs[n * g.in_sample()..(n + 1) * g.in_sample()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(h: usize, w: usize, pad: usize) -> ConvGeom {
        ConvGeom { n: 1, c: 1, h, w, k: 1, kh: 3, kw: 3, pad_h: pad, pad_w: pad, out_h: h + 2 * pad - 2, out_w: w + 2 * pad - 2 }
    }

    #[test]
    fn im2col_valid_3x3_is_flat_copy() {
        let g = geom(3, 3, 0);
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let mut col = vec![0.0; 9];
        im2col(&g, &x, &mut col);
        assert_eq!(col, x);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = geom(4, 5, 1);
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..9 * g.out_area()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; y.len()];
        im2col(&g, &x, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; 20];
        col2im_add(&g, &y, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
