//! 2-D convolution via im2col and GEMM, one batch item at a time.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatView, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl Conv2dGeometry {
    pub fn infer(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[batch, cin, h, wd], &[cout, wcin, kh, kw]) = (x, w) else {
            return Err(Error::Shape(format!("conv2d expects rank-4 input and weight, got {x:?} and {w:?}")));
        };
        if wcin != cin || kh != kw || stride == 0 {
            return Err(Error::Shape(format!("conv2d weight {w:?} incompatible with input {x:?}")));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape(format!("conv2d kernel {kh} larger than padded input {x:?}")));
        }
        Ok(Conv2dGeometry {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kernel: kh,
            stride,
            pad,
            hout: (h + 2 * pad - kh) / stride + 1,
            wout: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.hout * self.wout
    }
}

fn im2col<F: Element>(g: &Conv2dGeometry, x: &[F], col: &mut [F]) {
    let (k, l) = (g.kernel, g.out_len());
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((c * k + ki) * k + kj) * l..][..l];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wout..(oy + 1) * g.wout];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { F::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<F: Element>(g: &Conv2dGeometry, col: &[F], dx: &mut [F]) {
    let (k, l) = (g.kernel, g.out_len());
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((c * k + ki) * k + kj) * l..][..l];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &s) in row[oy * g.wout..(oy + 1) * g.wout].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

pub fn forward<F: Element>(g: &Conv2dGeometry, x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (rows, l) = (g.col_rows(), g.out_len());
    let mut out = vec![F::zero(); g.batch * g.cout * l];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); rows * l] };
    for (i, dst) in out.chunks_mut(g.cout * l).enumerate() {
        let src = if g.is_pointwise() {
            x.item(i)
        } else {
            im2col(g, x.item(i), &mut col);
            &col
        };
        for (plane, &bias) in dst.chunks_mut(l).zip(b.data()) {
            plane.fill(bias);
        }
        gemm(F::one(), MatView::rm(w.data(), g.cout, rows), MatView::rm(src, rows, l), F::one(), dst);
    }
    Tensor::from_vec(&[g.batch, g.cout, g.hout, g.wout], out).expect("conv output shape")
}

pub struct ConvGrads<F> {
    pub dx: Option<Tensor<F>>,
    pub dw: Tensor<F>,
    pub db: Tensor<F>,
}

pub fn backward<F: Element>(
    g: &Conv2dGeometry,
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    want_dx: bool,
) -> ConvGrads<F> {
    let (rows, l) = (g.col_rows(), g.out_len());
    let mut dw = vec![F::zero(); g.cout * rows];
    let mut db = vec![F::zero(); g.cout];
    let mut dx = if want_dx { Some(vec![F::zero(); g.batch * g.cin * g.h * g.w]) } else { None };
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); rows * l] };
    let mut dcol = if want_dx && !g.is_pointwise() { vec![F::zero(); rows * l] } else { Vec::new() };
    for i in 0..g.batch {
        let dyi = dy.item(i);
        for (d, plane) in db.iter_mut().zip(dyi.chunks(l)) {
            *d += plane.iter().copied().sum::<F>();
        }
        let src = if g.is_pointwise() {
            x.item(i)
        } else {
            im2col(g, x.item(i), &mut col);
            &col
        };
        gemm(F::one(), MatView::rm(dyi, g.cout, l), MatView::rm_t(src, l, rows), F::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * g.cin * g.h * g.w..(i + 1) * g.cin * g.h * g.w];
            let wt = MatView::rm_t(w.data(), rows, g.cout);
            if g.is_pointwise() {
                gemm(F::one(), wt, MatView::rm(dyi, g.cout, l), F::zero(), dxi);
            } else {
                gemm(F::one(), wt, MatView::rm(dyi, g.cout, l), F::zero(), &mut dcol);
                col2im(g, &dcol, dxi);
            }
        }
    }
    ConvGrads {
        dx: dx.map(|d| Tensor::from_vec(&[g.batch, g.cin, g.h, g.w], d).expect("dx shape")),
        dw: Tensor::from_vec(&[g.cout, g.cin, g.kernel, g.kernel], dw).expect("dw shape"),
        db: Tensor::from_vec(&[g.cout], db).expect("db shape"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let g = Conv2dGeometry::infer(x.shape(), w.shape(), stride, pad).unwrap();
        let mut out = Tensor::zeros(&[g.batch, g.cout, g.hout, g.wout]);
        for n in 0..g.batch {
            for co in 0..g.cout {
                for oy in 0..g.hout {
                    for ox in 0..g.wout {
                        let mut acc = b.data()[co];
                        for ci in 0..g.cin {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                                    let wv = w.data()[((co * g.cin + ci) * g.kernel + ki) * g.kernel + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((n * g.cout + co) * g.hout + oy) * g.wout + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect()).unwrap()
    }

    #[test]
    fn forward_matches_direct_convolution() {
        for &(k, stride, pad, h) in &[(3, 1, 1, 5), (3, 2, 1, 6), (1, 1, 0, 4), (3, 2, 1, 5)] {
            let x = ramp(&[2, 3, h, h], 0.1);
            let w = ramp(&[4, 3, k, k], 0.05);
            let b = ramp(&[4], 0.2);
            let g = Conv2dGeometry::infer(x.shape(), w.shape(), stride, pad).unwrap();
            let fast = forward(&g, &x, &w, &b);
            let slow = naive(&x, &w, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_halves_resolution() {
        let g = Conv2dGeometry::infer(&[1, 8, 32, 32], &[8, 8, 3, 3], 2, 1).unwrap();
        assert_eq!((g.hout, g.wout), (16, 16));
    }
}
