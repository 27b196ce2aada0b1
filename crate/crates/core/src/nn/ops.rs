//! Patch extraction kernels for NHWC tensors.

use ndarray::{linalg::general_mat_mul, ArrayView2, ArrayViewMut2};

use crate::Scalar;

/// Convolution geometry between a "big" map `(h_in, w_in)` and the "small"
/// map it convolves down to. Transposed convolutions reuse the same geometry
/// with the roles of input and output swapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.n * self.h_out * self.w_out
    }

    pub fn cols(&self) -> usize {
        self.kh * self.kw * self.c
    }

    /// 1×1, stride 1, no padding: the patch matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    #[inline]
    fn source(&self, o: usize, k: usize) -> Option<usize> {
        let p = (o * self.stride + k * self.dil) as isize - self.pad as isize;
        (p >= 0).then_some(p as usize)
    }
}

/// Patch matrix `(n·h_out·w_out, kh·kw·c)`, channel-fastest within a patch.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); g.rows() * cols];
    let c = g.c;
    for n in 0..g.n {
        let img = &x[n * g.h_in * g.w_in * c..(n + 1) * g.h_in * g.w_in * c];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let row = ((n * g.h_out + oy) * g.w_out + ox) * cols;
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky).filter(|&v| v < g.h_in) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx).filter(|&v| v < g.w_in) else { continue };
                        let dst = row + (ky * g.kw + kx) * c;
                        let src = (iy * g.w_in + ix) * c;
                        out[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the big map, summing
/// overlaps.
pub fn col2im<T: Scalar>(cols_data: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.cols();
    let c = g.c;
    let mut out = vec![T::zero(); g.n * g.h_in * g.w_in * c];
    for n in 0..g.n {
        let base = n * g.h_in * g.w_in * c;
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let row = ((n * g.h_out + oy) * g.w_out + ox) * cols;
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky).filter(|&v| v < g.h_in) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx).filter(|&v| v < g.w_in) else { continue };
                        let src = row + (ky * g.kw + kx) * c;
                        let dst = base + (iy * g.w_in + ix) * c;
                        for (o, &v) in out[dst..dst + c].iter_mut().zip(&cols_data[src..src + c]) {
                            *o = *o + v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c = a · b` for row-major slices, `a: (m, k)`, `b: (k, n)`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let av = ArrayView2::from_shape((m, k), a).expect("lhs shape");
    let bv = ArrayView2::from_shape((k, n), b).expect("rhs shape");
    let mut cv = ArrayViewMut2::from_shape((m, n), &mut c).expect("out shape");
    general_mat_mul(T::one(), &av, &bv, T::zero(), &mut cv);
    c
}

/// `aᵀ · b` with `a: (k, m)`, `b: (k, n)`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let av = ArrayView2::from_shape((k, m), a).expect("lhs shape");
    let bv = ArrayView2::from_shape((k, n), b).expect("rhs shape");
    let mut cv = ArrayViewMut2::from_shape((m, n), &mut c).expect("out shape");
    general_mat_mul(T::one(), &av.t(), &bv, T::zero(), &mut cv);
    c
}

/// `a · bᵀ` with `a: (m, k)`, `b: (n, k)`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let av = ArrayView2::from_shape((m, k), a).expect("lhs shape");
    let bv = ArrayView2::from_shape((n, k), b).expect("rhs shape");
    let mut cv = ArrayViewMut2::from_shape((m, n), &mut c).expect("out shape");
    general_mat_mul(T::one(), &av, &bv.t(), T::zero(), &mut cv);
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    proptest! {
        // <im2col(x), y> == <x, col2im(y)> for every geometry
        #[test]
        fn col2im_is_adjoint(h in 1usize..7, w in 1usize..7, c in 1usize..3, k in 1usize..4,
                             stride in 1usize..3, dil in 1usize..3, pad in 0usize..3, seed in 0u64..1000) {
            let span = dil * (k - 1) + 1;
            prop_assume!(h + 2 * pad >= span && w + 2 * pad >= span);
            let g = ConvGeom { n: 2, h_in: h, w_in: w, c, h_out: (h + 2 * pad - span) / stride + 1,
                w_out: (w + 2 * pad - span) / stride + 1, kh: k, kw: k, stride, pad, dil };
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 33) as f64 / 2f64.powi(31) - 0.5 };
            let x: Vec<f64> = (0..g.n * h * w * c).map(|_| next()).collect();
            let y: Vec<f64> = (0..g.rows() * g.cols()).map(|_| next()).collect();
            let lhs = dot(&im2col(&x, &g), &y);
            let rhs = dot(&x, &col2im(&y, &g));
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 - 4.0).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        let at: Vec<f64> = vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]; // 3x2
        assert_eq!(matmul_tn(&at, &b, 3, 2, 4), c);
        let bt: Vec<f64> = (0..4).flat_map(|j| (0..3).map(move |i| (i * 4 + j) as f64 - 4.0)).collect();
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), c);
        assert_eq!(c[0], 0.0 * -4.0 + 1.0 * 0.0 + 2.0 * 4.0);
    }
}
