//! Split-storage complex kernels for the two products AMP needs every
//! iteration, `A X` and `A^H R`.
//!
//! Blocks are stored as `M` planes of length `rows` (antenna-major), with
//! real and imaginary parts in separate buffers so the inner loops run over
//! contiguous `f64` slices. Reductions use a fixed four-lane accumulation
//! order, so results do not depend on thread count or scheduling.

use ndarray::Array2;
use num_complex::Complex64;

/// An `M`-column complex block stored as planes: entry `(row, col)` lives at
/// `col * rows + row`.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub rows: usize,
    pub cols: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Planes {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            re: vec![0.0; rows * cols],
            im: vec![0.0; rows * cols],
        }
    }

    pub fn from_array(a: &Array2<Complex64>) -> Self {
        let (rows, cols) = a.dim();
        let mut p = Self::zeros(rows, cols);
        for ((r, c), v) in a.indexed_iter() {
            p.re[c * rows + r] = v.re;
            p.im[c * rows + r] = v.im;
        }
        p
    }

    pub fn to_array(&self) -> Array2<Complex64> {
        Array2::from_shape_fn((self.rows, self.cols), |(r, c)| self.get(r, c))
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        let i = col * self.rows + row;
        Complex64::new(self.re[i], self.im[i])
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: Complex64) {
        let i = col * self.rows + row;
        self.re[i] = v.re;
        self.im[i] = v.im;
    }

    pub fn norm_sqr(&self) -> f64 {
        sum4(&self.re, &self.re) + sum4(&self.im, &self.im)
    }

    pub fn fill_zero(&mut self) {
        self.re.fill(0.0);
        self.im.fill(0.0);
    }

    pub fn row_into(&self, row: usize, out: &mut [Complex64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.get(row, c);
        }
    }

    pub fn set_row(&mut self, row: usize, v: &[Complex64]) {
        for (c, z) in v.iter().enumerate() {
            self.set(row, c, *z);
        }
    }

    /// `||self - other||_F^2`.
    pub fn dist_sqr(&self, other: &Planes) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        d(&self.re, &other.re) + d(&self.im, &other.im)
    }
}

/// Dot product with a fixed four-lane summation order.
#[inline]
fn sum4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `sum_k (ar_k + i ai_k)(xr_k + i xi_k)` with a fixed four-lane order.
#[inline]
fn cdot4(ar: &[f64], ai: &[f64], xr: &[f64], xi: &[f64]) -> (f64, f64) {
    let mut sr = [0.0f64; 4];
    let mut si = [0.0f64; 4];
    let n4 = ar.len() / 4 * 4;
    for ((a, b), (c, d)) in ar[..n4]
        .chunks_exact(4)
        .zip(ai[..n4].chunks_exact(4))
        .zip(xr[..n4].chunks_exact(4).zip(xi[..n4].chunks_exact(4)))
    {
        for k in 0..4 {
            sr[k] += a[k] * c[k] - b[k] * d[k];
            si[k] += a[k] * d[k] + b[k] * c[k];
        }
    }
    let (mut tr, mut ti) = (0.0, 0.0);
    for k in n4..ar.len() {
        tr += ar[k] * xr[k] - ai[k] * xi[k];
        ti += ar[k] * xi[k] + ai[k] * xr[k];
    }
    ((sr[0] + sr[1]) + (sr[2] + sr[3]) + tr, (si[0] + si[1]) + (si[2] + si[3]) + ti)
}

/// Dense complex `L x C` matrix in split row-major storage.
#[derive(Debug, Clone)]
pub struct SplitMatrix {
    pub rows: usize,
    pub cols: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl SplitMatrix {
    pub fn from_array(a: &Array2<Complex64>) -> Self {
        let (rows, cols) = a.dim();
        let mut re = Vec::with_capacity(rows * cols);
        let mut im = Vec::with_capacity(rows * cols);
        for v in a.iter() {
            re.push(v.re);
            im.push(v.im);
        }
        Self { rows, cols, re, im }
    }

    /// `out = A x` with `x` a `cols x M` block.
    pub fn apply(&self, x: &Planes, out: &mut Planes) {
        debug_assert_eq!(x.rows, self.cols);
        debug_assert_eq!((out.rows, out.cols), (self.rows, x.cols));
        let c = self.cols;
        for l in 0..self.rows {
            let ar = &self.re[l * c..(l + 1) * c];
            let ai = &self.im[l * c..(l + 1) * c];
            for m in 0..x.cols {
                let xr = &x.re[m * c..(m + 1) * c];
                let xi = &x.im[m * c..(m + 1) * c];
                let (re, im) = cdot4(ar, ai, xr, xi);
                out.re[m * self.rows + l] = re;
                out.im[m * self.rows + l] = im;
            }
        }
    }

    /// `out = A^H r` with `r` an `rows x M` block.
    pub fn adjoint_apply(&self, r: &Planes, out: &mut Planes) {
        debug_assert_eq!(r.rows, self.rows);
        debug_assert_eq!((out.rows, out.cols), (self.cols, r.cols));
        out.fill_zero();
        let c = self.cols;
        for l in 0..self.rows {
            let ar = &self.re[l * c..(l + 1) * c];
            let ai = &self.im[l * c..(l + 1) * c];
            for m in 0..r.cols {
                let rr = r.re[m * self.rows + l];
                let ri = r.im[m * self.rows + l];
                let ur = &mut out.re[m * c..(m + 1) * c];
                for ((u, &a), &b) in ur.iter_mut().zip(ar).zip(ai) {
                    *u += a * rr + b * ri;
                }
                let ui = &mut out.im[m * c..(m + 1) * c];
                for ((u, &a), &b) in ui.iter_mut().zip(ar).zip(ai) {
                    *u += a * ri - b * rr;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;

    fn random(rows: usize, cols: usize, s: &mut RandomStream) -> Array2<Complex64> {
        Array2::from_shape_simple_fn((rows, cols), || s.complex_normal(1.0))
    }

    #[test]
    fn products_match_ndarray() {
        let mut s = RandomStream::new(12);
        for (l, c, m) in [(7, 13, 1), (9, 30, 3), (4, 5, 6)] {
            let a = random(l, c, &mut s);
            let x = random(c, m, &mut s);
            let r = random(l, m, &mut s);
            let sm = SplitMatrix::from_array(&a);

            let mut y = Planes::zeros(l, m);
            sm.apply(&Planes::from_array(&x), &mut y);
            let expect = a.dot(&x);
            for (p, q) in y.to_array().iter().zip(expect.iter()) {
                assert!((p - q).norm() < 1e-12);
            }

            let mut u = Planes::zeros(c, m);
            sm.adjoint_apply(&Planes::from_array(&r), &mut u);
            let expect = a.t().mapv(|z| z.conj()).dot(&r);
            for (p, q) in u.to_array().iter().zip(expect.iter()) {
                assert!((p - q).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn planes_round_trip() {
        let mut s = RandomStream::new(2);
        let a = random(5, 3, &mut s);
        let p = Planes::from_array(&a);
        assert_eq!(p.to_array(), a);
        let n2: f64 = a.iter().map(|z| z.norm_sqr()).sum();
        assert!((p.norm_sqr() - n2).abs() < 1e-12);
    }
}
