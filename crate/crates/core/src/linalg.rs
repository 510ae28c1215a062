//! Sparse storage, conjugate gradients, restarted GMRES and dense LU.

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::{Col, Mat};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::C64;

/// Compressed sparse row matrix.
#[derive(Clone, Debug)]
pub struct CsrMatrix<S> {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<S>,
}

impl<S: Copy + Default + std::ops::AddAssign + std::ops::Mul<Output = S>> CsrMatrix<S> {
    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, mut trip: Vec<(usize, usize, S)>) -> Self {
        trip.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(trip.len());
        let mut values: Vec<S> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            if last == Some((r, c)) {
                *values.last_mut().expect("nonempty") += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self { nrows, ncols, row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, S)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.row(i).find(|&(c, _)| c == j).map(|(_, v)| v).unwrap_or_default()
    }

    pub fn diagonal(&self) -> Vec<S> {
        (0..self.nrows).map(|i| self.get(i, i)).collect()
    }

    pub fn triplets(&self) -> Vec<(usize, usize, S)> {
        (0..self.nrows).flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v))).collect()
    }

    /// y = A x for any vector type the entries can scale.
    pub fn apply<V>(&self, x: &[V], y: &mut [V])
    where
        V: Copy + Default + std::ops::AddAssign + std::ops::Mul<S, Output = V>,
    {
        for (i, yi) in y.iter_mut().enumerate().take(self.nrows) {
            let mut acc = V::default();
            for (j, v) in self.row(i) {
                acc += x[j] * v;
            }
            *yi = acc;
        }
    }
}

impl CsrMatrix<f64> {
    /// Largest |A_ij - A_ji| relative to the largest |A_ij|.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        if scale > 0.0 {
            worst / scale
        } else {
            0.0
        }
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut y = vec![0.0; self.nrows];
        self.apply(x, &mut y);
        y.iter().zip(x).map(|(a, b)| a * b).sum()
    }
}

/// Jacobi-preconditioned conjugate gradients for SPD systems; solves each
/// column of `b` (stored as `n x m`, row major).
pub fn conjugate_gradient(a: &CsrMatrix<f64>, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<usize> {
    let n = a.nrows;
    let d: Vec<f64> = a.diagonal();
    if d.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::SingularFit("non-positive diagonal in normal matrix".into()));
    }
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let mut r = vec![0.0; n];
    a.apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = r.iter().zip(&d).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rn <= tol * bnorm {
            return Ok(it);
        }
        a.apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return Err(Error::SingularFit("normal matrix is not positive definite".into()));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            z[i] = r[i] / d[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SingularFit(format!("conjugate gradients stalled after {max_iter} iterations")))
}

#[derive(Clone, Copy, Debug)]
pub struct GmresOptions {
    pub tol: f64,
    pub restart: usize,
    pub max_iter: usize,
}

impl Default for GmresOptions {
    fn default() -> Self {
        Self { tol: 1e-8, restart: 100, max_iter: 1000 }
    }
}

#[derive(Clone, Debug)]
pub struct GmresOutcome<T> {
    pub x: Vec<Complex<T>>,
    pub iterations: usize,
    pub residual: T,
    /// Relative residual after each inner iteration.
    pub history: Vec<T>,
}

type Op<'a, T> = &'a mut dyn FnMut(&[Complex<T>], &mut [Complex<T>]);

fn cdot<T: Real>(a: &[Complex<T>], b: &[Complex<T>]) -> Complex<T> {
    a.iter().zip(b).fold(Complex::new(T::zero(), T::zero()), |s, (x, y)| s + x.conj() * y)
}

fn cnorm<T: Real>(a: &[Complex<T>]) -> T {
    a.iter().map(|v| v.norm_sqr()).sum::<T>().sqrt()
}

/// Restarted GMRES with right preconditioning, modified Gram-Schmidt and
/// Givens rotations. Converged when ||b - A x|| <= tol ||b||.
pub fn gmres<T: Real>(
    b: &[Complex<T>],
    apply: Op<'_, T>,
    mut precond: Option<Op<'_, T>>,
    x0: Option<&[Complex<T>]>,
    opts: &GmresOptions,
) -> Result<GmresOutcome<T>> {
    let n = b.len();
    let zero = Complex::new(T::zero(), T::zero());
    let tol = T::lit(opts.tol);
    let mut x = x0.map(<[_]>::to_vec).unwrap_or_else(|| vec![zero; n]);
    let bnorm = cnorm(b);
    let mut history = Vec::new();
    if bnorm == T::zero() {
        return Ok(GmresOutcome { x: vec![zero; n], iterations: 0, residual: T::zero(), history });
    }
    let m = opts.restart.max(1);
    let mut r = vec![zero; n];
    let mut tmp = vec![zero; n];
    let mut total = 0usize;
    let mut rel;
    loop {
        apply(&x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        let beta = cnorm(&r);
        rel = beta / bnorm;
        if rel <= tol {
            return Ok(GmresOutcome { x, iterations: total, residual: rel, history });
        }
        if total >= opts.max_iter {
            break;
        }
        let mut v: Vec<Vec<Complex<T>>> = vec![r.iter().map(|&ri| ri / beta).collect()];
        let mut h: Vec<Vec<Complex<T>>> = Vec::new();
        let mut cs: Vec<T> = Vec::new();
        let mut sn: Vec<Complex<T>> = Vec::new();
        let mut g = vec![Complex::new(beta, T::zero())];
        let mut k = 0;
        while k < m && total < opts.max_iter {
            let mut w = vec![zero; n];
            match precond.as_mut() {
                Some(p) => {
                    p(&v[k], &mut tmp);
                    apply(&tmp, &mut w);
                }
                None => apply(&v[k], &mut w),
            }
            let mut hk = vec![zero; k + 2];
            for (j, vj) in v.iter().enumerate() {
                let hj = cdot(vj, &w);
                for i in 0..n {
                    w[i] -= hj * vj[i];
                }
                hk[j] = hj;
            }
            let wn = cnorm(&w);
            hk[k + 1] = Complex::new(wn, T::zero());
            for j in 0..k {
                let t = hk[j] * cs[j] + sn[j] * hk[j + 1];
                hk[j + 1] = hk[j + 1] * cs[j] - sn[j].conj() * hk[j];
                hk[j] = t;
            }
            let (c, s) = givens(hk[k], hk[k + 1]);
            hk[k] = hk[k] * c + s * hk[k + 1];
            hk[k + 1] = zero;
            let gk = g[k];
            g.push(-s.conj() * gk);
            g[k] = gk * c;
            cs.push(c);
            sn.push(s);
            h.push(hk);
            total += 1;
            k += 1;
            rel = g[k].norm() / bnorm;
            history.push(rel);
            if rel <= tol || wn == T::zero() {
                break;
            }
            v.push(w.iter().map(|&wi| wi / wn).collect());
        }
        // back substitution for y in H y = g
        let mut y = vec![zero; k];
        for i in (0..k).rev() {
            let mut s = g[i];
            for j in i + 1..k {
                s -= h[j][i] * y[j];
            }
            y[i] = s / h[i][i];
        }
        let mut dx = vec![zero; n];
        for (j, yj) in y.iter().enumerate() {
            for i in 0..n {
                dx[i] += v[j][i] * *yj;
            }
        }
        match precond.as_mut() {
            Some(p) => {
                p(&dx, &mut tmp);
                for i in 0..n {
                    x[i] += tmp[i];
                }
            }
            None => {
                for i in 0..n {
                    x[i] += dx[i];
                }
            }
        }
    }
    Err(Error::NotConverged {
        iterations: total,
        residual: rel.to_f64_lossy(),
        history: history.iter().map(|v| v.to_f64_lossy()).collect(),
    })
}

/// Rotation (c, s) with c real that zeroes `b` in [c s; -s* c] [a; b].
fn givens<T: Real>(a: Complex<T>, b: Complex<T>) -> (T, Complex<T>) {
    let an = a.norm();
    let bn = b.norm();
    if bn == T::zero() {
        return (T::one(), Complex::new(T::zero(), T::zero()));
    }
    if an == T::zero() {
        return (T::zero(), (b / bn).conj());
    }
    let r = (an * an + bn * bn).sqrt();
    let c = an / r;
    let s = (a / an) * b.conj() / r;
    (c, s)
}

/// Dense LU with partial pivoting.
pub struct DenseLu {
    lu: PartialPivLu<C64>,
    n: usize,
}

impl DenseLu {
    pub fn new(a: &Mat<C64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Dimension(format!("{}x{} matrix is not square", a.nrows(), a.ncols())));
        }
        let lu = a.partial_piv_lu();
        Ok(Self { lu, n: a.nrows() })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, x: &mut [C64]) {
        let mut c = Col::<C64>::from_fn(self.n, |i| x[i]);
        self.lu.solve_in_place(c.as_mut());
        for (i, v) in x.iter_mut().enumerate() {
            *v = c[i];
        }
    }

    pub fn solve(&self, b: &[C64]) -> Vec<C64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// y = M x for a dense complex matrix.
pub fn dense_apply(m: &Mat<C64>, x: &[C64], y: &mut [C64]) {
    let xc = Col::<C64>::from_fn(x.len(), |i| x[i]);
    let r = m * &xc;
    for (i, v) in y.iter_mut().enumerate() {
        *v = r[i];
    }
}

pub fn norm2(x: &[C64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// ||a - b|| / ||b||
pub fn rel_diff(a: &[C64], b: &[C64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
    d / norm2(b).max(f64::MIN_POSITIVE)
}
