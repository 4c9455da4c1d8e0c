// SPDX-License-Identifier: MIT OR Apache-2.0

//! One-sided (Hestenes) Jacobi SVD for small dense matrices.
//!
//! Column pairs of a working copy are rotated until every pair is
//! orthogonal to within `tol` (relative to their norms). Arithmetic is
//! carried out in f64 regardless of the storage type.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Largest extent accepted by [`svd_small`].
pub const MAX_SVD_DIM: usize = 256;

const MAX_SWEEPS: usize = 100;

/// `a = u · diag(s) · vᵀ`, with `k = min(m, n)` factors.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors<T = f32> {
    /// `m×k`, orthonormal columns.
    pub u: Tensor<T>,
    /// `k` singular values, descending, nonnegative.
    pub s: Tensor<T>,
    /// `n×k`, orthonormal columns.
    pub v: Tensor<T>,
    pub sweeps: usize,
}

impl<T: Scalar> SvdFactors<T> {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Tensor<T> {
        let (m, k) = (self.u.shape()[0], self.u.shape()[1]);
        let n = self.v.shape()[0];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for c in 0..k {
                    acc += self.u.get2(i, c).as_f64()
                        * self.s.data()[c].as_f64()
                        * self.v.get2(j, c).as_f64();
                }
                out[i * n + j] = T::of(acc);
            }
        }
        Tensor::from_raw(vec![m, n], out)
    }
}

/// Column-major scratch matrix.
struct Cols {
    rows: usize,
    data: Vec<f64>,
}

impl Cols {
    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    fn rotate(&mut self, p: usize, q: usize, c: f64, s: f64) {
        let r = self.rows;
        let (lo, hi) = self.data.split_at_mut(q * r);
        let cp = &mut lo[p * r..(p + 1) * r];
        let cq = &mut hi[..r];
        for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
            let (a, b) = (*x, *y);
            *x = c * a - s * b;
            *y = s * a + c * b;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn svd_small<T: Scalar>(a: &Tensor<T>, tol: f64) -> Result<SvdFactors<T>> {
    let (m, n) = match a.shape() {
        &[m, n] => (m, n),
        s => {
            return Err(Error::InvalidArgument(format!(
                "svd expects a 2-D tensor, got {s:?}"
            )))
        }
    };
    if m == 0 || n == 0 || m > MAX_SVD_DIM || n > MAX_SVD_DIM {
        return Err(Error::InvalidArgument(format!(
            "svd_small supports 1..={MAX_SVD_DIM} per side, got {m}x{n}"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("svd tolerance must be > 0".into()));
    }

    // Work on the tall orientation; transpose back at the end.
    let transposed = m < n;
    let (rows, cols) = if transposed { (n, m) } else { (m, n) };
    let mut w = Cols {
        rows,
        data: vec![0.0; rows * cols],
    };
    for i in 0..m {
        for j in 0..n {
            let x = a.get2(i, j).as_f64();
            if transposed {
                w.data[i * rows + j] = x;
            } else {
                w.data[j * rows + i] = x;
            }
        }
    }
    let mut v = Cols {
        rows: cols,
        data: vec![0.0; cols * cols],
    };
    for j in 0..cols {
        v.data[j * cols + j] = 1.0;
    }

    let scale = w.data.iter().map(|x| x * x).sum::<f64>();
    let negligible = scale * 1e-30;
    let mut sweeps = 0;
    let mut off = f64::INFINITY;
    while sweeps < MAX_SWEEPS {
        off = 0.0;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(w.col(p), w.col(p));
                let beta = dot(w.col(q), w.col(q));
                let gamma = dot(w.col(p), w.col(q));
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let rel = gamma.abs() / (alpha * beta).sqrt();
                off = off.max(rel);
                if rel <= tol * 1e-2 || gamma == 0.0 {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                w.rotate(p, q, c, s);
                v.rotate(p, q, c, s);
            }
        }
        sweeps += 1;
        if off < tol {
            break;
        }
    }
    if off >= tol {
        return Err(Error::SvdNonConvergence {
            sweeps,
            off_diagonal: off,
        });
    }

    let k = cols;
    let norms: Vec<f64> = (0..k).map(|j| dot(w.col(j), w.col(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let s_max = norms[order[0]];
    let cutoff = s_max * 1e-13;

    // Left vectors of the tall problem, normalized; null directions filled later.
    let mut left: Vec<Option<Vec<f64>>> = Vec::with_capacity(k);
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut sing = Vec::with_capacity(k);
    for &j in &order {
        let sj = norms[j];
        if sj > cutoff && sj > 0.0 {
            left.push(Some(w.col(j).iter().map(|x| x / sj).collect()));
            sing.push(sj);
        } else {
            left.push(None);
            sing.push(0.0);
        }
        right.push(v.col(j).to_vec());
    }
    complete_orthonormal(&mut left, rows);
    let mut left: Vec<Vec<f64>> = left.into_iter().map(Option::unwrap).collect();

    // The "u" of the caller's orientation is `left` unless transposed.
    let (u_cols, v_cols) = if transposed {
        (&mut right, &mut left)
    } else {
        (&mut left, &mut right)
    };
    for c in 0..k {
        let lead = u_cols[c]
            .iter()
            .copied()
            .find(|x| x.abs() > 1e-12)
            .unwrap_or(0.0);
        if lead < 0.0 {
            u_cols[c].iter_mut().for_each(|x| *x = -*x);
            v_cols[c].iter_mut().for_each(|x| *x = -*x);
        }
    }

    let pack = |cols_: &[Vec<f64>], r: usize| {
        let mut d = vec![T::zero(); r * k];
        for (c, col) in cols_.iter().enumerate() {
            for i in 0..r {
                d[i * k + c] = T::of(col[i]);
            }
        }
        Tensor::from_raw(vec![r, k], d)
    };
    Ok(SvdFactors {
        u: pack(u_cols, m),
        s: Tensor::from_raw(vec![k], sing.into_iter().map(T::of).collect()),
        v: pack(v_cols, n),
        sweeps,
    })
}

/// Fills `None` slots with unit vectors orthogonal to every other column.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], dim: usize) {
    let mut candidate = 0;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram–Schmidt passes for numerical orthogonality.
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let proj = dot(&e, other);
                    e.iter_mut().zip(other).for_each(|(x, o)| *x -= proj * o);
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                e.iter_mut().for_each(|x| *x /= norm);
                cols[slot] = Some(e);
                break;
            }
        }
    }
}
