//! Small dense linear algebra kernels.

use ndarray::{Array2, ArrayView2};

use crate::scalar::{dot, norm, Scalar};

const MAX_SWEEPS: usize = 80;

/// Right singular vectors of an `m × d` matrix, sorted by singular value.
#[derive(Debug, Clone)]
pub struct RightSingular<T: Scalar> {
    pub values: Vec<T>,
    /// One unit vector of length `d` per row, `min(m, d)` rows.
    pub vectors: Array2<T>,
    /// Rows whose singular value is zero; their vector is an arbitrary unit
    /// completion orthogonal to the preceding rows.
    pub degenerate: Vec<bool>,
}

/// One-sided Jacobi (Hestenes) orthogonalization of a set of columns.
/// Rotations are mirrored onto `companion` columns when given.
fn hestenes<T: Scalar>(cols: &mut [Vec<T>], mut companion: Option<&mut [Vec<T>]>) {
    let q = cols.len();
    let tol = T::epsilon();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for j in 0..q {
            for k in (j + 1)..q {
                let alpha = dot(&cols[j], &cols[j]);
                let beta = dot(&cols[k], &cols[k]);
                let gamma = dot(&cols[j], &cols[k]);
                if gamma == T::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(cols, j, k, c, s);
                if let Some(v) = companion.as_deref_mut() {
                    rotate(v, j, k, c, s);
                }
            }
        }
        if !rotated {
            break;
        }
    }
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], j: usize, k: usize, c: T, s: T) {
    let (left, right) = cols.split_at_mut(k);
    let (cj, ck) = (&mut left[j], &mut right[0]);
    for (x, y) in cj.iter_mut().zip(ck.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Completes `v` to a unit vector orthogonal to `basis` using coordinate axes.
fn orthogonal_completion<T: Scalar>(basis: &[Vec<T>], d: usize) -> Vec<T> {
    for axis in 0..d {
        let mut v = vec![T::zero(); d];
        v[axis] = T::one();
        for _ in 0..2 {
            for b in basis {
                let p = dot(&v, b);
                for (x, &y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let nv = norm(&v);
        if nv > T::lit(1e-3) {
            return v.into_iter().map(|x| x / nv).collect();
        }
    }
    let mut v = vec![T::zero(); d];
    v[0] = T::one();
    v
}

/// Thin SVD restricted to the right singular vectors.
pub fn right_singular_vectors<T: Scalar>(a: ArrayView2<T>) -> RightSingular<T> {
    let (m, d) = a.dim();
    let r = m.min(d);
    let mut pairs: Vec<(T, Vec<T>)>;
    if m >= d {
        let mut cols: Vec<Vec<T>> = (0..d).map(|j| a.column(j).to_vec()).collect();
        let mut v: Vec<Vec<T>> = (0..d)
            .map(|j| {
                let mut e = vec![T::zero(); d];
                e[j] = T::one();
                e
            })
            .collect();
        hestenes(&mut cols, Some(&mut v));
        pairs = cols.iter().map(|c| norm(c)).zip(v).collect();
    } else {
        // Columns of Aᵀ are the rows of A; their orthogonalized directions
        // are the right singular vectors of A.
        let mut cols: Vec<Vec<T>> = (0..m).map(|i| a.row(i).to_vec()).collect();
        hestenes(&mut cols, None);
        pairs = cols
            .into_iter()
            .map(|c| {
                let s = norm(&c);
                let v = if s > T::zero() {
                    c.into_iter().map(|x| x / s).collect()
                } else {
                    c
                };
                (s, v)
            })
            .collect();
    }
    // Stable sort keeps column order among equal values.
    pairs.sort_by(|x, y| crate::scalar::desc(x.0, y.0));

    let scale = pairs.first().map(|p| p.0).unwrap_or(T::zero());
    let cutoff = scale * T::epsilon() * T::from_usize(m.max(d)).expect("dim");
    let mut values = Vec::with_capacity(r);
    let mut degenerate = Vec::with_capacity(r);
    let mut accepted: Vec<Vec<T>> = Vec::with_capacity(r);
    for (s, v) in pairs.into_iter().take(r) {
        let zero = s <= cutoff || s == T::zero();
        let v = if zero || norm(&v) == T::zero() {
            orthogonal_completion(&accepted, d)
        } else {
            v
        };
        values.push(if zero { T::zero() } else { s });
        degenerate.push(zero);
        accepted.push(v);
    }
    let mut vectors = Array2::zeros((r, d));
    for (i, v) in accepted.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            vectors[[i, j]] = x;
        }
    }
    RightSingular {
        values,
        vectors,
        degenerate,
    }
}
