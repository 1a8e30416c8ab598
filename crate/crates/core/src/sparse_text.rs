//! Sparse decomposition of directions over a text-embedding dictionary by
//! orthogonal matching pursuit.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::Serialize;

use crate::directions::Direction;
use crate::error::{Error, Result};
use crate::scalar::{dot, norm, Scalar};

/// Relative tolerance below which a newly selected atom is treated as lying
/// in the span of the already selected ones.
pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct TextDictionary<T: Scalar> {
    /// `V × d`
    pub atoms: Array2<T>,
    pub vocab: Vec<String>,
    pub normalized: bool,
}

impl<T: Scalar> TextDictionary<T> {
    /// Takes atoms as given; `normalized` is set when every row has unit
    /// norm to within 1e-6.
    pub fn new(atoms: Array2<T>, vocab: Vec<String>) -> Result<Self> {
        if atoms.nrows() == 0 {
            return Err(Error::ArgError("text dictionary is empty".into()));
        }
        if vocab.len() != atoms.nrows() {
            return Err(Error::ArgError(format!(
                "{} vocabulary entries for {} text embeddings",
                vocab.len(),
                atoms.nrows()
            )));
        }
        if atoms.iter().any(|x| !x.is_finite()) {
            return Err(Error::ArgError("text embeddings must be finite".into()));
        }
        let atoms = atoms.as_standard_layout().into_owned();
        let normalized = atoms
            .rows()
            .into_iter()
            .all(|r| (norm(r.as_slice().expect("row")).as_f64() - 1.0).abs() <= 1e-6);
        Ok(Self {
            atoms,
            vocab,
            normalized,
        })
    }

    /// Unit-normalizes every row.
    pub fn normalized(mut atoms: Array2<T>, vocab: Vec<String>) -> Result<Self> {
        for mut row in atoms.rows_mut() {
            let n = norm(&row.to_vec());
            if n == T::zero() {
                return Err(Error::ZeroVector);
            }
            row.mapv_inplace(|x| x / n);
        }
        let mut dict = Self::new(atoms, vocab)?;
        dict.normalized = true;
        Ok(dict)
    }

    pub fn len(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.atoms.ncols()
    }

    fn atom(&self, j: usize) -> &[T] {
        self.atoms.row(j).to_slice().expect("standard layout")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparseCode<T: Scalar> {
    pub indices: Vec<usize>,
    pub coefficients: Vec<T>,
    pub residual_norm: T,
    /// Residual norm after each accepted atom.
    pub residual_history: Vec<T>,
    pub warnings: Vec<String>,
}

impl<T: Scalar> SparseCode<T> {
    pub fn empty() -> Self {
        Self {
            indices: Vec::new(),
            coefficients: Vec::new(),
            residual_norm: T::zero(),
            residual_history: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

fn subtract_projection<T: Scalar>(v: &mut [T], q: &[T]) -> T {
    let p = dot(v, q);
    for (x, &y) in v.iter_mut().zip(q) {
        *x -= p * y;
    }
    p
}

/// Orthogonal matching pursuit with `m` atoms.
///
/// Least squares is solved through an incrementally grown QR factorization of
/// the selected atoms (modified Gram-Schmidt with one re-orthogonalization
/// pass). Atoms that are numerically in the span of the selection are
/// dropped with a warning and do not count towards `m`. Iteration stops
/// early once the residual vanishes.
pub fn omp<T: Scalar>(target: ArrayView1<T>, dict: &TextDictionary<T>, m: usize) -> Result<SparseCode<T>> {
    let (v, d) = dict.atoms.dim();
    if m == 0 || m > v.min(d) {
        return Err(Error::ArgError(format!(
            "sparsity m={m} must be in 1..={} (V={v}, d={d})",
            v.min(d)
        )));
    }
    if target.len() != d {
        return Err(Error::shape("omp target", &[d], target.shape()));
    }
    if !dict.normalized {
        return Err(Error::ArgError("OMP requires a unit-normalized dictionary".into()));
    }
    let y = target.to_vec();
    let y_norm = norm(&y);
    let stop = T::lit(16.0) * T::epsilon() * y_norm;
    let tol = T::lit(RANK_TOLERANCE);

    let mut residual = y.clone();
    let mut q: Vec<Vec<T>> = Vec::with_capacity(m);
    // Column j of R, length j + 1.
    let mut r_cols: Vec<Vec<T>> = Vec::with_capacity(m);
    let mut blocked = vec![false; v];
    let mut code = SparseCode::empty();

    while code.indices.len() < m {
        if norm(&residual) <= stop {
            break;
        }
        let mut best: Option<(usize, T)> = None;
        for j in (0..v).filter(|&j| !blocked[j]) {
            let c = dot(&residual, dict.atom(j)).abs();
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((j, c));
            }
        }
        let Some((j, _)) = best else {
            code.warnings.push(format!(
                "dictionary exhausted after {} of {m} atoms",
                code.indices.len()
            ));
            break;
        };
        blocked[j] = true;

        let mut u = dict.atom(j).to_vec();
        let mut col = vec![T::zero(); q.len() + 1];
        for _ in 0..2 {
            for (k, qk) in q.iter().enumerate() {
                col[k] += subtract_projection(&mut u, qk);
            }
        }
        let rho = norm(&u);
        if rho <= tol {
            code.warnings.push(format!(
                "atom {j} ({}) is linearly dependent on the selection; dropped",
                dict.vocab[j]
            ));
            continue;
        }
        u.iter_mut().for_each(|x| *x /= rho);
        col[q.len()] = rho;
        subtract_projection(&mut residual, &u);
        q.push(u);
        for qk in &q {
            subtract_projection(&mut residual, qk);
        }
        r_cols.push(col);
        code.indices.push(j);
        code.residual_history.push(norm(&residual));
    }

    // R γ = Qᵀ y by back substitution.
    let k = q.len();
    let qty: Vec<T> = q.iter().map(|qk| dot(qk, &y)).collect();
    let mut gamma = vec![T::zero(); k];
    for i in (0..k).rev() {
        let mut acc = qty[i];
        for jj in (i + 1)..k {
            acc -= r_cols[jj][i] * gamma[jj];
        }
        gamma[i] = acc / r_cols[i][i];
    }
    code.coefficients = gamma;
    let recon = decode(&code, dict)?;
    code.residual_norm = norm(&(&target - &recon).to_vec());
    Ok(code)
}

/// `Σ γ_j · atom_j`.
pub fn decode<T: Scalar>(code: &SparseCode<T>, dict: &TextDictionary<T>) -> Result<Array1<T>> {
    if code.indices.len() != code.coefficients.len() {
        return Err(Error::ArgError(format!(
            "{} indices with {} coefficients",
            code.indices.len(),
            code.coefficients.len()
        )));
    }
    let mut out = Array1::zeros(dict.dim());
    for (&j, &g) in code.indices.iter().zip(&code.coefficients) {
        if j >= dict.len() {
            return Err(Error::ArgError(format!(
                "atom index {j} out of range for {} atoms",
                dict.len()
            )));
        }
        out.scaled_add(g, &dict.atoms.row(j));
    }
    Ok(out)
}

/// One code per row of `targets`.
pub fn omp_batch<T: Scalar>(targets: ArrayView2<T>, dict: &TextDictionary<T>, m: usize) -> Result<Vec<SparseCode<T>>> {
    (0..targets.nrows())
        .into_par_iter()
        .map(|i| omp(targets.row(i), dict, m))
        .collect()
}

/// `(word, coefficient)` sorted by descending |coefficient|, ties by selection order.
pub fn top_words<T: Scalar>(code: &SparseCode<T>, dict: &TextDictionary<T>) -> Vec<(String, T)> {
    let mut order: Vec<usize> = (0..code.indices.len()).collect();
    order.sort_by(|&a, &b| crate::scalar::desc(code.coefficients[a].abs(), code.coefficients[b].abs()));
    order
        .into_iter()
        .map(|i| (dict.vocab[code.indices[i]].clone(), code.coefficients[i]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsePoint {
    pub m: usize,
    pub accuracy: f64,
}

/// For every `m`, each direction's axis is replaced by the decoding of its
/// `m`-sparse code and handed to `evaluate` (means are left untouched).
pub fn sparse_reconstruction_curve<T, F>(
    directions: &[Direction<T>],
    dict: &TextDictionary<T>,
    m_values: &[usize],
    mut evaluate: F,
) -> Result<Vec<SparsePoint>>
where
    T: Scalar,
    F: FnMut(usize, &[Array1<T>]) -> Result<f64>,
{
    m_values
        .iter()
        .map(|&m| {
            let axes: Vec<Array1<T>> = directions
                .par_iter()
                .map(|dir| omp(dir.r_hat.view(), dict, m).and_then(|c| decode(&c, dict)))
                .collect::<Result<_>>()?;
            Ok(SparsePoint {
                m,
                accuracy: evaluate(m, &axes)?,
            })
        })
        .collect()
}
