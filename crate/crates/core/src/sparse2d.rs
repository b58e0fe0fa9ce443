//! Sparse coding of 2D patches against a dictionary pair.
//!
//! [`Omp2d`] runs orthogonal matching pursuit directly on the separable
//! structure: correlations are `D1ᵀ R D2` and the restricted Gram matrix of
//! the selected dyads is read off `G1 = D1ᵀD1` and `G2 = D2ᵀD2`, so the
//! Kronecker dictionary is never formed. [`omp1d_reference`] is the plain
//! vector OMP used to cross-check it.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dictupdate::{reconstruct, DictMode, DictionaryPair};
use crate::numerics::{backward_substitute_tr, dot, forward_substitute, Mat};

/// Residuals at or below this fraction of `‖Y‖_F` count as exact; OMP
/// stops instead of selecting atoms with zero correlation.
pub const EXACT_RESIDUAL_REL: f64 = 1e-13;
/// Smallest admissible squared distance of a new dyad from the span of the
/// already selected ones (unit-norm atoms).
pub const MIN_GRAM_PIVOT: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodingError {
    #[error("dictionary/signal shape mismatch: {0}")]
    DictionaryShapeMismatch(String),
    #[error("restricted Gram matrix lost positive definiteness at step {step}")]
    CoherenceBreakdown { step: usize },
    #[error("thresholding requires an orthonormal-mode dictionary")]
    NotOrthonormalMode,
    #[error("invalid stopping rule: {0}")]
    InvalidStop(String),
    #[error("invalid sparse code: {0}")]
    InvalidCode(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Sparse `n1×n2` code, stored as triplets in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    n1: usize,
    n2: usize,
    triplets: Vec<Entry>,
}

impl SparseCode {
    pub fn new(n1: usize, n2: usize, triplets: Vec<Entry>) -> Result<Self, CodingError> {
        for (k, e) in triplets.iter().enumerate() {
            if e.row >= n1 || e.col >= n2 {
                return Err(CodingError::InvalidCode(format!("entry ({}, {}) outside {n1}x{n2}", e.row, e.col)));
            }
            if !e.value.is_finite() || e.value == 0.0 {
                return Err(CodingError::InvalidCode(format!("entry {k} has value {}", e.value)));
            }
            if triplets[..k].iter().any(|f| f.row == e.row && f.col == e.col) {
                return Err(CodingError::InvalidCode(format!("duplicate entry ({}, {})", e.row, e.col)));
            }
        }
        Ok(SparseCode { n1, n2, triplets })
    }

    pub fn empty(n1: usize, n2: usize) -> Self {
        SparseCode { n1, n2, triplets: Vec::new() }
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    pub fn triplets(&self) -> &[Entry] {
        &self.triplets
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn to_dense(&self) -> Mat {
        let mut x = Mat::zeros(self.n1, self.n2);
        for e in &self.triplets {
            x[(e.row, e.col)] = e.value;
        }
        x
    }

    /// Rewrites every value in place; the support never changes.
    pub(crate) fn map_values(&mut self, f: impl Fn(usize, usize, f64) -> f64) {
        for e in &mut self.triplets {
            e.value = f(e.row, e.col, e.value);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CodingStop {
    FixedSparsity(usize),
    /// Stop once `‖Y − D1 X D2ᵀ‖_F ≤ epsilon`, or when `s_cap` atoms are selected.
    ErrorDriven {
        epsilon: f64,
        s_cap: usize,
    },
}

impl CodingStop {
    pub fn validate(&self) -> Result<(), CodingError> {
        match *self {
            CodingStop::FixedSparsity(0) => Err(CodingError::InvalidStop("sparsity must be >= 1".into())),
            CodingStop::ErrorDriven { s_cap: 0, .. } => Err(CodingError::InvalidStop("s_cap must be >= 1".into())),
            CodingStop::ErrorDriven { epsilon, .. } if !(epsilon.is_finite() && epsilon >= 0.0) => {
                Err(CodingError::InvalidStop(format!("epsilon must be finite and >= 0, got {epsilon}")))
            }
            _ => Ok(()),
        }
    }

    pub fn cap(&self) -> usize {
        match *self {
            CodingStop::FixedSparsity(s) => s,
            CodingStop::ErrorDriven { s_cap, .. } => s_cap,
        }
    }

    pub fn epsilon(&self) -> Option<f64> {
        match *self {
            CodingStop::FixedSparsity(_) => None,
            CodingStop::ErrorDriven { epsilon, .. } => Some(epsilon),
        }
    }
}

fn check_signal(y: &Mat, dict: &DictionaryPair) -> Result<(), CodingError> {
    if y.shape() != (dict.m(), dict.m()) {
        return Err(CodingError::DictionaryShapeMismatch(format!(
            "signal is {}x{}, dictionaries have {} rows",
            y.rows(),
            y.cols(),
            dict.m()
        )));
    }
    Ok(())
}

/// `D1ᵀ Y D2`.
fn project(d1: &Mat, y: &Mat, d2: &Mat) -> Mat {
    d1.tr_matmul(y).matmul(d2)
}

/// 2D-OMP coder bound to one dictionary pair; Gram matrices are formed once.
#[derive(Debug, Clone)]
pub struct Omp2d<'a> {
    dict: &'a DictionaryPair,
    g1: Mat,
    g2: Mat,
}

impl<'a> Omp2d<'a> {
    pub fn new(dict: &'a DictionaryPair) -> Self {
        let g1 = dict.d1().tr_matmul(dict.d1());
        let g2 = dict.d2().tr_matmul(dict.d2());
        Omp2d { dict, g1, g2 }
    }

    pub fn code(&self, y: &Mat, stop: CodingStop) -> Result<SparseCode, CodingError> {
        self.code_traced(y, stop).map(|(code, _)| code)
    }

    /// Codes `y` and also returns `‖Residual‖_F` before the first step and
    /// after every step.
    pub fn code_traced(&self, y: &Mat, stop: CodingStop) -> Result<(SparseCode, Vec<f64>), CodingError> {
        check_signal(y, self.dict)?;
        stop.validate()?;
        let (d1, d2) = (self.dict.d1(), self.dict.d2());
        let (n1, n2) = (d1.cols(), d2.cols());
        let cap = stop.cap().min(n1 * n2);
        let y_norm = y.frobenius();
        let exact = EXACT_RESIDUAL_REL * y_norm;

        let initial = project(d1, y, d2);
        let mut selected = vec![false; n1 * n2];
        let mut support: Vec<(usize, usize)> = Vec::with_capacity(cap);
        let mut chol = Mat::zeros(cap.max(1), cap.max(1));
        let mut coeffs: Vec<f64> = Vec::new();
        let mut residual = y.clone();
        let mut r_norm = y_norm;
        let mut trace = vec![r_norm];

        loop {
            if support.len() >= cap || r_norm <= exact {
                break;
            }
            if let Some(eps) = stop.epsilon() {
                if r_norm <= eps {
                    break;
                }
            }
            let corr = if support.is_empty() { initial.clone() } else { project(d1, &residual, d2) };
            let mut best: Option<(usize, usize)> = None;
            let mut best_abs = 0.0;
            for i in 0..n1 {
                for j in 0..n2 {
                    if selected[i * n2 + j] {
                        continue;
                    }
                    let c = corr[(i, j)].abs();
                    if c > best_abs {
                        best_abs = c;
                        best = Some((i, j));
                    }
                }
            }
            let Some((bi, bj)) = best else { break };
            let step = support.len();

            // append one row to the Cholesky factor of the restricted Gram
            let mut w: Vec<f64> = support.iter().map(|&(a, b)| self.g1[(a, bi)] * self.g2[(b, bj)]).collect();
            forward_substitute(&chol, &mut w);
            let pivot = self.g1[(bi, bi)] * self.g2[(bj, bj)] - dot(&w, &w);
            if pivot.is_nan() || pivot <= MIN_GRAM_PIVOT {
                return Err(CodingError::CoherenceBreakdown { step });
            }
            for (k, wk) in w.iter().enumerate() {
                chol[(step, k)] = *wk;
            }
            chol[(step, step)] = pivot.sqrt();
            selected[bi * n2 + bj] = true;
            support.push((bi, bj));

            coeffs = support.iter().map(|&(a, b)| initial[(a, b)]).collect();
            forward_substitute(&chol, &mut coeffs);
            backward_substitute_tr(&chol, &mut coeffs);

            let code = SparseCode {
                n1,
                n2,
                triplets: support.iter().zip(&coeffs).map(|(&(row, col), &value)| Entry { row, col, value }).collect(),
            };
            residual = y.sub(&reconstruct(d1, d2, &code));
            r_norm = residual.frobenius();
            trace.push(r_norm);
        }

        let triplets = support
            .into_iter()
            .zip(coeffs)
            .filter(|(_, v)| *v != 0.0)
            .map(|((row, col), value)| Entry { row, col, value })
            .collect();
        Ok((SparseCode { n1, n2, triplets }, trace))
    }
}

pub fn omp2d(y: &Mat, dict: &DictionaryPair, stop: CodingStop) -> Result<SparseCode, CodingError> {
    Omp2d::new(dict).code(y, stop)
}

/// Sparse vector in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    pub len: usize,
    pub entries: Vec<(usize, f64)>,
}

/// Plain OMP on an explicit dictionary `D` (columns unit norm).
///
/// Least squares on the support is solved from scratch each step with an SVD,
/// so it shares no code path with [`Omp2d`].
pub fn omp1d_reference(y: &[f64], d: &Mat, stop: CodingStop) -> Result<SparseVector, CodingError> {
    stop.validate()?;
    if y.len() != d.rows() {
        return Err(CodingError::DictionaryShapeMismatch(format!(
            "signal length {} vs dictionary rows {}",
            y.len(),
            d.rows()
        )));
    }
    let dn = d.to_nalgebra();
    let yv = DVector::from_column_slice(y);
    let y_norm = yv.norm();
    let cap = stop.cap().min(d.cols());
    let mut support: Vec<usize> = Vec::new();
    let mut coeffs = DVector::<f64>::zeros(0);
    let mut residual = yv.clone();
    loop {
        let r_norm = residual.norm();
        if support.len() >= cap || r_norm <= EXACT_RESIDUAL_REL * y_norm {
            break;
        }
        if let Some(eps) = stop.epsilon() {
            if r_norm <= eps {
                break;
            }
        }
        let corr = dn.transpose() * &residual;
        let mut best = None;
        let mut best_abs = 0.0;
        for (k, c) in corr.iter().enumerate() {
            if !support.contains(&k) && c.abs() > best_abs {
                best_abs = c.abs();
                best = Some(k);
            }
        }
        let Some(k) = best else { break };
        support.push(k);
        let sub = DMatrix::from_fn(dn.nrows(), support.len(), |r, c| dn[(r, support[c])]);
        let svd = sub.clone().svd(true, true);
        let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
        if smin * smin <= MIN_GRAM_PIVOT {
            return Err(CodingError::CoherenceBreakdown { step: support.len() - 1 });
        }
        coeffs = svd.solve(&yv, 0.0).map_err(|e| CodingError::InvalidStop(e.to_string()))?;
        residual = &yv - &sub * &coeffs;
    }
    Ok(SparseVector {
        len: d.cols(),
        entries: support.into_iter().zip(coeffs.iter().cloned()).filter(|(_, v)| *v != 0.0).collect(),
    })
}

/// `A = D1ᵀ Y D2` entries ordered by decreasing magnitude, ties broken by
/// smaller row then smaller column. Zero entries are dropped.
fn ranked_coefficients(dict: &DictionaryPair, y: &Mat) -> Vec<Entry> {
    let a = project(dict.d1(), y, dict.d2());
    let mut entries: Vec<Entry> = (0..a.rows())
        .flat_map(|i| (0..a.cols()).map(move |j| (i, j)))
        .map(|(row, col)| Entry { row, col, value: a[(row, col)] })
        .filter(|e| e.value != 0.0)
        .collect();
    entries.sort_by(|x, y| y.value.abs().total_cmp(&x.value.abs()).then(x.row.cmp(&y.row)).then(x.col.cmp(&y.col)));
    entries
}

fn require_orthonormal(dict: &DictionaryPair) -> Result<(), CodingError> {
    if dict.mode() != DictMode::Orthonormal {
        return Err(CodingError::NotOrthonormalMode);
    }
    Ok(())
}

/// Keeps the `s` largest-magnitude entries of `D1ᵀ Y D2`; the optimal
/// `s`-sparse code when both dictionaries are orthonormal.
pub fn threshold_code(dict: &DictionaryPair, y: &Mat, s: usize) -> Result<SparseCode, CodingError> {
    threshold_code_with(dict, y, CodingStop::FixedSparsity(s))
}

/// Thresholding under either stopping rule. For orthonormal dictionaries
/// this selects exactly what OMP would: the residual after keeping `k`
/// entries is the energy of the discarded ones.
pub fn threshold_code_with(dict: &DictionaryPair, y: &Mat, stop: CodingStop) -> Result<SparseCode, CodingError> {
    require_orthonormal(dict)?;
    check_signal(y, dict)?;
    stop.validate()?;
    let mut ranked = ranked_coefficients(dict, y);
    let keep = match stop {
        CodingStop::FixedSparsity(s) => s.min(ranked.len()),
        CodingStop::ErrorDriven { epsilon, s_cap } => {
            // tail[k] = energy left after keeping the first k entries
            let mut tail = vec![0.0; ranked.len() + 1];
            for k in (0..ranked.len()).rev() {
                tail[k] = tail[k + 1] + ranked[k].value * ranked[k].value;
            }
            let eps_sq = epsilon * epsilon;
            let cap = s_cap.min(ranked.len());
            (0..=cap).find(|&k| tail[k] <= eps_sq).unwrap_or(cap)
        }
    };
    ranked.truncate(keep);
    Ok(SparseCode { n1: dict.n1(), n2: dict.n2(), triplets: ranked })
}

/// Picks thresholding for orthonormal pairs and 2D-OMP otherwise.
#[derive(Debug, Clone)]
pub enum SparseCoder<'a> {
    Threshold(&'a DictionaryPair),
    Omp(Omp2d<'a>),
}

impl<'a> SparseCoder<'a> {
    pub fn for_dict(dict: &'a DictionaryPair) -> Self {
        match dict.mode() {
            DictMode::Orthonormal => SparseCoder::Threshold(dict),
            DictMode::General => SparseCoder::Omp(Omp2d::new(dict)),
        }
    }

    pub fn code(&self, y: &Mat, stop: CodingStop) -> Result<SparseCode, CodingError> {
        match self {
            SparseCoder::Threshold(dict) => threshold_code_with(dict, y, stop),
            SparseCoder::Omp(omp) => omp.code(y, stop),
        }
    }
}
