//! Dictionary pairs and their closed-form updates.
//!
//! With the codes fixed, the left and right dictionaries each solve a linear
//! least-squares problem (general mode) or an orthogonal Procrustes problem
//! (orthonormal mode). Both only need a handful of small accumulated
//! matrices, which is what [`PartialSums`] carries from workers to the master.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{chol_spd_solve_with, dot, polar_factor, Mat, NumericsError};
use crate::sparse2d::SparseCode;

/// Column norms of general-mode dictionaries must be 1 within this.
pub const UNIT_NORM_TOL: f64 = 1e-12;
/// `DᵀD = I` within this for orthonormal-mode dictionaries.
pub const ORTHONORMAL_TOL: f64 = 1e-10;
/// Pre-normalization column norms below this count as dead atoms.
pub const DEAD_COLUMN_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UpdateError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{side:?} dictionary column {index} has zero norm and no replacement atom")]
    ZeroColumn { side: Side, index: usize },
    #[error("invalid dictionary: {0}")]
    InvalidDictionary(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DictMode {
    General,
    #[serde(alias = "ortho")]
    Orthonormal,
}

impl DictMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DictMode::General => "general",
            DictMode::Orthonormal => "orthonormal",
        }
    }
}

impl std::str::FromStr for DictMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "general" => Ok(DictMode::General),
            "ortho" | "orthonormal" => Ok(DictMode::Orthonormal),
            other => Err(format!("unknown mode '{other}' (expected general or ortho)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

/// Left dictionary `D1` (m×n1) and right dictionary `D2` (m×n2); a patch is
/// modelled as `D1 X D2ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryPair {
    mode: DictMode,
    d1: Mat,
    d2: Mat,
}

impl DictionaryPair {
    /// Validates the mode invariants: unit columns (general) or
    /// square orthogonal factors (orthonormal).
    pub fn new(mode: DictMode, d1: Mat, d2: Mat) -> Result<Self, UpdateError> {
        if d1.rows() != d2.rows() {
            return Err(UpdateError::ShapeMismatch(format!("D1 has {} rows but D2 has {}", d1.rows(), d2.rows())));
        }
        if !d1.is_finite() || !d2.is_finite() {
            return Err(NumericsError::NonFinite.into());
        }
        for (name, d) in [("D1", &d1), ("D2", &d2)] {
            match mode {
                DictMode::General => {
                    for j in 0..d.cols() {
                        let norm = d.col_norm(j);
                        if (norm - 1.0).abs() > UNIT_NORM_TOL {
                            return Err(UpdateError::InvalidDictionary(format!("{name} column {j} has norm {norm}")));
                        }
                    }
                }
                DictMode::Orthonormal => {
                    if !d.is_square() {
                        return Err(UpdateError::InvalidDictionary(format!(
                            "{name} must be square in orthonormal mode, got {}x{}",
                            d.rows(),
                            d.cols()
                        )));
                    }
                    let err = d.tr_matmul(d).max_abs_diff(&Mat::identity(d.cols()));
                    if err > ORTHONORMAL_TOL {
                        return Err(UpdateError::InvalidDictionary(format!(
                            "{name} deviates from orthonormality by {err:e}"
                        )));
                    }
                }
            }
        }
        Ok(DictionaryPair { mode, d1, d2 })
    }

    pub fn mode(&self) -> DictMode {
        self.mode
    }

    pub fn d1(&self) -> &Mat {
        &self.d1
    }

    pub fn d2(&self) -> &Mat {
        &self.d2
    }

    /// Patch side length.
    pub fn m(&self) -> usize {
        self.d1.rows()
    }

    pub fn n1(&self) -> usize {
        self.d1.cols()
    }

    pub fn n2(&self) -> usize {
        self.d2.cols()
    }

    pub fn with_left(&self, d1: Mat) -> Result<Self, UpdateError> {
        DictionaryPair::new(self.mode, d1, self.d2.clone())
    }

    pub fn with_right(&self, d2: Mat) -> Result<Self, UpdateError> {
        DictionaryPair::new(self.mode, self.d1.clone(), d2)
    }

    /// `D1 X D2ᵀ`.
    pub fn reconstruct(&self, code: &SparseCode) -> Mat {
        reconstruct(&self.d1, &self.d2, code)
    }
}

/// `D1 X D2ᵀ` as a sum of dyads, for arbitrary (not necessarily normalized) factors.
pub fn reconstruct(d1: &Mat, d2: &Mat, code: &SparseCode) -> Mat {
    let m = d1.rows();
    let mut out = Mat::zeros(m, d2.rows());
    for e in code.triplets() {
        let a = d1.col(e.row);
        let b = d2.col(e.col);
        for (c, bc) in b.iter().enumerate() {
            let scale = e.value * bc;
            if scale == 0.0 {
                continue;
            }
            for (o, av) in out.col_mut(c).iter_mut().zip(a) {
                *o += av * scale;
            }
        }
    }
    out
}

/// Diagonal `W` such that `D_unnormalized · W` has unit columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormScaling {
    pub side: Side,
    pub diag: Vec<f64>,
}

impl NormScaling {
    /// Compensates a code so the reconstruction with the normalized
    /// dictionary equals the one with the unnormalized minimizer:
    /// `X ← W1⁻¹ X` (left) or `X ← X W2⁻¹` (right). The support is unchanged.
    pub fn compensate(&self, code: &mut SparseCode) {
        match self.side {
            Side::Left => code.map_values(|i, _, v| v / self.diag[i]),
            Side::Right => code.map_values(|_, j, v| v / self.diag[j]),
        }
    }
}

/// Body of one worker's accumulation for a half-iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum PartialBody {
    /// `P = Σ Tₖ Tₖᵀ` (n1×n1), `R = Σ Tₖ Yₖᵀ` (n1×m) with `Tₖ = Xₖ D2ᵀ`.
    Left { p: Mat, r: Mat },
    /// `M = Σ Zₖᵀ Zₖ` (n2×n2), `N = Σ Zₖᵀ Yₖ` (n2×m) with `Zₖ = D1 Xₖ`.
    Right { m: Mat, n: Mat },
    /// Orthonormal mode, `S1 = Σ Yₖ D2 Xₖᵀ` (m×m).
    LeftCross { s1: Mat },
    /// Orthonormal mode, `S2 = Σ Yₖᵀ D1 Xₖ` (m×m).
    RightCross { s2: Mat },
}

impl PartialBody {
    pub fn side(&self) -> Side {
        match self {
            PartialBody::Left { .. } | PartialBody::LeftCross { .. } => Side::Left,
            PartialBody::Right { .. } | PartialBody::RightCross { .. } => Side::Right,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            PartialBody::Left { .. } => "left",
            PartialBody::Right { .. } => "right",
            PartialBody::LeftCross { .. } => "left-cross",
            PartialBody::RightCross { .. } => "right-cross",
        }
    }

    pub fn matrices(&self) -> Vec<&Mat> {
        match self {
            PartialBody::Left { p, r } => vec![p, r],
            PartialBody::Right { m, n } => vec![m, n],
            PartialBody::LeftCross { s1 } => vec![s1],
            PartialBody::RightCross { s2 } => vec![s2],
        }
    }

    fn matrices_mut(&mut self) -> Vec<&mut Mat> {
        match self {
            PartialBody::Left { p, r } => vec![p, r],
            PartialBody::Right { m, n } => vec![m, n],
            PartialBody::LeftCross { s1 } => vec![s1],
            PartialBody::RightCross { s2 } => vec![s2],
        }
    }

    pub(crate) fn same_layout(&self, other: &PartialBody) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
            && self.matrices().iter().zip(other.matrices()).all(|(a, b)| a.shape() == b.shape())
    }

    /// Element-wise `self += other`; layouts must agree.
    pub(crate) fn add_assign(&mut self, other: &PartialBody) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.matrices_mut().into_iter().zip(other.matrices()) {
            a.add_assign(b);
        }
    }
}

/// One worker's accumulated matrices for a half-iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialSums {
    pub node_id: usize,
    pub sample_count: u64,
    pub body: PartialBody,
}

fn check_code(code: &SparseCode, n1: usize, n2: usize) -> Result<(), UpdateError> {
    if code.n1() != n1 || code.n2() != n2 {
        return Err(UpdateError::ShapeMismatch(format!(
            "code is {}x{}, dictionaries expect {n1}x{n2}",
            code.n1(),
            code.n2()
        )));
    }
    Ok(())
}

fn check_patch(y: &Mat, m: usize) -> Result<(), UpdateError> {
    if y.shape() != (m, m) {
        return Err(UpdateError::ShapeMismatch(format!("patch is {:?}, expected {m}x{m}", y.shape())));
    }
    Ok(())
}

/// Rows of `Tₖ = Xₖ D2ᵀ` (or columns of `Zₖ = D1 Xₖ`): for each distinct
/// index on the `key` axis, the combination of atoms of `dict` weighted by the
/// code values. Returned in first-appearance order.
fn combine_atoms(code: &SparseCode, dict: &Mat, key: Side) -> Vec<(usize, Vec<f64>)> {
    let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
    for e in code.triplets() {
        let (k, atom) = match key {
            Side::Left => (e.row, e.col),
            Side::Right => (e.col, e.row),
        };
        let slot = match out.iter().position(|(idx, _)| *idx == k) {
            Some(p) => p,
            None => {
                out.push((k, vec![0.0; dict.rows()]));
                out.len() - 1
            }
        };
        for (o, d) in out[slot].1.iter_mut().zip(dict.col(atom)) {
            *o += e.value * d;
        }
    }
    out
}

/// `Σ Xₖ G Xₖᵀ` (left, `G = G2` indexes columns) or `Σ Xₖᵀ G Xₖ` (right,
/// `G = G1` indexes rows), accumulated from code triplet pairs.
fn add_code_gram(acc: &mut Mat, code: &SparseCode, gram: &Mat, side: Side) {
    let t = code.triplets();
    for e in t {
        for f in t {
            let (out_r, out_c, g) = match side {
                Side::Left => (e.row, f.row, gram[(e.col, f.col)]),
                Side::Right => (e.col, f.col, gram[(e.row, f.row)]),
            };
            acc[(out_r, out_c)] += e.value * f.value * g;
        }
    }
}

/// Left-step partial sums `P = Σ Xₖ G2 Xₖᵀ`, `R = Σ Tₖ Yₖᵀ`, with
/// `G2 = D2ᵀ D2` formed once. Samples are summed in iteration order.
pub fn accumulate_left<'a>(
    node_id: usize,
    samples: impl IntoIterator<Item = (&'a Mat, &'a SparseCode)>,
    d2: &Mat,
    n1: usize,
) -> Result<PartialSums, UpdateError> {
    let m = d2.rows();
    let n2 = d2.cols();
    let g2 = d2.tr_matmul(d2);
    let mut p = Mat::zeros(n1, n1);
    let mut r = Mat::zeros(n1, m);
    let mut count = 0u64;
    for (y, x) in samples {
        check_patch(y, m)?;
        check_code(x, n1, n2)?;
        add_code_gram(&mut p, x, &g2, Side::Left);
        for (i, t_row) in combine_atoms(x, d2, Side::Left) {
            // R[i, c] += Σ_k T[i, k] Y[c, k] = (Y t)[c]
            for (k, tk) in t_row.iter().enumerate() {
                if *tk == 0.0 {
                    continue;
                }
                for (c, yv) in y.col(k).iter().enumerate() {
                    r[(i, c)] += yv * tk;
                }
            }
        }
        count += 1;
    }
    Ok(PartialSums { node_id, sample_count: count, body: PartialBody::Left { p, r } })
}

/// Right-step partial sums `M = Σ Xₖᵀ G1 Xₖ`, `N = Σ Zₖᵀ Yₖ`, with
/// `G1 = D1ᵀ D1` formed once.
pub fn accumulate_right<'a>(
    node_id: usize,
    samples: impl IntoIterator<Item = (&'a Mat, &'a SparseCode)>,
    d1: &Mat,
    n2: usize,
) -> Result<PartialSums, UpdateError> {
    let m = d1.rows();
    let n1 = d1.cols();
    let g1 = d1.tr_matmul(d1);
    let mut mm = Mat::zeros(n2, n2);
    let mut nn = Mat::zeros(n2, m);
    let mut count = 0u64;
    for (y, x) in samples {
        check_patch(y, m)?;
        check_code(x, n1, n2)?;
        add_code_gram(&mut mm, x, &g1, Side::Right);
        for (j, z_col) in combine_atoms(x, d1, Side::Right) {
            for c in 0..m {
                nn[(j, c)] += dot(&z_col, y.col(c));
            }
        }
        count += 1;
    }
    Ok(PartialSums { node_id, sample_count: count, body: PartialBody::Right { m: mm, n: nn } })
}

/// Orthonormal-mode left cross matrix `S1 = Σ Yₖ D2 Xₖᵀ = Σ Yₖ Tₖᵀ`.
pub fn accumulate_left_cross<'a>(
    node_id: usize,
    samples: impl IntoIterator<Item = (&'a Mat, &'a SparseCode)>,
    d2: &Mat,
    n1: usize,
) -> Result<PartialSums, UpdateError> {
    let m = d2.rows();
    let n2 = d2.cols();
    let mut s1 = Mat::zeros(m, n1);
    let mut count = 0u64;
    for (y, x) in samples {
        check_patch(y, m)?;
        check_code(x, n1, n2)?;
        for (i, t_row) in combine_atoms(x, d2, Side::Left) {
            for (k, tk) in t_row.iter().enumerate() {
                if *tk == 0.0 {
                    continue;
                }
                for (o, yv) in s1.col_mut(i).iter_mut().zip(y.col(k)) {
                    *o += yv * tk;
                }
            }
        }
        count += 1;
    }
    Ok(PartialSums { node_id, sample_count: count, body: PartialBody::LeftCross { s1 } })
}

/// Orthonormal-mode right cross matrix `S2 = Σ Yₖᵀ D1 Xₖ = Σ Yₖᵀ Zₖ`.
pub fn accumulate_right_cross<'a>(
    node_id: usize,
    samples: impl IntoIterator<Item = (&'a Mat, &'a SparseCode)>,
    d1: &Mat,
    n2: usize,
) -> Result<PartialSums, UpdateError> {
    let m = d1.rows();
    let n1 = d1.cols();
    let mut s2 = Mat::zeros(m, n2);
    let mut count = 0u64;
    for (y, x) in samples {
        check_patch(y, m)?;
        check_code(x, n1, n2)?;
        for (j, z_col) in combine_atoms(x, d1, Side::Right) {
            for c in 0..m {
                s2[(c, j)] += dot(y.col(c), &z_col);
            }
        }
        count += 1;
    }
    Ok(PartialSums { node_id, sample_count: count, body: PartialBody::RightCross { s2 } })
}

/// Result of a general-mode least-squares update before dead-atom handling.
#[derive(Debug, Clone)]
pub struct GeneralUpdate {
    /// Normalized atoms; dead columns are left at zero until replaced.
    pub atoms: Mat,
    pub scaling: NormScaling,
    /// Columns whose unnormalized norm fell below [`DEAD_COLUMN_NORM`].
    pub dead: Vec<usize>,
}

impl GeneralUpdate {
    /// Fills dead columns with the given vectors (normalized here), in order.
    pub fn replace_dead(&mut self, replacements: &[Vec<f64>]) {
        let dead = std::mem::take(&mut self.dead);
        let mut remaining = Vec::new();
        for (k, &col) in dead.iter().enumerate() {
            let Some(v) = replacements.get(k) else {
                remaining.push(col);
                continue;
            };
            let norm = dot(v, v).sqrt();
            if v.len() != self.atoms.rows() || norm.is_nan() || norm <= DEAD_COLUMN_NORM {
                remaining.push(col);
                continue;
            }
            for (o, x) in self.atoms.col_mut(col).iter_mut().zip(v) {
                *o = x / norm;
            }
            self.scaling.diag[col] = 1.0;
        }
        self.dead = remaining;
    }

    pub fn finish(self) -> Result<(Mat, NormScaling), UpdateError> {
        if let Some(&index) = self.dead.first() {
            return Err(UpdateError::ZeroColumn { side: self.scaling.side, index });
        }
        Ok((self.atoms, self.scaling))
    }
}

fn normalize_columns(mut unnorm: Mat, side: Side) -> GeneralUpdate {
    let mut diag = Vec::with_capacity(unnorm.cols());
    let mut dead = Vec::new();
    for j in 0..unnorm.cols() {
        let norm = unnorm.col_norm(j);
        if norm < DEAD_COLUMN_NORM {
            unnorm.col_mut(j).iter_mut().for_each(|v| *v = 0.0);
            diag.push(1.0);
            dead.push(j);
        } else {
            unnorm.col_mut(j).iter_mut().for_each(|v| *v /= norm);
            diag.push(1.0 / norm);
        }
    }
    GeneralUpdate { atoms: unnorm, scaling: NormScaling { side, diag }, dead }
}

/// Least-squares right dictionary from `M` (n2×n2) and `N` (n2×m):
/// `D2ᵀ = M⁻¹ N`, then unit-normalized columns.
pub fn update_right_general(m: &Mat, n: &Mat) -> Result<GeneralUpdate, UpdateError> {
    update_right_general_with(m, n, true)
}

/// [`update_right_general`] with the ridge retry optional.
pub fn update_right_general_with(m: &Mat, n: &Mat, ridge: bool) -> Result<GeneralUpdate, UpdateError> {
    if !m.is_square() || n.rows() != m.rows() {
        return Err(UpdateError::ShapeMismatch(format!("M {:?} / N {:?}", m.shape(), n.shape())));
    }
    let d2t = chol_spd_solve_with(m, n, ridge)?;
    Ok(normalize_columns(d2t.transpose(), Side::Right))
}

/// Least-squares left dictionary from `P` (n1×n1) and `R = Σ Tₖ Yₖᵀ` (n1×m):
/// `D1 = (P⁻¹ R)ᵀ`, then unit-normalized columns.
pub fn update_left_general(p: &Mat, r: &Mat) -> Result<GeneralUpdate, UpdateError> {
    update_left_general_with(p, r, true)
}

/// [`update_left_general`] with the ridge retry optional.
pub fn update_left_general_with(p: &Mat, r: &Mat, ridge: bool) -> Result<GeneralUpdate, UpdateError> {
    if !p.is_square() || r.rows() != p.rows() {
        return Err(UpdateError::ShapeMismatch(format!("P {:?} / R {:?}", p.shape(), r.shape())));
    }
    let x = chol_spd_solve_with(p, r, ridge)?;
    Ok(normalize_columns(x.transpose(), Side::Left))
}

/// Procrustes solution for the left dictionary: polar factor of `S1`.
pub fn update_left_ortho(s1: &Mat) -> Result<Mat, UpdateError> {
    Ok(polar_factor(s1)?.q)
}

/// Procrustes solution for the right dictionary: polar factor of `S2`.
pub fn update_right_ortho(s2: &Mat) -> Result<Mat, UpdateError> {
    Ok(polar_factor(s2)?.q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse2d::Entry;

    fn identity_code(n: usize) -> SparseCode {
        SparseCode::new(n, n, (0..n).map(|i| Entry { row: i, col: i, value: 1.0 }).collect()).unwrap()
    }

    #[test]
    fn empty_shard_gives_zeros() {
        let d = Mat::identity(3);
        let ps = accumulate_right(0, std::iter::empty(), &d, 4).unwrap();
        assert_eq!(ps.sample_count, 0);
        match ps.body {
            PartialBody::Right { m, n } => {
                assert_eq!(m, Mat::zeros(4, 4));
                assert_eq!(n, Mat::zeros(4, 3));
            }
            _ => unreachable!(),
        }
        let ps = accumulate_left(0, std::iter::empty(), &d, 5).unwrap();
        match ps.body {
            PartialBody::Left { p, r } => {
                assert_eq!(p, Mat::zeros(5, 5));
                assert_eq!(r, Mat::zeros(5, 3));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn identity_sample_partials() {
        let y = Mat::from_rows(&[&[1.0, 2.0, 0.5], &[-1.0, 0.0, 3.0], &[4.0, 1.0, 1.0]]);
        let x = identity_code(3);
        let d = Mat::identity(3);
        match accumulate_right(0, [(&y, &x)], &d, 3).unwrap().body {
            PartialBody::Right { m, n } => {
                assert!(m.max_abs_diff(&Mat::identity(3)) < 1e-15);
                assert!(n.max_abs_diff(&y) < 1e-15);
            }
            _ => unreachable!(),
        }
        match accumulate_left(0, [(&y, &x)], &d, 3).unwrap().body {
            PartialBody::Left { p, r } => {
                assert!(p.max_abs_diff(&Mat::identity(3)) < 1e-15);
                assert!(r.max_abs_diff(&y.transpose()) < 1e-15);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn identity_case_updates_normalize_data() {
        let y = Mat::from_rows(&[&[1.0, 2.0], &[3.0, -4.0]]);
        let x = identity_code(2);
        let d = Mat::identity(2);
        let PartialBody::Right { m, n } = accumulate_right(0, [(&y, &x)], &d, 2).unwrap().body else { unreachable!() };
        let (d2, w2) = update_right_general(&m, &n).unwrap().finish().unwrap();
        let yt = y.transpose();
        for j in 0..2 {
            let norm = yt.col_norm(j);
            for i in 0..2 {
                assert!((d2[(i, j)] - yt[(i, j)] / norm).abs() < 1e-14);
            }
            assert!((w2.diag[j] - 1.0 / norm).abs() < 1e-14);
        }
        let PartialBody::Left { p, r } = accumulate_left(0, [(&y, &x)], &d, 2).unwrap().body else { unreachable!() };
        let (d1, _) = update_left_general(&p, &r).unwrap().finish().unwrap();
        for j in 0..2 {
            let norm = y.col_norm(j);
            for i in 0..2 {
                assert!((d1[(i, j)] - y[(i, j)] / norm).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dead_column_reported_then_replaced() {
        // atom 1 never used: P has a zero row/column
        let y = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let x = SparseCode::new(2, 2, vec![Entry { row: 0, col: 0, value: 1.0 }]).unwrap();
        let d2 = Mat::identity(2);
        let PartialBody::Left { p, r } = accumulate_left(0, [(&y, &x)], &d2, 2).unwrap().body else { unreachable!() };
        let upd = update_left_general(&p, &r).unwrap();
        assert_eq!(upd.dead, vec![1]);
        assert!(matches!(upd.clone().finish(), Err(UpdateError::ZeroColumn { side: Side::Left, index: 1 })));
        let mut upd = upd;
        upd.replace_dead(&[vec![0.0, 3.0]]);
        let (d1, w) = upd.finish().unwrap();
        assert_eq!(d1.col(1), &[0.0, 1.0]);
        assert_eq!(w.diag[1], 1.0);
    }

    #[test]
    fn ortho_updates_identity_and_rotation() {
        assert!(update_right_ortho(&Mat::identity(3)).unwrap().max_abs_diff(&Mat::identity(3)) < 1e-12);
        let (c, s) = (1.1_f64.cos(), 1.1_f64.sin());
        let rot = Mat::from_rows(&[&[c, -s], &[s, c]]);
        assert!(update_left_ortho(&rot).unwrap().max_abs_diff(&rot) < 1e-12);
    }

    #[test]
    fn dictionary_validation() {
        let bad = Mat::from_rows(&[&[2.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(
            DictionaryPair::new(DictMode::General, bad, Mat::identity(2)),
            Err(UpdateError::InvalidDictionary(_))
        ));
        let rect = Mat::from_rows(&[&[1.0, 0.0, 0.6], &[0.0, 1.0, 0.8]]);
        assert!(DictionaryPair::new(DictMode::General, rect.clone(), Mat::identity(2)).is_ok());
        assert!(DictionaryPair::new(DictMode::Orthonormal, rect, Mat::identity(2)).is_err());
        assert!(matches!(
            DictionaryPair::new(DictMode::General, Mat::identity(2), Mat::identity(3)),
            Err(UpdateError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn compensation_preserves_reconstruction() {
        let d1u = Mat::from_rows(&[&[2.0, 0.0], &[0.0, 3.0]]);
        let upd = normalize_columns(d1u.clone(), Side::Left);
        let mut x =
            SparseCode::new(2, 2, vec![Entry { row: 0, col: 1, value: 1.5 }, Entry { row: 1, col: 0, value: -2.0 }])
                .unwrap();
        let before = reconstruct(&d1u, &Mat::identity(2), &x);
        upd.scaling.compensate(&mut x);
        let after = reconstruct(&upd.atoms, &Mat::identity(2), &x);
        assert!(before.max_abs_diff(&after) < 1e-14);
    }
}
