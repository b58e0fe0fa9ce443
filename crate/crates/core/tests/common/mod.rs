#![allow(dead_code)]

use sepdl_core::numerics::Mat;
use sepdl_core::rng::{gaussian_mat, Rng};

/// Random orthogonal matrix by classical Gram–Schmidt on a Gaussian matrix.
pub fn random_orthogonal(rng: &mut Rng, n: usize) -> Mat {
    loop {
        let g = gaussian_mat(rng, n, n);
        let mut q = Mat::zeros(n, n);
        let mut ok = true;
        for j in 0..n {
            let mut v: Vec<f64> = g.col(j).to_vec();
            for k in 0..j {
                let proj: f64 = q.col(k).iter().zip(g.col(j)).map(|(a, b)| a * b).sum();
                for (vi, qk) in v.iter_mut().zip(q.col(k)) {
                    *vi -= proj * qk;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for (o, vi) in q.col_mut(j).iter_mut().zip(&v) {
                *o = vi / norm;
            }
        }
        if ok {
            return q;
        }
    }
}

/// Textbook triple loop.
pub fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
    Mat::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum())
}

pub fn assert_close(a: &Mat, b: &Mat, tol: f64, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape");
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "{what}: max abs diff {d:e} > {tol:e}");
}
