//! Randomized truncated SVD (Halko-style range finder): Gaussian sketch,
//! orthonormalization with a couple of power iterations, projection, small
//! exact SVD, truncation to the requested rank.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RsvdError {
    #[error("rank too large: k + p = {0} exceeds min(rows, cols) = {1}")]
    RankTooLarge(usize, usize),
}

/// Bytes needed to hold a dense snapshot matrix of f64 entries.
pub fn estimate_snapshot_memory(dofs: u64, steps: u64) -> u64 {
    dofs * steps * 8
}

pub struct Rsvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl Rsvd {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.s) * self.v.transpose()
    }
}

/// Randomized truncated SVD of `a` at rank `k` with oversampling `p`,
/// deterministic for a fixed seed. Returns U (rows x k, orthonormal
/// columns), singular values (non-increasing), V (cols x k, orthonormal
/// columns).
pub fn rsvd(a: &DMatrix<f64>, k: usize, p: usize, seed: u64) -> Result<Rsvd, RsvdError> {
    let (m, n) = a.shape();
    let l = k + p;
    if l > m.min(n) || k == 0 {
        return Err(RsvdError::RankTooLarge(l, m.min(n)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sketch = DMatrix::from_fn(n, l, |_, _| rng.sample::<f64, _>(StandardNormal));

    // Range finder with two power iterations for spectra that decay slowly.
    let mut q = orthonormalize(a * &sketch);
    for _ in 0..2 {
        let z = orthonormalize(a.transpose() * &q);
        q = orthonormalize(a * &z);
    }

    // Project to the small subspace and take its exact SVD.
    let b = q.transpose() * a; // l x n
    let svd = b.svd(true, true);
    let u_small = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");

    let u = (&q * &u_small).columns(0, k).into_owned();
    let s = DVector::from_iterator(k, svd.singular_values.iter().take(k).copied());
    let v = v_t.rows(0, k).transpose();
    Ok(Rsvd { u, s, v })
}

fn orthonormalize(y: DMatrix<f64>) -> DMatrix<f64> {
    let qr = y.qr();
    qr.q()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frob(a: &DMatrix<f64>) -> f64 {
        a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn memory_estimate_paper_figure() {
        assert_eq!(estimate_snapshot_memory(10_000_000, 5000), 400_000_000_000);
        assert_eq!(estimate_snapshot_memory(1, 1), 8);
        assert_eq!(estimate_snapshot_memory(1000, 250), 2_000_000);
    }

    #[test]
    fn diagonal_embedded_spectrum_recovered() {
        // diag(5,4,3,2,1) embedded in 20x10.
        let mut a = DMatrix::zeros(20, 10);
        for (i, v) in [5.0, 4.0, 3.0, 2.0, 1.0].iter().enumerate() {
            a[(i, i)] = *v;
        }
        let r = rsvd(&a, 3, 4, 7).unwrap();
        for (i, expect) in [5.0, 4.0, 3.0].iter().enumerate() {
            assert!((r.s[i] - expect).abs() < 1e-8, "s[{i}] = {}", r.s[i]);
        }
    }

    #[test]
    fn rank_one_exact() {
        let u = DVector::from_fn(30, |i, _| (i as f64 * 0.37).sin() + 1.5);
        let v = DVector::from_fn(12, |i, _| (i as f64 * 0.71).cos());
        let a = &u * v.transpose();
        let r = rsvd(&a, 1, 3, 0).unwrap();
        let err = frob(&(&a - r.reconstruct()));
        assert!(err <= 1e-10, "err = {err}");
    }

    #[test]
    fn near_optimal_on_decaying_spectrum() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        // Random 100x40 with decaying singular values: A = sum_i s_i u_i v_i^T.
        let left = DMatrix::from_fn(100, 40, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let right = DMatrix::from_fn(40, 40, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let lq = left.qr().q();
        let rq = right.qr().q();
        let decay = DMatrix::from_diagonal(&DVector::from_fn(40, |i, _| 0.7f64.powi(i as i32)));
        let a = lq * decay * rq.transpose();

        let k = 10;
        let r = rsvd(&a, k, 6, 3).unwrap();
        let approx_err = frob(&(&a - r.reconstruct()));

        // Exact truncated SVD oracle for the baseline error.
        let svd = a.clone().svd(true, true);
        let opt_err: f64 = svd.singular_values.iter().skip(k).map(|s| s * s).sum::<f64>().sqrt();
        assert!(approx_err <= 1.5 * opt_err, "approx {approx_err} vs optimal {opt_err}");
    }

    #[test]
    fn orthonormality_and_ordering() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(50, 20, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let r = rsvd(&a, 8, 4, 11).unwrap();
        let utu = r.u.transpose() * &r.u;
        let vtv = r.v.transpose() * &r.v;
        let eye = DMatrix::<f64>::identity(8, 8);
        assert!(frob(&(utu - &eye)) < 1e-8);
        assert!(frob(&(vtv - &eye)) < 1e-8);
        for w in r.s.as_slice().windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
        assert!(r.s.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn rank_too_large_rejected() {
        let a = DMatrix::<f64>::zeros(5, 4);
        assert!(matches!(rsvd(&a, 3, 3, 0), Err(RsvdError::RankTooLarge(6, 4))));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = DMatrix::from_fn(15, 10, |i, j| ((i * 7 + j * 3) as f64).sin());
        let r1 = rsvd(&a, 4, 3, 99).unwrap();
        let r2 = rsvd(&a, 4, 3, 99).unwrap();
        assert_eq!(r1.u, r2.u);
        assert_eq!(r1.s, r2.s);
        assert_eq!(r1.v, r2.v);
    }
}
