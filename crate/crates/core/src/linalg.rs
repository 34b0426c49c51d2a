//! Eigenvalue routines: Chebyshev-accelerated block power iteration driven
//! by Hessian-vector products, and a dense symmetric eigensolver used as a cross-check.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::vector::Vector;

/// Result of an eigenvalue computation.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vector,
    pub iterations: usize,
    /// `||H v - value v||`
    pub residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PowerIterationOptions {
    /// Upper bound `c` on the largest eigenvalue, so that `c I - H` is
    /// positive semi-definite.
    pub shift: f64,
    /// Stop once the eigen-residual falls below this.
    pub tol: f64,
    /// Cap on filter applications (each costs `FILTER_DEGREE * BLOCK_SIZE`
    /// operator products).
    pub max_iterations: usize,
    /// Seed of the random start vector.
    pub seed: u64,
}

/// Columns iterated together; clusters of up to this many nearly equal
/// smallest eigenvalues are separated by the Rayleigh-Ritz step.
pub const BLOCK_SIZE: usize = 4;

/// Degree of the Chebyshev polynomial applied between Rayleigh-Ritz steps.
pub const FILTER_DEGREE: usize = 8;

/// Smallest eigenpair of a symmetric operator given only through `hvp`.
///
/// Block power iteration: each iteration applies a Chebyshev polynomial in
/// `H` that damps the spectrum on `[a, shift]` (with `a` the largest Ritz
/// value of the block) and grows it below `a`, re-orthonormalizes, and
/// projects onto the block (Rayleigh-Ritz). With degree one this is plain
/// power iteration on `shift * I - H`; the polynomial only accelerates the
/// contraction when the low end of the spectrum is clustered.
///
/// On hitting the iteration cap, returns [`Error::ConvergenceFailure`]
/// carrying the last smallest Ritz vector and its Rayleigh quotient (always
/// an upper bound on the smallest eigenvalue).
pub fn smallest_eigenpair<F>(dim: usize, mut hvp: F, opts: &PowerIterationOptions) -> Result<EigenPair>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    if dim == 0 {
        return Err(Error::invalid("eigenproblem of dimension zero"));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::invalid(format!("tolerance must be positive, got {}", opts.tol)));
    }
    let k = BLOCK_SIZE.min(dim);
    let mut rng = SeededRng::new(opts.seed, 0x6569_6765_6e);
    let mut v = orthonormal(DMatrix::from_fn(dim, k, |_, _| rng.standard_normal()))?;
    let mut apply = |m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(dim, m.ncols());
        for j in 0..m.ncols() {
            let col: Vec<f64> = m.column(j).iter().copied().collect();
            let hv = hvp(&col);
            if hv.len() != dim {
                return Err(Error::invalid("Hessian-vector product changed dimension"));
            }
            out.set_column(j, &DVector::from_vec(hv));
        }
        Ok(out)
    };
    let breakdown = || Error::Internal(format!("power iteration broke down (shift {} too small?)", opts.shift));

    let mut hv = apply(&v)?;
    let mut it = 0;
    loop {
        // Rayleigh-Ritz: rotate the block onto its Ritz vectors, smallest first
        let t = v.transpose() * &hv;
        let t = (&t + t.transpose()) * 0.5;
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let y = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, order[c])]);
        v = &v * &y;
        hv = &hv * &y;
        let ritz: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let theta = ritz[0];
        let u: Vec<f64> = v.column(0).iter().copied().collect();
        let hu: Vec<f64> = hv.column(0).iter().copied().collect();
        let residual = residual_norm(&hu, &u, theta);
        if residual <= opts.tol {
            return Ok(EigenPair {
                value: theta,
                vector: Vector::from_raw(u),
                iterations: it,
                residual,
            });
        }
        if it >= opts.max_iterations {
            return Err(Error::ConvergenceFailure {
                iterations: opts.max_iterations,
                residual,
                estimate: theta,
                best: Vector::from_raw(u),
            });
        }
        if !(opts.shift > ritz[k - 1]) {
            return Err(breakdown());
        }

        // Chebyshev filter damping [a, shift], scaled to be one at theta
        let hi = opts.shift;
        let lo = ritz[k - 1].max(theta + 1e-12 * (hi - theta));
        let (e, c) = ((hi - lo) / 2.0, (hi + lo) / 2.0);
        let mut sigma = e / (theta - c);
        let tau = 2.0 / sigma;
        let mut prev = v.clone();
        let mut cur = (&hv - &v * c) * (sigma / e);
        for _ in 1..FILTER_DEGREE {
            let sigma_next = 1.0 / (tau - sigma);
            let hcur = apply(&cur)?;
            let next = (hcur - &cur * c) * (2.0 * sigma_next / e) - &prev * (sigma * sigma_next);
            prev = cur;
            cur = next;
            sigma = sigma_next;
        }
        if !cur.iter().all(|x| x.is_finite()) {
            return Err(breakdown());
        }
        v = orthonormal(cur).map_err(|_| breakdown())?;
        hv = apply(&v)?;
        it += 1;
    }
}

/// Orthonormal basis of the columns of `m` (which must have full rank).
fn orthonormal(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = m.shape();
    let scale = m.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let qr = m.qr();
    let r = qr.r();
    if (0..cols).any(|i| !(r[(i, i)].abs() > 1e-12 * scale.max(f64::MIN_POSITIVE))) {
        return Err(Error::Internal("block lost rank".into()));
    }
    let q = qr.q();
    debug_assert_eq!(q.shape(), (rows, cols));
    Ok(q)
}

fn residual_norm(hv: &[f64], v: &[f64], theta: f64) -> f64 {
    hv.iter()
        .zip(v)
        .map(|(h, x)| (h - theta * x) * (h - theta * x))
        .sum::<f64>()
        .sqrt()
}

/// Smallest eigenpair of a dense symmetric matrix.
pub fn dense_smallest_eigenpair(h: &DMatrix<f64>) -> Result<EigenPair> {
    if h.nrows() == 0 || h.nrows() != h.ncols() {
        return Err(Error::invalid("dense eigensolver needs a non-empty square matrix"));
    }
    let eig = SymmetricEigen::new(h.clone());
    let (idx, value) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, v)| if v < bv { (i, v) } else { (bi, bv) });
    let col = eig.eigenvectors.column(idx);
    let v: Vec<f64> = col.iter().copied().collect();
    let hv = h * &col;
    let residual = hv
        .iter()
        .zip(&v)
        .map(|(a, b)| (a - value * b) * (a - value * b))
        .sum::<f64>()
        .sqrt();
    Ok(EigenPair {
        value,
        vector: Vector::from_raw(v),
        iterations: 0,
        residual,
    })
}

/// Upper bound on the spectral radius of a symmetric matrix (max row sum).
pub fn gershgorin_radius(h: &DMatrix<f64>) -> f64 {
    h.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(shift: f64) -> PowerIterationOptions {
        PowerIterationOptions {
            shift,
            tol: 1e-10,
            max_iterations: 100_000,
            seed: 1,
        }
    }

    #[test]
    fn diagonal_matrix() {
        let d = [1.0, -2.0];
        let e = smallest_eigenpair(2, |v| vec![d[0] * v[0], d[1] * v[1]], &opts(3.0)).unwrap();
        assert!((e.value + 2.0).abs() < 1e-9);
        assert!((e.vector[1].abs() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn isotropic_negative_identity() {
        let e = smallest_eigenpair(5, |v| v.iter().map(|x| -x).collect(), &opts(2.0)).unwrap();
        assert!((e.value + 1.0).abs() < 1e-12);
        assert!((e.vector.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn agrees_with_dense_on_random_symmetric() {
        let mut rng = SeededRng::new(9, 9);
        for dim in [3usize, 8, 20] {
            let a = DMatrix::from_fn(dim, dim, |_, _| rng.standard_normal());
            let h = (&a + a.transpose()) * 0.5;
            let dense = dense_smallest_eigenpair(&h).unwrap();
            let c = gershgorin_radius(&h) + 1.0;
            let pow = smallest_eigenpair(
                dim,
                |v| {
                    let x = nalgebra::DVector::from_column_slice(v);
                    (&h * x).iter().copied().collect()
                },
                &opts(c),
            )
            .unwrap();
            assert!((pow.value - dense.value).abs() < 1e-8, "dim {dim}");
        }
    }

    #[test]
    fn cap_reports_best_iterate() {
        // the fifth eigenvalue sits 1e-9 above the block, so a tiny cap cannot resolve it
        let diag = [0.0, 0.5, 0.6, 0.7, 0.7 + 1e-9, 1.0];
        let o = PowerIterationOptions {
            shift: 2.0,
            tol: 1e-14,
            max_iterations: 3,
            seed: 4,
        };
        let err = smallest_eigenpair(6, |v| v.iter().zip(&diag).map(|(x, d)| x * d).collect(), &o).unwrap_err();
        match err {
            Error::ConvergenceFailure { estimate, best, .. } => {
                assert!(estimate >= 0.0);
                assert_eq!(best.dim(), 6);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn separates_nearly_equal_smallest_eigenvalues() {
        let diag: Vec<f64> = (0..16).map(|i| if i < 2 { -1.0 + 1e-9 * i as f64 } else { i as f64 / 4.0 }).collect();
        let e = smallest_eigenpair(16, |v| v.iter().zip(&diag).map(|(x, d)| x * d).collect(), &opts(6.0)).unwrap();
        assert!((e.value + 1.0).abs() < 1e-12);
    }
}
