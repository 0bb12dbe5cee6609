//! Linear-algebra workhorses: matrix-free conjugate gradients, generalized
//! symmetric eigenvalue helpers, and a Lanczos fallback for pencils too large
//! to densify.
//!
//! Everything here is deterministic. CG inner products use pairwise summation
//! (see [`crate::util`]), dense decompositions come from `nalgebra`, and the
//! Lanczos start vector is derived from a fixed seed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::util::pairwise_dot;
use crate::{Error, Result};

/// Options for the conjugate-gradient solver.
///
/// The defaults are pinned across the toolkit: relative residual tolerance
/// `1e-10`, iteration cap `10·n` for an `n`-dimensional system. Callers that
/// need a different tolerance say so explicitly.
#[derive(Debug, Clone, Copy)]
pub struct CgOptions {
    /// Stop when `‖b − Ax‖ ≤ rel_tol · ‖b‖`.
    pub rel_tol: f64,
    /// Iteration cap as a multiple of the system dimension.
    pub max_iter_factor: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            rel_tol: 1e-10,
            max_iter_factor: 10,
        }
    }
}

/// Outcome report of a successful CG solve.
#[derive(Debug, Clone, Copy)]
pub struct CgOutcome {
    pub iterations: usize,
    /// Final residual relative to `‖b‖`.
    pub relative_residual: f64,
}

/// Matrix-free conjugate gradients for a symmetric positive definite operator.
///
/// `apply(x, out)` must write `A x` into `out`. The initial content of `x` is
/// used as the starting guess. Returns a structured stall error if the
/// iteration cap is reached before the tolerance.
pub fn conjugate_gradient<F>(
    mut apply: F,
    b: &[f64],
    x: &mut [f64],
    opts: &CgOptions,
) -> Result<CgOutcome>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = b.len();
    assert_eq!(x.len(), n, "solution and rhs dimensions must match");
    let norm_b = pairwise_dot(b, b).sqrt();
    if !norm_b.is_finite() {
        return Err(Error::NonFinite("right-hand side of CG solve".into()));
    }
    if norm_b == 0.0 {
        x.fill(0.0);
        return Ok(CgOutcome {
            iterations: 0,
            relative_residual: 0.0,
        });
    }

    let mut r = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];

    apply(x, &mut ap);
    for i in 0..n {
        r[i] = b[i] - ap[i];
    }
    p.copy_from_slice(&r);
    let mut rsq = pairwise_dot(&r, &r);

    let cap = opts.max_iter_factor.saturating_mul(n);
    let target = opts.rel_tol * norm_b;
    let mut iterations = 0;
    while rsq.sqrt() > target {
        if iterations >= cap {
            return Err(Error::SolverStall {
                solver: "conjugate gradients",
                iterations,
                residual: rsq.sqrt() / norm_b,
                tolerance: opts.rel_tol,
            });
        }
        apply(&p, &mut ap);
        let pap = pairwise_dot(&p, &ap);
        if !pap.is_finite() || pap <= 0.0 {
            return Err(Error::Coercivity(format!(
                "CG operator is not positive definite: p·Ap = {pap:.3e}"
            )));
        }
        let alpha = rsq / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rsq_next = pairwise_dot(&r, &r);
        let beta = rsq_next / rsq;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rsq = rsq_next;
        iterations += 1;
    }

    Ok(CgOutcome {
        iterations,
        relative_residual: rsq.sqrt() / norm_b,
    })
}

/// Smallest and largest eigenvalue of a dense symmetric matrix.
pub fn sym_eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in eig.eigenvalues.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Smallest eigenvalue of the symmetric pencil `(S, G)`, i.e. the minimum of
/// the Rayleigh quotient `xᵀSx / xᵀGx`, with `G` positive definite.
pub fn generalized_eigen_min(s: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<f64> {
    let chol = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Coercivity("pencil metric G is not positive definite".into()))?;
    let l = chol.l();
    // M = L⁻¹ S L⁻ᵀ has the pencil's eigenvalues.
    let a1 = l
        .solve_lower_triangular(s)
        .ok_or_else(|| Error::Coercivity("singular Cholesky factor".into()))?;
    let a2 = l
        .solve_lower_triangular(&a1.transpose())
        .ok_or_else(|| Error::Coercivity("singular Cholesky factor".into()))?;
    let (lo, _) = sym_eigen_range(&a2.transpose());
    Ok(lo)
}

/// Minimum-norm least-squares solution of `M c = b` through the SVD
/// pseudo-inverse. Singular values below `rel_cutoff · σ_max` are treated as
/// zero, which is what makes the answer basis-independent for rank-deficient
/// normal systems.
pub fn pinv_solve(m: &DMatrix<f64>, b: &DVector<f64>, rel_cutoff: f64) -> Result<DVector<f64>> {
    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let eps = if sigma_max > 0.0 {
        rel_cutoff * sigma_max
    } else {
        rel_cutoff
    };
    svd.solve(b, eps)
        .map_err(|e| Error::Serialization(format!("SVD solve failed: {e}")))
}

/// Lanczos estimate of the smallest eigenvalue of the pencil `(S, G)`.
///
/// `apply_s` and `apply_g` are matrix-free applications; `solve_g` must solve
/// `G z = w` (e.g. via CG on the Gram operator). Runs `steps` iterations with
/// full `G`-reorthogonalization, which is affordable because we only ever ask
/// for a few hundred steps. The estimate converges from above, so it is a
/// slight overestimate of `λ_min` — callers that use it as a coercivity
/// constant apply their own slack.
pub fn lanczos_generalized_min<FS, FG, SG>(
    n: usize,
    apply_s: FS,
    apply_g: FG,
    solve_g: SG,
    steps: usize,
    seed: u64,
) -> Result<f64>
where
    FS: Fn(&[f64], &mut [f64]),
    FG: Fn(&[f64], &mut [f64]),
    SG: Fn(&[f64], &mut [f64]) -> Result<()>,
{
    assert!(n > 0, "empty pencil");
    let steps = steps.min(n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);

    // G-normalized random start vector.
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut gv = vec![0.0; n];
    apply_g(&v, &mut gv);
    let norm = pairwise_dot(&v, &gv).sqrt();
    if !(norm > 0.0) {
        return Err(Error::Coercivity("Lanczos start vector degenerate".into()));
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    q.push(v);

    let mut alphas = Vec::with_capacity(steps);
    let mut betas: Vec<f64> = Vec::with_capacity(steps);

    for j in 0..steps {
        let qj = q[j].clone();
        let mut u = vec![0.0; n];
        apply_s(&qj, &mut u);
        let alpha = pairwise_dot(&qj, &u);
        alphas.push(alpha);

        let mut z = vec![0.0; n];
        solve_g(&u, &mut z)?;
        // Three-term recurrence plus full reorthogonalization in the G-inner product.
        for (i, qi) in q.iter().enumerate() {
            let mut gq = vec![0.0; n];
            apply_g(qi, &mut gq);
            let coeff = pairwise_dot(&z, &gq);
            let _ = i;
            for t in 0..n {
                z[t] -= coeff * qi[t];
            }
        }
        let mut gz = vec![0.0; n];
        apply_g(&z, &mut gz);
        let beta = pairwise_dot(&z, &gz).sqrt();
        if !(beta > 1e-14) {
            break; // invariant subspace found; tridiagonal block is complete
        }
        betas.push(beta);
        let qn: Vec<f64> = z.iter().map(|x| x / beta).collect();
        q.push(qn);
    }

    let k = alphas.len();
    let mut t = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k && i < betas.len() {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let (lo, _) = sym_eigen_range(&t);
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn cg_matches_dense_solve_on_random_spd_systems() {
        for seed in 0..5u64 {
            let n = 24;
            let a = random_spd(n, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut x = vec![0.0; n];
            let outcome = conjugate_gradient(
                |v, out| {
                    let vv = DVector::from_column_slice(v);
                    let av = &a * vv;
                    out.copy_from_slice(av.as_slice());
                },
                &b,
                &mut x,
                &CgOptions::default(),
            )
            .expect("cg should converge on SPD system");
            let dense = a
                .clone()
                .lu()
                .solve(&DVector::from_column_slice(&b))
                .expect("dense solve");
            for i in 0..n {
                assert!(
                    (x[i] - dense[i]).abs() < 1e-8,
                    "cg disagrees with dense solve at {i}: {} vs {}",
                    x[i],
                    dense[i]
                );
            }
            assert!(outcome.relative_residual <= 1e-10);
        }
    }

    #[test]
    fn cg_zero_rhs_returns_zero_immediately() {
        let b = vec![0.0; 7];
        let mut x = vec![1.0; 7];
        let outcome = conjugate_gradient(|v, out| out.copy_from_slice(v), &b, &mut x, &CgOptions::default()).unwrap();
        assert_eq!(outcome.iterations, 0);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cg_reports_structured_stall_when_cap_exhausted() {
        let b = vec![1.0, 2.0, 3.0];
        let mut x = vec![0.0; 3];
        let opts = CgOptions {
            rel_tol: 1e-10,
            max_iter_factor: 0, // cap = 0 forces an immediate stall on nonzero rhs
        };
        let err = conjugate_gradient(|v, out| out.copy_from_slice(v), &b, &mut x, &opts).unwrap_err();
        match err {
            Error::SolverStall { solver, iterations, .. } => {
                assert_eq!(solver, "conjugate gradients");
                assert_eq!(iterations, 0);
            }
            other => panic!("expected SolverStall, got {other:?}"),
        }
    }

    #[test]
    fn cg_rejects_indefinite_operator() {
        let b = vec![1.0, 1.0];
        let mut x = vec![0.0; 2];
        let err = conjugate_gradient(
            |v, out| {
                out[0] = v[0];
                out[1] = -v[1];
            },
            &b,
            &mut x,
            &CgOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Coercivity(_)));
    }

    #[test]
    fn generalized_eigen_min_on_diagonal_pencil() {
        // S = diag(2, 12), G = diag(1, 4): Rayleigh quotients are 2 and 3.
        let s = DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 12.0]));
        let g = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 4.0]));
        let lo = generalized_eigen_min(&s, &g).unwrap();
        assert!((lo - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pinv_solve_returns_min_norm_solution() {
        // M = [1 1] as a 1×2 system: solutions of c₁+c₂=2 form a line; the
        // minimum-norm point is (1, 1).
        let m = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_column_slice(&[2.0]);
        let c = pinv_solve(&m, &b, 1e-12).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lanczos_generalized_matches_dense_on_moderate_pencil() {
        let n = 40;
        let s = random_spd(n, 7);
        let g = random_spd(n, 8);
        let dense = generalized_eigen_min(&s, &g).unwrap();
        let lanczos = lanczos_generalized_min(
            n,
            |v, out| {
                let av = &s * DVector::from_column_slice(v);
                out.copy_from_slice(av.as_slice());
            },
            |v, out| {
                let gv = &g * DVector::from_column_slice(v);
                out.copy_from_slice(gv.as_slice());
            },
            |w, z| {
                let sol = g
                    .clone()
                    .cholesky()
                    .unwrap()
                    .solve(&DVector::from_column_slice(w));
                z.copy_from_slice(sol.as_slice());
                Ok(())
            },
            n,
            42,
        )
        .unwrap();
        assert!(
            (lanczos - dense).abs() < 1e-6 * dense.abs().max(1.0),
            "lanczos {lanczos} vs dense {dense}"
        );
    }
}
