//! ε-level convex minimization for the random spring network, the
//! deterministic homogenized problem, and convergence studies connecting the
//! two: strong two-scale errors for minimizers and their strains, mean-field
//! errors, and energy witnesses for the lower and upper Γ-bounds.
//!
//! The energy convention throughout is
//! `E_ε(ω, u) = Σ_x ε^d A(T_{x/ε}ω) ∇_s^ε u · ∇_s^ε u − Σ_x ε^d l·u`
//! (no ½ on the quadratic term), so the Euler–Lagrange system carries a
//! factor two: `2 ∇_s^{ε,*}(A ∇_s^ε u) = l`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::corrector::{
    assemble_homogenized_tensor, solve_corrector, HomogenizedTensor, Integrand, Probe,
    QuadraticIntegrand,
};
use crate::error::{Error, Result};
use crate::graph::LatticeGraph;
use crate::lattice::{BoundaryConvention, Grid, LatticeFunction, QuadratureRule, ResampleBox};
use crate::probability::RandomField;
use crate::solver::{conjugate_gradient, CgOptions};
use crate::unfolding::{strong_two_scale_error, transformation_formula, TwoScaleTarget};
use crate::util::{pairwise_sum, pairwise_sum_of};

const OPTIMALITY_TOL: f64 = 1e-9;

/// One ε-level minimization: zero-extension window, coefficient shifted
/// through the sample space site by site, load supported in the domain mask.
#[derive(Clone)]
pub struct StaticProblem {
    integrand: QuadraticIntegrand,
    grid: Arc<Grid>,
    load: RandomField,
    /// `shift[s·n + x] = T_{coords(x)} s`, precomputed once.
    shift: Vec<usize>,
}

/// Minimizer with per-sample energies and the worst optimality residual.
#[derive(Debug, Clone)]
pub struct StaticSolution {
    pub minimizer: RandomField,
    /// `⟨E_ε(ω, u_ε(ω))⟩`.
    pub energy: f64,
    pub sample_energies: Vec<f64>,
    /// Worst relative Euler–Lagrange residual across samples.
    pub residual: f64,
    /// Worst CG iteration count across samples.
    pub iterations: usize,
}

impl StaticProblem {
    pub fn new(
        integrand: &QuadraticIntegrand,
        grid: &Arc<Grid>,
        load: RandomField,
    ) -> Result<StaticProblem> {
        if integrand.blocks() != 1 {
            return Err(Error::InvalidConfig(
                "static problems take the elastic (blocks = 1) form".into(),
            ));
        }
        let d = grid.dim();
        if integrand.graph().dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "graph dimension {} vs grid dimension {d}",
                integrand.graph().dim()
            )));
        }
        if grid.convention() != BoundaryConvention::ZeroExtension {
            return Err(Error::InvalidConfig(
                "static minimization needs a zero-extension window".into(),
            ));
        }
        if !grid.domain_mask().iter().any(|&b| b) {
            return Err(Error::InvalidConfig("domain mask is empty".into()));
        }
        if load.components != d {
            return Err(Error::ShapeMismatch(format!(
                "load must have {d} components, got {}",
                load.components
            )));
        }
        if !Arc::ptr_eq(&load.grid, grid) {
            return Err(Error::ShapeMismatch("load lives on a different grid".into()));
        }
        let space = integrand.space();
        if load.space.len() != space.len() {
            return Err(Error::ShapeMismatch("load lives on a different sample space".into()));
        }
        for s in 0..space.len() {
            for x in 0..grid.n_sites() {
                if !grid.in_domain(x)
                    && load.site_slice(s, x).iter().any(|&v| v != 0.0)
                {
                    return Err(Error::InvalidConfig(format!(
                        "load has support outside the domain mask at site {x}"
                    )));
                }
            }
        }
        let n = grid.n_sites();
        let mut shift = vec![0usize; space.len() * n];
        for x in 0..n {
            let coords = grid.lattice_coords(x);
            for s in 0..space.len() {
                shift[s * n + x] = space.shift(s, &coords);
            }
        }
        Ok(StaticProblem {
            integrand: integrand.clone(),
            grid: Arc::clone(grid),
            load,
            shift,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn integrand(&self) -> &QuadraticIntegrand {
        &self.integrand
    }

    pub fn load(&self) -> &RandomField {
        &self.load
    }

    fn zero_off_domain(&self, values: &mut [f64]) {
        let d = self.grid.dim();
        for x in 0..self.grid.n_sites() {
            if !self.grid.in_domain(x) {
                values[x * d..(x + 1) * d].fill(0.0);
            }
        }
    }

    /// `2 ∇_s^{ε,*}(A(T_{x/ε}ω_s) ∇_s^ε u)`, restricted to the domain mask.
    fn apply_operator(&self, sample: usize, u: &LatticeFunction) -> LatticeFunction {
        let graph = self.integrand.graph();
        let k = graph.len();
        let n = self.grid.n_sites();
        let mut g = graph
            .symmetrized_gradient(u)
            .expect("operator shapes are fixed at construction");
        let mut row = vec![0.0; k];
        for x in 0..n {
            let a = self.integrand.coefficient().sample_slice(self.shift[sample * n + x]);
            let gx = &g.values[x * k..(x + 1) * k];
            for i in 0..k {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[i * k + l] * gx[l];
                }
                row[i] = 2.0 * acc;
            }
            g.values[x * k..(x + 1) * k].copy_from_slice(&row);
        }
        let mut out = graph
            .symmetrized_divergence(&g)
            .expect("operator shapes are fixed at construction");
        self.zero_off_domain(&mut out.values);
        out
    }

    /// `E_ε(ω_s, u)` for one sample.
    pub fn energy_sample(&self, sample: usize, u: &LatticeFunction) -> Result<f64> {
        let graph = self.integrand.graph();
        let g = graph.symmetrized_gradient(u)?;
        let n = self.grid.n_sites();
        let k = graph.len();
        let d = self.grid.dim();
        let w = self.grid.cell_measure();
        let elastic = pairwise_sum_of(n, |x| {
            let t = self.shift[sample * n + x];
            w * self.integrand.eval(t, &g.values[x * k..(x + 1) * k])
        });
        let l = self.load.sample_slice(sample);
        let work = pairwise_sum_of(n * d, |i| w * l[i] * u.values[i]);
        Ok(elastic - work)
    }

    /// Mean energy `⟨E_ε(ω, u(ω))⟩` of an arbitrary admissible field.
    pub fn energy(&self, u: &RandomField) -> Result<f64> {
        if u.components != self.grid.dim() || !Arc::ptr_eq(&u.grid, &self.grid) {
            return Err(Error::ShapeMismatch("field does not match the problem grid".into()));
        }
        let space = self.integrand.space();
        let per: Vec<f64> = (0..space.len())
            .map(|s| Ok(space.weight(s) * self.energy_sample(s, &u.sample_function(s))?))
            .collect::<Result<_>>()?;
        Ok(pairwise_sum(&per))
    }

    /// Minimize from the zero initial guess.
    pub fn solve(&self, cg: &CgOptions) -> Result<StaticSolution> {
        let zero = RandomField::zeros(
            &self.load.space,
            &self.grid,
            self.grid.dim(),
        );
        self.solve_from(&zero, cg)
    }

    /// Minimize starting from `start` (projected onto the domain mask);
    /// by strict convexity the minimizer is independent of the start.
    pub fn solve_from(&self, start: &RandomField, cg: &CgOptions) -> Result<StaticSolution> {
        let space = self.integrand.space();
        let m = space.len();
        let n = self.grid.n_sites();
        let d = self.grid.dim();
        let w = self.grid.cell_measure();

        let per_sample: Vec<(Vec<f64>, f64, usize, f64)> = (0..m)
            .into_par_iter()
            .map(|s| -> Result<(Vec<f64>, f64, usize, f64)> {
                let mut rhs = self.load.sample_slice(s).to_vec();
                self.zero_off_domain(&mut rhs);
                let mut x = start.sample_slice(s).to_vec();
                self.zero_off_domain(&mut x);
                let mut scratch = LatticeFunction::zeros(&self.grid, d);
                let outcome = conjugate_gradient(
                    |u_flat: &[f64], out: &mut [f64]| {
                        scratch.values.copy_from_slice(u_flat);
                        self.zero_off_domain(&mut scratch.values);
                        let applied = self.apply_operator(s, &scratch);
                        out.copy_from_slice(&applied.values);
                    },
                    &rhs,
                    &mut x,
                    cg,
                )?;
                let u = LatticeFunction {
                    grid: Arc::clone(&self.grid),
                    components: d,
                    values: x.clone(),
                };
                let applied = self.apply_operator(s, &u);
                let res_sq = pairwise_sum_of(n * d, |i| {
                    let r = applied.values[i] - rhs[i];
                    w * r * r
                });
                let load_sq = pairwise_sum_of(n * d, |i| w * rhs[i] * rhs[i]);
                let rel = res_sq.sqrt() / load_sq.sqrt().max(1.0);
                let energy = self.energy_sample(s, &u)?;
                Ok((x, energy, outcome.iterations, rel))
            })
            .collect::<Result<_>>()?;

        let mut minimizer = RandomField::zeros(&self.load.space, &self.grid, d);
        let mut sample_energies = Vec::with_capacity(m);
        let mut iterations = 0;
        let mut residual = 0.0_f64;
        for (s, (values, energy, iters, rel)) in per_sample.iter().enumerate() {
            minimizer.sample_slice_mut(s).copy_from_slice(values);
            sample_energies.push(*energy);
            iterations = iterations.max(*iters);
            residual = residual.max(*rel);
        }
        if residual > OPTIMALITY_TOL {
            return Err(Error::Optimality {
                context: "static Euler–Lagrange system",
                residual,
                tolerance: OPTIMALITY_TOL,
            });
        }
        let energy = pairwise_sum_of(m, |s| space.weight(s) * sample_energies[s]);
        Ok(StaticSolution {
            minimizer,
            energy,
            sample_energies,
            residual,
            iterations,
        })
    }
}

/// Deterministic minimizer of the homogenized energy on a reference window.
#[derive(Debug, Clone)]
pub struct HomogenizedSolution {
    pub minimizer: LatticeFunction,
    pub energy: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Minimize `Σ_x ε^d A_hom ∇_s U·∇_s U − Σ_x ε^d l·U` over zero-extension
/// fields on `grid`. The effective density acts on graph-symmetrized strains,
/// so the operator is `2 ∇_s^{ε,*}(A_hom ∇_s^ε U)`.
pub fn solve_homogenized(
    graph: &LatticeGraph,
    tensor: &HomogenizedTensor,
    grid: &Arc<Grid>,
    load: &LatticeFunction,
    cg: &CgOptions,
) -> Result<HomogenizedSolution> {
    let d = grid.dim();
    let k = graph.len();
    if tensor.blocks != 1 || tensor.k != k {
        return Err(Error::ShapeMismatch(format!(
            "homogenized tensor must be the elastic {k}×{k} form"
        )));
    }
    if graph.dim() != d || load.components != d {
        return Err(Error::ShapeMismatch(
            "graph, grid, and load dimensions must agree".into(),
        ));
    }
    if grid.convention() != BoundaryConvention::ZeroExtension {
        return Err(Error::InvalidConfig(
            "homogenized minimization needs a zero-extension window".into(),
        ));
    }
    let n = grid.n_sites();
    let w = grid.cell_measure();
    let zero_off = |values: &mut [f64]| {
        for x in 0..n {
            if !grid.in_domain(x) {
                values[x * d..(x + 1) * d].fill(0.0);
            }
        }
    };
    let apply = |u: &LatticeFunction| -> LatticeFunction {
        let mut g = graph.symmetrized_gradient(u).expect("shapes fixed");
        let mut row = vec![0.0; k];
        for x in 0..n {
            let gx = &g.values[x * k..(x + 1) * k];
            for i in 0..k {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += tensor.entry(i, l) * gx[l];
                }
                row[i] = 2.0 * acc;
            }
            g.values[x * k..(x + 1) * k].copy_from_slice(&row);
        }
        let mut out = graph.symmetrized_divergence(&g).expect("shapes fixed");
        zero_off(&mut out.values);
        out
    };

    let mut rhs = load.values.clone();
    zero_off(&mut rhs);
    let mut x = vec![0.0; n * d];
    let mut scratch = LatticeFunction::zeros(grid, d);
    let outcome = conjugate_gradient(
        |u_flat: &[f64], out: &mut [f64]| {
            scratch.values.copy_from_slice(u_flat);
            zero_off(&mut scratch.values);
            out.copy_from_slice(&apply(&scratch).values);
        },
        &rhs,
        &mut x,
        cg,
    )?;
    let minimizer = LatticeFunction {
        grid: Arc::clone(grid),
        components: d,
        values: x,
    };
    let applied = apply(&minimizer);
    let res = (pairwise_sum_of(n * d, |i| {
        let r = applied.values[i] - rhs[i];
        w * r * r
    }))
    .sqrt()
        / (pairwise_sum_of(n * d, |i| w * rhs[i] * rhs[i])).sqrt().max(1.0);
    if res > OPTIMALITY_TOL {
        return Err(Error::Optimality {
            context: "homogenized Euler–Lagrange system",
            residual: res,
            tolerance: OPTIMALITY_TOL,
        });
    }
    let g = graph.symmetrized_gradient(&minimizer)?;
    let elastic = pairwise_sum_of(n, |s| w * tensor.apply(&g.values[s * k..(s + 1) * k]));
    let work = load.inner(&minimizer)?;
    Ok(HomogenizedSolution {
        energy: elastic - work,
        minimizer,
        residual: res,
        iterations: outcome.iterations,
    })
}

/// Scale sweep and error table for one problem family.
#[derive(Debug, Clone, Serialize)]
pub struct StudyRow {
    pub epsilon: f64,
    /// `⟨E_ε(u_ε)⟩` at the minimizer.
    pub energy: f64,
    /// `‖T_ε u_ε − U‖_{L²(Ω×O)}` against the reference-grid limit.
    pub strong_error_u: f64,
    /// `‖T̃_ε ∇_s^ε u_ε − (∇_s U + χ_s)‖_{L²(Ω×O)}`.
    pub strong_error_grad: f64,
    /// `‖⟨u_ε⟩ − U‖_{L²(O)}`.
    pub mean_error: f64,
    /// Energy of the corrector recovery candidate on this grid (upper-bound
    /// witness; `≥ energy` by minimality).
    pub recovery_energy: f64,
    /// Homogenized energy discretized on this ε-grid (the recovery energy
    /// approaches it as ε shrinks).
    pub homogenized_energy: f64,
    /// Relative defect of the transformation-formula cross-evaluation of the
    /// elastic energy.
    pub transform_residual: f64,
    pub cg_iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceStudy {
    pub rows: Vec<StudyRow>,
    pub reference_epsilon: f64,
    /// Homogenized energy on the reference (finest) grid.
    pub homogenized_energy: f64,
    pub tensor: HomogenizedTensor,
}

impl ConvergenceStudy {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epsilon,energy,strong_error_u,strong_error_grad,mean_error,recovery_energy,homogenized_energy,transform_residual,cg_iterations\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.3e},{}\n",
                r.epsilon,
                r.energy,
                r.strong_error_u,
                r.strong_error_grad,
                r.mean_error,
                r.recovery_energy,
                r.homogenized_energy,
                r.transform_residual,
                r.cg_iterations
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("study serializes")
    }
}

/// Study configuration: scales, box sides, quadrature for folding the load,
/// and the CG settings shared by every solve.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub epsilons: Vec<f64>,
    pub sides: Vec<f64>,
    pub quad: QuadratureRule,
    pub cg: CgOptions,
}

/// Run the full sweep: assemble `A_hom`, solve the homogenized problem on the
/// finest grid, then for each ε solve the random problem with the folded load
/// and record two-scale, mean-field, and energy diagnostics.
///
/// The load is a fixed continuum function folded per scale, which yields
/// strongly two-scale convergent data by construction.
pub fn run_convergence_study<L>(
    integrand: &QuadraticIntegrand,
    load: L,
    config: &StudyConfig,
) -> Result<ConvergenceStudy>
where
    L: Fn(&[f64], &mut [f64]) + Sync,
{
    if config.epsilons.is_empty() {
        return Err(Error::InvalidConfig("study needs at least one ε".into()));
    }
    if integrand.blocks() != 1 {
        return Err(Error::InvalidConfig("study takes the elastic form".into()));
    }
    let graph = integrand.graph().clone();
    let space = Arc::clone(integrand.space());
    let d = graph.dim();
    if config.sides.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "box needs {d} sides, got {}",
            config.sides.len()
        )));
    }
    let mut epsilons = config.epsilons.clone();
    epsilons.sort_by(|a, b| b.partial_cmp(a).expect("finite ε"));
    let eps_ref = *epsilons.last().expect("nonempty");

    let tensor = assemble_homogenized_tensor(integrand)?;
    let k = graph.len();
    let wrapped = Integrand::Quadratic(integrand.clone());
    let correctors: Vec<_> = (0..k)
        .map(|i| {
            let mut e = vec![0.0; k];
            e[i] = 1.0;
            solve_corrector(&wrapped, &Probe::Symmetrized(e))
        })
        .collect::<Result<_>>()?;

    // reference limit on the finest grid
    let grid_ref = Grid::open_box(eps_ref, &config.sides, graph.generators())?;
    let mut l_ref = LatticeFunction::discretize(&grid_ref, d, config.quad, &load)?;
    l_ref.restrict_to_domain();
    let hom_ref = solve_homogenized(&graph, &tensor, &grid_ref, &l_ref, &config.cg)?;
    let grad_ref = graph.symmetrized_gradient(&hom_ref.minimizer)?;

    // two-scale targets: U itself and the corrected strain ∇_s U + χ_s(∇_s U)
    let u_target = RandomField::from_fn(&space, &grid_ref, d, |_, x, slot| {
        slot.copy_from_slice(hom_ref.minimizer.site_slice(x));
    });
    let grad_target = RandomField::from_fn(&space, &grid_ref, k, |s, x, slot| {
        let gx = grad_ref.site_slice(x);
        slot.copy_from_slice(gx);
        for (l, sol) in correctors.iter().enumerate() {
            for i in 0..k {
                slot[i] += gx[l] * sol.chi_s.value(s, i);
            }
        }
    });

    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in &epsilons {
        let grid = Grid::open_box(eps, &config.sides, graph.generators())?;
        let mut l_eps = LatticeFunction::discretize(&grid, d, config.quad, &load)?;
        l_eps.restrict_to_domain();
        let l_field = RandomField::from_fn(&space, &grid, d, |_, x, slot| {
            slot.copy_from_slice(l_eps.site_slice(x));
        });
        let problem = StaticProblem::new(integrand, &grid, l_field)?;
        let sol = problem.solve(&config.cg)?;

        let g_field = graph.symmetrized_gradient_field(&sol.minimizer)?;
        let check = transformation_formula(&g_field, |t, g| integrand.eval(t, g))?;

        let strong_u = strong_two_scale_error(&sol.minimizer, &TwoScaleTarget::Field(&u_target))?;
        let strong_g = strong_two_scale_error(&g_field, &TwoScaleTarget::Field(&grad_target))?;
        let mean = sol.minimizer.expectation_field();
        let boxes = ResampleBox::covering(&[&grid, &grid_ref])?;
        let mean_error = boxes.l2_distance(&mean, &hom_ref.minimizer)?;

        // per-ε homogenized solve: macroscopic part of the recovery candidate
        let hom_eps = solve_homogenized(&graph, &tensor, &grid, &l_eps, &config.cg)?;
        let grad_eps = graph.symmetrized_gradient(&hom_eps.minimizer)?;
        let recovery = RandomField::from_fn(&space, &grid, d, |s, x, slot| {
            if !grid.in_domain(x) {
                return;
            }
            let coords = grid.lattice_coords(x);
            let t = space.shift(s, &coords);
            slot.copy_from_slice(hom_eps.minimizer.site_slice(x));
            for (l, sol_l) in correctors.iter().enumerate() {
                let eta = grad_eps.value(x, l);
                for c in 0..d {
                    slot[c] += eps * eta * sol_l.chi.certificate.value(t, c);
                }
            }
        });
        let recovery_energy = problem.energy(&recovery)?;

        rows.push(StudyRow {
            epsilon: eps,
            energy: sol.energy,
            strong_error_u: strong_u,
            strong_error_grad: strong_g,
            mean_error,
            recovery_energy,
            homogenized_energy: hom_eps.energy,
            transform_residual: check.residual,
            cg_iterations: sol.iterations,
        });
    }

    Ok(ConvergenceStudy {
        rows,
        reference_epsilon: eps_ref,
        homogenized_energy: hom_ref.energy,
        tensor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrector::Provenance;
    use crate::probability::{ProbabilitySpace, RandomVariable};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_tensor(k: usize, matrix: Vec<f64>) -> HomogenizedTensor {
        let dense = DMatrix::from_row_slice(k, k, &matrix);
        let (c_hom, _) = crate::solver::sym_eigen_range(&dense);
        HomogenizedTensor {
            k,
            blocks: 1,
            matrix,
            c_hom,
            provenance: Provenance {
                space: String::from("manual"),
                graph: String::from("manual"),
                coefficient: String::from("manual"),
            },
        }
    }

    fn chain_problem(
        values: &[f64],
        eps: f64,
        load: f64,
    ) -> (StaticProblem, Arc<Grid>) {
        let space = ProbabilitySpace::torus(&[values.len()]).unwrap();
        let graph = LatticeGraph::standard(1).unwrap();
        let vals = values.to_vec();
        let a = RandomVariable::from_fn(&space, 1, |s, slot| slot[0] = vals[s]);
        let q = QuadraticIntegrand::elastic(&space, &graph, a).unwrap();
        let grid = Grid::open_box(eps, &[1.0], graph.generators()).unwrap();
        let l = RandomField::from_fn(&space, &grid, 1, |_, x, slot| {
            if grid.in_domain(x) {
                slot[0] = load;
            }
        });
        (StaticProblem::new(&q, &grid, l).unwrap(), grid)
    }

    #[test]
    fn zero_load_minimizer_vanishes() {
        let (problem, _) = chain_problem(&[1.0, 4.0], 0.125, 0.0);
        let sol = problem.solve(&CgOptions::default()).unwrap();
        assert_eq!(sol.minimizer.values.iter().filter(|&&v| v != 0.0).count(), 0);
        assert_eq!(sol.energy, 0.0);
    }

    #[test]
    fn singleton_chain_matches_the_dense_tridiagonal_solve() {
        // one sample, constant a = 2: the masked CG must reproduce the dense
        // Dirichlet solve of 4·(2u_i − u_{i−1} − u_{i+1})/ε² = 1, and for a
        // constant load the 3-point scheme is exact on the parabola
        // x(1−x)/(2·2a).
        let eps = 0.125;
        let (problem, grid) = chain_problem(&[2.0], eps, 1.0);
        let sol = problem.solve(&CgOptions::default()).unwrap();
        let interior: Vec<usize> = (0..grid.n_sites()).filter(|&x| grid.in_domain(x)).collect();
        let n = interior.len();
        assert_eq!(n, 7);
        let mut mat = DMatrix::<f64>::zeros(n, n);
        let scale = 4.0 / (eps * eps);
        for i in 0..n {
            mat[(i, i)] = 2.0 * scale;
            if i > 0 {
                mat[(i, i - 1)] = -scale;
                mat[(i - 1, i)] = -scale;
            }
        }
        let rhs = DVector::from_element(n, 1.0);
        let direct = mat.lu().solve(&rhs).unwrap();
        for (row, &x) in interior.iter().enumerate() {
            let got = sol.minimizer.value(0, x, 0);
            assert!(
                (got - direct[row]).abs() < 1e-10,
                "site {x}: cg {got} vs dense {}",
                direct[row]
            );
            let pos = grid.position(x)[0];
            let exact = pos * (1.0 - pos) / 8.0;
            assert!((got - exact).abs() < 1e-10, "parabola mismatch at {pos}: {got}");
        }
        assert!(sol.residual < 1e-9);
    }

    #[test]
    fn minimizer_is_unique_across_starting_points() {
        let (problem, grid) = chain_problem(&[1.0, 4.0], 0.0625, 1.0);
        let from_zero = problem.solve(&CgOptions::default()).unwrap();
        let space = Arc::clone(problem.integrand().space());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let start = RandomField::from_fn(&space, &grid, 1, |_, _, slot| {
            slot[0] = rng.gen_range(-1.0..1.0)
        });
        let from_random = problem.solve_from(&start, &CgOptions::default()).unwrap();
        let mut worst = 0.0_f64;
        for (a, b) in from_zero
            .minimizer
            .values
            .iter()
            .zip(&from_random.minimizer.values)
        {
            worst = worst.max((a - b).abs());
        }
        assert!(worst < 1e-8, "minimizers differ by {worst}");
    }

    #[test]
    fn minimality_beats_the_folded_homogenized_candidate() {
        let (problem, grid) = chain_problem(&[1.0, 4.0], 0.125, 1.0);
        let sol = problem.solve(&CgOptions::default()).unwrap();
        let graph = LatticeGraph::standard(1).unwrap();
        let tensor = constant_tensor(1, vec![1.6]);
        let l = LatticeFunction::from_fn(&grid, 1, |x, slot| {
            if grid.in_domain(x) {
                slot[0] = 1.0;
            }
        });
        let hom = solve_homogenized(&graph, &tensor, &grid, &l, &CgOptions::default()).unwrap();
        let space = Arc::clone(problem.integrand().space());
        let candidate = RandomField::from_fn(&space, &grid, 1, |_, x, slot| {
            slot[0] = hom.minimizer.value(x, 0);
        });
        let candidate_energy = problem.energy(&candidate).unwrap();
        assert!(
            sol.energy <= candidate_energy + 1e-12,
            "minimality violated: {} vs candidate {}",
            sol.energy,
            candidate_energy
        );
    }

    #[test]
    fn homogenized_chain_solves_the_harmonic_mean_equation() {
        // 2·(1.6 U′)′ = −1 on (0,1): U(x) = x(1−x)/6.4, and the 3-point
        // scheme reproduces quadratics exactly.
        let graph = LatticeGraph::standard(1).unwrap();
        let tensor = constant_tensor(1, vec![1.6]);
        let grid = Grid::open_box(0.125, &[1.0], graph.generators()).unwrap();
        let l = LatticeFunction::from_fn(&grid, 1, |x, slot| {
            if grid.in_domain(x) {
                slot[0] = 1.0;
            }
        });
        let hom = solve_homogenized(&graph, &tensor, &grid, &l, &CgOptions::default()).unwrap();
        for x in 0..grid.n_sites() {
            let pos = grid.position(x)[0];
            let exact = if grid.in_domain(x) {
                pos * (1.0 - pos) / 6.4
            } else {
                0.0
            };
            assert!(
                (hom.minimizer.value(x, 0) - exact).abs() < 1e-10,
                "U({pos}) = {} vs {exact}",
                hom.minimizer.value(x, 0)
            );
        }
        assert!(hom.residual < 1e-9);
    }

    #[test]
    fn layered_chain_study_converges_to_the_harmonic_limit() {
        let space = ProbabilitySpace::torus(&[2]).unwrap();
        let graph = LatticeGraph::standard(1).unwrap();
        let a = RandomVariable::from_fn(&space, 1, |s, slot| slot[0] = [1.0, 4.0][s]);
        let q = QuadraticIntegrand::elastic(&space, &graph, a).unwrap();
        let config = StudyConfig {
            epsilons: vec![0.125, 0.0625, 0.03125],
            sides: vec![1.0],
            quad: QuadratureRule::gauss(2),
            cg: CgOptions::default(),
        };
        let study = run_convergence_study(&q, |_, out| out[0] = 1.0, &config).unwrap();
        assert!((study.tensor.matrix[0] - 1.6).abs() < 1e-10);
        assert_eq!(study.rows.len(), 3);
        for pair in study.rows.windows(2) {
            assert!(
                pair[1].strong_error_u < pair[0].strong_error_u,
                "strong u-error must decrease: {} -> {}",
                pair[0].strong_error_u,
                pair[1].strong_error_u
            );
            assert!(
                pair[1].strong_error_grad < pair[0].strong_error_grad,
                "strong strain error must decrease: {} -> {}",
                pair[0].strong_error_grad,
                pair[1].strong_error_grad
            );
            assert!(
                pair[1].mean_error < pair[0].mean_error,
                "mean error must decrease: {} -> {}",
                pair[0].mean_error,
                pair[1].mean_error
            );
        }
        for row in &study.rows {
            assert!(row.transform_residual < 1e-10);
            // minimality of u_ε against the recovery candidate
            assert!(row.energy <= row.recovery_energy + 1e-12);
        }
        // upper-bound witness: E_ε(recovery) approaches the homogenized
        // energy as ε shrinks
        let rec_gaps: Vec<f64> = study
            .rows
            .iter()
            .map(|r| (r.recovery_energy - r.homogenized_energy).abs())
            .collect();
        assert!(
            rec_gaps[1] < rec_gaps[0] && rec_gaps[2] < rec_gaps[1],
            "recovery gaps must shrink: {rec_gaps:?}"
        );
        assert!(rec_gaps[2] < 0.05 * study.homogenized_energy.abs());
        // lower-bound witness: minimizer energies approach E_hom from below
        let ref_energy = study.homogenized_energy;
        let gaps: Vec<f64> = study
            .rows
            .iter()
            .map(|r| (r.energy - ref_energy).abs())
            .collect();
        assert!(gaps[2] < gaps[0], "energy gap must shrink: {gaps:?}");
        let csv = study.to_csv();
        assert!(csv.lines().count() == 4);
        assert!(csv.starts_with("epsilon,"));
    }

    #[test]
    fn constant_coefficient_study_reduces_to_discretization_error() {
        // χ = 0 and A_hom = A: the ε-minimizer equals the homogenized solve
        // on the same grid, so every error column is pure discretization.
        let space = ProbabilitySpace::torus(&[2, 2]).unwrap();
        let graph = LatticeGraph::standard(2).unwrap();
        let a = RandomVariable::from_fn(&space, 9, |_, slot| {
            slot.copy_from_slice(&[
                2.0, 0.0, 0.0, //
                0.0, 2.0, 0.0, //
                0.0, 0.0, 1.0,
            ])
        });
        let q = QuadraticIntegrand::elastic(&space, &graph, a).unwrap();
        let config = StudyConfig {
            epsilons: vec![0.25, 0.125],
            sides: vec![1.0, 1.0],
            quad: QuadratureRule::gauss(2),
            cg: CgOptions::default(),
        };
        let study = run_convergence_study(
            &q,
            |x, out| {
                out[0] = (std::f64::consts::PI * x[0]).sin() * (std::f64::consts::PI * x[1]).sin();
                out[1] = 0.0;
            },
            &config,
        )
        .unwrap();
        for pair in study.rows.windows(2) {
            assert!(pair[1].strong_error_u < pair[0].strong_error_u);
            assert!(pair[1].mean_error < pair[0].mean_error);
        }
        for row in &study.rows {
            // with χ = 0 the recovery candidate *is* the per-grid homogenized
            // minimizer, and the operators coincide
            assert!((row.recovery_energy - row.homogenized_energy).abs() < 1e-9);
            assert!((row.energy - row.homogenized_energy).abs() < 1e-8);
            assert!(row.transform_residual < 1e-10);
        }
    }
}
