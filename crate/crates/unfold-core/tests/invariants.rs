//! Randomized structural invariants of the discrete unfolding calculus.
//!
//! Every identity exercised here holds algebraically on finite windows, so the
//! tolerances below only absorb floating-point rounding. Proptest draws the
//! *structure* — dimension, window shape, boundary convention, torus period,
//! ergodic vs. two-orbit sample spaces, edge generating sets — while nodal
//! values come from a seeded stream, so shrinking reduces the instance rather
//! than the data.

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unfold_core::graph::LatticeGraph;
use unfold_core::lattice::{
    discrete_divergence, discrete_gradient, Grid, LatticeFunction, QuadratureRule,
};
use unfold_core::probability::{
    stationary_extension, ProbabilitySpace, RandomField, RandomVariable,
};
use unfold_core::unfolding::{
    commutator_residual, fold, fold_fn, project_invariant_field, transformation_formula, unfold,
};
use unfold_core::util::pairwise_sum_of;

/// Rounding allowance for identities that are exact in exact arithmetic.
const EXACT: f64 = 1e-12;

#[derive(Debug, Clone)]
struct Scenario {
    periods: Vec<usize>,
    /// Replace the torus by a two-orbit disjoint union (non-ergodic action).
    split: bool,
    extents: Vec<usize>,
    epsilon: f64,
    periodic: bool,
    comps: usize,
    seed: u64,
}

fn scenario() -> impl Strategy<Value = Scenario> {
    (1..=2usize)
        .prop_flat_map(|d| {
            (
                proptest::collection::vec(1..=3usize, d),
                any::<bool>(),
                proptest::collection::vec(1..=3usize, d),
                proptest::collection::vec(2..=5usize, d),
                prop_oneof![Just(1.0), Just(0.5), Just(0.25)],
                any::<bool>(),
                1..=2usize,
                any::<u64>(),
            )
        })
        .prop_map(
            |(periods, split, multiples, free, epsilon, periodic, comps, seed)| {
                // Periodic windows must close up the shift action, so their
                // extents are whole multiples of the torus period.
                let extents = if periodic {
                    periods
                        .iter()
                        .zip(&multiples)
                        .map(|(&p, &m)| (p * m).max(2))
                        .collect()
                } else {
                    free
                };
                Scenario {
                    periods,
                    split,
                    extents,
                    epsilon,
                    periodic,
                    comps,
                    seed,
                }
            },
        )
}

fn build_space(sc: &Scenario) -> Arc<ProbabilitySpace> {
    let base = ProbabilitySpace::torus(&sc.periods).unwrap();
    if !sc.split {
        return base;
    }
    // Disjoint union of two torus copies with unequal block masses: measure
    // preserving, commuting, and certifiably non-ergodic (two orbits).
    let m = base.len();
    let d = base.dim();
    let mut labels = Vec::with_capacity(2 * m);
    for block in 0..2 {
        for s in 0..m {
            labels.push(format!("{block}:{s}"));
        }
    }
    let mut weights = vec![0.0; 2 * m];
    for s in 0..m {
        weights[s] = 0.3 / m as f64;
        weights[m + s] = 0.7 / m as f64;
    }
    let shifts = (0..d)
        .map(|a| {
            let e: Vec<i64> = (0..d).map(|c| i64::from(c == a)).collect();
            (0..2 * m)
                .map(|s| (s / m) * m + base.shift(s % m, &e))
                .collect()
        })
        .collect();
    ProbabilitySpace::new(labels, weights, shifts, None).unwrap()
}

fn build_grid(sc: &Scenario) -> Arc<Grid> {
    if sc.periodic {
        Grid::periodic(sc.epsilon, &sc.extents).unwrap()
    } else {
        Grid::full_window(sc.epsilon, &sc.extents).unwrap()
    }
}

fn fill_field(
    space: &Arc<ProbabilitySpace>,
    grid: &Arc<Grid>,
    comps: usize,
    seed: u64,
) -> RandomField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RandomField::from_fn(space, grid, comps, |_, _, out| {
        for v in out {
            *v = rng.gen_range(-1.0..1.0);
        }
    })
}

fn fill_function(grid: &Arc<Grid>, comps: usize, seed: u64) -> LatticeFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatticeFunction::from_fn(grid, comps, |_, out| {
        for v in out {
            *v = rng.gen_range(-1.0..1.0);
        }
    })
}

fn fill_variable(space: &Arc<ProbabilitySpace>, comps: usize, seed: u64) -> RandomVariable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RandomVariable::from_fn(space, comps, |_, out| {
        for v in out {
            *v = rng.gen_range(-1.0..1.0);
        }
    })
}

fn graph_pool(d: usize) -> Vec<LatticeGraph> {
    match d {
        1 => vec![
            LatticeGraph::new(vec![vec![1]]).unwrap(),
            LatticeGraph::new(vec![vec![1], vec![2]]).unwrap(),
            LatticeGraph::new(vec![vec![1], vec![3]]).unwrap(),
        ],
        2 => vec![
            LatticeGraph::axes(2).unwrap(),
            LatticeGraph::standard(2).unwrap(),
            LatticeGraph::new(vec![vec![1, 0], vec![0, 1], vec![2, 1]]).unwrap(),
            LatticeGraph::new(vec![vec![1, 0], vec![0, 1], vec![1, -1]]).unwrap(),
        ],
        _ => unreachable!("scenarios only draw d ∈ {{1, 2}}"),
    }
}

/// Widest generator reach in the ∞-norm; zero-extension path expansions are
/// exact only on fields supported this far from the window faces.
fn graph_margin(graph: &LatticeGraph) -> usize {
    graph
        .generators()
        .iter()
        .flat_map(|g| g.iter().map(|&v| v.unsigned_abs() as usize))
        .max()
        .unwrap_or(0)
}

fn zero_near_faces(u: &mut LatticeFunction, margin: usize) {
    let grid = Arc::clone(&u.grid);
    let c = u.components;
    for s in 0..grid.n_sites() {
        let coords = grid.site_coords(s);
        let near = coords
            .iter()
            .zip(grid.extents())
            .any(|(&x, &e)| x < margin || x + margin >= e);
        if near {
            u.values[s * c..(s + 1) * c].fill(0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unfolding_is_an_isometry_with_an_exact_inverse(sc in scenario()) {
        let space = build_space(&sc);
        let grid = build_grid(&sc);
        let u = fill_field(&space, &grid, sc.comps, sc.seed);
        let tu = unfold(&u).unwrap();
        prop_assert!((tu.norm_l2() - u.norm_l2()).abs() <= EXACT * (1.0 + u.norm_l2()));
        // Both compositions are pure sample permutations per site: bit exact.
        prop_assert_eq!(&fold(&tu).unwrap().values, &u.values);
        prop_assert_eq!(&unfold(&fold(&u).unwrap()).unwrap().values, &u.values);
    }

    #[test]
    fn unfolding_and_folding_are_mutually_adjoint(sc in scenario(), seed2 in any::<u64>()) {
        let space = build_space(&sc);
        let grid = build_grid(&sc);
        let u = fill_field(&space, &grid, sc.comps, sc.seed);
        let v = fill_field(&space, &grid, sc.comps, seed2);
        let lhs = unfold(&u).unwrap().inner(&v).unwrap();
        let rhs = u.inner(&fold(&v).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= EXACT * (1.0 + u.norm_l2() * v.norm_l2()));
    }

    #[test]
    fn gradient_and_divergence_are_adjoint_on_every_window(
        sc in scenario(),
        seed2 in any::<u64>(),
    ) {
        let grid = build_grid(&sc);
        let u = fill_function(&grid, sc.comps, sc.seed);
        let g = fill_function(&grid, sc.comps * grid.dim(), seed2);
        let gu = discrete_gradient(&u);
        let lhs = gu.inner(&g).unwrap();
        let rhs = u.inner(&discrete_divergence(&g).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= EXACT * (1.0 + gu.norm_l2() * g.norm_l2()));
    }

    #[test]
    fn symmetrized_gradient_and_divergence_are_adjoint(
        sc in scenario(),
        gi in 0..4usize,
        seed2 in any::<u64>(),
    ) {
        let grid = build_grid(&sc);
        let pool = graph_pool(grid.dim());
        let graph = &pool[gi % pool.len()];
        let u = fill_function(&grid, grid.dim(), sc.seed);
        let g = fill_function(&grid, graph.len(), seed2);
        let su = graph.symmetrized_gradient(&u).unwrap();
        let lhs = su.inner(&g).unwrap();
        let rhs = u.inner(&graph.symmetrized_divergence(&g).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= EXACT * (1.0 + su.norm_l2() * g.norm_l2()));
    }

    #[test]
    fn edge_quotients_match_their_path_expansion(sc in scenario(), gi in 0..4usize) {
        let pool = graph_pool(sc.periods.len());
        let graph = &pool[gi % pool.len()];
        let margin = graph_margin(graph);
        // Give zero-extension windows enough interior to support the field.
        let extents: Vec<usize> = sc.extents.iter().map(|&e| e + 2 * margin).collect();
        let grid = if sc.periodic {
            Grid::periodic(sc.epsilon, &sc.extents).unwrap()
        } else {
            Grid::full_window(sc.epsilon, &extents).unwrap()
        };
        let mut u = fill_function(&grid, grid.dim(), sc.seed);
        if !sc.periodic {
            zero_near_faces(&mut u, margin);
        }
        for i in 0..graph.len() {
            let direct = graph.edge_quotient(&u, i).unwrap();
            let via = graph.edge_quotient_via_paths(&u, i).unwrap();
            prop_assert!(
                direct.l2_distance(&via).unwrap() <= EXACT * (1.0 + direct.norm_l2()),
                "generator {:?} disagrees with its staircase", graph.generator(i)
            );
        }
    }

    #[test]
    fn horizontal_derivative_and_divergence_are_adjoint(
        sc in scenario(),
        seed2 in any::<u64>(),
    ) {
        let space = build_space(&sc);
        let phi = fill_variable(&space, sc.comps, sc.seed);
        let psi = fill_variable(&space, sc.comps * space.dim(), seed2);
        let lhs = phi.horizontal_derivative().inner(&psi).unwrap();
        let rhs = phi.inner(&psi.horizontal_divergence().unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= EXACT * (1.0 + phi.norm_l2() * psi.norm_l2()));
    }

    #[test]
    fn invariant_projection_is_an_idempotent_contraction(sc in scenario()) {
        let space = build_space(&sc);
        let phi = fill_variable(&space, sc.comps, sc.seed);
        let p = phi.project_invariant();
        let pp = p.project_invariant();
        prop_assert!(p.l2_distance(&pp).unwrap() <= EXACT * (1.0 + p.norm_l2()));
        for q in [1.0, 2.0, 4.0] {
            prop_assert!(p.norm_lp(q) <= phi.norm_lp(q) * (1.0 + EXACT) + EXACT);
        }
        // The projection lands in ker D.
        prop_assert!(p.horizontal_derivative().norm_l2() <= EXACT * (1.0 + phi.norm_l2()));
        prop_assert!(p.invariance_defect() <= EXACT * (1.0 + phi.norm_l2()));
    }

    #[test]
    fn invariant_projection_absorbs_unfolding(sc in scenario()) {
        let space = build_space(&sc);
        let grid = build_grid(&sc);
        let u = fill_field(&space, &grid, sc.comps, sc.seed);
        let pu = project_invariant_field(&u);
        let scale = EXACT * (1.0 + u.norm_l2());
        let ptu = project_invariant_field(&unfold(&u).unwrap());
        prop_assert!(ptu.l2_distance(&pu).unwrap() <= scale);
        let tpu = unfold(&pu).unwrap();
        prop_assert!(tpu.l2_distance(&pu).unwrap() <= scale);
    }

    #[test]
    fn commutator_identity_is_exact_on_compatible_windows(sc in scenario()) {
        let space = build_space(&sc);
        let grid = build_grid(&sc);
        let u = fill_field(&space, &grid, sc.comps, sc.seed);
        prop_assert!(commutator_residual(&u).unwrap() <= EXACT);
    }

    #[test]
    fn transformation_formula_is_summation_order_independent(sc in scenario()) {
        let space = build_space(&sc);
        let grid = build_grid(&sc);
        let v = fill_field(&space, &grid, sc.comps, sc.seed);
        let coeff = fill_variable(&space, 1, sc.seed ^ 0x9e37_79b9);
        let quadratic = transformation_formula(&v, |s, f| {
            (1.0 + coeff.value(s, 0).powi(2)) * f.iter().map(|x| x * x).sum::<f64>()
        })
        .unwrap();
        prop_assert!(quadratic.residual <= EXACT);
        let quartic = transformation_formula(&v, |s, f| {
            let q: f64 = f.iter().map(|x| x * x).sum();
            (1.0 + coeff.value(s, 0).powi(2)) * q * q
        })
        .unwrap();
        prop_assert!(quartic.residual <= EXACT);
    }

    #[test]
    fn symmetrized_horizontal_derivative_telescopes_through_paths(
        sc in scenario(),
        gi in 0..4usize,
    ) {
        let space = build_space(&sc);
        let d = space.dim();
        let pool = graph_pool(d);
        let graph = &pool[gi % pool.len()];
        let u = fill_variable(&space, d, sc.seed);
        let direct = graph.symmetrized_horizontal(&u).unwrap();
        let via = graph.symmetrize_random(&u.horizontal_derivative()).unwrap();
        prop_assert!(direct.l2_distance(&via).unwrap() <= EXACT * (1.0 + direct.norm_l2()));
    }

    #[test]
    fn stationary_extension_unfolds_to_its_generator(sc in scenario()) {
        let space = build_space(&sc);
        let grid = build_grid(&sc);
        let phi = fill_variable(&space, sc.comps, sc.seed);
        let ext = stationary_extension(&phi, &grid).unwrap();
        let tu = unfold(&ext).unwrap();
        // T̃_ε undoes exactly the shift the extension applied: bit equality.
        for s in 0..space.len() {
            for k in 0..grid.n_sites() {
                prop_assert_eq!(tu.site_slice(s, k), phi.sample_slice(s));
            }
        }
    }

    #[test]
    fn discretization_inverts_piecewise_constant_interpolation(sc in scenario()) {
        let grid = build_grid(&sc);
        let u = fill_function(&grid, sc.comps, sc.seed);
        let back = LatticeFunction::discretize(
            &grid,
            sc.comps,
            QuadratureRule::midpoint(),
            |x, out| {
                let vals = u.piecewise_constant(&[x.to_vec()]).unwrap();
                out.copy_from_slice(&vals[0]);
            },
        )
        .unwrap();
        prop_assert!(back.l2_distance(&u).unwrap() <= EXACT * (1.0 + u.norm_l2()));
    }

    #[test]
    fn serialization_round_trips_preserve_every_bit(sc in scenario()) {
        let space = build_space(&sc);
        let grid = build_grid(&sc);
        let u = fill_function(&grid, sc.comps, sc.seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.csv");
        u.to_csv(&path).unwrap();
        let back = LatticeFunction::from_csv(&path).unwrap();
        prop_assert_eq!(&back.values, &u.values);
        prop_assert_eq!(back.grid.fingerprint(), grid.fingerprint());
        let round = ProbabilitySpace::from_json(&space.to_json()).unwrap();
        prop_assert_eq!(round.fingerprint(), space.fingerprint());
    }

    #[test]
    fn site_positions_round_trip_through_cell_lookup(sc in scenario()) {
        let grid = build_grid(&sc);
        for s in 0..grid.n_sites() {
            prop_assert_eq!(grid.pc_site(&grid.position(s)), Some(s));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn continuum_folding_is_a_contraction(sc in scenario(), order in 1..=3usize) {
        let space = build_space(&sc);
        let grid = build_grid(&sc);
        let quad = if order == 1 {
            QuadratureRule::midpoint()
        } else {
            QuadratureRule::gauss(order)
        };
        let amp = fill_variable(&space, sc.comps, sc.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(sc.seed ^ 0x5bd1_e995);
        let freq: Vec<f64> = (0..grid.dim()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let phase: Vec<f64> = (0..sc.comps).map(|_| rng.gen_range(0.0..6.0)).collect();
        let integrand = |s: usize, x: &[f64], out: &mut [f64]| {
            let dot: f64 = freq.iter().zip(x).map(|(f, y)| f * y).sum();
            for (c, slot) in out.iter_mut().enumerate() {
                *slot = amp.value(s, c) * (dot + phase[c]).cos();
            }
        };
        let folded = fold_fn(&space, &grid, sc.comps, quad, integrand).unwrap();
        // ‖V‖ under the same quadrature: Jensen per cell makes the cell mean
        // no larger, so contraction is exact at the discrete level.
        let points = quad.cell_points(grid.epsilon(), grid.dim()).unwrap();
        let w_cell = grid.cell_measure();
        let mut buf = vec![0.0; sc.comps];
        let mut x = vec![0.0; grid.dim()];
        let n = grid.n_sites();
        let norm_sq = pairwise_sum_of(space.len() * n, |idx| {
            let (s, k) = (idx / n, idx % n);
            let base = grid.position(k);
            let mut acc = 0.0;
            for (offset, w) in &points {
                for a in 0..grid.dim() {
                    x[a] = base[a] + offset[a];
                }
                integrand(s, &x, &mut buf);
                acc += w * buf.iter().map(|v| v * v).sum::<f64>();
            }
            space.weight(s) * w_cell * acc
        });
        let norm_v = norm_sq.sqrt();
        prop_assert!(folded.norm_l2() <= norm_v * (1.0 + EXACT) + EXACT);
    }
}
