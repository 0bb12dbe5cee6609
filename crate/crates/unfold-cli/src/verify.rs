//! Randomized operator-identity suite behind `unfold verify`.
//!
//! The suite sweeps a fixed structure grid — dimension 1 and 2, sample
//! spaces of size 1, 2 and 6, mesh sizes 1, 1/2 and 1/4, both boundary
//! conventions — and draws nodal data from a seeded stream, so a run is
//! reproducible from the seed alone. Every identity is algebraically exact
//! on finite windows; the tolerance only absorbs rounding.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use unfold_core::graph::{KornReport, LatticeGraph};
use unfold_core::lattice::{
    discrete_divergence, discrete_gradient, Grid, LatticeFunction, QuadratureRule,
};
use unfold_core::probability::{ProbabilitySpace, RandomField, RandomVariable};
use unfold_core::unfolding::{
    commutator_residual, fold, fold_fn, project_invariant_field, transformation_formula, unfold,
};
use unfold_core::util::pairwise_sum_of;

use crate::config::{KornExpectation, KornSection};

pub const CHECK_NAMES: [&str; 13] = [
    "unfold isometry",
    "unfold round trip",
    "fold round trip",
    "unfold/fold adjointness",
    "fold contraction",
    "discrete integration by parts",
    "horizontal integration by parts",
    "gradient commutator",
    "transformation formula (quadratic)",
    "transformation formula (quartic)",
    "invariant projection absorbs unfolding",
    "invariant projection idempotence",
    "ergodic collapse to the mean",
];

#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub worst_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub instances: usize,
    pub elapsed_seconds: f64,
    pub checks: Vec<IdentityCheck>,
    pub pass: bool,
}

/// Windowed Korn sweep judged against a declared expectation, so a
/// deliberately degenerate generating set can *pass* by failing as
/// predicted.
#[derive(Debug, Clone, Serialize)]
pub struct KornCheck {
    pub expect: KornExpectation,
    pub drift_tolerance: f64,
    pub growth_minimum: f64,
    pub report: KornReport,
    pub pass: bool,
}

struct Instance {
    space: Arc<ProbabilitySpace>,
    grid: Arc<Grid>,
    comps: usize,
    seed: u64,
}

fn torus_periods(d: usize, m: usize) -> Vec<usize> {
    match (d, m) {
        (1, n) => vec![n],
        (2, 1) => vec![1, 1],
        (2, 2) => vec![2, 1],
        (2, 6) => vec![3, 2],
        _ => unreachable!("suite grid only uses d ≤ 2, m ∈ {{1, 2, 6}}"),
    }
}

fn build_instance(d: usize, m: usize, epsilon: f64, periodic: bool, comps: usize, seed: u64) -> Instance {
    let space = if m == 1 {
        ProbabilitySpace::singleton(d).unwrap()
    } else {
        ProbabilitySpace::torus(&torus_periods(d, m)).unwrap()
    };
    // Periodic extents are common multiples of every period in the grid
    // above, so the shift action closes up; zero-extension extents are free.
    let extents: Vec<usize> = match (d, periodic) {
        (1, true) => vec![6],
        (1, false) => vec![7],
        (2, true) => vec![6, 4],
        (2, false) => vec![5, 4],
        _ => unreachable!(),
    };
    let grid = if periodic {
        Grid::periodic(epsilon, &extents).unwrap()
    } else {
        Grid::full_window(epsilon, &extents).unwrap()
    };
    Instance {
        space,
        grid,
        comps,
        seed,
    }
}

fn fill_field(inst: &Instance, salt: u64) -> RandomField {
    let mut rng = ChaCha8Rng::seed_from_u64(inst.seed ^ salt);
    RandomField::from_fn(&inst.space, &inst.grid, inst.comps, |_, _, out| {
        for v in out {
            *v = rng.gen_range(-1.0..1.0);
        }
    })
}

fn fill_function(inst: &Instance, comps: usize, salt: u64) -> LatticeFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(inst.seed ^ salt);
    LatticeFunction::from_fn(&inst.grid, comps, |_, out| {
        for v in out {
            *v = rng.gen_range(-1.0..1.0);
        }
    })
}

fn fill_variable(inst: &Instance, comps: usize, salt: u64) -> RandomVariable {
    let mut rng = ChaCha8Rng::seed_from_u64(inst.seed ^ salt);
    RandomVariable::from_fn(&inst.space, comps, |_, out| {
        for v in out {
            *v = rng.gen_range(-1.0..1.0);
        }
    })
}

/// Residuals of all thirteen checks on one instance, in `CHECK_NAMES` order.
fn instance_residuals(inst: &Instance) -> anyhow::Result<[f64; 13]> {
    let mut r = [0.0_f64; 13];
    let u = fill_field(inst, 0x0139_7a11);
    let v = fill_field(inst, 0x7f4a_7c15);

    let tu = unfold(&u)?;
    let nu = u.norm_l2();
    r[0] = (tu.norm_l2() - nu).abs() / (1.0 + nu);
    r[1] = fold(&tu)?.l2_distance(&u)? / (1.0 + nu);
    r[2] = unfold(&fold(&u)?)?.l2_distance(&u)? / (1.0 + nu);
    r[3] = (tu.inner(&v)? - u.inner(&fold(&v)?)?).abs() / (1.0 + nu * v.norm_l2());
    r[4] = fold_contraction_residual(inst)?;

    let w = fill_function(inst, inst.comps, 0x51ed_270b);
    let g = fill_function(inst, inst.comps * inst.grid.dim(), 0x2545_f491);
    let gw = discrete_gradient(&w);
    r[5] = (gw.inner(&g)? - w.inner(&discrete_divergence(&g)?)?).abs()
        / (1.0 + gw.norm_l2() * g.norm_l2());

    let phi = fill_variable(inst, inst.comps, 0x9e37_79b9);
    let psi = fill_variable(inst, inst.comps * inst.space.dim(), 0x85eb_ca6b);
    r[6] = (phi.horizontal_derivative().inner(&psi)?
        - phi.inner(&psi.horizontal_divergence()?)?)
    .abs()
        / (1.0 + phi.norm_l2() * psi.norm_l2());

    r[7] = commutator_residual(&u)?;

    let coeff = fill_variable(inst, 1, 0xc2b2_ae35);
    r[8] = transformation_formula(&u, |s, f| {
        (1.0 + coeff.value(s, 0).powi(2)) * f.iter().map(|x| x * x).sum::<f64>()
    })?
    .residual;
    r[9] = transformation_formula(&u, |s, f| {
        let q: f64 = f.iter().map(|x| x * x).sum();
        (1.0 + coeff.value(s, 0).powi(2)) * q * q
    })?
    .residual;

    let pu = project_invariant_field(&u);
    let scale = 1.0 + nu;
    r[10] = (project_invariant_field(&tu).l2_distance(&pu)?
        .max(unfold(&pu)?.l2_distance(&pu)?))
        / scale;
    let p = phi.project_invariant();
    r[11] = (p.project_invariant().l2_distance(&p)?.max(p.invariance_defect()))
        / (1.0 + phi.norm_l2());

    // Singleton and torus actions are single-orbit, so the invariant
    // projection collapses to the expectation.
    let mean = phi.expectation();
    let constant = RandomVariable::from_fn(&inst.space, inst.comps, |_, out| {
        out.copy_from_slice(&mean);
    });
    r[12] = p.l2_distance(&constant)? / (1.0 + phi.norm_l2());

    Ok(r)
}

/// `‖F_ε V‖ ≤ ‖V‖` with both norms under the same cell quadrature; the
/// residual is the (clamped) amount by which folding fails to contract.
fn fold_contraction_residual(inst: &Instance) -> anyhow::Result<f64> {
    let space = &inst.space;
    let grid = &inst.grid;
    let comps = inst.comps;
    let amp = fill_variable(inst, comps, 0x27d4_eb2f);
    let mut rng = ChaCha8Rng::seed_from_u64(inst.seed ^ 0x1656_67b1);
    let freq: Vec<f64> = (0..grid.dim()).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let phase: Vec<f64> = (0..comps).map(|_| rng.gen_range(0.0..6.0)).collect();
    let integrand = |s: usize, x: &[f64], out: &mut [f64]| {
        let dot: f64 = freq.iter().zip(x).map(|(f, y)| f * y).sum();
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = amp.value(s, c) * (dot + phase[c]).cos();
        }
    };
    let quad = QuadratureRule::gauss(2);
    let folded = fold_fn(space, grid, comps, quad, integrand)?;
    let points = quad.cell_points(grid.epsilon(), grid.dim())?;
    let w_cell = grid.cell_measure();
    let n = grid.n_sites();
    let mut buf = vec![0.0; comps];
    let mut x = vec![0.0; grid.dim()];
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
    Ok(((folded.norm_l2() - norm_v) / (1.0 + norm_v)).max(0.0))
}

/// Run at least `min_instances` randomized instances across the structure
/// grid and report the worst residual per identity.
pub fn run_identity_suite(
    min_instances: usize,
    seed: u64,
    tolerance: f64,
) -> anyhow::Result<IdentityReport> {
    let start = Instant::now();
    let mut worst = [0.0_f64; 13];
    let mut instances = 0usize;
    let cells: Vec<(usize, usize, f64, bool)> = {
        let mut v = Vec::new();
        for d in [1, 2] {
            for m in [1, 2, 6] {
                for eps in [1.0, 0.5, 0.25] {
                    for periodic in [false, true] {
                        v.push((d, m, eps, periodic));
                    }
                }
            }
        }
        v
    };
    let reps = min_instances.div_ceil(cells.len()).max(1);
    for rep in 0..reps {
        for (i, &(d, m, eps, periodic)) in cells.iter().enumerate() {
            let comps = 1 + (rep + i) % 2;
            let mix = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((rep * cells.len() + i) as u64);
            let inst = build_instance(d, m, eps, periodic, comps, mix);
            let r = instance_residuals(&inst)?;
            for (w, ri) in worst.iter_mut().zip(r) {
                *w = w.max(ri);
            }
            instances += 1;
        }
    }
    let checks: Vec<IdentityCheck> = CHECK_NAMES
        .iter()
        .zip(worst)
        .map(|(&name, worst_residual)| IdentityCheck {
            name,
            worst_residual,
            tolerance,
            pass: worst_residual <= tolerance,
        })
        .collect();
    let pass = checks.iter().all(|c| c.pass);
    Ok(IdentityReport {
        instances,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        checks,
        pass,
    })
}

/// Windowed Korn sweep with the verdict taken relative to the configured
/// expectation.
pub fn korn_check(graph: &LatticeGraph, cfg: &KornSection) -> anyhow::Result<KornCheck> {
    let report = graph.verify_korn(&cfg.sides)?;
    let pass = match cfg.expect {
        KornExpectation::Bounded => report.drift <= cfg.drift_tolerance,
        KornExpectation::Unbounded => report.growth >= cfg.growth_minimum,
    };
    Ok(KornCheck {
        expect: cfg.expect,
        drift_tolerance: cfg.drift_tolerance,
        growth_minimum: cfg.growth_minimum,
        report,
        pass,
    })
}
