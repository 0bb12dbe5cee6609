//! Microbenchmarks for the kernels everything else composes: unfolding, the
//! discrete and symmetrized gradients, the commutator diagnostic, and a small
//! cell-problem solve. Sizes are chosen so a full run stays in seconds while
//! still being large enough to expose cache effects in the site loops.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unfold_core::corrector::{solve_corrector, Integrand, Probe, QuadraticIntegrand};
use unfold_core::graph::LatticeGraph;
use unfold_core::lattice::{discrete_gradient, Grid, LatticeFunction};
use unfold_core::probability::{ProbabilitySpace, RandomField, RandomVariable};
use unfold_core::unfolding::{commutator_residual, unfold};

fn bench_unfolding(c: &mut Criterion) {
    let space = ProbabilitySpace::torus(&[4, 4]).unwrap();
    let grid = Grid::periodic(1.0 / 24.0, &[24, 24]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let u = RandomField::from_fn(&space, &grid, 2, |_, _, out| {
        for v in out {
            *v = rng.gen_range(-1.0..1.0);
        }
    });
    c.bench_function("unfold 16w x 24x24 x 2c", |b| {
        b.iter(|| unfold(black_box(&u)).unwrap())
    });
    c.bench_function("commutator residual 16w x 24x24 x 2c", |b| {
        b.iter(|| commutator_residual(black_box(&u)).unwrap())
    });
}

fn bench_gradients(c: &mut Criterion) {
    let grid = Grid::full_window(1.0 / 64.0, &[64, 64]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = LatticeFunction::from_fn(&grid, 2, |_, out| {
        for v in out {
            *v = rng.gen_range(-1.0..1.0);
        }
    });
    let graph = LatticeGraph::standard(2).unwrap();
    c.bench_function("discrete gradient 64x64 x 2c", |b| {
        b.iter(|| discrete_gradient(black_box(&u)))
    });
    c.bench_function("symmetrized gradient 64x64", |b| {
        b.iter(|| graph.symmetrized_gradient(black_box(&u)).unwrap())
    });
}

fn bench_cell_problem(c: &mut Criterion) {
    let space = ProbabilitySpace::torus(&[3, 3]).unwrap();
    let graph = LatticeGraph::standard(2).unwrap();
    let k = graph.len();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = RandomVariable::from_fn(&space, k * k, |_, out| {
        // Random uniformly elliptic coefficient: RᵀR + I per sample.
        let r: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for i in 0..k {
            for j in 0..k {
                let mut acc = f64::from(u8::from(i == j));
                for t in 0..k {
                    acc += r[t * k + i] * r[t * k + j];
                }
                out[i * k + j] = acc;
            }
        }
    });
    let q = QuadraticIntegrand::elastic(&space, &graph, a).unwrap();
    let integrand = Integrand::Quadratic(q);
    let probe = Probe::Strain(vec![1.0, 0.5, 0.5, -0.25]);
    c.bench_function("corrector cell problem, 3x3 torus", |b| {
        b.iter(|| solve_corrector(black_box(&integrand), black_box(&probe)).unwrap())
    });
}

criterion_group!(benches, bench_unfolding, bench_gradients, bench_cell_problem);
criterion_main!(benches);
