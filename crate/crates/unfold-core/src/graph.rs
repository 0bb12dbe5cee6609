//! Lattice graphs `(Z^d, E)` generated by a finite edge set: difference
//! quotients along edges, symmetrized gradients and their adjoints, the
//! symmetrization of matrix-valued random variables, and empirical Korn
//! verification — deterministic (windowed eigenproblems) and stochastic
//! (on the space of potential fields).

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::LatticeFunction;
use crate::probability::{pot_basis, ProbabilitySpace, RandomField, RandomVariable};
use crate::solver::{generalized_eigen_min, lanczos_generalized_min};
use crate::util::pairwise_sum_of;

/// One nonzero entry `B(y)` of a sparse path weight `B: Z^d → R^d`.
///
/// The edge quotient along a generator `b` factors through unit steps as
/// `∂^ε u(x) = Σ_y ∇^ε u(x − εy) B(y)`; `weight` carries the `1/|b|`
/// normalization so the factorization reproduces `∂^ε` without further
/// scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEntry {
    pub offset: Vec<i64>,
    pub weight: Vec<f64>,
}

/// Serializable graph description: the generator list only. Everything else
/// (paths, lengths) is derived deterministically on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub generators: Vec<Vec<i64>>,
}

/// A lattice graph `(Z^d, E)` with edges `[x, x + b_i]` for a finite
/// generating set `{b_1, …, b_k}` that must contain the coordinate
/// directions. Each generator carries a canonical staircase path from `0`
/// to `b_i` (axis by axis, in axis order) making the path representation of
/// edge quotients reproducible.
#[derive(Debug, Clone)]
pub struct LatticeGraph {
    dim: usize,
    generators: Vec<Vec<i64>>,
    lengths: Vec<f64>,
    units: Vec<Vec<f64>>,
    paths: Vec<Vec<PathEntry>>,
}

impl LatticeGraph {
    pub fn new(generators: Vec<Vec<i64>>) -> Result<LatticeGraph> {
        let dim = match generators.first() {
            Some(g) => g.len(),
            None => {
                return Err(Error::InvalidConfig(
                    "edge generating set must be nonempty".into(),
                ))
            }
        };
        if dim == 0 {
            return Err(Error::InvalidConfig("generators must have dimension ≥ 1".into()));
        }
        for g in &generators {
            if g.len() != dim {
                return Err(Error::InvalidConfig(format!(
                    "generator {g:?} has dimension {} ≠ {dim}",
                    g.len()
                )));
            }
            if g.iter().all(|&v| v == 0) {
                return Err(Error::InvalidConfig("zero vector is not a valid generator".into()));
            }
        }
        for i in 0..generators.len() {
            for j in i + 1..generators.len() {
                if generators[i] == generators[j] {
                    return Err(Error::InvalidConfig(format!(
                        "duplicate generator {:?}",
                        generators[i]
                    )));
                }
            }
        }
        for a in 0..dim {
            let unit: Vec<i64> = (0..dim).map(|c| i64::from(c == a)).collect();
            if !generators.contains(&unit) {
                return Err(Error::InvalidConfig(format!(
                    "generating set must contain e_{} = {unit:?}",
                    a + 1
                )));
            }
        }
        let lengths: Vec<f64> = generators
            .iter()
            .map(|g| (g.iter().map(|&v| (v * v) as f64).sum::<f64>()).sqrt())
            .collect();
        let units: Vec<Vec<f64>> = generators
            .iter()
            .zip(&lengths)
            .map(|(g, &l)| g.iter().map(|&v| v as f64 / l).collect())
            .collect();
        let paths = generators
            .iter()
            .zip(&lengths)
            .map(|(g, &l)| staircase_path(g, l))
            .collect();
        Ok(LatticeGraph {
            dim,
            generators,
            lengths,
            units,
            paths,
        })
    }

    /// The graph with all `{0,1}`-combinations of coordinate directions as
    /// generators (`2^d − 1` edges), ordered by sparsity then axis order.
    /// In `d = 2` this is `{e1, e2, e1+e2}`.
    pub fn standard(dim: usize) -> Result<LatticeGraph> {
        if dim == 0 || dim > 20 {
            return Err(Error::InvalidConfig(format!("unsupported dimension {dim}")));
        }
        let mut gens: Vec<Vec<i64>> = (1..(1u32 << dim))
            .map(|mask| (0..dim).map(|a| i64::from(mask >> a & 1 == 1)).collect())
            .collect();
        gens.sort_by_key(|g: &Vec<i64>| {
            (g.iter().filter(|&&v| v != 0).count(), g.iter().rev().cloned().collect::<Vec<_>>())
        });
        LatticeGraph::new(gens)
    }

    /// Coordinate directions only. For `d ≥ 2` this graph violates the Korn
    /// inequality (axial strains do not control shears) and serves as the
    /// negative control in the verification tests.
    pub fn axes(dim: usize) -> Result<LatticeGraph> {
        let gens = (0..dim)
            .map(|a| (0..dim).map(|c| i64::from(c == a)).collect())
            .collect();
        LatticeGraph::new(gens)
    }

    pub fn from_spec(spec: &GraphSpec) -> Result<LatticeGraph> {
        LatticeGraph::new(spec.generators.clone())
    }

    pub fn spec(&self) -> GraphSpec {
        GraphSpec {
            generators: self.generators.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of generators `k`.
    pub fn len(&self) -> usize {
        self.generators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }

    pub fn generators(&self) -> &[Vec<i64>] {
        &self.generators
    }

    pub fn generator(&self, i: usize) -> &[i64] {
        &self.generators[i]
    }

    pub fn length(&self, i: usize) -> f64 {
        self.lengths[i]
    }

    pub fn unit(&self, i: usize) -> &[f64] {
        &self.units[i]
    }

    pub fn path(&self, i: usize) -> &[PathEntry] {
        &self.paths[i]
    }

    /// Stable digest of the generator list, used in report provenance.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::util::Fnv1a::new();
        h.update_usize(&[self.dim, self.generators.len()]);
        for g in &self.generators {
            for &v in g {
                h.update(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    /// `ℓ²→ℓ²` bound for `∇_s` in terms of `∇` from the path representation:
    /// `‖∇_s u‖ ≤ bound·‖∇u‖` whenever shifts act isometrically (periodic
    /// windows, or zero extension with `u` supported away from the window
    /// boundary).
    pub fn path_operator_bound(&self) -> f64 {
        self.paths
            .iter()
            .map(|path| {
                path.iter()
                    .map(|e| e.weight.iter().map(|w| w * w).sum::<f64>().sqrt())
                    .sum::<f64>()
                    .powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    fn expect_vector(&self, u: &LatticeFunction) -> Result<()> {
        if u.components != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "vector field must have {} components, got {}",
                self.dim, u.components
            )));
        }
        if u.grid.dim() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "grid dimension {} vs graph dimension {}",
                u.grid.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Difference quotient along edge `i`: `(u(x+εb_i) − u(x))/(ε|b_i|)`,
    /// resolved per boundary convention (zero extension outside windows).
    pub fn edge_quotient(&self, u: &LatticeFunction, i: usize) -> Result<LatticeFunction> {
        self.expect_vector(u)?;
        let b = &self.generators[i];
        let scale = 1.0 / (u.grid.epsilon() * self.lengths[i]);
        let d = self.dim;
        let mut out = LatticeFunction::zeros(&u.grid, d);
        for s in 0..u.grid.n_sites() {
            let head = u.grid.offset_site(s, b);
            for c in 0..d {
                let uh = head.map_or(0.0, |t| u.value(t, c));
                out.values[s * d + c] = (uh - u.value(s, c)) * scale;
            }
        }
        Ok(out)
    }

    /// Edge quotient through the staircase path, `Σ_y ∇^ε u(x−εy) B_i(y)`.
    ///
    /// Agrees with [`LatticeGraph::edge_quotient`] on periodic windows, and on
    /// zero-extension windows wherever `u` vanishes within `max_a |b_a|` sites
    /// of the window boundary (the path needs gradient values just outside the
    /// stored window otherwise).
    pub fn edge_quotient_via_paths(&self, u: &LatticeFunction, i: usize) -> Result<LatticeFunction> {
        self.expect_vector(u)?;
        let grad = crate::lattice::discrete_gradient(u);
        let d = self.dim;
        let mut out = LatticeFunction::zeros(&u.grid, d);
        for s in 0..u.grid.n_sites() {
            for entry in &self.paths[i] {
                let neg: Vec<i64> = entry.offset.iter().map(|&v| -v).collect();
                let Some(t) = u.grid.offset_site(s, &neg) else {
                    continue;
                };
                for c in 0..d {
                    let mut acc = 0.0;
                    for a in 0..d {
                        acc += grad.value(t, c * d + a) * entry.weight[a];
                    }
                    out.values[s * d + c] += acc;
                }
            }
        }
        Ok(out)
    }

    /// Discrete symmetrized gradient: component `i` is `(b_i/|b_i|)·∂_i^ε u`,
    /// the axial strain of the spring along `b_i`.
    pub fn symmetrized_gradient(&self, u: &LatticeFunction) -> Result<LatticeFunction> {
        self.expect_vector(u)?;
        let d = self.dim;
        let k = self.len();
        let mut out = LatticeFunction::zeros(&u.grid, k);
        for s in 0..u.grid.n_sites() {
            for i in 0..k {
                let scale = 1.0 / (u.grid.epsilon() * self.lengths[i]);
                let head = u.grid.offset_site(s, &self.generators[i]);
                let mut acc = 0.0;
                for c in 0..d {
                    let uh = head.map_or(0.0, |t| u.value(t, c));
                    acc += self.units[i][c] * (uh - u.value(s, c));
                }
                out.values[s * k + i] = acc * scale;
            }
        }
        Ok(out)
    }

    /// Adjoint of [`LatticeGraph::symmetrized_gradient`]:
    /// `(∇_s^{ε,*} g)_c(x) = Σ_i (b̂_i)_c (g_i(x−εb_i) − g_i(x))/(ε|b_i|)`,
    /// so `⟨∇_s u, g⟩ = ⟨u, ∇_s^* g⟩` exactly under both boundary
    /// conventions.
    pub fn symmetrized_divergence(&self, g: &LatticeFunction) -> Result<LatticeFunction> {
        let k = self.len();
        if g.components != k {
            return Err(Error::ShapeMismatch(format!(
                "expected {k} edge components, got {}",
                g.components
            )));
        }
        if g.grid.dim() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "grid dimension {} vs graph dimension {}",
                g.grid.dim(),
                self.dim
            )));
        }
        let d = self.dim;
        let mut out = LatticeFunction::zeros(&g.grid, d);
        for s in 0..g.grid.n_sites() {
            for i in 0..k {
                let scale = 1.0 / (g.grid.epsilon() * self.lengths[i]);
                let neg: Vec<i64> = self.generators[i].iter().map(|&v| -v).collect();
                let tail = g.grid.offset_site(s, &neg);
                let gt = tail.map_or(0.0, |t| g.value(t, i));
                let diff = (gt - g.value(s, i)) * scale;
                for c in 0..d {
                    out.values[s * d + c] += self.units[i][c] * diff;
                }
            }
        }
        Ok(out)
    }

    /// Per-sample symmetrized gradient of a random lattice field.
    pub fn symmetrized_gradient_field(&self, u: &RandomField) -> Result<RandomField> {
        if u.components != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "vector field must have {} components, got {}",
                self.dim, u.components
            )));
        }
        let k = self.len();
        let mut out = RandomField::zeros(&u.space, &u.grid, k);
        for s in 0..u.space.len() {
            let per_sample = self.symmetrized_gradient(&u.sample_function(s))?;
            out.sample_slice_mut(s).copy_from_slice(&per_sample.values);
        }
        Ok(out)
    }

    /// Deterministic symmetrization of a `d×d` matrix (row-major):
    /// `(F_s)_i = b̂_i · F b̂_i`.
    pub fn symmetrize_matrix(&self, f: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        if f.len() != d * d {
            return Err(Error::ShapeMismatch(format!(
                "expected a {d}×{d} matrix, got {} entries",
                f.len()
            )));
        }
        Ok((0..self.len())
            .map(|i| {
                let b = &self.units[i];
                let mut acc = 0.0;
                for r in 0..d {
                    for a in 0..d {
                        acc += b[r] * f[r * d + a] * b[a];
                    }
                }
                acc
            })
            .collect())
    }

    /// Symmetrization of a matrix-valued random variable through the paths:
    /// `(F_s)_i(ω) = b̂_i · Σ_y F(T_{−y}ω) B_i(y)`. Component layout of the
    /// input follows the horizontal derivative: entry `(r, a)` at `r·d + a`.
    pub fn symmetrize_random(&self, f: &RandomVariable) -> Result<RandomVariable> {
        let d = self.dim;
        if f.space.dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "space dimension {} vs graph dimension {}",
                f.space.dim(),
                d
            )));
        }
        if f.components != d * d {
            return Err(Error::ShapeMismatch(format!(
                "expected {d}×{d} matrix components, got {}",
                f.components
            )));
        }
        let k = self.len();
        let mut out = RandomVariable::zeros(&f.space, k);
        for s in 0..f.space.len() {
            for i in 0..k {
                let mut acc = 0.0;
                for entry in &self.paths[i] {
                    let neg: Vec<i64> = entry.offset.iter().map(|&v| -v).collect();
                    let t = f.space.shift(s, &neg);
                    for r in 0..d {
                        for a in 0..d {
                            acc += self.units[i][r] * f.value(t, r * d + a) * entry.weight[a];
                        }
                    }
                }
                out.values[s * k + i] = acc;
            }
        }
        Ok(out)
    }

    /// Symmetrized horizontal derivative `D_s u` computed directly per edge:
    /// `(D_s u)_i(ω) = b̂_i · (u(T_{b_i}ω) − u(ω))/|b_i|`. Provides the
    /// stencil counterpart of `symmetrize_random(Du)`; the two agree exactly
    /// by telescoping, which the tests pin down.
    pub fn symmetrized_horizontal(&self, u: &RandomVariable) -> Result<RandomVariable> {
        let d = self.dim;
        if u.space.dim() != d || u.components != d {
            return Err(Error::ShapeMismatch(format!(
                "expected a {d}-component variable on a {d}-dimensional space, got {} on {}",
                u.components,
                u.space.dim()
            )));
        }
        let k = self.len();
        let mut out = RandomVariable::zeros(&u.space, k);
        for s in 0..u.space.len() {
            for i in 0..k {
                let t = u.space.shift(s, &self.generators[i]);
                let mut acc = 0.0;
                for c in 0..d {
                    acc += self.units[i][c] * (u.value(t, c) - u.value(s, c));
                }
                out.values[s * k + i] = acc / self.lengths[i];
            }
        }
        Ok(out)
    }

    /// Dense quadratic forms of the windowed Korn eigenproblem on
    /// `{0..side−1}^d` with zero extension: `S_g` sums `|u(q)−u(p)|²` over
    /// all unit edges touching the window, `S_s` sums
    /// `|b̂·(u(q)−u(p))|²/|b|²` over all generator edges. Dof layout:
    /// `site·d + component`, sites row-major.
    fn korn_forms(&self, side: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.dim;
        let n: usize = side.pow(d as u32);
        let nd = n * d;
        let mut s_g = DMatrix::<f64>::zeros(nd, nd);
        let mut s_s = DMatrix::<f64>::zeros(nd, nd);

        let site = |z: &[i64]| -> Option<usize> {
            let mut idx = 0usize;
            for &c in z {
                if c < 0 || c >= side as i64 {
                    return None;
                }
                idx = idx * side + c as usize;
            }
            Some(idx)
        };

        let reach = self
            .generators
            .iter()
            .flat_map(|g| g.iter().map(|v| v.abs()))
            .max()
            .unwrap_or(1);
        let lo = -reach;
        let hi = side as i64 + reach;
        let mut z = vec![lo; d];
        loop {
            let tail = site(&z);
            // unit edges: component-diagonal difference pattern
            for a in 0..d {
                let mut q = z.clone();
                q[a] += 1;
                let head = site(&q);
                if tail.is_none() && head.is_none() {
                    continue;
                }
                for c in 0..d {
                    let ip = tail.map(|p| p * d + c);
                    let iq = head.map(|p| p * d + c);
                    if let Some(i) = ip {
                        s_g[(i, i)] += 1.0;
                    }
                    if let Some(i) = iq {
                        s_g[(i, i)] += 1.0;
                    }
                    if let (Some(i), Some(j)) = (ip, iq) {
                        s_g[(i, j)] -= 1.0;
                        s_g[(j, i)] -= 1.0;
                    }
                }
            }
            // generator edges: rank-one in the contracted direction
            for (g, &l) in self.generators.iter().zip(&self.lengths) {
                let q: Vec<i64> = z.iter().zip(g).map(|(&c, &b)| c + b).collect();
                let head = site(&q);
                if tail.is_none() && head.is_none() {
                    continue;
                }
                let inv_sq = 1.0 / (l * l);
                let mut entries: Vec<(usize, f64)> = Vec::with_capacity(2 * d);
                for c in 0..d {
                    let v = g[c] as f64 * inv_sq; // (b̂/|b|)_c
                    if v == 0.0 {
                        continue;
                    }
                    if let Some(p) = head {
                        entries.push((p * d + c, v));
                    }
                    if let Some(p) = tail {
                        entries.push((p * d + c, -v));
                    }
                }
                for &(i, wi) in &entries {
                    for &(j, wj) in &entries {
                        s_s[(i, j)] += wi * wj;
                    }
                }
            }
            // advance the odometer
            let mut axis = d;
            for a in (0..d).rev() {
                z[a] += 1;
                if z[a] < hi {
                    axis = a;
                    break;
                }
                z[a] = lo;
            }
            if axis == d {
                break;
            }
        }
        (s_g, s_s)
    }

    /// Windowed Korn verification: on each window, the best constant in
    /// `Σ|∇u|² ≤ C Σ|∇_s u|²` over compactly supported `u` is
    /// `1/λ_min(S_s, S_g)`. Dense generalized eigensolve up to ~1600 dofs,
    /// Lanczos with a prefactored Cholesky beyond that.
    pub fn verify_korn(&self, sides: &[usize]) -> Result<KornReport> {
        if sides.is_empty() {
            return Err(Error::InvalidConfig("no window sizes given".into()));
        }
        let mut windows = Vec::with_capacity(sides.len());
        for &side in sides {
            if side < 2 {
                return Err(Error::InvalidConfig(format!("window side {side} too small")));
            }
            let (s_g, s_s) = self.korn_forms(side);
            let nd = s_g.nrows();
            let lambda_min = if nd <= 1600 {
                generalized_eigen_min(&s_s, &s_g)?
            } else {
                let chol = s_g.clone().cholesky().ok_or_else(|| {
                    Error::Coercivity("gradient form is not positive definite".into())
                })?;
                lanczos_generalized_min(
                    nd,
                    |x, out| dense_apply(&s_s, x, out),
                    |x, out| dense_apply(&s_g, x, out),
                    |x, out| {
                        let sol = chol.solve(&nalgebra::DVector::from_column_slice(x));
                        out.copy_from_slice(sol.as_slice());
                        Ok(())
                    },
                    400,
                    0x4b4f524e,
                )?
            };
            if !(lambda_min > 0.0) {
                return Err(Error::Coercivity(format!(
                    "windowed symmetrized form degenerate: λ_min = {lambda_min:e} at side {side}"
                )));
            }
            windows.push(KornWindow {
                side,
                dofs: nd,
                lambda_min,
                constant: 1.0 / lambda_min,
            });
        }
        let constants: Vec<f64> = windows.iter().map(|w| w.constant).collect();
        let drift = constants
            .windows(2)
            .map(|p| (p[1] - p[0]).abs() / p[1])
            .fold(0.0, f64::max);
        let growth = constants[constants.len() - 1] / constants[0];
        let monotone = constants.windows(2).all(|p| p[1] >= p[0] * (1.0 - 1e-9));
        Ok(KornReport {
            dim: self.dim,
            generators: self.generators.clone(),
            windows,
            constant: constants[constants.len() - 1],
            drift,
            growth,
            monotone,
        })
    }

    /// Stochastic Korn verification on `L²_pot(Ω)^d`: exhaustive Rayleigh
    /// minimization of `⟨|χ_s|²⟩` against `⟨|χ|²⟩` over the potential basis,
    /// plus randomized trials `χ = Dφ` confirming the constant. A graph that
    /// violates Korn shows up as `λ_min ≈ 0` and `constant = None`.
    pub fn verify_stochastic_korn(
        &self,
        space: &Arc<ProbabilitySpace>,
        trials: usize,
        seed: u64,
    ) -> Result<StochasticKornReport> {
        let d = self.dim;
        if space.dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "space dimension {} vs graph dimension {}",
                space.dim(),
                d
            )));
        }
        let basis = pot_basis(space, d)?;
        let r = basis.len();
        if r == 0 {
            return Ok(StochasticKornReport {
                dim_pot: 0,
                empty: true,
                lambda_min: None,
                constant: None,
                worst_ratio: None,
                trials: 0,
            });
        }
        let sym: Vec<RandomVariable> = basis
            .iter()
            .map(|chi| self.symmetrize_random(chi))
            .collect::<Result<_>>()?;
        let mut s = DMatrix::<f64>::zeros(r, r);
        let mut g = DMatrix::<f64>::zeros(r, r);
        for j in 0..r {
            for l in 0..=j {
                let sv = sym[j].inner(&sym[l])?;
                let gv = basis[j].inner(&basis[l])?;
                s[(j, l)] = sv;
                s[(l, j)] = sv;
                g[(j, l)] = gv;
                g[(l, j)] = gv;
            }
        }
        let lambda_min = generalized_eigen_min(&s, &g)?;
        let scale = (0..r).map(|j| s[(j, j)]).fold(0.0, f64::max);
        let constant = (lambda_min > 1e-12 * scale.max(1.0)).then(|| 1.0 / lambda_min);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: Option<f64> = None;
        for _ in 0..trials {
            let phi = RandomVariable::from_fn(space, d, |_, slot| {
                for v in slot.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
            });
            let chi = phi.horizontal_derivative();
            let num = chi.norm_l2().powi(2);
            let den = self.symmetrized_horizontal(&phi)?.norm_l2().powi(2);
            if den > 1e-300 && num > 1e-300 {
                let ratio = num / den;
                worst = Some(worst.map_or(ratio, |w: f64| w.max(ratio)));
            }
        }
        Ok(StochasticKornReport {
            dim_pot: r,
            empty: false,
            lambda_min: Some(lambda_min),
            constant,
            worst_ratio: worst,
            trials,
        })
    }
}

fn dense_apply(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let n = m.nrows();
    for i in 0..n {
        out[i] = pairwise_sum_of(n, |j| m[(i, j)] * x[j]);
    }
}

/// Canonical staircase path from `0` to `b`: walk axis 1 first, then axis 2,
/// and so on, one unit step at a time. Entries are keyed by the offset `y`
/// appearing in `∇^ε u(x − εy)`; coefficients carry `±1/|b|`.
fn staircase_path(b: &[i64], length: f64) -> Vec<PathEntry> {
    let d = b.len();
    let mut acc: BTreeMap<Vec<i64>, Vec<f64>> = BTreeMap::new();
    let mut pos = vec![0i64; d];
    for a in 0..d {
        let step = if b[a] >= 0 { 1i64 } else { -1 };
        for _ in 0..b[a].abs() {
            // forward step reads ∇_a at the current point, backward at the
            // destination: u(p−e_a)−u(p) = −(∇_a u)(p−e_a)
            let mut eval = pos.clone();
            if step < 0 {
                eval[a] -= 1;
            }
            let y: Vec<i64> = eval.iter().map(|&v| -v).collect();
            acc.entry(y).or_insert_with(|| vec![0.0; d])[a] += step as f64 / length;
            pos[a] += step;
        }
    }
    debug_assert_eq!(pos, b, "staircase must land on the generator");
    acc.into_iter()
        .map(|(offset, weight)| PathEntry { offset, weight })
        .collect()
}

/// One window of a [`KornReport`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KornWindow {
    pub side: usize,
    pub dofs: usize,
    pub lambda_min: f64,
    pub constant: f64,
}

/// Result of windowed Korn verification. `constant` is the largest-window
/// estimate; `drift` the worst consecutive relative change (measured against
/// the later, better-resolved window); `growth` the last/first ratio. The
/// constants are nondecreasing in window size because zero extension embeds
/// each window's admissible set into the next — `monotone` records that.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KornReport {
    pub dim: usize,
    pub generators: Vec<Vec<i64>>,
    pub windows: Vec<KornWindow>,
    pub constant: f64,
    pub drift: f64,
    pub growth: f64,
    pub monotone: bool,
}

impl KornReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<KornReport> {
        serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Result of stochastic Korn verification over `L²_pot(Ω)^d`. `empty` flags
/// the vacuous case `ran D = {0}` (singleton or otherwise trivial spaces);
/// `constant = None` with `lambda_min ≈ 0` means the graph admits potential
/// fields with vanishing symmetrization (Korn fails).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StochasticKornReport {
    pub dim_pot: usize,
    pub empty: bool,
    pub lambda_min: Option<f64>,
    pub constant: Option<f64>,
    pub worst_ratio: Option<f64>,
    pub trials: usize,
}

impl StochasticKornReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<StochasticKornReport> {
        serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))
    }
}
