//! Subcommand bodies. Every command reads one TOML configuration, writes
//! its artifacts into the output directory from a single thread, and
//! reports whether its internal checks held. Outputs are deterministic
//! functions of configuration and seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use unfold_core::corrector::{
    assemble_homogenized_tensor, solve_corrector, Integrand, Probe, QuadraticIntegrand,
};
use unfold_core::eris::{
    evolution_convergence_study, evolve, time_grid, ErisState, ErisSpec, EvolutionStudyConfig,
};
use unfold_core::graph::StochasticKornReport;
use unfold_core::lattice::Grid;
use unfold_core::statics::{run_convergence_study, StudyConfig};

use crate::config::{
    self, ConfigError, CoefficientConfig, EvolveMode, FileConfig, KornSection, VerifySection,
};
use crate::verify::{korn_check, run_identity_suite, IdentityReport, KornCheck};

/// Result of a command that ran to completion: whether its checks passed
/// and a one-line human summary.
pub struct Outcome {
    pub passed: bool,
    pub summary: String,
}

fn write_out(out_dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(())
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct VerifyOutput {
    seed: u64,
    identities: IdentityReport,
    korn: KornCheck,
    pass: bool,
}

pub fn cmd_verify(cfg: &FileConfig, out_dir: &Path, seed: u64) -> anyhow::Result<Outcome> {
    let vcfg: VerifySection = cfg.verify.clone().unwrap_or_default();
    let kcfg: KornSection = cfg.korn.clone().unwrap_or_default();
    let graph = match cfg.graph {
        Some(_) => config::build_graph(cfg)?,
        None => unfold_core::graph::LatticeGraph::standard(2).expect("plane graph"),
    };

    let identities = run_identity_suite(vcfg.instances, seed, vcfg.tolerance)?;
    for check in &identities.checks {
        println!(
            "{} {} (worst residual {:.3e}, tolerance {:.1e})",
            if check.pass { "ok  " } else { "FAIL" },
            check.name,
            check.worst_residual,
            check.tolerance
        );
    }
    let korn = korn_check(&graph, &kcfg)?;
    println!(
        "{} korn sweep on {:?} ({} windows, drift {:.3e}, growth {:.3}, expected {:?})",
        if korn.pass { "ok  " } else { "FAIL" },
        graph.generators(),
        korn.report.windows.len(),
        korn.report.drift,
        korn.report.growth,
        korn.expect,
    );

    let pass = identities.pass && korn.pass;
    let output = VerifyOutput {
        seed,
        identities,
        korn,
        pass,
    };
    write_out(out_dir, "verify.json", &pretty(&output))?;
    Ok(Outcome {
        passed: pass,
        summary: format!(
            "{} identities over {} instances in {:.2}s",
            output.identities.checks.len(),
            output.identities.instances,
            output.identities.elapsed_seconds
        ),
    })
}

// ---------------------------------------------------------------------------
// korn
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct KornOutput {
    check: KornCheck,
    stochastic: Option<StochasticKornReport>,
}

pub fn cmd_korn(cfg: &FileConfig, out_dir: &Path, seed: u64) -> anyhow::Result<Outcome> {
    let kcfg: KornSection = cfg.korn.clone().unwrap_or_default();
    let graph = config::build_graph(cfg)?;
    let check = korn_check(&graph, &kcfg)?;
    let stochastic = if kcfg.stochastic_trials > 0 {
        let space = config::build_space(cfg)?;
        Some(graph.verify_stochastic_korn(&space, kcfg.stochastic_trials, seed)?)
    } else {
        None
    };
    let passed = check.pass;
    let summary = format!(
        "constant {:.4} over windows {:?}, drift {:.3e}, growth {:.3} ({:?}: {})",
        check.report.constant,
        kcfg.sides,
        check.report.drift,
        check.report.growth,
        check.expect,
        if passed { "as expected" } else { "contrary to expectation" },
    );
    let output = KornOutput { check, stochastic };
    write_out(out_dir, "korn.json", &pretty(&output))?;
    Ok(Outcome { passed, summary })
}

// ---------------------------------------------------------------------------
// corrector
// ---------------------------------------------------------------------------

/// Pick the block structure the coefficient section describes: hardening or
/// a `(2k)²` matrix means the elasto-plastic pair form, otherwise elastic.
fn infer_pair(cfg: &FileConfig, k: usize) -> Result<bool, ConfigError> {
    let section = cfg
        .coefficient
        .as_ref()
        .ok_or_else(|| ConfigError("missing [coefficient] section".into()))?;
    match section {
        CoefficientConfig::PerBond { hardening, .. }
        | CoefficientConfig::IidUniform { hardening, .. } => Ok(hardening.is_some()),
        CoefficientConfig::Matrix { rows } => {
            let len = rows.first().map_or(0, Vec::len);
            if len == k * k {
                Ok(false)
            } else if len == 4 * k * k {
                Ok(true)
            } else {
                Err(ConfigError(format!(
                    "coefficient: matrix with {len} entries is neither {k}×{k} nor {}×{}",
                    2 * k,
                    2 * k
                )))
            }
        }
    }
}

pub fn cmd_corrector(cfg: &FileConfig, out_dir: &Path, seed: u64) -> anyhow::Result<Outcome> {
    let ccfg = cfg.corrector.clone().unwrap_or_default();
    let space = config::build_space(cfg)?;
    let graph = config::build_graph(cfg)?;
    let pair = infer_pair(cfg, graph.len())?;
    let q: QuadraticIntegrand = if pair {
        config::build_pair(cfg, &space, &graph, seed)?
    } else {
        config::build_elastic(cfg, &space, &graph, seed)?
    };
    let tensor = assemble_homogenized_tensor(&q)?;
    write_out(out_dir, "tensor.json", &tensor.to_json())?;

    let wrapped = Integrand::Quadratic(q);
    let dim = tensor.arg_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("probe,tensor_value,corrector_value,residual,kkt\n");
    let mut worst = 0.0_f64;
    for p in 0..ccfg.probes {
        let f: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let direct = tensor.apply(&f);
        let probe = if pair {
            Probe::SymmetrizedPair(f)
        } else {
            Probe::Symmetrized(f)
        };
        let solution = solve_corrector(&wrapped, &probe)?;
        let residual = (direct - solution.value).abs() / (1.0 + direct.abs());
        worst = worst.max(residual);
        csv.push_str(&format!(
            "{p},{direct:.12e},{:.12e},{residual:.3e},{:.3e}\n",
            solution.value, solution.kkt_residual
        ));
    }
    write_out(out_dir, "probes.csv", &csv)?;
    let passed = worst <= ccfg.tolerance;
    Ok(Outcome {
        passed,
        summary: format!(
            "{}×{} tensor, c_hom {:.6}, {} probes, worst residual {:.3e} (tolerance {:.1e})",
            dim, dim, tensor.c_hom, ccfg.probes, worst, ccfg.tolerance
        ),
    })
}

// ---------------------------------------------------------------------------
// static
// ---------------------------------------------------------------------------

pub fn cmd_static(cfg: &FileConfig, out_dir: &Path, seed: u64) -> anyhow::Result<Outcome> {
    let space = config::build_space(cfg)?;
    let graph = config::build_graph(cfg)?;
    let section = config::study_section(cfg)?;
    if section.sides.len() != graph.dim() {
        return Err(ConfigError(format!(
            "study: {} box sides for dimension {}",
            section.sides.len(),
            graph.dim()
        ))
        .into());
    }
    let q = config::build_elastic(cfg, &space, &graph, seed)?;
    let load = config::build_load(cfg, graph.dim(), &section.sides)?;
    let study_config = StudyConfig {
        epsilons: section.epsilons.clone(),
        sides: section.sides.clone(),
        quad: config::quadrature_rule(section.quadrature)?,
        cg: config::cg_options(cfg),
    };
    let study = run_convergence_study(&q, |x, out| load.eval(x, out), &study_config)?;
    write_out(out_dir, "static_study.csv", &study.to_csv())?;
    write_out(out_dir, "static_study.json", &study.to_json())?;
    let first = study.rows.first().expect("nonempty study");
    let last = study.rows.last().expect("nonempty study");
    Ok(Outcome {
        passed: true,
        summary: format!(
            "{} scales, strong error {:.3e} @ ε={} → {:.3e} @ ε={}, homogenized energy {:.6}",
            study.rows.len(),
            first.strong_error_u,
            first.epsilon,
            last.strong_error_u,
            last.epsilon,
            study.homogenized_energy
        ),
    })
}

// ---------------------------------------------------------------------------
// evolve
// ---------------------------------------------------------------------------

pub fn cmd_evolve(cfg: &FileConfig, out_dir: &Path, seed: u64) -> anyhow::Result<Outcome> {
    let space = config::build_space(cfg)?;
    let graph = config::build_graph(cfg)?;
    let section = config::study_section(cfg)?;
    let evo = config::evolution_section(cfg)?;
    if section.sides.len() != graph.dim() {
        return Err(ConfigError(format!(
            "study: {} box sides for dimension {}",
            section.sides.len(),
            graph.dim()
        ))
        .into());
    }
    let q = config::build_pair(cfg, &space, &graph, seed)?;
    let sigma = config::build_sigma(evo, &space, graph.len())?;
    let gradient = config::build_gradient(evo, &space, graph.len())?;
    let load = config::build_load(cfg, graph.dim(), &section.sides)?.ramp();
    let quadrature = config::quadrature_rule(section.quadrature)?;
    let opts = config::eris_options(cfg);

    match evo.mode {
        EvolveMode::Study => {
            if evo.sample_times.is_empty() {
                return Err(ConfigError(
                    "evolution: study mode needs sample_times".into(),
                )
                .into());
            }
            let study_config = EvolutionStudyConfig {
                epsilons: section.epsilons.clone(),
                sides: section.sides.clone(),
                horizon: evo.horizon,
                steps: evo.steps,
                sample_times: evo.sample_times.clone(),
                quadrature,
                opts,
                gradient,
            };
            let study = evolution_convergence_study(&q, &sigma, load, &study_config)?;
            write_out(out_dir, "evolution_study.csv", &study.to_csv())?;
            write_out(out_dir, "evolution_study.json", &study.to_json())?;
            let t_final = evo.sample_times.last().copied().unwrap_or(evo.horizon);
            let finals: Vec<String> = study
                .rows
                .iter()
                .filter(|r| (r.time - t_final).abs() <= 1e-12 * evo.horizon.max(1.0))
                .map(|r| format!("ε={}: u {:.3e}, z {:.3e}", r.epsilon, r.error_u, r.error_z))
                .collect();
            Ok(Outcome {
                passed: true,
                summary: format!("errors at t={t_final}: {}", finals.join("; ")),
            })
        }
        EvolveMode::Trajectory => {
            let epsilon = section.epsilons[0];
            let grid = Grid::open_box(epsilon, &section.sides, graph.generators())?;
            let spec = ErisSpec::new(&q, &grid, &sigma, load, quadrature, gradient)?;
            let times = time_grid(evo.horizon, evo.steps);
            let y0 = ErisState::zeros(&spec);
            let trajectory = evolve(&spec, &y0, &times, &opts)?;
            write_out(out_dir, "trajectory.csv", &trajectory.to_csv())?;
            write_out(out_dir, "lipschitz.json", &pretty(&trajectory.lipschitz))?;
            let passed = trajectory.lipschitz.satisfied;
            let last = trajectory.steps.last().expect("nonempty trajectory");
            Ok(Outcome {
                passed,
                summary: format!(
                    "{} steps to t={}, final energy {:.6e}, dissipation {:.6e}, Lipschitz ratio {:.3} (bound {:.3})",
                    trajectory.steps.len(),
                    evo.horizon,
                    last.energy,
                    last.cumulative_dissipation,
                    trajectory.lipschitz.max_ratio,
                    trajectory.lipschitz.bound
                ),
            })
        }
    }
}
