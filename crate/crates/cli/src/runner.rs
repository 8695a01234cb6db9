//! Experiment dispatch and report writing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use itolab_core::coeffs::certify_preset;
use itolab_core::verify::{self, ExperimentReport};

use crate::config::RunConfig;

/// One catalogue entry: name, what it checks, and default knobs.
pub struct ExperimentInfo {
    pub name: &'static str,
    pub checks: &'static str,
    pub defaults: &'static str,
}

pub const EXPERIMENTS: &[ExperimentInfo] = &[
    ExperimentInfo {
        name: "verify_duality",
        checks: "forward/backward adjoint pairing and per-map adjoint identities (≤ 1e-11 rel)",
        defaults: "trials=20",
    },
    ExperimentInfo {
        name: "cross_solver",
        checks: "adjoint vs dynamic-programming backward routes (≤ 1e-10) and equation residuals",
        defaults: "trials=20",
    },
    ExperimentInfo {
        name: "verify_semigroup",
        checks: "windowed re-solve reproduces p and every noise integrand (≤ 1e-11)",
        defaults: "tau_level=1, s_level=M-2",
    },
    ExperimentInfo {
        name: "energy_ratio_report",
        checks: "first/second-order energy ratios bounded (drift ≤ 2) across dyadic refinements",
        defaults: "refinements=3",
    },
    ExperimentInfo {
        name: "robustness_experiment",
        checks: "near-linear solution response to bounded coefficient perturbations",
        defaults: "epsilons=[1e-3, 2e-3, 4e-3]",
    },
    ExperimentInfo {
        name: "gradient_estimate_experiment",
        checks: "damped deterministic gradient bound ≤ 1.05 and monotone in the damping",
        defaults: "k_list=[5,10,20,50], eps=0.5, m_weights=[1,10]",
    },
    ExperimentInfo {
        name: "contraction_report",
        checks: "power-iteration contraction estimates of the tilted coupling operator",
        defaults: "k_list=[0,2,5,10,20,50]",
    },
    ExperimentInfo {
        name: "neumann_report",
        checks: "Neumann-route convergence bounded by the estimate; matches direct routes",
        defaults: "tol from [solver]",
    },
    ExperimentInfo {
        name: "k_shift_report",
        checks: "reaction-shift roundtrip deviations (exact at zero shift, O(dt) otherwise)",
        defaults: "k_list=[2,5,10]",
    },
    ExperimentInfo {
        name: "condition_report",
        checks: "coercivity margins with argmin locations plus implication suites on random draws",
        defaults: "n_draws=200",
    },
];

pub fn list_text() -> String {
    let mut out = String::new();
    let _ = writeln!(out, "available experiments:");
    for e in EXPERIMENTS {
        let _ = writeln!(out, "  {:<30} {}", e.name, e.checks);
        let _ = writeln!(out, "  {:<30}   defaults: {}", "", e.defaults);
    }
    let _ = writeln!(
        out,
        "\ncoefficient presets: heat, driftful, transport, neardegenerate, random(seed), example1"
    );
    out
}

/// Outcome of a run: the report plus any extra CSV files to write.
pub struct RunOutput {
    pub report: ExperimentReport,
    pub extra_files: Vec<(String, String)>,
}

pub fn dispatch(cfg: &RunConfig) -> Result<RunOutput, String> {
    let grid = cfg.build_grid()?;
    let preset = cfg.build_preset()?;
    // The gradient experiment runs on a single deterministic path and only
    // needs the time discretization, not a materialized tree.
    if cfg.experiment.name == "gradient_estimate_experiment" {
        let p = &cfg.params;
        let k_list = p.k_list.clone().unwrap_or_else(|| vec![5.0, 10.0, 20.0, 50.0]);
        let m_weights = p.m_weights.clone().unwrap_or_else(|| vec![1.0, 10.0]);
        let report = verify::gradient_estimate_experiment(
            &preset,
            &grid,
            cfg.tree.n_steps.max(16),
            cfg.tree.horizon,
            &k_list,
            p.eps.unwrap_or(0.5),
            &m_weights,
            cfg.experiment.seed,
        )
        .map_err(|e| e.to_string())?;
        return Ok(RunOutput { report, extra_files: Vec::new() });
    }
    let tree = cfg.build_tree()?;
    let seed = cfg.experiment.seed;
    let p = &cfg.params;
    let err = |e: itolab_core::Error| e.to_string();

    let mut extra_files = Vec::new();
    let report = match cfg.experiment.name.as_str() {
        "verify_duality" => {
            verify::verify_duality(&preset, &grid, &tree, p.trials.unwrap_or(20), seed)
                .map_err(err)?
        }
        "cross_solver" => {
            verify::cross_solver_report(&preset, &grid, &tree, p.trials.unwrap_or(20), seed)
                .map_err(err)?
        }
        "verify_semigroup" => {
            let tau = p.tau_level.unwrap_or(1);
            let s = p.s_level.unwrap_or(tree.n_steps.saturating_sub(2));
            verify::verify_semigroup(&preset, &grid, &tree, tau, s, seed).map_err(err)?
        }
        "energy_ratio_report" => {
            verify::energy_ratio_report(&preset, &grid, &tree, p.refinements.unwrap_or(3), seed)
                .map_err(err)?
        }
        "robustness_experiment" => {
            let eps = p.epsilons.clone().unwrap_or_else(|| vec![1e-3, 2e-3, 4e-3]);
            verify::robustness_experiment(&preset, &grid, &tree, &eps, seed).map_err(err)?
        }
        "contraction_report" => {
            let k_list =
                p.k_list.clone().unwrap_or_else(|| vec![0.0, 2.0, 5.0, 10.0, 20.0, 50.0]);
            verify::contraction_report(&preset, &grid, &tree, &k_list).map_err(err)?
        }
        "neumann_report" => {
            verify::neumann_report(
                &preset,
                &grid,
                &tree,
                cfg.solver.tol,
                cfg.solver.max_iter,
                cfg.solver.k_shift,
                seed,
            )
            .map_err(err)?
        }
        "k_shift_report" => {
            let k_list = p.k_list.clone().unwrap_or_else(|| vec![2.0, 5.0, 10.0]);
            verify::k_shift_report(&preset, &grid, &tree, &k_list, seed).map_err(err)?
        }
        "condition_report" => {
            let report =
                verify::condition_report(&preset, &grid, &tree, p.n_draws.unwrap_or(200), seed)
                    .map_err(err)?;
            let margins = certify_preset(&preset, &grid, &tree).map_err(err)?;
            extra_files.push((String::from("margins.csv"), margins.to_csv()));
            report
        }
        other => {
            return Err(format!(
                "unknown experiment `{other}`; run `itolab list` for the catalogue"
            ))
        }
    };
    Ok(RunOutput { report, extra_files })
}

/// Deterministic human-readable summary (no wall-clock content).
pub fn summary_text(cfg: &RunConfig, report: &ExperimentReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "experiment: {}", report.name);
    let _ = writeln!(
        out,
        "grid: ({}, {}) with n_x = {}",
        cfg.grid.x_lo, cfg.grid.x_hi, cfg.grid.n_x
    );
    let _ = writeln!(
        out,
        "tree: N = {}, M = {}, T = {}",
        cfg.tree.n_components, cfg.tree.n_steps, cfg.tree.horizon
    );
    let _ = writeln!(
        out,
        "coefficients: {} (seed {:?})",
        cfg.coefficients.preset, cfg.coefficients.preset_seed
    );
    let _ = writeln!(out, "seed: {}", cfg.experiment.seed);
    let _ = writeln!(out);
    for r in &report.records {
        let status = match r.pass {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "    ",
        };
        let _ = writeln!(out, "  [{status}] {:<42} {:e}", r.label, r.value);
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "overall: {}", if report.passed() { "PASS" } else { "FAIL" });
    out
}

pub fn write_outputs(dir: &Path, cfg: &RunConfig, out: &RunOutput) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let csv_path = dir.join(format!("{}.csv", out.report.name));
    fs::write(&csv_path, out.report.to_csv())
        .map_err(|e| format!("cannot write {}: {e}", csv_path.display()))?;
    for (name, content) in &out.extra_files {
        let path = dir.join(name);
        fs::write(&path, content).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    }
    let summary_path = dir.join("summary.txt");
    fs::write(&summary_path, summary_text(cfg, &out.report))
        .map_err(|e| format!("cannot write {}: {e}", summary_path.display()))?;
    Ok(())
}
