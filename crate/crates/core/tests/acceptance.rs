//! Acceptance suite: one test per acceptance criterion, each printing a
//! pass/fail line (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! Criterion 11 (byte-identical CSV reruns through the CLI) lives in the
//! CLI crate's own `acceptance` test target.

use std::time::Instant;

use itolab_core::backward::solve_backward_deterministic_damped;
use itolab_core::coeffs::{
    coercivity_margin, example1_sample, strengthened_margin, Preset,
};
use itolab_core::forward::solve_forward_deterministic;
use itolab_core::grid::Grid;
use itolab_core::rng;
use itolab_core::tree::{martingale_representation, NoiseTree, Slice};
use itolab_core::verify;

const PI: f64 = core::f64::consts::PI;

struct Criterion {
    index: usize,
    title: &'static str,
    start: Instant,
}

impl Criterion {
    fn begin(index: usize, title: &'static str) -> Self {
        Criterion { index, title, start: Instant::now() }
    }

    fn pass(self, detail: &str) {
        println!(
            "criterion {:2} ({}): PASS [{:.2}s] {}",
            self.index,
            self.title,
            self.start.elapsed().as_secs_f64(),
            detail
        );
    }
}

/// The desk-scale suite shared by criteria 1 and 2: presets with their
/// matching tree sizes.
fn desk_suite() -> Vec<(Preset, usize, usize, usize)> {
    vec![
        // (preset, N, M, n_x)
        (Preset::Heat, 1, 6, 24),
        (Preset::Heat, 1, 8, 32),
        (Preset::Transport, 2, 6, 24),
        (Preset::Transport, 2, 8, 32),
    ]
}

#[test]
fn criterion_01_duality() {
    let c = Criterion::begin(1, "adjoint duality pairing ≤ 1e-11");
    let mut worst: f64 = 0.0;
    for (preset, n, m, n_x) in desk_suite() {
        let grid = Grid::new(0.0, 1.0, n_x).unwrap();
        let tree = NoiseTree::new(n, m, 1.0).unwrap();
        // 5 trials per combo → 20 seeded random input pairs in total.
        let report = verify::verify_duality(&preset, &grid, &tree, 5, 7).unwrap();
        assert!(report.passed(), "{}: {:?}", preset.name(), report.records);
        for r in &report.records {
            worst = worst.max(r.value);
        }
    }
    c.pass(&format!("worst relative mismatch {worst:.3e}"));
}

#[test]
fn criterion_02_cross_solver_agreement() {
    let c = Criterion::begin(2, "adjoint vs dynamic-programming route ≤ 1e-10");
    let mut worst: f64 = 0.0;
    for (preset, n, m, n_x) in desk_suite() {
        let grid = Grid::new(0.0, 1.0, n_x).unwrap();
        let tree = NoiseTree::new(n, m, 1.0).unwrap();
        let report = verify::cross_solver_report(&preset, &grid, &tree, 5, 11).unwrap();
        assert!(report.passed(), "{}: {:?}", preset.name(), report.records);
        for r in &report.records {
            worst = worst.max(r.value);
        }
    }
    c.pass(&format!("worst route gap {worst:.3e}"));
}

#[test]
fn criterion_03_neumann_decomposition() {
    let c = Criterion::begin(3, "Neumann route: bounded decay, match ≤ 1e-8");
    // Condition-3-positive presets; the default damping policy picks K.
    for (preset, n, m, n_x) in [
        (Preset::Transport, 2usize, 6usize, 24usize),
        (Preset::NearDegenerate, 1, 8, 32),
    ] {
        let grid = Grid::new(0.0, 1.0, n_x).unwrap();
        let tree = NoiseTree::new(n, m, 1.0).unwrap();
        let report =
            verify::neumann_report(&preset, &grid, &tree, 1e-8, 128, None, 13).unwrap();
        assert!(report.passed(), "{}: {:?}", preset.name(), report.records);
    }
    c.pass("residual decay within 10% of the contraction estimate; solutions match");
}

#[test]
fn criterion_04_example_certification() {
    let c = Criterion::begin(4, "known counterexample margins + implication suites");
    let s = example1_sample();
    let (std_margin, _) = coercivity_margin(std::slice::from_ref(&s)).unwrap();
    assert!(
        (std_margin - 0.01).abs() <= 1e-12,
        "standard margin {std_margin} should be 0.01"
    );
    let (str_margin, _) = strengthened_margin(std::slice::from_ref(&s)).unwrap();
    assert!(
        (str_margin + 0.49).abs() <= 1e-10,
        "strengthened margin {str_margin} should be -0.49"
    );
    // Implication property suites on 200 random draws with n ≤ 3, N ≤ 3.
    let grid = Grid::new(0.0, 1.0, 8).unwrap();
    let tree = NoiseTree::new(1, 2, 1.0).unwrap();
    let report = verify::condition_report(&Preset::Example1, &grid, &tree, 200, 17).unwrap();
    assert!(report.passed(), "{:?}", report.records);
    c.pass(&format!("margins {std_margin:.2e} / {str_margin:.2e}; 200 draws"));
}

#[test]
fn criterion_05_martingale_representation() {
    let c = Criterion::begin(5, "martingale representation exact to 1e-12");
    let mut worst: f64 = 0.0;
    for (n, seed) in [(1usize, 19u64), (2, 23)] {
        let tree = NoiseTree::new(n, 6, 1.0).unwrap();
        let mut r = rng::seeded(seed);
        for _ in 0..10 {
            let x = rng::terminal(&mut r, &tree, 3);
            let rep = martingale_representation(&tree, &x).unwrap();
            let rebuilt = rep.reconstruct(&tree);
            for leaf in 0..tree.nodes_at(tree.n_steps) {
                for j in 0..3 {
                    worst = worst.max((rebuilt.node(leaf)[j] - x.node(leaf)[j]).abs());
                }
            }
            if n == 1 {
                assert!(rep.residual.max_abs() <= 1e-12, "binary residual must vanish");
            }
        }
    }
    assert!(worst <= 1e-12, "reconstruction error {worst}");

    // w(T)² closed form vs enumeration.
    let tree = NoiseTree::new(1, 8, 2.0).unwrap();
    let mut x = Slice::zeros(&tree, tree.n_steps, 1);
    for leaf in 0..tree.nodes_at(tree.n_steps) {
        let w = tree.w_value(tree.n_steps, leaf, 0);
        x.node_mut(leaf)[0] = w * w;
    }
    let rep = martingale_representation(&tree, &x).unwrap();
    assert!((rep.mean[0] - tree.horizon).abs() <= 1e-12);
    let mut gamma_gap: f64 = 0.0;
    for k in 0..tree.n_steps {
        for node in 0..tree.nodes_at(k) {
            gamma_gap = gamma_gap
                .max((rep.gamma[0].value(k, node)[0] - 2.0 * tree.w_value(k, node, 0)).abs());
        }
    }
    assert!(gamma_gap <= 1e-12 && rep.residual.max_abs() <= 1e-12);
    c.pass(&format!("worst reconstruction gap {worst:.3e}, γ gap {gamma_gap:.3e}"));
}

#[test]
fn criterion_06_semigroup() {
    let c = Criterion::begin(6, "windowed re-solve ≤ 1e-11");
    let grid = Grid::new(0.0, 1.0, 24).unwrap();
    let tree = NoiseTree::new(2, 6, 1.0).unwrap();
    for (tau, s) in [(0usize, 5usize), (1, 4), (2, 3)] {
        let report =
            verify::verify_semigroup(&Preset::Transport, &grid, &tree, tau, s, 29).unwrap();
        assert!(report.passed(), "window ({tau},{s}): {:?}", report.records);
    }
    c.pass("three windows reproduced p and every χ component");
}

#[test]
fn criterion_07_energy_ratios() {
    let c = Criterion::begin(7, "energy ratios drift ≤ 2 across dyadic refinements");
    // Strengthened-margin-positive presets; three refinement levels each.
    let base_grid = Grid::new(0.0, 1.0, 12).unwrap();
    let base_tree = NoiseTree::new(1, 4, 1.0).unwrap();
    let report =
        verify::energy_ratio_report(&Preset::Driftful, &base_grid, &base_tree, 3, 31).unwrap();
    assert!(report.passed(), "driftful: {:?}", report.records);

    let base_tree = NoiseTree::new(2, 2, 1.0).unwrap();
    let report =
        verify::energy_ratio_report(&Preset::Transport, &base_grid, &base_tree, 3, 37).unwrap();
    assert!(report.passed(), "transport: {:?}", report.records);

    // Near-degenerate margin: ratios recorded (monitored), asserts must
    // still hold because its strengthened margin is positive.
    let base_tree = NoiseTree::new(1, 4, 1.0).unwrap();
    let report = verify::energy_ratio_report(&Preset::NearDegenerate, &base_grid, &base_tree, 3, 41)
        .unwrap();
    assert!(report.passed(), "neardegenerate: {:?}", report.records);
    c.pass("first- and second-order series bounded on all presets");
}

#[test]
fn criterion_08_robustness() {
    let c = Criterion::begin(8, "perturbation scaling: exact for load, near-linear overall");
    let grid = Grid::new(0.0, 1.0, 16).unwrap();
    let tree = NoiseTree::new(1, 6, 1.0).unwrap();
    let report = verify::robustness_experiment(
        &Preset::Driftful,
        &grid,
        &tree,
        &[1e-3, 2e-3, 4e-3],
        43,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.records);
    c.pass("load-only ratio 2 ± 1e-10; doubling ratios within [1.5, 2.5]");
}

#[test]
fn criterion_09_gradient_estimate() {
    let c = Criterion::begin(9, "damped gradient bound ≤ 1.05, monotone in damping");
    let grid = Grid::new(0.0, 1.0, 32).unwrap();
    let report = verify::gradient_estimate_experiment(
        &Preset::Heat,
        &grid,
        64,
        1.0,
        &[5.0, 10.0, 20.0, 50.0],
        0.5,
        &[1.0, 10.0],
        47,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.records);
    c.pass("largest damping satisfies the bound for both weight choices");
}

#[test]
fn criterion_10_heat_convergence() {
    let c = Criterion::begin(10, "deterministic heat refinement orders");
    let horizon = 0.25;
    let heat = |grid: &Grid| Preset::Heat.solver_coefficients(grid).unwrap();

    // Forward/backward error vs sin(πx)e^{−π²t} at the far end of the solve.
    let forward_err = |n_x: usize, m: usize| -> f64 {
        let grid = Grid::new(0.0, 1.0, n_x).unwrap();
        let coeffs = heat(&grid);
        let initial = grid.sample(|x| (PI * x).sin());
        let u = solve_forward_deterministic(coeffs.as_ref(), &grid, m, horizon, &initial, None)
            .unwrap();
        let mut err: f64 = 0.0;
        for j in 1..=grid.n_x {
            let exact = (PI * grid.node(j)).sin() * (-PI * PI * horizon).exp();
            err = err.max((u[m][j - 1] - exact).abs());
        }
        err
    };
    let backward_err = |n_x: usize, m: usize| -> f64 {
        let grid = Grid::new(0.0, 1.0, n_x).unwrap();
        let coeffs = heat(&grid);
        let terminal = grid.sample(|x| (PI * x).sin());
        let load = vec![vec![0.0; grid.n_x]; m];
        let u = solve_backward_deterministic_damped(
            coeffs.as_ref(),
            &grid,
            m,
            horizon,
            0.0,
            &load,
            &terminal,
        )
        .unwrap();
        let mut err: f64 = 0.0;
        for j in 1..=grid.n_x {
            let exact = (PI * grid.node(j)).sin() * (-PI * PI * horizon).exp();
            err = err.max((u[0][j - 1] - exact).abs());
        }
        err
    };

    // Δt halves at fixed fine h: error halves (±30%).
    for errf in [&forward_err as &dyn Fn(usize, usize) -> f64, &backward_err] {
        let e = [errf(127, 8), errf(127, 16), errf(127, 32)];
        for w in e.windows(2) {
            let ratio = w[0] / w[1];
            assert!(
                (1.4..=2.6).contains(&ratio),
                "time refinement ratio {ratio} out of band ({e:?})"
            );
        }
        // h halves at fixed fine Δt: error quarters (±30%).
        let e = [errf(6, 8192), errf(12, 8192), errf(24, 8192)];
        for w in e.windows(2) {
            let ratio = w[0] / w[1];
            assert!(
                (2.8..=5.2).contains(&ratio),
                "space refinement ratio {ratio} out of band ({e:?})"
            );
        }
    }
    c.pass("error halves with Δt and quarters with h, forward and backward");
}
