//! Run configuration: a flat TOML file with one section per concern.
//!
//! ```toml
//! [experiment]
//! name = "verify_duality"
//! seed = 7
//!
//! [grid]
//! x_lo = 0.0
//! x_hi = 1.0
//! n_x = 32
//!
//! [tree]
//! n_components = 1
//! n_steps = 8
//! horizon = 1.0
//!
//! [coefficients]
//! preset = "heat"
//! # preset_seed = 0        # for preset = "random"
//!
//! [solver]
//! tol = 1e-8
//! max_iter = 128
//!
//! [params]
//! trials = 20              # experiment-specific knobs, all optional
//! tau_level = 1
//! s_level = 4
//! refinements = 3
//! n_draws = 200
//! epsilons = [0.001, 0.002, 0.004]
//! k_list = [5.0, 10.0, 20.0, 50.0]
//! eps = 0.5
//! m_weights = [1.0, 10.0]
//!
//! [output]
//! dir = "out"              # overridden by ITOLAB_OUT_DIR when set
//! ```
//!
//! Missing sections fall back to the desk-scale defaults (N = 1, M = 8,
//! n_x = 32 on (0, 1) with horizon 1).

use serde::Deserialize;

use itolab_core::coeffs::Preset;
use itolab_core::{Grid, NoiseTree};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub tree: TreeSection,
    #[serde(default)]
    pub coefficients: CoefficientsSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub params: ParamsSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "default_x_lo")]
    pub x_lo: f64,
    #[serde(default = "default_x_hi")]
    pub x_hi: f64,
    #[serde(default = "default_n_x")]
    pub n_x: usize,
}

fn default_x_lo() -> f64 {
    0.0
}
fn default_x_hi() -> f64 {
    1.0
}
fn default_n_x() -> usize {
    32
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { x_lo: 0.0, x_hi: 1.0, n_x: 32 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSection {
    #[serde(default = "default_n_components")]
    pub n_components: usize,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
}

fn default_n_components() -> usize {
    1
}
fn default_n_steps() -> usize {
    8
}
fn default_horizon() -> f64 {
    1.0
}

impl Default for TreeSection {
    fn default() -> Self {
        TreeSection { n_components: 1, n_steps: 8, horizon: 1.0 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsSection {
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default)]
    pub preset_seed: Option<u64>,
}

fn default_preset() -> String {
    String::from("heat")
}

impl Default for CoefficientsSection {
    fn default() -> Self {
        CoefficientsSection { preset: default_preset(), preset_seed: None }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Damping shift for the Neumann route; the ladder policy when absent.
    #[serde(default)]
    pub k_shift: Option<f64>,
}

fn default_tol() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    128
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection { tol: default_tol(), max_iter: default_max_iter(), k_shift: None }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub trials: Option<usize>,
    pub tau_level: Option<usize>,
    pub s_level: Option<usize>,
    pub refinements: Option<usize>,
    pub n_draws: Option<usize>,
    pub epsilons: Option<Vec<f64>>,
    pub k_list: Option<Vec<f64>>,
    pub eps: Option<f64>,
    pub m_weights: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: String,
}

fn default_out_dir() -> String {
    String::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: default_out_dir() }
    }
}

/// Environment variable that overrides `[output].dir`.
pub const OUT_DIR_ENV: &str = "ITOLAB_OUT_DIR";

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        toml::from_str(text).map_err(|e| format!("config parse error: {e}"))
    }

    pub fn build_grid(&self) -> Result<Grid, String> {
        Grid::new(self.grid.x_lo, self.grid.x_hi, self.grid.n_x).map_err(|e| e.to_string())
    }

    pub fn build_tree(&self) -> Result<NoiseTree, String> {
        NoiseTree::new(self.tree.n_components, self.tree.n_steps, self.tree.horizon)
            .map_err(|e| e.to_string())
    }

    pub fn build_preset(&self) -> Result<Preset, String> {
        Preset::parse(&self.coefficients.preset, self.coefficients.preset_seed)
            .map_err(|e| e.to_string())
    }

    /// Output directory after the environment override.
    pub fn out_dir(&self) -> String {
        std::env::var(OUT_DIR_ENV).unwrap_or_else(|_| self.output.dir.clone())
    }
}
