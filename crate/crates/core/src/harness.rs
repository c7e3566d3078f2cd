//! Reproducible tracking experiments: scenario configuration, deterministic
//! RNG substreams, ground-truth generation, the filter/policy loop under
//! common random numbers, NMSE bookkeeping, and report rendering (trace CSV
//! plus a versioned summary document).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{
    evolve, heat_source_trajectory, observe, EvolutionModel, ObservationNoise, SignalPrior,
    StaticEvolution, TranslationEvolution,
};
use crate::error::{Error, Result};
use crate::graph::{
    community_graph, random_geometric_graph, res_realize, SpectralBasis, WeightedGraph,
};
use crate::kalman::{instant_mse, predict, update, FilterState};
use crate::optimizer::{BudgetParams, SolverOptions};
use crate::policies::{policy_greedy_instant, policy_info_gain, policy_proposed, policy_random};

/// Environment variable that overrides the config-file seed. A command-line
/// seed flag wins over the variable, which wins over the file.
pub const SEED_ENV_VAR: &str = "GS_TRACK_SEED";

/// Current layout version of the summary document.
pub const SCHEMA_VERSION: u32 = 1;

/// Exact header of the trace CSV.
pub const TRACE_CSV_HEADER: &str =
    "t,policy,nmse,trace_p_post,budget,vertices,solver_iters,solver_gradnorm";

/// Deterministic named RNG substream: each (master seed, label) pair yields
/// an independent stream, so truth, noise, and policy randomness never share
/// draws and stay aligned across policy sets.
pub fn substream(master_seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// The four sampling strategies the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Two-step relaxed design, rounded (the planning policy).
    Proposed,
    /// Myopic greedy on the instantaneous posterior-error drop.
    GreedyInstant,
    /// Static information-gain design from the initial prior, reused at
    /// every step (evolution-blind).
    InfoGain,
    /// Uniform random sets without replacement.
    Random,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Proposed,
        PolicyKind::GreedyInstant,
        PolicyKind::InfoGain,
        PolicyKind::Random,
    ];

    /// Command-line identifier.
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Proposed => "proposed",
            PolicyKind::GreedyInstant => "greedy-instant",
            PolicyKind::InfoGain => "info-gain",
            PolicyKind::Random => "random",
        }
    }

    /// Label used in summary tables for the baselines.
    pub fn table_label(self) -> &'static str {
        match self {
            PolicyKind::Proposed => "proposed",
            PolicyKind::GreedyInstant => "M2-style",
            PolicyKind::InfoGain => "M1-style",
            PolicyKind::Random => "random",
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(PolicyKind::Proposed),
            "greedy-instant" => Ok(PolicyKind::GreedyInstant),
            "info-gain" => Ok(PolicyKind::InfoGain),
            "random" => Ok(PolicyKind::Random),
            other => Err(Error::InvalidConfig(format!(
                "unknown policy {other:?}; expected proposed | greedy-instant | info-gain | random"
            ))),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which experiment family a run belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// Heat source walking over a random geometric sensor network;
    /// translation-operator evolution.
    Sensor,
    /// Community graph with per-step random edge sampling; bounded
    /// -confidence opinion truth; identity filter model.
    Social,
    /// The sensor pipeline with no preset beyond the generic defaults;
    /// every parameter is taken from the configuration as given.
    Custom,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::Sensor => "sensor",
            ScenarioKind::Social => "social",
            ScenarioKind::Custom => "custom",
        })
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sensor" => Ok(ScenarioKind::Sensor),
            "social" => Ok(ScenarioKind::Social),
            "custom" => Ok(ScenarioKind::Custom),
            other => Err(Error::InvalidConfig(format!(
                "unknown scenario {other:?}; expected sensor | social | custom"
            ))),
        }
    }
}

/// Fully resolved run configuration. Construct through the presets
/// ([`ScenarioConfig::sensor`], [`ScenarioConfig::social`],
/// [`ScenarioConfig::custom`]) or from a TOML file, then adjust fields via
/// [`ConfigOverrides`].
///
/// Sensor/custom runs use `vertices`/`radius` and ignore the community
/// fields; social runs derive `vertices = communities × community_size` and
/// ignore `radius`.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub seed: u64,
    /// Number of tracked steps T (records cover t = 1..=T).
    pub horizon: usize,
    pub vertices: usize,
    /// Connection radius of the geometric graph (sensor/custom).
    pub radius: f64,
    pub communities: usize,
    pub community_size: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    /// Per-step edge activation probability of the social graph.
    pub edge_activation: f64,
    /// Bounded-confidence radius of the opinion update.
    pub confidence: f64,
    pub process_noise_var: f64,
    pub obs_noise_var: f64,
    /// Average per-step sampling budget M.
    pub avg_budget: usize,
    /// Per-step budget cap M_t (applied to both steps of a plan).
    pub step_cap: usize,
    pub discount: f64,
    /// Scale of the spectral translation operator; `None` means √n, the
    /// normalization of the standard generalized translation.
    pub translation_scale: Option<f64>,
    /// Initial posterior covariance is this multiple of the identity.
    pub init_cov_scale: f64,
    pub policies: Vec<PolicyKind>,
    /// Re-plan at every step and execute only each plan's first set,
    /// instead of executing both sets of a plan made at odd steps.
    pub recompute_each_step: bool,
    pub solver_max_iters: usize,
    pub solver_grad_tol: f64,
    pub out_dir: PathBuf,
}

/// Partial configuration: optional values laid over a preset. Also the
/// parse target for config files, where unknown keys are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub scenario: Option<ScenarioKind>,
    pub seed: Option<u64>,
    pub horizon: Option<usize>,
    pub vertices: Option<usize>,
    pub radius: Option<f64>,
    pub communities: Option<usize>,
    pub community_size: Option<usize>,
    pub p_intra: Option<f64>,
    pub p_inter: Option<f64>,
    pub edge_activation: Option<f64>,
    pub confidence: Option<f64>,
    pub process_noise_var: Option<f64>,
    pub obs_noise_var: Option<f64>,
    pub avg_budget: Option<usize>,
    pub step_cap: Option<usize>,
    pub discount: Option<f64>,
    pub translation_scale: Option<f64>,
    pub init_cov_scale: Option<f64>,
    pub policies: Option<Vec<PolicyKind>>,
    pub recompute_each_step: Option<bool>,
    pub solver_max_iters: Option<usize>,
    pub solver_grad_tol: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    /// Heat-source sensor network defaults: n=100 geometric graph with
    /// radius 0.6, T=1000, process/observation variances 1e-4/1e-3,
    /// M=10, M_t=20, discount 0.8, all four policies.
    pub fn sensor() -> Self {
        Self {
            scenario: ScenarioKind::Sensor,
            seed: 0,
            horizon: 1000,
            vertices: 100,
            radius: 0.6,
            communities: 7,
            community_size: 10,
            p_intra: 0.8,
            p_inter: 0.02,
            edge_activation: 0.5,
            confidence: 0.3,
            process_noise_var: 1e-4,
            obs_noise_var: 1e-3,
            avg_budget: 10,
            step_cap: 20,
            discount: 0.8,
            translation_scale: None,
            init_cov_scale: 1.0,
            policies: PolicyKind::ALL.to_vec(),
            recompute_each_step: false,
            solver_max_iters: 2000,
            solver_grad_tol: 1e-6,
            out_dir: PathBuf::from("reports"),
        }
    }

    /// Opinion-dynamics defaults: 7 communities of 10 vertices, per-step
    /// edge activation 0.5, confidence 0.3, T=100, both variances 1e-4,
    /// initial covariance 0.1·I.
    pub fn social() -> Self {
        Self {
            scenario: ScenarioKind::Social,
            horizon: 100,
            vertices: 70,
            obs_noise_var: 1e-4,
            init_cov_scale: 0.1,
            ..Self::sensor()
        }
    }

    /// Sensor-pipeline defaults under the `custom` label.
    pub fn custom() -> Self {
        Self {
            scenario: ScenarioKind::Custom,
            ..Self::sensor()
        }
    }

    pub fn preset(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::Sensor => Self::sensor(),
            ScenarioKind::Social => Self::social(),
            ScenarioKind::Custom => Self::custom(),
        }
    }

    /// Parses a TOML document: the `scenario` key selects the preset and
    /// every other key overrides one field. Unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let overrides: ConfigOverrides = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
        let kind = overrides.scenario.ok_or_else(|| {
            Error::InvalidConfig("config must set scenario = \"sensor\" | \"social\" | \"custom\"".into())
        })?;
        let mut cfg = Self::preset(kind);
        cfg.apply_overrides(&overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Lays explicit override values over this configuration. For social
    /// runs the vertex count follows the community fields unless it is
    /// itself overridden (a contradictory explicit value is caught by
    /// [`ScenarioConfig::validate`]).
    pub fn apply_overrides(&mut self, o: &ConfigOverrides) {
        if let Some(v) = o.scenario {
            self.scenario = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.horizon {
            self.horizon = v;
        }
        if let Some(v) = o.radius {
            self.radius = v;
        }
        if let Some(v) = o.communities {
            self.communities = v;
        }
        if let Some(v) = o.community_size {
            self.community_size = v;
        }
        if let Some(v) = o.p_intra {
            self.p_intra = v;
        }
        if let Some(v) = o.p_inter {
            self.p_inter = v;
        }
        if let Some(v) = o.edge_activation {
            self.edge_activation = v;
        }
        if let Some(v) = o.confidence {
            self.confidence = v;
        }
        if let Some(v) = o.process_noise_var {
            self.process_noise_var = v;
        }
        if let Some(v) = o.obs_noise_var {
            self.obs_noise_var = v;
        }
        if let Some(v) = o.avg_budget {
            self.avg_budget = v;
        }
        if let Some(v) = o.step_cap {
            self.step_cap = v;
        }
        if let Some(v) = o.discount {
            self.discount = v;
        }
        if let Some(v) = o.translation_scale {
            self.translation_scale = Some(v);
        }
        if let Some(v) = o.init_cov_scale {
            self.init_cov_scale = v;
        }
        if let Some(v) = &o.policies {
            self.policies = v.clone();
        }
        if let Some(v) = o.recompute_each_step {
            self.recompute_each_step = v;
        }
        if let Some(v) = o.solver_max_iters {
            self.solver_max_iters = v;
        }
        if let Some(v) = o.solver_grad_tol {
            self.solver_grad_tol = v;
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
        match o.vertices {
            Some(v) => self.vertices = v,
            None => {
                if self.scenario == ScenarioKind::Social {
                    self.vertices = self.communities * self.community_size;
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.horizon == 0 {
            return fail("horizon must be at least 1".into());
        }
        if self.vertices == 0 {
            return fail("vertex count must be positive".into());
        }
        for (name, p) in [
            ("p_intra", self.p_intra),
            ("p_inter", self.p_inter),
            ("edge_activation", self.edge_activation),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.confidence >= 0.0 && self.confidence.is_finite()) {
            return fail(format!("confidence = {} must be finite and >= 0", self.confidence));
        }
        if !(self.process_noise_var >= 0.0 && self.process_noise_var.is_finite()) {
            return fail(format!(
                "process_noise_var = {} must be finite and >= 0",
                self.process_noise_var
            ));
        }
        if !(self.obs_noise_var > 0.0 && self.obs_noise_var.is_finite()) {
            return fail(format!(
                "obs_noise_var = {} must be finite and > 0",
                self.obs_noise_var
            ));
        }
        if self.avg_budget > self.vertices {
            return fail(format!(
                "avg_budget {} exceeds vertex count {}",
                self.avg_budget, self.vertices
            ));
        }
        // Budget/discount coupling is validated by the shared constructor.
        self.budget_params()?;
        match self.scenario {
            ScenarioKind::Sensor | ScenarioKind::Custom => {
                if !(self.radius > 0.0 && self.radius.is_finite()) {
                    return fail(format!("radius = {} must be finite and > 0", self.radius));
                }
            }
            ScenarioKind::Social => {
                if self.communities == 0 || self.community_size == 0 {
                    return fail("communities and community_size must be positive".into());
                }
                let derived = self.communities * self.community_size;
                if self.vertices != derived {
                    return fail(format!(
                        "social runs require vertices = communities × community_size \
                         ({} × {} = {derived}), got {}",
                        self.communities, self.community_size, self.vertices
                    ));
                }
            }
        }
        if let Some(s) = self.translation_scale {
            if !(s > 0.0 && s.is_finite()) {
                return fail(format!("translation_scale = {s} must be finite and > 0"));
            }
        }
        if !(self.init_cov_scale > 0.0 && self.init_cov_scale.is_finite()) {
            return fail(format!(
                "init_cov_scale = {} must be finite and > 0",
                self.init_cov_scale
            ));
        }
        if self.policies.is_empty() {
            return fail("at least one policy is required".into());
        }
        for (i, a) in self.policies.iter().enumerate() {
            if self.policies[..i].contains(a) {
                return fail(format!("duplicate policy {a}"));
            }
        }
        if self.solver_max_iters == 0 {
            return fail("solver_max_iters must be at least 1".into());
        }
        if !(self.solver_grad_tol > 0.0 && self.solver_grad_tol.is_finite()) {
            return fail(format!(
                "solver_grad_tol = {} must be finite and > 0",
                self.solver_grad_tol
            ));
        }
        Ok(())
    }

    pub fn budget_params(&self) -> Result<BudgetParams> {
        BudgetParams::with_caps(self.avg_budget, self.step_cap, self.step_cap, self.discount)
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            max_iters: self.solver_max_iters,
            grad_tol: self.solver_grad_tol,
            ..SolverOptions::default()
        }
    }
}

/// Reads and resolves a TOML config file.
pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    ScenarioConfig::from_toml_str(&text)
}

/// Seed override from the environment, if present.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV_VAR) {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(std::env::VarError::NotUnicode(_)) => Err(Error::InvalidConfig(format!(
            "{SEED_ENV_VAR} is not valid unicode"
        ))),
        Ok(s) => s.trim().parse::<u64>().map(Some).map_err(|_| {
            Error::InvalidConfig(format!(
                "{SEED_ENV_VAR} must be an unsigned integer, got {s:?}"
            ))
        }),
    }
}

/// Normalized squared estimation error `‖estimate − truth‖² / ‖truth‖²`
/// of spectral coefficient vectors.
pub fn nmse(estimate: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: estimate.len(),
            context: "NMSE estimate vs truth",
        });
    }
    let denom = truth.norm_squared();
    if denom == 0.0 {
        return Err(Error::InvalidParameter(
            "NMSE is undefined for a zero-norm truth signal".into(),
        ));
    }
    Ok((estimate - truth).norm_squared() / denom)
}

/// One tracked step of one policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub policy: PolicyKind,
    pub nmse: f64,
    pub trace_p_post: f64,
    pub budget: usize,
    pub vertices: Vec<usize>,
    /// Solver iterations of the plan that chose this step's set
    /// (planning policy only).
    pub solver_iters: Option<usize>,
    pub solver_gradnorm: Option<f64>,
}

/// Solver outcome of one planning epoch.
#[derive(Debug, Clone, Serialize)]
pub struct EpochDiagnostics {
    /// Step at which the plan was made.
    pub t: usize,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Final relaxed objective value.
    pub objective: f64,
}

/// Full trace of one policy over the horizon.
#[derive(Debug, Clone)]
pub struct PolicyTrace {
    pub policy: PolicyKind,
    pub records: Vec<StepRecord>,
    pub epochs: Vec<EpochDiagnostics>,
}

impl PolicyTrace {
    /// Accumulated tracking error: the sum of per-step NMSE.
    pub fn accumulated_error(&self) -> f64 {
        accumulated_error(&self.records)
    }

    /// Sum of per-step posterior traces, reported alongside the NMSE sum.
    pub fn accumulated_trace(&self) -> f64 {
        self.records.iter().map(|r| r.trace_p_post).sum()
    }
}

/// Sum of per-step NMSE over a trace.
pub fn accumulated_error(records: &[StepRecord]) -> f64 {
    records.iter().map(|r| r.nmse).sum()
}

/// Everything one run produces: the resolved config, one trace per policy
/// (all run on common random numbers), and for social runs the per-step
/// realized edge counts of the activation process.
#[derive(Debug, Clone)]
pub struct TraceReport {
    pub config: ScenarioConfig,
    pub traces: Vec<PolicyTrace>,
    pub res_edge_counts: Option<Vec<usize>>,
}

/// Ground truth and filter-side model shared by every policy of one run.
struct World {
    basis: SpectralBasis,
    model: Box<dyn EvolutionModel>,
    /// Spectral truth, indexed by t = 0..=T.
    truth_spectral: Vec<DVector<f64>>,
    /// Vertex-domain truth, same indexing.
    truth_vertex: Vec<DVector<f64>>,
    init_state: FilterState,
    /// Initial prior in spectral coordinates (drives the static design).
    prior: SignalPrior,
    res_edge_counts: Option<Vec<usize>>,
}

fn normalize_or_keep(mut v: DVector<f64>) -> DVector<f64> {
    let norm = v.norm();
    if norm > 0.0 {
        v /= norm;
    }
    v
}

/// Geometric sensor network with a walking heat source: diagonal spectral
/// translation operators along the walk, unit-energy truth.
fn sensor_world(cfg: &ScenarioConfig) -> Result<World> {
    let n = cfg.vertices;
    let mut graph_rng = substream(cfg.seed, "graph");
    let g = random_geometric_graph(n, cfg.radius, &mut graph_rng);
    let basis = SpectralBasis::from_graph(&g)?;

    let mut traj_rng = substream(cfg.seed, "trajectory");
    let start = traj_rng.random_range(0..n);
    let trajectory = heat_source_trajectory(&g, start, cfg.horizon, &mut traj_rng)?;
    let scale = cfg.translation_scale.unwrap_or((n as f64).sqrt());
    let model = TranslationEvolution::from_trajectory(&basis, &trajectory, scale, cfg.process_noise_var)?;

    let mut init_rng = substream(cfg.seed, "truth-init");
    let f0 = normalize_or_keep(DVector::from_fn(n, |_, _| {
        1.0 + init_rng.sample::<f64, _>(StandardNormal)
    }));
    let mut process_rng = substream(cfg.seed, "truth-process");
    let mut truth_spectral = Vec::with_capacity(cfg.horizon + 1);
    truth_spectral.push(f0);
    for t in 1..=cfg.horizon {
        let next = evolve(&truth_spectral[t - 1], &model, t, true, &mut process_rng)?;
        truth_spectral.push(next);
    }
    let truth_vertex = truth_spectral
        .iter()
        .map(|fh| basis.igft(fh))
        .collect::<Result<Vec<_>>>()?;

    let ones = DVector::from_element(n, 1.0);
    let init_state = FilterState::new(
        ones.clone(),
        DMatrix::identity(n, n) * cfg.init_cov_scale,
        0,
    )?;
    let prior = SignalPrior::new(ones, DVector::from_element(n, cfg.init_cov_scale))?;

    Ok(World {
        basis,
        model: Box::new(model),
        truth_spectral,
        truth_vertex,
        init_state,
        prior,
        res_edge_counts: None,
    })
}

/// One bounded-confidence averaging step over a realized interaction
/// graph: each vertex averages its own opinion with those of the
/// neighbors in `g` whose opinion lies within `eps` of its own.
fn confidence_step_on_graph(g: &WeightedGraph, x: &DVector<f64>, eps: f64) -> DVector<f64> {
    DVector::from_fn(x.nrows(), |i, _| {
        let mut sum = x[i];
        let mut count = 1.0;
        for j in g.neighbors(i) {
            if (x[i] - x[j]).abs() <= eps {
                sum += x[j];
                count += 1.0;
            }
        }
        sum / count
    })
}

/// Community graph with per-step edge activation; bounded-confidence
/// opinion truth driven by the activated edges, with unit-energy
/// normalization of the tracked signal; identity filter model on the base
/// graph's basis. The activation realizations drive the truth but not the
/// filter; their edge counts are recorded for audit.
fn social_world(cfg: &ScenarioConfig) -> Result<World> {
    let n = cfg.vertices;
    let sizes = vec![cfg.community_size; cfg.communities];
    let mut graph_rng = substream(cfg.seed, "graph");
    let g = community_graph(&sizes, cfg.p_intra, cfg.p_inter, &mut graph_rng)?;
    let basis = SpectralBasis::from_graph(&g)?;

    let mut init_rng = substream(cfg.seed, "truth-init");
    let mut opinions = DVector::from_fn(n, |_, _| init_rng.random::<f64>());
    let sigma = cfg.process_noise_var.sqrt();
    let mut traj_rng = substream(cfg.seed, "trajectory");
    let mut process_rng = substream(cfg.seed, "truth-process");
    // Opinions follow a bounded-confidence update restricted to the edges
    // that are actually active each step: a vertex averages with those
    // activated neighbors whose opinion lies within the confidence radius.
    // Restricting the exchange to the realized graph is what lets the
    // community structure persist — with a 0.3 radius on [0,1] opinions,
    // all-pairs averaging reaches global consensus within a few steps and
    // the signal degenerates to a constant. Communities still lock
    // internally fast; their means drift together slowly through the
    // sparse activated inter-community edges, so the signal smooths
    // gradually over the horizon.
    //
    // The recursion runs on the raw opinion scale; only the tracked signal
    // is normalized to unit energy. Normalizing inside the recursion would
    // shrink every opinion gap below the confidence radius and collapse
    // the dynamics to consensus in one step.
    let mut res_edge_counts = Vec::with_capacity(cfg.horizon);
    let mut truth_vertex = Vec::with_capacity(cfg.horizon + 1);
    truth_vertex.push(normalize_or_keep(opinions.clone()));
    for _ in 1..=cfg.horizon {
        let realized = res_realize(&g, cfg.edge_activation, &mut traj_rng)?;
        res_edge_counts.push(realized.edge_count());
        let mut next = confidence_step_on_graph(&realized, &opinions, cfg.confidence);
        for k in 0..n {
            let z: f64 = process_rng.sample(StandardNormal);
            next[k] += sigma * z;
        }
        opinions = next;
        truth_vertex.push(normalize_or_keep(opinions.clone()));
    }
    let truth_spectral = truth_vertex
        .iter()
        .map(|f| basis.gft(f))
        .collect::<Result<Vec<_>>>()?;

    let model = StaticEvolution::identity(n, cfg.process_noise_var)?;
    let consensus = basis.gft(&normalize_or_keep(DVector::from_element(n, 1.0)))?;
    let init_state = FilterState::new(
        consensus.clone(),
        DMatrix::identity(n, n) * cfg.init_cov_scale,
        0,
    )?;
    let prior = SignalPrior::new(consensus, DVector::from_element(n, cfg.init_cov_scale))?;

    Ok(World {
        basis,
        model: Box::new(model),
        truth_spectral,
        truth_vertex,
        init_state,
        prior,
        res_edge_counts: Some(res_edge_counts),
    })
}

fn build_world(cfg: &ScenarioConfig) -> Result<World> {
    match cfg.scenario {
        ScenarioKind::Sensor | ScenarioKind::Custom => sensor_world(cfg),
        ScenarioKind::Social => social_world(cfg),
    }
}

/// Runs one policy against the shared world. Observation noise and policy
/// randomness come from fresh labeled substreams, so every policy sees the
/// identical noise sequence and the trace of one policy does not depend on
/// which others are in the run.
fn run_policy(cfg: &ScenarioConfig, world: &World, kind: PolicyKind) -> Result<PolicyTrace> {
    let n = cfg.vertices;
    let noise = ObservationNoise::new(cfg.obs_noise_var)?;
    let params = cfg.budget_params()?;
    let options = cfg.solver_options();
    let mut obs_rng = substream(cfg.seed, "obs-noise");
    let mut policy_rng = substream(cfg.seed, "policy");

    let static_set = match kind {
        PolicyKind::InfoGain => Some(policy_info_gain(
            &world.basis,
            &world.prior,
            &noise,
            cfg.avg_budget,
        )?),
        _ => None,
    };

    let mut state = world.init_state.clone();
    let mut records = Vec::with_capacity(cfg.horizon);
    let mut epochs = Vec::new();
    // Second half of the active plan, scheduled for the next step.
    let mut pending: Option<(Vec<usize>, usize, f64)> = None;

    for t in 1..=cfg.horizon {
        let (set, solver): (Vec<usize>, Option<(usize, f64)>) = match kind {
            PolicyKind::Proposed => {
                if cfg.recompute_each_step || t % 2 == 1 || pending.is_none() {
                    let out = policy_proposed(
                        &state,
                        world.model.as_ref(),
                        &noise,
                        &world.basis,
                        &params,
                        t,
                        &options,
                    )?;
                    epochs.push(EpochDiagnostics {
                        t,
                        iterations: out.diagnostics.iterations,
                        grad_norm: out.diagnostics.grad_norm,
                        converged: out.diagnostics.converged,
                        objective: out
                            .diagnostics
                            .objective_trace
                            .last()
                            .copied()
                            .unwrap_or(f64::NAN),
                    });
                    let info = (out.diagnostics.iterations, out.diagnostics.grad_norm);
                    pending = if cfg.recompute_each_step {
                        None
                    } else {
                        Some((out.plan.set_next().to_vec(), info.0, info.1))
                    };
                    (out.plan.set_now().to_vec(), Some(info))
                } else {
                    let (set, iters, gnorm) = pending.take().expect("checked above");
                    (set, Some((iters, gnorm)))
                }
            }
            PolicyKind::GreedyInstant => {
                let pred = predict(&state, world.model.as_ref(), t)?;
                (
                    policy_greedy_instant(&pred, &world.basis, &noise, cfg.avg_budget)?,
                    None,
                )
            }
            PolicyKind::InfoGain => (static_set.clone().expect("set above"), None),
            PolicyKind::Random => (policy_random(n, cfg.avg_budget, &mut policy_rng)?, None),
        };

        let y = observe(&world.truth_vertex[t], &set, &noise, &mut obs_rng)?;
        let pred = predict(&state, world.model.as_ref(), t)?;
        state = update(&pred, &y, &set, &world.basis, &noise)?;

        records.push(StepRecord {
            t,
            policy: kind,
            nmse: nmse(state.posterior_mean(), &world.truth_spectral[t])?,
            trace_p_post: instant_mse(&state),
            budget: set.len(),
            vertices: set,
            solver_iters: solver.map(|(i, _)| i),
            solver_gradnorm: solver.map(|(_, g)| g),
        });
    }

    Ok(PolicyTrace {
        policy: kind,
        records,
        epochs,
    })
}

/// Runs every configured policy of one scenario on common random numbers.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<TraceReport> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let traces = cfg
        .policies
        .iter()
        .map(|&kind| run_policy(cfg, &world, kind))
        .collect::<Result<Vec<_>>>()?;
    Ok(TraceReport {
        config: cfg.clone(),
        traces,
        res_edge_counts: world.res_edge_counts,
    })
}

/// Sensor-family entry point; rejects social configs.
pub fn run_sensor_scenario(cfg: &ScenarioConfig) -> Result<TraceReport> {
    if cfg.scenario == ScenarioKind::Social {
        return Err(Error::InvalidConfig(
            "social config passed to the sensor runner".into(),
        ));
    }
    run_scenario(cfg)
}

/// Social entry point; rejects sensor/custom configs.
pub fn run_social_scenario(cfg: &ScenarioConfig) -> Result<TraceReport> {
    if cfg.scenario != ScenarioKind::Social {
        return Err(Error::InvalidConfig(
            "non-social config passed to the social runner".into(),
        ));
    }
    run_scenario(cfg)
}

fn push_csv_row(out: &mut String, r: &StepRecord) {
    use fmt::Write;
    let vertices = r
        .vertices
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";");
    let iters = r.solver_iters.map(|v| v.to_string()).unwrap_or_default();
    let gnorm = r.solver_gradnorm.map(|v| v.to_string()).unwrap_or_default();
    writeln!(
        out,
        "{},{},{},{},{},{},{},{}",
        r.t, r.policy, r.nmse, r.trace_p_post, r.budget, vertices, iters, gnorm
    )
    .expect("writing to a String cannot fail");
}

/// Renders the per-step trace CSV (policy-major, steps ascending).
pub fn render_trace_csv(report: &TraceReport) -> String {
    let mut out = String::with_capacity(64 * (1 + report.traces.iter().map(|t| t.records.len()).sum::<usize>()));
    out.push_str(TRACE_CSV_HEADER);
    out.push('\n');
    for trace in &report.traces {
        for r in &trace.records {
            push_csv_row(&mut out, r);
        }
    }
    out
}

#[derive(Serialize)]
struct PolicySummary<'a> {
    policy: &'static str,
    label: &'static str,
    accumulated_nmse: f64,
    accumulated_trace_p_post: f64,
    epochs: &'a [EpochDiagnostics],
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    schema_version: u32,
    config: &'a ScenarioConfig,
    policies: Vec<PolicySummary<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    res_edge_counts: Option<&'a Vec<usize>>,
}

/// Renders the versioned summary document (pretty JSON): config echo plus
/// per-policy accumulated error, accumulated posterior trace, and solver
/// epochs.
pub fn render_summary_json(report: &TraceReport) -> Result<String> {
    let doc = SummaryDoc {
        schema_version: SCHEMA_VERSION,
        config: &report.config,
        policies: report
            .traces
            .iter()
            .map(|trace| PolicySummary {
                policy: trace.policy.name(),
                label: trace.policy.table_label(),
                accumulated_nmse: trace.accumulated_error(),
                accumulated_trace_p_post: trace.accumulated_trace(),
                epochs: &trace.epochs,
            })
            .collect(),
        res_edge_counts: report.res_edge_counts.as_ref(),
    };
    serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::InvalidConfig(format!("summary serialization failed: {e}")))
}

/// Locations a run's reports were written to.
#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub trace_csv: PathBuf,
    pub summary_json: PathBuf,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Writes `<scenario>-seed<seed>-trace.csv` and `...-summary.json` into the
/// config's output directory, creating it if needed.
pub fn write_reports(report: &TraceReport) -> Result<ReportPaths> {
    let dir = &report.config.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let stem = format!("{}-seed{}", report.config.scenario, report.config.seed);
    let trace_csv = dir.join(format!("{stem}-trace.csv"));
    let summary_json = dir.join(format!("{stem}-summary.json"));
    write_file(&trace_csv, &render_trace_csv(report))?;
    write_file(&summary_json, &render_summary_json(report)?)?;
    Ok(ReportPaths {
        trace_csv,
        summary_json,
    })
}
