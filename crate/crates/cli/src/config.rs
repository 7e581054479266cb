//! Experiment configuration: presets, file overlays, and validation.
//!
//! Configs are TOML by default with JSON accepted interchangeably; a file
//! only needs the fields it wants to change on top of the chosen preset.
//! Validation collects every violated field so a bad config is fixable in
//! one pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use neuralpi_core::control::{Controller, CostFamily, Phi};
use neuralpi_core::dynamics::{power_network, vehicle_platoon, EdgeModel, Scheme, SystemModel};
use neuralpi_core::graph::Graph;
use neuralpi_core::monotone::MonotoneParams;
use neuralpi_core::train::{LossSpec, ScenarioSpec, TrainConfig, TrainTarget};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Vehicle,
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Small systems and short runs; the default.
    Desk,
    /// Benchmark-scale settings (20 vehicles / 10 generators, long training).
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphKind {
    Line,
    Ring,
    Complete,
    Regular,
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeKind {
    Sine,
    Learnable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Linear,
    Dense,
    NeuralPi,
    NeuralPiComm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// Zero-mean raw weights; slopes anywhere in `[0, scale^2]`.
    Random,
    /// Per-segment slopes inside `[0.5 scale, 1.5 scale]`.
    Banded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Vehicle,
    Power,
    EdgeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Controller,
    Edges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub family: Family,
    pub n: usize,
    pub graph: GraphKind,
    pub degree: usize,
    pub y_bar: f64,
    pub seed: u64,
    pub edges: EdgeKind,
    pub edge_neurons: usize,
    pub edge_scale: f64,
    pub susceptance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub variant: ControllerKind,
    pub neurons: usize,
    pub seed: u64,
    pub init: InitKind,
    pub scale: f64,
    pub comm_graph: GraphKind,
    pub comm_degree: usize,
    pub phi: Phi,
    pub kp: f64,
    pub ki: f64,
    pub dense_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub exponent: u32,
    pub c_low: f64,
    pub c_high: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub k_steps: usize,
    pub scheme: Scheme,
    pub eps_settle: f64,
    pub t_ss_sample: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub episodes: usize,
    pub batch: usize,
    pub k_steps: usize,
    pub dt: f64,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub mode: TrainMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub coeff_low: f64,
    pub coeff_high: f64,
    pub seed: u64,
    pub abs_weight: f64,
    pub action_reg: f64,
    pub min_spacing: f64,
    pub tail_start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub count: usize,
    pub seed: u64,
    pub x0_low: f64,
    pub x0_high: f64,
    pub eta0: f64,
    pub max_load_changes: usize,
    pub delta_low: f64,
    pub delta_high: f64,
}

/// Complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub controller: ControllerConfig,
    pub cost: CostConfig,
    pub sim: SimConfig,
    pub train: TrainSection,
    pub loss: LossConfig,
    pub scenario: ScenarioConfig,
}

/// Partial overlay parsed from a user file; unset fields keep preset values.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Overlay {
    system: Option<SystemOverlay>,
    controller: Option<ControllerOverlay>,
    cost: Option<CostOverlay>,
    sim: Option<SimOverlay>,
    train: Option<TrainOverlay>,
    loss: Option<LossOverlay>,
    scenario: Option<ScenarioOverlay>,
}

macro_rules! overlay {
    ($name:ident onto $target:ty { $($field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Debug, Default, Deserialize)]
        #[serde(deny_unknown_fields)]
        struct $name {
            $($field: Option<$ty>,)*
        }
        impl $name {
            fn apply(self, base: &mut $target) {
                $(if let Some(v) = self.$field { base.$field = v; })*
            }
        }
    };
}

overlay!(SystemOverlay onto SystemConfig {
    family: Family, n: usize, graph: GraphKind, degree: usize, y_bar: f64,
    seed: u64, edges: EdgeKind, edge_neurons: usize, edge_scale: f64,
    susceptance: f64,
});
overlay!(ControllerOverlay onto ControllerConfig {
    variant: ControllerKind, neurons: usize, seed: u64, init: InitKind,
    scale: f64, comm_graph: GraphKind, comm_degree: usize, phi: Phi,
    kp: f64, ki: f64, dense_hidden: usize,
});
overlay!(CostOverlay onto CostConfig { exponent: u32, c_low: f64, c_high: f64, seed: u64 });
overlay!(SimOverlay onto SimConfig {
    dt: f64, k_steps: usize, scheme: Scheme, eps_settle: f64, t_ss_sample: f64,
});
overlay!(TrainOverlay onto TrainSection {
    episodes: usize, batch: usize, k_steps: usize, dt: f64, lr: f64,
    decay_factor: f64, decay_every: usize, seed: u64, checkpoint_every: usize,
    mode: TrainMode,
});
overlay!(LossOverlay onto LossConfig {
    kind: LossKind, coeff_low: f64, coeff_high: f64, seed: u64,
    abs_weight: f64, action_reg: f64, min_spacing: f64, tail_start: usize,
});
overlay!(ScenarioOverlay onto ScenarioConfig {
    count: usize, seed: u64, x0_low: f64, x0_high: f64, eta0: f64,
    max_load_changes: usize, delta_low: f64, delta_high: f64,
});

impl ExperimentConfig {
    /// Preset defaults for a family.
    pub fn preset(preset: Preset, family: Family) -> Self {
        let desk = preset == Preset::Desk;
        match family {
            Family::Vehicle => ExperimentConfig {
                system: SystemConfig {
                    family,
                    n: if desk { 5 } else { 20 },
                    graph: GraphKind::Line,
                    degree: 3,
                    y_bar: 5.2,
                    seed: 11,
                    edges: EdgeKind::Learnable,
                    edge_neurons: if desk { 8 } else { 20 },
                    edge_scale: 1.0,
                    susceptance: 8.0,
                },
                controller: ControllerConfig {
                    variant: ControllerKind::NeuralPiComm,
                    neurons: if desk { 10 } else { 20 },
                    seed: 12,
                    init: InitKind::Banded,
                    scale: 1.0,
                    comm_graph: if desk { GraphKind::Same } else { GraphKind::Regular },
                    comm_degree: 3,
                    phi: Phi::Identity,
                    kp: 1.0,
                    ki: 1.0,
                    dense_hidden: 20,
                },
                cost: CostConfig {
                    exponent: 2,
                    // Quadratic coefficients stored for C = (c/p) w^p; the
                    // benchmark's narrow sum-form range 0.025..0.075 doubles.
                    c_low: if desk { 0.5 } else { 0.05 },
                    c_high: if desk { 1.5 } else { 0.15 },
                    seed: 13,
                },
                sim: SimConfig {
                    dt: 0.02,
                    k_steps: if desk { 15_000 } else { 20_000 },
                    scheme: Scheme::Rk4,
                    eps_settle: 0.01,
                    t_ss_sample: 20.0,
                },
                train: TrainSection {
                    episodes: if desk { 50 } else { 400 },
                    batch: if desk { 16 } else { 300 },
                    k_steps: if desk { 150 } else { 300 },
                    dt: 0.02,
                    lr: 0.05,
                    decay_factor: 0.7,
                    decay_every: 50,
                    seed: 14,
                    checkpoint_every: 10,
                    mode: TrainMode::Controller,
                },
                loss: LossConfig {
                    kind: LossKind::Vehicle,
                    coeff_low: 0.025,
                    coeff_high: 0.075,
                    seed: 15,
                    abs_weight: 0.05,
                    action_reg: 0.01,
                    min_spacing: 1.0,
                    tail_start: if desk { 100 } else { 200 },
                },
                scenario: ScenarioConfig {
                    count: 20,
                    seed: 16,
                    x0_low: 5.0,
                    x0_high: 6.0,
                    eta0: 2.0,
                    max_load_changes: 3,
                    delta_low: -1.0,
                    delta_high: 1.0,
                },
            },
            Family::Power => ExperimentConfig {
                system: SystemConfig {
                    family,
                    n: if desk { 5 } else { 10 },
                    graph: if desk { GraphKind::Line } else { GraphKind::Ring },
                    degree: 3,
                    y_bar: 60.0,
                    seed: 21,
                    edges: EdgeKind::Sine,
                    edge_neurons: 8,
                    edge_scale: 1.0,
                    susceptance: 8.0,
                },
                controller: ControllerConfig {
                    variant: ControllerKind::NeuralPiComm,
                    neurons: if desk { 10 } else { 20 },
                    seed: 22,
                    init: InitKind::Banded,
                    scale: 1.0,
                    comm_graph: if desk { GraphKind::Same } else { GraphKind::Regular },
                    comm_degree: 3,
                    phi: Phi::Identity,
                    kp: 1.0,
                    ki: 1.0,
                    dense_hidden: 20,
                },
                cost: CostConfig {
                    exponent: 4,
                    c_low: 0.25,
                    c_high: 0.75,
                    seed: 23,
                },
                sim: SimConfig {
                    dt: 0.01,
                    k_steps: 30_000,
                    scheme: Scheme::Rk4,
                    eps_settle: 0.01,
                    t_ss_sample: 30.0,
                },
                train: TrainSection {
                    episodes: if desk { 50 } else { 600 },
                    batch: if desk { 16 } else { 300 },
                    k_steps: if desk { 200 } else { 400 },
                    dt: 0.01,
                    lr: 0.05,
                    decay_factor: 0.7,
                    decay_every: 50,
                    seed: 24,
                    checkpoint_every: 10,
                    mode: TrainMode::Controller,
                },
                loss: LossConfig {
                    kind: LossKind::Power,
                    coeff_low: 0.25,
                    coeff_high: 0.75,
                    seed: 25,
                    abs_weight: 0.05,
                    action_reg: 0.01,
                    min_spacing: 1.0,
                    tail_start: 100,
                },
                scenario: ScenarioConfig {
                    count: 20,
                    seed: 26,
                    x0_low: 5.0,
                    x0_high: 6.0,
                    eta0: 2.0,
                    max_load_changes: 3,
                    delta_low: -1.0,
                    delta_high: 1.0,
                },
            },
        }
    }

    /// Loads a config file on top of a preset. The file may be TOML or JSON;
    /// the family may be switched by the file's `system.family` before the
    /// preset defaults are materialized.
    pub fn load(path: &std::path::Path, preset: Preset) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_with_preset(&text, preset)
    }

    /// Parses config text (TOML, falling back to JSON).
    pub fn from_str_with_preset(text: &str, preset: Preset) -> Result<Self, ConfigError> {
        let overlay: Overlay = match toml::from_str(text) {
            Ok(v) => v,
            Err(toml_err) => serde_json::from_str(text).map_err(|json_err| {
                ConfigError::Parse(format!("not TOML ({toml_err}) and not JSON ({json_err})"))
            })?,
        };
        let family = overlay
            .system
            .as_ref()
            .and_then(|s| s.family)
            .unwrap_or(Family::Vehicle);
        let mut config = ExperimentConfig::preset(preset, family);
        if let Some(o) = overlay.system {
            o.apply(&mut config.system);
        }
        if let Some(o) = overlay.controller {
            o.apply(&mut config.controller);
        }
        if let Some(o) = overlay.cost {
            o.apply(&mut config.cost);
        }
        if let Some(o) = overlay.sim {
            o.apply(&mut config.sim);
        }
        if let Some(o) = overlay.train {
            o.apply(&mut config.train);
        }
        if let Some(o) = overlay.loss {
            o.apply(&mut config.loss);
        }
        if let Some(o) = overlay.scenario {
            o.apply(&mut config.scenario);
        }
        config.validate()?;
        Ok(config)
    }

    /// Checks cross-field consistency; reports every violated field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let s = &self.system;
        if s.n < 2 {
            errs.push(format!("system.n: need at least 2 nodes, got {}", s.n));
        }
        if s.graph == GraphKind::Ring && s.n < 3 {
            errs.push("system.graph: ring needs n >= 3".into());
        }
        if s.graph == GraphKind::Same {
            errs.push("system.graph: 'same' is only valid for controller.comm_graph".into());
        }
        if s.graph == GraphKind::Regular {
            if s.degree == 0 || s.degree >= s.n {
                errs.push(format!(
                    "system.degree: {} infeasible for {} nodes",
                    s.degree, s.n
                ));
            } else if s.n * s.degree % 2 != 0 {
                errs.push(format!(
                    "system.degree: n * degree = {} must be even",
                    s.n * s.degree
                ));
            }
        }
        if s.family == Family::Power && s.edges == EdgeKind::Learnable {
            errs.push(
                "system.edges: the power family's edge feedback is fixed physics; learnable edges are not allowed"
                    .into(),
            );
        }
        if s.edge_neurons == 0 {
            errs.push("system.edge_neurons: must be positive".into());
        }
        if !(s.susceptance > 0.0) {
            errs.push(format!(
                "system.susceptance: must be positive, got {}",
                s.susceptance
            ));
        }

        let c = &self.controller;
        if c.neurons == 0 {
            errs.push("controller.neurons: must be positive".into());
        }
        if c.variant == ControllerKind::NeuralPiComm {
            if c.comm_graph == GraphKind::Ring && s.n < 3 {
                errs.push("controller.comm_graph: ring needs n >= 3".into());
            }
            if c.comm_graph == GraphKind::Regular {
                if c.comm_degree == 0 || c.comm_degree >= s.n {
                    errs.push(format!(
                        "controller.comm_degree: {} infeasible for {} nodes",
                        c.comm_degree, s.n
                    ));
                } else if s.n * c.comm_degree % 2 != 0 {
                    errs.push(format!(
                        "controller.comm_degree: n * degree = {} must be even",
                        s.n * c.comm_degree
                    ));
                }
            }
        }

        let cost = &self.cost;
        if cost.exponent < 2 || cost.exponent % 2 != 0 {
            errs.push(format!(
                "cost.exponent: must be even and >= 2, got {}",
                cost.exponent
            ));
        }
        if !(cost.c_low > 0.0 && cost.c_high >= cost.c_low) {
            errs.push(format!(
                "cost.c_low/c_high: need 0 < c_low <= c_high, got {} and {}",
                cost.c_low, cost.c_high
            ));
        }

        let sim = &self.sim;
        if !(sim.dt > 0.0) {
            errs.push(format!("sim.dt: must be positive, got {}", sim.dt));
        }
        if sim.k_steps == 0 {
            errs.push("sim.k_steps: must be positive".into());
        }
        if !(sim.eps_settle > 0.0) {
            errs.push(format!(
                "sim.eps_settle: must be positive, got {}",
                sim.eps_settle
            ));
        }

        let t = &self.train;
        if t.batch == 0 {
            errs.push("train.batch: must be positive".into());
        }
        if t.k_steps == 0 {
            errs.push("train.k_steps: must be positive".into());
        }
        if !(t.dt > 0.0) {
            errs.push(format!("train.dt: must be positive, got {}", t.dt));
        }
        if !(t.lr > 0.0) {
            errs.push(format!("train.lr: must be positive, got {}", t.lr));
        }
        if !(t.decay_factor > 0.0 && t.decay_factor <= 1.0) {
            errs.push(format!(
                "train.decay_factor: must lie in (0, 1], got {}",
                t.decay_factor
            ));
        }
        if t.mode == TrainMode::Edges && s.edges != EdgeKind::Learnable {
            errs.push("train.mode: edge training requires system.edges = \"learnable\"".into());
        }

        let l = &self.loss;
        if !(l.coeff_low >= 0.0 && l.coeff_high >= l.coeff_low) {
            errs.push(format!(
                "loss.coeff_low/coeff_high: need 0 <= low <= high, got {} and {}",
                l.coeff_low, l.coeff_high
            ));
        }
        if l.abs_weight < 0.0 {
            errs.push(format!(
                "loss.abs_weight: must be nonnegative, got {}",
                l.abs_weight
            ));
        }
        if l.action_reg < 0.0 {
            errs.push(format!(
                "loss.action_reg: must be nonnegative, got {}",
                l.action_reg
            ));
        }

        let sc = &self.scenario;
        if sc.count == 0 {
            errs.push("scenario.count: must be positive".into());
        }
        if !(sc.x0_low < sc.x0_high) {
            errs.push(format!(
                "scenario.x0_low/x0_high: need low < high, got {} and {}",
                sc.x0_low, sc.x0_high
            ));
        }
        if sc.max_load_changes == 0 {
            errs.push("scenario.max_load_changes: must be positive".into());
        }
        if !(sc.delta_low < sc.delta_high) {
            errs.push(format!(
                "scenario.delta_low/delta_high: need low < high, got {} and {}",
                sc.delta_low, sc.delta_high
            ));
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    fn build_graph(&self, kind: GraphKind, degree: usize, seed: u64) -> anyhow::Result<Graph> {
        let n = self.system.n;
        Ok(match kind {
            GraphKind::Line => Graph::line(n)?,
            GraphKind::Ring => Graph::ring(n)?,
            GraphKind::Complete => Graph::complete(n)?,
            GraphKind::Regular => Graph::random_regular(n, degree, seed)?,
            GraphKind::Same => unreachable!("validated"),
        })
    }

    /// Builds the physical system model.
    pub fn build_model(&self) -> anyhow::Result<SystemModel> {
        let s = &self.system;
        let graph = self.build_graph(s.graph, s.degree, s.seed)?;
        let model = match s.family {
            Family::Vehicle => {
                let mut model =
                    vehicle_platoon(graph, s.y_bar, s.seed, s.edge_neurons, s.edge_scale)?;
                if s.edges == EdgeKind::Sine {
                    model = SystemModel::new(
                        model.graph.clone(),
                        model.nodes.clone(),
                        (0..model.m())
                            .map(|_| EdgeModel::Sine { b: s.susceptance })
                            .collect(),
                        s.y_bar,
                    )?;
                }
                model
            }
            Family::Power => power_network(graph, s.y_bar, s.seed, s.susceptance)?,
        };
        Ok(model)
    }

    /// Builds the cost family used by the communicating controller and the
    /// steady-state metrics.
    pub fn build_cost(&self) -> anyhow::Result<CostFamily> {
        Ok(CostFamily::random(
            self.cost.exponent,
            self.system.n,
            self.cost.c_low,
            self.cost.c_high,
            self.cost.seed,
        )?)
    }

    /// Builds the configured controller at its initialization.
    pub fn build_controller(&self) -> anyhow::Result<Controller> {
        let n = self.system.n;
        let c = &self.controller;
        let monotone = |seed: u64| -> MonotoneParams {
            match c.init {
                InitKind::Random => MonotoneParams::init(c.neurons, seed, c.scale),
                InitKind::Banded => {
                    MonotoneParams::init_banded(c.neurons, seed, 0.5 * c.scale, 1.5 * c.scale)
                }
            }
        };
        Ok(match c.variant {
            ControllerKind::Linear => Controller::Linear {
                kp: vec![c.kp; n],
                ki: vec![c.ki; n],
            },
            ControllerKind::Dense => Controller::Dense {
                net: neuralpi_core::control::DenseNet::init(c.dense_hidden, c.seed),
                n,
            },
            ControllerKind::NeuralPi => Controller::NeuralPi {
                p_fns: (0..n).map(|i| monotone(c.seed ^ (2 * i as u64 + 1))).collect(),
                r_fns: (0..n).map(|i| monotone(c.seed ^ (2 * i as u64 + 2))).collect(),
            },
            ControllerKind::NeuralPiComm => {
                let comm = match c.comm_graph {
                    GraphKind::Same => self.build_graph(self.system.graph, self.system.degree, self.system.seed)?,
                    kind => self.build_graph(kind, c.comm_degree, c.seed)?,
                };
                Controller::NeuralPiComm {
                    p_fns: (0..n).map(|i| monotone(c.seed ^ (2 * i as u64 + 1))).collect(),
                    r_fns: (0..n).map(|i| monotone(c.seed ^ (2 * i as u64 + 2))).collect(),
                    comm,
                    cost: self.build_cost()?,
                    phi: c.phi,
                }
            }
        })
    }

    /// Builds the transient loss with coefficients drawn from the loss seed.
    pub fn build_loss(&self) -> LossSpec {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.loss.seed);
        let n = self.system.n;
        let coeffs: Vec<f64> = (0..n)
            .map(|_| {
                if self.loss.coeff_low == self.loss.coeff_high {
                    self.loss.coeff_low
                } else {
                    rng.gen_range(self.loss.coeff_low..self.loss.coeff_high)
                }
            })
            .collect();
        match self.loss.kind {
            LossKind::Vehicle => LossSpec::VehicleTracking { coeffs },
            LossKind::Power => LossSpec::PowerTracking {
                coeffs,
                abs_weight: self.loss.abs_weight,
            },
            LossKind::EdgeOnly => LossSpec::EdgeOnly {
                tail_start: self.loss.tail_start,
                action_reg: self.loss.action_reg,
                min_spacing: self.loss.min_spacing,
            },
        }
    }

    pub fn build_scenario_spec(&self) -> ScenarioSpec {
        match self.system.family {
            Family::Vehicle => ScenarioSpec::Vehicle {
                x0_low: self.scenario.x0_low,
                x0_high: self.scenario.x0_high,
                eta0: self.scenario.eta0,
            },
            Family::Power => ScenarioSpec::Power {
                max_changes: self.scenario.max_load_changes,
                delta_low: self.scenario.delta_low,
                delta_high: self.scenario.delta_high,
            },
        }
    }

    pub fn build_train_config(&self) -> TrainConfig {
        TrainConfig {
            episodes: self.train.episodes,
            batch: self.train.batch,
            k_steps: self.train.k_steps,
            dt: self.train.dt,
            lr: self.train.lr,
            decay_factor: self.train.decay_factor,
            decay_every: self.train.decay_every,
            seed: self.train.seed,
            checkpoint_every: self.train.checkpoint_every,
            target: match self.train.mode {
                TrainMode::Controller => TrainTarget::Controller,
                TrainMode::Edges => TrainTarget::EdgeFunctions,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for preset in [Preset::Desk, Preset::Paper] {
            for family in [Family::Vehicle, Family::Power] {
                ExperimentConfig::preset(preset, family).validate().unwrap();
            }
        }
    }

    #[test]
    fn toml_overlay_and_json_equivalence() {
        let toml_text = "[system]\nfamily = \"power\"\nn = 4\n\n[sim]\nk_steps = 100\n";
        let json_text = r#"{"system": {"family": "power", "n": 4}, "sim": {"k_steps": 100}}"#;
        let a = ExperimentConfig::from_str_with_preset(toml_text, Preset::Desk).unwrap();
        let b = ExperimentConfig::from_str_with_preset(json_text, Preset::Desk).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.system.n, 4);
        assert_eq!(a.sim.k_steps, 100);
        assert_eq!(a.system.family, Family::Power);
        assert_eq!(a.cost.exponent, 4);
    }

    #[test]
    fn validation_collects_every_violation() {
        let text = "[system]\nfamily = \"power\"\nn = 1\nedges = \"learnable\"\n\n[cost]\nexponent = 3\n\n[train]\nlr = -0.5\n";
        let err = ExperimentConfig::from_str_with_preset(text, Preset::Desk).unwrap_err();
        match err {
            ConfigError::Invalid(errs) => {
                let all = errs.join("\n");
                assert!(all.contains("system.n"), "{all}");
                assert!(all.contains("system.edges"), "{all}");
                assert!(all.contains("cost.exponent"), "{all}");
                assert!(all.contains("train.lr"), "{all}");
            }
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = "[system]\nfamly = \"power\"\n";
        assert!(ExperimentConfig::from_str_with_preset(text, Preset::Desk).is_err());
    }

    #[test]
    fn build_products_are_consistent() {
        let cfg = ExperimentConfig::preset(Preset::Desk, Family::Vehicle);
        let model = cfg.build_model().unwrap();
        assert_eq!(model.n(), 5);
        let ctrl = cfg.build_controller().unwrap();
        assert_eq!(ctrl.n(), 5);
        let cost = cfg.build_cost().unwrap();
        assert_eq!(cost.len(), 5);
    }
}
