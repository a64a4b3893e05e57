//! TOML run configuration.
//!
//! ```toml
//! [instance]
//! kind = "cso_toy"
//!
//! [estimator]
//! kind = "rt-mlmc"
//! epsilon = 0.01
//!
//! [optimizer]
//! framework = "sgd"
//! iterations = 20000
//!
//! [io]
//! seed = 0
//! ```
//!
//! Every block except `[instance]` is optional. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use mlmc_grad::bench::{Framework, MethodSpec, ScheduleChoice};
use mlmc_grad::problems::{self, QueueInstance, ServiceLaw, SinkhornDro};
use mlmc_grad::{EstimatorKind, Oracle};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_EPSILON: f64 = 1e-2;
pub const DEFAULT_ITERATIONS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub instance: InstanceBlock,
    #[serde(default)]
    pub estimator: EstimatorBlock,
    #[serde(default)]
    pub optimizer: OptimizerBlock,
    #[serde(default)]
    pub bench: BenchBlock,
    #[serde(default)]
    pub io: IoBlock,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceBlock {
    pub kind: String,
    /// Queue service law: exponential, erlang or hyperexponential.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<String>,
    /// Sinkhorn data file (features then label per row).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_sq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorBlock {
    pub kind: String,
    /// Fixed level `L`; without it the level follows from `epsilon`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<u32>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// L-SGD batch `n_L`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    /// V-MLMC batch multiplier `N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiplier: Option<f64>,
    #[serde(default)]
    pub force: bool,
}

impl Default for EstimatorBlock {
    fn default() -> Self {
        Self {
            kind: "rt-mlmc".into(),
            level: None,
            epsilon: DEFAULT_EPSILON,
            batch: None,
            multiplier: None,
            force: false,
        }
    }
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_framework() -> String {
    "sgd".into()
}

fn default_schedule() -> String {
    "table".into()
}

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerBlock {
    /// `sgd` or `vr`.
    #[serde(default = "default_framework")]
    pub framework: String,
    /// Strongly convex SGD step: `table`, `shifted` or `constant` (with `step`).
    #[serde(default = "default_schedule")]
    pub schedule: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    /// Start point; the instance default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x1: Option<Vec<f64>>,
    /// Stop as soon as the ground-truth target for `epsilon` is met.
    #[serde(default)]
    pub stop_at_target: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d1: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d2: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        Self {
            framework: default_framework(),
            schedule: default_schedule(),
            step: None,
            iterations: DEFAULT_ITERATIONS,
            budget: None,
            x1: None,
            stop_at_target: false,
            d1: None,
            d2: None,
            epoch: None,
        }
    }
}

/// Probe and sweep settings. Methods use the label syntax
/// `[vr-]<estimator>[(L=<level>)]`, e.g. `vr-rt-mlmc` or `l-sgd(L=12)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replications: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    /// Slope bands `[low, high]` keyed by method label, checked by `--assert`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bands: Option<std::collections::BTreeMap<String, [f64; 2]>>,
    /// Paired comparison `[a, b]`; the reported ratio is cost(b)/cost(a).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<[String; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_target: Option<f64>,
    /// `gap` (`F − F* ≤ target`) or `grad-sq` (`‖∇F‖² ≤ target²`); `gap`
    /// whenever the instance has a reference optimum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_stop: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Root seed; 0 when absent.
    #[serde(default)]
    pub seed: u64,
}

impl Config {
    pub fn minimal(instance: &str) -> Self {
        Self { instance: InstanceBlock { kind: instance.into(), ..Default::default() }, ..Default::default() }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Parse(format!("{origin}: {e}")))?;
        cfg.validate().map_err(|e| CliError::Parse(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Parse(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Canonical TOML that parses back to an equal `Config`.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn validate(&self) -> Result<(), String> {
        let norm = self.instance.kind.trim().to_ascii_lowercase().replace('-', "_");
        let known = problems::INSTANCE_NAMES.contains(&norm.as_str())
            || ["cso", "linear_inner", "nonconvex"].contains(&norm.as_str());
        if !known {
            return Err(format!(
                "instance.kind: unknown instance '{}', expected one of {}",
                self.instance.kind,
                problems::INSTANCE_NAMES.join(", ")
            ));
        }
        self.estimator.kind.parse::<EstimatorKind>().map_err(|e| format!("estimator.kind: {e}"))?;
        positive("estimator.epsilon", Some(self.estimator.epsilon))?;
        positive("estimator.multiplier", self.estimator.multiplier)?;
        positive("optimizer.step", self.optimizer.step)?;
        positive("instance.tau_sq", self.instance.tau_sq)?;
        positive("instance.lambda", self.instance.lambda)?;
        positive("bench.compare_target", self.bench.compare_target)?;
        positive("bench.resolution", self.bench.resolution)?;
        if self.estimator.batch == Some(0) {
            return Err("estimator.batch: must be at least 1".into());
        }
        if self.optimizer.iterations == 0 {
            return Err("optimizer.iterations: must be at least 1".into());
        }
        if self.optimizer.budget == Some(0) || self.bench.budget == Some(0) {
            return Err("budget: must be positive".into());
        }
        if self.bench.replications == Some(0) || self.bench.seeds == Some(0) {
            return Err("bench: replications and seeds must be positive".into());
        }
        framework(&self.optimizer.framework).map_err(|e| format!("optimizer.framework: {e}"))?;
        self.schedule().map_err(|e| format!("optimizer.schedule: {e}"))?;
        if let Some(methods) = &self.bench.methods {
            if methods.is_empty() {
                return Err("bench.methods: the estimator list is empty".into());
            }
            for m in methods {
                parse_method(m).map_err(|e| format!("bench.methods: {e}"))?;
            }
        }
        if let Some(pair) = &self.bench.compare {
            for m in pair {
                parse_method(m).map_err(|e| format!("bench.compare: {e}"))?;
            }
        }
        if let Some(stop) = &self.bench.compare_stop {
            if !["gap", "grad-sq"].contains(&stop.as_str()) {
                return Err(format!("bench.compare_stop: unknown rule '{stop}', expected gap or grad-sq"));
            }
        }
        if let Some(grid) = &self.bench.eps_grid {
            if grid.is_empty() || grid.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                return Err("bench.eps_grid: values must be positive".into());
            }
            if grid.windows(2).any(|w| w[1] >= w[0]) {
                return Err("bench.eps_grid: must be strictly decreasing".into());
            }
        }
        if let Some(s) = &self.instance.service {
            ServiceLaw::parse(s).map_err(|e| format!("instance.service: {e}"))?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<ScheduleChoice, String> {
        match self.optimizer.schedule.trim().to_ascii_lowercase().as_str() {
            "table" => Ok(ScheduleChoice::Table),
            "shifted" => Ok(ScheduleChoice::Shifted),
            "constant" => match self.optimizer.step {
                Some(g) => Ok(ScheduleChoice::Constant(g)),
                None => Err("a constant schedule needs optimizer.step".into()),
            },
            other => Err(format!("unknown schedule '{other}', expected table, shifted or constant")),
        }
    }

    /// The run's method, with optimizer overrides applied.
    pub fn method(&self) -> Result<MethodSpec, CliError> {
        let kind: EstimatorKind = self.estimator.kind.parse().map_err(|e| CliError::Parse(format!("{e}")))?;
        let mut m = MethodSpec::new(kind).forced(self.estimator.force).with_schedule(self.schedule().map_err(CliError::Parse)?);
        if framework(&self.optimizer.framework).map_err(CliError::Parse)? == Framework::Vr {
            m = m.vr();
        }
        if let Some(l) = self.estimator.level {
            m = m.at_level(l);
        }
        if let Some(step) = self.optimizer.step {
            m = m.with_vr_step(step);
        }
        match (self.optimizer.d1, self.optimizer.d2, self.optimizer.epoch) {
            (None, None, None) => {}
            (Some(d1), Some(d2), Some(q)) => m = m.with_vr_sizes(d1, d2, q),
            _ => return Err(CliError::Parse("optimizer.d1, d2 and epoch must be given together".into())),
        }
        Ok(m)
    }

    pub fn oracle(&self) -> Result<Box<dyn Oracle>, CliError> {
        let norm = self.instance.kind.trim().to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "queue" => {
                let law = ServiceLaw::parse(self.instance.service.as_deref().unwrap_or("exponential"))?;
                Ok(Box::new(QueueInstance::with_service(law)?))
            }
            "sinkhorn" if self.instance.data.is_some() || self.instance.tau_sq.is_some() || self.instance.lambda.is_some() => {
                let tau_sq = self.instance.tau_sq.unwrap_or(SinkhornDro::DEFAULT_TAU_SQ);
                let lambda = self.instance.lambda.unwrap_or(SinkhornDro::DEFAULT_LAMBDA);
                let inst = match &self.instance.data {
                    Some(p) => SinkhornDro::from_csv(p, tau_sq, lambda)?,
                    None => {
                        let base = SinkhornDro::synthetic(SinkhornDro::DEFAULT_SEED);
                        SinkhornDro::new(base.features().to_vec(), base.labels().to_vec(), tau_sq, lambda)?
                    }
                };
                Ok(Box::new(inst))
            }
            _ => Ok(problems::by_name(&norm)?),
        }
    }
}

fn positive(field: &str, v: Option<f64>) -> Result<(), String> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => Err(format!("{field}: must be positive and finite, got {x}")),
        _ => Ok(()),
    }
}

fn framework(s: &str) -> Result<Framework, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "sgd" => Ok(Framework::Sgd),
        "vr" => Ok(Framework::Vr),
        other => Err(format!("unknown framework '{other}', expected sgd or vr")),
    }
}

/// Parse `[vr-]<estimator>[(L=<level>)]`.
pub fn parse_method(label: &str) -> Result<MethodSpec, String> {
    let s = label.trim().to_ascii_lowercase();
    let (vr, rest) = match s.strip_prefix("vr-") {
        Some(r) => (true, r),
        None => (false, s.as_str()),
    };
    let (name, level) = match rest.split_once('(') {
        Some((n, tail)) => {
            let inner = tail
                .strip_suffix(')')
                .and_then(|t| t.trim().strip_prefix("l="))
                .ok_or_else(|| format!("bad level suffix in '{label}', expected (L=<level>)"))?;
            let l: u32 = inner.trim().parse().map_err(|_| format!("bad level in '{label}'"))?;
            (n, Some(l))
        }
        None => (rest, None),
    };
    let kind: EstimatorKind = name.parse().map_err(|e| format!("{e}"))?;
    let mut m = MethodSpec::new(kind);
    if vr {
        m = m.vr();
    }
    if let Some(l) = level {
        m = m.at_level(l);
    }
    Ok(m)
}
