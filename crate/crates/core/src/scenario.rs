//! Scenario files: a versioned JSON description of one experiment.
//!
//! ```json
//! {
//!   "schema": "das-sim-scenario/1",
//!   "name": "gemv_32x16384",
//!   "topology": "terapool",
//!   "kernel": { "gemv": { "m": 32, "n": 16384 } }
//! }
//! ```
//!
//! Unknown keys are rejected everywhere. Errors carry the line they refer to.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;
use thiserror::Error;

use crate::engine::{self, EngineParams, Reference, RunMeta, SimReport};
use crate::error::{KernelError, SimFault};
use crate::kernels::{self, AttentionShape, GemmShape, GemvShape, KernelPlan, LayerNormShape, Scheme, VitConfig};
use crate::topology::ClusterTopology;

pub const SCENARIO_SCHEMA: &str = "das-sim-scenario/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySpec {
    /// `"terapool"` or `"desk"`.
    Preset(String),
    Custom(ClusterTopology),
}

impl TopologySpec {
    pub fn resolve(&self) -> Result<ClusterTopology, String> {
        let t = match self {
            TopologySpec::Preset(name) => match name.as_str() {
                "terapool" => ClusterTopology::terapool_default(),
                "desk" => ClusterTopology::desk_default(),
                other => return Err(format!("unknown topology preset {other:?}; expected \"terapool\" or \"desk\"")),
            },
            TopologySpec::Custom(t) => t.clone(),
        };
        t.validate().map_err(|e| e.to_string())?;
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeapBounds {
    pub base: u64,
    pub size: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelSpec {
    Gemv(GemvShape),
    Gemm(GemmShape),
    Attention(AttentionShape),
    Layernorm(LayerNormShape),
    Vit(VitConfig),
}

impl KernelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Gemv(_) => "gemv",
            KernelSpec::Gemm(_) => "gemm",
            KernelSpec::Attention(_) => "attention",
            KernelSpec::Layernorm(_) => "layernorm",
            KernelSpec::Vit(_) => "vit",
        }
    }

    pub fn plan(&self, topo: &ClusterTopology, scheme: Scheme, heap: Option<(u64, u64)>) -> Result<KernelPlan, KernelError> {
        match self {
            KernelSpec::Gemv(s) => kernels::gen_gemv(topo, scheme, s, heap),
            KernelSpec::Gemm(s) => kernels::gen_gemm(topo, scheme, s, heap),
            KernelSpec::Attention(s) => kernels::gen_flash_attention(topo, scheme, s, heap),
            KernelSpec::Layernorm(s) => kernels::gen_layernorm(topo, scheme, s, heap),
            KernelSpec::Vit(s) => kernels::gen_vit_encoder(topo, scheme, s, heap),
        }
    }
}

fn both() -> Vec<Scheme> {
    vec![Scheme::Das, Scheme::Interleaved]
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub comment: String,
    /// `"slow"` marks full-scale runs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
    pub topology: TopologySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heap: Option<HeapBounds>,
    pub kernel: KernelSpec,
    #[serde(default = "both")]
    pub schemes: Vec<Scheme>,
    #[serde(default)]
    pub engine: EngineParams,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Reference>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{origin}: {source}")]
    Io {
        origin: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}:{line}:{column}: {msg}")]
    Parse { origin: String, line: usize, column: usize, msg: String },
    #[error("{origin}:{line}: {msg}")]
    Invalid { origin: String, line: usize, msg: String },
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Kernel(#[from] KernelError),
    #[error("{0}")]
    Fault(#[from] SimFault),
}

/// serde_json appends " at line L column C"; the prefix already says so.
fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

/// 1-based line of the first occurrence of `"key"` in `text`, or 1.
fn line_of(text: &str, key: &str) -> usize {
    let pat = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&pat)).map(|i| i + 1).unwrap_or(1)
}

impl Scenario {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            origin: origin.to_string(),
            line: e.line(),
            column: e.column(),
            msg: strip_position(&e.to_string()),
        })?;
        sc.validate(text, origin)?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { origin: origin.clone(), source })?;
        Self::parse(&text, &origin)
    }

    fn validate(&self, text: &str, origin: &str) -> Result<(), ScenarioError> {
        let invalid = |key: &str, msg: String| ScenarioError::Invalid { origin: origin.to_string(), line: line_of(text, key), msg };
        if self.schema != SCENARIO_SCHEMA {
            return Err(invalid("schema", format!("schema {:?} is not supported; expected {SCENARIO_SCHEMA:?}", self.schema)));
        }
        let topo = self.topology().map_err(|m| invalid("topology", m))?;
        if self.schemes.is_empty() {
            return Err(invalid("schemes", "at least one scheme is required".into()));
        }
        self.engine.validate().map_err(|m| invalid("engine", m))?;
        // Planning once checks every generator precondition.
        self.kernel.plan(&topo, self.schemes[0], self.heap_bounds()).map_err(|e| invalid("kernel", e.to_string()))?;
        Ok(())
    }

    pub fn topology(&self) -> Result<ClusterTopology, String> {
        self.topology.resolve()
    }

    pub fn heap_bounds(&self) -> Option<(u64, u64)> {
        self.heap.map(|h| (h.base, h.size))
    }

    pub fn is_slow(&self) -> bool {
        self.tags.iter().any(|t| t == "slow")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Copy with one field replaced. `axis` is a dotted path from the root
    /// (`engine.window`) or a bare field name of the kernel shape or the
    /// engine parameters (`head_dim`, `window`).
    pub fn with_field(&self, axis: &str, value: &str) -> Result<Scenario, String> {
        let mut root = serde_json::to_value(self).expect("scenario serializes");
        let v: Value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let slot = find_axis(&mut root, axis).ok_or_else(|| format!("unknown axis {axis:?}"))?;
        *slot = v;
        let sc: Scenario = serde_json::from_value(root).map_err(|e| format!("{axis} = {value}: {e}"))?;
        let text = sc.to_json();
        sc.validate(&text, &format!("{} [{axis}={value}]", sc.name)).map_err(|e| e.to_string())?;
        Ok(sc)
    }

    pub fn plan(&self, scheme: Scheme) -> Result<KernelPlan, RunError> {
        let topo = self.topology().map_err(|m| KernelError::Shape(m))?;
        Ok(self.kernel.plan(&topo, scheme, self.heap_bounds())?)
    }

    /// Run one scheme.
    pub fn run(&self, scheme: Scheme) -> Result<SimReport, RunError> {
        let topo = self.topology().map_err(KernelError::Shape)?;
        let plan = self.kernel.plan(&topo, scheme, self.heap_bounds())?;
        let meta = RunMeta {
            label: self.name.clone(),
            kernel: plan.kernel.clone(),
            scheme: scheme.to_string(),
            workload: plan.workload.clone(),
            n_parallel: plan.n_parallel,
        };
        let mut rep = engine::run(&topo, plan.initial_heap(&topo), &plan.work, &self.engine, meta)?;
        rep.reference = self.reference.clone();
        Ok(rep)
    }

    /// Every listed scheme; when both ran, the DAS report carries the speedup.
    pub fn run_all(&self) -> Result<Vec<SimReport>, RunError> {
        let mut reps: Vec<SimReport> = self.schemes.iter().map(|&s| self.run(s)).collect::<Result<_, _>>()?;
        let base = reps.iter().position(|r| r.meta.scheme == "interleaved");
        let das = reps.iter().position(|r| r.meta.scheme == "das");
        if let (Some(b), Some(d)) = (base, das) {
            let baseline = reps[b].clone();
            engine::attach_speedup(&mut reps[d], &baseline);
        }
        Ok(reps)
    }
}

fn find_axis<'a>(root: &'a mut Value, axis: &str) -> Option<&'a mut Value> {
    if axis.contains('.') {
        let mut cur = root;
        for part in axis.split('.') {
            cur = cur.get_mut(part)?;
        }
        return Some(cur);
    }
    // Kernel shape first, then engine parameters.
    let in_kernel = root
        .get("kernel")
        .and_then(|k| k.as_object())
        .and_then(|k| k.values().next())
        .and_then(|shape| shape.get(axis))
        .is_some();
    if in_kernel {
        let k = root.get_mut("kernel")?.as_object_mut()?;
        return k.values_mut().next()?.get_mut(axis);
    }
    let in_engine = root.get("engine").and_then(|e| e.get(axis)).is_some();
    if in_engine {
        return root.get_mut("engine")?.get_mut(axis);
    }
    root.get_mut(axis)
}

/// DAS and interleaved runs of the same workload and their speedup
/// (interleaved cycles over DAS cycles).
pub fn run_pair(sc: &Scenario) -> Result<(SimReport, SimReport, f64), RunError> {
    let base = sc.run(Scheme::Interleaved)?;
    let mut das = sc.run(Scheme::Das)?;
    engine::attach_speedup(&mut das, &base);
    let sp = das.speedup.unwrap_or(1.0);
    Ok((das, base, sp))
}
