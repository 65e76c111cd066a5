//! Experiment configuration: flags build a JSON object, the optional config file
//! is merged over it, and the result is deserialized strictly.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use nhflow::bubble_neck::ExtractConfig;
use nhflow::construction::{CoverModel, InitialMapSpec};
use nhflow::equivariant_flow::{bubble, over_the_pole, small_amplitude, FlowConfig};
use nhflow::fields::{DomainKind, RadialProfile};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Flow,
    BlowupSweep,
    BubbleAnalyze,
    Construct,
    Width,
    Checks,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Flow => "flow",
            Experiment::BlowupSweep => "blowup-sweep",
            Experiment::BubbleAnalyze => "bubble-analyze",
            Experiment::Construct => "construct",
            Experiment::Width => "width",
            Experiment::Checks => "checks",
        }
    }
}

/// Initial data family. The family fixes the domain: `over_the_pole` lives on
/// the unit flat ball, `small_amplitude` on the sphere chart, `bubble` on a
/// flat ball of the configured radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    OverThePole,
    SmallAmplitude,
    Bubble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Initial {
    pub family: Family,
    pub amplitude: f64,
    pub lambda: f64,
}

impl Default for Initial {
    fn default() -> Self {
        Self {
            family: Family::OverThePole,
            amplitude: 1.5,
            lambda: 0.1,
        }
    }
}

impl Initial {
    /// Set `flow.kind` and `flow.radius` to the domain of the family.
    pub fn apply_domain(&self, flow: &mut FlowConfig) {
        match self.family {
            Family::OverThePole => {
                flow.kind = DomainKind::FlatBall;
                flow.radius = 1.0;
            }
            Family::SmallAmplitude => {
                flow.kind = DomainKind::SpherePolar;
                flow.radius = std::f64::consts::PI;
            }
            Family::Bubble => flow.kind = DomainKind::FlatBall,
        }
    }

    /// The initial profile on the grid of `flow`, whose domain must already match.
    pub fn profile(&self, flow: &FlowConfig) -> Result<RadialProfile> {
        let p = match self.family {
            Family::OverThePole => over_the_pole(flow.k, self.amplitude)?,
            Family::SmallAmplitude => small_amplitude(flow.k, self.amplitude)?,
            Family::Bubble => bubble(DomainKind::FlatBall, flow.k, flow.radius, self.lambda)?,
        };
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub n: Vec<usize>,
    pub amplitude: Vec<f64>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            n: vec![3, 4, 5],
            amplitude: vec![0.5, 1.0, 1.5, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BubbleAnalysis {
    pub extract: ExtractConfig,
    /// Extra neck radii for the δ-refinement table.
    pub deltas: Vec<f64>,
    /// Small-energy threshold `ε` for the shell table.
    pub neck_eps: f64,
}

impl Default for BubbleAnalysis {
    fn default() -> Self {
        Self {
            extract: ExtractConfig::default(),
            deltas: vec![0.25, 0.125, 0.0625, 0.03125],
            neck_eps: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Construct {
    pub spec: InitialMapSpec,
    pub cover: CoverModel,
    pub sigmas: Vec<f64>,
    pub windings: Vec<i64>,
}

impl Default for Construct {
    fn default() -> Self {
        Self {
            spec: InitialMapSpec::default(),
            // A 4-torus admits both n = 2 and n = 3 domains.
            cover: CoverModel {
                m: 4,
                p0: vec![0.5; 4],
                ..CoverModel::default()
            },
            sigmas: vec![1e-2, 1e-3, 1e-4],
            windings: vec![1, 2, 4, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub out: PathBuf,
    pub flow: FlowConfig,
    pub initial: Initial,
    pub sweep: Sweep,
    pub bubble: BubbleAnalysis,
    pub construct: Construct,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Checks,
            seed: 0,
            out: PathBuf::from("nhflow-out"),
            flow: FlowConfig::default(),
            initial: Initial::default(),
            sweep: Sweep::default(),
            bubble: BubbleAnalysis::default(),
            construct: Construct::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match self.experiment {
            Experiment::Flow | Experiment::BubbleAnalyze => {
                self.flow.validate()?;
                self.initial.profile(&self.flow)?;
            }
            Experiment::BlowupSweep => {
                if self.sweep.n.is_empty() || self.sweep.amplitude.is_empty() {
                    bail!("sweep needs at least one n and one amplitude");
                }
                for &n in &self.sweep.n {
                    FlowConfig { n, ..self.flow.clone() }.validate()?;
                }
                for &amplitude in &self.sweep.amplitude {
                    Initial { amplitude, ..self.initial.clone() }.profile(&self.flow)?;
                }
            }
            Experiment::Construct | Experiment::Width => {
                self.construct.cover.validate()?;
                self.construct.spec.validate(&self.construct.cover)?;
                let list_ok = match self.experiment {
                    Experiment::Construct => self.construct.sigmas.len() >= 2,
                    _ => !self.construct.windings.is_empty(),
                };
                if !list_ok {
                    bail!("construct needs at least two sigmas, width at least one winding");
                }
                for &sigma in &self.construct.sigmas {
                    InitialMapSpec { sigma, ..self.construct.spec }.validate(&self.construct.cover)?;
                }
            }
            Experiment::Checks => {}
        }
        if self.experiment == Experiment::BubbleAnalyze && self.bubble.deltas.iter().any(|d| !(*d > 0.0)) {
            bail!("deltas must be positive");
        }
        Ok(())
    }
}

/// Recursive object merge; values in `over` win.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Overlay the config file (if any) on the flag-derived configuration.
pub fn resolve(from_flags: &ExperimentConfig, file: Option<&[u8]>) -> Result<ExperimentConfig> {
    let mut v = serde_json::to_value(from_flags)?;
    if let Some(bytes) = file {
        let over: Value = serde_json::from_slice(bytes).context("config file is not valid JSON")?;
        if !over.is_object() {
            bail!("config file must hold a JSON object");
        }
        merge(&mut v, over);
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(v).context("config does not match the schema")?;
    cfg.initial.apply_domain(&mut cfg.flow);
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_flags() {
        let flags = ExperimentConfig {
            experiment: Experiment::Flow,
            seed: 3,
            ..Default::default()
        };
        let cfg = resolve(&flags, Some(br#"{"seed": 9, "flow": {"k": 64}}"#)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.flow.k, 64);
        assert_eq!(cfg.flow.n, flags.flow.n);
        assert_eq!(cfg.experiment, Experiment::Flow);
    }

    #[test]
    fn unknown_and_invalid_fields_are_rejected() {
        let flags = ExperimentConfig::default();
        assert!(resolve(&flags, Some(br#"{"bogus": 1}"#)).is_err());
        assert!(resolve(&flags, Some(b"[1, 2]")).is_err());
        let flow = ExperimentConfig {
            experiment: Experiment::Flow,
            ..Default::default()
        };
        assert!(resolve(&flow, Some(br#"{"flow": {"n": 1}}"#)).is_err());
        let c = ExperimentConfig {
            experiment: Experiment::Construct,
            ..Default::default()
        };
        assert!(resolve(&c, Some(br#"{"construct": {"sigmas": [0.5, 1e-3]}}"#)).is_err());
    }

    #[test]
    fn family_fixes_the_domain() {
        let flags = ExperimentConfig {
            experiment: Experiment::Flow,
            ..Default::default()
        };
        let cfg = resolve(&flags, Some(br#"{"flow": {"k": 32}}"#)).unwrap();
        assert_eq!((cfg.flow.kind, cfg.flow.radius), (DomainKind::FlatBall, 1.0));
        assert_eq!(cfg.initial.profile(&cfg.flow).unwrap().kind, DomainKind::FlatBall);
        let small = resolve(&flags, Some(br#"{"flow": {"k": 32}, "initial": {"family": "small_amplitude"}}"#)).unwrap();
        assert_eq!(small.flow.kind, DomainKind::SpherePolar);
    }
}
