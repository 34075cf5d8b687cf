//! Declarative experiment configuration: JSON documents validated before
//! any compute runs. Every command reads its own parameter tree; global
//! fields cover the seed, output directory and thread budget.

use crate::harness::HistogramSpec;
use crate::sampling::MomentumDist;
use crate::solver::FunctionalOrder;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stream in a run derives from it.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub md: Option<MdConfig>,
    #[serde(default)]
    pub boltzmann: Option<BoltzmannConfig>,
    #[serde(default)]
    pub enskog: Option<EnskogConfig>,
    #[serde(default)]
    pub rods1d: Option<RodsConfig>,
    #[serde(default)]
    pub hierarchy: Option<HierarchyConfig>,
    #[serde(default)]
    pub bgscan: Option<BgScanConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdConfig {
    pub n: usize,
    pub epsilon: f64,
    pub box_side: f64,
    pub t_end: f64,
    pub momentum: MomentumDist,
    /// Emit a trajectory row at every collision event.
    #[serde(default)]
    pub dump_events: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoltzmannConfig {
    pub samples: usize,
    pub dt: f64,
    pub steps: usize,
    pub momentum: MomentumDist,
    #[serde(default = "default_rate")]
    pub rate_multiplier: f64,
    #[serde(default = "default_majorant")]
    pub majorant_speed: f64,
    #[serde(default = "default_h_bins")]
    pub h_bins: usize,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnskogConfig {
    pub samples: usize,
    pub cells: usize,
    pub length: f64,
    pub dt: f64,
    pub steps: usize,
    pub epsilon: f64,
    pub momentum: MomentumDist,
    #[serde(default = "default_order")]
    pub functional_order: FunctionalOrder,
    #[serde(default = "default_rate")]
    pub rate_multiplier: f64,
    #[serde(default = "default_majorant")]
    pub majorant_speed: f64,
    /// Relative amplitude of the sinusoidal density profile.
    #[serde(default)]
    pub density_amplitude: f64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RodsConfig {
    pub epsilon: f64,
    pub cutoff: f64,
    #[serde(default = "default_panels")]
    pub panels: usize,
    /// Evaluation grid over (q1, p1).
    pub q_points: usize,
    pub p_points: usize,
    pub q_range: (f64, f64),
    pub p_range: (f64, f64),
    /// Closure: (1 + gradient * (q1 + q2)) times Gaussians of width sigma.
    #[serde(default)]
    pub gradient: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyConfig {
    pub check: HierarchyCheck,
    pub epsilon: f64,
    pub t: f64,
    pub support_n: usize,
    pub mc_samples: u64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HierarchyCheck {
    Duality,
    Series,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BgScanConfig {
    pub epsilons: Vec<f64>,
    pub density_constant: f64,
    pub box_side: f64,
    pub replicas: usize,
    #[serde(default = "default_true")]
    pub equalize_budget: bool,
    /// Observation times in mean free times.
    pub t_grid_mft: Vec<f64>,
    pub momentum: MomentumDist,
    #[serde(default)]
    pub estimator: Option<HistogramSpec>,
    #[serde(default = "default_cap")]
    pub particle_cap: usize,
    #[serde(default = "default_ref_samples")]
    pub reference_samples: usize,
    #[serde(default = "default_ref_dt")]
    pub reference_dt: f64,
}

fn default_rate() -> f64 {
    1.0
}
fn default_majorant() -> f64 {
    16.0
}
fn default_h_bins() -> usize {
    20
}
fn default_record_every() -> usize {
    1
}
fn default_order() -> FunctionalOrder {
    FunctionalOrder::Product
}
fn default_panels() -> usize {
    400
}
fn default_sigma() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_cap() -> usize {
    10_000
}
fn default_ref_samples() -> usize {
    100_000
}
fn default_ref_dt() -> f64 {
    0.005
}

/// One validation finding: the offending field and what is wrong with it.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Diagnostic {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    /// Full schema and cross-field validation without running anything.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        if self.seed.is_none() {
            // propose a concrete seed so the run is reproducible once pinned
            let proposed = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos() as u64)
                .unwrap_or(0x5eed);
            out.push(Diagnostic::new(
                "seed",
                format!("missing seed; consider pinning seed = {proposed}"),
            ));
        }
        if let Some(md) = &self.md {
            if md.epsilon <= 0.0 {
                out.push(Diagnostic::new("md.epsilon", "must be positive"));
            }
            if md.box_side <= 2.0 * md.epsilon {
                out.push(Diagnostic::new(
                    "md.box_side",
                    "must exceed twice the diameter",
                ));
            }
            if md.n == 0 {
                out.push(Diagnostic::new("md.n", "must be positive"));
            }
            if md.t_end < 0.0 {
                out.push(Diagnostic::new("md.t_end", "must be nonnegative"));
            }
        }
        if let Some(b) = &self.boltzmann {
            if b.dt <= 0.0 {
                out.push(Diagnostic::new("boltzmann.dt", "must be positive"));
            }
            if b.samples < 1000 {
                out.push(Diagnostic::new(
                    "boltzmann.samples",
                    "homogeneous runs need at least 1000 samples",
                ));
            }
            if b.majorant_speed <= 0.0 {
                out.push(Diagnostic::new(
                    "boltzmann.majorant_speed",
                    "must be positive",
                ));
            }
        }
        if let Some(e) = &self.enskog {
            if e.epsilon < 0.0 {
                out.push(Diagnostic::new("enskog.epsilon", "must be nonnegative"));
            }
            let cell = e.length / e.cells.max(1) as f64;
            if e.epsilon >= cell {
                out.push(Diagnostic::new(
                    "enskog.epsilon",
                    format!("must be smaller than the cell size {cell}"),
                ));
            }
            if e.dt <= 0.0 {
                out.push(Diagnostic::new("enskog.dt", "must be positive"));
            }
            if e.cells == 0 {
                out.push(Diagnostic::new("enskog.cells", "must be positive"));
            }
            if !(0.0..1.0).contains(&e.density_amplitude) {
                out.push(Diagnostic::new(
                    "enskog.density_amplitude",
                    "must lie in [0, 1)",
                ));
            }
        }
        if let Some(r) = &self.rods1d {
            if r.epsilon < 0.0 {
                out.push(Diagnostic::new("rods1d.epsilon", "must be nonnegative"));
            }
            if r.cutoff <= 0.0 {
                out.push(Diagnostic::new("rods1d.cutoff", "must be positive"));
            }
            if r.q_points == 0 || r.p_points == 0 {
                out.push(Diagnostic::new("rods1d.q_points", "grid must be nonempty"));
            }
        }
        if let Some(h) = &self.hierarchy {
            if h.epsilon < 0.0 {
                out.push(Diagnostic::new("hierarchy.epsilon", "must be nonnegative"));
            }
            if !(2..=3).contains(&h.support_n) {
                out.push(Diagnostic::new(
                    "hierarchy.support_n",
                    "supported values are 2 and 3",
                ));
            }
            if h.mc_samples < 1000 {
                out.push(Diagnostic::new(
                    "hierarchy.mc_samples",
                    "needs at least 1000 samples",
                ));
            }
        }
        if let Some(bg) = &self.bgscan {
            if bg.epsilons.is_empty() {
                out.push(Diagnostic::new("bgscan.epsilons", "must be nonempty"));
            }
            if bg.epsilons.iter().any(|&e| e <= 0.0) {
                out.push(Diagnostic::new("bgscan.epsilons", "must be positive"));
            }
            if bg.epsilons.windows(2).any(|w| w[1] >= w[0]) {
                out.push(Diagnostic::new(
                    "bgscan.epsilons",
                    "must be strictly descending",
                ));
            }
            if bg.density_constant <= 0.0 {
                out.push(Diagnostic::new(
                    "bgscan.density_constant",
                    "must be positive",
                ));
            }
            let v = bg.box_side.powi(3);
            for &eps in &bg.epsilons {
                let n = (bg.density_constant * v / (eps * eps)).round() as usize;
                if n > bg.particle_cap {
                    out.push(Diagnostic::new(
                        "bgscan.particle_cap",
                        format!("eps {eps} requires {n} particles over the cap"),
                    ));
                }
                if bg.box_side <= 2.0 * eps {
                    out.push(Diagnostic::new(
                        "bgscan.box_side",
                        "must exceed twice every diameter",
                    ));
                }
            }
            if bg.replicas == 0 {
                out.push(Diagnostic::new("bgscan.replicas", "must be positive"));
            }
        }
        out
    }
}

/// Applies a dotted-path override (`a.b.c=value`) onto a JSON document.
/// Values parse as JSON when possible and fall back to strings.
pub fn apply_override(
    doc: &mut serde_json::Value,
    assignment: &str,
) -> Result<(), String> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override '{assignment}' is not key=value"))?;
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            match node {
                serde_json::Value::Object(map) => {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                _ => return Err(format!("'{path}' does not address an object field")),
            }
        }
        node = match node {
            serde_json::Value::Object(map) => map
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default())),
            _ => return Err(format!("'{path}' does not address an object field")),
        };
    }
    Err(format!("empty override path in '{assignment}'"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_valid() -> serde_json::Value {
        serde_json::json!({
            "seed": 7,
            "enskog": {
                "samples": 10_000,
                "cells": 16,
                "length": 8.0,
                "dt": 0.01,
                "steps": 10,
                "epsilon": 0.2,
                "momentum": {"kind": "gaussian", "sigma": 1.0}
            }
        })
    }

    #[test]
    fn valid_config_has_no_diagnostics() {
        let cfg =
            ExperimentConfig::from_json(minimal_valid().to_string().as_bytes()).unwrap();
        assert!(cfg.validate().is_empty());
    }

    #[test]
    fn oversized_diameter_names_the_field() {
        let mut doc = minimal_valid();
        apply_override(&mut doc, "enskog.epsilon=0.9").unwrap();
        let cfg = ExperimentConfig::from_json(doc.to_string().as_bytes()).unwrap();
        let diags = cfg.validate();
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].field, "enskog.epsilon");
    }

    #[test]
    fn missing_seed_proposes_one() {
        let mut doc = minimal_valid();
        doc.as_object_mut().unwrap().remove("seed");
        let cfg = ExperimentConfig::from_json(doc.to_string().as_bytes()).unwrap();
        let diags = cfg.validate();
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].field, "seed");
        assert!(diags[0].message.contains("seed ="));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut doc = minimal_valid();
        apply_override(&mut doc, "not_a_field=1").unwrap();
        assert!(ExperimentConfig::from_json(doc.to_string().as_bytes()).is_err());
    }

    #[test]
    fn overrides_parse_scalars_and_strings() {
        let mut doc = serde_json::json!({});
        apply_override(&mut doc, "a.b=3.5").unwrap();
        apply_override(&mut doc, "a.c=hello").unwrap();
        assert_eq!(doc["a"]["b"], serde_json::json!(3.5));
        assert_eq!(doc["a"]["c"], serde_json::json!("hello"));
    }
}
