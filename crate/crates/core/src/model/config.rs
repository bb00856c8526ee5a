//! Run configuration and the named presets.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::atomflow::AtomFlowConfig;
use crate::bondflow::BondFlowConfig;
use crate::flowcore::{FlowError, FlowResult};
use crate::molgraph::ElementTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Padded atom count.
    pub n: usize,
    /// Atom feature width: elements, one pad channel, then null channels.
    pub d_pad: usize,
    /// No-bond plus bond orders; molecule encoding always uses 4.
    pub bond_channels: usize,
    pub elements: ElementTable,
    pub atom: AtomFlowConfig,
    pub bond: BondFlowConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub noise_scale: f64,
    /// Atom count above which a valid sample counts as large.
    pub size_filter: usize,
}

impl Config {
    /// Drug-like molecules up to 38 atoms padded to 40.
    pub fn zinc_like() -> Self {
        Self {
            n: 40,
            d_pad: 16,
            bond_channels: 4,
            elements: ElementTable::zinc(),
            atom: AtomFlowConfig { coarsen: vec![2, 2, 2], steps: 6, gcn_layers: 2, gcn_hidden: 256, mlp_hidden: 256 },
            bond: BondFlowConfig { blocks: 3, steps: 3, hidden: 256 },
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 100,
            seed: 0,
            noise_scale: 0.9,
            size_filter: 38,
        }
    }

    /// Polymer-like molecules up to 122 atoms padded to 128.
    pub fn polymer_like() -> Self {
        Self {
            n: 128,
            d_pad: 8,
            elements: ElementTable::polymer(),
            atom: AtomFlowConfig { coarsen: vec![2, 2, 2, 2, 2], steps: 8, gcn_layers: 4, gcn_hidden: 128, mlp_hidden: 128 },
            bond: BondFlowConfig { blocks: 5, steps: 3, hidden: 128 },
            epochs: 200,
            ..Self::zinc_like()
        }
    }

    /// Small C/N/O molecules up to 16 atoms; sized for desk-scale runs.
    pub fn toy() -> Self {
        Self {
            n: 16,
            d_pad: 4,
            elements: ElementTable::organic_small(),
            atom: AtomFlowConfig { coarsen: vec![2, 2], steps: 2, gcn_layers: 1, gcn_hidden: 16, mlp_hidden: 16 },
            bond: BondFlowConfig { blocks: 2, steps: 2, hidden: 16 },
            batch_size: 32,
            epochs: 30,
            ..Self::zinc_like()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "zinc-like" => Some(Self::zinc_like()),
            "polymer-like" => Some(Self::polymer_like()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    /// Reads a JSON document whose optional `"preset"` names the base
    /// (default `zinc-like`) and whose other keys override it, recursively
    /// for nested objects.
    pub fn from_json(text: &str) -> FlowResult<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| FlowError::Config(e.to_string()))?;
        let Value::Object(mut over) = doc else {
            return Err(FlowError::Config("config must be a JSON object".into()));
        };
        let base_name = match over.remove("preset") {
            None => "zinc-like".to_string(),
            Some(Value::String(s)) => s,
            Some(other) => return Err(FlowError::Config(format!("preset must be a string, got {other}"))),
        };
        let base = Self::preset(&base_name).ok_or_else(|| FlowError::Config(format!("unknown preset {base_name:?}")))?;
        let mut merged = serde_json::to_value(base).expect("config serializes");
        merge(&mut merged, Value::Object(over));
        let cfg: Self = serde_json::from_value(merged).map_err(|e| FlowError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> FlowResult<()> {
        if self.d_pad < self.elements.len() + 1 {
            return Err(FlowError::Config(format!("d_pad {} leaves no pad channel", self.d_pad)));
        }
        if !(2..=4).contains(&self.bond_channels) {
            return Err(FlowError::Config(format!("{} bond channels outside 2..=4", self.bond_channels)));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale < 1.0) {
            return Err(FlowError::Config(format!("noise scale {} outside (0, 1)", self.noise_scale)));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(FlowError::Config("learning rate and batch size must be positive".into()));
        }
        self.atom.geometry(self.n, self.d_pad)?;
        self.bond.geometry(self.bond_channels, self.n)?;
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // element tables are replaced whole
                    Some(slot) if k != "elements" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
