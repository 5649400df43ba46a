//! Trainable-parameter census.

use std::fmt::Write as _;

use indexmap::IndexMap;

use crate::model::{param_shapes, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Census {
    /// Scalar count per parameter tensor, in registration order.
    pub tensors: Vec<(String, usize)>,
    /// Scalar count per module: `vit`, `embed`, `benc`, `dec`.
    pub modules: IndexMap<String, usize>,
    pub total: usize,
}

pub fn param_count(cfg: &ModelConfig) -> Census {
    let tensors: Vec<(String, usize)> = param_shapes(cfg)
        .into_iter()
        .map(|(n, s)| (n, s.iter().product()))
        .collect();
    let mut modules = IndexMap::new();
    for (name, n) in &tensors {
        let module = name.split('.').next().unwrap_or(name);
        *modules.entry(module.to_string()).or_insert(0) += n;
    }
    let total = tensors.iter().map(|(_, n)| n).sum();
    Census { tensors, modules, total }
}

impl Census {
    pub fn render(&self, detailed: bool) -> String {
        let mut s = String::new();
        if detailed {
            for (name, n) in &self.tensors {
                let _ = writeln!(s, "{name:<40}{n:>10}");
            }
            s.push('\n');
        }
        for (m, n) in &self.modules {
            let _ = writeln!(s, "{m:<40}{n:>10}");
        }
        let _ = writeln!(s, "{:<40}{:>10}", "total", self.total);
        s
    }
}
