//! Per-model contribution report for a merge configuration.

use std::fmt::Write;

use evomerge_core::MergeConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelContribution {
    pub model: usize,
    /// Retained fraction `k_t`.
    pub density: f64,
    /// Merge weight `c_t`.
    pub weight: f64,
    /// `c_t / Σ c`, or 0 when every weight is 0.
    pub share: f64,
    pub drop_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub lambda: f64,
    pub models: Vec<ModelContribution>,
}

pub fn contributions(cfg: &MergeConfig) -> ContributionReport {
    let total: f64 = cfg.c.iter().sum();
    let models = cfg
        .k
        .iter()
        .zip(&cfg.c)
        .enumerate()
        .map(|(t, (&k, &c))| ModelContribution {
            model: t,
            density: k,
            weight: c,
            share: if total > 0.0 { c / total } else { 0.0 },
            drop_rate: cfg.alpha_for(t),
        })
        .collect();
    ContributionReport {
        lambda: cfg.lambda,
        models,
    }
}

impl ContributionReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "lambda {}", self.lambda);
        let _ = writeln!(
            out,
            "{:>5}  {:>10}  {:>10}  {:>10}  {:>10}",
            "model", "density", "weight", "share", "drop"
        );
        for m in &self.models {
            let _ = writeln!(
                out,
                "{:>5}  {:>10.6}  {:>10.6}  {:>10.6}  {:>10.6}",
                m.model, m.density, m.weight, m.share, m.drop_rate
            );
        }
        out
    }
}
