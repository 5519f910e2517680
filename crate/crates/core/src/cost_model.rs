//! Parameter and FLOP accounting, cost regularizers and regularized importance.
//!
//! Pruning one channel of a coupling unit shrinks every layer that owns one of the
//! unit's axes and every layer that reads it. `S` and `C` are the weight count and
//! FLOPs of exactly those touched layers; for an uncoupled layer `l` this is layer
//! `l` plus its successors. FLOPs are `2 · O² · K² · M · N` per convolution (two per
//! multiply-accumulate), `2 · M · N` per fully connected layer and `2 · O² · K² · M`
//! per depthwise layer. Biases and batch norm count as parameters but not FLOPs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::importance::ImportanceTable;
use crate::model_graph::{LayerKind, LayerSpec, ModelGraph};
use crate::planner::{PlanError, PruningPlan};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("unit `{unit}` has cost {value} < 2; log-ratio regularizer undefined")]
    TooSmall { unit: String, value: f64 },
    #[error("regularizer weights must be finite and non-negative (beta={beta}, gamma={gamma})")]
    Weights { beta: f64, gamma: f64 },
    #[error("importance unit `{0}` has no regularizer entry")]
    LayerMismatch(String),
}

/// Which map size multiplies the per-position work in `C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialConvention {
    #[default]
    Output,
    Input,
}

/// Trainable parameters: weights, bias and batch-norm vectors.
pub fn layer_params(l: &LayerSpec) -> u64 {
    let bias = if l.bias { l.out_channels as u64 } else { 0 };
    match l.kind {
        LayerKind::BatchNorm => 4 * l.out_channels as u64,
        _ => layer_weights(l) + bias,
    }
}

/// Weight-tensor entries only.
pub fn layer_weights(l: &LayerSpec) -> u64 {
    let k2 = (l.kernel as u64).pow(2);
    let (m, n) = (l.in_channels as u64, l.out_channels as u64);
    match l.kind {
        LayerKind::Conv | LayerKind::PointwiseConv | LayerKind::Fc => k2 * m * n,
        LayerKind::DepthwiseConv => k2 * m,
        LayerKind::BatchNorm => 0,
    }
}

pub fn layer_flops(l: &LayerSpec, convention: SpatialConvention) -> u64 {
    let x = match convention {
        SpatialConvention::Output => l.out_spatial,
        SpatialConvention::Input => l.in_spatial,
    } as u64;
    match l.kind {
        LayerKind::Fc => 2 * layer_weights(l),
        LayerKind::BatchNorm => 0,
        _ => 2 * x * x * layer_weights(l),
    }
}

pub fn total_params(graph: &ModelGraph) -> u64 {
    graph.layers().iter().map(layer_params).sum()
}

pub fn total_flops(graph: &ModelGraph, convention: SpatialConvention) -> u64 {
    graph.layers().iter().map(|l| layer_flops(l, convention)).sum()
}

/// Shape of layer `idx` once `removed[g]` channels leave every group `g`.
pub(crate) fn shrunk_layer(graph: &ModelGraph, idx: usize, removed: &[u32]) -> LayerSpec {
    let mut l = graph.layers()[idx].clone();
    l.out_channels -= removed[graph.group_of(idx)];
    if l.kind.is_passthrough() {
        l.in_channels = l.out_channels;
    } else if let Some(g) = graph.input_group(idx) {
        l.in_channels -= removed[g] * graph.rows_per_channel(idx);
    }
    l
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub layer: String,
    pub params: u64,
    pub weights: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnitCost {
    /// Representative layer name of the coupling group.
    pub unit: String,
    pub group: usize,
    pub width: u32,
    /// Weights of all layers touched by the unit.
    pub s: u64,
    /// FLOPs of all layers touched by the unit.
    pub c: u64,
    /// Exact weight reduction from removing one channel.
    pub delta_s: u64,
    /// Exact FLOP reduction from removing one channel.
    pub delta_c: u64,
    pub touched: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub convention: SpatialConvention,
    pub layers: Vec<LayerCost>,
    pub units: Vec<UnitCost>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostTable {
    pub fn unit(&self, name: &str) -> Option<&UnitCost> {
        self.units.iter().find(|u| u.unit == name)
    }

    /// Unit whose group owns layer `name`.
    pub fn unit_of_layer(&self, graph: &ModelGraph, name: &str) -> Option<&UnitCost> {
        let g = graph.group_of(graph.index_of(name)?);
        self.units.iter().find(|u| u.group == g)
    }

    /// Tabular report: one row per layer plus totals.
    pub fn report(&self, graph: &ModelGraph, reg: Option<&RegularizerTable>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# spatial_convention={:?}", self.convention);
        if let Some(r) = reg {
            let _ = writeln!(out, "# beta={} gamma={}", r.beta, r.gamma);
        }
        let _ = writeln!(
            out,
            "{:<16} {:<15} {:>12} {:>15} {:>12} {:>15} {:>10} {:>13} {:>8}",
            "layer", "kind", "params", "flops", "S", "C", "dS/filter", "dC/filter", "reg"
        );
        for (i, lc) in self.layers.iter().enumerate() {
            let g = graph.group_of(i);
            let u = self.units.iter().find(|u| u.group == g).expect("every group has a unit");
            let r = reg
                .and_then(|r| r.get(&u.unit))
                .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{:<16} {:<15} {:>12} {:>15} {:>12} {:>15} {:>10} {:>13} {:>8}",
                lc.layer,
                graph.layers()[i].kind.to_string(),
                lc.params,
                lc.flops,
                u.s,
                u.c,
                u.delta_s,
                u.delta_c,
                r
            );
        }
        let _ = writeln!(out, "total params {}  total flops {}", self.total_params, self.total_flops);
        out
    }
}

/// Per-layer and per-unit costs of `graph`.
pub fn layer_costs(graph: &ModelGraph, convention: SpatialConvention) -> CostTable {
    let layers: Vec<LayerCost> = graph
        .layers()
        .iter()
        .map(|l| LayerCost {
            layer: l.name.clone(),
            params: layer_params(l),
            weights: layer_weights(l),
            flops: layer_flops(l, convention),
        })
        .collect();

    let mut units = Vec::with_capacity(graph.groups().len());
    let mut removed = vec![0u32; graph.groups().len()];
    for (g, group) in graph.groups().iter().enumerate() {
        let mut touched = group.layers.clone();
        touched.extend(graph.group_consumers(g));
        touched.sort_unstable();
        touched.dedup();

        let s: u64 = touched.iter().map(|&i| layers[i].weights).sum();
        let c: u64 = touched.iter().map(|&i| layers[i].flops).sum();
        removed[g] = 1;
        let (mut s1, mut c1) = (0, 0);
        for &i in &touched {
            let shrunk = shrunk_layer(graph, i, &removed);
            s1 += layer_weights(&shrunk);
            c1 += layer_flops(&shrunk, convention);
        }
        removed[g] = 0;
        units.push(UnitCost {
            unit: group.representative().to_string(),
            group: g,
            width: group.width,
            s,
            c,
            delta_s: s - s1,
            delta_c: c - c1,
            touched,
        });
    }

    CostTable {
        convention,
        total_params: layers.iter().map(|l| l.params).sum(),
        total_flops: layers.iter().map(|l| l.flops).sum(),
        layers,
        units,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularizerTable {
    pub beta: f64,
    pub gamma: f64,
    pub values: Vec<(String, f64)>,
}

impl RegularizerTable {
    pub fn get(&self, unit: &str) -> Option<f64> {
        self.values.iter().find(|(u, _)| u == unit).map(|(_, v)| *v)
    }
}

/// `β(1 − log C / log max C) + γ(1 − log S / log max S)` for each index.
///
/// Returns the index of the first cost below 2 on failure.
pub fn regularizer_values(c: &[f64], s: &[f64], beta: f64, gamma: f64) -> Result<Vec<f64>, (usize, f64)> {
    assert_eq!(c.len(), s.len(), "one C and one S per unit");
    if let Some((i, &v)) = c.iter().chain(s).enumerate().find(|(_, &v)| v.is_nan() || v < 2.0) {
        return Err((i % c.len().max(1), v));
    }
    let log_max = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max).ln();
    let (max_c, max_s) = (log_max(c), log_max(s));
    Ok(c.iter()
        .zip(s)
        .map(|(&ci, &si)| beta * (1.0 - ci.ln() / max_c) + gamma * (1.0 - si.ln() / max_s))
        .collect())
}

/// Regularizer for every unit of `costs`; maxima run over all units.
pub fn regularizer(costs: &CostTable, beta: f64, gamma: f64) -> Result<RegularizerTable, CostError> {
    if !(beta >= 0.0 && gamma >= 0.0 && beta.is_finite() && gamma.is_finite()) {
        return Err(CostError::Weights { beta, gamma });
    }
    let c: Vec<f64> = costs.units.iter().map(|u| u.c as f64).collect();
    let s: Vec<f64> = costs.units.iter().map(|u| u.s as f64).collect();
    let values = regularizer_values(&c, &s, beta, gamma).map_err(|(i, value)| CostError::TooSmall {
        unit: costs.units[i].unit.clone(),
        value,
    })?;
    Ok(RegularizerTable {
        beta,
        gamma,
        values: costs.units.iter().map(|u| u.unit.clone()).zip(values).collect(),
    })
}

/// `ReImp = Imp + Reg`, with every channel of a unit sharing the unit's `Reg`.
pub fn regularized_importance(imp: &ImportanceTable, reg: &RegularizerTable) -> Result<ImportanceTable, CostError> {
    let mut out = imp.clone();
    for u in &mut out.units {
        let r = reg.get(&u.unit).ok_or_else(|| CostError::LayerMismatch(u.unit.clone()))?;
        u.reg = r;
        u.reimp = u.imp.iter().map(|&v| v + r).collect();
    }
    out.regularizer = Some((reg.beta, reg.gamma));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Reduction {
    pub params: u64,
    pub flops: u64,
    pub prr: f64,
    pub frr: f64,
}

/// Exact parameter and FLOP savings of `plan`, from the shrunken layer shapes.
pub fn predict_reduction(
    graph: &ModelGraph,
    plan: &PruningPlan,
    convention: SpatialConvention,
) -> Result<Reduction, PlanError> {
    let removed: Vec<u32> = plan.group_removals(graph)?.iter().map(|s| s.len() as u32).collect();
    let (mut params, mut flops) = (0u64, 0u64);
    let (mut params0, mut flops0) = (0u64, 0u64);
    for (i, l) in graph.layers().iter().enumerate() {
        let shrunk = shrunk_layer(graph, i, &removed);
        params0 += layer_params(l);
        flops0 += layer_flops(l, convention);
        params += layer_params(&shrunk);
        flops += layer_flops(&shrunk, convention);
    }
    let (dp, df) = (params0 - params, flops0 - flops);
    Ok(Reduction {
        params: dp,
        flops: df,
        prr: if params0 == 0 { 0.0 } else { dp as f64 / params0 as f64 },
        frr: if flops0 == 0 { 0.0 } else { df as f64 / flops0 as f64 },
    })
}
