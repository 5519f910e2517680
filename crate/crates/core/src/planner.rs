//! Global filter ranking, plan construction and plan application.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{
    layer_costs, predict_reduction, regularized_importance, regularizer, total_params, CostError, Reduction,
    SpatialConvention,
};
use crate::importance::{score_graph, Detector, ImportanceConfig, ImportanceError, Normalization, SignedMode};
use crate::model_graph::{GraphError, LayerKind, ModelGraph};
use crate::weight_store::{expected_tensors, slice_tensor, WeightContainer, WeightError, WeightTensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("pruning ratio must lie in [0, 1), got {0}")]
    Ratio(f64),
    #[error("plan references unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("stale plan: {0}")]
    Stale(String),
    #[error("index {index} out of range for `{layer}` (width {width})")]
    IndexOutOfRange { layer: String, index: usize, width: u32 },
    #[error("layer `{0}` is not prunable")]
    Unprunable(String),
    #[error("coupled axes disagree: {0}")]
    Coupling(String),
    #[error("plan removes every channel of `{0}`")]
    EmptiesAxis(String),
    #[error("pruned model failed validation: {0}")]
    Internal(String),
    #[error("plan file: {0}")]
    Parse(String),
    #[error("linear merge check: {0}")]
    Merge(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Importance(#[from] ImportanceError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// How a coupled unit counts against the global quota.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupQuota {
    /// One per coupled output axis.
    #[default]
    Width,
    /// One per channel index regardless of coupling.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub ratio: f64,
    pub detector: Detector,
    pub normalization: Normalization,
    pub signed_mode: SignedMode,
    pub k: usize,
    pub beta: f64,
    pub gamma: f64,
    pub spatial_convention: SpatialConvention,
    pub group_quota: GroupQuota,
}

impl Default for PlanConfig {
    fn default() -> Self {
        let imp = ImportanceConfig::default();
        PlanConfig {
            ratio: 0.0,
            detector: imp.detector,
            normalization: imp.normalization,
            signed_mode: imp.signed_mode,
            k: imp.k,
            beta: 0.0,
            gamma: 0.0,
            spatial_convention: SpatialConvention::Output,
            group_quota: GroupQuota::Width,
        }
    }
}

impl PlanConfig {
    pub fn importance(&self) -> ImportanceConfig {
        ImportanceConfig {
            detector: self.detector,
            normalization: self.normalization,
            signed_mode: self.signed_mode,
            k: self.k,
        }
    }
}

/// Filters removed from one output axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisRemoval {
    pub layer: String,
    /// Axis width the plan was built against.
    pub width: u32,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub source_params: u64,
    pub source_flops: u64,
    /// Quota-weighted count of scored units.
    pub total_units: u64,
    pub removed_units: u64,
    pub skipped_units: u64,
    pub achieved_ratio: f64,
    pub config: PlanConfig,
    pub predicted: Reduction,
    pub removals: Vec<AxisRemoval>,
}

impl PruningPlan {
    /// Hand-written plan. Naming any axis of a coupling group applies the set to
    /// the whole group.
    pub fn from_removals(
        graph: &ModelGraph,
        config: PlanConfig,
        removals: &[(&str, &[usize])],
    ) -> Result<Self, PlanError> {
        let mut sets: Vec<Option<BTreeSet<usize>>> = vec![None; graph.groups().len()];
        for &(name, idx) in removals {
            let i = graph.index_of(name).ok_or_else(|| PlanError::UnknownLayer(name.to_string()))?;
            let g = graph.group_of(i);
            let set: BTreeSet<usize> = idx.iter().copied().collect();
            match &sets[g] {
                Some(prev) if *prev != set => {
                    return Err(PlanError::Coupling(format!("conflicting index sets for group of `{name}`")))
                }
                _ => sets[g] = Some(set),
            }
        }
        let sets: Vec<BTreeSet<usize>> = sets.into_iter().map(Option::unwrap_or_default).collect();
        let (mut total, mut removed) = (0, 0);
        for (g, group) in graph.groups().iter().enumerate() {
            let w = quota_weight(graph, g, config.group_quota);
            if group.prunable {
                total += w * group.width as u64;
            }
            removed += w * sets[g].len() as u64;
        }
        assemble(graph, config, &sets, total, removed, 0)
    }

    /// Validated index set for every coupling group (empty when untouched).
    pub fn group_removals(&self, graph: &ModelGraph) -> Result<Vec<BTreeSet<usize>>, PlanError> {
        let current = total_params(graph);
        if self.source_params != current {
            return Err(PlanError::Stale(format!(
                "built for a model with {} parameters, this one has {current}",
                self.source_params
            )));
        }
        let mut sets: Vec<Option<BTreeSet<usize>>> = vec![None; graph.groups().len()];
        let mut listed = vec![BTreeSet::new(); graph.groups().len()];
        for r in &self.removals {
            let i = graph.index_of(&r.layer).ok_or_else(|| PlanError::UnknownLayer(r.layer.clone()))?;
            let layer = &graph.layers()[i];
            if layer.out_channels != r.width {
                return Err(PlanError::Stale(format!(
                    "`{}` has {} filters, plan expects {}",
                    r.layer, layer.out_channels, r.width
                )));
            }
            let g = graph.group_of(i);
            if !graph.groups()[g].prunable {
                return Err(PlanError::Unprunable(r.layer.clone()));
            }
            if let Some(&bad) = r.indices.iter().find(|&&x| x >= r.width as usize) {
                return Err(PlanError::IndexOutOfRange {
                    layer: r.layer.clone(),
                    index: bad,
                    width: r.width,
                });
            }
            let set: BTreeSet<usize> = r.indices.iter().copied().collect();
            if set.len() != r.indices.len() {
                return Err(PlanError::Parse(format!("duplicate indices for `{}`", r.layer)));
            }
            if set.len() >= r.width as usize {
                return Err(PlanError::EmptiesAxis(r.layer.clone()));
            }
            match &sets[g] {
                Some(prev) if *prev != set => {
                    return Err(PlanError::Coupling(format!("`{}` differs from its coupled axes", r.layer)))
                }
                _ => sets[g] = Some(set),
            }
            listed[g].insert(i);
        }
        for (g, set) in sets.iter().enumerate() {
            if set.is_some() {
                let group = &graph.groups()[g];
                if let Some(missing) = group.layers.iter().find(|l| !listed[g].contains(l)) {
                    return Err(PlanError::Coupling(format!(
                        "axis `{}` of a pruned group is missing from the plan",
                        graph.layers()[*missing].name
                    )));
                }
            }
        }
        Ok(sets.into_iter().map(Option::unwrap_or_default).collect())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serialization cannot fail")
    }

    pub fn from_toml(text: &str) -> Result<Self, PlanError> {
        toml::from_str(text).map_err(|e| PlanError::Parse(e.message().to_string()))
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "requested ratio {:.4}, achieved {:.4} ({} of {} units, {} skipped)",
            self.config.ratio, self.achieved_ratio, self.removed_units, self.total_units, self.skipped_units
        );
        let _ = writeln!(
            out,
            "params -{} (Prr {:.2}%), flops -{} (Frr {:.2}%)",
            self.predicted.params,
            100.0 * self.predicted.prr,
            self.predicted.flops,
            100.0 * self.predicted.frr
        );
        for r in &self.removals {
            let _ = writeln!(out, "  {:<16} {:>5} -> {:>5}", r.layer, r.width, r.width as usize - r.indices.len());
        }
        out
    }
}

fn assemble(
    graph: &ModelGraph,
    config: PlanConfig,
    sets: &[BTreeSet<usize>],
    total_units: u64,
    removed_units: u64,
    skipped_units: u64,
) -> Result<PruningPlan, PlanError> {
    let mut removals = Vec::new();
    for (i, l) in graph.layers().iter().enumerate() {
        let set = &sets[graph.group_of(i)];
        if !set.is_empty() {
            removals.push(AxisRemoval {
                layer: l.name.clone(),
                width: l.out_channels,
                indices: set.iter().copied().collect(),
            });
        }
    }
    let mut plan = PruningPlan {
        source_params: total_params(graph),
        source_flops: crate::cost_model::total_flops(graph, config.spatial_convention),
        total_units,
        removed_units,
        skipped_units,
        achieved_ratio: if total_units == 0 {
            0.0
        } else {
            removed_units as f64 / total_units as f64
        },
        config,
        predicted: Reduction::default(),
        removals,
    };
    plan.predicted = predict_reduction(graph, &plan, config.spatial_convention)?;
    Ok(plan)
}

fn quota_weight(graph: &ModelGraph, g: usize, quota: GroupQuota) -> u64 {
    match quota {
        GroupQuota::Unit => 1,
        GroupQuota::Width => graph.groups()[g]
            .layers
            .iter()
            .filter(|&&l| !graph.layers()[l].kind.is_passthrough())
            .count()
            .max(1) as u64,
    }
}

/// Score every prunable unit and remove the lowest-ranked ones.
///
/// Units are ranked by `(ReImp ascending, layer ascending, filter descending)`. The
/// first `⌊ratio · total⌋` quota units are candidates; a candidate that would empty
/// its axis is skipped and not replaced.
pub fn build_plan(graph: &ModelGraph, weights: &WeightContainer, config: &PlanConfig) -> Result<PruningPlan, PlanError> {
    if !(0.0..1.0).contains(&config.ratio) {
        return Err(PlanError::Ratio(config.ratio));
    }
    if config.k == 0 {
        return Err(PlanError::Parse("k must be at least 1".into()));
    }
    let table = score_graph(graph, weights, &config.importance())?;
    let costs = layer_costs(graph, config.spatial_convention);
    let reg = regularizer(&costs, config.beta, config.gamma)?;
    let table = regularized_importance(&table, &reg)?;

    struct Candidate {
        score: f64,
        layer: usize,
        filter: usize,
        group: usize,
        weight: u64,
    }
    let mut candidates = Vec::new();
    let mut total = 0u64;
    for u in &table.units {
        let weight = quota_weight(graph, u.group, config.group_quota);
        total += weight * u.width() as u64;
        candidates.extend(u.reimp.iter().enumerate().map(|(filter, &score)| Candidate {
            score,
            layer: u.layer_index,
            filter,
            group: u.group,
            weight,
        }));
    }
    candidates.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.layer.cmp(&b.layer))
            .then(b.filter.cmp(&a.filter))
    });

    let target = (config.ratio * total as f64 + 1e-9).floor() as u64;
    let mut survivors: Vec<u32> = graph.groups().iter().map(|g| g.width).collect();
    let mut sets = vec![BTreeSet::new(); graph.groups().len()];
    let (mut consumed, mut removed, mut skipped) = (0u64, 0u64, 0u64);
    for c in &candidates {
        if consumed + c.weight > target {
            break;
        }
        consumed += c.weight;
        if survivors[c.group] <= 1 {
            skipped += c.weight;
            continue;
        }
        survivors[c.group] -= 1;
        sets[c.group].insert(c.filter);
        removed += c.weight;
    }
    assemble(graph, *config, &sets, total, removed, skipped)
}

fn expand_rows(set: &BTreeSet<usize>, rows: usize) -> BTreeSet<usize> {
    set.iter().flat_map(|&c| c * rows..(c + 1) * rows).collect()
}

/// Input rows of layer `i` removed under `sets` (empty for passthrough layers).
fn input_set(graph: &ModelGraph, sets: &[BTreeSet<usize>], i: usize) -> BTreeSet<usize> {
    match graph.input_group(i) {
        Some(g) if !graph.layers()[i].kind.is_passthrough() => {
            expand_rows(&sets[g], graph.rows_per_channel(i) as usize)
        }
        _ => BTreeSet::new(),
    }
}

fn shrink(graph: &ModelGraph, sets: &[BTreeSet<usize>]) -> Result<ModelGraph, PlanError> {
    let layers = graph
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let mut l = layer.clone();
            l.out_channels -= sets[graph.group_of(i)].len() as u32;
            l.in_channels = if l.kind.is_passthrough() {
                l.out_channels
            } else {
                l.in_channels - input_set(graph, sets, i).len() as u32
            };
            l
        })
        .collect();
    ModelGraph::new(graph.input_spatial, graph.input_channels, layers).map_err(|e| PlanError::Internal(e.to_string()))
}

/// The architecture `plan` would produce, without touching any weights.
pub fn prune_graph(graph: &ModelGraph, plan: &PruningPlan) -> Result<ModelGraph, PlanError> {
    shrink(graph, &plan.group_removals(graph)?)
}

/// Slice every tensor touched by `plan` and return the shrunken model.
pub fn apply_plan(
    graph: &ModelGraph,
    weights: &WeightContainer,
    plan: &PruningPlan,
) -> Result<(ModelGraph, WeightContainer), PlanError> {
    weights.check_against(graph)?;
    let sets = plan.group_removals(graph)?;

    let mut pruned = WeightContainer::new();
    for (i, layer) in graph.layers().iter().enumerate() {
        let out_set = &sets[graph.group_of(i)];
        let in_set = input_set(graph, &sets, i);
        for (name, _) in expected_tensors(layer) {
            let t = weights.get(&name).expect("checked against graph");
            let sliced = if name == layer.name {
                match layer.kind {
                    LayerKind::Conv | LayerKind::PointwiseConv => {
                        slice_tensor(&slice_tensor(t, 3, out_set)?, 2, &in_set)?
                    }
                    LayerKind::Fc => slice_tensor(&slice_tensor(t, 1, out_set)?, 0, &in_set)?,
                    LayerKind::DepthwiseConv => slice_tensor(t, 2, out_set)?,
                    LayerKind::BatchNorm => unreachable!("batch norm has no bare weight tensor"),
                }
            } else {
                slice_tensor(t, 0, out_set)?
            };
            pruned.insert(sliced)?;
        }
    }

    let new_graph = shrink(graph, &sets)?;
    pruned.check_against(&new_graph).map_err(|e| PlanError::Internal(e.to_string()))?;
    let expected = plan.source_params - predict_reduction(graph, plan, plan.config.spatial_convention)?.params;
    if pruned.param_count() != expected {
        return Err(PlanError::Internal(format!(
            "pruned model holds {} parameters, bookkeeping predicts {expected}",
            pruned.param_count()
        )));
    }
    let out = graph.output_layer();
    if new_graph.layers()[out].out_channels != graph.layers()[out].out_channels {
        return Err(PlanError::Internal("output width changed".into()));
    }
    Ok((new_graph, pruned))
}

/// Output deviation between a linear two-layer network and its merged form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeDeviation {
    /// `max |Y − Y_merged|` over the batch.
    pub max_abs: f64,
    /// `max |Y|` over the batch.
    pub max_output: f64,
}

impl MergeDeviation {
    pub fn relative(&self) -> f64 {
        if self.max_output == 0.0 {
            self.max_abs
        } else {
            self.max_abs / self.max_output
        }
    }
}

fn matrix(t: &WeightTensor, what: &str) -> Result<(usize, usize), PlanError> {
    match t.dims[..] {
        [r, c] => Ok((r, c)),
        _ => Err(PlanError::Merge(format!("{what} must be a matrix, got dims {:?}", t.dims))),
    }
}

fn matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for k in 0..inner {
            let av = a[r * inner + k];
            for c in 0..cols {
                out[r * cols + c] += av * b[k * cols + c];
            }
        }
    }
    out
}

/// Compare `X · W_prev · W` against the network where feature map `m2` is folded
/// into `m1`: column `m1` of `W_prev` becomes `col_m1 + α·col_m2` (rounded to f32),
/// column `m2` of `W_prev` and row `m2` of `W` are dropped.
///
/// `w_prev` is `[P, M]`, `w` is `[M, N]`, `x` is `[B, P]`.
pub fn merge_equivalence_check(
    w_prev: &WeightTensor,
    w: &WeightTensor,
    m1: usize,
    m2: usize,
    alpha: f32,
    x: &WeightTensor,
) -> Result<MergeDeviation, PlanError> {
    if m1 == m2 {
        return Err(PlanError::Merge(format!("m1 and m2 are both {m1}")));
    }
    let (p, m) = matrix(w_prev, "previous layer")?;
    let (m_w, n) = matrix(w, "layer")?;
    let (b, p_x) = matrix(x, "input batch")?;
    if m_w != m || p_x != p {
        return Err(PlanError::Merge(format!(
            "shapes do not chain: x {:?}, w_prev {:?}, w {:?}",
            x.dims, w_prev.dims, w.dims
        )));
    }
    if m1 >= m || m2 >= m {
        return Err(PlanError::Merge(format!("indices ({m1}, {m2}) out of range for {m} feature maps")));
    }

    let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let xs = widen(&x.data);
    let y = matmul(&matmul(&xs, &widen(&w_prev.data), b, p, m), &widen(&w.data), b, m, n);

    let mut merged_prev = w_prev.data.clone();
    for r in 0..p {
        merged_prev[r * m + m1] += alpha * w_prev.data[r * m + m2];
    }
    let merged_prev = WeightTensor::new("prev", vec![p, m], merged_prev)?;
    let drop = BTreeSet::from([m2]);
    let merged_prev = slice_tensor(&merged_prev, 1, &drop)?;
    let merged_w = slice_tensor(w, 0, &drop)?;
    let y_merged = matmul(
        &matmul(&xs, &widen(&merged_prev.data), b, p, m - 1),
        &widen(&merged_w.data),
        b,
        m - 1,
        n,
    );

    let max_abs = y.iter().zip(&y_merged).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let max_output = y.iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(MergeDeviation { max_abs, max_output })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_rejects_collision() {
        let w = WeightTensor::new("w", vec![2, 2], vec![1.0; 4]).unwrap();
        assert!(matches!(merge_equivalence_check(&w, &w, 1, 1, 1.0, &w), Err(PlanError::Merge(_))));
    }

    #[test]
    fn merge_exact_dependence() {
        // rows of w: row 1 = -1 × row 0
        let w_prev = WeightTensor::new("p", vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();
        let w = WeightTensor::new("w", vec![3, 2], vec![1.0, 2.0, -1.0, -2.0, 0.5, 0.5]).unwrap();
        let x = WeightTensor::new("x", vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let d = merge_equivalence_check(&w_prev, &w, 0, 1, -1.0, &x).unwrap();
        assert!(d.max_abs < 1e-6, "{d:?}");
        let d = merge_equivalence_check(&w_prev, &w, 0, 2, 1.0, &x).unwrap();
        assert!(d.max_abs > 0.1);
    }

    #[test]
    fn ratio_bounds() {
        let graph = crate::fixtures::load("vgg16_cifar").unwrap();
        let weights = WeightContainer::new();
        for r in [1.0, 1.5, -0.1] {
            let cfg = PlanConfig {
                ratio: r,
                ..PlanConfig::default()
            };
            assert_eq!(build_plan(&graph, &weights, &cfg), Err(PlanError::Ratio(r)));
        }
    }
}
