//! Architecture manifests: layer shapes, spatial inference and pruning-coupling groups.
//!
//! A manifest lists every layer that owns parameters in data-flow order. Pooling and
//! activations are not layers; a layer may carry a `pool` factor that shrinks its
//! output map before it reaches the successors. Residual additions are expressed with
//! `skip_to`: the source layer's output is added onto the target's output, and the
//! sum is what the target's successors consume.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("manifest schema violation: {0}")]
    Schema(String),
    #[error("manifest contains no layers")]
    Empty,
    #[error("duplicate layer name `{0}`")]
    DuplicateLayer(String),
    #[error("layer `{from}` references unknown layer `{to}`")]
    UnknownLayer { from: String, to: String },
    #[error("invalid layer `{layer}`: {detail}")]
    InvalidLayer { layer: String, detail: String },
    #[error("shape inconsistency on edge `{from}` -> `{to}`: {detail}")]
    ShapeMismatch {
        from: String,
        to: String,
        detail: String,
    },
    #[error("layer `{0}` has more than one producer")]
    MultipleProducers(String),
    #[error("cyclic non-skip edge through layer `{0}`")]
    Cycle(String),
    #[error("layer order is not topological: `{from}` is listed after its successor `{to}`")]
    Order { from: String, to: String },
    #[error("non-positive inferred dimension at layer `{layer}`: {detail}")]
    Spatial { layer: String, detail: String },
    #[error(
        "residual skip `{from}` -> `{to}` joins unequal widths ({from_width} vs {to_width}) without a declared projection"
    )]
    SkipWidth {
        from: String,
        to: String,
        from_width: u32,
        to_width: u32,
    },
    #[error("expected exactly one output layer, found {0:?}")]
    OutputLayer(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Fc,
    DepthwiseConv,
    PointwiseConv,
    BatchNorm,
}

impl LayerKind {
    /// Layers whose single channel axis passes straight through (`in == out`).
    pub fn is_passthrough(self) -> bool {
        matches!(self, LayerKind::DepthwiseConv | LayerKind::BatchNorm)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
            LayerKind::DepthwiseConv => "depthwise_conv",
            LayerKind::PointwiseConv => "pointwise_conv",
            LayerKind::BatchNorm => "batch_norm",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

/// Spatial pooling applied to a layer's output before its successors see it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PoolRepr", into = "PoolRepr")]
pub enum Pool {
    Factor(u32),
    Global,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PoolRepr {
    Factor(u32),
    Named(String),
}

impl TryFrom<PoolRepr> for Pool {
    type Error = String;

    fn try_from(r: PoolRepr) -> Result<Self, String> {
        match r {
            PoolRepr::Factor(0) => Err("pool factor must be positive".into()),
            PoolRepr::Factor(f) => Ok(Pool::Factor(f)),
            PoolRepr::Named(s) if s == "global" => Ok(Pool::Global),
            PoolRepr::Named(s) => Err(format!("unknown pool `{s}` (expected integer or \"global\")")),
        }
    }
}

impl From<Pool> for PoolRepr {
    fn from(p: Pool) -> Self {
        match p {
            Pool::Factor(f) => PoolRepr::Factor(f),
            Pool::Global => PoolRepr::Named("global".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: u32,
    pub in_channels: u32,
    pub out_channels: u32,
    pub in_spatial: u32,
    pub out_spatial: u32,
    pub stride: u32,
    pub padding: Padding,
    pub prunable: bool,
    pub bias: bool,
    pub pool: Option<Pool>,
    pub successors: Vec<String>,
    pub skip_to: Option<String>,
    pub projection: bool,
}

impl LayerSpec {
    /// Spatial size of the map handed to successors (after pooling).
    pub fn feed_spatial(&self) -> u32 {
        match self.pool {
            None => self.out_spatial,
            Some(Pool::Factor(f)) => self.out_spatial / f,
            Some(Pool::Global) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Input,
    Output,
}

/// One channel axis of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AxisRef {
    pub layer: String,
    pub side: Side,
}

/// Channel axes that must lose identical index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CouplingGroup {
    pub members: Vec<AxisRef>,
    pub width: u32,
    pub prunable: bool,
    /// Layer indices owning the member axes, ascending.
    pub layers: Vec<usize>,
}

impl CouplingGroup {
    /// First member layer; groups are reported under this name.
    pub fn representative(&self) -> &str {
        &self.members[0].layer
    }

    pub fn output_axes(&self) -> impl Iterator<Item = &AxisRef> {
        self.members.iter().filter(|a| a.side == Side::Output)
    }
}

// ---------------------------------------------------------------------------
// Manifest schema
// ---------------------------------------------------------------------------

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn is_true(b: &bool) -> bool {
    *b
}

fn is_one(v: &u32) -> bool {
    *v == 1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    input_spatial: u32,
    input_channels: u32,
    layers: Vec<ManifestLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLayer {
    name: String,
    kind: LayerKind,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    kernel: u32,
    in_channels: u32,
    out_channels: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_spatial: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_spatial: Option<u32>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    stride: u32,
    #[serde(default)]
    padding: Padding,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    prunable: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    bias: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pool: Option<Pool>,
    #[serde(default)]
    successors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skip_to: Option<String>,
    #[serde(default, skip_serializing_if = "is_false")]
    projection: bool,
}

impl From<&LayerSpec> for ManifestLayer {
    fn from(l: &LayerSpec) -> Self {
        ManifestLayer {
            name: l.name.clone(),
            kind: l.kind,
            kernel: l.kernel,
            in_channels: l.in_channels,
            out_channels: l.out_channels,
            in_spatial: Some(l.in_spatial),
            out_spatial: Some(l.out_spatial),
            stride: l.stride,
            padding: l.padding,
            prunable: l.prunable,
            bias: l.bias,
            pool: l.pool,
            successors: l.successors.clone(),
            skip_to: l.skip_to.clone(),
            projection: l.projection,
        }
    }
}

/// Declared spatial sizes, checked against inference.
struct Declared {
    in_spatial: Option<u32>,
    out_spatial: Option<u32>,
}

/// Parse and validate a TOML manifest.
pub fn parse_manifest(text: &str) -> Result<ModelGraph, GraphError> {
    let doc: ManifestDoc = toml::from_str(text).map_err(|e| GraphError::Schema(e.message().to_string()))?;
    let mut declared = Vec::with_capacity(doc.layers.len());
    let layers = doc
        .layers
        .into_iter()
        .map(|m| {
            declared.push(Declared {
                in_spatial: m.in_spatial,
                out_spatial: m.out_spatial,
            });
            LayerSpec {
                name: m.name,
                kind: m.kind,
                kernel: m.kernel,
                in_channels: m.in_channels,
                out_channels: m.out_channels,
                in_spatial: 0,
                out_spatial: 0,
                stride: m.stride,
                padding: m.padding,
                prunable: m.prunable,
                bias: m.bias,
                pool: m.pool,
                successors: m.successors,
                skip_to: m.skip_to,
                projection: m.projection,
            }
        })
        .collect();
    ModelGraph::build(doc.input_spatial, doc.input_channels, layers, Some(&declared))
}

/// Re-run spatial inference from `input_spatial`, strides and pooling.
pub fn infer_spatial_dims(graph: &ModelGraph) -> Result<ModelGraph, GraphError> {
    ModelGraph::new(graph.input_spatial, graph.input_channels, graph.layers.clone())
}

/// Compute the coupling partition of all channel axes.
///
/// Identity skips tie the source's output axis to the target's; the closure is
/// transitive, so a chain of identity blocks collapses into one group. Depthwise and
/// batch-norm layers join the group of the axis that feeds them.
pub fn coupling_groups(graph: &ModelGraph) -> Result<Vec<CouplingGroup>, GraphError> {
    compute_groups(&graph.layers, &graph.index, &graph.producer, graph.output)
}

// ---------------------------------------------------------------------------
// ModelGraph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub input_spatial: u32,
    pub input_channels: u32,
    layers: Vec<LayerSpec>,
    groups: Vec<CouplingGroup>,
    index: HashMap<String, usize>,
    producer: Vec<Option<usize>>,
    group_of: Vec<usize>,
    output: usize,
}

impl PartialEq for ModelGraph {
    fn eq(&self, other: &Self) -> bool {
        self.input_spatial == other.input_spatial
            && self.input_channels == other.input_channels
            && self.layers == other.layers
    }
}

impl ModelGraph {
    /// Validate `layers` and build the graph. Spatial sizes on the specs are
    /// overwritten by inference.
    pub fn new(input_spatial: u32, input_channels: u32, layers: Vec<LayerSpec>) -> Result<Self, GraphError> {
        Self::build(input_spatial, input_channels, layers, None)
    }

    fn build(
        input_spatial: u32,
        input_channels: u32,
        mut layers: Vec<LayerSpec>,
        declared: Option<&[Declared]>,
    ) -> Result<Self, GraphError> {
        if layers.is_empty() {
            return Err(GraphError::Empty);
        }
        if input_spatial == 0 || input_channels == 0 {
            return Err(GraphError::Schema("input_spatial and input_channels must be positive".into()));
        }

        let mut index = HashMap::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            if index.insert(l.name.clone(), i).is_some() {
                return Err(GraphError::DuplicateLayer(l.name.clone()));
            }
        }
        for l in &layers {
            check_layer_fields(l)?;
        }

        let mut producer = vec![None; layers.len()];
        for (a, l) in layers.iter().enumerate() {
            for s in &l.successors {
                let b = *index.get(s).ok_or_else(|| GraphError::UnknownLayer {
                    from: l.name.clone(),
                    to: s.clone(),
                })?;
                if producer[b].replace(a).is_some() {
                    return Err(GraphError::MultipleProducers(s.clone()));
                }
            }
            if let Some(t) = &l.skip_to {
                if !index.contains_key(t) {
                    return Err(GraphError::UnknownLayer {
                        from: l.name.clone(),
                        to: t.clone(),
                    });
                }
            }
        }
        check_acyclic(&layers, &index)?;

        infer_spatial(&mut layers, &producer, input_spatial)?;
        if let Some(declared) = declared {
            for (l, d) in layers.iter().zip(declared) {
                for (what, got, want) in [("in_spatial", d.in_spatial, l.in_spatial), ("out_spatial", d.out_spatial, l.out_spatial)] {
                    if let Some(got) = got {
                        if got != want {
                            return Err(GraphError::Spatial {
                                layer: l.name.clone(),
                                detail: format!("declared {what} {got} but inferred {want}"),
                            });
                        }
                    }
                }
            }
        }

        check_edges(&layers, &index, &producer, input_channels)?;

        let outputs: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.successors.is_empty() && l.skip_to.is_none())
            .map(|(i, _)| i)
            .collect();
        if outputs.len() != 1 {
            return Err(GraphError::OutputLayer(
                outputs.iter().map(|&i| layers[i].name.clone()).collect(),
            ));
        }
        let output = outputs[0];

        let groups = compute_groups(&layers, &index, &producer, output)?;
        let mut group_of = vec![usize::MAX; layers.len()];
        for (g, group) in groups.iter().enumerate() {
            for &l in &group.layers {
                group_of[l] = g;
            }
        }

        Ok(ModelGraph {
            input_spatial,
            input_channels,
            layers,
            groups,
            index,
            producer,
            group_of,
            output,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.index.get(name).map(|&i| &self.layers[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn groups(&self) -> &[CouplingGroup] {
        &self.groups
    }

    /// Group holding the output axis of layer `idx`.
    pub fn group_of(&self, idx: usize) -> usize {
        self.group_of[idx]
    }

    /// Group of the axis feeding layer `idx`; `None` for layers reading the image.
    pub fn input_group(&self, idx: usize) -> Option<usize> {
        self.producer[idx].map(|p| self.group_of[p])
    }

    pub fn producer(&self, idx: usize) -> Option<usize> {
        self.producer[idx]
    }

    pub fn successors(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        self.layers[idx].successors.iter().map(move |s| self.index[s])
    }

    pub fn output_layer(&self) -> usize {
        self.output
    }

    /// Weight rows contributed to layer `idx` per input channel: `s²` for a fully
    /// connected layer flattening an `s × s` map, otherwise 1.
    pub fn rows_per_channel(&self, idx: usize) -> u32 {
        match (self.layers[idx].kind, self.producer[idx]) {
            (LayerKind::Fc, Some(p)) if self.layers[p].kind != LayerKind::Fc => {
                let s = self.layers[p].feed_spatial();
                s * s
            }
            _ => 1,
        }
    }

    /// Non-passthrough layers that read an axis of group `g`, ascending.
    pub fn group_consumers(&self, g: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.groups[g]
            .layers
            .iter()
            .flat_map(|&m| self.successors(m))
            .filter(|&c| !self.layers[c].kind.is_passthrough())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Serialize back to manifest text (with inferred spatial sizes filled in).
    pub fn to_manifest_string(&self) -> String {
        let doc = ManifestDoc {
            input_spatial: self.input_spatial,
            input_channels: self.input_channels,
            layers: self.layers.iter().map(ManifestLayer::from).collect(),
        };
        toml::to_string(&doc).expect("manifest serialization cannot fail")
    }
}

fn invalid(l: &LayerSpec, detail: impl Into<String>) -> GraphError {
    GraphError::InvalidLayer {
        layer: l.name.clone(),
        detail: detail.into(),
    }
}

fn check_layer_fields(l: &LayerSpec) -> Result<(), GraphError> {
    if l.kernel == 0 || l.in_channels == 0 || l.out_channels == 0 || l.stride == 0 {
        return Err(invalid(l, "kernel, channels and stride must be positive"));
    }
    if l.successors.contains(&l.name) || l.skip_to.as_deref() == Some(l.name.as_str()) {
        return Err(invalid(l, "layer references itself"));
    }
    match l.kind {
        LayerKind::Fc => {
            if l.kernel != 1 || l.stride != 1 {
                return Err(invalid(l, "fc layers take kernel 1 and stride 1"));
            }
            if l.pool.is_some() {
                return Err(invalid(l, "fc layers cannot pool"));
            }
        }
        LayerKind::PointwiseConv if l.kernel != 1 => return Err(invalid(l, "pointwise layers take kernel 1")),
        LayerKind::DepthwiseConv if l.in_channels != l.out_channels => {
            return Err(invalid(l, "depthwise layers need in_channels == out_channels"))
        }
        LayerKind::BatchNorm => {
            if l.in_channels != l.out_channels || l.kernel != 1 || l.stride != 1 {
                return Err(invalid(l, "batch_norm needs in == out channels, kernel 1, stride 1"));
            }
            if l.bias {
                return Err(invalid(l, "batch_norm carries beta, not a bias"));
            }
        }
        _ => {}
    }
    if l.projection {
        if l.skip_to.is_none() {
            return Err(invalid(l, "projection layers must declare skip_to"));
        }
        if !matches!(l.kind, LayerKind::Conv | LayerKind::PointwiseConv) {
            return Err(invalid(l, "projection layers must be conv or pointwise_conv"));
        }
    }
    Ok(())
}

fn check_acyclic(layers: &[LayerSpec], index: &HashMap<String, usize>) -> Result<(), GraphError> {
    let n = layers.len();
    let mut indegree = vec![0usize; n];
    for l in layers {
        for s in &l.successors {
            indegree[index[s]] += 1;
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = ready.pop() {
        seen += 1;
        for s in &layers[i].successors {
            let j = index[s];
            indegree[j] -= 1;
            if indegree[j] == 0 {
                ready.push(j);
            }
        }
    }
    if seen < n {
        let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap();
        return Err(GraphError::Cycle(layers[stuck].name.clone()));
    }
    for (a, l) in layers.iter().enumerate() {
        let later = l.successors.iter().chain(l.skip_to.iter());
        for s in later {
            if index[s] <= a {
                return Err(GraphError::Order {
                    from: l.name.clone(),
                    to: s.clone(),
                });
            }
        }
    }
    Ok(())
}

fn infer_spatial(layers: &mut [LayerSpec], producer: &[Option<usize>], input_spatial: u32) -> Result<(), GraphError> {
    for i in 0..layers.len() {
        let input = match producer[i] {
            Some(p) => layers[p].feed_spatial(),
            None => input_spatial,
        };
        let l = &mut layers[i];
        let (ins, outs) = match l.kind {
            LayerKind::Fc => (1, 1),
            LayerKind::BatchNorm => (input, input),
            _ => {
                let out = match l.padding {
                    Padding::Same => input.div_ceil(l.stride),
                    Padding::Valid => {
                        if input < l.kernel {
                            0
                        } else {
                            (input - l.kernel) / l.stride + 1
                        }
                    }
                };
                (input, out)
            }
        };
        if ins == 0 || outs == 0 {
            return Err(GraphError::Spatial {
                layer: l.name.clone(),
                detail: format!("input map {input} with kernel {} stride {}", l.kernel, l.stride),
            });
        }
        l.in_spatial = ins;
        l.out_spatial = outs;
        if l.feed_spatial() == 0 {
            return Err(GraphError::Spatial {
                layer: l.name.clone(),
                detail: format!("pooling {:?} of a {outs}x{outs} map", l.pool),
            });
        }
    }
    Ok(())
}

fn check_edges(
    layers: &[LayerSpec],
    index: &HashMap<String, usize>,
    producer: &[Option<usize>],
    input_channels: u32,
) -> Result<(), GraphError> {
    for (b, l) in layers.iter().enumerate() {
        let Some(a) = producer[b] else {
            if l.in_channels != input_channels {
                return Err(GraphError::ShapeMismatch {
                    from: "<input>".into(),
                    to: l.name.clone(),
                    detail: format!("input has {input_channels} channels, layer expects {}", l.in_channels),
                });
            }
            continue;
        };
        let p = &layers[a];
        let mismatch = |detail: String| GraphError::ShapeMismatch {
            from: p.name.clone(),
            to: l.name.clone(),
            detail,
        };
        match (p.kind, l.kind) {
            (LayerKind::Fc, LayerKind::Fc) | (_, LayerKind::Fc) => {
                let s = if p.kind == LayerKind::Fc { 1 } else { p.feed_spatial() };
                let want = p.out_channels * s * s;
                if l.in_channels != want {
                    return Err(mismatch(format!(
                        "fc expects {} inputs but producer yields {} x {s}x{s} = {want}",
                        l.in_channels, p.out_channels
                    )));
                }
            }
            (LayerKind::Fc, _) => return Err(mismatch("fc output cannot feed a convolution".into())),
            _ => {
                if l.in_channels != p.out_channels {
                    return Err(mismatch(format!(
                        "producer has {} output channels, consumer expects {}",
                        p.out_channels, l.in_channels
                    )));
                }
            }
        }
    }
    for l in layers {
        if let Some(t) = &l.skip_to {
            let target = &layers[index[t]];
            if l.out_channels != target.out_channels {
                return Err(GraphError::SkipWidth {
                    from: l.name.clone(),
                    to: t.clone(),
                    from_width: l.out_channels,
                    to_width: target.out_channels,
                });
            }
            if l.feed_spatial() != target.out_spatial {
                return Err(GraphError::ShapeMismatch {
                    from: l.name.clone(),
                    to: t.clone(),
                    detail: format!(
                        "skip adds a {0}x{0} map onto a {1}x{1} map",
                        l.feed_spatial(),
                        target.out_spatial
                    ),
                });
            }
        }
    }
    Ok(())
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // keep the earliest layer as root so groups order by first member
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

fn compute_groups(
    layers: &[LayerSpec],
    index: &HashMap<String, usize>,
    producer: &[Option<usize>],
    output: usize,
) -> Result<Vec<CouplingGroup>, GraphError> {
    let n = layers.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for (a, l) in layers.iter().enumerate() {
        if let Some(t) = &l.skip_to {
            let b = index[t];
            if l.out_channels != layers[b].out_channels {
                return Err(GraphError::SkipWidth {
                    from: l.name.clone(),
                    to: t.clone(),
                    from_width: l.out_channels,
                    to_width: layers[b].out_channels,
                });
            }
            union(&mut parent, a, b);
        }
        if l.kind.is_passthrough() {
            if let Some(p) = producer[a] {
                union(&mut parent, a, p);
            }
        }
    }

    let mut by_root: Vec<Option<usize>> = vec![None; n];
    let mut groups: Vec<CouplingGroup> = Vec::new();
    for (i, l) in layers.iter().enumerate() {
        let r = find(&mut parent, i);
        let g = *by_root[r].get_or_insert_with(|| {
            groups.push(CouplingGroup {
                members: Vec::new(),
                width: l.out_channels,
                prunable: true,
                layers: Vec::new(),
            });
            groups.len() - 1
        });
        let group = &mut groups[g];
        if l.out_channels != group.width {
            return Err(invalid(l, format!("coupled axes disagree on width ({} vs {})", l.out_channels, group.width)));
        }
        if l.kind.is_passthrough() {
            group.members.push(AxisRef {
                layer: l.name.clone(),
                side: Side::Input,
            });
            if producer[i].is_none() {
                // passes the image channels through
                group.prunable = false;
            }
        }
        group.members.push(AxisRef {
            layer: l.name.clone(),
            side: Side::Output,
        });
        group.layers.push(i);
        if !l.prunable || i == output {
            group.prunable = false;
        }
    }
    for g in &mut groups {
        if g.width < 2 {
            g.prunable = false;
        }
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MLP: &str = r#"
input_spatial = 1
input_channels = 4

[[layers]]
name = "fc1"
kind = "fc"
in_channels = 4
out_channels = 3
successors = ["fc2"]

[[layers]]
name = "fc2"
kind = "fc"
in_channels = 3
out_channels = 2
"#;

    fn conv(name: &str, cin: u32, cout: u32, succ: &[&str]) -> String {
        format!(
            "[[layers]]\nname = \"{name}\"\nkind = \"conv\"\nkernel = 3\nin_channels = {cin}\nout_channels = {cout}\nsuccessors = [{}]\n",
            succ.iter().map(|s| format!("\"{s}\"")).collect::<Vec<_>>().join(", ")
        )
    }

    #[test]
    fn minimal_mlp() {
        let g = parse_manifest(MLP).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.rows_per_channel(1), 1);
        assert_eq!(g.output_layer(), 1);
        let fc1 = g.layer("fc1").unwrap();
        assert_eq!((fc1.in_spatial, fc1.out_spatial), (1, 1));
        assert_eq!(g.groups().len(), 2);
        assert!(g.groups()[0].prunable);
        assert!(!g.groups()[1].prunable);
    }

    #[test]
    fn shape_mismatch_names_edge() {
        let text = format!(
            "input_spatial = 8\ninput_channels = 3\n{}{}",
            conv("a", 3, 8, &["b"]),
            conv("b", 9, 4, &[])
        );
        match parse_manifest(&text) {
            Err(GraphError::ShapeMismatch { from, to, .. }) => assert_eq!((from.as_str(), to.as_str()), ("a", "b")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_unknown_names() {
        let text = format!("input_spatial = 8\ninput_channels = 3\n{}{}", conv("a", 3, 8, &["a2"]), conv("a", 8, 4, &[]));
        assert_eq!(parse_manifest(&text).unwrap_err(), GraphError::DuplicateLayer("a".into()));
        let text = format!("input_spatial = 8\ninput_channels = 3\n{}", conv("a", 3, 8, &["zz"]));
        assert!(matches!(parse_manifest(&text), Err(GraphError::UnknownLayer { .. })));
    }

    #[test]
    fn cycle_is_rejected() {
        let text = format!(
            "input_spatial = 8\ninput_channels = 3\n{}{}{}",
            conv("a", 3, 8, &["b"]),
            conv("b", 8, 8, &["c"]),
            conv("c", 8, 8, &["b"])
        );
        assert!(matches!(parse_manifest(&text), Err(GraphError::Cycle(_)) | Err(GraphError::MultipleProducers(_))));
        let text = format!(
            "input_spatial = 8\ninput_channels = 3\n{}{}{}",
            conv("a", 3, 8, &["b"]),
            conv("b", 8, 8, &["c"]),
            conv("c", 8, 8, &["a"])
        );
        assert!(matches!(parse_manifest(&text), Err(GraphError::Cycle(_))));
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(parse_manifest("input_spatial = 8\n"), Err(GraphError::Schema(_))));
        assert!(matches!(
            parse_manifest("input_spatial = 8\ninput_channels = 3\nlayers = []\n"),
            Err(GraphError::Empty)
        ));
        let bad_kind = MLP.replace("kind = \"fc\"\nin_channels = 4", "kind = \"lstm\"\nin_channels = 4");
        assert!(matches!(parse_manifest(&bad_kind), Err(GraphError::Schema(_))));
        let wrong_type = MLP.replace("out_channels = 3", "out_channels = \"three\"");
        assert!(matches!(parse_manifest(&wrong_type), Err(GraphError::Schema(_))));
    }

    #[test]
    fn single_conv_same_padding() {
        let text = format!("input_spatial = 32\ninput_channels = 3\n{}", conv("c", 3, 8, &[]));
        let g = parse_manifest(&text).unwrap();
        assert_eq!(g.layers()[0].out_spatial, 32);
        assert_eq!(infer_spatial_dims(&g).unwrap(), g);
    }

    #[test]
    fn declared_spatial_must_match() {
        let text = format!("input_spatial = 32\ninput_channels = 3\n{}out_spatial = 16\n", conv("c", 3, 8, &[]));
        assert!(matches!(parse_manifest(&text), Err(GraphError::Spatial { .. })));
    }

    #[test]
    fn strided_and_valid_arithmetic() {
        let text = "input_spatial = 15\ninput_channels = 1\n\
            [[layers]]\nname = \"a\"\nkind = \"conv\"\nkernel = 3\nstride = 2\npadding = \"valid\"\nin_channels = 1\nout_channels = 2\nsuccessors = [\"b\"]\n\
            [[layers]]\nname = \"b\"\nkind = \"conv\"\nkernel = 3\nstride = 2\nin_channels = 2\nout_channels = 2\npool = 2\nsuccessors = [\"f\"]\n\
            [[layers]]\nname = \"f\"\nkind = \"fc\"\nin_channels = 8\nout_channels = 3\n";
        let g = parse_manifest(text).unwrap();
        // valid: (15-3)/2+1 = 7; same: ceil(7/2) = 4; pool 2 -> 2; fc sees 2*2*2 = 8
        assert_eq!(g.layers()[0].out_spatial, 7);
        assert_eq!(g.layers()[1].out_spatial, 4);
        assert_eq!(g.layers()[1].feed_spatial(), 2);
        assert_eq!(g.rows_per_channel(2), 4);
    }

    #[test]
    fn identity_skip_couples_outputs() {
        let text = format!(
            "input_spatial = 8\ninput_channels = 3\n{}skip_to = \"b2\"\n{}{}{}",
            conv("c0", 3, 8, &["b1"]),
            conv("b1", 8, 4, &["b2"]),
            conv("b2", 4, 8, &["head"]),
            conv("head", 8, 2, &[])
        );
        let g = parse_manifest(&text).unwrap();
        let g0 = &g.groups()[g.group_of(0)];
        let names: Vec<&str> = g0.output_axes().map(|a| a.layer.as_str()).collect();
        assert_eq!(names, ["c0", "b2"]);
        assert_eq!(g.group_of(0), g.group_of(2));
        assert_ne!(g.group_of(1), g.group_of(0));
        assert_eq!(g.group_consumers(g.group_of(0)), vec![1, 3]);
    }

    #[test]
    fn unequal_identity_skip_is_rejected() {
        let text = format!(
            "input_spatial = 8\ninput_channels = 3\n{}skip_to = \"b2\"\n{}{}",
            conv("c0", 3, 8, &["b1"]),
            conv("b1", 8, 4, &["b2"]),
            conv("b2", 4, 6, &[])
        );
        assert!(matches!(parse_manifest(&text), Err(GraphError::SkipWidth { .. })));
    }

    #[test]
    fn output_layer_unique() {
        let text = format!(
            "input_spatial = 8\ninput_channels = 3\n{}{}{}",
            conv("a", 3, 8, &["b", "c"]),
            conv("b", 8, 4, &[]),
            conv("c", 8, 4, &[])
        );
        assert!(matches!(parse_manifest(&text), Err(GraphError::OutputLayer(v)) if v.len() == 2));
    }

    #[test]
    fn projection_needs_skip() {
        let text = format!("input_spatial = 8\ninput_channels = 3\n{}projection = true\n", conv("a", 3, 8, &[]));
        assert!(matches!(parse_manifest(&text), Err(GraphError::InvalidLayer { .. })));
    }
}
