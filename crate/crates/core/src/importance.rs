//! Correlation-based redundancy and normalized filter importance.
//!
//! For a layer with weights `[K, K, M, N]`, input feature map `m` is described at
//! every kernel position `(i, j)` by the vector `W[i, j, m, :]`. Two feature maps are
//! similar when those vectors are linearly related; the layer similarity is the mean
//! over the `K×K` positions of the absolute per-position detector score. A feature
//! map that is highly similar to its `k` closest peers carries little unique
//! information and scores low importance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_graph::ModelGraph;
use crate::weight_store::{WeightContainer, WeightError, WeightTensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImportanceError {
    #[error("vector lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("tensor `{name}` has dims {dims:?}; expected [K, K, M, N] or [M, N]")]
    Shape { name: String, dims: Vec<usize> },
    #[error("layer `{layer}` has {n} output(s); at least 2 are needed to correlate over")]
    TooFewOutputs { layer: String, n: usize },
    #[error(transparent)]
    Weights(#[from] WeightError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    #[default]
    Correlation,
    Cosine,
    DotProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Max,
    L1,
    L2,
}

/// How a signed detector score becomes a similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignedMode {
    #[default]
    Abs,
    Relu,
    Square,
}

impl SignedMode {
    fn fold(self, x: f64) -> f64 {
        match self {
            SignedMode::Abs => x.abs(),
            SignedMode::Relu => x.max(0.0),
            SignedMode::Square => x * x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImportanceConfig {
    pub detector: Detector,
    pub normalization: Normalization,
    pub signed_mode: SignedMode,
    pub k: usize,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig {
            detector: Detector::Correlation,
            normalization: Normalization::Max,
            signed_mode: SignedMode::Abs,
            k: 3,
        }
    }
}

/// Left-to-right accumulation, so every run sums in the same order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn centered(v: impl Iterator<Item = f64> + Clone, len: usize) -> Vec<f64> {
    let mean = v.clone().sum::<f64>() / len as f64;
    v.map(|x| x - mean).collect()
}

/// Ratio `d_uv / sqrt(ss_u ss_v)`, 0 when either side has no energy.
///
/// For identical inputs `d_uv == ss_u == ss_v` bitwise and the result is exactly 1.
fn normalized_dot(d_uv: f64, ss_u: f64, ss_v: f64) -> f64 {
    if ss_u == 0.0 || ss_v == 0.0 {
        return 0.0;
    }
    (d_uv / (ss_u * ss_v).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson correlation coefficient; 0 when either vector is constant.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64, ImportanceError> {
    if u.len() != v.len() {
        return Err(ImportanceError::LengthMismatch(u.len(), v.len()));
    }
    if u.len() < 2 {
        return Err(ImportanceError::TooShort(u.len()));
    }
    let du = centered(u.iter().copied(), u.len());
    let dv = centered(v.iter().copied(), v.len());
    Ok(normalized_dot(dot(&du, &dv), dot(&du, &du), dot(&dv, &dv)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityFlags {
    /// Every weight in the layer is zero.
    pub all_zero: bool,
    /// Number of (position, filter) vectors with zero variance (or zero norm).
    pub degenerate_vectors: usize,
    /// Normalization divisor was zero; values left unscaled.
    pub unnormalized: bool,
}

/// Symmetric `M × M` similarity; the diagonal is unused and held at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub layer: String,
    pub size: usize,
    values: Vec<f64>,
    pub flags: SimilarityFlags,
}

impl SimilarityMatrix {
    /// Build from the strict upper triangle, row by row.
    pub fn from_upper(layer: impl Into<String>, size: usize, upper: &[f64]) -> Self {
        assert_eq!(upper.len(), size * size.saturating_sub(1) / 2, "upper triangle length");
        let mut values = vec![0.0; size * size];
        let mut it = upper.iter();
        for p in 0..size {
            for q in p + 1..size {
                let v = *it.next().unwrap();
                values[p * size + q] = v;
                values[q * size + p] = v;
            }
        }
        SimilarityMatrix {
            layer: layer.into(),
            size,
            values,
            flags: SimilarityFlags::default(),
        }
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.values[p * self.size + q]
    }

    /// Off-diagonal values of row `m`, in column order.
    pub fn peers(&self, m: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.size).filter(move |&n| n != m).map(move |n| self.get(m, n))
    }

    fn upper(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.size).flat_map(move |p| (p + 1..self.size).map(move |q| self.get(p, q)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    /// `((p * M) + m) * N + n`, the `[K, K, M, N]` order.
    PositionMajor,
    /// `((m * P) + p) * N + n`, a flattened `C × s × s` fc input.
    FilterMajor,
}

/// A layer's weights seen as `positions × filters` vectors of length `len`.
#[derive(Debug, Clone, Copy)]
pub struct FilterView<'a> {
    name: &'a str,
    data: &'a [f32],
    positions: usize,
    filters: usize,
    len: usize,
    layout: Layout,
}

impl<'a> FilterView<'a> {
    /// `[K, K, M, N]` conv weights or `[M, N]` fully connected weights (K = 1).
    pub fn from_tensor(t: &'a WeightTensor) -> Result<Self, ImportanceError> {
        let (positions, filters, len) = match t.dims[..] {
            [m, n] => (1, m, n),
            [k1, k2, m, n] if k1 == k2 => (k1 * k2, m, n),
            _ => {
                return Err(ImportanceError::Shape {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                })
            }
        };
        Ok(FilterView {
            name: &t.name,
            data: &t.data,
            positions,
            filters,
            len,
            layout: Layout::PositionMajor,
        })
    }

    /// Fully connected `[C * s², N]` weights reading a channel-major flattened map:
    /// each channel is a filter and the `s²` spatial cells act as kernel positions.
    pub fn flattened(t: &'a WeightTensor, rows_per_channel: usize) -> Result<Self, ImportanceError> {
        match t.dims[..] {
            [rows, n] if rows_per_channel > 0 && rows % rows_per_channel == 0 => Ok(FilterView {
                name: &t.name,
                data: &t.data,
                positions: rows_per_channel,
                filters: rows / rows_per_channel,
                len: n,
                layout: Layout::FilterMajor,
            }),
            _ => Err(ImportanceError::Shape {
                name: t.name.clone(),
                dims: t.dims.clone(),
            }),
        }
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    fn vector(&self, p: usize, m: usize) -> &'a [f32] {
        let start = match self.layout {
            Layout::PositionMajor => (p * self.filters + m) * self.len,
            Layout::FilterMajor => (m * self.positions + p) * self.len,
        };
        &self.data[start..start + self.len]
    }
}

/// Pairwise similarity of `t`'s input feature maps.
pub fn similarity_matrix(t: &WeightTensor, detector: Detector) -> Result<SimilarityMatrix, ImportanceError> {
    similarity_from_view(&FilterView::from_tensor(t)?, detector, SignedMode::Abs)
}

pub fn similarity_from_view(
    view: &FilterView<'_>,
    detector: Detector,
    signed: SignedMode,
) -> Result<SimilarityMatrix, ImportanceError> {
    if view.len < 2 {
        return Err(ImportanceError::TooFewOutputs {
            layer: view.name.to_string(),
            n: view.len,
        });
    }
    let m = view.filters;
    let pairs = m * m.saturating_sub(1) / 2;
    let mut sums = vec![0.0f64; pairs];
    let mut degenerate = 0;

    for p in 0..view.positions {
        let vectors: Vec<Vec<f64>> = (0..m)
            .map(|f| {
                let raw = view.vector(p, f).iter().map(|&x| x as f64);
                match detector {
                    Detector::Correlation => centered(raw, view.len),
                    Detector::Cosine | Detector::DotProduct => raw.collect(),
                }
            })
            .collect();
        let energy: Vec<f64> = vectors.iter().map(|v| dot(v, v)).collect();
        degenerate += energy.iter().filter(|&&e| e == 0.0).count();

        let rows: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|a| {
                (a + 1..m)
                    .map(|b| {
                        let d = dot(&vectors[a], &vectors[b]);
                        let score = match detector {
                            Detector::DotProduct => d,
                            _ => normalized_dot(d, energy[a], energy[b]),
                        };
                        signed.fold(score)
                    })
                    .collect()
            })
            .collect();
        for (s, v) in sums.iter_mut().zip(rows.into_iter().flatten()) {
            *s += v;
        }
    }

    let scale = view.positions as f64;
    let upper: Vec<f64> = sums.into_iter().map(|s| s / scale).collect();
    let mut sim = SimilarityMatrix::from_upper(view.name, m, &upper);
    sim.flags.degenerate_vectors = degenerate;
    sim.flags.all_zero = view.data.iter().all(|&x| x == 0.0);
    if sim.flags.all_zero {
        log::warn!("layer `{}` is all zeros; similarities are 0", view.name);
    }
    Ok(sim)
}

/// Rescale the off-diagonal similarities by their max, l1 or l2 size.
pub fn normalize(sim: &SimilarityMatrix, mode: Normalization) -> SimilarityMatrix {
    let divisor = match mode {
        Normalization::Max => sim.upper().fold(0.0f64, f64::max),
        Normalization::L1 => sim.upper().map(f64::abs).sum(),
        Normalization::L2 => sim.upper().map(|v| v * v).sum::<f64>().sqrt(),
    };
    let mut out = sim.clone();
    if divisor == 0.0 || !divisor.is_finite() {
        out.flags.unnormalized = true;
        return out;
    }
    for v in &mut out.values {
        *v /= divisor;
    }
    out
}

/// `1 − mean of the k largest normalized similarities to the other filters`,
/// with `k` clipped to `M − 1`.
pub fn topk_importance(sim: &SimilarityMatrix, k: usize) -> Vec<f64> {
    let m = sim.size;
    if m < 2 {
        return vec![1.0; m];
    }
    let k_eff = k.clamp(1, m - 1);
    (0..m)
        .map(|f| {
            let mut peers: Vec<f64> = sim.peers(f).collect();
            peers.sort_by(|a, b| b.total_cmp(a));
            let top: f64 = peers[..k_eff].iter().sum();
            1.0 - top / k_eff as f64
        })
        .collect()
}

fn top1(sim: &SimilarityMatrix) -> Vec<f64> {
    (0..sim.size).map(|f| sim.peers(f).fold(0.0, f64::max)).collect()
}

/// Importance of one layer's input feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerImportance {
    pub layer: String,
    pub imp: Vec<f64>,
    pub top1: Vec<f64>,
    pub flags: SimilarityFlags,
}

pub fn layer_importance(view: &FilterView<'_>, config: &ImportanceConfig) -> Result<LayerImportance, ImportanceError> {
    let sim = similarity_from_view(view, config.detector, config.signed_mode)?;
    let norm = normalize(&sim, config.normalization);
    Ok(LayerImportance {
        layer: view.name.to_string(),
        imp: topk_importance(&norm, config.k),
        top1: top1(&norm),
        flags: norm.flags,
    })
}

/// Scores for one coupling group: one entry per channel index.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitScores {
    /// Representative layer name of the group.
    pub unit: String,
    pub group: usize,
    /// Graph index of the representative layer.
    pub layer_index: usize,
    pub consumers: Vec<LayerImportance>,
    pub top1: Vec<f64>,
    pub imp: Vec<f64>,
    pub reg: f64,
    pub reimp: Vec<f64>,
}

impl UnitScores {
    pub fn width(&self) -> usize {
        self.imp.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub config: ImportanceConfig,
    /// `(beta, gamma)` once regularized.
    pub regularizer: Option<(f64, f64)>,
    pub units: Vec<UnitScores>,
}

impl ImportanceTable {
    pub fn unit(&self, name: &str) -> Option<&UnitScores> {
        self.units.iter().find(|u| u.unit == name)
    }

    /// Tab-separated dump: `layer filter top1 imp reg reimp`.
    pub fn to_tsv(&self) -> String {
        let c = &self.config;
        let mut out = format!(
            "# detector={:?} normalization={:?} signed_mode={:?} k={}",
            c.detector, c.normalization, c.signed_mode, c.k
        )
        .to_lowercase();
        if let Some((beta, gamma)) = self.regularizer {
            out.push_str(&format!(" beta={beta} gamma={gamma}"));
        }
        out.push_str("\nlayer\tfilter\ttop1\timp\treg\treimp\n");
        for u in &self.units {
            for f in 0..u.width() {
                out.push_str(&format!(
                    "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                    u.unit, f, u.top1[f], u.imp[f], u.reg, u.reimp[f]
                ));
            }
        }
        out
    }
}

/// Importance of every prunable coupling group.
///
/// A group's score for channel `c` is the mean over every layer that reads one of
/// its axes of that layer's importance for input `c`. Groups without a usable reader
/// (fewer than two outputs to correlate over) are left out and stay unpruned.
pub fn score_graph(
    graph: &ModelGraph,
    weights: &WeightContainer,
    config: &ImportanceConfig,
) -> Result<ImportanceTable, ImportanceError> {
    weights.check_against(graph)?;
    let readers: Vec<usize> = (0..graph.len())
        .filter(|&i| !graph.layers()[i].kind.is_passthrough())
        .filter(|&i| graph.input_group(i).is_some_and(|g| graph.groups()[g].prunable))
        .filter(|&i| graph.layers()[i].out_channels >= 2)
        .collect();

    let scored: Vec<Result<(usize, LayerImportance), ImportanceError>> = readers
        .par_iter()
        .map(|&i| {
            let layer = &graph.layers()[i];
            let t = weights
                .get(&layer.name)
                .ok_or_else(|| WeightError::Missing(layer.name.clone()))?;
            let rows = graph.rows_per_channel(i) as usize;
            let view = if rows > 1 {
                FilterView::flattened(t, rows)?
            } else {
                FilterView::from_tensor(t)?
            };
            Ok((i, layer_importance(&view, config)?))
        })
        .collect();

    let mut by_group: Vec<Vec<LayerImportance>> = vec![Vec::new(); graph.groups().len()];
    for r in scored {
        let (i, li) = r?;
        by_group[graph.input_group(i).unwrap()].push(li);
    }

    let mut units = Vec::new();
    for (g, consumers) in by_group.into_iter().enumerate() {
        if consumers.is_empty() {
            if graph.groups()[g].prunable {
                log::info!("group `{}` has no scorable reader; kept", graph.groups()[g].representative());
            }
            continue;
        }
        let group = &graph.groups()[g];
        let width = group.width as usize;
        let n = consumers.len() as f64;
        let mean = |pick: fn(&LayerImportance) -> &Vec<f64>| -> Vec<f64> {
            (0..width)
                .map(|c| consumers.iter().map(|li| pick(li)[c]).sum::<f64>() / n)
                .collect()
        };
        let imp = mean(|li| &li.imp);
        let top1 = mean(|li| &li.top1);
        units.push(UnitScores {
            unit: group.representative().to_string(),
            group: g,
            layer_index: group.layers[0],
            reimp: imp.clone(),
            imp,
            top1,
            reg: 0.0,
            consumers,
        });
    }
    Ok(ImportanceTable {
        config: *config,
        regularizer: None,
        units,
    })
}
