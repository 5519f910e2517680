//! Correlation-based structured filter pruning.
//!
//! The pipeline reads an architecture manifest ([`model_graph`]) and a COPW weight
//! container ([`weight_store`]), scores every prunable feature map by how redundant
//! its weights are with its peers ([`importance`]), shifts the scores by how much
//! parameter and FLOP budget each layer controls ([`cost_model`]), and ranks all
//! filters of the network on one scale to build and apply a pruning plan
//! ([`planner`]).

pub mod cost_model;
pub mod fixtures;
pub mod importance;
pub mod model_graph;
pub mod planner;
pub mod synth;
pub mod weight_store;

pub use cost_model::{layer_costs, predict_reduction, regularizer, CostTable, Reduction, SpatialConvention};
pub use importance::{score_graph, Detector, ImportanceConfig, ImportanceTable, Normalization, SignedMode};
pub use model_graph::{parse_manifest, CouplingGroup, LayerKind, LayerSpec, ModelGraph};
pub use planner::{apply_plan, build_plan, prune_graph, GroupQuota, PlanConfig, PlanError, PruningPlan};
pub use weight_store::{read_container, write_container, WeightContainer, WeightTensor};
