//! Shipped architecture manifests.

use crate::model_graph::{parse_manifest, GraphError, ModelGraph};

pub const NAMES: [&str; 4] = ["vgg16_imagenet", "vgg16_cifar", "resnet32_cifar", "mobilenet_cifar"];

pub fn text(name: &str) -> Option<&'static str> {
    Some(match name {
        "vgg16_imagenet" => include_str!("../fixtures/vgg16_imagenet.toml"),
        "vgg16_cifar" => include_str!("../fixtures/vgg16_cifar.toml"),
        "resnet32_cifar" => include_str!("../fixtures/resnet32_cifar.toml"),
        "mobilenet_cifar" => include_str!("../fixtures/mobilenet_cifar.toml"),
        _ => return None,
    })
}

pub fn load(name: &str) -> Result<ModelGraph, GraphError> {
    let text = text(name).ok_or_else(|| GraphError::Schema(format!("no fixture named `{name}`")))?;
    parse_manifest(text)
}
