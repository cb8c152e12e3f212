//! Files at rest: feature containers, manifests, checkpoints and the synthetic
//! benchmark generator.

pub mod container;
pub mod manifest;
pub mod synth;

use std::path::Path;

use crate::adapt::TransportMap;
use crate::error::{HasdError, Result};
use crate::mil::MilModel;
use crate::numerics::Matrix;
use container::{read_checkpoint, take_tensor, write_checkpoint, NamedTensor};

pub use container::{read_features, write_features};
pub use manifest::{load_bags, write_domain, DomainManifest, SlideEntry};

const MODEL_SCHEMA: [&str; 4] = ["V", "w", "clf_weight", "clf_bias"];
const MAP_SCHEMA: [&str; 2] = ["W", "bias"];

pub fn model_tensors(model: &MilModel) -> Vec<NamedTensor> {
    vec![
        NamedTensor::matrix("V", &model.v),
        NamedTensor::vector("w", &model.w),
        NamedTensor::vector("clf_weight", &model.clf_weight),
        NamedTensor::scalar("clf_bias", model.clf_bias),
    ]
}

fn as_matrix(t: &NamedTensor) -> Result<Matrix> {
    match t.dims.as_slice() {
        [r, c] => Matrix::new(*r, *c, t.data.clone()),
        _ => Err(HasdError::Schema(format!(
            "tensor {:?} must have rank 2, has dims {:?}",
            t.name, t.dims
        ))),
    }
}

pub fn model_from_tensors(tensors: &[NamedTensor]) -> Result<MilModel> {
    let v = as_matrix(take_tensor(tensors, "V", None, &MODEL_SCHEMA)?)?;
    let (hidden, dim) = v.shape();
    let model = MilModel {
        w: take_tensor(tensors, "w", Some(&[hidden]), &MODEL_SCHEMA)?
            .data
            .clone(),
        clf_weight: take_tensor(tensors, "clf_weight", Some(&[dim]), &MODEL_SCHEMA)?
            .data
            .clone(),
        clf_bias: take_tensor(tensors, "clf_bias", Some(&[]), &MODEL_SCHEMA)?.data[0],
        v,
    };
    model.validate()?;
    Ok(model)
}

pub fn map_tensors(map: &TransportMap) -> Vec<NamedTensor> {
    vec![
        NamedTensor::matrix("W", &map.w),
        NamedTensor::vector("bias", &map.bias),
    ]
}

pub fn map_from_tensors(tensors: &[NamedTensor]) -> Result<TransportMap> {
    let w = as_matrix(take_tensor(tensors, "W", None, &MAP_SCHEMA)?)?;
    if w.rows() != w.cols() {
        return Err(HasdError::Schema(format!(
            "tensor \"W\" must be square, has dims {:?}",
            w.shape()
        )));
    }
    let bias = take_tensor(tensors, "bias", Some(&[w.rows()]), &MAP_SCHEMA)?
        .data
        .clone();
    let map = TransportMap { w, bias };
    map.validate()?;
    Ok(map)
}

pub fn save_model(path: &Path, model: &MilModel) -> Result<()> {
    write_checkpoint(path, &model_tensors(model))
}

pub fn load_model(path: &Path) -> Result<MilModel> {
    model_from_tensors(&read_checkpoint(path)?)
}

pub fn save_map(path: &Path, map: &TransportMap) -> Result<()> {
    write_checkpoint(path, &map_tensors(map))
}

pub fn load_map(path: &Path) -> Result<TransportMap> {
    map_from_tensors(&read_checkpoint(path)?)
}

/// Classifier head refit on the mapped source, stored next to the map.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub clf_weight: Vec<f64>,
    pub clf_bias: f64,
}

impl Head {
    pub fn of(model: &MilModel) -> Self {
        Self {
            clf_weight: model.clf_weight.clone(),
            clf_bias: model.clf_bias,
        }
    }

    /// `model` with its classifier head replaced.
    pub fn install(&self, model: &MilModel) -> Result<MilModel> {
        if self.clf_weight.len() != model.dim() {
            return Err(HasdError::Schema(format!(
                "head has {} weights, model dimension is {}",
                self.clf_weight.len(),
                model.dim()
            )));
        }
        let mut out = model.clone();
        out.clf_weight = self.clf_weight.clone();
        out.clf_bias = self.clf_bias;
        Ok(out)
    }
}

/// Writes `W` and `bias`, plus `clf_weight` and `clf_bias` when a refit head
/// is given.
pub fn save_map_with_head(path: &Path, map: &TransportMap, head: Option<&Head>) -> Result<()> {
    let mut tensors = map_tensors(map);
    if let Some(h) = head {
        tensors.push(NamedTensor::vector("clf_weight", &h.clf_weight));
        tensors.push(NamedTensor::scalar("clf_bias", h.clf_bias));
    }
    write_checkpoint(path, &tensors)
}

pub fn load_map_with_head(path: &Path) -> Result<(TransportMap, Option<Head>)> {
    let tensors = read_checkpoint(path)?;
    let map = map_from_tensors(&tensors)?;
    let has = |n: &str| tensors.iter().any(|t| t.name == n);
    let head = if has("clf_weight") || has("clf_bias") {
        let schema = ["W", "bias", "clf_weight", "clf_bias"];
        let dim = map.dim();
        Some(Head {
            clf_weight: take_tensor(&tensors, "clf_weight", Some(&[dim]), &schema)?
                .data
                .clone(),
            clf_bias: take_tensor(&tensors, "clf_bias", Some(&[]), &schema)?.data[0],
        })
    } else {
        None
    };
    Ok((map, head))
}
