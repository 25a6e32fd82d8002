//! Model and calibration files, plus synthetic fixtures.

pub mod calibration;
pub mod container;
pub mod synthetic;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Activation, ExpertParams, MoELayer, MoEModel};
use crate::scalar::Scalar;
use container::{Container, RawTensor};

pub use calibration::{load_calibration, load_embeddings, save_embeddings, CalibrationBatch};
pub use synthetic::{generate_synthetic, random_tokens, SyntheticSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayerHeader {
    n_experts: usize,
    top_k: usize,
    renormalize_topk: bool,
    protected: Vec<usize>,
}

fn tensor_name(layer: usize, expert: Option<usize>, part: &str) -> String {
    match expert {
        Some(e) => format!("layers.{layer}.experts.{e}.{part}"),
        None => format!("layers.{layer}.{part}"),
    }
}

fn raw<T: Scalar>(m: &Matrix<T>) -> RawTensor {
    RawTensor {
        shape: vec![m.rows(), m.cols()],
        data: m.as_slice().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
    }
}

pub fn model_to_container<T: Scalar>(m: &MoEModel<T>) -> Result<Container> {
    m.validate()?;
    let mut c = Container::default();
    let first = m.layers.first();
    let d_ff = first.map_or(0, MoELayer::d_ff);
    let activation = first.map_or(Activation::default(), |l| l.experts()[0].activation);
    if m
        .layers
        .iter()
        .any(|l| l.d_ff() != d_ff || l.experts().iter().any(|e| e.activation != activation))
    {
        return Err(Error::InvalidModel(
            "container requires one d_ff and activation across layers".into(),
        ));
    }
    let layers: Vec<LayerHeader> = m
        .layers
        .iter()
        .map(|l| LayerHeader {
            n_experts: l.n_experts(),
            top_k: l.top_k(),
            renormalize_topk: l.renormalize_topk(),
            protected: l.protected().iter().copied().collect(),
        })
        .collect();
    c.fields.insert("kind".into(), Value::from("moe-model"));
    c.fields.insert("d_model".into(), Value::from(m.d_model));
    c.fields.insert("d_ff".into(), Value::from(d_ff));
    c.fields.insert("n_layers".into(), Value::from(m.layers.len()));
    c.fields.insert("activation".into(), Value::from(activation.name()));
    c.fields.insert("layers".into(), serde_json::to_value(layers)?);
    c.fields.insert("metadata".into(), serde_json::to_value(&m.metadata)?);
    for (l, layer) in m.layers.iter().enumerate() {
        for (e, ex) in layer.experts().iter().enumerate() {
            c.tensors.push((tensor_name(l, Some(e), "theta1"), raw(&ex.theta1)));
            c.tensors.push((tensor_name(l, Some(e), "theta2"), raw(&ex.theta2)));
            c.tensors.push((tensor_name(l, Some(e), "theta3"), raw(&ex.theta3)));
        }
        c.tensors.push((tensor_name(l, None, "router"), raw(layer.router())));
    }
    Ok(c)
}

fn take_matrix<T: Scalar>(c: &Container, name: &str, rows: usize, cols: usize) -> Result<Matrix<T>> {
    let t = c.tensor(name).ok_or_else(|| Error::Tensor {
        tensor: name.into(),
        reason: "missing from container".into(),
    })?;
    if t.shape != [rows, cols] {
        return Err(Error::Tensor {
            tensor: name.into(),
            reason: format!("shape {:?}, expected [{rows}, {cols}]", t.shape),
        });
    }
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Tensor {
            tensor: name.into(),
            reason: "contains NaN or Inf".into(),
        });
    }
    Matrix::new(rows, cols, t.data.iter().map(|&v| T::from(v).unwrap()).collect())
}

pub fn model_from_container<T: Scalar>(c: &Container) -> Result<MoEModel<T>> {
    if c.fields.get("kind").and_then(Value::as_str) != Some("moe-model") {
        return Err(Error::Format("container does not hold an MoE model".into()));
    }
    let d_model = c.field_usize("d_model")?;
    let d_ff = c.field_usize("d_ff")?;
    let n_layers = c.field_usize("n_layers")?;
    let activation = c
        .fields
        .get("activation")
        .and_then(Value::as_str)
        .and_then(Activation::parse)
        .ok_or_else(|| Error::Format("header field `activation` missing or unknown".into()))?;
    let layers: Vec<LayerHeader> = serde_json::from_value(
        c.fields
            .get("layers")
            .cloned()
            .ok_or_else(|| Error::Format("header field `layers` missing".into()))?,
    )
    .map_err(|e| Error::Format(format!("header field `layers` malformed: {e}")))?;
    if layers.len() != n_layers {
        return Err(Error::Format(format!(
            "n_layers = {n_layers} but {} layer records",
            layers.len()
        )));
    }
    let metadata = match c.fields.get("metadata") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::Format(format!("header field `metadata` malformed: {e}")))?,
        None => Default::default(),
    };
    let expected = layers.iter().map(|h| 3 * h.n_experts + 1).sum::<usize>();
    if c.tensors.len() != expected {
        return Err(Error::Format(format!(
            "container holds {} tensors, header describes {expected}",
            c.tensors.len()
        )));
    }
    let mut out = Vec::with_capacity(n_layers);
    for (l, h) in layers.iter().enumerate() {
        let mut experts = Vec::with_capacity(h.n_experts);
        for e in 0..h.n_experts {
            experts.push(ExpertParams::new(
                take_matrix(c, &tensor_name(l, Some(e), "theta1"), d_ff, d_model)?,
                take_matrix(c, &tensor_name(l, Some(e), "theta2"), d_model, d_ff)?,
                take_matrix(c, &tensor_name(l, Some(e), "theta3"), d_ff, d_model)?,
                activation,
            )?);
        }
        let router = take_matrix(c, &tensor_name(l, None, "router"), h.n_experts, d_model)?;
        let layer = MoELayer::new(experts, router, h.top_k)
            .and_then(|layer| layer.with_protected(h.protected.iter().copied()))
            .map_err(|e| e.in_layer(l))?
            .with_renormalize(h.renormalize_topk);
        out.push(layer);
    }
    let mut m = MoEModel::new(out, d_model)?;
    m.metadata = metadata;
    Ok(m)
}

/// Writes `m` as float32; weights of an `f64` model are rounded.
pub fn save_model<T: Scalar>(m: &MoEModel<T>, path: impl AsRef<Path>) -> Result<()> {
    container::write(path, &model_to_container(m)?)
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<MoEModel<T>> {
    model_from_container(&container::read(path)?)
}

pub fn encode_model<T: Scalar>(m: &MoEModel<T>) -> Result<Vec<u8>> {
    container::encode(&model_to_container(m)?)
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<MoEModel<T>> {
    model_from_container(&container::decode(bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            n_experts: 4,
            d_model: 6,
            d_ff: 5,
            n_layers: 2,
            top_k: 2,
            duplicate_groups: vec![vec![0, 1], vec![2], vec![3]],
            noise_sigma: 0.1,
            seed: 17,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn model_round_trip_bitwise() {
        let m: MoEModel<f32> = generate_synthetic(&spec()).unwrap();
        let back: MoEModel<f32> = decode_model(&encode_model(&m).unwrap()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn load_validates_layer_invariants() {
        let m: MoEModel<f32> = generate_synthetic(&spec()).unwrap();
        let mut c = model_to_container(&m).unwrap();
        c.fields["layers"][0]["top_k"] = Value::from(9);
        let err = model_from_container::<f32>(&c).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");

        let mut c = model_to_container(&m).unwrap();
        let router = c.tensors.iter_mut().find(|(n, _)| n == "layers.1.router").unwrap();
        router.1.shape = vec![3, 8];
        let msg = model_from_container::<f32>(&c).unwrap_err().to_string();
        assert!(msg.contains("layers.1.router"), "{msg}");
    }

    #[test]
    fn truncated_file_names_tensor_at_computed_offset() {
        let m: MoEModel<f32> = generate_synthetic(&spec()).unwrap();
        let bytes = encode_model(&m).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = (16 + hlen).div_ceil(64) * 64;
        // expert tensors are 5x6 floats = 120 bytes, padded to 128
        let per_tensor = 128;
        let victim_index = 5; // layers.0.experts.1.theta3
        let cut = payload_start + victim_index * per_tensor + 7;
        let msg = decode_model::<f32>(&bytes[..cut]).unwrap_err().to_string();
        assert!(msg.contains("layers.0.experts.1.theta3"), "{msg}");
    }
}
