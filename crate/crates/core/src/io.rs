//! Model container: `NNHM` magic, little-endian u32 version and manifest
//! length, a JSON manifest describing the architecture, then every parameter
//! tensor as raw little-endian f32 in layer order.
//!
//! Blob lengths are implied by the manifest geometry, so a file whose data
//! section is too short or too long is detected exactly, and round-trips are
//! bit-faithful (NaN payloads included).

use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::layer::{EdacSpec, IntervalScope, Layer, LayerParams, LayerSpec};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NNHM";
pub const CONTAINER_VERSION: u32 = 1;

/// Serializes a model to the container format.
pub fn save(model: &ModelGraph, path: &Path) -> Result<()> {
    model.validate()?;
    let manifest = manifest_json(model).to_string().into_bytes();
    let mut buf = Vec::with_capacity(16 + manifest.len() + 4 * model.param_count() as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(&manifest);
    for layer in &model.layers {
        for (_, tensor) in persisted_tensors(layer) {
            for v in tensor.data() {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
    }
    std::fs::write(path, buf).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a model, reporting malformed files with a specific diagnostic:
/// wrong magic, unsupported version, unknown layer kind, manifest/geometry
/// disagreement, truncated or oversized weight data.
pub fn load(path: &Path) -> Result<ModelGraph> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let perr = |detail: String| Error::Manifest {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 12 {
        return Err(Error::TruncatedBlob {
            path: path.to_path_buf(),
            detail: format!("file is only {} bytes, header needs 12", bytes.len()),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: CONTAINER_VERSION,
        });
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + manifest_len {
        return Err(Error::TruncatedBlob {
            path: path.to_path_buf(),
            detail: format!(
                "manifest claims {manifest_len} bytes but only {} remain",
                bytes.len() - 12
            ),
        });
    }
    let manifest: Value = serde_json::from_slice(&bytes[12..12 + manifest_len])
        .map_err(|e| perr(format!("invalid JSON: {e}")))?;

    let (specs, input_shape, num_classes) = parse_manifest(&manifest, path)?;

    let mut blob = &bytes[12 + manifest_len..];
    let mut layers = Vec::with_capacity(specs.len());
    for (l, spec) in specs.into_iter().enumerate() {
        let mut tensors = Vec::new();
        for (name, shape) in expected_tensors(&spec) {
            let count: usize = shape.iter().product();
            let need = count * 4;
            if blob.len() < need {
                return Err(Error::TruncatedBlob {
                    path: path.to_path_buf(),
                    detail: format!(
                        "layer {l} tensor `{name}` needs {need} bytes, {} remain",
                        blob.len()
                    ),
                });
            }
            let data: Vec<f32> = blob[..need]
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            blob = &blob[need..];
            tensors.push(Tensor::new(shape, data)?);
        }
        layers.push(assemble_layer(spec, tensors));
    }
    if !blob.is_empty() {
        return Err(Error::BlobLengthMismatch {
            path: path.to_path_buf(),
            detail: format!("{} unexpected trailing bytes after last tensor", blob.len()),
        });
    }
    ModelGraph::new(layers, input_shape, num_classes)
}

fn manifest_json(model: &ModelGraph) -> Value {
    let layers: Vec<Value> = model
        .layers
        .iter()
        .map(|layer| match &layer.spec {
            LayerSpec::Conv2D {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
                has_bias,
            } => json!({
                "kind": "Conv2D",
                "in_channels": in_channels,
                "out_channels": out_channels,
                "kernel_h": kernel_h,
                "kernel_w": kernel_w,
                "stride": stride,
                "padding": padding,
                "has_bias": has_bias,
            }),
            LayerSpec::FullyConnected {
                in_features,
                out_features,
                has_bias,
            } => json!({
                "kind": "FullyConnected",
                "in_features": in_features,
                "out_features": out_features,
                "has_bias": has_bias,
            }),
            LayerSpec::BatchNorm { channels } => json!({
                "kind": "BatchNorm",
                "channels": channels,
            }),
            LayerSpec::ReLU => json!({ "kind": "ReLU" }),
            LayerSpec::MaxPool { window, stride } => json!({
                "kind": "MaxPool",
                "window": window,
                "stride": stride,
            }),
            LayerSpec::Flatten => json!({ "kind": "Flatten" }),
            LayerSpec::Edac(spec) => json!({
                "kind": "EDAC",
                "replicas": spec.replicas,
                "scope": spec.scope.name(),
            }),
        })
        .collect();
    json!({
        "input_shape": model.input_shape,
        "num_classes": model.num_classes,
        "layers": layers,
    })
}

fn parse_manifest(manifest: &Value, path: &Path) -> Result<(Vec<LayerSpec>, [usize; 3], usize)> {
    let perr = |detail: String| Error::Manifest {
        path: path.to_path_buf(),
        detail,
    };
    let top = manifest
        .as_object()
        .ok_or_else(|| perr("top level is not an object".into()))?;
    let input_shape: Vec<usize> = usize_array(top, "input_shape").map_err(&perr)?;
    let input_shape: [usize; 3] = input_shape
        .try_into()
        .map_err(|v: Vec<usize>| perr(format!("input_shape has {} entries, expected 3", v.len())))?;
    let num_classes = usize_field(top, "num_classes").map_err(&perr)?;
    let layers_json = top
        .get("layers")
        .and_then(Value::as_array)
        .ok_or_else(|| perr("missing `layers` array".into()))?;

    let mut specs = Vec::with_capacity(layers_json.len());
    for (l, entry) in layers_json.iter().enumerate() {
        let obj = entry
            .as_object()
            .ok_or_else(|| perr(format!("layer {l} is not an object")))?;
        let kind = obj
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| perr(format!("layer {l} is missing `kind`")))?;
        let lerr = |e: String| perr(format!("layer {l} ({kind}): {e}"));
        let spec = match kind {
            "Conv2D" => LayerSpec::Conv2D {
                in_channels: usize_field(obj, "in_channels").map_err(&lerr)?,
                out_channels: usize_field(obj, "out_channels").map_err(&lerr)?,
                kernel_h: usize_field(obj, "kernel_h").map_err(&lerr)?,
                kernel_w: usize_field(obj, "kernel_w").map_err(&lerr)?,
                stride: usize_field(obj, "stride").map_err(&lerr)?,
                padding: usize_field(obj, "padding").map_err(&lerr)?,
                has_bias: bool_field(obj, "has_bias").map_err(&lerr)?,
            },
            "FullyConnected" => LayerSpec::FullyConnected {
                in_features: usize_field(obj, "in_features").map_err(&lerr)?,
                out_features: usize_field(obj, "out_features").map_err(&lerr)?,
                has_bias: bool_field(obj, "has_bias").map_err(&lerr)?,
            },
            "BatchNorm" => LayerSpec::BatchNorm {
                channels: usize_field(obj, "channels").map_err(&lerr)?,
            },
            "ReLU" => LayerSpec::ReLU,
            "MaxPool" => LayerSpec::MaxPool {
                window: usize_field(obj, "window").map_err(&lerr)?,
                stride: usize_field(obj, "stride").map_err(&lerr)?,
            },
            "Flatten" => LayerSpec::Flatten,
            "EDAC" => {
                let replicas: Vec<Vec<usize>> = obj
                    .get("replicas")
                    .cloned()
                    .ok_or_else(|| lerr("missing `replicas`".into()))
                    .and_then(|v| {
                        serde_json::from_value(v).map_err(|e| lerr(format!("bad `replicas`: {e}")))
                    })?;
                let scope = obj
                    .get("scope")
                    .and_then(Value::as_str)
                    .ok_or_else(|| lerr("missing `scope`".into()))?;
                LayerSpec::Edac(EdacSpec {
                    replicas,
                    scope: IntervalScope::parse(scope)
                        .map_err(|e| lerr(e.to_string()))?,
                })
            }
            other => {
                return Err(Error::UnknownLayerKind {
                    path: path.to_path_buf(),
                    kind: other.to_string(),
                })
            }
        };
        specs.push(spec);
    }
    Ok((specs, input_shape, num_classes))
}

fn usize_field(obj: &Map<String, Value>, name: &str) -> std::result::Result<usize, String> {
    obj.get(name)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| format!("missing or non-integer field `{name}`"))
}

fn bool_field(obj: &Map<String, Value>, name: &str) -> std::result::Result<bool, String> {
    obj.get(name)
        .and_then(Value::as_bool)
        .ok_or_else(|| format!("missing or non-boolean field `{name}`"))
}

fn usize_array(obj: &Map<String, Value>, name: &str) -> std::result::Result<Vec<usize>, String> {
    obj.get(name)
        .and_then(Value::as_array)
        .ok_or_else(|| format!("missing or non-array field `{name}`"))?
        .iter()
        .map(|v| {
            v.as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| format!("non-integer entry in `{name}`"))
        })
        .collect()
}

/// Tensors persisted for a layer, with names for diagnostics. Unlike the
/// injectable set this includes BatchNorm running statistics.
fn persisted_tensors(layer: &Layer) -> Vec<(&'static str, &Tensor)> {
    match &layer.params {
        LayerParams::Conv2D { weight, bias } | LayerParams::FullyConnected { weight, bias } => {
            let mut v = vec![("weight", weight)];
            if let Some(b) = bias {
                v.push(("bias", b));
            }
            v
        }
        LayerParams::BatchNorm {
            scale,
            shift,
            running_mean,
            running_var,
        } => vec![
            ("scale", scale),
            ("shift", shift),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ],
        LayerParams::Edac { lower, upper } => vec![("lower", lower), ("upper", upper)],
        LayerParams::None => vec![],
    }
}

/// Shapes of the tensors `load` expects for a spec, in persisted order.
fn expected_tensors(spec: &LayerSpec) -> Vec<(&'static str, Vec<usize>)> {
    match spec {
        LayerSpec::Conv2D {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            has_bias,
            ..
        } => {
            let mut v = vec![(
                "weight",
                vec![*out_channels, *in_channels, *kernel_h, *kernel_w],
            )];
            if *has_bias {
                v.push(("bias", vec![*out_channels]));
            }
            v
        }
        LayerSpec::FullyConnected {
            in_features,
            out_features,
            has_bias,
        } => {
            let mut v = vec![("weight", vec![*out_features, *in_features])];
            if *has_bias {
                v.push(("bias", vec![*out_features]));
            }
            v
        }
        LayerSpec::BatchNorm { channels } => vec![
            ("scale", vec![*channels]),
            ("shift", vec![*channels]),
            ("running_mean", vec![*channels]),
            ("running_var", vec![*channels]),
        ],
        LayerSpec::Edac(spec) => {
            let l = spec.logical_channels();
            vec![("lower", vec![l]), ("upper", vec![l])]
        }
        LayerSpec::ReLU | LayerSpec::MaxPool { .. } | LayerSpec::Flatten => vec![],
    }
}

fn assemble_layer(spec: LayerSpec, mut tensors: Vec<Tensor>) -> Layer {
    let params = match &spec {
        LayerSpec::Conv2D { has_bias, .. } => {
            let bias = has_bias.then(|| tensors.pop().unwrap());
            LayerParams::Conv2D {
                bias,
                weight: tensors.pop().unwrap(),
            }
        }
        LayerSpec::FullyConnected { has_bias, .. } => {
            let bias = has_bias.then(|| tensors.pop().unwrap());
            LayerParams::FullyConnected {
                bias,
                weight: tensors.pop().unwrap(),
            }
        }
        LayerSpec::BatchNorm { .. } => {
            let running_var = tensors.pop().unwrap();
            let running_mean = tensors.pop().unwrap();
            let shift = tensors.pop().unwrap();
            let scale = tensors.pop().unwrap();
            LayerParams::BatchNorm {
                scale,
                shift,
                running_mean,
                running_var,
            }
        }
        LayerSpec::Edac(_) => {
            let upper = tensors.pop().unwrap();
            let lower = tensors.pop().unwrap();
            LayerParams::Edac { lower, upper }
        }
        LayerSpec::ReLU | LayerSpec::MaxPool { .. } | LayerSpec::Flatten => LayerParams::None,
    };
    Layer::new(spec, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchPreset;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tmp();
        let path = dir.path().join("m.nnhm");
        let mut model = ArchPreset::CnnBn.build([1, 12, 12], 5, 11).unwrap();
        // Plant a NaN payload and a signed zero to prove bit fidelity.
        if let LayerParams::Conv2D { weight, .. } = &mut model.layers[0].params {
            weight.data_mut()[0] = f32::from_bits(0x7fc1_2345);
            weight.data_mut()[1] = -0.0;
        }
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(model.layers.len(), loaded.layers.len());
        for (a, b) in model.layers.iter().zip(&loaded.layers) {
            assert_eq!(a.spec, b.spec);
            for ((_, ta), (_, tb)) in persisted_tensors(a).iter().zip(persisted_tensors(b).iter()) {
                assert!(ta.bit_eq(tb));
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tmp();
        let path = dir.path().join("m.nnhm");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00\x02\x00\x00\x00{}").unwrap();
        assert!(matches!(load(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn rejects_wrong_version() {
        let dir = tmp();
        let path = dir.path().join("m.nnhm");
        let model = ArchPreset::MlpSmall.build([1, 4, 4], 3, 1).unwrap();
        save(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load(&path),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn rejects_unknown_layer_kind() {
        let dir = tmp();
        let path = dir.path().join("m.nnhm");
        let manifest = br#"{"input_shape":[1,2,2],"num_classes":2,"layers":[{"kind":"Swizzle"}]}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        bytes.extend_from_slice(manifest);
        std::fs::write(&path, bytes).unwrap();
        match load(&path) {
            Err(Error::UnknownLayerKind { kind, .. }) => assert_eq!(kind, "Swizzle"),
            other => panic!("expected UnknownLayerKind, got {other:?}"),
        }
    }

    #[test]
    fn rejects_truncated_and_oversized_blobs() {
        let dir = tmp();
        let path = dir.path().join("m.nnhm");
        let model = ArchPreset::MlpSmall.build([1, 4, 4], 3, 1).unwrap();
        save(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.nnhm");
        std::fs::write(&cut, &bytes[..bytes.len() - 6]).unwrap();
        assert!(matches!(load(&cut), Err(Error::TruncatedBlob { .. })));

        let fat = dir.path().join("fat.nnhm");
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0u8; 8]);
        std::fs::write(&fat, extra).unwrap();
        assert!(matches!(load(&fat), Err(Error::BlobLengthMismatch { .. })));
    }

    #[test]
    fn rejects_geometry_that_contradicts_itself() {
        // Manifest declares an FC layer whose weight cannot produce the
        // declared logits width; the shape chain check must catch it.
        let dir = tmp();
        let path = dir.path().join("m.nnhm");
        let manifest = br#"{"input_shape":[1,2,2],"num_classes":3,"layers":[{"kind":"Flatten"},{"kind":"FullyConnected","in_features":4,"out_features":2,"has_bias":false}]}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        bytes.extend_from_slice(manifest);
        bytes.extend_from_slice(&[0u8; 8 * 4]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn hardened_model_round_trips() {
        use crate::harden::{harden_model, HardeningMode, HardeningPlan};
        use crate::layer::IntervalScope;
        use crate::profile::IntervalTable;

        let dir = tmp();
        let path = dir.path().join("h.nnhm");
        let model = ArchPreset::CnnSmall.build([1, 12, 12], 5, 2).unwrap();
        let intervals = IntervalTable::unbounded(&model).unwrap();
        let plan = HardeningPlan::full(&model, HardeningMode::Duplicate, IntervalScope::AllChannels)
            .unwrap();
        let hardened = harden_model(&model, &plan, &intervals).unwrap();
        save(&hardened, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(hardened, loaded);
    }
}
