//! Fixtures for tests and benches: tiny ONNX backbones built in memory and
//! synthetic class-per-folder image trees.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use prost::Message;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tract_onnx::pb::{
    attribute_proto, tensor_proto, tensor_shape_proto, type_proto, AttributeProto, GraphProto,
    ModelProto, NodeProto, OperatorSetIdProto, TensorProto, TensorShapeProto, TypeProto,
    ValueInfoProto,
};

const FLOAT: i32 = tensor_proto::DataType::Float as i32;

fn value_info(name: &str, dims: &[i64]) -> ValueInfoProto {
    let dim = dims
        .iter()
        .map(|&d| tensor_shape_proto::Dimension {
            value: Some(tensor_shape_proto::dimension::Value::DimValue(d)),
            ..Default::default()
        })
        .collect();
    ValueInfoProto {
        name: name.to_owned(),
        r#type: Some(TypeProto {
            value: Some(type_proto::Value::TensorType(type_proto::Tensor {
                elem_type: FLOAT,
                shape: Some(TensorShapeProto { dim }),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}

fn tensor(name: &str, dims: &[i64], data: Vec<f32>) -> TensorProto {
    TensorProto {
        name: name.to_owned(),
        dims: dims.to_vec(),
        data_type: FLOAT,
        float_data: data,
        ..Default::default()
    }
}

fn node(op: &str, inputs: &[&str], output: &str, attribute: Vec<AttributeProto>) -> NodeProto {
    NodeProto {
        op_type: op.to_owned(),
        name: output.to_owned(),
        input: inputs.iter().map(|s| s.to_string()).collect(),
        output: vec![output.to_owned()],
        attribute,
        ..Default::default()
    }
}

/// ONNX bytes for `1x3xSxS -> Conv1x1(3 -> D) -> GlobalAveragePool -> Flatten`.
/// Row `d` of `weights` mixes the three input channels into feature `d`.
pub fn gap_backbone_onnx(weights: &[[f32; 3]], bias: &[f32], input_size: i64) -> Vec<u8> {
    let d = weights.len() as i64;
    assert_eq!(bias.len(), weights.len());
    let flat: Vec<f32> = weights.iter().flatten().copied().collect();
    let axis = AttributeProto {
        name: "axis".into(),
        r#type: attribute_proto::AttributeType::Int as i32,
        i: 1,
        ..Default::default()
    };
    let graph = GraphProto {
        name: "gap_backbone".into(),
        node: vec![
            node("Conv", &["input", "conv_w", "conv_b"], "conv", vec![]),
            node("GlobalAveragePool", &["conv"], "pooled", vec![]),
            node("Flatten", &["pooled"], "features", vec![axis]),
        ],
        initializer: vec![
            tensor("conv_w", &[d, 3, 1, 1], flat),
            tensor("conv_b", &[d], bias.to_vec()),
        ],
        input: vec![value_info("input", &[1, 3, input_size, input_size])],
        output: vec![value_info("features", &[1, d])],
        ..Default::default()
    };
    let model = ModelProto {
        ir_version: 7,
        producer_name: "pestclf-fixtures".into(),
        opset_import: vec![OperatorSetIdProto {
            domain: String::new(),
            version: 13,
        }],
        graph: Some(graph),
        ..Default::default()
    };
    model.encode_to_vec()
}

/// The default fixture weights: red, green, blue, and a brightness channel.
pub const COLOR_WEIGHTS: [[f32; 3]; 4] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.333, 0.333, 0.333],
];

/// Writes `<dir>/<name>.onnx` and its sidecar. `declared_dim` goes into the
/// sidecar verbatim so mismatches can be provoked.
pub fn write_backbone(
    dir: &Path,
    name: &str,
    weights: &[[f32; 3]],
    declared_dim: usize,
) -> (PathBuf, PathBuf) {
    fs::create_dir_all(dir).unwrap();
    let graph = dir.join(format!("{name}.onnx"));
    let sidecar = dir.join(format!("{name}.json"));
    let bias = vec![0.0; weights.len()];
    fs::write(&graph, gap_backbone_onnx(weights, &bias, 224)).unwrap();
    let side = serde_json::json!({
        "name": name,
        "feature_dim": declared_dim,
        "preprocessing": "scale_0_1",
    });
    fs::write(&sidecar, serde_json::to_string_pretty(&side).unwrap()).unwrap();
    (graph, sidecar)
}

/// A colour-coded backbone with `D = 4`.
pub fn write_color_backbone(dir: &Path) -> (PathBuf, PathBuf) {
    write_backbone(dir, "color-gap", &COLOR_WEIGHTS, COLOR_WEIGHTS.len())
}

/// A noisy image around `base` with a random darker square.
pub fn noisy_image(base: [u8; 3], size: u32, rng: &mut impl Rng) -> RgbImage {
    let (sx, sy) = (rng.random_range(0..size / 2), rng.random_range(0..size / 2));
    RgbImage::from_fn(size, size, |x, y| {
        let shade = if x >= sx && x < sx + size / 4 && y >= sy && y < sy + size / 4 { 40 } else { 0 };
        let mut px = [0u8; 3];
        for c in 0..3 {
            let noise: i32 = rng.random_range(-25..=25);
            px[c] = (i32::from(base[c]) + noise - shade).clamp(0, 255) as u8;
        }
        Rgb(px)
    })
}

/// Writes `root/<class>/img_<i>.png` for every `(class, colour)` pair.
pub fn write_color_dataset(root: &Path, classes: &[(&str, [u8; 3])], per_class: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, color) in classes {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class {
            noisy_image(*color, 32, &mut rng)
                .save(dir.join(format!("img_{i:03}.png")))
                .unwrap();
        }
    }
}

/// Two visually distinct classes, ten images each.
pub fn write_two_class_dataset(root: &Path, seed: u64) {
    write_color_dataset(
        root,
        &[("Aphis gossypii", [200, 60, 50]), ("Myzus persicae", [50, 80, 210])],
        10,
        seed,
    );
}
