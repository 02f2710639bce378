//! Graph wire format. One JSON document holds a node list and the output
//! ids; attrs are per-kind scalars and constants are nested arrays:
//!
//! ```json
//! {"nodes": [
//!    {"id": "x", "op": "Identity", "attrs": {"dims": [1, 3, 8, 8], "layout": "NCHW"}},
//!    {"id": "w", "op": "Constant", "const": [[0.5], [1.5]]},
//!    {"id": "c", "op": "Conv2D", "inputs": ["x", "w"],
//!     "attrs": {"n": 1, "c_in": 3, "c_out": 8, "k_h": 3, "k_w": 3,
//!               "h": 8, "w": 8, "stride": 1, "padding": "SAME"}}
//!  ],
//!  "outputs": ["c"]}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::graph::{
    ConvSpec, Graph, Layout, Node, OperatorSpec, Padding, PoolSpec, TensorSpec,
};
use crate::kernels::Tensor;

#[derive(Serialize, Deserialize)]
struct RawGraph {
    nodes: Vec<RawNode>,
    outputs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawNode {
    id: String,
    op: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    attrs: Map<String, Value>,
    #[serde(rename = "const", default, skip_serializing_if = "Option::is_none")]
    constant: Option<Value>,
}

fn attr_usize(attrs: &Map<String, Value>, id: &str, key: &str) -> Result<usize> {
    attrs
        .get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::malformed("graph json", format!("node '{id}': missing or non-integer attr '{key}'")))
}

fn attr_padding(attrs: &Map<String, Value>, id: &str) -> Result<Padding> {
    match attrs.get("padding").and_then(Value::as_str) {
        Some("SAME") => Ok(Padding::Same),
        Some("VALID") => Ok(Padding::Valid),
        other => Err(Error::malformed(
            "graph json",
            format!("node '{id}': padding must be \"SAME\" or \"VALID\", got {other:?}"),
        )),
    }
}

fn attr_layout(attrs: &Map<String, Value>, id: &str, key: &str) -> Result<Option<Layout>> {
    match attrs.get(key) {
        None => Ok(None),
        Some(Value::String(s)) if s == "NCHW" => Ok(Some(Layout::Nchw)),
        Some(Value::String(s)) if s == "NHWC" => Ok(Some(Layout::Nhwc)),
        Some(v) => Err(Error::malformed(
            "graph json",
            format!("node '{id}': {key} must be \"NCHW\" or \"NHWC\", got {v}"),
        )),
    }
}

fn conv_spec_from_attrs(attrs: &Map<String, Value>, id: &str) -> Result<ConvSpec> {
    Ok(ConvSpec {
        n: attr_usize(attrs, id, "n")?,
        c_in: attr_usize(attrs, id, "c_in")?,
        c_out: attr_usize(attrs, id, "c_out")?,
        k_h: attr_usize(attrs, id, "k_h")?,
        k_w: attr_usize(attrs, id, "k_w")?,
        h: attr_usize(attrs, id, "h")?,
        w: attr_usize(attrs, id, "w")?,
        stride: attr_usize(attrs, id, "stride")?,
        padding: attr_padding(attrs, id)?,
    })
}

/// Dims and flat data of a nested JSON array. Rows at each level must agree
/// in shape.
fn parse_nested(value: &Value, id: &str) -> Result<(Vec<usize>, Vec<f32>)> {
    fn walk(v: &Value, dims: &mut Vec<usize>, depth: usize, out: &mut Vec<f32>, id: &str) -> Result<()> {
        match v {
            Value::Array(items) => {
                if items.is_empty() {
                    return Err(Error::malformed("graph json", format!("node '{id}': empty constant row")));
                }
                if depth == dims.len() {
                    dims.push(items.len());
                } else if dims[depth] != items.len() {
                    return Err(Error::malformed(
                        "graph json",
                        format!("node '{id}': ragged constant (expected {} items, got {})", dims[depth], items.len()),
                    ));
                }
                for item in items {
                    walk(item, dims, depth + 1, out, id)?;
                }
                Ok(())
            }
            Value::Number(n) => {
                if depth != dims.len() {
                    return Err(Error::malformed("graph json", format!("node '{id}': ragged constant nesting")));
                }
                out.push(n.as_f64().unwrap_or(f64::NAN) as f32);
                Ok(())
            }
            other => Err(Error::malformed(
                "graph json",
                format!("node '{id}': constant must contain numbers, got {other}"),
            )),
        }
    }
    let mut dims = Vec::new();
    let mut data = Vec::new();
    walk(value, &mut dims, 0, &mut data, id)?;
    if dims.is_empty() {
        dims.push(1); // bare scalar
    }
    Ok((dims, data))
}

fn nested_from_tensor(t: &Tensor) -> Value {
    fn build(dims: &[usize], data: &[f32]) -> Value {
        if dims.len() == 1 {
            return Value::Array(data.iter().map(|v| serde_json::json!(v)).collect());
        }
        let chunk = data.len() / dims[0];
        Value::Array(
            (0..dims[0])
                .map(|i| build(&dims[1..], &data[i * chunk..(i + 1) * chunk]))
                .collect(),
        )
    }
    build(&t.spec.dims, &t.data)
}

fn node_from_raw(raw: &RawNode) -> Result<Node> {
    let id = &raw.id;
    let attrs = &raw.attrs;
    let op = match raw.op.as_str() {
        "Conv2D" => OperatorSpec::Conv2D(conv_spec_from_attrs(attrs, id)?),
        "FusedConvBiasReLU" => OperatorSpec::FusedConvBiasReLU(conv_spec_from_attrs(attrs, id)?),
        "MatMul" => OperatorSpec::MatMul,
        "BiasAdd" => OperatorSpec::BiasAdd,
        "ReLU" => OperatorSpec::ReLU,
        "Add" => OperatorSpec::Add,
        "Dropout" => OperatorSpec::Dropout,
        "Constant" => OperatorSpec::Constant,
        "MaxPool" => OperatorSpec::MaxPool(PoolSpec {
            k_h: attr_usize(attrs, id, "k_h")?,
            k_w: attr_usize(attrs, id, "k_w")?,
            stride: attr_usize(attrs, id, "stride")?,
            padding: attr_padding(attrs, id)?,
        }),
        "Identity" => {
            let cast = attr_layout(attrs, id, "to_layout")?;
            let spec = match attrs.get("dims") {
                Some(Value::Array(items)) => {
                    let dims: Vec<usize> = items
                        .iter()
                        .map(|v| v.as_u64().map(|d| d as usize))
                        .collect::<Option<_>>()
                        .ok_or_else(|| {
                            Error::malformed("graph json", format!("node '{id}': dims must be integers"))
                        })?;
                    let layout = attr_layout(attrs, id, "layout")?;
                    let layout = if dims.len() == 4 { layout.or(Some(Layout::Nchw)) } else { layout };
                    Some(TensorSpec { dims, layout, dtype: Default::default() })
                }
                Some(v) => {
                    return Err(Error::malformed("graph json", format!("node '{id}': dims must be an array, got {v}")));
                }
                None => None,
            };
            OperatorSpec::Identity { spec, cast_layout: cast }
        }
        other => {
            return Err(Error::malformed("graph json", format!("node '{id}': unknown op '{other}'")));
        }
    };

    let constant = match (&op, &raw.constant) {
        (OperatorSpec::Constant, Some(value)) => {
            let (dims, data) = parse_nested(value, id)?;
            let layout = attr_layout(attrs, id, "layout")?;
            let spec = if dims.len() == 4 {
                TensorSpec { dims, layout: layout.or(Some(Layout::Nchw)), dtype: Default::default() }
            } else {
                TensorSpec { dims, layout: None, dtype: Default::default() }
            };
            Some(Tensor::new(spec, data)?)
        }
        (OperatorSpec::Constant, None) => {
            return Err(Error::malformed("graph json", format!("constant node '{id}' has no \"const\" payload")));
        }
        (_, Some(_)) => {
            return Err(Error::malformed("graph json", format!("non-constant node '{id}' carries a \"const\" payload")));
        }
        (_, None) => None,
    };

    Ok(Node { op, inputs: raw.inputs.clone(), constant })
}

fn raw_from_node(id: &str, node: &Node) -> RawNode {
    let mut attrs = Map::new();
    match &node.op {
        OperatorSpec::Conv2D(cs) | OperatorSpec::FusedConvBiasReLU(cs) => {
            attrs.insert("n".into(), cs.n.into());
            attrs.insert("c_in".into(), cs.c_in.into());
            attrs.insert("c_out".into(), cs.c_out.into());
            attrs.insert("k_h".into(), cs.k_h.into());
            attrs.insert("k_w".into(), cs.k_w.into());
            attrs.insert("h".into(), cs.h.into());
            attrs.insert("w".into(), cs.w.into());
            attrs.insert("stride".into(), cs.stride.into());
            attrs.insert("padding".into(), cs.padding.to_string().into());
        }
        OperatorSpec::MaxPool(ps) => {
            attrs.insert("k_h".into(), ps.k_h.into());
            attrs.insert("k_w".into(), ps.k_w.into());
            attrs.insert("stride".into(), ps.stride.into());
            attrs.insert("padding".into(), ps.padding.to_string().into());
        }
        OperatorSpec::Identity { spec, cast_layout } => {
            if let Some(spec) = spec {
                attrs.insert("dims".into(), spec.dims.clone().into());
                if let Some(layout) = spec.layout {
                    attrs.insert("layout".into(), layout.to_string().into());
                }
            }
            if let Some(layout) = cast_layout {
                attrs.insert("to_layout".into(), layout.to_string().into());
            }
        }
        OperatorSpec::Constant => {
            if let Some(t) = &node.constant {
                if let Some(layout) = t.spec.layout {
                    attrs.insert("layout".into(), layout.to_string().into());
                }
            }
        }
        _ => {}
    }
    RawNode {
        id: id.to_string(),
        op: node.op.kind().to_string(),
        inputs: node.inputs.clone(),
        attrs,
        constant: node.constant.as_ref().map(nested_from_tensor),
    }
}

pub fn graph_from_json(text: &str) -> Result<Graph> {
    let raw: RawGraph =
        serde_json::from_str(text).map_err(|e| Error::malformed("graph json", e))?;
    let mut graph = Graph::new();
    for raw_node in &raw.nodes {
        let node = node_from_raw(raw_node)?;
        if graph.nodes.insert(raw_node.id.clone(), node).is_some() {
            return Err(Error::malformed("graph json", format!("duplicate node id '{}'", raw_node.id)));
        }
    }
    graph.outputs = raw.outputs;
    graph.validate()?;
    Ok(graph)
}

pub fn graph_to_json(graph: &Graph) -> String {
    let raw = RawGraph {
        nodes: graph.nodes.iter().map(|(id, n)| raw_from_node(id, n)).collect(),
        outputs: graph.outputs.clone(),
    };
    serde_json::to_string_pretty(&raw).expect("graph serialization cannot fail")
}

pub fn load_graph(path: &Path) -> Result<Graph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    graph_from_json(&text)
}

pub fn save_graph(graph: &Graph, path: &Path) -> Result<()> {
    std::fs::write(path, graph_to_json(graph)).map_err(|e| Error::io(path.display().to_string(), e))
}
