//! Reference interpreter. Every consumer that needs ground-truth values
//! (constant folding, pass-equivalence checks, the runtime's reference
//! dispatch) routes through [`eval_node`], so they agree bit for bit.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, OperatorSpec};
use crate::kernels::{self, Tensor};

/// Applies one operator to already-computed input tensors. `Constant` and
/// input placeholders have no computation and are rejected here; callers
/// resolve them from the node payload or the feed map.
pub fn eval_node(op: &OperatorSpec, inputs: &[&Tensor]) -> Result<Tensor> {
    let arg = |i: usize| -> Result<&Tensor> {
        inputs.get(i).copied().ok_or_else(|| {
            Error::InvalidGraph(format!("{} expects at least {} inputs, got {}", op.kind(), i + 1, inputs.len()))
        })
    };
    match op {
        OperatorSpec::Conv2D(cs) => kernels::conv2d_reference(arg(0)?, arg(1)?, cs),
        OperatorSpec::FusedConvBiasReLU(cs) => {
            kernels::fused_conv_bias_relu(arg(0)?, arg(1)?, arg(2)?, cs)
        }
        OperatorSpec::MatMul => kernels::matmul(arg(0)?, arg(1)?),
        OperatorSpec::BiasAdd => kernels::bias_add(arg(0)?, arg(1)?),
        OperatorSpec::ReLU => Ok(kernels::relu(arg(0)?)),
        OperatorSpec::MaxPool(ps) => kernels::max_pool(arg(0)?, ps),
        OperatorSpec::Add => kernels::add(arg(0)?, arg(1)?),
        OperatorSpec::Identity { cast_layout: Some(layout), .. } => arg(0)?.to_layout(*layout),
        OperatorSpec::Identity { spec: Some(_), .. } => Err(Error::InvalidGraph(
            "input placeholder has no computation; feed it a tensor".into(),
        )),
        OperatorSpec::Identity { .. } => Ok(arg(0)?.clone()),
        // Inference-time dropout is the identity.
        OperatorSpec::Dropout => Ok(arg(0)?.clone()),
        OperatorSpec::Constant => Err(Error::InvalidGraph(
            "constant nodes carry their value; nothing to evaluate".into(),
        )),
    }
}

/// Evaluates every node reachable in `graph`, returning all node values.
pub fn eval_all(graph: &Graph, feeds: &BTreeMap<NodeId, Tensor>) -> Result<BTreeMap<NodeId, Tensor>> {
    let order = graph.topo_order()?;
    let mut values: BTreeMap<NodeId, Tensor> = BTreeMap::new();
    for id in &order {
        let node = graph.node(id)?;
        let value = if node.is_input() {
            let fed = feeds.get(id).ok_or_else(|| {
                Error::InvalidParams(format!("no tensor fed for graph input '{id}'"))
            })?;
            let expected = match &node.op {
                OperatorSpec::Identity { spec: Some(s), .. } => s,
                _ => unreachable!("is_input implies a placeholder spec"),
            };
            if fed.spec.dims != expected.dims {
                return Err(Error::ShapeMismatch(format!(
                    "input '{id}' expects dims {:?}, fed {:?}",
                    expected.dims, fed.spec.dims
                )));
            }
            if fed.spec.layout != expected.layout {
                return Err(Error::ShapeMismatch(format!(
                    "input '{id}' expects layout {:?}, fed {:?}",
                    expected.layout, fed.spec.layout
                )));
            }
            fed.clone()
        } else if let Some(constant) = &node.constant {
            constant.clone()
        } else {
            let args: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|input| values.get(input).expect("topo order evaluates inputs first"))
                .collect();
            eval_node(&node.op, &args)?
        };
        values.insert(id.clone(), value);
    }
    Ok(values)
}

/// Evaluates `graph` and returns only the declared outputs.
pub fn interpret(graph: &Graph, feeds: &BTreeMap<NodeId, Tensor>) -> Result<BTreeMap<NodeId, Tensor>> {
    let mut values = eval_all(graph, feeds)?;
    let mut outputs = BTreeMap::new();
    for id in &graph.outputs {
        let value = values
            .remove(id)
            .or_else(|| outputs.get(id).cloned())
            .ok_or_else(|| Error::UnboundNode(id.clone()))?;
        outputs.insert(id.clone(), value);
    }
    Ok(outputs)
}
