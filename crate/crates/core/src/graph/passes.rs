//! Graph rewrites: constant folding, operator fusion, and layout
//! transformation. Every pass preserves the computed outputs; outputs
//! correspond positionally afterwards (layout conversion may replace an
//! output id with a cast node's id).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Layout, Node, NodeId, OperatorSpec};
use crate::interp;
use crate::kernels::Tensor;

/// Evaluates nodes whose inputs are all constants and replaces them with
/// `Constant` nodes in place (same id), then prunes nodes no longer
/// reachable from the outputs. Input placeholders are never folded or
/// pruned.
pub fn constant_fold(graph: &Graph) -> Result<Graph> {
    let mut g = graph.clone();
    loop {
        let mut changed = false;
        for id in g.topo_order()? {
            let node = g.node(&id)?;
            if node.inputs.is_empty() || node.constant.is_some() {
                continue;
            }
            let args: Option<Vec<&Tensor>> =
                node.inputs.iter().map(|i| g.nodes[i].constant.as_ref()).collect();
            let Some(args) = args else { continue };
            let value = interp::eval_node(&node.op, &args)?;
            let node = g.nodes.get_mut(&id).expect("id from iteration");
            node.op = OperatorSpec::Constant;
            node.inputs.clear();
            node.constant = Some(value);
            changed = true;
        }
        if !changed {
            break;
        }
    }
    prune_unreachable(&mut g);
    g.validate()?;
    Ok(g)
}

/// Splices out single-input pass-through nodes (pure `Identity`, and
/// `Dropout`, which is the identity at inference time), then collapses
/// `Conv2D -> BiasAdd -> ReLU` chains into `FusedConvBiasReLU`. A chain
/// only fuses when the intermediate results have no other consumer; the
/// fused node takes the `ReLU` node's id so downstream references hold.
pub fn fuse_operators(graph: &Graph) -> Result<Graph> {
    let mut g = graph.clone();
    splice(&mut g, |node| {
        matches!(node.op, OperatorSpec::Identity { spec: None, cast_layout: None })
            || matches!(node.op, OperatorSpec::Dropout)
    });

    let counts = g.consumer_counts();
    struct Fusion {
        relu: NodeId,
        bias_add: NodeId,
        conv: NodeId,
        inputs: Vec<NodeId>,
        spec: crate::graph::ConvSpec,
    }
    let mut fusions = Vec::new();
    for (id, node) in &g.nodes {
        if !matches!(node.op, OperatorSpec::ReLU) {
            continue;
        }
        let ba_id = &node.inputs[0];
        let ba = &g.nodes[ba_id];
        if !matches!(ba.op, OperatorSpec::BiasAdd) || counts[ba_id] != 1 {
            continue;
        }
        let conv_id = &ba.inputs[0];
        let conv = &g.nodes[conv_id];
        let OperatorSpec::Conv2D(cs) = &conv.op else { continue };
        if counts[conv_id] != 1 {
            continue;
        }
        fusions.push(Fusion {
            relu: id.clone(),
            bias_add: ba_id.clone(),
            conv: conv_id.clone(),
            inputs: vec![conv.inputs[0].clone(), conv.inputs[1].clone(), ba.inputs[1].clone()],
            spec: *cs,
        });
    }
    for f in fusions {
        let node = g.nodes.get_mut(&f.relu).expect("fusion root exists");
        node.op = OperatorSpec::FusedConvBiasReLU(f.spec);
        node.inputs = f.inputs;
        g.nodes.remove(&f.bias_add);
        g.nodes.remove(&f.conv);
    }
    g.validate()?;
    Ok(g)
}

/// Operator input slots whose physical layout must not change: weights
/// (kernel code expects canonical filter order) and anything flattened in
/// stored order.
fn is_frozen_position(op: &OperatorSpec, idx: usize) -> bool {
    match op {
        OperatorSpec::Conv2D(_) => idx == 1,
        OperatorSpec::FusedConvBiasReLU(_) => idx >= 1,
        OperatorSpec::BiasAdd => idx == 1,
        // Flattening a rank-4 operand reads physical order, so both sides
        // keep whatever layout the graph originally gave them.
        OperatorSpec::MatMul => true,
        _ => false,
    }
}

/// Rewrites the graph so rank-4 activations flow in `target` layout:
/// existing layout casts are spliced out, movable rank-4 constants are
/// permuted in storage, and casts are inserted after input placeholders,
/// before layout-frozen positions, and before outputs so the external
/// contract (placeholder specs, output layouts) is unchanged. Applying the
/// pass twice yields the same graph as applying it once.
pub fn transform_layout(graph: &Graph, target: Layout) -> Result<Graph> {
    let original = graph.infer_shapes()?;

    // Layouts the original graph delivered to frozen positions and outputs.
    let mut frozen_req: BTreeMap<(NodeId, usize), Layout> = BTreeMap::new();
    for (id, node) in &graph.nodes {
        for (idx, input) in node.inputs.iter().enumerate() {
            if is_frozen_position(&node.op, idx) {
                if let Some(layout) = original[input].layout {
                    frozen_req.insert((id.clone(), idx), layout);
                }
            }
        }
    }
    let out_req: Vec<Option<Layout>> =
        graph.outputs.iter().map(|o| original[o].layout).collect();

    let mut g = graph.clone();
    splice(&mut g, Node::is_layout_cast);

    // A constant moves to `target` only when nothing reads its physical
    // order: every use is a movable data position and it is not itself an
    // output.
    let movable: Vec<NodeId> = g
        .nodes
        .iter()
        .filter(|(id, node)| {
            node.constant.as_ref().map_or(false, |t| t.spec.rank() == 4)
                && !g.outputs.contains(id)
                && g.nodes.values().all(|n| {
                    n.inputs
                        .iter()
                        .enumerate()
                        .all(|(idx, input)| input != *id || !is_frozen_position(&n.op, idx))
                })
        })
        .map(|(id, _)| id.clone())
        .collect();
    for id in movable {
        let node = g.nodes.get_mut(&id).expect("id from iteration");
        let t = node.constant.take().expect("movable implies constant");
        node.constant = Some(t.to_layout(target)?);
    }

    // Layout each producer now yields: placeholders and constants keep what
    // they store; every computed rank-4 value comes out in `target` because
    // its data inputs are cast below.
    let provided = |g: &Graph, id: &NodeId| -> Option<Layout> {
        let node = &g.nodes[id];
        match &node.op {
            OperatorSpec::Identity { spec: Some(s), .. } if node.inputs.is_empty() => s.layout,
            OperatorSpec::Constant => node.constant.as_ref().expect("validated").spec.layout,
            _ => original.get(id).and_then(|s| if s.rank() == 4 { Some(target) } else { None }),
        }
    };

    let mut rewires: Vec<(NodeId, usize, NodeId)> = Vec::new();
    let mut casts: BTreeMap<NodeId, Node> = BTreeMap::new();
    let cast_to = |casts: &mut BTreeMap<NodeId, Node>, producer: &NodeId, layout: Layout| {
        let id = format!("{producer}__to_{layout}");
        casts.entry(id.clone()).or_insert_with(|| Node {
            op: OperatorSpec::Identity { spec: None, cast_layout: Some(layout) },
            inputs: vec![producer.clone()],
            constant: None,
        });
        id
    };
    for (cid, node) in &g.nodes {
        for (idx, pid) in node.inputs.iter().enumerate() {
            let prov = provided(&g, pid);
            let req = if is_frozen_position(&node.op, idx) {
                frozen_req.get(&(cid.clone(), idx)).copied()
            } else {
                prov.map(|_| target)
            };
            if let (Some(p), Some(r)) = (prov, req) {
                if p != r {
                    let cast_id = cast_to(&mut casts, pid, r);
                    rewires.push((cid.clone(), idx, cast_id));
                }
            }
        }
    }
    for i in 0..g.outputs.len() {
        let oid = g.outputs[i].clone();
        if let (Some(p), Some(r)) = (provided(&g, &oid), out_req[i]) {
            if p != r {
                g.outputs[i] = cast_to(&mut casts, &oid, r);
            }
        }
    }
    for (cid, idx, new_input) in rewires {
        g.nodes.get_mut(&cid).expect("consumer exists").inputs[idx] = new_input;
    }
    for (id, node) in casts {
        if g.nodes.insert(id.clone(), node).is_some() {
            return Err(Error::InvalidGraph(format!(
                "layout pass needs node id '{id}' but the graph already uses it"
            )));
        }
    }
    g.validate()?;
    g.infer_shapes()?;
    Ok(g)
}

/// Removes every node matching `doomed`, rewiring consumers and the output
/// list to the removed node's single input. Repeats until none remain, so
/// chains collapse.
fn splice(g: &mut Graph, doomed: impl Fn(&Node) -> bool) {
    loop {
        let Some((id, src)) = g
            .nodes
            .iter()
            .find(|(_, n)| n.inputs.len() == 1 && doomed(n))
            .map(|(id, n)| (id.clone(), n.inputs[0].clone()))
        else {
            break;
        };
        g.nodes.remove(&id);
        for node in g.nodes.values_mut() {
            for input in &mut node.inputs {
                if *input == id {
                    *input = src.clone();
                }
            }
        }
        for output in &mut g.outputs {
            if *output == id {
                *output = src.clone();
            }
        }
    }
}

fn prune_unreachable(g: &mut Graph) {
    let mut live: Vec<NodeId> = g.outputs.clone();
    let mut seen: std::collections::BTreeSet<NodeId> = live.iter().cloned().collect();
    while let Some(id) = live.pop() {
        if let Some(node) = g.nodes.get(&id) {
            for input in &node.inputs {
                if seen.insert(input.clone()) {
                    live.push(input.clone());
                }
            }
        }
    }
    g.nodes.retain(|id, node| seen.contains(id) || node.is_input());
}
