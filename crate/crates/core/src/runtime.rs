//! Plan executor: walks an inference plan over concrete tensors, timing
//! every node and dispatching each to its selected implementation (tuned
//! kernel or reference interpreter). Intermediate tensors are dropped as
//! soon as their last consumer has run.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, OperatorSpec};
use crate::interp;
use crate::kernels::tuned::{conv2d_tuned, fused_conv_bias_relu_tuned};
use crate::kernels::Tensor;
use crate::planner::{InferencePlan, PlanNode, StrategySource};
use crate::schedule::ScheduleTemplate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub node_id: NodeId,
    pub op_kind: String,
    pub source: StrategySource,
    pub runtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionOutcome {
    pub outputs: BTreeMap<NodeId, Tensor>,
    /// One entry per executed node, in plan order.
    pub ledger: Vec<LedgerEntry>,
}

fn is_generated(node: &PlanNode) -> bool {
    node.source != StrategySource::ReferenceLibrary
}

fn resolve_template<'a>(
    plan: &InferencePlan,
    templates: &'a [ScheduleTemplate],
) -> Result<Option<&'a ScheduleTemplate>> {
    if !plan.nodes.iter().any(is_generated) {
        return Ok(None);
    }
    templates
        .iter()
        .find(|t| t.template_id() == plan.template_id)
        .map(Some)
        .ok_or_else(|| {
            Error::Malformed {
                what: "plan".into(),
                detail: format!(
                    "tuned nodes reference template '{}', which was not provided",
                    plan.template_id
                ),
            }
        })
}

/// Runs `plan` over `inputs`. Every graph node must be bound by the plan;
/// inputs must match the graph's placeholder specs exactly.
pub fn execute(
    graph: &Graph,
    plan: &InferencePlan,
    templates: &[ScheduleTemplate],
    inputs: &BTreeMap<NodeId, Tensor>,
) -> Result<ExecutionOutcome> {
    graph.validate()?;
    for id in graph.nodes.keys() {
        plan.node(id)?;
    }
    let template = resolve_template(plan, templates)?;

    let mut remaining = graph.consumer_counts();
    let mut store: BTreeMap<NodeId, Tensor> = BTreeMap::new();
    let mut ledger = Vec::with_capacity(plan.nodes.len());

    for pnode in &plan.nodes {
        let node = graph.node(&pnode.id)?;
        let start = Instant::now();
        let value = if node.is_input() {
            let fed = inputs.get(&pnode.id).ok_or_else(|| {
                Error::ShapeMismatch(format!("no tensor supplied for input '{}'", pnode.id))
            })?;
            let expected = match &node.op {
                OperatorSpec::Identity { spec: Some(s), .. } => s,
                _ => unreachable!("is_input implies a placeholder spec"),
            };
            if fed.spec.dims != expected.dims || fed.spec.layout != expected.layout {
                return Err(Error::ShapeMismatch(format!(
                    "input '{}' expects {:?} {:?}, fed {:?} {:?}",
                    pnode.id, expected.dims, expected.layout, fed.spec.dims, fed.spec.layout
                )));
            }
            fed.clone()
        } else if let Some(constant) = &node.constant {
            constant.clone()
        } else if is_generated(pnode) {
            let config = pnode.config.as_ref().ok_or_else(|| Error::Malformed {
                what: "plan".into(),
                detail: format!("generated node '{}' carries no config", pnode.id),
            })?;
            let cs = node.op.conv_spec().ok_or_else(|| Error::Malformed {
                what: "plan".into(),
                detail: format!(
                    "generated implementation bound to untunable {} node '{}'",
                    node.op.kind(),
                    pnode.id
                ),
            })?;
            let tile = template.expect("generated node implies template").tile_config(config)?;
            let args: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|i| store.get(i).expect("plan order computes inputs first"))
                .collect();
            match &node.op {
                OperatorSpec::Conv2D(_) => conv2d_tuned(args[0], args[1], cs, &tile)?,
                OperatorSpec::FusedConvBiasReLU(_) => {
                    fused_conv_bias_relu_tuned(args[0], args[1], args[2], cs, &tile)?
                }
                _ => unreachable!("conv_spec limits dispatch to conv kinds"),
            }
        } else {
            let args: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|i| store.get(i).expect("plan order computes inputs first"))
                .collect();
            interp::eval_node(&node.op, &args)?
        };
        let runtime_ms = (start.elapsed().as_secs_f64() * 1e3).max(f64::MIN_POSITIVE);
        ledger.push(LedgerEntry {
            node_id: pnode.id.clone(),
            op_kind: pnode.op_kind.clone(),
            source: pnode.source,
            runtime_ms,
        });

        store.insert(pnode.id.clone(), value);
        for input in &node.inputs {
            let count = remaining.get_mut(input).expect("known node");
            *count -= 1;
            if *count == 0 {
                store.remove(input);
            }
        }
    }

    let mut outputs = BTreeMap::new();
    for id in &graph.outputs {
        let value = store
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnboundNode(id.clone()))?;
        outputs.insert(id.clone(), value);
    }
    Ok(ExecutionOutcome { outputs, ledger })
}

/// Largest absolute elementwise difference between the plan's outputs and
/// the reference interpreter's, across all declared graph outputs.
pub fn compare_with_reference(
    graph: &Graph,
    plan: &InferencePlan,
    templates: &[ScheduleTemplate],
    inputs: &BTreeMap<NodeId, Tensor>,
) -> Result<f64> {
    let executed = execute(graph, plan, templates, inputs)?;
    let reference = interp::interpret(graph, inputs)?;
    let mut max_diff = 0.0f64;
    for (id, expected) in &reference {
        let got = executed
            .outputs
            .get(id)
            .ok_or_else(|| Error::UnboundNode(id.clone()))?;
        if got.spec.dims != expected.spec.dims {
            return Err(Error::ShapeMismatch(format!(
                "output '{}' dims {:?} vs reference {:?}",
                id, got.spec.dims, expected.spec.dims
            )));
        }
        for (a, b) in got.data.iter().zip(&expected.data) {
            max_diff = max_diff.max((*a as f64 - *b as f64).abs());
        }
    }
    Ok(max_diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::builder::GraphBuilder;
    use crate::graph::{ConvSpec, Layout, Padding, PoolSpec, TensorSpec};
    use crate::planner::{build_plan, Selection};
    use crate::schedule::ScheduleConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reference_selections(graph: &Graph) -> BTreeMap<NodeId, Selection> {
        graph
            .nodes
            .keys()
            .map(|id| {
                (
                    id.clone(),
                    Selection {
                        source: StrategySource::ReferenceLibrary,
                        runtime_ms: 0.1,
                        config: None,
                    },
                )
            })
            .collect()
    }

    fn toy_graph() -> (Graph, BTreeMap<NodeId, Tensor>, NodeId) {
        let cs = ConvSpec {
            n: 1,
            c_in: 2,
            c_out: 4,
            k_h: 3,
            k_w: 3,
            h: 10,
            w: 8,
            stride: 1,
            padding: Padding::Same,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut b = GraphBuilder::new();
        let x = b.input("x", cs.input_spec(Layout::Nchw));
        let w = b.constant("w", Tensor::random(cs.filter_spec(), &mut rng));
        let bias = b.constant("bias", Tensor::random(TensorSpec::new(vec![4]), &mut rng));
        let c = b.conv2d("c", &x, &w, cs);
        let ba = b.bias_add("ba", &c, &bias);
        let r = b.relu("r", &ba);
        let p = b.max_pool("p", &r, PoolSpec { k_h: 2, k_w: 2, stride: 2, padding: Padding::Valid });
        let graph = b.outputs([p.clone()]).build().unwrap();

        let mut inputs = BTreeMap::new();
        inputs.insert(x, Tensor::random(cs.input_spec(Layout::Nchw), &mut rng));
        (graph, inputs, p)
    }

    #[test]
    fn all_reference_plan_matches_interpreter_exactly() {
        let (graph, inputs, out_id) = toy_graph();
        let plan = build_plan(&graph, "", &reference_selections(&graph)).unwrap();
        let outcome = execute(&graph, &plan, &[], &inputs).unwrap();
        let reference = interp::interpret(&graph, &inputs).unwrap();
        assert_eq!(outcome.outputs[&out_id].data, reference[&out_id].data);
        assert_eq!(compare_with_reference(&graph, &plan, &[], &inputs).unwrap(), 0.0);
    }

    #[test]
    fn ledger_has_one_positive_entry_per_node() {
        let (graph, inputs, _) = toy_graph();
        let plan = build_plan(&graph, "", &reference_selections(&graph)).unwrap();
        let outcome = execute(&graph, &plan, &[], &inputs).unwrap();
        assert_eq!(outcome.ledger.len(), graph.nodes.len());
        for entry in &outcome.ledger {
            assert!(entry.runtime_ms > 0.0);
            assert_eq!(entry.source, StrategySource::ReferenceLibrary);
        }
        let ids: Vec<&str> = outcome.ledger.iter().map(|e| e.node_id.as_str()).collect();
        let plan_ids: Vec<&str> = plan.nodes.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, plan_ids);
    }

    #[test]
    fn identity_only_graph_passes_input_through() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", TensorSpec::new(vec![2, 3]));
        let i = b.identity("i", &x);
        let graph = b.outputs([i.clone()]).build().unwrap();
        let plan = build_plan(&graph, "", &reference_selections(&graph)).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut inputs = BTreeMap::new();
        inputs.insert(x, Tensor::random(TensorSpec::new(vec![2, 3]), &mut rng));
        let outcome = execute(&graph, &plan, &[], &inputs).unwrap();
        assert_eq!(outcome.outputs[&i].data, inputs["x"].data);
    }

    #[test]
    fn missing_input_is_a_shape_mismatch() {
        let (graph, _, _) = toy_graph();
        let plan = build_plan(&graph, "", &reference_selections(&graph)).unwrap();
        let err = execute(&graph, &plan, &[], &BTreeMap::new());
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn wrong_input_dims_are_a_shape_mismatch() {
        let (graph, _, _) = toy_graph();
        let plan = build_plan(&graph, "", &reference_selections(&graph)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), Tensor::random(TensorSpec::new(vec![1, 2, 4, 4]), &mut rng));
        let err = execute(&graph, &plan, &[], &inputs);
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn plan_missing_a_node_is_unbound() {
        let (graph, inputs, _) = toy_graph();
        let mut selections = reference_selections(&graph);
        selections.remove("r");
        let err = build_plan(&graph, "", &selections);
        assert!(matches!(err, Err(Error::UnboundNode(id)) if id == "r"));

        // A plan for a different graph misses nodes at execute time too.
        let mut b = GraphBuilder::new();
        let x = b.input("x", TensorSpec::new(vec![1]));
        let other = b.outputs([x]).build().unwrap();
        let plan = build_plan(&other, "", &reference_selections(&other)).unwrap();
        let err = execute(&graph, &plan, &[], &inputs);
        assert!(matches!(err, Err(Error::UnboundNode(_))));
    }

    #[test]
    fn tuned_conv_plan_stays_within_kernel_tolerance() {
        let (graph, inputs, _) = toy_graph();
        let template = ScheduleTemplate::conv_default();
        let mut selections = reference_selections(&graph);
        // T_x=4, T_y=2, T_z=2, tiles 2/2/1, rz 2: exercises the blocked
        // accumulation path rather than the degenerate unit config.
        let tuned = ScheduleConfig::new(vec![4, 2, 2, 2, 2, 1, 2]);
        assert!(template.is_valid(&tuned).unwrap());
        selections.insert(
            "c".to_string(),
            Selection {
                source: StrategySource::GeneratedGenetic,
                runtime_ms: 0.1,
                config: Some(tuned),
            },
        );
        let plan = build_plan(&graph, &template.template_id(), &selections).unwrap();
        let diff = compare_with_reference(&graph, &plan, &[template.clone()], &inputs).unwrap();
        assert!(diff < 1e-4, "tuned conv diverged from reference: {diff}");

        // The same plan without the template it references cannot run.
        let err = execute(&graph, &plan, &[], &inputs);
        assert!(matches!(err, Err(Error::Malformed { .. })));
    }

    #[test]
    fn fused_tuned_plan_stays_within_tolerance() {
        let cs = ConvSpec {
            n: 1,
            c_in: 3,
            c_out: 5,
            k_h: 3,
            k_w: 3,
            h: 9,
            w: 7,
            stride: 2,
            padding: Padding::Same,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut b = GraphBuilder::new();
        let x = b.input("x", cs.input_spec(Layout::Nchw));
        let w = b.constant("w", Tensor::random(cs.filter_spec(), &mut rng));
        let bias = b.constant("bias", Tensor::random(TensorSpec::new(vec![5]), &mut rng));
        let f = b.fused_conv("f", &x, &w, &bias, cs);
        let graph = b.outputs([f]).build().unwrap();

        let template = ScheduleTemplate::conv_default();
        let mut selections = reference_selections(&graph);
        selections.insert(
            "f".to_string(),
            Selection {
                source: StrategySource::GeneratedRl,
                runtime_ms: 0.1,
                config: Some(ScheduleConfig::new(vec![2, 2, 4, 1, 2, 2, 4])),
            },
        );
        let plan = build_plan(&graph, &template.template_id(), &selections).unwrap();
        let mut inputs = BTreeMap::new();
        inputs.insert(x, Tensor::random(cs.input_spec(Layout::Nchw), &mut rng));
        let diff = compare_with_reference(&graph, &plan, &[template], &inputs).unwrap();
        assert!(diff < 1e-4, "fused tuned kernel diverged: {diff}");
    }

    #[test]
    fn execution_is_deterministic() {
        let (graph, inputs, out_id) = toy_graph();
        let plan = build_plan(&graph, "", &reference_selections(&graph)).unwrap();
        let a = execute(&graph, &plan, &[], &inputs).unwrap();
        let b = execute(&graph, &plan, &[], &inputs).unwrap();
        assert_eq!(a.outputs[&out_id].data, b.outputs[&out_id].data);
    }
}
