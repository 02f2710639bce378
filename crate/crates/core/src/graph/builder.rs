//! Programmatic graph construction. Mostly a convenience for tests and
//! embedders; the JSON loader is the primary ingestion path.

use super::{ConvSpec, Graph, Node, NodeId, Layout, OperatorSpec, PoolSpec, TensorSpec};
use crate::error::Result;
use crate::kernels::Tensor;

#[derive(Default)]
pub struct GraphBuilder {
    graph: Graph,
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder::default()
    }

    fn push(&mut self, id: &str, op: OperatorSpec, inputs: &[&str], constant: Option<Tensor>) -> NodeId {
        let node = Node {
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            constant,
        };
        let prev = self.graph.nodes.insert(id.to_string(), node);
        assert!(prev.is_none(), "duplicate node id '{id}'");
        id.to_string()
    }

    pub fn input(&mut self, id: &str, spec: TensorSpec) -> NodeId {
        self.push(id, OperatorSpec::Identity { spec: Some(spec), cast_layout: None }, &[], None)
    }

    pub fn constant(&mut self, id: &str, tensor: Tensor) -> NodeId {
        self.push(id, OperatorSpec::Constant, &[], Some(tensor))
    }

    pub fn zero_constant(&mut self, id: &str, spec: TensorSpec) -> NodeId {
        self.constant(id, Tensor::zeros(spec))
    }

    pub fn conv2d(&mut self, id: &str, data: &str, filter: &str, spec: ConvSpec) -> NodeId {
        self.push(id, OperatorSpec::Conv2D(spec), &[data, filter], None)
    }

    pub fn fused_conv(&mut self, id: &str, data: &str, filter: &str, bias: &str, spec: ConvSpec) -> NodeId {
        self.push(id, OperatorSpec::FusedConvBiasReLU(spec), &[data, filter, bias], None)
    }

    pub fn bias_add(&mut self, id: &str, data: &str, bias: &str) -> NodeId {
        self.push(id, OperatorSpec::BiasAdd, &[data, bias], None)
    }

    pub fn relu(&mut self, id: &str, data: &str) -> NodeId {
        self.push(id, OperatorSpec::ReLU, &[data], None)
    }

    pub fn dropout(&mut self, id: &str, data: &str) -> NodeId {
        self.push(id, OperatorSpec::Dropout, &[data], None)
    }

    pub fn identity(&mut self, id: &str, data: &str) -> NodeId {
        self.push(id, OperatorSpec::Identity { spec: None, cast_layout: None }, &[data], None)
    }

    pub fn layout_cast(&mut self, id: &str, data: &str, layout: Layout) -> NodeId {
        self.push(id, OperatorSpec::Identity { spec: None, cast_layout: Some(layout) }, &[data], None)
    }

    pub fn max_pool(&mut self, id: &str, data: &str, spec: PoolSpec) -> NodeId {
        self.push(id, OperatorSpec::MaxPool(spec), &[data], None)
    }

    pub fn add(&mut self, id: &str, a: &str, b: &str) -> NodeId {
        self.push(id, OperatorSpec::Add, &[a, b], None)
    }

    pub fn matmul(&mut self, id: &str, a: &str, b: &str) -> NodeId {
        self.push(id, OperatorSpec::MatMul, &[a, b], None)
    }

    pub fn outputs<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.graph.outputs = ids.into_iter().map(|s| s.as_ref().to_string()).collect();
        self
    }

    pub fn build(self) -> Result<Graph> {
        self.graph.validate()?;
        Ok(self.graph)
    }
}
