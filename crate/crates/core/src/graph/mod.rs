//! Operator-graph IR: immutable DAGs of single-output nodes plus shape
//! inference. Optimization passes (`passes`) return rewritten copies; loading
//! and saving the JSON wire format lives in `json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Tensor;

pub mod builder;
pub mod json;
pub mod passes;

pub type NodeId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    #[serde(rename = "NCHW")]
    Nchw,
    #[serde(rename = "NHWC")]
    Nhwc,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Nchw => "NCHW",
            Layout::Nhwc => "NHWC",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DType {
    #[default]
    #[serde(rename = "f32")]
    F32,
}

/// Static description of a tensor value. `layout` is meaningful only for
/// rank-4 tensors; lower ranks carry `None`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<Layout>,
    #[serde(default)]
    pub dtype: DType,
}

impl TensorSpec {
    pub fn new(dims: Vec<usize>) -> Self {
        let layout = if dims.len() == 4 { Some(Layout::Nchw) } else { None };
        TensorSpec { dims, layout, dtype: DType::F32 }
    }

    pub fn rank4(dims: [usize; 4], layout: Layout) -> Self {
        TensorSpec { dims: dims.to_vec(), layout: Some(layout), dtype: DType::F32 }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "dims must be non-empty and positive, got {:?}",
                self.dims
            )));
        }
        match (self.rank(), self.layout) {
            (4, None) => Err(Error::UnsupportedRank(
                "rank-4 tensor spec is missing a layout".into(),
            )),
            (4, Some(_)) => Ok(()),
            (_, Some(_)) => Err(Error::UnsupportedRank(format!(
                "layout given for rank-{} dims {:?}",
                self.rank(),
                self.dims
            ))),
            _ => Ok(()),
        }
    }

    /// (n, c, h, w) regardless of physical order. Rank-4 only.
    pub fn nchw_dims(&self) -> Result<[usize; 4]> {
        if self.rank() != 4 {
            return Err(Error::UnsupportedRank(format!(
                "expected rank-4 dims, got {:?}",
                self.dims
            )));
        }
        let d = &self.dims;
        Ok(match self.layout.unwrap_or(Layout::Nchw) {
            Layout::Nchw => [d[0], d[1], d[2], d[3]],
            Layout::Nhwc => [d[0], d[3], d[1], d[2]],
        })
    }

    pub fn from_nchw(n: usize, c: usize, h: usize, w: usize, layout: Layout) -> Self {
        let dims = match layout {
            Layout::Nchw => [n, c, h, w],
            Layout::Nhwc => [n, h, w, c],
        };
        TensorSpec::rank4(dims, layout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    #[serde(rename = "SAME")]
    Same,
    #[serde(rename = "VALID")]
    Valid,
}

impl fmt::Display for Padding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Padding::Same => "SAME",
            Padding::Valid => "VALID",
        })
    }
}

/// Output extent of a strided window over `input` cells.
/// SAME: ceil(input / stride). VALID: floor((input - k) / stride) + 1.
pub fn window_out_dim(input: usize, k: usize, stride: usize, padding: Padding) -> Result<usize> {
    if stride == 0 {
        return Err(Error::ShapeMismatch("stride must be positive".into()));
    }
    match padding {
        Padding::Same => Ok(input.div_ceil(stride)),
        Padding::Valid => {
            if k > input {
                return Err(Error::ShapeMismatch(format!(
                    "window {k} exceeds input extent {input} under VALID padding"
                )));
            }
            Ok((input - k) / stride + 1)
        }
    }
}

/// Cells added before the window origin under SAME padding (zero for VALID).
pub fn pad_before(input: usize, k: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            total / 2
        }
    }
}

/// Convolution shape description. Carries the full input geometry so a conv
/// can be tuned and benchmarked without graph context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n", self.n),
            ("c_in", self.c_in),
            ("c_out", self.c_out),
            ("k_h", self.k_h),
            ("k_w", self.k_w),
            ("h", self.h),
            ("w", self.w),
            ("stride", self.stride),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::ShapeMismatch(format!("conv field {name} must be positive")));
            }
        }
        // VALID requires the window to fit; SAME pads so any window fits.
        let _ = self.out_hw()?;
        Ok(())
    }

    pub fn out_hw(&self) -> Result<(usize, usize)> {
        Ok((
            window_out_dim(self.h, self.k_h, self.stride, self.padding)?,
            window_out_dim(self.w, self.k_w, self.stride, self.padding)?,
        ))
    }

    pub fn input_spec(&self, layout: Layout) -> TensorSpec {
        TensorSpec::from_nchw(self.n, self.c_in, self.h, self.w, layout)
    }

    /// Filters are stored [c_out, c_in, k_h, k_w] independent of data layout.
    pub fn filter_spec(&self) -> TensorSpec {
        TensorSpec::rank4([self.c_out, self.c_in, self.k_h, self.k_w], Layout::Nchw)
    }

    pub fn output_spec(&self, layout: Layout) -> Result<TensorSpec> {
        let (oh, ow) = self.out_hw()?;
        Ok(TensorSpec::from_nchw(self.n, self.c_out, oh, ow, layout))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OperatorSpec {
    Conv2D(ConvSpec),
    MatMul,
    BiasAdd,
    ReLU,
    MaxPool(PoolSpec),
    Add,
    Constant,
    /// Three roles, distinguished by structure: with no inputs and a declared
    /// `spec` it is a graph input; with one input and `cast_layout` it
    /// physically permutes to that layout; with one input and neither it is a
    /// pure pass-through.
    Identity {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spec: Option<TensorSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cast_layout: Option<Layout>,
    },
    Dropout,
    FusedConvBiasReLU(ConvSpec),
}

impl OperatorSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            OperatorSpec::Conv2D(_) => "Conv2D",
            OperatorSpec::MatMul => "MatMul",
            OperatorSpec::BiasAdd => "BiasAdd",
            OperatorSpec::ReLU => "ReLU",
            OperatorSpec::MaxPool(_) => "MaxPool",
            OperatorSpec::Add => "Add",
            OperatorSpec::Constant => "Constant",
            OperatorSpec::Identity { .. } => "Identity",
            OperatorSpec::Dropout => "Dropout",
            OperatorSpec::FusedConvBiasReLU(_) => "FusedConvBiasReLU",
        }
    }

    pub fn conv_spec(&self) -> Option<&ConvSpec> {
        match self {
            OperatorSpec::Conv2D(cs) | OperatorSpec::FusedConvBiasReLU(cs) => Some(cs),
            _ => None,
        }
    }

    fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            OperatorSpec::Conv2D(_) => 2..=2,
            OperatorSpec::MatMul | OperatorSpec::BiasAdd | OperatorSpec::Add => 2..=2,
            OperatorSpec::ReLU | OperatorSpec::MaxPool(_) | OperatorSpec::Dropout => 1..=1,
            OperatorSpec::Constant => 0..=0,
            OperatorSpec::Identity { spec, .. } => {
                if spec.is_some() {
                    0..=0
                } else {
                    1..=1
                }
            }
            OperatorSpec::FusedConvBiasReLU(_) => 3..=3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub op: OperatorSpec,
    #[serde(default)]
    pub inputs: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<Tensor>,
}

impl Node {
    pub fn is_input(&self) -> bool {
        matches!(&self.op, OperatorSpec::Identity { spec: Some(_), .. }) && self.inputs.is_empty()
    }

    pub fn is_layout_cast(&self) -> bool {
        matches!(&self.op, OperatorSpec::Identity { cast_layout: Some(_), .. })
            && self.inputs.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Graph {
    pub nodes: BTreeMap<NodeId, Node>,
    pub outputs: Vec<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node(&self, id: &str) -> Result<&Node> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::InvalidGraph(format!("unknown node '{id}'")))
    }

    /// Graph input nodes (declared placeholders), in id order.
    pub fn input_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.is_input())
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.outputs.is_empty() {
            return Err(Error::InvalidGraph("graph has no outputs".into()));
        }
        for out in &self.outputs {
            if !self.nodes.contains_key(out) {
                return Err(Error::InvalidGraph(format!("output '{out}' is not a node")));
            }
        }
        for (id, node) in &self.nodes {
            if id.is_empty() {
                return Err(Error::InvalidGraph("empty node id".into()));
            }
            for input in &node.inputs {
                if !self.nodes.contains_key(input) {
                    return Err(Error::InvalidGraph(format!(
                        "node '{id}' references missing input '{input}'"
                    )));
                }
            }
            let arity = node.op.arity();
            if !arity.contains(&node.inputs.len()) {
                return Err(Error::InvalidGraph(format!(
                    "node '{id}' ({}) has {} inputs, expected {:?}",
                    node.op.kind(),
                    node.inputs.len(),
                    arity
                )));
            }
            match &node.op {
                OperatorSpec::Constant => {
                    if node.constant.is_none() {
                        return Err(Error::InvalidGraph(format!(
                            "constant node '{id}' has no payload"
                        )));
                    }
                }
                OperatorSpec::Conv2D(cs) | OperatorSpec::FusedConvBiasReLU(cs) => {
                    cs.validate()?;
                }
                OperatorSpec::Identity { spec, cast_layout } => {
                    if let Some(spec) = spec {
                        spec.validate()?;
                    }
                    if spec.is_some() && cast_layout.is_some() {
                        return Err(Error::InvalidGraph(format!(
                            "identity node '{id}' declares both an input spec and a cast"
                        )));
                    }
                }
                _ => {}
            }
            if node.constant.is_some() && !matches!(node.op, OperatorSpec::Constant) {
                return Err(Error::InvalidGraph(format!(
                    "non-constant node '{id}' carries a payload"
                )));
            }
        }
        self.topo_order()?;
        Ok(())
    }

    /// Deterministic topological order: among ready nodes, smallest id first.
    pub fn topo_order(&self) -> Result<Vec<NodeId>> {
        let mut consumers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        let mut pending: BTreeMap<&str, usize> = BTreeMap::new();
        for (id, node) in &self.nodes {
            pending.insert(id, node.inputs.len());
            for input in &node.inputs {
                consumers.entry(input).or_default().push(id);
            }
        }
        let mut ready: BTreeSet<&str> = pending
            .iter()
            .filter(|(_, &deg)| deg == 0)
            .map(|(&id, _)| id)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(&id) = ready.iter().next() {
            ready.remove(id);
            order.push(id.to_string());
            if let Some(users) = consumers.get(id) {
                for &user in users {
                    let deg = pending.get_mut(user).unwrap();
                    *deg -= 1;
                    if *deg == 0 {
                        ready.insert(user);
                    }
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(Error::InvalidGraph("graph contains a cycle".into()));
        }
        Ok(order)
    }

    /// Number of consumers per node, counting each use and each appearance in
    /// the output list.
    pub fn consumer_counts(&self) -> BTreeMap<NodeId, usize> {
        let mut counts: BTreeMap<NodeId, usize> = self.nodes.keys().map(|k| (k.clone(), 0)).collect();
        for node in self.nodes.values() {
            for input in &node.inputs {
                *counts.get_mut(input).unwrap() += 1;
            }
        }
        for out in &self.outputs {
            *counts.get_mut(out).unwrap() += 1;
        }
        counts
    }

    /// Infer the output spec of every node. Fails on rank or dimension
    /// mismatches at the offending node.
    pub fn infer_shapes(&self) -> Result<BTreeMap<NodeId, TensorSpec>> {
        let order = self.topo_order()?;
        let mut specs: BTreeMap<NodeId, TensorSpec> = BTreeMap::new();
        for id in &order {
            let node = &self.nodes[id];
            let input_specs: Vec<&TensorSpec> =
                node.inputs.iter().map(|i| &specs[i]).collect();
            let spec = infer_node_spec(id, node, &input_specs)?;
            specs.insert(id.clone(), spec);
        }
        Ok(specs)
    }
}

pub fn infer_node_spec(id: &str, node: &Node, inputs: &[&TensorSpec]) -> Result<TensorSpec> {
    let mismatch = |detail: String| Error::ShapeMismatch(format!("node '{id}': {detail}"));
    match &node.op {
        OperatorSpec::Constant => {
            let t = node
                .constant
                .as_ref()
                .ok_or_else(|| Error::InvalidGraph(format!("constant '{id}' has no payload")))?;
            Ok(t.spec.clone())
        }
        OperatorSpec::Identity { spec: Some(spec), .. } => {
            spec.validate()?;
            Ok(spec.clone())
        }
        OperatorSpec::Identity { spec: None, cast_layout } => {
            let input = inputs[0];
            match cast_layout {
                None => Ok(input.clone()),
                Some(target) => {
                    if input.rank() != 4 {
                        return Err(Error::UnsupportedRank(format!(
                            "node '{id}': cannot cast rank-{} tensor {:?} to {target}",
                            input.rank(),
                            input.dims
                        )));
                    }
                    let [n, c, h, w] = input.nchw_dims()?;
                    Ok(TensorSpec::from_nchw(n, c, h, w, *target))
                }
            }
        }
        OperatorSpec::Dropout | OperatorSpec::ReLU => Ok(inputs[0].clone()),
        OperatorSpec::Conv2D(cs) | OperatorSpec::FusedConvBiasReLU(cs) => {
            let data = inputs[0];
            if data.rank() != 4 {
                return Err(mismatch(format!("conv input must be rank-4, got {:?}", data.dims)));
            }
            let layout = data.layout.unwrap_or(Layout::Nchw);
            let expect = cs.input_spec(layout);
            if data.dims != expect.dims {
                return Err(mismatch(format!(
                    "conv input dims {:?} do not match spec {:?} ({layout})",
                    data.dims, expect.dims
                )));
            }
            let filter = inputs[1];
            let expect_f = cs.filter_spec();
            if filter.dims != expect_f.dims {
                return Err(mismatch(format!(
                    "filter dims {:?} do not match {:?}",
                    filter.dims, expect_f.dims
                )));
            }
            if let OperatorSpec::FusedConvBiasReLU(_) = &node.op {
                let bias = inputs[2];
                if bias.dims != [cs.c_out] {
                    return Err(mismatch(format!(
                        "bias dims {:?} do not match [{}]",
                        bias.dims, cs.c_out
                    )));
                }
            }
            cs.output_spec(layout)
        }
        OperatorSpec::BiasAdd => {
            let data = inputs[0];
            let bias = inputs[1];
            if bias.rank() != 1 {
                return Err(mismatch(format!("bias must be rank-1, got {:?}", bias.dims)));
            }
            let channels = match data.rank() {
                4 => data.nchw_dims()?[1],
                2 => data.dims[1],
                r => {
                    return Err(mismatch(format!("bias_add input must be rank-2 or rank-4, got rank-{r}")));
                }
            };
            if bias.dims[0] != channels {
                return Err(mismatch(format!(
                    "bias length {} does not match {} channels",
                    bias.dims[0], channels
                )));
            }
            Ok(data.clone())
        }
        OperatorSpec::MaxPool(ps) => {
            let data = inputs[0];
            if data.rank() != 4 {
                return Err(mismatch(format!("pool input must be rank-4, got {:?}", data.dims)));
            }
            let [n, c, h, w] = data.nchw_dims()?;
            let oh = window_out_dim(h, ps.k_h, ps.stride, ps.padding)
                .map_err(|e| mismatch(e.to_string()))?;
            let ow = window_out_dim(w, ps.k_w, ps.stride, ps.padding)
                .map_err(|e| mismatch(e.to_string()))?;
            Ok(TensorSpec::from_nchw(n, c, oh, ow, data.layout.unwrap_or(Layout::Nchw)))
        }
        OperatorSpec::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.dims != b.dims || a.layout != b.layout {
                return Err(mismatch(format!(
                    "add operands disagree: {:?} ({:?}) vs {:?} ({:?})",
                    a.dims, a.layout, b.dims, b.layout
                )));
            }
            Ok(a.clone())
        }
        OperatorSpec::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            // Rank-4 left operands are flattened to (n, rest) in their stored
            // physical order, matching how the kernel reads the buffer.
            let (rows, inner) = match a.rank() {
                2 => (a.dims[0], a.dims[1]),
                4 => (a.dims[0], a.dims[1] * a.dims[2] * a.dims[3]),
                r => return Err(mismatch(format!("matmul lhs must be rank-2 or rank-4, got rank-{r}"))),
            };
            if b.rank() != 2 {
                return Err(mismatch(format!("matmul rhs must be rank-2, got {:?}", b.dims)));
            }
            if b.dims[0] != inner {
                return Err(mismatch(format!(
                    "matmul inner dims disagree: lhs {} vs rhs {}",
                    inner, b.dims[0]
                )));
            }
            Ok(TensorSpec::new(vec![rows, b.dims[1]]))
        }
    }
}

/// Stable textual identity of an operator instance, used for cache keys,
/// logs, and cost-model seeding. Shape-carrying ops are self-describing;
/// the rest are qualified by their input dims.
pub fn op_signature(op: &OperatorSpec, input_specs: &[&TensorSpec]) -> String {
    match op {
        OperatorSpec::Conv2D(cs) | OperatorSpec::FusedConvBiasReLU(cs) => format!(
            "{}(n={},c_in={},c_out={},k={}x{},h={},w={},stride={},padding={})",
            op.kind(),
            cs.n, cs.c_in, cs.c_out, cs.k_h, cs.k_w, cs.h, cs.w, cs.stride, cs.padding
        ),
        OperatorSpec::MaxPool(ps) => {
            let dims = input_specs.first().map(|s| dims_str(&s.dims)).unwrap_or_default();
            format!("MaxPool(k={}x{},stride={},padding={})[{}]", ps.k_h, ps.k_w, ps.stride, ps.padding, dims)
        }
        _ => {
            let joined: Vec<String> = input_specs.iter().map(|s| dims_str(&s.dims)).collect();
            format!("{}[{}]", op.kind(), joined.join(";"))
        }
    }
}

fn dims_str(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}
