//! Seeded random graphs, with feeds for every placeholder, shared by the
//! integration suites.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wpt_core::graph::builder::GraphBuilder;
use wpt_core::graph::{ConvSpec, Graph, Layout, NodeId, Padding, PoolSpec, TensorSpec};
use wpt_core::kernels::Tensor;
use wpt_core::Result;

struct Shape {
    c: usize,
    h: usize,
    w: usize,
}

impl Shape {
    fn spec(&self) -> TensorSpec {
        TensorSpec::rank4([1, self.c, self.h, self.w], Layout::Nchw)
    }
}

/// Random chain of 2 to 5 stages over one NCHW input, with occasional side
/// branches (a second placeholder, or a constant subtree the fold pass can
/// collapse). Convs are biased toward the conv+bias+relu shape the fusion
/// pass matches. Every window fits, so the graph always validates.
pub fn random_graph(seed: u64) -> (Graph, BTreeMap<NodeId, Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let mut feeds = BTreeMap::new();

    let mut shape = Shape {
        c: rng.gen_range(1..=3),
        h: rng.gen_range(6..=12),
        w: rng.gen_range(6..=12),
    };
    feeds.insert("x".to_string(), Tensor::random(shape.spec(), &mut rng));
    let mut cur = b.input("x", shape.spec());

    let stages = rng.gen_range(2..=5);
    for s in 0..stages {
        match rng.gen_range(0..10u32) {
            0..=3 => {
                let k = if shape.h >= 3 && shape.w >= 3 && rng.gen_bool(0.7) { 3 } else { 1 };
                let cs = ConvSpec {
                    n: 1,
                    c_in: shape.c,
                    c_out: rng.gen_range(1..=4),
                    k_h: k,
                    k_w: k,
                    h: shape.h,
                    w: shape.w,
                    stride: if shape.h > 4 && rng.gen_bool(0.3) { 2 } else { 1 },
                    padding: if rng.gen_bool(0.7) { Padding::Same } else { Padding::Valid },
                };
                let filter = b.constant(&format!("s{s}_w"), Tensor::random(cs.filter_spec(), &mut rng));
                cur = b.conv2d(&format!("s{s}_conv"), &cur, &filter, cs);
                let (oh, ow) = cs.out_hw().expect("window fits");
                shape = Shape { c: cs.c_out, h: oh, w: ow };
                if rng.gen_bool(0.6) {
                    let bias = b.constant(
                        &format!("s{s}_b"),
                        Tensor::random(TensorSpec::new(vec![shape.c]), &mut rng),
                    );
                    cur = b.bias_add(&format!("s{s}_bias"), &cur, &bias);
                    if rng.gen_bool(0.7) {
                        cur = b.relu(&format!("s{s}_relu"), &cur);
                    }
                }
            }
            4 => {
                let bias = b.constant(
                    &format!("s{s}_b"),
                    Tensor::random(TensorSpec::new(vec![shape.c]), &mut rng),
                );
                cur = b.bias_add(&format!("s{s}_bias"), &cur, &bias);
            }
            5 => cur = b.relu(&format!("s{s}_relu"), &cur),
            6 => {
                if shape.h >= 2 && shape.w >= 2 {
                    let ps = PoolSpec { k_h: 2, k_w: 2, stride: 2, padding: Padding::Valid };
                    cur = b.max_pool(&format!("s{s}_pool"), &cur, ps);
                    shape.h = (shape.h - 2) / 2 + 1;
                    shape.w = (shape.w - 2) / 2 + 1;
                } else {
                    cur = b.relu(&format!("s{s}_relu"), &cur);
                }
            }
            7 => cur = b.dropout(&format!("s{s}_drop"), &cur),
            8 => cur = b.identity(&format!("s{s}_id"), &cur),
            _ => {
                if rng.gen_bool(0.5) {
                    let yid = format!("s{s}_y");
                    feeds.insert(yid.clone(), Tensor::random(shape.spec(), &mut rng));
                    let y = b.input(&yid, shape.spec());
                    cur = b.add(&format!("s{s}_addin"), &cur, &y);
                } else {
                    let ca = b.constant(&format!("s{s}_ca"), Tensor::random(shape.spec(), &mut rng));
                    let cb = b.constant(&format!("s{s}_cb"), Tensor::random(shape.spec(), &mut rng));
                    let sum = b.add(&format!("s{s}_csum"), &ca, &cb);
                    let r = b.relu(&format!("s{s}_crelu"), &sum);
                    cur = b.add(&format!("s{s}_mix"), &cur, &r);
                }
            }
        }
    }

    let graph = b.outputs([&cur]).build().expect("generated graph validates");
    (graph, feeds)
}

/// Largest elementwise difference between two runs' outputs, paired by
/// position in each graph's output list (passes may rename outputs when
/// they splice pass-through nodes).
pub fn paired_output_diff(
    left_graph: &Graph,
    left: &BTreeMap<NodeId, Tensor>,
    right_graph: &Graph,
    right: &BTreeMap<NodeId, Tensor>,
) -> Result<f64> {
    assert_eq!(left_graph.outputs.len(), right_graph.outputs.len());
    let mut worst = 0.0f64;
    for (a, b) in left_graph.outputs.iter().zip(&right_graph.outputs) {
        let d = wpt_core::kernels::max_abs_diff(&left[a], &right[b])?;
        worst = worst.max(d);
    }
    Ok(worst)
}
