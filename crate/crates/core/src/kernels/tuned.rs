//! Tiled convolution. The output space (c_out, h, w) is partitioned across a
//! (t_z, t_y, t_x) grid of logical workers; each worker walks its blocks and
//! computes (tile_z, tile_y, tile_x) cells per block. tile_rz splits the
//! channel reduction into chunks that are summed separately, which is the one
//! place the tuned kernel may reassociate floating-point adds. With every
//! parameter at 1 the traversal collapses to the reference loop order and the
//! result is identical bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Layout};

use super::{accumulate_window, Tensor};

pub const MAX_WORKER_PRODUCT: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub t_x: usize,
    pub t_y: usize,
    pub t_z: usize,
    pub tile_x: usize,
    pub tile_y: usize,
    pub tile_z: usize,
    pub tile_rz: usize,
}

impl TileConfig {
    pub fn unit() -> Self {
        TileConfig { t_x: 1, t_y: 1, t_z: 1, tile_x: 1, tile_y: 1, tile_z: 1, tile_rz: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("t_x", self.t_x),
            ("t_y", self.t_y),
            ("t_z", self.t_z),
            ("tile_x", self.tile_x),
            ("tile_y", self.tile_y),
            ("tile_z", self.tile_z),
            ("tile_rz", self.tile_rz),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let workers = self.t_x * self.t_y * self.t_z;
        if workers > MAX_WORKER_PRODUCT {
            return Err(Error::InvalidConfig(format!(
                "worker grid {}x{}x{} = {workers} exceeds {MAX_WORKER_PRODUCT}",
                self.t_x, self.t_y, self.t_z
            )));
        }
        Ok(())
    }

    pub fn worker_count(&self) -> usize {
        self.t_x * self.t_y * self.t_z
    }
}

/// One output cell: channel reduction split into `tile_rz`-sized chunks with
/// a partial sum each. A factor of 1 disables the split and reproduces the
/// reference accumulation exactly.
#[inline]
fn reduce_cell(
    x: &[f32],
    f: &[f32],
    cs: &ConvSpec,
    ni: usize,
    z: usize,
    oh: usize,
    ow: usize,
    tile_rz: usize,
) -> f32 {
    if tile_rz <= 1 {
        return accumulate_window(x, f, cs, ni, z, oh, ow, 0, cs.c_in);
    }
    let mut acc = 0.0f32;
    let mut c0 = 0;
    while c0 < cs.c_in {
        let c1 = (c0 + tile_rz).min(cs.c_in);
        acc += accumulate_window(x, f, cs, ni, z, oh, ow, c0, c1);
        c0 = c1;
    }
    acc
}

struct Geometry {
    out_h: usize,
    out_w: usize,
    blocks_z: usize,
    blocks_y: usize,
    blocks_x: usize,
}

fn geometry(cs: &ConvSpec, cfg: &TileConfig) -> Result<Geometry> {
    let (out_h, out_w) = cs.out_hw()?;
    Ok(Geometry {
        out_h,
        out_w,
        blocks_z: cs.c_out.div_ceil(cfg.t_z * cfg.tile_z),
        blocks_y: out_h.div_ceil(cfg.t_y * cfg.tile_y),
        blocks_x: out_w.div_ceil(cfg.t_x * cfg.tile_x),
    })
}

/// The cells assigned to worker (wz, wy, wx), visited in the block order the
/// degenerate config shares with the reference kernel. Ranges that fall past
/// the output edge are clipped.
fn run_worker<P: Fn(usize, f32) -> f32>(
    x: &[f32],
    f: &[f32],
    cs: &ConvSpec,
    cfg: &TileConfig,
    geo: &Geometry,
    (wz, wy, wx): (usize, usize, usize),
    post: &P,
    out: &mut [f32],
) {
    let plane = geo.out_h * geo.out_w;
    for ni in 0..cs.n {
        let n_base = ni * cs.c_out * plane;
        for bz in 0..geo.blocks_z {
            let z0 = (bz * cfg.t_z + wz) * cfg.tile_z;
            if z0 >= cs.c_out {
                continue;
            }
            let z1 = (z0 + cfg.tile_z).min(cs.c_out);
            for by in 0..geo.blocks_y {
                let y0 = (by * cfg.t_y + wy) * cfg.tile_y;
                if y0 >= geo.out_h {
                    continue;
                }
                let y1 = (y0 + cfg.tile_y).min(geo.out_h);
                for bx in 0..geo.blocks_x {
                    let x0 = (bx * cfg.t_x + wx) * cfg.tile_x;
                    if x0 >= geo.out_w {
                        continue;
                    }
                    let x1 = (x0 + cfg.tile_x).min(geo.out_w);
                    for z in z0..z1 {
                        let z_base = n_base + z * plane;
                        for oh in y0..y1 {
                            let row = z_base + oh * geo.out_w;
                            for ow in x0..x1 {
                                let acc = reduce_cell(x, f, cs, ni, z, oh, ow, cfg.tile_rz);
                                out[row + ow] = post(z, acc);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Raw pointer the worker-pool path sends across threads. Workers write
/// disjoint output cells, so concurrent writes never alias.
struct OutPtr(*mut f32, usize);
unsafe impl Send for OutPtr {}
unsafe impl Sync for OutPtr {}

fn tuned_core<P: Fn(usize, f32) -> f32 + Sync>(
    input: &Tensor,
    filter: &Tensor,
    cs: &ConvSpec,
    cfg: &TileConfig,
    use_worker_threads: bool,
    post: P,
) -> Result<Tensor> {
    cfg.validate()?;
    let layout = super::check_conv_inputs(input, filter, cs)?;
    let canonical;
    let x = if layout == Layout::Nchw {
        input
    } else {
        canonical = input.to_layout(Layout::Nchw)?;
        &canonical
    };
    let geo = geometry(cs, cfg)?;
    let mut out = vec![0.0f32; cs.n * cs.c_out * geo.out_h * geo.out_w];

    let workers: Vec<(usize, usize, usize)> = {
        let mut ids = Vec::with_capacity(cfg.worker_count());
        for wz in 0..cfg.t_z {
            for wy in 0..cfg.t_y {
                for wx in 0..cfg.t_x {
                    ids.push((wz, wy, wx));
                }
            }
        }
        ids
    };

    if use_worker_threads && workers.len() > 1 {
        let shared = OutPtr(out.as_mut_ptr(), out.len());
        let shared = &shared;
        let post = &post;
        let geo = &geo;
        let xdata = &x.data;
        let fdata = &filter.data;
        std::thread::scope(|scope| {
            for &id in &workers {
                scope.spawn(move || {
                    // Each worker owns the cells its (wz, wy, wx) lattice
                    // selects; rebuilding the slice here is sound because no
                    // two workers touch the same index.
                    let out = unsafe { std::slice::from_raw_parts_mut(shared.0, shared.1) };
                    run_worker(xdata, fdata, cs, cfg, geo, id, post, out);
                });
            }
        });
    } else {
        for &id in &workers {
            run_worker(&x.data, &filter.data, cs, cfg, &geo, id, &post, &mut out);
        }
    }

    let result = Tensor { spec: cs.output_spec(Layout::Nchw)?, data: out };
    if layout == Layout::Nchw {
        Ok(result)
    } else {
        result.to_layout(layout)
    }
}

pub fn conv2d_tuned(
    input: &Tensor,
    filter: &Tensor,
    cs: &ConvSpec,
    cfg: &TileConfig,
) -> Result<Tensor> {
    tuned_core(input, filter, cs, cfg, false, |_, acc| acc)
}

pub fn conv2d_tuned_pooled(
    input: &Tensor,
    filter: &Tensor,
    cs: &ConvSpec,
    cfg: &TileConfig,
) -> Result<Tensor> {
    tuned_core(input, filter, cs, cfg, true, |_, acc| acc)
}

pub fn fused_conv_bias_relu_tuned(
    input: &Tensor,
    filter: &Tensor,
    bias: &Tensor,
    cs: &ConvSpec,
    cfg: &TileConfig,
) -> Result<Tensor> {
    if bias.spec.dims != [cs.c_out] {
        return Err(Error::ShapeMismatch(format!(
            "bias dims {:?} do not match [{}]",
            bias.spec.dims, cs.c_out
        )));
    }
    let b = &bias.data;
    tuned_core(input, filter, cs, cfg, false, |z, acc| (acc + b[z]).max(0.0))
}
