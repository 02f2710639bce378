//! Two-headed MLP (policy logits + state value) with hand-rolled batched
//! forward/backward. Math runs in f64 so gradient checks can hold tight
//! tolerances; checkpoints store f32. Dropout is inverted (mask divides by
//! the keep probability), active only when the caller passes a dropout
//! rng.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SELU_LAMBDA: f64 = 1.0507009873554804934193349852946;
pub const SELU_ALPHA: f64 = 1.6732632423543772848170429916717;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Selu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA * z
                } else {
                    SELU_LAMBDA * SELU_ALPHA * (z.exp() - 1.0)
                }
            }
        }
    }

    /// Derivative expressed through the activation output, so the forward
    /// cache does not need pre-activations.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Selu => {
                if a > 0.0 {
                    SELU_LAMBDA
                } else {
                    a + SELU_LAMBDA * SELU_ALPHA
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<(usize, Activation)>,
    pub policy_dim: usize,
    /// Probability a unit survives dropout.
    pub keep_prob: f64,
    /// Hidden-layer index whose activation gets dropout; None disables it.
    pub dropout_after: Option<usize>,
}

impl MlpSpec {
    /// Default policy network: 512-1024-1024-512 trunk, tanh then selu
    /// pairs, dropout after the last hidden layer.
    pub fn policy_default(input_dim: usize, policy_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![
                (512, Activation::Tanh),
                (1024, Activation::Tanh),
                (1024, Activation::Selu),
                (512, Activation::Selu),
            ],
            policy_dim,
            keep_prob: 0.15,
            dropout_after: Some(3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.policy_dim == 0 || self.hidden.is_empty() {
            return Err(Error::InvalidParams("network needs input, hidden, and policy dims".into()));
        }
        if self.hidden.iter().any(|(d, _)| *d == 0) {
            return Err(Error::InvalidParams("hidden layer of width 0".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::InvalidParams(format!("keep_prob {} outside (0, 1]", self.keep_prob)));
        }
        if let Some(i) = self.dropout_after {
            if i >= self.hidden.len() {
                return Err(Error::InvalidParams(format!(
                    "dropout after layer {i} but only {} hidden layers exist",
                    self.hidden.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    w: Vec<f64>,
    b: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    fn xavier(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.gen_range(-scale..scale)).collect();
        Self { w, b: vec![0.0; out_dim], in_dim, out_dim }
    }

    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { w: vec![0.0; in_dim * out_dim], b: vec![0.0; out_dim], in_dim, out_dim }
    }

    /// y[b*out + o] = w[o] . x[b] + b[o]
    fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut out = vec![0.0; batch * self.out_dim];
        for bi in 0..batch {
            let xrow = &x[bi * self.in_dim..(bi + 1) * self.in_dim];
            let orow = &mut out[bi * self.out_dim..(bi + 1) * self.out_dim];
            for (o, slot) in orow.iter_mut().enumerate() {
                let wrow = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = self.b[o];
                for (wv, xv) in wrow.iter().zip(xrow) {
                    acc += wv * xv;
                }
                *slot = acc;
            }
        }
        out
    }

    /// Accumulates dW/db and returns dx.
    fn backward(&self, x: &[f64], dy: &[f64], batch: usize, grad: &mut LinearGrad) -> Vec<f64> {
        let mut dx = vec![0.0; batch * self.in_dim];
        for bi in 0..batch {
            let xrow = &x[bi * self.in_dim..(bi + 1) * self.in_dim];
            let dyrow = &dy[bi * self.out_dim..(bi + 1) * self.out_dim];
            let dxrow = &mut dx[bi * self.in_dim..(bi + 1) * self.in_dim];
            for (o, &dyv) in dyrow.iter().enumerate() {
                grad.b[o] += dyv;
                let wrow = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                let gwrow = &mut grad.w[o * self.in_dim..(o + 1) * self.in_dim];
                for i in 0..self.in_dim {
                    gwrow[i] += dyv * xrow[i];
                    dxrow[i] += dyv * wrow[i];
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct LinearGrad {
    w: Vec<f64>,
    b: Vec<f64>,
}

impl LinearGrad {
    fn zeros(layer: &Linear) -> Self {
        Self { w: vec![0.0; layer.w.len()], b: vec![0.0; layer.b.len()] }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    hidden: Vec<LinearGrad>,
    policy: LinearGrad,
    value: LinearGrad,
}

impl Gradients {
    pub fn to_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.hidden {
            out.extend_from_slice(&g.w);
            out.extend_from_slice(&g.b);
        }
        out.extend_from_slice(&self.policy.w);
        out.extend_from_slice(&self.policy.b);
        out.extend_from_slice(&self.value.w);
        out.extend_from_slice(&self.value.b);
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self
            .hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.policy))
            .chain(std::iter::once(&mut self.value))
        {
            g.w.iter_mut().for_each(|v| *v *= factor);
            g.b.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Activations and intermediates one forward pass produced; backward
/// consumes it.
pub struct ForwardCache {
    batch: usize,
    /// Input to hidden layer i (index 0 is the network input).
    layer_inputs: Vec<Vec<f64>>,
    /// Activation output of hidden layer i, pre-dropout.
    layer_outputs: Vec<Vec<f64>>,
    /// Inverted-dropout mask applied to the configured layer's output.
    dropout_mask: Option<Vec<f64>>,
    /// Trunk output after dropout; the input both heads see.
    trunk: Vec<f64>,
    pub policy_logits: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    hidden: Vec<Linear>,
    policy: Linear,
    value: Linear,
}

impl Mlp {
    pub fn new(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut hidden = Vec::with_capacity(spec.hidden.len());
        let mut in_dim = spec.input_dim;
        for (dim, _) in &spec.hidden {
            hidden.push(Linear::xavier(in_dim, *dim, rng));
            in_dim = *dim;
        }
        // Zero heads: the initial policy is exactly uniform and the
        // initial value estimate is 0, so early trunk updates cannot
        // push the untrained policy toward an arbitrary tilt.
        let policy = Linear::zeros(in_dim, spec.policy_dim);
        let value = Linear::zeros(in_dim, 1);
        Ok(Self { spec, hidden, policy, value })
    }

    /// Runs the batch through the trunk and both heads. Passing a dropout
    /// rng enables training-mode dropout; None runs in eval mode.
    pub fn forward(
        &self,
        x: &[f64],
        batch: usize,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> ForwardCache {
        assert_eq!(x.len(), batch * self.spec.input_dim, "batch/input size mismatch");
        let mut layer_inputs = Vec::with_capacity(self.hidden.len());
        let mut layer_outputs = Vec::with_capacity(self.hidden.len());
        let mut dropout_mask = None;
        let mut current = x.to_vec();
        let mut rng = dropout_rng;
        for (i, (layer, (_, act))) in self.hidden.iter().zip(&self.spec.hidden).enumerate() {
            let z = layer.forward(&current, batch);
            layer_inputs.push(std::mem::take(&mut current));
            let mut a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            layer_outputs.push(a.clone());
            if self.spec.dropout_after == Some(i) {
                if let Some(rng) = rng.as_deref_mut() {
                    let keep = self.spec.keep_prob;
                    let mask: Vec<f64> = (0..a.len())
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    a.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                    dropout_mask = Some(mask);
                }
            }
            current = a;
        }
        let trunk = current;
        let policy_logits = self.policy.forward(&trunk, batch);
        let values = self.value.forward(&trunk, batch);
        ForwardCache { batch, layer_inputs, layer_outputs, dropout_mask, trunk, policy_logits, values }
    }

    /// Backpropagates head gradients (d loss / d logits, d loss / d value)
    /// through the cache.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &[f64], d_values: &[f64]) -> Gradients {
        assert_eq!(d_logits.len(), cache.batch * self.spec.policy_dim);
        assert_eq!(d_values.len(), cache.batch);
        let mut grads = Gradients {
            hidden: self.hidden.iter().map(LinearGrad::zeros).collect(),
            policy: LinearGrad::zeros(&self.policy),
            value: LinearGrad::zeros(&self.value),
        };
        let mut d_trunk =
            self.policy.backward(&cache.trunk, d_logits, cache.batch, &mut grads.policy);
        let d_trunk_v = self.value.backward(&cache.trunk, d_values, cache.batch, &mut grads.value);
        d_trunk.iter_mut().zip(&d_trunk_v).for_each(|(a, b)| *a += b);

        let mut da = d_trunk;
        for i in (0..self.hidden.len()).rev() {
            if self.spec.dropout_after == Some(i) {
                if let Some(mask) = &cache.dropout_mask {
                    da.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                }
            }
            let act = self.spec.hidden[i].1;
            let dz: Vec<f64> = da
                .iter()
                .zip(&cache.layer_outputs[i])
                .map(|(&dv, &a)| dv * act.derivative_from_output(a))
                .collect();
            da = self.hidden[i].backward(&cache.layer_inputs[i], &dz, cache.batch, &mut grads.hidden[i]);
        }
        grads
    }

    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) {
        let layers = self
            .hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.policy))
            .chain(std::iter::once(&mut self.value));
        let grad_layers = grads
            .hidden
            .iter()
            .chain(std::iter::once(&grads.policy))
            .chain(std::iter::once(&grads.value));
        for (layer, grad) in layers.zip(grad_layers) {
            layer.w.iter_mut().zip(&grad.w).for_each(|(w, g)| *w -= lr * g);
            layer.b.iter_mut().zip(&grad.b).for_each(|(b, g)| *b -= lr * g);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            out.extend_from_slice(&layer.w);
            out.extend_from_slice(&layer.b);
        }
        out
    }

    pub fn set_param_vector(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::LengthMismatch { expected: self.param_count(), got: params.len() });
        }
        let mut offset = 0;
        for layer in self.layers_mut() {
            let wn = layer.w.len();
            layer.w.copy_from_slice(&params[offset..offset + wn]);
            offset += wn;
            let bn = layer.b.len();
            layer.b.copy_from_slice(&params[offset..offset + bn]);
            offset += bn;
        }
        Ok(())
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.policy))
            .chain(std::iter::once(&self.value))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.policy))
            .chain(std::iter::once(&mut self.value))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"WPTMLP1\0";

/// Binary checkpoint: magic, architecture header, then every parameter as
/// f32 little-endian in `param_vector` order.
pub fn save_checkpoint(net: &Mlp, path: &Path) -> Result<()> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let write_u32 = |f: &mut dyn Write, v: u32| f.write_all(&v.to_le_bytes());
    (|| -> std::io::Result<()> {
        f.write_all(CHECKPOINT_MAGIC)?;
        write_u32(&mut f, net.spec.input_dim as u32)?;
        write_u32(&mut f, net.spec.hidden.len() as u32)?;
        for (dim, act) in &net.spec.hidden {
            write_u32(&mut f, *dim as u32)?;
            f.write_all(&[match act {
                Activation::Tanh => 0u8,
                Activation::Selu => 1u8,
            }])?;
        }
        write_u32(&mut f, net.spec.policy_dim as u32)?;
        let dropout = net.spec.dropout_after.map(|i| i as i32).unwrap_or(-1);
        f.write_all(&dropout.to_le_bytes())?;
        f.write_all(&(net.spec.keep_prob as f32).to_le_bytes())?;
        let params = net.param_vector();
        f.write_all(&(params.len() as u64).to_le_bytes())?;
        for p in params {
            f.write_all(&(p as f32).to_le_bytes())?;
        }
        Ok(())
    })()
    .map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Mlp> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::malformed("checkpoint", "bad magic bytes"));
    }
    let read_u32 = |f: &mut dyn Read| -> std::io::Result<u32> {
        let mut b = [0u8; 4];
        f.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let parse = (|| -> std::io::Result<(MlpSpec, Vec<f64>)> {
        let input_dim = read_u32(&mut f)? as usize;
        let n_hidden = read_u32(&mut f)? as usize;
        let mut hidden = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            let dim = read_u32(&mut f)? as usize;
            let mut act = [0u8; 1];
            f.read_exact(&mut act)?;
            hidden.push((dim, act[0]));
        }
        let policy_dim = read_u32(&mut f)? as usize;
        let mut dropout = [0u8; 4];
        f.read_exact(&mut dropout)?;
        let dropout = i32::from_le_bytes(dropout);
        let mut keep = [0u8; 4];
        f.read_exact(&mut keep)?;
        let keep_prob = f32::from_le_bytes(keep) as f64;
        let mut count = [0u8; 8];
        f.read_exact(&mut count)?;
        let count = u64::from_le_bytes(count) as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)?;
            params.push(f32::from_le_bytes(b) as f64);
        }
        let hidden = hidden
            .into_iter()
            .map(|(d, a)| (d, if a == 0 { Activation::Tanh } else { Activation::Selu }))
            .collect();
        let spec = MlpSpec {
            input_dim,
            hidden,
            policy_dim,
            keep_prob,
            dropout_after: (dropout >= 0).then_some(dropout as usize),
        };
        Ok((spec, params))
    })();
    let (spec, params) = parse.map_err(io_err)?;
    let mut net = Mlp::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    net.set_param_vector(&params)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net(seed: u64) -> Mlp {
        let spec = MlpSpec {
            input_dim: 4,
            hidden: vec![(8, Activation::Tanh), (6, Activation::Selu)],
            policy_dim: 4,
            keep_prob: 0.5,
            dropout_after: None,
        };
        Mlp::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn selu_matches_definition() {
        let a = Activation::Selu;
        assert!((a.apply(1.0) - SELU_LAMBDA).abs() < 1e-15);
        assert_eq!(a.apply(0.0), 0.0);
        assert!((a.apply(-30.0) + SELU_LAMBDA * SELU_ALPHA).abs() < 1e-10);
    }

    #[test]
    fn activation_derivative_from_output_matches_finite_difference() {
        for act in [Activation::Tanh, Activation::Selu] {
            for z in [-1.7, -0.3, 0.2, 1.4] {
                let h = 1e-6;
                let numeric = (act.apply(z + h) - act.apply(z - h)) / (2.0 * h);
                let analytic = act.derivative_from_output(act.apply(z));
                assert!((numeric - analytic).abs() < 1e-8, "{act:?} at {z}");
            }
        }
    }

    #[test]
    fn batched_forward_equals_per_sample() {
        let net = tiny_net(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = 3;
        let x: Vec<f64> = (0..batch * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let full = net.forward(&x, batch, None);
        for bi in 0..batch {
            let single = net.forward(&x[bi * 4..(bi + 1) * 4], 1, None);
            assert_eq!(single.policy_logits, full.policy_logits[bi * 4..(bi + 1) * 4]);
            assert_eq!(single.values[0], full.values[bi]);
        }
    }

    #[test]
    fn backward_matches_numerical_gradient() {
        // Scalar probe loss: sum of squared logits plus squared values.
        let mut net = tiny_net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = 2;
        let x: Vec<f64> = (0..batch * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss_of = |net: &Mlp| {
            let cache = net.forward(&x, batch, None);
            cache.policy_logits.iter().map(|v| v * v).sum::<f64>()
                + cache.values.iter().map(|v| v * v).sum::<f64>()
        };

        let cache = net.forward(&x, batch, None);
        let d_logits: Vec<f64> = cache.policy_logits.iter().map(|v| 2.0 * v).collect();
        let d_values: Vec<f64> = cache.values.iter().map(|v| 2.0 * v).collect();
        let analytic = net.backward(&cache, &d_logits, &d_values).to_vector();

        let params = net.param_vector();
        let h = 1e-6;
        for idx in (0..params.len()).step_by(17) {
            let mut plus = params.clone();
            plus[idx] += h;
            net.set_param_vector(&plus).unwrap();
            let up = loss_of(&net);
            let mut minus = params.clone();
            minus[idx] -= h;
            net.set_param_vector(&minus).unwrap();
            let down = loss_of(&net);
            let numeric = (up - down) / (2.0 * h);
            let denom = (numeric.abs() + analytic[idx].abs()).max(1e-8);
            assert!(
                ((numeric - analytic[idx]) / denom).abs() < 1e-6,
                "param {idx}: numeric {numeric} vs analytic {}",
                analytic[idx]
            );
        }
        net.set_param_vector(&params).unwrap();
    }

    #[test]
    fn dropout_masks_and_rescales_in_train_mode() {
        let spec = MlpSpec {
            input_dim: 4,
            hidden: vec![(64, Activation::Tanh)],
            policy_dim: 2,
            keep_prob: 0.25,
            dropout_after: Some(0),
        };
        let net = Mlp::new(spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let x = vec![0.3, -0.2, 0.9, 0.1];
        let eval = net.forward(&x, 1, None);
        assert!(eval.dropout_mask.is_none());

        let mut drop_rng = ChaCha8Rng::seed_from_u64(6);
        let train = net.forward(&x, 1, Some(&mut drop_rng));
        let mask = train.dropout_mask.as_ref().unwrap();
        let zeros = mask.iter().filter(|&&m| m == 0.0).count();
        assert!(mask.iter().all(|&m| m == 0.0 || (m - 4.0).abs() < 1e-12));
        // keep_prob 0.25 over 64 units: wide tolerance, just not degenerate.
        assert!(zeros > 24 && zeros < 63, "zeros = {zeros}");
        for (t, (e, m)) in train.trunk.iter().zip(eval.trunk.iter().zip(mask)) {
            assert!((t - e * m).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut net = tiny_net(7);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let params: Vec<f64> =
            (0..net.param_count()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        net.set_param_vector(&params).unwrap();
        let x = vec![0.1, 0.2, 0.3, 0.4];
        let before = {
            let cache = net.forward(&x, 1, None);
            cache.policy_logits.iter().map(|v| v * v).sum::<f64>()
        };
        for _ in 0..20 {
            let cache = net.forward(&x, 1, None);
            let d_logits: Vec<f64> = cache.policy_logits.iter().map(|v| 2.0 * v).collect();
            let d_values = vec![0.0];
            let grads = net.backward(&cache, &d_logits, &d_values);
            net.apply_gradients(&grads, 0.05);
        }
        let after = {
            let cache = net.forward(&x, 1, None);
            cache.policy_logits.iter().map(|v| v * v).sum::<f64>()
        };
        assert!(after < before * 0.5, "{after} !< {before}");
    }

    #[test]
    fn checkpoint_round_trips_through_f32() {
        let net = tiny_net(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.spec, net.spec);
        let original = net.param_vector();
        let restored = loaded.param_vector();
        assert_eq!(original.len(), restored.len());
        for (a, b) in original.iter().zip(&restored) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn checkpoint_rejects_other_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_net.bin");
        std::fs::write(&path, b"something else entirely").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Malformed { .. })));
    }
}
