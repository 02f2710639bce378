//! Cost evaluation for schedule configs. Two implementations share one
//! trait: a synthetic surface (deterministic, hash-seeded, instant) for
//! search experiments, and wall-clock measurement of the real kernels.
//! Results always carry a strictly positive, finite runtime.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{op_signature, Layout, OperatorSpec};
use crate::kernels::{self, Tensor};
use crate::schedule::{ScheduleConfig, ScheduleTemplate};

/// How a runtime number was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultSource {
    Synthetic,
    Measured,
    Cached,
}

impl std::fmt::Display for ResultSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResultSource::Synthetic => "synthetic",
            ResultSource::Measured => "measured",
            ResultSource::Cached => "cached",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub runtime_ms: f64,
    pub source: ResultSource,
}

impl EvalResult {
    pub fn new(runtime_ms: f64, source: ResultSource) -> Result<Self> {
        if !(runtime_ms.is_finite() && runtime_ms > 0.0) {
            return Err(Error::NonPositiveRuntime(runtime_ms));
        }
        Ok(Self { runtime_ms, source })
    }
}

/// Running-average rule for observed runtimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AverageMode {
    /// a_t = (a_{t-1} * weight + b_t) / t, starting from a_0 = 0. The first
    /// update lands exactly on b_1 and history is damped by 1/t thereafter.
    Damped { weight: f64 },
    /// Conventional exponential smoothing a_t = rho*a_{t-1} + (1-rho)*b_t,
    /// with a_1 = b_1.
    Exponential { rho: f64 },
}

impl Default for AverageMode {
    fn default() -> Self {
        AverageMode::Damped { weight: 0.8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeTracker {
    mode: AverageMode,
    alpha: f64,
    steps: u64,
}

impl RuntimeTracker {
    pub fn new(mode: AverageMode) -> Self {
        Self { mode, alpha: 0.0, steps: 0 }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Folds one observation in and returns the updated average.
    pub fn update(&mut self, beta: f64) -> f64 {
        self.steps += 1;
        self.alpha = match self.mode {
            AverageMode::Damped { weight } => {
                (self.alpha * weight + beta) / self.steps as f64
            }
            AverageMode::Exponential { rho } => {
                if self.steps == 1 {
                    beta
                } else {
                    rho * self.alpha + (1.0 - rho) * beta
                }
            }
        };
        self.alpha
    }
}

/// A cost oracle for one operator under one template.
pub trait Evaluate: Send + Sync {
    fn op_signature(&self) -> &str;
    /// Cost of the operator under `cfg`.
    fn evaluate(&self, cfg: &ScheduleConfig) -> Result<EvalResult>;
    /// Cost of the untuned reference implementation of the same operator.
    fn bench_reference(&self) -> Result<EvalResult>;
    /// Identifies the cost surface. Cached tuning results are only reused
    /// while the fingerprint matches, so changing the surface (different
    /// seed, noise, or measurement protocol) invalidates stale entries.
    fn fingerprint(&self) -> String;
}

fn surface_digest(signature: &str, template_id: &str, seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(signature.as_bytes());
    h.update([0u8]);
    h.update(template_id.as_bytes());
    h.update(seed.to_le_bytes());
    h.finalize().into()
}

/// Deterministic per-operator cost in milliseconds for operators nobody
/// tunes; keeps synthetic plan estimates stable run to run.
pub fn synthetic_node_cost(signature: &str, seed: u64) -> f64 {
    let digest = surface_digest(signature, "node", seed);
    let mut rng = ChaCha8Rng::from_seed(digest);
    rng.gen_range(0.05..0.5)
}

/// Smooth synthetic cost surface with a planted optimum. Cost is
/// base + sum_i w_i * (log2 v_i - log2 v*_i)^2, so the planted config is
/// the unique minimizer over the template; optional noise perturbs each
/// config deterministically by hash.
pub struct SyntheticEvaluator {
    signature: String,
    template: ScheduleTemplate,
    base: f64,
    weights: Vec<f64>,
    optimum: ScheduleConfig,
    noise: f64,
    digest: [u8; 32],
}

impl SyntheticEvaluator {
    pub fn new(
        signature: impl Into<String>,
        template: &ScheduleTemplate,
        seed: u64,
        noise: f64,
    ) -> Result<Self> {
        template.validate_template()?;
        for p in &template.params {
            if p.values.iter().any(|&v| v == 0) {
                return Err(Error::InvalidParams(format!(
                    "synthetic surface needs positive domain values; '{}' contains 0",
                    p.name
                )));
            }
        }
        let signature = signature.into();
        let digest = surface_digest(&signature, &template.template_id(), seed);
        let mut rng = ChaCha8Rng::from_seed(digest);
        let base = rng.gen_range(1.0..5.0);
        let weights = (0..template.params.len()).map(|_| rng.gen_range(0.5..2.0)).collect();
        let optimum = template.random_config(&mut rng)?;
        Ok(Self { signature, template: template.clone(), base, weights, optimum, noise, digest })
    }

    /// The planted minimizer; test oracles compare search results to it.
    pub fn optimum(&self) -> &ScheduleConfig {
        &self.optimum
    }

    fn cost(&self, cfg: &ScheduleConfig) -> Result<f64> {
        let report = self.template.validate(cfg)?;
        if !report.ok() {
            return Err(Error::InvalidConfig(format!(
                "config violates '{}'",
                report.violations[0].constraint
            )));
        }
        let mut cost = self.base;
        for ((v, v_opt), w) in cfg.values.iter().zip(&self.optimum.values).zip(&self.weights) {
            let d = (*v as f64).log2() - (*v_opt as f64).log2();
            cost += w * d * d;
        }
        if self.noise > 0.0 {
            let mut h = Sha256::new();
            h.update(self.digest);
            for v in &cfg.values {
                h.update(v.to_le_bytes());
            }
            let digest: [u8; 32] = h.finalize().into();
            let mut rng = ChaCha8Rng::from_seed(digest);
            cost *= 1.0 + self.noise * rng.gen_range(-1.0..1.0);
        }
        Ok(cost)
    }
}

impl Evaluate for SyntheticEvaluator {
    fn op_signature(&self) -> &str {
        &self.signature
    }

    fn evaluate(&self, cfg: &ScheduleConfig) -> Result<EvalResult> {
        EvalResult::new(self.cost(cfg)?, ResultSource::Synthetic)
    }

    fn bench_reference(&self) -> Result<EvalResult> {
        EvalResult::new(self.cost(&self.template.baseline_config())?, ResultSource::Synthetic)
    }

    fn fingerprint(&self) -> String {
        format!("synthetic:{}:noise={}", hex::encode(&self.digest[..8]), self.noise)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MeasureOptions {
    pub warmups: usize,
    pub runs: usize,
    /// Timing normally holds an internal lock so concurrent callers cannot
    /// distort each other's numbers; setting this skips the lock.
    pub allow_concurrent: bool,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        Self { warmups: 3, runs: 11, allow_concurrent: false }
    }
}

/// Times the real conv kernels on seeded random tensors. Results are
/// memoized per config, so re-asking for a config returns the number
/// already measured rather than a fresh (noisy) sample.
pub struct MeasuredEvaluator {
    signature: String,
    template: ScheduleTemplate,
    conv: crate::graph::ConvSpec,
    fused: bool,
    input: Tensor,
    filter: Tensor,
    bias: Tensor,
    opts: MeasureOptions,
    memo: Mutex<HashMap<Vec<u64>, EvalResult>>,
    reference_memo: Mutex<Option<EvalResult>>,
    gate: Mutex<()>,
}

impl MeasuredEvaluator {
    pub fn new(
        op: &OperatorSpec,
        layout: Layout,
        template: &ScheduleTemplate,
        seed: u64,
        opts: MeasureOptions,
    ) -> Result<Self> {
        template.validate_template()?;
        let (conv, fused) = match op {
            OperatorSpec::Conv2D(cs) => (*cs, false),
            OperatorSpec::FusedConvBiasReLU(cs) => (*cs, true),
            other => {
                return Err(Error::Unsupported(format!(
                    "measured evaluation covers conv kernels, not {}",
                    other.kind()
                )));
            }
        };
        conv.validate()?;
        if opts.runs == 0 {
            return Err(Error::InvalidParams("measurement needs at least one run".into()));
        }
        let signature = op_signature(op, &[]);
        let digest = surface_digest(&signature, &template.template_id(), seed);
        let mut rng = ChaCha8Rng::from_seed(digest);
        let input = Tensor::random(conv.input_spec(layout), &mut rng);
        let filter = Tensor::random(conv.filter_spec(), &mut rng);
        let bias = Tensor::random(crate::graph::TensorSpec::new(vec![conv.c_out]), &mut rng);
        Ok(Self {
            signature,
            template: template.clone(),
            conv,
            fused,
            input,
            filter,
            bias,
            opts,
            memo: Mutex::new(HashMap::new()),
            reference_memo: Mutex::new(None),
            gate: Mutex::new(()),
        })
    }

    fn time_runs(&self, mut run: impl FnMut() -> Result<()>) -> Result<f64> {
        let _guard = (!self.opts.allow_concurrent).then(|| self.gate.lock().expect("gate"));
        for _ in 0..self.opts.warmups {
            run()?;
        }
        let mut samples = Vec::with_capacity(self.opts.runs);
        for _ in 0..self.opts.runs {
            let start = Instant::now();
            run()?;
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
        samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        // Median of an odd run count; even counts take the upper middle.
        Ok(samples[samples.len() / 2].max(1e-6))
    }
}

impl Evaluate for MeasuredEvaluator {
    fn op_signature(&self) -> &str {
        &self.signature
    }

    fn evaluate(&self, cfg: &ScheduleConfig) -> Result<EvalResult> {
        if let Some(hit) = self.memo.lock().expect("memo").get(&cfg.values) {
            return Ok(*hit);
        }
        let report = self.template.validate(cfg)?;
        if !report.ok() {
            return Err(Error::InvalidConfig(format!(
                "config violates '{}'",
                report.violations[0].constraint
            )));
        }
        let tile = self.template.tile_config(cfg)?;
        let median = self
            .time_runs(|| {
                let out = if self.fused {
                    kernels::fused_conv_bias_relu_tuned(
                        &self.input, &self.filter, &self.bias, &self.conv, &tile,
                    )
                } else {
                    kernels::conv2d_tuned(&self.input, &self.filter, &self.conv, &tile)
                };
                out.map(drop).map_err(|e| Error::KernelFailure(e.to_string()))
            })?;
        let result = EvalResult::new(median, ResultSource::Measured)?;
        self.memo.lock().expect("memo").insert(cfg.values.clone(), result);
        Ok(result)
    }

    fn bench_reference(&self) -> Result<EvalResult> {
        if let Some(hit) = *self.reference_memo.lock().expect("memo") {
            return Ok(hit);
        }
        let median = self
            .time_runs(|| {
                let out = if self.fused {
                    kernels::fused_conv_bias_relu(&self.input, &self.filter, &self.bias, &self.conv)
                } else {
                    kernels::conv2d_reference(&self.input, &self.filter, &self.conv)
                };
                out.map(drop).map_err(|e| Error::KernelFailure(e.to_string()))
            })?;
        let result = EvalResult::new(median, ResultSource::Measured)?;
        *self.reference_memo.lock().expect("memo") = Some(result);
        Ok(result)
    }

    fn fingerprint(&self) -> String {
        format!("measured:{}x{}", self.opts.warmups, self.opts.runs)
    }
}

/// One line of the evaluation log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub op_signature: String,
    pub config: ScheduleConfig,
    pub runtime_ms: f64,
    pub source: ResultSource,
    /// Wall-clock milliseconds since the epoch at record time.
    pub timestamp_ms: u128,
}

/// Wraps an evaluator to count calls and keep a replayable record of every
/// evaluation.
pub struct RecordingEvaluator<E> {
    inner: E,
    records: Mutex<Vec<EvalRecord>>,
    count: AtomicUsize,
}

impl<E: Evaluate> RecordingEvaluator<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, records: Mutex::new(Vec::new()), count: AtomicUsize::new(0) }
    }

    pub fn eval_count(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }

    pub fn records(&self) -> Vec<EvalRecord> {
        self.records.lock().expect("records").clone()
    }

    pub fn into_inner(self) -> E {
        self.inner
    }

    fn record(&self, cfg: Option<&ScheduleConfig>, result: &EvalResult) {
        let timestamp_ms = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        self.records.lock().expect("records").push(EvalRecord {
            op_signature: self.inner.op_signature().to_string(),
            config: cfg.cloned().unwrap_or_else(|| ScheduleConfig::new(Vec::new())),
            runtime_ms: result.runtime_ms,
            source: result.source,
            timestamp_ms,
        });
    }
}

impl<E: Evaluate> Evaluate for RecordingEvaluator<E> {
    fn op_signature(&self) -> &str {
        self.inner.op_signature()
    }

    fn evaluate(&self, cfg: &ScheduleConfig) -> Result<EvalResult> {
        let result = self.inner.evaluate(cfg)?;
        self.count.fetch_add(1, Ordering::SeqCst);
        self.record(Some(cfg), &result);
        Ok(result)
    }

    fn bench_reference(&self) -> Result<EvalResult> {
        let result = self.inner.bench_reference()?;
        self.count.fetch_add(1, Ordering::SeqCst);
        self.record(None, &result);
        Ok(result)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}
