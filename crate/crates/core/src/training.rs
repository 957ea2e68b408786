//! Constrained training of an upcycled model: likelihood, mask orthogonality and a
//! sparsity target enforced by a projected Lagrange multiplier.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_check, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gates::expected_active_var;
use crate::model::{forward, Checkpoint, Example, PackedBatch, TinyTransformer};
use crate::optim::{Adam, AdamConfig};
use crate::router::{routing_inputs, RoutingMode};
use crate::upcycle::{ParamGroup, SimoeBinding, UpcycleSettings, UpcycledModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    /// Target fraction of expert-parameters switched off.
    pub tau: f64,
    pub ortho_weight: f64,
    pub dual_lr: f64,
    /// Primal optimizer; `adam.lr` drives the shared delta.
    pub adam: AdamConfig,
    pub gate_lr: f64,
    pub router_lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Write `wallclock_ms` as 0 so metric files are reproducible byte for byte.
    pub deterministic_metrics: bool,
    /// Save a resumable state every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            tau: 0.75,
            ortho_weight: 5e-6,
            dual_lr: 0.01,
            adam: AdamConfig::default(),
            gate_lr: 1e-2,
            router_lr: 1e-3,
            steps: 1000,
            batch_size: 16,
            seed: 0,
            deterministic_metrics: false,
            checkpoint_every: 0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1), got {}", self.tau)));
        }
        if !(self.ortho_weight >= 0.0) || !(self.dual_lr > 0.0) || !(self.gate_lr > 0.0) || !(self.router_lr > 0.0) {
            return Err(Error::Config(
                "weights must be nonnegative and learning rates positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    fn segments(&self, model: &UpcycledModel) -> Vec<(usize, f64)> {
        model
            .param_layout()
            .into_iter()
            .map(|(g, n)| {
                let lr = match g {
                    ParamGroup::Delta => self.adam.lr,
                    ParamGroup::Gate => self.gate_lr,
                    ParamGroup::Router => self.router_lr,
                };
                (n, lr)
            })
            .collect()
    }
}

/// Multiplier of the sparsity constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambda: f64,
    pub tau: f64,
    pub dual_lr: f64,
}

impl LagrangianState {
    pub fn new(tau: f64, dual_lr: f64) -> Self {
        LagrangianState {
            lambda: 0.0,
            tau,
            dual_lr,
        }
    }
}

/// Projected ascent on the multiplier, reset to zero once the target is met.
pub fn dual_update(state: LagrangianState, sparsity: f64) -> LagrangianState {
    let lambda = if sparsity >= state.tau {
        0.0
    } else {
        (state.lambda + state.dual_lr * (state.tau - sparsity)).max(0.0)
    };
    LagrangianState { lambda, ..state }
}

/// `‖ẐẐᵀ − I‖_F` for one layer's `M×X` median gates with unit-normalized rows.
pub fn layer_ortho_penalty(medians: &[Vec<f64>]) -> f64 {
    let rows: Vec<Vec<f64>> = medians
        .iter()
        .map(|z| {
            let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                z.clone()
            } else {
                z.iter().map(|v| v / n).collect()
            }
        })
        .collect();
    let mut total = 0.0;
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate() {
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            let d = dot - if i == j { 1.0 } else { 0.0 };
            total += d * d;
        }
    }
    total.sqrt()
}

/// Mean of the per-layer orthogonality penalties.
pub fn ortho_penalty(model: &UpcycledModel) -> f64 {
    let per_layer: Vec<f64> = model
        .attached()
        .map(|p| layer_ortho_penalty(&p.median_gates()))
        .collect();
    if per_layer.is_empty() {
        0.0
    } else {
        per_layer.iter().sum::<f64>() / per_layer.len() as f64
    }
}

/// One minus the parameter-weighted mean probability that a gate is active.
pub fn expected_model_sparsity(model: &UpcycledModel) -> f64 {
    let (mut active, mut total) = (0.0, 0.0);
    for p in model.attached() {
        let w = p.params_per_gate() as f64;
        for g in p.gates() {
            active += w * g.expected_active_prob().iter().sum::<f64>();
            total += w * g.len() as f64;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        1.0 - active / total
    }
}

pub fn ortho_penalty_var(tape: &mut Tape, binding: &SimoeBinding) -> Result<Var> {
    let mut acc: Option<Var> = None;
    let mut layers = 0usize;
    for a in binding.attached() {
        let z = tape.row_normalize(a.medians)?;
        let gram = tape.matmul_t(z, z)?;
        let m = tape.value(gram).rows();
        let eye = tape.constant(Tensor::identity(m));
        let diff = tape.sub(gram, eye)?;
        let pen = tape.frob_norm(diff);
        acc = Some(match acc {
            None => pen,
            Some(s) => tape.add(s, pen)?,
        });
        layers += 1;
    }
    Ok(match acc {
        None => tape.constant(Tensor::scalar(0.0)),
        Some(s) => tape.scale(s, 1.0 / layers as f64),
    })
}

pub fn expected_sparsity_var(tape: &mut Tape, binding: &SimoeBinding) -> Result<Var> {
    let mut acc: Option<Var> = None;
    let mut total = 0.0;
    for a in binding.attached() {
        let p = expected_active_var(tape, a.log_phi, &a.constants);
        let s = tape.sum(p);
        let w = a.params_per_gate as f64;
        total += w * tape.value(a.log_phi).numel() as f64;
        let ws = tape.scale(s, w);
        acc = Some(match acc {
            None => ws,
            Some(prev) => tape.add(prev, ws)?,
        });
    }
    Ok(match acc {
        None => tape.constant(Tensor::scalar(0.0)),
        Some(s) => {
            let frac = tape.scale(s, -1.0 / total);
            tape.add_scalar(frac, 1.0)
        }
    })
}

/// The scalar objective and its parts, all on one tape.
pub struct LossTerms {
    pub loss: Var,
    pub nll: Var,
    pub ortho: Var,
    pub expected_sparsity: Var,
}

/// `NLL + ortho_weight · ortho + λ (τ − expected sparsity)`.
pub fn lagrangian_loss(
    tape: &mut Tape,
    binding: &SimoeBinding,
    model: &UpcycledModel,
    batch: &PackedBatch,
    lambda: f64,
    cfg: &ObjectiveConfig,
) -> Result<LossTerms> {
    if !(lambda >= 0.0) {
        return Err(Error::Contract(format!("multiplier must be nonnegative, got {lambda}")));
    }
    let out = forward(tape, model.config(), binding, batch)?;
    let nll = tape.cross_entropy(out.logits, &batch.targets, &batch.loss_mask)?;
    let ortho = ortho_penalty_var(tape, binding)?;
    let expected_sparsity = expected_sparsity_var(tape, binding)?;
    let weighted = tape.scale(ortho, cfg.ortho_weight);
    let with_ortho = tape.add(nll, weighted)?;
    let neg = tape.scale(expected_sparsity, -lambda);
    let constraint = tape.add_scalar(neg, lambda * cfg.tau);
    let loss = tape.add(with_ortho, constraint)?;
    Ok(LossTerms {
        loss,
        nll,
        ortho,
        expected_sparsity,
    })
}

/// Largest relative error between the objective's gradient and central differences
/// on one fixed batch, over `coords` (every trainable coordinate when `None`).
pub fn objective_gradient_error(
    model: &UpcycledModel,
    batch: &PackedBatch,
    lambda: f64,
    cfg: &ObjectiveConfig,
    h: f64,
    coords: Option<&[usize]>,
) -> Result<f64> {
    let inputs = model.routing_inputs(batch)?;
    let mut probe = model.clone();
    let f = |x: &[f64]| {
        probe.set_flat_params(x)?;
        let mut tape = Tape::new();
        let b = SimoeBinding::bind(&mut tape, &probe, batch, &inputs, true)?;
        let t = lagrangian_loss(&mut tape, &b, &probe, batch, lambda, cfg)?;
        tape.backward(t.loss)?;
        Ok((tape.value(t.loss).item(), b.flat_grad(&tape)))
    };
    finite_difference_check(f, &model.flat_params(), h, coords)
}

/// About `budget` coordinates drawn without replacement from each segment of
/// `layout` in proportion to its length, at least one per segment.
pub fn stratified_coords(layout: &[usize], budget: usize, seed: u64) -> Vec<usize> {
    let total: usize = layout.iter().sum();
    if total <= budget {
        return (0..total).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(budget + layout.len());
    let mut start = 0;
    for &len in layout {
        let k = (budget * len).div_ceil(total).clamp(1, len);
        let mut picked: Vec<usize> = sample(&mut rng, len, k).into_iter().map(|i| start + i).collect();
        picked.sort_unstable();
        out.extend(picked);
        start += len;
    }
    out
}

/// Indices of the batch used at `step`: a fresh seeded permutation every epoch.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let per_epoch = n.div_ceil(batch_size);
    let (epoch, j) = (step / per_epoch, step % per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order[j * batch_size..((j + 1) * batch_size).min(n)].to_vec()
}

/// Router inputs precomputed per example from the frozen seed.
pub struct RouteCache {
    mode: RoutingMode,
    rows: Vec<Tensor>,
}

const CACHE_CHUNK: usize = 64;

impl RouteCache {
    pub fn build(
        seed: &TinyTransformer,
        mode: RoutingMode,
        examples: &[Example],
        loss_on_prompt: bool,
    ) -> Result<Self> {
        let chunks: Vec<Vec<Tensor>> = examples
            .par_chunks(CACHE_CHUNK)
            .map(|chunk| {
                let refs: Vec<&Example> = chunk.iter().collect();
                let batch = PackedBatch::for_training(&refs, loss_on_prompt)?;
                let inputs = routing_inputs(seed, mode, &batch)?;
                Ok(match mode {
                    RoutingMode::Instance => (0..chunk.len())
                        .map(|i| Tensor::matrix(1, inputs.cols(), inputs.row(i).to_vec()))
                        .collect::<Result<Vec<_>>>()?,
                    RoutingMode::Token => batch
                        .segments
                        .iter()
                        .map(|&(s, l)| {
                            let data = (s..s + l).flat_map(|r| inputs.row(r).iter().copied()).collect();
                            Tensor::matrix(l, inputs.cols(), data)
                        })
                        .collect::<Result<Vec<_>>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(RouteCache {
            mode,
            rows: chunks.into_iter().flatten().collect(),
        })
    }

    pub fn mode(&self) -> RoutingMode {
        self.mode
    }

    /// Every cached row stacked.
    pub fn all(&self) -> Result<Tensor> {
        self.gather(&(0..self.rows.len()).collect::<Vec<_>>())
    }

    /// Stacked router inputs for the examples at `indices`, in order.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let cols = self.rows.first().map_or(0, Tensor::cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in indices {
            let t = self
                .rows
                .get(i)
                .ok_or_else(|| Error::Contract(format!("example index {i} outside the cache")))?;
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        Tensor::matrix(rows, cols, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub nll: f64,
    pub ortho: f64,
    pub expected_sparsity: f64,
    pub exact_sparsity: f64,
    pub lambda: f64,
    pub lr: f64,
    pub wallclock_ms: u64,
    #[serde(skip)]
    pub grad_norm: f64,
}

/// Everything a run needs to continue exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub model: UpcycledModel,
    pub optimizer: Adam,
    pub dual: LagrangianState,
    pub config: ObjectiveConfig,
}

#[derive(Serialize, Deserialize)]
struct StateExtra {
    step: usize,
    dual: LagrangianState,
    objective: ObjectiveConfig,
    optimizer_t: u64,
    adam: AdamConfig,
}

impl TrainState {
    pub fn new(model: UpcycledModel, config: ObjectiveConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(config.adam, model.trainable_count());
        Ok(TrainState {
            step: 0,
            dual: LagrangianState::new(config.tau, config.dual_lr),
            model,
            optimizer,
            config,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut ck = self.model.to_checkpoint()?;
        ck.kind = "train_state".into();
        ck.push("optim.m", Tensor::vector(self.optimizer.m.clone()));
        ck.push("optim.v", Tensor::vector(self.optimizer.v.clone()));
        ck.extra = serde_json::to_value(StateExtra {
            step: self.step,
            dual: self.dual,
            objective: self.config.clone(),
            optimizer_t: self.optimizer.t,
            adam: self.optimizer.config,
        })
        .map_err(|e| Error::Config(e.to_string()))?;
        ck.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        let extra: StateExtra =
            serde_json::from_value(ck.extra.clone()).map_err(|e| Error::format(dir, format!("train state: {e}")))?;
        let model = UpcycledModel::from_checkpoint(&ck)?;
        let optimizer = Adam {
            config: extra.adam,
            m: ck.tensor("optim.m")?.data().to_vec(),
            v: ck.tensor("optim.v")?.data().to_vec(),
            t: extra.optimizer_t,
        };
        if optimizer.len() != model.trainable_count() {
            return Err(Error::format(dir, "optimizer moments do not match the model"));
        }
        Ok(TrainState {
            step: extra.step,
            model,
            optimizer,
            dual: extra.dual,
            config: extra.objective,
        })
    }
}

/// One primal Adam step on the Lagrangian followed by one dual step.
pub fn train_step(state: &mut TrainState, batch: &PackedBatch, route_inputs: &Tensor) -> Result<StepMetrics> {
    let mut tape = Tape::new();
    let binding = SimoeBinding::bind(&mut tape, &state.model, batch, route_inputs, true)?;
    let terms = lagrangian_loss(
        &mut tape,
        &binding,
        &state.model,
        batch,
        state.dual.lambda,
        &state.config,
    )?;
    let loss = tape.value(terms.loss).item();
    let nll = tape.value(terms.nll).item();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss} at step {} (nll {nll}, lambda {})",
            state.step, state.dual.lambda
        )));
    }
    let ortho = tape.value(terms.ortho).item();
    let expected = tape.value(terms.expected_sparsity).item();
    let exact = state.model.exact_sparsity();
    tape.backward(terms.loss)?;
    let grads = binding.flat_grad(&tape);
    let grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();

    let mut params = state.model.flat_params();
    let segments = state.config.segments(&state.model);
    state
        .optimizer
        .step(&mut params, &grads, &segments)
        .map_err(|e| Error::Numeric(format!("step {}: {e}", state.step)))?;
    state.model.set_flat_params(&params)?;
    state.dual = dual_update(state.dual, expected);
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        nll,
        ortho,
        expected_sparsity: expected,
        exact_sparsity: exact,
        lambda: state.dual.lambda,
        lr: state.config.adam.lr,
        wallclock_ms: 0,
        grad_norm,
    })
}

/// Drives `train_step` over seeded batches of a fixed example set.
pub struct Trainer<'a> {
    pub state: TrainState,
    examples: &'a [Example],
    cache: RouteCache,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(state: TrainState, examples: &'a [Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        state.config.validate()?;
        let cache = RouteCache::build(&state.model.seed, state.model.mode(), examples, false)?;
        Ok(Trainer {
            state,
            examples,
            cache,
            started: Instant::now(),
        })
    }

    /// Offsets router inputs by the mean cached embedding.
    pub fn center_router(&mut self) -> Result<()> {
        let all = self.cache.all()?;
        self.state.model.router.center_on(&all)
    }

    pub fn next_batch(&self) -> Result<(PackedBatch, Tensor)> {
        let cfg = &self.state.config;
        let idx = batch_indices(self.examples.len(), cfg.batch_size, cfg.seed, self.state.step);
        let refs: Vec<&Example> = idx.iter().map(|&i| &self.examples[i]).collect();
        Ok((PackedBatch::for_training(&refs, false)?, self.cache.gather(&idx)?))
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let (batch, inputs) = self.next_batch()?;
        let mut m = train_step(&mut self.state, &batch, &inputs)?;
        if !self.state.config.deterministic_metrics {
            m.wallclock_ms = self.started.elapsed().as_millis() as u64;
        }
        Ok(m)
    }

    /// Steps until `config.steps`, handing each step's metrics to `on_step`.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&TrainState, &StepMetrics) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::new();
        while self.state.step < self.state.config.steps {
            let m = self.step()?;
            on_step(&self.state, &m)?;
            out.push(m);
        }
        Ok(out)
    }
}

/// Appends one JSON object per line.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::format(&self.path, e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: UpcycledModel,
    pub metrics: Vec<StepMetrics>,
    pub final_lambda: f64,
    pub exact_sparsity: f64,
    pub expected_sparsity: f64,
    /// Whether exact sparsity ended within 0.02 of the target.
    pub converged: bool,
}

/// Attaches experts to `seed` and trains them. With `out`, writes `metrics.jsonl`,
/// the final model under `model/`, and periodic resumable states under `state/`.
pub fn train(
    seed: TinyTransformer,
    settings: UpcycleSettings,
    objective: ObjectiveConfig,
    examples: &[Example],
    out: Option<&Path>,
) -> Result<TrainReport> {
    objective.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(objective.seed);
    let model = UpcycledModel::attach(seed, settings, &mut rng)?;
    run(TrainState::new(model, objective)?, examples, out, true)
}

/// Continues a run from `state` up to its configured step count.
pub fn resume(state: TrainState, examples: &[Example], out: Option<&Path>) -> Result<TrainReport> {
    run(state, examples, out, false)
}

fn run(state: TrainState, examples: &[Example], out: Option<&Path>, fresh: bool) -> Result<TrainReport> {
    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(MetricsWriter::create(&dir.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let every = state.config.checkpoint_every;
    let mut trainer = Trainer::new(state, examples)?;
    if fresh && trainer.state.model.settings.router.center_inputs {
        trainer.center_router()?;
    }
    let metrics = trainer.run(|st, m| {
        if let Some(w) = writer.as_mut() {
            w.write(m)?;
        }
        if let (Some(dir), true) = (out, every > 0 && st.step % every == 0) {
            st.save(&dir.join("state"))?;
        }
        Ok(())
    })?;
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    let state = trainer.state;
    if let Some(dir) = out {
        state.model.save(&dir.join("model"))?;
    }
    let exact = state.model.exact_sparsity();
    Ok(TrainReport {
        final_lambda: state.dual.lambda,
        expected_sparsity: expected_model_sparsity(&state.model),
        exact_sparsity: exact,
        converged: exact >= state.config.tau - 0.02,
        model: state.model,
        metrics,
    })
}
