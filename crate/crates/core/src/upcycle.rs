//! A seed model with sparse interpolated experts attached, and its tape binding.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gates::{median_gate_var, GateConstants, GateGroup};
use crate::layer::{AttachmentPolicy, GateInit, SimoeLinear, SimoeParam, SimoeVector};
use crate::model::transformer::{dense_embed, forward, forward_hidden};
use crate::model::{Checkpoint, LayerId, LayerKind, PackedBatch, TinyTransformer, TinyTransformerConfig, WeightSource};
use crate::router::{routing_inputs, RouterConfig, RouterNet, RouterVars, RoutingMode};

/// Optimizer groups of the trainable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Delta,
    Gate,
    Router,
}

/// Everything needed to rebuild an upcycled model around its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpcycleSettings {
    pub experts: usize,
    pub policy: AttachmentPolicy,
    pub gate_init: GateInit,
    pub router: RouterConfig,
}

impl Default for UpcycleSettings {
    fn default() -> Self {
        UpcycleSettings {
            experts: 4,
            policy: AttachmentPolicy::default(),
            gate_init: GateInit::default(),
            router: RouterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpcycledModel {
    pub seed: TinyTransformer,
    pub settings: UpcycleSettings,
    /// Aligned with `seed.config.layer_ids()`; `None` for plain frozen tensors.
    pub layers: Vec<Option<SimoeParam>>,
    pub router: RouterNet,
}

impl UpcycledModel {
    /// Wraps every tensor selected by the policy with a zero delta and freshly initialized gates.
    pub fn attach<R: Rng + ?Sized>(seed: TinyTransformer, settings: UpcycleSettings, rng: &mut R) -> Result<Self> {
        if settings.experts == 0 {
            return Err(Error::Config("at least one expert is required".into()));
        }
        settings.gate_init.constants.validate()?;
        if let Some(i) = seed.weights.iter().position(|w| !w.all_finite()) {
            return Err(Error::Numeric(format!(
                "seed tensor {} is not finite",
                seed.config.layer_ids()[i]
            )));
        }
        let selected = settings.policy.resolve(&seed.config)?;
        let mut layers = Vec::with_capacity(seed.weights.len());
        for (id, w) in seed.config.layer_ids().into_iter().zip(&seed.weights) {
            layers.push(if !selected.contains(&id) {
                None
            } else if id.kind.is_norm() {
                Some(SimoeParam::Vector(SimoeVector::new(
                    id,
                    w.data().to_vec(),
                    settings.experts,
                    &settings.gate_init,
                    rng,
                )?))
            } else {
                Some(SimoeParam::Linear(SimoeLinear::new(
                    id,
                    w.clone(),
                    settings.experts,
                    &settings.gate_init,
                    rng,
                )?))
            });
        }
        let d = seed.config.d_model;
        let router = RouterNet::new(
            d,
            settings.router.hidden.unwrap_or(d),
            settings.experts,
            settings.router.mode,
            rng,
        )?;
        Ok(UpcycledModel {
            seed,
            settings,
            layers,
            router,
        })
    }

    pub fn config(&self) -> &TinyTransformerConfig {
        &self.seed.config
    }

    pub fn experts(&self) -> usize {
        self.settings.experts
    }

    pub fn mode(&self) -> RoutingMode {
        self.router.mode
    }

    pub fn attached(&self) -> impl Iterator<Item = &SimoeParam> {
        self.layers.iter().flatten()
    }

    pub fn attached_mut(&mut self) -> impl Iterator<Item = &mut SimoeParam> {
        self.layers.iter_mut().flatten()
    }

    pub fn wrapped_count(&self) -> usize {
        self.attached().count()
    }

    pub fn layer(&self, id: LayerId) -> Option<&SimoeParam> {
        self.config().index_of(id).and_then(|i| self.layers[i].as_ref())
    }

    /// Group and length of each trainable block, in flat order.
    pub fn param_layout(&self) -> Vec<(ParamGroup, usize)> {
        let mut out = Vec::new();
        for p in self.attached() {
            out.push((ParamGroup::Delta, p.delta_len()));
            out.push((ParamGroup::Gate, p.experts() * p.gate_len()));
        }
        out.push((ParamGroup::Router, self.router.w_hidden.numel()));
        out.push((ParamGroup::Router, self.router.w_out.numel()));
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.param_layout().iter().map(|(_, n)| n).sum()
    }

    /// All trainable values: per attached layer its delta then gate latents, then the router.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_count());
        for p in self.attached() {
            out.extend_from_slice(p.delta());
            for g in p.gates() {
                out.extend_from_slice(&g.log_phi);
            }
        }
        out.extend_from_slice(self.router.w_hidden.data());
        out.extend_from_slice(self.router.w_out.data());
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.trainable_count() {
            return Err(Error::Contract(format!(
                "expected {} trainable values, got {}",
                self.trainable_count(),
                values.len()
            )));
        }
        let mut rest = values;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        for p in self.layers.iter_mut().flatten() {
            let n = p.delta_len();
            p.delta_mut().copy_from_slice(take(n));
            for g in p.gates_mut() {
                let n = g.len();
                g.log_phi.copy_from_slice(take(n));
            }
        }
        let n = self.router.w_hidden.numel();
        self.router.w_hidden.data_mut().copy_from_slice(take(n));
        let n = self.router.w_out.numel();
        self.router.w_out.data_mut().copy_from_slice(take(n));
        Ok(())
    }

    /// Seed parameters plus every delta, gate latent and router weight.
    pub fn upcycled_param_count(&self) -> usize {
        self.seed.param_count() + self.trainable_count()
    }

    /// Parameters needed at inference after pruning: seed, kept delta columns,
    /// per-expert gate values on kept units, router.
    pub fn active_param_count(&self) -> usize {
        self.seed.param_count()
            + self.attached().map(|p| p.prune().stored_params()).sum::<usize>()
            + self.router.param_count()
    }

    /// Fraction of expert-parameters whose gate is not exactly zero, per attached layer.
    pub fn layer_nonzero_fractions(&self) -> Vec<(LayerId, f64)> {
        self.attached()
            .map(|p| {
                let m = p.median_gates();
                let total = (p.experts() * p.gate_len()).max(1);
                let nz = m.iter().flatten().filter(|&&v| v != 0.0).count();
                (p.layer_id(), nz as f64 / total as f64)
            })
            .collect()
    }

    /// One minus the fraction of expert-parameters with a nonzero median gate.
    pub fn exact_sparsity(&self) -> f64 {
        let (mut nonzero, mut total) = (0.0, 0.0);
        for p in self.attached() {
            let w = p.params_per_gate() as f64;
            for z in p.median_gates() {
                nonzero += w * z.iter().filter(|&&v| v != 0.0).count() as f64;
                total += w * z.len() as f64;
            }
        }
        if total == 0.0 {
            0.0
        } else {
            1.0 - nonzero / total
        }
    }

    /// Router inputs for `batch` from the frozen seed.
    pub fn routing_inputs(&self, batch: &PackedBatch) -> Result<Tensor> {
        routing_inputs(&self.seed, self.mode(), batch)
    }

    /// Logits and expert activations (per sequence or per row, by routing mode).
    pub fn forward_with_routes(&self, batch: &PackedBatch) -> Result<(Tensor, Tensor)> {
        let inputs = self.routing_inputs(batch)?;
        let mut tape = Tape::new();
        let b = SimoeBinding::bind(&mut tape, self, batch, &inputs, false)?;
        let out = forward(&mut tape, self.config(), &b, batch)?;
        Ok((tape.value(out.logits).clone(), tape.value(b.alphas).clone()))
    }

    pub fn logits(&self, batch: &PackedBatch) -> Result<Tensor> {
        Ok(self.forward_with_routes(batch)?.0)
    }

    pub fn hidden_states(&self, batch: &PackedBatch) -> Result<Tensor> {
        let inputs = self.routing_inputs(batch)?;
        let mut tape = Tape::new();
        let b = SimoeBinding::bind(&mut tape, self, batch, &inputs, false)?;
        let h = forward_hidden(&mut tape, self.config(), &b, batch)?;
        Ok(tape.value(h).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.seed.to_checkpoint("upcycled");
        ck.config = serde_json::to_value(&self.settings).map_err(|e| Error::Config(e.to_string()))?;
        for p in self.attached() {
            let id = p.layer_id();
            ck.push(format!("delta.{id}"), p.delta_tensor());
            ck.push(format!("log_phi.{id}"), p.log_phi_tensor());
        }
        ck.push("router.w_hidden", self.router.w_hidden.clone());
        ck.push("router.w_out", self.router.w_out.clone());
        ck.push("router.input_mean", Tensor::vector(self.router.input_mean.clone()));
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let settings: UpcycleSettings =
            serde_json::from_value(ck.config.clone()).map_err(|e| Error::Config(format!("upcycle settings: {e}")))?;
        let seed = TinyTransformer::from_checkpoint(ck, "")?;
        let selected = settings.policy.resolve(&seed.config)?;
        let c = settings.gate_init.constants;
        let mut layers = Vec::with_capacity(seed.weights.len());
        for (id, w) in seed.config.layer_ids().into_iter().zip(&seed.weights) {
            if !selected.contains(&id) {
                layers.push(None);
                continue;
            }
            let delta = ck.tensor(&format!("delta.{id}"))?.clone();
            let gates = gate_groups(ck.tensor(&format!("log_phi.{id}"))?, settings.experts, w, id.kind, c)?;
            if delta.shape() != w.shape() {
                return Err(Error::Contract(format!("delta for {id} has shape {:?}", delta.shape())));
            }
            layers.push(Some(if id.kind.is_norm() {
                SimoeParam::Vector(SimoeVector {
                    layer_id: id,
                    theta_pre: w.data().to_vec(),
                    theta_delta: delta.into_data(),
                    gates,
                })
            } else {
                SimoeParam::Linear(SimoeLinear {
                    layer_id: id,
                    theta_pre: w.clone(),
                    theta_delta: delta,
                    gates,
                })
            }));
        }
        let router = RouterNet {
            w_hidden: ck.tensor("router.w_hidden")?.clone(),
            w_out: ck.tensor("router.w_out")?.clone(),
            input_mean: ck.tensor("router.input_mean")?.data().to_vec(),
            mode: settings.router.mode,
        };
        if router.experts() != settings.experts
            || router.input_dim() != seed.config.d_model
            || router.input_mean.len() != seed.config.d_model
        {
            return Err(Error::Contract("router shape disagrees with the settings".into()));
        }
        Ok(UpcycledModel {
            seed,
            settings,
            layers,
            router,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint()?.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        UpcycledModel::from_checkpoint(&Checkpoint::load(dir)?)
    }
}

fn gate_groups(
    log_phi: &Tensor,
    experts: usize,
    weight: &Tensor,
    kind: LayerKind,
    c: GateConstants,
) -> Result<Vec<GateGroup>> {
    let len = if kind.is_norm() { weight.numel() } else { weight.cols() };
    if log_phi.shape() != [experts, len] {
        return Err(Error::Contract(format!(
            "gate latents have shape {:?}",
            log_phi.shape()
        )));
    }
    (0..experts)
        .map(|i| GateGroup::new(log_phi.row(i).to_vec(), c))
        .collect()
}

/// Tape variables of one attached tensor.
#[derive(Debug, Clone, Copy)]
pub struct AttachedVars {
    pub delta: Var,
    /// `M×X` gate latents.
    pub log_phi: Var,
    /// `M×X` median gates.
    pub medians: Var,
    /// Delta parameters controlled by one gate.
    pub params_per_gate: usize,
    pub constants: GateConstants,
}

/// An upcycled model placed on a tape for one packed batch.
///
/// Routing is resolved up front: `alphas` holds one simplex row per sequence
/// (instance mode) or per packed row (token mode).
pub struct SimoeBinding {
    config: TinyTransformerConfig,
    frozen: Vec<Var>,
    attached: Vec<Option<AttachedVars>>,
    pub router: RouterVars,
    pub alphas: Var,
    row_alphas: Var,
    trainable: Vec<Var>,
}

impl SimoeBinding {
    pub fn bind(
        tape: &mut Tape,
        model: &UpcycledModel,
        batch: &PackedBatch,
        route_inputs: &Tensor,
        trainable: bool,
    ) -> Result<Self> {
        let mut frozen = Vec::new();
        let mut attached = Vec::new();
        let mut params = Vec::new();
        for (w, layer) in model.seed.weights.iter().zip(&model.layers) {
            frozen.push(tape.constant(w.clone()));
            attached.push(match layer {
                None => None,
                Some(p) => {
                    let delta = tape.leaf(p.delta_tensor(), trainable);
                    let log_phi = tape.leaf(p.log_phi_tensor(), trainable);
                    let constants = p.gates()[0].constants;
                    let medians = median_gate_var(tape, log_phi, &constants);
                    params.push(delta);
                    params.push(log_phi);
                    Some(AttachedVars {
                        delta,
                        log_phi,
                        medians,
                        params_per_gate: p.params_per_gate(),
                        constants,
                    })
                }
            });
        }
        let router = model.router.bind(tape, trainable);
        params.push(router.w_hidden);
        params.push(router.w_out);

        let expected_rows = match model.mode() {
            RoutingMode::Instance => batch.sequences(),
            RoutingMode::Token => batch.rows(),
        };
        if route_inputs.shape() != [expected_rows, model.router.input_dim()] {
            return Err(Error::Dimension {
                op: "route",
                lhs: route_inputs.shape().to_vec(),
                rhs: vec![expected_rows, model.router.input_dim()],
            });
        }
        let e = tape.constant(model.router.shifted(route_inputs)?);
        let alphas = router.route(tape, e)?;
        let row_alphas = match model.mode() {
            RoutingMode::Instance => tape.gather_rows(alphas, &batch.row_seq)?,
            RoutingMode::Token => alphas,
        };
        Ok(SimoeBinding {
            config: model.config().clone(),
            frozen,
            attached,
            router,
            alphas,
            row_alphas,
            trainable: params,
        })
    }

    /// Trainable variables in the order of `UpcycledModel::flat_params`.
    pub fn trainable(&self) -> &[Var] {
        &self.trainable
    }

    pub fn attached(&self) -> impl Iterator<Item = &AttachedVars> {
        self.attached.iter().flatten()
    }

    /// Gradients of every trainable variable, flattened like `flat_params`.
    pub fn flat_grad(&self, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::new();
        for &v in &self.trainable {
            match tape.grad(v) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, tape.value(v).numel())),
            }
        }
        out
    }

    fn slot(&self, id: LayerId) -> usize {
        self.config.index_of(id).expect("layer id belongs to this model")
    }

    /// Per-row effective gates `A·Z̄`.
    fn row_gates(&self, tape: &mut Tape, a: &AttachedVars) -> Result<Var> {
        tape.matmul(self.row_alphas, a.medians)
    }
}

impl WeightSource for SimoeBinding {
    fn embed(&self, tape: &mut Tape, batch: &PackedBatch) -> Result<Var> {
        let tok = self.slot(LayerId::global(LayerKind::TokEmb));
        let pos = self.frozen[self.slot(LayerId::global(LayerKind::PosEmb))];
        match self.attached[tok] {
            None => dense_embed(tape, self.frozen[tok], pos, batch),
            Some(a) => {
                let base = tape.embedding(self.frozen[tok], &batch.tokens)?;
                let d = tape.embedding(a.delta, &batch.tokens)?;
                let g = self.row_gates(tape, &a)?;
                let gd = tape.mul(d, g)?;
                let t = tape.add(base, gd)?;
                let p = tape.embedding(pos, &batch.positions)?;
                tape.add(t, p)
            }
        }
    }

    fn linear(&self, tape: &mut Tape, id: LayerId, x: Var) -> Result<Var> {
        let i = self.slot(id);
        let pre = tape.matmul_t(x, self.frozen[i])?;
        match self.attached[i] {
            None => Ok(pre),
            Some(a) => {
                let g = self.row_gates(tape, &a)?;
                let gx = tape.mul(x, g)?;
                let d = tape.matmul_t(gx, a.delta)?;
                tape.add(pre, d)
            }
        }
    }

    fn norm(&self, tape: &mut Tape, id: LayerId, x: Var) -> Result<Var> {
        let i = self.slot(id);
        match self.attached[i] {
            None => tape.rmsnorm(x, self.frozen[i]),
            Some(a) => {
                let n = tape.rms_normalize(x)?;
                let g = self.row_gates(tape, &a)?;
                let gd = tape.mul_row(g, a.delta)?;
                let gain = tape.add_row(gd, self.frozen[i])?;
                tape.mul(n, gain)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::layer::AttachMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> TinyTransformerConfig {
        TinyTransformerConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_hidden: 12,
            vocab: 20,
            max_seq: 16,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> PackedBatch {
        let seqs: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let len = rng.random_range(2..10);
                (0..len).map(|_| rng.random_range(0..vocab)).collect()
            })
            .collect();
        let lens: Vec<usize> = seqs.iter().map(|s| rng.random_range(1..=s.len())).collect();
        PackedBatch::for_inference(&seqs, &lens).unwrap()
    }

    fn perturb(model: &mut UpcycledModel, rng: &mut ChaCha8Rng) {
        let mut p = model.flat_params();
        for v in &mut p {
            *v += rng.random_range(-0.5..0.5);
        }
        model.set_flat_params(&p).unwrap();
    }

    #[test]
    fn zero_init_matches_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seed = TinyTransformer::init(TinyTransformerConfig::default(), &mut rng).unwrap();
        for mode in [RoutingMode::Instance, RoutingMode::Token] {
            let settings = UpcycleSettings {
                policy: AttachmentPolicy {
                    include_embedding: true,
                    ..Default::default()
                },
                router: RouterConfig {
                    mode,
                    ..Default::default()
                },
                ..Default::default()
            };
            let m = UpcycledModel::attach(seed.clone(), settings, &mut rng).unwrap();
            assert_eq!(m.wrapped_count(), 21);
            let batch = random_batch(&mut rng, 64, 5);
            let diff = m.logits(&batch).unwrap().max_abs_diff(&seed.logits(&batch).unwrap());
            assert!(diff < 1e-9, "{diff}");
        }
    }

    #[test]
    fn binding_matches_per_layer_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seed = TinyTransformer::init(tiny(), &mut rng).unwrap();
        let mut m = UpcycledModel::attach(seed, UpcycleSettings::default(), &mut rng).unwrap();
        perturb(&mut m, &mut rng);
        let batch = random_batch(&mut rng, 20, 3);
        let inputs = m.routing_inputs(&batch).unwrap();
        let alphas = m.router.route_rows(&inputs).unwrap();
        let mut tape = Tape::new();
        let b = SimoeBinding::bind(&mut tape, &m, &batch, &inputs, false).unwrap();
        let id = LayerId::block(LayerKind::FfnUp, 1);
        let x = Tensor::matrix(
            batch.rows(),
            8,
            (0..batch.rows() * 8).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let xv = tape.constant(x.clone());
        let y = b.linear(&mut tape, id, xv).unwrap();
        let SimoeParam::Linear(layer) = m.layer(id).unwrap() else {
            panic!()
        };
        for r in 0..batch.rows() {
            let a = alphas.row(batch.row_seq[r]);
            let want = layer.merged_weights(a).unwrap().matvec(x.row(r)).unwrap();
            for (p, q) in tape.value(y).row(r).iter().zip(&want) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seed = TinyTransformer::init(tiny(), &mut rng).unwrap();
        let mut m = UpcycledModel::attach(seed, UpcycleSettings::default(), &mut rng).unwrap();
        let p: Vec<f64> = (0..m.trainable_count()).map(|i| i as f64 * 1e-3).collect();
        m.set_flat_params(&p).unwrap();
        assert_eq!(m.flat_params(), p);
        assert!(m.set_flat_params(&p[1..]).is_err());
    }

    #[test]
    fn gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = TinyTransformerConfig { n_layers: 1, ..tiny() };
        let seed = TinyTransformer::init(cfg, &mut rng).unwrap();
        let settings = UpcycleSettings {
            experts: 2,
            policy: AttachmentPolicy {
                include_embedding: true,
                ..Default::default()
            },
            router: RouterConfig {
                hidden: Some(4),
                ..Default::default()
            },
            ..Default::default()
        };
        let mut m = UpcycledModel::attach(seed, settings, &mut rng).unwrap();
        perturb(&mut m, &mut rng);
        let mut batch = random_batch(&mut rng, 20, 2);
        batch.targets = (0..batch.rows()).map(|_| rng.random_range(0..20)).collect();
        batch.loss_mask = vec![true; batch.rows()];
        let inputs = m.routing_inputs(&batch).unwrap();
        let params = m.flat_params();
        let mut probe = m.clone();
        let f = |p: &[f64]| {
            probe.set_flat_params(p)?;
            let mut tape = Tape::new();
            let b = SimoeBinding::bind(&mut tape, &probe, &batch, &inputs, true)?;
            let out = forward(&mut tape, probe.config(), &b, &batch)?;
            let loss = tape.cross_entropy(out.logits, &batch.targets, &batch.loss_mask)?;
            tape.backward(loss)?;
            Ok((tape.value(loss).item(), b.flat_grad(&tape)))
        };
        let coords: Vec<usize> = (0..params.len()).step_by(7).collect();
        let err = finite_difference_check(f, &params, 1e-5, Some(&coords)).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seed = TinyTransformer::init(tiny(), &mut rng).unwrap();
        let settings = UpcycleSettings {
            policy: AttachmentPolicy {
                mode: AttachMode::Explicit(vec!["blocks.1.ffn_norm".into(), "lm_head".into()]),
                ..Default::default()
            },
            ..Default::default()
        };
        let mut m = UpcycledModel::attach(seed, settings, &mut rng).unwrap();
        perturb(&mut m, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(UpcycledModel::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn counts_and_sparsity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seed = TinyTransformer::init(tiny(), &mut rng).unwrap();
        let mut m = UpcycledModel::attach(seed, UpcycleSettings::default(), &mut rng).unwrap();
        assert_eq!(m.exact_sparsity(), 0.0);
        assert!(m.layer_nonzero_fractions().iter().all(|(_, f)| *f == 1.0));
        assert!(m.active_param_count() <= m.upcycled_param_count());
        for p in m.attached_mut() {
            for g in p.gates_mut() {
                g.log_phi.iter_mut().for_each(|v| *v = -10.0);
            }
        }
        assert_eq!(m.exact_sparsity(), 1.0);
        assert_eq!(m.active_param_count(), m.seed.param_count() + m.router.param_count());
    }
}
