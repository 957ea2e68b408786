//! Pruned inference models: only gate-reachable delta units are kept, and the
//! forward pass gathers just those input columns.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{ExpertSupport, LayerMasks};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::{per_sequence_routes, LanguageModel};
use crate::layer::PrunedLayer;
use crate::model::transformer::{dense_embed, forward};
use crate::model::{Checkpoint, LayerId, LayerKind, PackedBatch, TinyTransformer, TinyTransformerConfig, WeightSource};
use crate::router::{routing_inputs, RouterNet, RoutingMode};
use crate::upcycle::{UpcycleSettings, UpcycledModel};

/// Manifest extras of a pruned checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PrunedExtra {
    active_param_count: usize,
    kept: BTreeMap<String, Vec<usize>>,
    gate_len: BTreeMap<String, usize>,
}

/// An upcycled model reduced to what inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModel {
    pub seed: TinyTransformer,
    pub settings: UpcycleSettings,
    /// Aligned with `seed.config.layer_ids()`.
    pub layers: Vec<Option<PrunedLayer>>,
    /// Full-length expert masks of each attached tensor, as trained.
    pub masks: Vec<LayerMasks>,
    pub router: RouterNet,
}

/// Drops kept units whose delta entries are all zero; they cannot change the output.
fn drop_inert(mut p: PrunedLayer) -> PrunedLayer {
    let k = p.kept.len();
    let rows = if p.vector { 1 } else { p.delta.rows() };
    let live: Vec<usize> = (0..k)
        .filter(|&c| (0..rows).any(|r| p.delta.data()[r * k + c] != 0.0))
        .collect();
    if live.len() == k {
        return p;
    }
    let data: Vec<f64> = (0..rows)
        .flat_map(|r| live.iter().map(move |&c| r * k + c))
        .map(|i| p.delta.data()[i])
        .collect();
    p.delta = if p.vector {
        Tensor::vector(data)
    } else {
        Tensor::matrix(rows, live.len(), data).expect("live columns")
    };
    p.gate_values = p
        .gate_values
        .iter()
        .map(|z| live.iter().map(|&c| z[c]).collect())
        .collect();
    p.kept = live.iter().map(|&c| p.kept[c]).collect();
    p
}

fn pack_bits(mask: &[bool]) -> Vec<u8> {
    mask.chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |b, (i, &on)| b | ((on as u8) << i)))
        .collect()
}

fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|j| bytes[j / 8] >> (j % 8) & 1 == 1).collect()
}

impl PrunedModel {
    pub fn from_upcycled(model: &UpcycledModel) -> Self {
        PrunedModel {
            seed: model.seed.clone(),
            settings: model.settings.clone(),
            layers: model
                .layers
                .iter()
                .map(|l| l.as_ref().map(|p| drop_inert(p.prune())))
                .collect(),
            masks: model.expert_masks(),
            router: model.router.clone(),
        }
    }

    pub fn config(&self) -> &TinyTransformerConfig {
        &self.seed.config
    }

    pub fn mode(&self) -> RoutingMode {
        self.router.mode
    }

    pub fn pruned(&self) -> impl Iterator<Item = &PrunedLayer> {
        self.layers.iter().flatten()
    }

    /// Seed, kept delta units, per-expert gate values on them, and router weights.
    pub fn active_param_count(&self) -> usize {
        self.seed.param_count()
            + self.pruned().map(PrunedLayer::stored_params).sum::<usize>()
            + self.router.param_count()
    }

    /// Delta entries still stored.
    pub fn delta_param_count(&self) -> usize {
        self.pruned().map(|p| p.delta.numel()).sum()
    }

    pub fn logits(&self, batch: &PackedBatch) -> Result<Tensor> {
        let routes = self
            .router
            .route_rows(&routing_inputs(&self.seed, self.mode(), batch)?)?;
        let mut tape = Tape::new();
        let b = PrunedBinding::bind(&mut tape, self, batch, routes)?;
        let out = forward(&mut tape, self.config(), &b, batch)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.seed.to_checkpoint("pruned");
        ck.config = serde_json::to_value(&self.settings).map_err(|e| Error::Config(e.to_string()))?;
        let mut extra = PrunedExtra {
            active_param_count: self.active_param_count(),
            kept: BTreeMap::new(),
            gate_len: BTreeMap::new(),
        };
        for (p, masks) in self.pruned().zip(&self.masks) {
            let id = p.layer_id;
            let len = masks.masks.first().map_or(0, Vec::len);
            let width = len.div_ceil(8);
            ck.push(format!("delta.{id}"), p.delta.clone());
            let gates = p.gate_values.iter().flatten().copied().collect();
            ck.push(format!("gates.{id}"), Tensor::matrix(p.experts(), p.kept.len(), gates)?);
            let bits = masks.masks.iter().flat_map(|m| pack_bits(m)).collect();
            ck.push_bytes(format!("mask.{id}"), vec![masks.masks.len(), width], bits);
            extra.kept.insert(id.name(), p.kept.clone());
            extra.gate_len.insert(id.name(), len);
        }
        ck.push("router.w_hidden", self.router.w_hidden.clone());
        ck.push("router.w_out", self.router.w_out.clone());
        ck.push("router.input_mean", Tensor::vector(self.router.input_mean.clone()));
        ck.extra = serde_json::to_value(&extra).map_err(|e| Error::Config(e.to_string()))?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "pruned" {
            return Err(Error::Contract(format!(
                "expected a pruned checkpoint, found {:?}",
                ck.kind
            )));
        }
        let settings: UpcycleSettings =
            serde_json::from_value(ck.config.clone()).map_err(|e| Error::Config(format!("upcycle settings: {e}")))?;
        let extra: PrunedExtra =
            serde_json::from_value(ck.extra.clone()).map_err(|e| Error::Config(format!("pruned manifest: {e}")))?;
        let seed = TinyTransformer::from_checkpoint(ck, "")?;
        let m = settings.experts;
        let mut layers = Vec::new();
        let mut masks = Vec::new();
        for (id, w) in seed.config.layer_ids().into_iter().zip(&seed.weights) {
            let Some(kept) = extra.kept.get(&id.name()) else {
                layers.push(None);
                continue;
            };
            let vector = id.kind.is_norm();
            let len = extra.gate_len[&id.name()];
            let delta = ck.tensor(&format!("delta.{id}"))?.clone();
            let gates = ck.tensor(&format!("gates.{id}"))?;
            let bits = ck.bytes(&format!("mask.{id}"))?;
            let width = len.div_ceil(8);
            let expected = if vector {
                vec![kept.len()]
            } else {
                vec![w.rows(), kept.len()]
            };
            if gates.shape() != [m, kept.len()] || delta.shape() != expected.as_slice() || bits.len() != m * width {
                return Err(Error::Contract(format!(
                    "pruned tensors of {id} disagree with the manifest"
                )));
            }
            masks.push(LayerMasks {
                layer_id: id,
                params_per_gate: if vector { 1 } else { w.rows() },
                masks: bits.chunks(width.max(1)).take(m).map(|b| unpack_bits(b, len)).collect(),
            });
            layers.push(Some(PrunedLayer {
                layer_id: id,
                theta_pre: w.clone(),
                delta,
                kept: kept.clone(),
                gate_values: (0..m).map(|i| gates.row(i).to_vec()).collect(),
                vector,
            }));
        }
        let router = RouterNet {
            w_hidden: ck.tensor("router.w_hidden")?.clone(),
            w_out: ck.tensor("router.w_out")?.clone(),
            input_mean: ck.tensor("router.input_mean")?.data().to_vec(),
            mode: settings.router.mode,
        };
        let model = PrunedModel {
            seed,
            settings,
            layers,
            masks,
            router,
        };
        if model.active_param_count() != extra.active_param_count {
            return Err(Error::Contract(
                "recorded active parameter count does not match the tensors".into(),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint()?.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        PrunedModel::from_checkpoint(&Checkpoint::load(dir)?)
    }
}

/// Prunes `model` and writes it to `dir`.
pub fn export_pruned(model: &UpcycledModel, dir: &Path) -> Result<PrunedModel> {
    let pruned = PrunedModel::from_upcycled(model);
    pruned.save(dir)?;
    Ok(pruned)
}

impl ExpertSupport for PrunedModel {
    fn experts(&self) -> usize {
        self.settings.experts
    }

    fn expert_masks(&self) -> Vec<LayerMasks> {
        self.masks.clone()
    }
}

impl LanguageModel for PrunedModel {
    fn config(&self) -> &TinyTransformerConfig {
        PrunedModel::config(self)
    }

    fn logits(&self, batch: &PackedBatch) -> Result<Tensor> {
        PrunedModel::logits(self, batch)
    }

    fn prompt_routes(&self, batch: &PackedBatch) -> Result<Option<Tensor>> {
        let routes = self
            .router
            .route_rows(&routing_inputs(&self.seed, self.mode(), batch)?)?;
        Ok(Some(per_sequence_routes(self.mode(), batch, routes)?))
    }
}

struct PrunedVars {
    /// Compact delta for matrices; full-length (zero-filled) for gains and embeddings.
    delta: Var,
    /// `M×K` gate values, or `M×X` when the delta is full-length.
    gates: Var,
    kept: Vec<usize>,
}

/// Inference-only binding of a pruned model for one batch.
struct PrunedBinding {
    config: TinyTransformerConfig,
    frozen: Vec<Var>,
    attached: Vec<Option<PrunedVars>>,
    row_alphas: Var,
}

fn expand(p: &PrunedLayer, full_cols: usize) -> (Tensor, Tensor) {
    let k = p.kept.len();
    let rows = if p.vector { 1 } else { p.delta.rows() };
    let mut delta = vec![0.0; rows * full_cols];
    for r in 0..rows {
        for (c, &j) in p.kept.iter().enumerate() {
            delta[r * full_cols + j] = p.delta.data()[r * k + c];
        }
    }
    let mut gates = vec![0.0; p.experts() * full_cols];
    for (i, z) in p.gate_values.iter().enumerate() {
        for (c, &j) in p.kept.iter().enumerate() {
            gates[i * full_cols + j] = z[c];
        }
    }
    let delta = if p.vector {
        Tensor::vector(delta)
    } else {
        Tensor::matrix(rows, full_cols, delta).expect("full delta")
    };
    (
        delta,
        Tensor::matrix(p.experts(), full_cols, gates).expect("full gates"),
    )
}

impl PrunedBinding {
    fn bind(tape: &mut Tape, model: &PrunedModel, batch: &PackedBatch, routes: Tensor) -> Result<Self> {
        let mut frozen = Vec::new();
        let mut attached = Vec::new();
        for (w, layer) in model.seed.weights.iter().zip(&model.layers) {
            frozen.push(tape.constant(w.clone()));
            attached.push(layer.as_ref().map(|p| {
                let full = p.vector || p.layer_id.kind == LayerKind::TokEmb;
                let (delta, gates) = if full {
                    expand(p, if p.vector { w.numel() } else { w.cols() })
                } else {
                    let g = p.gate_values.iter().flatten().copied().collect();
                    (
                        p.delta.clone(),
                        Tensor::matrix(p.experts(), p.kept.len(), g).expect("kept gates"),
                    )
                };
                PrunedVars {
                    delta: tape.constant(delta),
                    gates: tape.constant(gates),
                    kept: if full { Vec::new() } else { p.kept.clone() },
                }
            }));
        }
        let alphas = tape.constant(routes);
        let row_alphas = match model.mode() {
            RoutingMode::Instance => tape.gather_rows(alphas, &batch.row_seq)?,
            RoutingMode::Token => alphas,
        };
        Ok(PrunedBinding {
            config: model.config().clone(),
            frozen,
            attached,
            row_alphas,
        })
    }

    fn slot(&self, id: LayerId) -> usize {
        self.config.index_of(id).expect("layer id belongs to this model")
    }
}

impl WeightSource for PrunedBinding {
    fn embed(&self, tape: &mut Tape, batch: &PackedBatch) -> Result<Var> {
        let tok = self.slot(LayerId::global(LayerKind::TokEmb));
        let pos = self.frozen[self.slot(LayerId::global(LayerKind::PosEmb))];
        match &self.attached[tok] {
            None => dense_embed(tape, self.frozen[tok], pos, batch),
            Some(a) => {
                let base = tape.embedding(self.frozen[tok], &batch.tokens)?;
                let d = tape.embedding(a.delta, &batch.tokens)?;
                let g = tape.matmul(self.row_alphas, a.gates)?;
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
        match &self.attached[i] {
            Some(a) if !a.kept.is_empty() => {
                let xk = tape.gather_cols(x, &a.kept)?;
                let g = tape.matmul(self.row_alphas, a.gates)?;
                let gx = tape.mul(xk, g)?;
                let d = tape.matmul_t(gx, a.delta)?;
                tape.add(pre, d)
            }
            _ => Ok(pre),
        }
    }

    fn norm(&self, tape: &mut Tape, id: LayerId, x: Var) -> Result<Var> {
        let i = self.slot(id);
        match &self.attached[i] {
            None => tape.rmsnorm(x, self.frozen[i]),
            Some(a) => {
                let n = tape.rms_normalize(x)?;
                let g = tape.matmul(self.row_alphas, a.gates)?;
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
    use crate::layer::AttachmentPolicy;
    use crate::router::RouterConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> TinyTransformerConfig {
        TinyTransformerConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_hidden: 16,
            vocab: 32,
            max_seq: 16,
        }
    }

    fn prompts(rng: &mut ChaCha8Rng, n: usize) -> PackedBatch {
        let seqs: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let len = rng.random_range(2..12);
                (0..len).map(|_| rng.random_range(4..32)).collect()
            })
            .collect();
        let lens: Vec<usize> = seqs.iter().map(|s| s.len() - 1).collect();
        PackedBatch::for_inference(&seqs, &lens).unwrap()
    }

    /// A model with random deltas, router weights and gates, some of them exactly zero.
    fn trained(mode: RoutingMode, embedding: bool) -> UpcycledModel {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seed = TinyTransformer::init(tiny(), &mut rng).unwrap();
        let settings = UpcycleSettings {
            policy: AttachmentPolicy {
                include_embedding: embedding,
                ..Default::default()
            },
            router: RouterConfig {
                mode,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut m = UpcycledModel::attach(seed, settings, &mut rng).unwrap();
        for p in m.attached_mut() {
            p.delta_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            for g in p.gates_mut() {
                g.log_phi.iter_mut().for_each(|v| *v = rng.random_range(-4.0..3.0));
            }
        }
        m.router
            .w_out
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        m
    }

    #[test]
    fn pruned_logits_match_in_memory_and_after_reload() {
        for (mode, emb) in [(RoutingMode::Instance, true), (RoutingMode::Token, false)] {
            let m = trained(mode, emb);
            let dir = tempfile::tempdir().unwrap();
            let p = export_pruned(&m, dir.path()).unwrap();
            assert!(p.delta_param_count() < m.trainable_count());
            let loaded = PrunedModel::load(dir.path()).unwrap();
            assert_eq!(loaded, p);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let batch = prompts(&mut rng, 50);
            let want = m.logits(&batch).unwrap();
            assert!(p.logits(&batch).unwrap().max_abs_diff(&want) < 1e-10);
            assert!(loaded.logits(&batch).unwrap().max_abs_diff(&want) < 1e-10);
        }
    }

    #[test]
    fn zero_delta_export_is_the_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seed = TinyTransformer::init(tiny(), &mut rng).unwrap();
        let m = UpcycledModel::attach(seed.clone(), UpcycleSettings::default(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_pruned(&m, dir.path()).unwrap();
        let p = PrunedModel::load(dir.path()).unwrap();
        assert_eq!(p.delta_param_count(), 0);
        let batch = prompts(&mut rng, 20);
        assert!(p.logits(&batch).unwrap().max_abs_diff(&seed.logits(&batch).unwrap()) < 1e-9);
        assert_eq!(p.active_param_count(), seed.param_count() + m.router.param_count());
    }

    #[test]
    fn masks_survive_the_round_trip() {
        let m = trained(RoutingMode::Instance, false);
        let dir = tempfile::tempdir().unwrap();
        export_pruned(&m, dir.path()).unwrap();
        let p = PrunedModel::load(dir.path()).unwrap();
        assert_eq!(p.expert_masks(), m.expert_masks());
        let a = crate::analysis::overlap_report(&m).unwrap();
        assert_eq!(crate::analysis::overlap_report(&p).unwrap(), a);
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["extra"]["active_param_count"], p.active_param_count());
    }

    #[test]
    fn bit_packing_round_trips() {
        let mask: Vec<bool> = (0..13).map(|i| i % 3 == 0).collect();
        let b = pack_bits(&mask);
        assert_eq!(b.len(), 2);
        assert_eq!(unpack_bits(&b, 13), mask);
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let m = trained(RoutingMode::Instance, false);
        assert!(matches!(
            PrunedModel::from_checkpoint(&m.to_checkpoint().unwrap()),
            Err(Error::Contract(_))
        ));
    }
}
