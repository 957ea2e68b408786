//! Llama-style tiny decoder: RMS norms, gated SiLU feed-forward, no biases.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{LayerId, LayerKind, TinyTransformerConfig};
use super::data::Example;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TinyTransformer {
    pub config: TinyTransformerConfig,
    /// One tensor per entry of `config.layer_ids()`.
    pub weights: Vec<Tensor>,
}

impl TinyTransformer {
    pub fn init<R: Rng + ?Sized>(config: TinyTransformerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let weights = config
            .layer_ids()
            .into_iter()
            .map(|id| {
                let shape = config.shape_of(id);
                let std = match id.kind {
                    k if k.is_norm() => return Tensor::full(&shape, 1.0),
                    LayerKind::TokEmb | LayerKind::PosEmb => 0.5,
                    LayerKind::AttnOut | LayerKind::FfnDown => out_scale / (shape[1] as f64).sqrt(),
                    _ => 1.0 / (shape[1] as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
            })
            .collect();
        Ok(TinyTransformer { config, weights })
    }

    pub fn from_weights(config: TinyTransformerConfig, weights: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let ids = config.layer_ids();
        if ids.len() != weights.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                ids.len(),
                weights.len()
            )));
        }
        for (id, w) in ids.iter().zip(&weights) {
            if w.shape() != config.shape_of(*id).as_slice() {
                return Err(Error::Dimension {
                    op: "from_weights",
                    lhs: config.shape_of(*id),
                    rhs: w.shape().to_vec(),
                });
            }
            if !w.all_finite() {
                return Err(Error::Numeric(format!("non-finite weights in {id}")));
            }
        }
        Ok(TinyTransformer { config, weights })
    }

    pub fn weight(&self, id: LayerId) -> &Tensor {
        &self.weights[self.config.index_of(id).expect("layer id belongs to this model")]
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }

    /// Logits for every packed row.
    pub fn logits(&self, batch: &PackedBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = DenseBinding::bind(&mut tape, self, false);
        let out = forward(&mut tape, &self.config, &b, batch)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Final-layer hidden states (after the final norm) for every packed row.
    pub fn hidden_states(&self, batch: &PackedBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = DenseBinding::bind(&mut tape, self, false);
        let out = forward_hidden(&mut tape, &self.config, &b, batch)?;
        Ok(tape.value(out).clone())
    }
}

/// Several sequences packed row-wise, with next-token targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PackedBatch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    /// `(start_row, length)` of each sequence.
    pub segments: Vec<(usize, usize)>,
    pub prompt_lens: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
    /// Sequence index of each row.
    pub row_seq: Vec<usize>,
}

impl PackedBatch {
    /// Teacher-forced rows: inputs are `prompt ++ target[..-1]`, each row predicts the next token.
    ///
    /// With `loss_on_prompt` every next-token position is scored, otherwise only target tokens.
    pub fn for_training(examples: &[&Example], loss_on_prompt: bool) -> Result<Self> {
        let mut b = PackedBatch::default();
        for (s, ex) in examples.iter().enumerate() {
            if ex.prompt.is_empty() || ex.target.is_empty() {
                return Err(Error::Degenerate(format!("example {} has an empty side", ex.id)));
            }
            let full: Vec<usize> = ex.prompt.iter().chain(&ex.target).copied().collect();
            let n = full.len() - 1;
            b.segments.push((b.tokens.len(), n));
            b.prompt_lens.push(ex.prompt.len());
            for t in 0..n {
                b.tokens.push(full[t]);
                b.positions.push(t);
                b.targets.push(full[t + 1]);
                b.loss_mask.push(loss_on_prompt || t + 1 >= ex.prompt.len());
                b.row_seq.push(s);
            }
        }
        Ok(b)
    }

    /// Plain sequences for inference; `prompt_lens` marks where each prompt ends.
    pub fn for_inference(seqs: &[Vec<usize>], prompt_lens: &[usize]) -> Result<Self> {
        let mut b = PackedBatch::default();
        for (s, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Degenerate("empty sequence".into()));
            }
            b.segments.push((b.tokens.len(), seq.len()));
            b.prompt_lens.push(prompt_lens[s]);
            for (t, &tok) in seq.iter().enumerate() {
                b.tokens.push(tok);
                b.positions.push(t);
                b.targets.push(0);
                b.loss_mask.push(false);
                b.row_seq.push(s);
            }
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn sequences(&self) -> usize {
        self.segments.len()
    }

    pub fn last_rows(&self) -> Vec<usize> {
        self.segments.iter().map(|&(s, l)| s + l - 1).collect()
    }

    /// Rows of the last prompt token of each sequence.
    pub fn prompt_end_rows(&self) -> Vec<usize> {
        self.segments
            .iter()
            .zip(&self.prompt_lens)
            .map(|(&(s, l), &p)| s + p.min(l) - 1)
            .collect()
    }

    /// The prompt portion of every sequence as its own batch.
    pub fn prompts(&self) -> Result<PackedBatch> {
        let seqs: Vec<Vec<usize>> = self
            .segments
            .iter()
            .zip(&self.prompt_lens)
            .map(|(&(s, l), &p)| self.tokens[s..s + p.min(l)].to_vec())
            .collect();
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        PackedBatch::for_inference(&seqs, &lens)
    }
}

/// Supplies the parameter-dependent pieces of the forward pass.
pub trait WeightSource {
    fn embed(&self, tape: &mut Tape, batch: &PackedBatch) -> Result<Var>;
    fn linear(&self, tape: &mut Tape, id: LayerId, x: Var) -> Result<Var>;
    fn norm(&self, tape: &mut Tape, id: LayerId, x: Var) -> Result<Var>;
}

pub struct ForwardOutput {
    pub hidden: Var,
    pub logits: Var,
}

pub fn forward_hidden(
    tape: &mut Tape,
    cfg: &TinyTransformerConfig,
    src: &dyn WeightSource,
    batch: &PackedBatch,
) -> Result<Var> {
    if let Some(&p) = batch.positions.iter().find(|&&p| p >= cfg.max_seq) {
        return Err(Error::Contract(format!("position {p} exceeds max_seq {}", cfg.max_seq)));
    }
    if let Some(&t) = batch.tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Contract(format!("token {t} outside vocab {}", cfg.vocab)));
    }
    let mut x = src.embed(tape, batch)?;
    for depth in 0..cfg.n_layers {
        let id = |kind| LayerId::block(kind, depth);
        let h = src.norm(tape, id(LayerKind::AttnNorm), x)?;
        let q = src.linear(tape, id(LayerKind::Query), h)?;
        let k = src.linear(tape, id(LayerKind::Key), h)?;
        let v = src.linear(tape, id(LayerKind::Value), h)?;
        let a = tape.causal_attention(q, k, v, &batch.segments, cfg.n_heads)?;
        let o = src.linear(tape, id(LayerKind::AttnOut), a)?;
        x = tape.add(x, o)?;

        let h = src.norm(tape, id(LayerKind::FfnNorm), x)?;
        let gate = src.linear(tape, id(LayerKind::FfnGate), h)?;
        let gate = tape.silu(gate);
        let up = src.linear(tape, id(LayerKind::FfnUp), h)?;
        let m = tape.mul(gate, up)?;
        let down = src.linear(tape, id(LayerKind::FfnDown), m)?;
        x = tape.add(x, down)?;
    }
    src.norm(tape, LayerId::global(LayerKind::FinalNorm), x)
}

pub fn forward(
    tape: &mut Tape,
    cfg: &TinyTransformerConfig,
    src: &dyn WeightSource,
    batch: &PackedBatch,
) -> Result<ForwardOutput> {
    let hidden = forward_hidden(tape, cfg, src, batch)?;
    let logits = src.linear(tape, LayerId::global(LayerKind::LmHead), hidden)?;
    Ok(ForwardOutput { hidden, logits })
}

/// Plain dense weights placed on a tape, trainable or frozen.
pub struct DenseBinding {
    config: TinyTransformerConfig,
    vars: Vec<Var>,
}

impl DenseBinding {
    pub fn bind(tape: &mut Tape, model: &TinyTransformer, trainable: bool) -> Self {
        let vars = model.weights.iter().map(|w| tape.leaf(w.clone(), trainable)).collect();
        DenseBinding {
            config: model.config.clone(),
            vars,
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: LayerId) -> Var {
        self.vars[self.config.index_of(id).expect("layer id belongs to this model")]
    }
}

pub(crate) fn dense_embed(tape: &mut Tape, tok: Var, pos: Var, batch: &PackedBatch) -> Result<Var> {
    let t = tape.embedding(tok, &batch.tokens)?;
    let p = tape.embedding(pos, &batch.positions)?;
    tape.add(t, p)
}

impl WeightSource for DenseBinding {
    fn embed(&self, tape: &mut Tape, batch: &PackedBatch) -> Result<Var> {
        dense_embed(
            tape,
            self.var(LayerId::global(LayerKind::TokEmb)),
            self.var(LayerId::global(LayerKind::PosEmb)),
            batch,
        )
    }

    fn linear(&self, tape: &mut Tape, id: LayerId, x: Var) -> Result<Var> {
        tape.matmul_t(x, self.var(id))
    }

    fn norm(&self, tape: &mut Tape, id: LayerId, x: Var) -> Result<Var> {
        tape.rmsnorm(x, self.var(id))
    }
}
