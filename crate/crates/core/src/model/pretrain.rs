//! Dense next-token training: seed pretraining and the full fine-tuning baseline.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward, DenseBinding, Example, PackedBatch, TinyTransformer, TinyTransformerConfig};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::training::{batch_indices, MetricsWriter};

/// Consecutive steps above the initial loss that count as divergence.
pub const DIVERGENCE_WINDOW: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub deterministic_metrics: bool,
}

impl Default for DenseTrainConfig {
    fn default() -> Self {
        DenseTrainConfig {
            steps: 2000,
            batch_size: 16,
            adam: AdamConfig {
                lr: 3e-3,
                ..Default::default()
            },
            seed: 0,
            deterministic_metrics: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMetrics {
    pub step: usize,
    pub nll: f64,
    pub lr: f64,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone)]
pub struct DenseReport {
    pub model: TinyTransformer,
    pub metrics: Vec<DenseMetrics>,
    /// Training stopped because the loss stayed above its starting value too long.
    pub diverged: bool,
}

/// Adam on every seed parameter. `loss_on_prompt` scores prompt tokens too.
pub fn train_dense(
    mut model: TinyTransformer,
    examples: &[Example],
    cfg: &DenseTrainConfig,
    loss_on_prompt: bool,
    out: Option<&Path>,
) -> Result<DenseReport> {
    cfg.adam.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(MetricsWriter::create(&dir.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let started = Instant::now();
    let mut opt = Adam::new(cfg.adam, model.param_count());
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut initial = None;
    let mut above = 0;
    let mut diverged = false;
    for step in 0..cfg.steps {
        let idx = batch_indices(examples.len(), cfg.batch_size, cfg.seed, step);
        let refs: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let batch = PackedBatch::for_training(&refs, loss_on_prompt)?;
        let mut tape = Tape::new();
        let b = DenseBinding::bind(&mut tape, &model, true);
        let out = forward(&mut tape, &model.config, &b, &batch)?;
        let loss = tape.cross_entropy(out.logits, &batch.targets, &batch.loss_mask)?;
        let nll = tape.value(loss).item();
        if !nll.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        tape.backward(loss)?;
        let grads: Vec<f64> = b.vars().iter().flat_map(|&v| tape.grad(v).unwrap().to_vec()).collect();
        let mut params: Vec<f64> = model.weights.iter().flat_map(|w| w.data().to_vec()).collect();
        let n = params.len();
        opt.step(&mut params, &grads, &[(n, cfg.adam.lr)])?;
        let mut rest = params.as_slice();
        for w in &mut model.weights {
            let n = w.numel();
            w.data_mut().copy_from_slice(&rest[..n]);
            rest = &rest[n..];
        }
        let m = DenseMetrics {
            step: step + 1,
            nll,
            lr: cfg.adam.lr,
            wallclock_ms: if cfg.deterministic_metrics {
                0
            } else {
                started.elapsed().as_millis() as u64
            },
        };
        if let Some(w) = writer.as_mut() {
            w.write(&m)?;
        }
        metrics.push(m);
        let start = *initial.get_or_insert(nll);
        above = if nll > start { above + 1 } else { 0 };
        if above >= DIVERGENCE_WINDOW {
            diverged = true;
            break;
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    Ok(DenseReport {
        model,
        metrics,
        diverged,
    })
}

/// Trains a freshly initialized model on whole prompt + target streams.
pub fn pretrain(
    arch: TinyTransformerConfig,
    examples: &[Example],
    cfg: &DenseTrainConfig,
    out: Option<&Path>,
) -> Result<DenseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = TinyTransformer::init(arch, &mut rng)?;
    train_dense(model, examples, cfg, true, out)
}

/// Fine-tunes every seed parameter on target tokens only.
pub fn full_finetune(
    seed: TinyTransformer,
    examples: &[Example],
    cfg: &DenseTrainConfig,
    out: Option<&Path>,
) -> Result<DenseReport> {
    train_dense(seed, examples, cfg, false, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::data::generate_corpus;
    use crate::model::CorpusConfig;

    fn tiny() -> TinyTransformerConfig {
        TinyTransformerConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 32,
            vocab: 32,
            max_seq: 24,
        }
    }

    fn data() -> Vec<Example> {
        let cfg = CorpusConfig {
            domains: vec!["copy".into()],
            n_per_domain: 40,
            alphabet: 8,
            ..Default::default()
        };
        generate_corpus(&cfg, 32).unwrap().train
    }

    #[test]
    fn zero_steps_return_the_input() {
        let d = data();
        let cfg = DenseTrainConfig {
            steps: 0,
            ..Default::default()
        };
        let r = pretrain(tiny(), &d, &cfg, None).unwrap();
        let init = TinyTransformer::init(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.model, init);
        let ft = full_finetune(init.clone(), &d, &cfg, None).unwrap();
        assert_eq!(ft.model, init);
    }

    #[test]
    fn training_lowers_the_loss_deterministically() {
        let d = data();
        let cfg = DenseTrainConfig {
            steps: 60,
            batch_size: 8,
            deterministic_metrics: true,
            ..Default::default()
        };
        let a = pretrain(tiny(), &d, &cfg, None).unwrap();
        let b = pretrain(tiny(), &d, &cfg, None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
        assert!(!a.diverged);
        let head: f64 = a.metrics[..5].iter().map(|m| m.nll).sum();
        let tail: f64 = a.metrics[55..].iter().map(|m| m.nll).sum();
        assert!(tail < head);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(
            pretrain(tiny(), &[], &DenseTrainConfig::default(), None),
            Err(Error::Config(_))
        ));
    }
}
