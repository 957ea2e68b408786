//! Greedy decoding and task metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::tokenizer::EOS;
use crate::model::{Example, PackedBatch, TinyTransformer, TinyTransformerConfig};
use crate::router::RoutingMode;
use crate::upcycle::UpcycledModel;

/// Anything that scores packed batches.
pub trait LanguageModel: Sync {
    fn config(&self) -> &TinyTransformerConfig;

    fn logits(&self, batch: &PackedBatch) -> Result<Tensor>;

    /// Expert activations for each sequence's prompt, when the model routes.
    fn prompt_routes(&self, _batch: &PackedBatch) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

impl LanguageModel for TinyTransformer {
    fn config(&self) -> &TinyTransformerConfig {
        &self.config
    }

    fn logits(&self, batch: &PackedBatch) -> Result<Tensor> {
        TinyTransformer::logits(self, batch)
    }
}

/// Per-sequence activations: instance routes as-is, token routes averaged over prompt rows.
pub(crate) fn per_sequence_routes(mode: RoutingMode, batch: &PackedBatch, routes: Tensor) -> Result<Tensor> {
    match mode {
        RoutingMode::Instance => Ok(routes),
        RoutingMode::Token => {
            let m = routes.cols();
            let rows: Vec<Vec<f64>> = batch
                .segments
                .iter()
                .zip(&batch.prompt_lens)
                .map(|(&(s, l), &p)| {
                    let n = p.min(l);
                    let mut acc = vec![0.0; m];
                    for r in s..s + n {
                        for (a, v) in acc.iter_mut().zip(routes.row(r)) {
                            *a += v / n as f64;
                        }
                    }
                    acc
                })
                .collect();
            Tensor::from_rows(&rows)
        }
    }
}

impl LanguageModel for UpcycledModel {
    fn config(&self) -> &TinyTransformerConfig {
        UpcycledModel::config(self)
    }

    fn logits(&self, batch: &PackedBatch) -> Result<Tensor> {
        UpcycledModel::logits(self, batch)
    }

    fn prompt_routes(&self, batch: &PackedBatch) -> Result<Option<Tensor>> {
        let inputs = self.routing_inputs(batch)?;
        let routes = self.router.route_rows(&inputs)?;
        Ok(Some(per_sequence_routes(self.mode(), batch, routes)?))
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuations of each prompt, stopping after `EOS` or at `max_seq`.
pub fn greedy_decode(model: &dyn LanguageModel, prompts: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    let max_seq = model.config().max_seq;
    if let Some(p) = prompts.iter().find(|p| p.is_empty() || p.len() >= max_seq) {
        return Err(Error::Degenerate(format!(
            "prompt of length {} cannot be decoded",
            p.len()
        )));
    }
    let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
    let mut done = vec![false; prompts.len()];
    let lens: Vec<usize> = prompts.iter().map(Vec::len).collect();
    while done.iter().any(|d| !d) {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| !done[i]).collect();
        let batch_seqs: Vec<Vec<usize>> = active.iter().map(|&i| seqs[i].clone()).collect();
        let batch_lens: Vec<usize> = active.iter().map(|&i| lens[i]).collect();
        let batch = PackedBatch::for_inference(&batch_seqs, &batch_lens)?;
        let logits = model.logits(&batch)?;
        for (&i, row) in active.iter().zip(batch.last_rows()) {
            let next = argmax(logits.row(row));
            seqs[i].push(next);
            if next == EOS || seqs[i].len() >= max_seq {
                done[i] = true;
            }
        }
    }
    Ok(seqs.into_iter().zip(lens).map(|(s, l)| s[l..].to_vec()).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub n: usize,
    pub exact_match: f64,
    pub token_accuracy: f64,
    /// Mean expert activation over the domain's examples.
    pub mean_alpha: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub per_domain: BTreeMap<String, DomainReport>,
}

/// Fraction of target positions reproduced at the same index.
pub fn token_accuracy(decoded: &[usize], target: &[usize]) -> f64 {
    if target.is_empty() {
        return 1.0;
    }
    let hits = target.iter().zip(decoded).filter(|(a, b)| a == b).count();
    hits as f64 / target.len() as f64
}

struct Scored {
    exact: bool,
    acc: f64,
    alpha: Option<Vec<f64>>,
}

const EVAL_CHUNK: usize = 64;

fn score_chunk(model: &dyn LanguageModel, chunk: &[Example]) -> Result<Vec<Scored>> {
    let prompts: Vec<Vec<usize>> = chunk.iter().map(|e| e.prompt.clone()).collect();
    let decoded = greedy_decode(model, &prompts)?;
    let lens: Vec<usize> = prompts.iter().map(Vec::len).collect();
    let routes = model.prompt_routes(&PackedBatch::for_inference(&prompts, &lens)?)?;
    Ok(chunk
        .iter()
        .zip(decoded)
        .enumerate()
        .map(|(i, (ex, d))| Scored {
            exact: d == ex.target,
            acc: token_accuracy(&d, &ex.target),
            alpha: routes.as_ref().map(|r| r.row(i).to_vec()),
        })
        .collect())
}

/// Exact match and token accuracy overall and per domain, with mean activations.
pub fn evaluate(model: &dyn LanguageModel, examples: &[Example]) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Degenerate("evaluation set is empty".into()));
    }
    let scored: Vec<Scored> = examples
        .par_chunks(EVAL_CHUNK)
        .map(|c| score_chunk(model, c))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut report = EvalReport {
        n: examples.len(),
        ..Default::default()
    };
    let mut sums: BTreeMap<String, (usize, f64, f64, Option<Vec<f64>>)> = BTreeMap::new();
    for (ex, s) in examples.iter().zip(&scored) {
        report.exact_match += s.exact as u8 as f64;
        report.token_accuracy += s.acc;
        let e = sums.entry(ex.domain.clone()).or_default();
        e.0 += 1;
        e.1 += s.exact as u8 as f64;
        e.2 += s.acc;
        if let Some(a) = &s.alpha {
            let acc = e.3.get_or_insert_with(|| vec![0.0; a.len()]);
            acc.iter_mut().zip(a).for_each(|(x, y)| *x += y);
        }
    }
    let n = examples.len() as f64;
    report.exact_match /= n;
    report.token_accuracy /= n;
    for (domain, (count, em, acc, alpha)) in sums {
        let c = count as f64;
        report.per_domain.insert(
            domain,
            DomainReport {
                n: count,
                exact_match: em / c,
                token_accuracy: acc / c,
                mean_alpha: alpha.map(|a| a.into_iter().map(|v| v / c).collect()),
            },
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::data::generate_corpus;
    use crate::model::CorpusConfig;
    use crate::upcycle::UpcycleSettings;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct AlwaysEos(TinyTransformerConfig);

    impl LanguageModel for AlwaysEos {
        fn config(&self) -> &TinyTransformerConfig {
            &self.0
        }

        fn logits(&self, batch: &PackedBatch) -> Result<Tensor> {
            let mut t = Tensor::zeros(&[batch.rows(), self.0.vocab]);
            let v = self.0.vocab;
            for r in 0..batch.rows() {
                t.data_mut()[r * v + EOS] = 1.0;
            }
            Ok(t)
        }
    }

    fn tiny() -> TinyTransformerConfig {
        TinyTransformerConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 16,
            vocab: 32,
            max_seq: 24,
        }
    }

    fn data() -> Vec<Example> {
        let cfg = CorpusConfig {
            n_per_domain: 10,
            alphabet: 8,
            ..Default::default()
        };
        generate_corpus(&cfg, 32).unwrap().train
    }

    #[test]
    fn eos_model_scores_zero() {
        let r = evaluate(&AlwaysEos(tiny()), &data()).unwrap();
        assert_eq!(r.exact_match, 0.0);
        assert_eq!(r.token_accuracy, 0.0);
        assert!(r.per_domain.values().all(|d| d.mean_alpha.is_none()));
    }

    #[test]
    fn token_accuracy_examples() {
        assert_eq!(token_accuracy(&[5, 6, 2], &[5, 6, 2]), 1.0);
        assert_eq!(token_accuracy(&[5, 2], &[5, 6, 2]), 1.0 / 3.0);
        assert_eq!(token_accuracy(&[], &[5]), 0.0);
    }

    #[test]
    fn decoding_is_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = TinyTransformer::init(tiny(), &mut rng).unwrap();
        let d = data();
        let prompts: Vec<Vec<usize>> = d.iter().take(5).map(|e| e.prompt.clone()).collect();
        let a = greedy_decode(&m, &prompts).unwrap();
        assert_eq!(a, greedy_decode(&m, &prompts).unwrap());
        for (p, g) in prompts.iter().zip(&a) {
            assert!(p.len() + g.len() <= 24);
            assert!(g.last() == Some(&EOS) || p.len() + g.len() == 24);
        }
        // batching does not change a sequence's continuation
        assert_eq!(greedy_decode(&m, &prompts[2..3]).unwrap()[0], a[2]);
    }

    #[test]
    fn metrics_dominate_and_alphas_are_simplex_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seed = TinyTransformer::init(tiny(), &mut rng).unwrap();
        let m = UpcycledModel::attach(seed, UpcycleSettings::default(), &mut rng).unwrap();
        let r = evaluate(&m, &data()).unwrap();
        assert!(r.token_accuracy >= r.exact_match);
        for d in r.per_domain.values() {
            let a = d.mean_alpha.as_ref().unwrap();
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
