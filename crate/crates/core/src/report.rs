//! Comparison records for sweeps, ablations and the baseline table.

use serde::{Deserialize, Serialize};

use crate::analysis::{overlap_report, ExpertSupport};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport, LanguageModel};
use crate::export::PrunedModel;
use crate::layer::AttachMode;
use crate::model::{Example, TinyTransformer};
use crate::training::{ObjectiveConfig, TrainReport};
use crate::upcycle::UpcycledModel;

/// One trained upcycled run, measured after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub tau: f64,
    pub ortho_weight: f64,
    pub attach: String,
    pub routing: String,
    pub steps: usize,
    pub exact_sparsity: f64,
    pub expected_sparsity: f64,
    pub final_lambda: f64,
    pub converged: bool,
    /// Expert-parameters (delta entries times experts) whose gate is nonzero.
    pub nonzero_expert_params: usize,
    pub expert_params: usize,
    pub trainable_params: usize,
    pub upcycled_params: usize,
    pub active_params: usize,
    pub mean_overlap: f64,
    pub eval: EvalReport,
}

fn attach_name(mode: &AttachMode) -> String {
    match mode {
        AttachMode::AllLinear => "all".into(),
        AttachMode::FfnOnly => "ffn".into(),
        AttachMode::Explicit(ids) => ids.join(","),
    }
}

/// `(nonzero, total)` expert-parameters of `model`.
pub fn expert_param_counts(model: &dyn ExpertSupport) -> (usize, usize) {
    let (mut nz, mut total) = (0, 0);
    for l in model.expert_masks() {
        for m in &l.masks {
            nz += l.params_per_gate * m.iter().filter(|&&b| b).count();
            total += l.params_per_gate * m.len();
        }
    }
    (nz, total)
}

pub fn summarize(
    name: &str,
    run: &TrainReport,
    objective: &ObjectiveConfig,
    eval_set: &[Example],
) -> Result<RunSummary> {
    let m: &UpcycledModel = &run.model;
    let (nonzero, total) = expert_param_counts(m);
    Ok(RunSummary {
        name: name.to_string(),
        tau: objective.tau,
        ortho_weight: objective.ortho_weight,
        attach: attach_name(&m.settings.policy.mode),
        routing: m.mode().name().to_string(),
        steps: run.metrics.len(),
        exact_sparsity: run.exact_sparsity,
        expected_sparsity: run.expected_sparsity,
        final_lambda: run.final_lambda,
        converged: run.converged,
        nonzero_expert_params: nonzero,
        expert_params: total,
        trainable_params: m.trainable_count(),
        upcycled_params: m.upcycled_param_count(),
        active_params: PrunedModel::from_upcycled(m).active_param_count(),
        mean_overlap: overlap_report(m)?.mean_off_diagonal,
        eval: evaluate(m, eval_set)?,
    })
}

/// One row of the method comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub method: String,
    pub trainable_params: usize,
    /// Parameters needed at inference.
    pub inference_params: usize,
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub eval: EvalReport,
}

impl BaselineRow {
    pub fn measure(
        method: &str,
        model: &dyn LanguageModel,
        trainable_params: usize,
        inference_params: usize,
        eval_set: &[Example],
    ) -> Result<Self> {
        let eval = evaluate(model, eval_set)?;
        Ok(BaselineRow {
            method: method.to_string(),
            trainable_params,
            inference_params,
            exact_match: eval.exact_match,
            token_accuracy: eval.token_accuracy,
            eval,
        })
    }

    pub fn dense(method: &str, model: &TinyTransformer, trainable: bool, eval_set: &[Example]) -> Result<Self> {
        let n = model.param_count();
        BaselineRow::measure(method, model, if trainable { n } else { 0 }, n, eval_set)
    }
}
