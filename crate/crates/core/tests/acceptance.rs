use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use simoe_core::analysis::{max_pairwise_distance, overlap_report, routing_dendrogram};
use simoe_core::cli::{RunConfig, GRADCHECK_STEP};
use simoe_core::eval::evaluate;
use simoe_core::export::{export_pruned, PrunedModel};
use simoe_core::gates::{GateConstants, GateGroup};
use simoe_core::layer::AttachMode;
use simoe_core::model::data::generate_corpus;
use simoe_core::model::{
    full_finetune, pretrain, Checkpoint, CorpusConfig, Example, PackedBatch, Splits, TinyTransformer,
    TinyTransformerConfig,
};
use simoe_core::report::{summarize, BaselineRow, RunSummary};
use simoe_core::router::RoutingMode;
use simoe_core::training::{objective_gradient_error, stratified_coords, train, ObjectiveConfig, TrainReport};
use simoe_core::upcycle::{ParamGroup, UpcycleSettings, UpcycledModel};
use simoe_core::Result;

const KINK_MARGIN: f64 = 0.01;

const TRAIN_DOMAINS: [&str; 4] = ["copy", "reverse", "add_k_mod_v", "last_token_repeat"];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

struct Ctx {
    cfg: RunConfig,
    splits: Splits,
    seed: TinyTransformer,
    out: PathBuf,
    runs: BTreeMap<&'static str, (TrainReport, ObjectiveConfig)>,
}

impl Ctx {
    fn run(&mut self, name: &'static str, settings: UpcycleSettings, objective: ObjectiveConfig) -> Result<()> {
        let dir = self.out.join(name);
        let _ = std::fs::remove_dir_all(&dir);
        let t = Instant::now();
        let r = train(
            self.seed.clone(),
            settings,
            objective.clone(),
            &self.splits.train,
            Some(&dir),
        )?;
        println!("  trained {name} in {:.1}s", t.elapsed().as_secs_f64());
        self.runs.insert(name, (r, objective));
        Ok(())
    }

    fn report(&self, name: &str) -> &TrainReport {
        &self.runs[name].0
    }

    fn summary(&self, name: &str) -> Result<RunSummary> {
        let (r, o) = &self.runs[name];
        summarize(name, r, o, &self.splits.test)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn random_prompts(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> PackedBatch {
    let seqs: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let len = rng.random_range(2..24);
            (0..len).map(|_| rng.random_range(0..vocab)).collect()
        })
        .collect();
    let lens: Vec<usize> = seqs.iter().map(|s| rng.random_range(1..=s.len())).collect();
    PackedBatch::for_inference(&seqs, &lens).unwrap()
}

fn first_two(examples: &[Example]) -> Result<PackedBatch> {
    let pair: Vec<&Example> = examples.iter().take(2).collect();
    PackedBatch::for_training(&pair, false)
}

/// Random offsets on every trainable value, with gates kept `KINK_MARGIN` away from
/// the log_phi values where the median gate clamps, since no gradient exists there.
fn perturbed(mut model: UpcycledModel, scale: f64, seed: u64) -> Result<UpcycledModel> {
    if scale == 0.0 {
        return Ok(model);
    }
    let c = model.settings.gate_init.constants;
    let kinks = [c.zero_threshold(), c.one_threshold()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = model.flat_params();
    let mut start = 0;
    for (group, len) in model.param_layout() {
        for v in &mut p[start..start + len] {
            *v += rng.random_range(-scale..scale);
            if group == ParamGroup::Gate {
                for k in kinks {
                    if (*v - k).abs() < KINK_MARGIN {
                        *v = k + KINK_MARGIN.copysign(*v - k);
                    }
                }
            }
        }
        start += len;
    }
    model.set_flat_params(&p)?;
    Ok(model)
}

fn gradient_suite(ctx: &Ctx) -> Result<Verdict> {
    let t = Instant::now();
    let objective = &ctx.cfg.objective;
    let mut checks = Vec::new();

    let small = TinyTransformerConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_hidden: 16,
        ..ctx.cfg.model.clone()
    };
    let corpus = CorpusConfig {
        n_per_domain: 2,
        ..ctx.cfg.corpus.clone()
    };
    let batch = first_two(&generate_corpus(&corpus, small.vocab)?.train)?;
    for mode in [RoutingMode::Instance, RoutingMode::Token] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seed = TinyTransformer::init(small.clone(), &mut rng)?;
        let mut settings = ctx.cfg.upcycle.clone();
        settings.router.mode = mode;
        let model = perturbed(UpcycledModel::attach(seed, settings, &mut rng)?, 0.5, 2)?;
        let err = objective_gradient_error(&model, &batch, 0.7, objective, GRADCHECK_STEP, None)?;
        checks.push((format!("small/{} all {}", mode.name(), model.trainable_count()), err));
    }

    let batch = first_two(&ctx.splits.train)?;
    for (label, scale) in [("fresh", 0.0), ("perturbed", 0.05)] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = UpcycledModel::attach(ctx.seed.clone(), ctx.cfg.upcycle.clone(), &mut rng)?;
        let model = perturbed(model, scale, 4)?;
        let layout: Vec<usize> = model.param_layout().into_iter().map(|(_, n)| n).collect();
        let coords = stratified_coords(&layout, 500, 5);
        let err = objective_gradient_error(&model, &batch, 0.7, objective, GRADCHECK_STEP, Some(&coords))?;
        checks.push((format!("reference/{label} {}", coords.len()), err));
    }

    let secs = t.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    let parts: Vec<String> = checks.iter().map(|(l, e)| format!("{l}: {e:.2e}")).collect();
    verdict(
        worst < 1e-4 && secs < 60.0,
        format!("max rel err {worst:.2e} in {secs:.1}s ({})", parts.join(", ")),
    )
}

fn hard_concrete_oracle() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for lp in [-3.0, -1.0, 0.0, 1.0, 3.0] {
        let g = GateGroup::new(vec![lp; 100_000], GateConstants::default())?;
        let closed = g.expected_active_prob()[0];
        let z = g.sample_with(&mut rng);
        let mc = z.iter().filter(|&&v| v != 0.0).count() as f64 / z.len() as f64;
        worst = worst.max((closed - mc).abs());
        parts.push(format!("{lp}: {closed:.4} vs {mc:.4}"));
    }
    verdict(worst < 0.01, format!("max abs err {worst:.4} ({})", parts.join(", ")))
}

fn zero_init_identity(ctx: &Ctx) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch = random_prompts(&mut rng, ctx.cfg.model.vocab, 100);
    let reference = ctx.seed.logits(&batch)?;
    let mut worst = 0.0f64;
    for mode in [RoutingMode::Instance, RoutingMode::Token] {
        let mut settings = ctx.cfg.upcycle.clone();
        settings.router.mode = mode;
        let m = UpcycledModel::attach(ctx.seed.clone(), settings, &mut rng)?;
        worst = worst.max(m.logits(&batch)?.max_abs_diff(&reference));
    }
    verdict(worst < 1e-9, format!("max abs logit diff {worst:.2e} over 100 prompts"))
}

fn constraint_satisfaction(ctx: &Ctx) -> Result<Verdict> {
    let r = ctx.report("reference");
    let tau = ctx.cfg.objective.tau;
    let pass = r.exact_sparsity >= tau - 0.02 && (r.exact_sparsity < tau || r.final_lambda == 0.0);
    verdict(
        pass,
        format!(
            "exact sparsity {:.4} (target {tau}), expected sparsity {:.4}, final lambda {}",
            r.exact_sparsity, r.expected_sparsity, r.final_lambda
        ),
    )
}

fn pruning_equivalence(ctx: &Ctx) -> Result<Verdict> {
    let m = &ctx.report("reference").model;
    let full_dir = ctx.out.join("reference_model");
    let pruned_dir = ctx.out.join("reference_pruned");
    m.save(&full_dir)?;
    export_pruned(m, &pruned_dir)?;
    let p = PrunedModel::load(&pruned_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = random_prompts(&mut rng, ctx.cfg.model.vocab, 50);
    let diff = p.logits(&batch)?.max_abs_diff(&m.logits(&batch)?);
    let (active, upcycled) = (p.active_param_count(), m.upcycled_param_count());
    let (pruned_bytes, full_bytes) = (Checkpoint::disk_size(&pruned_dir)?, Checkpoint::disk_size(&full_dir)?);
    let report = serde_json::json!({
        "max_abs_logit_diff": diff,
        "active_param_count": active,
        "upcycled_param_count": upcycled,
        "param_ratio": active as f64 / upcycled as f64,
        "pruned_bytes": pruned_bytes,
        "upcycled_bytes": full_bytes,
        "size_ratio": pruned_bytes as f64 / full_bytes as f64,
    });
    write_json(&ctx.out.join("export.json"), &report);
    verdict(
        diff < 1e-10 && active < upcycled,
        format!(
            "logit diff {diff:.2e}, active {active} / upcycled {upcycled} params ({:.3}), file {:.3} of upcycled",
            active as f64 / upcycled as f64,
            pruned_bytes as f64 / full_bytes as f64
        ),
    )
}

fn orthogonality_effect(ctx: &Ctx) -> Result<Verdict> {
    let on = overlap_report(&ctx.report("reference").model)?.mean_off_diagonal;
    let off = overlap_report(&ctx.report("ortho_off").model)?.mean_off_diagonal;
    verdict(
        on < off,
        format!("mean off-diagonal overlap {on:.4} with penalty, {off:.4} without"),
    )
}

fn routing_specialization(ctx: &Ctx) -> Result<Verdict> {
    let r = evaluate(&ctx.report("reference").model, &ctx.splits.test)?;
    let alphas: BTreeMap<String, Vec<f64>> = TRAIN_DOMAINS
        .iter()
        .filter_map(|d| {
            let a = r.per_domain.get(*d)?.mean_alpha.clone()?;
            Some((d.to_string(), a))
        })
        .collect();
    if alphas.len() != TRAIN_DOMAINS.len() {
        return verdict(false, format!("mean activations for only {:?}", alphas.keys()));
    }
    let spread = max_pairwise_distance(&alphas)?;
    let tree = routing_dendrogram(&alphas)?;
    write_json(&ctx.out.join("routing.json"), &alphas);
    write_json(&ctx.out.join("dendrogram.json"), &tree);
    let first = &tree.merges[0];
    let mut pair: Vec<&str> = first.left.iter().chain(&first.right).map(String::as_str).collect();
    pair.sort_unstable();
    verdict(
        spread > 0.05 && pair == ["copy", "last_token_repeat"],
        format!(
            "max cosine distance {spread:.4}, first merge {pair:?} at {:.4}",
            first.distance
        ),
    )
}

fn ablation_harness(ctx: &Ctx) -> Result<Verdict> {
    let rows: Vec<RunSummary> = ["reference", "ffn_only", "ortho_off", "tau_zero", "token_routing"]
        .iter()
        .map(|n| ctx.summary(n))
        .collect::<Result<_>>()?;
    write_json(&ctx.out.join("ablations.json"), &rows);
    let by = |n: &str| rows.iter().find(|r| r.name == n).unwrap();
    let (dense, sparse) = (
        by("tau_zero").nonzero_expert_params,
        by("reference").nonzero_expert_params,
    );
    let parts: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{} em {:.3} sparsity {:.3}",
                r.name, r.eval.exact_match, r.exact_sparsity
            )
        })
        .collect();
    verdict(
        dense > sparse,
        format!(
            "nonzero expert params {dense} at tau 0 vs {sparse}; {}",
            parts.join(", ")
        ),
    )
}

fn determinism(ctx: &Ctx) -> Result<Verdict> {
    let a = std::fs::read(ctx.out.join("reference/metrics.jsonl")).unwrap();
    let b = std::fs::read(ctx.out.join("repeat/metrics.jsonl")).unwrap();
    verdict(
        a == b && !a.is_empty(),
        format!("{} vs {} bytes of metrics, identical {}", a.len(), b.len(), a == b),
    )
}

fn baseline_table(ctx: &Ctx) -> Result<Verdict> {
    let t = Instant::now();
    let ft = full_finetune(ctx.seed.clone(), &ctx.splits.train, &ctx.cfg.finetune, None)?;
    println!("  fine-tuned in {:.1}s", t.elapsed().as_secs_f64());
    let m = &ctx.report("reference").model;
    let active = PrunedModel::from_upcycled(m).active_param_count();
    let test = &ctx.splits.test;
    let rows = vec![
        BaselineRow::dense("seed", &ctx.seed, false, test)?,
        BaselineRow::dense("full_finetune", &ft.model, true, test)?,
        BaselineRow::measure("simoe", m, m.trainable_count(), active, test)?,
    ];
    write_json(&ctx.out.join("baseline.json"), &rows);
    let same_split = rows.iter().all(|r| r.eval.n == test.len());
    let parts: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{} em {:.3} tok {:.3} trainable {} inference {}",
                r.method, r.exact_match, r.token_accuracy, r.trainable_params, r.inference_params
            )
        })
        .collect();
    verdict(same_split, parts.join("; "))
}

fn setup() -> Result<Ctx> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json");
    let cfg = RunConfig::load(&root)?;
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&out).unwrap();
    let splits = generate_corpus(&cfg.corpus, cfg.model.vocab)?;
    let t = Instant::now();
    let seed = pretrain(cfg.model.clone(), &splits.train, &cfg.pretrain, None)?.model;
    println!("  pretrained seed in {:.1}s", t.elapsed().as_secs_f64());
    let mut ctx = Ctx {
        cfg,
        splits,
        seed,
        out,
        runs: BTreeMap::new(),
    };
    let (settings, objective) = (ctx.cfg.upcycle.clone(), ctx.cfg.objective.clone());
    ctx.run("reference", settings.clone(), objective.clone())?;
    ctx.run("repeat", settings.clone(), objective.clone())?;
    ctx.run(
        "ortho_off",
        settings.clone(),
        ObjectiveConfig {
            ortho_weight: 0.0,
            ..objective.clone()
        },
    )?;
    ctx.run(
        "tau_zero",
        settings.clone(),
        ObjectiveConfig {
            tau: 0.0,
            ..objective.clone()
        },
    )?;
    let mut ffn = settings.clone();
    ffn.policy.mode = AttachMode::FfnOnly;
    ctx.run("ffn_only", ffn, objective.clone())?;
    let mut token = settings;
    token.router.mode = RoutingMode::Token;
    ctx.run("token_routing", token, objective)?;
    Ok(ctx)
}

fn main() {
    let start = Instant::now();
    let ctx = match setup() {
        Ok(c) => Some(c),
        Err(e) => {
            println!("setup failed: {e}");
            None
        }
    };
    type Check = fn(&Ctx) -> Result<Verdict>;
    let criteria: [(&str, Check); 10] = [
        ("gradient suite", gradient_suite),
        ("hard-concrete oracle", |_| hard_concrete_oracle()),
        ("zero-init identity", zero_init_identity),
        ("constraint satisfaction", constraint_satisfaction),
        ("pruning equivalence", pruning_equivalence),
        ("orthogonality effect", orthogonality_effect),
        ("routing specialization", routing_specialization),
        ("ablation harness", ablation_harness),
        ("determinism", determinism),
        ("baseline table", baseline_table),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = match &ctx {
            Some(c) => check(c).unwrap_or_else(|e| Verdict {
                pass: false,
                detail: format!("error: {e}"),
            }),
            None => Verdict {
                pass: false,
                detail: "setup failed".into(),
            },
        };
        failed += usize::from(!v.pass);
        println!(
            "criterion {}: {} {name}: {}",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    println!(
        "{} of 10 criteria passed in {:.0}s",
        10 - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
