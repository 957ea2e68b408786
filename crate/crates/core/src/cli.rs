//! The `simoe` command-line tool: one pipeline stage per invocation.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{capacity_report, overlap_report, routing_dendrogram, ExpertSupport};
use crate::error::{Error, Result};
use crate::eval::{evaluate, LanguageModel};
use crate::export::{export_pruned, PrunedModel};
use crate::layer::AttachmentPolicy;
use crate::model::data::{generate_corpus, read_corpus, write_corpus};
use crate::model::{
    full_finetune, pretrain, Checkpoint, CorpusConfig, DenseTrainConfig, Example, PackedBatch, Splits, TinyTransformer,
    TinyTransformerConfig,
};
use crate::report::{summarize, BaselineRow, RunSummary};
use crate::router::RoutingMode;
use crate::training::{objective_gradient_error, resume, stratified_coords, train, ObjectiveConfig, TrainState};
use crate::upcycle::{UpcycleSettings, UpcycledModel};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

/// Finite-difference step of `gradcheck`.
pub const GRADCHECK_STEP: f64 = 1e-3;

/// Everything a pipeline stage can be configured with.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: TinyTransformerConfig,
    pub corpus: CorpusConfig,
    pub pretrain: DenseTrainConfig,
    pub upcycle: UpcycleSettings,
    pub objective: ObjectiveConfig,
    pub finetune: DenseTrainConfig,
}

/// What `resolved_config.json` holds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub command: Vec<String>,
    pub config: RunConfig,
}

impl RunConfig {
    /// Reads a config file, or the `config` field of a previous run's snapshot.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| format_err(path, e))?;
        let inner = match value.get("config") {
            Some(c) if value.get("command").is_some() => c.clone(),
            _ => value,
        };
        serde_json::from_value(inner).map_err(|e| format_err(path, e))
    }
}

fn format_err(path: &Path, e: serde_json::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

#[derive(Debug, Parser)]
#[command(name = "simoe", version, about = "Sparse interpolated mixture-of-experts upcycling")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of this stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long = "ortho-weight", global = true)]
    pub ortho_weight: Option<f64>,
    #[arg(long, global = true)]
    pub experts: Option<usize>,
    /// `all`, `ffn`, or a comma-separated list of layer ids.
    #[arg(long, global = true)]
    pub attach: Option<String>,
    /// `instance` or `token`.
    #[arg(long, global = true)]
    pub routing: Option<String>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus as train/val/test JSONL.
    GenData,
    /// Train a seed model from scratch.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Attach experts to a seed model and train them.
    Upcycle {
        #[arg(long = "seed-model")]
        seed_model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Continue from a saved training state instead of attaching fresh experts.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune every seed parameter (the dense baseline).
    Finetune {
        #[arg(long = "seed-model")]
        seed_model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Greedy-decode a split and score it.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Expert diagnostics.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Write a pruned inference checkpoint.
    Export {
        #[arg(long)]
        model: PathBuf,
    },
    /// Check the objective's gradient against finite differences.
    Gradcheck {
        #[arg(long = "seed-model")]
        seed_model: Option<PathBuf>,
        /// Coordinates to probe; every coordinate when the model has fewer.
        #[arg(long, default_value_t = 400)]
        coords: usize,
    },
    /// Train one upcycled run per combination of targets and penalty weights.
    Sweep {
        #[arg(long = "seed-model")]
        seed_model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        taus: Vec<f64>,
        #[arg(long = "ortho-weights", value_delimiter = ',')]
        ortho_weights: Vec<f64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Pairwise expert mask overlap.
    Overlap {
        #[arg(long)]
        model: PathBuf,
    },
    /// Nonzero expert-parameter fractions by layer type and depth.
    Capacity {
        #[arg(long)]
        model: PathBuf,
    },
    /// Per-domain mean routing and its clustering.
    Routing {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Upcycle { .. } => "upcycle",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Analyze { .. } => "analyze",
            Command::Export { .. } => "export",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Sweep { .. } => "sweep",
        }
    }
}

/// Applies flag overrides to the stage they concern.
pub fn resolve(cmd: &Command, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        match cmd {
            Command::GenData => cfg.corpus.seed = s,
            Command::Pretrain { .. } => cfg.pretrain.seed = s,
            Command::Finetune { .. } => cfg.finetune.seed = s,
            _ => cfg.objective.seed = s,
        }
    }
    if let Some(n) = o.steps {
        match cmd {
            Command::Pretrain { .. } => cfg.pretrain.steps = n,
            Command::Finetune { .. } => cfg.finetune.steps = n,
            _ => cfg.objective.steps = n,
        }
    }
    if let Some(t) = o.tau {
        cfg.objective.tau = t;
    }
    if let Some(w) = o.ortho_weight {
        cfg.objective.ortho_weight = w;
    }
    if let Some(m) = o.experts {
        cfg.upcycle.experts = m;
    }
    if let Some(a) = &o.attach {
        let keep = (cfg.upcycle.policy.include_lm_head, cfg.upcycle.policy.include_embedding);
        cfg.upcycle.policy = AttachmentPolicy::parse(a)?;
        (cfg.upcycle.policy.include_lm_head, cfg.upcycle.policy.include_embedding) = keep;
    }
    if let Some(r) = &o.routing {
        cfg.upcycle.router.mode = RoutingMode::parse(r)?;
    }
    cfg.model.validate()?;
    cfg.objective.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn split<'a>(splits: &'a Splits, name: &str) -> Result<&'a [Example]> {
    match name {
        "train" => Ok(&splits.train),
        "val" => Ok(&splits.val),
        "test" => Ok(&splits.test),
        other => Err(Error::Config(format!(
            "unknown split {other:?}; expected train, val or test"
        ))),
    }
}

/// Any checkpoint this tool writes, loaded by its manifest kind.
pub enum AnyModel {
    Dense(TinyTransformer),
    Upcycled(UpcycledModel),
    Pruned(PrunedModel),
}

impl AnyModel {
    pub fn load(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        match ck.kind.as_str() {
            "seed" | "finetuned" => Ok(AnyModel::Dense(TinyTransformer::from_checkpoint(&ck, "")?)),
            "upcycled" | "train_state" => Ok(AnyModel::Upcycled(UpcycledModel::from_checkpoint(&ck)?)),
            "pruned" => Ok(AnyModel::Pruned(PrunedModel::from_checkpoint(&ck)?)),
            other => Err(Error::Contract(format!(
                "{}: unknown checkpoint kind {other:?}",
                dir.display()
            ))),
        }
    }

    pub fn language_model(&self) -> &dyn LanguageModel {
        match self {
            AnyModel::Dense(m) => m,
            AnyModel::Upcycled(m) => m,
            AnyModel::Pruned(m) => m,
        }
    }

    pub fn experts(&self) -> Result<&dyn ExpertSupport> {
        match self {
            AnyModel::Dense(_) => Err(Error::Contract("a dense model has no experts to analyze".into())),
            AnyModel::Upcycled(m) => Ok(m),
            AnyModel::Pruned(m) => Ok(m),
        }
    }
}

fn load_seed(path: Option<&Path>, cfg: &RunConfig) -> Result<TinyTransformer> {
    match path {
        Some(p) => TinyTransformer::load(p),
        None => TinyTransformer::init(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.pretrain.seed)),
    }
}

fn summary_line(s: &RunSummary) -> String {
    format!(
        "{}: exact sparsity {:.4}, lambda {:.4}, exact match {:.4}, token accuracy {:.4}, active {} / upcycled {} params",
        s.name,
        s.exact_sparsity,
        s.final_lambda,
        s.eval.exact_match,
        s.eval.token_accuracy,
        s.active_params,
        s.upcycled_params
    )
}

fn execute(cli: &Cli, argv: &[String]) -> Result<()> {
    let cfg = resolve(&cli.command, &cli.overrides)?;
    let out = cli
        .overrides
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    let snapshot = |dir: &Path| {
        write_json(
            &dir.join(RESOLVED_CONFIG),
            &Snapshot {
                command: argv.to_vec(),
                config: cfg.clone(),
            },
        )
    };
    match &cli.command {
        Command::GenData => {
            let splits = generate_corpus(&cfg.corpus, cfg.model.vocab)?;
            write_corpus(&out, &splits)?;
            snapshot(&out)?;
            println!(
                "wrote {} train, {} val, {} test examples to {}",
                splits.train.len(),
                splits.val.len(),
                splits.test.len(),
                out.display()
            );
        }
        Command::Pretrain { data } => {
            let splits = read_corpus(data)?;
            snapshot(&out)?;
            let r = pretrain(cfg.model.clone(), &splits.train, &cfg.pretrain, Some(&out))?;
            r.model.save(&out.join("model"))?;
            let last = r.metrics.last().map_or(f64::NAN, |m| m.nll);
            write_json(
                &out.join("report.json"),
                &serde_json::json!({
                    "steps": r.metrics.len(),
                    "final_nll": last,
                    "diverged": r.diverged,
                    "params": r.model.param_count(),
                }),
            )?;
            println!(
                "pretrained {} steps, final nll {last:.4}, diverged {}",
                r.metrics.len(),
                r.diverged
            );
        }
        Command::Upcycle {
            seed_model,
            data,
            resume: from,
        } => {
            let splits = read_corpus(data)?;
            snapshot(&out)?;
            let (report, objective) = match from {
                Some(dir) => {
                    let mut state = TrainState::load(dir)?;
                    if cli.overrides.steps.is_some() {
                        state.config.steps = cfg.objective.steps;
                    }
                    let objective = state.config.clone();
                    (resume(state, &splits.train, Some(&out))?, objective)
                }
                None => {
                    let seed = load_seed(seed_model.as_deref(), &cfg)?;
                    let r = train(
                        seed,
                        cfg.upcycle.clone(),
                        cfg.objective.clone(),
                        &splits.train,
                        Some(&out),
                    )?;
                    (r, cfg.objective.clone())
                }
            };
            let s = summarize("upcycle", &report, &objective, &splits.val)?;
            write_json(&out.join("report.json"), &s)?;
            println!("{}", summary_line(&s));
            if !s.converged {
                println!(
                    "warning: exact sparsity {:.4} is below the target {:.2} minus 0.02",
                    s.exact_sparsity, s.tau
                );
            }
        }
        Command::Finetune { seed_model, data } => {
            let splits = read_corpus(data)?;
            snapshot(&out)?;
            let seed = TinyTransformer::load(seed_model)?;
            let r = full_finetune(seed, &splits.train, &cfg.finetune, Some(&out))?;
            r.model.to_checkpoint("finetuned").save(&out.join("model"))?;
            let row = BaselineRow::dense("full_finetune", &r.model, true, &splits.val)?;
            write_json(&out.join("report.json"), &row)?;
            println!(
                "fine-tuned {} steps: exact match {:.4}, token accuracy {:.4}",
                r.metrics.len(),
                row.exact_match,
                row.token_accuracy
            );
        }
        Command::Eval {
            model,
            data,
            split: name,
        } => {
            let splits = read_corpus(data)?;
            let m = AnyModel::load(model)?;
            let r = evaluate(m.language_model(), split(&splits, name)?)?;
            snapshot(&out)?;
            write_json(&out.join("eval.json"), &r)?;
            println!(
                "{name}: n {} exact match {:.4} token accuracy {:.4}",
                r.n, r.exact_match, r.token_accuracy
            );
            for (d, dr) in &r.per_domain {
                println!(
                    "  {d}: exact match {:.4} token accuracy {:.4}",
                    dr.exact_match, dr.token_accuracy
                );
            }
        }
        Command::Analyze { what } => match what {
            Analysis::Overlap { model } => {
                let m = AnyModel::load(model)?;
                let r = overlap_report(m.experts()?)?;
                snapshot(&out)?;
                write_json(&out.join("overlap.json"), &r)?;
                for row in &r.matrix {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
                    println!("{}", cells.join(" "));
                }
                println!("mean off-diagonal overlap {:.4}", r.mean_off_diagonal);
            }
            Analysis::Capacity { model } => {
                let m = AnyModel::load(model)?;
                let r = capacity_report(m.experts()?);
                snapshot(&out)?;
                write_json(&out.join("capacity.json"), &r)?;
                for (tag, s) in &r.by_type {
                    println!("{tag}: mean {:.4} std {:.4}", s.mean, s.std);
                }
            }
            Analysis::Routing {
                model,
                data,
                split: name,
            } => {
                let splits = read_corpus(data)?;
                let m = AnyModel::load(model)?;
                let r = evaluate(m.language_model(), split(&splits, name)?)?;
                let alphas: BTreeMap<String, Vec<f64>> = r
                    .per_domain
                    .iter()
                    .filter_map(|(d, dr)| dr.mean_alpha.clone().map(|a| (d.clone(), a)))
                    .collect();
                if alphas.is_empty() {
                    return Err(Error::Contract("model does not route".into()));
                }
                let tree = routing_dendrogram(&alphas)?;
                snapshot(&out)?;
                write_json(&out.join("routing.json"), &alphas)?;
                write_json(&out.join("dendrogram.json"), &tree)?;
                for step in &tree.merges {
                    println!("{:?} + {:?} at {:.4}", step.left, step.right, step.distance);
                }
            }
        },
        Command::Export { model } => {
            let m = UpcycledModel::load(model)?;
            let p = export_pruned(&m, &out)?;
            let (full, pruned) = (Checkpoint::disk_size(model)?, Checkpoint::disk_size(&out)?);
            let upcycled = m.upcycled_param_count();
            let report = serde_json::json!({
                "active_param_count": p.active_param_count(),
                "upcycled_param_count": upcycled,
                "param_ratio": p.active_param_count() as f64 / upcycled as f64,
                "upcycled_bytes": full,
                "pruned_bytes": pruned,
                "size_ratio": pruned as f64 / full as f64,
            });
            snapshot(&out)?;
            write_json(&out.join("export_report.json"), &report)?;
            println!(
                "active {} of {} upcycled params ({:.4}); file {} of {} bytes",
                p.active_param_count(),
                upcycled,
                p.active_param_count() as f64 / upcycled as f64,
                pruned,
                full
            );
        }
        Command::Gradcheck { seed_model, coords } => {
            let seed = load_seed(seed_model.as_deref(), &cfg)?;
            let corpus = CorpusConfig {
                n_per_domain: 2,
                ..cfg.corpus.clone()
            };
            let splits = generate_corpus(&corpus, seed.config.vocab)?;
            let pair: Vec<&Example> = splits.train.iter().take(2).collect();
            let batch = PackedBatch::for_training(&pair, false)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.objective.seed);
            let model = UpcycledModel::attach(seed, cfg.upcycle.clone(), &mut rng)?;
            let layout: Vec<usize> = model.param_layout().into_iter().map(|(_, n)| n).collect();
            let probe = stratified_coords(&layout, *coords, cfg.objective.seed);
            let err = objective_gradient_error(&model, &batch, 1.0, &cfg.objective, GRADCHECK_STEP, Some(&probe))?;
            if cli.overrides.out.is_some() {
                snapshot(&out)?;
                write_json(
                    &out.join("gradcheck.json"),
                    &serde_json::json!({"coords": probe.len(), "max_rel_err": err}),
                )?;
            }
            println!("checked {} coordinates, max rel err {err:.3e}", probe.len());
            if !(err < 1e-4) {
                return Err(Error::Numeric(format!("gradient check failed: {err:.3e} >= 1e-4")));
            }
        }
        Command::Sweep {
            seed_model,
            data,
            taus,
            ortho_weights,
        } => {
            let splits = read_corpus(data)?;
            let seed = TinyTransformer::load(seed_model)?;
            snapshot(&out)?;
            let taus = if taus.is_empty() {
                vec![cfg.objective.tau]
            } else {
                taus.clone()
            };
            let weights = if ortho_weights.is_empty() {
                vec![cfg.objective.ortho_weight]
            } else {
                ortho_weights.clone()
            };
            let mut rows = Vec::new();
            for &tau in &taus {
                for &w in &weights {
                    let objective = ObjectiveConfig {
                        tau,
                        ortho_weight: w,
                        ..cfg.objective.clone()
                    };
                    let name = format!("tau{tau}_ortho{w}");
                    let dir = out.join(&name);
                    let r = train(
                        seed.clone(),
                        cfg.upcycle.clone(),
                        objective.clone(),
                        &splits.train,
                        Some(&dir),
                    )?;
                    let s = summarize(&name, &r, &objective, &splits.val)?;
                    println!("{}", summary_line(&s));
                    rows.push(s);
                }
            }
            write_json(&out.join("sweep.json"), &rows)?;
        }
    }
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var("SIMOE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        // The pool can only be set once per process; later calls keep the first size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parses `args` (program name first) and runs the stage. Returns the exit code:
/// 0 on success, 1 on a runtime failure, 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    configure_threads();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &argv) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
