//! Command-line front end: `synth`, `train`, `prototypes`, `adapt`, `eval`.
//!
//! Results go to `--out` files or standard output; progress is logged to
//! standard error as one JSON object per line. Exit codes: 0 success, 2 usage
//! or validation failure, 3 numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::adapt::{self, AdaptConfig, HeadRefitConfig, Prototypes, TransportMap};
use crate::data::synth::{self, ShiftSpec, SynthSpec};
use crate::data::{self, Head};
use crate::error::{HasdError, Result};
use crate::metrics::{self, alignment_diagnostics};
use crate::mil::{self, SlideBag, TrainConfig};
use crate::numerics::{norm, Matrix, Rng};
use crate::ot::{self, CostMetric, SinkhornConfig, TransportMode};
use crate::proto;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "hasd",
    version,
    about = "Slide-level domain adaptation for attention MIL",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target benchmark.
    Synth(SynthArgs),
    /// Train an attention MIL model on a labelled manifest.
    Train(TrainArgs),
    /// Reduce every slide of a manifest to k-means prototypes.
    Prototypes(PrototypeArgs),
    /// Learn a transport map from source to target prototypes.
    Adapt(AdaptArgs),
    /// Score a labelled manifest and write an evaluation report.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthSpec::default().n_slides)]
    pub n_slides: usize,
    /// Fixed patch count per slide; overrides the min/max range.
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long, default_value_t = SynthSpec::default().patches_min)]
    pub patches_min: usize,
    #[arg(long, default_value_t = SynthSpec::default().patches_max)]
    pub patches_max: usize,
    #[arg(long, default_value_t = SynthSpec::default().feature_dim)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = SynthSpec::default().signal_fraction)]
    pub signal_fraction: f64,
    #[arg(long, default_value_t = SynthSpec::default().n_background)]
    pub n_background: usize,
    #[arg(long, default_value_t = SynthSpec::default().cluster_scale)]
    pub cluster_scale: f64,
    #[arg(long, default_value_t = SynthSpec::default().cluster_sigma)]
    pub cluster_sigma: f64,
    #[arg(long, default_value_t = SynthSpec::default().signal_offset)]
    pub signal_offset: f64,
    #[arg(long, default_value_t = SynthSpec::default().mixture_jitter.0)]
    pub jitter_min: f64,
    #[arg(long, default_value_t = SynthSpec::default().mixture_jitter.1)]
    pub jitter_max: f64,
    /// Disable the orthogonal warp of the target domain.
    #[arg(long)]
    pub no_warp: bool,
    #[arg(long, default_value_t = SynthSpec::default().shift.warp_angle)]
    pub warp_angle: f64,
    #[arg(long, default_value_t = SynthSpec::default().shift.translation)]
    pub translation: f64,
    #[arg(long, default_value_t = SynthSpec::default().shift.noise_sigma)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = SynthSpec::default().prevalence_src)]
    pub prevalence_src: f64,
    #[arg(long, default_value_t = SynthSpec::default().prevalence_tgt)]
    pub prevalence_tgt: f64,
}

impl SynthArgs {
    pub fn spec(&self) -> SynthSpec {
        let (patches_min, patches_max) = match self.patches {
            Some(p) => (p, p),
            None => (self.patches_min, self.patches_max),
        };
        SynthSpec {
            n_slides: self.n_slides,
            patches_min,
            patches_max,
            feature_dim: self.feature_dim,
            signal_fraction: self.signal_fraction,
            n_background: self.n_background,
            cluster_scale: self.cluster_scale,
            cluster_sigma: self.cluster_sigma,
            signal_offset: self.signal_offset,
            mixture_jitter: (self.jitter_min, self.jitter_max),
            shift: ShiftSpec {
                warp: !self.no_warp,
                warp_angle: self.warp_angle,
                translation: self.translation,
                noise_sigma: self.noise_sigma,
            },
            prevalence_src: self.prevalence_src,
            prevalence_tgt: self.prevalence_tgt,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labelled domain manifest (or its directory).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().hidden)]
    pub hidden: usize,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().step_size)]
    pub step_size: f64,
    #[arg(long, default_value_t = TrainConfig::default().init_scale)]
    pub init_scale: f64,
    /// Fraction of each class held out for the in-domain AUROC.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
}

#[derive(Debug, Args)]
pub struct PrototypeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the prototype manifest and feature files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = proto::DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = proto::DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Transport solver flags shared by `adapt` and `eval`.
#[derive(Debug, Args)]
pub struct SolverArgs {
    #[arg(long, default_value_t = SinkhornConfig::default().epsilon)]
    pub epsilon: f64,
    /// Use KL-relaxed marginals (partial transport).
    #[arg(long)]
    pub partial: bool,
    /// Marginal relaxation weight, used with `--partial`.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value = "cosine")]
    pub metric: CostMetric,
    #[arg(long, default_value_t = SinkhornConfig::default().tol)]
    pub tol: f64,
}

impl SolverArgs {
    fn config(&self, max_iters: usize) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.epsilon,
            tau: if self.partial { self.tau } else { 0.0 },
            max_iters,
            tol: self.tol,
            mode: if self.partial {
                TransportMode::Partial
            } else {
                TransportMode::Balanced
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Source prototype manifest (or its directory).
    #[arg(long)]
    pub src: PathBuf,
    /// Target prototype manifest (or its directory).
    #[arg(long)]
    pub tgt: PathBuf,
    /// Source-trained model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Transport map checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss log; defaults to the checkpoint path with a `.jsonl`
    /// extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Recorded in the log; the optimisation itself draws no randomness.
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Sinkhorn sweeps per adaptation step (warm-started).
    #[arg(long, default_value_t = AdaptConfig::default().sinkhorn.max_iters)]
    pub sinkhorn_iters: usize,
    #[arg(long, default_value_t = AdaptConfig::default().lambda1)]
    pub lambda1: f64,
    #[arg(long, default_value_t = AdaptConfig::default().lambda2)]
    pub lambda2: f64,
    #[arg(long, default_value_t = AdaptConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = AdaptConfig::default().step_size)]
    pub step_size: f64,
    #[arg(long, default_value_t = AdaptConfig::default().decay_every)]
    pub decay_every: usize,
    #[arg(long, default_value_t = AdaptConfig::default().decay_factor)]
    pub decay_factor: f64,
    #[arg(long, default_value_t = AdaptConfig::default().replan_every)]
    pub replan_every: usize,
    /// Keep the source classifier head instead of refitting it on the
    /// mapped source prototypes.
    #[arg(long)]
    pub no_refit: bool,
    #[arg(long, default_value_t = HeadRefitConfig::default().epochs)]
    pub refit_epochs: usize,
    #[arg(long, default_value_t = HeadRefitConfig::default().step_size)]
    pub refit_step_size: f64,
}

impl AdaptArgs {
    pub fn config(&self) -> AdaptConfig {
        AdaptConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            sinkhorn: self.solver.config(self.sinkhorn_iters),
            metric: self.solver.metric,
            steps: self.steps,
            step_size: self.step_size,
            decay_every: self.decay_every,
            decay_factor: self.decay_factor,
            replan_every: self.replan_every,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labelled manifest to score (or its directory).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Transport map checkpoint from `adapt`. A refit head stored in it is
    /// used as is; otherwise target bags are pulled back through the inverse
    /// map.
    #[arg(long)]
    pub transform: Option<PathBuf>,
    /// Report path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Source prototypes, for alignment diagnostics.
    #[arg(long, requires = "tgt_protos")]
    pub src_protos: Option<PathBuf>,
    /// Target prototypes, for alignment diagnostics.
    #[arg(long, requires = "src_protos")]
    pub tgt_protos: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = SinkhornConfig::default().max_iters)]
    pub sinkhorn_iters: usize,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let (name, result) = match &cli.command {
        Command::Synth(a) => ("synth", cmd_synth(a)),
        Command::Train(a) => ("train", cmd_train(a)),
        Command::Prototypes(a) => ("prototypes", cmd_prototypes(a)),
        Command::Adapt(a) => ("adapt", cmd_adapt(a)),
        Command::Eval(a) => ("eval", cmd_eval(a)),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            log(
                name,
                "error",
                json!({ "message": e.to_string(), "exit_code": code }),
            );
            code
        }
    }
}

pub fn exit_code(e: &HasdError) -> i32 {
    match e {
        HasdError::Numeric { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn log(cmd: &str, event: &str, fields: Value) {
    let mut line = serde_json::Map::new();
    line.insert("cmd".into(), json!(cmd));
    line.insert("event".into(), json!(event));
    if let Value::Object(extra) = fields {
        line.extend(extra);
    }
    eprintln!("{}", Value::Object(line));
}

fn print_result(v: &Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{v}").map_err(|e| HasdError::io("<stdout>", e))
}

/// A manifest path, or a directory holding `manifest.json`.
fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p.to_path_buf()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| HasdError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| HasdError::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => std::fs::create_dir_all(parent).map_err(|e| HasdError::io(parent, e)),
        None => Ok(()),
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = args.spec();
    spec.validate()?;
    let bench = synth::generate(&spec)?;
    synth::write_benchmark(&args.out, &bench)?;
    let count = |bags: &[SlideBag]| bags.iter().filter(|b| b.label == Some(true)).count();
    let summary = json!({
        "out": args.out.display().to_string(),
        "seed": spec.seed,
        "source_slides": bench.source.bags.len(),
        "source_positive": count(&bench.source.bags),
        "target_slides": bench.target.bags.len(),
        "target_positive": count(&bench.target.bags),
        "feature_dim": spec.feature_dim,
    });
    log("synth", "done", summary.clone());
    print_result(&summary)
}

/// Stratified split: each class is shuffled and `fraction` of it (at least
/// one slide when the class has two or more) is held out. Indices come back
/// sorted.
pub fn holdout_split(labels: &[bool], fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rng.shuffle(&mut idx);
        let mut n_held = (fraction * idx.len() as f64).round() as usize;
        if n_held == 0 && idx.len() >= 2 && fraction > 0.0 {
            n_held = 1;
        }
        n_held = n_held.min(idx.len().saturating_sub(1));
        held.extend_from_slice(&idx[..n_held]);
        train.extend_from_slice(&idx[n_held..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        hidden: args.hidden,
        epochs: args.epochs,
        step_size: args.step_size,
        init_scale: args.init_scale,
    };
    cfg.validate()?;
    if !(args.holdout > 0.0 && args.holdout < 1.0) {
        return Err(HasdError::arg(format!(
            "holdout fraction must lie in (0,1), got {}",
            args.holdout
        )));
    }
    let (manifest, bags) = data::load_bags(&manifest_path(&args.manifest))?;
    let mut labels = Vec::with_capacity(bags.len());
    for b in &bags {
        labels.push(
            b.label
                .ok_or_else(|| HasdError::arg(format!("slide {} has no label", b.slide_id)))?,
        );
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(HasdError::arg(format!(
            "manifest {} holds a single class ({n_pos} of {} positive)",
            manifest.domain_name,
            labels.len()
        )));
    }

    let mut rng = Rng::new(args.seed);
    let mut split_rng = rng.fork();
    let mut init_rng = rng.fork();
    let (train_idx, held_idx) = holdout_split(&labels, args.holdout, &mut split_rng);
    let pick = |idx: &[usize]| -> Vec<SlideBag> { idx.iter().map(|&i| bags[i].clone()).collect() };
    let train = pick(&train_idx);
    let held = pick(&held_idx);
    log(
        "train",
        "split",
        json!({ "n_train": train.len(), "n_holdout": held.len(), "seed": args.seed }),
    );

    let report = mil::train_source(&train, &cfg, &mut init_rng)?;
    let id_auroc = metrics::eval_report(&report.model, &held, None)
        .map(|r| r.auroc)
        .ok();
    ensure_parent(&args.out)?;
    data::save_model(&args.out, &report.model)?;
    let summary = json!({
        "initial_loss": report.losses[0],
        "final_loss": report.final_loss(),
        "id_auroc": id_auroc,
        "n_train": train.len(),
        "n_holdout": held.len(),
    });
    log("train", "done", summary.clone());
    print_result(&summary)
}

pub fn cmd_prototypes(args: &PrototypeArgs) -> Result<()> {
    if args.k == 0 {
        return Err(HasdError::arg("k must be at least 1"));
    }
    let (manifest, bags) = data::load_bags(&manifest_path(&args.manifest))?;
    let mut rng = Rng::new(args.seed);
    let domain = proto::prototype_domain(&bags, args.k, &mut rng, args.max_iters)?;
    let proto_bags = domain
        .sets
        .iter()
        .zip(&bags)
        .map(|(set, bag)| SlideBag::new(bag.slide_id.clone(), set.centroids.clone(), bag.label))
        .collect::<Result<Vec<_>>>()?;
    data::write_domain(&args.out, &manifest.domain_name, &proto_bags)?;
    let inertia: f64 = domain.sets.iter().map(|s| s.inertia).sum();
    let summary = json!({
        "out": args.out.display().to_string(),
        "slides": proto_bags.len(),
        "k": args.k,
        "total_inertia": inertia,
    });
    log("prototypes", "done", summary.clone());
    print_result(&summary)
}

/// Stacks prototype bags into one grouped matrix.
pub fn stack_prototypes(bags: &[SlideBag]) -> Result<Prototypes> {
    let blocks: Vec<&Matrix> = bags.iter().map(|b| &b.features).collect();
    let matrix = Matrix::vstack(&blocks)?;
    let slide_index = bags
        .iter()
        .enumerate()
        .flat_map(|(n, b)| std::iter::repeat_n(n, b.n_patches()))
        .collect();
    Prototypes::new(matrix, slide_index)
}

pub fn cmd_adapt(args: &AdaptArgs) -> Result<()> {
    let cfg = args.config();
    cfg.validate()?;
    let refit = HeadRefitConfig {
        epochs: args.refit_epochs,
        step_size: args.refit_step_size,
    };
    if !args.no_refit && !(refit.step_size > 0.0 && refit.step_size.is_finite()) {
        return Err(HasdError::arg("refit step size must be > 0"));
    }
    let (_, src_bags) = data::load_bags(&manifest_path(&args.src))?;
    let (_, tgt_bags) = data::load_bags(&manifest_path(&args.tgt))?;
    let model = data::load_model(&args.model)?;
    let src = stack_prototypes(&src_bags)?;
    let tgt = stack_prototypes(&tgt_bags)?;
    if src.dim() != tgt.dim() || src.dim() != model.dim() {
        return Err(HasdError::arg(format!(
            "dimension mismatch: source prototypes {}, target prototypes {}, model {}",
            src.dim(),
            tgt.dim(),
            model.dim()
        )));
    }
    log(
        "adapt",
        "start",
        json!({
            "seed": args.seed,
            "n_src": src.len(),
            "n_tgt": tgt.len(),
            "config": serde_json::to_value(cfg).expect("config serializes"),
        }),
    );

    let report = adapt::fit(&src, &tgt, &model, &cfg)?;

    let head = if args.no_refit {
        None
    } else {
        let labels: Vec<Option<bool>> = src_bags.iter().map(|b| b.label).collect();
        let ids: Vec<String> = src_bags.iter().map(|b| b.slide_id.clone()).collect();
        let refit_model =
            adapt::refit_head_on_map(&model, &report.map, &src, &labels, &ids, &refit)?;
        Some(Head::of(&refit_model))
    };

    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("jsonl"));
    let mut lines = String::new();
    for r in &report.records {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    ensure_parent(&args.out)?;
    data::save_map_with_head(&args.out, &report.map, head.as_ref())?;
    write_text(&log_path, &lines)?;

    let last = report.records.last();
    let summary = json!({
        "steps": report.records.len(),
        "final_total": last.map(|r| r.total),
        "final_das": last.map(|r| r.das),
        "w_norm": report.map.w.frobenius_norm(),
        "bias_norm": norm(&report.map.bias),
        "refit": head.is_some(),
        "log": log_path.display().to_string(),
    });
    log("adapt", "done", summary.clone());
    print_result(&summary)
}

/// Applies `T⁻¹` to every bag, carrying target bags back to the source
/// domain.
pub fn pull_back(map: &TransportMap, bags: &[SlideBag]) -> Result<Vec<SlideBag>> {
    bags.iter()
        .map(|b| SlideBag::new(b.slide_id.clone(), map.invert_rows(&b.features)?, b.label))
        .collect()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let solver = args.solver.config(args.sinkhorn_iters);
    solver.validate()?;
    let (_, bags) = data::load_bags(&manifest_path(&args.manifest))?;
    let model = data::load_model(&args.model)?;
    let transform = args
        .transform
        .as_deref()
        .map(data::load_map_with_head)
        .transpose()?;

    let (scored_model, scored_bags) = match &transform {
        None => (model.clone(), bags),
        Some((_, Some(head))) => (head.install(&model)?, bags),
        Some((map, None)) => (model.clone(), pull_back(map, &bags)?),
    };

    let alignment = match (&args.src_protos, &args.tgt_protos) {
        (Some(s), Some(t)) => {
            let (_, sb) = data::load_bags(&manifest_path(s))?;
            let (_, tb) = data::load_bags(&manifest_path(t))?;
            let src = stack_prototypes(&sb)?;
            let tgt = stack_prototypes(&tb)?;
            let map = transform
                .as_ref()
                .map(|(m, _)| m.clone())
                .unwrap_or_else(|| TransportMap::identity(src.dim()));
            let mapped = adapt::apply_map(&map, &src.matrix)?;
            let cost = ot::cost_matrix(&mapped, &tgt.matrix, args.solver.metric)?;
            let plan = ot::sinkhorn(
                &cost,
                &ot::uniform_marginal(src.len()),
                &ot::uniform_marginal(tgt.len()),
                &solver,
            )?;
            Some(alignment_diagnostics(
                &map,
                &plan,
                &src,
                &tgt,
                &model,
                args.solver.metric,
            )?)
        }
        _ => None,
    };

    let report = metrics::eval_report(&scored_model, &scored_bags, alignment)?;
    let text = report.to_json();
    match &args.out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    log(
        "eval",
        "done",
        json!({ "auroc": report.auroc, "n_pos": report.n_pos, "n_neg": report.n_neg }),
    );
    Ok(())
}

pub fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
    Cli::try_parse_from(std::iter::once("hasd").chain(args.iter().copied()))
}
