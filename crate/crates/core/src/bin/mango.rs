use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mango::baselines::egnn::{mango_planarity_control, planarity_check, Plane, PLANAR_TOLERANCE};
use mango::checkpoint::{checkpoint_digest, load_checkpoint};
use mango::data::io::dataset_digest;
use mango::data::{generate_meta_dataset, read_dataset, write_dataset, GenConfig, Split};
use mango::diagnostics::{end_to_end_grad_check, layer_grad_suite, EndToEndSetup};
use mango::eval::{
    context_sweep, latent_dump, robustness_matrix, spearman, timing_compare, write_latent_csv, write_sweep_csv, ReportMeta,
};
use mango::model::{Conditioning, DecoderKind, Model};
use mango::train::{model_config_for, train, TrainConfig};
use mango::Error;

const LAYER_TOLERANCE: f64 = 1e-6;
const END_TO_END_TOLERANCE: f64 = 1e-3;
const CONTROL_MIN_RESIDUAL: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "mango", version, about = "Meta-learned full-trajectory graph simulators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic mass-spring meta-dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Rollout MSE against context size on held-out tasks.
    EvalSweep(SweepArgs),
    /// Normalized MSE under context noise and node dropout.
    EvalRobust(RobustArgs),
    /// Write the encoder latent of every task (needs a 2-dimensional latent).
    LatentDump(LatentArgs),
    /// Verify that EGNN stacks keep planar inputs planar.
    CheckPlanarity(PlanarityArgs),
    /// Compare full-trajectory decoding with an autoregressive rollout.
    Timing(TimingArgs),
    /// Verify gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct Common {
    /// Seed for every random choice made by the subcommand.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Total task count; a tenth (at least one) each goes to validation and test.
    #[arg(long, default_value_t = 80)]
    tasks: usize,
    /// Trials per task.
    #[arg(long, default_value_t = 16)]
    trials: usize,
    /// Frames per trial.
    #[arg(long, default_value_t = 50)]
    horizon: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// JSON training configuration; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// none, meta, oracle or two-stage.
    #[arg(long, default_value = "meta")]
    conditioning: Conditioning,
    /// mango or autoregressive.
    #[arg(long, default_value = "mango")]
    decoder: DecoderKind,
    /// Optimizer steps, one task per step.
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Std of the noise added to the encoder's copy of the context.
    #[arg(long)]
    context_noise: Option<f64>,
    /// Weight of the parameter regression term.
    #[arg(long)]
    rho_weight: Option<f64>,
    /// Steps between validation runs.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Validation runs without improvement before stopping.
    #[arg(long)]
    patience: Option<usize>,
    /// Width of every component.
    #[arg(long)]
    width: Option<usize>,
    /// Decoder blocks (message-passing layers for the autoregressive decoder).
    #[arg(long)]
    blocks: Option<usize>,
    /// Size of the context latent r.
    #[arg(long)]
    latent_dim: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Comma-separated context sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    sizes: Vec<usize>,
    /// Number of context subsets per size; seeds run from --seed upward.
    #[arg(long, default_value_t = 5)]
    repeats: u64,
    /// Use only the first target trials of each task.
    #[arg(long)]
    max_targets: Option<usize>,
}

#[derive(Args)]
struct RobustArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Model with an encoder.
    #[arg(long)]
    meta: PathBuf,
    /// Oracle anchor (normalized score 0).
    #[arg(long)]
    oracle: PathBuf,
    /// No-context anchor (normalized score 1).
    #[arg(long)]
    none: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Comma-separated noise levels.
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1")]
    sigmas: Vec<f64>,
    /// Comma-separated node dropout fractions.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.5")]
    dropouts: Vec<f64>,
    /// Context trials per task.
    #[arg(long, default_value_t = 4)]
    context_size: usize,
    /// Cap on target trials per task.
    #[arg(long)]
    max_targets: Option<usize>,
}

#[derive(Args)]
struct LatentArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Context trials per task.
    #[arg(long, default_value_t = 4)]
    context_size: usize,
}

#[derive(Args)]
struct PlanarityArgs {
    #[command(flatten)]
    common: Common,
    /// Directory for planarity.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// EGNN depth.
    #[arg(long, default_value_t = 3)]
    layers: usize,
    /// Random initializations per plane.
    #[arg(long, default_value_t = 20)]
    inits: usize,
}

#[derive(Args)]
struct TimingArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset providing the topology and a test trial.
    #[arg(long)]
    data: PathBuf,
    /// Full-trajectory checkpoint; freshly initialized when omitted.
    #[arg(long)]
    mango: Option<PathBuf>,
    /// Autoregressive checkpoint; freshly initialized when omitted.
    #[arg(long)]
    autoregressive: Option<PathBuf>,
    /// Horizon of the timed rollout.
    #[arg(long, default_value_t = 50)]
    horizon: usize,
    /// Timed repetitions after warm-up.
    #[arg(long, default_value_t = 20)]
    repeats: usize,
}

#[derive(Args)]
struct GradCheckArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Outcome of a subcommand that ran to completion.
enum Verdict {
    Ok,
    Failed,
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> mango::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> mango::Result<Verdict> {
    if a.tasks < 3 {
        return Err(Error::InvalidArgument("need at least 3 tasks (train, val, test)".into()));
    }
    let held = (a.tasks / 10).max(1);
    let mut cfg = GenConfig {
        train_tasks: a.tasks - 2 * held,
        val_tasks: held,
        test_tasks: held,
        trials_per_task: a.trials,
        seed: a.common.seed,
        ..GenConfig::default()
    };
    cfg.world.horizon = a.horizon;
    let meta = generate_meta_dataset(&cfg)?;
    write_dataset(&meta, &a.out)?;
    println!(
        "wrote {} tasks ({}/{}/{}) to {} digest {}",
        meta.tasks.len(),
        cfg.train_tasks,
        cfg.val_tasks,
        cfg.test_tasks,
        a.out.display(),
        dataset_digest(&a.out)?
    );
    Ok(Verdict::Ok)
}

fn train_cmd(a: TrainArgs) -> mango::Result<Verdict> {
    let meta = read_dataset(&a.data)?;
    let mut tc: TrainConfig = match &a.config {
        Some(path) => serde_json::from_slice(&fs::read(path)?)?,
        None => {
            let mut tc = TrainConfig::default();
            let trials = meta.manifest.trials_per_task;
            tc.context_range[1] = tc.context_range[1].min(trials.saturating_sub(1)).max(1);
            tc.val_context = tc.val_context.min(trials / 2).max(1);
            tc
        }
    };
    tc.seed = a.common.seed;
    if let Some(v) = a.steps {
        tc.steps = v;
    }
    if a.lr.is_some() {
        tc.lr = a.lr;
    }
    if let Some(v) = a.context_noise {
        tc.context_noise = v;
    }
    if let Some(v) = a.rho_weight {
        tc.rho_weight = v;
    }
    if let Some(v) = a.eval_every {
        tc.eval_every = v;
    }
    if let Some(v) = a.patience {
        tc.patience = v;
    }
    let mut mc = model_config_for(&meta, a.conditioning, a.decoder)?;
    if a.width.is_some() || a.blocks.is_some() {
        let latent = mc.encoder.latent_dim;
        mc.set_width(a.width.unwrap_or(mc.decoder.width), a.blocks.unwrap_or(mc.decoder.blocks));
        mc.encoder.latent_dim = latent;
    }
    if let Some(v) = a.latent_dim {
        mc.encoder.latent_dim = v;
    }
    mc.validate()?;
    let model = Model::<f32>::new(mc.clone(), a.common.seed)?;
    #[derive(Serialize)]
    struct RunConfig<'a> {
        model: &'a mango::model::ModelConfig,
        train: &'a TrainConfig,
        dataset_digest: String,
    }
    write_json(
        &a.out,
        "run_config.json",
        &RunConfig {
            model: &mc,
            train: &tc,
            dataset_digest: dataset_digest(&a.data)?,
        },
    )?;
    let outcome = train(&meta, model, &tc, Some(&a.out))?;
    let first = outcome.records.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let last = outcome.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    #[derive(Serialize)]
    struct Summary {
        kind: String,
        steps_run: usize,
        best_step: usize,
        best_val_mse: f64,
        first_loss: f64,
        last_loss: f64,
        stopped_early: bool,
        overlap_fraction: f64,
    }
    let summary = Summary {
        kind: mc.kind_tag(),
        steps_run: outcome.records.len(),
        best_step: outcome.best_step,
        best_val_mse: outcome.best_val,
        first_loss: first,
        last_loss: last,
        stopped_early: outcome.stopped_early,
        overlap_fraction: outcome.overlap_fraction,
    };
    write_json(&a.out, "summary.json", &summary)?;
    println!(
        "{}: {} steps, loss {:.4e} -> {:.4e}, best val MSE {:.4e} at step {}",
        summary.kind, summary.steps_run, first, last, outcome.best_val, outcome.best_step
    );
    Ok(if first.is_finite() && last.is_finite() { Verdict::Ok } else { Verdict::Failed })
}

fn with_digests(mut meta: ReportMeta, checkpoint: &Path, data: &Path) -> mango::Result<ReportMeta> {
    meta.checkpoint_digest = Some(checkpoint_digest(checkpoint)?);
    meta.dataset_digest = Some(dataset_digest(data)?);
    Ok(meta)
}

fn eval_sweep(a: SweepArgs) -> mango::Result<Verdict> {
    let meta = read_dataset(&a.data)?;
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let seeds: Vec<u64> = (0..a.repeats).map(|i| a.common.seed + i).collect();
    let mut report = context_sweep(&model, &meta, a.split, &a.sizes, &seeds, a.max_targets)?;
    report.meta = with_digests(report.meta, &a.checkpoint, &a.data)?;
    fs::create_dir_all(&a.out)?;
    write_sweep_csv(&a.out.join("sweep.csv"), &report.rows)?;
    write_json(&a.out, "sweep.json", &report)?;
    println!("context_size,mean_mse,ci_lo,ci_hi,count");
    for s in &report.summary {
        println!("{},{:.6e},{:.6e},{:.6e},{}", s.context_size, s.mean, s.ci_lo, s.ci_hi, s.count);
    }
    Ok(Verdict::Ok)
}

fn eval_robust(a: RobustArgs) -> mango::Result<Verdict> {
    let meta = read_dataset(&a.data)?;
    let (model, _) = load_checkpoint(&a.meta)?;
    let (oracle, _) = load_checkpoint(&a.oracle)?;
    let (none, _) = load_checkpoint(&a.none)?;
    let mut report = robustness_matrix(
        &model,
        &oracle,
        &none,
        &meta,
        a.split,
        &a.sigmas,
        &a.dropouts,
        a.context_size,
        a.common.seed,
        a.max_targets,
    )?;
    report.meta = with_digests(report.meta, &a.meta, &a.data)?;
    fs::create_dir_all(&a.out)?;
    let mut csv = String::from("sigma,dropout,mse,normalized,exceeds_no_context\n");
    for c in &report.cells {
        csv.push_str(&format!("{},{},{},{},{}\n", c.sigma, c.dropout, c.mse, c.normalized, c.exceeds_no_context));
    }
    fs::write(a.out.join("robust.csv"), &csv)?;
    write_json(&a.out, "robust.json", &report)?;
    print!("{csv}");
    Ok(Verdict::Ok)
}

fn latent_cmd(a: LatentArgs) -> mango::Result<Verdict> {
    let meta = read_dataset(&a.data)?;
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let rows = latent_dump(&model, &meta, a.split, a.context_size)?;
    fs::create_dir_all(&a.out)?;
    write_latent_csv(&a.out.join("latents.csv"), &rows)?;
    let rho: Vec<f64> = rows.iter().map(|r| r.rho[0]).collect();
    for k in 0..2 {
        let coord: Vec<f64> = rows.iter().map(|r| r.r[k]).collect();
        println!("spearman(r_{}, rho) = {:.4}", k + 1, spearman(&coord, &rho));
    }
    Ok(Verdict::Ok)
}

fn planarity_cmd(a: PlanarityArgs) -> mango::Result<Verdict> {
    if a.layers == 0 || a.inits == 0 {
        return Err(Error::InvalidArgument("--layers and --inits must be positive".into()));
    }
    let tilted = Plane {
        point: [0.3, -0.2, 0.5],
        normal: [0.4, -0.7, 0.6],
    };
    let mut reports = Vec::new();
    let mut ok = true;
    for (name, plane) in [("z=0", Plane::xy()), ("tilted", tilted)] {
        let r = planarity_check(a.layers, a.inits, plane, a.common.seed)?;
        println!(
            "egnn depth {} plane {name}: max residual {:.3e} over {} inits ({})",
            a.layers,
            r.max_residual,
            r.residuals.len(),
            if r.passed { "ok" } else { "too large" }
        );
        ok &= r.passed;
        reports.push(r);
    }
    let control = mango_planarity_control(tilted, a.common.seed)?;
    let control_ok = control > CONTROL_MIN_RESIDUAL;
    println!("mango decoder control residual {control:.3e} (expected > {CONTROL_MIN_RESIDUAL:e})");
    ok &= control_ok;
    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct Report<'a> {
            tolerance: f64,
            egnn: &'a [mango::baselines::egnn::PlanarityReport],
            mango_control_residual: f64,
            passed: bool,
        }
        write_json(
            out,
            "planarity.json",
            &Report {
                tolerance: PLANAR_TOLERANCE,
                egnn: &reports,
                mango_control_residual: control,
                passed: ok,
            },
        )?;
    }
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { Verdict::Ok } else { Verdict::Failed })
}

fn load_or_init(path: &Option<PathBuf>, meta: &mango::data::MetaDataset, kind: DecoderKind, seed: u64) -> mango::Result<Model<f32>> {
    match path {
        Some(p) => {
            let (m, _) = load_checkpoint(p)?;
            if m.config.decoder_kind != kind {
                return Err(Error::InvalidArgument(format!("{} holds a {} model", p.display(), m.config.kind_tag())));
            }
            Ok(m)
        }
        None => Model::new(model_config_for(meta, Conditioning::Meta, kind)?, seed),
    }
}

fn timing_cmd(a: TimingArgs) -> mango::Result<Verdict> {
    let meta = read_dataset(&a.data)?;
    let mango_model = load_or_init(&a.mango, &meta, DecoderKind::Mango, a.common.seed)?;
    let ar_model = load_or_init(&a.autoregressive, &meta, DecoderKind::Autoregressive, a.common.seed)?;
    let task = meta.split(Split::Test)[0];
    let context = &task.trials[..4.min(task.trials.len())];
    let target = task.trials.last().ok_or_else(|| Error::InvalidArgument("task has no trials".into()))?;
    let mut reports = Vec::new();
    for horizon in [1, a.horizon] {
        let x = target.truncated(horizon)?.x;
        let r = timing_compare(&mango_model, &ar_model, context, &task.rho, &x, meta.topology(), a.repeats)?;
        println!(
            "T={horizon}: full-trajectory median {:.2} ms (IQR {:.2}), autoregressive median {:.2} ms (IQR {:.2}), speedup {:.2}x",
            r.mango.median_ms, r.mango.iqr_ms, r.autoregressive.median_ms, r.autoregressive.iqr_ms, r.speedup
        );
        reports.push(r);
    }
    if let Some(out) = &a.out {
        write_json(out, "timing.json", &reports)?;
    }
    Ok(Verdict::Ok)
}

fn grad_check_cmd(a: GradCheckArgs) -> mango::Result<Verdict> {
    let rows = layer_grad_suite(a.common.seed)?;
    let mut ok = true;
    for row in &rows {
        let pass = row.max_rel_error < LAYER_TOLERANCE;
        ok &= pass;
        println!(
            "{:<28} rel error {:.3e} over {} entries {}",
            row.name,
            row.max_rel_error,
            row.checked_entries,
            if pass { "ok" } else { "FAIL" }
        );
    }
    let setup = EndToEndSetup::default();
    let mut e2e = Vec::new();
    for kind in [DecoderKind::Mango, DecoderKind::Autoregressive] {
        let r = end_to_end_grad_check(Conditioning::Meta, kind, &setup, a.common.seed)?;
        let pass = r.max_rel_error < END_TO_END_TOLERANCE;
        ok &= pass;
        println!(
            "end-to-end {:<16} f32 vs f64 rel error {:.3e} (worst {}) {}",
            r.kind,
            r.max_rel_error,
            r.worst_param,
            if pass { "ok" } else { "FAIL" }
        );
        e2e.push(r);
    }
    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct Report<'a> {
            layers: &'a [mango::diagnostics::GradCheckRow],
            end_to_end: &'a [mango::diagnostics::EndToEndReport],
            passed: bool,
        }
        write_json(
            out,
            "grad_check.json",
            &Report {
                layers: &rows,
                end_to_end: &e2e,
                passed: ok,
            },
        )?;
    }
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { Verdict::Ok } else { Verdict::Failed })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::EvalSweep(a) => eval_sweep(a),
        Command::EvalRobust(a) => eval_robust(a),
        Command::LatentDump(a) => latent_cmd(a),
        Command::CheckPlanarity(a) => planarity_cmd(a),
        Command::Timing(a) => timing_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
    };
    match result {
        Ok(Verdict::Ok) => ExitCode::SUCCESS,
        Ok(Verdict::Failed) => ExitCode::from(1),
        Err(e @ (Error::InvalidArgument(_) | Error::Config(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
