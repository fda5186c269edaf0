//! Command-line interface. Exit codes: 0 success, 1 usage or configuration
//! error, 2 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{gen_synthetic_split, write_folder, Split};
use crate::numerics::{Fault, Precision, Scalar};
use crate::trainer::{self, run_ablation, train_run, TrainState, Variant};
use crate::transferability::TransferabilityGraph;
use crate::verify::{full_suite, SUITE_TOL};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "fftat",
    version,
    about = "Transferability-aware ViT for unsupervised domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Train one run from a config file.
    Train(TrainArgs),
    /// Evaluate a trained run on its held-out splits.
    Eval(EvalArgs),
    /// Train every ablation variant for several seeds.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient-check suite in f64.
    Gradcheck(GradcheckArgs),
    /// Print a transferability graph as CSV and a text heatmap.
    ExportGraph(ExportArgs),
}

#[derive(Subcommand, Debug)]
enum DatasetCommand {
    /// Render the synthetic domain pair into image folders.
    Gen(GenArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    side: usize,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML or JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run directory containing `config.toml` and checkpoints.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint to evaluate; defaults to the latest in the run directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory; defaults to `<out_dir>/<name>_ablation`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip the source-only baseline.
    #[arg(long)]
    no_baseline: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Run directory; the graph from its latest evaluation is used.
    #[arg(long, conflicts_with_all = ["checkpoint", "csv"])]
    run: Option<PathBuf>,
    #[arg(long, conflicts_with = "csv")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also write the CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            }
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Dataset {
            command: DatasetCommand::Gen(a),
        } => dataset_gen(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::ExportGraph(a) => cmd_export_graph(&a, out),
    }
}

fn dataset_gen(a: &GenArgs, out: &mut dyn Write) -> Result<i32> {
    let (s, t) = gen_synthetic_split(a.seed, a.n_per_class, a.classes, a.side, Split::Train)?;
    let (st, tt) = gen_synthetic_split(a.seed, a.test_per_class, a.classes, a.side, Split::Test)?;
    for (name, set) in [
        ("source", &s),
        ("target", &t),
        ("source_test", &st),
        ("target_test", &tt),
    ] {
        write_folder(set, a.out.join(name))?;
        writeln!(out, "{name}: {} images", set.len())?;
    }
    Ok(EXIT_OK)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = a.config.load()?;
    let data = cfg.dataset.load(&cfg.model)?;
    let dir = cfg.run_dir();
    let summary = match &a.resume {
        None => trainer::train(&cfg, &data, &dir)?,
        Some(ckpt) => {
            fs::create_dir_all(&dir)?;
            cfg.write_to(&dir)?;
            match cfg.precision {
                Precision::F32 => resume::<f32>(ckpt, &cfg, &data, &dir)?,
                Precision::F64 => resume::<f64>(ckpt, &cfg, &data, &dir)?,
            }
        }
    };
    writeln!(
        out,
        "run {}: {} steps, target acc {:.4}, source acc {:.4}",
        summary.dir.display(),
        summary.steps,
        summary.target_acc,
        summary.source_acc
    )?;
    Ok(EXIT_OK)
}

fn resume<T: Scalar>(
    ckpt: &Path,
    cfg: &RunConfig,
    data: &crate::config::Datasets,
    dir: &Path,
) -> Result<trainer::RunSummary> {
    let (state, _) = TrainState::<T>::load(ckpt)?;
    if state.model.config != cfg.model {
        return Err(Error::Config(
            "checkpoint model dimensions differ from the config".into(),
        ));
    }
    Ok(train_run(state, cfg, data, dir)?.1)
}

/// Highest-step `ckpt_{N}.bin` in `dir`.
fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    latest_numbered(dir, "ckpt_", ".bin")
        .ok_or_else(|| Error::Config(format!("no checkpoint found in {}", dir.display())))
}

fn latest_numbered(dir: &Path, prefix: &str, suffix: &str) -> Option<PathBuf> {
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n: u64 = name.strip_prefix(prefix)?.strip_suffix(suffix)?.parse().ok()?;
            Some((n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
        .map(|(_, p)| p)
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = RunConfig::from_file(a.run.join("config.toml"))?;
    let ckpt = match &a.checkpoint {
        Some(p) => p.clone(),
        None => latest_checkpoint(&a.run)?,
    };
    let data = cfg.dataset.load(&cfg.model)?;
    let (step, tgt, src) = match cfg.precision {
        Precision::F32 => eval_checkpoint::<f32>(&ckpt, &cfg, &data)?,
        Precision::F64 => eval_checkpoint::<f64>(&ckpt, &cfg, &data)?,
    };
    writeln!(out, "checkpoint: {}", ckpt.display())?;
    writeln!(out, "step: {step}")?;
    writeln!(out, "target_acc: {tgt:.4}")?;
    writeln!(out, "source_acc: {src:.4}")?;
    Ok(EXIT_OK)
}

fn eval_checkpoint<T: Scalar>(ckpt: &Path, cfg: &RunConfig, data: &crate::config::Datasets) -> Result<(u64, f64, f64)> {
    let (state, _) = TrainState::<T>::load(ckpt)?;
    let tg = cfg.train.tg_guidance;
    Ok((
        state.step,
        trainer::evaluate_target(&state.model, &state.graph, &data.target_eval, tg)?,
        trainer::evaluate(&state.model, &state.graph, &data.source_eval, tg)?,
    ))
}

fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = a.config.load()?;
    if a.seeds.is_empty() {
        return Err(Error::Config("--seeds must list at least one seed".into()));
    }
    let data = cfg.dataset.load(&cfg.model)?;
    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(format!("{}_ablation", cfg.name)));
    let variants: Vec<Variant> = Variant::ALL
        .into_iter()
        .filter(|v| !(a.no_baseline && *v == Variant::SourceOnly))
        .collect();
    let report = run_ablation(&cfg, &data, &variants, &a.seeds, a.jobs, &dir)?;
    write!(out, "{}", report.to_csv())?;
    writeln!(out, "written to {}", dir.join("ablation.csv").display())?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some("softmax") => Some(Fault::SoftmaxBackward),
        Some(other) => return Err(Error::Config(format!("unknown fault '{other}' (expected softmax)"))),
    };
    let rows = full_suite(fault)?;
    writeln!(
        out,
        "{:<28} {:<10} {:>12} {:>8}  result",
        "component", "kind", "max_rel_err", "coords"
    )?;
    let mut failed = Vec::new();
    for r in &rows {
        let kind = serde_json::to_value(r.kind)?;
        writeln!(
            out,
            "{:<28} {:<10} {:>12.3e} {:>8}  {}",
            r.component,
            kind.as_str().unwrap_or(""),
            r.max_rel_err,
            r.coordinates,
            if r.passed() { "ok" } else { "FAIL" }
        )?;
        if !r.passed() {
            failed.push(r.component.as_str());
        }
    }
    if failed.is_empty() {
        writeln!(out, "all {} checks within {SUITE_TOL:e}", rows.len())?;
        Ok(EXIT_OK)
    } else {
        writeln!(out, "FAILED: {}", failed.join(", "))?;
        Ok(EXIT_NUMERICAL)
    }
}

fn graph_from_checkpoint(path: &Path) -> Result<TransferabilityGraph<f64>> {
    match TrainState::<f64>::load(path) {
        Ok((s, _)) => Ok(s.graph),
        Err(_) => {
            let (s, _) = TrainState::<f32>::load(path)?;
            Ok(TransferabilityGraph {
                matrix: s.graph.matrix.cast(),
                iteration_built: s.graph.iteration_built,
            })
        }
    }
}

fn cmd_export_graph(a: &ExportArgs, out: &mut dyn Write) -> Result<i32> {
    let graph = if let Some(p) = &a.csv {
        TransferabilityGraph::from_csv(&fs::read_to_string(p)?)?
    } else if let Some(p) = &a.checkpoint {
        graph_from_checkpoint(p)?
    } else if let Some(dir) = &a.run {
        let csv = latest_numbered(dir, "graph_step", ".csv")
            .ok_or_else(|| Error::Config(format!("no graph_step*.csv in {}", dir.display())))?;
        TransferabilityGraph::from_csv(&fs::read_to_string(csv)?)?
    } else {
        return Err(Error::Config("one of --run, --checkpoint or --csv is required".into()));
    };
    let csv = graph.to_csv();
    if let Some(p) = &a.out {
        fs::write(p, &csv)?;
    }
    write!(out, "{csv}\n{}", graph.heatmap())?;
    Ok(EXIT_OK)
}
