//! Optimization loop: SGD with momentum under linear warmup and cosine
//! decay, per-step transferability-graph refresh, periodic evaluation and
//! checkpointing, and the ablation grid.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{Datasets, RunConfig};
use crate::data::{BatchStream, DomainBatch, EvalSet, LabeledSet};
use crate::losses::LossWeights;
use crate::model::{FftatModel, ForwardOptions};
use crate::numerics::{Precision, Scalar, Tape, Tensor};
use crate::params::ParamStore;
use crate::transferability::TransferabilityGraph;
use crate::{Error, Result};

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: u64,
    pub feature_fusion: bool,
    pub tg_guidance: bool,
    /// Weight of the previous graph when refreshing; 0 replaces it.
    pub graph_ema: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        TrainConfig {
            steps: 2000,
            warmup_steps: 200,
            peak_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            batch_size: 16,
            seed: 0,
            eval_every: 500,
            feature_fusion: true,
            tg_guidance: true,
            graph_ema: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return fail("steps must be positive".into());
        }
        if self.warmup_steps >= self.steps {
            return fail(format!(
                "warmup_steps ({}) must be below steps ({})",
                self.warmup_steps, self.steps
            ));
        }
        if self.peak_lr.is_nan() || self.peak_lr <= 0.0 {
            return fail(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.graph_ema) {
            return fail(format!("graph_ema must be in [0, 1), got {}", self.graph_ema));
        }
        if self.weight_decay < 0.0 || self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return fail("loss weights and weight_decay must be non-negative".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            feature_fusion: self.feature_fusion,
            tg_guidance: self.tg_guidance,
            ..ForwardOptions::default()
        }
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at `steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps - cfg.warmup_steps) as f64;
    let t = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_clc: f64,
    pub l_dis: f64,
    pub l_pat: f64,
    pub mi: f64,
    pub total: f64,
    pub lr: f64,
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    /// Number of completed steps.
    pub step: u64,
    pub model: FftatModel<T>,
    pub velocity: ParamStore<T>,
    pub graph: TransferabilityGraph<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: FftatModel<T>) -> Self {
        TrainState {
            step: 0,
            velocity: model.params.zeros_like(),
            graph: TransferabilityGraph::unweighted(model.config.patches()),
            model,
        }
    }

    /// Writes parameters, momentum buffers and the current graph.
    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let names: Vec<String> = self.velocity.names().iter().map(|n| format!("velocity.{n}")).collect();
        let mut tensors: Vec<(&str, &Tensor<T>)> = self.model.params.iter().collect();
        tensors.extend(names.iter().map(String::as_str).zip(self.velocity.tensors()));
        tensors.push(("graph", &self.graph.matrix));
        let extra = serde_json::json!({
            "model": self.model.config,
            "graph_iteration_built": self.graph.iteration_built,
        });
        checkpoint::save(path, self.step, config_hash, extra, &tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, checkpoint::Header)> {
        let (header, tensors) = checkpoint::load::<T>(path)?;
        let config = serde_json::from_value(header.extra["model"].clone())
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let iteration_built: Option<u64> = serde_json::from_value(header.extra["graph_iteration_built"].clone())
            .map_err(|e| Error::Checkpoint(format!("graph step: {e}")))?;
        let mut params = ParamStore::new();
        let mut velocity = ParamStore::new();
        let mut graph = None;
        for (name, t) in tensors {
            if name == "graph" {
                graph = Some(t);
            } else if let Some(rest) = name.strip_prefix("velocity.") {
                velocity.insert(rest, t);
            } else {
                params.insert(name, t);
            }
        }
        let model = FftatModel::from_params(config, params)?;
        if velocity.names() != model.params.names() {
            return Err(Error::Checkpoint("momentum buffers do not match parameters".into()));
        }
        let matrix = graph.ok_or_else(|| Error::Checkpoint("missing graph".into()))?;
        let state = TrainState {
            step: header.step,
            model,
            velocity,
            graph: TransferabilityGraph {
                matrix,
                iteration_built,
            },
        };
        Ok((state, header))
    }
}

/// Forward, Eq. 16 loss, backward, SGD-momentum update, graph refresh.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &DomainBatch, cfg: &TrainConfig) -> Result<StepMetrics> {
    if state.graph.iteration_built != state.step.checked_sub(1) {
        return Err(Error::invalid(
            "train_step",
            format!(
                "graph built at {:?} consumed at step {}",
                state.graph.iteration_built, state.step
            ),
        ));
    }
    let lr = lr_at(state.step, cfg);
    let mut tape = Tape::new();
    let net = state.model.bind(&mut tape, true)?;
    let obj = net
        .objective(&mut tape, batch, &state.graph, cfg.forward_options(), cfg.weights())
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("step {}: {m}", state.step)),
            other => other,
        })?;
    let mut grads = tape.backward(obj.total)?;

    let lr_t = T::from_f64_lossy(lr);
    let m = T::from_f64_lossy(cfg.momentum);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    let names = state.model.params.names().to_vec();
    let params = state.model.params.tensors_mut();
    let velocity = state.velocity.tensors_mut();
    for (i, &var) in net.bound.vars().iter().enumerate() {
        let g = grads.take(var).unwrap_or_else(|| vec![T::zero(); params[i].numel()]);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "step {}: gradient of {} (losses {:?})",
                state.step, names[i], obj.report
            )));
        }
        let p = params[i].data_mut();
        let v = velocity[i].data_mut();
        for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            let g = if cfg.weight_decay > 0.0 { g + wd * *p } else { g };
            *v = m * *v + g;
            *p -= lr_t * *v;
        }
    }

    let fresh = TransferabilityGraph::build(&obj.vars.scores.scores, state.model.config.heads, state.step)?;
    state.graph = state.graph.blend(fresh, T::from_f64_lossy(cfg.graph_ema));
    let r = obj.report;
    let metrics = StepMetrics {
        step: state.step,
        l_clc: r.l_clc,
        l_dis: r.l_dis,
        l_pat: r.l_pat,
        mi: r.mi,
        total: r.total,
        lr,
    };
    state.step += 1;
    Ok(metrics)
}

/// Fraction of correctly classified images, fusion off.
pub fn evaluate<T: Scalar>(
    model: &FftatModel<T>,
    graph: &TransferabilityGraph<T>,
    set: &LabeledSet,
    tg_guidance: bool,
) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let pred = model.predict(&set.images, graph, tg_guidance)?;
    let correct = pred.iter().zip(&set.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / set.len() as f64)
}

pub fn evaluate_target<T: Scalar>(
    model: &FftatModel<T>,
    graph: &TransferabilityGraph<T>,
    set: &EvalSet,
    tg_guidance: bool,
) -> Result<f64> {
    evaluate(model, graph, &set.0, tg_guidance)
}

/// Result of a complete run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub target_acc: f64,
    pub source_acc: f64,
    pub final_total: f64,
    pub dir: PathBuf,
}

fn run_file(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(fs::File::create(&path).map_err(|e| Error::File {
        path,
        msg: e.to_string(),
    })?))
}

/// Trains `state` up to `cfg.train.steps`, writing run artifacts into `dir`.
///
/// Artifacts: `metrics.jsonl` (one line per step), `summary.csv` (one row
/// per evaluation), `graph_step{N}.csv` and `ckpt_{N}.bin` every
/// `eval_every` steps and at the end.
pub fn train_run<T: Scalar>(
    mut state: TrainState<T>,
    cfg: &RunConfig,
    data: &Datasets,
    dir: &Path,
) -> Result<(TrainState<T>, RunSummary)> {
    let tc = &cfg.train;
    tc.validate()?;
    fs::create_dir_all(dir)?;
    let hash = cfg.hash();
    let resumed = state.step > 0;
    let mut metrics = if resumed {
        BufWriter::new(
            fs::OpenOptions::new()
                .append(true)
                .create(true)
                .open(dir.join("metrics.jsonl"))?,
        )
    } else {
        run_file(dir, "metrics.jsonl")?
    };
    let mut summary = if resumed {
        BufWriter::new(
            fs::OpenOptions::new()
                .append(true)
                .create(true)
                .open(dir.join("summary.csv"))?,
        )
    } else {
        let mut f = run_file(dir, "summary.csv")?;
        writeln!(f, "step,target_acc,source_acc,total")?;
        f
    };
    let mut stream = BatchStream::new(&data.source, &data.target, tc.batch_size, tc.seed)?;
    let mut last = None;
    let mut accs = (0.0, 0.0);
    while state.step < tc.steps {
        let batch = stream.batch_at(state.step);
        let m = train_step(&mut state, &batch, tc)?;
        serde_json::to_writer(&mut metrics, &m)?;
        metrics.write_all(b"\n")?;
        last = Some(m);
        let done = state.step;
        if done.is_multiple_of(tc.eval_every.max(1)) || done == tc.steps {
            metrics.flush()?;
            accs = (
                evaluate_target(&state.model, &state.graph, &data.target_eval, tc.tg_guidance)?,
                evaluate(&state.model, &state.graph, &data.source_eval, tc.tg_guidance)?,
            );
            writeln!(summary, "{done},{},{},{}", accs.0, accs.1, m.total)?;
            summary.flush()?;
            fs::write(dir.join(format!("graph_step{done}.csv")), state.graph.to_csv())?;
            state.save(dir.join(format!("ckpt_{done}.bin")), &hash)?;
        }
    }
    metrics.flush()?;
    let run = RunSummary {
        steps: state.step,
        target_acc: accs.0,
        source_acc: accs.1,
        final_total: last.map_or(f64::NAN, |m| m.total),
        dir: dir.to_path_buf(),
    };
    Ok((state, run))
}

/// Trains a fresh model from `cfg` in precision `T`.
pub fn train_fresh<T: Scalar>(cfg: &RunConfig, data: &Datasets, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    cfg.write_to(dir)?;
    let model = FftatModel::<T>::init(cfg.model, cfg.train.seed)?;
    Ok(train_run(TrainState::new(model), cfg, data, dir)?.1)
}

/// [`train_fresh`] in the configured precision.
pub fn train(cfg: &RunConfig, data: &Datasets, dir: &Path) -> Result<RunSummary> {
    match cfg.precision {
        Precision::F32 => train_fresh::<f32>(cfg, data, dir),
        Precision::F64 => train_fresh::<f64>(cfg, data, dir),
    }
}

/// One ablation setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    WithoutFusion,
    WithoutGraph,
    SourceOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::WithoutFusion,
        Variant::WithoutGraph,
        Variant::SourceOnly,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutFusion => "w/o FF",
            Variant::WithoutGraph => "w/o TG-SA",
            Variant::SourceOnly => "source-only",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutFusion => "no_ff",
            Variant::WithoutGraph => "no_tgsa",
            Variant::SourceOnly => "source_only",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Variant::Full => {}
            Variant::WithoutFusion => cfg.feature_fusion = false,
            Variant::WithoutGraph => cfg.tg_guidance = false,
            Variant::SourceOnly => {
                cfg.alpha = 0.0;
                cfg.beta = 0.0;
                cfg.gamma = 0.0;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub target_acc: f64,
    pub source_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn mean_target(&self, variant: Variant) -> Option<f64> {
        let accs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.target_acc)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Per-run rows followed by one mean row per variant.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,target_acc,source_acc\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.4}",
                r.variant.label(),
                r.seed,
                r.target_acc,
                r.source_acc
            );
        }
        for v in Variant::ALL {
            let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == v).collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            let t = rows.iter().map(|r| r.target_acc).sum::<f64>() / n;
            let s = rows.iter().map(|r| r.source_acc).sum::<f64>() / n;
            let _ = writeln!(out, "{},mean,{t:.4},{s:.4}", v.label());
        }
        out
    }
}

/// Trains every `variant × seed` combination of `base` on `data`, at most
/// `jobs` at a time, each in its own subdirectory of `dir`.
pub fn run_ablation(
    base: &RunConfig,
    data: &Datasets,
    variants: &[Variant],
    seeds: &[u64],
    jobs: usize,
    dir: &Path,
) -> Result<AblationReport> {
    use rayon::prelude::*;
    let grid: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        grid.par_iter()
            .map(|&(variant, seed)| {
                let mut cfg = base.clone();
                cfg.train.seed = seed;
                variant.apply(&mut cfg.train);
                let sub = dir.join(format!("{}_seed{seed}", variant.slug()));
                let run = train(&cfg, data, &sub)?;
                Ok(AblationRow {
                    variant,
                    seed,
                    target_acc: run.target_acc,
                    source_acc: run.source_acc,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let report = AblationReport { rows };
    fs::create_dir_all(dir)?;
    fs::write(dir.join("ablation.csv"), report.to_csv())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            steps: 5000,
            warmup_steps: 500,
            peak_lr: 0.06,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        assert_eq!(lr_at(0, &c), 0.0);
        assert!((lr_at(500, &c) - 0.06).abs() < 1e-15);
        assert!(lr_at(5000, &c).abs() < 1e-15);
        assert!((lr_at(250, &c) - 0.03).abs() < 1e-15);
        // continuous at the junction
        assert!((lr_at(499, &c) - lr_at(500, &c)).abs() < 0.06 / 500.0 + 1e-12);
    }

    #[test]
    fn schedule_is_monotone_in_each_phase() {
        let c = cfg();
        for s in 1..500 {
            assert!(lr_at(s, &c) > lr_at(s - 1, &c));
        }
        for s in 501..=5000 {
            assert!(lr_at(s, &c) <= lr_at(s - 1, &c));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_steps: 2000,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            peak_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn variants_set_flags() {
        let mut c = TrainConfig::default();
        Variant::WithoutGraph.apply(&mut c);
        assert!(!c.tg_guidance && c.feature_fusion);
        let mut c = TrainConfig::default();
        Variant::WithoutFusion.apply(&mut c);
        assert!(c.tg_guidance && !c.feature_fusion);
        let mut c = TrainConfig::default();
        Variant::SourceOnly.apply(&mut c);
        assert_eq!(
            c.weights(),
            LossWeights {
                alpha: 0.0,
                beta: 0.0,
                gamma: 0.0
            }
        );
    }
}
