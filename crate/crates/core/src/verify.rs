//! Finite-difference gradient-check suite over every differentiable op,
//! the composite layers, and the full training objective of a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::attention::{multi_head_attention, AttentionKind, AttentionParams};
use crate::data::{DomainBatch, CHANNELS};
use crate::feature_fusion::fuse_groups;
use crate::losses::{patch_loss, self_clustering_mi, LossWeights};
use crate::model::{FftatModel, ForwardOptions, ModelConfig};
use crate::numerics::{grad_check_with_fault, Fault, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::transferability::TransferabilityGraph;
use crate::Result;

/// Tolerance the whole suite must meet.
pub const SUITE_TOL: f64 = 1e-4;
/// Tolerance for single ops.
pub const OP_TOL: f64 = 1e-6;

const EPS: f64 = 1e-5;
const SEEDS: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Op,
    Layer,
    EndToEnd,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub component: String,
    pub kind: CheckKind,
    pub max_rel_err: f64,
    pub coordinates: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= SUITE_TOL
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, seed)
}

/// Weighted sum so that each output coordinate gets its own upstream
/// gradient.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random(tape.shape(y), seed ^ 0xABCD));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
type InputFn = Box<dyn Fn(u64) -> Vec<Tensor<f64>>>;

fn op_cases() -> Vec<(&'static str, InputFn, OpFn)> {
    fn two(a: &'static [usize], b: &'static [usize]) -> InputFn {
        Box::new(move |s| vec![random(a, s), random(b, s + 10)])
    }
    fn one(a: &'static [usize]) -> InputFn {
        Box::new(move |s| vec![random(a, s)])
    }
    fn pos(a: &'static [usize]) -> InputFn {
        Box::new(move |s| vec![uniform(a, 0.2, 2.0, s)])
    }
    vec![
        ("add", two(&[3, 4], &[3, 4]), Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", two(&[3, 4], &[3, 4]), Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", two(&[3, 4], &[3, 4]), Box::new(|t, v| t.mul(v[0], v[1]))),
        (
            "add_broadcast",
            two(&[2, 3, 4], &[4]),
            Box::new(|t, v| t.add_broadcast(v[0], v[1])),
        ),
        (
            "mul_broadcast",
            two(&[2, 3, 4], &[3, 4]),
            Box::new(|t, v| t.mul_broadcast(v[0], v[1])),
        ),
        ("scale", one(&[5]), Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        (
            "matmul",
            two(&[2, 3, 4], &[4, 5]),
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "bmm",
            two(&[2, 3, 4], &[2, 4, 5]),
            Box::new(|t, v| t.bmm(v[0], v[1], false)),
        ),
        (
            "bmm_transposed",
            two(&[2, 3, 4], &[2, 5, 4]),
            Box::new(|t, v| t.bmm(v[0], v[1], true)),
        ),
        ("permute", one(&[2, 3, 4]), Box::new(|t, v| t.permute(v[0], &[2, 0, 1]))),
        ("transpose", one(&[3, 4]), Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", one(&[2, 6]), Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        (
            "concat",
            two(&[2, 3], &[2, 2]),
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        ("slice", one(&[4, 3]), Box::new(|t, v| t.slice(v[0], 0, 1, 3))),
        ("softmax", one(&[3, 5]), Box::new(|t, v| Ok(t.softmax(v[0])))),
        (
            "layer_norm",
            one(&[3, 6]),
            Box::new(|t, v| Ok(t.layer_norm(v[0], 1e-6))),
        ),
        ("gelu", one(&[3, 4]), Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("sigmoid", one(&[3, 4]), Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("log", pos(&[6]), Box::new(|t, v| Ok(t.log(v[0])))),
        ("exp", one(&[6]), Box::new(|t, v| Ok(t.exp(v[0])))),
        ("sum", one(&[2, 3]), Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", one(&[2, 3]), Box::new(|t, v| Ok(t.mean(v[0])))),
        ("sum_axis", one(&[2, 3, 4]), Box::new(|t, v| t.sum_axis(v[0], 1))),
        ("mean_axis", one(&[2, 3, 4]), Box::new(|t, v| t.mean_axis(v[0], 0))),
        (
            "cross_entropy",
            one(&[3, 4]),
            Box::new(|t, v| t.cross_entropy(v[0], &[0, 3, 1])),
        ),
        (
            "binary_cross_entropy",
            Box::new(|s| vec![uniform(&[5], 0.05, 0.95, s)]),
            Box::new(|t, v| t.binary_cross_entropy(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0], 1e-7)),
        ),
        (
            "entropy",
            Box::new(|s| vec![uniform(&[2, 4], 0.05, 1.0, s)]),
            Box::new(|t, v| Ok(t.entropy(v[0]))),
        ),
    ]
}

type CheckFn<'a> = dyn Fn(&mut Tape<f64>, &[Var], u64) -> Result<Var> + 'a;

fn check(
    component: &str,
    kind: CheckKind,
    inputs: &dyn Fn(u64) -> Vec<Tensor<f64>>,
    f: &CheckFn<'_>,
    fault: Option<Fault>,
) -> Result<CheckRow> {
    let mut row = CheckRow {
        component: component.to_string(),
        kind,
        max_rel_err: 0.0,
        coordinates: 0,
    };
    for seed in 0..SEEDS {
        let params = inputs(seed);
        let r = grad_check_with_fault(|tape, vars| f(tape, vars, seed), &params, EPS, fault)?;
        row.max_rel_err = row.max_rel_err.max(r.max_rel_err);
        row.coordinates += r.coordinates;
    }
    Ok(row)
}

/// Per-op checks (3 seeds each, f64, probed with random output weights).
pub fn op_checks(fault: Option<Fault>) -> Result<Vec<CheckRow>> {
    op_cases()
        .into_iter()
        .map(|(name, inputs, op)| {
            let f = |t: &mut Tape<f64>, v: &[Var], seed: u64| {
                let y = op(t, v)?;
                probe(t, y, seed)
            };
            check(name, CheckKind::Op, &inputs, &f, fault)
        })
        .collect()
}

fn attention_store(seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AttentionParams::init(&mut store, "a", 4, 2, &mut rng).expect("valid heads");
    let noise = Normal::new(0.0, 0.5).unwrap();
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    store
}

/// Graph-guided and transferability-aware attention, feature fusion, the
/// patch loss and the clustering term.
pub fn layer_checks(fault: Option<Fault>) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let graph = uniform(&[4, 4], 0.0, 1.0, 99);
    let scores = uniform(&[2, 3], 0.0, 1.0, 98);
    for (name, kind) in [
        ("tg_sa", AttentionKind::Graph(&graph)),
        ("tsa", AttentionKind::Transferability(&scores)),
    ] {
        let inputs = |seed: u64| {
            let mut v = vec![random(&[2, 4, 4], seed + 50)];
            v.extend(attention_store(seed).tensors().iter().cloned());
            v
        };
        let f = |t: &mut Tape<f64>, v: &[Var], seed: u64| {
            let store = attention_store(seed);
            let bound = Bound::from_vars(&store, &v[1..])?;
            let params = AttentionParams::bind(&bound, "a", 2)?;
            let y = multi_head_attention(t, v[0], &params, kind)?;
            probe(t, y, seed)
        };
        rows.push(check(name, CheckKind::Layer, &inputs, &f, fault)?);
    }
    let fusion_in = |seed: u64| vec![random(&[5, 2, 3], seed)];
    let fusion = |t: &mut Tape<f64>, v: &[Var], seed: u64| {
        let y = fuse_groups(t, v[0], &[2, 3], true)?;
        probe(t, y, seed)
    };
    rows.push(check("feature_fusion", CheckKind::Layer, &fusion_in, &fusion, fault)?);
    let pat_in = |seed: u64| vec![uniform(&[2, 3], 0.05, 0.95, seed)];
    let pat = |t: &mut Tape<f64>, v: &[Var], _: u64| patch_loss(t, v[0], &[1.0, 0.0]);
    rows.push(check("patch_loss", CheckKind::Layer, &pat_in, &pat, fault)?);
    let mi_in = |seed: u64| vec![uniform(&[3, 4], -2.0, 2.0, seed)];
    let mi = |t: &mut Tape<f64>, v: &[Var], _: u64| self_clustering_mi(t, v[0]);
    rows.push(check("mutual_information", CheckKind::Layer, &mi_in, &mi, fault)?);
    Ok(rows)
}

/// The `d=8, P=4, L=2, K=2` model used by the end-to-end check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_side: 8,
        patch: 4,
        dim: 8,
        heads: 2,
        layers: 2,
        classes: 2,
    }
}

/// Tiny model with weights spread well beyond the init scale so every
/// nonlinearity is exercised.
pub fn tiny_model(seed: u64) -> FftatModel<f64> {
    let mut m = FftatModel::init(tiny_config(), seed).expect("valid tiny config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let noise = Normal::new(0.0, 0.3).unwrap();
    for t in m.params.tensors_mut() {
        for v in t.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    m
}

/// `per_domain` random source images (with labels) and as many target
/// images at side 8.
pub fn tiny_batch(per_domain: usize, seed: u64) -> DomainBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = CHANNELS * 64 * per_domain;
    DomainBatch {
        source_images: (0..len).map(|_| rng.random::<f32>()).collect(),
        source_labels: (0..per_domain).map(|i| i % 2).collect(),
        target_images: (0..len).map(|_| rng.random::<f32>()).collect(),
        side: 8,
    }
}

/// A non-trivial graph for the tiny model.
pub fn tiny_graph(seed: u64) -> TransferabilityGraph<f64> {
    let scores = uniform(&[3, 4], 0.2, 1.0, seed);
    TransferabilityGraph::build(&scores, 2, 0).expect("valid scores")
}

/// Gradient of the full weighted objective with respect to every model
/// parameter. Discriminators are attached without gradient reversal and
/// the patch scores are held at their unperturbed values (they carry no
/// gradient by construction), so the analytic gradient is exactly what
/// central differences measure.
pub fn end_to_end_check(per_domain: usize, fault: Option<Fault>) -> Result<CheckRow> {
    let opts = ForwardOptions {
        adversarial: false,
        ..ForwardOptions::default()
    };
    let weights = LossWeights {
        alpha: 1.0,
        beta: 0.5,
        gamma: 0.1,
    };
    let inputs = |seed: u64| tiny_model(seed).params.tensors().to_vec();
    let f = |t: &mut Tape<f64>, v: &[Var], seed: u64| {
        let model = tiny_model(seed);
        let batch = tiny_batch(per_domain, seed + 7);
        let graph = tiny_graph(seed + 3);
        let scores = {
            let mut t0 = Tape::new();
            let net = model.bind(&mut t0, false)?;
            net.objective(&mut t0, &batch, &graph, opts, weights)?.vars.scores
        };
        let net = crate::model::Network::bind(Bound::from_vars(&model.params, v)?, model.config)?;
        Ok(net
            .objective_with_scores(t, &batch, &graph, opts, weights, Some(&scores))?
            .total)
    };
    let name = if per_domain == 1 {
        "end_to_end".to_string()
    } else {
        format!("end_to_end_fused_{per_domain}x2")
    };
    check(&name, CheckKind::EndToEnd, &inputs, &f, fault)
}

/// Everything: ops, layers, and the end-to-end objective with one and with
/// two images per domain.
pub fn full_suite(fault: Option<Fault>) -> Result<Vec<CheckRow>> {
    let mut rows = op_checks(fault)?;
    rows.extend(layer_checks(fault)?);
    rows.push(end_to_end_check(1, fault)?);
    rows.push(end_to_end_check(2, fault)?);
    Ok(rows)
}
