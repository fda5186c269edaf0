//! Full network: patch embedding, `L−1` graph-guided blocks, latent feature
//! fusion, patch discriminator, one transferability-aware block, and the
//! class and domain heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{transformer_block, AttentionKind, BlockParams};
use crate::data::{DomainBatch, CHANNELS};
use crate::feature_fusion::fuse_groups;
use crate::losses::{
    classification_loss, domain_loss, patch_loss, self_clustering_mi, total_loss, LossParts, LossReport, LossWeights,
};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::params::{Bound, LayerNorm, Linear, ParamStore};
use crate::patch_embedding::{embed, PatchEmbedParams, PatchGeometry};
use crate::transferability::{patch_discriminate, DiscriminatorParams, PatchScores, TransferabilityGraph};
use crate::{Error, Result};

/// Network dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_side: 32,
            patch: 8,
            dim: 64,
            heads: 4,
            layers: 4,
            classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn geometry(&self) -> Result<PatchGeometry> {
        PatchGeometry::new(CHANNELS, self.image_side, self.patch)
    }

    pub fn patches(&self) -> usize {
        let g = self.image_side / self.patch.max(1);
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        if self.layers < 1 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Per-forward switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    /// Fuse patch embeddings within each domain before the last block.
    pub feature_fusion: bool,
    /// Guide blocks `1..L−1` with the transferability graph; vanilla
    /// attention otherwise.
    pub tg_guidance: bool,
    /// Replace the patch scores with ones.
    pub unit_scores: bool,
    /// Put gradient-reversal layers in front of both discriminators. With
    /// this off the analytic gradient is the plain gradient of the loss,
    /// which is what finite differences measure.
    pub adversarial: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            feature_fusion: true,
            tg_guidance: true,
            unit_scores: false,
            adversarial: true,
        }
    }
}

impl ForwardOptions {
    /// Evaluation setting: fusion off, graph guidance kept.
    pub fn eval(tg_guidance: bool) -> Self {
        ForwardOptions {
            feature_fusion: false,
            tg_guidance,
            unit_scores: false,
            adversarial: false,
        }
    }
}

/// Parameters of every sub-network, bound to one tape.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub embed: PatchEmbedParams,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub domain_disc: DiscriminatorParams,
    pub patch_disc: DiscriminatorParams,
    pub bound: Bound,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars<T> {
    /// `[n, K]`
    pub logits: Var,
    /// `[n, d]`, after the final LayerNorm.
    pub class_token: Var,
    /// `[n]` source probability of each image.
    pub domain_probs: Var,
    /// `[n, P]` source probability of each patch.
    pub patch_probs: Var,
    /// Detached scores used by the transferability-aware block.
    pub scores: PatchScores<T>,
}

/// Plain values of a training forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub class_logits: Tensor<T>,
    pub class_token: Tensor<T>,
    pub patch_probs: Tensor<T>,
    pub patch_scores: Tensor<T>,
    pub fresh_graph: TransferabilityGraph<T>,
}

/// Total loss of one batch together with everything that produced it.
#[derive(Clone, Debug)]
pub struct Objective<T> {
    pub total: Var,
    pub report: LossReport,
    pub vars: ForwardVars<T>,
}

impl Network {
    pub fn bind(bound: Bound, config: ModelConfig) -> Result<Self> {
        let geo = config.geometry()?;
        let blocks = (0..config.layers)
            .map(|l| BlockParams::bind(&bound, &format!("blocks.{l}"), config.heads))
            .collect::<Result<_>>()?;
        Ok(Network {
            config,
            embed: PatchEmbedParams::bind(&bound, "patch_embed", geo, config.dim)?,
            blocks,
            norm: LayerNorm::bind(&bound, "norm")?,
            head: Linear::bind(&bound, "head")?,
            domain_disc: DiscriminatorParams::bind(&bound, "domain_disc")?,
            patch_disc: DiscriminatorParams::bind(&bound, "patch_disc")?,
            bound,
        })
    }

    fn image_count(&self, images_len: usize) -> Result<usize> {
        let len = CHANNELS * self.config.image_side * self.config.image_side;
        if images_len == 0 || !images_len.is_multiple_of(len) {
            return Err(Error::invalid(
                "forward",
                format!("{images_len} pixel values is not a whole number of {len}-value images"),
            ));
        }
        Ok(images_len / len)
    }

    /// Class token after the final LayerNorm and the logits computed from it.
    fn heads<T: Scalar>(&self, tape: &mut Tape<T>, tokens: Var, n: usize) -> Result<(Var, Var)> {
        let x = self.norm.forward(tape, tokens)?;
        let cls = tape.slice(x, 1, 0, 1)?;
        let cls = tape.reshape(cls, &[n, self.config.dim])?;
        let logits = self.head.forward(tape, cls)?;
        Ok((cls, logits))
    }

    /// Full forward pass over `images` (`n` images, `C×H×W` each).
    /// `groups` splits the rows into domains for feature fusion.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        images: &[T],
        groups: &[usize],
        graph: &TransferabilityGraph<T>,
        opts: ForwardOptions,
    ) -> Result<ForwardVars<T>> {
        self.forward_with_scores(tape, images, groups, graph, opts, None)
    }

    /// [`Network::forward`] with the transferability-aware block fed
    /// `scores` instead of the ones derived from this pass.
    pub fn forward_with_scores<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        images: &[T],
        groups: &[usize],
        graph: &TransferabilityGraph<T>,
        opts: ForwardOptions,
        scores: Option<&PatchScores<T>>,
    ) -> Result<ForwardVars<T>> {
        let n = self.image_count(images.len())?;
        let p = self.config.patches();
        if graph.patches() != p {
            return Err(Error::invalid(
                "forward",
                format!("graph over {} patches for a model with {p}", graph.patches()),
            ));
        }
        let mut x = embed(tape, &self.embed, images)?;
        let padded = graph.pad();
        let (last, guided) = self.blocks.split_last().expect("at least one block");
        for block in guided {
            let kind = if opts.tg_guidance {
                AttentionKind::Graph(&padded)
            } else {
                AttentionKind::Vanilla
            };
            x = transformer_block(tape, x, block, kind)?;
        }

        let cls = tape.slice(x, 1, 0, 1)?;
        let patches = tape.slice(x, 1, 1, 1 + p)?;
        let patches = fuse_groups(tape, patches, groups, opts.feature_fusion)?;
        let x = tape.concat(&[cls, patches], 1)?;

        let reversal = opts.adversarial.then_some(T::one());
        let patch_probs = patch_discriminate(tape, patches, &self.patch_disc, reversal)?;
        let scores = match scores {
            Some(s) if s.scores.shape() != [n, p] => {
                return Err(Error::invalid(
                    "forward",
                    format!("score override {:?} for {n} images of {p} patches", s.scores.shape()),
                ))
            }
            Some(s) => s.clone(),
            None if opts.unit_scores => PatchScores::unit(n, p),
            None => PatchScores::from_probs(tape.value(patch_probs).clone()),
        };

        let x = transformer_block(tape, x, last, AttentionKind::Transferability(&scores.scores))?;
        let (class_token, logits) = self.heads(tape, x, n)?;

        let d = match reversal {
            Some(lambda) => tape.gradient_reversal(class_token, lambda)?,
            None => class_token,
        };
        let domain_probs = self.domain_disc.forward(tape, d)?;
        Ok(ForwardVars {
            logits,
            class_token,
            domain_probs,
            patch_probs,
            scores,
        })
    }

    /// Plain ViT forward with the same weights: every block vanilla, no
    /// fusion, no scores. Returns `[n, K]` logits.
    pub fn vanilla_forward<T: Scalar>(&self, tape: &mut Tape<T>, images: &[T]) -> Result<Var> {
        let n = self.image_count(images.len())?;
        let mut x = embed(tape, &self.embed, images)?;
        for block in &self.blocks {
            x = transformer_block(tape, x, block, AttentionKind::Vanilla)?;
        }
        Ok(self.heads(tape, x, n)?.1)
    }

    /// Forward pass on a paired batch plus the weighted four-term loss.
    pub fn objective<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        batch: &DomainBatch,
        graph: &TransferabilityGraph<T>,
        opts: ForwardOptions,
        weights: LossWeights,
    ) -> Result<Objective<T>> {
        self.objective_with_scores(tape, batch, graph, opts, weights, None)
    }

    /// [`Network::objective`] with fixed patch scores.
    pub fn objective_with_scores<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        batch: &DomainBatch,
        graph: &TransferabilityGraph<T>,
        opts: ForwardOptions,
        weights: LossWeights,
        scores: Option<&PatchScores<T>>,
    ) -> Result<Objective<T>> {
        let (bs, bt) = (batch.source_len(), batch.target_len());
        if bs == 0 || bt == 0 {
            return Err(Error::invalid("objective", "both domains need at least one image"));
        }
        let images: Vec<T> = batch
            .all_images()
            .into_iter()
            .map(|v| T::from_f64_lossy(v as f64))
            .collect();
        let vars = self.forward_with_scores(tape, &images, &[bs, bt], graph, opts, scores)?;
        let domain_labels: Vec<T> = batch.domain_labels().into_iter().map(T::from_f64_lossy).collect();

        let source_logits = tape.slice(vars.logits, 0, 0, bs)?;
        let target_logits = tape.slice(vars.logits, 0, bs, bs + bt)?;
        let parts = LossParts {
            l_clc: classification_loss(tape, source_logits, &batch.source_labels)?,
            l_dis: domain_loss(tape, vars.domain_probs, &domain_labels)?,
            l_pat: patch_loss(tape, vars.patch_probs, &domain_labels)?,
            mi: self_clustering_mi(tape, target_logits)?,
        };
        let (total, report) = total_loss(tape, &parts, weights)?;
        Ok(Objective { total, report, vars })
    }
}

/// FFTAT weights and dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct FftatModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Images evaluated per tape during inference; bounds memory only, results
/// do not depend on it.
const EVAL_CHUNK: usize = 64;

impl<T: Scalar> FftatModel<T> {
    /// Fresh weights: truncated normal (0, 0.02) projections, zero biases,
    /// unit LayerNorm scales.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let geo = config.geometry()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        PatchEmbedParams::init(&mut store, "patch_embed", geo, config.dim, &mut rng);
        for l in 0..config.layers {
            BlockParams::init(&mut store, &format!("blocks.{l}"), config.dim, config.heads, &mut rng)?;
        }
        LayerNorm::init(&mut store, "norm", config.dim);
        Linear::init(&mut store, "head", config.dim, config.classes, &mut rng);
        DiscriminatorParams::init(&mut store, "domain_disc", config.dim, &mut rng);
        DiscriminatorParams::init(&mut store, "patch_disc", config.dim, &mut rng);
        Ok(FftatModel { config, params: store })
    }

    /// Wraps loaded parameters after checking they match `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Self::init(config, 0)?;
        if reference.params.names() != params.names() {
            return Err(Error::Checkpoint(
                "parameter names do not match the model config".into(),
            ));
        }
        for ((name, a), b) in reference.params.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(FftatModel { config, params })
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Network> {
        Network::bind(self.params.bind(tape, trainable), self.config)
    }

    /// Training forward pass on a paired batch, values only.
    pub fn forward_train(
        &self,
        batch: &DomainBatch,
        graph: &TransferabilityGraph<T>,
        opts: ForwardOptions,
        step: u64,
    ) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false)?;
        let images: Vec<T> = batch
            .all_images()
            .into_iter()
            .map(|v| T::from_f64_lossy(v as f64))
            .collect();
        let v = net.forward(
            &mut tape,
            &images,
            &[batch.source_len(), batch.target_len()],
            graph,
            opts,
        )?;
        Ok(ForwardOutput {
            class_logits: tape.value(v.logits).clone(),
            class_token: tape.value(v.class_token).clone(),
            patch_probs: tape.value(v.patch_probs).clone(),
            fresh_graph: TransferabilityGraph::build(&v.scores.scores, self.config.heads, step)?,
            patch_scores: v.scores.scores,
        })
    }

    /// `[n, K]` logits with fusion off; every image is scored on its own.
    pub fn logits(&self, images: &[f32], graph: &TransferabilityGraph<T>, tg_guidance: bool) -> Result<Tensor<T>> {
        let len = CHANNELS * self.config.image_side * self.config.image_side;
        if !images.len().is_multiple_of(len) {
            return Err(Error::invalid(
                "predict",
                "pixel buffer is not a whole number of images",
            ));
        }
        let n = images.len() / len;
        let mut out = Vec::with_capacity(n * self.config.classes);
        for chunk in images.chunks(EVAL_CHUNK * len) {
            let mut tape = Tape::new();
            let net = self.bind(&mut tape, false)?;
            let imgs: Vec<T> = chunk.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
            let m = chunk.len() / len;
            let v = net.forward(&mut tape, &imgs, &[m], graph, ForwardOptions::eval(tg_guidance))?;
            out.extend_from_slice(tape.value(v.logits).data());
        }
        Tensor::new([n, self.config.classes], out)
    }

    /// Argmax class of every image (first index wins ties).
    pub fn predict(&self, images: &[f32], graph: &TransferabilityGraph<T>, tg_guidance: bool) -> Result<Vec<usize>> {
        let logits = self.logits(images, graph, tg_guidance)?;
        Ok(logits.rows().map(argmax).collect())
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic_pair;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_side: 8,
            patch: 4,
            dim: 8,
            heads: 2,
            layers: 2,
            classes: 2,
        }
    }

    fn tiny_batch() -> DomainBatch {
        let (s, t) = gen_synthetic_pair(3, 1, 2).unwrap();
        // downsample the 32×32 glyphs to 8×8 by striding
        let shrink = |img: &[f32]| -> Vec<f32> {
            let mut out = Vec::new();
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        out.push(img[c * 1024 + (4 * y) * 32 + 4 * x]);
                    }
                }
            }
            out
        };
        DomainBatch {
            source_images: (0..2).flat_map(|i| shrink(s.image(i))).collect(),
            source_labels: s.labels.clone(),
            target_images: (0..2).flat_map(|i| shrink(t.image(i))).collect(),
            side: 8,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert_eq!(ModelConfig::default().patches(), 16);
        let bad = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            patch: 5,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn output_shapes() {
        let m = FftatModel::<f64>::init(tiny(), 0).unwrap();
        let out = m
            .forward_train(
                &tiny_batch(),
                &TransferabilityGraph::unweighted(4),
                ForwardOptions::default(),
                0,
            )
            .unwrap();
        assert_eq!(out.class_logits.shape(), &[4, 2]);
        assert_eq!(out.class_token.shape(), &[4, 8]);
        assert_eq!(out.patch_scores.shape(), &[4, 4]);
        assert_eq!(out.fresh_graph.matrix.shape(), &[4, 4]);
        assert_eq!(out.fresh_graph.iteration_built, Some(0));
        assert!(out.patch_scores.data().iter().all(|&s| (0.0..=1.0).contains(&s)));
    }

    #[test]
    fn initial_graph_is_near_one() {
        for seed in 0..10 {
            let m = FftatModel::<f64>::init(tiny(), seed).unwrap();
            let out = m
                .forward_train(
                    &tiny_batch(),
                    &TransferabilityGraph::unweighted(4),
                    ForwardOptions::default(),
                    0,
                )
                .unwrap();
            let min = out
                .fresh_graph
                .matrix
                .data()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            assert!(min >= 0.9, "seed {seed}: {min}");
        }
    }

    #[test]
    fn reduces_to_vanilla() {
        let m = FftatModel::<f64>::init(tiny(), 1).unwrap();
        let batch = tiny_batch();
        let images: Vec<f64> = batch.all_images().into_iter().map(f64::from).collect();
        let mut tape = Tape::new();
        let net = m.bind(&mut tape, false).unwrap();
        let opts = ForwardOptions {
            feature_fusion: false,
            unit_scores: true,
            ..ForwardOptions::default()
        };
        let f = net
            .forward(&mut tape, &images, &[2, 2], &TransferabilityGraph::unweighted(4), opts)
            .unwrap();
        let v = net.vanilla_forward(&mut tape, &images).unwrap();
        assert!(tape.value(f.logits).max_abs_diff(tape.value(v)) <= 1e-12);
    }

    #[test]
    fn prediction_is_batch_size_invariant() {
        let m = FftatModel::<f64>::init(tiny(), 2).unwrap();
        let batch = tiny_batch();
        let images = batch.all_images();
        let mut graph = TransferabilityGraph::unweighted(4);
        graph.matrix.data_mut()[1] = 0.3;
        graph.matrix.data_mut()[4] = 0.3;
        let all = m.logits(&images, &graph, true).unwrap();
        for i in 0..4 {
            let one = m.logits(&images[i * 192..(i + 1) * 192], &graph, true).unwrap();
            assert_eq!(one.data(), &all.data()[i * 2..(i + 1) * 2]);
        }
    }

    #[test]
    fn from_params_checks_shapes() {
        let m = FftatModel::<f64>::init(tiny(), 0).unwrap();
        assert!(FftatModel::from_params(tiny(), m.params.clone()).is_ok());
        let other = ModelConfig { dim: 4, ..tiny() };
        assert!(FftatModel::from_params(other, m.params).is_err());
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let m = FftatModel::<f64>::init(tiny(), 4).unwrap();
        let mut tape = Tape::new();
        let net = m.bind(&mut tape, true).unwrap();
        let mut graph = TransferabilityGraph::unweighted(4);
        graph.matrix.data_mut()[2] = 0.5;
        let obj = net
            .objective(
                &mut tape,
                &tiny_batch(),
                &graph,
                ForwardOptions::default(),
                LossWeights::default(),
            )
            .unwrap();
        let grads = tape.backward(obj.total).unwrap();
        for (name, &v) in m.params.names().iter().zip(net.bound.vars()) {
            let g = grads.wrt(v);
            assert!(g.data().iter().any(|&x| x != 0.0), "{name} has zero gradient");
        }
    }
}
