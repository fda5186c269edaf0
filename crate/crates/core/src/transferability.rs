//! Patch discriminator, per-patch transferability scores, and the
//! transferability graph built from them.

use std::fmt::Write as _;

use rand::Rng;

use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::params::{Bound, Linear, ParamStore};
use crate::{Error, Result};

/// Probability clamp applied before any log.
pub const PROB_EPS: f64 = 1e-7;

/// Two-layer MLP discriminator `d → d/2 → 1` with a sigmoid output, shared
/// across whatever rows it is applied to.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl DiscriminatorParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) {
        let hidden = (dim / 2).max(1);
        Linear::init(store, &format!("{name}.fc1"), dim, hidden, rng);
        Linear::init(store, &format!("{name}.fc2"), hidden, 1, rng);
    }

    pub fn bind(bound: &Bound, name: &str) -> Result<Self> {
        Ok(DiscriminatorParams {
            fc1: Linear::bind(bound, &format!("{name}.fc1"))?,
            fc2: Linear::bind(bound, &format!("{name}.fc2"))?,
        })
    }

    /// Source-domain probability for every `d`-vector in `x[..., d]`;
    /// output drops the last axis.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut out_shape = tape.shape(x).to_vec();
        out_shape.pop();
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        let logit = self.fc2.forward(tape, h)?;
        let p = tape.sigmoid(logit);
        tape.reshape(p, &out_shape)
    }
}

/// Runs the patch discriminator on `[n, P, d]` patch tokens, behind a
/// gradient-reversal layer of strength `reversal` when one is given, and
/// returns `[n, P]` source probabilities.
pub fn patch_discriminate<T: Scalar>(
    tape: &mut Tape<T>,
    patch_tokens: Var,
    params: &DiscriminatorParams,
    reversal: Option<T>,
) -> Result<Var> {
    if tape.shape(patch_tokens).len() != 3 {
        return Err(Error::invalid(
            "patch_discriminate",
            format!("expected [n, P, d] tokens, got {:?}", tape.shape(patch_tokens)),
        ));
    }
    let x = match reversal {
        Some(lambda) => tape.gradient_reversal(patch_tokens, lambda)?,
        None => patch_tokens,
    };
    params.forward(tape, x)
}

/// Base-2 binary entropy of a (clamped) probability; 1 at p = 0.5.
pub fn transferability_score<T: Scalar>(p: T) -> T {
    let eps = T::from_f64_lossy(PROB_EPS);
    let p = p.max(eps).min(T::one() - eps);
    let q = T::one() - p;
    -(p * p.log2() + q * q.log2())
}

/// Per-patch discriminator outputs and the scores derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchScores<T> {
    /// `[n, P]`, entries in [0, 1].
    pub scores: Tensor<T>,
    /// `[n, P]`, entries in (0, 1).
    pub domain_probs: Tensor<T>,
}

impl<T: Scalar> PatchScores<T> {
    pub fn from_probs(domain_probs: Tensor<T>) -> Self {
        PatchScores {
            scores: domain_probs.map(transferability_score),
            domain_probs,
        }
    }

    pub fn unit(n: usize, patches: usize) -> Self {
        PatchScores {
            scores: Tensor::ones([n, patches]),
            domain_probs: Tensor::full([n, patches], T::from_f64_lossy(0.5)),
        }
    }
}

/// Patch-to-patch weight matrix guiding the graph-guided attention layers.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferabilityGraph<T> {
    /// `P×P`, symmetric, entries in [0, 1].
    pub matrix: Tensor<T>,
    /// Training step whose scores produced this graph; `None` for the
    /// initial unweighted graph.
    pub iteration_built: Option<u64>,
}

impl<T: Scalar> TransferabilityGraph<T> {
    /// All-ones graph used before any scores exist.
    pub fn unweighted(patches: usize) -> Self {
        TransferabilityGraph {
            matrix: Tensor::ones([patches, patches]),
            iteration_built: None,
        }
    }

    pub fn patches(&self) -> usize {
        self.matrix.shape()[0]
    }

    /// Batch mean of the per-image outer products `cᵢᵀcᵢ`.
    ///
    /// The head sum in the defining formula has no head-dependent term, so
    /// dividing by the head count cancels it; `heads` is only validated.
    pub fn build(scores: &Tensor<T>, heads: usize, step: u64) -> Result<Self> {
        let s = scores.shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::invalid(
                "build_graph",
                format!("need a non-empty [n, P] score batch, got {s:?}"),
            ));
        }
        if heads == 0 {
            return Err(Error::invalid("build_graph", "head count must be positive"));
        }
        let (n, p) = (s[0], s[1]);
        let mut m = vec![T::zero(); p * p];
        for c in scores.data().chunks_exact(p) {
            for i in 0..p {
                for j in 0..p {
                    m[i * p + j] += c[i] * c[j];
                }
            }
        }
        let inv = T::one() / T::from_usize(n).unwrap();
        for v in &mut m {
            *v *= inv;
        }
        Ok(TransferabilityGraph {
            matrix: Tensor::new([p, p], m)?,
            iteration_built: Some(step),
        })
    }

    /// `(1-w)·fresh + w·self`; `w = 0` replaces the graph outright.
    pub fn blend(&self, fresh: TransferabilityGraph<T>, weight: T) -> Self {
        if weight == T::zero() {
            return fresh;
        }
        let data = self
            .matrix
            .data()
            .iter()
            .zip(fresh.matrix.data())
            .map(|(&old, &new)| weight * old + (T::one() - weight) * new)
            .collect();
        TransferabilityGraph {
            matrix: Tensor::new(self.matrix.shape().to_vec(), data).expect("same shape"),
            iteration_built: fresh.iteration_built,
        }
    }

    /// `(1+P)×(1+P)` matrix with a row and column of ones for the class token.
    pub fn pad(&self) -> Tensor<T> {
        let p = self.patches();
        let t = p + 1;
        Tensor::from_fn([t, t], |k| {
            let (i, j) = (k / t, k % t);
            if i == 0 || j == 0 {
                T::one()
            } else {
                self.matrix.data()[(i - 1) * p + (j - 1)]
            }
        })
    }

    /// Row-major CSV, six significant digits.
    pub fn to_csv(&self) -> String {
        let p = self.patches();
        let mut out = String::new();
        for row in self.matrix.data().chunks_exact(p) {
            let cells: Vec<String> = row.iter().map(|v| format_sig(v.to_f64_lossy(), 6)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|c| {
                        c.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Data(format!("bad graph cell '{c}': {e}")))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let p = rows.len();
        if p == 0 || rows.iter().any(|r| r.len() != p) {
            return Err(Error::Data("graph CSV is not a square matrix".into()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(TransferabilityGraph {
            matrix: Tensor::from_f64([p, p], &flat)?,
            iteration_built: None,
        })
    }

    /// Text heatmap on an absolute [0, 1] scale, one character per entry.
    pub fn heatmap(&self) -> String {
        const RAMP: &[u8] = b" .:-=+*#%@";
        let p = self.patches();
        let mut out = String::new();
        for row in self.matrix.data().chunks_exact(p) {
            for v in row {
                let x = v.to_f64_lossy().clamp(0.0, 1.0);
                let idx = ((x * (RAMP.len() - 1) as f64).round()) as usize;
                out.push(RAMP[idx] as char);
                out.push(RAMP[idx] as char);
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "scale: ' '=0 .. '@'=1, min {:.4}, max {:.4}",
            self.matrix
                .data()
                .iter()
                .fold(f64::INFINITY, |m, v| m.min(v.to_f64_lossy())),
            self.matrix
                .data()
                .iter()
                .fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64_lossy())),
        );
        out
    }
}

/// `%g`-style formatting with `digits` significant digits.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let exp = x.abs().log10().floor() as i32;
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..digits as i32).contains(&exp) {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        let s = trim(format!("{x:.decimals$}"));
        // rounding can carry into a new digit (9.999995 → 10.0000); reformat
        if s.trim_start_matches('-').replace('.', "").trim_start_matches('0').len() > digits {
            return format_sig(s.parse().unwrap(), digits);
        }
        s
    } else {
        let s = format!("{:.*e}", digits - 1, x);
        let (mantissa, e) = s.split_once('e').unwrap();
        format!("{}e{}", trim(mantissa.to_string()), e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn score_values() {
        assert_eq!(transferability_score(0.5f64), 1.0);
        assert!(transferability_score(1e-7f64) < 3e-6);
        assert!(transferability_score(0.0f64) < 3e-6);
        // H2(0.25) = 2 - (3/4)·log2(3)
        let want = 2.0 - 0.75 * 3f64.log2();
        assert!((transferability_score(0.25f64) - want).abs() < 1e-15);
        assert!((want - 0.811_278_124_459_132_8).abs() < 1e-15);
        for d in [0.1, 0.2, 0.3] {
            assert!(transferability_score(0.5) > transferability_score(0.5 + d));
            assert!(transferability_score(0.5) > transferability_score(0.5 - d));
        }
    }

    #[test]
    fn graph_examples() {
        let ones = Tensor::<f64>::ones([3, 4]);
        let g = TransferabilityGraph::build(&ones, 4, 0).unwrap();
        assert_eq!(g.matrix, Tensor::ones([4, 4]));

        let one = Tensor::<f64>::from_f64([1, 2], &[1.0, 0.5]).unwrap();
        let g = TransferabilityGraph::build(&one, 2, 0).unwrap();
        assert_eq!(g.matrix.data(), &[1.0, 0.5, 0.5, 0.25]);

        let two = Tensor::<f64>::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = TransferabilityGraph::build(&two, 2, 0).unwrap();
        assert_eq!(g.matrix.data(), &[0.5, 0.0, 0.0, 0.5]);

        let empty = Tensor::<f64>::zeros([0, 4]);
        assert!(TransferabilityGraph::build(&empty, 2, 0).is_err());
    }

    #[test]
    fn graph_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let scores = Tensor::<f64>::from_fn([5, 6], |_| rng.random());
            let g = TransferabilityGraph::build(&scores, 4, 1).unwrap();
            let m = &g.matrix;
            for i in 0..6 {
                let mean_c: f64 = (0..5).map(|b| scores.at(&[b, i])).sum::<f64>() / 5.0;
                assert!(m.at(&[i, i]) <= mean_c + 1e-15);
                for j in 0..6 {
                    assert_eq!(m.at(&[i, j]), m.at(&[j, i]));
                    assert!((0.0..=1.0).contains(&m.at(&[i, j])));
                }
            }
        }
    }

    #[test]
    fn padding_adds_unit_class_row_and_column() {
        let g = TransferabilityGraph::<f64>::unweighted(2);
        assert_eq!(g.pad(), Tensor::ones([3, 3]));
        let s = Tensor::<f64>::from_f64([1, 2], &[0.3, 0.9]).unwrap();
        let g = TransferabilityGraph::build(&s, 1, 0).unwrap();
        let p = g.pad();
        for i in 0..3 {
            assert_eq!(p.at(&[0, i]), 1.0);
            assert_eq!(p.at(&[i, 0]), 1.0);
        }
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(p.at(&[i + 1, j + 1]).to_bits(), g.matrix.at(&[i, j]).to_bits());
            }
        }
    }

    #[test]
    fn discriminator_zero_weights_is_half_and_bias_saturates() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        DiscriminatorParams::init(&mut store, "d", 4, &mut rng);
        for name in ["d.fc1.weight", "d.fc2.weight"] {
            let s = store.get(name).unwrap().shape().to_vec();
            store.insert(name, Tensor::zeros(s));
        }
        let x = Tensor::from_fn([2, 3, 4], |i| i as f64);
        let run = |store: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape, false);
            let d = DiscriminatorParams::bind(&b, "d").unwrap();
            let xv = tape.constant(x.clone());
            let p = patch_discriminate(&mut tape, xv, &d, Some(1.0)).unwrap();
            tape.value(p).clone()
        };
        let p = run(&store);
        assert_eq!(p.shape(), &[2, 3]);
        assert!(p.data().iter().all(|&v| v == 0.5));
        store.insert("d.fc2.bias", Tensor::from_f64([1], &[40.0]).unwrap());
        assert!(run(&store).data().iter().all(|&v| v > 1.0 - 1e-12));
    }

    #[test]
    fn csv_round_trip_and_sig_digits() {
        assert_eq!(format_sig(0.123456789, 6), "0.123457");
        assert_eq!(format_sig(1.0, 6), "1");
        assert_eq!(format_sig(0.9999999, 6), "1");
        assert_eq!(format_sig(1.5e-9, 6), "1.5e-9");
        assert_eq!(format_sig(0.25, 6), "0.25");
        let s = Tensor::from_f64([1, 3], &[0.3, 0.9, 0.123456]).unwrap();
        let g = TransferabilityGraph::build(&s, 1, 0).unwrap();
        let back = TransferabilityGraph::<f64>::from_csv(&g.to_csv()).unwrap();
        assert!(back.matrix.max_abs_diff(&g.matrix) < 1e-6);
        assert_eq!(g.to_csv().lines().count(), 3);
    }

    #[test]
    fn all_ones_heatmap_is_uniform() {
        let g = TransferabilityGraph::<f64>::unweighted(4);
        let map = g.heatmap();
        let grid: Vec<&str> = map.lines().take(4).collect();
        assert!(grid.iter().all(|l| *l == "@@@@@@@@"));
    }

    #[test]
    fn blend_zero_replaces() {
        let old = TransferabilityGraph::<f64>::unweighted(2);
        let s = Tensor::from_f64([1, 2], &[0.5, 0.5]).unwrap();
        let fresh = TransferabilityGraph::build(&s, 1, 3).unwrap();
        assert_eq!(old.blend(fresh.clone(), 0.0), fresh);
        let half = old.blend(fresh, 0.5);
        assert_eq!(half.matrix.data(), &[0.625; 4]);
        assert_eq!(half.iteration_built, Some(3));
    }
}
