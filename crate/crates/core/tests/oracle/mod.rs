//! Straight-line scalar reimplementations used as independent references.
//! Nothing here calls into the library; matrices are `Vec<Vec<f64>>`.

#![allow(dead_code, clippy::needless_range_loop)]

pub type Mat = Vec<Vec<f64>>;

pub struct Linear {
    /// `[in][out]`
    pub w: Mat,
    pub b: Vec<f64>,
}

pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub enum Variant<'a> {
    Vanilla,
    /// Padded `(1+P)×(1+P)` graph multiplying the raw logits.
    Graph(&'a Mat),
    /// `P` scores multiplying the class row after the softmax.
    Scores(&'a [f64]),
}

pub fn linear(x: &Mat, l: &Linear) -> Mat {
    let mut out = Vec::new();
    for row in x {
        let mut r = Vec::new();
        for j in 0..l.b.len() {
            let mut s = 0.0;
            for i in 0..row.len() {
                s += row[i] * l.w[i][j];
            }
            r.push(s + l.b[j]);
        }
        out.push(r);
    }
    out
}

/// One `[T][d]` sequence.
pub fn attention(x: &Mat, a: &Attention, variant: Variant) -> Mat {
    let t = x.len();
    let d = x[0].len();
    let dk = d / a.heads;
    let q = linear(x, &a.q);
    let k = linear(x, &a.k);
    let v = linear(x, &a.v);
    let mut ctx = vec![vec![0.0; d]; t];
    for h in 0..a.heads {
        let off = h * dk;
        for i in 0..t {
            let mut logits = vec![0.0; t];
            for j in 0..t {
                let mut dot = 0.0;
                for c in 0..dk {
                    dot += q[i][off + c] * k[j][off + c];
                }
                if let Variant::Graph(g) = variant {
                    dot *= g[i][j];
                }
                logits[j] = dot / (dk as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut w: Vec<f64> = exps.iter().map(|e| e / z).collect();
            if let Variant::Scores(c) = variant {
                if i == 0 {
                    for j in 1..t {
                        w[j] *= c[j - 1];
                    }
                }
            }
            for j in 0..t {
                for c in 0..dk {
                    ctx[i][off + c] += w[j] * v[j][off + c];
                }
            }
        }
    }
    linear(&ctx, &a.o)
}

pub fn pad(g: &Mat) -> Mat {
    let p = g.len();
    let mut out = vec![vec![1.0; p + 1]; p + 1];
    for i in 0..p {
        for j in 0..p {
            out[i + 1][j + 1] = g[i][j];
        }
    }
    out
}

fn clamp(p: f64) -> f64 {
    p.clamp(1e-7, 1.0 - 1e-7)
}

/// Mean BCE over all patches; `labels[i]` is image `i`'s domain.
pub fn patch_loss(probs: &Mat, labels: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for (row, &y) in probs.iter().zip(labels) {
        for &p in row {
            let p = clamp(p);
            total += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            count += 1.0;
        }
    }
    total / count
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    h
}

/// `H(mean p) − mean H(p)`.
pub fn mutual_information(logits: &Mat) -> f64 {
    let probs: Vec<Vec<f64>> = logits.iter().map(|r| softmax(r)).collect();
    let b = probs.len() as f64;
    let k = probs[0].len();
    let mut mean = vec![0.0; k];
    for p in &probs {
        for c in 0..k {
            mean[c] += p[c] / b;
        }
    }
    let mean_h: f64 = probs.iter().map(|p| entropy(p)).sum::<f64>() / b;
    entropy(&mean) - mean_h
}

pub fn binary_entropy_bits(p: f64) -> f64 {
    let p = clamp(p);
    -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
}

/// `(1/B) Σ cᵢᵀcᵢ`
pub fn graph(scores: &Mat) -> Mat {
    let p = scores[0].len();
    let mut g = vec![vec![0.0; p]; p];
    for c in scores {
        for i in 0..p {
            for j in 0..p {
                g[i][j] += c[i] * c[j] / scores.len() as f64;
            }
        }
    }
    g
}

/// `b̃ᵢ = 2/(B+1)·bᵢ + 1/(B+1)·Σ_{j≠i} bⱼ` on `[B][features]`.
pub fn fuse(x: &Mat) -> Mat {
    let b = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, xi)| {
            (0..xi.len())
                .map(|f| {
                    let others: f64 = x.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, xj)| xj[f]).sum();
                    2.0 / (b + 1.0) * xi[f] + others / (b + 1.0)
                })
                .collect()
        })
        .collect()
}
