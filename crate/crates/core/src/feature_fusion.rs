//! Latent embedding fusion: every patch embedding becomes a fixed convex
//! combination of itself and the same-position embeddings of the other
//! images in its domain's batch,
//!
//! `b̃ᵢ = 2/(B+1)·bᵢ + 1/(B+1)·Σ_{j≠i} bⱼ`.

use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// `B×B` mixing coefficients: `2/(B+1)` on the diagonal, `1/(B+1)` elsewhere.
pub fn fusion_matrix<T: Scalar>(batch: usize) -> Tensor<T> {
    block_fusion_matrix(&[batch])
}

/// Mixing coefficients for a batch of `b` as integer numerators over a
/// common denominator: `(self, other, denominator) = (2, 1, b + 1)`.
pub fn fusion_coefficients(b: usize) -> (u64, u64, u64) {
    (2, 1, b as u64 + 1)
}

/// Block-diagonal mixing matrix; each block fuses one domain, so rows from
/// different blocks never mix.
pub fn block_fusion_matrix<T: Scalar>(groups: &[usize]) -> Tensor<T> {
    let n: usize = groups.iter().sum();
    let mut m = Tensor::zeros([n, n]);
    let mut start = 0;
    for &b in groups {
        let (own, other, denom) = fusion_coefficients(b);
        let denom = T::from_u64(denom).unwrap();
        let diag = T::from_u64(own).unwrap() / denom;
        let off = T::from_u64(other).unwrap() / denom;
        for i in start..start + b {
            for j in start..start + b {
                m.data_mut()[i * n + j] = if i == j { diag } else { off };
            }
        }
        start += b;
    }
    m
}

/// Fuses `x[B, ...]` along the batch axis. Identity when disabled.
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, x: Var, enabled: bool) -> Result<Var> {
    let b = *tape
        .shape(x)
        .first()
        .ok_or_else(|| Error::invalid("fuse", "input needs a batch axis"))?;
    fuse_groups(tape, x, &[b], enabled)
}

/// Fuses consecutive row groups of `x[n, ...]` independently (source rows
/// first, then target rows).
pub fn fuse_groups<T: Scalar>(tape: &mut Tape<T>, x: Var, groups: &[usize], enabled: bool) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n = *shape
        .first()
        .ok_or_else(|| Error::invalid("fuse", "input needs a batch axis"))?;
    if groups.iter().sum::<usize>() != n || groups.contains(&0) {
        return Err(Error::invalid(
            "fuse",
            format!("groups {groups:?} do not partition a batch of {n}"),
        ));
    }
    if !enabled {
        return Ok(x);
    }
    let rest: usize = shape[1..].iter().product();
    let flat = tape.reshape(x, &[n, rest])?;
    let mix = tape.constant(block_fusion_matrix(groups));
    let mixed = tape.matmul(mix, flat)?;
    tape.reshape(mixed, &shape)
}

/// Plain-value convenience wrapper around [`fuse`].
pub fn fuse_tensor<T: Scalar>(x: &Tensor<T>, enabled: bool) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = fuse(&mut tape, v, enabled)?;
    Ok(tape.value(y).clone())
}
