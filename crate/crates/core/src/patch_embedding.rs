//! Image → token sequence: non-overlapping patches, a shared linear
//! projection, a prepended class token and learned position embeddings.

use rand::Rng;

use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::params::{normal, Bound, Linear, ParamStore};
use crate::{Error, Result};

/// Geometry of the patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub channels: usize,
    pub side: usize,
    pub patch: usize,
}

impl PatchGeometry {
    pub fn new(channels: usize, side: usize, patch: usize) -> Result<Self> {
        if patch == 0 || side == 0 || !side.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "image side {side} is not divisible by patch size {patch}"
            )));
        }
        if channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        Ok(PatchGeometry { channels, side, patch })
    }

    pub fn grid(&self) -> usize {
        self.side / self.patch
    }

    /// Number of patches `P`.
    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per flattened patch.
    pub fn patch_len(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.side * self.side
    }
}

/// Splits `n` row-major `C×H×W` images into `[n·P, C·p·p]` patch rows.
///
/// Patches are ordered row-major over the grid; within a patch the layout is
/// `(channel, dy, dx)`.
pub fn extract_patches<T: Scalar>(images: &[T], geo: PatchGeometry) -> Result<Tensor<T>> {
    let img_len = geo.image_len();
    if !images.len().is_multiple_of(img_len) {
        return Err(Error::invalid(
            "extract_patches",
            format!(
                "{} values is not a whole number of {img_len}-value images",
                images.len()
            ),
        ));
    }
    let n = images.len() / img_len;
    let (s, p, g) = (geo.side, geo.patch, geo.grid());
    let mut out = Vec::with_capacity(images.len());
    for img in images.chunks_exact(img_len) {
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..geo.channels {
                    for dy in 0..p {
                        let row = c * s * s + (gy * p + dy) * s + gx * p;
                        out.extend_from_slice(&img[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new([n * geo.patches(), geo.patch_len()], out)
}

/// Inverse of [`extract_patches`].
pub fn assemble_patches<T: Scalar>(patches: &Tensor<T>, geo: PatchGeometry) -> Result<Vec<T>> {
    let per_image = geo.patches() * geo.patch_len();
    if !patches.numel().is_multiple_of(per_image) {
        return Err(Error::invalid(
            "assemble_patches",
            "patch count does not form whole images",
        ));
    }
    let n = patches.numel() / per_image;
    let (s, p, g) = (geo.side, geo.patch, geo.grid());
    let mut out = vec![T::zero(); n * geo.image_len()];
    let src = patches.data();
    let mut k = 0;
    for i in 0..n {
        let img = &mut out[i * geo.image_len()..(i + 1) * geo.image_len()];
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..geo.channels {
                    for dy in 0..p {
                        let row = c * s * s + (gy * p + dy) * s + gx * p;
                        img[row..row + p].copy_from_slice(&src[k..k + p]);
                        k += p;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Bound patch-embedding parameters.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbedParams {
    pub proj: Linear,
    pub positions: Var,
    pub class_token: Var,
    pub geometry: PatchGeometry,
    pub dim: usize,
}

impl PatchEmbedParams {
    /// Projection truncated-normal(0.02), positions N(0, 0.02), class token zeros.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        geo: PatchGeometry,
        dim: usize,
        rng: &mut R,
    ) {
        Linear::init(store, &format!("{name}.proj"), geo.patch_len(), dim, rng);
        store.insert(
            format!("{name}.positions"),
            normal(&[1 + geo.patches(), dim], 0.02, rng),
        );
        store.insert(format!("{name}.class_token"), Tensor::zeros([dim]));
    }

    pub fn bind(bound: &Bound, name: &str, geo: PatchGeometry, dim: usize) -> Result<Self> {
        Ok(PatchEmbedParams {
            proj: Linear::bind(bound, &format!("{name}.proj"))?,
            positions: bound.var(&format!("{name}.positions"))?,
            class_token: bound.var(&format!("{name}.class_token"))?,
            geometry: geo,
            dim,
        })
    }
}

/// Embeds a batch of images into `[n, 1+P, d]` tokens (class token at 0).
pub fn embed<T: Scalar>(tape: &mut Tape<T>, params: &PatchEmbedParams, images: &[T]) -> Result<Var> {
    let geo = params.geometry;
    let patches = extract_patches(images, geo)?;
    let n = patches.shape()[0] / geo.patches();
    let x = tape.constant(patches);
    let h = params.proj.forward(tape, x)?;
    let h = tape.reshape(h, &[n, geo.patches(), params.dim])?;
    let zeros = tape.constant(Tensor::zeros([n, 1, params.dim]));
    let cls = tape.add_broadcast(zeros, params.class_token)?;
    let tokens = tape.concat(&[cls, h], 1)?;
    tape.add_broadcast(tokens, params.positions)
}

/// Token sequence of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    /// `(1+P)×d`, class token at row 0.
    pub tokens: Tensor<T>,
    pub patches: usize,
    pub dim: usize,
}

/// Embeds a single `C×H×W` image using the `"patch_embed"` parameters of
/// `store`.
pub fn embed_image<T: Scalar>(
    image: &[T],
    store: &ParamStore<T>,
    geo: PatchGeometry,
    dim: usize,
) -> Result<TokenSequence<T>> {
    if image.len() != geo.image_len() {
        return Err(Error::Config(format!(
            "expected a {}×{}×{} image, got {} values",
            geo.channels,
            geo.side,
            geo.side,
            image.len()
        )));
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let params = PatchEmbedParams::bind(&bound, "patch_embed", geo, dim)?;
    let v = embed(&mut tape, &params, image)?;
    let tokens = tape.value(v).clone().reshape([1 + geo.patches(), dim])?;
    Ok(TokenSequence {
        tokens,
        patches: geo.patches(),
        dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize) -> (ParamStore<f64>, PatchGeometry) {
        let geo = PatchGeometry::new(3, 32, 8).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        PatchEmbedParams::init(&mut store, "patch_embed", geo, dim, &mut rng);
        (store, geo)
    }

    #[test]
    fn shape_for_32px_patch_8() {
        let (store, geo) = setup(16);
        assert_eq!(geo.patches(), 16);
        let img = vec![0.5; geo.image_len()];
        let seq = embed_image(&img, &store, geo, 16).unwrap();
        assert_eq!(seq.tokens.shape(), &[17, 16]);
    }

    #[test]
    fn indivisible_side_is_config_error() {
        assert!(matches!(PatchGeometry::new(3, 30, 8), Err(Error::Config(_))));
    }

    #[test]
    fn zero_image_zero_weights_gives_positions() {
        let (mut store, geo) = setup(8);
        store.insert("patch_embed.proj.weight", Tensor::zeros([geo.patch_len(), 8]));
        let img = vec![0.0; geo.image_len()];
        let seq = embed_image(&img, &store, geo, 8).unwrap();
        // class token is zero-initialized, so row 0 is its position embedding too
        assert_eq!(&seq.tokens, store.get("patch_embed.positions").unwrap());
    }

    #[test]
    fn changing_one_patch_changes_one_token() {
        let (store, geo) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..geo.image_len()).map(|_| rng.random()).collect();
        let mut b = a.clone();
        // patch (gy=1, gx=2) → index 6; touch one pixel of channel 1 inside it
        b[32 * 32 + (8 + 3) * 32 + 16 + 5] += 0.7;
        let ta = embed_image(&a, &store, geo, 8).unwrap().tokens;
        let tb = embed_image(&b, &store, geo, 8).unwrap().tokens;
        for (t, (ra, rb)) in ta.rows().zip(tb.rows()).enumerate() {
            let same = ra == rb;
            assert_eq!(same, t != 1 + 6, "token {t}");
        }
    }

    #[test]
    fn embedding_is_linear_in_pixels() {
        let (mut store, geo) = setup(8);
        store.insert("patch_embed.class_token", Tensor::zeros([8]));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..geo.image_len()).map(|_| rng.random()).collect();
        let ax: Vec<f64> = x.iter().map(|v| 2.5 * v).collect();
        let pos = store.get("patch_embed.positions").unwrap().clone();
        let ex = embed_image(&x, &store, geo, 8).unwrap().tokens;
        let eax = embed_image(&ax, &store, geo, 8).unwrap().tokens;
        for ((a, b), p) in ex.data().iter().zip(eax.data()).zip(pos.data()) {
            assert!(((b - p) - 2.5 * (a - p)).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_extraction_round_trips() {
        let geo = PatchGeometry::new(3, 16, 4).unwrap();
        let imgs: Vec<f64> = (0..2 * geo.image_len()).map(|i| i as f64).collect();
        let p = extract_patches(&imgs, geo).unwrap();
        assert_eq!(p.shape(), &[2 * 16, 48]);
        assert_eq!(assemble_patches(&p, geo).unwrap(), imgs);
    }
}
