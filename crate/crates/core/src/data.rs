//! Two-domain image data: a deterministic synthetic glyph generator, an
//! image-folder loader/writer, and a step-indexed paired batch stream.
//!
//! Training code only ever sees [`LabeledSet`] (source) and
//! [`UnlabeledSet`] (target). Target labels live in [`EvalSet`], which the
//! training path does not accept.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::{Error, Result};

/// Channels of every image produced or loaded here.
pub const CHANNELS: usize = 3;

/// Images with class labels. Pixels are row-major `C×H×W` in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub side: usize,
}

/// Images without labels (the training view of the target domain).
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    pub images: Vec<f32>,
    pub side: usize,
}

/// Labeled target-domain images reserved for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet(pub LabeledSet);

impl LabeledSet {
    pub fn image_len(&self) -> usize {
        CHANNELS * self.side * self.side
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn unlabeled(&self) -> UnlabeledSet {
        UnlabeledSet {
            images: self.images.clone(),
            side: self.side,
        }
    }

    pub fn into_eval(self) -> EvalSet {
        EvalSet(self)
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes()];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

impl UnlabeledSet {
    pub fn image_len(&self) -> usize {
        CHANNELS * self.side * self.side
    }

    pub fn len(&self) -> usize {
        self.images.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }
}

// ---------------------------------------------------------------------------
// Synthetic glyph domains

pub const GLYPHS: [&str; 8] = [
    "square", "circle", "triangle", "plus", "diamond", "ring", "cross", "bars",
];

/// Which half of the synthetic data to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Domain {
    Source,
    Target,
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Whether `(u, v)` (glyph-normalized, roughly [-1, 1]²) is inside glyph `class`.
fn inside(class: usize, u: f32, v: f32) -> bool {
    match class {
        0 => u.abs() <= 0.75 && v.abs() <= 0.75,
        1 => u * u + v * v <= 0.85 * 0.85,
        2 => (-0.8..=0.75).contains(&v) && u.abs() <= 0.5 * (v + 0.8),
        3 => (u.abs() <= 0.25 && v.abs() <= 0.9) || (v.abs() <= 0.25 && u.abs() <= 0.9),
        4 => u.abs() + v.abs() <= 0.95,
        5 => {
            let r2 = u * u + v * v;
            (0.5 * 0.5..=0.9 * 0.9).contains(&r2)
        }
        6 => {
            let (a, b) = (
                (u + v) * std::f32::consts::FRAC_1_SQRT_2,
                (u - v) * std::f32::consts::FRAC_1_SQRT_2,
            );
            (a.abs() <= 0.22 && b.abs() <= 0.95) || (b.abs() <= 0.22 && a.abs() <= 0.95)
        }
        _ => u.abs() <= 0.9 && ((v - 0.5).abs() <= 0.22 || (v + 0.5).abs() <= 0.22),
    }
}

/// Glyph coverage in [0, 1] per pixel, 3×3 supersampled, with random
/// position, size and small rotation.
fn glyph_mask(class: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = side as f32;
    let cx = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let radius = rng.random_range(0.24..0.34) * s;
    let theta: f32 = rng.random_range(-0.25..0.25);
    let (sin, cos) = theta.sin_cos();
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let mut hits = 0;
            for sy in 0..3 {
                for sx in 0..3 {
                    let px = x as f32 + (sx as f32 + 0.5) / 3.0 - cx;
                    let py = y as f32 + (sy as f32 + 0.5) / 3.0 - cy;
                    let u = (cos * px + sin * py) / radius;
                    let v = (-sin * px + cos * py) / radius;
                    if inside(class, u, v) {
                        hits += 1;
                    }
                }
            }
            out[y * side + x] = hits as f32 / 9.0;
        }
    }
    out
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

fn render(class: usize, side: usize, domain: Domain, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mask = glyph_mask(class, side, rng);
    let plane = side * side;
    let mut img = vec![0.0f32; CHANNELS * plane];
    match domain {
        Domain::Source => {
            let bg = 1.0 - rng.random_range(0.0..0.06);
            let fg = rng.random_range(0.0..0.3);
            for c in 0..CHANNELS {
                for (i, &a) in mask.iter().enumerate() {
                    img[c * plane + i] = bg * (1.0 - a) + fg * a;
                }
            }
        }
        Domain::Target => {
            let fg = hsv_to_rgb(rng.random(), rng.random_range(0.6..1.0), rng.random_range(0.05..0.35));
            let base = hsv_to_rgb(rng.random(), rng.random_range(0.2..0.6), rng.random_range(0.55..0.8));
            let period = rng.random_range(3.0..7.0f32);
            let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (dy, dx) = angle.sin_cos();
            let noise = Normal::new(0.0f32, 0.1).unwrap();
            for y in 0..side {
                for x in 0..side {
                    let i = y * side + x;
                    let wave = ((x as f32 * dx + y as f32 * dy) * std::f32::consts::TAU / period + phase).sin();
                    let a = mask[i];
                    for c in 0..CHANNELS {
                        let bg = base[c] + 0.12 * wave;
                        let v = bg * (1.0 - a) + fg[c] * a + noise.sample(rng);
                        img[c * plane + i] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    img
}

fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("{c}_{}", GLYPHS[c])).collect()
}

fn generate_domain(seed: u64, n_per_class: usize, k: usize, side: usize, domain: Domain, split: Split) -> LabeledSet {
    let tag = match (domain, split) {
        (Domain::Source, Split::Train) => 1,
        (Domain::Target, Split::Train) => 2,
        (Domain::Source, Split::Test) => 3,
        (Domain::Target, Split::Test) => 4,
    };
    let total = n_per_class * k;
    let images: Vec<Vec<f32>> = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, tag, i as u64]));
            render(i % k, side, domain, &mut rng)
        })
        .collect();
    LabeledSet {
        images: images.concat(),
        labels: (0..total).map(|i| i % k).collect(),
        class_names: class_names(k),
        side,
    }
}

/// Source (clean grayscale glyphs on white) and target (colored glyphs on
/// striped backgrounds with Gaussian noise σ = 0.1) sets of `side`×`side`
/// images, `n_per_class` of each of `k` glyph classes. Pure in `seed`.
pub fn gen_synthetic_split(
    seed: u64,
    n_per_class: usize,
    k: usize,
    side: usize,
    split: Split,
) -> Result<(LabeledSet, LabeledSet)> {
    if k == 0 || k > GLYPHS.len() {
        return Err(Error::Config(format!(
            "class count must be in 1..={}, got {k}",
            GLYPHS.len()
        )));
    }
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be positive".into()));
    }
    Ok((
        generate_domain(seed, n_per_class, k, side, Domain::Source, split),
        generate_domain(seed, n_per_class, k, side, Domain::Target, split),
    ))
}

/// Training split at 32×32.
pub fn gen_synthetic_pair(seed: u64, n_per_class: usize, k: usize) -> Result<(LabeledSet, LabeledSet)> {
    gen_synthetic_split(seed, n_per_class, k, 32, Split::Train)
}

// ---------------------------------------------------------------------------
// Image folders

fn read_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let err = |msg: String| Error::File {
        path: path.to_path_buf(),
        msg,
    };
    let file = fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| err("image too large".into()))?
    ];
    let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let bytes = &buf[..info.buffer_size()];
    let mut rgb = vec![0.0f32; CHANNELS * w * h];
    for i in 0..w * h {
        let px = &bytes[i * channels..(i + 1) * channels];
        let vals = match channels {
            1 | 2 => [px[0]; 3],
            _ => [px[0], px[1], px[2]],
        };
        for c in 0..CHANNELS {
            rgb[c * w * h + i] = vals[c] as f32 / 255.0;
        }
    }
    Ok((w, h, rgb))
}

fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let err = |msg: &str| Error::File {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let bytes = fs::read(path).map_err(|e| err(&e.to_string()))?;
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated PPM header"));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if header[0] != "P6" {
        return Err(err("only binary (P6) PPM is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| err("bad PPM header number"));
    let (w, h, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(err("bad PPM maxval"));
    }
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = w * h * 3 * bps;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| err("truncated PPM pixel data"))?;
    let mut rgb = vec![0.0f32; CHANNELS * w * h];
    for i in 0..w * h {
        for c in 0..CHANNELS {
            let k = (i * 3 + c) * bps;
            let v = if bps == 2 {
                u16::from_be_bytes([data[k], data[k + 1]]) as f32
            } else {
                data[k] as f32
            };
            rgb[c * w * h + i] = v / maxval as f32;
        }
    }
    Ok((w, h, rgb))
}

fn resize_nearest(w: usize, h: usize, src: &[f32], side: usize) -> Vec<f32> {
    let mut out = vec![0.0; CHANNELS * side * side];
    for c in 0..CHANNELS {
        for y in 0..side {
            let sy = (y * h) / side;
            for x in 0..side {
                let sx = (x * w) / side;
                out[c * side * side + y * side + x] = src[c * w * h + sy * w + sx];
            }
        }
    }
    out
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "ppm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::File {
            path: dir.to_path_buf(),
            msg: e.to_string(),
        })?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads `root/<class>/*.{png,ppm}`. Classes are numbered by lexicographic
/// folder name; images are resized (nearest neighbour) to `side`×`side`.
pub fn load_folder(root: impl AsRef<Path>, side: usize) -> Result<LabeledSet> {
    let root = root.as_ref();
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("no class folders under {}", root.display())));
    }
    let mut set = LabeledSet {
        images: Vec::new(),
        labels: Vec::new(),
        class_names: Vec::new(),
        side,
    };
    for (label, dir) in class_dirs.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        if files.is_empty() {
            return Err(Error::Data(format!("class folder {} has no images", dir.display())));
        }
        for f in files {
            let is_png = f.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
            let (w, h, rgb) = if is_png { read_png(&f)? } else { read_ppm(&f)? };
            set.images.extend(resize_nearest(w, h, &rgb, side));
            set.labels.push(label);
        }
        set.class_names
            .push(dir.file_name().unwrap().to_string_lossy().into_owned());
    }
    Ok(set)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `set` as `root/<class name>/<index>.png`.
pub fn write_folder(set: &LabeledSet, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for name in &set.class_names {
        fs::create_dir_all(root.join(name))?;
    }
    let plane = set.side * set.side;
    for i in 0..set.len() {
        let img = set.image(i);
        let mut rgb = Vec::with_capacity(CHANNELS * plane);
        for p in 0..plane {
            for c in 0..CHANNELS {
                rgb.push(to_byte(img[c * plane + p]));
            }
        }
        let path = root.join(&set.class_names[set.labels[i]]).join(format!("{i:05}.png"));
        let file = fs::File::create(&path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), set.side as u32, set.side as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::File {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        w.write_image_data(&rgb).map_err(|e| Error::File {
            path: path.clone(),
            msg: e.to_string(),
        })?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Batching

/// One paired training batch. Target images carry no labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    pub source_images: Vec<f32>,
    pub source_labels: Vec<usize>,
    pub target_images: Vec<f32>,
    pub side: usize,
}

impl DomainBatch {
    pub fn source_len(&self) -> usize {
        self.source_labels.len()
    }

    pub fn target_len(&self) -> usize {
        self.target_images.len() / (CHANNELS * self.side * self.side)
    }

    /// Source then target images, one buffer.
    pub fn all_images(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.source_images.len() + self.target_images.len());
        v.extend_from_slice(&self.source_images);
        v.extend_from_slice(&self.target_images);
        v
    }

    /// 1 for source rows, 0 for target rows.
    pub fn domain_labels(&self) -> Vec<f64> {
        let mut y = vec![1.0; self.source_len()];
        y.resize(self.source_len() + self.target_len(), 0.0);
        y
    }
}

/// Infinite shuffled stream of paired batches addressed by step.
///
/// Each domain is an endless sequence of epochs, every epoch a fresh
/// permutation seeded from `(seed, domain, epoch)`. Batch `t` takes positions
/// `t·B .. (t+1)·B` of that sequence, so any step is reproducible without
/// replaying earlier ones.
pub struct BatchStream<'a> {
    source: &'a LabeledSet,
    target: &'a UnlabeledSet,
    batch: usize,
    seed: u64,
    cache: HashMap<(u64, u64), Vec<usize>>,
}

impl<'a> BatchStream<'a> {
    pub fn new(source: &'a LabeledSet, target: &'a UnlabeledSet, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || batch > source.len() || batch > target.len() {
            return Err(Error::Config(format!(
                "batch size {batch} must be in 1..=min({}, {})",
                source.len(),
                target.len()
            )));
        }
        if source.side != target.side {
            return Err(Error::Config("source and target image sizes differ".into()));
        }
        Ok(BatchStream {
            source,
            target,
            batch,
            seed,
            cache: HashMap::new(),
        })
    }

    fn permutation(&mut self, domain: u64, epoch: u64, n: usize) -> &[usize] {
        if self.cache.len() > 8 {
            self.cache.retain(|&(d, e), _| d != domain || e + 1 >= epoch);
        }
        let seed = self.seed;
        self.cache.entry((domain, epoch)).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, domain, epoch]));
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        })
    }

    /// Sample indices of `domain` (0 source, 1 target) for `step`.
    pub fn indices(&mut self, domain: u64, step: u64) -> Vec<usize> {
        let n = if domain == 0 {
            self.source.len()
        } else {
            self.target.len()
        };
        let b = self.batch as u64;
        (step * b..(step + 1) * b)
            .map(|k| {
                let (epoch, pos) = (k / n as u64, (k % n as u64) as usize);
                self.permutation(domain, epoch, n)[pos]
            })
            .collect()
    }

    pub fn batch_at(&mut self, step: u64) -> DomainBatch {
        let si = self.indices(0, step);
        let ti = self.indices(1, step);
        DomainBatch {
            source_images: si.iter().flat_map(|&i| self.source.image(i).iter().copied()).collect(),
            source_labels: si.iter().map(|&i| self.source.labels[i]).collect(),
            target_images: ti.iter().flat_map(|&i| self.target.image(i).iter().copied()).collect(),
            side: self.source.side,
        }
    }

    /// Iterator starting at `step`.
    pub fn iter_from(self, step: u64) -> BatchIter<'a> {
        BatchIter { stream: self, step }
    }
}

pub struct BatchIter<'a> {
    stream: BatchStream<'a>,
    step: u64,
}

impl Iterator for BatchIter<'_> {
    type Item = DomainBatch;

    fn next(&mut self) -> Option<DomainBatch> {
        let b = self.stream.batch_at(self.step);
        self.step += 1;
        Some(b)
    }
}
