//! Masked-autoencoder workload.
//!
//! Images are cut into non-overlapping square patches, a random subset of
//! patches is hidden, a small pre-norm transformer encodes only the visible
//! patches, and a lighter decoder reconstructs every patch from the encoded
//! tokens plus a shared learned mask token. The training loss is the mean
//! squared error over the hidden patches only; evaluation additionally scores
//! every patch so threshold counts are taken over the full patch grid.

use std::io::{Read, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::weights::WeightVector;

#[derive(Debug, Error)]
pub enum MaeError {
    #[error("invalid architecture: {field}: {reason}")]
    Arch { field: &'static str, reason: String },
    #[error("parameter count mismatch: expected {expected}, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("mask_ratio {0} outside [0, 1)")]
    MaskRatio(f64),
    #[error("image of size {size} not divisible by patch size {patch}")]
    Indivisible { size: usize, patch: usize },
    #[error("image has {got} values, expected {expected}")]
    ImageShape { expected: usize, got: usize },
    #[error("thresholds must be strictly decreasing and positive: {0:?}")]
    Thresholds(Vec<f64>),
    #[error("empty evaluation set")]
    EmptyEval,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MaeError>;

/// Thresholds used for the patches-below-threshold metric.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.3, 0.1, 0.05, 0.01];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaeArchitecture {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    /// Normalize each target patch to zero mean / unit variance before the
    /// loss. Off by default: targets are raw pixels.
    pub norm_target: bool,
}

impl Default for MaeArchitecture {
    fn default() -> Self {
        MaeArchitecture {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            encoder_dim: 32,
            encoder_depth: 2,
            decoder_dim: 16,
            decoder_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            mask_ratio: 0.75,
            norm_target: false,
        }
    }
}

impl MaeArchitecture {
    /// A model small enough for exhaustive gradient checks (< 500 params).
    pub fn micro() -> Self {
        MaeArchitecture {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            encoder_dim: 4,
            encoder_depth: 1,
            decoder_dim: 4,
            decoder_depth: 1,
            heads: 1,
            mlp_ratio: 2,
            mask_ratio: 0.75,
            norm_target: false,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn n_masked(&self) -> usize {
        (self.mask_ratio * self.n_patches() as f64).round() as usize
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    /// Collects every violated constraint.
    pub fn validate(&self) -> std::result::Result<(), Vec<MaeError>> {
        let mut errs = Vec::new();
        let mut bad = |field, reason: String| errs.push(MaeError::Arch { field, reason });
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            bad(
                "image_size",
                format!(
                    "{} not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ),
            );
        } else if self.n_patches() < 4 {
            bad(
                "patch_size",
                format!("grid has {} patches, need at least 4", self.n_patches()),
            );
        }
        if self.channels == 0 {
            bad("channels", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            bad("mask_ratio", format!("{} outside [0, 1)", self.mask_ratio));
        }
        if self.heads == 0 {
            bad("heads", "must be positive".into());
        }
        for (field, dim) in [
            ("encoder_dim", self.encoder_dim),
            ("decoder_dim", self.decoder_dim),
        ] {
            if dim == 0 || dim % 4 != 0 {
                bad(field, format!("{dim} must be a positive multiple of 4"));
            } else if self.heads > 0 && dim % self.heads != 0 {
                bad(
                    field,
                    format!("{dim} not divisible by heads {}", self.heads),
                );
            }
        }
        if self.mlp_ratio == 0 {
            bad("mlp_ratio", "must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// A square image in row-major (y, x, channel) order, values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != size * size * channels {
            return Err(MaeError::ImageShape {
                expected: size * size * channels,
                got: pixels.len(),
            });
        }
        Ok(Image {
            size,
            channels,
            pixels,
        })
    }

    pub fn constant(size: usize, channels: usize, value: f64) -> Self {
        Image {
            size,
            channels,
            pixels: vec![value; size * size * channels],
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.size + x) * self.channels + c]
    }
}

/// Splits an image into `(size/patch)^2` patch vectors in raster order. Each
/// vector is laid out as (row-in-patch, col-in-patch, channel).
pub fn patchify(image: &Image, patch_size: usize) -> Result<Vec<Vec<f64>>> {
    if patch_size == 0 || !image.size.is_multiple_of(patch_size) {
        return Err(MaeError::Indivisible {
            size: image.size,
            patch: patch_size,
        });
    }
    let g = image.size / patch_size;
    let c = image.channels;
    let mut out = Vec::with_capacity(g * g);
    for py in 0..g {
        for px in 0..g {
            let mut v = Vec::with_capacity(patch_size * patch_size * c);
            for dy in 0..patch_size {
                let y = py * patch_size + dy;
                let start = (y * image.size + px * patch_size) * c;
                v.extend_from_slice(&image.pixels[start..start + patch_size * c]);
            }
            out.push(v);
        }
    }
    Ok(out)
}

pub fn unpatchify(patches: &[Vec<f64>], patch_size: usize, channels: usize) -> Result<Image> {
    let g = (patches.len() as f64).sqrt().round() as usize;
    if g * g != patches.len() {
        return Err(MaeError::Checkpoint(format!(
            "{} patches do not form a square grid",
            patches.len()
        )));
    }
    let size = g * patch_size;
    let mut pixels = vec![0.0; size * size * channels];
    for (p, v) in patches.iter().enumerate() {
        let (py, px) = (p / g, p % g);
        for dy in 0..patch_size {
            let y = py * patch_size + dy;
            let start = (y * size + px * patch_size) * channels;
            let row = &v[dy * patch_size * channels..(dy + 1) * patch_size * channels];
            pixels[start..start + patch_size * channels].copy_from_slice(row);
        }
    }
    Image::new(size, channels, pixels)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    /// Sorted, unique patch indices hidden from the encoder.
    pub masked: Vec<usize>,
    pub seed: u64,
}

impl MaskSet {
    pub fn visible(&self, n_patches: usize) -> Vec<usize> {
        let mut is_masked = vec![false; n_patches];
        for &m in &self.masked {
            is_masked[m] = true;
        }
        (0..n_patches).filter(|&i| !is_masked[i]).collect()
    }
}

/// Draws `round(mask_ratio * n_patches)` distinct patch indices uniformly.
pub fn sample_mask(n_patches: usize, mask_ratio: f64, seed: u64) -> Result<MaskSet> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(MaeError::MaskRatio(mask_ratio));
    }
    let k = (mask_ratio * n_patches as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = index::sample(&mut rng, n_patches, k).into_vec();
    masked.sort_unstable();
    Ok(MaskSet { masked, seed })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone)]
struct ParamSpec {
    shape: Vec<usize>,
    init: Init,
}

fn push_linear(specs: &mut Vec<ParamSpec>, d_in: usize, d_out: usize) {
    specs.push(ParamSpec {
        shape: vec![d_in, d_out],
        init: Init::Xavier {
            fan_in: d_in,
            fan_out: d_out,
        },
    });
    specs.push(ParamSpec {
        shape: vec![d_out],
        init: Init::Zeros,
    });
}

fn push_norm(specs: &mut Vec<ParamSpec>, d: usize) {
    specs.push(ParamSpec {
        shape: vec![d],
        init: Init::Ones,
    });
    specs.push(ParamSpec {
        shape: vec![d],
        init: Init::Zeros,
    });
}

fn push_block(specs: &mut Vec<ParamSpec>, d: usize, mlp_ratio: usize) {
    push_norm(specs, d);
    for _ in 0..4 {
        push_linear(specs, d, d); // q, k, v, out
    }
    push_norm(specs, d);
    push_linear(specs, d, d * mlp_ratio);
    push_linear(specs, d * mlp_ratio, d);
}

/// Parameter tensors in flat-vector order.
fn layout(arch: &MaeArchitecture) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    push_linear(&mut s, arch.patch_dim(), arch.encoder_dim);
    for _ in 0..arch.encoder_depth {
        push_block(&mut s, arch.encoder_dim, arch.mlp_ratio);
    }
    push_norm(&mut s, arch.encoder_dim);
    push_linear(&mut s, arch.encoder_dim, arch.decoder_dim);
    s.push(ParamSpec {
        shape: vec![1, arch.decoder_dim],
        init: Init::Normal(0.02),
    });
    for _ in 0..arch.decoder_depth {
        push_block(&mut s, arch.decoder_dim, arch.mlp_ratio);
    }
    push_norm(&mut s, arch.decoder_dim);
    push_linear(&mut s, arch.decoder_dim, arch.patch_dim());
    s
}

/// Exact trainable parameter count of the architecture.
pub fn count_params(arch: &MaeArchitecture) -> usize {
    layout(arch)
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum()
}

/// Number of encoder parameters; they occupy the prefix of the flat vector
/// (patch embedding, encoder blocks, final encoder norm).
pub fn encoder_param_count(arch: &MaeArchitecture) -> usize {
    let n_enc_tensors = 2 + arch.encoder_depth * 16 + 2;
    layout(arch)[..n_enc_tensors]
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum()
}

/// Xavier-uniform matrices, zero biases, unit norm gains, small-normal mask token.
pub fn init_params(arch: &MaeArchitecture, seed: u64) -> WeightVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count_params(arch));
    for spec in layout(arch) {
        let n: usize = spec.shape.iter().product();
        match spec.init {
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let u = Uniform::new_inclusive(-a, a).expect("finite bound");
                out.extend((0..n).map(|_| u.sample(&mut rng)));
            }
            Init::Zeros => out.extend(std::iter::repeat_n(0.0, n)),
            Init::Ones => out.extend(std::iter::repeat_n(1.0, n)),
            Init::Normal(sd) => {
                let d = Normal::new(0.0, sd).expect("positive sd");
                out.extend((0..n).map(|_| d.sample(&mut rng)));
            }
        }
    }
    WeightVector::new(out)
}

/// Fixed 2-D sine/cosine embedding of the patch grid, `[n_patches, dim]`.
pub fn sincos_positions(grid: usize, dim: usize) -> Vec<f64> {
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(grid * grid * dim);
    for gy in 0..grid {
        for gx in 0..grid {
            for pos in [gy as f64, gx as f64] {
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    out.push((pos * omega).sin());
                }
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    out.push((pos * omega).cos());
                }
            }
        }
    }
    out
}

struct Cursor<'a> {
    weights: &'a [f64],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, g: &mut Graph, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        let v = g.param(self.weights, self.at, shape)?;
        self.at += n;
        Ok(v)
    }

    fn linear(&mut self, g: &mut Graph, x: Var, d_in: usize, d_out: usize) -> Result<Var> {
        let w = self.take(g, vec![d_in, d_out])?;
        let b = self.take(g, vec![d_out])?;
        let h = g.matmul(x, w)?;
        Ok(g.add_row(h, b)?)
    }

    fn norm(&mut self, g: &mut Graph, x: Var, d: usize) -> Result<Var> {
        let gain = self.take(g, vec![d])?;
        let bias = self.take(g, vec![d])?;
        let n = g.layer_norm(x)?;
        let n = g.mul_row(n, gain)?;
        Ok(g.add_row(n, bias)?)
    }

    /// Pre-norm transformer block over `batch` independent sequences of
    /// `seq` tokens stacked row-wise.
    fn block(
        &mut self,
        g: &mut Graph,
        x: Var,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let h = self.norm(g, x, d)?;
        let q = self.linear(g, h, d, d)?;
        let k = self.linear(g, h, d, d)?;
        let v = self.linear(g, h, d, d)?;
        let att = g.attention(q, k, v, batch, seq, heads)?;
        let att = self.linear(g, att, d, d)?;
        let x = g.add(x, att)?;
        let h = self.norm(g, x, d)?;
        let h = self.linear(g, h, d, d * mlp_ratio)?;
        let h = g.gelu(h)?;
        let h = self.linear(g, h, d * mlp_ratio, d)?;
        Ok(g.add(x, h)?)
    }
}

fn encode(
    g: &mut Graph,
    cur: &mut Cursor,
    arch: &MaeArchitecture,
    patches: Var,
    pos: Vec<f64>,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let x = cur.linear(g, patches, arch.patch_dim(), arch.encoder_dim)?;
    let pe = g.input(Tensor::matrix(batch * seq, arch.encoder_dim, pos)?)?;
    let mut x = g.add(x, pe)?;
    for _ in 0..arch.encoder_depth {
        x = cur.block(
            g,
            x,
            arch.encoder_dim,
            arch.heads,
            arch.mlp_ratio,
            batch,
            seq,
        )?;
    }
    cur.norm(g, x, arch.encoder_dim)
}

/// Unmasked encoder pass, mean-pooled over patches: `[batch, encoder_dim]`.
///
/// Reads the encoder prefix of `weights` starting at offset 0; `g` may hold
/// more parameters after it.
pub fn encoder_features(
    g: &mut Graph,
    weights: &[f64],
    arch: &MaeArchitecture,
    images: &[&Image],
) -> Result<Var> {
    let n = arch.n_patches();
    let pd = arch.patch_dim();
    let batch = images.len();
    let mut rows = Vec::with_capacity(batch * n * pd);
    let mut pos = Vec::with_capacity(batch * n * arch.encoder_dim);
    let pos_e = sincos_positions(arch.grid(), arch.encoder_dim);
    for img in images {
        if img.pixels.len() != arch.image_len() {
            return Err(MaeError::ImageShape {
                expected: arch.image_len(),
                got: img.pixels.len(),
            });
        }
        for p in patchify(img, arch.patch_size)? {
            rows.extend(p);
        }
        pos.extend_from_slice(&pos_e);
    }
    let mut cur = Cursor { weights, at: 0 };
    let x = g.input(Tensor::matrix(batch * n, pd, rows)?)?;
    let tokens = encode(g, &mut cur, arch, x, pos, batch, n)?;
    let mut pool = vec![0.0; batch * batch * n];
    for b in 0..batch {
        for p in 0..n {
            pool[b * batch * n + b * n + p] = 1.0 / n as f64;
        }
    }
    let pool = g.input(Tensor::matrix(batch, batch * n, pool)?)?;
    Ok(g.matmul(pool, tokens)?)
}

/// Reconstruction quality of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionReport {
    /// Mean squared error of every patch (masked and visible), raster order.
    pub per_patch_mse: Vec<f64>,
    pub mean_masked_mse: f64,
    /// `(threshold, patches strictly below it)` for [`DEFAULT_THRESHOLDS`].
    pub threshold_counts: Vec<(f64, usize)>,
}

impl ReconstructionReport {
    pub fn from_patch_mse(per_patch_mse: Vec<f64>, masked: &[usize]) -> Self {
        let mean_masked_mse = if masked.is_empty() {
            0.0
        } else {
            masked.iter().map(|&i| per_patch_mse[i]).sum::<f64>() / masked.len() as f64
        };
        let threshold_counts = DEFAULT_THRESHOLDS
            .iter()
            .map(|&t| (t, per_patch_mse.iter().filter(|&&m| m < t).count()))
            .collect();
        ReconstructionReport {
            per_patch_mse,
            mean_masked_mse,
            threshold_counts,
        }
    }
}

/// Forward pass result over a batch of images, with the tape kept for backward.
pub struct BatchForward {
    pub graph: Graph,
    pub loss: Var,
    pub reports: Vec<ReconstructionReport>,
}

fn target_patch(p: &[f64], norm: bool) -> Vec<f64> {
    if !norm {
        return p.to_vec();
    }
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-6).sqrt();
    p.iter().map(|v| (v - mean) * inv).collect()
}

/// Runs the autoencoder on a batch. Every image must carry a mask of the
/// same size. When the mask is empty the loss covers all patches.
pub fn forward_batch(
    params: &[f64],
    arch: &MaeArchitecture,
    images: &[&Image],
    masks: &[&MaskSet],
) -> Result<BatchForward> {
    forward_batch_with_targets(params, arch, images, images, masks)
}

/// As [`forward_batch`], but reconstruction is scored against `targets`
/// instead of the encoder inputs.
pub fn forward_batch_with_targets(
    params: &[f64],
    arch: &MaeArchitecture,
    images: &[&Image],
    target_images: &[&Image],
    masks: &[&MaskSet],
) -> Result<BatchForward> {
    let expected = count_params(arch);
    if params.len() != expected {
        return Err(MaeError::ParamCount {
            expected,
            got: params.len(),
        });
    }
    assert_eq!(images.len(), masks.len(), "one mask per image");
    assert_eq!(images.len(), target_images.len(), "one target per image");
    assert!(!images.is_empty(), "empty batch");
    let n = arch.n_patches();
    let pd = arch.patch_dim();
    let n_masked = masks[0].masked.len();
    let nv = n - n_masked;
    let batch = images.len();

    let mut all_patches = Vec::with_capacity(batch * n * pd);
    let mut targets = Vec::with_capacity(batch * n * pd);
    let mut vis_rows = Vec::with_capacity(batch * nv);
    let mut loss_rows = Vec::with_capacity(batch * n_masked.max(1));
    let mut dec_index = Vec::with_capacity(batch * n);
    let mut enc_pos = Vec::with_capacity(batch * nv * arch.encoder_dim);
    let mut dec_pos = Vec::with_capacity(batch * n * arch.decoder_dim);
    let pos_e = sincos_positions(arch.grid(), arch.encoder_dim);
    let pos_d = sincos_positions(arch.grid(), arch.decoder_dim);

    for (b, ((img, tgt), mask)) in images.iter().zip(target_images).zip(masks).enumerate() {
        for im in [img, tgt] {
            if im.pixels.len() != arch.image_len() {
                return Err(MaeError::ImageShape {
                    expected: arch.image_len(),
                    got: im.pixels.len(),
                });
            }
        }
        if mask.masked.len() != n_masked {
            return Err(MaeError::Checkpoint(
                "masks in a batch must have equal size".into(),
            ));
        }
        for p in patchify(img, arch.patch_size)? {
            all_patches.extend(p);
        }
        for p in patchify(tgt, arch.patch_size)? {
            targets.extend(target_patch(&p, arch.norm_target));
        }
        let visible = mask.visible(n);
        let mut slot = vec![usize::MAX; n];
        for (j, &v) in visible.iter().enumerate() {
            vis_rows.push(b * n + v);
            slot[v] = b * nv + j;
            enc_pos.extend_from_slice(&pos_e[v * arch.encoder_dim..(v + 1) * arch.encoder_dim]);
        }
        dec_index.extend(
            slot.iter()
                .map(|&s| if s == usize::MAX { batch * nv } else { s }),
        );
        dec_pos.extend_from_slice(&pos_d);
        if mask.masked.is_empty() {
            loss_rows.extend((0..n).map(|p| b * n + p));
        } else {
            loss_rows.extend(mask.masked.iter().map(|&m| b * n + m));
        }
    }

    let mut g = Graph::new(expected);
    let mut cur = Cursor {
        weights: params,
        at: 0,
    };

    let patches_in = g.input(Tensor::matrix(batch * n, pd, all_patches)?)?;
    let x = g.gather_rows(patches_in, &vis_rows)?;
    let x = encode(&mut g, &mut cur, arch, x, enc_pos, batch, nv)?;

    let z = cur.linear(&mut g, x, arch.encoder_dim, arch.decoder_dim)?;
    let mask_token = cur.take(&mut g, vec![1, arch.decoder_dim])?;
    let pool = g.concat_rows(&[z, mask_token])?;
    let y = g.gather_rows(pool, &dec_index)?;
    let pd_in = g.input(Tensor::matrix(batch * n, arch.decoder_dim, dec_pos)?)?;
    let mut y = g.add(y, pd_in)?;
    for _ in 0..arch.decoder_depth {
        y = cur.block(
            &mut g,
            y,
            arch.decoder_dim,
            arch.heads,
            arch.mlp_ratio,
            batch,
            n,
        )?;
    }
    let y = cur.norm(&mut g, y, arch.decoder_dim)?;
    let pred = cur.linear(&mut g, y, arch.decoder_dim, pd)?;
    debug_assert_eq!(cur.at, expected);

    let target = g.input(Tensor::matrix(batch * n, pd, targets)?)?;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let picked = g.gather_rows(sq, &loss_rows)?;
    let loss = g.mean(picked)?;

    let sqv = g.value(sq);
    let reports = masks
        .iter()
        .enumerate()
        .map(|(b, m)| {
            let mse = (0..n)
                .map(|p| sqv.row(b * n + p).iter().sum::<f64>() / pd as f64)
                .collect();
            ReconstructionReport::from_patch_mse(mse, &m.masked)
        })
        .collect();

    Ok(BatchForward {
        graph: g,
        loss,
        reports,
    })
}

/// Single-image forward: masked-patch loss and a full reconstruction report.
pub fn forward_mae(
    params: &[f64],
    arch: &MaeArchitecture,
    image: &Image,
    mask: &MaskSet,
) -> Result<(f64, ReconstructionReport)> {
    let mut out = forward_batch(params, arch, &[image], &[mask])?;
    let loss = out.graph.value(out.loss).data()[0];
    Ok((loss, out.reports.remove(0)))
}

/// Mean masked loss over the batch and its gradient w.r.t. every parameter.
pub fn loss_and_grad(
    params: &[f64],
    arch: &MaeArchitecture,
    images: &[&Image],
    masks: &[&MaskSet],
) -> Result<(f64, Vec<f64>)> {
    let out = forward_batch(params, arch, images, masks)?;
    let loss = out.graph.value(out.loss).data()[0];
    let grad = out.graph.backward_scalar(out.loss)?;
    Ok((loss, grad))
}

/// How per-image threshold counts are reduced over an evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Max,
}

/// Counts of patches strictly below each threshold, reduced over images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCounts {
    pub thresholds: Vec<f64>,
    pub mean: Vec<f64>,
    pub max: Vec<usize>,
    pub n_images: usize,
}

impl ThresholdCounts {
    pub fn reduced(&self, r: Reduction) -> Vec<f64> {
        match r {
            Reduction::Mean => self.mean.clone(),
            Reduction::Max => self.max.iter().map(|&c| c as f64).collect(),
        }
    }

    /// Integer counts as tabulated (mean rounded to nearest).
    pub fn reported(&self, r: Reduction) -> Vec<u64> {
        self.reduced(r).iter().map(|v| v.round() as u64).collect()
    }
}

pub fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    let ok = thresholds.iter().all(|t| *t > 0.0) && thresholds.windows(2).all(|w| w[0] > w[1]);
    if ok {
        Ok(())
    } else {
        Err(MaeError::Thresholds(thresholds.to_vec()))
    }
}

/// Patches with MSE strictly below each threshold, per image, reduced by
/// mean and by max over the evaluation set.
pub fn patches_below_thresholds(
    reports: &[ReconstructionReport],
    thresholds: &[f64],
) -> Result<ThresholdCounts> {
    check_thresholds(thresholds)?;
    if reports.is_empty() {
        return Err(MaeError::EmptyEval);
    }
    let mut sum = vec![0.0; thresholds.len()];
    let mut max = vec![0usize; thresholds.len()];
    for r in reports {
        for (i, &t) in thresholds.iter().enumerate() {
            let c = r.per_patch_mse.iter().filter(|&&m| m < t).count();
            sum[i] += c as f64;
            max[i] = max[i].max(c);
        }
    }
    Ok(ThresholdCounts {
        thresholds: thresholds.to_vec(),
        mean: sum.iter().map(|s| s / reports.len() as f64).collect(),
        max,
        n_images: reports.len(),
    })
}

/// Evaluates a model on a fixed evaluation set in chunks of `batch` images.
/// Mask `i` is drawn from `mask_seed + i`, so evaluations are comparable
/// across models.
pub fn evaluate(
    params: &[f64],
    arch: &MaeArchitecture,
    images: &[Image],
    mask_seed: u64,
    batch: usize,
) -> Result<(f64, Vec<ReconstructionReport>)> {
    if images.is_empty() {
        return Err(MaeError::EmptyEval);
    }
    let masks: Vec<MaskSet> = (0..images.len())
        .map(|i| {
            sample_mask(
                arch.n_patches(),
                arch.mask_ratio,
                mask_seed.wrapping_add(i as u64),
            )
        })
        .collect::<Result<_>>()?;
    let mut reports = Vec::with_capacity(images.len());
    let mut loss_sum = 0.0;
    for (imgs, ms) in images.chunks(batch.max(1)).zip(masks.chunks(batch.max(1))) {
        let imgs: Vec<&Image> = imgs.iter().collect();
        let ms: Vec<&MaskSet> = ms.iter().collect();
        let out = forward_batch(params, arch, &imgs, &ms)?;
        loss_sum += out.graph.value(out.loss).data()[0] * imgs.len() as f64;
        reports.extend(out.reports);
    }
    Ok((loss_sum / images.len() as f64, reports))
}

const MAGIC: &[u8; 6] = b"FLMAE1";

fn arch_fields(arch: &MaeArchitecture) -> [u64; 11] {
    [
        arch.image_size as u64,
        arch.patch_size as u64,
        arch.channels as u64,
        arch.encoder_dim as u64,
        arch.encoder_depth as u64,
        arch.decoder_dim as u64,
        arch.decoder_depth as u64,
        arch.heads as u64,
        arch.mlp_ratio as u64,
        arch.mask_ratio.to_bits(),
        arch.norm_target as u64,
    ]
}

/// Writes `FLMAE1`, eleven little-endian u64 architecture fields, the u64
/// parameter count, then every parameter as a little-endian f64.
pub fn write_checkpoint<W: Write>(mut w: W, arch: &MaeArchitecture, params: &[f64]) -> Result<()> {
    if params.len() != count_params(arch) {
        return Err(MaeError::ParamCount {
            expected: count_params(arch),
            got: params.len(),
        });
    }
    w.write_all(MAGIC)?;
    for f in arch_fields(arch) {
        w.write_all(&f.to_le_bytes())?;
    }
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(MaeArchitecture, WeightVector)> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(MaeError::Checkpoint("bad magic".into()));
    }
    let mut f = [0u64; 12];
    let mut buf = [0u8; 8];
    for slot in f.iter_mut() {
        r.read_exact(&mut buf)?;
        *slot = u64::from_le_bytes(buf);
    }
    let arch = MaeArchitecture {
        image_size: f[0] as usize,
        patch_size: f[1] as usize,
        channels: f[2] as usize,
        encoder_dim: f[3] as usize,
        encoder_depth: f[4] as usize,
        decoder_dim: f[5] as usize,
        decoder_depth: f[6] as usize,
        heads: f[7] as usize,
        mlp_ratio: f[8] as usize,
        mask_ratio: f64::from_bits(f[9]),
        norm_target: f[10] != 0,
    };
    arch.validate()
        .map_err(|e| MaeError::Checkpoint(format!("invalid architecture in header: {}", e[0])))?;
    let n = f[11] as usize;
    if n != count_params(&arch) {
        return Err(MaeError::ParamCount {
            expected: count_params(&arch),
            got: n,
        });
    }
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        params.push(f64::from_le_bytes(buf));
    }
    Ok((arch, WeightVector::new(params)))
}
