//! Pre-norm Vision Transformer exposing per-head attention maps.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::params::{trunc_normal, Bound, Linear, Norm, ParamId, ParamStore};
use crate::selection::RetentionMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl ViTConfig {
    pub fn deit_small() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4.0,
            num_classes: 1000,
        }
    }

    pub fn deit_tiny() -> Self {
        Self {
            embed_dim: 192,
            heads: 3,
            ..Self::deit_small()
        }
    }

    /// The default model for local experiments: 64 patches of 8×8.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            depth: 8,
            heads: 4,
            mlp_ratio: 4.0,
            num_classes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio >= 0.0) {
            return Err(Error::Config("mlp_ratio must be a nonnegative number".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }
}

/// Square image, pixels stored height × width × channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != size * size * channels {
            return contract(format!(
                "{} pixel values for a {size}×{size}×{channels} image",
                pixels.len()
            ));
        }
        Ok(Self { size, channels, pixels })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.size + x) * self.channels + c]
    }

    /// Flattened non-overlapping patches in raster order, each laid out
    /// (row, column, channel).
    pub fn patches(&self, patch: usize) -> Tensor {
        let grid = self.size / patch;
        let dim = patch * patch * self.channels;
        let mut data = Vec::with_capacity(grid * grid * dim);
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let start = (y * self.size + gx * patch) * self.channels;
                    data.extend_from_slice(&self.pixels[start..start + patch * self.channels]);
                }
            }
        }
        Tensor::new(vec![grid * grid, dim], data).expect("patch layout")
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: Norm,
    qkv: Linear,
    proj: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

/// Tokens flowing through the network with their original positions.
#[derive(Debug, Clone)]
pub struct TokenSequence<'t> {
    pub tokens: Var<'t>,
    /// Original sequence position of each row; `positions[0] == 0`.
    pub positions: Vec<usize>,
    /// Length of the unpruned sequence.
    pub full_len: usize,
}

impl<'t> TokenSequence<'t> {
    pub fn retained(&self) -> Vec<bool> {
        let mut r = vec![false; self.full_len];
        for &p in &self.positions {
            r[p] = true;
        }
        r
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Drops rows whose original position is not retained by `mask`.
pub fn physical_prune<'t>(seq: &TokenSequence<'t>, mask: &RetentionMask) -> Result<TokenSequence<'t>> {
    if mask.len() != seq.full_len {
        return contract(format!(
            "mask over {} positions for a sequence of {}",
            mask.len(),
            seq.full_len
        ));
    }
    if !mask.get(0) {
        return contract("pruning mask must keep the class token");
    }
    let rows: Vec<usize> = (0..seq.len()).filter(|&r| mask.get(seq.positions[r])).collect();
    if rows.len() == seq.len() {
        return Ok(seq.clone());
    }
    Ok(TokenSequence {
        tokens: seq.tokens.select_rows(&rows)?,
        positions: rows.iter().map(|&r| seq.positions[r]).collect(),
        full_len: seq.full_len,
    })
}

/// Retention masks keyed by the 1-based layer they take effect before.
#[derive(Debug, Clone, Default)]
pub struct Hooks {
    pub masks: BTreeMap<usize, RetentionMask>,
    /// Remove tokens physically instead of masking attention columns.
    pub pruned: bool,
}

pub struct Forward<'t> {
    pub logits: Var<'t>,
    /// `maps[l][h]` for layer `l + 1`, head `h`.
    pub maps: Vec<Vec<Var<'t>>>,
    /// Final normalized token representations.
    pub tokens: TokenSequence<'t>,
}

#[derive(Debug, Clone)]
pub struct ViT {
    cfg: ViTConfig,
    params: ParamStore,
    patch_embed: Linear,
    cls_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    norm: Norm,
    head: Linear,
}

impl ViT {
    pub fn new(cfg: ViTConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut p = ParamStore::new();
        let patch_embed = Linear::init(&mut p, "patch_embed", cfg.patch_dim(), d, rng)?;
        let cls_token = p.insert("cls_token", trunc_normal(&[1, d], 0.02, rng))?;
        let pos_embed = p.insert("pos_embed", trunc_normal(&[cfg.num_patches() + 1, d], 0.02, rng))?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let pre = format!("blocks.{l}");
            blocks.push(Block {
                norm1: Norm::init(&mut p, &format!("{pre}.norm1"), d)?,
                qkv: Linear::init(&mut p, &format!("{pre}.attn.qkv"), d, 3 * d, rng)?,
                proj: Linear::init(&mut p, &format!("{pre}.attn.proj"), d, d, rng)?,
                norm2: Norm::init(&mut p, &format!("{pre}.norm2"), d)?,
                fc1: Linear::init(&mut p, &format!("{pre}.mlp.fc1"), d, cfg.mlp_hidden(), rng)?,
                fc2: Linear::init(&mut p, &format!("{pre}.mlp.fc2"), cfg.mlp_hidden(), d, rng)?,
            });
        }
        let norm = Norm::init(&mut p, "norm", d)?;
        let head = Linear::init(&mut p, "head", d, cfg.num_classes, rng)?;
        Ok(Self {
            cfg,
            params: p,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        self.params.bind(tape, trainable)
    }

    pub fn embed<'t>(&self, p: &Bound<'t>, image: &Image) -> Result<TokenSequence<'t>> {
        let cfg = &self.cfg;
        if image.size != cfg.image_size || image.channels != cfg.channels {
            return Err(Error::Config(format!(
                "image is {}×{}×{} but the model expects {}×{}×{}",
                image.size, image.size, image.channels, cfg.image_size, cfg.image_size, cfg.channels
            )));
        }
        let tape = p.get(self.cls_token).tape();
        // pixels in [0, 1] enter the projection centered on [-1, 1]
        let patches = tape.constant(image.patches(cfg.patch_size).map(|x| 2.0 * x - 1.0));
        let embedded = self.patch_embed.forward(p, &patches)?;
        let tokens = Var::concat_rows(&[p.get(self.cls_token), embedded])?.add(&p.get(self.pos_embed))?;
        let n = cfg.num_patches() + 1;
        Ok(TokenSequence {
            tokens,
            positions: (0..n).collect(),
            full_len: n,
        })
    }

    /// One transformer block (1-based `layer`). `mask` weights the attention
    /// columns; a 0/1 mask hides the zeroed tokens from every query.
    pub fn block<'t>(
        &self,
        p: &Bound<'t>,
        layer: usize,
        x: &Var<'t>,
        mask: Option<&Var<'t>>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let b = self
            .blocks
            .get(layer.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("layer {layer} does not exist")))?;
        let (d, hd) = (self.cfg.embed_dim, self.cfg.head_dim());
        let n = x.value().rows();
        let h = b.norm1.forward(p, x)?;
        let qkv = b.qkv.forward(p, &h)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut maps = Vec::with_capacity(self.cfg.heads);
        let mut outs = Vec::with_capacity(self.cfg.heads);
        for head in 0..self.cfg.heads {
            let c = head * hd;
            let q = qkv.slice(0..n, c..c + hd)?;
            let k = qkv.slice(0..n, d + c..d + c + hd)?;
            let v = qkv.slice(0..n, 2 * d + c..2 * d + c + hd)?;
            let scores = q.matmul(&k.transpose()?)?.scale(scale);
            let attn = match mask {
                Some(m) => scores.masked_softmax(m)?,
                None => scores.softmax(),
            };
            outs.push(attn.matmul(&v)?);
            maps.push(attn);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            Var::concat_cols(&outs)?
        };
        let x = x.add(&b.proj.forward(p, &merged)?)?;
        let h = b.norm2.forward(p, &x)?;
        let mlp = b.fc2.forward(p, &b.fc1.forward(p, &h)?.gelu())?;
        Ok((x.add(&mlp)?, maps))
    }

    /// Final norm and classification head: `(logits [1×C], normalized tokens)`.
    pub fn head<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let normed = self.norm.forward(p, x)?;
        let logits = self.head.forward(p, &normed.select_rows(&[0])?)?;
        Ok((logits, normed))
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, image: &Image, hooks: &Hooks) -> Result<Forward<'t>> {
        if let Some((&l, _)) = hooks.masks.iter().find(|(&l, _)| l == 0 || l > self.cfg.depth) {
            return Err(Error::Config(format!(
                "retention hook at layer {l} outside 1..={}",
                self.cfg.depth
            )));
        }
        let mut seq = self.embed(p, image)?;
        let tape = seq.tokens.tape();
        let mut mask_var = None;
        let mut maps = Vec::with_capacity(self.cfg.depth);
        for layer in 1..=self.cfg.depth {
            if let Some(m) = hooks.masks.get(&layer) {
                if hooks.pruned {
                    seq = physical_prune(&seq, m)?;
                } else {
                    if m.len() != seq.full_len {
                        return contract("hook mask length differs from the token count");
                    }
                    mask_var = Some(tape.constant(Tensor::vector(m.as_f64())));
                }
            }
            let (x, layer_maps) = self.block(p, layer, &seq.tokens, mask_var.as_ref())?;
            seq.tokens = x;
            maps.push(layer_maps);
        }
        let (logits, normed) = self.head(p, &seq.tokens)?;
        seq.tokens = normed;
        Ok(Forward {
            logits,
            maps,
            tokens: seq,
        })
    }
}
