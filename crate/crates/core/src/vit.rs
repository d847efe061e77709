//! A small vision transformer whose attention layers follow a
//! [`GroupingScheme`].
//!
//! Layout: patchify, linear patch embedding, prepended class token,
//! learned position embedding, `depth` pre-norm blocks (attention then
//! GELU MLP, each with a residual), final norm, linear classifier on the
//! class token.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_flops, attention_on_tape, attention_param_count, AttentionVars, AttentionWeights};
use crate::error::{Error, Result, TensorError};
use crate::init::{seeded_rng, trunc_normal, INIT_STD};
use crate::scheme::{GroupingScheme, ScaleMode, SchemeSpec};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub scheme: GroupingScheme,
    /// Dropout is not implemented; only 0 is accepted.
    pub drop_rate: f64,
}

/// Named model sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 224px images, 16px patches, d=384, 12 blocks, 6 heads, 1000 classes.
    VitSmall,
    /// 16px single-channel images, 4px patches, d=24, 2 blocks, 6 heads,
    /// 6 classes; sized for CPU training in seconds.
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vit-small" => Ok(Preset::VitSmall),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected vit-small | tiny)"))),
        }
    }
}

impl ViTConfig {
    pub fn preset(preset: Preset, scheme: SchemeSpec) -> Result<Self> {
        match preset {
            Preset::VitSmall => Self::new(224, 16, 3, 384, 12, 6, 4, 1000, scheme),
            Preset::Tiny => Self::new(16, 4, 1, 24, 2, 6, 2, 6, scheme),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        image_size: usize,
        patch_size: usize,
        in_channels: usize,
        d: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        num_classes: usize,
        scheme: SchemeSpec,
    ) -> Result<Self> {
        let cfg = ViTConfig {
            image_size,
            patch_size,
            in_channels,
            d,
            depth,
            heads,
            mlp_ratio,
            num_classes,
            scheme: scheme.build(d, heads)?,
            drop_rate: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_scheme(&self, scheme: GroupingScheme) -> Result<Self> {
        let cfg = ViTConfig { scheme, ..self.clone() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_scale(&self, scale: ScaleMode) -> Self {
        ViTConfig { scheme: self.scheme.clone().with_scale(scale), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("d", self.d),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size mod patch_size must be 0 ({} mod {})",
                self.image_size, self.patch_size
            )));
        }
        if self.scheme.d() != self.d || self.scheme.heads() != self.heads {
            return Err(Error::Config(format!(
                "scheme {} built for d={}, h={} but model has d={}, h={}",
                self.scheme.label(),
                self.scheme.d(),
                self.scheme.heads(),
                self.d,
                self.heads
            )));
        }
        if self.drop_rate != 0.0 {
            return Err(Error::Config("drop_rate must be 0 (dropout is not supported)".into()));
        }
        self.scheme.ensure_valid()
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.d
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.in_channels, self.image_size, self.image_size]
    }

    pub fn to_record(&self) -> Result<ConfigRecord> {
        let spec = self
            .scheme
            .spec()
            .ok_or_else(|| Error::Config(format!("scheme {} has no canonical name", self.scheme.label())))?;
        Ok(ConfigRecord {
            image_size: self.image_size,
            patch_size: self.patch_size,
            in_channels: self.in_channels,
            d: self.d,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            num_classes: self.num_classes,
            scheme: spec.to_string(),
            scale_mode: self.scheme.scale_mode(),
            drop_rate: self.drop_rate,
        })
    }

    pub fn from_record(r: &ConfigRecord) -> Result<Self> {
        let spec: SchemeSpec = r.scheme.parse()?;
        let cfg = ViTConfig {
            image_size: r.image_size,
            patch_size: r.patch_size,
            in_channels: r.in_channels,
            d: r.d,
            depth: r.depth,
            heads: r.heads,
            mlp_ratio: r.mlp_ratio,
            num_classes: r.num_classes,
            scheme: spec.build(r.d, r.heads)?.with_scale(r.scale_mode),
            drop_rate: r.drop_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Serialisable form of [`ViTConfig`]; the scheme is stored by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub scheme: String,
    pub scale_mode: ScaleMode,
    pub drop_rate: f64,
}

/// How the optimizer treats a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Embedding)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T: Scalar> {
    pub norm1_gamma: Tensor<T>,
    pub norm1_beta: Tensor<T>,
    pub attn: AttentionWeights<T>,
    pub norm2_gamma: Tensor<T>,
    pub norm2_beta: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTWeights<T: Scalar> {
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub cls_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub norm_gamma: Tensor<T>,
    pub norm_beta: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

const ATTN_NAMES: [(&str, ParamKind); 8] = [
    ("attn.w_q", ParamKind::Weight),
    ("attn.b_q", ParamKind::Bias),
    ("attn.w_k", ParamKind::Weight),
    ("attn.b_k", ParamKind::Bias),
    ("attn.w_v", ParamKind::Weight),
    ("attn.b_v", ParamKind::Bias),
    ("attn.w_o", ParamKind::Weight),
    ("attn.b_o", ParamKind::Bias),
];

impl<T: Scalar> ViTWeights<T> {
    /// Parameter tensors in the fixed storage order used by checkpoints,
    /// the optimizer and [`ViTVars::all`].
    pub fn named_params(&self) -> Vec<(String, ParamKind, &Tensor<T>)> {
        let mut out: Vec<(String, ParamKind, &Tensor<T>)> = vec![
            ("patch_embed.w".into(), ParamKind::Weight, &self.patch_w),
            ("patch_embed.b".into(), ParamKind::Bias, &self.patch_b),
            ("cls_token".into(), ParamKind::Embedding, &self.cls_token),
            ("pos_embed".into(), ParamKind::Embedding, &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.norm1.gamma"), ParamKind::Norm, &b.norm1_gamma));
            out.push((format!("blocks.{i}.norm1.beta"), ParamKind::Norm, &b.norm1_beta));
            for ((name, kind), t) in ATTN_NAMES.iter().zip(b.attn.tensors()) {
                out.push((format!("blocks.{i}.{name}"), *kind, t));
            }
            out.push((format!("blocks.{i}.norm2.gamma"), ParamKind::Norm, &b.norm2_gamma));
            out.push((format!("blocks.{i}.norm2.beta"), ParamKind::Norm, &b.norm2_beta));
            out.push((format!("blocks.{i}.mlp.fc1.w"), ParamKind::Weight, &b.fc1_w));
            out.push((format!("blocks.{i}.mlp.fc1.b"), ParamKind::Bias, &b.fc1_b));
            out.push((format!("blocks.{i}.mlp.fc2.w"), ParamKind::Weight, &b.fc2_w));
            out.push((format!("blocks.{i}.mlp.fc2.b"), ParamKind::Bias, &b.fc2_b));
        }
        out.push(("norm.gamma".into(), ParamKind::Norm, &self.norm_gamma));
        out.push(("norm.beta".into(), ParamKind::Norm, &self.norm_beta));
        out.push(("head.w".into(), ParamKind::Weight, &self.head_w));
        out.push(("head.b".into(), ParamKind::Bias, &self.head_b));
        out
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.named_params().into_iter().map(|(_, _, t)| t).collect()
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        self.named_params().into_iter().map(|(_, k, _)| k).collect()
    }

    /// Same order as [`ViTWeights::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> =
            vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls_token, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.push(&mut b.norm1_gamma);
            out.push(&mut b.norm1_beta);
            out.extend(b.attn.tensors_mut());
            out.push(&mut b.norm2_gamma);
            out.push(&mut b.norm2_beta);
            out.push(&mut b.fc1_w);
            out.push(&mut b.fc1_b);
            out.push(&mut b.fc2_w);
            out.push(&mut b.fc2_b);
        }
        out.push(&mut self.norm_gamma);
        out.push(&mut self.norm_beta);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn element_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Every tensor filled with zeros, including norm scales.
    pub fn zeros(cfg: &ViTConfig) -> Self {
        let (d, hid) = (cfg.d, cfg.mlp_hidden());
        let block = || BlockWeights {
            norm1_gamma: Tensor::zeros(vec![d]),
            norm1_beta: Tensor::zeros(vec![d]),
            attn: AttentionWeights::zeros(&cfg.scheme),
            norm2_gamma: Tensor::zeros(vec![d]),
            norm2_beta: Tensor::zeros(vec![d]),
            fc1_w: Tensor::zeros(vec![d, hid]),
            fc1_b: Tensor::zeros(vec![hid]),
            fc2_w: Tensor::zeros(vec![hid, d]),
            fc2_b: Tensor::zeros(vec![d]),
        };
        ViTWeights {
            patch_w: Tensor::zeros(vec![cfg.patch_dim(), d]),
            patch_b: Tensor::zeros(vec![d]),
            cls_token: Tensor::zeros(vec![1, d]),
            pos_embed: Tensor::zeros(vec![cfg.tokens(), d]),
            blocks: (0..cfg.depth).map(|_| block()).collect(),
            norm_gamma: Tensor::zeros(vec![d]),
            norm_beta: Tensor::zeros(vec![d]),
            head_w: Tensor::zeros(vec![d, cfg.num_classes]),
            head_b: Tensor::zeros(vec![cfg.num_classes]),
        }
    }

    pub fn check_against(&self, cfg: &ViTConfig) -> Result<()> {
        let expected = ViTWeights::<T>::zeros(cfg);
        let want = expected.named_params();
        let have = self.named_params();
        if want.len() != have.len() {
            return Err(Error::Config(format!("weights have {} tensors, config needs {}", have.len(), want.len())));
        }
        for ((name, _, w), (_, _, h)) in want.iter().zip(&have) {
            if w.shape() != h.shape() {
                return Err(TensorError::dim(format!("{name}: got {:?}, expected {:?}", h.shape(), w.shape())).into());
            }
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape<T>) -> ViTVars {
        let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone());
        let patch_w = leaf(&self.patch_w);
        let patch_b = leaf(&self.patch_b);
        let cls_token = leaf(&self.cls_token);
        let pos_embed = leaf(&self.pos_embed);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let norm1_gamma = leaf(&b.norm1_gamma);
            let norm1_beta = leaf(&b.norm1_beta);
            let [w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o] = b.attn.tensors().map(&mut leaf);
            let attn = AttentionVars { w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o };
            blocks.push(BlockVars {
                norm1_gamma,
                norm1_beta,
                attn,
                norm2_gamma: leaf(&b.norm2_gamma),
                norm2_beta: leaf(&b.norm2_beta),
                fc1_w: leaf(&b.fc1_w),
                fc1_b: leaf(&b.fc1_b),
                fc2_w: leaf(&b.fc2_w),
                fc2_b: leaf(&b.fc2_b),
            });
        }
        ViTVars {
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            blocks,
            norm_gamma: leaf(&self.norm_gamma),
            norm_beta: leaf(&self.norm_beta),
            head_w: leaf(&self.head_w),
            head_b: leaf(&self.head_b),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub norm1_gamma: Var,
    pub norm1_beta: Var,
    pub attn: AttentionVars,
    pub norm2_gamma: Var,
    pub norm2_beta: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

#[derive(Debug, Clone)]
pub struct ViTVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub cls_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl ViTVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.patch_w, self.patch_b, self.cls_token, self.pos_embed];
        for b in &self.blocks {
            out.extend([b.norm1_gamma, b.norm1_beta]);
            out.extend(b.attn.all());
            out.extend([b.norm2_gamma, b.norm2_beta, b.fc1_w, b.fc1_b, b.fc2_w, b.fc2_b]);
        }
        out.extend([self.norm_gamma, self.norm_beta, self.head_w, self.head_b]);
        out
    }
}

/// Truncated normal (std 0.02) projections and embeddings, zero biases,
/// unit norm scales.
pub fn init_weights<T: Scalar>(cfg: &ViTConfig, seed: u64) -> ViTWeights<T> {
    let mut rng = seeded_rng(seed);
    let (d, hid) = (cfg.d, cfg.mlp_hidden());
    let patch_w = trunc_normal(vec![cfg.patch_dim(), d], INIT_STD, &mut rng);
    let cls_token = trunc_normal(vec![1, d], INIT_STD, &mut rng);
    let pos_embed = trunc_normal(vec![cfg.tokens(), d], INIT_STD, &mut rng);
    let blocks = (0..cfg.depth)
        .map(|_| BlockWeights {
            norm1_gamma: Tensor::ones(vec![d]),
            norm1_beta: Tensor::zeros(vec![d]),
            attn: AttentionWeights::init(&cfg.scheme, INIT_STD, &mut rng),
            norm2_gamma: Tensor::ones(vec![d]),
            norm2_beta: Tensor::zeros(vec![d]),
            fc1_w: trunc_normal(vec![d, hid], INIT_STD, &mut rng),
            fc1_b: Tensor::zeros(vec![hid]),
            fc2_w: trunc_normal(vec![hid, d], INIT_STD, &mut rng),
            fc2_b: Tensor::zeros(vec![d]),
        })
        .collect();
    ViTWeights {
        patch_w,
        patch_b: Tensor::zeros(vec![d]),
        cls_token,
        pos_embed,
        blocks,
        norm_gamma: Tensor::ones(vec![d]),
        norm_beta: Tensor::zeros(vec![d]),
        head_w: trunc_normal(vec![d, cfg.num_classes], INIT_STD, &mut rng),
        head_b: Tensor::zeros(vec![cfg.num_classes]),
    }
}

/// `[B, C, H, W] → [B, patches, patch²·C]`; patches in row-major grid
/// order, each flattened channel-major then row-major.
pub fn patchify<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>, TensorError> {
    let s = images.shape();
    if s.len() != 4 || patch == 0 || !s[2].is_multiple_of(patch) || !s[3].is_multiple_of(patch) {
        return Err(TensorError::dim(format!("patchify: image shape {s:?} not divisible into {patch}px patches")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let src = images.data();
    let mut out = Vec::with_capacity(images.len());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..c {
                    for dy in 0..patch {
                        let row = ((bi * c + ci) * h + py * patch + dy) * w + px * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![b, gh * gw, pd], out))
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(
    patches: &Tensor<T>,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Tensor<T>, TensorError> {
    let s = patches.shape();
    let (gh, gw) = (height / patch, width / patch);
    if s.len() != 3
        || !height.is_multiple_of(patch)
        || !width.is_multiple_of(patch)
        || s[1] != gh * gw
        || s[2] != patch * patch * channels
    {
        return Err(TensorError::dim(format!("unpatchify: {s:?} does not match {channels}x{height}x{width}/{patch}")));
    }
    let b = s[0];
    let mut out = vec![T::ZERO; patches.len()];
    let mut src = patches.data().iter();
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..channels {
                    for dy in 0..patch {
                        let row = ((bi * channels + ci) * height + py * patch + dy) * width + px * patch;
                        for slot in &mut out[row..row + patch] {
                            *slot = *src.next().expect("length checked");
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![b, channels, height, width], out))
}

/// Records the full model on `tape`, returning the `[B, classes]` logits.
pub fn vit_on_tape<T: Scalar>(tape: &mut Tape<T>, cfg: &ViTConfig, vars: &ViTVars, images: &Tensor<T>) -> Result<Var> {
    let s = images.shape();
    if s.len() != 4 || s[1..] != cfg.image_shape(1)[1..] {
        return Err(TensorError::dim(format!(
            "images must be [B, {}, {}, {}], got {s:?}",
            cfg.in_channels, cfg.image_size, cfg.image_size
        ))
        .into());
    }
    let batch = s[0];
    let eps = T::from_f64(LAYERNORM_EPS);
    let patches = tape.leaf(patchify(images, cfg.patch_size)?);
    let emb = tape.matmul(patches, vars.patch_w)?;
    let emb = tape.add(emb, vars.patch_b)?;
    let cls = tape.broadcast_leading(vars.cls_token, &[batch])?;
    let tokens = tape.concat(&[cls, emb], 1)?;
    let mut x = tape.add(tokens, vars.pos_embed)?;
    for b in &vars.blocks {
        let h = tape.layernorm(x, b.norm1_gamma, b.norm1_beta, eps)?;
        let a = attention_on_tape(tape, h, &b.attn, &cfg.scheme)?;
        x = tape.add(x, a)?;
        let h = tape.layernorm(x, b.norm2_gamma, b.norm2_beta, eps)?;
        let m = tape.matmul(h, b.fc1_w)?;
        let m = tape.add(m, b.fc1_b)?;
        let m = tape.gelu(m)?;
        let m = tape.matmul(m, b.fc2_w)?;
        let m = tape.add(m, b.fc2_b)?;
        x = tape.add(x, m)?;
    }
    let x = tape.layernorm(x, vars.norm_gamma, vars.norm_beta, eps)?;
    let cls_out = tape.narrow(x, 1, 0, 1)?;
    let cls_out = tape.reshape(cls_out, vec![batch, cfg.d])?;
    let logits = tape.matmul(cls_out, vars.head_w)?;
    Ok(tape.add(logits, vars.head_b)?)
}

pub fn vit_forward<T: Scalar>(cfg: &ViTConfig, w: &ViTWeights<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    w.check_against(cfg)?;
    let mut tape = Tape::new();
    let vars = w.register(&mut tape);
    let logits = vit_on_tape(&mut tape, cfg, &vars, images)?;
    Ok(tape.value(logits).clone())
}

/// Per-component parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub patch_embed: usize,
    pub pos_embed: usize,
    pub cls_token: usize,
    pub attention: usize,
    pub mlp: usize,
    pub norms: usize,
    pub head: usize,
    pub total: usize,
}

impl ParamReport {
    /// Size at 4 bytes per parameter, in units of 2²⁰ bytes.
    pub fn total_size_mib(&self) -> f64 {
        params_to_mib(self.total)
    }

    pub fn total_millions(&self) -> f64 {
        self.total as f64 / 1e6
    }
}

pub fn params_to_mib(params: usize) -> f64 {
    (params as f64) * 4.0 / (1u64 << 20) as f64
}

pub fn count_params(cfg: &ViTConfig) -> ParamReport {
    let (d, hid) = (cfg.d, cfg.mlp_hidden());
    let patch_embed = cfg.patch_dim() * d + d;
    let pos_embed = cfg.tokens() * d;
    let cls_token = d;
    let attention = cfg.depth * attention_param_count(&cfg.scheme, true);
    let mlp = cfg.depth * (d * hid + hid + hid * d + d);
    let norms = cfg.depth * 4 * d + 2 * d;
    let head = d * cfg.num_classes + cfg.num_classes;
    ParamReport {
        patch_embed,
        pos_embed,
        cls_token,
        attention,
        mlp,
        norms,
        head,
        total: patch_embed + pos_embed + cls_token + attention + mlp + norms + head,
    }
}

/// Matmul FLOPs of one forward pass over `batch` images. Elementwise work
/// (norms, softmax, GELU, residuals) is not counted.
pub fn vit_flops(cfg: &ViTConfig, batch: usize) -> Result<u64> {
    let b = batch as u64;
    let (t, d, hid) = (cfg.tokens() as u64, cfg.d as u64, cfg.mlp_hidden() as u64);
    let patch = 2 * b * cfg.num_patches() as u64 * cfg.patch_dim() as u64 * d;
    let attn = attention_flops(cfg.tokens(), &cfg.scheme)?.total() * b;
    let mlp = 2 * b * t * d * hid * 2;
    let head = 2 * b * d * cfg.num_classes as u64;
    Ok(patch + cfg.depth as u64 * (attn + mlp) + head)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(spec: SchemeSpec) -> ViTConfig {
        ViTConfig::new(8, 4, 3, 8, 1, 2, 4, 3, spec).unwrap()
    }

    #[test]
    fn patchify_layout() {
        let img = Tensor::<f64>::from_f64(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4]);
        assert_eq!(p.data(), img.data());

        let vals: Vec<f64> = (0..16).map(f64::from).collect();
        let img = Tensor::<f64>::from_f64(vec![1, 1, 4, 4], &vals).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(unpatchify(&p, 1, 4, 4, 2).unwrap(), img);
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn patchify_is_channel_major_within_a_patch() {
        let vals: Vec<f64> = (0..8).map(f64::from).collect();
        let img = Tensor::<f64>::from_f64(vec![1, 2, 2, 2], &vals).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.data(), &vals[..]);
        assert_eq!(unpatchify(&p, 2, 2, 2, 2).unwrap(), img);
    }

    #[test]
    fn zero_network_returns_head_bias() {
        let cfg = tiny(SchemeSpec::Mha);
        let mut w = ViTWeights::<f64>::zeros(&cfg);
        w.head_b = Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap();
        let imgs = crate::init::normal(cfg.image_shape(2).to_vec(), 1.0, &mut seeded_rng(1));
        let logits = vit_forward(&cfg, &w, &imgs).unwrap();
        assert_eq!(logits.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn identical_inputs_give_identical_rows() {
        let cfg = tiny(SchemeSpec::Mqa);
        let w = init_weights::<f64>(&cfg, 5);
        let one: Tensor<f64> = crate::init::normal(cfg.image_shape(1).to_vec(), 1.0, &mut seeded_rng(2));
        let two = crate::ops::concat(&[&one, &one], 0).unwrap();
        let logits = vit_forward(&cfg, &w, &two).unwrap();
        assert_eq!(&logits.data()[..3], &logits.data()[3..]);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = tiny(SchemeSpec::Mha);
        let a = init_weights::<f32>(&cfg, 9);
        let b = init_weights::<f32>(&cfg, 9);
        assert_eq!(a, b);
        assert_ne!(a, init_weights::<f32>(&cfg, 10));
        for (name, kind, t) in a.named_params() {
            if matches!(kind, ParamKind::Weight | ParamKind::Embedding) {
                assert!(t.data().iter().all(|v| v.abs() <= 0.04), "{name}");
            }
        }
        assert_eq!(a.element_count(), count_params(&cfg).total);
    }

    #[test]
    fn tape_vars_follow_named_order() {
        let cfg = tiny(SchemeSpec::Gqkva { q: 2, kv: 1 });
        let w = init_weights::<f64>(&cfg, 1);
        let mut tape = Tape::new();
        let vars = w.register(&mut tape);
        let all = vars.all();
        let named = w.named_params();
        assert_eq!(all.len(), named.len());
        for (v, (name, _, t)) in all.iter().zip(named) {
            assert_eq!(tape.value(*v), t, "{name}");
        }
    }

    #[test]
    fn config_rejects_bad_geometry() {
        assert!(ViTConfig::new(10, 4, 3, 8, 1, 2, 4, 3, SchemeSpec::Mha).is_err());
        assert!(ViTConfig::new(8, 4, 3, 8, 1, 3, 4, 3, SchemeSpec::Mha).is_err());
        let cfg = tiny(SchemeSpec::Mha);
        let wrong = SchemeSpec::Mha.build(12, 2).unwrap();
        assert!(cfg.with_scheme(wrong).is_err());
        let mut dropped = cfg.clone();
        dropped.drop_rate = 0.1;
        assert!(dropped.validate().is_err());
    }

    #[test]
    fn record_round_trip() {
        let cfg =
            ViTConfig::preset(Preset::Tiny, SchemeSpec::Gqkva { q: 3, kv: 2 }).unwrap().with_scale(ScaleMode::EmbedDim);
        let back = ViTConfig::from_record(&cfg.to_record().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn vit_small_mha_total() {
        let cfg = ViTConfig::preset(Preset::VitSmall, SchemeSpec::Mha).unwrap();
        let r = count_params(&cfg);
        assert_eq!(r.total, 22_050_664);
        assert_eq!(r.pos_embed, 197 * 384);
        assert!((r.total_size_mib() - 84.1167).abs() < 1e-4);
    }
}
