//! Tokenizer, masking, encoder stack, reconstruction decoder and classifier heads.
//!
//! Parameters live in a [`ParamStore`] under hierarchical names
//! (`tokenizer.*`, `encoder.blocks.<k>.*`, `encoder.norm`, `decoder.*`,
//! `head.*`); [`Femba`] holds the handles and the geometry.

pub mod checkpoint;
pub mod config;
pub mod mask;

use rand::Rng;
use thiserror::Error;

use crate::data::Scheme;
use crate::graph::{Graph, Var};
use crate::params::{init, ParamId, ParamStore};
use crate::ssm::{self, BiMambaBlock, SsmParams};
use crate::tensor::{Scalar, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta};
pub use config::{HeadKind, ModelConfig, Variant};
pub use mask::{mask_seed, sample_mask, MaskSet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config field {field}: {detail}")]
    Config { field: String, detail: String },
    #[error("input geometry: {0}")]
    Geometry(String),
    #[error("model has no {0}")]
    Missing(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

pub const DECODER_KERNEL: usize = 3;

/// Two "same" width-3 convolutions over the token axis with GELU between,
/// then a per-token linear map to `p·q` samples.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

/// Pooled two-layer GELU classifier, optionally preceded by one
/// forward-only Mamba block with a residual.
#[derive(Clone, Debug)]
pub struct Head {
    pub kind: HeadKind,
    pub scheme: Scheme,
    pub mamba: Option<SsmParams>,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Femba {
    pub config: ModelConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<BiMambaBlock>,
    pub final_norm: ParamId,
    pub decoder: Option<Decoder>,
    pub head: Option<Head>,
}

/// Which optional parts to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Parts {
    pub decoder: bool,
    pub head: Option<Scheme>,
}

impl Parts {
    pub const PRETRAIN: Parts = Parts {
        decoder: true,
        head: None,
    };
    pub const ENCODER: Parts = Parts {
        decoder: false,
        head: None,
    };

    pub fn classifier(scheme: Scheme) -> Self {
        Parts {
            decoder: false,
            head: Some(scheme),
        }
    }
}

impl Femba {
    /// Registers every parameter in `store` and returns the handles.
    pub fn new<T: Scalar, R: Rng>(config: &ModelConfig, parts: Parts, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, p, q) = (config.embed_dim, config.patch_c, config.patch_t);
        let n = config.num_tokens();
        let patch_w = store.add("tokenizer.patch_w", init::fan_in(rng, &[d, p, q], p * q));
        let patch_b = store.add("tokenizer.patch_b", init::fan_in(rng, &[d], p * q));
        let pos_embed = store.add("tokenizer.pos_embed", init::normal(rng, &[n, d], 0.02));
        let dims = config.ssm_dims();
        let blocks = (0..config.num_blocks)
            .map(|k| BiMambaBlock::new(store, &format!("encoder.blocks.{k}"), dims, rng))
            .collect();
        let final_norm = store.add("encoder.norm", Tensor::ones(vec![d]));

        let decoder = parts.decoder.then(|| {
            let k = DECODER_KERNEL;
            Decoder {
                conv1_w: store.add("decoder.conv1_w", init::fan_in(rng, &[d, d, k], d * k)),
                conv1_b: store.add("decoder.conv1_b", init::fan_in(rng, &[d], d * k)),
                conv2_w: store.add("decoder.conv2_w", init::fan_in(rng, &[d, d, k], d * k)),
                conv2_b: store.add("decoder.conv2_b", init::fan_in(rng, &[d], d * k)),
                proj_w: store.add("decoder.proj_w", init::fan_in(rng, &[d, p * q], d)),
                proj_b: store.add("decoder.proj_b", init::fan_in(rng, &[p * q], d)),
            }
        });

        let head = parts.head.map(|scheme| {
            let h = config.head_hidden;
            let k = scheme.num_outputs();
            let mamba = (config.head == HeadKind::MambaEnhanced).then(|| SsmParams::new(store, "head.mamba", dims, rng));
            Head {
                kind: config.head,
                scheme,
                mamba,
                fc1_w: store.add("head.fc1_w", init::fan_in(rng, &[d, h], d)),
                fc1_b: store.add("head.fc1_b", init::fan_in(rng, &[h], d)),
                fc2_w: store.add("head.fc2_w", init::fan_in(rng, &[h, k], h)),
                fc2_b: store.add("head.fc2_b", init::fan_in(rng, &[k], h)),
            }
        });

        Ok(Self {
            config: config.clone(),
            patch_w,
            patch_b,
            pos_embed,
            blocks,
            final_norm,
            decoder,
            head,
        })
    }

    pub fn parts(&self) -> Parts {
        Parts {
            decoder: self.decoder.is_some(),
            head: self.head.as_ref().map(|h| h.scheme),
        }
    }

    /// Ids of every tokenizer and encoder parameter.
    pub fn encoder_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.patch_b, self.pos_embed];
        for b in &self.blocks {
            ids.extend(b.ids());
        }
        ids.push(self.final_norm);
        ids
    }

    /// Pads a `(C × T)` window to the configured geometry, projects patches
    /// and adds positional embeddings. Returns `(N × d)` tokens in time-major
    /// order: token `t′·C′ + c′`.
    pub fn tokenize<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Var> {
        let cfg = &self.config;
        let padded = pad_window(x, cfg)?;
        let xv = g.constant(padded);
        let w = g.param(store, self.patch_w);
        let b = g.param(store, self.patch_b);
        let emb = g.conv2d_patch(xv, w, b)?; // d × C′ × T′
        let tok = g.permute(emb, &[2, 1, 0])?; // T′ × C′ × d
        let tok = g.reshape(tok, &[cfg.num_tokens(), cfg.embed_dim])?;
        let pos = g.param(store, self.pos_embed);
        Ok(g.add(tok, pos)?)
    }

    /// Zeroes the full embedded vector of every masked token.
    pub fn apply_mask<T: Scalar>(&self, g: &mut Graph<T>, tokens: Var, mask: &MaskSet) -> Result<Var> {
        if mask.is_empty() {
            return Ok(tokens);
        }
        Ok(g.zero_rows(tokens, &mask.indices)?)
    }

    /// Bidirectional blocks followed by the final RMS norm.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, tokens: Var) -> Result<Var> {
        let mut h = tokens;
        for block in &self.blocks {
            h = ssm::bimamba_block(g, store, block, h)?;
        }
        let w = g.param(store, self.final_norm);
        Ok(g.rms_norm(h, w, ssm::RMS_EPS)?)
    }

    /// `(N × d)` encodings to `(N × p·q)` patch reconstructions.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, enc: Var) -> Result<Var> {
        let dec = self.decoder.as_ref().ok_or(ModelError::Missing("decoder"))?;
        let p = |g: &mut Graph<T>, id| g.param(store, id);
        let (w1, b1) = (p(g, dec.conv1_w), p(g, dec.conv1_b));
        let h = g.conv1d_same(enc, w1, b1)?;
        let h = g.gelu(h);
        let (w2, b2) = (p(g, dec.conv2_w), p(g, dec.conv2_b));
        let h = g.conv1d_same(h, w2, b2)?;
        let (wp, bp) = (p(g, dec.proj_w), p(g, dec.proj_b));
        let out = g.matmul(h, wp)?;
        Ok(g.add_row(out, bp)?)
    }

    /// Class scores: `(1 × k)` for window-level schemes, `(C′ × 13)` for the
    /// per-channel ones.
    pub fn classify<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, enc: Var) -> Result<Var> {
        let head = self.head.as_ref().ok_or(ModelError::Missing("head"))?;
        let cfg = &self.config;
        let mut h = enc;
        if let Some(m) = &head.mamba {
            let branch = ssm::mamba_block(g, store, m, h)?;
            h = g.add(h, branch)?;
        }
        let pooled = if head.scheme.is_per_channel() {
            let (ct, d) = (cfg.grid_c(), cfg.embed_dim);
            let rows = g.reshape(h, &[cfg.grid_t(), ct * d])?;
            let rows = g.mean_axis(rows, 0)?;
            g.reshape(rows, &[ct, d])?
        } else {
            let m = g.mean_axis(h, 0)?;
            g.reshape(m, &[1, cfg.embed_dim])?
        };
        let p = |g: &mut Graph<T>, id| g.param(store, id);
        let (w1, b1) = (p(g, head.fc1_w), p(g, head.fc1_b));
        let z = g.matmul(pooled, w1)?;
        let z = g.add_row(z, b1)?;
        let z = g.gelu(z);
        let (w2, b2) = (p(g, head.fc2_w), p(g, head.fc2_b));
        let z = g.matmul(z, w2)?;
        Ok(g.add_row(z, b2)?)
    }

    /// tokenize → mask → encode → decode.
    pub fn reconstruct<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        mask: &MaskSet,
    ) -> Result<Var> {
        let tok = self.tokenize(g, store, x)?;
        let tok = self.apply_mask(g, tok, mask)?;
        let enc = self.encode(g, store, tok)?;
        self.decode(g, store, enc)
    }

    /// tokenize → encode → classify.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Var> {
        let tok = self.tokenize(g, store, x)?;
        let enc = self.encode(g, store, tok)?;
        self.classify(g, store, enc)
    }
}

/// Right-pads `(C × T)` with zeros to the configured `(C′·p × T′·q)`.
pub fn pad_window<T: Scalar>(x: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let (c, t) = x.dims2("tokenize")?;
    if c < cfg.patch_c || t < cfg.patch_t {
        return Err(ModelError::Geometry(format!(
            "window ({c} × {t}) is smaller than one ({} × {}) patch",
            cfg.patch_c, cfg.patch_t
        )));
    }
    if c != cfg.channels || t != cfg.samples {
        return Err(ModelError::Geometry(format!(
            "window is ({c} × {t}) but the model was built for ({} × {})",
            cfg.channels, cfg.samples
        )));
    }
    let (pc, pt) = (cfg.grid_c() * cfg.patch_c, cfg.grid_t() * cfg.patch_t);
    if (pc, pt) == (c, t) {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros(vec![pc, pt]);
    for r in 0..c {
        out.data_mut()[r * pt..r * pt + t].copy_from_slice(x.row(r));
    }
    Ok(out)
}

/// Patches of a padded window as `(N × p·q)` rows in token order; each row is
/// its `p × q` patch flattened row-major.
pub fn extract_patches<T: Scalar>(x: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let padded = pad_window(x, cfg)?;
    let (p, q) = (cfg.patch_c, cfg.patch_t);
    let (gc, gt) = (cfg.grid_c(), cfg.grid_t());
    let width = gt * q;
    let mut out = Vec::with_capacity(gc * gt * p * q);
    for tp in 0..gt {
        for cp in 0..gc {
            for i in 0..p {
                let row = (cp * p + i) * width + tp * q;
                out.extend_from_slice(&padded.data()[row..row + q]);
            }
        }
    }
    Ok(Tensor::new(vec![gc * gt, p * q], out)?)
}

/// Inverse of [`extract_patches`], cropped back to `(C × T)` of the config.
pub fn assemble_patches<T: Scalar>(patches: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let (p, q) = (cfg.patch_c, cfg.patch_t);
    let (gc, gt) = (cfg.grid_c(), cfg.grid_t());
    let (rows, cols) = patches.dims2("assemble_patches")?;
    if rows != gc * gt || cols != p * q {
        return Err(TensorError::ShapeMismatch {
            op: "assemble_patches",
            expected: vec![gc * gt, p * q],
            actual: vec![rows, cols],
        }
        .into());
    }
    let (c, t) = (cfg.channels, cfg.samples);
    let mut out = Tensor::zeros(vec![c, t]);
    for tp in 0..gt {
        for cp in 0..gc {
            let patch = patches.row(tp * gc + cp);
            for i in 0..p {
                let ch = cp * p + i;
                if ch >= c {
                    break;
                }
                for j in 0..q {
                    let s = tp * q + j;
                    if s < t {
                        out.data_mut()[ch * t + s] = patch[i * q + j];
                    }
                }
            }
        }
    }
    Ok(out)
}
