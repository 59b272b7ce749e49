//! Transformer fusion head: the encoder turns the base features of one ray's
//! samples into semantic features, the decoder cross-attends to the ray's
//! pixel-level foundation feature (a single memory token), and the residual
//! sum of both is projected to per-sample class logits.
//!
//! Layers are pre-norm (`x + Sublayer(LN(x))`), so zeroing the cross-attention
//! output projection makes the prior injection an exact no-op.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_layer_norm, init_linear, layer_norm, linear, ParamSession, ParamStore};
use crate::tape::{Matrix, Tape, VarId};

pub const FUSION_PREFIX: &str = "fusion.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub model_dim: usize,
    pub head_count: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub feedforward_dim: usize,
    /// Class count L; the width of the semantic attribute.
    pub semantic_dim: usize,
    /// Add a sinusoidal encoding of sample depth to the token inputs.
    /// Disabled, the head is permutation-equivariant over samples.
    pub depth_encoding: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            head_count: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            feedforward_dim: 128,
            semantic_dim: 2,
            depth_encoding: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0
            || self.head_count == 0
            || self.encoder_layers == 0
            || self.decoder_layers == 0
            || self.feedforward_dim == 0
            || self.semantic_dim == 0
        {
            return Err(Error::InvalidArgument(
                "fusion config fields must be positive".into(),
            ));
        }
        if self.model_dim % self.head_count != 0 {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} not divisible by head_count {}",
                self.model_dim, self.head_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FusionHead {
    pub config: FusionConfig,
    pub base_dim: usize,
    pub prior_dim: usize,
}

fn init_attention(store: &mut ParamStore, prefix: &str, dim: usize, seed: u64) {
    for part in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{part}"), dim, dim, seed);
    }
}

impl FusionHead {
    pub fn init(
        store: &mut ParamStore,
        config: FusionConfig,
        base_dim: usize,
        prior_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        init_linear(store, "fusion.in_proj", base_dim, d, seed);
        init_linear(store, "fusion.prior_proj", prior_dim, d, seed);
        for i in 0..config.encoder_layers {
            let p = format!("fusion.enc.{i}");
            init_layer_norm(store, &format!("{p}.ln1"), d);
            init_attention(store, &format!("{p}.attn"), d, seed);
            init_layer_norm(store, &format!("{p}.ln2"), d);
            init_linear(store, &format!("{p}.ff.0"), d, config.feedforward_dim, seed);
            init_linear(store, &format!("{p}.ff.1"), config.feedforward_dim, d, seed);
        }
        init_layer_norm(store, "fusion.enc_norm", d);
        for i in 0..config.decoder_layers {
            let p = format!("fusion.dec.{i}");
            init_layer_norm(store, &format!("{p}.ln1"), d);
            init_attention(store, &format!("{p}.self"), d, seed);
            init_layer_norm(store, &format!("{p}.ln2"), d);
            init_attention(store, &format!("{p}.cross"), d, seed);
            init_layer_norm(store, &format!("{p}.ln3"), d);
            init_linear(store, &format!("{p}.ff.0"), d, config.feedforward_dim, seed);
            init_linear(store, &format!("{p}.ff.1"), config.feedforward_dim, d, seed);
        }
        init_layer_norm(store, "fusion.dec_norm", d);
        init_linear(store, "fusion.out_proj", d, config.semantic_dim, seed);
        Ok(Self {
            config,
            base_dim,
            prior_dim,
        })
    }

    pub fn from_store(store: &ParamStore, config: FusionConfig) -> Result<Self> {
        config.validate()?;
        if !store.contains("fusion.in_proj.w") {
            return Err(Error::ConfigMismatch(
                "store is missing fusion parameters".into(),
            ));
        }
        let base_dim = store.value("fusion.in_proj.w").nrows();
        let prior_dim = store.value("fusion.prior_proj.w").nrows();
        Ok(Self {
            config,
            base_dim,
            prior_dim,
        })
    }

    fn attention(
        &self,
        tape: &mut Tape,
        sess: &mut ParamSession,
        prefix: &str,
        queries: VarId,
        memory: VarId,
        blocks: usize,
    ) -> VarId {
        let q = linear(tape, sess, &format!("{prefix}.q"), queries);
        let k = linear(tape, sess, &format!("{prefix}.k"), memory);
        let v = linear(tape, sess, &format!("{prefix}.v"), memory);
        let attn = tape.block_attention(q, k, v, blocks, self.config.head_count);
        linear(tape, sess, &format!("{prefix}.o"), attn)
    }

    fn feedforward(
        &self,
        tape: &mut Tape,
        sess: &mut ParamSession,
        prefix: &str,
        x: VarId,
    ) -> VarId {
        let h = linear(tape, sess, &format!("{prefix}.0"), x);
        let h = tape.relu(h);
        linear(tape, sess, &format!("{prefix}.1"), h)
    }

    /// Encoder over the samples of each ray: base features (rays*n, base_dim)
    /// to semantic features `s` (rays*n, model_dim). `depths` are the
    /// normalized sample depths used for the optional depth encoding.
    pub fn encode_samples(
        &self,
        tape: &mut Tape,
        sess: &mut ParamSession,
        base: VarId,
        depths: Option<ArrayView1<f64>>,
        rays: usize,
        samples: usize,
    ) -> Result<VarId> {
        if samples == 0 || rays == 0 {
            return Err(Error::InvalidArgument(
                "encode_samples: empty sample sequence".into(),
            ));
        }
        let (rows, cols) = tape.shape(base);
        if rows != rays * samples || cols != self.base_dim {
            return Err(Error::ShapeMismatch(format!(
                "encode_samples: base is {rows}x{cols}, expected {}x{}",
                rays * samples,
                self.base_dim
            )));
        }
        let mut x = linear(tape, sess, "fusion.in_proj", base);
        if self.config.depth_encoding {
            let depths = depths.ok_or_else(|| {
                Error::InvalidArgument("depth encoding enabled but no depths supplied".into())
            })?;
            if depths.len() != rows {
                return Err(Error::ShapeMismatch(format!(
                    "encode_samples: {} depths for {rows} tokens",
                    depths.len()
                )));
            }
            let pe = tape.leaf(depth_encoding(depths, self.config.model_dim));
            x = tape.add(x, pe);
        }
        for i in 0..self.config.encoder_layers {
            let p = format!("fusion.enc.{i}");
            let normed = layer_norm(tape, sess, &format!("{p}.ln1"), x);
            let attn = self.attention(tape, sess, &format!("{p}.attn"), normed, normed, rays);
            x = tape.add(x, attn);
            let normed = layer_norm(tape, sess, &format!("{p}.ln2"), x);
            let ff = self.feedforward(tape, sess, &format!("{p}.ff"), normed);
            x = tape.add(x, ff);
        }
        Ok(layer_norm(tape, sess, "fusion.enc_norm", x))
    }

    /// Decoder: queries are the encoded samples, memory is the single
    /// projected pixel-feature token of each ray. `prior = None` is the
    /// no-prior ablation (cross-attention sublayers skipped entirely).
    pub fn decode_with_prior(
        &self,
        tape: &mut Tape,
        sess: &mut ParamSession,
        s: VarId,
        prior: Option<VarId>,
        rays: usize,
        samples: usize,
    ) -> Result<VarId> {
        let (rows, _) = tape.shape(s);
        if rows != rays * samples {
            return Err(Error::ShapeMismatch(format!(
                "decode_with_prior: {rows} tokens for {rays} rays x {samples} samples"
            )));
        }
        let memory = match prior {
            Some(p) => {
                let (prows, pcols) = tape.shape(p);
                if prows != rays {
                    return Err(Error::ShapeMismatch(format!(
                        "decode_with_prior: {prows} prior rows for {rays} rays"
                    )));
                }
                if pcols != self.prior_dim {
                    return Err(Error::FeatureDimMismatch {
                        expected: self.prior_dim,
                        got: pcols,
                    });
                }
                Some(linear(tape, sess, "fusion.prior_proj", p))
            }
            None => None,
        };
        let mut x = s;
        for i in 0..self.config.decoder_layers {
            let p = format!("fusion.dec.{i}");
            let normed = layer_norm(tape, sess, &format!("{p}.ln1"), x);
            let attn = self.attention(tape, sess, &format!("{p}.self"), normed, normed, rays);
            x = tape.add(x, attn);
            if let Some(mem) = memory {
                let normed = layer_norm(tape, sess, &format!("{p}.ln2"), x);
                let cross = self.attention(tape, sess, &format!("{p}.cross"), normed, mem, rays);
                x = tape.add(x, cross);
            }
            let normed = layer_norm(tape, sess, &format!("{p}.ln3"), x);
            let ff = self.feedforward(tape, sess, &format!("{p}.ff"), normed);
            x = tape.add(x, ff);
        }
        Ok(layer_norm(tape, sess, "fusion.dec_norm", x))
    }

    /// Residual sum at model width, then projection to the L-dimensional
    /// semantic attribute consumed by the semantic rendering equation.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        sess: &mut ParamSession,
        s: VarId,
        s1: VarId,
    ) -> Result<VarId> {
        if tape.shape(s) != tape.shape(s1) {
            return Err(Error::ShapeMismatch(format!(
                "fuse: {:?} vs {:?}",
                tape.shape(s),
                tape.shape(s1)
            )));
        }
        let sum = tape.add(s, s1);
        Ok(linear(tape, sess, "fusion.out_proj", sum))
    }

    /// Full head: base features and optional per-ray prior to semantic
    /// attributes (rays*n, L).
    pub fn forward(
        &self,
        tape: &mut Tape,
        sess: &mut ParamSession,
        base: VarId,
        depths: Option<ArrayView1<f64>>,
        prior: Option<VarId>,
        rays: usize,
        samples: usize,
    ) -> Result<VarId> {
        let s = self.encode_samples(tape, sess, base, depths, rays, samples)?;
        let s1 = self.decode_with_prior(tape, sess, s, prior, rays, samples)?;
        self.fuse(tape, sess, s, s1)
    }

    /// Inference helper for rendering: semantic attributes as plain values.
    pub fn infer(
        &self,
        store: &ParamStore,
        base: &Matrix,
        depths: Option<ArrayView1<f64>>,
        prior: Option<&Matrix>,
        rays: usize,
        samples: usize,
    ) -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut sess = ParamSession::new(store);
        let base = tape.leaf(base.clone());
        let prior = prior.map(|p| tape.leaf(p.clone()));
        let s2 = self.forward(&mut tape, &mut sess, base, depths, prior, rays, samples)?;
        Ok(tape.value(s2).clone())
    }
}

/// Sinusoidal encoding of normalized sample depth.
fn depth_encoding(depths: ArrayView1<f64>, dim: usize) -> Matrix {
    let mut pe = Matrix::zeros((depths.len(), dim));
    for (r, &t) in depths.iter().enumerate() {
        let pos = t * 100.0;
        for i in 0..dim / 2 {
            let theta = pos / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe[[r, 2 * i]] = theta.sin();
            pe[[r, 2 * i + 1]] = theta.cos();
        }
    }
    pe
}

/// Zero the cross-attention output projections; with pre-norm residuals this
/// makes the forward pass equal the no-prior ablation exactly.
pub fn zero_cross_attention_output(store: &mut ParamStore, config: &FusionConfig) {
    for i in 0..config.decoder_layers {
        let w = format!("fusion.dec.{i}.cross.o.w");
        let b = format!("fusion.dec.{i}.cross.o.b");
        store.set_value(&w, Matrix::zeros(store.value(&w).dim()));
        store.set_value(&b, Matrix::zeros(store.value(&b).dim()));
    }
}
